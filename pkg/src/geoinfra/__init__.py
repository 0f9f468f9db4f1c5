"""geoinfra: infrastructure-quality prediction from raster patches, at desk scale.

A small numpy stack:

- ``autodiff``     tape-based reverse-mode differentiation (conv, batch
                   norm, pooling, linear, activations) with gradcheck
- ``models``       micro/resnet18 residual classifiers, Glorot init,
                   pretrained-checkpoint channel extension, backbone
                   freezing, GICK checkpoint files
- ``optim``        masked multi-label BCE, Adam, the epoch loop
- ``data``         survey CSV + GIRP raster formats, crops/flips,
                   train-split normalization, geocode-safe splits,
                   planted-signal synthetic generator
- ``baselines``    nightlights / OSM / spatial-interpolation / cross-label
                   oracle comparison predictors
- ``metrics``      confusion metrics, tie-aware AUROC, pooled K-fold
                   aggregation, simple matching coefficient
- ``experiments``  runner for CV training, stratification, country
                   hold-out, fine-tune sweeps, GeoJSON export
- ``cli``          the ``geoinfra`` command

See the demos/ directory for narrative walkthroughs of each capability.
"""

from geoinfra.autodiff import Tape, Tensor, backward, gradcheck
from geoinfra.data import (
    DEFAULT_BALANCES,
    OUTCOME_NAMES,
    RasterPatch,
    RasterSource,
    SurveyRecord,
    SynthSpec,
    synth_generate,
)
from geoinfra.metrics import MetricsReport, auroc, compute_report
from geoinfra.models import Checkpoint, NetworkConfig, build_network
from geoinfra.optim import AdamConfig, AdamState
from geoinfra.rng import RngState

__all__ = [
    "AdamConfig",
    "AdamState",
    "Checkpoint",
    "DEFAULT_BALANCES",
    "MetricsReport",
    "NetworkConfig",
    "OUTCOME_NAMES",
    "RasterPatch",
    "RasterSource",
    "RngState",
    "SurveyRecord",
    "SynthSpec",
    "Tape",
    "Tensor",
    "auroc",
    "backward",
    "build_network",
    "compute_report",
    "gradcheck",
    "synth_generate",
]
__version__ = "0.1.0"
