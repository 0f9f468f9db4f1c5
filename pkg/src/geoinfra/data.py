"""Survey/raster ingestion, processing, leakage-safe splits, synthetic data.

File formats owned by this module:

Survey CSV (UTF-8, LF or CRLF), header exactly::

    geocode,lat,lon,country,urban,electricity,sewerage,piped_water,road,
    post_office,market_stalls,police_station,bank,cellphone,school,health_clinic

urban and each outcome cell is ``0``, ``1`` or empty (empty = missing).
Several rows may share a geocode: spatially overlapping enumeration areas
do, which is exactly why splits are made at geocode granularity.

Raster binary (little-endian), magic "GIRP", version 1::

    "GIRP" | u32 version | u8 source | u32 bands | u32 height | u32 width
    | f64 center_lat | f64 center_lon | f32 meters_per_pixel
    | bands*height*width f32 (band-major, row-major)

source codes: 0 landsat8 (6 bands), 1 sentinel1 (5 bands), 2 dmsp (1),
3 viirs (1), 4 synthetic (any band count).

Manifest CSV: header ``geocode,source,path`` with paths relative to the
manifest file. A geocode may map to one raster per source; ingestion picks
the first listed when several sources carry the same priority, which is
how the ascending-before-descending orbit preference is modeled.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, replace
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from geoinfra.errors import DataError
from geoinfra.rng import RngState

OUTCOME_NAMES = (
    "electricity", "sewerage", "piped_water", "road", "post_office",
    "market_stalls", "police_station", "bank", "cellphone", "school",
    "health_clinic",
)

# positive-label fractions observed in the survey round these tools target;
# used as fixture inputs and synthetic-generator defaults
DEFAULT_BALANCES = {
    "electricity": 0.667,
    "sewerage": 0.319,
    "piped_water": 0.613,
    "road": 0.553,
    "post_office": 0.246,
    "market_stalls": 0.685,
    "police_station": 0.364,
    "bank": 0.267,
    "cellphone": 0.936,
    "school": 0.866,
    "health_clinic": 0.586,
}

# cellphone and school sit out of default experiment grids: their extreme
# class imbalance destabilizes desk-scale folds (they stay loadable)
DEFAULT_EXPERIMENT_OUTCOMES = tuple(
    n for n in OUTCOME_NAMES if n not in ("cellphone", "school"))

SURVEY_FIELDS = ("geocode", "lat", "lon", "country", "urban") + OUTCOME_NAMES


class SurveyFormatError(DataError):
    pass


class RasterError(DataError):
    pass


class RasterFormatError(RasterError):
    """Wrong magic, version, or malformed structure."""


class RasterTruncatedError(RasterError):
    """Payload ends early."""


class RasterValidationError(RasterError):
    """Structurally sound but semantically inconsistent (bands vs source)."""


class ManifestError(DataError):
    pass


class NormalizationError(DataError):
    pass


# ---------------------------------------------------------------------------
# survey records


@dataclass
class SurveyRecord:
    geocode: str
    lat: float
    lon: float
    country: str
    urban: Optional[bool]
    outcomes: dict  # outcome name -> 0 | 1 | None (missing)

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0:
            raise SurveyFormatError(f"latitude {self.lat} outside [-90, 90]")
        if not -180.0 <= self.lon <= 180.0:
            raise SurveyFormatError(f"longitude {self.lon} outside [-180, 180]")
        unknown = set(self.outcomes) - set(OUTCOME_NAMES)
        if unknown:
            raise SurveyFormatError(f"unknown outcome names: {sorted(unknown)}")


def _parse_binary_cell(raw: str, what: str, line: int):
    raw = raw.strip()
    if raw == "":
        return None
    if raw in ("0", "1"):
        return int(raw)
    raise SurveyFormatError(f"line {line}: {what} must be 0, 1 or empty, got {raw!r}")


def load_survey(path) -> list:
    """Parse a survey CSV; every complaint carries its line number."""
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SurveyFormatError(f"{path}: empty survey file") from None
        if tuple(h.strip() for h in header) != SURVEY_FIELDS:
            unknown = [h for h in header if h.strip() not in SURVEY_FIELDS]
            if unknown:
                raise SurveyFormatError(f"{path}: unknown columns {unknown}")
            raise SurveyFormatError(
                f"{path}: header must be exactly {','.join(SURVEY_FIELDS)}")
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != len(SURVEY_FIELDS):
                raise SurveyFormatError(
                    f"line {line}: expected {len(SURVEY_FIELDS)} fields, got {len(row)}")
            geocode = row[0].strip()
            if not geocode:
                raise SurveyFormatError(f"line {line}: empty geocode")
            try:
                lat = float(row[1])
                lon = float(row[2])
            except ValueError:
                raise SurveyFormatError(
                    f"line {line}: lat/lon must be numeric, got {row[1]!r}, {row[2]!r}"
                ) from None
            country = row[3].strip()
            if not country:
                raise SurveyFormatError(f"line {line}: empty country")
            urban_raw = _parse_binary_cell(row[4], "urban", line)
            outcomes = {
                name: _parse_binary_cell(row[5 + i], name, line)
                for i, name in enumerate(OUTCOME_NAMES)
            }
            try:
                records.append(SurveyRecord(
                    geocode=geocode, lat=lat, lon=lon, country=country,
                    urban=None if urban_raw is None else bool(urban_raw),
                    outcomes=outcomes))
            except SurveyFormatError as e:
                raise SurveyFormatError(f"line {line}: {e}") from None
    return records


def save_survey(records: Sequence[SurveyRecord], path) -> None:
    def cell(v):
        return "" if v is None else str(int(v))

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SURVEY_FIELDS)
        for r in records:
            writer.writerow(
                [r.geocode, repr(r.lat), repr(r.lon), r.country, cell(r.urban)]
                + [cell(r.outcomes.get(name)) for name in OUTCOME_NAMES])


# ---------------------------------------------------------------------------
# raster patches


class RasterSource(IntEnum):
    landsat8 = 0
    sentinel1 = 1
    dmsp = 2
    viirs = 3
    synthetic = 4


SOURCE_BAND_COUNTS = {
    RasterSource.landsat8: 6,
    RasterSource.sentinel1: 5,
    RasterSource.dmsp: 1,
    RasterSource.viirs: 1,
}


@dataclass
class RasterPatch:
    """Multi-band patch centered on an enumeration area."""

    source: RasterSource
    pixels: np.ndarray  # (bands, height, width) float32
    center_lat: float
    center_lon: float
    meters_per_pixel: float

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 3:
            raise RasterValidationError(
                f"pixels must be (bands, height, width), got {self.pixels.shape}")
        expected = SOURCE_BAND_COUNTS.get(self.source)
        if expected is not None and self.bands != expected:
            raise RasterValidationError(
                f"source {self.source.name} declares {expected} bands, patch has {self.bands}")

    @property
    def bands(self) -> int:
        return self.pixels.shape[0]

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]


RASTER_MAGIC = b"GIRP"
RASTER_VERSION = 1
_RASTER_HEADER = struct.Struct("<BIIIddf")  # source, bands, h, w, lat, lon, mpp


def save_raster(patch: RasterPatch, path) -> None:
    with open(path, "wb") as fh:
        fh.write(RASTER_MAGIC)
        fh.write(struct.pack("<I", RASTER_VERSION))
        fh.write(_RASTER_HEADER.pack(
            int(patch.source), patch.bands, patch.height, patch.width,
            patch.center_lat, patch.center_lon, patch.meters_per_pixel))
        fh.write(np.ascontiguousarray(patch.pixels, dtype="<f4").tobytes())


def load_raster(path) -> RasterPatch:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != RASTER_MAGIC:
            raise RasterFormatError(f"bad raster magic {magic!r}, expected {RASTER_MAGIC!r}")
        raw = fh.read(4)
        if len(raw) != 4:
            raise RasterTruncatedError("truncated raster: version missing")
        (version,) = struct.unpack("<I", raw)
        if version != RASTER_VERSION:
            raise RasterFormatError(f"unsupported raster version {version}")
        raw = fh.read(_RASTER_HEADER.size)
        if len(raw) != _RASTER_HEADER.size:
            raise RasterTruncatedError("truncated raster: header incomplete")
        source_code, bands, h, w, lat, lon, mpp = _RASTER_HEADER.unpack(raw)
        try:
            source = RasterSource(source_code)
        except ValueError:
            raise RasterFormatError(f"unknown raster source code {source_code}") from None
        if bands < 1 or h < 1 or w < 1:
            raise RasterFormatError(f"non-positive raster dims {(bands, h, w)}")
        n_bytes = 4 * bands * h * w
        payload = fh.read(n_bytes)
        if len(payload) != n_bytes:
            raise RasterTruncatedError(
                f"truncated raster: expected {n_bytes} payload bytes, got {len(payload)}")
        trailing = fh.read(1)
        if trailing:
            raise RasterFormatError("raster file has trailing bytes past the payload")
    pixels = np.frombuffer(payload, dtype="<f4").reshape(bands, h, w).copy()
    return RasterPatch(source=source, pixels=pixels, center_lat=lat,
                       center_lon=lon, meters_per_pixel=mpp)


# ---------------------------------------------------------------------------
# processing ops


def center_crop(patch: RasterPatch, side: int) -> RasterPatch:
    """Centered side x side window; odd remainders leave the extra margin
    on the bottom/right edge."""
    if side > min(patch.height, patch.width):
        raise ValueError(
            f"crop side {side} exceeds patch size {patch.height}x{patch.width}")
    top = (patch.height - side) // 2
    left = (patch.width - side) // 2
    return replace(patch, pixels=patch.pixels[:, top:top + side, left:left + side].copy())


def random_crop(patch: RasterPatch, side: int, rng: RngState) -> RasterPatch:
    """Uniformly placed side x side window (the non-default crop mode)."""
    if side > min(patch.height, patch.width):
        raise ValueError(
            f"crop side {side} exceeds patch size {patch.height}x{patch.width}")
    top = int(rng.integers(0, patch.height - side + 1))
    left = int(rng.integers(0, patch.width - side + 1))
    return replace(patch, pixels=patch.pixels[:, top:top + side, left:left + side].copy())


def hflip(patch: RasterPatch) -> RasterPatch:
    return replace(patch, pixels=patch.pixels[:, :, ::-1].copy())


def random_hflip(patch: RasterPatch, rng: RngState, p: float = 0.5) -> RasterPatch:
    return hflip(patch) if rng.uniform() < p else patch


@dataclass(frozen=True)
class NormalizationStats:
    """Per-band mean/std; fit on the training split only."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def from_array(cls, x: np.ndarray) -> "NormalizationStats":
        """x is (n, bands, h, w) stacked training pixels."""
        if x.ndim != 4 or x.shape[0] < 1 or x.shape[2] * x.shape[3] * x.shape[0] < 2:
            raise NormalizationError(f"need >= 2 pixels per band, got shape {x.shape}")
        mean = x.mean(axis=(0, 2, 3), dtype=np.float64)
        std = x.std(axis=(0, 2, 3), dtype=np.float64)
        bad = np.nonzero(std <= 0)[0]
        if bad.size:
            raise NormalizationError(f"zero-variance band(s) {bad.tolist()}")
        return cls(mean=mean, std=std)


def fit_normalization(patches: Sequence[RasterPatch]) -> NormalizationStats:
    if not patches:
        raise NormalizationError("no patches to fit normalization on")
    stacked = np.stack([p.pixels for p in patches])
    return NormalizationStats.from_array(stacked)


def apply_normalization(patch: RasterPatch, stats: NormalizationStats) -> RasterPatch:
    scaled = (patch.pixels - stats.mean[:, None, None]) / stats.std[:, None, None]
    return replace(patch, pixels=scaled.astype(np.float32))


def denormalize(patch: RasterPatch, stats: NormalizationStats) -> RasterPatch:
    restored = patch.pixels * stats.std[:, None, None] + stats.mean[:, None, None]
    return replace(patch, pixels=restored.astype(np.float32))


def normalize_array(x: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    return ((x - stats.mean[None, :, None, None]) /
            stats.std[None, :, None, None]).astype(np.float32)


# ---------------------------------------------------------------------------
# splits


KFOLD = "kfold"
HOLDOUT = "holdout"
FRACTION = "fraction"

HOLDOUT_TRAIN, HOLDOUT_TEST = 0, 1
FRACTION_BASE, FRACTION_TUNE, FRACTION_TEST = 0, 1, 2


@dataclass(frozen=True)
class SplitSpec:
    """Geocode-granular fold assignment; every geocode has exactly one fold."""

    mode: str
    k: int
    assignments: dict  # geocode -> fold index in [0, k)
    seed: int
    holdout_country: Optional[str] = None
    fraction: Optional[float] = None

    def fold_of(self, geocode: str) -> int:
        return self.assignments[geocode]

    def geocodes_in_fold(self, fold: int) -> set:
        return {g for g, f in self.assignments.items() if f == fold}


def _unique_geocodes(records: Sequence[SurveyRecord]) -> list:
    seen = {}
    for r in records:
        seen.setdefault(r.geocode, None)
    return sorted(seen)


def make_splits(records: Sequence[SurveyRecord], seed: int, mode: str = KFOLD,
                k: int = 5, country: Optional[str] = None,
                fraction: Optional[float] = None,
                stratify_outcome: Optional[str] = None) -> SplitSpec:
    """Build a leakage-safe split at geocode granularity.

    kfold: shuffled geocodes in k near-even folds.
    holdout: every geocode touching `country` goes to the test fold.
    fraction: `fraction` of the held-out country's geocodes become the
      fine-tune train set, the rest its test set; sampling is stratified on
      `stratify_outcome` (first non-missing label per geocode) so positive
      proportions stay matched, falling back to unstratified when a stratum
      is empty.
    """
    if not records:
        raise ValueError("cannot split an empty record list")
    rng = RngState(seed).split(0xF01D)
    geocodes = _unique_geocodes(records)

    if mode == KFOLD:
        if k < 2:
            raise ValueError(f"k must be >= 2, got {k}")
        shuffled = rng.shuffle(geocodes)
        assignments = {}
        n = len(shuffled)
        base, extra = divmod(n, k)
        start = 0
        for fold in range(k):
            size = base + (1 if fold < extra else 0)
            for g in shuffled[start:start + size]:
                assignments[g] = fold
            start += size
        return SplitSpec(KFOLD, k, assignments, seed)

    if mode == HOLDOUT:
        test_geos = _country_geocodes(records, country)
        assignments = {g: (HOLDOUT_TEST if g in test_geos else HOLDOUT_TRAIN)
                       for g in geocodes}
        return SplitSpec(HOLDOUT, 2, assignments, seed, holdout_country=country)

    if mode == FRACTION:
        if fraction is None or not (0.0 <= fraction <= 0.8):
            raise ValueError(f"fraction must lie in [0, 0.8], got {fraction}")
        country_geos = sorted(_country_geocodes(records, country))
        strata = _stratify(records, country_geos, stratify_outcome)
        tune: set = set()
        for _label, geos in sorted(strata.items(), key=lambda kv: str(kv[0])):
            shuffled = rng.shuffle(sorted(geos))
            take = int(round(fraction * len(shuffled)))
            tune.update(shuffled[:take])
        assignments = {}
        for g in geocodes:
            if g not in set(country_geos):
                assignments[g] = FRACTION_BASE
            elif g in tune:
                assignments[g] = FRACTION_TUNE
            else:
                assignments[g] = FRACTION_TEST
        return SplitSpec(FRACTION, 3, assignments, seed,
                         holdout_country=country, fraction=fraction)

    raise ValueError(f"unknown split mode {mode!r}")


def _country_geocodes(records, country):
    if country is None:
        raise ValueError("holdout/fraction modes need a country")
    present = {r.country for r in records}
    if country not in present:
        raise DataError(f"unknown country {country!r}; present: {sorted(present)}")
    return {r.geocode for r in records if r.country == country}


def _stratify(records, geocodes, outcome):
    """Geocode -> stratum by the first non-missing label seen for `outcome`."""
    order = {g: i for i, g in enumerate(geocodes)}
    strata: dict = {}
    if outcome is None:
        strata[None] = list(geocodes)
        return strata
    label_of: dict = {}
    for r in records:
        if r.geocode in order and r.geocode not in label_of:
            val = r.outcomes.get(outcome)
            if val is not None:
                label_of[r.geocode] = val
    for g in geocodes:
        strata.setdefault(label_of.get(g, "missing"), []).append(g)
    return strata


def split_records(records: Sequence[SurveyRecord], spec: SplitSpec,
                  fold: int) -> list:
    return [r for r in records if spec.assignments[r.geocode] == fold]


# ---------------------------------------------------------------------------
# manifest


def write_manifest(path, entries: Sequence[tuple]) -> None:
    """entries: (geocode, source, relative_path) rows."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["geocode", "source", "path"])
        for geocode, source, rel in entries:
            writer.writerow([geocode, RasterSource(source).name, rel])


def load_manifest(path) -> dict:
    """geocode -> {source: absolute path}, first entry per (geocode, source) wins."""
    base = Path(path).parent
    mapping: dict = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["geocode", "source", "path"]:
            raise ManifestError(f"{path}: manifest header must be geocode,source,path")
        for row in reader:
            if not row:
                continue
            if len(row) != 3:
                raise ManifestError(f"{path} line {reader.line_num}: expected 3 fields")
            geocode, source_name, rel = row
            try:
                source = RasterSource[source_name.strip()]
            except KeyError:
                raise ManifestError(
                    f"{path} line {reader.line_num}: unknown source {source_name!r}") from None
            mapping.setdefault(geocode, {}).setdefault(source, base / rel)
    return mapping


def load_patches(manifest: dict, geocodes: Iterable[str],
                 source: Optional[RasterSource] = None) -> dict:
    """Load one patch per geocode, honoring per-record source priority."""
    out = {}
    for g in geocodes:
        if g not in manifest:
            raise ManifestError(f"geocode {g!r} missing from manifest")
        per_source = manifest[g]
        if source is not None:
            if source not in per_source:
                raise ManifestError(f"geocode {g!r} has no {source.name} raster")
            out[g] = load_raster(per_source[source])
        else:
            first = next(iter(per_source.values()))
            out[g] = load_raster(first)
    return out


# ---------------------------------------------------------------------------
# synthetic generation


@dataclass(frozen=True)
class SynthSpec:
    """Knobs for the planted-signal generator.

    Labels are thresholded Gaussian latents with exact marginal balance;
    with correlation_length > 0 the latent is a smooth spatial field, so
    nearby areas agree. Patch band ``i`` carries outcome ``i``'s signal as
    a mean shift of signal_strength per positive label (plus per-record
    latent noise), which is what the classifiers are expected to find.

    anti_signal_country reshapes outcome 0 for hold-out experiments: its
    signal then lives redundantly in bands 0 and 1 everywhere, but in the
    named country band 0 carries it *negated and doubled*. A model trained
    without that country learns both bands and transfers badly; its
    features still expose the signal, so a refit head recovers.
    """

    n_records: int
    bands: int = 4
    patch_size: int = 32
    outcomes: tuple = ("electricity", "sewerage", "piped_water", "road")
    balances: Optional[dict] = None
    correlation_length: float = 0.0
    countries: tuple = ("uganda", "tanzania", "kenya")
    seed: int = 0
    signal_strength: float = 1.2
    pixel_noise: float = 1.0
    label_noise: float = 0.2
    duplicate_geocode_fraction: float = 0.04
    urban_fraction: float = 0.4
    missing_fraction: float = 0.0
    anti_signal_country: Optional[str] = None
    meters_per_pixel: float = 30.0

    def resolved_balances(self) -> dict:
        table = dict(DEFAULT_BALANCES)
        if self.balances:
            table.update(self.balances)
        out = {}
        for name in self.outcomes:
            p = table[name]
            if not 0.0 < p < 1.0:
                raise ValueError(f"balance for {name} must be in (0, 1), got {p}")
            out[name] = p
        return out


@dataclass
class SynthDataset:
    records: list
    patches: dict  # geocode -> RasterPatch
    osm_counts: dict  # geocode -> (highway_count, building_count)


def _spatial_latent(lats, lons, length: float, rng: RngState) -> np.ndarray:
    """Standard-normal marginals with correlation decaying over `length` degrees."""
    n = lats.size
    if length <= 0:
        return rng.normal(size=n)
    m = 48  # anchor bumps: enough texture for desk-scale point counts
    a_lat = rng.uniform(lats.min(), lats.max(), size=m)
    a_lon = rng.uniform(lons.min(), lons.max(), size=m)
    w = rng.normal(size=m)
    d2 = (lats[:, None] - a_lat[None, :]) ** 2 + (lons[:, None] - a_lon[None, :]) ** 2
    k = np.exp(-d2 / (2.0 * length * length))
    denom = np.sqrt((k * k).sum(axis=1))
    # isolated points see no anchors; give them independent noise
    iso = denom < 1e-12
    g = np.zeros(n)
    g[~iso] = (k[~iso] @ w) / denom[~iso]
    if iso.any():
        g[iso] = rng.normal(size=int(iso.sum()))
    return g


def synth_generate(spec: SynthSpec) -> SynthDataset:
    """Deterministic synthetic survey + rasters + OSM-style counts."""
    balances = spec.resolved_balances()
    n = spec.n_records
    if n < 2:
        raise ValueError("need at least 2 records")
    n_dup_check = int(n * spec.duplicate_geocode_fraction)
    for name, p in balances.items():
        k_pos = int(round(p * (n - n_dup_check)))
        if k_pos < 1 or k_pos > (n - n_dup_check) - 1:
            raise ValueError(
                f"infeasible balance {p} for outcome {name} at n={n}: "
                "one class would receive no examples")
    if spec.anti_signal_country is not None:
        if spec.bands < 2:
            raise ValueError("anti_signal_country needs >= 2 bands")
        if spec.anti_signal_country not in spec.countries:
            raise ValueError(
                f"anti_signal_country {spec.anti_signal_country!r} not in countries")

    rng = RngState(spec.seed)
    r_pos = rng.split(1)
    r_label = rng.split(2)
    r_patch = rng.split(3)
    r_misc = rng.split(4)

    n_dup = int(n * spec.duplicate_geocode_fraction)
    n_primary = n - n_dup

    # one 8x8-degree box per country, laid out west to east
    country_idx = r_pos.integers(0, len(spec.countries), size=n_primary)
    lats = r_pos.uniform(0.0, 8.0, size=n_primary)
    lons = r_pos.uniform(0.0, 8.0, size=n_primary) + 10.0 * country_idx

    # rank-based labeling pins the positive count exactly at every
    # correlation length; a fixed quantile threshold would let big smooth
    # blobs swing the realized balance wildly between seeds
    labels = np.zeros((n_primary, len(spec.outcomes)), dtype=np.int64)
    for j, name in enumerate(spec.outcomes):
        g = _spatial_latent(lats, lons, spec.correlation_length, r_label.split(j))
        k_pos = int(round(balances[name] * n_primary))
        order = np.argsort(g, kind="mergesort")
        labels[order[:k_pos], j] = 1

    urban = r_misc.bernoulli(spec.urban_fraction, size=n_primary)

    records: list = []
    patches: dict = {}
    osm_counts: dict = {}
    s = spec.patch_size
    anti = spec.anti_signal_country

    for i in range(n_primary):
        geocode = f"G{i:05d}"
        country = spec.countries[int(country_idx[i])]
        pixels = (r_patch.normal(size=(spec.bands, s, s)) * spec.pixel_noise)
        shift_noise = r_patch.normal(size=len(spec.outcomes)) * spec.label_noise
        for j in range(len(spec.outcomes)):
            strength = spec.signal_strength * labels[i, j] + shift_noise[j]
            if anti is not None and j == 0:
                # redundant two-band signal; negated and doubled on band 0
                # inside the shifted country
                b0 = -2.0 * strength if country == anti else strength
                pixels[0] += b0
                pixels[1] += strength
            elif anti is not None:
                band = 2 + (j - 1) % (spec.bands - 2) if spec.bands > 2 else 1
                pixels[band] += strength
            else:
                pixels[j % spec.bands] += strength
        patches[geocode] = RasterPatch(
            source=RasterSource.synthetic, pixels=pixels.astype(np.float32),
            center_lat=float(lats[i]), center_lon=float(lons[i]),
            meters_per_pixel=spec.meters_per_pixel)

        outcomes: dict = {name: None for name in OUTCOME_NAMES}
        for j, name in enumerate(spec.outcomes):
            if spec.missing_fraction > 0 and r_misc.uniform() < spec.missing_fraction:
                outcomes[name] = None
            else:
                outcomes[name] = int(labels[i, j])
        records.append(SurveyRecord(
            geocode=geocode, lat=float(lats[i]), lon=float(lons[i]),
            country=country, urban=bool(urban[i]), outcomes=outcomes))

        # development proxy drives plausible OSM-ish counts
        dev = labels[i].mean() + 0.3 * float(urban[i])
        highway = int(round(math.exp(1.0 + 1.3 * dev + 0.3 * r_misc.normal())))
        building = int(round(math.exp(1.6 + 1.1 * dev + 0.3 * r_misc.normal())))
        osm_counts[geocode] = (max(highway, 0), max(building, 0))

    # duplicated geocodes: spatially overlapping areas share coordinates,
    # labels and the raster
    for _ in range(n_dup):
        src = records[int(r_misc.integers(0, n_primary))]
        records.append(SurveyRecord(
            geocode=src.geocode, lat=src.lat, lon=src.lon, country=src.country,
            urban=src.urban, outcomes=dict(src.outcomes)))

    return SynthDataset(records=records, patches=patches, osm_counts=osm_counts)


def write_synth_dataset(ds: SynthDataset, out_dir) -> dict:
    """Materialize a synthetic dataset; returns the file paths written."""
    out = Path(out_dir)
    (out / "rasters").mkdir(parents=True, exist_ok=True)
    survey_path = out / "survey.csv"
    save_survey(ds.records, survey_path)
    entries = []
    for geocode in sorted(ds.patches):
        rel = f"rasters/{geocode}.girp"
        save_raster(ds.patches[geocode], out / rel)
        entries.append((geocode, RasterSource.synthetic, rel))
    manifest_path = out / "manifest.csv"
    write_manifest(manifest_path, entries)
    osm_path = out / "osm.csv"
    with open(osm_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["geocode", "highway_count", "building_count"])
        for geocode in sorted(ds.osm_counts):
            h, b = ds.osm_counts[geocode]
            writer.writerow([geocode, h, b])
    return {"survey": survey_path, "manifest": manifest_path, "osm": osm_path}
