"""Command-line interface.

Subcommands: synth, ingest-check, train, baseline, holdout, finetune-sweep,
urban-rural, export-geojson, eval. `--config <path>` reads a flat
`key = value` file; any flag given on the command line overrides it.
`--seed` is mandatory for every stochastic command.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from geoinfra.data import (
    SynthSpec,
    load_manifest,
    load_raster,
    load_survey,
    synth_generate,
    write_synth_dataset,
)
from geoinfra.errors import DataError
from geoinfra.experiments import (
    ExperimentConfig,
    config_from_mappings,
    config_hash,
    emit_prediction_geojson,
    evaluate_predictions,
    parse_config_file,
    run_baseline,
    run_finetune_sweep,
    run_holdout,
    run_train_cv,
    run_urban_rural,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); we map usage to 1
        raise UsageError(message)


_STOCHASTIC = {"synth", "train", "baseline", "holdout", "finetune-sweep", "urban-rural"}


def _add_run_flags(sub):
    sub.add_argument("--config", help="flat key = value config file")
    sub.add_argument("--survey")
    sub.add_argument("--manifest")
    sub.add_argument("--osm")
    sub.add_argument("--out", dest="out_dir")
    sub.add_argument("--seed", type=int)
    sub.add_argument("--outcomes", help="comma-separated outcome names")
    sub.add_argument("--variant", choices=["micro", "resnet18"])
    sub.add_argument("--input-size", dest="input_size", type=int)
    sub.add_argument("--crop", choices=["center", "random"])
    sub.add_argument("--k-folds", dest="k_folds", type=int)
    sub.add_argument("--epochs", type=int)
    sub.add_argument("--batch-size", dest="batch_size", type=int)
    sub.add_argument("--lr", type=float)
    sub.add_argument("--beta1", type=float)
    sub.add_argument("--beta2", type=float)
    sub.add_argument("--weight-decay", dest="weight_decay", type=float)
    sub.add_argument("--lr-decay", dest="lr_decay", type=float)
    sub.add_argument("--threshold", type=float)
    sub.add_argument("--label-mode", dest="label_mode", choices=["multi", "single"])
    sub.add_argument("--early-stop-patience", dest="early_stop_patience", type=int)
    sub.add_argument("--band", type=int)
    sub.add_argument("--nightlights-style", dest="nightlights_style",
                     choices=["dmsp", "viirs"])
    sub.add_argument("--classifier")
    sub.add_argument("--country")
    sub.add_argument("--fractions", help="comma-separated fractions")
    sub.add_argument("--holdout-weight-decay", dest="holdout_weight_decay", type=float)
    sub.add_argument("--finetune-l2", dest="finetune_l2", type=float)


def build_parser() -> _Parser:
    parser = _Parser(prog="geoinfra",
                     description="desk-scale infrastructure-quality experiments")
    subs = parser.add_subparsers(dest="command", required=True)

    synth = subs.add_parser("synth", help="generate a synthetic dataset")
    synth.add_argument("--n", type=int, default=200)
    synth.add_argument("--seed", type=int)
    synth.add_argument("--out", required=True)
    synth.add_argument("--bands", type=int, default=4)
    synth.add_argument("--patch-size", dest="patch_size", type=int, default=32)
    synth.add_argument("--outcomes", default="electricity,sewerage,piped_water,road")
    synth.add_argument("--correlation-length", dest="correlation_length",
                       type=float, default=0.0)
    synth.add_argument("--countries", default="uganda,tanzania,kenya")
    synth.add_argument("--anti-signal-country", dest="anti_signal_country")
    synth.add_argument("--dup-fraction", dest="dup_fraction", type=float, default=0.04)

    ingest = subs.add_parser("ingest-check", help="validate survey/manifest/rasters")
    ingest.add_argument("--survey", required=True)
    ingest.add_argument("--manifest", required=True)
    ingest.add_argument("--osm")

    for name in ("train", "baseline", "holdout", "finetune-sweep", "urban-rural"):
        sub = subs.add_parser(name)
        _add_run_flags(sub)
        if name == "baseline":
            sub.add_argument("--kind", required=True,
                             choices=["nightlights", "osm", "spatial", "oracle"])

    geo = subs.add_parser("export-geojson", help="prediction table -> GeoJSON")
    geo.add_argument("--predictions", required=True)
    geo.add_argument("--outcome", required=True)
    geo.add_argument("--out", required=True)
    geo.add_argument("--threshold", type=float, default=0.5)

    ev = subs.add_parser("eval", help="recompute metrics from a prediction table")
    ev.add_argument("--predictions", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--threshold", type=float, default=0.5)
    return parser


def _experiment_config(args, kind: str) -> ExperimentConfig:
    file_layer = parse_config_file(args.config) if args.config else {}
    cli_layer = {}
    for key in ("survey", "manifest", "osm", "out_dir", "seed", "outcomes", "variant",
                "input_size", "crop", "k_folds", "epochs", "batch_size", "lr",
                "beta1", "beta2", "weight_decay", "lr_decay", "threshold",
                "label_mode", "early_stop_patience", "band", "nightlights_style",
                "classifier", "country", "fractions", "holdout_weight_decay",
                "finetune_l2"):
        value = getattr(args, key, None)
        if value is not None:
            cli_layer[key] = value
    if getattr(args, "kind", None):
        cli_layer["baseline_kind"] = args.kind
    defaults = {"kind": kind, "survey": "", "manifest": "", "out_dir": "out",
                "seed": int(args.seed)}
    config = config_from_mappings(defaults, file_layer, cli_layer)
    return config


def _cmd_synth(args) -> int:
    outcomes = tuple(o.strip() for o in args.outcomes.split(",") if o.strip())
    spec = SynthSpec(
        n_records=args.n, bands=args.bands, patch_size=args.patch_size,
        outcomes=outcomes, correlation_length=args.correlation_length,
        countries=tuple(c.strip() for c in args.countries.split(",") if c.strip()),
        seed=args.seed, duplicate_geocode_fraction=args.dup_fraction,
        anti_signal_country=args.anti_signal_country)
    ds = synth_generate(spec)
    paths = write_synth_dataset(ds, args.out)
    out = Path(args.out)
    cfg_lines = [
        "# generated by `geoinfra synth`",
        "survey = survey.csv",
        "manifest = manifest.csv",
        "osm = osm.csv",
        f"outcomes = {','.join(outcomes)}",
        "variant = micro",
        "epochs = 6",
        "batch_size = 16",
        "lr = 0.001",
    ]
    (out / "cfg").write_text("\n".join(cfg_lines) + "\n", encoding="utf-8")
    print(f"wrote {len(ds.records)} records, {len(ds.patches)} rasters -> {out}")
    for label, p in paths.items():
        print(f"  {label}: {p}")
    print(f"  config: {out / 'cfg'}")
    return 0


def _cmd_ingest_check(args) -> int:
    records = load_survey(args.survey)
    manifest = load_manifest(args.manifest)
    missing = [r.geocode for r in records if r.geocode not in manifest]
    if missing:
        raise DataError(f"{len(missing)} geocodes lack rasters, first: {missing[:5]}")
    n_rasters = 0
    for geocode, sources in manifest.items():
        for _source, path in sources.items():
            load_raster(path)
            n_rasters += 1
    counts = {}
    for r in records:
        for name, v in r.outcomes.items():
            if v is not None:
                a, b = counts.get(name, (0, 0))
                counts[name] = (a + v, b + 1)
    print(f"survey: {len(records)} records, "
          f"{len({r.geocode for r in records})} geocodes, "
          f"{len({r.country for r in records})} countries")
    print(f"rasters: {n_rasters} readable")
    for name, (pos, n) in sorted(counts.items()):
        print(f"  {name}: balance {pos / n:.3f} over {n} labeled")
    if args.osm:
        from geoinfra.baselines import load_osm_csv
        osm = load_osm_csv(args.osm)
        print(f"osm: {len(osm)} rows")
    return 0


def _resolve_relative_paths(config: ExperimentConfig, config_dir) -> ExperimentConfig:
    """Paths in a config file are relative to the file's directory."""
    from dataclasses import replace

    updates = {}
    for key in ("survey", "manifest", "osm"):
        value = getattr(config, key)
        if value and not Path(value).is_absolute() and not Path(value).exists():
            candidate = Path(config_dir) / value
            if candidate.exists():
                updates[key] = str(candidate)
    return replace(config, **updates) if updates else config


def _cmd_run(args, kind: str) -> int:
    config = _experiment_config(args, kind)
    if args.config:
        config = _resolve_relative_paths(config, Path(args.config).parent)
    if kind == "train":
        artifacts = run_train_cv(config)
    elif kind == "baseline":
        artifacts = run_baseline(config)
    elif kind == "holdout":
        if not config.country:
            raise UsageError("holdout requires --country")
        artifacts = run_holdout(config)
    elif kind == "finetune_sweep":
        if not config.country:
            raise UsageError("finetune-sweep requires --country")
        artifacts = run_finetune_sweep(config)
    elif kind == "urban_rural":
        urban, rural = run_urban_rural(config)
        print(f"config {config_hash(config)[:12]} seed {config.seed}")
        for artifacts in (urban, rural):
            print(f"  metrics: {artifacts.metrics_path}")
            for w in artifacts.warnings:
                print(f"  warning: {w}", file=sys.stderr)
        return 0
    else:
        raise UsageError(f"unknown command {kind}")
    print(f"config {config_hash(config)[:12]} seed {config.seed}")
    print(f"metrics: {artifacts.metrics_path}")
    print(f"predictions: {artifacts.predictions_path}")
    if artifacts.sweep_path:
        print(f"sweep: {artifacts.sweep_path}")
    for w in artifacts.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command in _STOCHASTIC and getattr(args, "seed", None) is None:
            raise UsageError(f"--seed is required for `{args.command}`")
        if args.command == "synth":
            return _cmd_synth(args)
        if args.command == "ingest-check":
            return _cmd_ingest_check(args)
        if args.command == "export-geojson":
            n = emit_prediction_geojson(args.predictions, args.outcome, args.out,
                                        args.threshold)
            print(f"wrote {n} features -> {args.out}")
            return 0
        if args.command == "eval":
            reports = evaluate_predictions(args.predictions, args.out, args.threshold)
            for name, rep in sorted(reports.items()):
                print(f"{name}: auroc {rep.auroc:.3f} accuracy {rep.accuracy:.3f}")
            print(f"metrics: {args.out}")
            return 0
        return _cmd_run(args, args.command.replace("-", "_"))
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failure
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
