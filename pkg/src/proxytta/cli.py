"""Command-line entry point.

    proxytta gen-data        --config CFG [-o key=value ...]
    proxytta pretrain        --config CFG --run-name NAME [--seed N]
    proxytta init-adapt-layer --config CFG --checkpoint CKPT --run-name NAME
    proxytta prepare         --config CFG --checkpoint CKPT --run-name NAME
    proxytta adapt           --config CFG --checkpoint CKPT --run-name NAME
                             [--method proxytta|proxytta_fast] [--seed N]
    proxytta baseline        --config CFG --checkpoint CKPT --run-name NAME
                             [--variant no_adapt|bn_stats|bn_affine|cotta]
    proxytta sensitivity     --config CFG --checkpoint CKPT --run-name NAME
                             [--split source_eval|target] [--jobs N]
    proxytta centroid        --config CFG --checkpoint CKPT --run-name NAME
    proxytta report          --runs DIR [DIR ...] --out DIR

--config accepts a TOML file, a run-directory config.json snapshot, or the
name of a packaged preset (presets/<name>.toml). --seed replaces the data and
stage seeds so N independent trials are N invocations. Exit codes: 0 ok,
2 configuration, 3 data, 4 training/adaptation, 5 stream protocol.
"""

import argparse
import json
import sys

from .config import available_presets, load_config
from .errors import (
    ConfigurationError,
    ContractError,
    DataFormatError,
    DegenerateEmbeddingError,
    EmptySupportError,
    LifecycleError,
    ProxyTTAError,
    ReportError,
    StreamProtocolError,
    TrainingError,
)
from .report import emit_report
from .runner import RunDir, runs_root
from . import workflows

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_TRAINING = 4
EXIT_PROTOCOL = 5

_ERROR_CODES = (
    (StreamProtocolError, "protocol", EXIT_PROTOCOL),
    (TrainingError, "training", EXIT_TRAINING),
    (DegenerateEmbeddingError, "training", EXIT_TRAINING),
    (DataFormatError, "data", EXIT_DATA),
    (EmptySupportError, "data", EXIT_DATA),
    (ReportError, "data", EXIT_DATA),
    (ConfigurationError, "config", EXIT_CONFIG),
    (ContractError, "config", EXIT_CONFIG),
    (LifecycleError, "config", EXIT_CONFIG),
)


def _add_common(parser, checkpoint=False):
    parser.add_argument("--config", required=True, help="TOML config, preset, or config.json snapshot")
    parser.add_argument(
        "-o", "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="override a config value (repeatable), e.g. stage.adapt.learning_rate=1e-3",
    )
    parser.add_argument("--run-name", default=None, help="run directory name under the runs root")
    parser.add_argument("--runs-dir", default=None, help="runs root (default: $PROXYTTA_RUNS_DIR or ./runs)")
    parser.add_argument("--seed", type=int, default=None, help="replace data and stage seeds")
    parser.add_argument("--dry-run", action="store_true", help="validate and print the resolved config")
    if checkpoint:
        parser.add_argument("--checkpoint", required=True, help="input checkpoint archive")


def build_parser():
    parser = argparse.ArgumentParser(prog="proxytta", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True)

    _add_common(sub.add_parser("gen-data", help="write synthetic dataset directories"))
    _add_common(sub.add_parser("pretrain", help="supervised source pretraining"))
    _add_common(sub.add_parser("init-adapt-layer", help="insert + fine-tune the adaptation layer"), checkpoint=True)
    _add_common(sub.add_parser("prepare", help="learn the proxy mapping on source data"), checkpoint=True)

    adapt = sub.add_parser("adapt", help="single-pass streaming adaptation on the target split")
    _add_common(adapt, checkpoint=True)
    adapt.add_argument("--method", choices=["proxytta", "proxytta_fast"], default="proxytta")

    baseline = sub.add_parser("baseline", help="run a baseline adapter on the target split")
    _add_common(baseline, checkpoint=True)
    baseline.add_argument(
        "--variant", choices=["no_adapt", "bn_stats", "bn_affine", "cotta"], default="no_adapt"
    )

    sens = sub.add_parser("sensitivity", help="input-modality sensitivity study")
    _add_common(sens, checkpoint=True)
    sens.add_argument("--split", choices=["source", "source_eval", "target"], default="target")
    sens.add_argument("--jobs", type=int, default=1)

    _add_common(sub.add_parser("centroid", help="embedding-centroid analysis"), checkpoint=True)

    report = sub.add_parser("report", help="aggregate runs into a comparison report")
    report.add_argument("--runs", nargs="+", required=True, help="run directories to aggregate")
    report.add_argument("--out", default="report", help="output directory")
    report.add_argument("--jobs", type=int, default=1)

    presets = sub.add_parser("presets", help="list packaged preset configs")
    return parser


def _snapshot(cfg, args):
    command = {"verb": args.verb, "seed": getattr(args, "seed", None)}
    for key in ("method", "variant", "checkpoint", "run_name", "split", "jobs"):
        if hasattr(args, key):
            command[key] = getattr(args, key)
    return {"command": command, "config": cfg.as_dict()}


def _apply_seed(cfg, seed):
    if seed is not None:
        cfg.data.seed = seed
    return cfg.data.seed if seed is None else seed


def _run_dir(args, default_name):
    name = args.run_name or default_name
    return RunDir(runs_root(args.runs_dir), name)


def _dispatch(args):
    if args.verb == "presets":
        for name in available_presets():
            print(name)
        return 0
    if args.verb == "report":
        paths = emit_report(args.runs, args.out, jobs=args.jobs)
        print(f"report written: {paths['summary_csv']}")
        return 0

    cfg = load_config(args.config, args.overrides)
    seed = _apply_seed(cfg, args.seed)
    if args.dry_run:
        print(json.dumps(_snapshot(cfg, args), indent=2, sort_keys=True))
        return 0

    if args.verb == "gen-data":
        written = workflows.gen_data(cfg)
        for split, path in written.items():
            print(f"wrote {split}: {path}")
        return 0

    run = _run_dir(args, f"{args.verb.replace('-', '_')}-seed{seed}")
    run.write_config(_snapshot(cfg, args))

    if args.verb == "pretrain":
        workflows.run_pretrain(cfg, run, seed)
    elif args.verb == "init-adapt-layer":
        workflows.run_init(cfg, args.checkpoint, run, seed)
    elif args.verb == "prepare":
        workflows.run_prepare(cfg, args.checkpoint, run, seed)
    elif args.verb == "adapt":
        result = workflows.run_adapt(cfg, args.checkpoint, run, args.method, seed)
        rec = result.record
        print(f"{args.method}: MAE {rec.mae_mm:.2f} mm, RMSE {rec.rmse_mm:.2f} mm over {rec.n_pixels} px")
    elif args.verb == "baseline":
        result = workflows.run_baseline(cfg, args.checkpoint, run, args.variant, seed)
        rec = result.record
        print(f"{args.variant}: MAE {rec.mae_mm:.2f} mm, RMSE {rec.rmse_mm:.2f} mm over {rec.n_pixels} px")
    elif args.verb == "sensitivity":
        rows = workflows.run_sensitivity(cfg, args.checkpoint, run, seed, args.jobs, args.split)
        for r in rows:
            print(f"{r.input_mode:>10s} density={r.density:.2f}: MAE {r.mae_mm:.2f} mm")
    elif args.verb == "centroid":
        report = workflows.run_centroid(cfg, args.checkpoint, run)
        print(f"proxy_closer={report.proxy_closer}")
    else:  # pragma: no cover
        raise ConfigurationError(f"unknown verb {args.verb!r}")
    print(f"run directory: {run.path}")
    return 0


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except ProxyTTAError as exc:
        for klass, label, code in _ERROR_CODES:
            if isinstance(exc, klass):
                print(f"error[{label}]: {exc}", file=sys.stderr)
                return code
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
