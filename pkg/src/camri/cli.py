"""Command-line entry point: ``camri {train,grid,contour,scatter,report}``.

Exit codes: 0 success, 2 configuration/usage/input error, 3 runtime error.
Config leaves can be overridden after the subcommand as ``--section.key=value``.
"""

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

from camri.config import OUTPUT_ROOT_ENV, build_dataset, load_config
from camri.data import load_csv, split
from camri.errors import (
    CamriError,
    ConfigError,
    ConsistencyError,
    DataIOError,
    FormatError,
    InvalidInputError,
    UndefinedRecallError,
    UnsupportedDimensionError,
    UnsupportedSizeError,
)
from camri.experiment import (
    KAPPA_FREE,
    GridSpec,
    TrialReport,
    TrialWriter,
    default_grid,
    evaluate,
    fit,
    pick_important_classes,
    read_trial_csv,
    run_trials,
    trial_params,
    write_summary,
)
from camri.landscape import (
    DEFAULT_RANGE,
    DEFAULT_RESOLUTION,
    contour_grid,
    default_weight_layout,
    parse_weight_layout,
    scatter_table,
    write_contour_csv,
    write_scatter_csv,
)
from camri.losses import build_penalty_config
from camri.metrics import write_angle_csv, write_confusion_csv
from camri.network import load_checkpoint, save_checkpoint

log = logging.getLogger("camri")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3

# Errors caused by what the user supplied rather than by the computation.
USAGE_ERRORS = (
    ConfigError,
    FormatError,
    ConsistencyError,
    DataIOError,
    InvalidInputError,
    UnsupportedDimensionError,
    UnsupportedSizeError,
    UndefinedRecallError,
)


class UsageError(Exception):
    pass


def resolve_output(path):
    """Prefix a relative output path with the output-root env var, if set."""
    path = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def _overrides(extra):
    bad = [a for a in extra if not (a.startswith("--") and "=" in a and "." in a.split("=", 1)[0])]
    if bad:
        raise UsageError(f"unrecognized arguments: {' '.join(bad)}")
    return [a[2:] for a in extra]


def _config(args, extra):
    cfg = load_config(args.config, _overrides(extra))
    out = resolve_output(args.out) if getattr(args, "out", None) else cfg.output_dir
    return cfg, out


def _write_rows(path, rows):
    with open(path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)


# ------------------------------------------------------------------- commands

def cmd_train(args, extra):
    cfg, out = _config(args, extra)
    dataset = build_dataset(cfg)
    kind = cfg.loss["kind"]
    params = trial_params(kind, cfg.loss["params"], cfg.loss["kappa"])
    build_penalty_config(kind, dataset.K, int(cfg.loss["kappa"]), params or None)  # validate early
    seed = cfg.train.seed
    out.mkdir(parents=True, exist_ok=True)
    model, history, test_ds = fit(dataset, cfg.model, cfg.train, kind, params, seed, cfg.dataset["train_fraction"])
    report = TrialReport(kind, params, seed)
    evaluate(model, test_ds, report)

    save_checkpoint(out / "model.ckpt", model, seed)
    rows = [["metric", "class", "value"], ["accuracy", "", repr(report.accuracy)]]
    rows += [["recall", k, repr(float(r))] for k, r in enumerate(report.recalls)]
    _write_rows(out / "metrics.csv", rows)
    write_angle_csv(report.angles, out / "angles.csv")
    write_confusion_csv(report.confusion, out / "confusion.csv")
    hist = [["epoch", "loss", "train_accuracy"]]
    hist += [[h["epoch"], repr(h["loss"]), repr(h["train_accuracy"])] for h in history]
    _write_rows(out / "history.csv", hist)

    print(f"accuracy {report.accuracy:.4f}")
    for k, r in enumerate(report.recalls):
        print(f"recall[{k}] {r:.4f}")
    print(f"outputs written to {out}")
    return EXIT_OK


def _kappas_for(cfg, baseline):
    kappa = cfg.experiment["kappa"]
    if kappa == "auto":
        roles = dict(zip(("worst1", "worst2", "median"), pick_important_classes(baseline)))
        return list(dict.fromkeys(roles[t] for t in cfg.experiment["targets"]))
    if isinstance(kappa, list):
        return [int(k) for k in kappa]
    return [int(kappa)]


def _grid_for(cfg, kind, K, kappa):
    if cfg.loss["grid"] is not None and kind != "ce":
        return GridSpec(kind, [dict(p) for p in cfg.loss["grid"]], kappa)
    return default_grid(kind, K, kappa, lambdas=tuple(cfg.loss["lambdas"]))


def cmd_grid(args, extra):
    cfg, out = _config(args, extra)
    dataset = build_dataset(cfg)
    out.mkdir(parents=True, exist_ok=True)
    trials_path = out / "trials.csv"
    seeds = cfg.experiment["seeds"]
    frac = cfg.dataset["train_fraction"]
    jobs = args.jobs or cfg.experiment["jobs"]

    done = []
    if args.resume and trials_path.exists():
        done, K = read_trial_csv(trials_path)
        if K != dataset.K:
            raise ConsistencyError(f"{trials_path} has {K} recall columns, dataset has {dataset.K} classes")
        log.info("resuming with %d completed trials", len(done))
    skip = {(r.method, r.param_json, r.seed) for r in done}
    reports = list(done)

    writer = TrialWriter(trials_path, dataset.K, append=bool(done))
    try:
        def collect(rep):
            writer(rep)
            reports.append(rep)
            log.info("%s %s seed %d acc %s", rep.method, rep.param_json, rep.seed, rep.accuracy)

        run_trials(dataset, cfg.model, cfg.train, default_grid("ce", dataset.K, 0), seeds, frac, jobs, skip, collect)
        baseline = [r for r in reports if r.method == "ce"]
        kappas = _kappas_for(cfg, baseline)
        for method in cfg.methods:
            if method == "ce":
                continue
            for kappa in kappas[:1] if method in KAPPA_FREE else kappas:
                grid = _grid_for(cfg, method, dataset.K, kappa)
                run_trials(dataset, cfg.model, cfg.train, grid, seeds, frac, jobs, skip, collect)
    except KeyboardInterrupt:
        writer.close()
        print(f"interrupted; {len(reports)} trial rows kept in {trials_path} (rerun with --resume)", file=sys.stderr)
        return EXIT_RUNTIME
    writer.close()

    write_summary(reports, out / "summary.csv", out / "summary.md", kappas)
    print((out / "summary.md").read_text(), end="")
    print(f"trials: {trials_path}")
    return EXIT_OK


def _parse_param(text):
    if "=" not in text:
        raise UsageError(f"--param expects key=value, got {text!r}")
    key, value = text.split("=", 1)
    try:
        return key.strip(), float(value)
    except ValueError:
        raise UsageError(f"--param {key}: {value!r} is not a number") from None


def cmd_contour(args, extra):
    if extra:
        raise UsageError(f"unrecognized arguments: {' '.join(extra)}")
    W = parse_weight_layout(args.weights) if args.weights else default_weight_layout()
    point = dict(_parse_param(p) for p in args.param)
    if args.loss == "camri" and "m" in point and "mu" not in point:
        point["mu"] = point.pop("m")
    cfg = build_penalty_config(args.loss, W.shape[1], args.kappa, point or None)
    lo, hi = args.range
    if not lo < hi:
        raise UsageError("--range needs lo < hi")
    if args.resolution < 2:
        raise UsageError("--resolution must be at least 2")
    points, values = contour_grid(cfg, W, label=args.label, lo=lo, hi=hi, resolution=args.resolution)
    out = resolve_output(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_contour_csv(out, points, values)
    print(f"{len(values)} grid points written to {out}")
    return EXIT_OK


def cmd_scatter(args, extra):
    if args.config:
        cfg = load_config(args.config, _overrides(extra))
        dataset = build_dataset(cfg)
        frac = cfg.dataset["train_fraction"]
    else:
        if extra:
            raise UsageError(f"unrecognized arguments: {' '.join(extra)}")
        dataset = load_csv(args.data)
        frac = args.train_fraction
    model, seed = load_checkpoint(args.checkpoint)
    if model.config.input_dim != dataset.input_dim:
        raise ConsistencyError(f"checkpoint expects input_dim {model.config.input_dim}, dataset has {dataset.input_dim}")
    _, test_ds = split(dataset, frac, seed)
    labels, zn, wn = scatter_table(model, test_ds.X, test_ds.labels)
    out = resolve_output(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_scatter_csv(out, labels, zn, wn)
    print(f"{len(labels)} feature rows and {wn.shape[1]} weight rows written to {out}")
    return EXIT_OK


def cmd_report(args, extra):
    if extra:
        raise UsageError(f"unrecognized arguments: {' '.join(extra)}")
    reports, _ = read_trial_csv(args.trials)
    out = resolve_output(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_summary(reports, out / "summary.csv", out / "summary.md", args.kappa or None)
    print((out / "summary.md").read_text(), end="")
    return EXIT_OK


# --------------------------------------------------------------------- parser

def build_parser():
    parser = argparse.ArgumentParser(prog="camri", description="Class-sensitive angular margin experiments.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model from a config file")
    p.add_argument("config")
    p.add_argument("--out", help="output directory (default: output_dir from the config)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("grid", help="baseline plus penalty-grid trials, then the summary table")
    p.add_argument("config")
    p.add_argument("--out", help="output directory (default: output_dir from the config)")
    p.add_argument("--resume", action="store_true", help="skip trials already in trials.csv")
    p.add_argument("--jobs", type=int, default=None, help="worker processes (overrides experiment.jobs)")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("contour", help="per-sample loss over a 2-D feature grid")
    p.add_argument("--loss", required=True, choices=("ce", "wce", "crwwce", "wasserstein", "l2softmax", "arcface", "camri"))
    p.add_argument("--param", action="append", default=[], metavar="KEY=VALUE", help="loss parameter, repeatable")
    p.add_argument("--weights", help='weight columns as "x,y;x,y;..." (default: unit vectors at 0/120/240 deg)')
    p.add_argument("--range", nargs=2, type=float, default=list(DEFAULT_RANGE), metavar=("LO", "HI"))
    p.add_argument("--resolution", type=int, default=DEFAULT_RESOLUTION)
    p.add_argument("--label", type=int, default=0, help="ground-truth class of the probe sample")
    p.add_argument("--kappa", type=int, default=0, help="important class for kappa-dependent losses")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_contour)

    p = sub.add_parser("scatter", help="normalized 2-D test features and weight directions")
    p.add_argument("--checkpoint", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", help="run config describing the dataset")
    src.add_argument("--data", help="dataset CSV (label,f0,f1,...)")
    p.add_argument("--train-fraction", type=float, default=0.7, help="split fraction when using --data")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_scatter)

    p = sub.add_parser("report", help="rebuild summary tables from a trial CSV")
    p.add_argument("--trials", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--kappa", type=int, action="append", help="important class(es) to tabulate")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args, extra)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"camri {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except USAGE_ERRORS as exc:
        print(f"camri {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CamriError, OSError) as exc:
        print(f"camri {args.command}: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
