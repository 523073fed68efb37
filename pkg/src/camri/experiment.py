"""Grid-search protocol: important-class choice, multi-seed trials, selection, tables.

A trial is one training run for one (method, grid point, seed). The seed fixes
the train/test split, the weight initialization and the shuffle order, so
different methods trained with the same seed see the same data split.
"""

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from camri.data import split
from camri.errors import (
    CamriError,
    DataIOError,
    FormatError,
    InvalidInputError,
    UndefinedRecallError,
)
from camri.losses import DEFAULT_LAMBDA, LOSS_KINDS, build_penalty_config
from camri.metrics import ConfusionMatrix, angle_stats, accuracy, confusion
from camri.network import forward, head_kind_for, init_model, predict, train

log = logging.getLogger(__name__)

ALL_METHODS = ("ce", "wce", "crwwce", "wasserstein", "arcface", "camri")
KAPPA_FREE = frozenset({"ce", "l2softmax", "arcface"})

WCE_GRID = tuple(float(4 * i) for i in range(1, 11))
CRWWCE_FN_GRID = (1.0,) + WCE_GRID
FP_GRID = tuple(round(1.0 + 0.2 * i, 10) for i in range(16))
MARGIN_GRID = tuple(i * math.pi / 64 for i in range(9))
SCALE_GRID = tuple(float(2**i) for i in range(7))


@dataclass
class GridSpec:
    kind: str
    points: list
    kappa: int = 0

    def __post_init__(self):
        if not self.points:
            raise InvalidInputError("grid must contain at least one point")

    def __len__(self):
        return len(self.points)


@dataclass
class TrialReport:
    method: str
    params: dict
    seed: int
    accuracy: float = math.nan
    recalls: np.ndarray = None
    confusion: ConfusionMatrix = None
    angles: object = None
    sinkhorn_iterations: int = 0
    converged: bool = True
    failed: bool = False
    error: str = ""
    features: np.ndarray = field(default=None, repr=False)
    weights: np.ndarray = field(default=None, repr=False)

    @property
    def param_json(self):
        return json.dumps(self.params, sort_keys=True)

    @property
    def ok(self):
        return not self.failed and self.converged


@dataclass
class SelectionResult:
    method: str
    kappa: int
    admissible: bool
    params: dict = None
    recall_mean: float = math.nan
    recall_std: float = math.nan
    accuracy_mean: float = math.nan
    accuracy_std: float = math.nan
    baseline_accuracy_mean: float = math.nan
    n_trials: int = 0
    n_failed: int = 0
    candidates: list = field(default_factory=list)


def default_grid(kind, K, kappa, lambdas=(DEFAULT_LAMBDA,)):
    """The penalty grid for ``kind``. Angular grids are margin x scale cross products."""
    if kind not in LOSS_KINDS:
        raise InvalidInputError(f"unknown loss kind {kind!r}")
    if kind == "ce":
        points = [{}]
    elif kind == "wce":
        points = [{"w": w} for w in WCE_GRID]
    elif kind == "crwwce":
        points = [{"fn": fn, "fp": fp} for fn in CRWWCE_FN_GRID for fp in FP_GRID]
    elif kind == "wasserstein":
        points = [{"c": c, "lam": lam} for lam in lambdas for c in FP_GRID]
    elif kind == "l2softmax":
        points = [{"s": s} for s in SCALE_GRID]
    elif kind == "arcface":
        points = [{"m": m, "s": s} for m in MARGIN_GRID for s in SCALE_GRID]
    else:
        points = [{"mu": mu, "s": s} for mu in MARGIN_GRID for s in SCALE_GRID]
    return GridSpec(kind, points, kappa)


def trial_params(kind, point, kappa):
    """Grid point plus kappa for methods whose loss depends on it."""
    if kind in KAPPA_FREE:
        return dict(point)
    return {**point, "kappa": int(kappa)}


def fit(dataset, model_config, train_config, kind, params, seed, train_fraction=0.7):
    """Split ``dataset`` with ``seed`` and train a model on the training part.

    Returns ``(model, history, test_split)``.
    """
    point = {k: v for k, v in params.items() if k != "kappa"}
    kappa = int(params.get("kappa", 0))
    cfg = build_penalty_config(kind, dataset.K, kappa, point)
    train_ds, test_ds = split(dataset, train_fraction, seed)
    mc = replace(model_config, input_dim=dataset.input_dim, n_classes=dataset.K, head=head_kind_for(kind))
    tc = replace(train_config, seed=int(seed))
    model = init_model(mc, seed)
    model, history = train(model, train_ds, cfg, tc)
    return model, history, test_ds


def evaluate(model, test_ds, report):
    """Fill accuracy, recalls, confusion matrix and angle statistics of ``report``."""
    preds = predict(model, test_ds.X)
    cm = confusion(preds, test_ds.labels, test_ds.K)
    report.confusion = cm
    report.accuracy = accuracy(cm)
    rows = cm.row_totals()
    report.recalls = np.where(rows > 0, np.diag(cm.counts) / np.maximum(rows, 1), np.nan)
    z, _ = forward(model, test_ds.X)
    report.angles = angle_stats(z, test_ds.labels, model.head_W)
    return z


def run_trial(dataset, model_config, train_config, kind, params, seed, train_fraction=0.7, keep_features=False):
    """Train one model and evaluate it on the held-out split for ``seed``.

    Training errors do not propagate; the report comes back flagged ``failed``.
    """
    report = TrialReport(kind, dict(params), int(seed))
    try:
        model, history, test_ds = fit(dataset, model_config, train_config, kind, params, seed, train_fraction)
    except CamriError as exc:
        report.failed = True
        report.converged = False
        report.error = str(exc)
        log.warning("trial %s %s seed %s failed: %s", kind, params, seed, exc)
        return report
    report.converged = all(h["sinkhorn_converged"] for h in history)
    report.sinkhorn_iterations = max(h["sinkhorn_max_iterations"] for h in history)
    z = evaluate(model, test_ds, report)
    if keep_features:
        report.features = z
        report.weights = model.head_W.copy()
    return report


def _run_job(job):
    return run_trial(*job)


def run_trials(dataset, model_config, train_config, grid, seeds, train_fraction=0.7, jobs=1, skip=(), on_report=None):
    """One trial per (grid point, seed), in grid-major order.

    ``skip`` holds ``(method, param_json, seed)`` keys already completed;
    ``on_report`` is called with each finished report in order (used to
    persist results incrementally).
    """
    if not seeds:
        raise InvalidInputError("at least one seed is required")
    jobs_list = []
    for point in grid.points:
        params = trial_params(grid.kind, point, grid.kappa)
        pj = json.dumps(params, sort_keys=True)
        for seed in seeds:
            if (grid.kind, pj, int(seed)) in skip:
                continue
            jobs_list.append((dataset, model_config, train_config, grid.kind, params, seed, train_fraction))
    reports = []
    if jobs > 1 and len(jobs_list) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for rep in pool.map(_run_job, jobs_list):
                reports.append(rep)
                if on_report:
                    on_report(rep)
    else:
        for job in jobs_list:
            rep = _run_job(job)
            reports.append(rep)
            if on_report:
                on_report(rep)
    return reports


def _mean(values):
    return math.fsum(values) / len(values) if values else math.nan


def _std(values):
    if not values:
        return math.nan
    mu = _mean(values)
    return math.sqrt(math.fsum((v - mu) ** 2 for v in values) / len(values))


def mean_recalls(reports):
    """Per-class recall averaged over successful reports."""
    good = [r for r in reports if r.ok]
    if not good:
        raise InvalidInputError("no successful reports")
    stacked = np.vstack([r.recalls for r in good])
    if np.any(np.isnan(stacked)):
        missing = sorted(set(np.flatnonzero(np.isnan(stacked).any(axis=0)).tolist()))
        raise UndefinedRecallError(f"classes {missing} are absent from some test split")
    return np.array([_mean(list(col)) for col in stacked.T])


def pick_important_classes(baseline_reports):
    """(worst1, worst2, median) classes by mean baseline recall.

    Ties go to the lower class index; for even K the lower median is used.
    """
    rec = mean_recalls(baseline_reports)
    order = sorted(range(len(rec)), key=lambda k: (rec[k], k))
    if len(order) < 2:
        raise InvalidInputError("need at least two classes")
    return order[0], order[1], order[(len(order) - 1) // 2]


def config_stats(reports, kappa):
    """Group reports by parameter set (first-seen order) and aggregate."""
    groups = {}
    for r in reports:
        groups.setdefault(r.param_json, []).append(r)
    stats = []
    for pj, reps in groups.items():
        good = [r for r in reps if r.ok]
        accs = [r.accuracy for r in good]
        recs = [float(r.recalls[kappa]) for r in good]
        stats.append(
            {
                "param_json": pj,
                "params": reps[0].params,
                "seeds": [r.seed for r in good],
                "accuracies": accs,
                "recalls": recs,
                "accuracy_mean": _mean(accs),
                "accuracy_std": _std(accs),
                "recall_mean": _mean(recs),
                "recall_std": _std(recs),
                "n_trials": len(reps),
                "n_failed": len(reps) - len(good),
            }
        )
    return stats


def select_best(reports, baseline_reports, kappa, per_seed=False):
    """Highest mean kappa-recall among configs whose mean accuracy >= the baseline's.

    With ``per_seed`` a config must also match or beat the baseline on every
    seed. If nothing qualifies the result has ``admissible=False``.
    """
    if not reports:
        raise InvalidInputError("no trial reports to select from")
    base_good = [r for r in baseline_reports if r.ok]
    if not base_good:
        raise InvalidInputError("no successful baseline reports")
    base_acc = {r.seed: r.accuracy for r in base_good}
    base_mean = _mean([r.accuracy for r in base_good])
    method = reports[0].method
    stats = config_stats(reports, kappa)
    best = None
    n_failed = 0
    for st in stats:
        n_failed += st["n_failed"]
        if not st["accuracies"]:
            continue
        missing = set(st["seeds"]) - set(base_acc)
        if missing:
            raise InvalidInputError(f"baseline lacks seeds {sorted(missing)}")
        ok = st["accuracy_mean"] >= base_mean
        if per_seed:
            ok = ok and all(a >= base_acc[s] for s, a in zip(st["seeds"], st["accuracies"]))
        st["admissible"] = ok
        if ok and (best is None or st["recall_mean"] > best["recall_mean"]):
            best = st
    result = SelectionResult(
        method=method,
        kappa=int(kappa),
        admissible=best is not None,
        baseline_accuracy_mean=base_mean,
        n_failed=n_failed,
        n_trials=sum(st["n_trials"] for st in stats),
        candidates=stats,
    )
    if best is not None:
        result.params = best["params"]
        result.recall_mean = best["recall_mean"]
        result.recall_std = best["recall_std"]
        result.accuracy_mean = best["accuracy_mean"]
        result.accuracy_std = best["accuracy_std"]
    return result


def baseline_result(baseline_reports, kappa):
    """Baseline row in the same shape as a selection result (always admissible)."""
    st = config_stats(baseline_reports, kappa)[0]
    return SelectionResult(
        method="ce",
        kappa=int(kappa),
        admissible=True,
        params={},
        recall_mean=st["recall_mean"],
        recall_std=st["recall_std"],
        accuracy_mean=st["accuracy_mean"],
        accuracy_std=st["accuracy_std"],
        baseline_accuracy_mean=st["accuracy_mean"],
        n_trials=st["n_trials"],
        n_failed=st["n_failed"],
        candidates=[st],
    )


# ---------------------------------------------------------------- persistence

def trial_csv_header(K):
    return ["method", "param_json", "seed", "accuracy"] + [f"recall_{k}" for k in range(K)] + ["converged"]


def trial_csv_row(rep, K):
    if rep.failed or rep.recalls is None:
        return [rep.method, rep.param_json, rep.seed, ""] + [""] * K + [0]
    return (
        [rep.method, rep.param_json, rep.seed, repr(float(rep.accuracy))]
        + [repr(float(v)) for v in rep.recalls]
        + [int(rep.converged)]
    )


class TrialWriter:
    """Appends trial rows to a CSV, flushing after each row."""

    def __init__(self, path, K, append=False):
        self.K = K
        new = not append
        self.fh = open(path, "a" if append else "w", newline="")
        self.writer = csv.writer(self.fh, lineterminator="\n")
        if new:
            self.writer.writerow(trial_csv_header(K))
            self.fh.flush()

    def __call__(self, rep):
        self.writer.writerow(trial_csv_row(rep, self.K))
        self.fh.flush()

    def close(self):
        self.fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_trial_csv(path):
    """Parse a trial CSV back into TrialReport objects (metrics only)."""
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataIOError(f"cannot read trial file {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise FormatError(f"{path}: empty trial file")
        rec_cols = [h for h in header if h.startswith("recall_")]
        K = len(rec_cols)
        if header != trial_csv_header(K):
            raise FormatError(f"{path}: unexpected header {header}")
        reports = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise FormatError(f"{path}: row {lineno} has {len(row)} fields, expected {len(header)}")
            try:
                method, pj, seed, acc = row[0], row[1], int(row[2]), row[3]
                params = json.loads(pj)
                converged = bool(int(row[-1]))
                if acc == "":
                    rep = TrialReport(method, params, seed, failed=True, converged=False)
                else:
                    recalls = np.array([float(v) for v in row[4 : 4 + K]])
                    rep = TrialReport(method, params, seed, float(acc), recalls, converged=converged)
            except (ValueError, json.JSONDecodeError) as exc:
                raise FormatError(f"{path}: row {lineno} is malformed: {exc}") from exc
            reports.append(rep)
    if not reports:
        raise FormatError(f"{path}: no trial rows")
    return reports, K


# --------------------------------------------------------------------- tables

def _fmt(mean, std):
    return f"{mean:.3f}±{std:.3f}"


def summarize(reports, kappas=None):
    """Selection results per (kappa, method) from a flat list of trial reports.

    Methods keep their first-appearance order; ``ce`` is the baseline. When
    ``kappas`` is None they are taken from the kappa-dependent rows, falling
    back to the worst baseline class.
    """
    baseline = [r for r in reports if r.method == "ce"]
    if not baseline:
        raise InvalidInputError("trial reports contain no cross-entropy baseline")
    methods = []
    for r in reports:
        if r.method != "ce" and r.method not in methods:
            methods.append(r.method)
    roles = pick_important_classes(baseline)
    if kappas is None:
        kappas = []
        for r in reports:
            k = r.params.get("kappa")
            if k is not None and k not in kappas:
                kappas.append(int(k))
        if not kappas:
            kappas = [roles[0]]
    table = []
    for kappa in kappas:
        rows = []
        for method in methods:
            reps = [
                r
                for r in reports
                if r.method == method and (method in KAPPA_FREE or r.params.get("kappa") == kappa)
            ]
            if reps:
                rows.append(select_best(reps, baseline, kappa))
        rows.append(baseline_result(baseline, kappa))
        table.append((kappa, rows))
    return table, roles


def role_name(kappa, roles):
    names = [n for n, k in zip(("worst1", "worst2", "median"), roles) if k == kappa]
    return "/".join(names)


def _best_method(rows):
    cands = [r for r in rows if r.admissible and r.method != "ce"]
    if not cands:
        return None
    return max(cands, key=lambda r: r.recall_mean).method


def summary_csv_rows(table, roles):
    header = [
        "kappa",
        "role",
        "method",
        "param_json",
        "admissible",
        "recall_mean",
        "recall_std",
        "accuracy_mean",
        "accuracy_std",
        "baseline_accuracy_mean",
        "n_trials",
        "n_failed",
        "best",
    ]
    out = [header]
    for kappa, rows in table:
        best = _best_method(rows)
        for r in rows:
            pj = json.dumps(r.params, sort_keys=True) if r.params is not None else ""
            out.append(
                [
                    kappa,
                    role_name(kappa, roles),
                    r.method,
                    pj,
                    int(r.admissible),
                    repr(r.recall_mean) if r.admissible else "",
                    repr(r.recall_std) if r.admissible else "",
                    repr(r.accuracy_mean) if r.admissible else "",
                    repr(r.accuracy_std) if r.admissible else "",
                    repr(r.baseline_accuracy_mean),
                    r.n_trials,
                    r.n_failed,
                    int(r.method == best),
                ]
            )
    return out


def markdown_table(table, roles):
    """Two rows per method (kappa recall, then accuracy); '-' for inadmissible."""
    kappas = [k for k, _ in table]
    headers = ["method"] + [f"class {k} ({role_name(k, roles)})" if role_name(k, roles) else f"class {k}" for k in kappas]
    methods = [r.method for r in table[0][1]]
    lines = ["| " + " | ".join(headers) + " |", "|" + "---|" * len(headers)]
    by_kappa = {k: {r.method: r for r in rows} for k, rows in table}
    best = {k: _best_method(rows) for k, rows in table}
    for method in methods:
        rec_cells, acc_cells = [], []
        for k in kappas:
            r = by_kappa[k].get(method)
            if r is None or not r.admissible:
                rec_cells.append("-")
                acc_cells.append("-")
                continue
            rec = f"{r.recall_mean:.3f}"
            if best[k] == method:
                rec = f"**{rec}**"
            rec_cells.append(f"{rec}±{r.recall_std:.3f}")
            acc_cells.append(_fmt(r.accuracy_mean, r.accuracy_std))
        label = "ce (baseline)" if method == "ce" else method
        lines.append("| " + " | ".join([label] + rec_cells) + " |")
        lines.append("| " + " | ".join([""] + acc_cells) + " |")
    return "\n".join(lines) + "\n"


def write_summary(reports, csv_path, md_path, kappas=None):
    table, roles = summarize(reports, kappas)
    with open(csv_path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(summary_csv_rows(table, roles))
    with open(md_path, "w") as fh:
        fh.write(markdown_table(table, roles))
    return table, roles
