import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from camri.data import make_blobs
from camri.errors import FormatError, InvalidInputError, UndefinedRecallError
from camri.experiment import (
    FP_GRID,
    MARGIN_GRID,
    SCALE_GRID,
    WCE_GRID,
    TrialReport,
    TrialWriter,
    default_grid,
    markdown_table,
    pick_important_classes,
    read_trial_csv,
    run_trials,
    select_best,
    summarize,
    summary_csv_rows,
    write_summary,
)
from camri.network import ModelConfig, TrainConfig


def rep(method, params, seed, acc, rec):
    return TrialReport(method, dict(params), seed, float(acc), np.asarray(rec, dtype=float))


def baseline(accs=(0.879, 0.879), rec=(0.7, 0.5, 0.9)):
    return [rep("ce", {}, s, a, rec) for s, a in enumerate(accs)]


# ------------------------------------------------------------------ grids

def test_grid_sizes_and_values():
    assert [p["w"] for p in default_grid("wce", 3, 0).points] == [4.0 * i for i in range(1, 11)]
    assert len(default_grid("camri", 3, 0)) == 63
    assert len(default_grid("arcface", 3, 0)) == 63
    assert len(default_grid("l2softmax", 3, 0)) == 7
    wass = default_grid("wasserstein", 3, 0)
    assert len(wass) == 16 and wass.points[0]["c"] == 1.0 and wass.points[-1]["c"] == 4.0
    assert len(default_grid("wasserstein", 3, 0, lambdas=(0.05, 0.1, 0.5))) == 48
    assert len(default_grid("crwwce", 3, 0)) == 11 * 16
    assert FP_GRID == tuple(round(1.0 + 0.2 * i, 10) for i in range(16))
    assert MARGIN_GRID[1] == pytest.approx(math.pi / 64) and len(MARGIN_GRID) == 9
    assert SCALE_GRID == (1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0)
    assert WCE_GRID[0] == 4.0


def test_grid_errors():
    with pytest.raises(InvalidInputError):
        default_grid("hinge", 3, 0)


# -------------------------------------------------------- important classes

def test_pick_important_classes_examples():
    assert pick_important_classes([rep("ce", {}, 0, 0.7, [0.9, 0.5, 0.7])]) == (1, 2, 2)
    assert pick_important_classes([rep("ce", {}, 0, 0.5, [0.5] * 4)]) == (0, 1, 1)


def test_pick_important_classes_missing_class():
    with pytest.raises(UndefinedRecallError):
        pick_important_classes([rep("ce", {}, 0, 0.5, [0.5, np.nan, 0.2])])


@given(st.permutations(range(5)), st.lists(st.floats(0, 1), min_size=5, max_size=5, unique=True))
def test_pick_important_classes_equivariant(perm, rec):
    rec = np.array(rec)
    perm = np.array(perm)
    before = pick_important_classes([rep("ce", {}, 0, 0.5, rec)])
    # Class k is renamed perm[k]; the new recall vector is indexed by new names.
    renamed = np.empty(5)
    renamed[perm] = rec
    after = pick_important_classes([rep("ce", {}, 0, 0.5, renamed)])
    assert after == tuple(int(perm[k]) for k in before)


# -------------------------------------------------------------- selection

def test_select_best_examples():
    base = baseline()
    res = select_best([rep("camri", {"mu": 0.1}, s, 0.88, [0.79, 0.5, 0.9]) for s in range(2)], base, 0)
    assert res.admissible and res.params == {"mu": 0.1} and res.recall_mean == pytest.approx(0.79)
    low = [rep("wce", {"w": 4}, s, 0.87, [0.95, 0.4, 0.9]) for s in range(2)]
    assert not select_best(low, base, 0).admissible
    two = [rep("camri", {"mu": m}, s, 0.879, [r, 0.5, 0.9]) for m, r in ((0.1, 0.80), (0.2, 0.81)) for s in range(2)]
    assert select_best(two, base, 0).params == {"mu": 0.2}


def test_select_best_errors():
    with pytest.raises(InvalidInputError):
        select_best([], baseline(), 0)
    with pytest.raises(InvalidInputError):
        select_best([rep("camri", {}, 5, 0.9, [1, 1, 1])], baseline(), 0)


def test_select_best_per_seed_flag():
    base = baseline(accs=(0.80, 0.90))
    reps = [rep("camri", {"mu": 0.1}, 0, 0.79, [0.9, 0, 0]), rep("camri", {"mu": 0.1}, 1, 0.95, [0.9, 0, 0])]
    assert select_best(reps, base, 0).admissible
    assert not select_best(reps, base, 0, per_seed=True).admissible


def test_failed_trials_excluded_but_counted():
    base = baseline()
    reps = [rep("camri", {"mu": 0.1}, 0, 0.9, [0.8, 0, 0]), TrialReport("camri", {"mu": 0.1}, 1, failed=True, converged=False)]
    res = select_best(reps, base, 0)
    assert res.n_failed == 1 and res.recall_mean == pytest.approx(0.8)


@given(
    st.lists(
        st.tuples(st.floats(0.5, 1.0), st.floats(0.0, 1.0), st.floats(0.5, 1.0), st.floats(0.0, 1.0)),
        min_size=1,
        max_size=12,
    ),
    st.floats(0.5, 1.0),
)
def test_selection_invariants(configs, base_acc):
    base = baseline(accs=(base_acc, base_acc))
    reps = []
    for i, (a0, r0, a1, r1) in enumerate(configs):
        reps += [rep("camri", {"i": i}, 0, a0, [r0, 0, 0]), rep("camri", {"i": i}, 1, a1, [r1, 0, 0])]
    res = select_best(reps, base, 0)
    means = [(math.fsum((a0, a1)) / 2, math.fsum((r0, r1)) / 2) for a0, r0, a1, r1 in configs]
    admissible = [m for m in means if m[0] >= res.baseline_accuracy_mean]
    assert res.admissible == bool(admissible)
    if res.admissible:
        assert res.accuracy_mean >= res.baseline_accuracy_mean
        assert res.recall_mean >= max(r for _, r in admissible)


# ----------------------------------------------------------- run_trials

def _tiny():
    ds = make_blobs(3, 30, 4, seed=0)
    mc = ModelConfig(input_dim=4, hidden=(8,), feature_dim=4, n_classes=3)
    return ds, mc, TrainConfig(epochs=2, batch_size=16)


def test_run_trials_bookkeeping_and_determinism():
    ds, mc, tc = _tiny()
    grid = default_grid("camri", 3, 1)
    grid.points = grid.points[10:11]
    a = run_trials(ds, mc, tc, grid, [0, 1, 2])
    b = run_trials(ds, mc, tc, grid, [0, 1, 2])
    assert [r.seed for r in a] == [0, 1, 2]
    assert all(r.params == {**grid.points[0], "kappa": 1} for r in a)
    for x, y in zip(a, b):
        assert x.accuracy == y.accuracy
        np.testing.assert_array_equal(x.recalls, y.recalls)
        np.testing.assert_array_equal(x.confusion.counts, y.confusion.counts)


def test_run_trials_parallel_matches_serial():
    ds, mc, tc = _tiny()
    grid = default_grid("wce", 3, 0)
    grid.points = grid.points[:2]
    serial = run_trials(ds, mc, tc, grid, [0, 1])
    parallel = run_trials(ds, mc, tc, grid, [0, 1], jobs=2)
    assert [(r.param_json, r.seed, r.accuracy) for r in serial] == [(r.param_json, r.seed, r.accuracy) for r in parallel]


def test_run_trials_flags_divergence():
    ds, mc, tc = _tiny()
    grid = default_grid("wce", 3, 0)
    grid.points = [{"w": 1e9}]
    reports = run_trials(ds, mc, tc, grid, [0])
    assert reports[0].failed and "divergence" in reports[0].error


def test_run_trials_requires_seeds():
    ds, mc, tc = _tiny()
    with pytest.raises(InvalidInputError):
        run_trials(ds, mc, tc, default_grid("ce", 3, 0), [])


# ------------------------------------------------------- persistence, tables

def _reports():
    reps = baseline(accs=(0.80, 0.82), rec=(0.5, 0.7, 0.9))
    reps += [rep("camri", {"kappa": 0, "mu": 0.1, "s": 1.0}, s, 0.83, [0.6 + 0.01 * s, 0.7, 0.9]) for s in range(2)]
    reps += [rep("camri", {"kappa": 0, "mu": 0.2, "s": 1.0}, s, 0.79, [0.9, 0.7, 0.9]) for s in range(2)]
    reps += [rep("wce", {"kappa": 0, "w": 4.0}, s, 0.70, [0.95, 0.7, 0.9]) for s in range(2)]
    reps.append(TrialReport("wce", {"kappa": 0, "w": 8.0}, 0, failed=True, converged=False))
    return reps


def test_trial_csv_round_trip(tmp_path):
    path = tmp_path / "trials.csv"
    with TrialWriter(path, 3) as w:
        for r in _reports():
            w(r)
    back, K = read_trial_csv(path)
    assert K == 3 and len(back) == len(_reports())
    for a, b in zip(_reports(), back):
        assert (a.method, a.params, a.seed, a.failed) == (b.method, b.params, b.seed, b.failed)
        if not a.failed:
            assert a.accuracy == b.accuracy
            np.testing.assert_array_equal(a.recalls, b.recalls)


def test_trial_csv_errors(tmp_path):
    (tmp_path / "empty.csv").write_text("")
    with pytest.raises(FormatError):
        read_trial_csv(tmp_path / "empty.csv")
    (tmp_path / "head.csv").write_text("method,param_json,seed,accuracy,recall_0,converged\n")
    with pytest.raises(FormatError):
        read_trial_csv(tmp_path / "head.csv")
    (tmp_path / "bad.csv").write_text('method,param_json,seed,accuracy,recall_0,converged\nce,{},x,0.5,0.5,1\n')
    with pytest.raises(FormatError, match="row 2"):
        read_trial_csv(tmp_path / "bad.csv")


def test_summary_layout(tmp_path):
    table, roles = summarize(_reports())
    assert roles[0] == 0 and [k for k, _ in table] == [0]
    methods = [r.method for r in table[0][1]]
    assert methods == ["camri", "wce", "ce"]
    md = markdown_table(table, roles)
    lines = md.splitlines()
    assert lines[0] == "| method | class 0 (worst1) |"
    assert "**0.605**" in lines[2]
    assert lines[4] == "| wce | - |" and lines[5] == "|  | - |"
    rows = summary_csv_rows(table, roles)
    best = [r for r in rows[1:] if r[-1] == 1]
    assert len(best) == 1 and best[0][2] == "camri"
    wce = [r for r in rows[1:] if r[2] == "wce"][0]
    assert wce[4] == 0 and wce[-3] == 3 and wce[-2] == 1


def test_summary_baseline_only_has_no_bold():
    table, roles = summarize(baseline())
    md = markdown_table(table, roles)
    assert "**" not in md and len(md.splitlines()) == 4


def test_write_summary_files(tmp_path):
    write_summary(_reports(), tmp_path / "s.csv", tmp_path / "s.md")
    assert (tmp_path / "s.csv").read_text().startswith("kappa,role,method,param_json,admissible")
    assert (tmp_path / "s.md").read_text().startswith("| method |")
