import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import kendalltau as scipy_kendalltau

from stnas.data import synth_dataset
from stnas.errors import DataFormatError
from stnas.space import CellGenotype, MacroConfig
from stnas.stats import (GroundTruthTable, correlation_study, holdout_split, kendall_tau, load_ground_truth,
                         oracle_train, read_correlation_csv, save_ground_truth)


def brute_tau_b(x, y):
    """Pair enumeration over all n(n-1)/2 pairs, pure Python."""
    c = d = tx = ty = 0
    for i, j in itertools.combinations(range(len(x)), 2):
        dx, dy = x[i] - x[j], y[i] - y[j]
        if dx == 0 and dy == 0:
            tx += 1
            ty += 1
        elif dx == 0:
            tx += 1
        elif dy == 0:
            ty += 1
        elif (dx > 0) == (dy > 0):
            c += 1
        else:
            d += 1
    n0 = len(x) * (len(x) - 1) // 2
    denom = (n0 - tx) * (n0 - ty)
    return None if denom == 0 else (c - d) / math.sqrt(denom)


def test_tau_matches_brute_force_on_tied_vectors():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(2, 40))
        x = rng.integers(0, 6, size=n).tolist()
        y = rng.integers(0, 6, size=n).tolist()
        assert kendall_tau(x, y) == brute_tau_b(x, y)


def test_tau_agrees_with_scipy_tau_b():
    rng = np.random.default_rng(1)
    for _ in range(20):
        x, y = rng.integers(0, 5, size=25), rng.integers(0, 5, size=25)
        assert kendall_tau(x, y) == pytest.approx(scipy_kendalltau(x, y).statistic, abs=1e-12)


def test_tau_examples():
    assert kendall_tau([1, 2, 3], [1, 3, 2]) == pytest.approx(1 / 3)
    x = [0.3, 1.5, -2.0, 7.0, 4.0]
    assert kendall_tau(x, x) == 1.0
    assert kendall_tau(x, [-v for v in x]) == -1.0
    assert kendall_tau([1, 1, 1], [1, 2, 3]) is None
    with pytest.raises(ValueError):
        kendall_tau([1], [1])
    with pytest.raises(ValueError):
        kendall_tau([1, 2], [1, 2, 3])


@given(st.lists(st.tuples(st.integers(-5, 5), st.integers(-5, 5)), min_size=2, max_size=25))
def test_tau_symmetric_bounded_and_rank_based(pairs):
    x, y = [p[0] for p in pairs], [p[1] for p in pairs]
    t = kendall_tau(x, y)
    assert t == kendall_tau(y, x)
    if t is not None:
        assert -1.0 <= t <= 1.0
        assert kendall_tau([v ** 3 + 2 * v for v in x], y) == pytest.approx(t, abs=1e-12)


def test_ground_truth_round_trip(tmp_path):
    table = GroundTruthTable({"3|3|3|3|3|3": 91.5, "0|0|0|0|0|0": 10.0})
    path = tmp_path / "gt.csv"
    save_ground_truth(path, table)
    back = load_ground_truth(path)
    assert back.accuracy == table.accuracy
    assert back.get(CellGenotype.parse("3|3|3|3|3|3")) == 91.5


def test_ground_truth_validation(tmp_path):
    with pytest.raises(DataFormatError):
        GroundTruthTable({"0|0|0|0|0|0": 101.0})
    bad = tmp_path / "bad.csv"
    bad.write_text("genotype,accuracy\n9|0|0|0|0|0,50\n")
    with pytest.raises(DataFormatError, match=":2:"):
        load_ground_truth(bad)
    bad.write_text("arch,acc\n")
    with pytest.raises(DataFormatError):
        load_ground_truth(bad)


def test_holdout_is_stratified_and_disjoint():
    ds = synth_dataset(4, 10, 8, seed=0)
    tr, te = holdout_split(ds, 0.2, seed=1)
    assert not set(tr) & set(te) and len(tr) + len(te) == 40
    assert np.bincount(ds.labels[te]).tolist() == [2] * 4


def test_oracle_train_learns_and_is_deterministic():
    ds = synth_dataset(4, 30, 8, seed=0)
    macro = MacroConfig(stem_channels=4, num_classes=4, input_resolution=8)
    g = CellGenotype.parse("3|3|1|3|1|3")
    a = oracle_train(g, ds, epochs=3, seed=0, macro=macro, batch_size=16)
    b = oracle_train(g, ds, epochs=3, seed=0, macro=macro, batch_size=16)
    assert a == b and not a.diverged
    assert 0.0 <= a.accuracy <= 100.0
    assert a.accuracy > 25.0  # better than chance on four classes


def test_oracle_divergence_is_flagged():
    ds = synth_dataset(4, 10, 8, seed=0)
    macro = MacroConfig(stem_channels=4, num_classes=4, input_resolution=8)
    res = oracle_train(CellGenotype.parse("3|3|3|3|3|3"), ds, epochs=2, seed=0, macro=macro, lr=1e12)
    assert res.diverged and res.accuracy == 0.0


def test_correlation_study_outputs(tmp_path):
    x = [1.0, 2.0, 3.0, 4.0, 5.0]
    report = correlation_study({"param": x, "cubed": [v ** 3 for v in x], "flip": [5.0, 1.0, 2.0, 3.0, 4.0]},
                               ground_truth=[10.0, 20.0, 30.0, 40.0, 50.0])
    assert report.names[0] == "accuracy"
    assert report.tau[("param", "cubed")] == 1.0
    assert report.tau[("accuracy", "param")] == 1.0
    assert all(-1 <= t <= 1 for t in report.tau.values())
    report.to_csv(tmp_path / "c.csv")
    report.to_json(tmp_path / "c.json")
    assert read_correlation_csv(tmp_path / "c.csv") == report.tau
    assert json.loads((tmp_path / "c.json").read_text())["n"] == 5
    table = report.format_table()
    assert "1.000" in table and "flip" in table


def test_correlation_handles_constant_column():
    report = correlation_study({"a": [1, 1, 1], "b": [1, 2, 3]})
    assert report.tau[("a", "b")] is None
    assert "n/a" in report.format_table()
