import csv
import math

import numpy as np
import pytest

from stnas.data import sample_proxy, synth_dataset
from stnas.errors import DivergedError
from stnas.metrics import angle
from stnas.space import CellGenotype, MacroConfig, build_network
from stnas.trainer import TrainConfig, evaluate_loss, short_train, write_loss_curves

MACRO = MacroConfig(stem_channels=4, input_resolution=8)
DATA = synth_dataset(10, 12, 8, seed=0)
PROXY = sample_proxy(DATA, 10, 10, seed=0)
ZERO = CellGenotype((0,) * 6)
RICH = CellGenotype.parse("3|3|3|3|3|3")


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(iterations=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(init_scheme="orthogonal")


def test_one_iteration_is_one_step():
    net = build_network(RICH, MACRO, seed=0)
    snap = short_train(net, PROXY, TrainConfig(iterations=1))
    assert snap.loss_curve.shape == (1,)
    assert not np.array_equal(snap.pred_weight_0, snap.pred_weight_t)
    assert snap.pred_weight_0.shape == snap.pred_weight_t.shape
    assert snap.feat_0.shape == snap.feat_t.shape
    assert snap.final_loss == pytest.approx(evaluate_loss(net, PROXY.images, PROXY.labels))


def test_zeroize_collapse_exact_without_weight_decay():
    net = build_network(ZERO, MACRO, seed=0)
    snap = short_train(net, PROXY, TrainConfig(iterations=20, weight_decay=0.0))
    np.testing.assert_array_equal(snap.pred_weight_t, snap.pred_weight_0)
    np.testing.assert_allclose(snap.loss_curve, math.log(10), atol=1e-3)


def test_zeroize_collapse_with_weight_decay_only_rescales():
    net = build_network(ZERO, MACRO, seed=0)
    snap = short_train(net, PROXY, TrainConfig(iterations=50))
    ratio = snap.pred_weight_t / snap.pred_weight_0
    np.testing.assert_allclose(ratio, ratio[0], rtol=1e-5)
    assert 0 < ratio[0] < 1
    assert angle(snap.pred_weight_0, snap.pred_weight_t) < 1e-3
    np.testing.assert_allclose(snap.loss_curve, math.log(10), atol=1e-3)


@pytest.mark.parametrize("k", [2, 5, 10])
def test_initial_loss_with_zero_features_is_log_k(k):
    proxy = sample_proxy(DATA, k, 5, seed=k)
    snap = short_train(build_network(ZERO, MACRO, seed=1), proxy, TrainConfig(iterations=1))
    assert snap.loss_curve[0] == pytest.approx(math.log(k), abs=1e-3)


def test_rich_genotype_reduces_loss():
    snap = short_train(build_network(RICH, MACRO, seed=0), PROXY, TrainConfig(iterations=30))
    assert snap.final_loss < snap.loss_curve[0]
    assert snap.final_loss < math.log(10)


def test_determinism():
    a = short_train(build_network(RICH, MACRO, seed=4), PROXY, TrainConfig(iterations=5))
    b = short_train(build_network(RICH, MACRO, seed=4), PROXY, TrainConfig(iterations=5))
    for f in ("pred_weight_t", "feat_t", "loss_curve"):
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))
    assert a.final_loss == b.final_loss


def test_minibatch_mode():
    snap = short_train(build_network(RICH, MACRO, seed=0), PROXY, TrainConfig(iterations=6, batch_size=32, seed=3))
    assert snap.loss_curve.shape == (6,) and np.all(np.isfinite(snap.loss_curve))


def test_bias_and_bn_flags_change_vector_lengths():
    net = build_network(RICH, MACRO, seed=0)
    with_bias = short_train(net.clone(), PROXY, TrainConfig(iterations=1, include_pred_bias=True))
    plain = short_train(net.clone(), PROXY, TrainConfig(iterations=1))
    no_bn = short_train(net.clone(), PROXY, TrainConfig(iterations=1, include_bn_in_feat=False))
    assert with_bias.pred_weight_0.size == plain.pred_weight_0.size + PROXY.k
    assert no_bn.feat_0.size < plain.feat_0.size


def test_divergence_carries_iteration():
    net = build_network(RICH, MACRO, seed=0)
    with pytest.raises(DivergedError) as exc:
        short_train(net, PROXY, TrainConfig(iterations=50, lr=1e12))
    assert exc.value.iteration is not None and 0 <= exc.value.iteration <= 50


def test_loss_curve_csv(tmp_path):
    path = tmp_path / "curves.csv"
    write_loss_curves(path, {"a": np.array([2.0, 1.5]), "b": np.array([1.0])})
    rows = list(csv.DictReader(open(path)))
    assert [(r["network"], int(r["iteration"]), float(r["loss"])) for r in rows] == \
        [("a", 0, 2.0), ("a", 1, 1.5), ("b", 0, 1.0)]


def test_pred_vector_keeps_only_trained_rows():
    proxy = sample_proxy(DATA, 3, 5, seed=0)
    snap = short_train(build_network(RICH, MACRO, seed=0), proxy, TrainConfig(iterations=1))
    assert snap.pred_weight_0.size == 3 * MACRO.stage_channels[-1]
