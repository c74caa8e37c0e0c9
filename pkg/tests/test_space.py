import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import hand_count
from stnas.errors import ContractError, GenotypeParseError
from stnas.seeding import rng_for
from stnas.space import (CONV1X1, CONV3X3, EDGES, NUM_EDGES, OP_NAMES, SPACE_SIZE, CellGenotype, MacroConfig,
                         SupernetState, build_network, build_supernet, count_params, count_params_mask,
                         enumerate_space, prune_operator)
from stnas.stats import group_by_param
from stnas.tensor import FLOAT64, Graph, Role

genotypes = st.tuples(*[st.integers(0, 4)] * 6).map(CellGenotype)
SMALL = MacroConfig(stem_channels=4, input_resolution=8)


@given(genotypes)
def test_text_round_trip(g):
    assert CellGenotype.parse(str(g)) == g
    assert CellGenotype.from_index(g.index) == g


def test_parse_accepts_names_and_reports_field():
    assert CellGenotype.parse("|".join(OP_NAMES[:5] + ("nor_conv_3x3",))) == CellGenotype((0, 1, 2, 3, 4, 3))
    with pytest.raises(GenotypeParseError) as exc:
        CellGenotype.parse("7|0|0|0|0|0")
    assert exc.value.position == 1 and "field 1" in str(exc.value)
    with pytest.raises(GenotypeParseError, match="field 4"):
        CellGenotype.parse("0|0|0|x|0|0")
    with pytest.raises(GenotypeParseError):
        CellGenotype.parse("0|0|0")


def test_edge_order():
    assert EDGES == ((1, 0), (2, 0), (2, 1), (3, 0), (3, 1), (3, 2))


def test_macro_validation():
    for bad in (dict(stem_channels=3), dict(stem_channels=5), dict(cells_per_stage=0), dict(input_resolution=30)):
        with pytest.raises(ValueError):
            MacroConfig(**bad)


@pytest.mark.parametrize("text,expected", [("0|0|0|0|0|0", 73306), ("1|1|1|1|1|1", 73306),
                                           ("3|3|3|3|3|3", 364954), ("3|2|4|1|0|3", 176122)])
def test_hand_counts(text, expected):
    g = CellGenotype.parse(text)
    assert hand_count(g) == expected
    assert count_params(g, MacroConfig()) == expected
    assert build_network(g, MacroConfig()).num_params == expected


def test_count_matches_graph_walk_for_random_genotypes():
    rng = rng_for(0, "count-oracle")
    macro = MacroConfig(stem_channels=8, cells_per_stage=2, input_resolution=8)
    for idx in rng.choice(SPACE_SIZE, size=100, replace=False):
        g = CellGenotype.from_index(int(idx))
        net = build_network(g, macro)
        walked = sum(p.value.size for p in net.parameters())
        assert count_params(g, macro) == walked == hand_count(g, macro)


@pytest.mark.parametrize("edge", range(NUM_EDGES))
def test_conv3_to_conv1_saves_8c2(edge):
    macro = MacroConfig()
    base = [1] * 6
    base[edge] = CONV3X3
    hi = count_params(CellGenotype(tuple(base)), macro)
    base[edge] = CONV1X1
    lo = count_params(CellGenotype(tuple(base)), macro)
    assert hi - lo == sum(8 * c * c for c in macro.stage_channels)
    # one cell at width C: isolate with a one-stage macro
    one = MacroConfig(stem_channels=16, num_stages=1)
    g3, g1 = [0] * 6, [0] * 6
    g3[edge], g1[edge] = CONV3X3, CONV1X1
    assert count_params(CellGenotype(tuple(g3)), one) - count_params(CellGenotype(tuple(g1)), one) == 8 * 16 * 16


def test_count_monotone_in_op():
    macro = MacroConfig()
    for e in range(NUM_EDGES):
        counts = []
        for o in range(5):
            g = [0] * 6
            g[e] = o
            counts.append(count_params(CellGenotype(tuple(g)), macro))
        assert counts[0] == counts[1] == counts[4] < counts[2] < counts[3]


def test_enumeration_and_groups():
    allg = list(enumerate_space())
    assert len(allg) == SPACE_SIZE == 15625
    assert allg[0] == CellGenotype((0,) * 6) and allg[-1] == CellGenotype((4,) * 6)
    assert [g.index for g in allg] == list(range(SPACE_SIZE))
    groups = group_by_param(allg, SMALL)
    assert sum(len(m) for _, m in groups) == SPACE_SIZE
    assert len({g for _, m in groups for g in m}) == SPACE_SIZE
    zero_count = count_params(CellGenotype((0,) * 6), SMALL)
    members = list(enumerate_space(SMALL, zero_count))
    assert CellGenotype((0,) * 6) in members and CellGenotype((1,) * 6) in members
    assert len(members) == 3 ** 6


def test_single_prediction_weight():
    net = build_network(CellGenotype.parse("3|2|4|1|0|3"), SMALL)
    roles = [p.role for p in net.parameters()]
    assert roles.count(Role.PREDICTION_WEIGHT) == 1
    assert net.params["classifier.weight"].role is Role.PREDICTION_WEIGHT


def test_build_is_deterministic():
    g = CellGenotype.parse("3|2|4|1|0|3")
    a, b = build_network(g, SMALL, seed=5), build_network(g, SMALL, seed=5)
    c = build_network(g, SMALL, seed=6)
    for p, q, r in zip(a.parameters(), b.parameters(), c.parameters()):
        np.testing.assert_array_equal(p.value, q.value)
    assert any(not np.array_equal(p.value, r.value) for p, r in zip(a.parameters(), c.parameters()))


def _forward(net, x):
    g = Graph(net.dtype)
    return net.forward(g, g.input(x)).data, g


def test_all_zeroize_features_are_exactly_zero():
    net = build_network(CellGenotype((0,) * 6), SMALL)
    x = np.random.default_rng(0).standard_normal((4, 3, 8, 8)).astype(np.float32)
    g = Graph(net.dtype)
    feats = net.features(g, g.input(x)).data
    assert np.abs(feats).max() == 0.0


def test_all_skip_cell_is_identity_and_parameter_free():
    macro = MacroConfig(stem_channels=4, num_stages=1, input_resolution=8)
    net = build_network(CellGenotype((1,) * 6), macro)
    assert not any(".edge" in p.name for p in net.parameters())


def test_supernet_single_path_is_bit_identical():
    macro = MacroConfig(stem_channels=4, input_resolution=8)
    x = np.random.default_rng(1).standard_normal((3, 3, 8, 8)).astype(np.float32)
    for text in ("3|2|4|1|0|3", "2|2|3|0|4|1"):
        g = CellGenotype.parse(text)
        single = build_network(g, macro, seed=11)
        sup, _ = build_supernet(macro, seed=11)
        sup.set_state(SupernetState.from_genotype(g))
        np.testing.assert_array_equal(_forward(single, x)[0], _forward(sup, x)[0])
        assert sup.num_params == single.num_params == count_params(g, macro)


def test_pruning_zeroize_leaves_output_unchanged():
    macro = MacroConfig(stem_channels=4, input_resolution=8)
    x = np.random.default_rng(2).standard_normal((2, 3, 8, 8))
    sup, state = build_supernet(macro, seed=3, dtype=FLOAT64)
    before = _forward(sup, x)[0]
    for e in range(NUM_EDGES):
        sup.prune(e, 0)
    np.testing.assert_array_equal(_forward(sup, x)[0], before)
    assert count_params_mask(sup.state, macro) == sup.num_params


def test_prune_24_times_reaches_single_path():
    state = SupernetState.full()
    assert state.num_active == 30
    rng = rng_for(0, "prune-order")
    for _ in range(24):
        legal = [(e, o) for e in range(NUM_EDGES) if len(state.active(e)) > 1 for o in state.active(e)]
        e, o = legal[rng.integers(len(legal))]
        state = prune_operator(state, e, o)
    assert state.is_single_path and state.num_active == 6
    assert isinstance(state.to_genotype(), CellGenotype)


def test_prune_contract():
    state = SupernetState.full((0, 3))
    state = prune_operator(state, 0, 0)
    with pytest.raises(ContractError, match="last operator"):
        prune_operator(state, 0, 3)
    with pytest.raises(ContractError, match="not active"):
        prune_operator(state, 0, 0)
    with pytest.raises(ContractError):
        SupernetState.full((0, 3)).to_genotype()


def test_pruned_operator_cannot_return():
    sup, state = build_supernet(SMALL)
    sup.prune(2, 3)
    with pytest.raises(ContractError, match="re-added"):
        sup.set_state(state)
