import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st
from scipy.sparse.csgraph import breadth_first_order

from hetfx.design import (
    DifferencingPlan,
    EffectLabel,
    apply_differencing,
    build_akm_design,
    build_block_design,
    build_exposure_design,
    effect_map,
    finalize_identification,
    largest_connected_component,
    leave_out_connected_set,
)
from hetfx.errors import DesignError, UnidentifiedError
from hetfx.linalg import pcg

from conftest import random_akm_design

# worker 1 stays in f1; worker 2 moves f1 -> f2
SPELLS = [("w1", "f1", 1), ("w1", "f1", 2), ("w2", "f1", 1), ("w2", "f2", 2)]


# ---------------------------------------------------------------- block

def test_block_indicators():
    Z = build_block_design(["A", "A", "B", "B"])
    np.testing.assert_array_equal(Z.toarray(), [[1, 0], [1, 0], [0, 1], [0, 1]])
    assert Z.col_labels == (EffectLabel("firm", "A"), EffectLabel("firm", "B"))


def test_block_slope():
    Z = build_block_design(["A", "A"], slope_covariate=[0, 1])
    np.testing.assert_array_equal(Z.toarray(), [[1, 0], [1, 1]])
    assert Z.col_labels[1].unit_kind == "slope"


def test_block_slope_order_intercepts_first():
    Z = build_block_design(["B", "A", "A", "B"], slope_covariate=[1, 0, 1, 0])
    kinds = [(lab.unit_kind, lab.unit_id) for lab in Z.col_labels]
    assert kinds == [("firm", "A"), ("firm", "B"), ("slope", "A"), ("slope", "B")]


def test_block_errors():
    with pytest.raises(DesignError, match="rank deficient block"):
        build_block_design(["A"], slope_covariate=[1])
    with pytest.raises(DesignError, match="no units"):
        build_block_design([])


# ---------------------------------------------------------------- akm

def test_akm_layout():
    Z, graph = build_akm_design(SPELLS)
    np.testing.assert_array_equal(Z.toarray(), [[1, 0, 1, 0], [1, 0, 1, 0], [0, 1, 1, 0], [0, 1, 0, 1]])
    assert len(graph.edges) == 4


def test_akm_single_spell():
    Z, _ = build_akm_design([(1, 1, 1)])
    np.testing.assert_array_equal(Z.toarray(), [[1, 1]])


def test_akm_duplicate_spell():
    with pytest.raises(DesignError, match="duplicate spell"):
        build_akm_design([("w1", "f1", 1), ("w1", "f2", 1)])


def test_akm_rows_have_two_ones(rng):
    Z = random_akm_design(rng, 40, 8)
    raw, _ = build_akm_design([(0, 0, 0), (0, 1, 1), (1, 1, 0), (1, 2, 1)])
    assert np.all(np.diff(raw.matrix.indptr) == 2) and np.all(raw.matrix.data == 1)
    assert Z.normalization == "drop_last_firm"


# ---------------------------------------------------------------- normalization

def test_finalize_drop_last_firm():
    Z, _ = build_akm_design(SPELLS)
    F = finalize_identification(Z)
    assert F.shape == (4, 3)
    assert np.linalg.matrix_rank(F.toarray()) == 3
    assert F.reference == EffectLabel("firm", "f2")


def test_finalize_sum_to_zero():
    Z, _ = build_akm_design(SPELLS)
    F = finalize_identification(Z, "sum_to_zero")
    np.testing.assert_array_equal(F.toarray(), [[1, 0, 1], [1, 0, 1], [0, 1, 1], [0, 1, -1]])
    assert np.linalg.matrix_rank(F.toarray()) == 3


def test_finalize_block_unchanged():
    Z = build_block_design(["A", "A", "B"])
    assert finalize_identification(Z) is Z


def test_finalize_disconnected():
    Z, _ = build_akm_design([("w1", "f1", 1), ("w1", "f1", 2), ("w2", "f2", 1), ("w2", "f2", 2)])
    with pytest.raises(UnidentifiedError, match="unidentified design"):
        finalize_identification(Z)


def test_finalized_solves_converge(rng):
    Z = random_akm_design(rng, 60, 10)
    gram = (Z.matrix.T @ Z.matrix).tocsr()
    for _ in range(5):
        b = rng.standard_normal(Z.n_effects)
        x, _ = pcg(lambda v: gram @ v, b, diag=gram.diagonal(), rtol=1e-10)
        assert np.linalg.norm(gram @ x - b) < 1e-8 * np.linalg.norm(b)


# ---------------------------------------------------------------- exposure and differencing

def test_exposure_differencing_example():
    Z, plan = build_exposure_design([[("A", 3.0)], [("A", 5.0)]], ["c", "c"])
    Zd, _ = apply_differencing(Z, np.zeros(2), plan)
    np.testing.assert_allclose(Zd.toarray()[:, 0], [-1.0, 1.0])


def test_exposure_singletons_vanish():
    Z, plan = build_exposure_design([[("A", 3.0), ("B", 2.0)], [("A", 5.0)]], ["c1", "c2"])
    Zd, _ = apply_differencing(Z, np.zeros(2), plan)
    assert Zd.matrix.nnz == 0


def test_exposure_negative():
    with pytest.raises(DesignError, match="negative exposure"):
        build_exposure_design([[("A", -1.0)]], ["c"])


def test_differencing_outcomes_and_idempotence(rng):
    Z, plan = build_exposure_design([[("A", 1.0)], [("A", 2.0)]], [0, 0])
    _, Y = apply_differencing(Z, np.array([1.0, 3.0]), plan)
    np.testing.assert_allclose(Y, [-1.0, 1.0])
    moves = [[(int(rng.integers(4)), float(rng.integers(1, 5)))] for _ in range(30)]
    Z, plan = build_exposure_design(moves, rng.integers(0, 5, 30))
    y = rng.standard_normal(30)
    Z1, y1 = apply_differencing(Z, y, plan)
    Z2, y2 = apply_differencing(Z1, y1, plan)
    np.testing.assert_allclose(Z2.toarray(), Z1.toarray(), atol=1e-14)
    np.testing.assert_allclose(y2, y1, atol=1e-14)


def test_differencing_annihilates_cell_constants(rng):
    cells = rng.integers(0, 6, 40)
    moves = [[("A", float(c))] for c in cells]  # constant within every cell
    Z, plan = build_exposure_design(moves, cells)
    Zd, _ = apply_differencing(Z, np.zeros(40), plan)
    assert np.abs(Zd.toarray()).max() == 0.0


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.floats(-10, 10)), min_size=1, max_size=30))
def test_differencing_property(rows):
    cells = np.array([c for c, _ in rows])
    y = np.array([v for _, v in rows])
    Z, plan = build_exposure_design([[("A", 1.0)]] * len(rows), cells)
    _, y1 = apply_differencing(Z, y, plan)
    for g in plan.groups:
        assert abs(y1[g].sum()) <= 1e-9 * max(1.0, np.abs(y).max()) * len(g)
    _, y2 = apply_differencing(Z, y1, plan)
    np.testing.assert_allclose(y2, y1, atol=1e-9)


def test_plan_covers_rows():
    Z, _ = build_exposure_design([[("A", 1.0)], [("A", 2.0)]], [0, 0])
    with pytest.raises(DesignError):
        apply_differencing(Z, np.zeros(2), DifferencingPlan(np.array([0])))


# ---------------------------------------------------------------- components

def test_lcc_example():
    _, g = build_akm_design([("w1", "f1", 1), ("w2", "f1", 1), ("w2", "f2", 2), ("w3", "f3", 1)])
    comp = largest_connected_component(g)
    assert set(comp.workers) == {"w1", "w2"} and set(comp.firms) == {"f1", "f2"}


def test_lcc_all_connected():
    _, g = build_akm_design(SPELLS)
    comp = largest_connected_component(g)
    assert set(comp.workers) == {"w1", "w2"} and set(comp.firms) == {"f1", "f2"}
    assert comp.edges.size == 4


def test_lcc_tie_smallest_id():
    _, g = build_akm_design([("w2", "f2", 1), ("w1", "f1", 1)])
    comp = largest_connected_component(g)
    assert list(comp.workers) == ["w1"] and list(comp.firms) == ["f1"]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 15), st.integers(0, 8)), min_size=1, max_size=40, unique_by=lambda e: e[0]))
def test_lcc_connected_and_maximal(pairs):
    spells = [(w, f, 0) for w, f in pairs] + [(w, (f * 3 + w) % 9, 1) for w, f in pairs]
    _, g = build_akm_design(spells)
    comp = largest_connected_component(g)
    A = g.adjacency()
    K = len(g.workers)
    nodes = set(np.flatnonzero(np.isin(g.workers, comp.workers))) | set(
        K + np.flatnonzero(np.isin(g.firms, comp.firms)))
    start = min(nodes)
    reached = set(breadth_first_order(A, start, directed=False, return_predecessors=False))
    assert reached == nodes
    for v in nodes:
        assert set(A[v].indices) <= nodes


def test_leave_out_set_drops_bridges():
    # w3's only link to f3 is a bridge, so w3 and f3 leave the set
    spells = [("w1", "f1", 1), ("w1", "f2", 2), ("w2", "f1", 1), ("w2", "f2", 2),
              ("w3", "f2", 1), ("w3", "f3", 2)]
    _, g = build_akm_design(spells)
    comp = leave_out_connected_set(g)
    assert set(comp.workers) == {"w1", "w2"} and set(comp.firms) == {"f1", "f2"}


# ---------------------------------------------------------------- effect maps

def test_effect_map_levels():
    Z = finalize_identification(build_akm_design(SPELLS)[0])
    L, labels = effect_map(Z, "firm", "unit")
    # the reference firm enters as a zero row under drop_last_firm
    np.testing.assert_array_equal(L.toarray(), [[0, 0, 1], [0, 0, 0]])
    Lo, _ = effect_map(Z, "firm", "obs")
    np.testing.assert_array_equal(Lo.toarray(), [[0, 0, 1], [0, 0, 1], [0, 0, 1], [0, 0, 0]])
    with pytest.raises(ValueError):
        effect_map(Z, "firm", "units")
    S = finalize_identification(build_akm_design(SPELLS)[0], "sum_to_zero")
    L, _ = effect_map(S, "firm", "unit")
    np.testing.assert_array_equal(L.toarray(), [[0, 0, 1], [0, 0, -1]])


def test_design_immutable_and_unique_cells():
    Z = build_block_design(["A", "B"])
    with pytest.raises(Exception):
        Z.matrix = sp.identity(2)
    r, c, _ = Z.triplets()
    assert len(set(zip(r, c))) == len(r)
