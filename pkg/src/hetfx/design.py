"""Design matrices for grouped, exposure and worker-firm network data.

Three archetypes are supported:

* ``block``: one intercept (and optionally one slope) per unit, as in
  firm-level audit studies;
* ``exposure``: years of exposure of each child to each neighborhood, with
  origin-destination cells differenced out;
* ``akm``: worker and firm indicators for matched employer-employee spells.

Designs are built from row-major triplets and stored as CSR matrices. A
``DesignMatrix`` is never modified in place; every transformation returns a
new instance.
"""
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional

import networkx as nx
import numpy as np
import pandas as pd
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .errors import DesignError, UnidentifiedError
from .linalg import DENSE_CAP, assert_identified

UNIT_KINDS = ("firm", "worker", "neighborhood", "slope")
RULES = ("drop_last_firm", "sum_to_zero")

# unit kind whose columns carry the normalization, per archetype
_NORMALIZED_KIND = {"akm": "firm", "exposure": "neighborhood"}


class EffectLabel(NamedTuple):
    unit_kind: str
    unit_id: object
    interaction: Optional[str] = None


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    """Sparse ``n x p`` covariate matrix with column and row labels.

    ``normalization`` and ``reference`` record how an unidentified design
    was normalized and which column was removed.
    """

    matrix: sp.csr_matrix
    col_labels: tuple
    row_labels: tuple
    archetype: str = "generic"
    normalization: Optional[str] = None
    reference: Optional[EffectLabel] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        m = sp.csr_matrix(self.matrix, dtype=float)
        m.sum_duplicates()
        object.__setattr__(self, "matrix", m)
        if len(self.col_labels) != m.shape[1]:
            raise DesignError("column labels do not match the matrix")
        if len(self.row_labels) != m.shape[0]:
            raise DesignError("row labels do not match the matrix")
        if len(set(self.col_labels)) != len(self.col_labels):
            raise DesignError("duplicate column labels")

    @property
    def n_obs(self):
        return self.matrix.shape[0]

    @property
    def n_effects(self):
        return self.matrix.shape[1]

    @property
    def shape(self):
        return self.matrix.shape

    def triplets(self):
        """Return ``(row, col, value)`` arrays in row-major order."""
        coo = self.matrix.tocoo()
        order = np.lexsort((coo.col, coo.row))
        return coo.row[order], coo.col[order], coo.data[order]

    def toarray(self):
        return self.matrix.toarray()

    def columns_of(self, kind, interaction=None):
        """Indices of columns with the given unit kind (and interaction)."""
        return np.array(
            [j for j, lab in enumerate(self.col_labels)
             if lab.unit_kind == kind and lab.interaction == interaction],
            dtype=int,
        )

    def subset(self, rows=None, cols=None):
        m = self.matrix
        row_labels, col_labels = self.row_labels, self.col_labels
        if rows is not None:
            rows = np.asarray(rows, dtype=int)
            m = m[rows]
            row_labels = tuple(row_labels[i] for i in rows)
        if cols is not None:
            cols = np.asarray(cols, dtype=int)
            m = m[:, cols]
            col_labels = tuple(col_labels[j] for j in cols)
        return replace(self, matrix=m, row_labels=row_labels, col_labels=col_labels)


@dataclass(frozen=True)
class MobilityGraph:
    """Bipartite worker-firm graph; edge ``e`` joins ``workers[edge_worker[e]]``
    and ``firms[edge_firm[e]]`` in period ``periods[e]``."""

    workers: np.ndarray
    firms: np.ndarray
    edge_worker: np.ndarray
    edge_firm: np.ndarray
    periods: np.ndarray

    @property
    def edges(self):
        return list(zip(self.workers[self.edge_worker], self.firms[self.edge_firm], self.periods))

    @property
    def n_nodes(self):
        return len(self.workers) + len(self.firms)

    def adjacency(self):
        """Symmetric node adjacency; workers first, then firms."""
        k = len(self.workers)
        n = self.n_nodes
        a = sp.coo_matrix(
            (np.ones(len(self.edge_worker)), (self.edge_worker, k + self.edge_firm)), shape=(n, n)
        )
        return (a + a.T).tocsr()


class Component(NamedTuple):
    workers: np.ndarray
    firms: np.ndarray
    edges: np.ndarray


@dataclass(frozen=True)
class DifferencingPlan:
    """Partition of observations into cells sharing identical X-rows."""

    labels: np.ndarray

    @classmethod
    def from_cells(cls, cells):
        _, codes = np.unique(np.asarray(cells), return_inverse=True)
        return cls(codes.ravel())

    @property
    def n_groups(self):
        return int(self.labels.max()) + 1 if self.labels.size else 0

    @property
    def groups(self):
        order = np.argsort(self.labels, kind="stable")
        bounds = np.flatnonzero(np.diff(self.labels[order])) + 1
        return np.split(order, bounds)

    def indicator(self):
        n = self.labels.size
        return sp.csr_matrix((np.ones(n), (np.arange(n), self.labels)), shape=(n, self.n_groups))


def build_block_design(group_of_obs, slope_covariate=None, slope_name="slope"):
    """Block-diagonal design with one intercept (and slope) column per unit.

    Columns are all intercepts, then all slopes, each in sorted unit order.
    """
    units = np.asarray(group_of_obs)
    if units.size == 0:
        raise DesignError("no units")
    ids, codes = np.unique(units, return_inverse=True)
    codes = codes.ravel()
    n, J = units.size, ids.size
    rows = np.arange(n)
    labels = [EffectLabel("firm", u) for u in ids]
    if slope_covariate is None:
        m = sp.coo_matrix((np.ones(n), (rows, codes)), shape=(n, J))
    else:
        x = np.asarray(slope_covariate, dtype=float)
        if x.shape != (n,):
            raise DesignError("slope covariate must have one entry per observation")
        counts = np.bincount(codes, minlength=J)
        mean = np.bincount(codes, x, J) / counts
        spread = np.bincount(codes, (x - mean[codes]) ** 2, J)
        if np.any(counts < 2) or np.any(spread <= 1e-12 * np.maximum(1.0, np.bincount(codes, x**2, J))):
            raise DesignError("rank deficient block")
        m = sp.coo_matrix(
            (np.r_[np.ones(n), x], (np.r_[rows, rows], np.r_[codes, J + codes])), shape=(n, 2 * J)
        )
        labels += [EffectLabel("slope", u, slope_name) for u in ids]
    return DesignMatrix(m, tuple(labels), tuple(range(n)), archetype="block")


def _spell_frame(spells):
    if isinstance(spells, pd.DataFrame):
        df = spells.loc[:, ["worker", "firm", "period"]].reset_index(drop=True)
    else:
        df = pd.DataFrame(list(spells), columns=["worker", "firm", "period"])
    return df


def build_akm_design(spells):
    """Worker and firm indicator design, one row per ``(worker, firm, period)``.

    Returns the design (worker columns, then firm columns, each sorted by id)
    and the bipartite mobility graph.
    """
    df = _spell_frame(spells)
    if df.empty:
        raise DesignError("no spells")
    if df.duplicated(["worker", "period"]).any():
        w, t = df.loc[df.duplicated(["worker", "period"]), ["worker", "period"]].iloc[0]
        raise DesignError(f"duplicate spell for worker {w!r} in period {t!r}")
    workers, wcode = np.unique(df["worker"].to_numpy(), return_inverse=True)
    firms, fcode = np.unique(df["firm"].to_numpy(), return_inverse=True)
    wcode, fcode = wcode.ravel(), fcode.ravel()
    n, K, J = len(df), len(workers), len(firms)
    rows = np.arange(n)
    m = sp.coo_matrix(
        (np.ones(2 * n), (np.r_[rows, rows], np.r_[wcode, K + fcode])), shape=(n, K + J)
    )
    labels = tuple([EffectLabel("worker", w) for w in workers] + [EffectLabel("firm", f) for f in firms])
    periods = df["period"].to_numpy()
    row_labels = tuple(zip(df["worker"].to_numpy(), periods))
    graph = MobilityGraph(workers, firms, wcode, fcode, periods)
    return DesignMatrix(m, labels, row_labels, archetype="akm"), graph


def build_exposure_design(moves, od_cell):
    """Exposure design ``z_ij`` = years child ``i`` spent in neighborhood ``j``.

    ``moves[i]`` lists ``(neighborhood, years)`` pairs for child ``i``. The
    returned plan groups children by ``od_cell`` for ``apply_differencing``.
    """
    od_cell = np.asarray(od_cell)
    if len(od_cell) != len(moves):
        raise DesignError("od_cell must have one entry per child")
    rows, hoods, vals = [], [], []
    for i, spells in enumerate(moves):
        for hood, years in spells:
            if years < 0:
                raise DesignError(f"negative exposure for child {i}")
            rows.append(i)
            hoods.append(hood)
            vals.append(float(years))
    if not rows:
        raise DesignError("no exposures")
    ids, codes = np.unique(np.asarray(hoods), return_inverse=True)
    m = sp.coo_matrix((vals, (rows, codes.ravel())), shape=(len(moves), ids.size))
    labels = tuple(EffectLabel("neighborhood", h) for h in ids)
    design = DesignMatrix(m, labels, tuple(range(len(moves))), archetype="exposure")
    return design, DifferencingPlan.from_cells(od_cell)


def largest_connected_component(graph):
    """Largest connected component of a mobility graph, by node count.

    Ties go to the component holding the smallest node index, where workers
    (sorted by id) precede firms (sorted by id).
    """
    if len(graph.edge_worker) == 0:
        raise DesignError("empty graph")
    ncomp, labels = connected_components(graph.adjacency(), directed=False)
    sizes = np.bincount(labels, minlength=ncomp)
    first = np.full(ncomp, graph.n_nodes)
    np.minimum.at(first, labels, np.arange(graph.n_nodes))
    best = min(np.flatnonzero(sizes == sizes.max()), key=lambda c: first[c])
    K = len(graph.workers)
    keep_w = labels[:K] == best
    keep_f = labels[K:] == best
    edges = np.flatnonzero(keep_w[graph.edge_worker])
    return Component(graph.workers[keep_w], graph.firms[keep_f], edges)


def leave_out_connected_set(graph):
    """Largest component that stays connected after dropping any single spell.

    Workers whose spells are bridges of the worker-firm multigraph, or who have
    a single spell, are removed until none remain; each removal is followed by
    a new largest-component restriction.
    """
    edges = np.arange(len(graph.edge_worker))
    while True:
        sub = _edge_subgraph(graph, edges)
        comp = largest_connected_component(sub)
        edges = edges[comp.edges]
        w, f = graph.edge_worker[edges], graph.edge_firm[edges]
        counts = np.bincount(w, minlength=len(graph.workers))
        g = nx.Graph()
        pair_mult = pd.Series(1, index=pd.MultiIndex.from_arrays([w, f])).groupby(level=[0, 1]).size()
        g.add_edges_from((("w", a), ("f", b)) for a, b in pair_mult.index)
        bad = set()
        for u, v in nx.bridges(g):
            wu = u if u[0] == "w" else v
            fv = v if v[0] == "f" else u
            if pair_mult[(wu[1], fv[1])] == 1:
                bad.add(wu[1])
        bad.update(np.flatnonzero((counts > 0) & (counts < 2)).tolist())
        if not bad:
            return Component(np.unique(graph.workers[w]), np.unique(graph.firms[f]), edges)
        edges = edges[~np.isin(w, list(bad))]
        if edges.size == 0:
            raise DesignError("leave-out connected set is empty")


def _edge_subgraph(graph, edges):
    return MobilityGraph(graph.workers, graph.firms, graph.edge_worker[edges],
                         graph.edge_firm[edges], graph.periods[edges])


def column_components(design):
    """Connected components of columns linked by sharing a nonzero row.

    Columns that are identically zero form singleton components.
    """
    pattern = design.matrix.copy()
    pattern.data = np.ones_like(pattern.data)
    co = (pattern.T @ pattern).tocsr()
    return connected_components(co, directed=False)


def largest_column_component(design):
    """Restrict a design to its largest column component (nonzero columns).

    Returns ``(rows, cols)`` index arrays; rows are those with any nonzero
    entry inside the kept columns.
    """
    ncomp, labels = column_components(design)
    nonzero = np.diff(design.matrix.tocsc().indptr) > 0
    sizes = np.bincount(labels[nonzero], minlength=ncomp)
    if sizes.max() == 0:
        raise UnidentifiedError("unidentified design: all columns are zero")
    best = np.flatnonzero(sizes == sizes.max())
    first = np.array([np.flatnonzero(labels == c)[0] for c in best])
    comp = best[np.argmin(first)]
    cols = np.flatnonzero((labels == comp) & nonzero)
    rows = np.flatnonzero(np.diff(design.matrix[:, cols].indptr) > 0)
    return rows, cols


def effect_map(Z, kind, level="unit", interaction=None):
    """Sparse map from the columns of ``Z`` to effects of one unit kind.

    ``level="unit"`` gives one row per unit, including a reference unit
    removed by the normalization (zero under ``drop_last_firm``, minus the
    sum of the normalized columns under ``sum_to_zero``). ``level="obs"``
    gives, for each observation, the effect of its unit of that kind.
    Returns ``(map, unit_labels)``; the labels are ``None`` at obs level.
    """
    cols = Z.columns_of(kind, interaction)
    p = Z.n_effects
    if level == "obs":
        keep = np.zeros(p)
        keep[cols] = 1.0
        return (Z.matrix @ sp.diags(keep)).tocsr(), None
    if level != "unit":
        raise ValueError(f"unknown level {level!r}")
    m = sp.coo_matrix((np.ones(cols.size), (np.arange(cols.size), cols)), shape=(cols.size, p)).tocsr()
    labels = [Z.col_labels[j] for j in cols]
    ref = Z.reference
    if ref is not None and ref.unit_kind == kind and ref.interaction == interaction:
        row = np.zeros((1, p))
        if Z.normalization == "sum_to_zero":
            row[0, cols] = -1.0
        m = sp.vstack([m, sp.csr_matrix(row)]).tocsr()
        labels.append(ref)
    return m, labels


def finalize_identification(Z, rule="drop_last_firm", dense_cap=DENSE_CAP):
    """Impose the normalization needed for ``Z'Z`` to be nonsingular.

    AKM designs normalize the firm columns and exposure designs the
    neighborhood columns: ``drop_last_firm`` removes the last such column,
    ``sum_to_zero`` reparameterizes each remaining one as its difference from
    the removed column, so estimates are relative to the unweighted average.
    Other designs are only checked and returned unchanged.
    """
    if rule not in RULES:
        raise ValueError(f"unknown normalization rule {rule!r}")
    if Z.normalization is not None:
        return Z
    kind = _NORMALIZED_KIND.get(Z.archetype)
    if kind is None:
        assert_identified(Z.matrix, dense_cap=dense_cap)
        return Z
    ncomp, _ = column_components(Z)
    if ncomp > 1:
        raise UnidentifiedError(f"unidentified design: {ncomp} disconnected column components")
    cols = Z.columns_of(kind)
    if cols.size == 0:
        raise UnidentifiedError(f"unidentified design: no {kind} columns")
    last = cols[-1]
    keep = np.setdiff1d(np.arange(Z.n_effects), [last])
    m = Z.matrix[:, keep]
    if rule == "sum_to_zero":
        normalized = np.isin(keep, cols).astype(float)
        m = m - Z.matrix[:, [last]] @ sp.csr_matrix(normalized[None, :])
    out = DesignMatrix(
        m, tuple(Z.col_labels[j] for j in keep), Z.row_labels, archetype=Z.archetype,
        normalization=rule, reference=Z.col_labels[last], meta=dict(Z.meta),
    )
    assert_identified(out.matrix, dense_cap=dense_cap)
    return out


def apply_differencing(Z, Y, plan):
    """Within-cell demeaning of the rows of ``Z`` and ``Y``.

    This is the projection ``M = I - D(D'D)^{-1}D'`` for the cell indicators
    ``D``, which annihilates any regressor constant within cells.
    """
    Y = np.asarray(Y, dtype=float)
    if plan.labels.shape != (Z.n_obs,) or Y.shape != (Z.n_obs,):
        raise DesignError("differencing plan must cover every observation")
    D = plan.indicator()
    counts = np.asarray(D.sum(axis=0)).ravel()
    inv = sp.diags(1.0 / counts)
    zmean = inv @ (D.T @ Z.matrix)
    mz = (Z.matrix - D @ zmean).tocsr()
    mz.data[np.abs(mz.data) <= 1e-13 * max(1.0, np.abs(Z.matrix.data).max(initial=0))] = 0.0
    mz.eliminate_zeros()
    my = Y - (inv @ (D.T @ Y))[plan.labels]
    return replace(Z, matrix=mz), my
