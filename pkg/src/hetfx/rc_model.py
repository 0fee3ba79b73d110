"""Random-coefficient mean and covariance models for the effects.

The effects are modelled as ``eta | Z ~ N(mu(Z), Sigma(Z))``. Parameters are
fitted by two-step minimum distance on the OLS estimates: the mean by least
squares of ``eta_hat`` on the mean regressors, the covariance by matching
second moments of ``eta_hat - mu_hat`` to ``Sigma + S`` with the sampling
covariance ``S`` subtracted through trace terms.
"""
import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from ._blocks import BlockDiag
from ._random import stream
from .errors import DesignError, InputError, NumericalError
from .linalg import GramSolver
from .solve import QuadraticForm, _as_matrix, s_diagonal, trace_QS_many

MEAN_KINDS = ("constant", "linear", "grouped")
COV_KINDS = ("scalar_diag", "diag_linear", "grouped_blocks")

#: Floor for fitted variances.
VAR_FLOOR = 1e-12

#: Default size limit for dense likelihood evaluation.
LOGLIK_CAP = 5000


# ---------------------------------------------------------------- k-means

@dataclass(frozen=True, eq=False)
class GroupAssignment:
    """Hard assignment of ``p`` units to ``G`` groups (labels ``0..G-1``)."""

    labels: np.ndarray
    centers: np.ndarray
    inertia: float = 0.0

    @property
    def n_groups(self):
        return self.centers.shape[0]


def _plusplus(X, G, rng):
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = ((X - X[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, G):
        if d2.sum() > 0:
            nxt = int(rng.choice(n, p=d2 / d2.sum()))
        else:
            free = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(free))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((X - X[nxt]) ** 2).sum(axis=1))
    return X[chosen].copy()


def _lloyd(X, centers, tol, maxiter):
    G = centers.shape[0]
    prev = np.inf
    for _ in range(maxiter):
        d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = d2.argmin(axis=1)
        counts = np.bincount(labels, minlength=G)
        while np.any(counts == 0):
            # move the point farthest from its center in the largest group
            empty = int(np.flatnonzero(counts == 0)[0])
            big = int(counts.argmax())
            members = np.flatnonzero(labels == big)
            far = members[d2[members, big].argmax()]
            labels[far] = empty
            counts = np.bincount(labels, minlength=G)
        centers = np.stack([X[labels == g].mean(axis=0) for g in range(G)])
        inertia = float(((X - centers[labels]) ** 2).sum())
        if inertia == 0 or abs(prev - inertia) <= tol * max(prev, inertia):
            break
        prev = inertia
    return labels, centers, inertia


def kmeans_groups(unit_summaries, G, seed=0, restarts=50, tol=1e-10, maxiter=300, threads=1):
    """Cluster units on summary vectors with k-means.

    Each restart uses k-means++ seeding from its own stream ``(seed, r)`` and
    Lloyd iterations until the relative change in inertia falls below
    ``tol``. The restart with the lowest inertia is kept (earliest on ties).
    Labels are renumbered in order of first appearance.
    """
    X = np.asarray(unit_summaries, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    p = X.shape[0]
    if not 1 <= G <= p:
        raise InputError(f"need 1 <= G <= p, got G={G}, p={p}")
    if not np.all(np.isfinite(X)):
        raise InputError("unit summaries must be finite")

    def run(r):
        return _lloyd(X, _plusplus(X, G, stream(seed, r)), tol, maxiter)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(run, range(restarts)))
    else:
        results = [run(r) for r in range(restarts)]
    labels, centers, inertia = min(results, key=lambda t: t[2])
    _, first = np.unique(labels, return_index=True)
    order = np.argsort(first)
    relabel = np.empty(G, dtype=int)
    relabel[order] = np.arange(G)
    return GroupAssignment(relabel[labels], centers[order], inertia)


def unit_quantiles(values, units, probs=np.linspace(0.1, 0.9, 9)):
    """Per-unit quantile vectors of observation-level values (sorted unit ids)."""
    values = np.asarray(values, dtype=float)
    ids, codes = np.unique(np.asarray(units), return_inverse=True)
    codes = codes.ravel()
    return ids, np.stack([np.quantile(values[codes == u], probs) for u in range(ids.size)])


# ---------------------------------------------------------------- models

def _labels(grouping):
    labels = grouping.labels if isinstance(grouping, GroupAssignment) else grouping
    labels = np.asarray(labels)
    _, codes = np.unique(labels, return_inverse=True)
    return codes.ravel()


@dataclass(frozen=True, eq=False)
class MeanModel:
    """``mu = X params`` with ``X`` a constant, covariates or group indicators."""

    kind: str
    params: np.ndarray
    W: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in MEAN_KINDS:
            raise ValueError(f"unknown mean model {self.kind!r}")

    def regressors(self, p):
        if self.kind == "constant":
            return np.ones((p, 1))
        if self.kind == "linear":
            return np.asarray(self.W, dtype=float)
        return np.eye(int(self.labels.max()) + 1)[self.labels]

    def mu(self, p):
        return self.regressors(p) @ np.atleast_1d(self.params)

    def to_dict(self):
        return {"kind": self.kind, "params": np.atleast_1d(self.params).tolist(),
                "W": None if self.W is None else np.asarray(self.W).tolist(),
                "labels": None if self.labels is None else np.asarray(self.labels).tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], np.asarray(d["params"], float),
                   None if d.get("W") is None else np.asarray(d["W"], float),
                   None if d.get("labels") is None else np.asarray(d["labels"], int))


@dataclass(frozen=True, eq=False)
class CovModel:
    """Covariance of the effects.

    * ``scalar_diag``: ``Sigma = params * I``.
    * ``diag_linear``: ``Sigma_jj = max(w_j' params, floor)``.
    * ``grouped_blocks``: effect ``j`` in group ``labels[j]`` has variance
      ``C[g, g]``; effects sharing a block id covary with ``C[g, h]``.
      Effects within a block must belong to distinct groups.
    """

    kind: str
    params: np.ndarray
    W: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    blocks: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in COV_KINDS:
            raise ValueError(f"unknown covariance model {self.kind!r}")

    def sigma(self, p):
        """Return ``Sigma`` as a ``BlockDiag``."""
        if self.kind == "scalar_diag":
            return BlockDiag.diagonal(np.full(p, float(np.atleast_1d(self.params)[0])))
        if self.kind == "diag_linear":
            return BlockDiag.diagonal(np.maximum(np.asarray(self.W) @ self.params, VAR_FLOOR))
        C = np.asarray(self.params, dtype=float)
        labels = np.asarray(self.labels)
        return BlockDiag.from_function(p, block_lists(self.blocks, p),
                                       lambda idx: C[np.ix_(labels[idx], labels[idx])])

    def to_dict(self):
        out = {"kind": self.kind, "params": np.asarray(self.params).tolist()}
        for key in ("W", "labels", "blocks"):
            v = getattr(self, key)
            out[key] = None if v is None else np.asarray(v).tolist()
        return out

    @classmethod
    def from_dict(cls, d):
        conv = {"W": float, "labels": int, "blocks": int}
        kw = {k: None if d.get(k) is None else np.asarray(d[k], t) for k, t in conv.items()}
        return cls(d["kind"], np.asarray(d["params"], float), **kw)


def block_lists(blocks, p):
    """Index lists of blocks; ``None`` means every effect is its own block."""
    if blocks is None:
        return [np.array([j]) for j in range(p)]
    _, codes = np.unique(np.asarray(blocks), return_inverse=True)
    codes = codes.ravel()
    order = np.argsort(codes, kind="stable")
    bounds = np.flatnonzero(np.diff(codes[order])) + 1
    return np.split(order, bounds)


@dataclass(frozen=True, eq=False)
class RCSpec:
    """Fitted mean and covariance models for ``p`` effects."""

    mean: MeanModel
    cov: CovModel
    p: int

    @property
    def mu(self):
        return self.mean.mu(self.p)

    @property
    def Sigma(self):
        cached = self.__dict__.get("_sigma")
        if cached is None:
            cached = self.cov.sigma(self.p)
            object.__setattr__(self, "_sigma", cached)
        return cached

    def check_psd(self, tol=1e-10):
        return bool(self.Sigma.eigvalsh().min(initial=0.0) >= -tol)

    def to_dict(self):
        return {"p": self.p, "mean": self.mean.to_dict(), "cov": self.cov.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(MeanModel.from_dict(d["mean"]), CovModel.from_dict(d["cov"]), int(d["p"]))

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.to_dict(), fh)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    @classmethod
    def simple(cls, mu, Sigma_diag):
        """Diagonal model with given means and variances (for known-truth work)."""
        mu = np.asarray(mu, dtype=float)
        Sigma_diag = np.broadcast_to(np.asarray(Sigma_diag, float), mu.shape)
        p = mu.size
        mean = MeanModel("linear", np.array([1.0]), W=mu[:, None])
        cov = CovModel("diag_linear", np.array([1.0]), W=Sigma_diag[:, None].copy())
        return cls(mean, cov, p)


def kind_grouping(design):
    """Group effects by ``(unit_kind, interaction)``; returns labels and names."""
    keys = [(lab.unit_kind, lab.interaction or "") for lab in design.col_labels]
    names = sorted(set(keys), key=keys.index)
    index = {k: g for g, k in enumerate(names)}
    return np.array([index[k] for k in keys]), names


def unit_blocks(design):
    """Block ids linking the intercept and slope columns of the same unit.

    Worker and neighborhood columns stay singletons.
    """
    ids = {}
    out = np.empty(design.n_effects, dtype=int)
    for j, lab in enumerate(design.col_labels):
        key = ("unit", lab.unit_id) if lab.unit_kind in ("firm", "slope") else ("col", j)
        out[j] = ids.setdefault(key, len(ids))
    return out


# ---------------------------------------------------------------- fitting

def _eta(bundle_or_eta):
    return np.asarray(getattr(bundle_or_eta, "eta_hat", bundle_or_eta), dtype=float)


def fit_mean(bundle, kind="constant", W=None, grouping=None):
    """Least-squares projection of ``eta_hat`` on the mean regressors."""
    eta = _eta(bundle)
    p = eta.size
    if kind == "constant":
        model = MeanModel("constant", np.zeros(1))
    elif kind == "linear":
        if W is None:
            raise InputError("linear mean model needs W")
        W = np.asarray(W, dtype=float).reshape(p, -1)
        model = MeanModel("linear", np.zeros(W.shape[1]), W=W)
    elif kind == "grouped":
        if grouping is None:
            raise InputError("grouped mean model needs a grouping")
        labels = _labels(grouping)
        if labels.shape != (p,):
            raise InputError("grouping must label every effect")
        model = MeanModel("grouped", np.zeros(labels.max() + 1), labels=labels)
    else:
        raise ValueError(f"unknown mean model {kind!r}")
    X = model.regressors(p)
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise DesignError("mean regressors are rank deficient")
    coef = np.linalg.lstsq(X, eta, rcond=None)[0]
    return MeanModel(model.kind, coef, model.W, model.labels)


def _annihilate(Q, X):
    """``M Q M`` with ``M = I - X (X'X)^{-1} X'``, as a ``QuadraticForm``."""
    K = np.linalg.inv(X.T @ X)
    QX = np.column_stack([Q.apply(X[:, r]) for r in range(X.shape[1])])
    XK = X @ K
    low = list(Q.low_rank)
    low += [(2 * QX[:, r], XK[:, r]) for r in range(X.shape[1])]
    w, V = np.linalg.eigh(K @ (X.T @ QX) @ K)
    F = X @ V
    low += [(-w[r] * F[:, r], F[:, r]) for r in range(w.size)]
    return QuadraticForm(Q.sparse, low, kind="custom_sparse")


def _moment_basis(p, labels, blocks):
    """Normalized moment forms ``Q`` and pattern matrices ``B`` for grouped blocks.

    Returns a list of ``(key, Q, B)``: one per group (diagonal variances) and
    one per ordered group pair linked within some block (covariances).
    """
    out = []
    G = int(labels.max()) + 1
    for g in range(G):
        idx = np.flatnonzero(labels == g)
        B = sp.coo_matrix((np.ones(idx.size), (idx, idx)), shape=(p, p)).tocsr()
        out.append(((g, g), QuadraticForm(B / idx.size), B))
    if blocks is None:
        return out
    pairs = {}
    for idx in block_lists(blocks, p):
        if idx.size < 2:
            continue
        gl = labels[idx]
        if np.unique(gl).size != gl.size:
            raise InputError("effects within a block must belong to distinct groups")
        for a in range(idx.size):
            for b in range(a + 1, idx.size):
                j, k = (idx[a], idx[b]) if gl[a] < gl[b] else (idx[b], idx[a])
                pairs.setdefault((labels[j], labels[k]), []).append((j, k))
    for key in sorted(pairs):
        jk = np.array(pairs[key])
        B = sp.coo_matrix((np.ones(2 * len(jk)), (np.r_[jk[:, 0], jk[:, 1]], np.r_[jk[:, 1], jk[:, 0]])),
                          shape=(p, p)).tocsr()
        out.append((key, QuadraticForm(B / (2 * len(jk))), B))
    return out


def _pattern_trace(Q, B):
    """``Trace(Q B)`` for a sparse pattern ``B``."""
    coo = B.tocoo()
    return float(coo.data @ Q.entries(coo.col, coo.row))


def fit_cov(bundle, noise, kind="scalar_diag", mean=None, W=None, grouping=None, blocks=None,
            probes=100, seed=0, method="auto", centered=False):
    """Minimum-distance fit of ``Sigma`` from ``Var(eta_hat | Z) = Sigma + S``.

    With ``e = eta_hat - mu_hat`` each parameter is matched through a moment
    ``e'Qe`` whose expectation is ``Trace(Q Sigma) + Trace(Q S)``. For
    ``scalar_diag`` this gives ``mean(e^2) - Trace(S)/p``; for
    ``grouped_blocks`` the within-group averages of ``e_j^2 - S_jj`` and the
    averages of ``e_j e_k - S_jk`` over linked pairs.

    ``centered=True`` also accounts for ``mu_hat`` being fitted on the same
    estimates: expectations are taken of ``M e`` with ``M`` the annihilator of
    the mean regressors, which removes the downward bias of order ``1/p``
    (and, under a reference normalization, the common noise of the
    reference effect).

    Variances below ``1e-12`` are floored with a warning; cross-group
    covariances are clipped to keep every 2x2 group block PSD and the group
    matrix is projected onto the PSD cone when there are more than two groups.
    """
    eta = _eta(bundle)
    p = eta.size
    if mean is None:
        raise InputError("fit_cov needs a fitted mean model")
    X = mean.regressors(p)
    e = eta - mean.mu(p)

    if kind == "diag_linear":
        if W is None:
            raise InputError("diag_linear covariance needs W")
        W = np.asarray(W, dtype=float).reshape(p, -1)
        target = e**2 - s_diagonal(bundle, noise, probes=probes, seed=seed, method=method)
        gamma = np.linalg.lstsq(W, target, rcond=None)[0]
        if np.any(W @ gamma < VAR_FLOOR):
            warnings.warn("fitted variances floored at 1e-12", RuntimeWarning, stacklevel=2)
        return CovModel("diag_linear", gamma, W=W)

    if kind == "scalar_diag":
        labels, blocks = np.zeros(p, dtype=int), None
    elif kind == "grouped_blocks":
        if grouping is None:
            raise InputError("grouped_blocks covariance needs a grouping")
        labels = _labels(grouping)
    else:
        raise ValueError(f"unknown covariance model {kind!r}")
    basis = _moment_basis(p, labels, blocks)
    Qs = [_annihilate(Q, X) for _, Q, _ in basis] if centered else [Q for _, Q, _ in basis]
    moments = np.array([Q.quad(e) for _, Q, _ in basis])
    traces = trace_QS_many(Qs, bundle, noise, probes=probes, seed=seed, method=method)
    if centered:
        A = np.array([[_pattern_trace(Q, B) for _, _, B in basis] for Q in Qs])
        theta = np.linalg.solve(A, moments - traces)
    else:
        theta = moments - traces

    G = int(labels.max()) + 1
    C = np.zeros((G, G))
    for (key, _, _), value in zip(basis, theta):
        C[key] = C[key[::-1]] = value
    C = _regularize(C, [k for k, _, _ in basis])
    if kind == "scalar_diag":
        return CovModel("scalar_diag", np.array([C[0, 0]]))
    return CovModel("grouped_blocks", C, labels=labels, blocks=None if blocks is None else np.asarray(blocks))


def _regularize(C, keys):
    d = np.diag(C).copy()
    if np.any(d < VAR_FLOOR):
        warnings.warn("negative or zero variance estimates floored at 1e-12", RuntimeWarning, stacklevel=3)
        d = np.maximum(d, VAR_FLOOR)
    C = C.copy()
    C[np.diag_indices_from(C)] = d
    bound = np.sqrt(np.outer(d, d))
    C = np.clip(C, -bound, bound)
    if C.shape[0] > 2:
        used = np.zeros_like(C, dtype=bool)
        for g, h in keys:
            used[g, h] = used[h, g] = True
        w, V = np.linalg.eigh(np.where(used, C, 0.0))
        if w.min() < 0:
            C = np.where(used, (V * np.clip(w, 0, None)) @ V.T, 0.0)
            C[np.diag_indices_from(C)] = np.maximum(np.diag(C), VAR_FLOOR)
    return C


def fit_rc(bundle, noise, mean_kind="constant", cov_kind="scalar_diag", W=None, grouping=None,
           blocks=None, probes=100, seed=0, method="auto", centered=False):
    """Fit the mean then the covariance model; returns an ``RCSpec``."""
    eta = _eta(bundle)
    mean = fit_mean(bundle, mean_kind, W=W, grouping=grouping)
    cov = fit_cov(bundle, noise, cov_kind, mean=mean, W=W, grouping=grouping, blocks=blocks,
                  probes=probes, seed=seed, method=method, centered=centered)
    return RCSpec(mean, cov, eta.size)


# ---------------------------------------------------------------- diagnostics

def quasi_loglik(Z, Y, rc, noise, dense_cap=LOGLIK_CAP):
    """Gaussian log-likelihood of ``Y`` under ``N(Z mu, Z Sigma Z' + Omega)``.

    Evaluated densely; intended as a diagnostic on moderate ``n``.
    """
    m = _as_matrix(Z)
    n = m.shape[0]
    if n > dense_cap:
        raise InputError(f"quasi-likelihood refused for n={n} > dense cap {dense_cap}")
    Y = np.asarray(Y, dtype=float)
    Zd = m.toarray()
    V = Zd @ rc.Sigma.apply(Zd.T) + np.diag(noise.omega_diag(n))
    r = Y - Zd @ rc.mu
    try:
        L = sla.cho_factor((V + V.T) / 2, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("covariance not positive definite") from exc
    logdet = 2.0 * np.log(np.diag(L[0])).sum()
    return float(-0.5 * n * np.log(2 * np.pi) - 0.5 * logdet - 0.5 * r @ sla.cho_solve(L, r))


class AnnihilatorCheck(NamedTuple):
    ok: bool
    max_violation: float

    def __bool__(self):
        return self.ok


def check_annihilator(Z, samples=20, seed=0, tol=1e-8, max_n=500):
    """Check that ``I - P (x) P`` annihilates ``vec(Z B Z')`` for random symmetric ``B``.

    ``(P (x) P) vec(X) = vec(P X P)``, so the check is ``Z B Z' = P Z B Z' P``
    with ``P`` built from Gram solves. Violations are relative to the largest
    entry of ``Z B Z'``.
    """
    m = _as_matrix(Z)
    n, p = m.shape
    if n > max_n:
        raise InputError(f"annihilator check limited to n <= {max_n}")
    solver = GramSolver(m)
    Zd = m.toarray()
    P = Zd @ solver.solve(Zd.T)
    worst = 0.0
    for s in range(samples):
        A = stream(seed, s).standard_normal((p, p))
        Xm = Zd @ ((A + A.T) / 2) @ Zd.T
        scale = max(np.abs(Xm).max(), 1.0)
        worst = max(worst, float(np.abs(Xm - P @ Xm @ P).max() / scale))
    return AnnihilatorCheck(worst < tol, worst)
