"""Fixed-effects estimation and the sampling covariance of the estimates.

Everything here works with operators: ``(Z'Z)^{-1}`` is applied through a
``GramSolver`` and the sampling covariance

    S(Z) = (Z'Z)^{-1} Z' Omega Z (Z'Z)^{-1}

is applied to vectors with two Gram solves around a diagonal sandwich. Exact
versions of traces and entries are computed when the Gram solver is direct;
otherwise Hutchinson estimates with Rademacher probes are used.
"""
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

from ._random import rademacher, stream
from .errors import DesignError
from .linalg import DENSE_CAP, GramSolver, pcg, split_diagonal_block

_CHUNK = 256
_PROBE_BATCH = 64


def _as_matrix(Z):
    return Z.matrix if hasattr(Z, "matrix") else sp.csr_matrix(Z, dtype=float)


def _absmax(m):
    return float(abs(m).max()) if m.nnz else 0.0


class QuadraticForm:
    """Symmetric ``p x p`` matrix ``Q`` stored as sparse minus low rank.

    ``Q = A - 1/2 * sum_r (u_r v_r' + v_r u_r')`` with ``A`` sparse symmetric.
    Weighted variances and covariances are rank-two updates of a diagonal (or
    sparse) matrix, so ``Q`` is never materialized.
    """

    def __init__(self, sparse, low_rank=(), kind="custom_sparse"):
        self.sparse = sp.csr_matrix(sparse, dtype=float)
        self.low_rank = tuple((np.asarray(u, float), np.asarray(v, float)) for u, v in low_rank)
        self.kind = kind
        self.p = self.sparse.shape[0]

    @staticmethod
    def _weights(m, weights):
        if weights is None:
            return np.full(m, 1.0 / m)
        w = np.asarray(weights, dtype=float)
        if w.shape != (m,) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-10:
            raise ValueError("weights must be nonnegative and sum to one")
        return w

    @classmethod
    def weighted_variance(cls, p, index, weights=None):
        """``x'Qx = sum_i w_i x[index_i]^2 - (sum_i w_i x[index_i])^2``.

        ``index`` may repeat entries (e.g. one per observation), which gives
        observation-weighted variances.
        """
        index = np.asarray(index, dtype=int)
        w = cls._weights(index.size, weights)
        a = np.bincount(index, w, minlength=p)
        return cls(sp.diags(a), [(a, a)], kind="weighted_variance")

    @classmethod
    def weighted_covariance(cls, p, index_a, index_b, weights=None):
        """``x'Qx = sum_i w_i x[a_i] x[b_i] - (sum_i w_i x[a_i])(sum_i w_i x[b_i])``."""
        ia = np.asarray(index_a, dtype=int)
        ib = np.asarray(index_b, dtype=int)
        if ia.shape != ib.shape:
            raise ValueError("index sets must pair up")
        w = cls._weights(ia.size, weights)
        pairs = sp.coo_matrix((w, (ia, ib)), shape=(p, p)).tocsr()
        a = np.bincount(ia, w, minlength=p)
        b = np.bincount(ib, w, minlength=p)
        return cls((pairs + pairs.T) / 2, [(a, b)], kind="weighted_covariance")

    @classmethod
    def from_maps(cls, A, B=None, weights=None):
        """``x'Qx = sum_i w_i (Ax)_i (Bx)_i - (w'Ax)(w'Bx)`` for sparse maps ``A, B``.

        Rows of ``A`` (and ``B``) express unit or observation effects as
        linear combinations of the columns, which covers effects removed by
        a normalization.
        """
        A = sp.csr_matrix(A, dtype=float)
        B = A if B is None else sp.csr_matrix(B, dtype=float)
        if A.shape != B.shape:
            raise ValueError("maps must have the same shape")
        w = cls._weights(A.shape[0], weights)
        W = sp.diags(w)
        core = A.T @ W @ B
        a = A.T @ w
        b = B.T @ w
        return cls((core + core.T) / 2, [(a, b)],
                   kind="weighted_variance" if B is A else "weighted_covariance")

    @classmethod
    def custom(cls, Q):
        Q = sp.csr_matrix(Q, dtype=float)
        if Q.shape[0] != Q.shape[1] or _absmax(Q - Q.T) > 1e-12 * max(1.0, _absmax(Q)):
            raise ValueError("custom Q must be square and symmetric")
        return cls(Q, (), kind="custom_sparse")

    def apply(self, x):
        x = np.asarray(x, dtype=float)
        out = self.sparse @ x
        for u, v in self.low_rank:
            if x.ndim == 1:
                out = out - 0.5 * (u * (v @ x) + v * (u @ x))
            else:
                out = out - 0.5 * (np.outer(u, v @ x) + np.outer(v, u @ x))
        return out

    def quad(self, x):
        """``x'Qx`` for a vector, or per column of a ``(p, k)`` array."""
        x = np.asarray(x, dtype=float)
        return np.einsum("i...,i...->...", x, self.apply(x))

    def diagonal(self):
        d = self.sparse.diagonal().copy()
        for u, v in self.low_rank:
            d -= u * v
        return d

    def entries(self, rows, cols):
        rows = np.asarray(rows, dtype=int)
        cols = np.asarray(cols, dtype=int)
        out = np.asarray(self.sparse[rows, cols]).ravel()
        for u, v in self.low_rank:
            out = out - 0.5 * (u[rows] * v[cols] + v[rows] * u[cols])
        return out

    def support(self):
        """Indices of rows/columns where ``Q`` can be nonzero."""
        mask = np.diff(self.sparse.indptr) > 0
        for u, v in self.low_rank:
            mask |= (u != 0) | (v != 0)
        return np.flatnonzero(mask)

    def toarray(self):
        out = self.sparse.toarray()
        for u, v in self.low_rank:
            out -= 0.5 * (np.outer(u, v) + np.outer(v, u))
        return out


def mean_weights(p, index, weights=None):
    """Linear form ``c`` averaging ``eta[index]`` with the given weights."""
    index = np.asarray(index, dtype=int)
    w = QuadraticForm._weights(index.size, weights)
    return np.bincount(index, w, minlength=p)


@dataclass(frozen=True, eq=False)
class EstimateBundle:
    """OLS estimates with a handle for applying ``(Z'Z)^{-1}``."""

    eta_hat: np.ndarray
    gram_solver: GramSolver
    design: object
    Y: np.ndarray
    noise: Optional[object] = None
    iterations: int = 0

    @property
    def matrix(self):
        return _as_matrix(self.design)

    @property
    def residuals(self):
        return self.Y - self.matrix @ self.eta_hat

    @property
    def n(self):
        return self.matrix.shape[0]

    @property
    def p(self):
        return self.matrix.shape[1]

    def with_noise(self, noise):
        return EstimateBundle(self.eta_hat, self.gram_solver, self.design, self.Y, noise, self.iterations)


def ols_fit(Z, Y, rtol=1e-10, maxiter=None, method="auto", dense_cap=DENSE_CAP):
    """Least-squares effects by Jacobi-preconditioned conjugate gradients.

    The returned bundle carries a ``GramSolver`` (direct when the design
    allows block elimination) for subsequent solves.
    """
    m = _as_matrix(Z)
    Y = np.asarray(Y, dtype=float)
    if Y.shape != (m.shape[0],):
        raise DesignError(f"outcome vector has length {Y.size}, expected {m.shape[0]}")
    if not np.all(np.isfinite(Y)):
        raise DesignError("outcomes must be finite")
    solver = GramSolver(m, method=method, rtol=rtol, maxiter=maxiter, dense_cap=dense_cap)
    rhs = m.T @ Y
    eta, info = pcg(solver.matvec, rhs, diag=solver.diag, rtol=rtol,
                    maxiter=10 * m.shape[1] if maxiter is None else maxiter)
    return EstimateBundle(eta, solver, Z, Y, iterations=info["iterations"])


def apply_S(bundle, noise, g):
    """``S(Z) g`` for a vector or a ``(p, k)`` block of vectors."""
    m = bundle.matrix
    g = np.asarray(g, dtype=float)
    h = bundle.gram_solver.solve(g)
    omega = noise.omega_diag(m.shape[0])
    w = m @ h
    w = omega * w if w.ndim == 1 else omega[:, None] * w
    return bundle.gram_solver.solve(m.T @ w)


def _solved_columns(bundle, chunk=_CHUNK):
    """Yield ``(rows, X)`` with ``X = (Z'Z)^{-1} Z[rows]'`` in row chunks."""
    mt = bundle.matrix.T.tocsc()
    n = mt.shape[1]
    for start in range(0, n, chunk):
        rows = np.arange(start, min(start + chunk, n))
        zt = mt[:, rows].toarray()
        yield rows, zt, bundle.gram_solver.solve(zt)


def leverage_diagonals(Z, mode="exact", k=200, seed=0, solver=None, cap=50_000):
    """Diagonal of the hat matrix ``P = Z (Z'Z)^{-1} Z'``.

    ``exact`` solves one system per observation (in blocks). ``sketched``
    splits ``P = P_L + P_R`` where ``P_L`` projects on a set of mutually
    orthogonal columns (exact and cheap) and ``P_R = P - P_L``. With ``k``
    Rademacher projections ``R`` it returns
    ``a_i + (1 - a_i) |R P_R e_i|^2 / (|R P_R e_i|^2 + |R (I - P) e_i|^2)``
    with ``a_i = (P_L)_ii``, so only the remainder is sketched.
    """
    m = _as_matrix(Z)
    n = m.shape[0]
    if solver is None:
        solver = GramSolver(m)
    if mode == "exact":
        if n > cap:
            raise ValueError(f"exact leverages refused for n={n} > cap {cap}; use mode='sketched'")
        bundle = EstimateBundle(np.zeros(m.shape[1]), solver, m, np.zeros(n))
        out = np.empty(n)
        for rows, zt, X in _solved_columns(bundle):
            out[rows] = np.einsum("ij,ij->j", zt, X)
        return out
    if mode != "sketched":
        raise ValueError(f"unknown leverage mode {mode!r}")
    lead, _ = split_diagonal_block(solver.gram)
    ml = m[:, lead].tocsc()
    dl = solver.diag[lead]
    a = np.asarray(ml.multiply(ml) @ (1.0 / dl)).ravel()
    R = rademacher(stream(seed, 0), (k, n)) / np.sqrt(k)
    Rt = R.T
    X = solver.solve(np.asarray((R @ m).T))  # p x k
    rp = np.asarray(m @ X)  # row i is (R P e_i)'
    rl = np.asarray(ml @ ((ml.T @ Rt) / dl[:, None]))  # row i is (R P_L e_i)'
    rm = Rt - rp
    rr = rp - rl
    x = np.einsum("ij,ij->i", rr, rr)
    y = np.einsum("ij,ij->i", rm, rm)
    with np.errstate(invalid="ignore", divide="ignore"):
        frac = np.where(x + y > 0, x / (x + y), 0.0)
    return np.clip(a + (1.0 - a) * frac, 0.0, 1.0)


def _probe_block(seed, start, stop, p):
    return np.column_stack([rademacher(stream(seed, r), p) for r in range(start, stop)])


def _use_exact(method, bundle):
    if method not in ("auto", "exact", "hutchinson"):
        raise ValueError(f"unknown method {method!r}")
    return method == "exact" or (method == "auto" and bundle.gram_solver.method == "direct")


def _unit_vectors(p, cols):
    E = np.zeros((p, cols.size))
    E[cols, np.arange(cols.size)] = 1.0
    return E


def _unit_solves(bundle, cols):
    return bundle.gram_solver.solve(_unit_vectors(bundle.p, cols))


def trace_QS(Q, bundle, noise, probes=100, seed=0, method="auto"):
    """``Trace(Q S(Z))``, exactly or by Hutchinson's estimator.

    Hutchinson's estimator averages ``g'Q S g`` over Rademacher probes ``g``,
    probe ``r`` being drawn from the stream ``(seed, r)``. The result is
    returned as-is even when negative, with a warning (not for covariance
    forms, where negative values are expected).
    """
    if probes < 1:
        raise ValueError("probes must be >= 1")
    if _use_exact(method, bundle):
        value = _trace_exact(Q, bundle, noise)
    else:
        total = 0.0
        for start in range(0, probes, _PROBE_BATCH):
            stop = min(start + _PROBE_BATCH, probes)
            G = _probe_block(seed, start, stop, bundle.p)
            total += np.einsum("ij,ij->", Q.apply(G), apply_S(bundle, noise, G))
        value = total / probes
    if value < 0 and Q.kind != "weighted_covariance":
        warnings.warn(f"negative trace estimate {value:.3g}", RuntimeWarning, stacklevel=2)
    return float(value)


def _trace_exact(Q, bundle, noise):
    idx = Q.support()
    if idx.size == 0:
        return 0.0
    if noise.family == "homoskedastic":
        total = 0.0
        for start in range(0, idx.size, _CHUNK):
            cols = idx[start:start + _CHUNK]
            X = _unit_solves(bundle, cols)
            total += Q.apply(X)[cols, np.arange(cols.size)].sum()
        return float(noise.sigma2 * total)
    omega = noise.omega_diag(bundle.n)
    if idx.size <= min(bundle.n, DENSE_CAP):
        # Trace(Q S) = Trace(Q_ss M' Omega M) with M = Z (Z'Z)^{-1} E_s
        M = bundle.matrix @ _unit_solves(bundle, idx)
        Qss = Q.apply(_unit_vectors(bundle.p, idx))[idx]
        return float(np.einsum("ij,ij->", Qss, M.T @ (omega[:, None] * M)))
    total = 0.0
    for rows, _, X in _solved_columns(bundle):
        total += omega[rows] @ Q.quad(X)
    return float(total)


def trace_QS_many(Qs, bundle, noise, probes=100, seed=0, method="auto"):
    """``Trace(Q S)`` for several forms, sharing probes and ``S`` products."""
    if probes < 1:
        raise ValueError("probes must be >= 1")
    if _use_exact(method, bundle):
        return np.array([_trace_exact(Q, bundle, noise) for Q in Qs])
    total = np.zeros(len(Qs))
    for start in range(0, probes, _PROBE_BATCH):
        stop = min(start + _PROBE_BATCH, probes)
        G = _probe_block(seed, start, stop, bundle.p)
        SG = apply_S(bundle, noise, G)
        total += [np.einsum("ij,ij->", Q.apply(G), SG) for Q in Qs]
    return total / probes


def s_entries(bundle, noise, rows, cols, probes=100, seed=0, method="auto"):
    """Entries ``S(Z)[rows[k], cols[k]]``, exactly or from shared probes."""
    rows = np.asarray(rows, dtype=int)
    cols = np.asarray(cols, dtype=int)
    if _use_exact(method, bundle):
        if noise.family == "homoskedastic":
            out = np.empty(rows.size)
            uc, pos = np.unique(cols, return_inverse=True)
            pos = pos.ravel()
            for start in range(0, uc.size, _CHUNK):
                X = _unit_solves(bundle, uc[start:start + _CHUNK])
                sel = (pos >= start) & (pos < start + _CHUNK)
                out[sel] = X[rows[sel], pos[sel] - start]
            return noise.sigma2 * out
        omega = noise.omega_diag(bundle.n)
        out = np.zeros(rows.size)
        for r, _, X in _solved_columns(bundle):
            out += (X[rows] * X[cols]) @ omega[r]
        return out
    acc = np.zeros(rows.size)
    for start in range(0, probes, _PROBE_BATCH):
        stop = min(start + _PROBE_BATCH, probes)
        G = _probe_block(seed, start, stop, bundle.p)
        acc += np.einsum("ij,ij->i", G[rows], apply_S(bundle, noise, G)[cols])
    return acc / probes


def s_diagonal(bundle, noise, probes=100, seed=0, method="auto"):
    idx = np.arange(bundle.p)
    return s_entries(bundle, noise, idx, idx, probes=probes, seed=seed, method=method)
