"""Sparse solvers for Gram systems ``Z'Z x = b``.

Two paths are provided. ``pcg`` is a Jacobi-preconditioned conjugate gradient
that runs on many right-hand sides at once. ``GramSolver`` wraps it and, when
the system allows, switches to an exact block-eliminated Cholesky: columns with
pairwise disjoint row supports (worker indicators in an AKM design, unit
intercepts in a grouped design) form a diagonal leading block, and only the
Schur complement on the remaining columns is factored densely.
"""
import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .errors import ConvergenceError, UnidentifiedError

#: Largest dense block factored directly.
DENSE_CAP = 2000

# Smallest admissible Cholesky pivot relative to the largest one.
_PIVOT_RTOL = 1e-11


def pcg(matvec, b, diag=None, rtol=1e-10, maxiter=None, x0=None, restarts=3):
    """Solve ``A x = b`` for symmetric positive definite ``A``.

    Parameters
    ----------
    matvec : callable
        Applies ``A`` to a ``(p, k)`` array.
    b : ndarray
        Right-hand side, shape ``(p,)`` or ``(p, k)``. Columns are solved
        simultaneously but converge independently.
    diag : ndarray, optional
        Diagonal of ``A`` used as Jacobi preconditioner.
    rtol : float
        Stop when ``||b - A x|| <= rtol * ||b||`` for every column.
    maxiter : int, optional
        Iteration cap per restart, default ``10 * p``.
    restarts : int
        Number of times the recursive residual is replaced by the true one
        when they disagree.

    Returns
    -------
    x : ndarray
        Solution with the shape of ``b``.
    info : dict
        ``iterations`` and the final true ``residual`` (relative, max over
        columns).
    """
    b = np.asarray(b, dtype=float)
    vector = b.ndim == 1
    B = b[:, None] if vector else b
    p = B.shape[0]
    maxiter = 10 * p if maxiter is None else int(maxiter)
    minv = np.ones((p, 1)) if diag is None else 1.0 / np.asarray(diag, float)[:, None]

    bnorm = np.linalg.norm(B, axis=0)
    scale = np.where(bnorm > 0, bnorm, 1.0)
    X = np.zeros_like(B) if x0 is None else np.array(x0, dtype=float).reshape(B.shape)
    total = 0
    for _ in range(restarts + 1):
        R = B - matvec(X) if (x0 is not None or total) else B.copy()
        active = np.linalg.norm(R, axis=0) > rtol * scale
        Zr = minv * R
        P = Zr.copy()
        rz = np.einsum("ij,ij->j", R, Zr)
        it = 0
        while active.any() and it < maxiter:
            AP = matvec(P)
            pap = np.einsum("ij,ij->j", P, AP)
            alpha = np.divide(rz, pap, out=np.zeros_like(rz), where=active & (pap > 0))
            X += alpha * P
            R -= alpha * AP
            active &= np.linalg.norm(R, axis=0) > rtol * scale
            Zr = minv * R
            rz_new = np.einsum("ij,ij->j", R, Zr)
            beta = np.divide(rz_new, rz, out=np.zeros_like(rz), where=active & (rz != 0))
            P = Zr + beta * P
            rz = rz_new
            it += 1
        total += it
        true_res = np.linalg.norm(B - matvec(X), axis=0) / scale
        if np.all(true_res <= 10 * rtol) or it >= maxiter:
            break
    residual = float(true_res.max()) if true_res.size else 0.0
    if residual > 10 * rtol:
        raise ConvergenceError(
            f"conjugate gradient did not converge in {total} iterations",
            residual=residual,
            iterate=X[:, 0] if vector else X,
        )
    return (X[:, 0] if vector else X), {"iterations": total, "residual": residual}


def split_diagonal_block(gram):
    """Greedily pick columns whose Gram entries with each other are all zero.

    Returns ``(lead, rest)`` index arrays; ``gram[lead][:, lead]`` is diagonal.
    """
    gram = sp.csr_matrix(gram)
    p = gram.shape[0]
    indptr, indices = gram.indptr, gram.indices
    taken = np.zeros(p, dtype=bool)
    for j in range(p):
        if not taken[indices[indptr[j]:indptr[j + 1]]].any():
            taken[j] = True
    return np.flatnonzero(taken), np.flatnonzero(~taken)


class GramSolver:
    """Apply ``(Z'Z)^{-1}`` to vectors or blocks of vectors.

    Parameters
    ----------
    matrix : sparse matrix
        The ``n x p`` design.
    method : {'auto', 'direct', 'cg'}
        ``auto`` uses the block-eliminated Cholesky whenever the
        non-diagonal block has at most ``dense_cap`` columns, and PCG
        otherwise.
    rtol, maxiter : float, int
        PCG settings.

    Instances are immutable after construction and can be shared between
    threads.
    """

    def __init__(self, matrix, method="auto", rtol=1e-10, maxiter=None, dense_cap=DENSE_CAP):
        if method not in ("auto", "direct", "cg"):
            raise ValueError(f"unknown method {method!r}")
        Z = sp.csr_matrix(matrix, dtype=float)
        self.n, self.p = Z.shape
        self.gram = (Z.T @ Z).tocsr()
        self.diag = self.gram.diagonal()
        self.rtol = rtol
        self.maxiter = maxiter
        if np.any(self.diag <= 0):
            raise UnidentifiedError("unidentified design: empty column")
        self.method = "cg"
        if method == "cg":
            return
        lead, rest = split_diagonal_block(self.gram)
        if rest.size > dense_cap:
            if method == "direct":
                raise ValueError(f"non-diagonal block has {rest.size} columns > dense cap {dense_cap}")
            return
        self.method = "direct"
        self._lead, self._rest = lead, rest
        self._dinv = 1.0 / self.diag[lead]
        self._B = self.gram[lead][:, rest].tocsc()
        C = self.gram[rest][:, rest].toarray()
        schur = C - (self._B.T @ sp.diags(self._dinv) @ self._B).toarray()
        self._chol = None
        if rest.size:
            try:
                chol = sla.cho_factor(schur, lower=True, check_finite=False)
            except np.linalg.LinAlgError as exc:
                raise UnidentifiedError("unidentified design: Gram matrix not positive definite") from exc
            piv = np.diag(chol[0]) ** 2
            if piv.min() <= _PIVOT_RTOL * max(piv.max(), np.abs(C).max()):
                raise UnidentifiedError("unidentified design: Gram matrix numerically singular")
            self._chol = chol

    def matvec(self, x):
        return self.gram @ x

    def solve(self, b):
        """Return ``(Z'Z)^{-1} b`` for ``b`` of shape ``(p,)`` or ``(p, k)``."""
        b = np.asarray(b, dtype=float)
        if self.method == "cg":
            x, _ = pcg(self.gram.__matmul__, b, diag=self.diag, rtol=self.rtol, maxiter=self.maxiter)
            return x
        vector = b.ndim == 1
        B = b[:, None] if vector else b
        out = np.empty_like(B)
        bl = B[self._lead] * self._dinv[:, None]
        if self._rest.size:
            yr = sla.cho_solve(self._chol, B[self._rest] - self._B.T @ bl, check_finite=False)
            out[self._rest] = yr
            out[self._lead] = bl - self._dinv[:, None] * (self._B @ yr)
        else:
            out[self._lead] = bl
        return out[:, 0] if vector else out

    def residual(self, x, b):
        """Relative residual ``||b - Z'Z x|| / ||b||`` per column."""
        b = np.asarray(b, dtype=float)
        r = b - self.gram @ x
        return np.linalg.norm(r, axis=0) / np.maximum(np.linalg.norm(b, axis=0), 1e-300)


def assert_identified(matrix, dense_cap=DENSE_CAP, seed=0, probes=5, rtol=1e-8):
    """Raise ``UnidentifiedError`` unless ``Z'Z`` is nonsingular.

    Small or block-reducible systems are checked through their Cholesky
    pivots; otherwise by requiring PCG to converge on random right-hand
    sides, which fails for singular systems.
    """
    solver = GramSolver(matrix, dense_cap=dense_cap)
    if solver.method == "direct":
        return solver
    rng = np.random.default_rng(seed)
    rhs = rng.standard_normal((solver.p, probes))
    try:
        pcg(solver.matvec, rhs, diag=solver.diag, rtol=rtol, maxiter=10 * solver.p)
    except ConvergenceError as exc:
        raise UnidentifiedError("unidentified design: Gram solves do not converge") from exc
    return solver
