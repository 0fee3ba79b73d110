"""Symmetric block-diagonal matrices over arbitrary index sets."""
import numpy as np


class BlockDiag:
    """``p x p`` symmetric matrix that is block diagonal up to a permutation.

    Blocks of equal size are stored together as ``(nb, k, k)`` stacks so that
    products, square roots and eigenvalues are batched.
    """

    def __init__(self, p, index_sets, matrices):
        self.p = int(p)
        by_size = {}
        for idx, mat in zip(index_sets, matrices):
            idx = np.asarray(idx, dtype=int)
            mat = np.asarray(mat, dtype=float).reshape(idx.size, idx.size)
            by_size.setdefault(idx.size, ([], []))
            by_size[idx.size][0].append(idx)
            by_size[idx.size][1].append(mat)
        self.classes = [(np.array(i), np.array(m)) for _, (i, m) in sorted(by_size.items())]
        covered = np.concatenate([i.ravel() for i, _ in self.classes]) if self.classes else np.array([], int)
        if covered.size != np.unique(covered).size or (covered.size and covered.max() >= self.p):
            raise ValueError("blocks must be disjoint index sets within range")
        self._sqrt = None

    @classmethod
    def diagonal(cls, values):
        values = np.asarray(values, dtype=float)
        p = values.size
        return cls(p, np.arange(p)[:, None], values[:, None, None])

    @classmethod
    def from_function(cls, p, blocks, entry):
        """Blocks given by index lists; ``entry(idx)`` returns the ``k x k`` block."""
        return cls(p, blocks, [entry(np.asarray(b, dtype=int)) for b in blocks])

    def _map(self, x, fn):
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        for (idx, mats), aux in zip(self.classes, fn):
            if x.ndim == 1:
                out[idx] = np.einsum("bij,bj->bi", aux, x[idx])
            else:
                out[idx] = np.einsum("bij,bjr->bir", aux, x[idx])
        return out

    def apply(self, x):
        return self._map(x, [m for _, m in self.classes])

    def _roots(self):
        if self._sqrt is None:
            roots = []
            for _, mats in self.classes:
                w, v = np.linalg.eigh(mats)
                roots.append(np.einsum("bij,bj,bkj->bik", v, np.sqrt(np.clip(w, 0, None)), v))
            self._sqrt = roots
        return self._sqrt

    def sqrt_apply(self, x):
        """Apply the symmetric PSD square root (negative eigenvalues clipped)."""
        return self._map(x, self._roots())

    def eigvalsh(self):
        return np.concatenate([np.linalg.eigvalsh(m).ravel() for _, m in self.classes])

    def diag(self):
        out = np.zeros(self.p)
        for idx, mats in self.classes:
            out[idx] = np.diagonal(mats, axis1=1, axis2=2)
        return out

    def pairs(self):
        """All stored entries as ``(rows, cols, values)``."""
        rows, cols, vals = [], [], []
        for idx, mats in self.classes:
            k = idx.shape[1]
            rows.append(np.repeat(idx, k, axis=1).ravel())
            cols.append(np.tile(idx, (1, k)).ravel())
            vals.append(mats.ravel())
        if not rows:
            return np.array([], int), np.array([], int), np.array([])
        return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)

    def trace_with(self, Q):
        """``Trace(Q B)`` for a ``QuadraticForm`` ``Q``."""
        r, c, v = self.pairs()
        return float(v @ Q.entries(c, r))

    def toarray(self):
        out = np.zeros((self.p, self.p))
        r, c, v = self.pairs()
        out[r, c] = v
        return out

    def map_blocks(self, fn):
        """New ``BlockDiag`` with each stacked block array replaced by ``fn(stack)``."""
        out = BlockDiag(self.p, [], [])
        out.classes = [(idx, fn(m)) for idx, m in self.classes]
        return out
