"""Shared fixtures: random small designs and dense-matrix oracles."""
import numpy as np
import pytest
import scipy.sparse as sp

from hetfx.design import DesignMatrix, EffectLabel, build_akm_design, finalize_identification

ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)


def report(number, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    print(line)
    ACCEPTANCE.append(line)
    return ok


def generic_design(m):
    m = sp.csr_matrix(m)
    labels = tuple(EffectLabel("slope", j) for j in range(m.shape[1]))
    return DesignMatrix(m, labels, tuple(range(m.shape[0])))


def random_sparse_design(rng, n, p, density=0.3):
    """Full-rank sparse design: a random sparse matrix plus a unit diagonal band."""
    while True:
        m = sp.random(n, p, density=density, random_state=rng, data_rvs=rng.standard_normal)
        band = sp.coo_matrix((np.ones(p), (rng.permutation(n)[:p], np.arange(p))), shape=(n, p))
        m = (m + band).tocsr()
        if np.linalg.matrix_rank(m.toarray()) == p:
            return generic_design(m)


def random_akm_design(rng, n_workers, n_firms, periods=2, move=0.6):
    """Connected, normalized AKM design on a random panel."""
    while True:
        firm = rng.integers(0, n_firms, n_workers)
        spells = []
        for w in range(n_workers):
            f = firm[w]
            for t in range(periods):
                if t and rng.random() < move:
                    f = rng.integers(0, n_firms)
                spells.append((w, int(f), t))
        Z, _ = build_akm_design(spells)
        try:
            return finalize_identification(Z)
        except ValueError:
            continue


def dense_oracles(Z, Y, omega):
    """Dense reference values for OLS, ``S``, leverages."""
    Zd = Z.matrix.toarray() if hasattr(Z, "matrix") else np.asarray(Z)
    eta, *_ = np.linalg.lstsq(Zd, Y, rcond=None)
    Ginv = np.linalg.inv(Zd.T @ Zd)
    S = Ginv @ Zd.T @ np.diag(omega) @ Zd @ Ginv
    P = np.einsum("ij,jk,ik->i", Zd, Ginv, Zd)
    return eta, S, P


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
