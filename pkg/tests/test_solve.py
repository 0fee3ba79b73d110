import warnings

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from hetfx.design import build_akm_design, build_block_design, finalize_identification
from hetfx.linalg import GramSolver
from hetfx.noise import NoiseSpec
from hetfx.solve import (
    QuadraticForm,
    apply_S,
    leverage_diagonals,
    ols_fit,
    s_diagonal,
    s_entries,
    trace_QS,
    trace_QS_many,
)

from conftest import dense_oracles, generic_design, random_akm_design, random_sparse_design, rel_err

SPELLS = [("w1", "f1", 1), ("w1", "f1", 2), ("w2", "f1", 1), ("w2", "f2", 2)]


# ---------------------------------------------------------------- OLS

def test_ols_identity():
    y = np.array([1.0, -2.0, 5.0])
    b = ols_fit(generic_design(sp.identity(3)), y)
    np.testing.assert_allclose(b.eta_hat, y)


def test_ols_group_mean():
    b = ols_fit(build_block_design(["A", "A", "B"]), np.array([1.0, 3.0, 7.0]))
    np.testing.assert_allclose(b.eta_hat, [2.0, 7.0])


def test_ols_akm_exact_recovery():
    Z = finalize_identification(build_akm_design(SPELLS)[0])
    alpha, psi = np.array([0.3, -0.2]), np.array([0.5, 0.1])
    Y = np.array([alpha[0] + psi[0]] * 2 + [alpha[1] + psi[0], alpha[1] + psi[1]])
    b = ols_fit(Z, Y)
    # drop_last_firm: workers absorb psi_ref, firms are relative to it
    np.testing.assert_allclose(b.eta_hat, [alpha[0] + psi[1], alpha[1] + psi[1], psi[0] - psi[1]], atol=1e-12)


@pytest.mark.parametrize("method", ["direct", "cg"])
def test_ols_orthogonality(rng, method):
    Z = random_akm_design(rng, 80, 12)
    Y = rng.standard_normal(Z.n_obs)
    b = ols_fit(Z, Y, method=method)
    m = Z.matrix
    assert np.linalg.norm(m.T @ (Y - m @ b.eta_hat)) <= 1e-8 * np.linalg.norm(m.T @ Y)
    eta, _, _ = dense_oracles(Z, Y, np.ones(Z.n_obs))
    np.testing.assert_allclose(b.eta_hat, eta, atol=1e-8)


def test_gram_solver_cg_and_direct_agree(rng):
    Z = random_sparse_design(rng, 60, 15)
    b = rng.standard_normal((15, 3))
    x1 = GramSolver(Z.matrix, method="direct").solve(b)
    x2 = GramSolver(Z.matrix, method="cg", rtol=1e-12).solve(b)
    np.testing.assert_allclose(x1, x2, atol=1e-8)


# ---------------------------------------------------------------- S(Z)

def test_apply_S_scalar():
    b = ols_fit(generic_design(np.ones((2, 1))), np.zeros(2))
    assert apply_S(b, NoiseSpec.homoskedastic(1.0), np.array([1.0]))[0] == pytest.approx(0.5)
    assert apply_S(b, NoiseSpec.homoskedastic(1.0), np.zeros(1))[0] == 0.0


def test_apply_S_dense_oracle(rng):
    for _ in range(5):
        Z = random_sparse_design(rng, int(rng.integers(20, 200)), int(rng.integers(2, 20)))
        omega = rng.uniform(0.1, 2.0, Z.n_obs)
        b = ols_fit(Z, rng.standard_normal(Z.n_obs))
        _, S, _ = dense_oracles(Z, b.Y, omega)
        got = apply_S(b, NoiseSpec.diagonal(omega), np.eye(Z.n_effects))
        assert rel_err(got, S) < 1e-8


def test_apply_S_symmetric_psd(rng):
    Z = random_akm_design(rng, 50, 8)
    b = ols_fit(Z, rng.standard_normal(Z.n_obs))
    noise = NoiseSpec.diagonal(rng.uniform(0.1, 1.0, Z.n_obs))
    g, h = rng.standard_normal((2, Z.n_effects))
    assert g @ apply_S(b, noise, h) == pytest.approx(h @ apply_S(b, noise, g), rel=1e-10)
    G = rng.standard_normal((Z.n_effects, 20))
    assert np.min(np.einsum("ij,ij->j", G, apply_S(b, noise, G))) >= -1e-10


# ---------------------------------------------------------------- leverages

def test_leverage_mean():
    np.testing.assert_allclose(leverage_diagonals(build_block_design([0] * 4)), 0.25)


def test_leverage_sum_and_range(rng):
    Z = random_akm_design(rng, 100, 15)
    P = leverage_diagonals(Z)
    assert P.sum() == pytest.approx(Z.n_effects, rel=1e-10)
    assert P.min() >= 0 and P.max() <= 1 + 1e-12
    _, _, Pd = dense_oracles(Z, np.zeros(Z.n_obs), np.ones(Z.n_obs))
    np.testing.assert_allclose(P, Pd, atol=1e-10)


def test_leverage_sketched(rng):
    Z = random_akm_design(rng, 600, 60)
    P = leverage_diagonals(Z)
    Ps = leverage_diagonals(Z, mode="sketched", k=500, seed=1)
    assert np.abs(Ps - P).max() < 0.05


def test_leverage_cap(rng):
    Z = random_sparse_design(rng, 30, 3)
    with pytest.raises(ValueError):
        leverage_diagonals(Z, cap=10)


# ---------------------------------------------------------------- traces

def test_trace_example():
    # S = 0.1 I for p = 2
    b = ols_fit(generic_design(sp.identity(2)), np.array([1.0, -1.0]))
    Q = QuadraticForm.weighted_variance(2, [0, 1])
    noise = NoiseSpec.homoskedastic(0.1)
    for probes in (1, 7, 100):
        assert trace_QS(Q, b, noise, probes=probes) == pytest.approx(0.05, abs=1e-14)
    assert trace_QS(QuadraticForm.custom(sp.csr_matrix((2, 2))), b, noise) == 0.0


def test_weighted_variance_matrix():
    Q = QuadraticForm.weighted_variance(2, [0, 1]).toarray()
    np.testing.assert_allclose(Q, 0.5 * (np.eye(2) - 0.5 * np.ones((2, 2))))


def test_trace_exact_dense_oracle(rng):
    for _ in range(4):
        Z = random_akm_design(rng, 40, 8)
        omega = rng.uniform(0.1, 2.0, Z.n_obs)
        b = ols_fit(Z, rng.standard_normal(Z.n_obs))
        _, S, _ = dense_oracles(Z, b.Y, omega)
        w = rng.dirichlet(np.ones(Z.n_effects))
        Q = QuadraticForm.weighted_variance(Z.n_effects, np.arange(Z.n_effects), w)
        for noise in (NoiseSpec.diagonal(omega),):
            assert trace_QS(Q, b, noise, method="exact") == pytest.approx(np.trace(Q.toarray() @ S), rel=1e-10)
        s2 = NoiseSpec.homoskedastic(0.3)
        _, S2, _ = dense_oracles(Z, b.Y, np.full(Z.n_obs, 0.3))
        assert trace_QS(Q, b, s2, method="exact") == pytest.approx(np.trace(Q.toarray() @ S2), rel=1e-10)


def test_trace_hutchinson_accuracy(rng):
    Z = random_akm_design(rng, 400, 40)
    b = ols_fit(Z, rng.standard_normal(Z.n_obs))
    noise = NoiseSpec.homoskedastic(1.0)
    Q = QuadraticForm.weighted_variance(Z.n_effects, np.arange(Z.n_effects))
    exact = trace_QS(Q, b, noise, method="exact")
    est = trace_QS(Q, b, noise, probes=1000, seed=3, method="hutchinson")
    assert abs(est - exact) < 0.01 * abs(exact)


def test_trace_reproducible_and_many(rng):
    Z = random_akm_design(rng, 60, 10)
    b = ols_fit(Z, rng.standard_normal(Z.n_obs))
    noise = NoiseSpec.homoskedastic(0.5)
    Qs = [QuadraticForm.weighted_variance(Z.n_effects, np.arange(k)) for k in (3, 5)]
    a = trace_QS(Qs[0], b, noise, probes=50, seed=9, method="hutchinson")
    assert a == trace_QS(Qs[0], b, noise, probes=50, seed=9, method="hutchinson")
    many = trace_QS_many(Qs, b, noise, method="exact")
    np.testing.assert_allclose(many, [trace_QS(Q, b, noise, method="exact") for Q in Qs], rtol=1e-12)


def test_negative_trace_warns():
    b = ols_fit(generic_design(sp.identity(2)), np.zeros(2))
    Q = QuadraticForm.custom(sp.csr_matrix(-np.eye(2)))
    with pytest.warns(RuntimeWarning):
        assert trace_QS(Q, b, NoiseSpec.homoskedastic(1.0)) == pytest.approx(-2.0)


def test_covariance_form_no_warning(rng):
    b = ols_fit(generic_design(sp.identity(4)), rng.standard_normal(4))
    Q = QuadraticForm.weighted_covariance(4, [0, 1], [2, 3])
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        trace_QS(Q, b, NoiseSpec.homoskedastic(1.0))


def test_s_entries_and_diagonal(rng):
    Z = random_akm_design(rng, 40, 6)
    omega = rng.uniform(0.1, 1.0, Z.n_obs)
    b = ols_fit(Z, rng.standard_normal(Z.n_obs))
    _, S, _ = dense_oracles(Z, b.Y, omega)
    noise = NoiseSpec.diagonal(omega)
    np.testing.assert_allclose(s_diagonal(b, noise, method="exact"), np.diag(S), rtol=1e-10)
    rows, cols = np.array([0, 1, 2]), np.array([2, 0, 1])
    np.testing.assert_allclose(s_entries(b, noise, rows, cols, method="exact"), S[rows, cols], rtol=1e-10)


# ---------------------------------------------------------------- quadratic forms

def test_from_maps_equals_explicit(rng):
    A = sp.random(12, 5, density=0.4, random_state=rng).tocsr()
    B = sp.random(12, 5, density=0.4, random_state=rng).tocsr()
    w = rng.dirichlet(np.ones(12))
    Q = QuadraticForm.from_maps(A, B, w)
    x = rng.standard_normal(5)
    a, c = A @ x, B @ x
    assert Q.quad(x) == pytest.approx(w @ (a * c) - (w @ a) * (w @ c), rel=1e-12)
    np.testing.assert_allclose(Q.toarray(), Q.toarray().T)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=12))
def test_weighted_variance_nonnegative(x):
    x = np.array(x)
    Q = QuadraticForm.weighted_variance(x.size, np.arange(x.size))
    assert Q.quad(x) == pytest.approx(np.var(x), rel=1e-9, abs=1e-9)
    assert Q.quad(x) >= -1e-9


def test_weighted_form_validation():
    with pytest.raises(ValueError):
        QuadraticForm.weighted_variance(3, [0, 1], [0.7, 0.7])
    with pytest.raises(ValueError):
        QuadraticForm.custom(sp.csr_matrix(np.array([[0.0, 1.0], [0.0, 0.0]])))
