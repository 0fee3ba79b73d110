import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st
from scipy.stats import norm

from hetfx.design import build_block_design
from hetfx.errors import InputError
from hetfx.estimators import (
    NonlinearFunctional,
    fe_linear,
    fe_quadratic_bc,
    model_cdf,
    model_linear,
    model_nonlinear,
    model_quadratic,
    plugin_nonlinear,
    posterior_nonlinear,
    posterior_state,
    simple_shrinkage,
)
from hetfx.noise import NoiseSpec
from hetfx.rc_model import CovModel, MeanModel, RCSpec, fit_rc
from hetfx.solve import QuadraticForm, ols_fit

from conftest import generic_design, random_akm_design


def identity_bundle(y):
    y = np.asarray(y, dtype=float)
    return ols_fit(generic_design(sp.identity(y.size)), y)


# ---------------------------------------------------------------- fixed effects

def test_fe_linear():
    b = identity_bundle([1.0, 2.0, 3.0])
    assert fe_linear(np.eye(3)[1], b) == 2.0
    assert fe_linear(np.zeros(3), b) == 0.0


def test_fe_linear_unbiased(rng):
    Z = build_block_design(np.repeat(np.arange(5), 3))
    c = np.array([0.2, 0.2, 0.2, 0.2, 0.2])
    vals = []
    for _ in range(500):
        eta = 1.5 + rng.standard_normal(5)
        vals.append(fe_linear(c, ols_fit(Z, Z.matrix @ eta + rng.standard_normal(Z.n_obs))))
    vals = np.array(vals)
    assert abs(vals.mean() - 1.5) < 3 * vals.std(ddof=1) / np.sqrt(vals.size)


def test_fe_quadratic_example():
    b = identity_bundle([1.0, -1.0])
    Q = QuadraticForm.weighted_variance(2, [0, 1])
    est = fe_quadratic_bc(Q, b, NoiseSpec.homoskedastic(0.1))
    assert est.plug_in == pytest.approx(1.0) and est.corrected == pytest.approx(0.95)
    est0 = fe_quadratic_bc(Q, b, NoiseSpec.homoskedastic(0.0))
    assert est0.corrected == est0.plug_in


def test_fe_quadratic_homoskedastic_formula(rng):
    Z = random_akm_design(rng, 60, 10)
    b = ols_fit(Z, rng.standard_normal(Z.n_obs))
    Q = QuadraticForm.weighted_variance(Z.n_effects, np.arange(Z.n_effects))
    G = np.linalg.inv(Z.toarray().T @ Z.toarray())
    est = fe_quadratic_bc(Q, b, NoiseSpec.homoskedastic(0.3))
    assert est.plug_in - est.corrected == pytest.approx(0.3 * np.trace(Q.toarray() @ G), rel=1e-10)


def test_plugin_nonlinear():
    b = identity_bundle([0.0, 1.0, 2.0, 3.0])
    assert plugin_nonlinear(NonlinearFunctional.cdf_at(1.5), b) == 0.5


# ---------------------------------------------------------------- model-based

def test_model_quadratic_cases():
    p = 5
    Q = QuadraticForm.weighted_variance(p, np.arange(p))
    mu = np.arange(p, dtype=float)
    assert model_quadratic(Q, RCSpec.simple(mu, 0.0)) == pytest.approx(Q.quad(mu))
    assert model_quadratic(Q, RCSpec.simple(np.zeros(p), 2.0)) == pytest.approx(2.0 * (p - 1) / p)


def test_model_linear_constant():
    rc = RCSpec(MeanModel("constant", np.array([0.7])), CovModel("scalar_diag", np.array([1.0])), 3)
    c = np.array([1.0, 2.0, -0.5])
    assert model_linear(c, rc) == pytest.approx(c.sum() * 0.7)


def test_model_cdf_cases():
    assert model_cdf(NonlinearFunctional.cdf_at(0.0), RCSpec.simple([0.0], [1.0])) == 0.5
    rc = RCSpec.simple([-1.0, 1.0], [1.0, 1.0])
    assert model_cdf(NonlinearFunctional.cdf_at(0.0), rc) == pytest.approx(0.5 * (norm.cdf(1) + norm.cdf(-1)))
    assert model_cdf(NonlinearFunctional.cdf_at(1e6), rc) == 1.0
    assert model_cdf(NonlinearFunctional.cdf_at(-1e6), rc) == 0.0
    # a zero-variance effect contributes a step
    rc0 = RCSpec.simple([0.0, 2.0], [0.0, 1.0])
    assert model_cdf(NonlinearFunctional.cdf_at(0.0), rc0) == pytest.approx(0.5 + 0.5 * norm.cdf(-2.0))
    with pytest.raises(InputError):
        model_cdf(NonlinearFunctional.mean(), rc)


@settings(max_examples=40, deadline=None)
@given(st.floats(-5, 5), st.floats(0, 3))
def test_model_cdf_monotone(a, step):
    rc = RCSpec.simple([-1.0, 0.5, 2.0], [0.5, 1.0, 0.0])
    lo = model_cdf(NonlinearFunctional.cdf_at(a), rc)
    hi = model_cdf(NonlinearFunctional.cdf_at(a + step), rc)
    assert 0.0 <= lo <= hi <= 1.0


def test_model_nonlinear_matches_closed_forms(rng):
    p = 40
    mu = rng.standard_normal(p)
    rc = RCSpec.simple(mu, rng.uniform(0.2, 1.0, p))
    est = model_nonlinear(NonlinearFunctional.mean(), rc, draws=4000, seed=1, return_se=True)
    assert abs(est.value - model_linear(np.full(p, 1 / p), rc)) <= 3 * est.se + 1e-12
    est = model_nonlinear(NonlinearFunctional.moment_power(2), rc, draws=4000, seed=1, return_se=True)
    Q = QuadraticForm.weighted_variance(p, np.arange(p))
    assert abs(est.value - model_quadratic(Q, rc)) <= 3 * est.se


def test_model_nonlinear_symmetric_skewness():
    rc = RCSpec.simple(np.zeros(30), 1.0)
    est = model_nonlinear(NonlinearFunctional.moment_power(3), rc, draws=2000, seed=4, return_se=True)
    assert abs(est.value) <= 3 * est.se + 1e-15


def test_model_nonlinear_grouped_correlation():
    C = np.array([[1.0, 0.9], [0.9, 1.0]])
    cov = CovModel("grouped_blocks", C, labels=np.tile([0, 1], 50), blocks=np.repeat(np.arange(50), 2))
    rc = RCSpec(MeanModel("constant", np.zeros(1)), cov, 100)

    def H(X):
        return (X[:, ::2] * X[:, 1::2]).mean(axis=1)

    est = model_nonlinear(NonlinearFunctional.custom(H), rc, draws=4000, seed=2, return_se=True)
    assert abs(est.value - 0.9) <= 3 * est.se


def test_model_nonlinear_reproducible():
    rc = RCSpec.simple(np.zeros(10), 1.0)
    f = NonlinearFunctional.moment_power(4)
    assert model_nonlinear(f, rc, draws=500, seed=3) == model_nonlinear(f, rc, draws=500, seed=3)


# ---------------------------------------------------------------- posterior

def test_posterior_scalar():
    b = identity_bundle([2.0])
    st_ = posterior_state(b, NoiseSpec.homoskedastic(1.0), RCSpec.simple([0.0], [1.0]))
    assert st_.post_mean[0] == pytest.approx(1.0) and st_.G_diag[0] == pytest.approx(0.5)


def test_posterior_limits(rng):
    y = rng.standard_normal(6)
    b = identity_bundle(y)
    diffuse = posterior_state(b, NoiseSpec.homoskedastic(1.0), RCSpec.simple(np.zeros(6), 1e12))
    np.testing.assert_allclose(diffuse.post_mean, y, atol=1e-9)
    sharp = posterior_state(b, NoiseSpec.homoskedastic(1e-14), RCSpec.simple(np.zeros(6), 1.0))
    np.testing.assert_allclose(sharp.post_mean, y, atol=1e-9)


def test_posterior_matches_simple_shrinkage(rng):
    y = rng.standard_normal(50)
    st_ = posterior_state(identity_bundle(y), NoiseSpec.homoskedastic(0.3), RCSpec.simple(np.full(50, 0.4), 0.8))
    np.testing.assert_allclose(st_.post_mean, simple_shrinkage(y, 0.4, 0.8, 0.3), atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(0.01, 4), st.floats(0.01, 4)), min_size=1, max_size=8))
def test_posterior_diagonal_invariants(rows):
    y = np.array([r[0] for r in rows])
    sig = np.array([r[1] for r in rows])
    om = np.array([r[2] for r in rows])
    b = identity_bundle(y)
    mu = np.full(y.size, 0.5)
    st_ = posterior_state(b, NoiseSpec.diagonal(om), RCSpec.simple(mu, sig))
    assert np.all(st_.G_diag <= np.minimum(sig, om) + 1e-12)
    np.testing.assert_allclose(st_.G_diag, 1 / (1 / sig + 1 / om), rtol=1e-10)
    lo, hi = np.minimum(y, mu), np.maximum(y, mu)
    assert np.all((st_.post_mean >= lo - 1e-12) & (st_.post_mean <= hi + 1e-12))


def test_posterior_dense_oracle_and_probed(rng):
    Z = random_akm_design(rng, 80, 10)
    Y = rng.standard_normal(Z.n_obs)
    b = ols_fit(Z, Y)
    noise = NoiseSpec.diagonal(rng.uniform(0.2, 1.0, Z.n_obs))
    rc = RCSpec.simple(rng.standard_normal(Z.n_effects), rng.uniform(0.1, 1.0, Z.n_effects))
    Zd = Z.toarray()
    Gi = np.linalg.inv(Zd.T @ Zd)
    S = Gi @ Zd.T @ np.diag(noise.omega) @ Zd @ Gi
    Sg = np.diag(rc.Sigma.diag())
    m = rc.mu + Sg @ np.linalg.solve(Sg + S, b.eta_hat - rc.mu)
    G = np.linalg.inv(np.linalg.inv(S) + np.linalg.inv(Sg))
    dense = posterior_state(b, noise, rc)
    assert dense.exact
    np.testing.assert_allclose(dense.post_mean, m, rtol=1e-8, atol=1e-10)
    np.testing.assert_allclose(dense.G_diag, np.diag(G), rtol=1e-8)
    x = rng.standard_normal(Z.n_effects)
    np.testing.assert_allclose(dense.G_apply(x), G @ x, rtol=1e-8, atol=1e-10)
    probed = posterior_state(b, noise, rc, dense_cap=0, probes=400, seed=1)
    assert not probed.exact
    np.testing.assert_allclose(probed.post_mean, m, rtol=1e-7, atol=1e-9)
    np.testing.assert_allclose(probed.G_apply(x), G @ x, rtol=1e-7, atol=1e-9)
    assert np.abs(probed.G_diag - np.diag(G)).max() < 0.25 * np.diag(G).max()


def test_posterior_negative_leaveout_floored(rng):
    b = identity_bundle(rng.standard_normal(4))
    st_ = posterior_state(b, NoiseSpec.diagonal([0.5, -0.2, 0.1, 0.3]), RCSpec.simple(np.zeros(4), 1.0))
    assert np.all(np.isfinite(st_.post_mean)) and np.all(st_.G_diag >= 0)


def test_posterior_rejects_mismatched_model():
    with pytest.raises(InputError):
        posterior_state(identity_bundle([1.0, 2.0]), NoiseSpec.homoskedastic(1.0), RCSpec.simple([0.0], [1.0]))


def test_posterior_nonlinear_identity_and_limits(rng):
    y = rng.standard_normal(20)
    b = identity_bundle(y)
    st_ = posterior_state(b, NoiseSpec.homoskedastic(0.5), RCSpec.simple(np.zeros(20), 1.0))
    for j in (0, 7):
        H = NonlinearFunctional.custom(lambda X, j=j: X[:, j])
        assert posterior_nonlinear(H, st_, draws=100, seed=0) == pytest.approx(st_.post_mean[j], abs=1e-12)
    f = NonlinearFunctional.moment_power(2)
    sharp = posterior_state(b, NoiseSpec.homoskedastic(1e-16), RCSpec.simple(np.zeros(20), 1.0))
    assert posterior_nonlinear(f, sharp, draws=200, seed=1) == pytest.approx(f(y), rel=1e-6)
    rc = RCSpec.simple(np.zeros(20), 1.0)
    diffuse = posterior_state(b, NoiseSpec.homoskedastic(1e8), rc)
    a = posterior_nonlinear(f, diffuse, draws=4000, seed=2, return_se=True)
    m = model_nonlinear(f, rc, draws=4000, seed=3, return_se=True)
    assert abs(a.value - m.value) <= 3 * np.hypot(a.se, m.se)


def test_posterior_nonlinear_reproducible(rng):
    st_ = posterior_state(identity_bundle(rng.standard_normal(8)), NoiseSpec.homoskedastic(0.5),
                          RCSpec.simple(np.zeros(8), 1.0))
    f = NonlinearFunctional.cdf_at(0.1)
    assert posterior_nonlinear(f, st_, draws=999, seed=7) == posterior_nonlinear(f, st_, draws=999, seed=7)


def test_simple_shrinkage():
    y = np.array([2.0, -1.0])
    np.testing.assert_allclose(simple_shrinkage(y, 0.0, 1.0, 0.0), y)
    np.testing.assert_allclose(simple_shrinkage(y, 0.3, 0.0, 1.0), [0.3, 0.3])
    assert simple_shrinkage(np.array([2.0]), 0.0, 1.0, 1.0)[0] == 1.0
    with pytest.raises(InputError):
        simple_shrinkage(y, 0.0, 0.0, 0.0)


# ---------------------------------------------------------------- functionals

def test_functional_values():
    x = np.array([0.0, 1.0, 2.0, 3.0])
    assert NonlinearFunctional.mean()(x) == 1.5
    assert NonlinearFunctional.moment_power(2)(x) == pytest.approx(np.var(x))
    assert NonlinearFunctional.moment_power(3)(x) == pytest.approx(0.0, abs=1e-12)
    assert NonlinearFunctional.cdf_at(1.0, weights=[0.1, 0.2, 0.3, 0.4])(x) == pytest.approx(0.3)
    assert NonlinearFunctional.mean(index=[1, 3])(x) == 2.0
    d = NonlinearFunctional.density_at(1.5, bandwidth=1.0)(x)
    assert d == pytest.approx(norm.pdf(1.5 - x).mean())
    h = 1.06 * np.std(x) * 4 ** (-0.2)
    assert NonlinearFunctional.density_at(1.5)(x) == pytest.approx(norm.pdf((1.5 - x) / h).mean() / h)
    batch = NonlinearFunctional.mean()(np.vstack([x, 2 * x]))
    np.testing.assert_allclose(batch, [1.5, 3.0])


def test_functional_validation():
    with pytest.raises(ValueError):
        NonlinearFunctional.cdf_at(0.0, weights=[0.5, 0.6])
    with pytest.raises(ValueError):
        NonlinearFunctional.moment_power(5)
    with pytest.raises(InputError):
        NonlinearFunctional.mean(weights=[0.5, 0.5])(np.zeros(3))


def test_fitted_pipeline_consistency(rng):
    y = 1.0 + rng.standard_normal(300) + 0.5 * rng.standard_normal(300)
    b = identity_bundle(y)
    rc = fit_rc(b, NoiseSpec.homoskedastic(0.25))
    Q = QuadraticForm.weighted_variance(300, np.arange(300))
    # uncentered fit: tau2 = mean squared deviation minus the noise variance
    assert rc.cov.params[0] == pytest.approx(Q.quad(y) - 0.25, rel=1e-10)
    assert model_quadratic(Q, rc) == pytest.approx(299 / 300 * rc.cov.params[0], rel=1e-10)
