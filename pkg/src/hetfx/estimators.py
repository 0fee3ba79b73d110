"""Estimators of linear, quadratic and nonlinear functionals of the effects.

Three strategies are provided:

* fixed effects: functionals of ``eta_hat``, with the quadratic ones corrected
  by ``Trace(Q S)``;
* model based: closed forms (or Monte Carlo integrals) under the fitted
  ``N(mu, Sigma)``;
* posterior: functionals averaged over the posterior ``N(m, G)`` of the
  effects given the estimates.
"""
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.special import ndtr

from ._blocks import BlockDiag
from ._random import stream
from .errors import InputError
from .linalg import DENSE_CAP, pcg
from .rc_model import VAR_FLOOR
from .solve import apply_S, s_diagonal, trace_QS

NONLINEAR_KINDS = ("mean", "moment_power", "cdf_at", "density_at", "custom")

_DRAW_BATCH = 256


# ---------------------------------------------------------------- functionals

@dataclass(frozen=True, eq=False)
class NonlinearFunctional:
    """A scalar function ``H`` of the effect vector.

    ``index`` selects the effects entering the functional (all by default),
    either as column indices or as a sparse map from columns to unit
    effects (see ``design.effect_map``); ``weights`` (nonnegative, summing
    to one) weight them.

    * ``mean``: ``sum_j w_j x_j``
    * ``moment_power``: ``sum_j w_j (x_j - xbar_w)^k`` for ``k`` in 2, 3, 4
    * ``cdf_at``: ``sum_j w_j 1{x_j <= a}``
    * ``density_at``: Gaussian-kernel density at ``a``; the bandwidth
      defaults to Silverman's rule on the evaluated vector
    * ``custom``: ``H`` maps an ``(R, p)`` array of effect vectors to ``(R,)``
    """

    kind: str
    weights: Optional[np.ndarray] = None
    index: Optional[np.ndarray] = None
    a: float = 0.0
    k: int = 2
    bandwidth: Optional[float] = None
    H: Optional[Callable] = None

    def __post_init__(self):
        if self.kind not in NONLINEAR_KINDS:
            raise ValueError(f"unknown functional {self.kind!r}")
        if self.kind == "moment_power" and self.k not in (2, 3, 4):
            raise ValueError("moment power must be 2, 3 or 4")
        if self.kind == "custom" and self.H is None:
            raise ValueError("custom functional needs H")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-10:
                raise ValueError("weights must be nonnegative and sum to one")

    @classmethod
    def mean(cls, weights=None, index=None):
        return cls("mean", weights=weights, index=index)

    @classmethod
    def moment_power(cls, k, weights=None, index=None):
        return cls("moment_power", weights=weights, index=index, k=k)

    @classmethod
    def cdf_at(cls, a, weights=None, index=None):
        return cls("cdf_at", weights=weights, index=index, a=float(a))

    @classmethod
    def density_at(cls, a, weights=None, index=None, bandwidth=None):
        return cls("density_at", weights=weights, index=index, a=float(a), bandwidth=bandwidth)

    @classmethod
    def custom(cls, H):
        return cls("custom", H=H)

    def resolve(self, p):
        """Return ``(map, weights)`` with ``map`` a sparse ``m x p`` selection."""
        if self.index is None:
            L = sp.identity(p, format="csr")
        elif sp.issparse(self.index):
            L = sp.csr_matrix(self.index)
        else:
            idx = np.asarray(self.index, dtype=int)
            L = sp.csr_matrix((np.ones(idx.size), (np.arange(idx.size), idx)), shape=(idx.size, p))
        m = L.shape[0]
        if self.weights is None:
            w = np.full(m, 1.0 / m)
        else:
            w = np.asarray(self.weights, dtype=float)
            if w.shape != (m,):
                raise InputError("weights must match the selected effects")
        return L, w

    def __call__(self, X):
        """Evaluate on a ``(p,)`` vector or an ``(R, p)`` array of vectors."""
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if self.kind == "custom":
            out = np.asarray(self.H(X), dtype=float).reshape(X.shape[0])
            return out[0] if single else out
        L, w = self.resolve(X.shape[1])
        x = np.asarray((L @ X.T).T)
        if self.kind == "mean":
            out = x @ w
        elif self.kind == "moment_power":
            out = ((x - (x @ w)[:, None]) ** self.k) @ w
        elif self.kind == "cdf_at":
            out = (x <= self.a) @ w
        else:
            if self.bandwidth is not None:
                h = np.full(x.shape[0], float(self.bandwidth))
            else:
                sd = np.sqrt(np.maximum(((x - (x @ w)[:, None]) ** 2) @ w, 0.0))
                h = 1.06 * sd * (1.0 / (w @ w)) ** (-0.2)
            h = np.maximum(h, 1e-300)
            u = (self.a - x) / h[:, None]
            out = (np.exp(-0.5 * u**2) / np.sqrt(2 * np.pi)) @ w / h
        return out[0] if single else out


class MCEstimate(NamedTuple):
    value: float
    se: float
    draws: int


def _antithetic_mean(H, center, sqrt_apply, draws, seed, batch=_DRAW_BATCH):
    """Mean of ``H(center +/- L eps)`` over antithetic pairs.

    Pair batch ``b`` draws its normals from stream ``(seed, b)``; the number
    of evaluations is ``draws`` rounded up to an even count.
    """
    if draws < 1:
        raise ValueError("draws must be >= 1")
    pairs = (int(draws) + 1) // 2
    p = center.size
    vals = []
    for b, start in enumerate(range(0, pairs, batch)):
        m = min(batch, pairs - start)
        eps = stream(seed, b).standard_normal((m, p))
        shift = np.asarray(sqrt_apply(eps.T)).T
        vals.append(0.5 * (H(center + shift) + H(center - shift)))
    vals = np.concatenate(vals)
    se = float(vals.std(ddof=1) / np.sqrt(pairs)) if pairs > 1 else 0.0
    return MCEstimate(float(vals.mean()), se, 2 * pairs)


# ---------------------------------------------------------------- strategy 1

class QuadraticEstimate(NamedTuple):
    plug_in: float
    corrected: float


def fe_linear(c, bundle):
    """``c' eta_hat``."""
    c = np.asarray(c, dtype=float)
    if c.shape != bundle.eta_hat.shape:
        raise InputError("linear form must have length p")
    return float(c @ bundle.eta_hat)


def fe_quadratic_bc(Q, bundle, noise, probes=100, seed=0, method="auto"):
    """Plug-in ``eta_hat' Q eta_hat`` and its bias-corrected version.

    The correction subtracts ``Trace(Q S)``, which for homoskedastic noise is
    ``sigma2 * Trace(Q (Z'Z)^{-1})``.
    """
    plug = float(Q.quad(bundle.eta_hat))
    return QuadraticEstimate(plug, plug - trace_QS(Q, bundle, noise, probes=probes, seed=seed, method=method))


def plugin_nonlinear(f, bundle):
    """``H(eta_hat)``, ignoring estimation noise."""
    return float(f(bundle.eta_hat))


# ---------------------------------------------------------------- strategy 2

def model_linear(c, rc):
    """``c' mu``."""
    return float(np.asarray(c, dtype=float) @ rc.mu)


def model_quadratic(Q, rc):
    """``mu' Q mu + Trace(Q Sigma)``."""
    return float(Q.quad(rc.mu) + rc.Sigma.trace_with(Q))


def model_cdf(f, rc):
    """``sum_j w_j Phi((a - mu_j) / sqrt(Sigma_jj))``.

    Effects with zero variance (at most the ``1e-12`` floor of fitted
    models) contribute ``1{mu_j <= a}``.
    """
    if f.kind != "cdf_at":
        raise InputError("model_cdf needs a cdf_at functional")
    L, w = f.resolve(rc.p)
    mu = L @ rc.mu
    var = np.asarray((L.multiply(rc.Sigma.apply(L.T.toarray()).T)).sum(axis=1)).ravel()
    live = var > VAR_FLOOR
    sd = np.sqrt(np.where(live, var, 1.0))
    return float(w @ np.where(live, ndtr((f.a - mu) / sd), (mu <= f.a).astype(float)))


def model_nonlinear(f, rc, draws=2000, seed=0, return_se=False):
    """Monte Carlo integral of ``H`` over ``N(mu, Sigma)`` with antithetic pairs.

    Draws use the block square root of ``Sigma``, so correlations within
    blocks are respected.
    """
    est = _antithetic_mean(f, rc.mu, rc.Sigma.sqrt_apply, draws, seed)
    return est if return_se else est.value


# ---------------------------------------------------------------- strategy 3

@dataclass(frozen=True, eq=False)
class PosteriorState:
    """Posterior ``N(post_mean, G)`` of the effects.

    ``G_apply`` applies ``G = (S^{-1} + Sigma^{-1})^{-1}`` to vectors;
    ``G_blocks`` holds the entries of ``G`` on the block pattern of ``Sigma``
    (exact or probed) and is what posterior draws use.
    """

    post_mean: np.ndarray
    G_diag: np.ndarray
    G_blocks: BlockDiag
    G_apply: Callable
    exact: bool

    @property
    def post_sd(self):
        return np.sqrt(np.maximum(self.G_diag, 0.0))


def _psd_solve(A, B):
    try:
        return sla.solve(A, B, assume_a="pos")
    except (np.linalg.LinAlgError, sla.LinAlgWarning):
        return sla.pinvh(A) @ B


def posterior_state(bundle, noise, rc, rtol=1e-10, probes=100, seed=0, dense_cap=DENSE_CAP):
    """Posterior mean and covariance of the effects.

    The mean ``mu + Sigma (Sigma + S)^{-1} (eta_hat - mu)`` equals
    ``G (S^{-1} eta_hat + Sigma^{-1} mu)`` and is found by preconditioned CG
    on the operator ``Sigma + S`` (no inverse is formed). The covariance is
    ``G = A - A (Sigma + S)^{-1} A`` with ``A`` whichever of ``Sigma`` and
    ``S`` has the smaller trace. For ``p <= dense_cap`` it is formed exactly;
    otherwise its entries on the block pattern of ``Sigma`` are estimated
    with Rademacher probes and each block is projected onto the PSD cone.
    Negative leave-out variances are floored so that ``S`` is PSD.
    """
    p = bundle.p
    noise = noise.floored()
    if rc.p != p:
        raise InputError(f"random-coefficient model has {rc.p} effects, design has {p}")
    Sigma = rc.Sigma
    mu = rc.mu
    sig_diag = Sigma.diag()

    def op(x):
        return Sigma.apply(x) + apply_S(bundle, noise, x)

    zm = bundle.matrix.tocsr()
    if np.diff(zm.indptr).max(initial=0) <= 1 and all(idx.shape[1] == 1 for idx, _ in Sigma.classes):
        # one effect per row and diagonal Sigma: coordinate-wise shrinkage
        d = bundle.gram_solver.diag
        s_exact = np.asarray(zm.multiply(zm).T @ noise.omega_diag(zm.shape[0])).ravel() / d**2
        tot = sig_diag + s_exact
        with np.errstate(invalid="ignore", divide="ignore"):
            k = np.where(tot > 0, sig_diag / tot, 0.0)
        post_mean = mu + k * (bundle.eta_hat - mu)
        g = k * s_exact
        blocks = BlockDiag(p, [], [])
        blocks.classes = [(idx, g[idx][:, :, None]) for idx, _ in Sigma.classes]
        return PosteriorState(post_mean, g, blocks, lambda x: g * x if np.ndim(x) == 1 else g[:, None] * x, True)

    s_diag = np.maximum(s_diagonal(bundle, noise, probes=probes, seed=seed), 0.0)
    precond = np.maximum(sig_diag + s_diag, 1e-300)

    if p <= dense_cap:
        Sd = apply_S(bundle, noise, np.eye(p))
        Sd = (Sd + Sd.T) / 2
        Sg = Sigma.toarray()
        post_mean = mu + Sg @ _psd_solve(Sg + Sd, bundle.eta_hat - mu)
        A = Sg if np.trace(Sg) <= np.trace(Sd) else Sd
        G = A - A @ _psd_solve(Sg + Sd, A)
        G = (G + G.T) / 2
        blocks = BlockDiag(p, [], [])
        blocks.classes = [(idx, G[idx[:, :, None], idx[:, None, :]]) for idx, _ in Sigma.classes]
        return PosteriorState(post_mean, np.diag(G).copy(), blocks, lambda x: G @ x, True)

    z, _ = pcg(op, bundle.eta_hat - mu, diag=precond, rtol=rtol)
    post_mean = mu + Sigma.apply(z)

    def G_apply(x):
        x = np.asarray(x, dtype=float)
        ax = Sigma.apply(x)
        y, _ = pcg(op, ax, diag=precond, rtol=rtol)
        return ax - Sigma.apply(y)

    acc = [np.zeros_like(m) for _, m in Sigma.classes]
    rng = stream(seed, 1 << 20)
    for start in range(0, probes, 64):
        m = min(64, probes - start)
        g = rng.integers(0, 2, size=(p, m)) * 2.0 - 1.0
        Gg = G_apply(g)
        for a, (idx, _) in zip(acc, Sigma.classes):
            gi, Gi = g[idx], Gg[idx]  # (nb, k, m)
            a += 0.5 * (np.einsum("bir,bjr->bij", gi, Gi) + np.einsum("bjr,bir->bij", gi, Gi))
    blocks = BlockDiag(p, [], [])
    blocks.classes = [(idx, a / probes) for (idx, _), a in zip(Sigma.classes, acc)]
    blocks = blocks.map_blocks(_clip_psd)
    return PosteriorState(post_mean, blocks.diag(), blocks, G_apply, False)


def _clip_psd(mats):
    w, v = np.linalg.eigh(mats)
    return np.einsum("bij,bj,bkj->bik", v, np.clip(w, 0, None), v)


def posterior_nonlinear(f, state, draws=2000, seed=0, return_se=False):
    """Monte Carlo mean of ``H(post_mean + G^{1/2} eps)`` with antithetic pairs."""
    est = _antithetic_mean(f, state.post_mean, state.G_blocks.sqrt_apply, draws, seed)
    return est if return_se else est.value


def simple_shrinkage(eta_hat, mu, sigma_eta2, sigma_v2):
    """Linear shrinkage of i.i.d. noisy means toward ``mu``."""
    if sigma_eta2 < 0 or sigma_v2 < 0:
        raise InputError("variances must be nonnegative")
    total = sigma_eta2 + sigma_v2
    if total == 0:
        raise InputError("signal and noise variances are both zero")
    eta_hat = np.asarray(eta_hat, dtype=float)
    return (sigma_eta2 * eta_hat + sigma_v2 * mu) / total
