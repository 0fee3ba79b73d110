"""Error covariance families for ``Omega(Z)``.

Three diagonal families are supported: homoskedastic ``sigma^2 I``, the
unrestricted diagonal estimated by leave-one-out moments, and a log-linear
parametric function of observation covariates.
"""
import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConvergenceError, DesignError
from .solve import ols_fit

FAMILIES = ("homoskedastic", "leaveout_diagonal", "parametric_diag")

#: Floor applied before taking logs of leave-out moments.
LOG_FLOOR = 1e-8


@dataclass(frozen=True, eq=False)
class NoiseSpec:
    family: str
    sigma2: Optional[float] = None
    omega: Optional[np.ndarray] = None
    theta: Optional[np.ndarray] = None
    W: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown noise family {self.family!r}")
        if self.family == "homoskedastic" and not (self.sigma2 is not None and self.sigma2 >= 0):
            raise ValueError("homoskedastic noise needs sigma2 >= 0")
        if self.family == "leaveout_diagonal" and self.omega is None:
            raise ValueError("leave-out noise needs omega")
        if self.family == "parametric_diag" and (self.theta is None or self.W is None):
            raise ValueError("parametric noise needs theta and W")

    @classmethod
    def homoskedastic(cls, sigma2):
        return cls("homoskedastic", sigma2=float(sigma2))

    @classmethod
    def diagonal(cls, omega):
        return cls("leaveout_diagonal", omega=np.asarray(omega, dtype=float))

    def omega_diag(self, n=None):
        """Diagonal of ``Omega`` as a length-``n`` vector."""
        if self.family == "homoskedastic":
            if n is None:
                raise ValueError("n is required for homoskedastic noise")
            return np.full(n, self.sigma2)
        if self.family == "leaveout_diagonal":
            out = self.omega
        else:
            out = np.exp(self.W @ self.theta)
        if n is not None and out.shape != (n,):
            raise ValueError(f"noise has {out.size} observations, expected {n}")
        return out

    def scaled(self, factor):
        if self.family == "homoskedastic":
            return NoiseSpec.homoskedastic(self.sigma2 * factor)
        return NoiseSpec.diagonal(self.omega_diag() * factor)

    def floored(self, floor=1e-8):
        """Copy with leave-out variances raised to at least ``floor``.

        Individual leave-out estimates can be negative, which makes ``S``
        indefinite; quantities that need ``S`` to be PSD use this copy.
        """
        if self.family != "leaveout_diagonal" or self.omega.min() >= floor:
            return self
        return NoiseSpec.diagonal(np.maximum(self.omega, floor))

    def to_dict(self):
        out = {"family": self.family}
        if self.sigma2 is not None:
            out["sigma2"] = self.sigma2
        for key in ("omega", "theta", "W"):
            value = getattr(self, key)
            if value is not None:
                out[key] = np.asarray(value).tolist()
        return out

    @classmethod
    def from_dict(cls, data):
        kwargs = {"family": data["family"], "sigma2": data.get("sigma2")}
        for key in ("omega", "theta", "W"):
            if key in data:
                kwargs[key] = np.asarray(data[key], dtype=float)
        return cls(**kwargs)

    def save(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _bundle(Z, Y, bundle):
    return bundle if bundle is not None else ols_fit(Z, Y)


def estimate_sigma2(Z, Y, bundle=None):
    """Degrees-of-freedom corrected residual variance ``RSS / (n - p)``.

    Designs produced by within-cell differencing also subtract the number of
    absorbed cells (``meta['absorbed_dof']``) from the degrees of freedom.
    """
    b = _bundle(Z, Y, bundle)
    absorbed = int(getattr(b.design, "meta", {}).get("absorbed_dof", 0))
    dof = b.n - b.p - absorbed
    if dof <= 0:
        raise DesignError("no residual degrees of freedom")
    r = b.residuals
    return NoiseSpec.homoskedastic(float(r @ r) / dof)


def leaveout_residuals(Z, Y, leverages, bundle=None):
    """``y_i - z_i' eta_hat_{-i}`` from full-sample quantities."""
    b = _bundle(Z, Y, bundle)
    P = np.asarray(leverages, dtype=float)
    if np.any(P >= 1 - 1e-10):
        i = int(np.argmax(P))
        raise DesignError(f"observation {i} not leave-out identifiable (P_ii = {P[i]:.12f})")
    return b.residuals / (1.0 - P)


def estimate_omega_leaveout(Z, Y, leverages, bundle=None):
    """Unbiased per-observation variances ``y_i (y_i - z_i' eta_hat_{-i})``.

    Individual entries may be negative.
    """
    b = _bundle(Z, Y, bundle)
    return NoiseSpec.diagonal(b.Y * leaveout_residuals(Z, Y, leverages, b))


def fit_parametric_diag(Z, Y, W, leverages, bundle=None, tol=1e-8, maxiter=200):
    """Fit ``omega_i = exp(w_i' theta)`` to leave-out moments by Gauss-Newton.

    Minimizes ``sum_i (omega_lo_i - exp(w_i' theta))^2`` starting from an
    intercept at the (floored) log mean moment. Steps are halved until the
    objective does not increase.
    """
    W = np.asarray(W, dtype=float)
    if W.ndim == 1:
        W = W[:, None]
    if np.linalg.matrix_rank(W) < W.shape[1]:
        raise DesignError("noise covariates W must have full column rank")
    target = estimate_omega_leaveout(Z, Y, leverages, bundle).omega
    if W.shape[0] != target.size:
        raise DesignError("W must have one row per observation")
    # start from the intercept fit; works whether or not W has a constant column
    theta = np.linalg.lstsq(W, np.full(W.shape[0], np.log(max(target.mean(), LOG_FLOOR))), rcond=None)[0]

    def loss(th):
        r = target - np.exp(W @ th)
        return r @ r

    current = loss(theta)
    for _ in range(maxiter):
        fitted = np.exp(W @ theta)
        J = W * fitted[:, None]
        step = np.linalg.lstsq(J, target - fitted, rcond=None)[0]
        t = 1.0
        while t > 1e-12:
            cand = theta + t * step
            value = loss(cand)
            if np.isfinite(value) and value <= current:
                break
            t /= 2
        else:
            step = np.zeros_like(step)
        theta, current = theta + t * step, loss(theta + t * step)
        if np.linalg.norm(t * step) < tol:
            return NoiseSpec("parametric_diag", theta=theta, W=W)
    raise ConvergenceError("Gauss-Newton did not converge", residual=float(np.linalg.norm(t * step)),
                           iterate=theta)
