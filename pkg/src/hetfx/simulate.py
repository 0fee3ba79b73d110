"""Synthetic data with known effects, and a Monte Carlo harness.

Generators cover the i.i.d. normal-means setting, worker-firm panels under
exogenous, static logit or dynamic meeting mobility, and neighborhood
exposure designs. Each returns the estimable design (already restricted to
an identified component and normalized) together with the true effects in
the same parameterization.
"""
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import pandas as pd

from ._random import derive_seed, stream
from .design import (
    build_akm_design,
    build_block_design,
    build_exposure_design,
    largest_column_component,
    largest_connected_component,
    leave_out_connected_set,
    apply_differencing,
    finalize_identification,
)
from .errors import HetfxError, InputError, MonteCarloError

ARCHETYPES = ("simple_means", "akm", "exposure")
MOBILITY = ("exogenous", "logit", "dynamic")

# independent sub-streams of one dataset seed
_S_EFFECTS, _S_MOBILITY, _S_NOISE, _S_CHOICE, _S_MARKET = range(5)


@dataclass(frozen=True)
class DGPConfig:
    """Data-generating process.

    Sizes: ``p`` (simple means), ``n_workers``/``n_firms``/``n_periods``
    (akm), ``n_children``/``n_hoods``/``years`` (exposure).

    Effect law: worker effects ``alpha ~ N(alpha_means[g], var_alpha)`` and
    firm effects ``psi ~ N(psi_means[g], var_psi)`` for latent groups ``g``.
    With ``sorting > 0`` a worker of group ``g`` starts in a firm of group
    ``g`` with that probability, which makes ``alpha`` and ``psi`` correlated
    along employment spells.

    Noise: ``sigma2`` for everyone, or per-stratum variances
    ``noise_strata = (stayers, movers)``.

    Mobility: ``exogenous`` moves with probability ``move_prob`` to a
    uniformly drawn other firm; ``logit`` picks next period's firm in the
    market ``M(k)`` with probability proportional to
    ``exp(rho * (alpha_k + psi_l + U))``; ``dynamic`` meets one other firm
    with probability ``lam`` and moves with probability
    ``gamma'/(gamma + gamma')``, ``gamma = exp(gamma_a alpha + gamma_b psi)``.
    """

    archetype: str = "akm"
    seed: int = 0
    # simple means
    p: int = 1000
    mu_eta: float = 0.0
    sigma_eta: float = 1.0
    sigma_v: float = 0.5
    # akm
    n_workers: int = 3000
    n_firms: int = 300
    n_periods: int = 2
    var_alpha: float = 0.20
    var_psi: float = 0.05
    n_groups: int = 1
    alpha_means: Optional[tuple] = None
    psi_means: Optional[tuple] = None
    sorting: float = 0.0
    mobility: str = "exogenous"
    move_prob: float = 0.5
    rho: float = 0.0
    market_size: Optional[int] = None
    lam: float = 0.5
    gamma_a: float = 0.0
    gamma_b: float = 1.0
    restrict: str = "leave_out"
    normalization: str = "drop_last_firm"
    # noise
    sigma2: float = 0.09
    noise_strata: Optional[tuple] = None
    # exposure
    n_children: int = 2000
    n_hoods: int = 20
    years: int = 20
    mover_share: float = 0.5
    var_eta: float = 0.05
    cell_sd: float = 0.5

    def __post_init__(self):
        if self.archetype not in ARCHETYPES:
            raise InputError(f"unknown archetype {self.archetype!r}")
        if self.mobility not in MOBILITY:
            raise InputError(f"unknown mobility model {self.mobility!r}")
        for name in ("move_prob", "lam", "sorting", "mover_share"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise InputError(f"{name} must be a probability")
        for name in ("p", "n_workers", "n_firms", "n_periods", "n_children", "n_hoods", "years", "n_groups"):
            if getattr(self, name) < 1:
                raise InputError(f"{name} must be >= 1")
        for name in ("sigma_eta", "sigma_v", "var_alpha", "var_psi", "sigma2", "var_eta", "cell_sd"):
            if getattr(self, name) < 0:
                raise InputError(f"{name} must be >= 0")
        if self.market_size is not None and not 1 <= self.market_size <= self.n_firms:
            raise InputError("market_size must be between 1 and n_firms")
        if self.restrict not in ("lcc", "leave_out"):
            raise InputError(f"unknown restriction {self.restrict!r}")


@dataclass(frozen=True, eq=False)
class SyntheticDataset:
    """Generated data and the truth aligned with its estimable design.

    ``inputs`` holds the tables that the CSV layer writes (``groups`` or
    ``spells``/``outcomes`` or ``exposures``/``outcomes``). ``design`` and
    ``Y`` are ready for estimation (``None`` when nothing is identified).
    ``truth`` contains ``eta`` (per design column), ``mu``, ``Sigma_diag``,
    ``omega`` (per row of ``Y``) and scalar parameters.
    """

    config: DGPConfig
    inputs: dict
    design: Optional[object]
    Y: Optional[np.ndarray]
    truth: dict
    meta: dict = field(default_factory=dict)


# ---------------------------------------------------------------- simple means

def gen_simple_means(p, mu_eta=0.0, sigma_eta=1.0, sigma_v=0.5, seed=0):
    """``eta_hat_j = eta_j + v_j`` with ``eta_j ~ N(mu, sigma_eta^2)``, ``v_j ~ N(0, sigma_v^2)``.

    The design is the identity: one observation per unit.
    """
    if sigma_eta < 0 or sigma_v < 0:
        raise InputError("standard deviations must be >= 0")
    eta = mu_eta + sigma_eta * stream(seed, _S_EFFECTS).standard_normal(p)
    v = sigma_v * stream(seed, _S_NOISE).standard_normal(p)
    Y = eta + v
    design = build_block_design(np.arange(p))
    cfg = DGPConfig("simple_means", seed=seed, p=p, mu_eta=mu_eta, sigma_eta=sigma_eta, sigma_v=sigma_v)
    groups = pd.DataFrame({"obs": np.arange(p), "unit": np.arange(p), "slope": np.nan, "outcome": Y})
    truth = {
        "eta": eta, "mu": np.full(p, float(mu_eta)), "Sigma_diag": np.full(p, sigma_eta**2),
        "omega": np.full(p, sigma_v**2), "mu_eta": float(mu_eta),
        "sigma_eta2": float(sigma_eta**2), "sigma_v2": float(sigma_v**2),
    }
    return SyntheticDataset(cfg, {"groups": groups}, design, Y, truth)


# ---------------------------------------------------------------- mobility

def logit_choice_probs(rho, utilities):
    """Choice probabilities ``exp(rho u_l) / sum exp(rho u_m)`` along the last axis."""
    z = rho * np.asarray(utilities, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def dynamic_transition_probs(current, gamma_row, lam):
    """Next-period firm distribution under the meeting model.

    ``gamma_row[l] = gamma(alpha_k, psi_l)``. With a scalar ``lam`` the
    worker meets one other firm, drawn uniformly, with probability ``lam``;
    a matrix ``lam[current, l]`` gives firm-specific meeting probabilities.
    A met firm ``l`` is accepted with probability
    ``gamma_l / (gamma_current + gamma_l)``.
    """
    gamma_row = np.asarray(gamma_row, dtype=float)
    J = gamma_row.size
    if np.ndim(lam) == 0:
        meet = np.full(J, lam / max(J - 1, 1))
    else:
        meet = np.asarray(lam, dtype=float)[current].copy()
    meet[current] = 0.0
    if meet.sum() > 1 + 1e-12:
        raise InputError("meeting probabilities exceed one")
    out = meet * gamma_row / (gamma_row[current] + gamma_row)
    out[current] = 1.0 - out.sum()
    return out


def _draw_categorical(rng, probs):
    """One draw per row of a probability matrix."""
    u = rng.random(probs.shape[0])
    cdf = np.cumsum(probs, axis=1)
    cdf[:, -1] = 1.0
    return (u[:, None] > cdf).sum(axis=1)


def _akm_effects(cfg, rng):
    G = cfg.n_groups
    psi_means = np.zeros(G) if cfg.psi_means is None else np.asarray(cfg.psi_means, float)
    alpha_means = np.zeros(G) if cfg.alpha_means is None else np.asarray(cfg.alpha_means, float)
    if psi_means.size != G or alpha_means.size != G:
        raise InputError("group means must have n_groups entries")
    firm_group = rng.integers(0, G, cfg.n_firms)
    worker_group = rng.integers(0, G, cfg.n_workers)
    psi = psi_means[firm_group] + np.sqrt(cfg.var_psi) * rng.standard_normal(cfg.n_firms)
    alpha = alpha_means[worker_group] + np.sqrt(cfg.var_alpha) * rng.standard_normal(cfg.n_workers)
    return alpha, psi, worker_group, firm_group


def _initial_firms(cfg, rng, worker_group, firm_group):
    J = cfg.n_firms
    first = rng.integers(0, J, cfg.n_workers)
    if cfg.sorting > 0:
        sorted_ = rng.random(cfg.n_workers) < cfg.sorting
        for g in range(cfg.n_groups):
            pool = np.flatnonzero(firm_group == g)
            who = np.flatnonzero(sorted_ & (worker_group == g))
            if pool.size and who.size:
                first[who] = pool[rng.integers(0, pool.size, who.size)]
    return first


def _akm_paths(cfg, seed, alpha, psi, worker_group, firm_group):
    K, J, T = cfg.n_workers, cfg.n_firms, cfg.n_periods
    rng = stream(seed, _S_MOBILITY)
    firms = np.empty((K, T), dtype=int)
    firms[:, 0] = _initial_firms(cfg, rng, worker_group, firm_group)
    if cfg.mobility == "logit":
        choice_rng = stream(seed, _S_CHOICE)
        if cfg.market_size is None:
            market = np.tile(np.arange(J), (K, 1))
        else:
            mrng = stream(seed, _S_MARKET)
            market = np.stack([mrng.choice(J, cfg.market_size, replace=False) for _ in range(K)])
    elif cfg.mobility == "dynamic":
        gamma = np.exp(cfg.gamma_a * alpha[:, None] + cfg.gamma_b * psi[None, :])
    for t in range(1, T):
        cur = firms[:, t - 1]
        if cfg.mobility == "exogenous":
            move = rng.random(K) < cfg.move_prob
            other = (cur + 1 + rng.integers(0, max(J - 1, 1), K)) % J if J > 1 else cur
            firms[:, t] = np.where(move, other, cur)
        elif cfg.mobility == "logit":
            shocks = np.sqrt(cfg.sigma2) * choice_rng.standard_normal(market.shape)
            w = alpha[:, None] + psi[market] + shocks
            pick = _draw_categorical(rng, logit_choice_probs(cfg.rho, w))
            firms[:, t] = market[np.arange(K), pick]
        else:
            probs = np.stack([dynamic_transition_probs(cur[k], gamma[k], cfg.lam) for k in range(K)])
            firms[:, t] = _draw_categorical(rng, probs)
    return firms


def gen_akm(cfg):
    """Worker-firm panel with additive wages ``y = alpha + psi + u``.

    The output is restricted to the largest connected component (and, with
    ``restrict='leave_out'``, to the set that stays connected when any one
    spell is removed), then normalized with ``cfg.normalization``.
    """
    seed = cfg.seed
    alpha, psi, worker_group, firm_group = _akm_effects(cfg, stream(seed, _S_EFFECTS))
    firms = _akm_paths(cfg, seed, alpha, psi, worker_group, firm_group)
    K, T = firms.shape
    worker = np.repeat(np.arange(K), T)
    period = np.tile(np.arange(1, T + 1), K)
    firm = firms.ravel()
    mover = (firms != firms[:, :1]).any(axis=1)
    if cfg.noise_strata is None:
        omega = np.full(worker.size, cfg.sigma2)
    else:
        stay, move = cfg.noise_strata
        omega = np.where(mover[worker], move, stay).astype(float)
    u = np.sqrt(omega) * stream(seed, _S_NOISE).standard_normal(worker.size)
    y = alpha[worker] + psi[firm] + u

    spells = pd.DataFrame({"worker": worker, "firm": firm, "period": period})
    _, graph = build_akm_design(spells)
    comp = leave_out_connected_set(graph) if cfg.restrict == "leave_out" else largest_connected_component(graph)
    keep = np.sort(comp.edges)
    share = comp.firms.size / cfg.n_firms
    meta = {"n_spells": int(worker.size), "kept_spells": int(keep.size),
            "kept_workers": int(comp.workers.size), "kept_firms": int(comp.firms.size),
            "firm_share": float(share), "small_component": bool(share < 0.5),
            "movers": int(mover.sum())}
    if share < 0.5:
        warnings.warn(f"connected set keeps only {share:.0%} of firms", RuntimeWarning, stacklevel=2)
    kept = spells.iloc[keep].reset_index(drop=True)
    Y = y[keep]
    raw, _ = build_akm_design(kept)
    Z = finalize_identification(raw, cfg.normalization)
    truth = akm_truth(Z, alpha, psi)
    truth.update({
        "omega": omega[keep], "alpha": alpha, "psi": psi, "worker_group": worker_group,
        "firm_group": firm_group, "var_psi": cfg.var_psi, "var_alpha": cfg.var_alpha,
        "sigma2": cfg.sigma2, "mover": mover,
    })
    outcomes = pd.DataFrame({"worker": kept["worker"], "period": kept["period"], "outcome": Y})
    return SyntheticDataset(cfg, {"spells": kept, "outcomes": outcomes}, Z, Y, truth, meta)


def akm_truth(Z, alpha, psi):
    """True effects in the parameterization of a normalized AKM design.

    Under ``drop_last_firm`` firm effects are ``psi_j - psi_ref`` and worker
    effects ``alpha_k + psi_ref``; under ``sum_to_zero`` the firm mean takes
    the place of ``psi_ref``.
    """
    firm_ids = np.array([lab.unit_id for lab in Z.col_labels if lab.unit_kind == "firm"]
                        + ([Z.reference.unit_id] if Z.reference is not None else []))
    shift = psi[Z.reference.unit_id] if Z.normalization == "drop_last_firm" else psi[firm_ids].mean()
    eta = np.array([alpha[lab.unit_id] + shift if lab.unit_kind == "worker" else psi[lab.unit_id] - shift
                    for lab in Z.col_labels])
    return {"eta": eta, "shift": float(shift)}


# ---------------------------------------------------------------- exposure

def gen_exposure(cfg):
    """Children exposed to an origin and (for movers) a destination neighborhood.

    A mover spends ``m`` years in the origin and ``years - m`` in the
    destination, ``m`` uniform on ``1..years-1``; others spend all years in
    the origin. Outcomes are ``sum_j z_ij eta_j + beta_cell + u``; the cell
    effects ``beta`` are removed by differencing within origin-destination
    cells, and estimation is restricted to the largest identified component.
    """
    seed = cfg.seed
    rng = stream(seed, _S_EFFECTS)
    J, N, T = cfg.n_hoods, cfg.n_children, cfg.years
    eta = np.sqrt(cfg.var_eta) * rng.standard_normal(J)
    mrng = stream(seed, _S_MOBILITY)
    origin = mrng.integers(0, J, N)
    mover = (mrng.random(N) < cfg.mover_share) & (J > 1) & (T > 1)
    dest = np.where(mover, (origin + 1 + mrng.integers(0, max(J - 1, 1), N)) % J, origin)
    age = np.where(mover, mrng.integers(1, max(T, 2), N), T)
    cell = origin * J + dest
    beta = cfg.cell_sd * rng.standard_normal(J * J)
    u = np.sqrt(cfg.sigma2) * stream(seed, _S_NOISE).standard_normal(N)
    moves = [[(int(o), float(a))] + ([(int(d), float(T - a))] if m else [])
             for o, d, a, m in zip(origin, dest, age, mover)]
    Zraw, plan = build_exposure_design(moves, cell)
    # neighborhoods never visited get no column; align the truth to the columns
    hood_ids = np.array([lab.unit_id for lab in Zraw.col_labels])
    y = Zraw.matrix @ eta[hood_ids] + beta[cell] + u
    rows = [(i, h, yrs) for i, mv in enumerate(moves) for h, yrs in mv]
    exposures = pd.DataFrame(rows, columns=["child", "neighborhood", "exposure"])
    exposures["od_cell"] = cell[exposures["child"].to_numpy()]
    outcomes = pd.DataFrame({"child": np.arange(N), "outcome": y})
    inputs = {"exposures": exposures, "outcomes": outcomes}
    truth = {"eta_raw": eta, "beta": beta, "sigma2": cfg.sigma2, "var_eta": cfg.var_eta}
    meta = {"movers": int(mover.sum())}

    Zd, Yd = apply_differencing(Zraw, y, plan)
    if Zd.matrix.nnz == 0:
        meta["identified"] = False
        warnings.warn("no movers: differenced design is zero, effects unidentified", RuntimeWarning, stacklevel=2)
        return SyntheticDataset(cfg, inputs, None, None, truth, meta)
    Z, Y, keep_rows = restrict_exposure(Zd, Yd, plan)
    rule = "sum_to_zero" if cfg.normalization == "sum_to_zero" else "drop_last_firm"
    Z = finalize_identification(Z, rule)
    ids = [lab.unit_id for lab in Z.col_labels]
    ref = eta[Z.reference.unit_id]
    if rule == "sum_to_zero":
        kept_ids = ids + [Z.reference.unit_id]
        ref = eta[kept_ids].mean()
    truth.update({"eta": eta[ids] - ref, "omega": np.full(Y.size, cfg.sigma2), "shift": float(ref)})
    meta.update({"identified": True, "kept_children": int(keep_rows.size), "kept_hoods": len(ids) + 1})
    return SyntheticDataset(cfg, inputs, Z, Y, truth, meta)


def restrict_exposure(Zd, Yd, plan):
    """Keep the largest column component of a differenced exposure design.

    Rows touching other components are dropped (together with their whole
    cell); rows that are zero after differencing are kept. The number of
    cells among kept rows is recorded as absorbed degrees of freedom.
    """
    rows, cols = largest_column_component(Zd)
    outside = np.ones(Zd.n_effects, dtype=bool)
    outside[cols] = False
    touches_other = np.asarray(abs(Zd.matrix[:, outside]).sum(axis=1)).ravel() > 0
    keep = np.flatnonzero(~touches_other)
    Z = Zd.subset(keep, cols)
    meta = dict(Z.meta)
    meta["absorbed_dof"] = int(np.unique(plan.labels[keep]).size)
    return replace(Z, meta=meta), Yd[keep], keep


def generate(cfg):
    """Dispatch on ``cfg.archetype``."""
    if cfg.archetype == "simple_means":
        return gen_simple_means(cfg.p, cfg.mu_eta, cfg.sigma_eta, cfg.sigma_v, cfg.seed)
    if cfg.archetype == "akm":
        return gen_akm(cfg)
    return gen_exposure(cfg)


# ---------------------------------------------------------------- Monte Carlo

@dataclass(frozen=True, eq=False)
class MCReport:
    """Per-quantity summaries plus the raw per-replication values."""

    table: pd.DataFrame
    estimates: dict
    truths: dict
    failures: list
    seeds: np.ndarray

    def row(self, quantity):
        return self.table.set_index("quantity").loc[quantity]


def montecarlo(dgp, pipeline, R, seed, threads=1, seeds=None, truth=None, max_fail=0.05):
    """Run ``pipeline`` on ``R`` independent datasets.

    Parameters
    ----------
    dgp : DGPConfig or callable
        Configuration (its seed is replaced per replication) or a function
        ``seed -> SyntheticDataset``.
    pipeline : callable
        ``dataset -> {quantity: estimate}``. A value may also be an
        ``(estimate, truth)`` pair.
    truth : callable or dict, optional
        ``dataset -> {quantity: truth}`` or constant truths.
    seeds : sequence of int, optional
        Explicit per-replication seeds; by default derived from
        ``(seed, r)``.

    Replications that raise a ``HetfxError`` are recorded with their index;
    more than ``max_fail`` of them aborts the run.
    """
    if R < 2:
        raise InputError("montecarlo needs R >= 2")
    seeds = np.array([derive_seed(seed, r) for r in range(R)] if seeds is None else seeds, dtype=np.int64)
    if seeds.size != R:
        raise InputError("need one seed per replication")
    make = dgp if callable(dgp) else (lambda s: generate(replace(dgp, seed=int(s))))

    def one(r):
        try:
            ds = make(int(seeds[r]))
            out = pipeline(ds)
            tv = truth(ds) if callable(truth) else (truth or {})
            est, tru = {}, {}
            for key, value in out.items():
                if isinstance(value, tuple):
                    est[key], tru[key] = float(value[0]), float(value[1])
                else:
                    est[key], tru[key] = float(value), float(tv.get(key, np.nan))
            return r, est, tru, None
        except HetfxError as exc:
            return r, None, None, f"replication {r}: {exc}"

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(one, range(R)))
    else:
        results = [one(r) for r in range(R)]
    failures = [(r, msg) for r, _, _, msg in results if msg is not None]
    if len(failures) > max_fail * R:
        raise MonteCarloError(f"{len(failures)} of {R} replications failed; first: {failures[0][1]}", failures)
    if failures:
        warnings.warn(f"{len(failures)} replications failed", RuntimeWarning, stacklevel=2)
    ok = [(e, t) for _, e, t, msg in results if msg is None]
    keys = list(ok[0][0]) if ok else []
    estimates = {k: np.array([e[k] for e, _ in ok]) for k in keys}
    truths = {k: np.array([t[k] for _, t in ok]) for k in keys}
    rows = []
    for k in keys:
        est, tru = estimates[k], truths[k]
        err = est - tru
        n = est.size
        rows.append({
            "quantity": k, "mean": est.mean(), "truth": tru.mean(), "bias": err.mean(),
            "mc_se": est.std(ddof=1) / np.sqrt(n) if n > 1 else np.nan,
            "bias_se": err.std(ddof=1) / np.sqrt(n) if n > 1 else np.nan,
            "mse": np.mean(err**2), "replications": n,
        })
    table = pd.DataFrame(rows, columns=["quantity", "mean", "truth", "bias", "mc_se", "bias_se", "mse",
                                        "replications"])
    return MCReport(table, estimates, truths, failures, seeds)
