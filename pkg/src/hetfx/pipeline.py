"""End-to-end estimation: design -> noise -> RC model -> estimates.

Quantities are named with a small syntax:

``mean:KIND``, ``var:KIND``, ``cov:KIND1:KIND2``, ``moment3:KIND``,
``moment4:KIND``, ``cdf:KIND:A``, ``density:KIND:A``

where ``KIND`` is a unit kind (``firm``, ``worker``, ``neighborhood``,
``slope``). An optional trailing ``@obs`` or ``@units`` selects
observation weights (each observation's unit effect counts once) or equal
unit weights. Worker-firm designs default to observation weights, others to
unit weights.
"""
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

from .design import (
    apply_differencing,
    build_akm_design,
    build_block_design,
    build_exposure_design,
    effect_map,
    finalize_identification,
    largest_connected_component,
    leave_out_connected_set,
)
from .errors import InputError
from .estimators import (
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
)
from .noise import NoiseSpec, estimate_omega_leaveout, estimate_sigma2, fit_parametric_diag
from .rc_model import GroupAssignment, fit_rc, kind_grouping, kmeans_groups, unit_blocks, unit_quantiles
from .simulate import restrict_exposure
from .solve import QuadraticForm, leverage_diagonals, ols_fit

STRATEGIES = ("plugin", "fe", "model", "posterior")
NOISE_FAMILIES = ("auto", "homoskedastic", "leaveout", "parametric", "known")


@dataclass(frozen=True)
class EstimateConfig:
    quantities: tuple = ("var:firm",)
    strategies: tuple = ("fe", "model", "posterior")
    noise: str = "auto"
    sigma2: Optional[float] = None
    noise_covariates: Optional[str] = None
    leverage: str = "exact"
    sketch_k: int = 200
    mean: str = "auto"
    cov: str = "auto"
    groups: int = 0
    centered: bool = True
    probes: int = 100
    draws: int = 2000
    seed: int = 0
    rtol: float = 1e-10
    normalization: str = "drop_last_firm"

    def __post_init__(self):
        for s in self.strategies:
            if s not in STRATEGIES:
                raise InputError(f"unknown strategy {s!r}")
        if self.noise not in NOISE_FAMILIES:
            raise InputError(f"unknown noise family {self.noise!r}")
        if self.noise == "known" and self.sigma2 is None:
            raise InputError("noise family 'known' needs sigma2")
        for q in self.quantities:
            parse_quantity(q)


@dataclass(frozen=True, eq=False)
class PipelineResult:
    design: object
    Y: np.ndarray
    bundle: object
    noise: NoiseSpec
    rc: object
    posterior: object
    quantities: pd.DataFrame
    extra: dict = field(default_factory=dict)

    def estimates_frame(self):
        labels = self.design.col_labels
        return pd.DataFrame({
            "effect": np.arange(len(labels)),
            "kind": [lab.unit_kind for lab in labels],
            "unit": [lab.unit_id for lab in labels],
            "eta_hat": self.bundle.eta_hat,
            "post_mean": self.posterior.post_mean,
            "post_sd": self.posterior.post_sd,
        })


# ---------------------------------------------------------------- quantities

_KINDS = {"mean": 1, "var": 1, "cov": 2, "moment3": 1, "moment4": 1, "cdf": 2, "density": 2}


def parse_quantity(text):
    """Split a quantity name into ``(op, kinds, a, weighting)``."""
    body, _, weighting = text.partition("@")
    if weighting not in ("", "obs", "units"):
        raise InputError(f"quantity {text!r}: weighting must be @obs or @units")
    parts = body.split(":")
    op = parts[0]
    if op not in _KINDS or len(parts) != _KINDS[op] + 1:
        raise InputError(f"malformed quantity {text!r}")
    a = None
    kinds = parts[1:]
    if op in ("cdf", "density"):
        try:
            a = float(parts[2])
        except ValueError as exc:
            raise InputError(f"quantity {text!r}: {parts[2]!r} is not a number") from exc
        kinds = parts[1:2]
    if op == "cov" and weighting == "units":
        raise InputError("covariances are defined over observations only")
    return op, kinds, a, weighting or None


def _weighting(design, weighting):
    if weighting:
        return weighting
    return "obs" if design.archetype == "akm" else "units"


def _map(design, kind, level):
    interaction = None
    if kind == "slope":
        slopes = [lab.interaction for lab in design.col_labels if lab.unit_kind == "slope"]
        interaction = slopes[0] if slopes else None
    L, _ = effect_map(design, kind, "unit" if level == "units" else level, interaction)
    if L.shape[0] == 0 or L.nnz == 0:
        raise InputError(f"design has no {kind} effects")
    if level == "obs" and design.archetype != "akm":
        # every worker-firm row carries both kinds, even when the reference
        # firm's effect is normalized to zero
        L = L[np.flatnonzero(np.diff(L.indptr) > 0)]
    return L


def build_quantity(design, text):
    """Return ``(op, object)``: a linear form, ``QuadraticForm`` or functional."""
    op, kinds, a, weighting = parse_quantity(text)
    level = "obs" if op == "cov" else _weighting(design, weighting)
    if op == "cov":
        A, B = (effect_map(design, k, "obs")[0] for k in kinds)
        if design.archetype != "akm":
            rows = np.flatnonzero((np.diff(A.indptr) > 0) & (np.diff(B.indptr) > 0))
            A, B = A[rows], B[rows]
        return "quadratic", QuadraticForm.from_maps(A, B)
    maps = [_map(design, k, level) for k in kinds]
    L = maps[0]
    if op == "mean":
        w = np.full(L.shape[0], 1.0 / L.shape[0])
        return "linear", np.asarray(L.T @ w).ravel()
    if op == "var":
        return "quadratic", QuadraticForm.from_maps(L)
    if op in ("moment3", "moment4"):
        return "nonlinear", NonlinearFunctional.moment_power(int(op[-1]), index=L)
    if op == "cdf":
        return "nonlinear", NonlinearFunctional.cdf_at(a, index=L)
    return "nonlinear", NonlinearFunctional.density_at(a, index=L)


# ---------------------------------------------------------------- fitting

def fit_noise(design, Y, bundle, cfg, W=None):
    fam = cfg.noise
    if fam == "auto":
        fam = "homoskedastic"
    if fam == "known":
        return NoiseSpec.homoskedastic(cfg.sigma2)
    if fam == "homoskedastic":
        return estimate_sigma2(design, Y, bundle)
    P = leverage_diagonals(design, mode=cfg.leverage, k=cfg.sketch_k, seed=cfg.seed, solver=bundle.gram_solver)
    if fam == "leaveout":
        return estimate_omega_leaveout(design, Y, P, bundle)
    if W is None:
        raise InputError("parametric noise needs observation covariates")
    return fit_parametric_diag(design, Y, W, P, bundle)


def rc_choices(design, Y, cfg):
    """Mean/covariance kinds, grouping and blocks for a design."""
    labels, names = kind_grouping(design)
    blocks = unit_blocks(design)
    if np.all(np.bincount(blocks) == 1):
        blocks = None
    if cfg.groups > 1:
        firm_cols = design.columns_of("firm")
        if firm_cols.size < cfg.groups:
            raise InputError(f"cannot form {cfg.groups} groups from {firm_cols.size} firms")
        # cluster firms on deciles of the outcomes of their observations
        sub = design.matrix[:, firm_cols].tocoo()
        obs_unit = np.full(design.n_obs, -1)
        obs_unit[sub.row[sub.data > 0]] = sub.col[sub.data > 0]
        have = obs_unit >= 0
        ids, summ = unit_quantiles(Y[have], obs_unit[have])
        km = kmeans_groups(summ, cfg.groups, seed=cfg.seed)
        firm_group = np.zeros(firm_cols.size, dtype=int)
        firm_group[ids] = km.labels
        labels = labels.copy()
        base = labels.max() + 1
        labels[firm_cols] = base + firm_group
        _, labels = np.unique(labels, return_inverse=True)
        grouping = GroupAssignment(labels.ravel(), np.zeros((labels.max() + 1, 1)))
    else:
        grouping = GroupAssignment(labels, np.zeros((labels.max() + 1, 1)))
    n_groups = grouping.n_groups
    mean = cfg.mean
    if mean == "auto":
        mean = "constant" if n_groups == 1 else "grouped"
    cov = cfg.cov
    if cov == "auto":
        cov = "scalar_diag" if n_groups == 1 and blocks is None else "grouped_blocks"
    return mean, cov, grouping, blocks


def estimate(design, Y, cfg, W=None):
    """Run the full pipeline on a finalized design."""
    bundle = ols_fit(design, Y, rtol=cfg.rtol)
    noise = fit_noise(design, Y, bundle, cfg, W)
    mean_kind, cov_kind, grouping, blocks = rc_choices(design, Y, cfg)
    rc = fit_rc(bundle, noise, mean_kind, cov_kind, grouping=grouping, blocks=blocks,
                probes=cfg.probes, seed=cfg.seed, centered=cfg.centered)
    post = posterior_state(bundle, noise, rc, probes=cfg.probes, seed=cfg.seed)
    rows = []
    for q in cfg.quantities:
        kind, obj = build_quantity(design, q)
        for strat in cfg.strategies:
            value, draws = _evaluate(kind, obj, strat, bundle, noise, rc, post, cfg)
            if value is not None:
                rows.append((q, strat, value, draws, cfg.seed))
    table = pd.DataFrame(rows, columns=["quantity", "strategy", "value", "mc_draws", "seed"])
    return PipelineResult(design, np.asarray(Y, float), bundle, noise, rc, post, table,
                          {"grouping": grouping, "blocks": blocks})


def _evaluate(kind, obj, strat, bundle, noise, rc, post, cfg):
    if kind == "linear":
        if strat in ("plugin", "fe"):
            return fe_linear(obj, bundle), 0
        if strat == "model":
            return model_linear(obj, rc), 0
        return float(obj @ post.post_mean), 0
    if kind == "quadratic":
        if strat in ("plugin", "fe"):
            est = fe_quadratic_bc(obj, bundle, noise, probes=cfg.probes, seed=cfg.seed)
            return (est.plug_in if strat == "plugin" else est.corrected), 0
        if strat == "model":
            return model_quadratic(obj, rc), 0
        return float(obj.quad(post.post_mean) + post.G_blocks.trace_with(obj)), 0
    if strat == "plugin":
        return plugin_nonlinear(obj, bundle), 0
    if strat == "fe":
        return None, 0
    if strat == "model":
        if obj.kind == "cdf_at":
            return model_cdf(obj, rc), 0
        est = model_nonlinear(obj, rc, draws=cfg.draws, seed=cfg.seed, return_se=True)
        return est.value, est.draws
    est = posterior_nonlinear(obj, post, draws=cfg.draws, seed=cfg.seed, return_se=True)
    return est.value, est.draws


def true_quantities(design, eta, quantities):
    """Quantities evaluated at the true effects (for simulation studies)."""
    out = {}
    for q in quantities:
        kind, obj = build_quantity(design, q)
        if kind == "linear":
            out[q] = float(obj @ eta)
        elif kind == "quadratic":
            out[q] = float(obj.quad(eta))
        else:
            out[q] = float(obj(eta))
    return out


# ---------------------------------------------------------------- inputs

def design_from_groups(groups):
    slope = groups["slope"].to_numpy(dtype=float)
    has_slope = ~np.isnan(slope)
    if has_slope.any() and not has_slope.all():
        i = int(np.flatnonzero(~has_slope)[0])
        raise InputError(f"groups.csv: row {i + 1}, column slope: empty while other rows have slopes")
    Z = build_block_design(groups["unit"].to_numpy(), slope if has_slope.all() else None)
    Z = finalize_identification(Z)
    return Z, groups["outcome"].to_numpy(dtype=float)


def design_from_spells(spells, outcomes, cfg):
    key = ["worker", "period"]
    if outcomes.duplicated(key).any():
        i = int(np.flatnonzero(outcomes.duplicated(key).to_numpy())[0])
        raise InputError(f"outcomes.csv: row {i + 1}: duplicate (worker, period)")
    merged = spells.merge(outcomes, on=key, how="left", validate="one_to_one", indicator=True)
    missing = merged["_merge"] != "both"
    if missing.any():
        i = int(np.flatnonzero(missing.to_numpy())[0])
        raise InputError(f"spells.csv: row {i + 1}: no outcome for worker {spells['worker'].iloc[i]!r} "
                         f"in period {spells['period'].iloc[i]!r}")
    _, graph = build_akm_design(spells)
    comp = leave_out_connected_set(graph) if cfg.noise == "leaveout" else largest_connected_component(graph)
    keep = np.sort(comp.edges)
    kept = merged.iloc[keep].reset_index(drop=True)
    raw, _ = build_akm_design(kept)
    Z = finalize_identification(raw, cfg.normalization)
    return Z, kept["outcome"].to_numpy(dtype=float)


def design_from_exposures(exposures, outcomes, cfg):
    children = np.unique(exposures["child"].to_numpy())
    out = outcomes.set_index("child")
    if out.index.duplicated().any():
        raise InputError("outcomes.csv: duplicate child")
    missing = np.setdiff1d(children, out.index.to_numpy())
    if missing.size:
        raise InputError(f"outcomes.csv: no outcome for child {missing[0]!r}")
    cells = exposures.groupby("child")["od_cell"].nunique()
    if (cells > 1).any():
        raise InputError(f"exposures.csv: child {cells.index[cells > 1][0]!r} has several od_cell values")
    moves = [list(zip(g["neighborhood"], g["exposure"])) for _, g in exposures.groupby("child", sort=True)]
    od = exposures.groupby("child", sort=True)["od_cell"].first().to_numpy()
    y = out.loc[children, "outcome"].to_numpy(dtype=float)
    Zraw, plan = build_exposure_design(moves, od)
    Zd, Yd = apply_differencing(Zraw, y, plan)
    Z, Y, _ = restrict_exposure(Zd, Yd, plan)
    rule = "sum_to_zero" if cfg.normalization == "sum_to_zero" else "drop_last_firm"
    return finalize_identification(Z, rule), Y
