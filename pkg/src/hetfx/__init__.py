"""Heterogeneous effects in high-dimensional linear models."""
from .design import (
    DesignMatrix,
    DifferencingPlan,
    EffectLabel,
    MobilityGraph,
    apply_differencing,
    build_akm_design,
    build_block_design,
    build_exposure_design,
    effect_map,
    finalize_identification,
    largest_connected_component,
    leave_out_connected_set,
)
from .errors import (
    ConvergenceError,
    DesignError,
    HetfxError,
    InputError,
    MonteCarloError,
    NumericalError,
    UnidentifiedError,
)
from .estimators import (
    NonlinearFunctional,
    PosteriorState,
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
from .noise import (
    NoiseSpec,
    estimate_omega_leaveout,
    estimate_sigma2,
    fit_parametric_diag,
    leaveout_residuals,
)
from .rc_model import (
    CovModel,
    GroupAssignment,
    MeanModel,
    RCSpec,
    check_annihilator,
    fit_cov,
    fit_mean,
    fit_rc,
    kmeans_groups,
    quasi_loglik,
)
from .simulate import (
    DGPConfig,
    SyntheticDataset,
    gen_akm,
    gen_exposure,
    gen_simple_means,
    generate,
    montecarlo,
)
from .solve import (
    EstimateBundle,
    QuadraticForm,
    apply_S,
    leverage_diagonals,
    ols_fit,
    s_diagonal,
    s_entries,
    trace_QS,
)

__version__ = "0.1.0"
