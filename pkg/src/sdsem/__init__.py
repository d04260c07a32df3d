"""Bayesian spatial dynamic structural equation models for lattice panels.

Latent dynamic factors with error-correction (cointegrated) dynamics load
onto observed site-level panels through spatially structured (GMRF) loading
columns.  The package covers full MCMC inference, predictive model choice,
unconditional and scenario forecasting and dynamic-multiplier analysis, plus
a CLI tying the pieces together.
"""

from .config import DESK_PRESET, PAPER_PRESET, RunConfig, load_config
from .data import (
    PanelDataset,
    PanelSchema,
    TransformRecord,
    deflate_and_log,
    geometric_interpolate,
    load_adjacency,
    load_panel,
    make_periods,
)
from .ecm import (
    CointRanks,
    EcmBlocks,
    EcmForm,
    blocks_to_ecm,
    draw_ranks,
    ecm_to_var,
    rank_estimate,
    rank_posterior,
    rank_posterior_mode,
    var_to_ecm,
)
from .errors import SdsemError
from .forecasting import (
    ForecastMetrics,
    ForecastResult,
    forecast_conditional,
    forecast_metrics,
    forecast_unconditional,
    implied_factor_path,
    k_step_state_moments,
)
from .lattice import (
    AdjacencyMatrix,
    GmrfSpec,
    JointGmrf,
    build_joint_precision,
    check_positive_definite,
    conditional_correlation,
    constant_mean_design,
    sample_gmrf,
)
from .mcmc import (
    AnchorSet,
    ChainMeta,
    PosteriorDraws,
    deviance,
    gelman_rubin,
    preliminary_run,
    run_chain,
    run_chains,
    select_anchor_states,
)
from .multipliers import (
    CompanionJQB,
    MultiplierSeries,
    build_jqb,
    impulse_response,
    multiplier_posterior,
)
from .params import PriorConfig, SdSemParams, SsvsState
from .selection import PmccResult, grid_search, pmcc
from .state_space import (
    FactorDynamics,
    FactorPath,
    MeasurementModel,
    StateSpaceForm,
    assemble_companion,
    ffbs_draw,
    ffbs_states,
    kalman_filter,
    kalman_smoother,
    simulate,
    simulate_measurements,
)
from .synthetic import make_true_params

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
