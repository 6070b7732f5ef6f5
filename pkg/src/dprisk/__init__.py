"""Disclosure-risk estimation for categorical microdata via Bayesian
log-linear mixed models with Dirichlet-process random effects."""

from .dpmcmc import (
    DPState,
    GammaBase,
    GaussianBase,
    PosteriorDraws,
    SamplerConfig,
    run_chain,
)
from .errors import DegenerateInputError, DPRiskError, InputError, NumericalError
from .loglinear import (
    C0PathResult,
    MLFit,
    ModelSpec,
    c0_path_search,
    c0_score,
    design_matrix,
    design_row,
    fit_ml,
    independence_spec,
    parse_shorthand,
)
from .risk import (
    RiskReport,
    build_risk_report,
    global_risk_sim,
    global_risk_star,
    per_cell_risk,
    risk_quantiles,
    se_decomposition,
)
from .selection import ModelScore, SelectionRun, c1_score, rank_models, run_two_stage, waic_u_score
from .table import (
    ContingencyTable,
    KeyVariable,
    draw_sample,
    generate_population,
    load_table,
    save_table,
    tabulate,
    true_risks,
)

__version__ = "0.1.0"
