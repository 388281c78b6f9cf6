"""Global-Local ABC-MCMC: likelihood-free inference with mixed kernels.

Building blocks: reproducible seed streams (:mod:`glabc.rng`), ABC targets
(:mod:`glabc.model`), local/global transition kernels (:mod:`glabc.kernels`),
CRN gradient estimators (:mod:`glabc.grad`), an adaptive coupling-flow
proposal (:mod:`glabc.flow`), ESJD-based hyper-parameter tuning
(:mod:`glabc.tune`), diagnostics (:mod:`glabc.diag`), benchmark models
(:mod:`glabc.zoo`), and a batch runner/CLI (:mod:`glabc.runner`,
:mod:`glabc.cli`).
"""

from .rng import SeedStream, CrnPanel, make_stream, fresh_panel, draw_standard_normal
from .model import (
    AbcTarget,
    ParamPoint,
    WeightedCandidate,
    GaussianKernel,
    DiscrepancyGaussianKernel,
    GaussianPrior,
    GammaPrior,
    simulate,
    kernel_weight,
    log_unnorm_posterior,
    prior_sample,
    make_point,
)
from .kernels import (
    ChainState,
    GlobalLocalConfig,
    PriorProposal,
    GaussianIndependentProposal,
    GaussianMixtureProposal,
    UniformBoxProposal,
    mh_accept_prob,
    init_state,
    local_rw_step,
    mala_step,
    global_imh_step,
    isir_step,
    gl_step,
)
from .grad import GradEstimator, GradResult, estimate_grad, loglik_crn
from .flow import (
    FlowModel,
    FlowProposal,
    TrainBuffer,
    build_flow,
    flow_logdensity,
    flow_sample,
    flow_train_step,
    isir_nf_step,
)
from .tune import EsjdEstimate, TuneSpace, esjd_d, esjd_1d, cesjd, sequential_tune
from .diag import (
    KdeSpec,
    ReferencePosterior,
    ess,
    kde_1d,
    kde_2d,
    grid_kl,
    grid_kl_marginals,
    reference_by_is,
    mode_switches,
)

__version__ = "0.1.0"
