"""Policy-cover guided model learning and planning for KNRs and linear MDPs."""

from .algorithm import (IterationRecord, PcmlpConfig, PcmlpResult, regret_diagnostic, run_pcmlp,
                        schedule_c, theory_preset_knr, theory_preset_linmdp)
from .bonus import (BonusSpec, PolicyCover, aggregate, bonus, bonus_sandwich_check, estimate_policy_cov,
                    information_gain, mixture_sample, trace_telescope_check)
from .core import (MdpSpec, TabularMdp, TabularPolicy, d_pi_sample, estimate_value, exact_value_tabular,
                   rollout, simulation_gap, stream)
from .envs import (coverage_metric, make_chain, make_env, make_linear_system, make_sparse_hill,
                   make_tabular_linmdp)
from .features import one_hot, rff_new
from .mle import SgdConfig, fit_knr_least_squares, fit_knr_sgd, fit_linmdp_exact, measure_model_error
from .models import (KnrModel, LinearMdpModel, gaussian_tv_bound, knr_log_likelihood, knr_sample,
                     linmdp_next_dist, state_norm_bound)
from .odpc import (ConfidenceRegion, EluderInstance, eluder_dimension, eluder_w_k, feasibility_radius,
                   run_odpc)
from .planners import MppiConfig, mppi_policy, mppi_step, optimistic_plan, tabular_plan

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
