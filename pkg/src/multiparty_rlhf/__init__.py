"""Multi-party offline preference learning.

Shared-representation reward learning from pairwise comparisons,
pessimistic welfare maximisation (Nash, Utilitarian, Leximin) over
confidence sets, and pessimistic von Neumann winners for the reward-free
setting.
"""
__version__ = "0.1.0"

from .instances import (  # noqa: E402
    CBInstance, MDPInstance, build_intro_example, build_lower_bound_instance, build_prop_d1_instance,
    build_reference_instance, load_instance, random_instance, random_mdp_instance, save_instance,
)
from .sampling import sample_cb_dataset, sample_mdp_dataset  # noqa: E402
from .reward_learning import FitOptions, RewardFit, confidence_radius, fit_mle  # noqa: E402
from .welfare import (  # noqa: E402
    PolicySolution, SolveOptions, WelfareKind, audit_pareto, audit_pigou_dalton, concentrability,
    pessimistic_value, solve_policy, true_value,
)
from .reward_free import build_tables, solve_matrix_game, von_neumann_winner  # noqa: E402

__all__ = [
    "CBInstance", "MDPInstance", "build_intro_example", "build_lower_bound_instance", "build_prop_d1_instance",
    "build_reference_instance", "load_instance", "random_instance", "random_mdp_instance", "save_instance",
    "sample_cb_dataset", "sample_mdp_dataset", "FitOptions", "RewardFit", "confidence_radius", "fit_mle",
    "PolicySolution", "SolveOptions", "WelfareKind", "audit_pareto", "audit_pigou_dalton", "concentrability",
    "pessimistic_value", "solve_policy", "true_value", "build_tables", "solve_matrix_game", "von_neumann_winner",
]
