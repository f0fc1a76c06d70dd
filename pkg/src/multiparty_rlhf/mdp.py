"""Finite-horizon tabular MDPs with known transitions.

Everything reduces to the bandit machinery once states are weighted by the
occupancy measure ``d_pi(s) = sum_h P(s_h = s | pi)`` of the candidate
policy, and comparisons use summed per-step feature differences.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .instances import MDPInstance
from .sampling import TrajectoryComparisonRecord, party_rng, _categorical
from .welfare import (
    PolicySolution, SolveOptions, WelfareKind, concentrability, solve_policy, true_value,
    pessimistic_value, all_policies, welfare_table, policy_value,
)


@dataclass(frozen=True)
class OccupancyMeasure:
    d_pi: np.ndarray  # (S,)
    per_step: np.ndarray  # (H, S), row h is the state distribution at step h

    @property
    def horizon(self) -> int:
        return self.per_step.shape[0]


def occupancy(inst: MDPInstance, policy) -> OccupancyMeasure:
    """Forward recursion ``mu_{h+1}(s') = sum_s mu_h(s) P_h(s' | s, pi(s))``."""
    pol = np.asarray(policy, dtype=int)
    S, H = inst.num_states, inst.horizon
    if pol.shape != (S,):
        raise ValueError(f"policy must assign an action to each of the {S} states")
    mu = np.empty((H, S))
    mu[0] = inst.initial_dist
    for h in range(H - 1):
        P = inst.transitions[h, np.arange(S), pol]  # (S, S')
        mu[h + 1] = mu[h] @ P
    return OccupancyMeasure(mu.sum(axis=0), mu)


def occupancy_monte_carlo(inst: MDPInstance, policy, n_rollouts: int, seed: int = 0) -> np.ndarray:
    """Empirical visit counts per rollout; unbiased for ``d_pi``."""
    pol = np.asarray(policy, dtype=int)
    rng = party_rng(seed, 0)
    counts = np.zeros(inst.num_states)
    s = _categorical(rng, np.broadcast_to(inst.initial_dist, (n_rollouts, inst.num_states)))
    for h in range(inst.horizon):
        counts += np.bincount(s, minlength=inst.num_states)
        if h < inst.horizon - 1:
            s = _categorical(rng, inst.transitions[h, s, pol[s]])
    return counts / n_rollouts


def trajectory_feature_diff(record: TrajectoryComparisonRecord, features) -> np.ndarray:
    """``sum_h phi(s_h, a_h) - phi(s'_h, a'_h)`` for one comparison."""
    F = np.asarray(features, dtype=float)
    lens = {len(record.states_1), len(record.actions_1), len(record.states_0), len(record.actions_0)}
    if len(lens) != 1:
        raise ValueError("both trajectories must have the same length in states and actions")
    f1 = F[list(record.states_1), list(record.actions_1)].sum(axis=0)
    f0 = F[list(record.states_0), list(record.actions_0)].sum(axis=0)
    return f1 - f0


def occupancy_weights(inst: MDPInstance):
    """Callable ``policy -> d_pi`` for the policy search."""
    return lambda policy: occupancy(inst, policy).d_pi


def mdp_true_value(inst: MDPInstance, policy, kind, params=None) -> float:
    return true_value(inst, policy, kind, weights=occupancy(inst, policy).d_pi, params=params)


def mdp_optimal_policy(inst: MDPInstance, kind, opts: SolveOptions | None = None) -> tuple[np.ndarray, float]:
    """``pi*`` by enumeration (occupancies make the objective non-separable)."""
    opts = opts or SolveOptions()
    T = welfare_table(inst.rewards(), kind, opts.reference_policy)
    best_v, best_p = -np.inf, None
    for p in all_policies(inst.num_states, inst.num_actions, opts.enum_cap):
        p = p.astype(int)
        v = policy_value(T, occupancy(inst, p).d_pi, p)
        if best_p is None or v > best_v + 1e-12 * max(1.0, abs(best_v)):
            best_v, best_p = v, p
    return best_p, best_v


def mdp_pessimistic_value(fit, inst: MDPInstance, policy, kind, opts: SolveOptions | None = None):
    return pessimistic_value(fit, inst.features, occupancy(inst, policy).d_pi, policy, kind, opts)


def mdp_values_and_solve(inst: MDPInstance, fit, kind, mode: str = "exact",
                         opts: SolveOptions | None = None, with_truth: bool = True) -> PolicySolution:
    """The bandit policy search with every expectation taken under ``d_pi``."""
    return solve_policy(fit, inst.features, occupancy_weights(inst), kind, mode, opts,
                        true_params=inst.party_params if with_truth else None)


def mdp_concentrability(inst: MDPInstance, sigma, kind, pi_star=None, inner_thetas=None, ridge=1e-8):
    """Coverage coefficient with every expectation under ``d_{pi*}``."""
    kind = WelfareKind.parse(kind)
    if pi_star is None:
        pi_star, _ = mdp_optimal_policy(inst, kind)
    w = occupancy(inst, pi_star).d_pi
    return concentrability(inst.features, sigma, kind, inst.party_params, pi_star, inner_thetas, w, ridge)
