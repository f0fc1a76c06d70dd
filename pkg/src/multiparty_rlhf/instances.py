"""Ground-truth environments, named fixtures and assumption audits.

Contextual-bandit instances store everything as dense numpy arrays:

* ``features[s, a]`` is the feature vector of length ``d``;
* ``party_params[m] = shared_factor @ party_coeffs[m]``;
* ``pair_gen[s, a1, a0]`` is the probability of drawing the ordered pair
  ``(a1, a0)`` at state ``s``.

Instances are frozen after construction (arrays are made read-only) so they
can be shared freely between workers.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

CB_SCHEMA = "cb-instance/v1"
MDP_SCHEMA = "mdp-instance/v1"

_ORTHO_TOL = 1e-10
_PROB_TOL = 1e-12


class AssumptionWarning(UserWarning):
    """Raised (as a warning) when an instance violates a modelling assumption."""


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def _check_distribution(p: np.ndarray, what: str) -> None:
    if np.any(p < 0):
        raise ValueError(f"{what} has negative entries")
    sums = p.reshape(p.shape[0], -1).sum(axis=1) if p.ndim > 1 else np.array([p.sum()])
    if np.any(np.abs(sums - 1.0) > _PROB_TOL * max(1, p[0].size)):
        raise ValueError(f"{what} does not sum to one (sums={sums})")


def _check_factor(U: np.ndarray, alpha: np.ndarray, theta: np.ndarray) -> None:
    d, r = U.shape
    if r > d:
        raise ValueError(f"rank {r} exceeds feature dimension {d}")
    if np.max(np.abs(U.T @ U - np.eye(r))) > _ORTHO_TOL:
        raise ValueError("shared_factor columns are not orthonormal")
    if alpha.shape[1] != r or theta.shape[1] != d or alpha.shape[0] != theta.shape[0]:
        raise ValueError("party_coeffs / party_params have inconsistent shapes")
    if not np.array_equal(theta, alpha @ U.T):
        raise ValueError("party_params must equal shared_factor @ party_coeffs exactly")


def _check_bounds(theta: np.ndarray, features: np.ndarray, bound: float, feature_bound: float) -> None:
    if bound <= 0 or feature_bound <= 0:
        raise ValueError("param_bound and feature_bound must be positive")
    if np.max(np.linalg.norm(theta, axis=1)) > bound * (1 + 1e-12):
        raise ValueError("some party parameter exceeds param_bound")
    if np.max(np.linalg.norm(features, axis=-1)) > feature_bound * (1 + 1e-12):
        raise ValueError("some feature vector exceeds feature_bound")


@dataclass(frozen=True)
class CBInstance:
    """Contextual-bandit environment with ``M`` linear BTL parties."""

    features: np.ndarray  # (S, A, d)
    shared_factor: np.ndarray  # (d, r)
    party_coeffs: np.ndarray  # (M, r)
    param_bound: float
    feature_bound: float
    initial_dist: np.ndarray  # (S,)
    pair_gen: np.ndarray  # (S, A, A)
    name: str = "custom"
    meta: dict = field(default_factory=dict, compare=False)
    party_params: np.ndarray = field(init=False)

    def __post_init__(self):
        features = _frozen(self.features)
        U = _frozen(self.shared_factor)
        alpha = _frozen(np.atleast_2d(self.party_coeffs))
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "shared_factor", U)
        object.__setattr__(self, "party_coeffs", alpha)
        object.__setattr__(self, "party_params", _frozen(alpha @ U.T))
        object.__setattr__(self, "initial_dist", _frozen(self.initial_dist))
        object.__setattr__(self, "pair_gen", _frozen(self.pair_gen))
        object.__setattr__(self, "param_bound", float(self.param_bound))
        object.__setattr__(self, "feature_bound", float(self.feature_bound))

        S, A, d = features.shape
        if U.shape[0] != d:
            raise ValueError("shared_factor rows must match feature dimension")
        if self.initial_dist.shape != (S,):
            raise ValueError("initial_dist must have one entry per state")
        if self.pair_gen.shape != (S, A, A):
            raise ValueError("pair_gen must have shape (S, A, A)")
        _check_factor(U, alpha, self.party_params)
        _check_bounds(self.party_params, features, self.param_bound, self.feature_bound)
        _check_distribution(self.initial_dist, "initial_dist")
        _check_distribution(self.pair_gen, "pair_gen")

    num_states = property(lambda self: self.features.shape[0])
    num_actions = property(lambda self: self.features.shape[1])
    feature_dim = property(lambda self: self.features.shape[2])
    rank = property(lambda self: self.shared_factor.shape[1])
    num_parties = property(lambda self: self.party_coeffs.shape[0])

    def rewards(self, params: np.ndarray | None = None) -> np.ndarray:
        """Reward table ``R[m, s, a]`` for the true (or supplied) parameters."""
        theta = self.party_params if params is None else np.atleast_2d(params)
        return np.einsum("md,sad->msa", theta, self.features)

    def replace_params(self, party_coeffs, shared_factor=None, **changes) -> "CBInstance":
        """Copy of the instance with different party parameters."""
        kw = dict(
            features=self.features,
            shared_factor=self.shared_factor if shared_factor is None else shared_factor,
            party_coeffs=party_coeffs,
            param_bound=self.param_bound,
            feature_bound=self.feature_bound,
            initial_dist=self.initial_dist,
            pair_gen=self.pair_gen,
            name=self.name,
            meta=dict(self.meta),
        )
        kw.update(changes)
        return CBInstance(**kw)

    def to_json(self) -> dict:
        S, A, d = self.features.shape
        return {
            "schema": CB_SCHEMA,
            "name": self.name,
            "num_states": S,
            "num_actions": A,
            "feature_dim": d,
            "rank": self.rank,
            "num_parties": self.num_parties,
            "features": self.features.ravel().tolist(),
            "shared_factor": self.shared_factor.tolist(),
            "party_coeffs": self.party_coeffs.tolist(),
            "param_bound": self.param_bound,
            "feature_bound": self.feature_bound,
            "initial_dist": self.initial_dist.tolist(),
            "pair_gen": self.pair_gen.ravel().tolist(),
            "meta": _jsonable(self.meta),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "CBInstance":
        if doc.get("schema") != CB_SCHEMA:
            raise ValueError(f"expected schema {CB_SCHEMA!r}, got {doc.get('schema')!r}")
        S, A, d = doc["num_states"], doc["num_actions"], doc["feature_dim"]
        return cls(
            features=np.asarray(doc["features"], dtype=float).reshape(S, A, d),
            shared_factor=np.asarray(doc["shared_factor"], dtype=float).reshape(d, doc["rank"]),
            party_coeffs=np.asarray(doc["party_coeffs"], dtype=float).reshape(doc["num_parties"], doc["rank"]),
            param_bound=doc["param_bound"],
            feature_bound=doc["feature_bound"],
            initial_dist=np.asarray(doc["initial_dist"], dtype=float),
            pair_gen=np.asarray(doc["pair_gen"], dtype=float).reshape(S, A, A),
            name=doc.get("name", "custom"),
            meta=doc.get("meta", {}),
        )


@dataclass(frozen=True)
class MDPInstance:
    """Finite-horizon tabular MDP with known transitions.

    ``transitions[h, s, a]`` is the next-state distribution after step
    ``h`` (there are ``H - 1`` of them).  Trajectory pairs are generated by
    two independent rollouts of the behaviour policy ``behavior[h, s]``
    started from the same initial state.
    """

    features: np.ndarray
    shared_factor: np.ndarray
    party_coeffs: np.ndarray
    param_bound: float
    feature_bound: float
    initial_dist: np.ndarray
    horizon: int
    transitions: np.ndarray  # (H-1, S, A, S)
    behavior: np.ndarray  # (H, S, A)
    name: str = "custom-mdp"
    meta: dict = field(default_factory=dict, compare=False)
    party_params: np.ndarray = field(init=False)

    def __post_init__(self):
        features = _frozen(self.features)
        U = _frozen(self.shared_factor)
        alpha = _frozen(np.atleast_2d(self.party_coeffs))
        S, A, d = features.shape
        H = int(self.horizon)
        if H < 1:
            raise ValueError("horizon must be at least 1")
        trans = _frozen(np.asarray(self.transitions, dtype=float).reshape(H - 1, S, A, S))
        beh = _frozen(np.asarray(self.behavior, dtype=float).reshape(H, S, A))
        for name, value in [
            ("features", features), ("shared_factor", U), ("party_coeffs", alpha),
            ("party_params", _frozen(alpha @ U.T)), ("initial_dist", _frozen(self.initial_dist)),
            ("transitions", trans), ("behavior", beh), ("horizon", H),
            ("param_bound", float(self.param_bound)), ("feature_bound", float(self.feature_bound)),
        ]:
            object.__setattr__(self, name, value)
        _check_factor(U, alpha, self.party_params)
        _check_bounds(self.party_params, features, self.param_bound, self.feature_bound)
        _check_distribution(self.initial_dist, "initial_dist")
        if H > 1:
            _check_distribution(trans.reshape(-1, S), "transitions")
        _check_distribution(beh.reshape(-1, A), "behavior")

    num_states = property(lambda self: self.features.shape[0])
    num_actions = property(lambda self: self.features.shape[1])
    feature_dim = property(lambda self: self.features.shape[2])
    rank = property(lambda self: self.shared_factor.shape[1])
    num_parties = property(lambda self: self.party_coeffs.shape[0])
    rewards = CBInstance.rewards

    @classmethod
    def from_cb(cls, inst: CBInstance, horizon: int = 1, transitions=None, behavior=None) -> "MDPInstance":
        """Lift a contextual bandit to an MDP (uniform behaviour by default)."""
        S, A = inst.num_states, inst.num_actions
        if behavior is None:
            behavior = np.full((horizon, S, A), 1.0 / A)
        if transitions is None:
            if horizon > 1:
                raise ValueError("transitions are required when horizon > 1")
            transitions = np.zeros((0, S, A, S))
        return cls(
            features=inst.features, shared_factor=inst.shared_factor, party_coeffs=inst.party_coeffs,
            param_bound=inst.param_bound, feature_bound=inst.feature_bound,
            initial_dist=inst.initial_dist, horizon=horizon, transitions=transitions,
            behavior=behavior, name=inst.name + "-mdp",
        )

    def embedded_cb(self) -> CBInstance:
        """The contextual bandit an ``H = 1`` MDP is equivalent to."""
        if self.horizon != 1:
            raise ValueError("only horizon-1 MDPs embed into a contextual bandit")
        b = self.behavior[0]
        return CBInstance(
            features=self.features, shared_factor=self.shared_factor, party_coeffs=self.party_coeffs,
            param_bound=self.param_bound, feature_bound=self.feature_bound,
            initial_dist=self.initial_dist, pair_gen=b[:, :, None] * b[:, None, :],
            name=self.name + "-cb",
        )

    def to_json(self) -> dict:
        S, A, d = self.features.shape
        return {
            "schema": MDP_SCHEMA,
            "name": self.name,
            "num_states": S,
            "num_actions": A,
            "feature_dim": d,
            "rank": self.rank,
            "num_parties": self.num_parties,
            "horizon": self.horizon,
            "features": self.features.ravel().tolist(),
            "shared_factor": self.shared_factor.tolist(),
            "party_coeffs": self.party_coeffs.tolist(),
            "param_bound": self.param_bound,
            "feature_bound": self.feature_bound,
            "initial_dist": self.initial_dist.tolist(),
            "transitions": self.transitions.ravel().tolist(),
            "behavior": self.behavior.ravel().tolist(),
            "meta": _jsonable(self.meta),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "MDPInstance":
        if doc.get("schema") != MDP_SCHEMA:
            raise ValueError(f"expected schema {MDP_SCHEMA!r}, got {doc.get('schema')!r}")
        S, A, d, H = doc["num_states"], doc["num_actions"], doc["feature_dim"], doc["horizon"]
        return cls(
            features=np.asarray(doc["features"], dtype=float).reshape(S, A, d),
            shared_factor=np.asarray(doc["shared_factor"], dtype=float).reshape(d, doc["rank"]),
            party_coeffs=np.asarray(doc["party_coeffs"], dtype=float).reshape(doc["num_parties"], doc["rank"]),
            param_bound=doc["param_bound"],
            feature_bound=doc["feature_bound"],
            initial_dist=np.asarray(doc["initial_dist"], dtype=float),
            horizon=H,
            transitions=np.asarray(doc["transitions"], dtype=float).reshape(H - 1, S, A, S),
            behavior=np.asarray(doc["behavior"], dtype=float).reshape(H, S, A),
            name=doc.get("name", "custom-mdp"),
            meta=doc.get("meta", {}),
        )


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def save_instance(inst: CBInstance | MDPInstance, path) -> None:
    Path(path).write_text(json.dumps(inst.to_json()))


def load_instance(path) -> CBInstance | MDPInstance:
    doc = json.loads(Path(path).read_text())
    schema = doc.get("schema")
    if schema == CB_SCHEMA:
        return CBInstance.from_json(doc)
    if schema == MDP_SCHEMA:
        return MDPInstance.from_json(doc)
    raise ValueError(f"unknown instance schema {schema!r}")


# ---------------------------------------------------------------------------
# fixtures
# ---------------------------------------------------------------------------

def uniform_pairs(num_states: int, num_actions: int) -> np.ndarray:
    """Uniform distribution over ordered pairs of distinct actions."""
    g = np.ones((num_states, num_actions, num_actions))
    g[:, np.arange(num_actions), np.arange(num_actions)] = 0.0
    return g / g.sum(axis=(1, 2), keepdims=True)


def factorize_params(theta: np.ndarray, rank: int) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal factor ``U`` and coefficients with ``theta ~= alpha @ U.T``.

    ``theta`` is ``(M, d)``; the factor spans the top-``rank`` left singular
    subspace of the stacked ``d x M`` parameter matrix.
    """
    u, _, _ = np.linalg.svd(np.asarray(theta, dtype=float).T, full_matrices=True)
    U = u[:, :rank]
    return U, theta @ U


def build_intro_example(epsilon: float, param_bound: float = 2.0) -> CBInstance:
    """Two parties, three options ``(A, B, C)`` pulling in opposite directions.

    Party one scores ``(1, 0, 1 - eps)``, party two ``(0, 1, 1 - eps)``.
    Options are one-hot features, so each parameter *is* the reward vector.
    """
    if not 0.0 < epsilon < 1.0:
        raise ValueError("epsilon must lie in (0, 1)")
    theta = np.array([[1.0, 0.0, 1.0 - epsilon], [0.0, 1.0, 1.0 - epsilon]])
    U, alpha = factorize_params(theta, 2)
    return CBInstance(
        features=np.eye(3)[None],
        shared_factor=U,
        party_coeffs=alpha,
        param_bound=param_bound,
        feature_bound=1.0,
        initial_dist=np.ones(1),
        pair_gen=uniform_pairs(1, 3),
        name="intro",
        meta={"epsilon": epsilon, "action_names": ["A", "B", "C"]},
    )


def lower_bound_counts(num_states: int, C: float, n: int) -> np.ndarray:
    """Per-state observation budget of the hard instance.

    Each state gets ``n // S`` comparisons (the first ``n % S`` states one
    extra), split between the pairs ``(a1, a2)`` and ``(a2, a3)`` in ratio
    ``1 - 2/C^2 : 2/C^2``; fractional counts are floored and the remainder
    goes to the first pair.
    """
    counts = np.zeros((num_states, 4, 4), dtype=np.int64)
    for s in range(num_states):
        n_s = n // num_states + (1 if s < n % num_states else 0)
        second = math.floor(n_s * 2.0 / C**2)
        counts[s, 1, 2] = second
        counts[s, 0, 1] = n_s - second
    return counts


def build_lower_bound_instance(rank: int, C: float, n: int, tau) -> CBInstance:
    """Single-party hard instance indexed by a sign vector ``tau``.

    States ``s = 0..r/3-1`` own coordinates ``3s, 3s+1, 3s+2`` of the
    parameter; the gap ``Delta = C * sqrt(S / n)`` separates the two sign
    choices at each state.
    """
    if rank <= 6 or rank % 3:
        raise ValueError("rank must exceed 6 and be divisible by 3")
    if C < 2:
        raise ValueError("C must be at least 2")
    S = rank // 3
    tau = np.asarray(tau, dtype=int)
    if tau.shape != (S,) or not np.all(np.isin(tau, (-1, 1))):
        raise ValueError(f"tau must be a sign vector of length {S}")
    if n < rank * C**2:
        warnings.warn(f"n={n} is below rank * C^2 = {rank * C**2:g}", AssumptionWarning, stacklevel=2)

    delta = C * math.sqrt(S / n)
    v = {
        -1: np.array([1 / rank, 1 / rank + delta, -2 / rank - delta]),
        1: np.array([1 / rank + 2 * delta, 1 / rank + delta, -2 / rank - 3 * delta]),
    }
    features = np.zeros((S, 4, rank))
    for s in range(S):
        features[s, 0, 3 * s] = 1.0
        features[s, 0, 3 * s + 1] = -1.0
        features[s, 1, 3 * s] = 1.0
        features[s, 3, 3 * s + 1] = 1.0
    # phi(s, a1) = e - e' has norm sqrt(2); kept literal so ||theta|| <= 1 holds
    alpha = np.concatenate([v[int(t)] for t in tau])
    counts = lower_bound_counts(S, C, n)
    g = counts / counts.sum(axis=(1, 2), keepdims=True)
    return CBInstance(
        features=features,
        shared_factor=np.eye(rank),
        party_coeffs=alpha[None],
        param_bound=max(1.0, float(np.linalg.norm(alpha))),
        feature_bound=math.sqrt(2.0),
        initial_dist=np.full(S, 1.0 / S),
        pair_gen=g,
        name="lower-bound",
        meta={"C": C, "n": n, "tau": tau.tolist(), "delta_gap": delta, "design_counts": counts},
    )


def build_prop_d1_instance(C: float = 2.0) -> CBInstance:
    """Two states where the parties' favourite actions are swapped."""
    features = np.zeros((2, 3, 2))
    features[0, 0] = [1, 0]
    features[0, 1] = [0, 1]
    features[1, 0] = [0, 1]
    features[1, 1] = [1, 0]
    g = np.zeros((2, 3, 3))
    g[:, 0, 1] = 1 - 2 / C**2
    g[:, 1, 2] = 2 / C**2
    return CBInstance(
        features=features,
        shared_factor=np.eye(2),
        party_coeffs=np.eye(2),
        param_bound=1.0,
        feature_bound=1.0,
        initial_dist=np.full(2, 0.5),
        pair_gen=g,
        name="prop-d1",
        meta={"C": C},
    )


REFERENCE_GAPS = ((0.17, 0.03), (0.27, 0.08), (0.22, 0.06))
REFERENCE_COVERAGE = ((0.10, 0.05), (0.15, 0.025), (0.07, 0.01))


def build_reference_instance(gaps=REFERENCE_GAPS, coverage=REFERENCE_COVERAGE, seed: int = 0,
                             scale: float = 3.0, nuisance: float = 0.5) -> CBInstance:
    """Scaling-study instance (M=4, S=3, A=4, d=8, r=2) where pessimism bites.

    At every state action 0 is the common zero, action 3 is best and
    actions 1 and 2 trail it by ``gaps[s]`` along a state-specific value
    direction.  Actions 2 and 3 also carry a component along their own
    direction outside the shared subspace; it leaves the true rewards
    untouched, and since only pairs involving that action measure it, the
    action's sampling weight ``coverage[s]`` sets how strongly the
    confidence set penalises it.  Spreading gaps and weights gives a ladder
    of sample sizes at which the pessimistic choice moves to a better
    action.  ``seed`` only rotates the feature space.
    """
    S, A, d, r = 3, 4, 8, 2
    g = np.asarray(gaps, dtype=float).reshape(S, 2)
    c = np.asarray(coverage, dtype=float).reshape(S, 2)
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    U, N = Q[:, :r], Q[:, r:]
    features = np.zeros((S, A, d))
    for s, ang in enumerate(np.deg2rad([30.0, 45.0, 60.0])):
        u = U @ np.array([math.cos(ang), math.sin(ang)])
        for a, t in enumerate((0.0, 1.0 - g[s, 0], 1.0 - g[s, 1], 1.0)):
            features[s, a] = t * u
        features[s, 2] += nuisance * N[:, 2 * s]
        features[s, 3] += nuisance * N[:, 2 * s + 1]
    features /= np.max(np.linalg.norm(features, axis=-1))
    ang = np.deg2rad([20.0, 40.0, 50.0, 70.0])
    alpha = scale * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    pair_gen = np.zeros((S, A, A))
    for s in range(S):
        w = np.array([1.0, 1.0, c[s, 0], c[s, 1]])
        pair_gen[s] = np.outer(w, w)
        np.fill_diagonal(pair_gen[s], 0.0)
        pair_gen[s] /= pair_gen[s].sum()
    return CBInstance(
        features=features,
        shared_factor=U,
        party_coeffs=alpha,
        param_bound=2.0 * scale,
        feature_bound=1.0,
        initial_dist=np.full(S, 1.0 / S),
        pair_gen=pair_gen,
        name="reference",
        meta={"gaps": g.tolist(), "coverage": c.tolist(), "seed": seed},
    )


def random_instance(
    num_states: int,
    num_actions: int,
    feature_dim: int,
    rank: int,
    num_parties: int,
    seed: int,
    param_scale: float = 1.0,
    bound_slack: float = 2.0,
    rho: str = "uniform",
) -> CBInstance:
    """Random well-conditioned instance (Gaussian features, random subspace).

    Features are rescaled so the largest has norm one; every ``alpha_m`` has
    norm ``param_scale`` and the parameter ball has radius
    ``bound_slack * param_scale``.
    """
    rng = np.random.default_rng(seed)
    features = rng.standard_normal((num_states, num_actions, feature_dim))
    features /= np.max(np.linalg.norm(features, axis=-1))
    U, _ = np.linalg.qr(rng.standard_normal((feature_dim, rank)))
    alpha = rng.standard_normal((num_parties, rank))
    alpha *= param_scale / np.linalg.norm(alpha, axis=1, keepdims=True)
    if rho == "uniform":
        init = np.full(num_states, 1.0 / num_states)
    else:
        init = rng.dirichlet(np.ones(num_states))
    return CBInstance(
        features=features,
        shared_factor=U,
        party_coeffs=alpha,
        param_bound=bound_slack * param_scale,
        feature_bound=1.0,
        initial_dist=init,
        pair_gen=uniform_pairs(num_states, num_actions),
        name=f"random-{seed}",
        meta={"seed": seed},
    )


def random_mdp_instance(
    num_states: int,
    num_actions: int,
    feature_dim: int,
    rank: int,
    num_parties: int,
    horizon: int,
    seed: int,
    param_scale: float = 1.0,
) -> MDPInstance:
    """Random MDP: random CB core plus Dirichlet transitions, uniform behaviour."""
    cb = random_instance(num_states, num_actions, feature_dim, rank, num_parties, seed, param_scale)
    rng = np.random.default_rng(seed + 7919)
    trans = rng.dirichlet(np.ones(num_states), size=(horizon - 1, num_states, num_actions))
    mdp = MDPInstance.from_cb(cb, horizon=horizon, transitions=trans.reshape(horizon - 1, num_states, num_actions, num_states),
                              behavior=np.full((horizon, num_states, num_actions), 1.0 / num_actions))
    return mdp


# ---------------------------------------------------------------------------
# assumption audits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiversityStats:
    nu: float
    kappa: float
    eig_min: float
    eig_max: float
    sigma_star: np.ndarray


def population_covariance(inst: CBInstance) -> np.ndarray:
    """Exact ``E_g[(phi(s,a1) - phi(s,a0))(...)^T]`` for a tabular generator."""
    diff = inst.features[:, :, None, :] - inst.features[:, None, :, :]  # (S, A, A, d)
    w = inst.initial_dist[:, None, None] * inst.pair_gen
    return np.einsum("sab,sabi,sabj->ij", w, diff, diff)


def diversity_stats(inst: CBInstance, mc_samples: int | None = None, seed: int = 0) -> DiversityStats:
    """Diversity (``nu``, ``kappa``) and feature-design eigenvalues of ``inst``.

    With ``mc_samples=None`` the covariance is the exact tabular sum;
    otherwise it is a Monte-Carlo average over draws from ``rho * g``.
    Violations are reported as :class:`AssumptionWarning`, never raised.
    """
    if mc_samples is None:
        sigma = population_covariance(inst)
    else:
        if mc_samples < 1:
            raise ValueError("mc_samples must be positive")
        rng = np.random.default_rng(seed)
        S, A = inst.num_states, inst.num_actions
        w = (inst.initial_dist[:, None, None] * inst.pair_gen).ravel()
        idx = rng.choice(w.size, size=mc_samples, p=w / w.sum())
        s, a1, a0 = np.unravel_index(idx, (S, A, A))
        x = inst.features[s, a1] - inst.features[s, a0]
        sigma = x.T @ x / mc_samples
    sigma = 0.5 * (sigma + sigma.T)

    M, r = inst.num_parties, inst.rank
    theta = inst.party_params.T  # d x M
    sv = np.linalg.svd(theta.T @ theta / M, compute_uv=False)
    nu = float(sv[r - 1]) if r <= sv.size else 0.0
    nu_tol = 1e-12 * max(1.0, float(sv[0]))
    if nu <= nu_tol:
        nu = max(nu, 0.0)
        kappa = math.inf
        warnings.warn("degenerate diversity: nu = sigma_r(Theta^T Theta / M) is zero", AssumptionWarning, stacklevel=2)
    else:
        kappa = float(sv[0] / nu)
    eig = np.linalg.eigvalsh(sigma)
    if eig[0] <= 1e-12 * max(1.0, eig[-1]):
        warnings.warn("feature design covariance is singular (C_min <= 0)", AssumptionWarning, stacklevel=2)
    sigma.setflags(write=False)
    return DiversityStats(nu=nu, kappa=kappa, eig_min=float(eig[0]), eig_max=float(eig[-1]), sigma_star=sigma)
