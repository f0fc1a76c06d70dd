"""Offline pairwise-comparison data under the Bradley-Terry-Luce model.

Random streams come from numpy's Philox-4x64 counter-based generator.  The
stream for party ``m`` is keyed by ``seed ^ splitmix64(m + 1)``, so each
party's records are independent of how many parties are sampled and of the
order in which workers run.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterator

import numpy as np
from scipy.special import expit

from .instances import CBInstance, MDPInstance

CB_DATA_SCHEMA = "cb-data/v1"
MDP_DATA_SCHEMA = "mdp-data/v1"
RNG_ALGORITHM = "philox4x64-10"

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def party_rng(seed: int, party: int) -> np.random.Generator:
    key = (int(seed) & _MASK64) ^ splitmix64(party + 1)
    return np.random.Generator(np.random.Philox(key=key))


def _categorical(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    """One categorical draw per row of ``probs`` (inverse-CDF on uniforms)."""
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:-1]) * cdf[..., -1]
    idx = (u[..., None] >= cdf).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


@dataclass(frozen=True)
class ComparisonRecord:
    party: int
    state: int
    action_1: int
    action_0: int
    label: int


@dataclass(frozen=True)
class ComparisonDataset:
    """Equal-budget comparisons, stored as ``(M, n)`` integer arrays.

    ``label[m, i] == 1`` means ``action_1`` was preferred.
    """

    state: np.ndarray
    action_1: np.ndarray
    action_0: np.ndarray
    label: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        shape = np.shape(self.state)
        for name in ("state", "action_1", "action_0", "label"):
            arr = np.array(getattr(self, name), dtype=np.int64, copy=True)
            if arr.ndim != 2 or arr.shape != shape:
                raise ValueError("all record arrays must share one (M, n) shape")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not np.all(np.isin(self.label, (0, 1))):
            raise ValueError("labels must be binary")

    @property
    def num_parties(self) -> int:
        return self.state.shape[0]

    @property
    def n(self) -> int:
        return self.state.shape[1]

    def records(self, party: int | None = None) -> Iterator[ComparisonRecord]:
        parties = range(self.num_parties) if party is None else [party]
        for m in parties:
            for i in range(self.n):
                yield ComparisonRecord(m, int(self.state[m, i]), int(self.action_1[m, i]),
                                       int(self.action_0[m, i]), int(self.label[m, i]))

    def feature_differences(self, features: np.ndarray) -> np.ndarray:
        """``X[m, i] = phi(s, a1) - phi(s, a0)``, shape ``(M, n, d)``."""
        return features[self.state, self.action_1] - features[self.state, self.action_0]

    def pooled(self) -> "ComparisonDataset":
        """All parties' records merged into one single-party dataset."""
        flat = lambda a: a.reshape(1, -1)
        return ComparisonDataset(flat(self.state), flat(self.action_1), flat(self.action_0),
                                 flat(self.label), self.seed)

    def validate_against(self, inst: CBInstance) -> None:
        if self.n and (self.state.max() >= inst.num_states or self.state.min() < 0):
            raise ValueError("state id out of range for instance")
        for a in (self.action_1, self.action_0):
            if self.n and (a.max() >= inst.num_actions or a.min() < 0):
                raise ValueError("action id out of range for instance")
        if self.num_parties != inst.num_parties:
            raise ValueError("dataset and instance disagree on the number of parties")


def _btl_labels(rng: np.random.Generator, logits: np.ndarray) -> np.ndarray:
    return (rng.random(logits.shape) < expit(logits)).astype(np.int64)


def sample_cb_dataset(inst: CBInstance, n: int, seed: int) -> ComparisonDataset:
    """``n`` comparisons per party: ``s ~ rho``, ``(a1, a0) ~ g(.|s)``, BTL label."""
    if n < 1:
        raise ValueError("n must be positive")
    S, A = inst.num_states, inst.num_actions
    R = inst.rewards()
    pairs = inst.pair_gen.reshape(S, A * A)
    out = {k: np.empty((inst.num_parties, n), dtype=np.int64) for k in ("s", "a1", "a0", "y")}
    for m in range(inst.num_parties):
        rng = party_rng(seed, m)
        s = _categorical(rng, np.broadcast_to(inst.initial_dist, (n, S)))
        a1, a0 = np.divmod(_categorical(rng, pairs[s]), A)
        y = _btl_labels(rng, R[m, s, a1] - R[m, s, a0])
        out["s"][m], out["a1"][m], out["a0"][m], out["y"][m] = s, a1, a0, y
    return ComparisonDataset(out["s"], out["a1"], out["a0"], out["y"], seed)


def sample_cb_dataset_designed(inst: CBInstance, counts, seed: int) -> ComparisonDataset:
    """Exactly ``counts[s, a, a']`` comparisons of each cell for every party.

    ``counts`` is an ``(S, A, A)`` integer array or a mapping
    ``(s, (a, a')) -> count``.  Records are emitted cell by cell in
    row-major order; only the labels are random.
    """
    S, A = inst.num_states, inst.num_actions
    if isinstance(counts, dict):
        table = np.zeros((S, A, A), dtype=np.int64)
        for (s, (a, b)), c in counts.items():
            if not (0 <= s < S and 0 <= a < A and 0 <= b < A):
                raise ValueError(f"cell {(s, (a, b))} is outside the instance")
            table[s, a, b] = c
    else:
        table = np.asarray(counts, dtype=np.int64)
        if table.shape != (S, A, A):
            raise ValueError("counts must have shape (S, A, A)")
    if np.any(table < 0):
        raise ValueError("counts must be nonnegative")
    s, a1, a0 = (np.repeat(ix.ravel(), table.ravel()) for ix in np.indices(table.shape))
    n = s.size
    R = inst.rewards()
    M = inst.num_parties
    y = np.empty((M, n), dtype=np.int64)
    for m in range(M):
        y[m] = _btl_labels(party_rng(seed, m), R[m, s, a1] - R[m, s, a0])
    tile = lambda v: np.tile(v, (M, 1))
    return ComparisonDataset(tile(s), tile(a1), tile(a0), y, seed)


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrajectoryComparisonRecord:
    party: int
    initial_state: int
    states_1: tuple
    actions_1: tuple
    states_0: tuple
    actions_0: tuple
    label: int


@dataclass(frozen=True)
class TrajectoryDataset:
    """Trajectory comparisons; each array is ``(M, n, H)`` (labels ``(M, n)``)."""

    states_1: np.ndarray
    actions_1: np.ndarray
    states_0: np.ndarray
    actions_0: np.ndarray
    label: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        shape = np.shape(self.states_1)
        for name in ("states_1", "actions_1", "states_0", "actions_0"):
            arr = np.array(getattr(self, name), dtype=np.int64, copy=True)
            if arr.ndim != 3 or arr.shape != shape:
                raise ValueError("trajectory arrays must share one (M, n, H) shape")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        lab = np.array(self.label, dtype=np.int64, copy=True)
        if lab.shape != shape[:2]:
            raise ValueError("labels must have shape (M, n)")
        lab.setflags(write=False)
        object.__setattr__(self, "label", lab)

    num_parties = property(lambda self: self.states_1.shape[0])
    n = property(lambda self: self.states_1.shape[1])
    horizon = property(lambda self: self.states_1.shape[2])

    def records(self, party: int | None = None) -> Iterator[TrajectoryComparisonRecord]:
        parties = range(self.num_parties) if party is None else [party]
        for m in parties:
            for i in range(self.n):
                yield TrajectoryComparisonRecord(
                    m, int(self.states_1[m, i, 0]),
                    tuple(self.states_1[m, i].tolist()), tuple(self.actions_1[m, i].tolist()),
                    tuple(self.states_0[m, i].tolist()), tuple(self.actions_0[m, i].tolist()),
                    int(self.label[m, i]),
                )

    def feature_differences(self, features: np.ndarray) -> np.ndarray:
        f1 = features[self.states_1, self.actions_1].sum(axis=2)
        f0 = features[self.states_0, self.actions_0].sum(axis=2)
        return f1 - f0


def _rollout(rng, inst: MDPInstance, s0: np.ndarray):
    H = inst.horizon
    n = s0.size
    states = np.empty((n, H), dtype=np.int64)
    actions = np.empty((n, H), dtype=np.int64)
    s = s0
    for h in range(H):
        states[:, h] = s
        actions[:, h] = _categorical(rng, inst.behavior[h, s])
        if h < H - 1:
            s = _categorical(rng, inst.transitions[h, s, actions[:, h]])
    return states, actions


def sample_mdp_dataset(inst: MDPInstance, n: int, seed: int) -> TrajectoryDataset:
    """Two behaviour rollouts from a shared initial state; BTL on total reward."""
    if n < 1:
        raise ValueError("n must be positive")
    M, H = inst.num_parties, inst.horizon
    R = inst.rewards()
    arrays = {k: np.empty((M, n, H), dtype=np.int64) for k in ("s1", "a1", "s0", "a0")}
    y = np.empty((M, n), dtype=np.int64)
    for m in range(M):
        rng = party_rng(seed, m)
        s0 = _categorical(rng, np.broadcast_to(inst.initial_dist, (n, inst.num_states)))
        s1, a1 = _rollout(rng, inst, s0)
        s0_, a0 = _rollout(rng, inst, s0)
        logit = R[m, s1, a1].sum(axis=1) - R[m, s0_, a0].sum(axis=1)
        y[m] = _btl_labels(rng, logit)
        arrays["s1"][m], arrays["a1"][m], arrays["s0"][m], arrays["a0"][m] = s1, a1, s0_, a0
    return TrajectoryDataset(arrays["s1"], arrays["a1"], arrays["s0"], arrays["a0"], y, seed)


# ---------------------------------------------------------------------------
# JSON-lines files
# ---------------------------------------------------------------------------

def write_cb_dataset(data: ComparisonDataset, path) -> None:
    header = {"schema": CB_DATA_SCHEMA, "num_parties": data.num_parties, "n": data.n,
              "seed": data.seed, "rng": RNG_ALGORITHM}
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for rec in data.records():
            fh.write(json.dumps([rec.party, rec.state, rec.action_1, rec.action_0, rec.label]) + "\n")


def _read_jsonl(path, schema):
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("schema") != schema:
            raise ValueError(f"expected schema {schema!r}, got {header.get('schema')!r}")
        rows = [json.loads(line) for line in fh if line.strip()]
    M, n = header["num_parties"], header["n"]
    if len(rows) != M * n:
        raise ValueError(f"header promises {M * n} records, file has {len(rows)}")
    return header, rows


def read_cb_dataset(path, inst: CBInstance | None = None) -> ComparisonDataset:
    header, rows = _read_jsonl(path, CB_DATA_SCHEMA)
    M, n = header["num_parties"], header["n"]
    arr = np.asarray(rows, dtype=np.int64).reshape(M * n, 5)
    if np.any(arr[:, 0] != np.repeat(np.arange(M), n)):
        raise ValueError("records must be ordered by party then index")
    cols = [arr[:, k].reshape(M, n) for k in range(1, 5)]
    data = ComparisonDataset(*cols, seed=header.get("seed"))
    if inst is not None:
        data.validate_against(inst)
    return data


def write_mdp_dataset(data: TrajectoryDataset, path) -> None:
    header = {"schema": MDP_DATA_SCHEMA, "num_parties": data.num_parties, "n": data.n,
              "horizon": data.horizon, "seed": data.seed, "rng": RNG_ALGORITHM}
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for m in range(data.num_parties):
            for i in range(data.n):
                fh.write(json.dumps({
                    "party": m,
                    "s1": data.states_1[m, i].tolist(), "a1": data.actions_1[m, i].tolist(),
                    "s0": data.states_0[m, i].tolist(), "a0": data.actions_0[m, i].tolist(),
                    "y": int(data.label[m, i]),
                }) + "\n")


def read_mdp_dataset(path, inst: MDPInstance | None = None) -> TrajectoryDataset:
    header, rows = _read_jsonl(path, MDP_DATA_SCHEMA)
    M, n, H = header["num_parties"], header["n"], header["horizon"]
    if inst is not None and (inst.horizon != H or inst.num_parties != M):
        raise ValueError("dataset horizon / parties do not match the instance")
    get = lambda key: np.asarray([r[key] for r in rows], dtype=np.int64).reshape(M, n, H)
    y = np.asarray([r["y"] for r in rows], dtype=np.int64).reshape(M, n)
    data = TrajectoryDataset(get("s1"), get("a1"), get("s0"), get("a0"), y, header.get("seed"))
    if inst is not None:
        for arr, hi in ((data.states_1, inst.num_states), (data.states_0, inst.num_states),
                        (data.actions_1, inst.num_actions), (data.actions_0, inst.num_actions)):
            if arr.size and (arr.min() < 0 or arr.max() >= hi):
                raise ValueError("trajectory ids out of range for instance")
    return data
