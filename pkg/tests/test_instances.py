import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from multiparty_rlhf.instances import (
    AssumptionWarning, CBInstance, MDPInstance, build_intro_example, build_lower_bound_instance,
    build_prop_d1_instance, build_reference_instance, diversity_stats, load_instance, lower_bound_counts,
    random_instance, random_mdp_instance, save_instance, uniform_pairs,
)


def test_intro_rewards_half():
    R = build_intro_example(0.5).rewards()
    assert R[0, 0, 2] == pytest.approx(0.5) and R[1, 0, 2] == pytest.approx(0.5)
    assert R[0, 0, 0] == pytest.approx(1.0) and R[1, 0, 1] == pytest.approx(1.0)


def test_intro_small_epsilon_limit():
    R = build_intro_example(1e-12).rewards()
    assert R[0, 0, 2] == pytest.approx(R[0, 0, 0], abs=1e-9)


def test_intro_utilitarian_sums():
    R = build_intro_example(0.1).rewards()
    assert R[:, 0, 2].sum() == pytest.approx(1.8, abs=1e-12)
    assert R[:, 0, 0].sum() == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("eps", [0.0, 1.0, -0.2, 1.5])
def test_intro_rejects_bad_epsilon(eps):
    with pytest.raises(ValueError):
        build_intro_example(eps)


def test_intro_factor_orthonormal():
    inst = build_intro_example(0.1)
    U = inst.shared_factor
    assert np.allclose(U.T @ U, np.eye(2), atol=1e-10)
    assert np.allclose(inst.party_coeffs @ U.T, [[1, 0, 0.9], [0, 1, 0.9]], atol=1e-12)


def test_lower_bound_gap_and_norms():
    inst = build_lower_bound_instance(9, 2.0, 3600, [1, 1, 1])
    assert inst.meta["delta_gap"] == pytest.approx(2 * math.sqrt(3 / 3600), rel=1e-12)
    assert inst.meta["delta_gap"] == pytest.approx(0.0577, abs=1e-4)
    for tau in itertools.product([-1, 1], repeat=3):
        t = build_lower_bound_instance(9, 2.0, 3600, tau)
        assert np.linalg.norm(t.party_params) <= 1.0


def test_lower_bound_features_fixed_across_tau():
    a = build_lower_bound_instance(9, 2.0, 3600, [1, -1, 1])
    b = build_lower_bound_instance(9, 2.0, 3600, [-1, 1, -1])
    assert np.array_equal(a.features, b.features)
    assert not np.array_equal(a.party_params, b.party_params)


def test_lower_bound_feature_shapes():
    inst = build_lower_bound_instance(9, 2.0, 3600, [1, 1, 1])
    F = inst.features
    e = np.eye(9)
    for s in range(3):
        assert np.array_equal(F[s, 0], e[3 * s] - e[3 * s + 1])
        assert np.array_equal(F[s, 1], e[3 * s])
        assert np.array_equal(F[s, 2], np.zeros(9))
        assert np.array_equal(F[s, 3], e[3 * s + 1])
    # the first action's norm is sqrt 2, which sets the feature bound
    assert np.max(np.linalg.norm(F, axis=-1)) == pytest.approx(math.sqrt(2))


@pytest.mark.parametrize("rank,C", [(6, 2.0), (10, 2.0), (9, 1.5)])
def test_lower_bound_rejects(rank, C):
    with pytest.raises(ValueError):
        build_lower_bound_instance(rank, C, 3600, np.ones(rank // 3))


def test_lower_bound_warns_small_n():
    with pytest.warns(AssumptionWarning):
        build_lower_bound_instance(9, 2.0, 10, [1, 1, 1])


def test_lower_bound_counts_budget():
    counts = lower_bound_counts(3, 2.0, 3601)
    assert counts.sum() == 3601
    assert counts[0, 1, 2] == math.floor(1201 * 0.5)


def test_prop_d1_party_one_optimum():
    R = build_prop_d1_instance().rewards()
    assert list(np.argmax(R[0], axis=1)) == [0, 1]


def test_prop_d1_worst_party_floor():
    inst = build_prop_d1_instance()
    R = inst.rewards()
    rho = inst.initial_dist
    J = lambda m, pol: sum(rho[s] * R[m, s, pol[s]] for s in range(2))
    best = [max(J(m, p) for p in itertools.product(range(3), repeat=2)) for m in range(2)]
    pols = list(itertools.product(range(3), repeat=2))
    assert len(pols) == 9
    for pol in pols:
        assert max(best[m] - J(m, pol) for m in range(2)) >= 0.5 - 1e-12


@pytest.mark.filterwarnings("ignore::multiparty_rlhf.instances.AssumptionWarning")
def test_diversity_intro_positive():
    st_ = diversity_stats(build_intro_example(0.1))
    assert st_.nu > 0 and st_.kappa >= 1


def test_diversity_identical_parties_warns():
    base = random_instance(2, 3, 4, 2, 1, seed=3)
    inst = base.replace_params(np.repeat(base.party_coeffs, 3, axis=0))
    with pytest.warns(AssumptionWarning, match="diversity"):
        st_ = diversity_stats(inst)
    assert st_.nu == pytest.approx(0.0, abs=1e-12)


def test_diversity_rank_one_design_warns():
    F = np.zeros((1, 2, 2))
    F[0, 1] = [1.0, 0.0]
    g = np.zeros((1, 2, 2))
    g[0, 1, 0] = 1.0
    inst = CBInstance(F, np.eye(2)[:, :1], [[0.5]], 1.0, 1.0, np.ones(1), g)
    with pytest.warns(AssumptionWarning, match="singular"):
        st_ = diversity_stats(inst)
    assert np.allclose(st_.sigma_star, [[1, 0], [0, 0]])
    assert st_.eig_min == pytest.approx(0.0)


def test_diversity_monte_carlo_close_to_exact():
    inst = random_instance(3, 4, 5, 2, 3, seed=1)
    exact = diversity_stats(inst).sigma_star
    mc = diversity_stats(inst, mc_samples=200000, seed=0).sigma_star
    # brute-force covariance of the population pairs as a third check
    w = inst.initial_dist[:, None, None] * inst.pair_gen
    diffs, weights = [], []
    for s, a, b in itertools.product(range(3), range(4), range(4)):
        diffs.append(inst.features[s, a] - inst.features[s, b])
        weights.append(w[s, a, b])
    brute = sum(wt * np.outer(x, x) for wt, x in zip(weights, diffs))
    assert np.allclose(exact, brute, atol=1e-14)
    assert np.max(np.abs(mc - exact)) < 0.01


def test_invariant_violations_rejected():
    inst = random_instance(2, 3, 4, 2, 2, seed=0)
    with pytest.raises(ValueError):
        inst.replace_params(inst.party_coeffs * 100)
    with pytest.raises(ValueError):
        inst.replace_params(inst.party_coeffs, initial_dist=np.array([0.7, 0.7]))
    with pytest.raises(ValueError):
        inst.replace_params(inst.party_coeffs, shared_factor=2 * inst.shared_factor)


def test_instances_immutable():
    inst = random_instance(2, 3, 4, 2, 2, seed=0)
    with pytest.raises(ValueError):
        inst.features[0, 0, 0] = 1.0


def test_reference_instance_shape():
    inst = build_reference_instance()
    assert (inst.num_parties, inst.num_states, inst.num_actions, inst.feature_dim, inst.rank) == (4, 3, 4, 8, 2)


def test_mdp_transitions_checked():
    cb = random_instance(2, 2, 3, 1, 1, seed=0)
    bad = np.full((1, 2, 2, 2), 0.6)
    with pytest.raises(ValueError):
        MDPInstance.from_cb(cb, horizon=2, transitions=bad)
    with pytest.raises(ValueError):
        MDPInstance.from_cb(cb, horizon=0)


@settings(max_examples=25, deadline=None)
@given(S=st.integers(1, 4), A=st.integers(2, 4), d=st.integers(1, 5), M=st.integers(1, 4),
       seed=st.integers(0, 10**6), data=st.data())
def test_factor_reproduces_params_and_json_roundtrip(tmp_path_factory, S, A, d, M, seed, data):
    r = data.draw(st.integers(1, d))
    inst = random_instance(S, A, d, r, M, seed)
    assert np.allclose(inst.party_coeffs @ inst.shared_factor.T, inst.party_params, atol=1e-12)
    assert np.all(np.linalg.norm(inst.party_params, axis=1) <= inst.param_bound)
    assert np.all(np.linalg.norm(inst.features, axis=-1) <= inst.feature_bound + 1e-12)
    back = CBInstance.from_json(json.loads(json.dumps(inst.to_json())))
    assert np.array_equal(back.features, inst.features)
    assert np.array_equal(back.party_params, inst.party_params)
    assert np.array_equal(back.pair_gen, inst.pair_gen)


def test_file_roundtrip_mdp(tmp_path):
    inst = random_mdp_instance(3, 2, 4, 2, 2, 3, seed=5)
    save_instance(inst, tmp_path / "m.json")
    back = load_instance(tmp_path / "m.json")
    assert isinstance(back, MDPInstance)
    assert np.array_equal(back.transitions, inst.transitions)
    assert json.loads((tmp_path / "m.json").read_text())["schema"] == "mdp-instance/v1"


def test_uniform_pairs_rows():
    g = uniform_pairs(2, 4)
    assert np.allclose(g.sum(axis=(1, 2)), 1.0)
    assert np.all(np.diagonal(g, axis1=1, axis2=2) == 0)
