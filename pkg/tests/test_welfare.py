import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from multiparty_rlhf.instances import (
    CBInstance, build_intro_example, build_prop_d1_instance, random_instance, uniform_pairs,
)
from multiparty_rlhf.reward_learning import RewardFit, fit_mle, in_confidence_set
from multiparty_rlhf.sampling import sample_cb_dataset
from multiparty_rlhf.welfare import (
    EnumerationCapError, PolicySolution, SolveOptions, all_policies, audit_pareto, audit_pareto_table,
    audit_pigou_dalton, audit_pigou_dalton_table, concentrability, optimal_policy, pessimistic_value,
    solve_policy, suboptimality, true_value,
)

KINDS = ["nash", "utilitarian", "leximin"]


def test_true_value_intro():
    inst = build_intro_example(0.1)
    assert true_value(inst, [2], "nash") == pytest.approx(0.81, abs=1e-12)
    assert true_value(inst, [0], "nash") == 0.0
    assert true_value(inst, [2], "utilitarian") == pytest.approx(1.8, abs=1e-12)
    assert true_value(inst, [2], "leximin") == pytest.approx(0.9, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), kind=st.sampled_from(KINDS))
def test_true_value_matches_loops(seed, kind):
    inst = random_instance(3, 3, 3, 2, 3, seed)
    R = oracles.reward_table(inst.features, inst.party_params)
    pol = np.random.default_rng(seed).integers(0, 3, size=3)
    assert true_value(inst, pol, kind) == pytest.approx(oracles.welfare_value(R, inst.initial_dist, pol, kind),
                                                        abs=1e-12)


def test_nash_factors_nonnegative():
    inst = random_instance(4, 5, 4, 2, 3, seed=9)
    for pol in all_policies(4, 5)[::37]:
        assert true_value(inst, pol, "nash") >= 0.0


def test_zero_radius_equals_true_value_at_centre():
    inst = random_instance(3, 4, 4, 2, 3, seed=1)
    data = sample_cb_dataset(inst, 200, 0)
    fit = fit_mle(data, inst.features, 2, inst.param_bound).with_gamma(0.0)
    for kind in KINDS:
        for pol in ([0, 1, 2], [3, 3, 0]):
            v, th, _ = pessimistic_value(fit, inst.features, inst.initial_dist, pol, kind)
            assert v == pytest.approx(true_value(inst, pol, kind, params=fit.theta_hat), abs=1e-12)


def test_utilitarian_unit_interval():
    fit = RewardFit(np.eye(1), [[0.0]], np.eye(1)[None], 1.0, 2.0)
    F = np.array([[[1.0]]])
    v, th, diag = pessimistic_value(fit, F, np.ones(1), [0], "utilitarian")
    assert v == pytest.approx(-1.0, abs=1e-12)
    assert diag["certified"]


def test_utilitarian_lmo_matches_nlp_oracle():
    rng = np.random.default_rng(0)
    for trial in range(15):
        d = 3
        A = rng.standard_normal((d, d))
        sig = A @ A.T / d + 0.05 * np.eye(d)
        centre = rng.standard_normal(d) * 0.4
        B = 1.0 if trial % 2 else 3.0  # ball active on odd trials
        gamma = 0.6
        fit = RewardFit(np.eye(d), [centre], sig[None], gamma, B)
        F = rng.standard_normal((2, 2, d)) * 0.5
        w = np.array([0.3, 0.7])
        pol = [0, 1]
        v, th, diag = pessimistic_value(fit, F, w, pol, "utilitarian")
        c = w @ F[np.arange(2), pol]
        expect = oracles.linear_min_over_set(c, centre, sig, gamma, B)
        assert v == pytest.approx(expect, abs=1e-6)
        assert v <= c @ centre + 1e-12
        assert diag["ellipsoid_lower_reference"] <= v + 1e-9
        assert in_confidence_set(th[0], fit, 0, rtol=1e-9)


@pytest.mark.parametrize("seed", range(4))
def test_nash_inner_matches_grid(seed):
    rng = np.random.default_rng(seed)
    F = rng.standard_normal((1, 3, 2))
    F /= np.max(np.linalg.norm(F, axis=-1))
    centres = rng.standard_normal((2, 2))
    centres *= 1.2 / np.linalg.norm(centres, axis=1, keepdims=True)
    sig = np.array([np.eye(2) * s for s in (1.0, 2.0)])
    fit = RewardFit(np.eye(2), centres, sig, 0.15, 1.5)
    pol = [int(np.argmax(F[0] @ centres[0] + F[0] @ centres[1]))]
    v, th, diag = pessimistic_value(fit, F, np.ones(1), pol, "nash")
    expect = oracles.nash_one_state_oracle(F, pol[0], centres, sig, 0.15, 1.5)
    assert v <= expect + 1e-9
    assert abs(v - expect) < 1e-3


def test_intro_truth_nash_selects_c():
    inst = build_intro_example(0.1)
    sol = solve_policy(RewardFit.from_truth(inst), inst.features, inst.initial_dist, "nash",
                       true_params=inst.party_params)
    assert list(sol.policy) == [2]
    assert sol.pessimistic_value == pytest.approx(0.81, abs=1e-12)
    assert sol.suboptimality == pytest.approx(0.0, abs=1e-12)


def test_single_party_utilitarian_greedy():
    inst = random_instance(4, 5, 4, 2, 1, seed=3)
    fit = RewardFit.from_truth(inst)
    sol = solve_policy(fit, inst.features, inst.initial_dist, "utilitarian")
    assert np.array_equal(sol.policy, np.argmax(inst.features @ fit.theta_hat[0], axis=1))


@pytest.mark.parametrize("kind", KINDS)
def test_prop_d1_any_kind_leaves_someone_behind(kind):
    inst = build_prop_d1_instance()
    sol = solve_policy(RewardFit.from_truth(inst), inst.features, inst.initial_dist, kind)
    R = oracles.reward_table(inst.features, inst.party_params)
    J = lambda m, pol: sum(inst.initial_dist[s] * R[m, s, pol[s]] for s in range(2))
    best = [max(J(m, p) for p in itertools.product(range(3), repeat=2)) for m in range(2)]
    assert max(best[m] - J(m, sol.policy) for m in range(2)) >= 0.5 - 1e-12


def test_suboptimality_examples():
    inst = build_intro_example(0.1)
    pi_star, _ = optimal_policy(inst, "nash")
    mk = lambda pol: PolicySolution(np.array(pol), 0.0, np.zeros((2, 3)), "exact", "nash")
    assert suboptimality(inst, mk(pi_star)) == 0.0
    assert suboptimality(inst, mk([0])) == pytest.approx(0.81, abs=1e-12)


def test_enum_cap_error_and_alternating():
    inst = random_instance(6, 4, 3, 2, 2, seed=0)
    fit = RewardFit.from_truth(inst, gamma=0.05)
    with pytest.raises(EnumerationCapError, match="alternating"):
        solve_policy(fit, inst.features, inst.initial_dist, "utilitarian", opts=SolveOptions(enum_cap=100))
    exact = solve_policy(fit, inst.features, inst.initial_dist, "utilitarian")
    alt = solve_policy(fit, inst.features, inst.initial_dist, "utilitarian", mode="alt")
    assert alt.solver_mode == "alternating" and alt.diagnostics["heuristic"]
    assert alt.pessimistic_value <= exact.pessimistic_value + 1e-9


@pytest.mark.parametrize("kind", KINDS)
def test_exact_mode_is_argmax_of_enumeration(kind):
    inst = random_instance(2, 3, 3, 2, 2, seed=4)
    data = sample_cb_dataset(inst, 300, 2)
    fit = fit_mle(data, inst.features, 2, inst.param_bound)
    sol = solve_policy(fit, inst.features, inst.initial_dist, kind)
    vals = [pessimistic_value(fit, inst.features, inst.initial_dist, p, kind)[0] for p in all_policies(2, 3)]
    best = max(vals)
    assert sol.pessimistic_value == pytest.approx(best, abs=1e-7)
    first = next(i for i, v in enumerate(vals) if v >= best - 1e-7)
    assert np.array_equal(sol.policy, all_policies(2, 3)[first])


@pytest.mark.parametrize("kind", KINDS)
def test_pessimism_valid_under_coverage(kind):
    inst = random_instance(2, 3, 3, 2, 2, seed=6)
    data = sample_cb_dataset(inst, 500, 3)
    fit = fit_mle(data, inst.features, 2, inst.param_bound)
    fit = fit.with_gamma(3.0 * fit.gamma)
    assert all(in_confidence_set(inst.party_params[m], fit, m) for m in range(2))
    for pol in all_policies(2, 3):
        v, th, _ = pessimistic_value(fit, inst.features, inst.initial_dist, pol, kind)
        assert v <= true_value(inst, pol, kind) + 1e-6
        assert all(in_confidence_set(th[m], fit, m, rtol=1e-7) for m in range(2))


def test_nash_argmax_invariant_to_party_scaling():
    inst = random_instance(3, 3, 3, 2, 2, seed=8)
    data = sample_cb_dataset(inst, 400, 1)
    fit = fit_mle(data, inst.features, 2, inst.param_bound)
    opts = SolveOptions()
    big = RewardFit(fit.U_hat, fit.alpha_hat, fit.sigma, fit.gamma, 100.0)
    c = 3.0
    alpha2 = fit.alpha_hat.copy()
    alpha2[1] *= c
    sig2 = fit.sigma.copy()
    sig2[1] /= c**2
    scaled = RewardFit(fit.U_hat, alpha2, sig2, fit.gamma, 100.0)
    a = solve_policy(big, inst.features, inst.initial_dist, "nash", opts=opts)
    b = solve_policy(scaled, inst.features, inst.initial_dist, "nash", opts=opts)
    assert np.array_equal(a.policy, b.policy)
    assert b.pessimistic_value == pytest.approx(c * a.pessimistic_value, rel=1e-5, abs=1e-9)


def test_utilitarian_argmax_invariant_to_intercept_shift():
    # last coordinate is a shared intercept; shifting it moves every reward of party 0 equally
    rng = np.random.default_rng(2)
    F = rng.standard_normal((3, 3, 3)) * 0.4
    F[:, :, 2] = 0.5
    U = np.eye(3)
    alpha = np.array([[0.4, -0.2, 0.1], [0.1, 0.3, -0.2]])
    g = uniform_pairs(3, 3)
    inst = CBInstance(F, U, alpha, 3.0, float(np.max(np.linalg.norm(F, axis=-1))), np.full(3, 1 / 3), g)
    shifted = inst.replace_params(alpha + np.array([[0.0, 0.0, 0.8], [0.0, 0.0, 0.0]]))
    a = solve_policy(RewardFit.from_truth(inst), F, inst.initial_dist, "utilitarian")
    b = solve_policy(RewardFit.from_truth(shifted), F, inst.initial_dist, "utilitarian")
    assert np.array_equal(a.policy, b.policy)


def test_reference_policy_zero():
    inst = build_intro_example(0.1)
    fit = RewardFit.from_truth(inst)
    opts = SolveOptions(reference_policy=np.array([2]))
    v, _, _ = pessimistic_value(fit, inst.features, np.ones(1), [2], "nash", opts)
    assert v == 0.0  # rewards measured against C itself


def test_concentrability_examples():
    F = np.zeros((1, 2, 2))
    F[0, 0] = [1.0, 0.0]
    rep = concentrability(F, np.eye(2), "nash", [[0.0, 0.0]], pi_star=[0])
    cands = {tuple(r["policy"]) for r in rep.rows}
    assert rep.c_star == pytest.approx(max(r["contribution"] for r in rep.rows))
    assert cands == {(0,)}  # all three candidate policies pick action 0 here
    assert rep.c_star == pytest.approx(1.0)

    inst = build_intro_example(0.1)
    sig = np.eye(3) * 0.5
    util = concentrability(inst.features, sig, "utilitarian", inst.party_params)
    assert {r["policy_name"] for r in util.rows} == {"pi_star"}
    nash = concentrability(inst.features, sig, "nash", inst.party_params)
    # pi* = C, party-wise minimisers: party 0 -> B, party 1 -> A; each one-hot has norm sqrt 2 here
    expect = max(np.linalg.norm(np.sqrt(2) * np.eye(3)[a]) for a in (2, 1, 0))
    assert nash.c_star == pytest.approx(expect)
    assert {tuple(r["policy"]) for r in nash.rows} == {(2,), (1,), (0,)}


def _table_instance(R):
    """Instance whose features are the reward table rows (parties along coordinates)."""
    M, S, A = R.shape
    F = np.transpose(R, (1, 2, 0))
    return CBInstance(F, np.eye(M), np.eye(M), float(np.sqrt(M)), float(np.max(np.linalg.norm(F, axis=-1))),
                      np.full(S, 1 / S), uniform_pairs(S, A))


def test_pareto_nash_optimum_passes_and_matches_oracle():
    for seed in range(10):
        inst = random_instance(3, 4, 3, 2, 3, seed)
        pi_star, _ = optimal_policy(inst, "nash")
        G = inst.rewards() - inst.rewards().min(axis=2, keepdims=True)
        for v in audit_pareto(inst, pi_star, 0.0):
            assert v.passed
            assert not oracles.pareto_dominated(G, v.state, pi_star[v.state])
        # and an arbitrary policy agrees with the dominance oracle
        pol = np.random.default_rng(seed).integers(0, 4, size=3)
        for v in audit_pareto(inst, pol, 0.0):
            assert v.passed == (not oracles.pareto_dominated(G, v.state, pol[v.state]))


def test_pareto_intro_a_passes_and_single_party_greedy():
    inst = build_intro_example(0.1)
    assert all(v.passed for v in audit_pareto(inst, [0], 0.0))
    one = random_instance(3, 4, 3, 2, 1, seed=2)
    greedy = np.argmax(one.rewards()[0], axis=1)
    for tau in (0.0, 0.5):
        assert all(v.passed for v in audit_pareto(one, greedy, tau))


def test_pareto_table_tightest_tau():
    G = np.array([[[0.2, 0.3, 0.0]], [[0.5, 0.5, 0.0]]])  # action 1 helps party 0 by a factor 1.5
    v = audit_pareto_table(G, [0], 0.0)[0]
    assert not v.passed and v.witness == 1 and v.tightest_tau == pytest.approx(0.5)
    assert audit_pareto_table(G, [0], 0.5)[0].passed


def test_pigou_hand_built():
    R = np.array([[[0.9, 0.5, 0.0]], [[0.1, 0.5, 0.0]]])
    v = audit_pigou_dalton_table(R, [0], 0.0)[0]
    assert not v.passed and v.witness == 1
    assert v.tightest_tau == pytest.approx(0.25 - 0.09)
    inst = _table_instance(R)
    assert not audit_pigou_dalton(inst, [0], 0.0)[0].passed
    assert audit_pigou_dalton(inst, [1], 0.0)[0].passed


def test_pigou_symmetric_parties_pass():
    base = random_instance(2, 4, 3, 2, 1, seed=1)
    inst = base.replace_params(np.repeat(base.party_coeffs, 2, axis=0))
    for pol in all_policies(2, 4):
        assert all(v.passed for v in audit_pigou_dalton(inst, pol, 0.0))


def test_pigou_nash_optimum_passes():
    for seed in range(10):
        inst = random_instance(3, 4, 3, 2, 3, seed)
        pi_star, _ = optimal_policy(inst, "nash")
        assert all(v.passed for v in audit_pigou_dalton(inst, pi_star, 0.0))


def test_solution_json_roundtrip(tmp_path):
    inst = build_intro_example(0.1)
    sol = solve_policy(RewardFit.from_truth(inst, gamma=0.05), inst.features, inst.initial_dist, "nash",
                       true_params=inst.party_params)
    sol.save(tmp_path / "s.json")
    back = PolicySolution.from_json(json.loads((tmp_path / "s.json").read_text()))
    assert np.array_equal(back.policy, sol.policy) and back.pessimistic_value == sol.pessimistic_value
