"""End-to-end acceptance checks, one test per criterion.

Each test carries a ``criterion`` marker; the terminal summary prints one
PASS/FAIL line per criterion.
"""

import json
import time
from fractions import Fraction

import numpy as np
import pytest

from matchlab import bundled
from matchlab.cli import main, read_config
from matchlab.learning import (
    LearningProblem,
    is_ordinally_informed,
    learning_statistics,
    myopic_dosv_policy,
    optimal_strategy,
    rol_value,
    strategy_distribution,
    update_beliefs,
)
from matchlab.market import TAG_MC, MechanismKind, OfferArrival, RngStream, UniformQuality
from matchlab.matching import gs_program_proposing, is_stable
from matchlab.choice import (
    BASE_COVARIATES,
    LogitParams,
    clogit_loglik_grad,
    fit_mle,
    marginal_effect_early_offer,
    rologit_loglik_grad,
    simulate_choice_data,
)
from matchlab.simulation import SimConfig, compare, generate_market, learning_sequence, run_samples
from matchlab.two_univ import (
    CASES,
    K_LOWER_A2,
    K_MIDPOINT,
    K_UPPER_A2,
    SYMBOLIC_LEARNING,
    TABLE1,
    TABLE1_FLAGGED,
    ArrivalCase,
    assumption2_params,
    counterexample_effects,
    early_offer_effects,
    early_offer_effects_closed_form,
    first_offer_effect_closed_form,
    first_offer_effects,
    hybrid_minus_dosv_closed_form,
    k_grid,
    mc_oracle,
    reproduce_table1,
    statistic,
    welfare_comparisons,
)
from oracles import all_offer_arrivals, all_policy_values, enumerate_stable_matchings, fixed_order_values, program_optimal
from test_choice import PROGRAMS, TRUTH, fd_check, oracle_marginal_effects, small_data
from test_learning import dp_instances, ordinal_problems, problem
from test_matching import oracle_market

DA, DOSV, HYBRID = MechanismKind.DA, MechanismKind.DOSV, MechanismKind.HYBRID
C = ArrivalCase
CLOSED = 1e-12


def criterion(name):
    return pytest.mark.criterion(name)


def grid():
    # 101 interior points of the admissible cost interval
    params = assumption2_params()
    ks = k_grid(params)
    assert len(ks) == 101 and all(K_LOWER_A2 < Fraction(k) < K_UPPER_A2 for k in ks)
    return ks


# --- two-university model ----------------------------------------------------------------

@criterion("two-university table: 75 cells, flagged cells by Monte Carlo")
def test_table1_reproduction():
    start = time.perf_counter()
    cells = reproduce_table1()
    closed_time = time.perf_counter() - start
    assert len(cells) == 75 and closed_time < 10
    flagged = set(TABLE1_FLAGGED) | set(SYMBOLIC_LEARNING)
    for cell in cells:
        key = (cell.mechanism, cell.statistic, cell.case)
        if key in TABLE1_FLAGGED:
            continue
        assert cell.abs_err <= 0.05, key
    # flagged cells: the derived value must agree with a 10^7-draw simulation within 3 sigma
    params = assumption2_params(K_MIDPOINT)
    stream = RngStream(20240611, (TAG_MC,))
    for n, (mech, stat, case) in enumerate(sorted(flagged, key=lambda t: (t[0], t[1], CASES.index(t[2])))):
        kind = MechanismKind(mech)
        est = mc_oracle(kind, case, params, 10**7, stream.child(n), threads=4)
        i = 0 if stat.endswith("1") else 1
        value, se = (est.learn[i], est.learn_se[i]) if stat.startswith("learn") else (est.top[i], est.top_se[i])
        derived = statistic(kind, case, stat, params)
        assert abs(value - derived) <= 3 * se, (mech, stat, case, value, derived, se)
        print(f"{mech} {stat} {case.label}: derived {100 * derived:.3f}, MC {100 * value:.3f} +- {100 * se:.3f}, "
              f"printed {TABLE1[(mech, stat)][CASES.index(case)]}")
    assert time.perf_counter() - start < 60


@criterion("early-offer effects positive, closed forms on the cost grid")
def test_lemma2():
    for k in grid():
        values = early_offer_effects(assumption2_params(k))
        assert len(values) == 6 and all(v > 0 for v in values)
        closed = early_offer_effects_closed_form(float(k))
        assert max(abs(a - b) for a, b in zip(values, closed)) <= CLOSED


@criterion("first-offer effects equal 2k - 1/2048 on the cost grid")
def test_lemma3():
    for k in grid():
        values = first_offer_effects(assumption2_params(k))
        assert len(values) == 2 and all(v > 0 for v in values)
        assert first_offer_effect_closed_form(float(k)) == pytest.approx(2 * float(k) - 1 / 2048, abs=1e-15)
        assert all(abs(v - (2 * float(k) - 1 / 2048)) <= CLOSED for v in values)


@criterion("welfare orderings by arrival case on the cost grid")
def test_lemma4_welfare():
    for k in grid():
        comps = welfare_comparisons(assumption2_params(k))
        assert set(comps) == set(CASES)
        for case, cmp in comps.items():
            assert all(cmp.sign_checks(CLOSED).values()), (k, case)
        gap = comps[C.TWO_ONE].hybrid_minus_dosv
        assert abs(gap - (float(k) / 16 - 1 / 196608)) <= CLOSED
        assert abs(gap - hybrid_minus_dosv_closed_form(float(k))) <= CLOSED
        none = comps[C.NONE]
        assert max(abs(none.hybrid_minus_da), abs(none.hybrid_minus_dosv), abs(none.dosv_minus_da)) <= CLOSED


@criterion("counterexample with negative early-offer effects")
def test_counterexample():
    mu1 = 0.75
    res = counterexample_effects(mu1=mu1, delta=0.005, p1_0=0.3, p2_0=0.8, k=0.015)
    assert res.early_offer == (mu1 - 1, mu1 - 1, 0.0, 0.0)
    assert res.first_offer == (0.0, 0.0)
    # all effects are <= 0 and one is < 0, so every positive weighting is negative
    assert all(e <= 0 for e in res.early_offer) and any(e < 0 for e in res.early_offer)
    w = np.random.default_rng(0).uniform(1e-6, 10, size=(1000, 4))
    assert np.all(w @ np.array(res.early_offer) < 0)


# --- single-agent learning ---------------------------------------------------------------------

@criterion("ordinal information: no learning, arrival-invariant top ranks")
def test_ordinal_information():
    probs = ordinal_problems(50)
    assert len(probs) == 50
    for prob in probs:
        assert is_ordinally_informed(prob)
        strat, value = optimal_strategy(prob)
        assert list(strat.reachable_states()) == [prob.root()]
        _, top_da = learning_statistics(strategy_distribution(strat), prob)
        for entries in all_offer_arrivals(prob.J):
            O = OfferArrival(entries)
            dist = myopic_dosv_policy(prob, O).outcome_distribution()
            learn, top = learning_statistics(dist, prob)
            assert learn == [0.0] * prob.J
            assert top == top_da
            pJ = prob.with_beliefs(update_beliefs(prob.beliefs, O, prob.J))
            assert rol_value(prob.root(), pJ)[1] == rol_value(prob.root(), prob)[1]


@criterion("learning DP vs exhaustive policy enumeration")
def test_learning_dp():
    instances = dp_instances(30)
    assert len(instances) == 30 and all(len(d) <= 3 for d, _, _ in instances)
    for dists, cost, beliefs in instances:
        _, value = optimal_strategy(problem(dists, cost, beliefs))
        assert abs(value - max(all_policy_values(dists, cost, beliefs))) <= CLOSED
        assert all(value >= v - CLOSED for _, v in fixed_order_values(dists, cost, beliefs))


@criterion("myopic DoSV policy on a 401-point discretization")
def test_myopic_convergence():
    P = assumption2_params()
    d = (UniformQuality(float(P.mu1), 0.5).discretize(401), UniformQuality(float(P.mu2), 0.5).discretize(401))
    prob = LearningProblem(d, float(P.k), P.p0())
    orders = {C.NONE: [], C.ONE: [0], C.TWO: [1], C.ONE_TWO: [0, 1], C.TWO_ONE: [1, 0]}
    for case in CASES:
        pol = myopic_dosv_policy(prob, OfferArrival.from_order(2, orders[case]))
        learn, _ = learning_statistics(pol.outcome_distribution(), prob)
        i = CASES.index(case)
        printed = (TABLE1[("dosv", "learn_x1")][i] / 100, TABLE1[("dosv", "learn_x2")][i] / 100)
        assert max(abs(a - b) for a, b in zip(learn, printed)) <= 0.01, (case, learn, printed)


# --- matching ------------------------------------------------------------------------------------

@criterion("GS vs brute-force program-optimal stable matching")
def test_gs_correctness():
    start = time.perf_counter()
    for s in range(500):
        m, rols = oracle_market(s)
        assert len(m.students) <= 8 and len(m.programs) <= 5
        mu = gs_program_proposing(m, rols)
        ok, pairs = is_stable(m, rols, mu)
        assert ok and not pairs
        assert mu.assignment == program_optimal(m, rols, enumerate_stable_matchings(m, rols))
    assert time.perf_counter() - start < 30


# --- choice models --------------------------------------------------------------------------------

@criterion("choice models: gradients, MLE recovery, marginal effects")
def test_choice_models():
    for mode, fn in (("acceptance", clogit_loglik_grad), ("ranked", rologit_loglik_grad)):
        off = TRUTH.with_vector(TRUTH.vector * 0.7 + 0.01)
        assert fd_check(fn, off, small_data(mode)) <= 1e-6
        data = simulate_choice_data(5000, 4, TRUTH, RngStream(20240611, (5 if mode == "acceptance" else 6,)), mode=mode)
        fitted, cov, report = fit_mle(data, mode, LogitParams.zeros(BASE_COVARIATES, PROGRAMS))
        assert report.converged
        z = (fitted.vector - TRUTH.vector) / np.sqrt(np.diag(cov))
        assert np.max(np.abs(z)) <= 3, (mode, z)
    data = small_data(n=80, seed=3)
    me = marginal_effect_early_offer(TRUTH, data)
    oracle = oracle_marginal_effects(TRUTH, data)
    assert max(abs(a - b) for a, b in zip((me.baseline, me.early_offer, me.first_early_offer), oracle)) <= CLOSED


# --- simulation harness -------------------------------------------------------------------------------

SUITE_SEED0 = {
    "theta": {"da": 0.62598, "dosv": 0.64472, "hybrid": 0.65622, "full_info": 1.0},
    "pi": {
        ("full_info", "da"): (0.862, 0.084, 0.054),
        ("dosv", "da"): (0.604, 0.282, 0.114),
        ("hybrid", "da"): (0.616, 0.264, 0.12),
        ("hybrid", "dosv"): (0.43, 0.326, 0.244),
    },
}


@criterion("simulation harness: worked examples, invariants, 10-seed suite")
def test_simulation_suite():
    da = ("k1", "k2", "k3", "k4")
    assert learning_sequence(DOSV, da, ("k4", "k2", "k1")) == ("k4", "k1", "k2", "k3")
    assert learning_sequence(DOSV, da, ("k2", "k1", "k4")) == ("k2", "k1", "k3", "k4")
    assert learning_sequence(HYBRID, da, ("k4", "k2", "k1")) == ("k1", "k2", "k4", "k3")

    base = read_config(bundled("suite.cfg"))
    start = time.perf_counter()
    for seed in range(10):
        cfg = SimConfig.from_mapping({**base, "seed": str(seed)})
        assert (cfg.n_students, cfg.n_programs, cfg.n_samples) == (500, 20, 100)
        # check=True raises on any budget, priority, first-offer or stability violation
        stats = compare(run_samples(generate_market(cfg), cfg.seed, cfg.n_samples, check=True))
        assert all(abs(sum(t) - 1) <= 1e-12 for t in stats.pi.values())
        if seed == 0:
            assert stats.theta == SUITE_SEED0["theta"] and stats.pi == SUITE_SEED0["pi"]
    assert time.perf_counter() - start < 120

    # without early offers all three mechanisms produce the same matchings and utilities
    for seed in range(10):
        quiet = SimConfig.from_mapping({**base, "seed": str(seed), "early_offer_share": "0"})
        for r in run_samples(generate_market(quiet), quiet.seed, quiet.n_samples, check=True):
            ref = r.by_mechanism["da"]
            for name in ("dosv", "hybrid"):
                assert r.by_mechanism[name].matching == ref.matching
                assert np.array_equal(r.by_mechanism[name].utility, ref.utility)


# --- CLI determinism ------------------------------------------------------------------------------------

COMMANDS = {
    "verify": ["verify", "--mc-draws", "20000", "--seed", "5"],
    "simulate": ["simulate", "--config", "builtin:smoke.cfg", "--seed", "5", "--save-matchings"],
    "gen-market": ["gen-market", "--config", "builtin:smoke.cfg", "--seed", "5"],
    "fit": ["fit", "builtin:synthetic_ranked.csv", "--mode", "ranked"],
}


@criterion("CLI byte-for-byte determinism across thread counts")
@pytest.mark.parametrize("command", list(COMMANDS))
def test_cli_determinism(tmp_path, capsys, command):
    snapshots = []
    for run, threads in enumerate((1, 4, 1)):
        out = tmp_path / f"run{run}"
        assert main(COMMANDS[command] + ["--threads", str(threads), "--out", str(out)]) == 0
        capsys.readouterr()
        files = {p.name: p.read_bytes() for p in sorted(out.iterdir()) if p.name != "manifest.json"}
        manifest = json.loads((out / "manifest.json").read_text())
        manifest.pop("duration_s")
        assert {o["file"] for o in manifest["outputs"]} == set(files)
        snapshots.append((files, manifest))
    assert snapshots[0] == snapshots[1] == snapshots[2]
