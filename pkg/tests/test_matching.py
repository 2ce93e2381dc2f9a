import time

import numpy as np
import pytest

from matchlab.market import MarketInstance, ProgramProfile, RngStream, StudentProfile
from matchlab.matching import (
    Matching,
    clearing_rsd,
    compute_expost_feasible,
    gs_program_proposing,
    gs_with_held_offers,
    is_stable,
    write_blocking_csv,
    write_matching_csv,
)
from oracles import enumerate_stable_matchings, program_optimal, random_market


def _two_by_two():
    students = [StudentProfile(0, 0.9, (1, 2)), StudentProfile(1, 0.5, (1, 2))]
    programs = [ProgramProfile(1, 1), ProgramProfile(2, 1)]
    m = MarketInstance(students, programs, {1: (0, 1), 2: (0, 1)})
    rols = {0: (2, 1), 1: (1, 2)}
    return m, rols


def oracle_market(s):
    return random_market(np.random.default_rng([7, s]), min_students=2, unranked_share=0.05, conflict=(s % 2 == 0))


@pytest.mark.parametrize("block", range(5))
def test_gs_equals_brute_force_program_optimal(block):
    for s in range(block * 100, block * 100 + 100):
        m, rols = oracle_market(s)
        mu = gs_program_proposing(m, rols)
        stable = enumerate_stable_matchings(m, rols)
        assert mu.assignment in stable
        assert mu.assignment == program_optimal(m, rols, stable)
        ok, pairs = is_stable(m, rols, mu)
        assert ok and not pairs


def test_oracle_sees_multiple_stable_matchings():
    # the conflict markets must actually exercise the program-optimal selection
    multi = sum(len(enumerate_stable_matchings(*oracle_market(s))) > 1 for s in range(0, 100, 2))
    assert multi >= 5


def test_gs_trace_rounds():
    m, rols = _two_by_two()
    trace = []
    mu = gs_program_proposing(m, rols, trace)
    # both programs offer to student 0 first; she keeps 2 and rejects 1
    assert trace[0]["offers"] == {0: (1, 2)}
    assert trace[0]["rejected"] == ((0, 1),)
    assert mu.assignment == {0: 2, 1: 1}


def test_gs_zero_capacity_and_unranked():
    students = [StudentProfile(0, 0.5, (1, 2))]
    m = MarketInstance(students, [ProgramProfile(1, 0), ProgramProfile(2, 1)], {1: (0,), 2: ()})
    assert gs_program_proposing(m, {0: (1, 2)}).assignment == {}


def test_gs_rejects_invalid_rols():
    m, _ = _two_by_two()
    with pytest.raises(ValueError, match="not applied"):
        gs_program_proposing(m, {0: (3,), 1: ()})
    with pytest.raises(ValueError, match="repeats"):
        gs_program_proposing(m, {0: (1, 1), 1: ()})


def test_held_offers_empty_equals_gs():
    for s in range(100):
        m, rols = oracle_market(s)
        assert gs_with_held_offers(m, rols, {}, {}) == gs_program_proposing(m, rols)


def test_held_top_choice_is_kept():
    m, rols = _two_by_two()
    mu = gs_with_held_offers(m, rols, {1: 1}, {1: {1}})
    assert mu.get(1) == 1


def test_held_offer_reassignment_hand_trace():
    m, rols = _two_by_two()
    trace = []
    # program 1 made its early offer to student 0, who holds it
    mu = gs_with_held_offers(m, rols, {0: 1}, {1: {0}}, trace)
    # round 1: only program 2 has a seat; student 0 trades up and frees program 1
    assert trace[0]["offers"] == {0: (2,)}
    assert trace[0]["rejected"] == ((0, 1),)
    # round 2: program 1 re-offers to its next applicant
    assert trace[1]["offers"] == {1: (1,)}
    assert mu.assignment == {0: 2, 1: 1}


@pytest.mark.parametrize(
    "held, exhausted, fragment",
    [
        ({0: 1}, {}, "without having been offered"),
        ({0: 3}, {}, "unknown program"),
        ({1: 2}, {2: {1}}, "absent from her ROL"),
        ({0: 1, 1: 1}, {1: {0, 1}}, "capacity"),
    ],
)
def test_inconsistent_held_offers_raise(held, exhausted, fragment):
    m, rols = _two_by_two()
    rols = {0: (2, 1), 1: (1,)}
    with pytest.raises(ValueError, match=fragment):
        gs_with_held_offers(m, rols, held, exhausted)


def test_held_offer_from_program_that_does_not_rank():
    students = [StudentProfile(0, 0.5, (1,))]
    m = MarketInstance(students, [ProgramProfile(1, 1)], {1: ()})
    with pytest.raises(ValueError, match="does not rank"):
        gs_with_held_offers(m, {0: (1,)}, {0: 1}, {1: {0}})


def test_is_stable_counterexamples():
    m, rols = _two_by_two()
    ok, pairs = is_stable(m, rols, Matching({0: 1, 1: 2}))
    # student 0 prefers 2, which ranks her above its admit
    assert not ok and [(p.student_id, p.program_id) for p in pairs] == [(0, 2)]
    ok, pairs = is_stable(m, rols, Matching({0: 2}))
    assert not ok and pairs[0].reason == "program has a free seat"
    ok, pairs = is_stable(m, {0: (2,), 1: (2,)}, Matching({1: 1}))
    assert any("not mutually acceptable" in p.reason for p in pairs)


def test_expost_feasibility():
    students = [StudentProfile(i, 0.5, (1, 2)) for i in range(3)]
    m = MarketInstance(students, [ProgramProfile(1, 1), ProgramProfile(2, 5)], {1: (2, 0, 1), 2: (0, 1)})
    feas = compute_expost_feasible(m, Matching({0: 1, 1: 2}))
    # program 1 is full with rank-1 admit: students ranked 0 and 1 qualify
    assert feas[0] == {1, 2}
    assert feas[1] == {2}
    # program 2 is undersubscribed but never ranked student 2
    assert feas[2] == {1}


def test_rsd_is_uniform():
    students = [StudentProfile(0, 0.5, (1,)), StudentProfile(1, 0.5, (1,))]
    m = MarketInstance(students, [ProgramProfile(1, 1)], {1: (0, 1)})
    wins = sum(clearing_rsd(m, [0, 1], {1: 1}, RngStream(seed)).get(0) == 1 for seed in range(10_000))
    assert abs(wins / 10_000 - 0.5) < 0.02


def test_rsd_respects_seats_and_rols():
    students = [StudentProfile(i, 0.5, (1, 2)) for i in range(4)]
    m = MarketInstance(students, [ProgramProfile(1, 1), ProgramProfile(2, 2)], {})
    mu = clearing_rsd(m, [0, 1, 2, 3], {1: 1, 2: 2}, RngStream(5), rols={i: (2, 1) for i in range(4)})
    counts = {k: len(v) for k, v in mu.admitted().items()}
    assert counts == {1: 1, 2: 2}


def test_gs_runtime_budget():
    t0 = time.perf_counter()
    for s in range(500):
        m, rols = oracle_market(s)
        gs_program_proposing(m, rols)
    assert time.perf_counter() - t0 < 30


def test_csv_writers(tmp_path):
    write_matching_csv(Matching({2: 1, 0: 3}), tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_text() == "student_id,program_id\n0,3\n2,1\n"
    m, rols = _two_by_two()
    _, pairs = is_stable(m, rols, Matching({0: 1, 1: 2}))
    write_blocking_csv(pairs, tmp_path / "b.csv")
    assert (tmp_path / "b.csv").read_text().splitlines()[1].startswith("0,2,")
