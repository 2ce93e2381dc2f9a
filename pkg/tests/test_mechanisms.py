import numpy as np
import pytest

from matchlab.market import MarketInstance, MechanismKind, ProgramProfile, RngStream, StudentProfile
from matchlab.matching import gs_program_proposing, is_stable
from matchlab.mechanisms import (
    EventLog,
    OfferSchedule,
    derive_offer_arrival,
    early_offer_recipients,
    run_mechanism,
    write_manifest_lines,
)
from oracles import random_market

KINDS = list(MechanismKind)


class ScriptedAgent:
    """Learns its whole ROL on the first call, then submits it unchanged."""

    def __init__(self, rol):
        self.rol = tuple(rol)
        self.calls = []
        self.done = False

    def learn(self, period, beliefs):
        self.calls.append((period, dict(beliefs)))
        if self.done:
            return []
        self.done = True
        return list(self.rol)

    def final_rol(self, beliefs):
        return self.rol


def factory_for(rols, registry=None):
    def make(sid, p0, stream):
        agent = ScriptedAgent(rols[sid])
        if registry is not None:
            registry[sid] = agent
        return agent

    return make


def p0_for(m, value=0.5):
    return {s.id: {k: value for k in s.applications} for s in m.students}


def test_empty_schedule_all_mechanisms_equal_gs():
    for s in range(100):
        m, rols = random_market(np.random.default_rng([21, s]))
        expected = gs_program_proposing(m, rols)
        for kind in KINDS:
            res = run_mechanism(kind, m, OfferSchedule(), factory_for(rols), p0_for(m), RngStream(s))
            assert res.matching == expected, (s, kind)


def _one_offer_market(g):
    """Every student gets exactly one early offer: programs rank their own group first."""
    K = int(g.integers(1, 5))
    caps = [int(g.integers(1, 3)) for _ in range(K)]
    students, owner = [], {}
    sid = 0
    for k, q in enumerate(caps, start=1):
        for _ in range(q):
            extra = [j for j in range(1, K + 1) if j != k and g.random() < 0.6]
            apps = tuple(int(x) for x in g.permutation([k] + extra))
            students.append(StudentProfile(sid, float(g.random()), apps))
            owner[sid] = k
            sid += 1
    rankings = {}
    for k in range(1, K + 1):
        mine = [s.id for s in students if owner[s.id] == k]
        others = [s.id for s in students if owner[s.id] != k and k in s.applications]
        rankings[k] = tuple(mine) + tuple(int(x) for x in g.permutation(others)) if others else tuple(mine)
    m = MarketInstance(students, [ProgramProfile(k, q) for k, q in enumerate(caps, start=1)], rankings)
    rols = {s.id: tuple(int(x) for x in g.permutation(s.applications)) for s in students}
    return m, rols


def test_single_offer_common_period_dosv_equals_hybrid():
    for s in range(100):
        g = np.random.default_rng([22, s])
        m, rols = _one_offer_market(g)
        t = int(g.integers(1, len(m.programs) + 1))
        schedule = OfferSchedule({p.id: t for p in m.programs})
        recipients = early_offer_recipients(m, schedule)
        assert sorted(x for v in recipients.values() for x in v) == m.student_ids
        dosv = run_mechanism(MechanismKind.DOSV, m, schedule, factory_for(rols), p0_for(m), RngStream(s))
        hyb = run_mechanism(MechanismKind.HYBRID, m, schedule, factory_for(rols), p0_for(m), RngStream(s))
        assert dosv.log.to_rows() == hyb.log.to_rows()
        assert dosv.matching == hyb.matching


def _trace_market():
    students = [
        StudentProfile(0, 0.9, (1, 2)),
        StudentProfile(1, 0.7, (1, 2)),
        StudentProfile(2, 0.5, (2,)),
    ]
    programs = [ProgramProfile(1, 1), ProgramProfile(2, 1)]
    return MarketInstance(students, programs, {1: (0, 1), 2: (0, 2, 1)})


def test_dosv_hand_trace():
    m = _trace_market()
    rols = {0: (1, 2), 1: (2, 1), 2: (2,)}
    agents = {}
    res = run_mechanism(
        MechanismKind.DOSV, m, OfferSchedule({1: 1, 2: 2}), factory_for(rols, agents), p0_for(m), RngStream(0)
    )
    # program 1 offers student 0 at t=1, program 2 offers student 0 at t=2
    assert res.log.to_rows() == [
        (1, "offer", 0, 1),
        (1, "learn", 0, 1),
        (1, "learn", 0, 2),
        (2, "offer", 0, 2),
        (2, "learn", 1, 2),
        (2, "learn", 1, 1),
        (2, "learn", 2, 2),
        (2, "finalize_rol", 0, ""),
        (2, "finalize_rol", 1, ""),
        (2, "finalize_rol", 2, ""),
        (3, "match", 0, 1),
        (3, "match", 1, ""),
        (3, "match", 2, 2),
    ]
    # students without offers learn only at the horizon
    assert [c[0] for c in agents[1].calls] == [2]
    # beliefs are 1 for arrived offers and p0 otherwise
    assert agents[0].calls[0][1] == {1: 1.0, 2: 0.5}
    assert agents[0].calls[1][1] == {1: 1.0, 2: 1.0}
    # student 0 keeps program 1; program 2 skips her and fills with its next applicant
    assert res.matching.assignment == {0: 1, 2: 2}
    assert is_stable(m, res.rols, res.matching)[0]


def test_da_ignores_schedule_and_learns_at_zero():
    m = _trace_market()
    rols = {0: (1, 2), 1: (2, 1), 2: (2,)}
    res = run_mechanism(MechanismKind.DA, m, OfferSchedule({1: 1}), factory_for(rols), p0_for(m), RngStream(0))
    assert all(e.period == 0 for e in res.log.events if e.kind in ("learn", "finalize_rol"))
    assert not any(e.kind == "offer" for e in res.log.events)
    assert res.matching == gs_program_proposing(m, rols)


def test_hybrid_requires_common_period():
    m = _trace_market()
    with pytest.raises(ValueError, match="common release"):
        run_mechanism(
            MechanismKind.HYBRID, m, OfferSchedule({1: 1, 2: 2}), factory_for({0: (), 1: (), 2: ()}),
            p0_for(m), RngStream(0),
        )


@pytest.mark.parametrize(
    "release, fragment",
    [({1: 0}, "start at 1"), ({9: 1}, "unknown programs"), ({1: 3}, "must not exceed")],
)
def test_schedule_check(release, fragment):
    with pytest.raises(ValueError, match=fragment):
        OfferSchedule(release).check(MechanismKind.DOSV, _trace_market())


def test_derive_offer_arrival_serializes_same_period():
    m = _trace_market()
    arr = derive_offer_arrival(OfferSchedule({1: 1, 2: 1}), m)
    O, apps = arr[0]
    # both offers released at t=1 reach student 0 at t=1 and t=2, by program id
    assert apps == (1, 2) and O.entries == (1, 2) and O.J == 2
    assert arr[1][0].entries == (3, 3)
    # a same-period collision at the horizon extends it
    O = derive_offer_arrival(OfferSchedule({1: 2, 2: 2}), m)[0][0]
    assert O.entries == (2, 3) and O.J == 3
    assert derive_offer_arrival(OfferSchedule({1: 2, 2: 2}), m)[2][0].entries == (4,)


def test_event_log_rules(tmp_path):
    log = EventLog()
    log.add(1, "offer", 0, 1)
    with pytest.raises(RuntimeError):
        log.add(0, "learn", 0, 1)
    with pytest.raises(ValueError):
        log.add(2, "reject", 0, 1)
    log.write_csv(tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text() == "period,kind,student_id,program_id\n1,offer,0,1\n"


def test_runs_are_deterministic():
    m, rols = random_market(np.random.default_rng(3), max_students=8)
    schedule = OfferSchedule({p.id: 1 for p in m.programs})
    a = run_mechanism(MechanismKind.HYBRID, m, schedule, factory_for(rols), p0_for(m), RngStream(9))
    b = run_mechanism(MechanismKind.HYBRID, m, schedule, factory_for(rols), p0_for(m), RngStream(9))
    assert a.log.to_rows() == b.log.to_rows() and a.matching == b.matching
    lines = write_manifest_lines(MechanismKind.HYBRID, 9, schedule, m)
    assert lines[0] == "kind=hybrid" and lines[-1] == f"market_sha256={m.digest()}"
