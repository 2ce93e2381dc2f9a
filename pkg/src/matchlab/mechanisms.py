"""End-to-end runs of the DA, DoSV and Hybrid mechanisms with learning agents.

Agents are per-student objects created by a factory and driven through three
callbacks:

* ``learn(period, beliefs)`` returns the programs the agent learns now, in order;
* ``final_rol(beliefs)`` returns the submitted rank-order list.

``beliefs`` maps each applied-to program to its current offer probability
(1 for programs whose early offer has arrived).
"""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Protocol, Sequence, Tuple

from .market import TAG_AGENT, MarketInstance, MechanismKind, OfferArrival, RngStream
from .matching import Matching, gs_with_held_offers

EVENT_KINDS = ("offer", "learn", "finalize_rol", "match")


class Agent(Protocol):
    def learn(self, period: int, beliefs: Dict[int, float]) -> Sequence[int]: ...

    def final_rol(self, beliefs: Dict[int, float]) -> Tuple[int, ...]: ...


AgentFactory = Callable[[int, Dict[int, float], RngStream], Agent]


@dataclass(frozen=True)
class OfferSchedule:
    """Release period of each program's single batch of early offers (absent = none)."""

    release: Dict[int, int] = field(default_factory=dict)

    def check(self, kind: MechanismKind, m: Optional[MarketInstance] = None):
        if any(int(t) < 1 for t in self.release.values()):
            raise ValueError("release periods start at 1")
        if m is not None:
            unknown = set(self.release) - set(m.program_ids)
            if unknown:
                raise ValueError(f"schedule names unknown programs {sorted(unknown)}")
            horizon = len(m.programs)
            late = [k for k, t in self.release.items() if t > horizon]
            if late:
                raise ValueError(f"release periods must not exceed the number of programs ({horizon}): {sorted(late)}")
        if MechanismKind(kind) is MechanismKind.HYBRID and len(set(self.release.values())) > 1:
            raise ValueError("Hybrid requires a common release period for all early offers")

    def digest(self) -> str:
        text = ",".join(f"{k}:{t}" for k, t in sorted(self.release.items()))
        return hashlib.sha256(text.encode()).hexdigest()


@dataclass(frozen=True)
class Event:
    period: int
    kind: str
    student_id: int
    program_id: Optional[int] = None


@dataclass
class EventLog:
    events: List[Event] = field(default_factory=list)

    def add(self, period: int, kind: str, sid: int, k: Optional[int] = None):
        if kind not in EVENT_KINDS:
            raise ValueError(kind)
        if self.events and period < self.events[-1].period:
            raise RuntimeError("event periods must be non-decreasing")
        self.events.append(Event(int(period), kind, int(sid), None if k is None else int(k)))

    def to_rows(self) -> List[Tuple]:
        return [(e.period, e.kind, e.student_id, "" if e.program_id is None else e.program_id) for e in self.events]

    def write_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["period", "kind", "student_id", "program_id"])
            w.writerows(self.to_rows())
        return path


def early_offer_recipients(m: MarketInstance, schedule: OfferSchedule) -> Dict[int, Tuple[int, ...]]:
    """Program -> students receiving its early offer: its top-q ranked applicants."""
    caps = m.capacities()
    return {k: tuple(m.ranking(k)[: caps[k]]) for k in sorted(schedule.release) if caps.get(k, 0) > 0}


def derive_offer_arrival(
    schedule: OfferSchedule, m: MarketInstance
) -> Dict[int, Tuple[OfferArrival, Tuple[int, ...]]]:
    """Per student, the arrival vector over her applications (in application order).

    The horizon is the number of programs in the market. Offers released to one
    student in the same period are serialized into consecutive periods by
    program id; if that pushes an offer past the horizon, the horizon grows.
    """
    received: Dict[int, List[Tuple[int, int]]] = {s.id: [] for s in m.students}
    for k, sids in early_offer_recipients(m, schedule).items():
        for sid in sids:
            received[sid].append((int(schedule.release[k]), k))
    base_horizon = max(1, len(m.programs))
    assigned: Dict[int, Dict[int, int]] = {}
    horizon = base_horizon
    for sid, offers in received.items():
        offers.sort()
        last = 0
        periods = {}
        for t, k in offers:
            last = max(t, last + 1)
            periods[k] = last
        assigned[sid] = periods
        horizon = max(horizon, last)
    out = {}
    for s in m.students:
        entries = tuple(assigned[s.id].get(k, horizon + 1) for k in s.applications)
        out[s.id] = (OfferArrival(entries, horizon), s.applications)
    return out


def _beliefs(p0: Dict[int, float], arrived) -> Dict[int, float]:
    return {k: (1.0 if k in arrived else float(v)) for k, v in p0.items()}


@dataclass
class MechanismResult:
    matching: Matching
    log: EventLog
    rols: Dict[int, Tuple[int, ...]]
    arrivals: Dict[int, OfferArrival]


def run_mechanism(
    kind: MechanismKind,
    m: MarketInstance,
    schedule: OfferSchedule,
    agent_factory: AgentFactory,
    p0: Mapping[int, Mapping[int, float]],
    stream: RngStream,
) -> MechanismResult:
    """Run one mechanism from applications to the final matching.

    ``p0[sid][k]`` is student ``sid``'s period-0 offer probability for program k.
    Under the DA students learn at period 0 and commit before any offer. Under
    the DoSV they re-optimize after each arrival, from the first arrival (or the
    horizon if none) to the horizon. Under the Hybrid every early offer arrives
    at the common release date and students learn once. All mechanisms end with
    deferred acceptance entered with each student holding her best early offer.
    """
    kind = MechanismKind(kind)
    schedule.check(kind, m)
    arrivals = derive_offer_arrival(schedule, m)
    horizon = max((a.J for a, _ in arrivals.values()), default=len(m.programs))
    recipients = early_offer_recipients(m, schedule)
    offers_to: Dict[int, Dict[int, int]] = {s.id: {} for s in m.students}
    for sid, (arr, apps) in arrivals.items():
        for k, t in zip(apps, arr.entries):
            if t <= arr.J:
                offers_to[sid][k] = t

    agents = {}
    for s in m.students:
        agents[s.id] = agent_factory(s.id, dict(p0[s.id]), stream.child(TAG_AGENT, s.id))
    log = EventLog()
    sids = [s.id for s in m.students]
    arrived: Dict[int, set] = {sid: set() for sid in sids}

    def do_learn(t, sid):
        for k in agents[sid].learn(t, _beliefs(p0[sid], arrived[sid])):
            log.add(t, "learn", sid, k)

    if kind is MechanismKind.DA:
        # the schedule is ignored: ROLs are committed at period 0
        offers_to = {sid: {} for sid in sids}
        recipients = {}
        arrivals = {sid: (OfferArrival.none(len(apps)), apps) for sid, (_, apps) in arrivals.items()}
        for sid in sids:
            do_learn(0, sid)
    elif kind is MechanismKind.DOSV:
        first = {sid: min(min(offers_to[sid].values(), default=horizon), horizon) for sid in sids}
        for t in range(1, horizon + 1):
            for sid in sids:
                for k, tk in sorted(offers_to[sid].items()):
                    if tk == t:
                        arrived[sid].add(k)
                        log.add(t, "offer", sid, k)
                if t >= first[sid]:
                    do_learn(t, sid)
    else:
        common = next(iter(set(schedule.release.values())), horizon)
        common = min(common, horizon)
        for sid in sids:
            for k in sorted(offers_to[sid]):
                arrived[sid].add(k)
                log.add(common, "offer", sid, k)
            do_learn(common, sid)

    rols = {}
    final_period = 0 if kind is MechanismKind.DA else horizon
    for sid in sids:
        rols[sid] = tuple(agents[sid].final_rol(_beliefs(p0[sid], arrived[sid])))
        log.add(final_period, "finalize_rol", sid, None)

    # each offer-holder enters deferred acceptance with her best early offer
    held = {}
    for sid in sids:
        ranked = [k for k in rols[sid] if k in offers_to[sid]]
        if ranked:
            held[sid] = ranked[0]
    exhausted = {k: set(v) for k, v in recipients.items()}
    match = gs_with_held_offers(m, rols, held, exhausted)
    for sid in sids:
        log.add(horizon + 1, "match", sid, match.get(sid))
    return MechanismResult(match, log, rols, {sid: a for sid, (a, _) in arrivals.items()})


def write_manifest_lines(kind: MechanismKind, seed: int, schedule: OfferSchedule, m: MarketInstance) -> List[str]:
    return [
        f"kind={MechanismKind(kind).value}",
        f"seed={seed}",
        f"schedule_sha256={schedule.digest()}",
        f"market_sha256={m.digest()}",
    ]
