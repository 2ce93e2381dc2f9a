"""Program-proposing deferred acceptance, its held-offer variant, stability and feasibility.

Rank-order lists (ROLs) are tuples of program ids, best first. A program is
acceptable to a student iff it appears in her ROL; a student is acceptable to a
program iff the program ranks her.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

from .market import MarketInstance, RngStream, validate_market

RankOrderList = Tuple[int, ...]


@dataclass(frozen=True)
class Matching:
    """Partial assignment of students to programs. Unassigned students are absent."""

    assignment: Dict[int, int] = field(default_factory=dict)

    def admitted(self) -> Dict[int, List[int]]:
        out: Dict[int, List[int]] = {}
        for sid in sorted(self.assignment):
            out.setdefault(self.assignment[sid], []).append(sid)
        return out

    def get(self, sid: int) -> Optional[int]:
        return self.assignment.get(sid)

    def __eq__(self, other):
        return isinstance(other, Matching) and dict(self.assignment) == dict(other.assignment)

    def __hash__(self):
        return hash(tuple(sorted(self.assignment.items())))


HeldOffers = Dict[int, int]


@dataclass(frozen=True)
class BlockingPair:
    student_id: int
    program_id: int
    reason: str


def _check_inputs(m: MarketInstance, rols: Mapping[int, Sequence[int]]):
    problems = [str(v) for v in validate_market(m)]
    apps = m.applications()
    for sid, rol in rols.items():
        if sid not in apps:
            problems.append(f"ROL for unknown student {sid}")
            continue
        if len(set(rol)) != len(rol):
            problems.append(f"student {sid}: ROL repeats a program")
        extra = set(rol) - set(apps[sid])
        if extra:
            problems.append(f"student {sid}: ROL ranks programs not applied to {sorted(extra)}")
    if problems:
        raise ValueError("invalid matching input: " + "; ".join(problems))


def _rol_rank(rols: Mapping[int, Sequence[int]]) -> Dict[int, Dict[int, int]]:
    return {sid: {k: r for r, k in enumerate(rol)} for sid, rol in rols.items()}


def _deferred_acceptance(
    m: MarketInstance,
    rols: Mapping[int, Sequence[int]],
    held: Mapping[int, int],
    offered: Mapping[int, Set[int]],
    trace: Optional[list] = None,
) -> Matching:
    caps = m.capacities()
    pref = _rol_rank(rols)
    holding: Dict[int, int] = dict(held)
    holders: Dict[int, Set[int]] = {k: set() for k in caps}
    for sid, k in holding.items():
        holders[k].add(sid)
    # pointer into each ranking: everything before it has been offered
    queue = {k: [s for s in m.ranking(k) if s not in offered.get(k, set())] for k in caps}
    pos = {k: 0 for k in caps}
    rnd = 0
    while True:
        rnd += 1
        offers: Dict[int, List[int]] = {}
        for k in sorted(caps):
            free = caps[k] - len(holders[k])
            while free > 0 and pos[k] < len(queue[k]):
                sid = queue[k][pos[k]]
                pos[k] += 1
                offers.setdefault(sid, []).append(k)
                free -= 1
        if not offers:
            break
        rejected = []
        for sid in sorted(offers):
            ranks = pref.get(sid, {})
            options = [k for k in offers[sid] if k in ranks]
            rejected.extend((sid, k) for k in offers[sid] if k not in ranks)
            current = holding.get(sid)
            if current is not None:
                options.append(current)
            if not options:
                continue
            best = min(options, key=lambda k: ranks[k])
            for k in options:
                if k != best:
                    rejected.append((sid, k))
            if current is not None and current != best:
                holders[current].discard(sid)
            holding[sid] = best
            holders[best].add(sid)
        if trace is not None:
            trace.append({"round": rnd, "offers": {s: tuple(v) for s, v in offers.items()}, "rejected": tuple(rejected)})
        if not rejected:
            break
    return Matching({sid: k for sid, k in holding.items()})


def gs_program_proposing(
    m: MarketInstance,
    rols: Mapping[int, Sequence[int]],
    trace: Optional[list] = None,
    check: bool = True,
) -> Matching:
    """Program-proposing deferred acceptance with per-round batched offers.

    In each round every program offers to its best never-offered applicants up
    to its number of unfilled seats; each student keeps her best offer by ROL
    and rejects the rest. Stops after a round with no rejections.
    ``check=False`` skips input validation for callers that validated already.
    """
    if check:
        _check_inputs(m, rols)
    return _deferred_acceptance(m, rols, {}, {}, trace)


def gs_with_held_offers(
    m: MarketInstance,
    rols: Mapping[int, Sequence[int]],
    held: HeldOffers,
    exhausted: Mapping[int, Iterable[int]],
    trace: Optional[list] = None,
) -> Matching:
    """Deferred acceptance entered with offers already held.

    Programs never re-offer to students in their ``exhausted`` set, and each
    student compares new offers with the one she holds.
    """
    _check_inputs(m, rols)
    caps = m.capacities()
    ranked = {k: set(m.ranking(k)) for k in caps}
    exhausted = {k: set(v) for k, v in exhausted.items()}
    problems = []
    for k in exhausted:
        if k not in caps:
            problems.append(f"exhausted set for unknown program {k}")
    counts: Dict[int, int] = {}
    for sid, k in held.items():
        if k not in caps:
            problems.append(f"student {sid} holds unknown program {k}")
            continue
        if sid not in exhausted.get(k, set()):
            problems.append(f"student {sid} holds program {k} without having been offered")
        if sid not in ranked[k]:
            problems.append(f"student {sid} holds program {k} that does not rank her")
        if k not in rols.get(sid, ()):
            problems.append(f"student {sid} holds program {k} absent from her ROL")
        counts[k] = counts.get(k, 0) + 1
    for k, c in counts.items():
        if c > caps[k]:
            problems.append(f"program {k} has {c} held offers but capacity {caps[k]}")
    if problems:
        raise ValueError("inconsistent held offers: " + "; ".join(problems))
    return _deferred_acceptance(m, rols, held, exhausted, trace)


def is_stable(
    m: MarketInstance, rols: Mapping[int, Sequence[int]], match: Matching
) -> Tuple[bool, List[BlockingPair]]:
    """Stability with respect to ROLs and program rankings, plus the blocking pairs found."""
    caps = m.capacities()
    pref = _rol_rank(rols)
    rank = m.rank_index()
    admitted = match.admitted()
    unranked = 1 << 30
    # lowest-ranked admit per program; unranked admits count as worst
    worst = {
        k: max(adm, key=lambda a: (rank[k].get(a, unranked), a)) for k, adm in admitted.items() if adm
    }
    pairs: List[BlockingPair] = []
    for sid, k in sorted(match.assignment.items()):
        if k not in pref.get(sid, {}) or sid not in rank.get(k, {}):
            pairs.append(BlockingPair(sid, k, "assigned pair is not mutually acceptable"))
    for sid in m.student_ids:
        ranks = pref.get(sid, {})
        current = match.get(sid)
        for k, r in sorted(ranks.items(), key=lambda kv: kv[1]):
            if current is not None and current in ranks and r >= ranks[current]:
                break
            if k == current or sid not in rank.get(k, {}):
                continue
            adm = admitted.get(k, [])
            if len(adm) < caps[k]:
                pairs.append(BlockingPair(sid, k, "program has a free seat"))
                continue
            w = worst[k] if adm else None
            if w is not None and rank[k].get(w, unranked) > rank[k][sid]:
                pairs.append(BlockingPair(sid, k, f"program ranks student above admitted student {w}"))
    return (not pairs), pairs


def compute_expost_feasible(m: MarketInstance, match: Matching) -> Dict[int, Set[int]]:
    """Programs each student could have obtained given the realized cut-offs.

    Program k is feasible to i iff i applied, k ranks i, and either k is
    undersubscribed or i is ranked weakly above k's lowest-ranked admit.
    """
    caps = m.capacities()
    rank = m.rank_index()
    admitted = match.admitted()
    cutoff = {}
    for k in caps:
        adm = admitted.get(k, [])
        if len(adm) < caps[k]:
            cutoff[k] = None
        else:
            cutoff[k] = max(rank[k][a] for a in adm) if adm else -1
    out: Dict[int, Set[int]] = {}
    for s in m.students:
        feas = set()
        for k in s.applications:
            r = rank.get(k, {}).get(s.id)
            if r is None:
                continue
            if cutoff[k] is None or r <= cutoff[k]:
                feas.add(k)
        out[s.id] = feas
    return out


def clearing_rsd(
    m: MarketInstance,
    remaining_students: Sequence[int],
    remaining_seats: Mapping[int, int],
    stream: RngStream,
    rols: Optional[Mapping[int, Sequence[int]]] = None,
) -> Matching:
    """Random serial dictatorship over leftover seats.

    Students go in a uniformly random order and each takes her most preferred
    program with a free seat among those she applied to (by ROL if given,
    otherwise by application order).
    """
    seats = {k: int(v) for k, v in remaining_seats.items()}
    apps = m.applications()
    order = [remaining_students[i] for i in stream.permutation(len(remaining_students))]
    out = {}
    for sid in order:
        prefs = rols.get(sid, ()) if rols is not None else apps.get(sid, ())
        for k in prefs:
            if seats.get(k, 0) > 0:
                seats[k] -= 1
                out[sid] = k
                break
    return Matching(out)


def write_matching_csv(match: Matching, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["student_id", "program_id"])
        for sid in sorted(match.assignment):
            w.writerow([sid, match.assignment[sid]])
    return path


def write_blocking_csv(pairs: Sequence[BlockingPair], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["student_id", "program_id", "reason"])
        for p in pairs:
            w.writerow([p.student_id, p.program_id, p.reason])
    return path
