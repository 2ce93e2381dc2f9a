"""Shared domain types, market validation, CSV persistence and seeded random streams."""
from __future__ import annotations

import csv
import enum
import hashlib
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

EULER_GAMMA = 0.5772156649015329
GUMBEL_SD = math.pi / math.sqrt(6.0)


class MechanismKind(str, enum.Enum):
    DA = "da"
    DOSV = "dosv"
    HYBRID = "hybrid"

    @classmethod
    def parse(cls, text: str) -> "MechanismKind":
        try:
            return cls(text.strip().lower())
        except ValueError:
            raise ValueError(f"unknown mechanism {text!r}; expected one of da, dosv, hybrid") from None


@dataclass(frozen=True)
class StudentProfile:
    id: int
    abitur: float
    applications: Tuple[int, ...]


@dataclass(frozen=True)
class ProgramProfile:
    id: int
    capacity: int


@dataclass(frozen=True)
class MarketInstance:
    """Students, programs and each program's strict ranking over its acceptable applicants.

    ``rankings[k]`` lists student ids from best to worst. Applicants absent from
    the ranking are unacceptable to the program.
    """

    students: Tuple[StudentProfile, ...]
    programs: Tuple[ProgramProfile, ...]
    rankings: Dict[int, Tuple[int, ...]] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "students", tuple(self.students))
        object.__setattr__(self, "programs", tuple(self.programs))
        object.__setattr__(
            self, "rankings", {k: tuple(v) for k, v in dict(self.rankings).items()}
        )

    @property
    def student_ids(self) -> List[int]:
        return [s.id for s in self.students]

    @property
    def program_ids(self) -> List[int]:
        return [p.id for p in self.programs]

    def capacities(self) -> Dict[int, int]:
        return {p.id: p.capacity for p in self.programs}

    def applications(self) -> Dict[int, Tuple[int, ...]]:
        return {s.id: s.applications for s in self.students}

    def ranking(self, program_id: int) -> Tuple[int, ...]:
        return self.rankings.get(program_id, ())

    def rank_index(self) -> Dict[int, Dict[int, int]]:
        """Per program, map student id -> position in the program's ranking (0 = best)."""
        return {k: {s: r for r, s in enumerate(order)} for k, order in self.rankings.items()}

    def digest(self) -> str:
        h = hashlib.sha256()
        for s in self.students:
            h.update(f"s,{s.id},{s.abitur!r},{','.join(map(str, s.applications))}\n".encode())
        for p in self.programs:
            h.update(f"p,{p.id},{p.capacity}\n".encode())
        for k in sorted(self.rankings):
            h.update(f"r,{k},{','.join(map(str, self.rankings[k]))}\n".encode())
        return h.hexdigest()


@dataclass(frozen=True)
class Violation:
    entity: str
    entity_id: int
    rule: str

    def __str__(self):
        return f"{self.entity} {self.entity_id}: {self.rule}"


def validate_market(m) -> List[Violation]:
    """Check every invariant of a market and return the list of violations.

    Never raises: anything malformed is reported as a violation.
    """
    out: List[Violation] = []
    try:
        students = list(m.students)
        programs = list(m.programs)
        rankings = dict(m.rankings)
    except Exception as exc:  # noqa: BLE001 - validation must be total
        return [Violation("market", -1, f"unreadable market: {exc}")]

    program_ids = set()
    for p in programs:
        pid = getattr(p, "id", None)
        if pid in program_ids:
            out.append(Violation("program", pid, "duplicate program id"))
        program_ids.add(pid)
        cap = getattr(p, "capacity", None)
        if not isinstance(cap, (int, np.integer)) or cap < 0:
            out.append(Violation("program", pid, f"capacity must be a non-negative integer, got {cap!r}"))

    applied: Dict[int, set] = {}
    seen_students = set()
    for s in students:
        sid = getattr(s, "id", None)
        if sid in seen_students:
            out.append(Violation("student", sid, "duplicate student id"))
        seen_students.add(sid)
        ab = getattr(s, "abitur", None)
        try:
            if not (0.0 <= float(ab) <= 1.0):
                out.append(Violation("student", sid, f"abitur {ab!r} outside [0, 1]"))
        except (TypeError, ValueError):
            out.append(Violation("student", sid, f"abitur {ab!r} is not a number"))
        apps = list(getattr(s, "applications", ()) or ())
        if not apps:
            out.append(Violation("student", sid, "empty application list"))
        if len(set(apps)) != len(apps):
            out.append(Violation("student", sid, "duplicate program id in applications"))
        for k in apps:
            if k not in program_ids:
                out.append(Violation("student", sid, f"applies to unknown program {k}"))
        applied[sid] = set(apps)

    for k, order in rankings.items():
        if k not in program_ids:
            out.append(Violation("program", k, "ranking for unknown program"))
        order = list(order)
        if len(set(order)) != len(order):
            out.append(Violation("program", k, "ranking is not strict (repeated student)"))
        for sid in order:
            if sid not in applied:
                out.append(Violation("student", sid, f"ranked by program {k} but unknown"))
            elif k not in applied[sid]:
                out.append(Violation("student", sid, f"ranked by program {k} without applying"))
    return out


@dataclass(frozen=True)
class OfferArrival:
    """Period in which each applied-to program's early offer arrives.

    ``entries[j]`` is a period in ``1..J`` or ``J + 1`` for no early offer. The
    horizon ``J`` defaults to the number of entries; markets whose release
    periods run past a student's application count pass it explicitly.
    """

    entries: Tuple[int, ...]
    horizon: Optional[int] = None

    def __post_init__(self):
        entries = tuple(int(e) for e in self.entries)
        object.__setattr__(self, "entries", entries)
        J = len(entries) if self.horizon is None else int(self.horizon)
        object.__setattr__(self, "horizon", J)
        early = [e for e in entries if e <= J]
        if any(e < 1 or e > J + 1 for e in entries):
            raise ValueError(f"offer periods must lie in 1..{J + 1}: {entries}")
        if len(set(early)) != len(early):
            raise ValueError(f"at most one early offer per period: {entries}")

    @property
    def J(self) -> int:
        return self.horizon

    @classmethod
    def none(cls, J: int) -> "OfferArrival":
        return cls((J + 1,) * J)

    @classmethod
    def from_order(cls, J: int, order: Sequence[int]) -> "OfferArrival":
        """Offers from programs ``order[0], order[1], ...`` (0-based) in periods 1, 2, ..."""
        entries = [J + 1] * J
        for t, j in enumerate(order, start=1):
            entries[j] = t
        return cls(tuple(entries))

    def received(self, j: int, t: int) -> bool:
        return self.entries[j] <= min(t, self.J)

    def first_period(self) -> int:
        """Period of the first early offer, or J if there is none."""
        return min(min(self.entries, default=self.J + 1), self.J)

    def arrival_order(self) -> List[int]:
        return [j for j in sorted(range(len(self.entries)), key=lambda j: self.entries[j]) if self.entries[j] <= self.J]


@dataclass(frozen=True)
class UniformQuality:
    center: float
    half_width: float

    def __post_init__(self):
        if not self.half_width > 0:
            raise ValueError("uniform quality requires a positive half-width")

    def mean(self, u=None) -> float:
        if u is None:
            return float(self.center)
        raise TypeError("expected utility under a uniform quality needs quadrature; discretize first")

    def discretize(self, n: int) -> "DiscreteQuality":
        """Midpoint grid with ``n`` equally likely support points."""
        lo = self.center - self.half_width
        step = 2 * self.half_width / n
        values = lo + step * (np.arange(n) + 0.5)
        return DiscreteQuality(tuple((float(v), 1.0 / n) for v in values))


@dataclass(frozen=True)
class DiscreteQuality:
    """Finitely supported quality distribution as (value, probability) pairs."""

    support: Tuple[Tuple[float, float], ...]

    def __post_init__(self):
        support = tuple((float(v), float(p)) for v, p in self.support)
        object.__setattr__(self, "support", support)
        if not support:
            raise ValueError("empty support")
        if any(p <= 0 for _, p in support):
            raise ValueError("probabilities must be positive")
        if abs(sum(p for _, p in support) - 1.0) > 1e-12:
            raise ValueError("probabilities must sum to 1")

    @classmethod
    def point(cls, value: float) -> "DiscreteQuality":
        return cls(((value, 1.0),))

    def values(self) -> List[float]:
        return [v for v, _ in self.support]

    def mean(self, u=None) -> float:
        u = u or (lambda x: x)
        return math.fsum(p * u(v) for v, p in self.support)


QualityDistribution = object  # UniformQuality | DiscreteQuality


class RngStream:
    """Counter-based random stream keyed by ``(seed, path)``.

    Streams are Philox generators seeded from ``SeedSequence(seed, spawn_key=path)``,
    so a given key always yields the same draws and different paths are independent.
    """

    def __init__(self, seed: int, path: Iterable[int] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.path = tuple(int(p) for p in path)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self.generator = np.random.Generator(np.random.Philox(seq))

    def child(self, *keys: int) -> "RngStream":
        return RngStream(self.seed, self.path + tuple(keys))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, path={self.path})"

    def uniform_open(self, size=None):
        """Uniform draws on the open interval (0, 1)."""
        # random() returns multiples of 2**-53 on [0, 1); a half-step shift keeps both ends open
        return self.generator.random(size) + 2.0**-54

    def gumbel(self, size=None):
        return gumbel_from_uniform(self.uniform_open(size))

    def permutation(self, n_or_seq):
        return self.generator.permutation(n_or_seq)


def gumbel_from_uniform(u):
    """Inverse-CDF map of a uniform draw to a standard Gumbel variate."""
    return -np.log(-np.log(u))


def gumbel_draw(stream: RngStream) -> float:
    return float(stream.gumbel())


# purpose tags for stream paths
TAG_MARKET = 1
TAG_SHOCK_FULL = 2
TAG_SHOCK_NOINFO = 3
TAG_V_NOINFO = 4
TAG_ARRIVAL = 5
TAG_LEARN_ORDER = 6
TAG_RSD = 7
TAG_MC = 8
TAG_AGENT = 9


def as_fraction(value) -> Fraction:
    """Parse ``"3339/65536"``, ints, floats or Fractions into a Fraction."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, str):
        return Fraction(value.strip())
    return Fraction(value)


# --- CSV persistence -------------------------------------------------------

def write_market_csv(m: MarketInstance, out_dir) -> List[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / name for name in ("students.csv", "programs.csv", "applications.csv", "rankings.csv")]
    with open(paths[0], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "abitur"])
        for s in m.students:
            w.writerow([s.id, repr(float(s.abitur))])
    with open(paths[1], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "capacity"])
        for p in m.programs:
            w.writerow([p.id, p.capacity])
    with open(paths[2], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["student_id", "program_id", "application_order"])
        for s in m.students:
            for order, k in enumerate(s.applications, start=1):
                w.writerow([s.id, k, order])
    with open(paths[3], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["program_id", "rank", "student_id"])
        for k in sorted(m.rankings):
            for r, sid in enumerate(m.rankings[k], start=1):
                w.writerow([k, r, sid])
    return paths


def _read_rows(path: Path, required: Sequence[str]) -> List[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in required if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path.name}: missing columns {missing}")
        return list(reader)


def read_market_csv(in_dir) -> MarketInstance:
    src = Path(in_dir)
    apps: Dict[int, List[Tuple[int, int]]] = {}
    for row in _read_rows(src / "applications.csv", ("student_id", "program_id", "application_order")):
        apps.setdefault(int(row["student_id"]), []).append(
            (int(row["application_order"]), int(row["program_id"]))
        )
    students = [
        StudentProfile(
            int(row["id"]),
            float(row["abitur"]),
            tuple(k for _, k in sorted(apps.get(int(row["id"]), []))),
        )
        for row in _read_rows(src / "students.csv", ("id", "abitur"))
    ]
    programs = [
        ProgramProfile(int(row["id"]), int(row["capacity"]))
        for row in _read_rows(src / "programs.csv", ("id", "capacity"))
    ]
    rankings: Dict[int, List[Tuple[int, int]]] = {}
    rpath = src / "rankings.csv"
    if rpath.exists():
        for row in _read_rows(rpath, ("program_id", "rank", "student_id")):
            rankings.setdefault(int(row["program_id"]), []).append((int(row["rank"]), int(row["student_id"])))
    return MarketInstance(
        students,
        programs,
        {k: tuple(s for _, s in sorted(v)) for k, v in rankings.items()},
    )


def rankings_from_scores(
    m: MarketInstance, score: Dict[Tuple[int, int], float], acceptable=None
) -> Dict[int, Tuple[int, ...]]:
    """Rank each program's applicants by descending score (ties broken by student id)."""
    out: Dict[int, List[int]] = {p.id: [] for p in m.programs}
    for s in m.students:
        for k in s.applications:
            if acceptable is not None and (s.id, k) not in acceptable:
                continue
            if k in out:
                out[k].append(s.id)
    return {
        k: tuple(sorted(ids, key=lambda sid: (-score[(sid, k)], sid)))
        for k, ids in out.items()
    }


def optional_int(text: Optional[str]) -> Optional[int]:
    return None if text in (None, "", "none") else int(text)
