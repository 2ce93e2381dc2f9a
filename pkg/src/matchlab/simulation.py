"""Monte Carlo comparison of DA, DoSV and Hybrid on synthetic markets.

Every student applies to a fixed set of programs plus an outside option (a
program with no seats). Each sample draws fresh utility shocks, no-information
utilities, early-offer arrival orders and learning orders; students learn half
of their applications (rounded down) in a mechanism-specific order and submit
complete ROLs truthful with respect to what they perceive.
"""
from __future__ import annotations

import csv
import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .market import (
    GUMBEL_SD,
    TAG_ARRIVAL,
    TAG_LEARN_ORDER,
    TAG_MARKET,
    TAG_MC,
    TAG_SHOCK_FULL,
    TAG_SHOCK_NOINFO,
    TAG_V_NOINFO,
    MarketInstance,
    MechanismKind,
    ProgramProfile,
    RngStream,
    StudentProfile,
    read_market_csv,
    validate_market,
    write_market_csv,
)
from .matching import compute_expost_feasible, gs_program_proposing, is_stable

OUTSIDE_OPTION = 0
FULL_INFO = "full_info"


class InvariantViolation(RuntimeError):
    pass


@dataclass(frozen=True)
class SimConfig:
    n_students: int = 200
    n_programs: int = 10
    n_samples: int = 50
    seed: int = 0
    apps_min: int = 2  # programs applied to, excluding the outside option
    apps_max: int = 6
    v_mean_scale: float = 1.0
    v_se_scale: float = 0.5
    capacity_ratio: float = 0.9
    early_offer_share: float = 1.0

    def __post_init__(self):
        if self.n_samples < 1 or self.n_students < 1 or self.n_programs < 1:
            raise ValueError("n_students, n_programs and n_samples must be at least 1")
        if not 1 <= self.apps_min <= self.apps_max:
            raise ValueError("need 1 <= apps_min <= apps_max")
        if self.apps_max > self.n_programs:
            raise ValueError("apps_max cannot exceed n_programs")
        if self.v_mean_scale <= 0 or self.v_se_scale <= 0 or self.capacity_ratio <= 0:
            raise ValueError("scales and capacity_ratio must be positive")
        if not 0 <= self.early_offer_share <= 1:
            raise ValueError("early_offer_share must lie in [0, 1]")

    @classmethod
    def from_mapping(cls, kv: Dict[str, str]) -> "SimConfig":
        types = {f.name: f.type for f in fields(cls)}
        unknown = set(kv) - set(types)
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        args = {}
        for key, text in kv.items():
            cast = int if types[key] in ("int", int) else float
            try:
                args[key] = cast(text)
            except ValueError:
                raise ValueError(f"config key {key}: cannot parse {text!r}") from None
        return cls(**args)

    def mean_applications(self) -> float:
        """Expected size of an application set, outside option included."""
        return (self.apps_min + self.apps_max) / 2 + 1


@dataclass
class SimMarket:
    """Fixed components of a simulated market.

    Student-program pairs are stored flat in application order; student ``i``
    owns rows ``offsets[i]:offsets[i+1]``.
    """

    market: MarketInstance
    pair_student: np.ndarray
    pair_program: np.ndarray
    v_full: np.ndarray
    se_full: np.ndarray
    extended: np.ndarray  # pair is in the student's extended feasible set
    early: np.ndarray  # pair's program sends this student an early offer
    offsets: np.ndarray
    _pair_rank: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    @property
    def n_students(self) -> int:
        return len(self.offsets) - 1

    @property
    def pair_rank(self) -> np.ndarray:
        """Position of each pair's student in the program's ranking, -1 if unranked."""
        if self._pair_rank is None:
            idx = self.market.rank_index()
            self._pair_rank = np.array(
                [idx.get(int(k), {}).get(int(i), -1) for i, k in zip(self.pair_student, self.pair_program)], dtype=np.int64
            )
        return self._pair_rank

    def rows(self, i: int) -> slice:
        return slice(int(self.offsets[i]), int(self.offsets[i + 1]))

    def write_utility_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["student_id", "program_id", "v_full", "se_full", "extended_feasible", "early_offer"])
            for r in range(len(self.pair_student)):
                w.writerow(
                    [
                        int(self.pair_student[r]),
                        int(self.pair_program[r]),
                        repr(float(self.v_full[r])),
                        repr(float(self.se_full[r])),
                        int(self.extended[r]),
                        int(self.early[r]),
                    ]
                )
        return path

    def write_csv(self, out_dir) -> List[Path]:
        paths = write_market_csv(self.market, out_dir)
        paths.append(self.write_utility_csv(Path(out_dir) / "utilities.csv"))
        return paths

    @classmethod
    def read_csv(cls, in_dir) -> "SimMarket":
        m = read_market_csv(in_dir)
        by_pair = {}
        with open(Path(in_dir) / "utilities.csv", newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                by_pair[(int(row["student_id"]), int(row["program_id"]))] = row
        ps, pk, v, se, ext, early, offsets = [], [], [], [], [], [], [0]
        for s in m.students:
            for k in s.applications:
                row = by_pair[(s.id, k)]
                ps.append(s.id)
                pk.append(k)
                v.append(float(row["v_full"]))
                se.append(float(row["se_full"]))
                ext.append(int(row["extended_feasible"]) == 1)
                early.append(int(row["early_offer"]) == 1)
            offsets.append(len(ps))
        return cls(m, np.array(ps), np.array(pk), np.array(v), np.array(se), np.array(ext), np.array(early), np.array(offsets))

    def digest(self) -> str:
        h = hashlib.sha256(self.market.digest().encode())
        for arr in (self.v_full, self.se_full, self.extended, self.early):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def program_score(abitur: float, nu: float) -> float:
    """Priority score: mean of the student's percentile and a program-specific draw."""
    return (abitur + nu) / 2


def generate_market(cfg: SimConfig, stream: Optional[RngStream] = None) -> SimMarket:
    """Draw the fixed market: students, applications, capacities, rankings, utilities.

    Extended feasible sets come from one full-information reference run: the
    programs ex-post feasible in that run plus, for students with an infeasible
    application, the one closest to its cut-off. Students are unacceptable to
    programs outside their extended feasible set.
    """
    stream = stream or RngStream(cfg.seed, (TAG_MARKET,))
    g = stream.child(1).generator
    I, K = cfg.n_students, cfg.n_programs
    programs = list(range(1, K + 1))
    abitur = g.random(I)
    quality = g.normal(size=K + 1)
    apps = []
    for i in range(I):
        n = int(g.integers(cfg.apps_min, cfg.apps_max + 1))
        chosen = g.choice(K, size=n, replace=False) + 1
        apps.append(tuple(int(k) for k in chosen) + (OUTSIDE_OPTION,))
    demand = np.zeros(K + 1)
    for a in apps:
        for k in a:
            demand[k] += 1
    mean_apps = cfg.mean_applications() - 1
    caps = {k: max(1, int(math.ceil(cfg.capacity_ratio * demand[k] / mean_apps))) for k in programs}
    caps[OUTSIDE_OPTION] = 0

    ps, pk, offsets = [], [], [0]
    for i, a in enumerate(apps):
        ps.extend([i] * len(a))
        pk.extend(a)
        offsets.append(len(ps))
    ps, pk = np.array(ps), np.array(pk)
    gv = stream.child(2).generator
    v_full = cfg.v_mean_scale * (quality[pk] + gv.normal(size=len(pk)))
    se_full = cfg.v_se_scale * gv.uniform(0.5, 1.5, size=len(pk))
    nu = stream.child(3).generator.random(len(pk))
    score = {(int(ps[r]), int(pk[r])): program_score(float(abitur[ps[r]]), float(nu[r])) for r in range(len(pk))}

    students = [StudentProfile(i, float(abitur[i]), apps[i]) for i in range(I)]
    progs = [ProgramProfile(k, caps[k]) for k in [OUTSIDE_OPTION] + programs]
    full_rank = _rank_by_score(students, programs, score, None)
    reference = MarketInstance(students, progs, full_rank)
    # reference full-information run fixes which programs can ever be feasible
    eps = stream.child(4).gumbel(len(pk))
    u_ref = v_full + eps
    rols = {i: _rol_from(pk[offsets[i] : offsets[i + 1]], u_ref[offsets[i] : offsets[i + 1]]) for i in range(I)}
    match = gs_program_proposing(reference, rols, check=False)
    feas = compute_expost_feasible(reference, match)
    admitted = match.admitted()
    rank_idx = reference.rank_index()
    extended_sets = {}
    for i in range(I):
        ext = set(feas[i])
        gaps = []
        for k in apps[i]:
            if k == OUTSIDE_OPTION or k in ext:
                continue
            adm = admitted.get(k, [])
            cutoff = max((rank_idx[k][a] for a in adm), default=-1)
            gaps.append((rank_idx[k][i] - cutoff, k))
        if gaps:
            ext.add(min(gaps)[1])
        extended_sets[i] = ext
    acceptable = {(i, k) for i, ks in extended_sets.items() for k in ks}
    rankings = _rank_by_score(students, programs, score, acceptable)
    market = MarketInstance(students, progs, rankings)
    problems = validate_market(market)
    if problems:
        raise InvariantViolation("generated market is invalid: " + "; ".join(map(str, problems)))
    extended = np.array([(int(ps[r]), int(pk[r])) in acceptable for r in range(len(pk))])

    offering = [k for k in programs if g.random() < cfg.early_offer_share] if cfg.early_offer_share < 1 else programs
    early_pairs = set()
    for k in offering:
        for sid in rankings[k][: caps[k]]:
            early_pairs.add((sid, k))
    early = np.array([(int(ps[r]), int(pk[r])) in early_pairs for r in range(len(pk))])
    return SimMarket(market, ps, pk, v_full, se_full, extended, early, np.array(offsets))


def _rank_by_score(students, programs, score, acceptable) -> Dict[int, Tuple[int, ...]]:
    out = {k: [] for k in programs}
    for s in students:
        for k in s.applications:
            if k == OUTSIDE_OPTION:
                continue
            if acceptable is None or (s.id, k) in acceptable:
                out[k].append(s.id)
    return {k: tuple(sorted(v, key=lambda sid: (-score[(sid, k)], sid))) for k, v in out.items()}


def _rol_from(programs: np.ndarray, utility: np.ndarray) -> Tuple[int, ...]:
    order = sorted(range(len(programs)), key=lambda r: (-utility[r], int(programs[r])))
    return tuple(int(programs[r]) for r in order)


# --- learning sequences ------------------------------------------------------------

def learning_sequence(kind: MechanismKind, da_order: Sequence, arrival_order: Sequence) -> Tuple:
    """Potential learning order over a student's applications.

    ``da_order`` is the DA order (a permutation of the applications) and
    ``arrival_order`` the student's early offers in order of arrival.
    """
    da = list(da_order)
    arrivals = list(arrival_order)
    if len(set(da)) != len(da):
        raise ValueError("DA order repeats a program")
    if len(set(arrivals)) != len(arrivals) or not set(arrivals) <= set(da):
        raise ValueError("arrival order must list distinct applied-to programs")
    kind = MechanismKind(kind)
    if kind is MechanismKind.DA or not arrivals:
        return tuple(da)
    if kind is MechanismKind.HYBRID:
        early = set(arrivals)
        return tuple([k for k in da if k in early] + [k for k in da if k not in early])
    # DoSV: the first offer first, then alternate between the earliest unlearned
    # program in DA order and the latest early offer
    seq = [arrivals[0]]
    learned = {arrivals[0]}
    latest = 0
    step_of = {arrivals[0]: 1}
    for step in range(2, len(da) + 1):
        current = arrivals[latest] if latest < len(arrivals) else None
        if current is not None and step_of.get(current) == step - 1:
            pick = next(k for k in da if k not in learned)
        else:
            latest += 1
            if latest < len(arrivals) and arrivals[latest] not in learned:
                pick = arrivals[latest]
            else:
                pick = next(k for k in da if k not in learned)
        seq.append(pick)
        learned.add(pick)
        step_of[pick] = step
    return tuple(seq)


def learning_outcomes(omega: Sequence, n_applications: Optional[int] = None) -> Dict:
    """Learned flags: the first floor(A/2) entries of ``omega`` are learned."""
    A = len(omega) if n_applications is None else n_applications
    budget = A // 2
    return {k: int(pos < budget) for pos, k in enumerate(omega)}


@dataclass(frozen=True)
class UtilityPair:
    v_full: float
    se_full: float
    v_noinfo: float
    eps_full: float
    eps_noinfo: float

    @property
    def u_full(self) -> float:
        return self.v_full + self.eps_full

    @property
    def u_noinfo(self) -> float:
        return self.v_noinfo + self.eps_noinfo


def perceived_utility(pair: UtilityPair, learned: int) -> float:
    return pair.u_full if learned else pair.u_noinfo


# --- sampling ----------------------------------------------------------------------

@dataclass
class SampleDraws:
    u_full: np.ndarray
    u_noinfo: np.ndarray
    da_key: np.ndarray  # sort keys: DA learning order within each student
    arrival_key: np.ndarray  # sort keys: arrival order of early offers


def draw_sample(sm: SimMarket, seed: int, s: int) -> SampleDraws:
    n = len(sm.pair_program)
    # samples live under their own namespace so they never share a path with the market
    base = RngStream(seed, (TAG_MC, s))
    eps_full = base.child(TAG_SHOCK_FULL).gumbel(n)
    eps_noinfo = base.child(TAG_SHOCK_NOINFO).gumbel(n)
    v_noinfo = sm.v_full + sm.se_full * base.child(TAG_V_NOINFO).generator.standard_normal(n)
    da_key = base.child(TAG_LEARN_ORDER).generator.random(n)
    arrival_key = base.child(TAG_ARRIVAL).generator.random(n)
    return SampleDraws(sm.v_full + eps_full, v_noinfo + eps_noinfo, da_key, arrival_key)


@dataclass
class MechanismSample:
    matching: Dict[int, int]
    in_order: np.ndarray  # per student: feasible programs ranked in full-info order
    utility: np.ndarray  # per student: full-info utility of the match
    learned: Optional[np.ndarray] = None  # per pair


@dataclass
class SampleResult:
    index: int
    by_mechanism: Dict[str, MechanismSample]
    omegas: Optional[Dict[str, List[Tuple[int, ...]]]] = None


def _student_sequences(sm: SimMarket, d: SampleDraws) -> List[Tuple[List[int], List[int]]]:
    """Per student, the DA learning order and the early-offer arrival order."""
    da = sm.pair_program[np.lexsort((d.da_key, sm.pair_student))].tolist()
    early = np.flatnonzero(sm.early)
    early = early[np.lexsort((d.arrival_key[early], sm.pair_student[early]))]
    counts = np.bincount(sm.pair_student[early], minlength=sm.n_students)
    arr = sm.pair_program[early].tolist()
    off = sm.offsets.tolist()
    out = []
    pos = 0
    for i in range(sm.n_students):
        c = int(counts[i])
        out.append((da[off[i] : off[i + 1]], arr[pos : pos + c]))
        pos += c
    return out


def _rol_order(sm: SimMarket, utility: np.ndarray) -> np.ndarray:
    """Row order listing each student's ROL: utility descending, ties by program id."""
    return np.lexsort((sm.pair_program, -utility, sm.pair_student))


def _rols(sm: SimMarket, order: np.ndarray) -> Dict[int, Tuple[int, ...]]:
    progs = sm.pair_program[order].tolist()
    off = sm.offsets.tolist()
    return {i: tuple(progs[off[i] : off[i + 1]]) for i in range(sm.n_students)}


def _evaluate(sm: SimMarket, d: SampleDraws, order: np.ndarray, check: bool) -> MechanismSample:
    m = sm.market
    rols = _rols(sm, order)
    match = gs_program_proposing(m, rols, check=False)
    if check:
        ok, pairs = is_stable(m, rols, match)
        if not ok:
            raise InvariantViolation(f"unstable sample matching: {pairs[:3]}")
    I = sm.n_students
    assigned = np.full(I, -1, dtype=np.int64)
    for sid, k in match.assignment.items():
        assigned[sid] = k
    n_prog = int(sm.pair_program.max()) + 1
    caps = np.zeros(n_prog, dtype=np.int64)
    for k, q in m.capacities().items():
        caps[k] = q
    rank = sm.pair_rank
    matched = sm.pair_program == assigned[sm.pair_student]
    held = np.bincount(sm.pair_program[matched], minlength=n_prog)
    worst = np.full(n_prog, -1, dtype=np.int64)
    np.maximum.at(worst, sm.pair_program[matched], rank[matched])
    # ex-post feasible: ranked, and the program has a free seat or a worse admit
    k = sm.pair_program
    feasible = (rank >= 0) & ((held[k] < caps[k]) | (rank <= worst[k]))

    seq = order[feasible[order]]
    st, u = sm.pair_student[seq], d.u_full[seq]
    bad = (st[:-1] == st[1:]) & (u[:-1] <= u[1:])
    in_order = np.ones(I, bool)
    in_order[st[:-1][bad]] = False

    util = np.empty(I)
    util[sm.pair_student[matched]] = d.u_full[matched]
    ext_min = np.minimum.reduceat(np.where(sm.extended, d.u_full, np.inf), sm.offsets[:-1])
    un = assigned < 0
    util[un] = ext_min[un] - GUMBEL_SD
    return MechanismSample(dict(match.assignment), in_order, util)


def run_sample(
    sm: SimMarket,
    seed: int,
    s: int,
    kinds: Sequence[MechanismKind],
    full_info: bool = True,
    check: bool = True,
    keep_omegas: bool = False,
) -> SampleResult:
    d = draw_sample(sm, seed, s)
    I = sm.n_students
    out: Dict[str, MechanismSample] = {}
    omegas = {} if keep_omegas else None
    seqs = _student_sequences(sm, d)
    programs = [s.applications for s in sm.market.students]
    for kind in kinds:
        kind = MechanismKind(kind)
        learned = np.zeros(len(sm.pair_program), int)
        kept = []
        for i in range(I):
            da, arrivals = seqs[i]
            omega = learning_sequence(kind, da, arrivals)
            lam = learning_outcomes(omega)
            sl = sm.rows(i)
            progs = programs[i]
            flags = [lam[k] for k in progs]
            learned[sl] = flags
            if check:
                _check_learning(kind, omega, arrivals, flags)
            kept.append(omega)
        perceived = np.where(learned == 1, d.u_full, d.u_noinfo)
        res = _evaluate(sm, d, _rol_order(sm, perceived), check)
        res.learned = learned
        out[kind.value] = res
        if keep_omegas:
            omegas[kind.value] = kept
    if full_info:
        out[FULL_INFO] = _evaluate(sm, d, _rol_order(sm, d.u_full), check)
    return SampleResult(s, out, omegas)


def _check_learning(kind, omega, arrivals, flags):
    A = len(omega)
    budget = A // 2
    if int(sum(flags)) != budget:
        raise InvariantViolation("learning budget differs from floor(A/2)")
    if arrivals and budget >= 1:
        if kind is MechanismKind.DOSV and omega[0] != arrivals[0]:
            raise InvariantViolation("DoSV student did not learn her first early offer first")
        if kind is MechanismKind.HYBRID:
            e = min(len(arrivals), budget)
            if not set(omega[:e]) <= set(arrivals):
                raise InvariantViolation("Hybrid student learned a non-offer before her early offers")


def run_samples(
    sm: SimMarket,
    seed: int,
    n_samples: int,
    kinds: Sequence[MechanismKind] = tuple(MechanismKind),
    threads: int = 1,
    check: bool = True,
) -> List[SampleResult]:
    """Run every sample; sample ``s`` draws only from streams keyed by ``(seed, TAG_MC, s, tag)``."""
    kinds = [MechanismKind(k) for k in kinds]

    def job(s):
        return run_sample(sm, seed, s, kinds, check=check)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(job, range(n_samples)))
    return [job(s) for s in range(n_samples)]


@dataclass
class ComparisonStats:
    theta: Dict[str, float]
    eu: Dict[str, np.ndarray]
    pi: Dict[Tuple[str, str], Tuple[float, float, float]] = field(default_factory=dict)


DEFAULT_PAIRS = (
    (FULL_INFO, "da"),
    ("dosv", "da"),
    ("hybrid", "da"),
    ("hybrid", "dosv"),
)


def compare(results: Sequence[SampleResult], pairs=DEFAULT_PAIRS) -> ComparisonStats:
    """Feasible-set ranking accuracy, expected utilities and pairwise welfare shares."""
    if not results:
        raise ValueError("no samples")
    names = list(results[0].by_mechanism)
    for r in results:
        if list(r.by_mechanism) != names:
            raise ValueError("samples cover different mechanisms")
    S = len(results)
    theta, eu = {}, {}
    for name in names:
        hits = np.stack([r.by_mechanism[name].in_order for r in results])
        theta[name] = float(hits.sum()) / hits.size
        # ordered accumulation keeps results independent of worker count
        total = np.zeros_like(results[0].by_mechanism[name].utility)
        for r in results:
            total = total + r.by_mechanism[name].utility
        eu[name] = total / S
    pi = {}
    for a, b in pairs:
        if a not in eu or b not in eu:
            continue
        n = len(eu[a])
        better = int(np.sum(eu[a] > eu[b]))
        worse = int(np.sum(eu[a] < eu[b]))
        equal = n - better - worse
        pi[(a, b)] = (better / n, worse / n, equal / n)
    return ComparisonStats(theta, eu, pi)


def write_stats(stats: ComparisonStats, out_dir) -> List[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "theta.csv", out / "eu.csv", out / "pi.csv"]
    with open(paths[0], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mechanism", "theta"])
        for name, v in stats.theta.items():
            w.writerow([name, repr(v)])
    with open(paths[1], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["student_id", "mechanism", "eu"])
        for name, arr in stats.eu.items():
            for i, v in enumerate(arr):
                w.writerow([i, name, repr(float(v))])
    with open(paths[2], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["pair", "better", "worse", "equal"])
        for (a, b), (x, y, z) in stats.pi.items():
            w.writerow([f"{a}_vs_{b}", repr(x), repr(y), repr(z)])
    return paths


def write_sample_matchings(results: Sequence[SampleResult], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample", "mechanism", "student_id", "program_id"])
        for r in results:
            for name, ms in r.by_mechanism.items():
                for sid in sorted(ms.matching):
                    w.writerow([r.index, name, sid, ms.matching[sid]])
    return path
