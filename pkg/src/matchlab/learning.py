"""Costly sequential learning over J programs with finitely supported qualities.

A state is a tuple with one slot per program: ``None`` while the program's
quality is unlearned, otherwise its realized value. Programs are indexed
``0..J-1``; offer probabilities are a tuple aligned with them.
"""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

from .market import DiscreteQuality, OfferArrival, RngStream

State = Tuple[Optional[float], ...]
STOP = -1

# an action must beat the incumbent (stop first, then lower indices) by more
# than this; absorbs summation-order noise so exact ties resolve predictably
TIE_TOL = 1e-13


def identity(x: float) -> float:
    return x


@dataclass(frozen=True)
class LearningProblem:
    distributions: Tuple[DiscreteQuality, ...]
    cost: float
    beliefs: Tuple[float, ...]
    utility: Callable[[float], float] = identity

    def __post_init__(self):
        object.__setattr__(self, "distributions", tuple(self.distributions))
        object.__setattr__(self, "beliefs", tuple(float(p) for p in self.beliefs))
        if self.cost < 0:
            raise ValueError("learning cost must be non-negative")
        if len(self.beliefs) != len(self.distributions):
            raise ValueError("one offer probability per program")
        if any(not (0 < p <= 1) for p in self.beliefs):
            raise ValueError("offer probabilities must lie in (0, 1]")
        for d in self.distributions:
            if not isinstance(d, DiscreteQuality):
                raise TypeError("the dynamic program needs finitely supported qualities; discretize uniforms first")

    @property
    def J(self) -> int:
        return len(self.distributions)

    def root(self) -> State:
        return (None,) * self.J

    def with_beliefs(self, beliefs) -> "LearningProblem":
        return replace(self, beliefs=tuple(beliefs))


def update_beliefs(p0: Sequence[float], O: OfferArrival, t: int) -> Tuple[float, ...]:
    """Offer probabilities after period ``t``: 1 for offers that have arrived."""
    if not 0 <= t <= O.J:
        raise ValueError(f"period must lie in 0..{O.J}")
    return tuple(1.0 if O.entries[j] <= t else float(p0[j]) for j in range(len(p0)))


def _values(state: State, prob: LearningProblem) -> List[float]:
    u = prob.utility
    out = []
    for j, x in enumerate(state):
        v = u(x) if x is not None else prob.distributions[j].mean(u)
        out.append(max(0.0, v))
    return out


def rol_value(state: State, prob: LearningProblem) -> Tuple[float, Tuple[int, ...]]:
    """Expected payoff of the truthful ROL at ``state`` and the ROL itself.

    Acceptable programs (positive value) are ranked by value, ties by index.
    """
    v = _values(state, prob)
    order = sorted((j for j in range(len(v)) if v[j] > 0), key=lambda j: (-v[j], j))
    total = 0.0
    reach = 1.0
    for j in order:
        p = prob.beliefs[j]
        total += reach * p * v[j]
        reach *= 1.0 - p
    return total, tuple(order)


def _learned(state: State, j: int, x: float) -> State:
    s = list(state)
    s[j] = x
    return tuple(s)


class Strategy:
    """Optimal learning strategy of one problem, evaluated lazily with memoization."""

    def __init__(self, prob: LearningProblem):
        self.prob = prob
        self._memo: Dict[State, Tuple[float, int]] = {}

    def _solve(self, state: State) -> Tuple[float, int]:
        hit = self._memo.get(state)
        if hit is not None:
            return hit
        prob = self.prob
        best_value, _ = rol_value(state, prob)
        best_action = STOP
        for j in range(prob.J):
            if state[j] is not None:
                continue
            cont = math.fsum(p * self._solve(_learned(state, j, x))[0] for x, p in prob.distributions[j].support)
            value = cont - prob.cost
            if value > best_value + TIE_TOL:
                best_value, best_action = value, j
        self._memo[state] = (best_value, best_action)
        return best_value, best_action

    def action(self, state: State) -> int:
        """Program to learn next, or ``STOP``."""
        return self._solve(tuple(state))[1]

    def value(self, state: Optional[State] = None) -> float:
        return self._solve(self.prob.root() if state is None else tuple(state))[0]

    def reachable_states(self, start: Optional[State] = None) -> Iterator[State]:
        """States visited with positive probability when following the strategy."""
        stack = [self.prob.root() if start is None else tuple(start)]
        seen = set()
        while stack:
            s = stack.pop()
            if s in seen:
                continue
            seen.add(s)
            yield s
            a = self.action(s)
            if a != STOP:
                stack.extend(_learned(s, a, x) for x, _ in self.prob.distributions[a].support)


def optimal_strategy(prob: LearningProblem) -> Tuple[Strategy, float]:
    """Backward recursion over learning states; ties prefer stopping, then the lowest index."""
    strat = Strategy(prob)
    return strat, strat.value()


def _follow(strat: Strategy, state: State, realization: Sequence[float], trace: list, t: int) -> State:
    while True:
        a = strat.action(state)
        if a == STOP:
            return state
        trace.append((t, a))
        state = _learned(state, a, realization[a])


@dataclass
class MyopicPolicy:
    """Period-by-period optimal strategies for a student facing staggered offers.

    In period ``t`` the student re-optimizes at ``p^t(O)`` as if no further
    offers were coming, starting from whatever she has learned so far.
    """

    prob0: LearningProblem
    arrival: OfferArrival
    strategies: Dict[int, Strategy] = field(default_factory=dict)

    @property
    def periods(self) -> List[int]:
        return sorted(self.strategies)

    def _reached(self) -> Dict[int, set]:
        if not hasattr(self, "_reached_cache"):
            reached: Dict[int, set] = {t: set() for t in self.periods}
            for t, s in self.reached_states():
                reached[t].add(s)
            self._reached_cache = reached
        return self._reached_cache

    def _period_action(self, t: int, state: State) -> int:
        # off the period's own path the strategy learns nothing
        if state not in self._reached()[t]:
            return STOP
        return self.strategies[t].action(state)

    def action(self, state: State) -> int:
        """Combined strategy: the action of the one period that prescribes learning, else stop."""
        state = tuple(state)
        for t in self.periods:
            a = self._period_action(t, state)
            if a != STOP:
                return a
        return STOP

    def prescribing_periods(self, state: State) -> List[int]:
        return [t for t in self.periods if self._period_action(t, tuple(state)) != STOP]

    def run(self, realization: Sequence[float]) -> Tuple[State, List[Tuple[int, int]]]:
        """Final state and the (period, program) learning trace for given qualities."""
        state = self.prob0.root()
        trace: List[Tuple[int, int]] = []
        for t in self.periods:
            state = _follow(self.strategies[t], state, realization, trace, t)
        return state, trace

    def outcome_distribution(self) -> Dict[State, float]:
        """Exact probability of each final learning state."""
        out: Dict[State, float] = {}
        dists = self.prob0.distributions

        def walk(pi: int, state: State, w: float):
            if pi == len(self.periods):
                out[state] = out.get(state, 0.0) + w
                return
            a = self.strategies[self.periods[pi]].action(state)
            if a == STOP:
                walk(pi + 1, state, w)
                return
            for x, p in dists[a].support:
                walk(pi, _learned(state, a, x), w * p)

        walk(0, self.prob0.root(), 1.0)
        return out

    def reached_states(self) -> List[Tuple[int, State]]:
        """(period, state) pairs at which some period's strategy is consulted."""
        seen = []
        dists = self.prob0.distributions

        def walk(pi: int, state: State):
            if pi == len(self.periods):
                return
            seen.append((self.periods[pi], state))
            a = self.strategies[self.periods[pi]].action(state)
            if a == STOP:
                walk(pi + 1, state)
                return
            for x, _ in dists[a].support:
                walk(pi, _learned(state, a, x))

        walk(0, self.prob0.root())
        return seen


def myopic_dosv_policy(prob0: LearningProblem, O: OfferArrival) -> MyopicPolicy:
    """Myopic DoSV learning from the first offer's period to the horizon."""
    if len(O.entries) != prob0.J:
        raise ValueError("arrival vector must have one entry per program")
    policy = MyopicPolicy(prob0, O)
    cache: Dict[Tuple[float, ...], Strategy] = {}
    for t in range(O.first_period(), O.J + 1):
        p = update_beliefs(prob0.beliefs, O, t)
        if p not in cache:
            cache[p] = Strategy(prob0.with_beliefs(p))
        policy.strategies[t] = cache[p]
    return policy


def learning_statistics(dist: Dict[State, float], prob: LearningProblem) -> Tuple[List[float], List[float]]:
    """Per program, probability of being learned and of being top-ranked."""
    learn = [0.0] * prob.J
    top = [0.0] * prob.J
    for state, w in dist.items():
        for j, x in enumerate(state):
            if x is not None:
                learn[j] += w
        _, rol = rol_value(state, prob)
        if rol:
            top[rol[0]] += w
    return learn, top


def strategy_distribution(strat: Strategy) -> Dict[State, float]:
    """Exact distribution of final states when following one strategy from the root."""
    out: Dict[State, float] = {}
    dists = strat.prob.distributions

    def walk(state: State, w: float):
        a = strat.action(state)
        if a == STOP:
            out[state] = out.get(state, 0.0) + w
            return
        for x, p in dists[a].support:
            walk(_learned(state, a, x), w * p)

    walk(strat.prob.root(), 1.0)
    return out


def evaluate_distribution(dist: Dict[State, float], prob: LearningProblem) -> float:
    """Expected ROL payoff at ``prob``'s beliefs net of learning costs."""
    return math.fsum(
        w * (rol_value(s, prob)[0] - prob.cost * sum(x is not None for x in s)) for s, w in dist.items()
    )


def is_ordinally_informed(prob: LearningProblem) -> bool:
    """True iff every program's acceptability and every pairwise ranking are known for sure."""
    u = prob.utility
    ranges = []
    for d in prob.distributions:
        vals = [u(x) for x in d.values()]
        lo, hi = min(vals), max(vals)
        if not (lo > 0 or hi <= 0):
            return False
        ranges.append((lo, hi))
    for (lo1, hi1), (lo2, hi2) in itertools.combinations(ranges, 2):
        if not (hi1 < lo2 or hi2 < lo1):
            return False
    return True


def write_strategy_csv(strat: Strategy, path) -> Path:
    """Dump the strategy on every state reachable under it."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["state_unlearned", "state_learned_values", "beliefs", "action"])
        for s in sorted(strat.reachable_states(), key=lambda s: [(x is None, x or 0.0) for x in s]):
            unlearned = ";".join(str(j) for j, x in enumerate(s) if x is None)
            learned = ";".join(f"{j}:{x!r}" for j, x in enumerate(s) if x is not None)
            beliefs = ";".join(repr(p) for p in strat.prob.beliefs)
            a = strat.action(s)
            w.writerow([unlearned, learned, beliefs, "stop" if a == STOP else a])
    return path


class DPAgent:
    """Mechanism agent whose qualities are drawn once and who learns optimally.

    ``programs`` lists the student's applications; ``prob`` carries the prior
    beliefs in the same order. Each ``learn`` call re-solves at the current
    beliefs from the current state, so calls at successive periods reproduce
    the myopic DoSV behaviour.
    """

    def __init__(self, programs: Sequence[int], prob: LearningProblem, stream: RngStream):
        self.programs = tuple(programs)
        self.prob = prob
        g = stream.generator
        self.realization = []
        for d in prob.distributions:
            vals, ps = zip(*d.support)
            self.realization.append(float(vals[g.choice(len(vals), p=ps)]))
        self.state: State = prob.root()
        self._cache: Dict[Tuple[float, ...], Strategy] = {}

    def _beliefs(self, beliefs: Dict[int, float]) -> Tuple[float, ...]:
        return tuple(float(beliefs[k]) for k in self.programs)

    def learn(self, period: int, beliefs: Dict[int, float]) -> List[int]:
        p = self._beliefs(beliefs)
        if p not in self._cache:
            self._cache[p] = Strategy(self.prob.with_beliefs(p))
        trace: list = []
        self.state = _follow(self._cache[p], self.state, self.realization, trace, period)
        return [self.programs[j] for _, j in trace]

    def final_rol(self, beliefs: Dict[int, float]) -> Tuple[int, ...]:
        _, rol = rol_value(self.state, self.prob.with_beliefs(self._beliefs(beliefs)))
        return tuple(self.programs[j] for j in rol)
