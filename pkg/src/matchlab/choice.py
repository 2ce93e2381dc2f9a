"""Conditional logit and rank-ordered (exploded) logit estimation.

Only feasible rows enter the likelihoods. Program fixed effects are dummies
with the lowest program id as the reference level.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
from scipy import optimize

BASE_COVARIATES = ("early_offer", "first_early_offer", "distance_km", "distance_km_sq", "in_region")
DATASET_COLUMNS = (
    "student_id",
    "program_id",
    "feasible",
    "early_offer",
    "first_early_offer",
    "distance_km",
    "in_region",
    "chosen",
    "rank_position",
)


class SchemaError(ValueError):
    """Dataset does not conform to the expected layout or coding."""


class IdentificationError(ValueError):
    """Design matrix is rank deficient after removing within-student constants."""


@dataclass
class ChoiceDataset:
    """Student-by-program rows. ``rank_position`` 0 means unranked (pooled)."""

    student_id: np.ndarray
    program_id: np.ndarray
    feasible: np.ndarray
    early_offer: np.ndarray
    first_early_offer: np.ndarray
    distance_km: np.ndarray
    in_region: np.ndarray
    chosen: np.ndarray
    rank_position: np.ndarray

    def __post_init__(self):
        for name in DATASET_COLUMNS:
            arr = np.asarray(getattr(self, name))
            if name in ("distance_km",):
                arr = arr.astype(float)
            else:
                arr = arr.astype(np.int64)
            setattr(self, name, arr)
        n = len(self.student_id)
        if any(len(getattr(self, c)) != n for c in DATASET_COLUMNS):
            raise SchemaError("columns have different lengths")

    def __len__(self):
        return len(self.student_id)

    def subset(self, mask: np.ndarray) -> "ChoiceDataset":
        return ChoiceDataset(**{c: getattr(self, c)[mask] for c in DATASET_COLUMNS})

    @classmethod
    def from_rows(cls, rows: Sequence[dict]) -> "ChoiceDataset":
        cols = {c: [] for c in DATASET_COLUMNS}
        for r in rows:
            for c in DATASET_COLUMNS:
                cols[c].append(r[c])
        return cls(**{c: np.array(v) for c, v in cols.items()})

    @classmethod
    def read_csv(cls, path) -> "ChoiceDataset":
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            missing = [c for c in DATASET_COLUMNS if c not in (reader.fieldnames or [])]
            if missing:
                raise SchemaError(f"dataset is missing columns {missing}")
            rows = list(reader)
        try:
            return cls(
                **{
                    c: np.array([float(r[c]) if c == "distance_km" else int(r[c]) for r in rows])
                    for c in DATASET_COLUMNS
                }
            )
        except ValueError as exc:
            raise SchemaError(f"unparseable dataset value: {exc}") from None

    def write_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(DATASET_COLUMNS)
            for i in range(len(self)):
                w.writerow(
                    [
                        repr(float(self.distance_km[i])) if c == "distance_km" else int(getattr(self, c)[i])
                        for c in DATASET_COLUMNS
                    ]
                )
        return path


@dataclass
class LogitParams:
    """Coefficients on covariates (``beta``) and program fixed effects (``theta``)."""

    beta: np.ndarray
    theta: np.ndarray
    covariates: Tuple[str, ...]
    programs: Tuple[int, ...]  # programs[0] is the reference with theta fixed at 0

    @property
    def names(self) -> List[str]:
        return list(self.covariates) + [f"theta_{k}" for k in self.programs[1:]]

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.beta, float), np.asarray(self.theta, float)])

    def with_vector(self, v: np.ndarray) -> "LogitParams":
        nb = len(self.covariates)
        return LogitParams(np.array(v[:nb], float), np.array(v[nb:], float), self.covariates, self.programs)

    def coef(self, name: str) -> float:
        return float(self.vector[self.names.index(name)])

    @classmethod
    def zeros(cls, covariates: Sequence[str], programs: Sequence[int]) -> "LogitParams":
        programs = tuple(sorted(programs))
        return cls(np.zeros(len(covariates)), np.zeros(max(0, len(programs) - 1)), tuple(covariates), programs)


def covariate_matrix(data: ChoiceDataset, covariates: Sequence[str]) -> np.ndarray:
    cols = []
    for c in covariates:
        if c == "distance_km_sq":
            cols.append(data.distance_km ** 2)
        else:
            cols.append(getattr(data, c).astype(float))
    return np.column_stack(cols) if cols else np.zeros((len(data), 0))


def design(data: ChoiceDataset, params: LogitParams) -> np.ndarray:
    X = covariate_matrix(data, params.covariates)
    fe = np.column_stack([(data.program_id == k).astype(float) for k in params.programs[1:]]) if len(params.programs) > 1 else np.zeros((len(data), 0))
    return np.hstack([X, fe])


def clogit_prob(params, X: np.ndarray) -> np.ndarray:
    """Choice probabilities over one student's feasible alternatives.

    ``params`` is a LogitParams or a plain coefficient vector; ``X`` holds one
    design row per feasible alternative.
    """
    X = np.atleast_2d(np.asarray(X, float))
    if X.shape[0] == 0:
        raise ValueError("empty feasible set")
    b = params.vector if isinstance(params, LogitParams) else np.asarray(params, float)
    v = X @ b
    v = v - v.max()
    e = np.exp(v)
    return e / e.sum()


@dataclass
class _Events:
    """Choice events flattened: event e has alternatives rows[starts[e]:starts[e+1]]."""

    X: np.ndarray  # alternative design rows, grouped by event
    starts: np.ndarray
    chosen: np.ndarray  # index into X of each event's chosen row
    student: np.ndarray  # student of each event

    @property
    def n_events(self) -> int:
        return len(self.chosen)


def _grouped(data: ChoiceDataset):
    order = np.lexsort((data.program_id, data.student_id))
    sids = data.student_id[order]
    bounds = np.flatnonzero(np.r_[True, sids[1:] != sids[:-1], True])
    return order, bounds


def _acceptance_events(data: ChoiceDataset, Xfull: np.ndarray) -> _Events:
    feas = data.feasible == 1
    order, bounds = _grouped(data)
    rows, starts, chosen, student = [], [0], [], []
    for a, b in zip(bounds[:-1], bounds[1:]):
        idx = order[a:b]
        idx = idx[feas[idx]]
        picks = idx[data.chosen[idx] == 1]
        n_chosen_all = int((data.chosen[order[a:b]] == 1).sum())
        sid = int(data.student_id[order[a]])
        if n_chosen_all != 1 or len(picks) != 1:
            raise SchemaError(f"student {sid}: acceptance mode needs exactly one chosen feasible program")
        if len(idx) < 2:
            # a single feasible program carries no information
            continue
        chosen.append(len(rows) + int(np.flatnonzero(idx == picks[0])[0]))
        rows.extend(idx.tolist())
        starts.append(len(rows))
        student.append(sid)
    X = Xfull[np.array(rows, dtype=np.int64)] if rows else np.zeros((0, Xfull.shape[1]))
    return _Events(X, np.array(starts), np.array(chosen, dtype=np.int64), np.array(student))


def _ranked_events(data: ChoiceDataset, Xfull: np.ndarray) -> _Events:
    """Exploded choice events: position r is chosen from everything ranked r or
    later plus the unranked (pooled) feasible rows."""
    feas = data.feasible == 1
    order, bounds = _grouped(data)
    rows, starts, chosen, student = [], [0], [], []
    for a, b in zip(bounds[:-1], bounds[1:]):
        idx = order[a:b]
        sid = int(data.student_id[order[a]])
        if np.any(data.rank_position[idx[~feas[idx]]] != 0):
            raise SchemaError(f"student {sid}: infeasible program carries a rank position")
        idx = idx[feas[idx]]
        ranks = data.rank_position[idx]
        if np.any(ranks < 0):
            raise SchemaError(f"student {sid}: negative rank position")
        ranked = np.sort(ranks[ranks > 0])
        if len(ranked) == 0 or not np.array_equal(ranked, np.arange(1, len(ranked) + 1)):
            raise SchemaError(f"student {sid}: rank positions must be 1..r without gaps or repeats")
        for r in range(1, len(ranked) + 1):
            remaining = idx[(ranks >= r) | (ranks == 0)]
            if len(remaining) < 2:
                continue
            pick = int(np.flatnonzero(data.rank_position[remaining] == r)[0])
            chosen.append(len(rows) + pick)
            rows.extend(remaining.tolist())
            starts.append(len(rows))
            student.append(sid)
    X = Xfull[np.array(rows, dtype=np.int64)] if rows else np.zeros((0, Xfull.shape[1]))
    return _Events(X, np.array(starts), np.array(chosen, dtype=np.int64), np.array(student))


def build_events(data: ChoiceDataset, params: LogitParams, mode: str) -> _Events:
    Xfull = design(data, params)
    if mode == "acceptance":
        return _acceptance_events(data, Xfull)
    if mode == "ranked":
        return _ranked_events(data, Xfull)
    raise ValueError(f"unknown mode {mode!r}")


def _event_terms(b: np.ndarray, ev: _Events, hessian: bool = False):
    if ev.n_events == 0:
        p = len(b)
        return 0.0, np.zeros(p), (np.zeros((p, p)) if hessian else None)
    v = ev.X @ b
    seg = ev.starts[:-1]
    vmax = np.maximum.reduceat(v, seg)
    counts = np.diff(ev.starts)
    shifted = v - np.repeat(vmax, counts)
    e = np.exp(shifted)
    denom = np.add.reduceat(e, seg)
    logden = np.log(denom) + vmax
    ll = float(np.sum(v[ev.chosen] - logden))
    prob = e / np.repeat(denom, counts)
    xbar = np.add.reduceat(prob[:, None] * ev.X, seg, axis=0)
    grad = (ev.X[ev.chosen] - xbar).sum(axis=0)
    H = None
    if hessian:
        dev = ev.X - np.repeat(xbar, counts, axis=0)
        H = -(dev * prob[:, None]).T @ dev
    return ll, grad, H


def _as_vector(params) -> np.ndarray:
    return params.vector if isinstance(params, LogitParams) else np.asarray(params, float)


def clogit_loglik_grad(params: LogitParams, data: ChoiceDataset) -> Tuple[float, np.ndarray]:
    """Acceptance-mode log-likelihood and its gradient."""
    ev = build_events(data, params, "acceptance")
    ll, g, _ = _event_terms(params.vector, ev)
    return ll, g


def rologit_loglik_grad(params: LogitParams, data: ChoiceDataset) -> Tuple[float, np.ndarray]:
    """Exploded-logit log-likelihood and gradient over the coded rank prefixes."""
    ev = build_events(data, params, "ranked")
    ll, g, _ = _event_terms(params.vector, ev)
    return ll, g


@dataclass
class FitReport:
    converged: bool
    iterations: int
    grad_max_norm: float
    loglik: float
    message: str = ""


def _check_identified(ev: _Events, names: Sequence[str]):
    if ev.n_events == 0:
        raise IdentificationError("no choice event with at least two feasible alternatives")
    counts = np.diff(ev.starts)
    means = np.add.reduceat(ev.X, ev.starts[:-1], axis=0) / counts[:, None]
    dev = ev.X - np.repeat(means, counts, axis=0)
    rank = np.linalg.matrix_rank(dev)
    if rank < dev.shape[1]:
        scale = np.abs(dev).max(axis=0)
        dead = [names[i] for i in np.flatnonzero(scale == 0)]
        detail = f"; no within-choice-set variation in {dead}" if dead else ""
        raise IdentificationError(f"design has rank {rank} < {dev.shape[1]} parameters{detail}")


def fit_mle(
    data: ChoiceDataset,
    mode: str,
    init: LogitParams,
    gtol: float = 1e-8,
    max_iter: int = 500,
) -> Tuple[LogitParams, np.ndarray, FitReport]:
    """Maximum likelihood by BFGS, polished with Newton steps on the exact Hessian.

    Returns parameters, the inverse observed information, and a report. A
    non-converged fit is flagged in the report rather than raised.
    """
    ev = build_events(data, init, mode)
    _check_identified(ev, init.names)
    x0 = init.vector

    def negll(b):
        ll, g, _ = _event_terms(b, ev)
        return -ll, -g

    ll0, g0, H0 = _event_terms(x0, ev, hessian=True)
    iterations = 0
    x = x0
    if np.max(np.abs(g0)) >= gtol:
        # start BFGS from the exact inverse curvature so badly scaled covariates
        # (km against dummies) do not slow it down
        info_inv = np.linalg.inv(-H0)
        info_inv = 0.5 * (info_inv + info_inv.T)
        res = optimize.minimize(
            negll,
            x0,
            jac=True,
            method="BFGS",
            options={"gtol": gtol, "norm": np.inf, "maxiter": max_iter, "hess_inv0": info_inv},
        )
        x = res.x
        iterations = int(res.nit)
    ll, g, H = _event_terms(x, ev, hessian=True)
    # BFGS can stall on floating-point line searches just above gtol
    while np.max(np.abs(g)) >= gtol and iterations < max_iter:
        step = np.linalg.solve(-H, g)
        t = 1.0
        while t > 1e-10:
            ll_new, g_new, H_new = _event_terms(x + t * step, ev, hessian=True)
            if ll_new >= ll + 1e-4 * t * float(g @ step) or t <= 1e-6:
                break
            t *= 0.5
        x = x + t * step
        ll, g, H = ll_new, g_new, H_new
        iterations += 1
    gmax = float(np.max(np.abs(g)))
    cov = np.linalg.inv(-H)
    report = FitReport(gmax < gtol, iterations, gmax, float(ll), "ok" if gmax < gtol else "gradient norm above tolerance")
    return init.with_vector(x), cov, report


def _predicted_probs(b: np.ndarray, data: ChoiceDataset, params: LogitParams, override) -> np.ndarray:
    """P(accept k) for each feasible row after overriding that row's early-offer flags."""
    feas = data.feasible == 1
    d = data.subset(feas)
    X = design(d, params)
    eo_i = params.covariates.index("early_offer")
    fo_i = params.covariates.index("first_early_offer")
    order, bounds = _grouped(d)
    out = []
    for a, bnd in zip(bounds[:-1], bounds[1:]):
        idx = order[a:bnd]
        Xs = X[idx]
        v = Xs @ b
        for r in range(len(idx)):
            vr = v.copy()
            xr = Xs[r].copy()
            xr[eo_i], xr[fo_i] = override
            vr[r] = xr @ b
            vr -= vr.max()
            e = np.exp(vr)
            out.append(e[r] / e.sum())
    return np.array(out)


@dataclass(frozen=True)
class MarginalEffects:
    baseline: float
    early_offer: float
    first_early_offer: float


def marginal_effect_early_offer(params: LogitParams, data: ChoiceDataset) -> MarginalEffects:
    """Average change in predicted acceptance from switching one program's early-offer flags on.

    For every feasible (student, program) row, the program's flags are set to
    (1, 0) for a non-first early offer, (1, 1) for a first early offer and
    (0, 0) for the baseline, with everything else kept at observed values.
    """
    b = params.vector
    base = _predicted_probs(b, data, params, (0.0, 0.0))
    eo = _predicted_probs(b, data, params, (1.0, 0.0))
    fo = _predicted_probs(b, data, params, (1.0, 1.0))
    return MarginalEffects(float(base.mean()), float((eo - base).mean()), float((fo - base).mean()))


def distance_equivalent(gamma_d: float, gamma_d2: float, delta_utility: float, at_distance: float) -> float:
    """Distance reduction from ``at_distance`` worth ``delta_utility`` in utility.

    Solves ``g(d - D) - g(d) = delta_utility`` with ``g(x) = gamma_d x + gamma_d2 x^2``
    and returns the root closest to 0 within ``[0, d]``.
    """
    d = float(at_distance)
    if delta_utility == 0:
        return 0.0
    # g(d - D) - g(d) = a D^2 + bD with a = gamma_d2, b = -(gamma_d + 2 gamma_d2 d)
    a = gamma_d2
    b = -(gamma_d + 2 * gamma_d2 * d)
    c = -delta_utility
    if a == 0:
        roots = [] if b == 0 else [-c / b]
    else:
        disc = b * b - 4 * a * c
        if disc < 0:
            roots = []
        else:
            s = math.sqrt(disc)
            # numerically stable pair of roots
            q = -0.5 * (b + math.copysign(s, b))
            roots = [q / a] + ([c / q] if q != 0 else [])
    inside = [r for r in roots if -1e-12 <= r <= d + 1e-12]
    if not inside:
        raise ValueError("no distance reduction within [0, d] matches this utility change")
    return float(min(max(r, 0.0) for r in inside))


def write_fit_report(params: LogitParams, cov: np.ndarray, path) -> Path:
    path = Path(path)
    se = np.sqrt(np.clip(np.diag(cov), 0, None))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["name", "estimate", "std_err"])
        for name, est, s in zip(params.names, params.vector, se):
            w.writerow([name, repr(float(est)), repr(float(s))])
    return path


# --- synthetic data --------------------------------------------------------------

def simulate_choice_data(
    n_students: int,
    n_programs: int,
    truth: LogitParams,
    stream,
    mode: str = "acceptance",
    feasible_share: float = 1.0,
) -> ChoiceDataset:
    """Draw a synthetic dataset from the logit model at known parameters.

    Every student faces all programs; early offers are random and the first one
    is a uniformly chosen offer. In ranked mode the coded prefix runs down to
    the highest-ranked early offer (or the whole list if there is none).
    """
    g = stream.generator
    rows = {c: [] for c in DATASET_COLUMNS}
    programs = truth.programs
    for i in range(n_students):
        J = n_programs
        eo = (g.random(J) < 0.4).astype(int)
        fo = np.zeros(J, int)
        if eo.any():
            fo[g.choice(np.flatnonzero(eo))] = 1
        dist = g.uniform(5.0, 400.0, J)
        region = (g.random(J) < 0.3).astype(int)
        feas = (g.random(J) < feasible_share).astype(int)
        if feas.sum() < 2:
            feas[:2] = 1
        tmp = ChoiceDataset(
            np.full(J, i), np.array(programs[:J]), feas, eo, fo, dist, region, np.zeros(J), np.zeros(J)
        )
        u = design(tmp, truth) @ truth.vector + g.gumbel(size=J)
        u_f = np.where(feas == 1, u, -np.inf)
        chosen = np.zeros(J, int)
        chosen[int(np.argmax(u_f))] = 1
        rank = np.zeros(J, int)
        if mode == "ranked":
            order = [j for j in np.argsort(-u_f) if feas[j] == 1]
            for r, j in enumerate(order, start=1):
                rank[j] = r
                if eo[j]:
                    break
        vals = dict(
            student_id=np.full(J, i),
            program_id=np.array(programs[:J]),
            feasible=feas,
            early_offer=eo,
            first_early_offer=fo,
            distance_km=dist,
            in_region=region,
            chosen=chosen,
            rank_position=rank,
        )
        for c in DATASET_COLUMNS:
            rows[c].extend(vals[c].tolist())
    return ChoiceDataset(**{c: np.array(v) for c, v in rows.items()})
