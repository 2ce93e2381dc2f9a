"""Command-line entry point: ``verify``, ``simulate``, ``fit`` and ``gen-market``.

Exit codes: 0 success, 1 a check or fit failed, 2 bad usage, config or input data.
Every command writes ``manifest.json`` into its output directory.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import math
import os
import sys
import tempfile
import time
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__, bundled
from .choice import (
    BASE_COVARIATES,
    ChoiceDataset,
    IdentificationError,
    LogitParams,
    SchemaError,
    distance_equivalent,
    fit_mle,
    marginal_effect_early_offer,
    write_fit_report,
)
from .market import TAG_MC, MechanismKind, RngStream, as_fraction
from .simulation import (
    InvariantViolation,
    SimConfig,
    SimMarket,
    compare,
    generate_market,
    run_samples,
    write_sample_matchings,
    write_stats,
)
from .two_univ import (
    CASES,
    K_MIDPOINT,
    LEMMA2_LABELS,
    SYMBOLIC_LEARNING,
    TABLE1_FLAGGED,
    ArrivalCase,
    admissible_k_interval,
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

TABLE_TOL = 0.05  # displayed units
CLOSED_FORM_TOL = 1e-12
MC_SIGMAS = 3.0
DISTANCE_REFERENCE_KM = 126.0

# admissible parameters for the counterexample: X1 ~ U(3/4 -/+ 1/200), X2 ~ U(0, 1)
COUNTEREXAMPLE = dict(mu1=0.75, delta=0.005, p1_0=0.3, p2_0=0.8, k=0.015)


class UsageError(Exception):
    """Bad flags, config or input data (exit 2)."""


@dataclass
class RunManifest:
    command: str
    seed: Optional[int]
    config_sha256: Optional[str]
    version: str = __version__
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: List[str] = field(default_factory=list)
    duration_s: float = 0.0
    status: str = "ok"

    def write(self, out_dir: Path) -> Path:
        """Write ``manifest.json`` atomically (temp file, then rename)."""
        path = out_dir / "manifest.json"
        payload = dict(self.__dict__)
        payload["outputs"] = [{"file": name, "sha256": _sha256_file(out_dir / name)} for name in sorted(self.outputs)]
        fd, tmp = tempfile.mkstemp(dir=out_dir, prefix=".manifest-", suffix=".json")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
        return path


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _resolve_input(text: str) -> Path:
    """Filesystem path, or ``builtin:NAME`` for a file bundled with the package."""
    if text.startswith("builtin:"):
        try:
            return bundled(text[len("builtin:") :])
        except FileNotFoundError as exc:
            raise UsageError(str(exc)) from None
    path = Path(text)
    if not path.exists():
        raise UsageError(f"{text}: no such file or directory")
    return path


def read_config(path: Path) -> Dict[str, str]:
    """Flat ``key = value`` file; ``#`` starts a comment line."""
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#",), delimiters=("=",))
    parser.optionxform = str
    try:
        parser.read_string("[config]\n" + path.read_text(encoding="utf-8"), source=str(path))
    except configparser.Error as exc:
        raise UsageError(f"{path}: cannot parse config: {exc}") from None
    return dict(parser["config"])


def load_sim_config(path: Path, seed: Optional[int]) -> SimConfig:
    kv = read_config(path)
    if seed is not None:
        kv["seed"] = str(seed)
    try:
        return SimConfig.from_mapping(kv)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{path}: {exc}") from None


def resolve_threads(flag: Optional[int]) -> int:
    if flag is not None:
        threads = flag
    else:
        env = os.environ.get("MATCHLAB_THREADS", "1")
        try:
            threads = int(env)
        except ValueError:
            raise UsageError(f"MATCHLAB_THREADS must be an integer, got {env!r}") from None
    if threads < 1:
        raise UsageError("thread count must be at least 1")
    return threads


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (float, np.floating, Fraction)):
        return repr(float(x))
    return str(x)


def _write_rows(path: Path, header: Sequence[str], rows) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


# --- verify -----------------------------------------------------------------------

@dataclass
class CheckRow:
    lemma: str
    case: str
    k: float
    value: float
    ok: bool


def parse_k(text: str):
    """``"grid"`` or a rational/decimal learning cost inside the admissible interval."""
    if text == "grid":
        return "grid"
    try:
        k = as_fraction(text)
    except (ValueError, ZeroDivisionError):
        raise UsageError(f"--k expects num/den, a decimal or 'grid', got {text!r}") from None
    lo, hi = admissible_k_interval(assumption2_params())
    if not lo < k < hi:
        raise UsageError(f"--k {text} lies outside the admissible interval ({lo}, {hi})")
    return k


def lemma_rows(k) -> List[CheckRow]:
    """Early-offer, first-offer and welfare-ordering checks at one learning cost."""
    params = assumption2_params(k)
    kf = float(k)
    rows = []
    for label, value, closed in zip(LEMMA2_LABELS, early_offer_effects(params), early_offer_effects_closed_form(kf)):
        rows.append(CheckRow("lemma2", label, kf, value, value > 0 and abs(value - closed) <= CLOSED_FORM_TOL))
    closed = first_offer_effect_closed_form(kf)
    for label, value in zip(("univ1", "univ2"), first_offer_effects(params)):
        rows.append(CheckRow("lemma3", label, kf, value, value > 0 and abs(value - closed) <= CLOSED_FORM_TOL))
    for case, cmp in welfare_comparisons(params).items():
        values = {
            "hybrid > da": cmp.hybrid_minus_da,
            "hybrid >= dosv": cmp.hybrid_minus_dosv,
            "hybrid == dosv": cmp.hybrid_minus_dosv,
            "hybrid > dosv": cmp.hybrid_minus_dosv,
            "dosv > da": cmp.dosv_minus_da,
            "da > dosv": -cmp.dosv_minus_da,
            "all equal": max(abs(cmp.hybrid_minus_da), abs(cmp.hybrid_minus_dosv), abs(cmp.dosv_minus_da)),
        }
        for name, ok in cmp.sign_checks(CLOSED_FORM_TOL).items():
            rows.append(CheckRow("lemma4", f"{case.label}: {name}", kf, values[name], ok))
        if case is ArrivalCase.TWO_ONE:
            gap = cmp.hybrid_minus_dosv - hybrid_minus_dosv_closed_form(kf)
            rows.append(CheckRow("lemma4", f"{case.label}: hybrid - dosv closed form", kf, cmp.hybrid_minus_dosv, abs(gap) <= CLOSED_FORM_TOL))
    return rows


def counterexample_rows() -> List[CheckRow]:
    c = COUNTEREXAMPLE
    res = counterexample_effects(**c)
    expected = (c["mu1"] - 1, c["mu1"] - 1, 0.0, 0.0)
    labels = ("univ1: O{1} - O_empty", "univ1: O{1,2} - O{2}", "univ2: O{2} - O_empty", "univ2: O{1,2} - O{1}")
    rows = [
        CheckRow("counterexample", label, c["k"], v, v == e) for label, v, e in zip(labels, res.early_offer, expected)
    ]
    for label, v in zip(("first offer univ1", "first offer univ2"), res.first_offer):
        rows.append(CheckRow("counterexample", label, c["k"], v, v == 0.0))
    mean = math.fsum(res.early_offer) / len(res.early_offer)
    rows.append(CheckRow("counterexample", "equal-weight average of early-offer effects", c["k"], mean, mean < 0))
    return rows


def mc_rows(n_draws: int, stream: RngStream, threads: int) -> List[CheckRow]:
    """Monte Carlo checks of the derived values behind the flagged and symbolic cells."""
    params = assumption2_params(K_MIDPOINT)
    kf = float(K_MIDPOINT)
    targets = sorted(set(SYMBOLIC_LEARNING) | set(TABLE1_FLAGGED), key=lambda t: (t[0], t[1], CASES.index(t[2])))
    rows = []
    for n, (mech, stat, case) in enumerate(targets):
        kind = MechanismKind(mech)
        est = mc_oracle(kind, case, params, n_draws, stream.child(n), threads)
        index = 0 if stat.endswith("1") else 1
        value, se = (est.learn[index], est.learn_se[index]) if stat.startswith("learn") else (est.top[index], est.top_se[index])
        derived = statistic(kind, case, stat, params)
        ok = abs(value - derived) <= MC_SIGMAS * se
        rows.append(CheckRow("mc_oracle", f"{mech} {stat} {case.label}", kf, value, ok))
    return rows


def cmd_verify(args) -> int:
    k = parse_k(args.k)
    threads = resolve_threads(args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("verify", args.seed, None)
    manifest.inputs["k"] = args.k
    start = time.perf_counter()

    table_k = K_MIDPOINT if k == "grid" else k
    compare_printed = table_k == K_MIDPOINT
    cells = reproduce_table1(assumption2_params(table_k))
    failures = []
    table_rows = []
    for cell in cells:
        err = cell.abs_err if compare_printed else None
        table_rows.append((cell.mechanism, cell.case.label, cell.statistic, cell.computed, cell.printed if compare_printed else None, err))
        if compare_printed and not cell.flagged and cell.abs_err > TABLE_TOL:
            failures.append(f"table1 {cell.mechanism} {cell.statistic} {cell.case.label}: {cell.computed:.3f} vs {cell.printed}")
    _write_rows(out / "table1_reproduction.csv", ("mechanism", "case", "statistic", "computed", "paper", "abs_err"), table_rows)

    ks = k_grid(assumption2_params()) if k == "grid" else [k]
    checks: List[CheckRow] = []
    for kk in ks:
        checks.extend(lemma_rows(kk))
    checks.extend(counterexample_rows())
    if args.mc_draws:
        if args.mc_draws < 10_000:
            raise UsageError("--mc-draws must be 0 (skip) or at least 10000")
        checks.extend(mc_rows(args.mc_draws, RngStream(args.seed, (TAG_MC,)), threads))
    _write_rows(
        out / "lemma_signs.csv",
        ("lemma", "case", "k", "value", "sign_ok"),
        ((r.lemma, r.case, r.k, r.value, r.ok) for r in checks),
    )
    failures.extend(f"{r.lemma} {r.case} k={r.k!r}: {r.value!r}" for r in checks if not r.ok)

    manifest.outputs = ["table1_reproduction.csv", "lemma_signs.csv"]
    manifest.duration_s = time.perf_counter() - start
    manifest.status = "failed" if failures else "ok"
    manifest.write(out)
    n_cells = len(cells) if compare_printed else 0
    print(f"verify: {n_cells} table cells compared, {len(checks)} checks, {len(failures)} failures")
    for f in failures:
        print(f"FAILED {f}", file=sys.stderr)
    return 1 if failures else 0


# --- simulate / gen-market -----------------------------------------------------------

def parse_mechanisms(text: str) -> List[MechanismKind]:
    kinds = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            kinds.append(MechanismKind.parse(part))
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    if len(kinds) != len(set(kinds)):
        raise UsageError("--mechanisms repeats a mechanism")
    if not kinds:
        raise UsageError("--mechanisms is empty")
    return kinds


def cmd_simulate(args) -> int:
    cfg_path = _resolve_input(args.config)
    cfg = load_sim_config(cfg_path, args.seed)
    kinds = parse_mechanisms(args.mechanisms)
    threads = resolve_threads(args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("simulate", cfg.seed, _sha256_file(cfg_path))
    start = time.perf_counter()
    if args.market:
        market_dir = _resolve_input(args.market)
        try:
            sm = SimMarket.read_csv(market_dir)
        except (KeyError, ValueError) as exc:
            raise UsageError(f"{market_dir}: cannot read market: {exc}") from None
        manifest.inputs["market_sha256"] = sm.digest()
    else:
        sm = generate_market(cfg)
    try:
        results = run_samples(sm, cfg.seed, cfg.n_samples, kinds, threads=threads)
    except InvariantViolation as exc:
        print(f"simulate: invariant violated: {exc}", file=sys.stderr)
        return 1
    stats = compare(results, pairs=_pairs_for(kinds))
    outputs = write_stats(stats, out)
    if args.save_matchings:
        outputs.append(write_sample_matchings(results, out / "matchings.csv"))
    manifest.outputs = [Path(p).name for p in outputs]
    manifest.duration_s = time.perf_counter() - start
    manifest.write(out)
    theta = ", ".join(f"{name}={v:.4f}" for name, v in stats.theta.items())
    print(f"simulate: {cfg.n_samples} samples, theta: {theta}")
    return 0


def _pairs_for(kinds: Sequence[MechanismKind]):
    names = [k.value for k in kinds]
    pairs = [("full_info", n) for n in names]
    order = ["da", "dosv", "hybrid"]
    present = [n for n in order if n in names]
    pairs += [(b, a) for i, a in enumerate(present) for b in present[i + 1 :]]
    return tuple(pairs)


def cmd_gen_market(args) -> int:
    cfg_path = _resolve_input(args.config)
    cfg = load_sim_config(cfg_path, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("gen-market", cfg.seed, _sha256_file(cfg_path))
    start = time.perf_counter()
    sm = generate_market(cfg)
    manifest.outputs = [Path(p).name for p in sm.write_csv(out)]
    manifest.inputs["market_sha256"] = sm.digest()
    manifest.duration_s = time.perf_counter() - start
    manifest.write(out)
    print(f"gen-market: {sm.n_students} students, {len(sm.market.programs)} programs written to {out}")
    return 0


# --- fit -------------------------------------------------------------------------------

def cmd_fit(args) -> int:
    data_path = _resolve_input(args.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("fit", None, None)
    manifest.inputs["dataset_sha256"] = _sha256_file(data_path)
    manifest.inputs["mode"] = args.mode
    start = time.perf_counter()
    try:
        data = ChoiceDataset.read_csv(data_path)
        init = LogitParams.zeros(BASE_COVARIATES, sorted(set(data.program_id.tolist())))
        params, cov, report = fit_mle(data, args.mode, init)
    except (SchemaError, IdentificationError) as exc:
        raise UsageError(f"{data_path}: {exc}") from None

    outputs = [write_fit_report(params, cov, out / "estimates.csv").name]
    _write_rows(
        out / "convergence.csv",
        ("converged", "iterations", "grad_max_norm", "loglik", "message"),
        [(report.converged, report.iterations, report.grad_max_norm, report.loglik, report.message)],
    )
    outputs.append("convergence.csv")
    me = marginal_effect_early_offer(params, data)
    _write_rows(
        out / "marginal_effects.csv",
        ("baseline", "early_offer", "first_early_offer"),
        [(me.baseline, me.early_offer, me.first_early_offer)],
    )
    outputs.append("marginal_effects.csv")
    gd, gd2 = params.coef("distance_km"), params.coef("distance_km_sq")
    rows = []
    for name, du in (
        ("early_offer", params.coef("early_offer")),
        ("first_early_offer", params.coef("early_offer") + params.coef("first_early_offer")),
    ):
        try:
            km = distance_equivalent(gd, gd2, du, args.at_distance_km)
        except ValueError:
            km = None
        rows.append((name, du, args.at_distance_km, km))
    _write_rows(out / "distance_equivalents.csv", ("effect", "utility", "at_distance_km", "distance_km"), rows)
    outputs.append("distance_equivalents.csv")

    manifest.outputs = outputs
    manifest.duration_s = time.perf_counter() - start
    manifest.status = "ok" if report.converged else "not converged"
    manifest.write(out)
    if not report.converged:
        print(f"fit: did not converge: {report.message} (max |grad| {report.grad_max_norm:.3g})", file=sys.stderr)
        return 1
    print(f"fit: converged in {report.iterations} iterations, loglik {report.loglik:.4f}")
    return 0


# --- entry point ----------------------------------------------------------------------------

def _seed(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must lie in [0, 2^64)")
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="matchlab", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"matchlab {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, seed_default):
        p.add_argument("--out", default="out", help="output directory (default: out)")
        p.add_argument("--seed", type=_seed, default=seed_default, help="root seed for every random stream")
        p.add_argument("--threads", type=int, default=None, help="worker threads (default: $MATCHLAB_THREADS or 1)")

    p = sub.add_parser("verify", help="two-university checks: table, lemma signs, counterexample, Monte Carlo")
    common(p, 0)
    p.add_argument("--k", default=f"{K_MIDPOINT.numerator}/{K_MIDPOINT.denominator}", help="learning cost num/den, or 'grid'")
    p.add_argument("--mc-draws", type=int, default=10_000_000, help="Monte Carlo draws per checked cell (0 skips)")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("simulate", help="Monte Carlo comparison of mechanisms on a synthetic market")
    common(p, None)
    p.add_argument("--config", required=True, help="key = value config file, or builtin:NAME")
    p.add_argument("--market", help="directory written by gen-market (default: generate from the config)")
    p.add_argument("--mechanisms", default="da,dosv,hybrid")
    p.add_argument("--save-matchings", action="store_true", help="also write per-sample matchings")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="conditional or rank-ordered logit on a choice dataset")
    common(p, None)
    p.add_argument("dataset", help="dataset CSV, or builtin:NAME")
    p.add_argument("--mode", choices=("acceptance", "ranked"), default="acceptance")
    p.add_argument("--at-distance-km", type=float, default=DISTANCE_REFERENCE_KM)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("gen-market", help="write a synthetic market as CSV files")
    common(p, None)
    p.add_argument("--config", required=True, help="key = value config file, or builtin:NAME")
    p.set_defaults(func=cmd_gen_market)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"matchlab {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
