"""Command line entry point: ``smallnoise {check,simulate,converge,pde} --config run.json``.

Exit codes: 0 success, 1 numeric failure (divergence, or a failed check when
``--assert`` is given), 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path
from typing import List, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError
from scipy import stats

from . import __version__
from . import approx, model, pde
from .ensemble import run_ensemble
from .errors import ConfigError, DivergenceError, InvalidInputError
from .integrate import pair_differences, solve_ode
from .randomness import TimeGrid

log = logging.getLogger("smallnoise")

COMMANDS = ("check", "simulate", "converge", "pde")
# thresholds used for pass/fail flags (and for the exit code under --assert)
SLOPE_RANGE = (1.85, 2.15)
FINAL_EXCEEDANCE_MAX = 0.01


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PolynomialProblem(_Strict):
    drift: List[List[float]]
    diffusion: List[List[float]]


class PolySpec(_Strict):
    poly: List[float]
    component: int = Field(0, ge=0)


ScalarSpec = Union[float, Literal["zero", "one", "x", "x2"], PolySpec]


class CauchyBlock(_Strict):
    f: ScalarSpec = "one"
    c: ScalarSpec = "zero"
    g: ScalarSpec = "zero"
    c_bound: Optional[float] = Field(None, ge=0)
    f_bound: Optional[float] = Field(None, ge=0)
    ellipticity_k: float = Field(1.0, gt=0)


class Query(_Strict):
    t: float = Field(gt=0)
    x: List[float]


class RunConfig(_Strict):
    command: Literal["check", "simulate", "converge", "pde"]
    problem: Union[Literal["ou", "cubic", "const"], PolynomialProblem] = "ou"
    dims: int = Field(1, ge=1)
    x0: Optional[List[float]] = None
    dt: float = Field(1e-3, gt=0)
    t: float = Field(1.0, gt=0)
    eps: List[float] = Field(default_factory=lambda: [0.1])
    n_paths: int = Field(1000, ge=1)
    seed: int = Field(0, ge=0)
    trunc_level: float = Field(10.0, gt=0)
    scheme: Literal["em", "truncated"] = "truncated"
    mode: Literal["terminal", "sup"] = "terminal"
    delta: Optional[float] = Field(None, gt=0)
    K: Optional[float] = Field(None, ge=0)
    box_halfwidth: float = Field(10.0, gt=0)
    n_samples: int = Field(1000, ge=1)
    independent_seeds: bool = False
    cauchy: Optional[CauchyBlock] = None
    queries: Optional[List[Query]] = None
    out_dir: str = "out"

    @property
    def dim_r(self):
        if isinstance(self.problem, PolynomialProblem):
            return len(self.problem.drift)
        return self.dims

    def grid(self):
        return TimeGrid.from_dt(self.t, self.dt)

    def build_problem(self):
        if isinstance(self.problem, PolynomialProblem):
            return model.polynomial_problem(self.problem.drift, self.problem.diffusion, self.x0,
                                            self.t)
        return model.builtin_problem(self.problem, self.dims, self.x0, self.t)

    def resolved(self, include_output=True):
        """Config as a plain dict, used as the reproducibility header of every output.

        The CSV header leaves out ``out_dir`` so that identical runs written to
        different places stay byte-identical.
        """
        data = self.model_dump(mode="json")
        if not include_output:
            data.pop("out_dir")
        return data


def _semantic_errors(cfg: RunConfig):
    errs = []
    n = int(round(cfg.t / cfg.dt))
    if n < 1 or abs(n * cfg.dt - cfg.t) > 1e-9 * max(1.0, cfg.t):
        errs.append(f"t: {cfg.t} is not an integer multiple of dt={cfg.dt}")
    r = cfg.dim_r
    if isinstance(cfg.problem, PolynomialProblem):
        if len(cfg.problem.diffusion) != r or r == 0:
            errs.append("problem: need one drift and one diffusion coefficient list per component")
        if any(len(c) == 0 for c in cfg.problem.drift + cfg.problem.diffusion):
            errs.append("problem: coefficient lists must be non-empty")
    if cfg.x0 is not None and len(cfg.x0) != r:
        errs.append(f"x0: expected {r} components, got {len(cfg.x0)}")
    if any(not np.isfinite(e) or e < 0 for e in cfg.eps):
        errs.append("eps: values must be finite and >= 0")

    if cfg.command == "simulate":
        if not cfg.eps:
            errs.append("eps: at least one value required")
    elif cfg.command == "converge":
        pos = [e for e in cfg.eps if e > 0]
        if len(pos) < 3 or len(set(pos)) != len(pos) or len(pos) != len(cfg.eps):
            errs.append("eps: >= 3 values required, all distinct and > 0")
        if cfg.n_paths < 2:
            errs.append("n_paths: >= 2 required")
    elif cfg.command == "check":
        if cfg.K is None:
            errs.append("K: required for check")
    elif cfg.command == "pde":
        if cfg.cauchy is None:
            errs.append("cauchy: required for pde")
        if not cfg.queries:
            errs.append("queries: at least one (t, x) query required for pde")
        else:
            for i, q in enumerate(cfg.queries):
                if len(q.x) != r:
                    errs.append(f"queries[{i}].x: expected {r} components, got {len(q.x)}")
                k = q.t / cfg.dt
                if q.t > cfg.t + 1e-12 or abs(k - round(k)) > 1e-9 * max(1.0, k):
                    errs.append(f"queries[{i}].t: {q.t} must be a grid point in (0, {cfg.t}]")
        if not cfg.eps:
            errs.append("eps: at least one value required")
        if cfg.n_paths < 2:
            errs.append("n_paths: >= 2 required")
    return errs


def parse_config(text, overrides=None) -> RunConfig:
    """Parse and fully validate a JSON run configuration.

    ``overrides`` (e.g. from command line flags) replace top-level keys before
    validation.  All problems are collected into one :class:`ConfigError`.
    """
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ConfigError(f"config is not valid UTF-8: {exc}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as exc:
        errs, bad_fields = [], set()
        for e in exc.errors():
            loc = ".".join(str(part) for part in e["loc"]) or "<root>"
            errs.append(f"{loc}: {e['msg']}")
            if e["loc"]:
                bad_fields.add(str(e["loc"][0]))
        errs = sorted(set(errs))
        # cross-field rules on whatever did validate, so the report is complete
        partial = {k: v for k, v in raw.items() if k not in bad_fields}
        try:
            errs += [m for m in _semantic_errors(RunConfig.model_validate(partial))
                     if m.split(":")[0].split(".")[0].split("[")[0] not in bad_fields]
        except ValidationError:
            pass
        raise ConfigError(errs) from None
    errs = _semantic_errors(cfg)
    if errs:
        raise ConfigError(errs)
    try:
        cfg.build_problem()
    except InvalidInputError as exc:
        raise ConfigError(f"problem: {exc}") from None
    return cfg


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path: Path, header, rows, cfg: RunConfig):
    with open(path, "w", newline="") as fh:
        fh.write(f"# smallnoise {__version__}\n")
        fh.write("# config: " + json.dumps(cfg.resolved(include_output=False), sort_keys=True, separators=(",", ":"))
                 + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _scalar_field(spec):
    if isinstance(spec, PolySpec):
        return pde.polynomial(spec.poly, spec.component)
    if isinstance(spec, (int, float)):
        return pde.constant(spec)
    return {"zero": pde.zero, "one": pde.one, "x": pde.coordinate(0),
            "x2": pde.squared_norm}[spec]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _cmd_check(cfg: RunConfig, out: Path, threads):
    p = cfg.build_problem()
    reports = [
        model.check_dissipativity(p, cfg.K, cfg.box_halfwidth, cfg.n_samples, cfg.seed),
        model.check_difference_dissipativity(p, cfg.K, cfg.box_halfwidth, cfg.n_samples, cfg.seed),
        model.estimate_local_lipschitz(p, cfg.trunc_level, cfg.n_samples, cfg.seed),
    ]
    rows = []
    for rep in reports:
        point = "" if rep.violation_point is None else json.dumps(
            [[float(v) for v in pt] for pt in rep.violation_point])
        rows.append([rep.condition_name, rep.satisfied_on_sample, rep.witness_constant,
                     rep.box_halfwidth, rep.n_samples, rep.seed, point])
    _write_csv(out / "check.csv", ["condition", "satisfied", "witness_constant", "box_halfwidth",
                                   "n_samples", "seed", "violation_point"], rows, cfg)
    flags = {f"{rep.condition_name}_satisfied": rep.satisfied_on_sample for rep in reports}
    results = {"local_lipschitz_estimate": reports[2].witness_constant}
    return flags, results, None


def _cmd_simulate(cfg: RunConfig, out: Path, threads):
    with np.errstate(over="ignore", invalid="ignore"):
        return _simulate(cfg, out, threads)


def _simulate(cfg: RunConfig, out: Path, threads):
    p = cfg.build_problem()
    grid = cfg.grid()
    ode = solve_ode(p, grid)
    if ode.diverged:
        raise DivergenceError("unperturbed ODE diverged", ())
    level = cfg.trunc_level if cfg.scheme == "truncated" else None
    summary_rows, moment_rows, divergence = [], [], {}

    def reducer(chunk):
        res = chunk.result
        ok = ~res.diverged
        states = res.states[ok]
        # diverged rows carry NaN and are filtered out after the run
        _, term = pair_differences(res.states, ode.states)
        return {
            "diverged": res.diverged,
            "exited": res.exit_index >= 0,
            "terminal": term,
            "state_sum": states.sum(axis=0)[None],
            "sq_sum": np.sum(states * states, axis=-1).sum(axis=0)[None],
        }

    for eps in cfg.eps:
        outp = run_ensemble(p, eps, grid, cfg.n_paths, cfg.seed, reducer, scheme=cfg.scheme,
                            level=level, workers=threads)
        div = np.flatnonzero(outp["diverged"])
        if div.size:
            divergence[repr(float(eps))] = [int(i) for i in div]
        term = outp["terminal"][~outp["diverged"]]
        n_ok = term.size
        est = approx.MCEstimate.from_samples(term) if n_ok else None
        summary_rows.append([
            eps, cfg.scheme, cfg.n_paths, cfg.dt, cfg.t, int(div.size),
            int(np.count_nonzero(outp["exited"])),
            est.mean if est else float("nan"), est.stderr if est else float("nan")])
        if n_ok:
            mean_state = outp["state_sum"].sum(axis=0) / n_ok
            second = outp["sq_sum"].sum(axis=0) / n_ok
            for k, t in enumerate(grid.times):
                moment_rows.append([eps, t, *mean_state[k], second[k], *ode.states[k]])

    r = p.dim_r
    _write_csv(out / "simulate.csv",
               ["epsilon", "scheme", "n_paths", "dt", "t", "n_diverged", "n_exited",
                "mean_terminal_sq_diff", "stderr"], summary_rows, cfg)
    _write_csv(out / "simulate_moments.csv",
               ["epsilon", "t", *[f"mean_x{i + 1}" for i in range(r)], "mean_sq_norm",
                *[f"ode_x{i + 1}" for i in range(r)]], moment_rows, cfg)
    flags = {"no_divergence": not divergence}
    results = {"diverged_paths": divergence}
    failure = None
    if divergence:
        total = sum(len(v) for v in divergence.values())
        failure = f"{total} path(s) diverged; see diverged_paths"
    return flags, results, failure


def _cmd_converge(cfg: RunConfig, out: Path, threads):
    p = cfg.build_problem()
    grid = cfg.grid()
    level = cfg.trunc_level if cfg.scheme == "truncated" else None
    sweep = approx.epsilon_sweep(p, cfg.eps, grid, level, cfg.n_paths, cfg.seed, cfg.mode,
                                 independent_seeds=cfg.independent_seeds, scheme=cfg.scheme,
                                 workers=threads)
    rows = [[e, cfg.mode, est.n_paths, cfg.dt, cfg.t, est.mean, est.stderr]
            for e, est in zip(sweep.epsilons, sweep.sq_error_estimates)]
    _write_csv(out / "converge.csv",
               ["epsilon", "mode", "n_paths", "dt", "t", "mean_sq_err", "stderr"], rows, cfg)
    lo, hi = SLOPE_RANGE
    flags = {"slope_in_range": bool(lo <= sweep.slope_fit <= hi)}
    results = {"slope_fit": sweep.slope_fit, "slope_stderr": sweep.slope_stderr,
               "intercept": sweep.intercept, "a_estimate": sweep.a_estimate,
               "slope_range": list(SLOPE_RANGE)}

    if cfg.delta is not None:
        probs = [approx.exceedance_probability(
            p, e, cfg.delta, grid, level, cfg.n_paths, cfg.seed, scheme=cfg.scheme,
            stream_tag=(i + 1) if cfg.independent_seeds else 0, workers=threads)
            for i, e in enumerate(sweep.epsilons)]
        _write_csv(out / "converge_exceedance.csv",
                   ["epsilon", "delta", "n_paths", "probability", "stderr"],
                   [[e, cfg.delta, pr.n_paths, pr.mean, pr.stderr]
                    for e, pr in zip(sweep.epsilons, probs)], cfg)
        flags["exceedance_decreasing"] = approx.decreasing_beyond_noise(
            [pr.mean for pr in probs], [pr.stderr for pr in probs])
        flags["final_exceedance_small"] = probs[-1].mean < FINAL_EXCEEDANCE_MAX
        results["exceedance"] = [pr.mean for pr in probs]

    if cfg.K is not None:
        moment_ok = {}
        for e in sweep.epsilons:
            _, ok = approx.moment_bound_check(p, e, cfg.K, grid, level, cfg.n_paths, cfg.seed,
                                              scheme=cfg.scheme, workers=threads)
            moment_ok[repr(e)] = ok
        flags["moment_bound_holds"] = all(moment_ok.values())
        results["moment_bound"] = moment_ok
    return flags, results, None


def _cmd_pde(cfg: RunConfig, out: Path, threads):
    p = cfg.build_problem()
    grid = cfg.grid()
    cb = cfg.cauchy
    op = pde.OperatorSpec.from_problem(p, cb.ellipticity_k)
    spec = pde.CauchySpec(f=_scalar_field(cb.f), c=_scalar_field(cb.c), g=_scalar_field(cb.g),
                          c_bound=cb.c_bound, f_bound=cb.f_bound)
    positive = sorted({float(e) for e in cfg.eps if e > 0}, reverse=True)
    rows, flags, per_query, warnings = [], {}, [], []
    for qi, q in enumerate(cfg.queries):
        v0 = pde.solve_cauchy_characteristics(op, spec, q.t, q.x, grid)
        rows.append([v0.t, *v0.x, 0.0, v0.value, v0.uncertainty, 0.0])
        entry = {"t": q.t, "x": list(v0.x), "v0": v0.value}
        sols = [pde.solve_cauchy_mc(op, spec, e, q.t, q.x, grid, cfg.trunc_level, cfg.n_paths,
                                    cfg.seed, workers=threads) for e in positive]
        for s in sols:
            rows.append([s.t, *s.x, s.epsilon, s.value, s.uncertainty, abs(s.value - v0.value)])
            warnings.extend(s.warnings)
        if len(sols) >= 3:
            gaps = [abs(s.value - v0.value) for s in sols]
            ses = [float(np.hypot(s.uncertainty, v0.uncertainty)) for s in sols]
            dec = approx.decreasing_beyond_noise(gaps, ses)
            flags[f"query{qi}_gap_decreasing"] = dec
            entry.update(gaps=gaps, gap_decreasing=dec)
            nz = [(e, gp) for e, gp in zip(positive, gaps) if gp > 0]
            if len(nz) >= 3:
                fit = stats.linregress(np.log([a for a, _ in nz]), np.log([b for _, b in nz]))
                entry.update(slope_fit=float(fit.slope), slope_stderr=float(fit.stderr))
        per_query.append(entry)
    r = p.dim_r
    _write_csv(out / "pde.csv",
               ["t", *[f"x{i + 1}" for i in range(r)], "epsilon", "value", "stderr_or_quaderr",
                "gap_to_v0"], rows, cfg)
    return flags, {"queries": per_query, "warnings": sorted(set(warnings))}, None


_COMMANDS = {"check": _cmd_check, "simulate": _cmd_simulate, "converge": _cmd_converge,
             "pde": _cmd_pde}


def run(cfg: RunConfig, *, threads=1, assert_checks=False, out_dir=None):
    """Execute a validated config, write CSV/JSON artifacts and return the exit code."""
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    summary = {"command": cfg.command, "version": __version__, "seed": cfg.seed,
               "config": cfg.resolved()}
    code = 0
    try:
        flags, results, failure = _COMMANDS[cfg.command](cfg, out, threads)
    except DivergenceError as exc:
        flags, results, failure = {"no_divergence": False}, {
            "diverged_paths": list(exc.path_indices)}, str(exc)
    summary.update(flags=flags, results=results)
    if failure:
        summary["status"] = "diverged"
        summary["failure"] = failure
        log.error("%s", failure)
        code = 1
    elif assert_checks and not all(flags.values()):
        summary["status"] = "assert_failed"
        summary["failed_flags"] = sorted(k for k, v in flags.items() if not v)
        log.error("failed checks: %s", ", ".join(summary["failed_flags"]))
        code = 1
    else:
        summary["status"] = "ok"
    summary["elapsed_seconds"] = round(time.perf_counter() - start, 3)
    with open(out / f"{cfg.command}_summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")
    return code


def _eps_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def build_parser():
    ap = argparse.ArgumentParser(prog="smallnoise", description=__doc__.splitlines()[0])
    ap.add_argument("command", nargs="?", choices=COMMANDS,
                    help="subcommand; defaults to the config's 'command' field")
    ap.add_argument("--config", required=True, help="path to the JSON run configuration")
    ap.add_argument("--seed", type=int, help="master seed (overrides config)")
    ap.add_argument("--threads", type=int, default=1, help="worker threads for path ensembles")
    ap.add_argument("--assert", dest="assert_checks", action="store_true",
                    help="exit 1 when any pass/fail flag is false")
    ap.add_argument("--out-dir", help="output directory (overrides config)")
    ap.add_argument("--scheme", choices=("em", "truncated"))
    ap.add_argument("--trunc-level", type=float)
    ap.add_argument("--dt", type=float)
    ap.add_argument("--t", type=float)
    ap.add_argument("--eps", type=_eps_list, help="comma-separated noise levels")
    ap.add_argument("--independent-seeds", action="store_true", default=None,
                    help="fresh seeds per noise level instead of common random numbers")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("config error: --threads must be >= 1", file=sys.stderr)
        return 2
    overrides = {"command": args.command, "seed": args.seed, "out_dir": args.out_dir,
                 "scheme": args.scheme, "trunc_level": args.trunc_level, "dt": args.dt,
                 "t": args.t, "eps": args.eps, "independent_seeds": args.independent_seeds}
    try:
        text = Path(args.config).read_bytes()
    except OSError as exc:
        print(f"config error: cannot read {args.config}: {exc}", file=sys.stderr)
        return 2
    try:
        raw_command = None
        if args.command:
            try:
                raw_command = json.loads(text).get("command")
            except (ValueError, AttributeError):
                pass
        if args.command and raw_command and raw_command != args.command:
            raise ConfigError(
                f"command: subcommand {args.command!r} does not match config {raw_command!r}")
        cfg = parse_config(text, overrides)
    except ConfigError as exc:
        for err in exc.errors:
            print(f"config error: {err}", file=sys.stderr)
        return 2
    return run(cfg, threads=args.threads, assert_checks=args.assert_checks)


if __name__ == "__main__":
    sys.exit(main())
