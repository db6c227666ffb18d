"""Command-line front end driven by TOML run configurations.

Exit codes: 0 success, 2 bad config, 3 equilibrium not accepted (the best
point is still written), 4 any other failure.
"""

from __future__ import annotations

import argparse
import io
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import partial
from pathlib import Path

import numpy as np

from .equilibrium import EquilibriumResult, MFEProblem, SolverConfig, solve_mfe, validate_point
from .errors import ConfigError, MFEError, ModelError, NotFound
from .model import (ModelParams, SharingFunction, make_resource_process,
                    strategy_from_threshold)
from .simulate import simulate_finite_system, simulate_location
from .welfare import (SWEEP_PARAMETERS, case_study, sweep, welfare_per_agent,
                      welfare_per_location)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("nomad_mfe")

EXIT_OK, EXIT_CONFIG, EXIT_NOT_FOUND, EXIT_RUNTIME = 0, 2, 3, 4
SIG_DIGITS = 12
SWEEP_HEADER = ("param", "value")
CASE_STUDY_MAX_L = 1000

SCHEMA = {
    "model": {"lambda", "gamma", "beta"},
    "resource": {"states", "rates"},
    "sharing": {"kind", "alpha", "level_payoffs", "table"},
    "solver": {"L", "k", "eps0", "eps1", "eps2", "eps", "max_restarts", "max_refinements",
               "max_iter", "seed", "method", "search"},
    "sweep": {"parameter", "values"},
    "casestudy": {"f", "commissions", "n_locations", "alpha", "L", "max_L"},
    "simulate": {"horizon", "replications", "K", "max_events"},
}


@dataclass(frozen=True)
class RunConfig:
    params: ModelParams
    resource: object
    sharing: SharingFunction | None
    solver: SolverConfig
    seed: int | None = None
    sweep: dict = field(default_factory=dict)
    casestudy: dict = field(default_factory=dict)
    simulate: dict = field(default_factory=dict)

    @property
    def problem(self) -> MFEProblem:
        if self.sharing is None:
            raise ConfigError("sharing", "section is required for this command")
        return MFEProblem(self.params, self.resource, self.sharing)


# config parsing

def _get(section: dict, name: str, key: str, required: bool = True):
    if key not in section:
        if required:
            raise ConfigError(f"{name}.{key}", "missing required key")
        return None
    return section[key]


def _number(value, key, *, positive=False, integer=False, low=None, high=None):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(key, f"expected a number, got {value!r}")
    if integer and (not isinstance(value, int) and not float(value).is_integer()):
        raise ConfigError(key, f"expected an integer, got {value!r}")
    value = int(value) if integer else float(value)
    if not math.isfinite(value):
        raise ConfigError(key, "must be finite")
    if positive and not value > 0:
        raise ConfigError(key, f"must be > 0, got {value}")
    if low is not None and not value > low:
        raise ConfigError(key, f"must be > {low}, got {value}")
    if high is not None and not value < high:
        raise ConfigError(key, f"must be < {high}, got {value}")
    return value


def _vector(value, key, length=None):
    if not isinstance(value, list) or not value:
        raise ConfigError(key, f"expected a non-empty list, got {value!r}")
    out = [_number(v, f"{key}[{i}]") for i, v in enumerate(value)]
    if length is not None and len(out) != length:
        raise ConfigError(key, f"expected {length} entries, got {len(out)}")
    return out


def _matrix(value, key, rows=None):
    if not isinstance(value, list) or not value:
        raise ConfigError(key, f"expected a list of rows, got {value!r}")
    out = [_vector(r, f"{key}[{i}]") for i, r in enumerate(value)]
    if len({len(r) for r in out}) != 1:
        raise ConfigError(key, "rows have different lengths")
    if rows is not None and len(out) != rows:
        raise ConfigError(key, f"expected {rows} rows, got {len(out)}")
    return out


def _check_keys(raw: dict):
    for name, section in raw.items():
        if name not in SCHEMA:
            raise ConfigError(name, "unknown section")
        if not isinstance(section, dict):
            raise ConfigError(name, "expected a table of keys")
        for key in section:
            if key not in SCHEMA[name]:
                raise ConfigError(f"{name}.{key}", "unknown key")


def _model(raw):
    m = raw.get("model")
    if m is None:
        raise ConfigError("model", "missing required section")
    lam = _number(_get(m, "model", "lambda"), "model.lambda", positive=True)
    gamma = _number(_get(m, "model", "gamma"), "model.gamma", low=0.0, high=1.0)
    beta = _number(_get(m, "model", "beta"), "model.beta", positive=True)
    return ModelParams(lam, gamma, beta)


def _resource(raw):
    r = raw.get("resource")
    if r is None:
        raise ConfigError("resource", "missing required section")
    states = _get(r, "resource", "states")
    if not isinstance(states, list) or not states:
        raise ConfigError("resource.states", "expected a non-empty list")
    rates = _matrix(_get(r, "resource", "rates"), "resource.rates", rows=len(states))
    try:
        return make_resource_process(states, rates)
    except ModelError as exc:
        raise ConfigError("resource.rates", str(exc)) from exc


def _sharing(raw, n_states):
    s = raw.get("sharing")
    if s is None:
        return None
    kind = _get(s, "sharing", "kind")
    try:
        if kind == "power":
            g = _vector(_get(s, "sharing", "level_payoffs"), "sharing.level_payoffs", n_states)
            alpha = _number(_get(s, "sharing", "alpha"), "sharing.alpha", positive=True)
            if "table" in s:
                raise ConfigError("sharing.table", "not used with kind = 'power'")
            return SharingFunction.power(g, alpha)
        if kind == "table":
            for key in ("alpha", "level_payoffs"):
                if key in s:
                    raise ConfigError(f"sharing.{key}", "not used with kind = 'table'")
            table = _matrix(_get(s, "sharing", "table"), "sharing.table", rows=n_states)
            return SharingFunction.from_table(table)
    except ModelError as exc:
        raise ConfigError("sharing", str(exc)) from exc
    raise ConfigError("sharing.kind", f"expected 'power' or 'table', got {kind!r}")


def _solver(raw):
    s = raw.get("solver", {})
    ints = ("L", "k", "max_restarts", "max_refinements", "max_iter")
    floats = ("eps0", "eps1", "eps2", "eps")
    kwargs = {}
    for key in ints:
        if key in s:
            kwargs[key] = _number(s[key], f"solver.{key}", integer=True)
    for key in floats:
        if key in s:
            kwargs[key] = _number(s[key], f"solver.{key}", positive=True)
    for key in ("method", "search"):
        if key in s:
            kwargs[key] = s[key]
    try:
        config = SolverConfig(**kwargs)
    except ModelError as exc:
        bad = next((k for k in kwargs if k in str(exc)), None)
        raise ConfigError(f"solver.{bad}" if bad else "solver", str(exc)) from exc
    seed = s.get("seed")
    if seed is not None:
        seed = _number(seed, "solver.seed", integer=True)
        if seed < 0:
            raise ConfigError("solver.seed", "must be >= 0")
    return config, seed


def _sweep_block(raw):
    s = raw.get("sweep")
    if s is None:
        return {}
    param = _get(s, "sweep", "parameter")
    if param not in SWEEP_PARAMETERS:
        raise ConfigError("sweep.parameter", f"expected one of {SWEEP_PARAMETERS}, got {param!r}")
    return {"parameter": param, "values": _vector(_get(s, "sweep", "values"), "sweep.values")}


def _casestudy_block(raw, n_states):
    s = raw.get("casestudy")
    if s is None:
        return {}
    out = {
        "f": _vector(_get(s, "casestudy", "f"), "casestudy.f", n_states),
        "commissions": [_vector(c, f"casestudy.commissions[{i}]", n_states)
                        for i, c in enumerate(_get(s, "casestudy", "commissions") or [])],
        "n_locations": _number(_get(s, "casestudy", "n_locations"), "casestudy.n_locations",
                               integer=True, positive=True),
    }
    if not out["commissions"]:
        raise ConfigError("casestudy.commissions", "expected at least one scenario")
    for i, c in enumerate(out["commissions"]):
        if any(not 0 <= v <= 1 for v in c):
            raise ConfigError(f"casestudy.commissions[{i}]", "commissions must lie in [0, 1]")
    for key in ("alpha",):
        if key in s:
            out[key] = _number(s[key], f"casestudy.{key}", positive=True)
    for key in ("L", "max_L"):
        if key in s:
            out[key] = _number(s[key], f"casestudy.{key}", integer=True, low=1)
    return out


def _simulate_block(raw):
    s = raw.get("simulate")
    if s is None:
        return {}
    out = {"horizon": _number(_get(s, "simulate", "horizon"), "simulate.horizon", positive=True)}
    out["replications"] = _number(s.get("replications", 1), "simulate.replications",
                                  integer=True, positive=True)
    if "K" in s:
        out["K"] = _number(s["K"], "simulate.K", integer=True, low=1)
    if "max_events" in s:
        out["max_events"] = _number(s["max_events"], "simulate.max_events", integer=True,
                                    positive=True)
    return out


def parse_config(raw: dict) -> RunConfig:
    """Validate a nested mapping into a ``RunConfig``; raises ``ConfigError``."""
    _check_keys(raw)
    params = _model(raw)
    resource = _resource(raw)
    sharing = _sharing(raw, resource.size)
    solver, seed = _solver(raw)
    return RunConfig(params, resource, sharing, solver, seed, _sweep_block(raw),
                     _casestudy_block(raw, resource.size), _simulate_block(raw))


def load_config(path) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError("--config", f"cannot read {path}: {exc.strerror}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("--config", f"{path} is not valid TOML: {exc}") from exc
    return parse_config(raw)


# formatting

def fmt(value) -> str:
    """12 significant digits; booleans as true/false."""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    v = float(value)
    if math.isnan(v):
        return "nan"
    return format(v, f".{SIG_DIGITS}g")


def write_csv(header, rows) -> str:
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for row in rows:
        buf.write(",".join(fmt(v) for v in row) + "\n")
    return buf.getvalue()


def _jsonable(value):
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        v = float(value)
        return v if math.isfinite(v) else None
    if isinstance(value, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    return value


def write_json(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2) + "\n"


def _emit(text: str, out: str | None):
    if out is None:
        sys.stdout.write(text)
        sys.stdout.flush()
    else:
        Path(out).write_text(text, encoding="utf-8", newline="\n")


def _workers() -> int:
    raw = os.environ.get("NOMAD_MFE_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError("NOMAD_MFE_THREADS", f"expected an integer, got {raw!r}") from exc
    if n < 0:
        raise ConfigError("NOMAD_MFE_THREADS", "must be >= 0")
    return n if n > 0 else (os.cpu_count() or 1)


# subcommands

def _result_record(cfg: RunConfig, res: EquilibriumResult) -> dict:
    W_L = welfare_per_location(res.pi_star, cfg.sharing, cfg.params.lam)
    return {
        "x_star": [float(v) for v in res.x_star],
        "V_sw_star": float(res.V_sw_star),
        "kappa_star": float(res.kappa_star),
        "dist": float(res.dist_value),
        "accepted": bool(res.accepted),
        "phi": res.phi,
        "W_L": W_L,
        "W_A": welfare_per_agent(W_L, cfg.params.beta),
        "L": cfg.solver.L,
        "restarts_used": res.restarts_used,
    }


def _solve(cfg: RunConfig, fmt_: str):
    status = EXIT_OK
    try:
        res = solve_mfe(cfg.problem, cfg.solver)
    except NotFound as exc:
        if exc.result is None:
            raise
        log.error("equilibrium not accepted: %s", exc)
        res, status = exc.result, EXIT_NOT_FOUND
    rec = _result_record(cfg, res)
    if fmt_ == "json":
        return write_json(rec), status
    nz = len(rec["x_star"])
    header = [f"x_{i}" for i in range(nz)] + ["V_sw", "kappa", "W_L", "W_A", "dist", "accepted"]
    row = rec["x_star"] + [rec[k] for k in ("V_sw_star", "kappa_star", "W_L", "W_A", "dist",
                                            "accepted")]
    return write_csv(header, [row]), status


def _sweep(cfg: RunConfig, fmt_: str):
    if not cfg.sweep:
        raise ConfigError("sweep", "missing required section")
    rows = sweep(cfg.problem, cfg.sweep["parameter"], cfg.sweep["values"], cfg.solver,
                 workers=_workers())
    status = EXIT_OK if all(r.accepted for r in rows) else EXIT_NOT_FOUND
    for r in rows:
        if not r.accepted:
            log.error("%s=%s not accepted: %s", r.param, fmt(r.value), r.error)
    if fmt_ == "json":
        return write_json([{"param": r.param, "value": r.value, "x_star": list(r.x),
                            "V_sw_star": r.V_sw, "kappa_star": r.kappa, "W_L": r.W_L,
                            "W_A": r.W_A, "dist": r.dist, "accepted": r.accepted}
                           for r in rows]), status
    nz = cfg.resource.size
    header = list(SWEEP_HEADER) + [f"x_{i}" for i in range(nz)] + [
        "V_sw", "kappa", "W_L", "W_A", "dist", "accepted"]
    body = [[r.param, r.value, *r.x, r.V_sw, r.kappa, r.W_L, r.W_A, r.dist, r.accepted]
            for r in rows]
    return write_csv(header, body), status


def case_study_L(params: ModelParams, cap: int = CASE_STUDY_MAX_L) -> int:
    """4 beta / (1 - gamma) rounded up, capped at ``cap``."""
    return int(min(math.ceil(4.0 * params.beta / (1.0 - params.gamma)), cap))


def _casestudy(cfg: RunConfig, fmt_: str):
    cs = cfg.casestudy
    if not cs:
        raise ConfigError("casestudy", "missing required section")
    alpha = cs.get("alpha")
    if alpha is None:
        if cfg.sharing is None or cfg.sharing.kind != "power":
            raise ConfigError("casestudy.alpha", "missing and no power sharing function to take "
                              "it from")
        alpha = cfg.sharing.alpha
    L = cs.get("L") or case_study_L(cfg.params, cs.get("max_L", CASE_STUDY_MAX_L))
    solver = replace(cfg.solver, L=L)
    rows = case_study(cfg.params, cfg.resource, cs["f"], alpha, cs["commissions"],
                      cs["n_locations"], solver)
    status = EXIT_OK if all(r.accepted for r in rows) else EXIT_NOT_FOUND
    if fmt_ == "json":
        return write_json([{"c": list(r.c), "DriRev": r.DriRev, "PlatRev": r.PlatRev,
                            "AggRev": r.AggRev, "dDriRev": r.dDriRev, "dPlatRev": r.dPlatRev,
                            "dAggRev": r.dAggRev, "x_star": list(r.x), "V_sw_star": r.V_sw,
                            "dist": r.dist, "accepted": r.accepted} for r in rows]), status
    nz = cfg.resource.size
    header = ([f"c_{i}" for i in range(nz)]
              + ["DriRev", "PlatRev", "AggRev", "dDriRev", "dPlatRev", "dAggRev"]
              + [f"x_{i}" for i in range(nz)] + ["V_sw", "dist", "accepted"])
    body = [[*r.c, r.DriRev, r.PlatRev, r.AggRev, r.dDriRev, r.dPlatRev, r.dAggRev, *r.x,
             r.V_sw, r.dist, r.accepted] for r in rows]
    return write_csv(header, body), status


def _tv(a: np.ndarray, b: np.ndarray) -> float:
    width = max(a.shape[1], b.shape[1])
    pa = np.zeros((a.shape[0], width))
    pb = np.zeros((b.shape[0], width))
    pa[:, :a.shape[1]] = a
    pb[:, :b.shape[1]] = b
    return 0.5 * float(np.abs(pa - pb).sum())


def _replication(base, job):
    params, resource, sharing, strat, kappa, pi, sim = base
    kind, i, seed, reference = job
    if kind == "location":
        st = simulate_location(params, resource, strat, kappa, sim["horizon"], seed,
                               L=strat.L, sharing=sharing, max_events=sim.get("max_events"))
        occ, occ_hw, pay, pay_hw = (st.mean_occupancy, st.occupancy_halfwidth, st.payoff_rate,
                                    st.payoff_halfwidth)
    else:
        st = simulate_finite_system(sim["K"], params, resource, strat, sim["horizon"], seed,
                                    sharing=sharing)
        occ, occ_hw, pay, pay_hw = (st.mean_occupancy, st.occupancy_halfwidth, st.payoff_mean,
                                    st.payoff_halfwidth)
    return [kind, i, seed, occ, occ_hw, pay, pay_hw, reference, _tv(st.distribution, pi),
            st.events]


def _simulate(cfg: RunConfig, fmt_: str):
    sim = cfg.simulate
    if not sim:
        raise ConfigError("simulate", "missing required section")
    status = EXIT_OK
    try:
        res = solve_mfe(cfg.problem, cfg.solver)
    except NotFound as exc:
        if exc.result is None:
            raise
        log.error("equilibrium not accepted, simulating the best point: %s", exc)
        res, status = exc.result, EXIT_NOT_FOUND
    L = cfg.solver.L
    strat = strategy_from_threshold(res.x_star, L)
    W_L = welfare_per_location(res.pi_star, cfg.sharing, cfg.params.lam)
    seeds = np.random.SeedSequence(cfg.seed).spawn(sim["replications"])
    entropy = [int(s.generate_state(1)[0]) for s in seeds]

    base = (cfg.params, cfg.resource, cfg.sharing, strat, res.kappa_star, res.pi_star, sim)
    jobs = [("location", i, entropy[i], W_L) for i in range(sim["replications"])]
    if "K" in sim:
        jobs += [("finite", i, entropy[i], res.V_sw_star) for i in range(sim["replications"])]
    workers = min(_workers(), len(jobs))
    if workers <= 1:
        rows = [_replication(base, job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(partial(_replication, base), jobs))
    header = ["kind", "replication", "seed", "mean_occupancy", "occupancy_halfwidth", "payoff",
              "payoff_halfwidth", "reference", "tv", "events"]
    if fmt_ == "json":
        return write_json({"equilibrium": _result_record(cfg, res),
                           "runs": [dict(zip(header, r)) for r in rows]}), status
    return write_csv(header, rows), status


def _validate(cfg: RunConfig, fmt_: str, result_path: str | None):
    if result_path is None:
        raise ConfigError("--result", "validate needs the JSON result to check")
    try:
        rec = json.loads(Path(result_path).read_text(encoding="utf-8"))
        x, V_sw, recorded = rec["x_star"], rec["V_sw_star"], rec["dist"]
    except OSError as exc:
        raise ConfigError("--result", f"cannot read {result_path}: {exc.strerror}") from exc
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError("--result", f"not a solve result: {exc}") from exc
    solver = replace(cfg.solver, L=int(rec.get("L", cfg.solver.L)))
    report = validate_point(cfg.problem, x, V_sw, solver)
    report["recorded_dist"] = recorded
    report["dist_delta"] = abs(report["dist"] - recorded) if recorded is not None else None
    status = EXIT_OK if report["accepted"] else EXIT_NOT_FOUND
    if fmt_ == "json":
        return write_json(report), status
    keys = list(report)
    return write_csv(keys, [[report[k] for k in keys]]), status


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nomad-mfe", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=["solve", "sweep", "casestudy", "simulate", "validate"])
    parser.add_argument("--config", required=True, help="TOML run configuration")
    parser.add_argument("--out", help="output file (default: standard output)")
    parser.add_argument("--format", choices=["csv", "json"], default=None,
                        help="output format (default: json for solve/validate, csv otherwise)")
    parser.add_argument("--seed", type=int, help="override solver.seed")
    parser.add_argument("--result", help="JSON written by solve (validate only)")
    parser.add_argument("--log-level", default="WARNING",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"])
    return parser


COMMANDS = {"solve": _solve, "sweep": _sweep, "casestudy": _casestudy, "simulate": _simulate}


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    fmt_ = args.format or ("json" if args.command in ("solve", "validate") else "csv")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed", "must be >= 0")
            cfg = replace(cfg, seed=args.seed)
        if args.command == "validate":
            text, status = _validate(cfg, fmt_, args.result)
        else:
            text, status = COMMANDS[args.command](cfg, fmt_)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MFEError, ArithmeticError, ValueError, RuntimeError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    try:
        _emit(text, args.out)
    except OSError as exc:
        print(f"error: cannot write {args.out}: {exc.strerror}", file=sys.stderr)
        return EXIT_RUNTIME
    return status


def main() -> None:
    sys.exit(run())
