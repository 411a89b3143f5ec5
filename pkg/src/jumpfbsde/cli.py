"""Command-line entry point: ``jumpfbsde {simulate,optimize,verify,bench,schema}``.

Exit codes: 0 success, 2 validation failure, 3 solver divergence,
4 verification failure.  Every run writes ``report.json`` in the output
directory with the resolved config, seed, overrides, version and timings.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .benchmarks import (
    affine_problem,
    divergent_model,
    lq_model,
    no_jump_pair,
    nonlinear_base_control,
    nonlinear_model,
    pure_control_model,
    pure_forward_model,
    zero_model,
)
from .config import RunConfig, _check, load_config, schema
from .errors import JumpFBSDEError, NonFiniteCoefficient, PicardDiverged, ValidationError
from .fbsde import (
    ControlProcess,
    PicardConfig,
    _coef_partials,
    estimate_cost,
    solve_adjoint,
    solve_fbsde,
    write_control_csv,
    write_trajectory_csv,
)
from .hamiltonian import (
    convexity_probe,
    gradient_fd_check,
    max_condition_check,
    terminal_convexity_probe,
)
from .lq import LQParams, discrete_riccati, load_fixture, optimal_cost
from .maxprinciple import (
    ItoProcess,
    gateaux_fd,
    gateaux_hamiltonian,
    gateaux_variational,
    hamiltonian_v,
    moment_diagnostics,
    random_direction,
    gradient_noise,
    stationarity_residual,
    verify_ibp,
)
from .model import ControlSet, FiltrationSpec, check_derivatives, validate
from .optimizer import OptimizerConfig, full_information_twin, information_monotonicity, optimize
from .scenario import TimeGrid, generate

EXIT_OK, EXIT_VALIDATION, EXIT_DIVERGED, EXIT_VERIFY = 0, 2, 3, 4
TOOL = "jumpfbsde"

FIXTURES = {
    "zero": zero_model,
    "pure-control": pure_control_model,
    "pure-forward": pure_forward_model,
    "nonlinear": nonlinear_model,
    "no-jump": lambda **kw: no_jump_pair(**kw)[0],
    "no-jump-twin": lambda **kw: no_jump_pair(**kw)[1],
    "divergent": divergent_model,
    "lq": lq_model,
}


# ---------------------------------------------------------------------------
# building blocks


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    return obj


def build_problem(cfg: RunConfig):
    """Problem described by ``cfg.model`` with the numerics' basis degree and ridge."""
    mc = cfg.model
    fl = FiltrationSpec(mc.filtration.kind, float(mc.filtration.delta), cfg.numerics.degree, cfg.numerics.ridge)
    params = dict(mc.params)
    try:
        if mc.family == "affine":
            spec = affine_problem(**params, filtration=fl)
        else:
            spec = FIXTURES[mc.family](**params)
    except (TypeError, ValueError) as exc:
        raise ValidationError([f"model.params: {exc}"]) from exc
    spec = spec.with_filtration(fl)
    if mc.control_set is not None:
        cs = dataclasses.asdict(mc.control_set)
        spec = spec.with_control_set(ControlSet(**cs))
    return spec


def lq_params(cfg: RunConfig) -> LQParams:
    keys = {f.name for f in dataclasses.fields(LQParams)}
    kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in cfg.model.params.items() if k in keys}
    return LQParams(**kw)


def build_control(cfg: RunConfig, spec, grid, P):
    cc = cfg.control
    k = spec.dims.k
    if cc.kind == "constant":
        val = np.asarray(cc.value, float).reshape(-1)
        if val.size not in (1, k):
            raise ValidationError([f"control.value: expected {k} entries, got {val.size}"])
        return ControlProcess.constant(np.broadcast_to(val, (k,)), P, grid.N, k)
    if cc.kind == "nonlinear-base":
        return ControlProcess(nonlinear_base_control(grid, P)[..., :k])
    if cc.kind == "lq-oracle":
        if cfg.model.family != "lq":
            raise ValidationError(["control.kind: 'lq-oracle' requires model.family 'lq'"])
        dr = discrete_riccati(lq_params(cfg), grid.N)
        cs = spec.control_set
        return ControlProcess(policy=lambda i, t, X: cs.project(dr.feedback(i, X)), filtration=FiltrationSpec())
    if cc.kind == "file":
        data = np.genfromtxt(cc.path, delimiter=",", names=True)
        cols = [n for n in data.dtype.names if n.startswith("u_")]
        if len(cols) != k:
            raise ValidationError([f"control.path: expected {k} control columns, found {len(cols)}"])
        u = np.stack([data[c] for c in cols], axis=-1)
        try:
            u = u.reshape(P, grid.N, k)
        except ValueError as exc:
            raise ValidationError([f"control.path: table does not match P={P}, N={grid.N}"]) from exc
        return ControlProcess(u)
    raise ValidationError([f"control.kind: unknown kind {cc.kind!r}"])


def picard_config(cfg: RunConfig) -> PicardConfig:
    pc = cfg.numerics.picard
    return PicardConfig(pc.max_iter, pc.damping, pc.tol, pc.blowup)


def optimizer_config(cfg: RunConfig) -> OptimizerConfig:
    oc = cfg.numerics.optimizer
    return OptimizerConfig(oc.step_size, oc.step_rule, oc.max_iter, oc.tol, picard_config(cfg), oc.min_step)


def make_batch(cfg: RunConfig, spec):
    nm = cfg.numerics
    grid = TimeGrid(spec.T, nm.N)
    return generate(grid, spec.marks, nm.P, spec.dims.d, rng=nm.seed, workers=nm.workers)


class Run:
    """Report accumulator for one command."""

    def __init__(self, command, cfg: RunConfig, overrides, out: Path):
        self.command = command
        self.cfg = cfg
        self.out = out
        self.timings = {}
        self.report = {
            "tool": TOOL,
            "version": __version__,
            "command": command,
            "environment": {"python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__},
            "config": cfg.to_dict(),
            "seed": cfg.numerics.seed,
            "overrides": overrides,
        }
        self._t0 = time.perf_counter()

    @contextlib.contextmanager
    def timed(self, name):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = time.perf_counter() - t0

    def finish(self, status, code, **extra):
        self.report.update(extra)
        self.report["status"] = status
        self.report["exit_code"] = code
        self.timings["total"] = time.perf_counter() - self._t0
        self.report["timings"] = self.timings
        if "json" in self.cfg.outputs.formats:
            self.out.mkdir(parents=True, exist_ok=True)
            (self.out / "report.json").write_text(json.dumps(_jsonable(self.report), indent=2) + "\n")
        return code

    def csv(self, name, writer, *args):
        if "csv" in self.cfg.outputs.formats:
            self.out.mkdir(parents=True, exist_ok=True)
            writer(self.out / name, *args)


def _limit(traj, count):
    """Trajectory restricted to the first ``count`` paths for CSV output."""
    if count is None or count >= traj.x.shape[0]:
        return traj
    return dataclasses.replace(
        traj, x=traj.x[:count], y=traj.y[:count], z=traj.z[:count], r=traj.r[:count],
        y_hat=traj.y_hat[:count], u=traj.u[:count],
    )


def _nondecreasing_tail(residuals, tail=3):
    r = list(residuals)[-(tail + 1):]
    return len(r) >= 2 and all(b >= a for a, b in zip(r, r[1:]))


def _write_solution(run: Run, traj, grid, prefix=""):
    lim = _limit(traj, run.cfg.outputs.csv_paths)
    run.csv(f"{prefix}trajectory.csv", write_trajectory_csv, lim, grid)
    run.csv(f"{prefix}control.csv", write_control_csv, lim.u, grid)


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg: RunConfig, run: Run) -> int:
    spec = build_problem(cfg)
    _require_valid(spec)
    with run.timed("scenarios"):
        batch = make_batch(cfg, spec)
    control = build_control(cfg, spec, batch.grid, batch.P)
    with run.timed("solve"):
        traj = solve_fbsde(spec, batch, control, picard_config(cfg))
    cost = estimate_cost(spec, batch, traj)
    _write_solution(run, traj, batch.grid)
    return run.finish("ok", EXIT_OK, results={
        "J": cost.J, "se": cost.se, "admissibility": cost.admissibility,
        "y0": traj.y[0, 0], "picard": {"state": traj.residuals, "iterations": len(traj.residuals)},
        "M": spec.marks.M,
    })


def _lq_oracle_value(cfg: RunConfig):
    prm = lq_params(cfg)
    try:
        fx = load_fixture()
        if fx["params"] == prm.as_dict():
            return fx["optimal_cost"], "fixture"
    except (OSError, KeyError, ValueError):
        pass
    return optimal_cost(prm), "rk4"


def cmd_optimize(cfg: RunConfig, run: Run) -> int:
    spec = build_problem(cfg)
    _require_valid(spec)
    with run.timed("scenarios"):
        batch = make_batch(cfg, spec)
    control = build_control(cfg, spec, batch.grid, batch.P)
    ocfg = optimizer_config(cfg)
    with run.timed("optimize"):
        rep = optimize(spec, batch, control, ocfg)
    results = {"optimizer": rep.to_dict()}
    _write_solution(run, rep.evaluation.traj, batch.grid)
    if spec.filtration.kind != "full":
        with run.timed("full_information"):
            full = optimize(full_information_twin(spec), batch, control, ocfg, diagnostics=False)
        mono = information_monotonicity(rep, full)
        results["information_monotonicity"] = mono.to_dict()
    if cfg.model.family == "lq":
        J_star, source = _lq_oracle_value(cfg)
        results["oracle"] = {"J_star": J_star, "source": source, "relative_error": rep.J / J_star - 1.0,
                             "fresh_relative_error": None if rep.fresh_J is None else rep.fresh_J / J_star - 1.0}
    code = EXIT_DIVERGED if rep.reason == "diverged" else EXIT_OK
    return run.finish("diverged" if code else "ok", code, results=results)


def _gateaux_suite(spec, batch, control, traj, adj, vcfg, picard):
    rng = np.random.default_rng(vcfg.direction_seed)
    t = batch.grid.t
    partials = [_coef_partials(spec, t[i], traj, i) for i in range(batch.grid.N)]
    Hv = hamiltonian_v(spec, batch, traj, adj, partials)
    u = ControlProcess(traj.u)
    rows = []
    ok = True
    for r in range(vcfg.directions):
        theta = random_direction(spec, batch, traj.x, rng)
        fd = gateaux_fd(spec, batch, u, theta, step=vcfg.fd_step, picard=picard)
        va = gateaux_variational(spec, batch, u, theta, traj=traj, picard=picard, partials=partials)
        ha = gateaux_hamiltonian(spec, batch, traj, theta, adj, Hv=Hv)
        pairs = {}
        est = {"fd": fd, "variational": va, "hamiltonian": ha}
        for na, nb in (("fd", "variational"), ("fd", "hamiltonian"), ("variational", "hamiltonian")):
            a, b = est[na], est[nb]
            tol = 3 * float(np.hypot(a[1], b[1])) + vcfg.gateaux_abs_tol
            gap = abs(a[0] - b[0])
            pairs[f"{na}-{nb}"] = {"gap": gap, "tol": tol, "passed": gap <= tol}
            ok &= gap <= tol
        rows.append({"fd": fd, "variational": va, "hamiltonian": ha, "pairs": pairs})
    return {"passed": bool(ok), "directions": rows}, Hv


def ibp_fixtures(d, M):
    """Deterministic, Brownian and jump product-rule fixtures."""
    fx = {
        "deterministic": (ItoProcess.constant([1.0], b=0.5, g=0.0, sigma=0.0, d=d, M=M),
                          ItoProcess(np.array([0.5]), lambda t, Y: 0.3 * Y, lambda t, Y: np.zeros(Y.shape + (d,)),
                                     lambda t, Y: np.zeros((Y.shape[0], M, 1)))),
        "brownian": (ItoProcess.constant([0.2], b=0.1, g=0.4, sigma=0.0, d=d, M=M),
                     ItoProcess.constant([1.0], b=-0.2, g=0.3, sigma=0.0, d=d, M=M)),
    }
    if M:
        fx["jump"] = (ItoProcess.constant([0.1], b=0.2, g=0.0, sigma=0.5, d=d, M=M),
                      ItoProcess.constant([0.3], b=0.0, g=0.0, sigma=-0.4, d=d, M=M))
    return fx


def cmd_verify(cfg: RunConfig, run: Run) -> int:
    spec = build_problem(cfg)
    _require_valid(spec)
    vcfg = cfg.verify
    picard = picard_config(cfg)
    with run.timed("scenarios"):
        batch = make_batch(cfg, spec)
    control = build_control(cfg, spec, batch.grid, batch.P)
    checks = {}
    with run.timed("derivatives"):
        dc = check_derivatives(spec, probe_count=vcfg.derivative_probes)
        gc = gradient_fd_check(spec, probe_count=vcfg.derivative_probes)
        checks["derivatives"] = {
            "passed": all(v.passed for v in dc.values()) and all(ok for ok, _ in gc.values()),
            "coefficients": {k: {"passed": v.passed, "max_rel_error": v.max_rel_error} for k, v in dc.items()},
            "hamiltonian": {k: {"passed": ok, "max_rel_error": e} for k, (ok, e) in gc.items()},
        }
    with run.timed("state"):
        traj = solve_fbsde(spec, batch, control, picard)
    with run.timed("adjoint"):
        adj = solve_adjoint(spec, batch, traj, picard)
    with run.timed("gateaux"):
        checks["gateaux"], Hv = _gateaux_suite(spec, batch, control, traj, adj, vcfg, picard)
    st = stationarity_residual(spec, batch, traj, adj, spec.filtration, Hv)
    with run.timed("replicates"):
        reps = [generate(batch.grid, spec.marks, batch.P, spec.dims.d, rng=cfg.numerics.seed + 1 + r,
                         workers=cfg.numerics.workers) for r in range(vcfg.replicates)]
        noise = gradient_noise(spec, reps, control, traj, st.G, spec.filtration, picard)
    st_tol = noise.tolerance(vcfg.stationarity_abs_tol)
    checks["stationarity"] = {"passed": st.norm <= st_tol, "residual": st.norm, "tol": st_tol,
                              "pooled_se": noise.pooled_se, "replicates": noise.replicates,
                              "worst_step": st.worst_step, "table": st.table}
    with run.timed("max_condition"):
        mc = max_condition_check(spec, batch, traj, adj, gradient_se=noise.se)
    checks["max_condition"] = {"passed": mc.passed, "worst_margin": mc.worst_margin,
                               "margins": mc.margins, "tolerances": mc.tolerances}
    conv = {}
    for i in np.linspace(0, batch.grid.N - 1, 3).astype(int):
        mult = (adj.p_pred[0, i], adj.q[0, i], adj.beta[0, i], adj.k[0, i])
        rep = convexity_probe(spec, mult, samples=vcfg.convexity_samples, t=batch.grid.t[i], seed=int(i))
        conv[f"H@step{i}"] = {"passed": rep.passed, "worst_violation": rep.worst_violation}
    for name, fn, dim in (("phi", spec.coeffs.phi, spec.dims.n), ("h", spec.coeffs.h, spec.dims.m)):
        rep = terminal_convexity_probe(fn, dim, samples=vcfg.convexity_samples)
        conv[name] = {"passed": rep.passed, "worst_violation": rep.worst_violation}
    checks["convexity"] = {"passed": all(v["passed"] for v in conv.values()), "probes": conv}
    ibp = {}
    for name, (p1, p2) in ibp_fixtures(spec.dims.d, spec.marks.M).items():
        rep = verify_ibp(p1, p2, batch)
        tol = 3 * rep.se + vcfg.ibp_C * batch.grid.dt
        ibp[name] = {"passed": rep.passes(batch.grid.dt, vcfg.ibp_C), "lhs": rep.lhs, "rhs": rep.rhs,
                     "difference": rep.difference, "tol": tol}
    checks["ibp"] = {"passed": all(v["passed"] for v in ibp.values()), "fixtures": ibp}
    mom = moment_diagnostics(spec, batch, traj, adj)
    checks["moments"] = {"passed": mom.finite and not mom.warnings, "entries": mom.entries,
                         "warnings": mom.warnings, "skipped": mom.skipped}
    results = {"checks": checks, "J": estimate_cost(spec, batch, traj).J,
               "picard": {"state": traj.residuals, "adjoint": adj.residuals}}
    if spec.marks.M == 0:
        results["reduction"] = "M = 0: no marks, jump terms vanish; jump-specific entries skipped"
    failed = sorted(k for k, v in checks.items() if not v["passed"])
    results["failed"] = failed
    code = EXIT_VERIFY if failed else EXIT_OK
    return run.finish("verification_failed" if failed else "ok", code, results=results)


def _bench_lq(cfg: RunConfig, run: Run, delayed: bool):
    cfg = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, family="lq"))
    if delayed and cfg.model.filtration.kind == "full":
        cfg.model.filtration = dataclasses.replace(cfg.model.filtration, kind="delayed",
                                                   delta=0.25 * lq_params(cfg).T)
    if not delayed:
        cfg.model.filtration = dataclasses.replace(cfg.model.filtration, kind="full", delta=0.0)
    spec = build_problem(cfg)
    _require_valid(spec)
    batch = make_batch(cfg, spec)
    ocfg = optimizer_config(cfg)
    control = ControlProcess.constant(0.0, batch.P, batch.grid.N, 1)
    with run.timed("optimize"):
        rep = optimize(spec, batch, control, ocfg, diagnostics=not delayed)
    _write_solution(run, rep.evaluation.traj, batch.grid)
    out = {"optimizer": rep.to_dict()}
    if delayed:
        with run.timed("full_information"):
            full = optimize(full_information_twin(spec), batch, control, ocfg, diagnostics=False)
        mono = information_monotonicity(rep, full)
        out["information_monotonicity"] = mono.to_dict()
        passed = mono.passed and rep.reason != "diverged"
    else:
        J_star, source = _lq_oracle_value(cfg)
        rel = rep.J / J_star - 1.0
        out["oracle"] = {"J_star": J_star, "source": source, "relative_error": rel, "tol": cfg.bench.cost_tol}
        passed = abs(rel) <= cfg.bench.cost_tol and rep.reason == "converged"
    return passed, out


def _bench_pure_forward(cfg, run):
    cfg = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, family="pure-forward"))
    spec = build_problem(cfg)
    batch = make_batch(cfg, spec)
    traj = solve_fbsde(spec, batch, build_control(cfg, spec, batch.grid, batch.P), picard_config(cfg))
    _write_solution(run, traj, batch.grid)
    norms = {"y": float(np.max(np.abs(traj.y))), "z": float(np.max(np.abs(traj.z))),
             "r": float(np.max(np.abs(traj.r)))}
    return all(v <= 1e-8 for v in norms.values()), {"max_abs": norms, "tol": 1e-8}


def _bench_no_jump(cfg, run):
    base_cfg = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, family="no-jump"))
    twin_cfg = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, family="no-jump-twin"))
    sols = {}
    for name, c in (("base", base_cfg), ("twin", twin_cfg)):
        spec = build_problem(c)
        batch = make_batch(c, spec)
        traj = solve_fbsde(spec, batch, build_control(c, spec, batch.grid, batch.P), picard_config(c))
        sols[name] = (traj, estimate_cost(spec, batch, traj))
        _write_solution(run, traj, batch.grid, prefix=f"{name}_")
    (tb, cb), (tt, ct) = sols["base"], sols["twin"]
    same = {k: bool(np.array_equal(getattr(tb, k), getattr(tt, k))) for k in ("x", "y", "z", "y_hat", "u")}
    same["J"] = cb.J == ct.J
    same["twin_r_zero"] = not np.any(tt.r)
    return all(same.values()), {"bit_identical": same}


def _bench_nonlinear(cfg, run):
    cfg = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, family="nonlinear"),
                              control=dataclasses.replace(cfg.control, kind="nonlinear-base"))
    spec = build_problem(cfg)
    batch = make_batch(cfg, spec)
    picard = picard_config(cfg)
    control = build_control(cfg, spec, batch.grid, batch.P)
    traj = solve_fbsde(spec, batch, control, picard)
    adj = solve_adjoint(spec, batch, traj, picard)
    res, _ = _gateaux_suite(spec, batch, control, traj, adj, cfg.verify, picard)
    return res["passed"], {"gateaux": res}


BENCHES = {
    "lq-full": lambda cfg, run: _bench_lq(cfg, run, delayed=False),
    "lq-delayed": lambda cfg, run: _bench_lq(cfg, run, delayed=True),
    "pure-forward": _bench_pure_forward,
    "no-jump": _bench_no_jump,
    "nonlinear": _bench_nonlinear,
}


def cmd_bench(cfg: RunConfig, run: Run) -> int:
    name = cfg.bench.name
    if name is None:
        raise ValidationError(["bench.name: required for the bench command"])
    with run.timed(name):
        passed, details = BENCHES[name](cfg, run)
    summary = {"benchmark": name, "passed": bool(passed), "details": details}
    code = EXIT_OK if passed else EXIT_VERIFY
    return run.finish("ok" if passed else "verification_failed", code, results=summary)


def _require_valid(spec):
    problems = validate(spec)
    if problems:
        raise ValidationError(problems)


COMMANDS = {"simulate": cmd_simulate, "optimize": cmd_optimize, "verify": cmd_verify, "bench": cmd_bench}


# ---------------------------------------------------------------------------
# entry point


def _parser():
    ap = argparse.ArgumentParser(prog=TOOL, description="Controlled FBSDEs with Poisson jumps under partial information.")
    ap.add_argument("--version", action="version", version=f"{TOOL} {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="YAML/JSON run configuration")
        p.add_argument("--seed", type=int, help="override numerics.seed")
        p.add_argument("--paths", type=int, help="override numerics.P")
        p.add_argument("--steps", type=int, help="override numerics.N")
        p.add_argument("--out", help="override outputs.dir")
        p.add_argument("--workers", type=int, help="override numerics.workers")
        if name == "bench":
            p.add_argument("--name", help="override bench.name")
    sub.add_parser("schema", help="print the configuration schema as JSON")
    return ap


def _apply_overrides(cfg: RunConfig, args):
    overrides = {}
    table = (("seed", "numerics", "seed"), ("paths", "numerics", "P"), ("steps", "numerics", "N"),
             ("workers", "numerics", "workers"), ("out", "outputs", "dir"), ("name", "bench", "name"))
    for flag, section, key in table:
        val = getattr(args, flag, None)
        if val is not None:
            setattr(getattr(cfg, section), key, val)
            overrides[flag] = val
    _check(cfg)
    return overrides


def _error_report(command, args, messages, code, status, cfg=None, overrides=None, **extra):
    out = Path(args.out) if getattr(args, "out", None) else (Path(cfg.outputs.dir) if cfg else Path("out"))
    report = {"tool": TOOL, "version": __version__, "command": command, "status": status, "exit_code": code,
              "errors": messages, "config": cfg.to_dict() if cfg else None,
              "seed": cfg.numerics.seed if cfg else None, "overrides": overrides or {}}
    report.update(extra)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(_jsonable(report), indent=2) + "\n")
    for m in messages:
        print(f"{TOOL}: {m}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "schema":
        print(json.dumps(schema(), indent=2))
        return EXIT_OK
    cfg, overrides = None, {}
    try:
        cfg = load_config(args.config)
        overrides = _apply_overrides(cfg, args)
    except ValidationError as exc:
        return _error_report(args.command, args, exc.violations, EXIT_VALIDATION, "validation_error", cfg, overrides)
    except OSError as exc:
        return _error_report(args.command, args, [str(exc)], EXIT_VALIDATION, "validation_error")
    run = Run(args.command, cfg, overrides, Path(cfg.outputs.dir))
    try:
        return COMMANDS[args.command](cfg, run)
    except ValidationError as exc:
        for m in exc.violations:
            print(f"{TOOL}: {m}", file=sys.stderr)
        return run.finish("validation_error", EXIT_VALIDATION, errors=exc.violations)
    except PicardDiverged as exc:
        res = list(exc.residuals)
        print(f"{TOOL}: {exc}", file=sys.stderr)
        return run.finish("diverged", EXIT_DIVERGED, errors=[str(exc)],
                          picard={"residuals": res, "nondecreasing_tail": _nondecreasing_tail(res)})
    except NonFiniteCoefficient as exc:
        print(f"{TOOL}: {exc}", file=sys.stderr)
        return run.finish("validation_error", EXIT_VALIDATION, errors=[str(exc)])
    except JumpFBSDEError as exc:
        print(f"{TOOL}: {exc}", file=sys.stderr)
        return run.finish("diverged", EXIT_DIVERGED, errors=[f"{type(exc).__name__}: {exc}"])


if __name__ == "__main__":
    sys.exit(main())
