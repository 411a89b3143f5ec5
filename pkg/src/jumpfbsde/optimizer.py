"""Projected conditional-gradient descent over admissible feedback controls.

A control is stored per grid step as a regression fit ``c_i`` on the
admissible regressor ``X_i`` (lagged state, or nothing under the trivial
filtration) and realized as ``u_i = Pi_U(c_i(X_i))``.  One iteration solves the
state and adjoint systems, forms ``grad_v H`` and refits

    c_next_i = fit(u_i - gamma grad_v H_i) = fit(u_i) - gamma G_i,

with ``G = E[grad_v H | info]``.  The batch is held fixed across iterations.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import JumpFBSDEError, PicardDiverged
from .fbsde import (
    ControlProcess,
    PicardConfig,
    _coef_partials,
    admissible_regressor,
    estimate_cost,
    solve_adjoint,
    solve_fbsde,
)
from .hamiltonian import convexity_probe, max_condition_check, terminal_convexity_probe
from .maxprinciple import hamiltonian_v, stationarity_residual
from .model import ControlSet, FiltrationSpec, ProblemSpec
from .regression import Projector
from .scenario import ScenarioBatch, generate

STEP_RULES = ("fixed", "halving")
REASONS = ("converged", "max_iters", "diverged")


@dataclass(frozen=True)
class OptimizerConfig:
    """Step size ``gamma``, step rule, iteration cap and stationarity tolerance."""

    step_size: float = 0.1
    step_rule: str = "halving"
    max_iter: int = 200
    tol: float = 1e-4
    picard: PicardConfig = field(default_factory=PicardConfig)
    # halving gives up below this step size
    min_step: float = 1e-8

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.step_rule not in STEP_RULES:
            raise ValueError(f"step_rule must be one of {STEP_RULES}")
        if self.max_iter < 0:
            raise ValueError("max_iter must be >= 0")


class RegressionPolicy:
    """Feedback control ``u_i = Pi_U(fits[i].predict(X_i))``.

    Usable directly as the ``policy`` of a :class:`ControlProcess`.
    """

    def __init__(self, fits, control_set: ControlSet, filtration: FiltrationSpec):
        self.fits = list(fits)
        self.control_set = control_set
        self.filtration = filtration

    @property
    def N(self):
        return len(self.fits)

    def __call__(self, i, t_i, X):
        return self.control_set.project(self.fits[i].predict(X))

    def control(self) -> ControlProcess:
        return ControlProcess(policy=self, filtration=self.filtration)

    def realize(self, x, dt):
        """Control values on the paths ``x`` (P, N+1, n), recomputed from the stored fits."""
        P = x.shape[0]
        out = []
        for i in range(self.N):
            j = self.filtration.lag_index(i, dt)
            X = x[:, 0, :0] if j is None else x[:, j]
            out.append(self(i, None, X))
        return np.stack(out, axis=1).reshape(P, self.N, -1)

    def to_dict(self):
        return {"filtration": self.filtration.kind, "delta": self.filtration.delta,
                "fits": [f.to_dict() for f in self.fits]}


def _fit_values(spec, batch, x, values, filtration):
    """Per-step fits of ``values`` (P, N, k) on the admissible regressor of ``x``."""
    N, dt = batch.grid.N, batch.grid.dt
    fits = []
    for i in range(N):
        X = admissible_regressor(filtration, x, i, dt)
        fits.append(Projector(X, filtration.degree, filtration.ridge).fit(values[:, i]))
    return fits


def policy_from_control(spec: ProblemSpec, batch: ScenarioBatch, u, picard: PicardConfig | None = None,
                        filtration: FiltrationSpec | None = None) -> RegressionPolicy:
    """Represent a control as a :class:`RegressionPolicy` (exact for path-constant controls).

    ``u`` is a :class:`RegressionPolicy`, a :class:`ControlProcess`, an array
    ``(P, N, k)`` or a constant.
    """
    filtration = spec.filtration if filtration is None else filtration
    if isinstance(u, RegressionPolicy):
        return u
    if not isinstance(u, ControlProcess):
        arr = np.asarray(u, float)
        if arr.ndim <= 1:
            u = ControlProcess.constant(arr, batch.P, batch.grid.N, spec.dims.k)
        else:
            u = ControlProcess(arr)
    traj = solve_fbsde(spec, batch, u, picard)
    fits = _fit_values(spec, batch, traj.x, traj.u, filtration)
    return RegressionPolicy(fits, spec.control_set, filtration)


@dataclass
class Evaluation:
    """State, adjoint, cost and ``grad_v H`` for one control on the batch."""

    traj: object
    adjoint: object
    J: float
    se: float
    Hv: np.ndarray
    partials: list
    per_path: np.ndarray


def evaluate(spec, batch, policy: RegressionPolicy, picard: PicardConfig | None = None) -> Evaluation:
    traj = solve_fbsde(spec, batch, policy.control(), picard)
    cost = estimate_cost(spec, batch, traj)
    t = batch.grid.t
    partials = [_coef_partials(spec, t[i], traj, i) for i in range(batch.grid.N)]
    adj = solve_adjoint(spec, batch, traj, picard, partials=partials)
    Hv = hamiltonian_v(spec, batch, traj, adj, partials)
    return Evaluation(traj, adj, cost.J, cost.se, Hv, partials, cost.per_path)


@dataclass
class IterationRecord:
    iteration: int
    J: float
    se: float
    residual: float
    step_size: float
    halvings: int = 0

    def to_dict(self):
        return {"iteration": self.iteration, "J": self.J, "se": self.se, "residual": self.residual,
                "step_size": self.step_size, "halvings": self.halvings}


def _update(spec, batch, policy: RegressionPolicy, ev: Evaluation, gamma):
    if not np.any(ev.Hv):
        return policy  # G vanishes identically: fixed point
    target = ev.traj.u - gamma * ev.Hv
    fits = _fit_values(spec, batch, ev.traj.x, target, policy.filtration)
    return RegressionPolicy(fits, policy.control_set, policy.filtration)


def _increased(new: Evaluation, old: Evaluation):
    """Cost increase beyond three standard errors of the paired per-path difference."""
    if not np.isfinite(new.J):
        return True
    d = new.per_path - old.per_path
    se = float(np.std(d, ddof=1) / np.sqrt(d.size)) if d.size > 1 else 0.0
    return float(np.mean(d)) > 3 * se


def step(spec: ProblemSpec, batch: ScenarioBatch, u, config: OptimizerConfig | None = None, evaluation=None):
    """One projected conditional-gradient update.

    Returns ``(u_next, record)``; the record holds the cost and stationarity
    residual at ``u``.  ``u_next`` is a :class:`RegressionPolicy`.
    """
    config = config or OptimizerConfig()
    policy = policy_from_control(spec, batch, u, config.picard)
    ev = evaluation or evaluate(spec, batch, policy, config.picard)
    st = stationarity_residual(spec, batch, ev.traj, ev.adjoint, policy.filtration, ev.Hv)
    rec = IterationRecord(0, ev.J, ev.se, st.norm, config.step_size)
    return _update(spec, batch, policy, ev, config.step_size), rec


@dataclass
class SufficiencyReport:
    convexity_H: object
    convexity_phi: object
    convexity_h: object
    max_condition: object

    @property
    def passed(self):
        return bool(self.convexity_H.passed and self.convexity_phi.passed and self.convexity_h.passed
                    and self.max_condition.passed)

    def to_dict(self):
        mc = self.max_condition
        return {
            "passed": self.passed,
            "convexity_H": {"passed": self.convexity_H.passed, "worst_violation": self.convexity_H.worst_violation},
            "convexity_phi": {"passed": self.convexity_phi.passed, "worst_violation": self.convexity_phi.worst_violation},
            "convexity_h": {"passed": self.convexity_h.passed, "worst_violation": self.convexity_h.worst_violation},
            "max_condition": {"passed": mc.passed, "worst_margin": mc.worst_margin,
                              "margins": mc.margins.tolist(), "tolerances": mc.tolerances.tolist()},
        }


def sufficiency_diagnostics(spec, batch, ev: Evaluation, samples=1000, seed=0, probe_times=3):
    """Convexity probes at adjoint values along path 0 plus the sampled maximum condition."""
    N = batch.grid.N
    t = batch.grid.t
    reps = []
    for i in np.linspace(0, N - 1, probe_times).astype(int):
        mult = (ev.adjoint.p_pred[0, i], ev.adjoint.q[0, i], ev.adjoint.beta[0, i], ev.adjoint.k[0, i])
        reps.append(convexity_probe(spec, mult, samples=samples, t=t[i], seed=seed + int(i)))
    # report the worst probe: a failing one if any
    worst = max(reps, key=lambda r: (not r.passed, r.worst_violation))
    c = spec.coeffs
    phi = terminal_convexity_probe(c.phi, spec.dims.n, samples=samples, seed=seed)
    h = terminal_convexity_probe(c.h, spec.dims.m, samples=samples, seed=seed)
    mc = max_condition_check(spec, batch, ev.traj, ev.adjoint, filtration=spec.filtration)
    return SufficiencyReport(worst, phi, h, mc)


@dataclass
class OptimizerReport:
    history: list
    policy: RegressionPolicy
    u: np.ndarray  # final control on the optimization batch
    reason: str
    detail: str
    J: float
    se: float
    residual: float
    fresh_J: float | None = None
    fresh_se: float | None = None
    sufficiency: SufficiencyReport | None = None
    evaluation: Evaluation | None = None
    seconds: float = 0.0

    @property
    def J_sequence(self):
        return [r.J for r in self.history]

    @property
    def converged(self):
        return self.reason == "converged"

    def to_dict(self):
        return {
            "reason": self.reason, "detail": self.detail,
            "J": self.J, "se": self.se, "residual": self.residual,
            "fresh_J": self.fresh_J, "fresh_se": self.fresh_se,
            "history": [r.to_dict() for r in self.history],
            "sufficiency": None if self.sufficiency is None else self.sufficiency.to_dict(),
            "seconds": self.seconds,
        }


def optimize(spec: ProblemSpec, batch: ScenarioBatch, u_init, config: OptimizerConfig | None = None,
             fresh_batch: ScenarioBatch | None = None, diagnostics=True, callback=None) -> OptimizerReport:
    """Iterate :func:`step` until the stationarity residual is below ``config.tol``.

    Under the halving rule a candidate whose cost rises by more than three
    standard errors of the paired per-path difference is rejected and the
    step size halved.  Failures are reported through ``reason``; the
    last accepted iterate is returned either way.  The final policy is
    re-evaluated on ``fresh_batch`` (default: same shape, next seed).
    """
    config = config or OptimizerConfig()
    t0 = time.perf_counter()
    picard = config.picard
    history: list[IterationRecord] = []
    policy = policy_from_control(spec, batch, u_init, picard)
    ev = evaluate(spec, batch, policy, picard)
    gamma = config.step_size
    reason, detail = "max_iters", f"stopped after {config.max_iter} iterations"
    residual = np.inf
    for it in range(config.max_iter + 1):
        st = stationarity_residual(spec, batch, ev.traj, ev.adjoint, policy.filtration, ev.Hv)
        residual = st.norm
        rec = IterationRecord(it, ev.J, ev.se, residual, gamma)
        history.append(rec)
        if callback is not None:
            callback(rec)
        if residual <= config.tol:
            reason, detail = "converged", f"residual {residual:.3e} <= {config.tol:.3e}"
            break
        if it == config.max_iter:
            break
        while True:
            cand = _update(spec, batch, policy, ev, gamma)
            try:
                ev_c = evaluate(spec, batch, cand, picard)
                bad = config.step_rule == "halving" and _increased(ev_c, ev)
            except (PicardDiverged, JumpFBSDEError) as exc:
                if config.step_rule == "fixed":
                    reason, detail = "diverged", str(exc)
                    ev_c = None
                    break
                bad = True
            if not bad:
                break
            gamma *= 0.5
            rec.halvings += 1
            if gamma < config.min_step:
                reason, detail = "diverged", f"no descent down to step size {gamma:.3e}"
                ev_c = None
                break
        if ev_c is None:
            break
        policy, ev = cand, ev_c
    report = OptimizerReport(history, policy, ev.traj.u, reason, detail, ev.J, ev.se, float(residual),
                             evaluation=ev)
    if fresh_batch is None and isinstance(batch.seed, (int, np.integer)):
        fresh_batch = generate(batch.grid, batch.marks, batch.P, batch.d, rng=int(batch.seed) + 1)
    if fresh_batch is not None:
        try:
            cost = estimate_cost(spec, fresh_batch, solve_fbsde(spec, fresh_batch, policy.control(), picard))
            report.fresh_J, report.fresh_se = cost.J, cost.se
        except JumpFBSDEError:
            pass
    if diagnostics:
        report.sufficiency = sufficiency_diagnostics(spec, batch, ev)
    report.seconds = time.perf_counter() - t0
    return report


@dataclass
class MonotonicityReport:
    J_restricted: float
    se_restricted: float
    J_full: float
    se_full: float
    pooled_se: float

    @property
    def passed(self):
        return self.J_restricted >= self.J_full - 3 * self.pooled_se

    def to_dict(self):
        return {"passed": self.passed, "J_restricted": self.J_restricted, "se_restricted": self.se_restricted,
                "J_full": self.J_full, "se_full": self.se_full, "pooled_se": self.pooled_se}


def information_monotonicity(restricted: OptimizerReport, full: OptimizerReport) -> MonotonicityReport:
    """Optimal cost under less information should not beat the full-information cost beyond noise."""
    pooled = float(np.hypot(restricted.se, full.se))
    return MonotonicityReport(restricted.J, restricted.se, full.J, full.se, pooled)


def full_information_twin(spec: ProblemSpec) -> ProblemSpec:
    """Same problem with the full filtration (same basis degree and ridge)."""
    return spec.with_filtration(replace(spec.filtration, kind="full", delta=0.0))
