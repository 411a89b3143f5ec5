"""Euler / least-squares Monte Carlo solvers for the state, adjoint and variational systems.

Discretization on a uniform grid ``t_i = i dt``:

* forward components use explicit Euler with left-endpoint coefficients;
* backward components use one-step regressions.  With ``nxt`` the value at
  ``i + 1`` and ``Pi`` the projection on features of the step-``i`` regressor::

      pred0 = Pi[nxt]
      z_i   = Pi[(nxt - pred0) dB_i'] / dt
      r_ij  = Pi[(nxt - pred0) dNc_ij] / (pi_j dt)
      pred  = Pi[nxt - z_i dB_i - sum_j r_ij dNc_ij]
      val_i = pred + driver(pred, z_i, r_i) dt

  where ``dNc`` is the compensated count.  Every coefficient at step ``i`` is
  evaluated with ``pred`` (stored as ``y_hat``) in the backward slot.
* full coupling is resolved by damped Picard iteration on the per-path arrays.

A mark contributes nothing at a step where its forward jump coefficient (and,
for the adjoint and variational systems, the jump coefficient of the forward
multiplier) vanishes on every path; its ``r`` / ``beta`` entries are then
exactly zero.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import NonFiniteCost, NonFiniteState, NonFiniteValue, PicardDiverged
from .hamiltonian import grad_H
from .model import FiltrationSpec, ProblemSpec, directional
from .regression import Projector, path_mean
from .scenario import ScenarioBatch


@dataclass(frozen=True)
class PicardConfig:
    max_iter: int = 50
    damping: float = 0.5
    tol: float = 1e-6
    # residuals above this are treated as divergence straight away
    blowup: float = 1e8

    def __post_init__(self):
        if not (0 < self.damping <= 1):
            raise ValueError("damping must lie in (0, 1]")
        if self.max_iter < 1 or self.tol <= 0:
            raise ValueError("max_iter must be >= 1 and tol > 0")


# ---------------------------------------------------------------------------
# controls


class ControlProcess:
    """Control values ``u[p, i]``; either a fixed array or a policy evaluated on the fly.

    A policy is called as ``policy(i, t_i, X)`` where ``X`` is the admissible
    regressor: the forward state at the lagged index, or a ``(P, 0)`` array
    under the trivial filtration.  It must return an array of shape ``(P, k)``.
    """

    def __init__(self, values=None, policy: Callable | None = None, filtration: FiltrationSpec | None = None):
        if (values is None) == (policy is None):
            raise ValueError("give exactly one of values and policy")
        self.values = None if values is None else np.asarray(values, dtype=float)
        self.policy = policy
        self.filtration = filtration if filtration is not None else FiltrationSpec()

    @classmethod
    def constant(cls, value, P, N, k=None, filtration=None):
        value = np.atleast_1d(np.asarray(value, dtype=float))
        k = value.size if k is None else k
        return cls(np.broadcast_to(value, (P, N, k)).copy(), filtration=filtration)

    @property
    def is_policy(self):
        return self.policy is not None

    def at(self, i, t_i, x, dt):
        if self.values is not None:
            return self.values[:, i]
        j = self.filtration.lag_index(i, dt)
        X = x[:, 0, :0] if j is None else x[:, j]
        return np.asarray(self.policy(i, t_i, X), dtype=float)

    def perturbed(self, theta, eps):
        if self.values is None:
            raise ValueError("perturb a realized control (ControlProcess(traj.u))")
        return ControlProcess(self.values + eps * np.asarray(theta), filtration=self.filtration)


def admissible_regressor(filtration: FiltrationSpec, x, i, dt):
    """The regressor allowed at step ``i``: ``x`` at the lagged index, or None."""
    j = filtration.lag_index(i, dt)
    return None if j is None else x[:, j]


def condexp(values, i, filtration: FiltrationSpec, batch: ScenarioBatch, traj, degree=None, ridge=None):
    """Conditional expectation of per-path ``values`` given the information at step ``i``."""
    values = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(values)):
        raise NonFiniteValue("condexp input is not finite")
    X = admissible_regressor(filtration, traj.x, i, batch.grid.dt)
    deg = filtration.degree if degree is None else degree
    rdg = filtration.ridge if ridge is None else ridge
    return Projector(X, deg, rdg).project(values)


# ---------------------------------------------------------------------------
# containers


@dataclass
class Trajectory:
    x: np.ndarray  # (P, N+1, n)
    y: np.ndarray  # (P, N+1, m)
    z: np.ndarray  # (P, N, m, d)
    r: np.ndarray  # (P, N, M, m)
    y_hat: np.ndarray  # (P, N, m) one-step prediction used in the coefficients
    u: np.ndarray  # (P, N, k)
    jump_active: np.ndarray  # (N, M) bool
    fits: list = field(default_factory=list)  # per step {"y", "z", "r"} regression fits
    residuals: list = field(default_factory=list)

    @property
    def iterations(self):
        return max(1, len(self.residuals))


@dataclass
class AdjointTrajectory:
    p: np.ndarray  # (P, N+1, n)
    q: np.ndarray  # (P, N, n, d)
    beta: np.ndarray  # (P, N, M, n)
    k: np.ndarray  # (P, N+1, m)
    p_pred: np.ndarray  # (P, N, n)
    residuals: list = field(default_factory=list)


@dataclass
class VariationalTrajectory:
    X1: np.ndarray
    Y1: np.ndarray
    Z1: np.ndarray
    R1: np.ndarray
    Y1_hat: np.ndarray
    theta: np.ndarray
    residuals: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# generic pieces


def _sup_l2(a):
    """``sup_i sqrt(mean_p |a[p, i]|^2)``."""
    P, I = a.shape[:2]
    if a.size == 0:
        return 0.0
    return float(np.sqrt(np.max(np.mean(a.reshape(P, I, -1) ** 2, axis=(0, 2)))))


def _state_regressor(spec, batch, x, i):
    if spec.terminal.kind == "driver" and spec.terminal.uses_drivers:
        return np.concatenate([x[:, i], batch.B[:, i], batch.counts[:, i]], axis=1)
    return x[:, i]


def _active(arr):
    """Marks with a nonzero entry on some path; arr has shape (P, M, ...)."""
    P, M = arr.shape[:2]
    return np.any(arr.reshape(P, M, -1) != 0, axis=(0, 2))


def _jump_sum(coef, dNc_i, active):
    """``sum_j coef[:, j] * dNc_i[:, j]`` over active marks, in mark order."""
    out = None
    for j in np.flatnonzero(active):
        term = coef[:, j] * dNc_i[:, j, None]
        out = term if out is None else out + term
    return out


def _backward_step(proj, nxt, dB_i, dNc_i, pi, dt, active, driver):
    """One regression step; returns ``(val, pred, z, r, fits)``."""
    P, dim = nxt.shape
    d = dB_i.shape[1]
    M = dNc_i.shape[1]
    pred0 = proj.project(nxt)
    dev = nxt - pred0
    fit_z, z = proj.fit_project((dev[:, :, None] * dB_i[:, None, :]).reshape(P, -1))
    z = z.reshape(P, dim, d) / dt
    r = np.zeros((P, M, dim))
    idx = np.flatnonzero(active)
    fit_r = None
    if idx.size:
        tgt = (dev[:, None, :] * dNc_i[:, idx, None]).reshape(P, -1)
        fit_r, fitted = proj.fit_project(tgt)
        r[:, idx] = fitted.reshape(P, idx.size, dim) / (pi[idx, None] * dt)
    mart = np.einsum("pmd,pd->pm", z, dB_i)
    js = _jump_sum(r, dNc_i, active)
    if js is not None:
        mart = mart + js
    fit_y, pred = proj.fit_project(nxt - mart)
    val = pred + driver(pred, z, r) * dt
    # z and r tables are stored before the 1/dt and 1/(pi dt) scalings
    fits = {"y": fit_y, "z": fit_z, "r": fit_r, "r_marks": idx}
    return val, pred, z, r, fits


def _check_finite(arr, exc, what):
    if not np.all(np.isfinite(arr)):
        raise exc(f"{what} became non-finite")


def _picard(step_fn, cfg: PicardConfig, decoupled, label):
    """Run ``step_fn(prev_outputs) -> (outputs, monitored)`` to a fixed point.

    ``monitored`` is a tuple of arrays whose sup-L2 change drives the residual.
    Damping applies to the outputs fed back into the next pass.
    """
    inputs = None
    prev_mon = None
    scales = None
    residuals = []
    for it in range(cfg.max_iter):
        try:
            out, mon = step_fn(inputs)
        except (NonFiniteState, NonFiniteValue) as exc:
            if it == 0:
                raise
            raise PicardDiverged(f"{label}: non-finite iterate at Picard pass {it + 1}", residuals) from exc
        if decoupled:
            return out, [0.0]
        if scales is None:
            scales = [(_sup_l2(m) or 1.0) for m in mon]
        else:
            res = max(_sup_l2(a - b) / s for a, b, s in zip(mon, prev_mon, scales))
            residuals.append(res)
            if not np.isfinite(res) or res > cfg.blowup:
                raise PicardDiverged(f"{label}: Picard residual blew up ({res:.3e})", residuals)
            if res < cfg.tol:
                return out, residuals
        prev_mon = mon
        fb = out["feedback"]
        if inputs is None:
            inputs = fb
        else:
            th = cfg.damping
            inputs = tuple(th * a + (1 - th) * b for a, b in zip(fb, inputs))
    raise PicardDiverged(
        f"{label}: no convergence in {cfg.max_iter} Picard passes (last residual {residuals[-1] if residuals else float('nan'):.3e})",
        residuals,
    )


# ---------------------------------------------------------------------------
# state system


def simulate_forward(spec: ProblemSpec, batch: ScenarioBatch, control: ControlProcess, backward=None):
    """Euler pass for the forward component.

    ``backward`` holds per-path arrays ``(y_hat (P, N, m), z (P, N, m, d), r (P, N, M, m))``
    for the backward slots of the coefficients; ``None`` means zeros.
    Returns ``(x, u, jump_active)``.
    """
    dims, M = spec.dims, spec.marks.M
    P, N, dt = batch.P, batch.grid.N, batch.grid.dt
    t = batch.grid.t
    if backward is None:
        backward = (np.zeros((P, N, dims.m)), np.zeros((P, N, dims.m, dims.d)), np.zeros((P, N, M, dims.m)))
    yb, zb, rb = backward
    c = spec.coeffs
    x = np.empty((P, N + 1, dims.n))
    x[:, 0] = spec.a
    u = np.empty((P, N, dims.k))
    active = np.zeros((N, M), dtype=bool)
    dNc = batch.dNc
    for i in range(N):
        ui = control.at(i, t[i], x, dt)
        u[:, i] = ui
        args = (t[i], x[:, i], yb[:, i], zb[:, i], rb[:, i], ui)
        nxt = x[:, i] + c.b.value(*args) * dt + np.einsum("pnd,pd->pn", c.g.value(*args), batch.dB[:, i])
        if M:
            sig = c.sigma.value(*args)
            active[i] = _active(sig)
            js = _jump_sum(sig, dNc[:, i], active[i])
            if js is not None:
                nxt = nxt + js
        _check_finite(nxt, NonFiniteState, f"x at step {i + 1}")
        x[:, i + 1] = nxt
    return x, u, active


def terminal_value(spec: ProblemSpec, batch: ScenarioBatch, xN):
    term = spec.terminal
    if term.kind == "driver":
        return np.asarray(term.fn(batch.B_T, batch.counts_T), dtype=float)
    return np.asarray(term.fn(xN), dtype=float)


def _state_backward(spec, batch, x, u, active):
    dims, M = spec.dims, spec.marks.M
    P, N, dt = batch.P, batch.grid.N, batch.grid.dt
    t = batch.grid.t
    pi = spec.marks.weights
    fl = spec.filtration
    y = np.empty((P, N + 1, dims.m))
    y_hat = np.empty((P, N, dims.m))
    z = np.empty((P, N, dims.m, dims.d))
    r = np.zeros((P, N, M, dims.m))
    y[:, N] = terminal_value(spec, batch, x[:, N])
    _check_finite(y[:, N], NonFiniteValue, "terminal value")
    uses_counts = spec.terminal.kind == "driver" and spec.terminal.uses_drivers
    fits = [None] * N
    for i in range(N - 1, -1, -1):
        proj = Projector(_state_regressor(spec, batch, x, i), fl.degree, fl.ridge)
        act = np.ones(M, bool) if uses_counts else active[i]

        def driver(pred, zi, ri, i=i):
            return spec.coeffs.f.value(t[i], x[:, i], pred, zi, ri, u[:, i])

        val, pred, zi, ri, fit = _backward_step(proj, y[:, i + 1], batch.dB[:, i], batch.dNc[:, i], pi, dt, act, driver)
        if i == 0:
            val = path_mean(val)  # x_0 is deterministic, so y_0 is too
        _check_finite(val, NonFiniteValue, f"y at step {i}")
        y[:, i], y_hat[:, i], z[:, i], r[:, i] = val, pred, zi, ri
        fits[i] = fit
    return y, y_hat, z, r, fits


def solve_fbsde(spec: ProblemSpec, batch: ScenarioBatch, control: ControlProcess, picard: PicardConfig | None = None) -> Trajectory:
    """Solve the controlled forward-backward system on ``batch``.

    Raises
    ------
    PicardDiverged
        When the forward/backward fixed-point iteration does not settle.
    """
    cfg = picard or PicardConfig()

    def step(inputs):
        x, u, active = simulate_forward(spec, batch, control, inputs)
        y, y_hat, z, r, fits = _state_backward(spec, batch, x, u, active)
        out = {"x": x, "u": u, "active": active, "y": y, "y_hat": y_hat, "z": z, "r": r, "fits": fits,
               "feedback": (y_hat, z, r)}
        return out, (x, y)

    out, residuals = _picard(step, cfg, spec.forward_decoupled, "state system")
    return Trajectory(out["x"], out["y"], out["z"], out["r"], out["y_hat"], out["u"], out["active"],
                      out["fits"], residuals)


# ---------------------------------------------------------------------------
# adjoint system


def _coef_partials(spec, t, traj, i, u=None):
    u = traj.u[:, i] if u is None else u
    args = (t, traj.x[:, i], traj.y_hat[:, i], traj.z[:, i], traj.r[:, i], u)
    c = spec.coeffs
    return {name: getattr(c, name).partials(*args) for name in ("b", "g", "sigma", "f", "l")}


def _adjoint_terminal(spec, traj, kN):
    pN = np.asarray(spec.coeffs.phi.grad(traj.x[:, -1]), dtype=float)
    if spec.terminal.kind == "state":
        pN = pN - np.einsum("pmn,pm->pn", spec.terminal.grad(traj.x[:, -1]), kN)
    return pN


def solve_adjoint(spec: ProblemSpec, batch: ScenarioBatch, traj: Trajectory, picard: PicardConfig | None = None,
                  partials=None) -> AdjointTrajectory:
    """Solve for ``(p, q, beta, k)``: ``k`` forward from ``-grad h(y_0)``, ``p`` backward from ``grad phi(x_T)``."""
    cfg = picard or PicardConfig()
    dims, M = spec.dims, spec.marks.M
    P, N, dt = batch.P, batch.grid.N, batch.grid.dt
    t = batch.grid.t
    pi = spec.marks.weights
    fl = spec.filtration
    if partials is None:
        partials = [_coef_partials(spec, t[i], traj, i) for i in range(N)]
    state = [(traj.x[:, i], traj.y_hat[:, i], traj.z[:, i], traj.r[:, i], traj.u[:, i]) for i in range(N)]
    k0 = -np.asarray(spec.coeffs.h.grad(traj.y[:, 0]), dtype=float)

    def step(inputs):
        if inputs is None:
            pp_in = np.zeros((P, N, dims.n))
            q_in = np.zeros((P, N, dims.n, dims.d))
            b_in = np.zeros((P, N, M, dims.n))
        else:
            pp_in, q_in, b_in = inputs
        k = np.empty((P, N + 1, dims.m))
        k[:, 0] = k0
        active = traj.jump_active.copy()
        for i in range(N):
            gH = grad_H(spec, t[i], *state[i], pp_in[:, i], q_in[:, i], b_in[:, i], k[:, i], parts=partials[i])
            nxt = k[:, i] - gH.y * dt - np.einsum("pmd,pd->pm", gH.z, batch.dB[:, i])
            if M:
                active[i] |= _active(gH.r)
                js = _jump_sum(gH.r, batch.dNc[:, i], active[i])
                if js is not None:
                    nxt = nxt - js
            _check_finite(nxt, NonFiniteValue, f"k at step {i + 1}")
            k[:, i + 1] = nxt
        p = np.empty((P, N + 1, dims.n))
        p_pred = np.empty((P, N, dims.n))
        q = np.empty((P, N, dims.n, dims.d))
        beta = np.zeros((P, N, M, dims.n))
        p[:, N] = _adjoint_terminal(spec, traj, k[:, N])
        for i in range(N - 1, -1, -1):
            reg = np.concatenate([_state_regressor(spec, batch, traj.x, i), k[:, i]], axis=1)
            proj = Projector(reg, fl.degree, fl.ridge)

            def driver(pred, qi, bi, i=i):
                return grad_H(spec, t[i], *state[i], pred, qi, bi, k[:, i], parts=partials[i]).x

            val, pred, qi, bi, _ = _backward_step(proj, p[:, i + 1], batch.dB[:, i], batch.dNc[:, i], pi, dt,
                                                  active[i], driver)
            _check_finite(val, NonFiniteValue, f"p at step {i}")
            p[:, i], p_pred[:, i], q[:, i], beta[:, i] = val, pred, qi, bi
        out = {"p": p, "p_pred": p_pred, "q": q, "beta": beta, "k": k, "feedback": (p_pred, q, beta)}
        return out, (k, p)

    out, residuals = _picard(step, cfg, spec.forward_decoupled, "adjoint system")
    return AdjointTrajectory(out["p"], out["q"], out["beta"], out["k"], out["p_pred"], residuals)


# ---------------------------------------------------------------------------
# variational system


def solve_variational(spec: ProblemSpec, batch: ScenarioBatch, traj: Trajectory, theta, picard: PicardConfig | None = None,
                      partials=None) -> VariationalTrajectory:
    """Linearization of the state system along the control direction ``theta`` (P, N, k)."""
    cfg = picard or PicardConfig()
    dims, M = spec.dims, spec.marks.M
    P, N, dt = batch.P, batch.grid.N, batch.grid.dt
    t = batch.grid.t
    pi = spec.marks.weights
    fl = spec.filtration
    theta = np.asarray(theta, dtype=float)
    if partials is None:
        partials = [_coef_partials(spec, t[i], traj, i) for i in range(N)]

    def step(inputs):
        if inputs is None:
            yb = np.zeros((P, N, dims.m))
            zb = np.zeros((P, N, dims.m, dims.d))
            rb = np.zeros((P, N, M, dims.m))
        else:
            yb, zb, rb = inputs
        X1 = np.empty((P, N + 1, dims.n))
        X1[:, 0] = 0.0
        active = traj.jump_active.copy()
        for i in range(N):
            dirs = {"x": X1[:, i], "y": yb[:, i], "z": zb[:, i], "r": rb[:, i], "v": theta[:, i]}
            pt = partials[i]
            nxt = X1[:, i] + directional(pt["b"], dirs, pi) * dt
            nxt = nxt + np.einsum("pnd,pd->pn", directional(pt["g"], dirs, pi), batch.dB[:, i])
            if M:
                dsig = directional(pt["sigma"], dirs, pi)
                active[i] |= _active(dsig)
                js = _jump_sum(dsig, batch.dNc[:, i], active[i])
                if js is not None:
                    nxt = nxt + js
            _check_finite(nxt, NonFiniteState, f"X1 at step {i + 1}")
            X1[:, i + 1] = nxt
        Y1 = np.empty((P, N + 1, dims.m))
        Y1h = np.empty((P, N, dims.m))
        Z1 = np.empty((P, N, dims.m, dims.d))
        R1 = np.zeros((P, N, M, dims.m))
        if spec.terminal.kind == "state":
            Y1[:, N] = np.einsum("pmn,pn->pm", spec.terminal.grad(traj.x[:, N]), X1[:, N])
        else:
            Y1[:, N] = 0.0
        for i in range(N - 1, -1, -1):
            reg = np.concatenate([_state_regressor(spec, batch, traj.x, i), X1[:, i]], axis=1)
            proj = Projector(reg, fl.degree, fl.ridge)

            def driver(pred, zi, ri, i=i):
                dirs = {"x": X1[:, i], "y": pred, "z": zi, "r": ri, "v": theta[:, i]}
                return directional(partials[i]["f"], dirs, pi)

            val, pred, zi, ri, _ = _backward_step(proj, Y1[:, i + 1], batch.dB[:, i], batch.dNc[:, i], pi, dt,
                                                  active[i], driver)
            if i == 0:
                val = path_mean(val)
            Y1[:, i], Y1h[:, i], Z1[:, i], R1[:, i] = val, pred, zi, ri
        out = {"X1": X1, "Y1": Y1, "Y1h": Y1h, "Z1": Z1, "R1": R1, "feedback": (Y1h, Z1, R1)}
        return out, (X1, Y1)

    out, residuals = _picard(step, cfg, spec.forward_decoupled, "variational system")
    return VariationalTrajectory(out["X1"], out["Y1"], out["Z1"], out["R1"], out["Y1h"], theta, residuals)


# ---------------------------------------------------------------------------
# cost


@dataclass
class CostEstimate:
    J: float
    se: float
    per_path: np.ndarray
    admissibility: float  # sample mean of int |l| dt + |phi| + |h|

    def __iter__(self):
        return iter((self.J, self.se))


def cost_per_path(spec: ProblemSpec, batch: ScenarioBatch, traj: Trajectory):
    N, dt = batch.grid.N, batch.grid.dt
    t = batch.grid.t
    c = spec.coeffs
    run = np.zeros(batch.P)
    run_abs = np.zeros(batch.P)
    for i in range(N):
        li = c.l.value(t[i], traj.x[:, i], traj.y_hat[:, i], traj.z[:, i], traj.r[:, i], traj.u[:, i])
        run += li * dt
        run_abs += np.abs(li) * dt
    phi = c.phi.value(traj.x[:, N])
    h = c.h.value(traj.y[:, 0])
    return run + phi + h, run_abs + np.abs(phi) + np.abs(h)


def mean_se(values):
    values = np.asarray(values, dtype=float)
    n = values.shape[0]
    m = float(path_mean(values))
    se = float(np.std(values, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return m, se


def estimate_cost(spec: ProblemSpec, batch: ScenarioBatch, traj: Trajectory) -> CostEstimate:
    total, absval = cost_per_path(spec, batch, traj)
    if not np.all(np.isfinite(total)):
        raise NonFiniteCost("cost functional is not finite on some path")
    J, se = mean_se(total)
    return CostEstimate(J, se, total, float(np.mean(absval)))


# ---------------------------------------------------------------------------
# export


def _fmt(v):
    return format(float(v), ".17g")


def write_trajectory_csv(path, traj: Trajectory, grid):
    P, N1, n = traj.x.shape
    N = N1 - 1
    m = traj.y.shape[2]
    d = traj.z.shape[3]
    M = traj.r.shape[2]
    header = ["path", "step", "t"] + [f"x_{a + 1}" for a in range(n)] + [f"y_{a + 1}" for a in range(m)]
    header += [f"z_{a + 1}_{b + 1}" for a in range(m) for b in range(d)]
    header += [f"r_{j + 1}_{c + 1}" for j in range(M) for c in range(m)]
    t = grid.t
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for p in range(P):
            for i in range(N + 1):
                row = [p, i, _fmt(t[i])] + [_fmt(v) for v in traj.x[p, i]] + [_fmt(v) for v in traj.y[p, i]]
                if i < N:
                    row += [_fmt(v) for v in traj.z[p, i].ravel()] + [_fmt(v) for v in traj.r[p, i].ravel()]
                else:
                    row += [""] * (m * d + M * m)
                w.writerow(row)


def write_control_csv(path, u, grid):
    P, N, k = u.shape
    t = grid.t
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "step", "t"] + [f"u_{a + 1}" for a in range(k)])
        for p in range(P):
            for i in range(N):
                w.writerow([p, i, _fmt(t[i])] + [_fmt(v) for v in u[p, i]])
