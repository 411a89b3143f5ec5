"""Directional derivatives of the cost, stationarity, integration by parts, moment diagnostics.

Three estimators of ``d/dy J(u + y theta)`` at ``y = 0``:

* :func:`gateaux_fd` - central difference of the cost on a fixed batch;
* :func:`gateaux_variational` - one solve of the linearized system;
* :func:`gateaux_hamiltonian` - ``E int <grad_v H, theta> dt`` from the adjoint.

Each returns ``(estimate, standard error)`` computed from per-path values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .fbsde import (
    ControlProcess,
    PicardConfig,
    _coef_partials,
    admissible_regressor,
    condexp,
    cost_per_path,
    mean_se,
    solve_adjoint,
    solve_fbsde,
    solve_variational,
)
from .hamiltonian import grad_H
from .model import ControlSet, FiltrationSpec, ProblemSpec
from .regression import Projector, path_mean
from .scenario import ScenarioBatch

TIGHT_PICARD = PicardConfig(max_iter=400, damping=0.5, tol=1e-11)


# ---------------------------------------------------------------------------
# directions


def admissible_radius(u, theta, cset: ControlSet):
    """Largest ``delta`` with ``u + y theta`` in U for every ``|y| <= delta`` (box sets in closed form)."""
    u = np.asarray(u, float)
    theta = np.asarray(theta, float)
    if not np.any(theta):
        return np.inf
    if cset.kind == "box":
        with np.errstate(divide="ignore", invalid="ignore"):
            up = np.where(theta != 0, (cset.upper - u) / np.abs(theta), np.inf)
            lo = np.where(theta != 0, (u - cset.lower) / np.abs(theta), np.inf)
        return float(max(0.0, min(up.min(), lo.min())))
    # bisection for the other convex sets
    lo_r, hi_r = 0.0, 1.0
    while cset.contains(u + hi_r * theta) and cset.contains(u - hi_r * theta) and hi_r < 1e6:
        hi_r *= 2
    for _ in range(60):
        mid = 0.5 * (lo_r + hi_r)
        if cset.contains(u + mid * theta) and cset.contains(u - mid * theta):
            lo_r = mid
        else:
            hi_r = mid
    return lo_r


@dataclass
class DirectionProcess:
    """Bounded perturbation ``theta[p, i]`` with its sup bound and admissible radius."""

    values: np.ndarray
    bound: float
    radius: float = np.inf

    @classmethod
    def build(cls, values, u=None, cset=None):
        values = np.asarray(values, float)
        radius = np.inf if u is None else admissible_radius(u, values, cset)
        return cls(values, float(np.max(np.abs(values), initial=0.0)), radius)


def indicator_direction(grid, P, k, t0, width, axis=0, alpha=1.0):
    """``theta_s = alpha 1[t0, t0 + width)(s)`` on one control axis, aligned to grid nodes.

    ``alpha`` is a scalar or a per-path array (measurable at ``t0``).
    """
    t = grid.t[:-1]
    mask = (t >= t0 - 1e-12) & (t < t0 + width - 1e-12)
    out = np.zeros((P, grid.N, k))
    out[:, mask, axis] = np.broadcast_to(np.asarray(alpha, float), (P,))[:, None]
    return out


def random_direction(spec: ProblemSpec, batch: ScenarioBatch, x, rng, filtration: FiltrationSpec | None = None):
    """``theta_i = a_i + b_i tanh(X_i)`` with ``X_i`` the admissible regressor (bounded by ``|a|+|b|``)."""
    filtration = filtration or spec.filtration
    N, dt, P, k = batch.grid.N, batch.grid.dt, batch.P, spec.dims.k
    a = rng.uniform(-1, 1, size=(N, k))
    b = rng.uniform(-1, 1, size=(N, k))
    w = rng.standard_normal(spec.dims.n)
    out = np.empty((P, N, k))
    for i in range(N):
        X = admissible_regressor(filtration, x, i, dt)
        s = np.zeros(P) if X is None else np.tanh(X @ w)
        out[:, i] = a[i] + b[i] * s[:, None]
    return out


# ---------------------------------------------------------------------------
# Gateaux estimators


def _as_array_control(spec, batch, u, picard):
    if isinstance(u, ControlProcess):
        if u.values is None:
            u = ControlProcess(solve_fbsde(spec, batch, u, picard).u, filtration=u.filtration)
        return u
    return ControlProcess(np.asarray(u, float))


def gateaux_fd(spec: ProblemSpec, batch: ScenarioBatch, u, theta, step=1e-4, picard: PicardConfig | None = None):
    """Central difference ``[J(u + y theta) - J(u - y theta)] / (2 y)`` with common noise."""
    picard = picard or TIGHT_PICARD
    theta = np.asarray(theta, float)
    if not np.any(theta):
        return 0.0, 0.0
    if not step > 0:
        raise ValueError("step must be positive")
    u = _as_array_control(spec, batch, u, picard)
    plus = solve_fbsde(spec, batch, u.perturbed(theta, step), picard)
    minus = solve_fbsde(spec, batch, u.perturbed(theta, -step), picard)
    jp, _ = cost_per_path(spec, batch, plus)
    jm, _ = cost_per_path(spec, batch, minus)
    return mean_se((jp - jm) / (2 * step))


def variational_per_path(spec, batch, traj, var):
    """Per-path value of the cost derivative from a solved variational system."""
    N, dt = batch.grid.N, batch.grid.dt
    t = batch.grid.t
    pi = spec.marks.weights
    c = spec.coeffs
    total = np.zeros(batch.P)
    for i in range(N):
        lp = c.l.partials(t[i], traj.x[:, i], traj.y_hat[:, i], traj.z[:, i], traj.r[:, i], traj.u[:, i])
        term = (
            np.einsum("pa,pa->p", lp.x, var.X1[:, i])
            + np.einsum("pa,pa->p", lp.y, var.Y1_hat[:, i])
            + np.einsum("pab,pab->p", lp.z, var.Z1[:, i])
            + np.einsum("j,pja,pja->p", pi, lp.r, var.R1[:, i])
            + np.einsum("pa,pa->p", lp.v, var.theta[:, i])
        )
        total += term * dt
    total += np.einsum("pa,pa->p", c.phi.grad(traj.x[:, N]), var.X1[:, N])
    total += np.einsum("pa,pa->p", c.h.grad(traj.y[:, 0]), var.Y1[:, 0])
    return total


def gateaux_variational(spec: ProblemSpec, batch: ScenarioBatch, u, theta, traj=None,
                        picard: PicardConfig | None = None, partials=None):
    """Cost derivative from one solve of the linearized system along ``theta``."""
    picard = picard or PicardConfig(max_iter=200, tol=1e-10)
    theta = np.asarray(theta, float)
    if traj is None:
        traj = solve_fbsde(spec, batch, _as_array_control(spec, batch, u, picard), picard)
    if not np.any(theta):
        return 0.0, 0.0
    var = solve_variational(spec, batch, traj, theta, picard, partials=partials)
    return mean_se(variational_per_path(spec, batch, traj, var))


def hamiltonian_v(spec, batch, traj, adjoint, partials=None):
    """``grad_v H`` along the solved trajectory, shape (P, N, k)."""
    N = batch.grid.N
    t = batch.grid.t
    out = np.empty((batch.P, N, spec.dims.k))
    for i in range(N):
        parts = None if partials is None else partials[i]
        g = grad_H(spec, t[i], traj.x[:, i], traj.y_hat[:, i], traj.z[:, i], traj.r[:, i], traj.u[:, i],
                   adjoint.p_pred[:, i], adjoint.q[:, i], adjoint.beta[:, i], adjoint.k[:, i], parts=parts)
        out[:, i] = g.v
    return out


def gateaux_hamiltonian(spec: ProblemSpec, batch: ScenarioBatch, traj, theta, adjoint, Hv=None):
    """``E sum_i <grad_v H_i, theta_i> dt``; pass a precomputed ``Hv`` to reuse it across directions."""
    theta = np.asarray(theta, float)
    if not np.any(theta):
        return 0.0, 0.0
    Hv = hamiltonian_v(spec, batch, traj, adjoint) if Hv is None else Hv
    per = np.einsum("pik,pik->p", Hv, theta) * batch.grid.dt
    return mean_se(per)


# ---------------------------------------------------------------------------
# stationarity


@dataclass
class StationarityReport:
    norm: float  # max over steps of the cross-path RMS of G
    table: np.ndarray  # RMS per step
    se: np.ndarray  # standard error of the mean of grad_v H per step
    G: np.ndarray  # (P, N, k)

    @property
    def worst_step(self):
        return int(np.argmax(self.table))


def stationarity_residual(spec, batch, traj, adjoint, filtration=None, Hv=None):
    """``G = E[grad_v H | info_t]`` per step and its largest cross-path RMS."""
    filtration = spec.filtration if filtration is None else filtration
    Hv = hamiltonian_v(spec, batch, traj, adjoint) if Hv is None else Hv
    N, P = batch.grid.N, batch.P
    G = np.empty_like(Hv)
    table = np.empty(N)
    se = np.empty(N)
    for i in range(N):
        G[:, i] = condexp(Hv[:, i], i, filtration, batch, traj)
        table[i] = float(np.sqrt(np.mean(np.sum(G[:, i] ** 2, axis=1))))
        se[i] = float(np.max(np.std(Hv[:, i], axis=0, ddof=1)) / np.sqrt(P)) if P > 1 else 0.0
    return StationarityReport(float(table.max()), table, se, G)


def transfer_control(control: ControlProcess, P):
    """The same control on ``P`` other paths, or None when it is tied to particular paths."""
    if control.is_policy:
        return control
    v = control.values
    if not np.all(v == v[:1]):
        return None
    return ControlProcess(np.broadcast_to(v[:1], (P,) + v.shape[1:]).copy(), filtration=control.filtration)


@dataclass
class GradientNoise:
    """Spread of the estimated ``G`` surface across independent batches.

    ``se[p, i]`` is the standard deviation (over replicates) of the fitted
    ``G`` evaluated at the main batch's regressor of path ``p``, in Euclidean
    norm over control axes.  ``replicates`` counts the extra batches; zero
    means the control could not be carried over and ``se`` is all zeros.
    """

    se: np.ndarray  # (P, N)
    replicates: int

    @property
    def pooled_se(self):
        """Root-mean-square of ``se`` over paths and steps."""
        return float(np.sqrt(np.mean(self.se ** 2)))

    def tolerance(self, abs_tol=1e-4):
        """Bound ``3 pooled SE + abs_tol`` on a stationarity residual attributable to noise."""
        return 3 * self.pooled_se + abs_tol


def gradient_noise(spec, batches, control, traj, G, filtration=None, picard=None) -> GradientNoise:
    """Replicate-based standard error of ``G = E[grad_v H | info]`` on the main paths.

    The state, adjoint and ``G`` regressions are re-solved on each batch in
    ``batches``; each fitted ``G`` is evaluated at the main trajectory's
    regressor.  This captures the regression error carried by the adjoint,
    which the cross-path spread of ``grad_v H`` on one batch does not.
    """
    filtration = spec.filtration if filtration is None else filtration
    P, N, k = G.shape
    dt = batches[0].grid.dt if batches else 0.0
    surfaces = [G]
    for rb in batches:
        ctrl = transfer_control(control, rb.P)
        if ctrl is None:
            return GradientNoise(np.zeros((P, N)), 0)
        tr = solve_fbsde(spec, rb, ctrl, picard)
        ad = solve_adjoint(spec, rb, tr, picard)
        Hv = hamiltonian_v(spec, rb, tr, ad)
        S = np.empty_like(G)
        for i in range(N):
            Xr = admissible_regressor(filtration, tr.x, i, dt)
            fit = Projector(Xr, filtration.degree, filtration.ridge).fit(Hv[:, i])
            Xm = admissible_regressor(filtration, traj.x, i, dt)
            S[:, i] = np.broadcast_to(fit.predict(Xm), (P, k))
        surfaces.append(S)
    spread = np.std(np.stack(surfaces), axis=0, ddof=1)
    return GradientNoise(np.sqrt(np.sum(spread ** 2, axis=-1)), len(batches))


# ---------------------------------------------------------------------------
# integration by parts


@dataclass
class ItoProcess:
    """``dY = b(t, Y) dt + g(t, Y) dB + sum_j sigma(t, Y)_j dNc_j`` started at ``y0``.

    ``b`` returns (P, q), ``g`` (P, q, d) and ``sigma`` (P, M, q).
    """

    y0: np.ndarray
    b: Callable
    g: Callable
    sigma: Callable

    @classmethod
    def constant(cls, y0, b=0.0, g=0.0, sigma=0.0, d=1, M=1):
        """Constant coefficients; ``g`` and ``sigma`` act the same on every Brownian axis / mark."""
        y0 = np.atleast_1d(np.asarray(y0, float))
        q = y0.size
        return cls(
            y0,
            lambda t, Y: np.full((Y.shape[0], q), float(b)),
            lambda t, Y: np.full((Y.shape[0], q, d), float(g)),
            lambda t, Y: np.full((Y.shape[0], M, q), float(sigma)),
        )


def _simulate_ito(proc: ItoProcess, batch: ScenarioBatch):
    P, N, dt = batch.P, batch.grid.N, batch.grid.dt
    t = batch.grid.t
    q = proc.y0.size
    Y = np.empty((P, N + 1, q))
    Y[:, 0] = proc.y0
    gs, ss = [], []
    for i in range(N):
        b = proc.b(t[i], Y[:, i])
        g = proc.g(t[i], Y[:, i])
        s = proc.sigma(t[i], Y[:, i]) if batch.M else np.zeros((P, 0, q))
        Y[:, i + 1] = (Y[:, i] + b * dt + np.einsum("pqd,pd->pq", g, batch.dB[:, i])
                       + np.einsum("pjq,pj->pq", s, batch.dNc[:, i]))
        gs.append(g)
        ss.append(s)
    return Y, gs, ss


@dataclass
class IBPReport:
    lhs: float
    rhs: float
    difference: float
    se: float

    def passes(self, dt, C=2.0):
        return abs(self.difference) <= 3 * self.se + C * dt


def verify_ibp(proc1: ItoProcess, proc2: ItoProcess, batch: ScenarioBatch) -> IBPReport:
    """Compare ``E<Y1_T, Y2_T>`` with the discretized product rule for jump diffusions.

    ``rhs = <y1, y2> + E sum (<Y1_i, dY2_i> + <dY1_i, Y2_i> + <g1, g2> dt + sum_j pi_j <s1_j, s2_j> dt)``
    """
    Y1, g1, s1 = _simulate_ito(proc1, batch)
    Y2, g2, s2 = _simulate_ito(proc2, batch)
    dt = batch.grid.dt
    pi = batch.marks.weights
    lhs = np.einsum("pq,pq->p", Y1[:, -1], Y2[:, -1])
    rhs = np.full(batch.P, float(np.dot(proc1.y0, proc2.y0)))
    dY1 = np.diff(Y1, axis=1)
    dY2 = np.diff(Y2, axis=1)
    rhs = rhs + np.einsum("piq,piq->p", Y1[:, :-1], dY2) + np.einsum("piq,piq->p", dY1, Y2[:, :-1])
    for i in range(batch.grid.N):
        rhs = rhs + np.einsum("pqd,pqd->p", g1[i], g2[i]) * dt
        if batch.M:
            rhs = rhs + np.einsum("j,pjq,pjq->p", pi, s1[i], s2[i]) * dt
    diff = lhs - rhs
    d, se = mean_se(diff)
    return IBPReport(float(np.mean(lhs)), float(np.mean(rhs)), d, se)


# ---------------------------------------------------------------------------
# moment diagnostics


MOMENT_KEYS = (
    "state_gap_q",  # E int (x^ - x)' q q' (x^ - x) dt
    "state_gap_beta",  # E int (x^ - x)' sum_j pi_j beta beta' (x^ - x) dt
    "backward_gap_Hz",  # E int (y^ - y)' Hz Hz' (y^ - y) dt
    "backward_gap_Hr",  # E int (y^ - y)' sum_j pi_j Hr Hr' (y^ - y) dt
    "p_g",  # E int p' g g' p dt
    "p_sigma",  # E int p' sum_j pi_j sigma sigma' p dt
    "k_z",  # E int k' z z' k dt
    "k_r",  # E int k' sum_j pi_j r r' k dt
    "Hv_sq",  # E int |grad_v H|^2 dt
)
JUMP_KEYS = {"state_gap_beta", "backward_gap_Hr", "p_sigma", "k_r"}


@dataclass
class MomentReport:
    entries: dict
    warnings: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    @property
    def finite(self):
        return all(np.isfinite(v) for v in self.entries.values())


def moment_diagnostics(spec, batch, traj, adjoint, other=None, threshold=1e12) -> MomentReport:
    """Monte Carlo estimates of the quadratic moments assumed finite by the sufficiency argument.

    ``traj`` / ``adjoint`` belong to the candidate optimum; ``other`` is the
    comparison trajectory (defaults to ``traj``, which zeroes the gap terms).
    Entries above ``threshold`` are flagged.  Jump entries are skipped when
    there are no marks.
    """
    other = traj if other is None else other
    N, dt = batch.grid.N, batch.grid.dt
    t = batch.grid.t
    pi = spec.marks.weights
    c = spec.coeffs
    M = spec.marks.M
    acc = {key: np.zeros(batch.P) for key in MOMENT_KEYS}
    for i in range(N):
        dx = traj.x[:, i] - other.x[:, i]
        dy = traj.y_hat[:, i] - other.y_hat[:, i]
        p = adjoint.p_pred[:, i]
        k = adjoint.k[:, i]
        parts = _coef_partials(spec, t[i], traj, i)
        gH = grad_H(spec, t[i], traj.x[:, i], traj.y_hat[:, i], traj.z[:, i], traj.r[:, i], traj.u[:, i],
                    p, adjoint.q[:, i], adjoint.beta[:, i], k, parts=parts)
        oargs = (t[i], other.x[:, i], other.y_hat[:, i], other.z[:, i], other.r[:, i], other.u[:, i])
        g_o = c.g.value(*oargs)
        acc["state_gap_q"] += np.sum(np.einsum("pn,pnd->pd", dx, adjoint.q[:, i]) ** 2, axis=1) * dt
        acc["backward_gap_Hz"] += np.sum(np.einsum("pm,pmd->pd", dy, gH.z) ** 2, axis=1) * dt
        acc["p_g"] += np.sum(np.einsum("pn,pnd->pd", p, g_o) ** 2, axis=1) * dt
        acc["k_z"] += np.sum(np.einsum("pm,pmd->pd", k, other.z[:, i]) ** 2, axis=1) * dt
        acc["Hv_sq"] += np.sum(gH.v**2, axis=1) * dt
        if M:
            s_o = c.sigma.value(*oargs)
            acc["state_gap_beta"] += np.einsum("j,pj->p", pi, np.einsum("pn,pjn->pj", dx, adjoint.beta[:, i]) ** 2) * dt
            acc["backward_gap_Hr"] += np.einsum("j,pj->p", pi, np.einsum("pm,pjm->pj", dy, gH.r) ** 2) * dt
            acc["p_sigma"] += np.einsum("j,pj->p", pi, np.einsum("pn,pjn->pj", p, s_o) ** 2) * dt
            acc["k_r"] += np.einsum("j,pj->p", pi, np.einsum("pm,pjm->pj", k, other.r[:, i]) ** 2) * dt
    entries, warnings, skipped = {}, [], []
    for key in MOMENT_KEYS:
        if M == 0 and key in JUMP_KEYS:
            skipped.append(key)
            continue
        val = float(path_mean(acc[key]))
        entries[key] = val
        if not np.isfinite(val) or abs(val) > threshold:
            warnings.append(key)
    return MomentReport(entries, warnings, skipped)
