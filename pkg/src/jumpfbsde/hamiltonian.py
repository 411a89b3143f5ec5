"""Hamiltonian of the controlled system, its gradients, and sufficiency diagnostics.

``H = -<k, f> + <p, b> + <q, g> + l + sum_j pi_j <beta_j, sigma_j>``

All functions take batched arguments with the shapes documented in
:mod:`jumpfbsde.model`; multipliers have shapes ``p (P, n)``, ``q (P, n, d)``,
``beta (P, M, n)`` and ``k (P, m)``.  Unbatched inputs (no leading path axis)
are accepted and a scalar or unbatched gradient is returned.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteValue
from .model import BLOCKS, ProblemSpec, argument_shapes, pair


@dataclass
class HamiltonianGradient:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    r: np.ndarray
    v: np.ndarray

    def block(self, name):
        return getattr(self, name)


def _batched(spec, args):
    """Add a path axis when ``x`` comes without one."""
    x = np.asarray(args[0], dtype=float)
    if x.ndim == 1:
        return [np.asarray(a, dtype=float)[None] for a in args], True
    return [np.asarray(a, dtype=float) for a in args], False


def _check(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValue(f"{what} is not finite")
    return arr


def eval_H(spec: ProblemSpec, t, x, y, z, r, v, p, q, beta, k):
    (x, y, z, r, v, p, q, beta, k), single = _batched(spec, (x, y, z, r, v, p, q, beta, k))
    c = spec.coeffs
    pi = spec.marks.weights
    args = (t, x, y, z, r, v)
    H = (
        -np.einsum("pm,pm->p", k, c.f.value(*args))
        + np.einsum("pn,pn->p", p, c.b.value(*args))
        + np.einsum("pnd,pnd->p", q, c.g.value(*args))
        + c.l.value(*args)
    )
    if spec.marks.M:
        H = H + np.einsum("j,pjn,pjn->p", pi, beta, c.sigma.value(*args))
    _check(H, "Hamiltonian")
    return float(H[0]) if single else H


def grad_H(spec: ProblemSpec, t, x, y, z, r, v, p, q, beta, k, parts=None) -> HamiltonianGradient:
    """Partial gradients of H in ``(x, y, z, r, v)``; the ``r`` entry holds per-mark kernels.

    ``parts`` may carry precomputed coefficient partials ``{"b": Partials, ...}``.
    """
    (x, y, z, r, v, p, q, beta, k), single = _batched(spec, (x, y, z, r, v, p, q, beta, k))
    c = spec.coeffs
    pi = spec.marks.weights
    args = (t, x, y, z, r, v)
    if parts is None:
        parts = {name: getattr(c, name).partials(*args) for name in ("b", "g", "sigma", "f", "l")}
    pib = beta * pi[None, :, None]
    out = {}
    for blk in BLOCKS:
        val = (
            -pair(k, getattr(parts["f"], blk))
            + pair(p, getattr(parts["b"], blk))
            + pair(q, getattr(parts["g"], blk))
            + getattr(parts["l"], blk)
        )
        if spec.marks.M:
            val = val + pair(pib, getattr(parts["sigma"], blk))
        out[blk] = _check(np.asarray(val), f"grad_{blk} H")
    if single:
        out = {kk: vv[0] for kk, vv in out.items()}
    return HamiltonianGradient(**out)


def gradient_fd_check(spec: ProblemSpec, probe_count=100, step=1e-5, tol=1e-4, abs_floor=1e-8, seed=0):
    """Compare :func:`grad_H` with central differences of :func:`eval_H` at random probes.

    Returns ``{block: (passed, max_rel_error)}``.
    """
    rng = np.random.default_rng(seed)
    dims, M = spec.dims, spec.marks.M
    ashapes = argument_shapes(dims, M)
    P = int(probe_count)
    t = float(rng.uniform(0, spec.T))
    w = {b: rng.standard_normal((P,) + s) for b, s in ashapes.items()}
    lo, hi = spec.control_set.bounding_box(dims.k)
    w["v"] = spec.control_set.project(lo + (hi - lo) * rng.uniform(size=(P, dims.k)))
    mult = (
        rng.standard_normal((P, dims.n)),
        rng.standard_normal((P, dims.n, dims.d)),
        rng.standard_normal((P, M, dims.n)),
        rng.standard_normal((P, dims.m)),
    )
    grad = grad_H(spec, t, *(w[b] for b in BLOCKS), *mult)
    pi = spec.marks.weights
    res = {}
    for blk in BLOCKS:
        if w[blk].size == 0:
            continue
        dw = rng.standard_normal(w[blk].shape)
        plus, minus = dict(w), dict(w)
        plus[blk] = w[blk] + step * dw
        minus[blk] = w[blk] - step * dw
        fd = (eval_H(spec, t, *(plus[b] for b in BLOCKS), *mult) - eval_H(spec, t, *(minus[b] for b in BLOCKS), *mult)) / (2 * step)
        g = grad.block(blk)
        if blk == "r":
            g = g * pi[None, :, None]
        an = np.einsum("pa,pa->p", g.reshape(P, -1), dw.reshape(P, -1))
        err = np.abs(fd - an)
        scale = np.maximum(np.abs(fd), np.abs(an))
        ok = bool(np.all(err <= tol * scale + abs_floor))
        res[blk] = (ok, float(np.max(err / np.where(scale > 0, scale, 1.0))))
    return res


# ---------------------------------------------------------------------------
# convexity


@dataclass
class ConvexityReport:
    passed: bool
    worst_violation: float
    samples: int


def _gradient_inequality(f, grad, w1, w2, inner, tol):
    f1, f2 = f(w1), f(w2)
    gap = f2 - f1 - inner(grad(w1), w2, w1)
    scale = np.maximum(1.0, np.maximum(np.abs(f1), np.abs(f2)))
    worst = float(np.min(gap / scale))
    return worst >= -tol, worst


def convexity_probe(spec: ProblemSpec, multipliers, samples=1000, box=1.0, t=None, seed=0, tol=1e-8):
    """Sampled gradient inequality ``H(w2) - H(w1) >= <grad H(w1), w2 - w1>``.

    ``w`` stacks ``(x, y, z, r, v)``; the ``r`` block uses the pi-weighted
    pairing.  ``multipliers`` is a tuple ``(p, q, beta, k)`` of single points
    (no path axis) held fixed.  States are drawn uniformly from
    ``[-box, box]``, controls from the control set's bounding box then projected.
    A violation is reported relative to ``max(1, |H|)``.
    """
    rng = np.random.default_rng(seed)
    dims, M = spec.dims, spec.marks.M
    ashapes = argument_shapes(dims, M)
    S = int(samples)
    if S < 1:
        raise ValueError("samples must be >= 1")
    t = spec.T / 2 if t is None else t
    lo, hi = spec.control_set.bounding_box(dims.k)
    pi = spec.marks.weights

    def draw():
        w = {b: rng.uniform(-box, box, size=(S,) + s) for b, s in ashapes.items() if b != "v"}
        w["v"] = spec.control_set.project(lo + (hi - lo) * rng.uniform(size=(S, dims.k)))
        return w

    w1, w2 = draw(), draw()
    mult = [np.broadcast_to(np.asarray(m, float), (S,) + np.shape(m)) for m in multipliers]

    def f(w):
        return eval_H(spec, t, *(w[b] for b in BLOCKS), *mult)

    def grad(w):
        return grad_H(spec, t, *(w[b] for b in BLOCKS), *mult)

    def inner(g, a, b):
        tot = 0.0
        for blk in BLOCKS:
            gb = g.block(blk)
            if blk == "r":
                gb = gb * pi[None, :, None]
            tot = tot + np.einsum("pa,pa->p", gb.reshape(S, -1), (a[blk] - b[blk]).reshape(S, -1))
        return tot

    ok, worst = _gradient_inequality(f, grad, w1, w2, inner, tol)
    return ConvexityReport(ok, worst, S)


def terminal_convexity_probe(fn, dim, samples=1000, box=1.0, seed=0, tol=1e-8):
    """Same gradient inequality for ``phi`` or ``h``."""
    rng = np.random.default_rng(seed)
    w1 = rng.uniform(-box, box, size=(samples, dim))
    w2 = rng.uniform(-box, box, size=(samples, dim))
    ok, worst = _gradient_inequality(
        fn.value, fn.grad, w1, w2, lambda g, a, b: np.einsum("pa,pa->p", g, a - b), tol
    )
    return ConvexityReport(ok, worst, samples)


# ---------------------------------------------------------------------------
# maximum condition


@dataclass
class MaxConditionReport:
    passed: bool
    margins: np.ndarray  # worst margin per step net of the noise allowance
    tolerances: np.ndarray
    argmin: np.ndarray  # candidate index attaining the worst margin per step
    candidates: np.ndarray

    @property
    def worst_margin(self):
        return float(np.max(self.margins - self.tolerances))


def candidate_grid(spec: ProblemSpec, points=11):
    """Tensor grid of ``points`` values per control axis over the set's bounding box, projected into U."""
    k = spec.dims.k
    lo, hi = spec.control_set.bounding_box(k)
    axes = [np.linspace(lo[a], hi[a], points) for a in range(k)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, k)
    return np.unique(spec.control_set.project(mesh), axis=0)


def max_condition_check(spec, batch, traj, adjoint, control=None, candidates=None, filtration=None, abs_tol=1e-6,
                        gradient_se=None):
    """Check ``E[H(u_hat) | info] <= min_v E[H(v) | info] + tol`` at every step.

    Under full information every input of ``H`` at step ``i`` is already
    known at ``t_i``, so the conditional expectation is the identity.
    Otherwise it is a regression on the admissible regressor of
    ``filtration`` (default: the problem's) augmented with ``u_hat``.

    The allowance per path is ``3 SE(diff) + 3 gradient_se |u_hat - v| +
    abs_tol``.  The second term bounds, through convexity of ``H`` in
    ``v``, how far an error in the estimated ``E[grad_v H | info]`` can push
    ``H(u_hat) - H(v)`` above zero.  ``gradient_se`` is a (P, N) array of
    per-path standard errors of that estimate (see ``gradient_noise``).
    """
    from .fbsde import admissible_regressor
    from .regression import Projector

    filtration = spec.filtration if filtration is None else filtration
    u = traj.u if control is None else np.asarray(control)
    cands = candidate_grid(spec) if candidates is None else np.asarray(candidates, dtype=float).reshape(-1, spec.dims.k)
    N = batch.grid.N
    P = batch.P
    t = batch.grid.t
    margins = np.empty(N)
    tols = np.empty(N)
    arg = np.empty(N, dtype=int)
    for i in range(N):
        state = (traj.x[:, i], traj.y_hat[:, i], traj.z[:, i], traj.r[:, i])
        mult = (adjoint.p_pred[:, i], adjoint.q[:, i], adjoint.beta[:, i], adjoint.k[:, i])
        h_hat = eval_H(spec, t[i], *state, u[:, i], *mult)
        if filtration.kind == "full":
            proj = None
        else:
            X = admissible_regressor(filtration, traj.x, i, batch.grid.dt)
            reg = u[:, i] if X is None else np.concatenate([X, u[:, i]], axis=1)
            proj = Projector(reg, filtration.degree, filtration.ridge)
        best, best_j = -np.inf, 0
        for j, v in enumerate(cands):
            vv = np.broadcast_to(v, (P, v.size))
            diff = h_hat - eval_H(spec, t[i], *state, vv, *mult)
            ce = diff if proj is None else proj.project(diff)
            se = float(np.std(diff, ddof=1) / np.sqrt(P)) if P > 1 else 0.0
            excess = ce - 3 * se
            if gradient_se is not None:
                excess = excess - 3 * gradient_se[:, i] * np.linalg.norm(u[:, i] - v, axis=1)
            m = float(np.max(excess))
            if m > best:
                best, best_j = m, j
        margins[i] = best
        arg[i] = best_j
        tols[i] = abs_tol
    passed = bool(np.all(margins <= tols))
    return MaxConditionReport(passed, margins, tols, arg, cands)
