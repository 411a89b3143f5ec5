"""Problem instances: dimensions, coefficients with derivatives, marks, control set.

Every coefficient is evaluated on a batch of P points at once.  With
``n, m, d, k`` the forward, backward, Brownian and control dimensions and ``M``
the number of mark atoms, the batched argument shapes are::

    x (P, n)   y (P, m)   z (P, m, d)   r (P, M, m)   v (P, k)

and the value shapes are ``b (P, n)``, ``g (P, n, d)``, ``sigma (P, M, n)``
(all marks at once), ``f (P, m)`` and ``l (P,)``.  A partial derivative with
respect to an argument has shape ``value shape + argument shape``.  The partial
with respect to ``r`` holds per-mark kernels ``D_j``: the directional derivative
along ``dr`` is ``sum_j pi_j <D_j, dr_j>``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .errors import NonFiniteCoefficient

BLOCKS = ("x", "y", "z", "r", "v")


class Partials(NamedTuple):
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    r: np.ndarray
    v: np.ndarray


class Coefficient:
    """A batched map ``(t, x, y, z, r, v) -> value`` with its first-order partials."""

    def __init__(self, value: Callable, partials: Callable, name: str = ""):
        self.value = value
        self.partials = partials
        self.name = name

    def __call__(self, t, x, y, z, r, v):
        return self.value(t, x, y, z, r, v)

    def __repr__(self):
        return f"Coefficient({self.name or '?'})"


class TerminalFunction:
    """Scalar function of one vector argument (``phi(x)`` or ``h(y)``) and its gradient."""

    def __init__(self, value: Callable, grad: Callable, name: str = ""):
        self.value = value
        self.grad = grad
        self.name = name

    def __call__(self, w):
        return self.value(w)


@dataclass(frozen=True, eq=False)
class MarkSpace:
    atoms: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "atoms", np.asarray(self.atoms, dtype=float).reshape(-1))
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=float).reshape(-1))

    @property
    def M(self) -> int:
        return int(self.weights.size)

    @property
    def total_intensity(self) -> float:
        return float(self.weights.sum())

    @classmethod
    def empty(cls):
        return cls(np.zeros(0), np.zeros(0))


@dataclass(frozen=True)
class Dimensions:
    n: int
    m: int
    d: int
    k: int


@dataclass(frozen=True, eq=False)
class CoefficientSet:
    b: Coefficient
    g: Coefficient
    sigma: Coefficient
    f: Coefficient
    l: Coefficient
    phi: TerminalFunction
    h: TerminalFunction


@dataclass(frozen=True, eq=False)
class ControlSet:
    """Convex control set: ``box`` (lower/upper), ``ball`` (center/radius) or
    ``simplex`` ({v >= 0, sum v = total})."""

    kind: str = "box"
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    radius: float = 1.0
    center: np.ndarray | None = None
    total: float = 1.0

    def __post_init__(self):
        for name in ("lower", "upper", "center"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, np.asarray(val, dtype=float).reshape(-1))

    @classmethod
    def box(cls, lower, upper):
        return cls("box", lower=lower, upper=upper)

    @classmethod
    def ball(cls, radius, center):
        return cls("ball", radius=float(radius), center=center)

    @classmethod
    def simplex(cls, total=1.0):
        return cls("simplex", total=float(total))

    def project(self, u):
        return project_control(u, self)

    def bounding_box(self, k: int):
        if self.kind == "box":
            return self.lower.copy(), self.upper.copy()
        if self.kind == "ball":
            c = self.center if self.center is not None else np.zeros(k)
            return c - self.radius, c + self.radius
        return np.zeros(k), np.full(k, self.total)

    def contains(self, u, atol=1e-12):
        u = np.asarray(u, dtype=float)
        if self.kind == "box":
            return bool(np.all(u >= self.lower - atol) and np.all(u <= self.upper + atol))
        if self.kind == "ball":
            c = self.center if self.center is not None else 0.0
            return bool(np.all(np.linalg.norm(u - c, axis=-1) <= self.radius + atol))
        return bool(np.all(u >= -atol) and np.all(np.abs(u.sum(axis=-1) - self.total) <= atol * max(1, u.shape[-1])))


@dataclass(frozen=True)
class FiltrationSpec:
    """Information available to the controller.

    ``full`` uses the current forward state, ``delayed`` the state at
    ``(t - delta)^+`` rounded down to the grid, ``trivial`` nothing at all.
    ``degree`` and ``ridge`` configure the regression basis used for every
    conditional expectation.
    """

    kind: str = "full"
    delta: float = 0.0
    degree: int = 2
    ridge: float = 1e-8

    def lag_index(self, i: int, dt: float) -> int | None:
        """Grid index of the admissible regressor at step ``i``; ``None`` means no information."""
        if self.kind == "trivial":
            return None
        if self.kind == "full":
            return i
        j = int(np.floor(i - self.delta / dt + 1e-9))
        return None if j <= 0 else j


@dataclass(frozen=True, eq=False)
class TerminalSpec:
    """Terminal value of the backward equation.

    ``driver``: ``fn(B_T (P, d), counts_T (P, M)) -> (P, m)``, identical for
    every control on the same batch.  ``state``: ``fn(x_T) -> (P, m)`` with
    ``grad(x_T) -> (P, m, n)``; experimental, makes the terminal value depend on
    the control.
    """

    kind: str
    fn: Callable
    grad: Callable | None = None
    uses_drivers: bool = True

    @classmethod
    def constant(cls, value):
        value = np.asarray(value, dtype=float).reshape(-1)

        def fn(B_T, counts_T):
            return np.broadcast_to(value, (B_T.shape[0], value.size)).copy()

        return cls("driver", fn, uses_drivers=False)


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    dims: Dimensions
    marks: MarkSpace
    coeffs: CoefficientSet
    a: np.ndarray
    terminal: TerminalSpec
    T: float
    control_set: ControlSet
    filtration: FiltrationSpec = field(default_factory=FiltrationSpec)
    # b, g, sigma independent of (y, z, r): one Picard pass is exact
    forward_decoupled: bool = False
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "a", np.asarray(self.a, dtype=float).reshape(-1))

    def with_filtration(self, filtration):
        return _replace(self, filtration=filtration)

    def with_control_set(self, control_set):
        return _replace(self, control_set=control_set)


def _replace(spec, **changes):
    kw = {f: getattr(spec, f) for f in spec.__dataclass_fields__}
    kw.update(changes)
    return ProblemSpec(**kw)


# ---------------------------------------------------------------------------
# shapes and contractions


def value_shapes(dims: Dimensions, M: int):
    n, m, d = dims.n, dims.m, dims.d
    return {"b": (n,), "g": (n, d), "sigma": (M, n), "f": (m,), "l": ()}


def argument_shapes(dims: Dimensions, M: int):
    n, m, d, k = dims.n, dims.m, dims.d, dims.k
    return {"x": (n,), "y": (m,), "z": (m, d), "r": (M, m), "v": (k,)}


def contract(partial, direction):
    """Apply a batched Jacobian ``(P, V..., A...)`` to a direction ``(P, A...)``."""
    P = direction.shape[0]
    a_nd = direction.ndim - 1
    vshape = partial.shape[1 : partial.ndim - a_nd]
    asize = int(np.prod(direction.shape[1:], dtype=int))
    if asize == 0:
        return np.zeros((P,) + vshape)
    out = np.einsum("pva,pa->pv", partial.reshape(P, -1, asize), direction.reshape(P, asize))
    return out.reshape((P,) + vshape)


def pair(mult, partial):
    """Pair a batched multiplier ``(P, V...)`` with ``(P, V..., A...)`` over the value axes."""
    P = mult.shape[0]
    vsize = int(np.prod(mult.shape[1:], dtype=int))
    ashape = partial.shape[mult.ndim :]
    if vsize == 0:
        return np.zeros((P,) + ashape)
    out = np.einsum("pv,pva->pa", mult.reshape(P, vsize), partial.reshape(P, vsize, -1))
    return out.reshape((P,) + ashape)


def directional(partials: Partials, dirs: dict, pi):
    """Directional derivative of a coefficient along ``dirs`` (keys in BLOCKS, may be partial)."""
    total = None
    for name in BLOCKS:
        if name not in dirs:
            continue
        dw = dirs[name]
        if name == "r":
            dw = dw * np.asarray(pi)[None, :, None]
        term = contract(getattr(partials, name), dw)
        total = term if total is None else total + term
    return total


# ---------------------------------------------------------------------------
# projection onto the control set


ROUND_TOL = 4 * np.finfo(float).eps


def _project_simplex(u, total):
    # sort-based Euclidean projection onto {v >= 0, sum v = total}, rowwise
    s = -np.sort(-u, axis=-1)
    css = np.cumsum(s, axis=-1) - total
    idx = np.arange(1, u.shape[-1] + 1)
    cond = s - css / idx > 0
    rho = cond.shape[-1] - 1 - np.argmax(cond[..., ::-1], axis=-1)
    theta = np.take_along_axis(css, rho[..., None], axis=-1) / (rho[..., None] + 1)
    out = np.maximum(u - theta, 0.0)
    # spread the rounding residual of the sum over the support
    support = out > 0
    fix = (total - out.sum(axis=-1, keepdims=True)) / np.maximum(support.sum(axis=-1, keepdims=True), 1)
    return np.where(support, np.maximum(out + fix, 0.0), out)


def project_control(u_point, cset: ControlSet):
    """Euclidean projection onto the control set; works on any leading batch shape."""
    u = np.asarray(u_point, dtype=float)
    if cset.kind == "box":
        return np.minimum(np.maximum(u, cset.lower), cset.upper)
    if cset.kind == "ball":
        c = cset.center if cset.center is not None else np.zeros(u.shape[-1])
        w = u - c
        nrm = np.linalg.norm(w, axis=-1, keepdims=True)
        # points within rounding of the sphere count as inside, so projection is exactly idempotent
        outside = nrm > cset.radius * (1 + ROUND_TOL)
        scale = np.where(outside, cset.radius / np.where(nrm > 0, nrm, 1.0), 1.0)
        return np.where(outside, c + w * scale, u)
    if cset.kind == "simplex":
        inside = np.all(u >= 0, axis=-1, keepdims=True) & (
            np.abs(u.sum(axis=-1, keepdims=True) - cset.total) <= ROUND_TOL * max(cset.total, 1.0) * u.shape[-1])
        return np.where(inside, u, _project_simplex(u, cset.total))
    raise ValueError(f"unknown control set kind {cset.kind!r}")


# ---------------------------------------------------------------------------
# validation


def _probe_points(spec: ProblemSpec, P: int, rng):
    dims, M = spec.dims, spec.marks.M
    shp = argument_shapes(dims, M)
    pts = {name: rng.standard_normal((P,) + s) for name, s in shp.items() if name != "v"}
    lo, hi = spec.control_set.bounding_box(dims.k)
    v = lo + (hi - lo) * rng.uniform(size=(P, dims.k))
    pts["v"] = project_control(v, spec.control_set)
    t = float(rng.uniform(0.0, spec.T))
    return t, pts


def validate(spec: ProblemSpec) -> list[str]:
    """Return every violated invariant of ``spec`` (empty list when valid)."""
    report = []
    dims = spec.dims
    for name in ("n", "m", "d", "k"):
        val = getattr(dims, name)
        if not isinstance(val, (int, np.integer)) or val < 1:
            report.append(f"dims.{name}: must be an integer >= 1 (got {val!r})")
    if report:
        return report

    marks = spec.marks
    if marks.atoms.shape != marks.weights.shape:
        report.append("marks: atoms and weights must have the same length")
    if np.any(~np.isfinite(marks.atoms)):
        report.append("marks.atoms: must be finite")
    if np.any(~np.isfinite(marks.weights)):
        report.append("marks.weights: must be finite")
    elif np.any(marks.weights <= 0):
        bad = [int(j) for j in np.flatnonzero(marks.weights <= 0)]
        report.append(f"marks.weights: weights must be positive (offending marks {bad})")

    if not (np.isfinite(spec.T) and spec.T > 0):
        report.append(f"horizon: T must be finite and > 0 (got {spec.T!r})")
    if spec.a.shape != (dims.n,):
        report.append(f"initial_state: expected shape ({dims.n},), got {spec.a.shape}")
    elif not np.all(np.isfinite(spec.a)):
        report.append("initial_state: must be finite")

    report.extend(_validate_control_set(spec.control_set, dims.k))
    report.extend(_validate_filtration(spec.filtration))
    if report:
        return report

    report.extend(_validate_shapes(spec))
    return report


def _validate_control_set(cs: ControlSet, k: int):
    out = []
    if cs.kind == "box":
        if cs.lower is None or cs.upper is None:
            out.append("control_set: box needs lower and upper")
        elif cs.lower.shape != (k,) or cs.upper.shape != (k,):
            out.append(f"control_set: box bounds must have length k={k}")
        elif np.any(cs.lower > cs.upper):
            out.append("control_set: box lower must not exceed upper (set would be empty)")
        elif not (np.all(np.isfinite(cs.lower)) and np.all(np.isfinite(cs.upper))):
            out.append("control_set: box bounds must be finite")
    elif cs.kind == "ball":
        if not (np.isfinite(cs.radius) and cs.radius > 0):
            out.append("control_set: ball radius must be > 0")
        if cs.center is not None and cs.center.shape != (k,):
            out.append(f"control_set: ball center must have length k={k}")
    elif cs.kind == "simplex":
        if not (np.isfinite(cs.total) and cs.total > 0):
            out.append("control_set: simplex total must be > 0")
    else:
        out.append(f"control_set: unknown kind {cs.kind!r}")
    return out


def _validate_filtration(fs: FiltrationSpec):
    out = []
    if fs.kind not in ("full", "delayed", "trivial"):
        out.append(f"filtration: unknown kind {fs.kind!r}")
    if not (np.isfinite(fs.delta) and fs.delta >= 0):
        out.append("filtration: delta must be >= 0")
    if int(fs.degree) != fs.degree or fs.degree < 0:
        out.append("filtration: degree must be a non-negative integer")
    if not fs.ridge >= 0:
        out.append("filtration: ridge must be >= 0")
    return out


def _validate_shapes(spec: ProblemSpec):
    out = []
    dims, M = spec.dims, spec.marks.M
    rng = np.random.default_rng(0)
    P = 2
    t, pts = _probe_points(spec, P, rng)
    args = (t, pts["x"], pts["y"], pts["z"], pts["r"], pts["v"])
    vshapes = value_shapes(dims, M)
    ashapes = argument_shapes(dims, M)
    for name, vshape in vshapes.items():
        coef = getattr(spec.coeffs, name)
        try:
            val = np.asarray(coef.value(*args))
            parts = coef.partials(*args)
        except Exception as exc:  # noqa: BLE001 - reported, not raised
            out.append(f"{name}: evaluation failed ({type(exc).__name__}: {exc})")
            continue
        if val.shape != (P,) + vshape:
            out.append(f"{name}: value shape {val.shape[1:]} != expected {vshape}")
        for blk in BLOCKS:
            got = np.asarray(getattr(parts, blk)).shape
            want = (P,) + vshape + ashapes[blk]
            if got != want:
                out.append(f"{name}: grad_{blk} shape {got[1:]} != expected {want[1:]}")
    for name, arg, dim in (("phi", pts["x"], dims.n), ("h", pts["y"], dims.m)):
        fn = getattr(spec.coeffs, name)
        try:
            val = np.asarray(fn.value(arg))
            grd = np.asarray(fn.grad(arg))
        except Exception as exc:  # noqa: BLE001
            out.append(f"{name}: evaluation failed ({type(exc).__name__}: {exc})")
            continue
        if val.shape != (P,):
            out.append(f"{name}: value shape {val.shape[1:]} != expected ()")
        if grd.shape != (P, dim):
            out.append(f"{name}: gradient shape {grd.shape[1:]} != expected ({dim},)")

    term = spec.terminal
    if term.kind not in ("driver", "state"):
        out.append(f"terminal: unknown kind {term.kind!r}")
    else:
        try:
            if term.kind == "driver":
                xi = np.asarray(term.fn(rng.standard_normal((P, dims.d)), np.zeros((P, M))))
            else:
                xi = np.asarray(term.fn(pts["x"]))
                if term.grad is None:
                    out.append("terminal: state kind needs a gradient")
                else:
                    gshape = np.asarray(term.grad(pts["x"])).shape
                    if gshape != (P, dims.m, dims.n):
                        out.append(f"terminal: gradient shape {gshape[1:]} != ({dims.m}, {dims.n})")
            if xi.shape != (P, dims.m):
                out.append(f"terminal: value shape {xi.shape[1:]} != ({dims.m},)")
        except Exception as exc:  # noqa: BLE001
            out.append(f"terminal: evaluation failed ({type(exc).__name__}: {exc})")
    return out


# ---------------------------------------------------------------------------
# derivative checks


@dataclass
class DerivativeCheck:
    passed: bool
    max_abs_error: float
    max_rel_error: float


def _assert_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteCoefficient(f"{what} is not finite at a probe point")


def check_derivatives(spec: ProblemSpec, probe_count=100, step=1e-5, tol=1e-4, abs_floor=1e-8, seed=0):
    """Compare every supplied partial with central finite differences.

    For each coefficient and each argument block a random direction is drawn at
    every probe; the supplied directional derivative passes when
    ``|fd - an| <= tol * max(|fd|, |an|) + abs_floor`` componentwise.
    Returns ``{"b.x": DerivativeCheck, ...}``.
    """
    if step <= 0 or tol <= 0:
        raise ValueError("step and tol must be positive")
    rng = np.random.default_rng(seed)
    dims, M, pi = spec.dims, spec.marks.M, spec.marks.weights
    ashapes = argument_shapes(dims, M)
    P = int(probe_count)
    results = {}
    t, pts = _probe_points(spec, P, rng)
    for name in ("b", "g", "sigma", "f", "l"):
        coef = getattr(spec.coeffs, name)
        base = dict(pts)
        val = np.asarray(coef.value(t, *(base[b] for b in BLOCKS)))
        _assert_finite(val, name)
        parts = coef.partials(t, *(base[b] for b in BLOCKS))
        for blk in BLOCKS:
            if int(np.prod(ashapes[blk], dtype=int)) == 0:
                continue
            dw = rng.standard_normal((P,) + ashapes[blk])
            plus, minus = dict(base), dict(base)
            plus[blk] = base[blk] + step * dw
            minus[blk] = base[blk] - step * dw
            fp = np.asarray(coef.value(t, *(plus[b] for b in BLOCKS)))
            fm = np.asarray(coef.value(t, *(minus[b] for b in BLOCKS)))
            _assert_finite(fp, name)
            _assert_finite(fm, name)
            fd = (fp - fm) / (2 * step)
            an = directional(parts, {blk: dw}, pi)
            _assert_finite(an, f"grad_{blk} {name}")
            results[f"{name}.{blk}"] = _compare(fd, an, tol, abs_floor)
    for name, arg in (("phi", "x"), ("h", "y")):
        fn = getattr(spec.coeffs, name)
        w = pts[arg]
        dw = rng.standard_normal(w.shape)
        fp = np.asarray(fn.value(w + step * dw))
        fm = np.asarray(fn.value(w - step * dw))
        _assert_finite(fp, name)
        _assert_finite(fm, name)
        fd = (fp - fm) / (2 * step)
        an = np.einsum("pa,pa->p", np.asarray(fn.grad(w)), dw)
        results[f"{name}.{arg}"] = _compare(fd, an, tol, abs_floor)
    return results


def _compare(fd, an, tol, abs_floor):
    err = np.abs(fd - an)
    scale = np.maximum(np.abs(fd), np.abs(an))
    ok = bool(np.all(err <= tol * scale + abs_floor))
    rel = err / np.where(scale > 0, scale, 1.0)
    return DerivativeCheck(ok, float(err.max(initial=0.0)), float(rel.max(initial=0.0)))
