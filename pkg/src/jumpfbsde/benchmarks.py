"""Builders for affine-family problems and the named benchmark fixtures."""

from __future__ import annotations

import numpy as np

from .family import AffineCoefficient, QuadraticCost, quadratic_terminal
from .model import (
    CoefficientSet,
    ControlSet,
    Dimensions,
    FiltrationSpec,
    MarkSpace,
    ProblemSpec,
    TerminalSpec,
)

COEFFS = ("b", "g", "sigma", "f")


def _value_shape(name, dims, M):
    return {"b": (dims.n,), "g": (dims.n, dims.d), "sigma": (M, dims.n), "f": (dims.m,)}[name]


def affine_terminal(dims, M, const=None, B=None, counts=None):
    """``xi = const + B B_T + C counts_T`` (driver kind)."""
    c0 = np.zeros(dims.m) if const is None else np.asarray(const, float).reshape(dims.m)
    Bm = None if B is None else np.asarray(B, float).reshape(dims.m, dims.d)
    Cm = None if counts is None else np.asarray(counts, float).reshape(dims.m, M)
    uses = (Bm is not None and np.any(Bm)) or (Cm is not None and np.any(Cm))

    def fn(B_T, counts_T):
        out = np.broadcast_to(c0, (B_T.shape[0], dims.m)).copy()
        if Bm is not None:
            out += B_T @ Bm.T
        if Cm is not None and M:
            out += counts_T @ Cm.T
        return out

    return TerminalSpec("driver", fn, uses_drivers=bool(uses))


def affine_problem(n=1, m=1, d=1, k=1, atoms=(), weights=(), T=1.0, a=None, kappa=0.0,
                   b=None, g=None, sigma=None, f=None, l=None, phi=None, h=None, terminal=None,
                   control_set=None, filtration=None, name="affine") -> ProblemSpec:
    """Assemble a problem from the builtin family.

    ``b``, ``g``, ``sigma``, ``f`` are dicts with optional keys ``const``,
    ``A_x``, ``A_y``, ``A_z``, ``A_r``, ``A_v`` and ``kappa`` (overrides the
    shared ``kappa``).  ``l`` takes ``const``, ``lin``, ``quad`` over the stacked
    ``(x, y, vec z, vec r, v)``; ``phi`` and ``h`` take ``const``, ``lin``,
    ``quad``.  ``terminal`` takes ``const``, ``B``, ``counts``.
    """
    dims = Dimensions(int(n), int(m), int(d), int(k))
    marks = MarkSpace(np.asarray(atoms, float), np.asarray(weights, float))
    M = marks.M
    coefs = {}
    for name_c, params in (("b", b), ("g", g), ("sigma", sigma), ("f", f)):
        params = dict(params or {})
        kap = params.pop("kappa", kappa)
        coefs[name_c] = AffineCoefficient(_value_shape(name_c, dims, M), dims, marks.weights, kappa=kap,
                                          name=name_c, **params)
    lq = dict(l or {})
    coefs["l"] = QuadraticCost(dims, marks.weights, **lq)
    coefs["phi"] = quadratic_terminal(dims.n, name="phi", **(phi or {}))
    coefs["h"] = quadratic_terminal(dims.m, name="h", **(h or {}))
    decoupled = not any(coefs[c].depends_on(blk) for c in ("b", "g", "sigma") for blk in ("y", "z", "r"))
    term = affine_terminal(dims, M, **(terminal or {}))
    cs = control_set or ControlSet.box(-np.ones(dims.k), np.ones(dims.k))
    return ProblemSpec(
        dims=dims, marks=marks, coeffs=CoefficientSet(**coefs),
        a=np.zeros(dims.n) if a is None else a, terminal=term, T=float(T), control_set=cs,
        filtration=filtration or FiltrationSpec(), forward_decoupled=decoupled, name=name,
    )


# ---------------------------------------------------------------------------
# named fixtures


def zero_model(T=1.0, a=0.0):
    return affine_problem(T=T, a=[a], name="zero")


def pure_control_model(target=0.3, lower=-1.0, upper=1.0, T=1.0):
    """``l = (v - target)^2`` with control-free dynamics."""
    S = 4  # x, y, z, v for the scalar no-mark problem
    lin = np.zeros(S)
    quad = np.zeros((S, S))
    lin[3] = -2 * target
    quad[3, 3] = 2.0
    return affine_problem(T=T, a=[0.0], l={"const": target**2, "lin": lin, "quad": quad},
                          control_set=ControlSet.box([lower], [upper]), name="pure-control")


def pure_forward_model(T=1.0):
    """Forward dynamics with jumps, ``f = 0`` and ``xi = 0``: the backward part vanishes."""
    return affine_problem(
        atoms=[1.0], weights=[1.5], T=T, a=[0.5],
        b={"const": [0.1], "A_x": [[-0.3]], "A_v": [[0.5]]},
        g={"const": [[0.2]], "A_x": [[[0.1]]]},
        sigma={"const": [[0.1]], "A_x": [[[0.2]]]},
        l={"quad": np.diag([1.0, 0.0, 0.0, 0.0, 1.0])},
        phi={"quad": [[1.0]]},
        name="pure-forward",
    )


def nonlinear_model(kappa=0.5):
    """Scalar fully coupled model with one mark and the bounded nonlinearity."""
    # stacked running-cost argument (x, y, z, r, v)
    quad = np.diag([1.0, 0.5, 0.2, 0.2, 1.0])
    quad[0, 4] = quad[4, 0] = 0.1
    return affine_problem(
        atoms=[1.0], weights=[1.0], T=1.0, a=[0.5], kappa=kappa,
        b={"const": [0.1], "A_x": [[0.2]], "A_y": [[0.3]], "A_z": [[[0.1]]], "A_r": [[[0.2]]], "A_v": [[0.5]]},
        g={"const": [[0.3]], "A_x": [[[0.1]]], "A_y": [[[0.1]]], "A_z": [[[[0.05]]]], "A_v": [[[0.2]]]},
        sigma={"const": [[0.2]], "A_x": [[[0.1]]], "A_y": [[[0.1]]], "A_v": [[[0.1]]]},
        f={"const": [0.2], "A_x": [[0.5]], "A_y": [[-0.3]], "A_z": [[[0.2]]], "A_r": [[[0.1]]], "A_v": [[0.3]]},
        l={"quad": quad},
        phi={"lin": [0.2], "quad": [[1.0]]},
        h={"quad": [[1.0]]},
        terminal={"const": [0.5]},
        control_set=ControlSet.box([-2.0], [2.0]),
        name="nonlinear",
    )


def nonlinear_base_control(grid, P):
    """Deterministic reference control ``0.3 cos(2 pi t)``."""
    u = 0.3 * np.cos(2 * np.pi * grid.t[:-1])
    return np.broadcast_to(u[None, :, None], (P, grid.N, 1)).copy()


def no_jump_pair():
    """A diffusion-only model and its twin carrying one mark with zero jump coefficient."""
    common = dict(
        T=1.0, a=[0.3], kappa=0.5,
        b={"const": [0.1], "A_x": [[-0.2]], "A_y": [[0.2]], "A_v": [[0.4]]},
        g={"const": [[0.3]], "A_x": [[[0.1]]]},
        f={"const": [0.1], "A_x": [[0.4]], "A_y": [[-0.2]], "A_z": [[[0.1]]], "A_v": [[0.2]]},
        phi={"quad": [[1.0]]},
        h={"quad": [[0.5]]},
        terminal={"const": [0.2]},
    )
    base = affine_problem(l={"quad": np.diag([1.0, 0.5, 0.1, 1.0])}, name="no-jump", **common)
    twin = affine_problem(atoms=[1.0], weights=[2.0], l={"quad": np.diag([1.0, 0.5, 0.1, 0.0, 1.0])},
                          name="no-jump-twin", **common)
    return base, twin


def divergent_model(gain=10.0, T=5.0):
    """Strong two-way coupling ``b = gain y``, ``f = gain x`` on a long horizon."""
    return affine_problem(
        T=T, a=[1.0],
        b={"A_y": [[gain]]},
        f={"A_x": [[gain]]},
        name="divergent",
    )


def lq_model(A=0.2, B=1.0, C=0.3, D=0.2, e0=0.1, atoms=(1.0, -0.5), weights=(1.5, 1.0),
             Q=1.0, R=1.0, G=1.0, f1=1.0, c=0.5, a=1.0, T=1.0, bound=10.0, filtration=None):
    """Scalar linear-quadratic problem with jumps.

    ``dx = (A x + B v) dt + C dB + sum_j e_j (D x + e0) dNc_j``, backward
    driver ``f = f1 x`` with ``xi = 0``, costs ``l = (Q x^2 + R v^2) / 2``,
    ``phi = G x^2 / 2`` and ``h = c y``.
    """
    e = np.asarray(atoms, float)
    M = e.size
    S = 3 + M + 1
    quad = np.zeros((S, S))
    quad[0, 0] = Q
    quad[-1, -1] = R
    spec = affine_problem(
        atoms=e, weights=weights, T=T, a=[a],
        b={"A_x": [[A]], "A_v": [[B]]},
        g={"const": [[C]]},
        sigma={"const": (e * e0).reshape(M, 1), "A_x": (e * D).reshape(M, 1, 1)},
        f={"A_x": [[f1]]},
        l={"quad": quad},
        phi={"quad": [[G]]},
        h={"lin": [c]},
        control_set=ControlSet.box([-bound], [bound]),
        filtration=filtration,
        name="lq",
    )
    return spec


def builtin_models():
    """Every builtin model, keyed by name (used by the derivative suites)."""
    base, twin = no_jump_pair()
    return {
        "zero": zero_model(),
        "pure-control": pure_control_model(),
        "pure-forward": pure_forward_model(),
        "nonlinear": nonlinear_model(),
        "no-jump": base,
        "no-jump-twin": twin,
        "divergent": divergent_model(),
        "lq": lq_model(),
    }
