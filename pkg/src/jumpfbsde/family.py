"""Builtin parametric coefficient family.

Each vector coefficient is ``F = aff + kappa * s(aff)`` with the componentwise
bounded nonlinearity ``s(w) = w / (1 + w^2)`` and

    aff = c + A_x x + A_y y + A_z z + sum_j pi_j A_r[j] r_j + A_v v.

The ``r`` matrices act as per-mark kernels, so the supplied ``A_r`` is the
``r`` partial directly.  Running cost and terminal costs are quadratics.
"""

from __future__ import annotations

import numpy as np

from .model import (
    Coefficient,
    Dimensions,
    Partials,
    TerminalFunction,
    argument_shapes,
)


def soft(w):
    return w / (1.0 + w * w)


def soft_prime(w):
    w2 = w * w
    return (1.0 - w2) / (1.0 + w2) ** 2


class AffineCoefficient(Coefficient):
    """Affine map plus optional bounded nonlinearity, evaluated in batch.

    Parameters
    ----------
    value_shape : tuple
        Output shape per point, e.g. ``(n,)`` for the drift or ``(M, n)`` for
        the jump coefficient.
    dims, weights
        Problem dimensions and mark intensities.
    const, A_x, A_y, A_z, A_r, A_v : array_like, optional
        Offset and Jacobian blocks of shape ``value_shape + argument shape``.
        Missing blocks are zero.
    kappa : float
        Scale of the nonlinearity; 0 gives a purely affine map.
    """

    def __init__(self, value_shape, dims: Dimensions, weights, const=None, kappa=0.0, name="", **blocks):
        self.value_shape = tuple(value_shape)
        self.weights = np.asarray(weights, dtype=float)
        M = self.weights.size
        ashapes = argument_shapes(dims, M)
        self.const = np.zeros(self.value_shape) if const is None else np.asarray(const, float).reshape(self.value_shape)
        self.A = {}
        for blk, ashape in ashapes.items():
            raw = blocks.pop(f"A_{blk}", None)
            full = self.value_shape + ashape
            self.A[blk] = np.zeros(full) if raw is None else np.asarray(raw, float).reshape(full)
        if blocks:
            raise TypeError(f"unexpected blocks {sorted(blocks)}")
        self.kappa = float(kappa)
        self.ashapes = ashapes
        self._vn = int(np.prod(self.value_shape, dtype=int))
        self._AT = {blk: A.reshape(self._vn, int(np.prod(ashapes[blk], dtype=int))).T.copy() for blk, A in self.A.items()}
        self._nonzero = {blk: bool(np.any(A)) for blk, A in self.A.items()}
        super().__init__(self._value, self._partials, name)

    def depends_on(self, blk) -> bool:
        return bool(np.any(self.A[blk] != 0))

    def _affine(self, x, y, z, r, v):
        P = x.shape[0]
        out = np.broadcast_to(self.const, (P,) + self.value_shape).reshape(P, -1).copy()
        # each block added separately so zero blocks leave results bit-identical
        for blk, arg in (("x", x), ("y", y), ("z", z), ("r", r), ("v", v)):
            if arg.size == 0 or not self._nonzero[blk]:
                continue
            a = arg
            if blk == "r":
                a = arg * self.weights[None, :, None]
            AT = self._AT[blk]
            if AT.shape[0] == 1:
                # width-one product; a broadcast multiply is much cheaper than matmul
                out += a.reshape(P, 1) * AT
            else:
                out += a.reshape(P, -1) @ AT
        return out.reshape((P,) + self.value_shape)

    def _value(self, t, x, y, z, r, v):
        aff = self._affine(x, y, z, r, v)
        if self.kappa == 0.0:
            return aff
        return aff + self.kappa * soft(aff)

    def _partials(self, t, x, y, z, r, v):
        P = x.shape[0]
        if self.kappa == 0.0:
            return Partials(*(np.broadcast_to(self.A[b], (P,) + self.A[b].shape) for b in ("x", "y", "z", "r", "v")))
        scale = 1.0 + self.kappa * soft_prime(self._affine(x, y, z, r, v))
        out = []
        for b in ("x", "y", "z", "r", "v"):
            A = self.A[b]
            s = scale.reshape(scale.shape + (1,) * (A.ndim - len(self.value_shape)))
            out.append(s * A[None])
        return Partials(*out)


class QuadraticCost(Coefficient):
    """Running cost ``l = const + lin . w + 0.5 w' Q w`` over the stacked raw
    argument ``w = (x, y, vec z, vec r, v)``."""

    def __init__(self, dims: Dimensions, weights, const=0.0, lin=None, quad=None, name="l"):
        self.weights = np.asarray(weights, dtype=float)
        M = self.weights.size
        self.ashapes = argument_shapes(dims, M)
        self.sizes = [int(np.prod(s, dtype=int)) for s in self.ashapes.values()]
        S = sum(self.sizes)
        self.const = float(const)
        self.lin = np.zeros(S) if lin is None else np.asarray(lin, float).reshape(S)
        Q = np.zeros((S, S)) if quad is None else np.asarray(quad, float).reshape(S, S)
        self.quad = 0.5 * (Q + Q.T)
        # coordinates that never enter the cost are skipped, which keeps
        # results bit-identical when unused blocks are appended
        self.active = np.flatnonzero((self.lin != 0) | np.any(self.quad != 0, axis=0))
        self._lin_a = self.lin[self.active]
        self._quad_a = self.quad[np.ix_(self.active, self.active)]
        super().__init__(self._value, self._partials, name)

    @property
    def size(self):
        return sum(self.sizes)

    def stack(self, x, y, z, r, v):
        P = x.shape[0]
        return np.concatenate([a.reshape(P, -1) for a in (x, y, z, r, v)], axis=1)

    def _value(self, t, x, y, z, r, v):
        w = self.stack(x, y, z, r, v)[:, self.active]
        return self.const + w @ self._lin_a + 0.5 * np.einsum("pa,ab,pb->p", w, self._quad_a, w)

    def _partials(self, t, x, y, z, r, v):
        w = self.stack(x, y, z, r, v)
        P = w.shape[0]
        grad = np.zeros((P, self.size))
        wa = w[:, self.active]
        grad[:, self.active] = self._lin_a + wa @ self._quad_a
        parts, start = [], 0
        for (blk, shape), size in zip(self.ashapes.items(), self.sizes):
            g = grad[:, start : start + size].reshape((P,) + shape)
            if blk == "r":
                g = g / self.weights[None, :, None]
            parts.append(g)
            start += size
        return Partials(*parts)


def quadratic_terminal(dim, const=0.0, lin=None, quad=None, name=""):
    """``w -> const + lin . w + 0.5 w' Q w`` with gradient ``lin + Q w``."""
    lin = np.zeros(dim) if lin is None else np.asarray(lin, float).reshape(dim)
    Q = np.zeros((dim, dim)) if quad is None else np.asarray(quad, float).reshape(dim, dim)
    Q = 0.5 * (Q + Q.T)
    const = float(const)

    def value(w):
        return const + w @ lin + 0.5 * np.einsum("pa,ab,pb->p", w, Q, w)

    def grad(w):
        return lin + w @ Q

    return TerminalFunction(value, grad, name)
