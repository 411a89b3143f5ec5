"""Riccati oracles for the scalar linear-quadratic benchmark.

The value function is ``V(t, x) = P(t) x^2 / 2 + s(t) x + w(t)``.  With
``E2 = sum_j pi_j e_j^2`` the continuous-time system is::

    P' = -2 A P - D^2 E2 P - Q + B^2 P^2 / R,         P(T) = G
    s' = -A s - D e0 E2 P - c f1 + B^2 P s / R,       s(T) = 0
    w' = -(C^2 + e0^2 E2) P / 2 + B^2 s^2 / (2 R),    w(T) = 0

and the optimal feedback is ``v = -B (P x + s) / R``.  The term ``c f1`` comes
from ``h(y_0) = c y_0`` with ``y_0 = E int f1 x dt``.  The discrete version
solves the same problem exactly for the Euler scheme on a given grid.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from importlib import resources

import numpy as np

from .benchmarks import lq_model


@dataclass(frozen=True)
class LQParams:
    A: float = 0.2
    B: float = 1.0
    C: float = 0.3
    D: float = 0.2
    e0: float = 0.1
    atoms: tuple = (1.0, -0.5)
    weights: tuple = (1.5, 1.0)
    Q: float = 1.0
    R: float = 1.0
    G: float = 1.0
    f1: float = 1.0
    c: float = 0.5
    a: float = 1.0
    T: float = 1.0

    @property
    def E2(self):
        return float(np.dot(self.weights, np.square(self.atoms)))

    def as_dict(self):
        d = asdict(self)
        d["atoms"] = list(d["atoms"])
        d["weights"] = list(d["weights"])
        return d

    def problem(self, filtration=None, bound=10.0):
        return lq_model(**self.as_dict(), filtration=filtration, bound=bound)


def _rhs(prm: LQParams, Y):
    P, s, _ = Y
    E2 = prm.E2
    dP = -2 * prm.A * P - prm.D**2 * E2 * P - prm.Q + prm.B**2 * P**2 / prm.R
    ds = -prm.A * s - prm.D * prm.e0 * E2 * P - prm.c * prm.f1 + prm.B**2 * P * s / prm.R
    dw = -0.5 * (prm.C**2 + prm.e0**2 * E2) * P + 0.5 * prm.B**2 * s**2 / prm.R
    return np.array([dP, ds, dw])


def riccati_rk4(prm: LQParams, steps=20000):
    """Integrate backward from ``T`` with classical RK4; returns times and (P, s, w) rows."""
    h = -prm.T / steps
    Y = np.array([prm.G, 0.0, 0.0])
    out = np.empty((steps + 1, 3))
    out[steps] = Y
    for n in range(steps, 0, -1):
        k1 = _rhs(prm, Y)
        k2 = _rhs(prm, Y + 0.5 * h * k1)
        k3 = _rhs(prm, Y + 0.5 * h * k2)
        k4 = _rhs(prm, Y + h * k3)
        Y = Y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        out[n - 1] = Y
    return np.linspace(0.0, prm.T, steps + 1), out


def optimal_cost(prm: LQParams, steps=20000):
    _, Y = riccati_rk4(prm, steps)
    P0, s0, w0 = Y[0]
    return 0.5 * P0 * prm.a**2 + s0 * prm.a + w0


@dataclass
class DiscreteRiccati:
    prm: LQParams
    N: int
    P: np.ndarray
    s: np.ndarray
    w: np.ndarray

    @property
    def dt(self):
        return self.prm.T / self.N

    @property
    def cost(self):
        a = self.prm.a
        return 0.5 * self.P[0] * a * a + self.s[0] * a + self.w[0]

    def feedback(self, i, x):
        prm, dt = self.prm, self.dt
        alpha = 1 + prm.A * dt
        Pn, sn = self.P[i + 1], self.s[i + 1]
        return -prm.B * (Pn * alpha * x + sn) / (prm.R + Pn * prm.B**2 * dt)


def discrete_riccati(prm: LQParams, N: int) -> DiscreteRiccati:
    """Exact dynamic programming for the Euler-discretized problem on ``N`` steps."""
    dt = prm.T / N
    alpha = 1 + prm.A * dt
    E2 = prm.E2
    P = np.empty(N + 1)
    s = np.empty(N + 1)
    w = np.empty(N + 1)
    P[N], s[N], w[N] = prm.G, 0.0, 0.0
    for i in range(N - 1, -1, -1):
        Pn, sn, wn = P[i + 1], s[i + 1], w[i + 1]
        K = prm.R + Pn * prm.B**2 * dt
        P[i] = prm.Q * dt + Pn * (alpha**2 + dt * prm.D**2 * E2) - dt * (prm.B * Pn * alpha) ** 2 / K
        s[i] = prm.c * prm.f1 * dt + Pn * dt * prm.D * prm.e0 * E2 + sn * alpha - dt * prm.B**2 * Pn * alpha * sn / K
        w[i] = wn + 0.5 * Pn * (prm.C**2 + prm.e0**2 * E2) * dt - dt * (prm.B * sn) ** 2 / (2 * K)
    return DiscreteRiccati(prm, N, P, s, w)


def continuous_feedback(prm: LQParams, steps=20000):
    """Optimal feedback ``(t, x) -> v`` from the dense continuous solution (linear interpolation in t)."""
    ts, Y = riccati_rk4(prm, steps)

    def fb(t, x):
        P = np.interp(t, ts, Y[:, 0])
        s = np.interp(t, ts, Y[:, 1])
        return -prm.B * (P * x + s) / prm.R

    return fb


def load_fixture():
    """Committed oracle values for the default benchmark."""
    with resources.files("jumpfbsde").joinpath("data/lq_fixture.json").open() as fh:
        return json.load(fh)
