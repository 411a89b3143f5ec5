"""Least-squares projection onto polynomial features of a regressor.

Features are monomials of total degree ``1..D`` in the standardized regressor,
centered over the paths, plus an unpenalized intercept.  Centering makes the
fitted values reproduce the sample mean of the target, so the trivial
projection applied after any other projection leaves the mean unchanged.
"""

from __future__ import annotations

from itertools import combinations_with_replacement

import numpy as np
import scipy.linalg

from .errors import NonFiniteValue, SingularRegression

COND_LIMIT = 1e14


def path_mean(values):
    """Cross-path mean that returns a path-constant input exactly."""
    ref = values[0]
    return ref + np.mean(values - ref, axis=0)


def _monomials(Xs, degree):
    q = Xs.shape[1]
    cols = []
    for deg in range(1, degree + 1):
        for combo in combinations_with_replacement(range(q), deg):
            col = Xs[:, combo[0]].copy()
            for c in combo[1:]:
                col *= Xs[:, c]
            cols.append(col)
    if not cols:
        return np.zeros((Xs.shape[0], 0))
    return np.stack(cols, axis=1)


class Fit:
    """Fitted regression function; ``predict`` evaluates it on new regressor values."""

    def __init__(self, loc, scale, keep, degree, fmean, intercept, beta, tail_shape):
        self.loc = loc
        self.scale = scale
        self.keep = keep
        self.degree = degree
        self.fmean = fmean
        self.intercept = intercept
        self.beta = beta
        self.tail_shape = tail_shape

    @property
    def n_features(self):
        return self.fmean.size

    def predict(self, X):
        P = X.shape[0] if X is not None else 1
        base = np.broadcast_to(self.intercept, (P, self.intercept.size))
        if self.n_features == 0:
            return base.reshape((P,) + self.tail_shape).copy()
        Xs = (X.reshape(P, -1)[:, self.keep] - self.loc) / self.scale
        F = _monomials(Xs, self.degree) - self.fmean
        return (base + F @ self.beta).reshape((P,) + self.tail_shape)

    def to_dict(self):
        return {
            "loc": self.loc.tolist(), "scale": self.scale.tolist(), "keep": self.keep.tolist(),
            "degree": self.degree, "fmean": self.fmean.tolist(),
            "intercept": self.intercept.tolist(), "beta": self.beta.tolist(),
        }


class Projector:
    """Ridge least-squares projection onto features of ``regressor``.

    Parameters
    ----------
    regressor : ndarray, shape (P, q) or None
        ``None`` (or zero columns) means no information: projection is the
        cross-path mean.
    degree : int
        Maximal total degree of the monomials.
    ridge : float
        Penalty added to the diagonal of the normalized Gram matrix.
    """

    def __init__(self, regressor, degree=2, ridge=1e-8):
        self.degree = int(degree)
        self.ridge = float(ridge)
        if regressor is None:
            self.P = None
            self.F = None
            return
        X = np.asarray(regressor, dtype=float)
        P = X.shape[0]
        X = X.reshape(P, -1)
        if not np.all(np.isfinite(X)):
            raise NonFiniteValue("regressor contains non-finite values")
        self.P = P
        loc = X.mean(axis=0)
        sd = X.std(axis=0)
        scale_ref = np.maximum(np.abs(loc), 1.0)
        keep = np.flatnonzero(sd > 1e-12 * scale_ref)
        self.keep = keep
        self.loc = loc[keep]
        self.scale = sd[keep]
        if keep.size == 0 or self.degree == 0:
            self.F = np.zeros((P, 0))
            self.fmean = np.zeros(0)
            return
        F = _monomials((X[:, keep] - self.loc) / self.scale, self.degree)
        self.fmean = F.mean(axis=0)
        F -= self.fmean
        self.F = F
        G = F.T @ F / P
        G[np.diag_indices_from(G)] += self.ridge
        ev = np.linalg.eigvalsh(G)
        if ev[0] <= 0 or ev[-1] / ev[0] > COND_LIMIT:
            raise SingularRegression(
                f"normal equations ill-conditioned (eigenvalues {ev[0]:.3e}..{ev[-1]:.3e}); increase ridge"
            )
        self._chol = scipy.linalg.cho_factor(G)

    @property
    def trivial(self):
        return self.F is None or self.F.shape[1] == 0

    def fit(self, values) -> Fit:
        Y = np.asarray(values, dtype=float)
        tail = Y.shape[1:]
        if not np.all(np.isfinite(Y)):
            raise NonFiniteValue("regression target contains non-finite values")
        Y2 = Y.reshape(Y.shape[0], -1)
        mean = path_mean(Y2)
        if self.trivial:
            loc = getattr(self, "loc", np.zeros(0))
            return Fit(loc[:0], loc[:0], np.zeros(0, int), self.degree, np.zeros(0), mean, np.zeros((0, Y2.shape[1])), tail)
        if np.all(Y2 == Y2[0]):
            beta = np.zeros((self.F.shape[1], Y2.shape[1]))
        else:
            beta = scipy.linalg.cho_solve(self._chol, self.F.T @ (Y2 - mean) / self.P)
        return Fit(self.loc, self.scale, self.keep, self.degree, self.fmean, mean, beta, tail)

    def fit_project(self, values):
        """``(fit, fitted values on the paths the projector was built on)``."""
        Y = np.asarray(values, dtype=float)
        fit = self.fit(Y)
        P = Y.shape[0]
        if self.trivial or not np.any(fit.beta):
            return fit, np.broadcast_to(fit.intercept, (P, fit.intercept.size)).reshape(Y.shape).copy()
        return fit, (fit.intercept + self.F @ fit.beta).reshape(Y.shape)

    def project(self, values):
        return self.fit_project(values)[1]
