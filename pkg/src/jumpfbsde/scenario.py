"""Driver noise: Brownian increments and per-mark Poisson counts on a uniform grid.

Draws come from counter-based Philox streams keyed by ``(seed, channel,
block)`` where a block is a fixed run of ``BLOCK`` consecutive paths.  The
values on a path therefore never depend on the total path count, on the
order blocks are generated in, or on how many workers generate them.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ResourceLimit
from .model import MarkSpace

BLOCK = 512
CH_BROWNIAN = 1
CH_JUMPS = 2
MAGIC = b"FBMP"
FORMAT_VERSION = 1
DEFAULT_MEMORY_BUDGET = 2 * 1024**3  # bytes


@dataclass(frozen=True)
class TimeGrid:
    T: float
    N: int

    def __post_init__(self):
        if not int(self.N) == self.N or self.N < 1:
            raise ValueError(f"N must be a positive integer, got {self.N!r}")
        if not (np.isfinite(self.T) and self.T > 0):
            raise ValueError(f"T must be finite and positive, got {self.T!r}")

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def t(self) -> np.ndarray:
        return np.arange(self.N + 1) * self.dt


@dataclass(frozen=True)
class RngSpec:
    seed: int = 0

    def generator(self, channel: int, block: int) -> np.random.Generator:
        ss = np.random.SeedSequence([int(self.seed) & (2**64 - 1), channel, block])
        return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True, eq=False)
class ScenarioBatch:
    grid: TimeGrid
    marks: MarkSpace
    dB: np.ndarray  # (P, N, d) float64
    dN: np.ndarray  # (P, N, M) uint32
    seed: int = 0

    @property
    def P(self) -> int:
        return int(self.dB.shape[0])

    @property
    def d(self) -> int:
        return int(self.dB.shape[2])

    @property
    def M(self) -> int:
        return int(self.dN.shape[2])

    @cached_property
    def dNc(self) -> np.ndarray:
        """Compensated counts ``dN - pi * dt``."""
        return self.dN.astype(float) - self.marks.weights[None, None, :] * self.grid.dt

    @cached_property
    def B(self) -> np.ndarray:
        P, N, d = self.dB.shape
        out = np.zeros((P, N + 1, d))
        np.cumsum(self.dB, axis=1, out=out[:, 1:])
        return out

    @cached_property
    def counts(self) -> np.ndarray:
        P, N, M = self.dN.shape
        out = np.zeros((P, N + 1, M))
        np.cumsum(self.dN, axis=1, out=out[:, 1:])
        return out

    @property
    def B_T(self):
        return self.B[:, -1]

    @property
    def counts_T(self):
        return self.counts[:, -1]

    def subset(self, paths):
        paths = np.asarray(paths)
        return ScenarioBatch(self.grid, self.marks, self.dB[paths], self.dN[paths], self.seed)


def _fill_block(rng: RngSpec, grid, lam, d, lo, hi, dB, dN):
    b = lo // BLOCK
    nb = hi - lo
    dB[lo:hi] = rng.generator(CH_BROWNIAN, b).standard_normal((nb, grid.N, d)) * np.sqrt(grid.dt)
    if lam.size:
        dN[lo:hi] = rng.generator(CH_JUMPS, b).poisson(lam, size=(nb, grid.N, lam.size))


def generate(grid: TimeGrid, marks: MarkSpace, P: int, d: int, rng: RngSpec | int = 0, workers: int = 1,
             memory_budget: int = DEFAULT_MEMORY_BUDGET) -> ScenarioBatch:
    """Sample ``P`` paths of Brownian increments and jump counts.

    Raises
    ------
    ResourceLimit
        If the increment arrays would exceed ``memory_budget`` bytes.
    """
    if not isinstance(rng, RngSpec):
        rng = RngSpec(int(rng))
    if P < 1:
        raise ValueError("P must be >= 1")
    M = marks.M
    need = P * grid.N * (8 * d + 4 * M)
    if need > memory_budget:
        raise ResourceLimit(f"scenario needs {need} bytes, budget is {memory_budget}")
    dB = np.empty((P, grid.N, d))
    dN = np.zeros((P, grid.N, M), dtype=np.uint32)
    lam = marks.weights * grid.dt
    bounds = [(lo, min(lo + BLOCK, P)) for lo in range(0, P, BLOCK)]
    if workers <= 1 or len(bounds) == 1:
        for lo, hi in bounds:
            _fill_block(rng, grid, lam, d, lo, hi, dB, dN)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(lambda b: _fill_block(rng, grid, lam, d, b[0], b[1], dB, dN), bounds))
    dB.flags.writeable = False
    dN.flags.writeable = False
    return ScenarioBatch(grid, marks, dB, dN, int(rng.seed))


def compensated(batch: ScenarioBatch, p: int, i: int, j: int) -> float:
    """``dN[p, i, j] - pi_j * dt``."""
    P, N, M = batch.dN.shape
    for name, idx, size in (("path", p, P), ("step", i, N), ("mark", j, M)):
        if not 0 <= idx < size:
            raise IndexError(f"{name} index {idx} out of range [0, {size})")
    return float(batch.dN[p, i, j]) - float(batch.marks.weights[j]) * batch.grid.dt


def jump_integral(batch: ScenarioBatch, integrand):
    """Per-path ``sum_{i,j} phi(t_i, e_j) * dNc[p, i, j]`` for a deterministic ``phi`` of shape (N, M)."""
    integrand = np.asarray(integrand, dtype=float)
    return np.einsum("pij,ij->p", batch.dNc, integrand)


def dump(batch: ScenarioBatch, path):
    P, N, d = batch.dB.shape
    M = batch.M
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HIIIIQ", FORMAT_VERSION, P, N, d, M, int(batch.seed) & (2**64 - 1)))
        fh.write(np.ascontiguousarray(batch.dB, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(batch.dN, dtype="<u4").tobytes())


def load(path, T: float, marks: MarkSpace) -> ScenarioBatch:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise ValueError("not a scenario dump (bad magic)")
    hdr = struct.calcsize("<HIIIIQ")
    version, P, N, d, M, seed = struct.unpack("<HIIIIQ", raw[4 : 4 + hdr])
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported scenario dump version {version}")
    if M != marks.M:
        raise ValueError(f"dump has {M} marks, expected {marks.M}")
    off = 4 + hdr
    nb = P * N * d * 8
    dB = np.frombuffer(raw, dtype="<f8", count=P * N * d, offset=off).reshape(P, N, d).astype(float)
    dN = np.frombuffer(raw, dtype="<u4", count=P * N * M, offset=off + nb).reshape(P, N, M).astype(np.uint32)
    return ScenarioBatch(TimeGrid(T, N), marks, dB, dN, int(seed))
