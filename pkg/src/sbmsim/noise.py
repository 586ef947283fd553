"""Reproducible discretized space-time white noise.

A counter-based generator (Philox) keyed by the stream seed makes every
time-row of increments addressable by its row index without storing the
grid: row k lives in its own disjoint counter range.  The same row scheme
backs both the materialized ``NoiseGrid`` and the incremental draws inside
the solvers, so a run is fully determined by (seed, row length, row count).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError

__all__ = ["NoiseGrid", "sample_noise", "noise_row", "coarsen", "independent_streams"]

# counter spacing between rows; row consumption is far below 2^64 draws
_ROW_STRIDE = 1 << 64


def _row_generator(seed, row_index):
    bg = np.random.Philox(key=int(seed) & ((1 << 64) - 1))
    if row_index:
        bg = bg.advance(row_index * _ROW_STRIDE)
    return np.random.Generator(bg)


def noise_row(seed, row_index, n, dt, dx):
    """The length-``n`` row of increments for time index ``row_index``:
    i.i.d. N(0, dt*dx), deterministic in all arguments."""
    if dt <= 0 or dx <= 0:
        raise DomainError("noise increments need dt > 0 and dx > 0")
    if n < 1:
        raise DomainError("noise row length must be >= 1")
    gen = _row_generator(seed, row_index)
    return gen.standard_normal(n) * math.sqrt(dt * dx)


@dataclass(frozen=True)
class NoiseGrid:
    """White-noise increments on an (nt, nx) space-time grid, each cell
    N(0, dt*dx), together with the seed that reproduces them."""

    seed: int
    dt: float
    dx: float
    increments: np.ndarray

    @property
    def nt(self):
        return self.increments.shape[0]

    @property
    def nx(self):
        return self.increments.shape[1]


def sample_noise(seed, dt, dx, nt, nx) -> NoiseGrid:
    """Materialize ``nt`` addressable rows of ``nx`` increments."""
    if dt <= 0 or dx <= 0:
        raise DomainError("sample_noise needs dt > 0 and dx > 0")
    if nt < 1 or nx < 1:
        raise DomainError("sample_noise needs nt >= 1 and nx >= 1")
    inc = np.empty((nt, nx))
    for k in range(nt):
        inc[k] = noise_row(seed, k, nx, dt, dx)
    return NoiseGrid(seed=int(seed), dt=float(dt), dx=float(dx), increments=inc)


def coarsen(grid: NoiseGrid, factor_t: int, factor_x: int) -> NoiseGrid:
    """Aggregate cells in blocks of factor_t x factor_x by summation
    (row-major reduction order, so results are bit-reproducible).  The
    coarse increments are again white with variance (factor_t*dt)*(factor_x*dx).
    """
    nt, nx = grid.increments.shape
    if factor_t < 1 or factor_x < 1 or nt % factor_t or nx % factor_x:
        raise DomainError("coarsening factors must divide the grid shape")
    blocks = grid.increments.reshape(nt // factor_t, factor_t, nx // factor_x, factor_x)
    coarse = blocks.sum(axis=3).sum(axis=1)
    return NoiseGrid(seed=grid.seed, dt=grid.dt * factor_t, dx=grid.dx * factor_x,
                     increments=coarse)


def independent_streams(base_seed, count):
    """Derive ``count`` stream seeds from a base seed with the splittable
    seed-sequence scheme, so distinct streams are statistically independent
    and the derivation is stable across runs."""
    if count < 1:
        raise DomainError("need at least one stream")
    children = np.random.SeedSequence(int(base_seed)).spawn(count)
    return [int(c.generate_state(1, np.uint64)[0]) for c in children]
