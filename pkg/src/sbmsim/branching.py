"""Piecewise branching-rate evaluation and monotone-field utilities.

The branching rate is piecewise across a finite partition of the line: on
each bounded cell it is the squared value of a registered rate function fed
with the density at the cell's right endpoint, and on the unbounded right
cell it is fed with the remaining tail mass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigurationError, DomainError

__all__ = [
    "RateFunction",
    "make_rate",
    "RATE_REGISTRY",
    "BranchingSpec",
    "branching_rate_at",
    "branching_rate_field",
    "tail_mass",
    "gradient_at",
    "generalized_inverse",
]


def _rebuild_rate(name, params):
    return make_rate(name, **params)


@dataclass(frozen=True)
class RateFunction:
    """A named bounded positive continuous function of one nonnegative
    argument, with its sup bound declared up front."""

    name: str
    params: dict
    fn: Callable[[np.ndarray], np.ndarray]
    sup_bound: float

    def __call__(self, z):
        return self.fn(np.asarray(z, dtype=float))

    def __reduce__(self):
        # the callable is a closure; rebuild from the registry instead
        return (_rebuild_rate, (self.name, self.params))


def _make_constant(value=1.0):
    if value <= 0:
        raise ConfigurationError([("rates.value", "constant rate must be positive")])
    return RateFunction("constant", {"value": value},
                        lambda z, c=value: np.full_like(z, c), value)


def _make_inverse_linear(scale=1.0):
    if scale <= 0:
        raise ConfigurationError([("rates.scale", "scale must be positive")])
    return RateFunction("inverse_linear", {"scale": scale},
                        lambda z, c=scale: c / (1.0 + z), scale)


def _make_exp_decay(base=0.5, amplitude=0.5):
    if base <= 0 or amplitude < 0:
        raise ConfigurationError(
            [("rates", "exp_decay needs base > 0 and amplitude >= 0")])
    return RateFunction("exp_decay", {"base": base, "amplitude": amplitude},
                        lambda z, b=base, a=amplitude: b + a * np.exp(-z),
                        base + amplitude)


RATE_REGISTRY = {
    "constant": _make_constant,
    "inverse_linear": _make_inverse_linear,
    "exp_decay": _make_exp_decay,
}


def make_rate(name, **params) -> RateFunction:
    """Build a rate function from the registry; unknown names list the
    registered alternatives."""
    try:
        factory = RATE_REGISTRY[name]
    except KeyError:
        raise ConfigurationError(
            [("rates.name",
              f"unknown rate function {name!r}; registry: {sorted(RATE_REGISTRY)}")]
        ) from None
    return factory(**params)


@dataclass(frozen=True)
class BranchingSpec:
    """Partition points a_1 < ... < a_n plus one rate function per cell
    (n + 1 of them), with the Hoelder exponent of the last rate carried as
    metadata in [1/2, 1]."""

    partition: tuple = ()
    rates: tuple = field(default_factory=lambda: (_make_constant(1.0),))
    beta: float = 1.0

    def __post_init__(self):
        part = tuple(float(a) for a in self.partition)
        object.__setattr__(self, "partition", part)
        object.__setattr__(self, "rates", tuple(self.rates))
        problems = []
        if any(part[i] >= part[i + 1] for i in range(len(part) - 1)):
            problems.append(("branching.partition", "must be strictly increasing"))
        if len(self.rates) != len(part) + 1:
            problems.append(
                ("branching.rates",
                 f"need {len(part) + 1} rate functions for {len(part)} partition points"))
        if any(r.sup_bound <= 0 for r in self.rates):
            problems.append(("branching.rates", "sup bounds must be positive"))
        if not (0.5 <= self.beta <= 1.0):
            problems.append(("branching.beta", "beta must lie in [1/2, 1]"))
        if problems:
            raise ConfigurationError(problems)

    @property
    def n(self) -> int:
        return len(self.partition)

    @property
    def is_constant(self) -> bool:
        return self.n == 0 and self.rates[0].name == "constant"

    def max_rate(self) -> float:
        return max(r.sup_bound for r in self.rates) ** 2


def _node_index(x_grid, point, what):
    idx = int(round((point - x_grid[0]) / (x_grid[1] - x_grid[0])))
    if idx < 0 or idx >= x_grid.size or abs(x_grid[idx] - point) > 1e-9:
        raise ConfigurationError([(what, f"grid does not cover {point}")])
    return idx


def tail_mass(x_grid, mu, a):
    """Trapezoid integral of ``mu`` from ``a`` to the right edge of the grid.
    Mass beyond the grid truncation is ignored.  ``mu`` may carry leading
    batch axes."""
    x_grid = np.asarray(x_grid, dtype=float)
    if a > x_grid[-1]:
        raise DomainError("tail_mass start lies beyond the grid truncation")
    mu = np.asarray(mu, dtype=float)
    if a <= x_grid[0]:
        return np.trapezoid(mu, x_grid, axis=-1)
    j = int(np.searchsorted(x_grid, a, side="left"))
    dx = x_grid[1] - x_grid[0]
    if abs(x_grid[j] - a) < 1e-12:
        return np.trapezoid(mu[..., j:], dx=dx, axis=-1)
    # partial first cell: interpolate mu at a, trapezoid piece up to node j
    frac = (x_grid[j] - a) / dx
    mu_a = mu[..., j] + (mu[..., j - 1] - mu[..., j]) * frac
    head = 0.5 * (mu_a + mu[..., j]) * (x_grid[j] - a)
    return head + np.trapezoid(mu[..., j:], dx=dx, axis=-1)


def branching_rate_at(spec: BranchingSpec, x_grid, mu, x):
    """Branching rate at location ``x`` given the current density ``mu``.

    For x in the i-th bounded cell this is rate_i(mu(a_{i+1}))^2 with the
    density read at the grid node a_{i+1}; on the last cell the rate is fed
    with the tail mass beyond a_n.  Constant in x within each cell.
    """
    x_grid = np.asarray(x_grid, dtype=float)
    mu = np.asarray(mu, dtype=float)
    i = int(np.searchsorted(spec.partition, x, side="right"))
    if i == spec.n:
        if spec.n == 0:
            z = np.trapezoid(mu, x_grid, axis=-1)
        else:
            z = tail_mass(x_grid, mu, spec.partition[-1])
    else:
        idx = _node_index(x_grid, spec.partition[i], "branching.partition")
        z = mu[..., idx]
    g = spec.rates[i](z)
    out = g * g
    return float(out) if np.ndim(out) == 0 else out


def branching_rate_field(spec: BranchingSpec, x_grid, mu, out=None):
    """Branching rate at every grid node, broadcast cellwise.

    ``mu`` may be (nx,) or (nreps, nx); the result has the same shape.
    """
    x_grid = np.asarray(x_grid, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if out is None:
        out = np.empty_like(mu)
    edges = [_node_index(x_grid, a, "branching.partition") for a in spec.partition]
    bounds = [0] + edges + [x_grid.size]
    for i, rate in enumerate(spec.rates):
        if i == spec.n:
            if spec.n == 0:
                z = np.trapezoid(mu, x_grid, axis=-1)
            else:
                z = tail_mass(x_grid, mu, spec.partition[-1])
        else:
            z = mu[..., bounds[i + 1]]
        g = rate(z)
        out[..., bounds[i] : bounds[i + 1]] = np.asarray(g * g)[..., None]
    return out


def gradient_at(x_grid, u, point):
    """One-sided second-order finite difference of ``u`` at an endpoint of
    its grid.  ``u`` may carry leading batch axes."""
    x_grid = np.asarray(x_grid, dtype=float)
    u = np.asarray(u, dtype=float)
    if x_grid.size < 3:
        raise DomainError("gradient_at needs at least 3 grid nodes")
    dx = x_grid[1] - x_grid[0]
    if abs(point - x_grid[-1]) < 1e-9:
        out = (3.0 * u[..., -1] - 4.0 * u[..., -2] + u[..., -3]) / (2.0 * dx)
    elif abs(point - x_grid[0]) < 1e-9:
        out = (-3.0 * u[..., 0] + 4.0 * u[..., 1] - u[..., 2]) / (2.0 * dx)
    else:
        raise DomainError("gradient_at expects an endpoint of the field's grid")
    return float(out) if np.ndim(out) == 0 else out


def generalized_inverse(x_grid, u, y):
    """Rightmost grid node where the nondecreasing field ``u`` stays <= y.

    Returns the first node when even u(x_0) exceeds y (empty sup convention)
    and the last node when y dominates the whole field.  Nondecreasing in y.
    """
    x_grid = np.asarray(x_grid, dtype=float)
    u = np.asarray(u, dtype=float)
    j = int(np.searchsorted(u, y, side="right")) - 1
    if j < 0:
        return float(x_grid[0])
    return float(x_grid[min(j, x_grid.size - 1)])
