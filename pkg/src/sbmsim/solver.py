"""Explicit time-stepping schemes for the density equation and its relatives.

The density field follows d(mu) = 1/2 mu'' dt + sqrt(mu * rate) dW on a
truncated domain with zero-Dirichlet walls, where ``rate`` is the piecewise
branching rate of :mod:`sbmsim.branching` and dW is discretized space-time
white noise.  Variants share one stepping core:

* ``simulate_density``     -- rate refreshed every step, exact square root;
* ``simulate_blocked``     -- rate frozen over m time blocks and the square
  root replaced by its bandwidth-1/m mollification (the regularized scheme
  whose limit constructs the density process);
* ``simulate_mild``        -- heat-semigroup flow of the initial field plus a
  time-stepped stochastic convolution, sharing the finite-difference noise.

The batch simulators evolve the *signed* state: the noise coefficient reads
max(mu, 0), so negative excursions carry no noise and relax back under the
heat flow, and only stored snapshots are clipped.  Clipping the state at
every step instead feeds the removed mass back into the field and destroys
the mass martingale (measured drift of roughly +3 mass units per unit time
at dt/dx = 0.01 on a unit-mass profile), so hard per-step clipping is
confined to the single-step reference ``step_density``.  The count of
negative nodes encountered is reported on the trajectory.

On top of that live the coupled system of interval distribution functions
(one component per partition cell, each driven by its own white noise in the
mass coordinate) and the one-dimensional total-mass diffusion
dZ = g(Z) sqrt(Z) dB with absorption at zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .branching import (
    BranchingSpec,
    branching_rate_field,
    gradient_at,
    make_rate,
)
from .errors import ConfigurationError, DomainError, NumericalAbort
from .noise import NoiseGrid, independent_streams, noise_row

__all__ = [
    "SimConfig",
    "DensityTrajectory",
    "DistributionTrajectory",
    "MassPath",
    "StepObserver",
    "initial_profile",
    "INITIAL_PROFILES",
    "step_density",
    "simulate_density",
    "simulate_blocked",
    "simulate_mild",
    "simulate_distribution_system",
    "distributions_from_density",
    "simulate_total_mass",
]

_STABILITY_SLACK = 1.0 + 1e-12


# ---------------------------------------------------------------------------
# initial profiles

def _profile_gaussian(x, mass=1.0, center=0.0, sigma=1.0):
    return mass * np.exp(-((x - center) ** 2) / (2.0 * sigma * sigma)) / (
        sigma * math.sqrt(2.0 * math.pi)
    )


def _profile_plateau(x, height=1.0, left=0.0, right=1.0):
    return np.where((x >= left) & (x <= right), float(height), 0.0)


def _profile_zero(x):
    return np.zeros_like(x)


INITIAL_PROFILES = {
    "gaussian": _profile_gaussian,
    "plateau": _profile_plateau,
    "zero": _profile_zero,
}


def initial_profile(spec: dict, x_grid) -> np.ndarray:
    params = dict(spec)
    name = params.pop("profile", None)
    if name not in INITIAL_PROFILES:
        raise ConfigurationError(
            [("initial.profile",
              f"unknown profile {name!r}; registry: {sorted(INITIAL_PROFILES)}")])
    try:
        return INITIAL_PROFILES[name](np.asarray(x_grid, dtype=float), **params)
    except TypeError as exc:
        raise ConfigurationError([("initial", str(exc))]) from None


# ---------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class SimConfig:
    """Everything a run needs: domain, steps, initial field, branching spec,
    scheme selection, and seed."""

    half_width: float
    dx: float
    dt: float
    horizon: float
    initial: dict
    branching: BranchingSpec = field(default_factory=BranchingSpec)
    scheme: str = "explicit-fd"
    blocks: int | None = None
    seed: int = 0
    outputs: int = 11
    z_max: float | None = None
    z_cells: int = 2048

    def validate(self):
        """Collect every structural violation as (field_path, message)."""
        bad = []
        if self.dx <= 0:
            bad.append(("grid.dx", "must be positive"))
        if self.half_width <= 0:
            bad.append(("grid.half_width", "must be positive"))
        if self.dt <= 0:
            bad.append(("time.dt", "must be positive"))
        if self.horizon <= 0:
            bad.append(("time.horizon", "must be positive"))
        if bad:
            return bad
        if self.dt > self.dx * self.dx * _STABILITY_SLACK:
            bad.append(("time.dt",
                        f"stability requires dt <= dx^2 = {self.dx ** 2:.6g} "
                        f"for the explicit scheme, got {self.dt:.6g}"))
        n_cells = 2.0 * self.half_width / self.dx
        if abs(n_cells - round(n_cells)) > 1e-9:
            bad.append(("grid.dx", "2*half_width must be a multiple of dx"))
        n_steps = round(self.horizon / self.dt)
        if n_steps < 1 or abs(n_steps * self.dt - self.horizon) > 1e-9 * max(1.0, self.horizon):
            bad.append(("time.dt", "horizon must be a whole number of steps"))
        margin = 4.0 * math.sqrt(self.horizon)
        for i, a in enumerate(self.branching.partition):
            if abs(a) > self.half_width - margin:
                bad.append((f"branching.partition[{i}]",
                            f"needs margin 4*sqrt(T) = {margin:.3g} inside the domain"))
            pos = (a + self.half_width) / self.dx
            if abs(pos - round(pos)) > 1e-9:
                bad.append((f"branching.partition[{i}]", "must lie on a grid node"))
        if self.scheme not in ("explicit-fd", "blocked", "mild"):
            bad.append(("scheme.kind", f"unknown scheme {self.scheme!r}"))
        if self.scheme == "blocked":
            if not self.blocks or self.blocks < 1:
                bad.append(("scheme.m", "blocked scheme needs m >= 1"))
            elif n_steps >= 1 and n_steps % self.blocks:
                bad.append(("scheme.m", "block count must divide the step count"))
        if isinstance(self.outputs, int):
            if self.outputs < 2:
                bad.append(("time.outputs", "need at least 2 output times"))
            elif n_steps >= 1 and n_steps % (self.outputs - 1):
                bad.append(("time.outputs",
                            "output times must land on the step grid"))
        if self.z_cells < 2:
            bad.append(("u_system.z_cells", "need at least 2 mass cells"))
        if self.z_max is not None and self.z_max <= 0:
            bad.append(("u_system.z_max", "must be positive"))
        name = self.initial.get("profile")
        if name not in INITIAL_PROFILES:
            bad.append(("initial.profile",
                        f"unknown profile {name!r}; registry: {sorted(INITIAL_PROFILES)}"))
        return bad

    def require_valid(self):
        bad = self.validate()
        if bad:
            raise ConfigurationError(bad)

    @property
    def nx(self) -> int:
        return int(round(2.0 * self.half_width / self.dx)) + 1

    @property
    def x_grid(self) -> np.ndarray:
        return -self.half_width + self.dx * np.arange(self.nx)

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))

    def output_steps(self) -> np.ndarray:
        stride = self.n_steps // (self.outputs - 1)
        return stride * np.arange(self.outputs)

    def output_times(self) -> np.ndarray:
        return self.dt * self.output_steps()

    def mu0(self) -> np.ndarray:
        return initial_profile(self.initial, self.x_grid)

    def initial_mass(self) -> float:
        return float(np.trapezoid(self.mu0(), dx=self.dx))


# ---------------------------------------------------------------------------
# trajectories and observers

@dataclass
class DensityTrajectory:
    """Stored snapshots (clipped at zero) plus the signed mass series, which
    is the scheme's exactly conserved-in-mean functional.  ``repairs`` counts
    the negative nodes encountered while stepping."""

    times: np.ndarray
    x_grid: np.ndarray
    fields: np.ndarray | None   # (n_out, nreps, nx) when stored
    mass: np.ndarray            # (n_out, nreps)
    seed: int
    stream_seed: int
    scheme: str
    repairs: int = 0
    observables: dict = field(default_factory=dict)

    @property
    def nreps(self) -> int:
        return self.mass.shape[1]


class StepObserver:
    """Hook into the stepping loop.

    ``accumulate`` fires at every state (trapezoid weight supplied, so
    integrals over [0, T] at step resolution cost one call per step), and
    ``output`` fires at the configured output times.
    """

    def start(self, config: SimConfig, nreps: int):
        pass

    def accumulate(self, k: int, t: float, mu: np.ndarray, rate: np.ndarray, w: float):
        pass

    def output(self, j: int, t: float, mu: np.ndarray, rate: np.ndarray):
        pass

    def result(self):
        return None


def _resolve_seed(config: SimConfig, seed):
    return config.seed if seed is None else int(seed)


def _check_noise(noise: NoiseGrid, config: SimConfig, nreps: int):
    if nreps != 1:
        raise ConfigurationError(
            [("noise", "an injected noise grid drives a single replicate")])
    if noise.nx != config.nx or noise.nt < config.n_steps:
        raise ConfigurationError([("noise", "noise grid shape does not match the run")])
    if not (math.isclose(noise.dt, config.dt) and math.isclose(noise.dx, config.dx)):
        raise ConfigurationError([("noise", "noise grid steps do not match the run")])


class _SmoothedSqrtTable:
    """Linear-interpolation table for the mollified square root, rebuilt
    (deterministically) whenever the encountered range outgrows it."""

    def __init__(self, m, v_max, n=4097):
        self.m = m
        self.n = n
        self._build(max(v_max, 1.0))

    def _build(self, v_max):
        self.v_max = v_max
        self.grid = np.linspace(0.0, v_max, self.n)
        self.vals = kernels.smoothed_sqrt(self.m, self.grid)

    def __call__(self, v):
        top = float(v.max()) if v.size else 0.0
        while top > self.v_max:
            self._build(2.0 * self.v_max)
        flat = np.interp(v.reshape(-1), self.grid, self.vals)
        return flat.reshape(v.shape)


def step_density(mu, rate, dW, dt, dx):
    """One explicit step of the density scheme on a single field:
    mu + dt/2 * (discrete Laplacian) + sqrt(max(mu,0)*rate) * dW/dx,
    clipped at zero, with zero-Dirichlet walls."""
    if dt > dx * dx * _STABILITY_SLACK:
        raise ConfigurationError([("time.dt", "stability requires dt <= dx^2")])
    mu = np.asarray(mu, dtype=float)
    lap = np.zeros_like(mu)
    lap[..., 1:-1] = mu[..., :-2] - 2.0 * mu[..., 1:-1] + mu[..., 2:]
    out = mu + (0.5 * dt / (dx * dx)) * lap
    out = out + np.sqrt(np.maximum(mu, 0.0) * rate) * (np.asarray(dW) / dx)
    out = np.maximum(out, 0.0)
    out[..., 0] = 0.0
    out[..., -1] = 0.0
    return out


def _run_fd(config, seed, nreps, observers, store_fields, noise,
            blocks, use_smoothed_sqrt, mu0_override=None):
    config.require_valid()
    x = config.x_grid
    nx = config.nx
    dt, dx = config.dt, config.dx
    n_steps = config.n_steps
    spec = config.branching
    if n_steps % blocks:
        raise ConfigurationError([("scheme.m", "block count must divide the step count")])
    steps_per_block = n_steps // blocks

    base_seed = _resolve_seed(config, seed)
    stream_seed = independent_streams(base_seed, 1)[0]
    if noise is not None:
        _check_noise(noise, config, nreps)

    mu0 = config.mu0() if mu0_override is None else np.asarray(mu0_override, float)
    mu = np.tile(mu0, (nreps, 1))
    rate = np.empty_like(mu)
    coeff = np.empty_like(mu)
    lap = np.empty_like(mu)

    gm_table = None
    sqrt_rate = None
    if use_smoothed_sqrt:
        gm_table = _SmoothedSqrtTable(blocks, 3.0 * float(mu0.max()) + 1.0)
        sqrt_rate = np.empty_like(mu)
    refresh_each = spec.is_constant is False
    branching_rate_field(spec, x, mu, out=rate)
    if sqrt_rate is not None:
        np.sqrt(rate, out=sqrt_rate)

    out_steps = config.output_steps()
    out_pos = {int(s): j for j, s in enumerate(out_steps)}
    n_out = out_steps.size
    times = config.output_times()
    fields = np.empty((n_out, nreps, nx)) if store_fields else None
    mass = np.empty((n_out, nreps))

    for ob in observers:
        ob.start(config, nreps)

    cfl = 0.5 * dt / (dx * dx)
    inv_dx = 1.0 / dx
    repairs = 0

    def record(j, k):
        if fields is not None:
            np.maximum(mu, 0.0, out=fields[j])
        mass[j] = np.trapezoid(mu, dx=dx, axis=-1)
        for ob in observers:
            ob.output(j, dt * k, mu, rate)

    for k in range(n_steps):
        if refresh_each and k % steps_per_block == 0:
            branching_rate_field(spec, x, mu, out=rate)
            if sqrt_rate is not None:
                np.sqrt(rate, out=sqrt_rate)
        w = 0.5 * dt if k == 0 else dt
        for ob in observers:
            ob.accumulate(k, dt * k, mu, rate, w)
        if k in out_pos:
            record(out_pos[k], k)

        if noise is not None:
            dW = noise.increments[k][None, :]
        else:
            dW = noise_row(stream_seed, k, nreps * nx, dt, dx).reshape(nreps, nx)

        lap[:, 1:-1] = mu[:, :-2]
        lap[:, 1:-1] -= 2.0 * mu[:, 1:-1]
        lap[:, 1:-1] += mu[:, 2:]
        np.maximum(mu, 0.0, out=coeff)
        if use_smoothed_sqrt:
            coeff = gm_table(coeff)
            coeff *= sqrt_rate
        else:
            coeff *= rate
            np.sqrt(coeff, out=coeff)
        mu[:, 1:-1] += cfl * lap[:, 1:-1]
        coeff *= dW
        coeff *= inv_dx
        mu += coeff
        repairs += int(np.count_nonzero(mu < 0.0))
        mu[:, 0] = 0.0
        mu[:, -1] = 0.0

        total = float(mu.sum())
        if not math.isfinite(total):
            rep, node = np.argwhere(~np.isfinite(mu))[0]
            raise NumericalAbort(step=k + 1, node=int(node), replicate=int(rep))

    if refresh_each and not use_smoothed_sqrt:
        # final-state rate, so observer integrands cover [0, T]
        branching_rate_field(spec, x, mu, out=rate)
    for ob in observers:
        ob.accumulate(n_steps, config.horizon, mu, rate, 0.5 * dt)
    if n_steps in out_pos:
        record(out_pos[n_steps], n_steps)

    scheme = "blocked" if blocks != n_steps or use_smoothed_sqrt else "explicit-fd"
    return DensityTrajectory(
        times=times, x_grid=x, fields=fields, mass=mass, seed=base_seed,
        stream_seed=stream_seed, scheme=scheme, repairs=repairs,
        observables={ob.__class__.__name__: ob.result() for ob in observers
                     if ob.result() is not None},
    )


def simulate_density(config: SimConfig, seed=None, nreps=1, observers=(),
                     store_fields=True, noise=None, mu0=None) -> DensityTrajectory:
    """Simulate the density equation with the branching rate refreshed at
    every step.  Replicates advance as rows of one batch; the run is a
    deterministic function of (config, seed, nreps)."""
    return _run_fd(config, seed, nreps, list(observers), store_fields, noise,
                   blocks=config.n_steps, use_smoothed_sqrt=False,
                   mu0_override=mu0)


def simulate_blocked(config: SimConfig, blocks=None, seed=None, nreps=1,
                     observers=(), store_fields=True, noise=None,
                     exact_sqrt=False) -> DensityTrajectory:
    """Simulate the time-blocked approximation: the branching rate is frozen
    at the start of each of ``blocks`` equal time blocks, and the noise
    coefficient uses the bandwidth-1/m mollified square root of the density
    (``exact_sqrt=True`` restores the exact square root, in which case
    blocks == n_steps reproduces ``simulate_density`` bit for bit)."""
    m = config.blocks if blocks is None else int(blocks)
    if not m or m < 1:
        raise ConfigurationError([("scheme.m", "blocked scheme needs m >= 1")])
    return _run_fd(config, seed, nreps, list(observers), store_fields, noise,
                   blocks=m, use_smoothed_sqrt=not exact_sqrt)


def simulate_mild(config: SimConfig, seed=None, nreps=1, observers=(),
                  store_fields=True, noise=None) -> DensityTrajectory:
    """Simulate via the convolution form: output fields are the heat
    semigroup applied to the initial field plus a stochastic convolution
    advanced step by step with a mass-normalized sampled heat kernel.  Draws
    the same noise rows as the finite-difference scheme, so the two can be
    coupled pathwise."""
    config.require_valid()
    x = config.x_grid
    nx = config.nx
    dt, dx = config.dt, config.dx
    n_steps = config.n_steps
    spec = config.branching

    base_seed = _resolve_seed(config, seed)
    stream_seed = independent_streams(base_seed, 1)[0]
    if noise is not None:
        _check_noise(noise, config, nreps)

    mu0 = config.mu0()
    half = max(int(math.ceil(8.0 * math.sqrt(dt) / dx)), 1)
    kern = kernels.heat_kernel(dt, dx * np.arange(-half, half + 1))
    kern = kern / kern.sum()   # unit discrete mass: repeated smoothing conserves

    det = np.tile(mu0, (nreps, 1))
    nu = np.zeros((nreps, nx))
    rate = np.empty_like(nu)
    cur = np.empty_like(nu)

    out_steps = config.output_steps()
    out_pos = {int(s): j for j, s in enumerate(out_steps)}
    times = config.output_times()
    fields = np.empty((times.size, nreps, nx)) if store_fields else None
    mass = np.empty((times.size, nreps))
    det_out = {0: mu0}
    for j, s in enumerate(out_steps):
        if s > 0:
            det_out[int(s)] = kernels.semigroup_convolve(mu0, dt * int(s), dx)

    for ob in observers:
        ob.start(config, nreps)
    repairs = 0

    def record(j, k):
        nonlocal repairs
        out = det_out[int(k)][None, :] + nu
        mass[j] = np.trapezoid(out, dx=dx, axis=-1)
        repairs += int(np.count_nonzero(out < 0.0))
        out = np.maximum(out, 0.0)
        if fields is not None:
            fields[j] = out
        for ob in observers:
            ob.output(j, dt * k, out, rate)

    from scipy.ndimage import convolve1d

    for k in range(n_steps):
        np.add(det, nu, out=cur)
        branching_rate_field(spec, x, cur, out=rate)
        w = 0.5 * dt if k == 0 else dt
        for ob in observers:
            ob.accumulate(k, dt * k, cur, rate, w)
        if k in out_pos:
            record(out_pos[k], k)

        if noise is not None:
            dW = noise.increments[k][None, :]
        else:
            dW = noise_row(stream_seed, k, nreps * nx, dt, dx).reshape(nreps, nx)
        np.maximum(cur, 0.0, out=cur)
        cur *= rate
        np.sqrt(cur, out=cur)
        cur *= dW
        cur *= 1.0 / dx
        nu += cur
        nu = convolve1d(nu, kern, axis=-1, mode="constant")
        det = convolve1d(det, kern, axis=-1, mode="constant")

        if not math.isfinite(float(nu.sum())):
            rep, node = np.argwhere(~np.isfinite(nu))[0]
            raise NumericalAbort(step=k + 1, node=int(node), replicate=int(rep))

    np.add(det, nu, out=cur)
    branching_rate_field(spec, x, cur, out=rate)
    for ob in observers:
        ob.accumulate(n_steps, config.horizon, cur, rate, 0.5 * dt)
    if n_steps in out_pos:
        record(out_pos[n_steps], n_steps)

    return DensityTrajectory(
        times=times, x_grid=x, fields=fields, mass=mass, seed=base_seed,
        stream_seed=stream_seed, scheme="mild", repairs=repairs,
        observables={ob.__class__.__name__: ob.result() for ob in observers
                     if ob.result() is not None},
    )


# ---------------------------------------------------------------------------
# interval distribution functions

@dataclass
class DistributionTrajectory:
    """Trajectory of the vector of interval distribution functions: one
    cumulative-mass field per partition cell, plus the boundary data (right
    endpoint slope per bounded cell, plateau value of the last cell)."""

    times: np.ndarray
    interval_grids: list           # per interval: node positions
    fields: list                   # per interval: (n_out, nreps, nx_i)
    grad_right: np.ndarray         # (n_out, nreps, n_intervals)
    tail: np.ndarray               # (n_out, nreps) value of the last field at +L
    seed: int
    stream_seeds: list
    repairs: int = 0
    saturations: int = 0

    @property
    def nreps(self) -> int:
        return self.tail.shape[1]


def _interval_slices(config: SimConfig):
    x = config.x_grid
    edges = [0]
    for a in config.branching.partition:
        edges.append(int(round((a + config.half_width) / config.dx)))
    edges.append(config.nx - 1)
    return [(edges[i], edges[i + 1]) for i in range(len(edges) - 1)], x


def _cumulative(mu_slice, dx):
    out = np.zeros(mu_slice.shape[:-1] + (mu_slice.shape[-1],))
    np.cumsum(0.5 * dx * (mu_slice[..., 1:] + mu_slice[..., :-1]), axis=-1,
              out=out[..., 1:])
    return out


def distributions_from_density(traj: DensityTrajectory, spec: BranchingSpec,
                               config: SimConfig) -> DistributionTrajectory:
    """Cumulative trapezoid integral of each stored density field over each
    partition cell, with one-sided boundary slopes."""
    if traj.fields is None:
        raise DomainError("distributions need stored density fields")
    slices, x = _interval_slices(config)
    n_out, nreps = traj.fields.shape[:2]
    grids, fields = [], []
    grad = np.empty((n_out, nreps, len(slices)))
    for i, (lo, hi) in enumerate(slices):
        xg = x[lo : hi + 1]
        u = _cumulative(traj.fields[:, :, lo : hi + 1], config.dx)
        grids.append(xg)
        fields.append(u)
        grad[:, :, i] = gradient_at(xg, u, xg[-1])
    tail = fields[-1][..., -1]
    return DistributionTrajectory(
        times=traj.times, interval_grids=grids, fields=fields,
        grad_right=grad, tail=tail, seed=traj.seed,
        stream_seeds=[traj.stream_seed],
    )


def simulate_distribution_system(config: SimConfig, seed=None, nreps=1,
                                 u0_fields=None) -> DistributionTrajectory:
    """Advance the coupled system of interval distribution functions.

    Each interval carries its own white noise in (time, mass): per step the
    mass axis is cut into ``z_cells`` cells of size dz, one Gaussian
    increment of variance dt*dz is drawn per cell, and a node at level u
    receives the cumulative sum of the increments below u, the partial top
    cell entering with weight sqrt(frac) so the received variance is exactly
    u*dt at every level.  Sharing the cell noises across nodes preserves the
    comonotone coupling that the mass integral induces, and a node at zero
    mass receives no noise.

    Boundary handling: each field is pinned to 0 at its left endpoint; the
    last interval uses a zero-Neumann wall at +L so its endpoint value tracks
    the plateau; interior right endpoints of bounded intervals use a shifted
    second-difference stencil.  Negative values are clipped and monotonicity
    is restored by a running maximum; both repair counts are reported.
    """
    config.require_valid()
    spec = config.branching
    dt, dx = config.dt, config.dx
    n_steps = config.n_steps
    slices, x = _interval_slices(config)
    n_int = len(slices)

    base_seed = _resolve_seed(config, seed)
    streams = independent_streams(base_seed, n_int)

    mu0 = config.mu0()
    z_max = config.z_max
    if z_max is None:
        z_max = 4.0 * max(float(np.trapezoid(mu0, dx=dx)), 0.25)
    K = config.z_cells
    dz = z_max / K

    grids = [x[lo : hi + 1] for lo, hi in slices]
    if u0_fields is None:
        u = [np.tile(_cumulative(mu0[lo : hi + 1], dx), (nreps, 1))
             for lo, hi in slices]
    else:
        u = [np.tile(np.asarray(f, dtype=float), (nreps, 1)) for f in u0_fields]

    out_steps = config.output_steps()
    out_pos = {int(s): j for j, s in enumerate(out_steps)}
    times = config.output_times()
    n_out = times.size
    fields = [np.empty((n_out, nreps, g.size)) for g in grids]
    grad = np.empty((n_out, nreps, n_int))
    tail = np.empty((n_out, nreps))

    cfl = 0.5 * dt / (dx * dx)
    repairs = 0
    saturations = 0

    def record(j):
        for i in range(n_int):
            fields[i][j] = u[i]
            grad[j, :, i] = gradient_at(grids[i], u[i], grids[i][-1])
        tail[j] = u[-1][:, -1]

    for k in range(n_steps + 1):
        if k in out_pos:
            record(out_pos[k])
        if k == n_steps:
            break
        for i in range(n_int):
            ui = u[i]
            zeta = noise_row(streams[i], k, nreps * K, dt, dz).reshape(nreps, K)
            cum = np.zeros((nreps, K + 1))
            np.cumsum(zeta, axis=1, out=cum[:, 1:])
            if i == n_int - 1:
                g_arg = ui[:, -1]
            else:
                g_arg = gradient_at(grids[i], ui, grids[i][-1])
            g_val = spec.rates[i](g_arg)

            lap = np.zeros_like(ui)
            lap[:, 1:-1] = ui[:, :-2] - 2.0 * ui[:, 1:-1] + ui[:, 2:]
            if i == n_int - 1:
                lap[:, -1] = ui[:, -2] - ui[:, -1]   # zero-Neumann ghost
            else:
                lap[:, -1] = ui[:, -3] - 2.0 * ui[:, -2] + ui[:, -1]

            pos = ui / dz
            idx = np.clip(pos.astype(np.int64), 0, K - 1)
            saturations += int(np.count_nonzero(ui > z_max))
            frac = np.clip(pos - idx, 0.0, 1.0)
            walsh = np.take_along_axis(cum, idx, axis=1) + np.sqrt(
                frac) * np.take_along_axis(zeta, idx, axis=1)

            ui = ui + cfl * lap + g_val[:, None] * walsh
            before = ui
            ui = np.maximum(ui, 0.0)
            ui[:, 0] = 0.0
            np.maximum.accumulate(ui, axis=1, out=ui)
            repairs += int(np.count_nonzero(ui != before))
            u[i] = ui

            if not math.isfinite(float(ui.sum())):
                rep, node = np.argwhere(~np.isfinite(ui))[0]
                raise NumericalAbort(step=k + 1, node=int(node), replicate=int(rep))

    return DistributionTrajectory(
        times=times, interval_grids=grids, fields=fields, grad_right=grad,
        tail=tail, seed=base_seed, stream_seeds=streams,
        repairs=repairs, saturations=saturations,
    )


# ---------------------------------------------------------------------------
# total-mass diffusion

@dataclass
class MassPath:
    times: np.ndarray
    values: np.ndarray   # (n_out, npaths), absorbed at zero
    seed: int

    @property
    def npaths(self) -> int:
        return self.values.shape[1]

    def terminal(self) -> np.ndarray:
        return self.values[-1]


def simulate_total_mass(rate, z0, horizon, dt, seed, npaths=1,
                        outputs=11) -> MassPath:
    """Euler-Maruyama for dZ = g(Z) sqrt(Z) dB with absorption: once a path
    reaches zero it stays there."""
    if z0 < 0:
        raise DomainError("initial mass must be nonnegative")
    if dt <= 0 or horizon <= 0:
        raise DomainError("need dt > 0 and horizon > 0")
    g = rate if callable(rate) else make_rate(**rate)
    n_steps = int(round(horizon / dt))
    if abs(n_steps * dt - horizon) > 1e-9 * max(1.0, horizon):
        raise ConfigurationError([("time.dt", "horizon must be a whole number of steps")])
    stream = independent_streams(int(seed), 1)[0]

    out_steps = (n_steps // (outputs - 1)) * np.arange(outputs) \
        if n_steps % (outputs - 1) == 0 else np.unique(
            np.round(np.linspace(0, n_steps, outputs)).astype(int))
    out_pos = {int(s): j for j, s in enumerate(out_steps)}

    Z = np.full(npaths, float(z0))
    values = np.empty((len(out_steps), npaths))
    for k in range(n_steps + 1):
        if k in out_pos:
            values[out_pos[k]] = Z
        if k == n_steps:
            break
        dB = noise_row(stream, k, npaths, dt, 1.0)
        Z = Z + np.asarray(g(Z)) * np.sqrt(Z) * dB
        Z[Z <= 0.0] = 0.0
    return MassPath(times=dt * out_steps.astype(float), values=values, seed=int(seed))
