"""Closed-form kernels and special functions used by the schemes.

Everything here is a pure function of its arguments: the Gaussian heat
kernel, its half-line Dirichlet variant, grid convolution with the heat
semigroup, a mollified square root with bandwidth 1/m, a mollified
exponential weight, and the compactly supported window functions (with
derivatives) used by the boundary-limit checks.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erfc

from .errors import DomainError

__all__ = [
    "heat_kernel",
    "dirichlet_kernel",
    "semigroup_convolve",
    "smoothed_sqrt",
    "smooth_exp_weight",
    "mollifier",
    "bump",
    "bump_d1",
    "bump_cdf",
    "boundary_window",
    "boundary_window_d1",
    "boundary_window_d2",
    "BUMP_SUPPORT",
]

_SQRT_2PI = math.sqrt(2.0 * math.pi)

# Quadrature nodes shared by the smoothed sqrt and the exponential weight.
_GH_X, _GH_W = np.polynomial.hermite.hermgauss(64)
_GL_X, _GL_W = np.polynomial.legendre.leggauss(64)


def _as_array(x):
    return np.asarray(x, dtype=float)


def _scalar_or_array(out, *inputs):
    if all(np.isscalar(v) or np.ndim(v) == 0 for v in inputs):
        return float(out)
    return out


def heat_kernel(t, x):
    """Gaussian transition density of Brownian motion run at speed 1/2,
    i.e. (2*pi*t)^(-1/2) * exp(-x^2 / (2t))."""
    if np.any(np.asarray(t) <= 0):
        raise DomainError("heat kernel requires t > 0")
    xa = _as_array(x)
    out = np.exp(-(xa * xa) / (2.0 * t)) / math.sqrt(2.0 * math.pi * t)
    return _scalar_or_array(out, x)


def dirichlet_kernel(t, x, y, a=0.0):
    """Heat kernel on (a, inf) killed at a, by the method of images:
    p_t(x - y) - p_t(x + y - 2a).  Vanishes whenever x or y equals a."""
    if np.any(np.asarray(t) <= 0):
        raise DomainError("dirichlet kernel requires t > 0")
    if np.any(_as_array(x) < a) or np.any(_as_array(y) < a):
        raise DomainError("dirichlet kernel requires x, y >= a")
    out = heat_kernel(t, _as_array(x) - _as_array(y)) - heat_kernel(
        t, _as_array(x) + _as_array(y) - 2.0 * a
    )
    return _scalar_or_array(out, x, y)


def semigroup_convolve(f, t, dx):
    """Convolve grid samples ``f`` (uniform spacing ``dx``) with the heat
    kernel at time ``t`` by trapezoid quadrature.

    Preserves the total integral up to the quadrature tolerance provided the
    kernel mass outside the grid is negligible, and preserves nonnegativity.
    """
    f = _as_array(f)
    if f.ndim != 1 or f.size == 0:
        raise DomainError("semigroup_convolve needs a nonempty 1-d grid field")
    if t <= 0:
        raise DomainError("semigroup_convolve requires t > 0")
    n = f.size
    offsets = dx * np.arange(-(n - 1), n)
    kern = heat_kernel(t, offsets)
    w = np.full(n, dx)
    w[0] = 0.5 * dx
    w[-1] = 0.5 * dx
    full = np.convolve(w * f, kern)
    return full[n - 1 : 2 * n - 1]


def _smoothed_sqrt_far(m, x):
    # kink at 0 is outside the effective Gaussian support: plain
    # Gauss-Hermite in the original variable is spectrally accurate
    y = x[:, None] + _GH_X[None, :] * math.sqrt(2.0 / m)
    vals = np.minimum(np.sqrt(np.abs(y)), m)
    return (vals @ _GH_W) / math.sqrt(math.pi)


def _smoothed_sqrt_near(m, x):
    # kink inside the support: split at 0, substitute y = +-v^2 so each
    # half-integrand is smooth, and add the capped tail analytically
    sig = 1.0 / math.sqrt(m)
    out = np.zeros_like(x)
    for sgn in (1.0, -1.0):
        vmax = np.sqrt(np.minimum(float(m * m), np.maximum(sgn * x, 0.0) + 12.0 * sig))
        v = 0.5 * vmax[:, None] * (_GL_X[None, :] + 1.0)
        w = 0.5 * vmax[:, None] * _GL_W[None, :]
        dens = np.exp(-0.5 * ((x[:, None] - sgn * v * v) / sig) ** 2) / (sig * _SQRT_2PI)
        out += np.sum(w * 2.0 * v * v * dens, axis=1)
    z_hi = (m * m - x) / sig
    z_lo = (m * m + x) / sig
    out += m * 0.5 * (erfc(z_hi / math.sqrt(2.0)) + erfc(z_lo / math.sqrt(2.0)))
    return out


def smoothed_sqrt(m, x):
    """Gaussian mollification of min(sqrt|y|, m) with bandwidth 1/m,
    evaluated at x >= 0.

    Lipschitz for each fixed m, converges pointwise to sqrt(x) as m grows,
    and satisfies the linear-growth bound 1 + (1 + x^2)^(1/2).
    """
    if m < 1:
        raise DomainError("smoothed_sqrt requires m >= 1")
    xa = np.atleast_1d(_as_array(x))
    if np.any(xa < 0):
        raise DomainError("smoothed_sqrt requires x >= 0")
    sig = 1.0 / math.sqrt(m)
    out = np.empty_like(xa)
    far = xa > 12.0 * sig
    if far.any():
        out[far] = _smoothed_sqrt_far(m, xa[far])
    near = ~far
    if near.any():
        out[near] = _smoothed_sqrt_near(m, xa[near])
    return _scalar_or_array(out if np.ndim(x) else out[0], x)


# ---------------------------------------------------------------------------
# mollifier and exponential weight

def _mollifier_unnormalized(x):
    out = np.zeros_like(x)
    inside = np.abs(x) < 1.0
    xi = x[inside]
    out[inside] = np.exp(-1.0 / (1.0 - xi * xi))
    return out


_RHO_GRID = np.linspace(-1.0, 1.0, 4097)
_RHO_NORM = 1.0 / np.trapezoid(_mollifier_unnormalized(_RHO_GRID), _RHO_GRID)
# one-sided exponential moment of the mollifier, for the closed tail of the weight
_EXP_MOMENT = _RHO_NORM * np.trapezoid(
    _mollifier_unnormalized(_RHO_GRID) * np.exp(_RHO_GRID), _RHO_GRID
)


def mollifier(x):
    """Standard unit-mass bump exp(-1/(1-x^2)) on (-1, 1), normalized by
    quadrature at import time."""
    out = _RHO_NORM * _mollifier_unnormalized(_as_array(x))
    return _scalar_or_array(out, x)


def smooth_exp_weight(x):
    """The mollified exponential weight J(x) = (mollifier * exp(-|.|))(x).

    Symmetric by construction; equals ``c * exp(-|x|)`` exactly for |x| >= 1
    and is evaluated by split Gauss-Legendre quadrature inside the mollifier
    support, where the integrand has a kink at u = x.
    """
    xa = np.abs(np.atleast_1d(_as_array(x)))
    out = np.empty_like(xa)
    outside = xa >= 1.0
    out[outside] = _EXP_MOMENT * np.exp(-xa[outside])
    inside = ~outside
    if inside.any():
        xi = xa[inside]
        acc = np.zeros_like(xi)
        for lo, hi in ((-np.ones_like(xi), xi), (xi, np.ones_like(xi))):
            mid = 0.5 * (hi + lo)
            half = 0.5 * (hi - lo)
            u = mid[:, None] + half[:, None] * _GL_X[None, :]
            vals = _RHO_NORM * _mollifier_unnormalized(u) * np.exp(-np.abs(xi[:, None] - u))
            acc += np.sum(half[:, None] * _GL_W[None, :] * vals, axis=1)
        out[inside] = acc
    return _scalar_or_array(out if np.ndim(x) else out[0], x)


# ---------------------------------------------------------------------------
# window functions for the boundary-limit checks
#
# The window factor is built from a C^2 plateau bump rather than the
# symmetric exp-bump: pushing its mass toward 1 minimizes the k -> inf
# error constant of the limit identities while keeping 0 <= bump <= 2.

_BUMP_HI = 0.98
_BUMP_EDGE = 0.10
_BUMP_LO = _BUMP_HI - 0.5 - _BUMP_EDGE
BUMP_SUPPORT = (_BUMP_LO, _BUMP_HI)


def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * t * (10.0 - 15.0 * t + 6.0 * t * t)


def _smoothstep_d1(t):
    t = _as_array(t)
    out = np.zeros_like(t)
    inner = (t > 0.0) & (t < 1.0)
    ti = t[inner]
    out[inner] = 30.0 * ti * ti * (1.0 - ti) ** 2
    return out


def _smoothstep_int(t):
    # integral of the quintic smoothstep from 0 to t
    t = np.clip(t, 0.0, 1.0)
    return t ** 4 * (2.5 - 3.0 * t + t * t)


def bump(x):
    """C^2 plateau bump on (0, 1): rises from 0 at 0.38 to the plateau value
    2 over a width-0.1 smoothstep edge, and back to 0 at 0.98.  Integrates
    to 1 exactly and satisfies 0 <= bump <= 2."""
    xa = _as_array(x)
    out = np.zeros_like(xa)
    lo, r, hi = _BUMP_LO, _BUMP_EDGE, _BUMP_HI
    rising = (xa >= lo) & (xa < lo + r)
    flat = (xa >= lo + r) & (xa <= hi - r)
    falling = (xa > hi - r) & (xa <= hi)
    out[rising] = 2.0 * _smoothstep((xa[rising] - lo) / r)
    out[flat] = 2.0
    out[falling] = 2.0 * _smoothstep((hi - xa[falling]) / r)
    return _scalar_or_array(out, x)


def bump_d1(x):
    xa = _as_array(x)
    out = np.zeros_like(xa)
    lo, r, hi = _BUMP_LO, _BUMP_EDGE, _BUMP_HI
    rising = (xa >= lo) & (xa < lo + r)
    falling = (xa > hi - r) & (xa <= hi)
    out[rising] = (2.0 / r) * _smoothstep_d1((xa[rising] - lo) / r)
    out[falling] = -(2.0 / r) * _smoothstep_d1((hi - xa[falling]) / r)
    return _scalar_or_array(out, x)


def bump_cdf(x):
    """Closed-form primitive of ``bump`` with bump_cdf(0) = 0, clamped to
    [0, 1] outside the support."""
    xa = _as_array(x)
    out = np.zeros_like(xa)
    lo, r, hi = _BUMP_LO, _BUMP_EDGE, _BUMP_HI
    rising = (xa >= lo) & (xa < lo + r)
    flat = (xa >= lo + r) & (xa <= hi - r)
    falling = (xa > hi - r) & (xa <= hi)
    out[rising] = 2.0 * r * _smoothstep_int((xa[rising] - lo) / r)
    out[flat] = r + 2.0 * (xa[flat] - lo - r)
    out[falling] = 1.0 - 2.0 * r * _smoothstep_int((hi - xa[falling]) / r)
    out[xa > hi] = 1.0
    return _scalar_or_array(out, x)


def _check_window_args(k, x):
    if k < 1 or int(k) != k:
        raise DomainError("window index k must be a positive integer")
    xa = np.atleast_1d(_as_array(x))
    if np.any(xa < 0.0) or np.any(xa > 1.0):
        raise DomainError("window argument must lie in [0, 1]")
    return xa


def boundary_window(k, x):
    """Two-sided window bump_cdf(k*x) * (1 - bump_cdf(x^k)) on [0, 1].

    Compactly supported in (0, 1) with two continuous derivatives; tends to
    the constant 1 pointwise on (0, 1) as k grows, which is what makes its
    derivatives extract boundary values in the limit identities.
    """
    xa = _check_window_args(k, x)
    out = bump_cdf(k * xa) * (1.0 - bump_cdf(xa ** k))
    return _scalar_or_array(out, x)


def boundary_window_d1(k, x):
    """First derivative of ``boundary_window``, in closed form."""
    xa = _check_window_args(k, x)
    out = k * bump(k * xa) * (1.0 - bump_cdf(xa ** k)) - bump_cdf(k * xa) * (
        k * xa ** (k - 1) * bump(xa ** k)
    )
    return _scalar_or_array(out, x)


def boundary_window_d2(k, x):
    """Second derivative of ``boundary_window``, in closed form."""
    xa = _check_window_args(k, x)
    A = bump_cdf(k * xa)
    B = 1.0 - bump_cdf(xa ** k)
    d2A = k * k * bump_d1(k * xa)
    cross = -2.0 * k * k * xa ** (k - 1) * bump(k * xa) * bump(xa ** k)
    if k >= 2:
        xkm2 = xa ** (k - 2)
    else:
        # k = 1: the x^(k-2) term carries a factor k*(k-1) = 0
        xkm2 = np.zeros_like(xa)
    d2B = -(k * (k - 1) * xkm2 * bump(xa ** k) + k * k * xa ** (2 * k - 2) * bump_d1(xa ** k))
    out = d2A * B + cross + A * d2B
    return _scalar_or_array(out, x)
