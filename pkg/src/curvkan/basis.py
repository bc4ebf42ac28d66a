"""Univariate bases: cubic B-splines and Gaussian RBFs.

Both bases live on a uniform grid over ``[lo, hi]``.  B-splines use ``G``
intervals extended by ``order`` knots on each side, giving ``G + order``
functions; the RBF basis uses ``G`` centers spaced evenly from ``lo`` to
``hi`` with bandwidth equal to the center spacing.
"""

from dataclasses import dataclass
from enum import Enum
import math

import numpy as np
from scipy.special import expit

from .errors import ConfigError


class BasisKind(str, Enum):
    BSPLINE = "bspline"
    RBF = "rbf"


@dataclass(frozen=True)
class GridSpec:
    lo: float
    hi: float
    intervals: int
    order: int = 3

    def __post_init__(self):
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)) or self.hi <= self.lo:
            raise ConfigError(f"grid range must satisfy hi > lo, got [{self.lo}, {self.hi}]")
        if self.order != 3:
            raise ConfigError("only cubic B-splines (order=3) are supported")
        if self.intervals < self.order + 1:
            raise ConfigError(f"grid size {self.intervals} too small for order {self.order}")

    @property
    def h(self):
        """Knot spacing."""
        return (self.hi - self.lo) / self.intervals

    @property
    def width(self):
        return self.hi - self.lo

    def knots(self):
        """Extended knot vector t_0 .. t_{G+2k}."""
        k = self.order
        return self.lo + (np.arange(self.intervals + 2 * k + 1) - k) * self.h


def rbf_spacing(spec):
    """Center spacing (= bandwidth) of the RBF basis on ``spec``."""
    return (spec.hi - spec.lo) / (spec.intervals - 1)


def rbf_centers(spec):
    return np.linspace(spec.lo, spec.hi, spec.intervals)


def n_basis(spec, kind):
    kind = BasisKind(kind)
    if kind is BasisKind.BSPLINE:
        return spec.intervals + spec.order
    return spec.intervals


# -- SiLU and its derivatives ---------------------------------------------

def silu(z):
    return z * expit(z)


def silu_d1(z):
    s = expit(z)
    return s * (1.0 + z * (1.0 - s))


def silu_d2(z):
    s = expit(z)
    return s * (1.0 - s) * (2.0 + z * (1.0 - 2.0 * s))


def silu_curvature_constant():
    """Bending energy of SiLU over the real line, (30 + pi^2) / 90."""
    return (30.0 + math.pi ** 2) / 90.0


K_SILU = silu_curvature_constant()


# -- dense evaluation -----------------------------------------------------

def _cox_de_boor(t, z, p):
    """All degree-``p`` B-splines on knots ``t`` at points ``z``; shape (..., len(t)-p-1)."""
    z = np.asarray(z, dtype=float)[..., None]
    B = ((t[:-1] <= z) & (z < t[1:])).astype(float)
    for q in range(1, p + 1):
        left = (z - t[: -q - 1]) / (t[q:-1] - t[: -q - 1])
        right = (t[q + 1:] - z) / (t[q + 1:] - t[1:-q])
        B = left * B[..., :-1] + right * B[..., 1:]
    return B


def _bspline_deriv(t, z, p, d):
    if d == 0:
        return _cox_de_boor(t, z, p)
    lower = _bspline_deriv(t, z, p - 1, d - 1)
    a = p / (t[p:-1] - t[:-p - 1])
    b = p / (t[p + 1:] - t[1:-p])
    return a * lower[..., :-1] - b * lower[..., 1:]


def _rbf_dense(spec, z, deriv):
    h = rbf_spacing(spec)
    u = (np.asarray(z, dtype=float)[..., None] - rbf_centers(spec)) / h
    B = np.exp(-u * u)
    if deriv == 0:
        return B
    if deriv == 1:
        return -2.0 * u * B / h
    return (4.0 * u * u - 2.0) * B / (h * h)


def eval_basis(spec, kind, z, deriv=0):
    """Values (or 1st/2nd derivatives) of every basis function at ``z``.

    ``z`` may be a scalar or an array; the basis index is appended as the
    last axis.  B-splines vanish outside the extended knot span.
    """
    if deriv not in (0, 1, 2):
        raise ConfigError(f"deriv must be 0, 1 or 2, got {deriv}")
    kind = BasisKind(kind)
    if kind is BasisKind.RBF:
        return _rbf_dense(spec, z, deriv)
    return _bspline_deriv(spec.knots(), z, spec.order, deriv)


# -- local (sparse) B-spline evaluation used on the training path ----------

def local_bspline(z, lo, h, intervals, order=3):
    """Nonzero cubic B-splines at ``z`` via the triangular Cox-de Boor scheme.

    ``z``, ``lo`` and ``h`` broadcast together.  Returns ``(first, vals, d1, d2)``
    where ``first`` is the integer index of the first active function and the
    value arrays carry ``order + 1`` entries on a trailing axis.  Entries whose
    index falls outside ``[0, intervals + order)`` are zeroed and their index
    is meaningless (clip before gathering).
    """
    x = (z - lo) / h
    span = np.floor(x)
    u = x - span
    span = span.astype(np.int64)

    # ndu[q][m]: degree-q function with local index m on this span
    ndu = [[np.ones_like(u)]]
    left = [None] + [u + (j - 1.0) for j in range(1, order + 1)]  # u - t_{J+1-j}
    right = [None] + [j - u for j in range(1, order + 1)]       # t_{J+j} - u
    for j in range(1, order + 1):
        prev = ndu[-1]
        cur = []
        saved = np.zeros_like(u)
        for r in range(j):
            temp = prev[r] / j
            cur.append(saved + right[r + 1] * temp)
            saved = left[j - r] * temp
        cur.append(saved)
        ndu.append(cur)

    def _diff(vals):
        out = [-vals[0]]
        out += [vals[m - 1] - vals[m] for m in range(1, len(vals))]
        out.append(vals[-1])
        return out

    vals = ndu[order]
    d1 = [v / h for v in _diff(ndu[order - 1])]
    d2 = [v / (h * h) for v in _diff(_diff(ndu[order - 2]))]

    vals = np.stack(vals, axis=-1)
    d1 = np.stack(d1, axis=-1)
    d2 = np.stack(d2, axis=-1)
    idx = span[..., None] + np.arange(order + 1)
    valid = (idx >= 0) & (idx < intervals + order)
    if not valid.all():
        vals = np.where(valid, vals, 0.0)
        d1 = np.where(valid, d1, 0.0)
        d2 = np.where(valid, d2, 0.0)
    return span, vals, d1, d2


# -- penalty matrices -----------------------------------------------------

def diff_matrix(order, n_coeff):
    """Rectangular ``order``-th difference matrix of shape (n_coeff-order, n_coeff)."""
    if order not in (1, 2):
        raise ConfigError(f"difference order must be 1 or 2, got {order}")
    if n_coeff < order + 1:
        raise ConfigError(f"need at least {order + 1} coefficients, got {n_coeff}")
    return np.diff(np.eye(n_coeff, dtype=float), n=order, axis=0)


def gram_matrix(spec, kind):
    """Curvature Gram matrix M_ij = integral of B_i'' B_j''.

    B-splines integrate over the grid range ``[lo, hi]`` with 2-point
    Gauss-Legendre per knot span, exact since B'' is piecewise linear.  RBFs
    use the whole-line closed form.
    """
    kind = BasisKind(kind)
    if kind is BasisKind.RBF:
        h = rbf_spacing(spec)
        g = np.arange(spec.intervals)
        delta = (g[None, :] - g[:, None]).astype(float)
        d2 = delta * delta
        return math.sqrt(math.pi / 2) / h ** 3 * np.exp(-d2 / 2) * (d2 * d2 - 6 * d2 + 3)

    nodes, weights = np.polynomial.legendre.leggauss(2)
    h = spec.h
    starts = spec.lo + h * np.arange(spec.intervals)
    pts = (starts[:, None] + 0.5 * h * (nodes + 1.0)).ravel()
    w = np.tile(0.5 * h * weights, spec.intervals)
    B2 = eval_basis(spec, kind, pts, deriv=2)
    M = (B2 * w[:, None]).T @ B2
    return 0.5 * (M + M.T)
