"""Hat basis on [0, d], KB-spline basis functions, and reference operators.

The hat basis has dn knots t_j = j/n (0-based j = 0..dn-1) with spacing 1/n,
so the last knot sits at d - 1/n.  The last hat is clamped to 1 on
[t_{dn-1}, d], which makes the partition of unity exact on all of [0, d]
even though the aggregate psi_q can exceed the last knot.

KB_{n,j}(x) = sum_q hat_j(psi_q(x)); substituting the linear interpolant of
an outer function g for the hats yields the approximant
KB(f)_n(x) = sum_q L_g(psi_q(x)).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import comb

from .errors import ConfigError, DomainError
from .inner import InnerMap, psi, psi_axes

__all__ = [
    "HatBasis", "hat_eval", "hat_matrix", "interpolation_nodes",
    "linear_interpolant", "kb_eval", "kb_design", "kb_design_axes",
    "kbf_eval", "kolmogorov_monomial", "bernstein_1d", "bernstein_tensor",
]


@dataclass(frozen=True)
class HatBasis:
    """Uniform linear B-spline (hat) basis on [0, d] with dn knots."""

    n: int
    d: int

    def __post_init__(self):
        if self.n < 1 or self.d < 1:
            raise ConfigError("HatBasis needs n >= 1 and d >= 1")

    @property
    def size(self):
        return self.d * self.n

    @property
    def knots(self):
        return np.arange(self.size) / self.n


def _check_domain(basis: HatBasis, t):
    t = np.asarray(t, dtype=float)
    if np.any(t < 0.0) or np.any(t > basis.d):
        raise DomainError(f"argument outside [0, {basis.d}]")
    return t


def hat_matrix(basis: HatBasis, t):
    """All hat values at points t, shape (len(t), dn); two nonzeros per row."""
    t = _check_domain(basis, np.atleast_1d(t))
    dn = basis.size
    u = t * basis.n
    j = np.floor(u).astype(int)
    frac = u - j
    out = np.zeros((len(t), dn))
    clamp = u >= dn - 1          # right clamp: b_{dn-1} == 1 on [t_{dn-1}, d]
    rows = np.nonzero(~clamp)[0]
    jj, ff = j[rows], frac[rows]
    out[rows, jj] = 1.0 - ff
    out[rows, jj + 1] = ff
    out[clamp, dn - 1] = 1.0
    return out


def hat_eval(basis: HatBasis, j, t):
    """Hat j at t: peak 1 at knot t_j, linear on both sides of width 1/n."""
    if not 0 <= j < basis.size:
        raise IndexError(f"hat index {j} out of range 0..{basis.size - 1}")
    t = _check_domain(basis, t)
    if j == basis.size - 1:
        up = np.clip((t - (j - 1) / basis.n) * basis.n, 0.0, 1.0)
        return up  # stays 1 on [t_{dn-1}, d]
    left = (t - (j - 1) / basis.n) * basis.n
    right = ((j + 1) / basis.n - t) * basis.n
    return np.maximum(0.0, np.minimum(left, right).clip(max=1.0))


def interpolation_nodes(basis: HatBasis):
    """Nodes of the outer interpolant: the dn knots plus the endpoint d."""
    return np.concatenate([basis.knots, [float(basis.d)]])


def linear_interpolant(g_values, basis: HatBasis, t):
    """Piecewise-linear interpolant through (nodes, g_values) at t."""
    nodes = interpolation_nodes(basis)
    g_values = np.asarray(g_values, dtype=float)
    if g_values.shape != nodes.shape:
        raise ValueError(f"need {len(nodes)} node values, got {g_values.shape}")
    t = _check_domain(basis, t)
    return np.interp(t, nodes, g_values)


def kb_eval(imap: InnerMap, basis: HatBasis, j, x):
    """KB_{n,j}(x) = sum_q hat_j(psi_q(x)); x is (..., d)."""
    x = np.asarray(x, dtype=float)
    out = np.zeros(x.shape[:-1])
    for q in range(imap.n_families):
        out += hat_eval(basis, j, psi(imap, q, x))
    return out


def kb_design(imap: InnerMap, basis: HatBasis, x):
    """All KB values at points x: matrix (npoints, dn)."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != imap.d:
        raise ValueError(f"points must be (N, {imap.d})")
    out = np.zeros((len(x), basis.size))
    for q in range(imap.n_families):
        out += hat_matrix(basis, psi(imap, q, x))
    return out


def kb_design_axes(imap: InnerMap, basis: HatBasis, axes):
    """KB design matrix over a tensor grid, rows in lexicographic order."""
    npts = int(np.prod([len(a) for a in axes]))
    out = np.zeros((npts, basis.size))
    for q in range(imap.n_families):
        out += hat_matrix(basis, psi_axes(imap, q, axes).ravel())
    return out


def kbf_eval(imap: InnerMap, basis: HatBasis, g, x):
    """KB(f)_n(x) = sum_q L_g(psi_q(x)) for an outer function g on [0, d]."""
    nodes = interpolation_nodes(basis)
    gv = np.asarray([g(t) for t in nodes], dtype=float)
    x = np.asarray(x, dtype=float)
    out = np.zeros(x.shape[:-1])
    for q in range(imap.n_families):
        out += np.interp(psi(imap, q, x), nodes, gv)
    return out


def kolmogorov_monomial(imap: InnerMap, m, x):
    """sum_q psi_q(x)^m; degree-m Kolmogorov monomial."""
    if m < 0:
        raise ConfigError(f"degree must be >= 0, got {m}")
    x = np.asarray(x, dtype=float)
    out = np.zeros(x.shape[:-1])
    for q in range(imap.n_families):
        out += psi(imap, q, x) ** m
    return out


def bernstein_1d(f, n, x):
    """Degree-n Bernstein operator of a univariate f, evaluated at x."""
    if n < 1:
        raise ConfigError(f"degree must be >= 1, got {n}")
    x = np.asarray(x, dtype=float)
    i = np.arange(n + 1)
    fv = np.asarray([f(v) for v in i / n], dtype=float)
    basis = comb(n, i) * x[..., None] ** i * (1 - x[..., None]) ** (n - i)
    return basis @ fv


def bernstein_tensor(f, n, x):
    """Tensor-product Bernstein operator B_{n,...,n} f at a point x in [0,1]^d.

    Reference smoother for tests: direct summation over the (n+1)^d grid.
    """
    if n < 1:
        raise ConfigError(f"degree must be >= 1, got {n}")
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("bernstein_tensor evaluates one point at a time")
    d = len(x)
    i = np.arange(n + 1)
    axes1d = [comb(n, i) * x[p] ** i * (1 - x[p]) ** (n - i) for p in range(d)]
    grid = np.stack(np.meshgrid(*([i / n] * d), indexing="ij"), axis=-1)
    out = np.asarray(f(grid), dtype=float)
    for p in range(d):
        out = np.tensordot(axes1d[p], out, axes=(0, 0))
    return float(out)
