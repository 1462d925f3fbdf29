"""Penalized least squares denoising of KB-splines into smooth LKB-splines.

The smoother space is a tensor product of univariate clamped cubic B-splines
on [0,1] (m0 functions per axis, globally C^2).  A 2D block minimizes

    sum_i |s(x_i, y_i) - z_i|^2 + lam * E2(s),

with the thin-plate energy E2(s) = int |s_xx|^2 + 2|s_xy|^2 + |s_yy|^2,
assembled exactly from 1D derivative Gram matrices (Gauss quadrature per
polynomial piece).  For d in {4, 6} the denoising runs in stages of 2D
blocks: every later block is frozen at its grid nodes while the current
block is smoothed, which factorizes the solve into small systems.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.interpolate import BSpline

from .errors import (CacheInvalidError, CacheMissingError, ConfigError,
                     DomainError, NumericalError)
from .inner import InnerMap, psi_axes
from .kbasis import HatBasis, hat_matrix

__all__ = [
    "SmoothSpec", "TensorCoeffs", "LKBSet", "BlockOperators",
    "build_block_operators", "smooth2d", "smooth_staged", "lkb_build",
    "lkb_eval", "lkb_eval_axes", "lkb_design", "lkb_design_axes",
    "lkb_combine", "eval_tensor", "eval_tensor_axes", "save_lkb", "load_lkb",
]


@dataclass(frozen=True)
class SmoothSpec:
    """Smoother configuration: per-axis basis size, degree, grid, penalty."""

    m0: int = 17
    degree: int = 3
    n2: int = 101
    lam: float = 1.0

    def __post_init__(self):
        if self.m0 < 4:
            raise ConfigError(f"m0 must be >= 4, got {self.m0}")
        if self.degree < 2:
            raise ConfigError(f"degree must be >= 2, got {self.degree}")
        if self.m0 < self.degree + 1:
            raise ConfigError("m0 must be at least degree + 1")
        if self.n2 * self.n2 < self.m0 * self.m0:
            raise ConfigError(
                f"block must be overdetermined: n2^2={self.n2 ** 2} < "
                f"m0^2={self.m0 ** 2}")
        if not self.lam > 0:
            raise ConfigError(f"lambda must be positive, got {self.lam}")

    @classmethod
    def for_dimension(cls, d, lam=1.0):
        """Per-dimension defaults; m0 shrinks with the block sample grid."""
        if d <= 2:
            return cls(m0=17, n2=101, lam=lam)
        if d == 4:
            return cls(m0=9, n2=11, lam=lam)
        if d == 6:
            return cls(m0=5, n2=6, lam=lam)
        raise ConfigError(f"no smoothing defaults for d={d} (d must be even for d>2)")

    def key(self):
        return f"m0={self.m0};degree={self.degree};n2={self.n2};lam={self.lam!r}"


def spline_knots(spec: SmoothSpec):
    """Clamped uniform knot vector on [0,1] for m0 basis functions."""
    interior = np.linspace(0.0, 1.0, spec.m0 - spec.degree + 1)[1:-1]
    return np.concatenate([np.zeros(spec.degree + 1), interior,
                           np.ones(spec.degree + 1)])


def design_1d(spec: SmoothSpec, x):
    """Univariate B-spline collocation matrix (len(x), m0)."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0.0) or np.any(x > 1.0):
        raise DomainError("smoother evaluation points must lie in [0,1]")
    t = spline_knots(spec)
    return BSpline.design_matrix(x, t, spec.degree, extrapolate=False).toarray()


def gram_1d(spec: SmoothSpec, deriv):
    """Exact Gram matrix of deriv-th basis derivatives on [0,1]."""
    t = spline_knots(spec)
    m0 = spec.m0
    eye = np.eye(m0)
    splines = []
    for i in range(m0):
        b = BSpline(t, eye[i], spec.degree)
        splines.append(b.derivative(deriv) if deriv else b)
    npts = max(1, spec.degree - deriv + 1)   # integrand degree 2(degree-deriv)
    xg, wg = np.polynomial.legendre.leggauss(npts)
    G = np.zeros((m0, m0))
    spans = np.unique(t)
    for a, b in zip(spans[:-1], spans[1:]):
        xs = 0.5 * (b - a) * xg + 0.5 * (a + b)
        ws = 0.5 * (b - a) * wg
        vals = np.array([s(xs) for s in splines])
        G += (vals * ws) @ vals.T
    return G


@dataclass
class BlockOperators:
    """Shared 2D-block matrices: collocation A, thin-plate Gram E, and
    the factorized normal operator of the penalized solve."""

    spec: SmoothSpec
    B1: np.ndarray          # (n2, m0) univariate collocation
    A: np.ndarray           # (n2^2, m0^2) tensor collocation
    E: np.ndarray           # (m0^2, m0^2) thin-plate energy Gram
    M: np.ndarray           # (m0^2, m0^2) mass Gram (for the joint 4D penalty)
    cho: tuple              # Cholesky factor of A^T A + lam E

    @property
    def grid(self):
        return np.linspace(0.0, 1.0, self.spec.n2)


def build_block_operators(spec: SmoothSpec) -> BlockOperators:
    """Assemble the 2D collocation matrix and the exact thin-plate Gram."""
    x = np.linspace(0.0, 1.0, spec.n2)
    B1 = design_1d(spec, x)
    G0 = gram_1d(spec, 0)
    G1 = gram_1d(spec, 1)
    G2 = gram_1d(spec, 2)
    E = np.kron(G2, G0) + 2.0 * np.kron(G1, G1) + np.kron(G0, G2)
    M = np.kron(G0, G0)
    A = np.kron(B1, B1)
    BtB = B1.T @ B1
    H = np.kron(BtB, BtB) + spec.lam * E
    try:
        cho = sla.cho_factor(H)
    except sla.LinAlgError as exc:
        cond = np.linalg.cond(H)
        raise NumericalError(
            f"penalized normal system not positive definite "
            f"(cond ~ {cond:.2e}): {exc}") from exc
    return BlockOperators(spec=spec, B1=B1, A=A, E=E, M=M, cho=cho)


@dataclass
class TensorCoeffs:
    """Dense coefficient tensor of a tensor-product spline."""

    shape: tuple[int, ...]
    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.coeffs.size != int(np.prod(self.shape)):
            raise ConfigError("coefficient count does not match shape")
        if not np.all(np.isfinite(self.coeffs)):
            raise ConfigError("coefficients must be finite")

    @property
    def tensor(self):
        return self.coeffs.reshape(self.shape)


def _smooth2d_batch(ops: BlockOperators, Z):
    """Solve the penalized system for a batch of sample matrices.

    Z has shape (batch, n2, n2); returns (batch, m0, m0).
    """
    B1 = ops.B1
    m0 = ops.spec.m0
    rhs = np.einsum("pa,bpq,qc->bac", B1, Z, B1, optimize=True)
    flat = rhs.reshape(len(Z), m0 * m0).T
    C = sla.cho_solve(ops.cho, flat)
    return C.T.reshape(len(Z), m0, m0)


def smooth2d(z, spec_or_ops) -> TensorCoeffs:
    """Minimize sum |s(x_i,y_i) - z_i|^2 + lam E2(s) over the block grid.

    z holds samples on the n2 x n2 tensor grid (row-major over (x, y)).
    """
    ops = spec_or_ops if isinstance(spec_or_ops, BlockOperators) \
        else build_block_operators(spec_or_ops)
    n2, m0 = ops.spec.n2, ops.spec.m0
    z = np.asarray(z, dtype=float)
    if z.size != n2 * n2:
        raise ValueError(f"expected {n2 * n2} samples, got {z.size}")
    if not np.all(np.isfinite(z)):
        raise ValueError("samples must be finite")
    if not z.any():
        return TensorCoeffs((m0, m0), np.zeros((m0, m0)))
    C = _smooth2d_batch(ops, z.reshape(1, n2, n2))[0]
    return TensorCoeffs((m0, m0), C)


def smooth_staged(z, spec: SmoothSpec, d, ops: BlockOperators | None = None) \
        -> TensorCoeffs:
    """Stage-wise tensor-product denoising over 2D blocks.

    d must be even; coordinates are blocked in input order ((x1,x2), (x3,x4),
    ...).  Stage s smooths its block on every slice with all later blocks
    frozen at grid nodes, so a d-dimensional problem costs d/2 sweeps of
    small 2D solves instead of one joint solve.
    """
    if d == 2:
        return smooth2d(z, ops if ops is not None else spec)
    if d % 2 != 0:
        raise ConfigError(f"staged smoothing needs even d, got {d}")
    ops = ops if ops is not None else build_block_operators(spec)
    n2, m0 = spec.n2, spec.m0
    nblocks = d // 2
    z = np.asarray(z, dtype=float)
    if z.size != n2 ** d:
        raise ValueError(f"expected {n2 ** d} samples, got {z.size}")
    if not z.any():
        return TensorCoeffs((m0,) * d, np.zeros((m0,) * d))
    # smoother as one matrix: coeffs = S @ samples per block
    S = sla.cho_solve(ops.cho, ops.A.T)            # (m0^2, n2^2)
    cur = z.reshape((n2 * n2,) * nblocks)
    for b in range(nblocks):
        cur = np.moveaxis(np.tensordot(S, cur, axes=(1, b)), 0, b)
    return TensorCoeffs((m0,) * d, cur.reshape((m0,) * d))


def _provenance(imap: InnerMap, basis: HatBasis, spec: SmoothSpec):
    text = f"{imap.key()}|n={basis.n}|{spec.key()}"
    return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class LKBSet:
    """Denoised LKB basis: one coefficient tensor per hat index j."""

    d: int
    n: int
    spec: SmoothSpec
    coeffs: np.ndarray          # (dn, m0^d)
    provenance: str

    @property
    def size(self):
        return self.d * self.n

    @property
    def tensor_shape(self):
        return (self.spec.m0,) * self.d

    def member(self, j) -> TensorCoeffs:
        if not 0 <= j < self.size:
            raise IndexError(f"basis index {j} out of range 0..{self.size - 1}")
        return TensorCoeffs(self.tensor_shape, self.coeffs[j].copy())


def lkb_build(imap: InnerMap, basis: HatBasis, spec: SmoothSpec | None = None) \
        -> LKBSet:
    """Sample every KB basis function on the block grid and denoise it."""
    if basis.d != imap.d:
        raise ConfigError("inner map and hat basis disagree on dimension")
    d = imap.d
    if d != 2 and d % 2 != 0:
        raise ConfigError(f"denoising supports d=2 and even d, got {d}")
    spec = spec if spec is not None else SmoothSpec.for_dimension(d)
    ops = build_block_operators(spec)
    ax = np.linspace(0.0, 1.0, spec.n2)
    dn = basis.size
    npts = spec.n2 ** d
    KB = np.zeros((npts, dn))
    for q in range(imap.n_families):
        KB += hat_matrix(basis, psi_axes(imap, q, [ax] * d).ravel())
    nonzero = np.abs(KB).max(axis=0) > 0.0
    coeffs = np.zeros((dn, spec.m0 ** d))
    if d == 2:
        Z = KB.T[nonzero].reshape(-1, spec.n2, spec.n2)
        C = _smooth2d_batch(ops, Z)
        coeffs[nonzero] = C.reshape(len(Z), -1)
    else:
        S = sla.cho_solve(ops.cho, ops.A.T)
        nblocks = d // 2
        for j in np.nonzero(nonzero)[0]:
            cur = KB[:, j].reshape((spec.n2 ** 2,) * nblocks)
            for b in range(nblocks):
                cur = np.moveaxis(np.tensordot(S, cur, axes=(1, b)), 0, b)
            coeffs[j] = cur.ravel()
    return LKBSet(d=d, n=basis.n, spec=spec, coeffs=coeffs,
                  provenance=_provenance(imap, basis, spec))


_AXES_LETTERS = "abcdef"


def eval_tensor(tc_or_array, spec: SmoothSpec, x):
    """Evaluate a coefficient tensor at points x of shape (N, d)."""
    C = tc_or_array.tensor if isinstance(tc_or_array, TensorCoeffs) \
        else np.asarray(tc_or_array)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    d = x.shape[1]
    designs = [design_1d(spec, x[:, p]) for p in range(d)]
    letters = _AXES_LETTERS[:d]
    sub = letters + "," + ",".join(f"n{c}" for c in letters) + "->n"
    return np.einsum(sub, C, *designs, optimize=True)


def eval_tensor_axes(tc_or_array, spec: SmoothSpec, axes):
    """Evaluate a coefficient tensor over a tensor grid; returns the grid."""
    C = tc_or_array.tensor if isinstance(tc_or_array, TensorCoeffs) \
        else np.asarray(tc_or_array)
    out = C
    for p, ax in enumerate(axes):
        B = design_1d(spec, np.asarray(ax, dtype=float))
        out = np.moveaxis(np.tensordot(B, out, axes=(1, p)), 0, p)
    return out


def lkb_eval(lkb: LKBSet, j, x):
    """LKB_{n,j} at points x (stable tensor-product B-spline evaluation)."""
    vals = eval_tensor(lkb.member(j), lkb.spec, x)
    return vals if np.ndim(x) > 1 else float(vals[0])


def lkb_eval_axes(lkb: LKBSet, j, axes):
    return eval_tensor_axes(lkb.member(j), lkb.spec, axes)


def lkb_design(lkb: LKBSet, x):
    """Design matrix of all LKB members at points x: (N, dn)."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != lkb.d:
        raise ValueError(f"points must be (N, {lkb.d})")
    designs = [design_1d(lkb.spec, x[:, p]) for p in range(lkb.d)]
    T = lkb.coeffs.reshape((lkb.size,) + lkb.tensor_shape)
    letters = _AXES_LETTERS[:lkb.d]
    sub = "j" + letters + "," + ",".join(f"n{c}" for c in letters) + "->nj"
    return np.einsum(sub, T, *designs, optimize=True)


def lkb_design_axes(lkb: LKBSet, axes):
    """Design matrix over a tensor grid (rows lexicographic): (prod(g), dn)."""
    if len(axes) != lkb.d:
        raise ValueError(f"need {lkb.d} axes")
    out = lkb.coeffs.reshape((lkb.size,) + lkb.tensor_shape)
    for p, ax in enumerate(axes):
        B = design_1d(lkb.spec, np.asarray(ax, dtype=float))
        out = np.moveaxis(np.tensordot(B, out, axes=(1, p + 1)), 0, p + 1)
    return out.reshape(lkb.size, -1).T


def lkb_combine(lkb: LKBSet, coefficients) -> TensorCoeffs:
    """Coefficient tensor of sum_j c_j LKB_{n,j} (a single spline)."""
    c = np.asarray(coefficients, dtype=float)
    if c.shape != (lkb.size,):
        raise ValueError(f"need {lkb.size} coefficients")
    return TensorCoeffs(lkb.tensor_shape, c @ lkb.coeffs)


# ---------------------------------------------------------------- caching

_MAGIC = b"LKBSET1\n"


def save_lkb(lkb: LKBSet, path):
    """Binary cache: magic, JSON header line, raw float64 tensors j-major."""
    header = {
        "d": lkb.d, "n": lkb.n, "m0": lkb.spec.m0, "degree": lkb.spec.degree,
        "n2": lkb.spec.n2, "lam": lkb.spec.lam, "dn": lkb.size,
        "stage_shape": list(lkb.tensor_shape), "provenance": lkb.provenance,
    }
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC)
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
        fh.write(np.ascontiguousarray(lkb.coeffs, dtype=np.float64).tobytes())
    os.replace(tmp, path)
    index = os.fspath(path) + ".index.csv"
    with open(index, "w") as fh:
        fh.write("j,max_abs_coeff,l2_norm\n")
        for j in range(lkb.size):
            row = lkb.coeffs[j]
            fh.write(f"{j},{np.abs(row).max():.17g},{np.linalg.norm(row):.17g}\n")


def load_lkb(path, expect_provenance=None) -> LKBSet:
    if not os.path.exists(path):
        raise CacheMissingError(f"LKB cache not found: {path}")
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise CacheInvalidError(f"{path} is not an LKB cache")
        header = json.loads(fh.readline().decode())
        raw = fh.read()
    spec = SmoothSpec(m0=header["m0"], degree=header["degree"],
                      n2=header["n2"], lam=header["lam"])
    dn = header["dn"]
    coeffs = np.frombuffer(raw, dtype=np.float64).reshape(dn, -1).copy()
    if coeffs.shape[1] != spec.m0 ** header["d"]:
        raise CacheInvalidError(f"{path}: coefficient block size mismatch")
    if expect_provenance is not None and header["provenance"] != expect_provenance:
        raise CacheInvalidError(
            f"{path}: provenance {header['provenance']} does not match "
            f"requested configuration {expect_provenance}")
    return LKBSet(d=header["d"], n=header["n"], spec=spec, coeffs=coeffs,
                  provenance=header["provenance"])
