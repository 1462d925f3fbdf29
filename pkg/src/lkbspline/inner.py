"""Inner functions of the Kolmogorov representation.

Builds the 2d+1 strictly increasing piecewise-linear maps phi_q on [0,1]
together with the weights lambda_p, so that the aggregates
psi_q(x) = sum_p lambda_p * phi_q(x_p) separate shifted families of cubes.

Geometry: family q at rank k tiles [0,1] with periods of length gamma^-k,
each split into an interval of length gamma^-k * (1 - 1/gamma) followed by
a gap of length gamma^-(k+1); family q is shifted by q * gamma^-k / (2d+1).
All endpoints live on the integer lattice Z / ((2d+1) * gamma^(K+1)), which
keeps the breakpoint set exact and deduplication deterministic.

Values are assigned top-down: rank k reassigns, inside every piece of the
coarser partition, the local rise so that a full rank-k period splits it
theta_k : (1 - theta_k) between its interval and its gap.  Deep ranks use
theta = 1/2, which pins the Hoelder exponent at log_gamma(2); ranks whose
cube count is small enough to verify are flattened much harder so that the
images of distinct rank-k cubes under psi_q stay disjoint.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (CacheInvalidError, CapacityError, ConfigError,
                     ConstructionError, DomainError)

_PRIMES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37)

#: Default cap on (#rank-k intervals)^d when enumerating cubes.
ENUM_CAP = 10 ** 6

_GOLDEN = (math.sqrt(5) - 1) / 2


def make_lambdas(d):
    """Weights lambda_1 = 1, lambda_p = 1/sqrt(prime_{p-1}) for p >= 2."""
    if d < 1:
        raise ConfigError(f"dimension must be >= 1, got {d}")
    if d > len(_PRIMES) + 1:
        raise ConfigError(f"dimension {d} beyond the supported prime table")
    lam = np.ones(d)
    for p in range(1, d):
        lam[p] = 1.0 / math.sqrt(_PRIMES[p - 1])
    return lam


def default_flatten_fractions(d, gamma, K, cap=ENUM_CAP):
    """Per-rank interval rise fractions.

    Ranks whose cube enumeration fits under `cap` get a strong flattening
    gamma^(1-d)/100 * 10^(-3(k-1)) so cube images pack disjointly; deeper
    ranks use 1/2, the ratio that realizes alpha = log_gamma(2).
    """
    out = []
    for k in range(1, K + 1):
        n_intervals = gamma ** k + 1
        if float(n_intervals) ** d <= cap:
            out.append(min(0.5, gamma ** (1.0 - d) / 100.0 * 10.0 ** (-3 * (k - 1))))
        else:
            out.append(0.5)
    return tuple(out)


@dataclass(frozen=True)
class InnerConfig:
    """Parameters of the inner-function construction."""

    d: int
    gamma: int | None = None
    K: int | None = None
    flatten: tuple[float, ...] | None = None
    jitter_scale: tuple[float, ...] | None = None
    max_retries: int = 10
    seed: int = 0
    enum_cap: int = ENUM_CAP

    def __post_init__(self):
        if self.d < 1:
            raise ConfigError(f"dimension must be >= 1, got {self.d}")
        if self.gamma is None:
            object.__setattr__(self, "gamma", 4 * self.d + 2)
        if self.gamma < 2 * self.d + 2:
            raise ConfigError(
                f"gamma must be >= 2d+2 = {2 * self.d + 2} for disjoint gaps, "
                f"got {self.gamma}")
        if self.K is None:
            object.__setattr__(self, "K", 4 if self.d <= 2 else 3)
        if self.K < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")
        if self.max_retries < 0:
            raise ConfigError("max_retries must be >= 0")
        if self.flatten is None:
            object.__setattr__(
                self, "flatten",
                default_flatten_fractions(self.d, self.gamma, self.K, self.enum_cap))
        if len(self.flatten) != self.K:
            raise ConfigError(f"flatten must have K={self.K} entries")
        if not all(0.0 < t < 1.0 for t in self.flatten):
            raise ConfigError("flatten fractions must lie in (0, 1)")
        if self.jitter_scale is None:
            object.__setattr__(
                self, "jitter_scale",
                tuple(2.0 ** (-(k + 3)) for k in range(1, self.K + 1)))
        if len(self.jitter_scale) != self.K:
            raise ConfigError(f"jitter_scale must have K={self.K} entries")

    @property
    def alpha(self):
        return math.log(2) / math.log(self.gamma)

    @property
    def n_families(self):
        return 2 * self.d + 1

    @property
    def lattice_denom(self):
        return (2 * self.d + 1) * self.gamma ** (self.K + 1)

    def key(self):
        """Canonical string identifying this config (cache keys)."""
        return ("d={d};gamma={gamma};K={K};flatten={f};jitter={j};"
                "retries={r};seed={s}").format(
                    d=self.d, gamma=self.gamma, K=self.K,
                    f=",".join(repr(t) for t in self.flatten),
                    j=",".join(repr(t) for t in self.jitter_scale),
                    r=self.max_retries, s=self.seed)


def _rank_params(cfg: InnerConfig, q, k):
    """Integer-lattice (period, gap, interval length, shift) at rank k."""
    scale = cfg.gamma ** (cfg.K + 1 - k)
    P = (2 * cfg.d + 1) * scale
    eps = P // cfg.gamma
    return P, eps, P - eps, q * scale


def rank_interval_ints(cfg: InnerConfig, q, k):
    """Nondegenerate rank-k intervals of family q on the integer lattice."""
    D = cfg.lattice_denom
    P, eps, L, s = _rank_params(cfg, q, k)
    out = []
    j = -(s // P) - 2
    while True:
        a = j * P + s
        if a > D:
            break
        lo, hi = max(a, 0), min(a + L, D)
        if hi > lo:
            out.append((lo, hi))
        j += 1
    return out


def rank_intervals(q, k, cfg: InnerConfig):
    """Rank-k closed intervals of family q within [0,1], as an (m, 2) array."""
    if not 0 <= q <= 2 * cfg.d:
        raise IndexError(f"family index q={q} out of range 0..{2 * cfg.d}")
    if not 1 <= k <= cfg.K:
        raise IndexError(f"rank k={k} out of range 1..{cfg.K}")
    ints = rank_interval_ints(cfg, q, k)
    return np.array(ints, dtype=float) / cfg.lattice_denom


def rank_gap_ints(cfg: InnerConfig, q, k):
    """Rank-k gaps (the complement pieces between intervals), integer lattice."""
    D = cfg.lattice_denom
    P, eps, L, s = _rank_params(cfg, q, k)
    out = []
    j = -(s // P) - 2
    while True:
        a = j * P + s + L
        if a > D:
            break
        lo, hi = max(a, 0), min(a + eps, D)
        if hi > lo:
            out.append((lo, hi))
        j += 1
    return out


@dataclass
class MonotonePL:
    """Strictly increasing piecewise-linear table on [0,1] with pinned ends."""

    breakpoints: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.breakpoints = np.asarray(self.breakpoints, dtype=float)
        self.values = np.asarray(self.values, dtype=float)

    def validate(self):
        x, v = self.breakpoints, self.values
        if x.ndim != 1 or x.shape != v.shape or len(x) < 2:
            raise ConfigError("table needs matching 1-d arrays of length >= 2")
        if x[0] != 0.0 or x[-1] != 1.0 or v[0] != 0.0 or v[-1] != 1.0:
            raise ConfigError("breakpoints and values must start at 0 and end at 1")
        if np.any(np.diff(x) <= 0):
            raise ConfigError("breakpoints must be strictly increasing")
        if np.any(np.diff(v) <= 0):
            raise ConfigError("values must be strictly increasing")
        return self

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if np.any(x < 0.0) or np.any(x > 1.0):
            raise DomainError("evaluation point outside [0,1]")
        return np.interp(x, self.breakpoints, self.values)


@dataclass
class InnerMap:
    """The full inner system: weights plus 2d+1 monotone tables."""

    d: int
    gamma: int
    K: int
    alpha: float
    lambdas: np.ndarray
    phi: list[MonotonePL]
    config: InnerConfig | None = None

    def __post_init__(self):
        if len(self.phi) != 2 * self.d + 1:
            raise ConfigError(
                f"expected {2 * self.d + 1} tables, got {len(self.phi)}")

    @property
    def n_families(self):
        return 2 * self.d + 1

    def key(self):
        if self.config is not None:
            return self.config.key()
        return f"loaded;d={self.d};gamma={self.gamma};K={self.K};sizes=" + \
            ",".join(str(len(t.breakpoints)) for t in self.phi)


def eval_phi(imap: InnerMap, q, x):
    """phi_q(x) by linear interpolation of the stored table."""
    if not 0 <= q <= 2 * imap.d:
        raise IndexError(f"family index q={q} out of range")
    return imap.phi[q](x)


def psi(imap: InnerMap, q, x):
    """Inner aggregate sum_p lambda_p * phi_q(x_p); x is (..., d)."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != imap.d:
        raise ValueError(f"points must have {imap.d} coordinates, got {x.shape[-1]}")
    out = np.zeros(x.shape[:-1])
    for p in range(imap.d):
        out += imap.lambdas[p] * eval_phi(imap, q, x[..., p])
    return out


def psi_axes(imap: InnerMap, q, axes):
    """psi_q on the tensor grid spanned by per-axis coordinate arrays."""
    if len(axes) != imap.d:
        raise ValueError(f"need {imap.d} axes, got {len(axes)}")
    parts = [imap.lambdas[p] * eval_phi(imap, q, np.asarray(axes[p], float))
             for p in range(imap.d)]
    grid = parts[0]
    for part in parts[1:]:
        grid = grid[..., None] + part
    return grid


def _build_table(cfg: InnerConfig, q):
    """Raw construction of one family's table (before verification)."""
    D = cfg.lattice_denom
    pts = {0, D}
    for k in range(1, cfg.K + 1):
        P, eps, L, s = _rank_params(cfg, q, k)
        j = -(s // P) - 2
        while True:
            a = j * P + s
            if a > D:
                break
            for p in (a, a + L, a + P):
                if 0 <= p <= D:
                    pts.add(p)
            j += 1
    xi = np.array(sorted(pts), dtype=np.int64)
    mids2 = xi[:-1] + xi[1:]                      # exact midpoints on 2x lattice
    lens = np.diff(xi).astype(float)
    w = lens.copy()                               # identity seed
    coarse = np.zeros(len(xi), dtype=bool)
    coarse[0] = coarse[-1] = True
    for k in range(1, cfg.K + 1):
        P, eps, L, s = _rank_params(cfg, q, k)
        theta = cfg.flatten[k - 1]
        in_interval = np.mod(mids2 - 2 * s, 2 * P) < 2 * L
        rho = np.where(in_interval, theta * eps, (1.0 - theta) * L)
        piece = np.cumsum(coarse[:-1]) - 1
        neww = w * (rho / lens)
        tot_old = np.bincount(piece, weights=w)
        tot_new = np.bincount(piece, weights=neww)
        ratio = np.divide(tot_old, tot_new,
                          out=np.ones_like(tot_old), where=tot_new > 0)
        w = neww * ratio[piece]
        on_rank = (np.mod(xi - s, P) == 0) | (np.mod(xi - s - L, P) == 0)
        coarse |= on_rank
    v = np.concatenate([[0.0], np.cumsum(w)])
    v /= v[-1]
    v[-1] = 1.0
    return MonotonePL(xi.astype(float) / D, v).validate()


def checkable_ranks(cfg: InnerConfig, cap=None):
    """Ranks k whose per-family cube count fits under the enumeration cap."""
    cap = cfg.enum_cap if cap is None else cap
    out = []
    for k in range(1, cfg.K + 1):
        n_int = len(rank_interval_ints(cfg, 0, k))
        if float(n_int) ** cfg.d <= cap:
            out.append(k)
    return out


@dataclass
class SeparationReport:
    """Outcome of the rank-k cube-image check."""

    k: int
    disjoint: dict = field(default_factory=dict)       # q -> bool
    min_multiplicity: int = 0
    violations: list = field(default_factory=list)     # (q, cube_a, cube_b)
    min_image_gap: float = math.inf

    @property
    def all_disjoint(self):
        return all(self.disjoint.values())

    def ok(self, d):
        return self.all_disjoint and self.min_multiplicity >= d + 1


def _cube_images(imap: InnerMap, cfg: InnerConfig, q, k):
    """Left/right endpoints of psi_q images of all rank-k cubes of family q.

    Returns (lo, hi, n_intervals); cube index c encodes the interval choice
    per coordinate in base n_intervals, axis 0 most significant.
    """
    D = cfg.lattice_denom
    ints = rank_interval_ints(cfg, q, k)
    a = np.array([iv[0] for iv in ints], dtype=float) / D
    b = np.array([iv[1] for iv in ints], dtype=float) / D
    va = imap.lambdas[0] * eval_phi(imap, q, a)
    vb = imap.lambdas[0] * eval_phi(imap, q, b)
    lo, hi = va, vb
    for p in range(1, imap.d):
        wa = imap.lambdas[p] * eval_phi(imap, q, a)
        wb = imap.lambdas[p] * eval_phi(imap, q, b)
        lo = (lo[:, None] + wa[None, :]).ravel()
        hi = (hi[:, None] + wb[None, :]).ravel()
    return lo, hi, len(ints)


def _min_multiplicity(imap: InnerMap, cfg: InnerConfig, k):
    """Minimum, over points of the cube, of #families covering all coordinates.

    Per axis, a coordinate excludes exactly the families whose rank-k gap
    contains it; the minimum multiplicity is 2d+1 minus the largest union of
    exclusion sets reachable with d coordinates.  Candidate coordinates are
    gap midpoints and endpoints, which meet every cell of the arrangement.
    """
    nq = imap.n_families
    D = cfg.lattice_denom
    cands = {0, D}
    gaps = {}
    for q in range(nq):
        gq = rank_gap_ints(cfg, q, k)
        gaps[q] = gq
        for lo, hi in gq:
            cands.update((lo, hi, (lo + hi) // 2))
    cands = np.array(sorted(cands), dtype=np.int64)
    masks = np.zeros(len(cands), dtype=np.int64)
    for q in range(nq):
        for lo, hi in gaps[q]:
            inside = (cands > lo) & (cands < hi)
            masks[inside] |= 1 << q
    distinct = set(int(m) for m in masks)
    # unions of up to d exclusion masks (exact: family count is tiny)
    reachable = {0}
    for _ in range(imap.d):
        reachable |= {r | m for r in reachable for m in distinct}
    worst = max(bin(r).count("1") for r in reachable)
    return nq - worst


def verify_separation(imap: InnerMap, k, cap=None, cfg: InnerConfig | None = None):
    """Check disjointness of rank-k cube images and the covering multiplicity."""
    cfg = cfg if cfg is not None else imap.config
    if cfg is None:
        raise ConfigError("verify_separation needs the construction config")
    if k > cfg.K:
        raise IndexError(f"rank {k} exceeds K={cfg.K}")
    cap = cfg.enum_cap if cap is None else cap
    n_int = len(rank_interval_ints(cfg, 0, k))
    if float(n_int) ** cfg.d > cap:
        raise CapacityError(
            f"rank {k}: {n_int}^{cfg.d} cubes exceed enumeration cap {cap}")
    report = SeparationReport(k=k)
    for q in range(imap.n_families):
        lo, hi, m = _cube_images(imap, cfg, q, k)
        order = np.argsort(lo, kind="stable")
        lo_s, hi_s = lo[order], hi[order]
        bad = np.nonzero(lo_s[1:] < hi_s[:-1])[0]
        report.disjoint[q] = len(bad) == 0
        if len(lo_s) > 1:
            report.min_image_gap = min(report.min_image_gap,
                                       float(np.min(lo_s[1:] - hi_s[:-1])))
        for i in bad:
            report.violations.append((q, int(order[i]), int(order[i + 1])))
    report.min_multiplicity = _min_multiplicity(imap, cfg, k)
    return report


def _decode_cube(cube, n_int, d):
    """Cube index -> per-axis interval indices (axis 0 most significant)."""
    out = []
    for _ in range(d):
        out.append(cube % n_int)
        cube //= n_int
    return list(reversed(out))


def _repair(imap: InnerMap, cfg: InnerConfig, k, violations, retry):
    """Shrink and nudge the plateau value blocks named in the violations."""
    n_int = len(rank_interval_ints(cfg, 0, k))
    targets = {}  # (q, interval index) -> jitter counter
    counter = 0
    for q, ca, cb in violations:
        for cube in (ca, cb):
            for idx in _decode_cube(cube, n_int, imap.d):
                key = (q, idx)
                if key not in targets:
                    targets[key] = counter
                    counter += 1
    scale = cfg.jitter_scale[k - 1]
    for (q, idx), t in sorted(targets.items()):
        table = imap.phi[q]
        ints = rank_interval_ints(cfg, q, k)
        a = ints[idx][0] / cfg.lattice_denom
        b = ints[idx][1] / cfg.lattice_denom
        x = table.breakpoints
        v = table.values
        ia = int(np.searchsorted(x, a))
        ib = int(np.searchsorted(x, b))
        if x[ia] != a or x[ib] != b:
            continue
        lo_bound = v[ia - 1] if ia > 0 else 0.0
        hi_bound = v[ib + 1] if ib + 1 < len(v) else 1.0
        va, vb = v[ia], v[ib]
        width = vb - va
        # deterministic low-discrepancy offset within the local headroom
        u = math.fmod(_GOLDEN * (t + 1) + _GOLDEN * _GOLDEN * (retry + cfg.seed), 1.0)
        head = min(va - lo_bound, hi_bound - vb)
        shift = scale * head * (2.0 * u - 1.0)
        neww = 0.25 * width
        center = 0.5 * (va + vb) + shift
        new_a = center - 0.5 * neww
        new_b = center + 0.5 * neww
        margin = 0.05 * head + 0.25 * neww
        new_a = max(new_a, lo_bound + min(margin, 0.45 * (va - lo_bound)))
        new_b = min(new_b, hi_bound - min(margin, 0.45 * (hi_bound - vb)))
        if new_b <= new_a:
            continue
        inner = slice(ia, ib + 1)
        v[inner] = new_a + (v[inner] - va) * ((new_b - new_a) / width)
    for table in imap.phi:
        table.validate()


def build_inner_functions(cfg: InnerConfig) -> InnerMap:
    """Construct, verify, and if needed repair the inner system."""
    tables = [_build_table(cfg, q) for q in range(cfg.n_families)]
    imap = InnerMap(d=cfg.d, gamma=cfg.gamma, K=cfg.K, alpha=cfg.alpha,
                    lambdas=make_lambdas(cfg.d), phi=tables, config=cfg)
    for k in checkable_ranks(cfg):
        report = verify_separation(imap, k)
        retry = 0
        while not report.ok(cfg.d):
            if retry >= cfg.max_retries:
                pair = report.violations[0] if report.violations else None
                raise ConstructionError(
                    f"separation unverifiable at rank {k} after "
                    f"{cfg.max_retries} retries (first offending pair: {pair})",
                    rank=k, cube_pair=pair)
            if not report.violations:
                # multiplicity failures cannot be jittered away: geometry issue
                raise ConstructionError(
                    f"covering multiplicity {report.min_multiplicity} < d+1 "
                    f"at rank {k}; gap geometry invalid", rank=k)
            _repair(imap, cfg, k, report.violations, retry)
            retry += 1
            report = verify_separation(imap, k)
    return imap


def holder_constant(pl: MonotonePL, alpha, pair_cap=3000):
    """max |pl(x)-pl(y)| / |x-y|^alpha over breakpoint pairs.

    Adjacent pairs are always scanned exactly; long-range pairs are scanned
    on a subsample when the table exceeds `pair_cap` points (the maximum over
    coarse pairs varies slowly, the steep local pairs dominate).
    """
    if not 0 < alpha <= 1:
        raise ConfigError(f"alpha must be in (0, 1], got {alpha}")
    x, v = pl.breakpoints, pl.values
    if len(x) < 2:
        raise ConfigError("degenerate table: need at least 2 breakpoints")
    best = float(np.max(np.diff(v) / np.diff(x) ** alpha))
    idx = np.unique(np.linspace(0, len(x) - 1, min(len(x), pair_cap)).astype(int))
    xs, vs = x[idx], v[idx]
    dx = xs[None, :] - xs[:, None]
    dv = vs[None, :] - vs[:, None]
    mask = dx > 0
    best = max(best, float(np.max(np.abs(dv[mask]) / dx[mask] ** alpha)))
    return best


def gaps_disjoint(cfg: InnerConfig, k):
    """Exact check that rank-k gaps of distinct families never intersect."""
    events = []
    for q in range(cfg.n_families):
        for lo, hi in rank_gap_ints(cfg, q, k):
            events.append((lo, hi, q))
    events.sort()
    for (lo1, hi1, q1), (lo2, hi2, q2) in zip(events, events[1:]):
        if q1 != q2 and lo2 < hi1:
            return False
    return True


def save_inner(imap: InnerMap, path):
    """Plain-text cache: header `d gamma K alpha`, then `q breakpoint value`."""
    lines = [f"{imap.d} {imap.gamma} {imap.K} {imap.alpha!r}"]
    for q, table in enumerate(imap.phi):
        for x, v in zip(table.breakpoints, table.values):
            lines.append(f"{q} {x!r} {v!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_inner(path, config: InnerConfig | None = None) -> InnerMap:
    """Load and validate a cached inner map; rejects invariant violations."""
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 4:
            raise CacheInvalidError(f"malformed header in {path}")
        d, gamma, K = int(header[0]), int(header[1]), int(header[2])
        alpha = float(header[3])
        rows = {q: ([], []) for q in range(2 * d + 1)}
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            q = int(parts[0])
            if q not in rows:
                raise CacheInvalidError(f"family index {q} out of range in {path}")
            rows[q][0].append(float(parts[1]))
            rows[q][1].append(float(parts[2]))
    tables = []
    for q in range(2 * d + 1):
        x, v = rows[q]
        try:
            tables.append(MonotonePL(np.array(x), np.array(v)).validate())
        except ConfigError as exc:
            raise CacheInvalidError(f"table q={q} in {path}: {exc}") from exc
    return InnerMap(d=d, gamma=gamma, K=K, alpha=alpha,
                    lambdas=make_lambdas(d), phi=tables, config=config)
