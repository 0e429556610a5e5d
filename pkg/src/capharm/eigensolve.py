"""Sturm-Liouville eigenvalue solver for the cap-harmonic degrees.

For a cap of half-angle theta_c the fractional degrees l(m)_k are the
roots, in l, of the rim boundary condition at x_c = cos(theta_c):

    even set (Neumann):   l x_c F(l, m, x_c) - (l - m) F(l-1, m, x_c) = 0
    odd  set (Dirichlet):  F(l, m, x_c) = 0

with F(l, m, x) = 2F1(m-l, m+l+1; m+1; (1-x)/2).  Roots are located by a
stepping scan with sign-change bracketing (plus a tangency guard for
near-grazing minima) and polished with Mueller's method.

Two table layouts are produced from the same root sequences:

* ``indexing="parity"``: the j-th root of one boundary condition sits at
  k = m + 2(j-1) (even set) or k = m + 2j - 1 (odd set), so a table holds
  only the keys with k - m matching its parity.  At theta_c = pi/2 these
  tables reduce to the classical integer degrees l(m)_k = k.
* ``indexing="dense"``: consecutive roots of the *even* boundary
  condition fill every k = m, m+1, ..., k_max.  This is the layout the
  expansion and reconstruction pipeline consumes, since the even set
  alone carries arbitrary rim values.

Scans are evaluated at a loose integrator tolerance (bracketing only
needs reliable signs); the Mueller polish re-evaluates residuals at a
tight tolerance so cached roots satisfy |residual| < EPS_ROOT.
"""

from __future__ import annotations

import hashlib
import math
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import ChecksumMismatch, DomainError, IoError, RootMissed
from .hyperfun import THETA_C_MAX, THETA_C_MIN, hyp2f1_profile, legendre_f

EVEN = "even"
ODD = "odd"

K_MAX_LIMIT = 60
EPS_ROOT = 1e-10
EPS_DUP = 1e-6
MUELLER_MAX_ITER = 60
TANGENCY_DIP = 1e-4

_SCAN_RTOL, _SCAN_ATOL = 1e-6, 1e-9
_REFINE_RTOL, _REFINE_ATOL = 1e-8, 1e-11
_POLISH_RTOL, _POLISH_ATOL = 1e-12, 1e-14

_CACHE_MAGIC = "capharm-eigentable"
_CACHE_VERSION = 1


def scan_step(theta_c: float) -> float:
    """Scan step Delta-l, an exact divisor of 1 at or below min(0.1, theta_c/pi)."""
    target = min(0.1, theta_c / math.pi)
    return 1.0 / math.ceil(1.0 / target)


def _check_theta_c(theta_c: float) -> None:
    if not (THETA_C_MIN <= theta_c <= THETA_C_MAX):
        raise DomainError(
            f"theta_c = {theta_c} outside supported range "
            f"[{THETA_C_MIN:.6f}, {THETA_C_MAX:.6f}]")


@dataclass(frozen=True)
class EigenTable:
    """Degrees l(m)_k for one cap half-angle and boundary-condition set."""

    theta_c: float
    parity: str
    k_max: int
    degrees: dict = field(repr=False)
    indexing: str = "parity"

    def __post_init__(self):
        if self.parity not in (EVEN, ODD):
            raise DomainError(f"parity must be 'even' or 'odd', got {self.parity}")
        if self.indexing not in ("parity", "dense"):
            raise DomainError(f"indexing must be 'parity' or 'dense', got {self.indexing}")

    def degree(self, m: int, k: int) -> float:
        return self.degrees[(m, k)]

    def has(self, m: int, k: int) -> bool:
        return (m, k) in self.degrees

    def keys(self):
        return sorted(self.degrees.keys())

    def covers_expansion(self, k_max: int) -> bool:
        """True when the table can back a dense (k_max+1)^2-column basis."""
        if self.indexing != "dense" or self.parity != EVEN or self.k_max < k_max:
            return False
        return all((m, k) in self.degrees
                   for k in range(k_max + 1) for m in range(k + 1))

    def trimmed(self, k_max: int) -> "EigenTable":
        degrees = {(m, k): l for (m, k), l in self.degrees.items() if k <= k_max}
        return EigenTable(self.theta_c, self.parity, k_max, degrees, self.indexing)


# ---------------------------------------------------------------------------
# Boundary-condition residuals
# ---------------------------------------------------------------------------


def boundary_residual_even(l: float, m: int, x_c: float) -> float:
    """Neumann-set residual; zero exactly at even-set eigenvalues."""
    f_l = legendre_f(l, m, x_c)
    f_lm1 = legendre_f(l - 1.0, m, x_c)
    return l * x_c * f_l - (l - m) * f_lm1


def boundary_residual_odd(l: float, m: int, x_c: float) -> float:
    """Dirichlet-set residual; zero exactly at odd-set eigenvalues."""
    return legendre_f(l, m, x_c)


def _residual_many(l_values, m_values, x_c, parity, rtol, atol):
    """Batched residuals for paired arrays of degrees and orders."""
    l_values = np.asarray(l_values, float)
    m_values = np.asarray(m_values, float)
    z = np.array([(1.0 - x_c) / 2.0])
    if parity == ODD:
        prof = hyp2f1_profile(m_values - l_values, m_values + l_values + 1.0,
                              m_values + 1.0, z, rtol=rtol, atol=atol)
        return prof[0]
    a = np.concatenate([m_values - l_values, m_values - l_values + 1.0])
    b = np.concatenate([m_values + l_values + 1.0, m_values + l_values])
    c = np.concatenate([m_values + 1.0, m_values + 1.0])
    prof = hyp2f1_profile(a, b, c, z, rtol=rtol, atol=atol)[0]
    n = l_values.size
    f_l, f_lm1 = prof[:n], prof[n:]
    return l_values * x_c * f_l - (l_values - m_values) * f_lm1


# ---------------------------------------------------------------------------
# Root scan
# ---------------------------------------------------------------------------


def _subdivide(theta_c, m, lo, hi, f_lo, f_hi, parity, points=33,
               rtol=_REFINE_RTOL, atol=_REFINE_ATOL):
    """Shrink a sign-change bracket by scanning an interior subgrid."""
    grid = np.linspace(lo, hi, points)
    vals = _residual_many(grid, np.full(points, m), math.cos(theta_c),
                          parity, rtol, atol)
    vals[0], vals[-1] = f_lo, f_hi
    signs = np.sign(vals)
    signs[signs == 0.0] = 1.0
    flips = np.flatnonzero(signs[:-1] * signs[1:] < 0.0)
    i = int(flips[0]) if flips.size else 0
    return grid[i], grid[i + 1], vals[i], vals[i + 1]


def _scan_items(theta_c, parity, m, count):
    """Locate the first `count` roots for one order as brackets/directs.

    Returns a list of ("direct", l, ...) or ("bracket", lo, hi, f_lo, f_hi)
    entries in ascending root order.
    """
    x_c = math.cos(theta_c)
    dl = scan_step(theta_c)
    spacing = math.pi / theta_c
    items = []
    if parity == EVEN and m == 0:
        # the k = m = 0 breathing root is identically l = 0
        items.append(("direct", 0.0))
        if count == 1:
            return items
    # scan start: below the hemisphere the residual is single-signed on
    # [0, m), so starting at m is safe; for caps beyond the hemisphere the
    # first root may undercut m
    if x_c < 0.0:
        l_start = 0.0
    elif parity == EVEN and m == 0:
        l_start = dl
    else:
        l_start = float(m)
    first_allow = (m + 2.0) / theta_c * 1.05
    scan_end = max(first_allow, l_start) + spacing * (count + 1.5)
    hard_end = max(first_allow, l_start) + spacing * (count + 4.0) * 1.6 + 10.0

    def try_append(item):
        # a root on a grid point shows up both as a bracket and as a
        # grid zero; per-parity roots are many scan steps apart
        hint = _item_root_hint(item)
        if items and abs(hint - _item_root_hint(items[-1])) < 2.0 * dl:
            return
        items.append(item)

    prev_l = None
    prev_f = None
    chunk_lo = l_start
    scale = 1.0
    while len(items) < count:
        if chunk_lo >= hard_end:
            raise RootMissed(
                f"scan budget exhausted for m = {m} ({parity} set, "
                f"theta_c = {theta_c:.6f}); found {len(items)} of {count} roots",
                m=m, k=None)
        chunk_hi = min(chunk_lo + 4.0 * spacing, hard_end)
        n_pts = max(int(round((chunk_hi - chunk_lo) / dl)), 2)
        grid = chunk_lo + dl * np.arange(n_pts + 1)
        vals = _residual_many(grid, np.full(grid.size, m), x_c, parity,
                              _SCAN_RTOL, _SCAN_ATOL)
        scale = max(scale, float(np.max(np.abs(vals))))
        if prev_l is not None:
            grid = np.concatenate([[prev_l], grid])
            vals = np.concatenate([[prev_f], vals])
        for i in range(len(grid) - 1):
            if len(items) >= count:
                break
            l0, l1 = float(grid[i]), float(grid[i + 1])
            f0, f1 = float(vals[i]), float(vals[i + 1])
            if abs(f0) < 1e-12 * scale:
                try_append(("direct", l0))
                continue
            if f0 * f1 < 0.0:
                lo, hi, flo, fhi = _subdivide(theta_c, m, l0, l1, f0, f1, parity)
                lo, hi, flo, fhi = _subdivide(theta_c, m, lo, hi, flo, fhi, parity)
                try_append(("bracket", lo, hi, flo, fhi))
                continue
            # tangency guard: near-zero dip without a sign change
            if (i >= 1 and abs(f0) < TANGENCY_DIP * max(1.0, scale)
                    and abs(f0) < abs(f1) and abs(f0) < abs(vals[i - 1])):
                fine = np.arange(grid[i - 1], l1, dl / 100.0)
                fv = _residual_many(fine, np.full(fine.size, m), x_c, parity,
                                    _REFINE_RTOL, _REFINE_ATOL)
                signs = np.sign(fv)
                signs[signs == 0.0] = 1.0
                flips = np.flatnonzero(signs[:-1] * signs[1:] < 0.0)
                for j in flips[:2]:
                    try_append(("bracket", float(fine[j]), float(fine[j + 1]),
                                float(fv[j]), float(fv[j + 1])))
        prev_l, prev_f = float(grid[-1]), float(vals[-1])
        chunk_lo = prev_l
        if chunk_lo > scan_end and len(items) < count:
            scan_end = hard_end
    return items[:count]


def _item_root_hint(item):
    return item[1] if item[0] == "direct" else 0.5 * (item[1] + item[2])


# ---------------------------------------------------------------------------
# Mueller polish
# ---------------------------------------------------------------------------


def _polish_batch(theta_c, parity, m_arr, lo, hi, f_lo, f_hi):
    """Polish sign-change brackets with Mueller's method, batched.

    Returns the polished roots; raises RootMissed when any bracket fails
    to reach |residual| < EPS_ROOT within MUELLER_MAX_ITER iterations.
    """
    x_c = math.cos(theta_c)
    n = len(m_arr)
    if n == 0:
        return np.empty(0)
    m_arr = np.asarray(m_arr, float)
    lo = np.asarray(lo, float).copy()
    hi = np.asarray(hi, float).copy()
    f_lo = np.asarray(f_lo, float).copy()
    f_hi = np.asarray(f_hi, float).copy()

    mid = 0.5 * (lo + hi)
    f_mid = _residual_many(mid, m_arr, x_c, parity, _POLISH_RTOL, _POLISH_ATOL)
    x0, x1, x2 = lo.copy(), mid, hi.copy()
    f0, f1, f2 = f_lo.copy(), f_mid, f_hi.copy()

    roots = np.full(n, np.nan)
    resid = np.full(n, np.inf)
    active = np.arange(n)
    # a midpoint may already satisfy the tolerance
    done = np.abs(f1) < EPS_ROOT
    roots[active[done]] = x1[done]
    resid[active[done]] = np.abs(f1[done])
    keep = ~done
    active, x0, x1, x2 = active[keep], x0[keep], x1[keep], x2[keep]
    f0, f1, f2 = f0[keep], f1[keep], f2[keep]
    lo, hi, f_lo, f_hi = lo[keep], hi[keep], f_lo[keep], f_hi[keep]

    for _ in range(MUELLER_MAX_ITER):
        if active.size == 0:
            break
        h1 = x1 - x0
        h2 = x2 - x1
        with np.errstate(divide="ignore", invalid="ignore"):
            d1 = (f1 - f0) / h1
            d2 = (f2 - f1) / h2
            a_coef = (d2 - d1) / (h2 + h1)
            b_coef = a_coef * h2 + d2
            disc = b_coef * b_coef - 4.0 * a_coef * f2
            sq = np.sqrt(np.maximum(disc, 0.0))
            den_plus = b_coef + sq
            den_minus = b_coef - sq
            den = np.where(np.abs(den_plus) >= np.abs(den_minus),
                           den_plus, den_minus)
            x3 = x2 - 2.0 * f2 / den
        bad = (~np.isfinite(x3)) | (disc < 0.0) | (x3 <= lo) | (x3 >= hi)
        x3 = np.where(bad, 0.5 * (lo + hi), x3)
        f3 = _residual_many(x3, m_arr[active], x_c, parity,
                            _POLISH_RTOL, _POLISH_ATOL)
        same_side = np.sign(f3) == np.sign(f_lo)
        lo = np.where(same_side, x3, lo)
        f_lo = np.where(same_side, f3, f_lo)
        hi = np.where(same_side, hi, x3)
        f_hi = np.where(same_side, f_hi, f3)
        x0, x1, x2 = x1, x2, x3
        f0, f1, f2 = f1, f2, f3
        done = (np.abs(f3) < EPS_ROOT) | (hi - lo < 1e-13)
        roots[active[done]] = x3[done]
        resid[active[done]] = np.abs(f3[done])
        keep = ~done
        active, x0, x1, x2 = active[keep], x0[keep], x1[keep], x2[keep]
        f0, f1, f2 = f0[keep], f1[keep], f2[keep]
        lo, hi, f_lo, f_hi = lo[keep], hi[keep], f_lo[keep], f_hi[keep]

    if active.size:
        raise RootMissed(
            f"Mueller polish failed for {active.size} bracket(s) "
            f"({parity} set, theta_c = {theta_c:.6f})", m=int(m_arr[active[0]]))
    over = resid >= EPS_ROOT
    if np.any(over):
        raise RootMissed(
            f"{int(np.sum(over))} root(s) stalled above the residual "
            f"tolerance ({parity} set, theta_c = {theta_c:.6f})")
    return roots


# ---------------------------------------------------------------------------
# Table assembly
# ---------------------------------------------------------------------------


def _keys_for(parity, indexing, m, k_max):
    if indexing == "dense":
        return list(range(m, k_max + 1))
    start = m if parity == EVEN else m + 1
    return list(range(start, k_max + 1, 2))


def _solve_table(theta_c, parity, k_max, indexing, orders=None):
    _check_theta_c(theta_c)
    if not (0 <= k_max <= K_MAX_LIMIT):
        raise DomainError(f"k_max must be in [0, {K_MAX_LIMIT}], got {k_max}")
    order_list = list(orders) if orders is not None else list(range(k_max + 1))
    degrees = {}
    jobs_m, jobs_key, jobs_bracket = [], [], []
    for m in order_list:
        ks = _keys_for(parity, indexing, m, k_max)
        if not ks:
            continue
        items = _scan_items(theta_c, parity, m, len(ks))
        for k, item in zip(ks, items):
            if item[0] == "direct":
                root = item[1]
                if m >= 1 and 0.0 < m - root < 1e-9:
                    root = m + 1e-12
                degrees[(m, k)] = root
            else:
                jobs_m.append(m)
                jobs_key.append((m, k))
                jobs_bracket.append(item[1:])
    if jobs_m:
        lo, hi, flo, fhi = (np.array(v) for v in zip(*jobs_bracket))
        roots = _polish_batch(theta_c, parity, jobs_m, lo, hi, flo, fhi)
        for key, root in zip(jobs_key, roots):
            m = key[0]
            # guard the normalisation pole: hemisphere sectoral roots land
            # at l = m up to polish noise, keep them infinitesimally above
            if m >= 1 and 0.0 < m - root < 1e-9:
                root = m + 1e-12
            degrees[key] = float(root)
    for m in order_list:
        ks = _keys_for(parity, indexing, m, k_max)
        seq = [degrees[(m, k)] for k in ks if (m, k) in degrees]
        for r0, r1 in zip(seq, seq[1:]):
            if r1 - r0 < EPS_DUP:
                raise RootMissed(
                    f"duplicate roots {r0:.9f}, {r1:.9f} at m = {m}", m=m)
    return EigenTable(theta_c, parity, k_max, degrees, indexing)


def solve_eigentable(theta_c: float, parity: str, k_max: int,
                     cache_dir=None, orders=None) -> EigenTable:
    """Solve the parity-indexed degree table l(m)_k.

    The j-th root above the scan start lands at k = m + 2(j - 1) for the
    even set and k = m + 2j - 1 for the odd set, so the table carries only
    keys with k - m matching the parity.  ``orders`` restricts the solve
    to selected m (partial tables are not cached).
    """
    if parity not in (EVEN, ODD):
        raise DomainError(f"parity must be 'even' or 'odd', got {parity}")
    if cache_dir is not None and orders is None:
        cached = load_cached(theta_c, parity, k_max, cache_dir)
        if cached is not None:
            return cached
    table = _solve_table(theta_c, parity, k_max, "parity", orders=orders)
    if cache_dir is not None and orders is None:
        cache_eigentable(table, cache_dir)
    return table


def solve_expansion_table(theta_c: float, k_max: int, cache_dir=None) -> EigenTable:
    """Solve the dense even-set table used by expansion and reconstruction.

    Consecutive Neumann roots fill every k = m..k_max, giving the
    (k_max+1)^2 degrees behind the full basis-matrix column set.
    """
    if cache_dir is not None:
        cached = load_cached(theta_c, EVEN, k_max, cache_dir, indexing="dense")
        if cached is not None:
            return cached
    table = _solve_table(theta_c, EVEN, k_max, "dense")
    if cache_dir is not None:
        cache_eigentable(table, cache_dir)
    return table


# ---------------------------------------------------------------------------
# Cache
# ---------------------------------------------------------------------------


def _cache_name(theta_c, parity, indexing, k_max):
    return f"eig_{theta_c:.12f}_{parity}_{indexing}_k{k_max}.txt"


def _table_body(table: EigenTable) -> str:
    lines = [
        f"{_CACHE_MAGIC} {_CACHE_VERSION}",
        f"theta_c {table.theta_c!r}",
        f"parity {table.parity}",
        f"indexing {table.indexing}",
        f"k_max {table.k_max}",
        f"count {len(table.degrees)}",
    ]
    for (m, k) in table.keys():
        lines.append(f"{m} {k} {table.degrees[(m, k)]:.17g}")
    return "\n".join(lines) + "\n"


def cache_eigentable(table: EigenTable, cache_dir) -> str:
    """Write the table atomically (temp file + rename) with a checksum."""
    os.makedirs(cache_dir, exist_ok=True)
    body = _table_body(table)
    digest = hashlib.sha256(body.encode()).hexdigest()
    path = os.path.join(cache_dir, _cache_name(table.theta_c, table.parity,
                                               table.indexing, table.k_max))
    try:
        fd, tmp = tempfile.mkstemp(dir=cache_dir, suffix=".tmp")
        with os.fdopen(fd, "w") as fh:
            fh.write(body)
            fh.write(f"checksum {digest}\n")
        os.replace(tmp, path)
    except OSError as exc:
        raise IoError(f"cannot write eigentable cache: {exc}") from exc
    return path


def _parse_cache(text: str) -> EigenTable:
    lines = text.splitlines()
    if len(lines) < 7 or not lines[0].startswith(_CACHE_MAGIC):
        raise ChecksumMismatch("not a capharm eigentable file")
    if not lines[-1].startswith("checksum "):
        raise ChecksumMismatch("missing checksum record")
    digest = lines[-1].split()[1]
    body = "\n".join(lines[:-1]) + "\n"
    if hashlib.sha256(body.encode()).hexdigest() != digest:
        raise ChecksumMismatch("eigentable cache is corrupted")
    header = dict(line.split(None, 1) for line in lines[1:6])
    theta_c = float(header["theta_c"])
    parity = header["parity"]
    indexing = header["indexing"]
    k_max = int(header["k_max"])
    count = int(header["count"])
    degrees = {}
    for line in lines[6:6 + count]:
        m_s, k_s, l_s = line.split()
        degrees[(int(m_s), int(k_s))] = float(l_s)
    return EigenTable(theta_c, parity, k_max, degrees, indexing)


def load_cached(theta_c: float, parity: str, k_max: int, cache_dir,
                indexing: str = "parity") -> EigenTable | None:
    """Load a cached table covering (theta_c, parity, k_max), or None.

    A cached table with a larger k_max satisfies the request (trimmed);
    a smaller one is a miss, triggering recompute-and-extend upstream.
    """
    if cache_dir is None or not os.path.isdir(cache_dir):
        return None
    key = round(theta_c, 12)
    exact = os.path.join(cache_dir, _cache_name(key, parity, indexing, k_max))
    candidates = []
    if os.path.exists(exact):
        candidates.append((k_max, exact))
    else:
        prefix = f"eig_{key:.12f}_{parity}_{indexing}_k"
        for name in os.listdir(cache_dir):
            if name.startswith(prefix) and name.endswith(".txt"):
                try:
                    cached_k = int(name[len(prefix):-4])
                except ValueError:
                    continue
                if cached_k >= k_max:
                    candidates.append((cached_k, os.path.join(cache_dir, name)))
    if not candidates:
        return None
    candidates.sort()
    path = candidates[0][1]
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read eigentable cache: {exc}") from exc
    table = _parse_cache(text)
    if table.k_max > k_max:
        table = table.trimmed(k_max)
    return table


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------

_LOG_FLOOR = 1e-16


def dump_eigen_diagnostics(theta_c: float, parity: str, k_max: int,
                           cache_dir=None) -> dict:
    """Machine-readable residual-scan and root tables for plotting.

    Per order m: the scan grid, log10 |residual| on it (clamped at a
    floor so values stay finite), the first root (the end of the low-l
    plateau), and the root list.  ``grid_table`` is a dense
    (k_max+1) x (k_max+1) array with 0.0 wherever the table has no entry
    (m > k, or k - m of the other parity).
    """
    table = solve_eigentable(theta_c, parity, k_max, cache_dir=cache_dir)
    x_c = math.cos(theta_c)
    dl = scan_step(theta_c)
    orders = []
    for m in range(k_max + 1):
        roots = [table.degrees[(m, k)] for k in _keys_for(parity, "parity", m, k_max)
                 if (m, k) in table.degrees]
        if roots:
            grid = np.arange(max(0.0, m if x_c >= 0.0 else 0.0),
                             roots[-1] + 2.0 * dl, dl)
            vals = _residual_many(grid, np.full(grid.size, m), x_c, parity,
                                  _SCAN_RTOL, _SCAN_ATOL)
            log_mag = np.log10(np.maximum(np.abs(vals), _LOG_FLOOR))
        else:
            grid = np.empty(0)
            log_mag = np.empty(0)
        orders.append({
            "m": m,
            "grid_l": grid.tolist(),
            "log10_residual": log_mag.tolist(),
            "first_root": roots[0] if roots else None,
            "roots": roots,
        })
    grid_table = np.zeros((k_max + 1, k_max + 1))
    for (m, k), l in table.degrees.items():
        grid_table[m, k] = l
    return {
        "theta_c": theta_c,
        "parity": parity,
        "k_max": k_max,
        "scan_step": dl,
        "orders": orders,
        "grid_table": grid_table.tolist(),
    }
