"""Special-function kernel for the cap-harmonic basis.

Implements the Gauss hypergeometric function 2F1, the gamma function,
fractional-degree associated Legendre functions (ALFs), and the
asymptotic Schmidt semi-normalisation factor.

The 2F1 evaluator is two-path: a truncated Taylor series when it
converges without destructive cancellation, otherwise adaptive
Dormand-Prince (RK5(4)) integration of the hypergeometric ODE

    z (1 - z) F'' + [c - (a + b + 1) z] F' - a b F = 0

from z = 0 with exact initial conditions F(0) = 1, F'(0) = a b / c.
All evaluations here are real: the arguments that arise from cap
harmonics are a = m - l, b = m + l + 1, c = m + 1, z = (1 - x) / 2
with l >= 0 real, m >= 0 integer and x = cos(theta) in (-1, 1].

Everything in this module is pure and reentrant; batched entry points
exist because eigenvalue scans and basis evaluations need the same
(a, b, c) families at thousands of points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, NoConvergence

# Supported cap half-angle range; outside it the hypergeometric argument
# approaches the singular points of the ODE.
THETA_C_MIN = math.pi / 36.0
THETA_C_MAX = 5.0 * math.pi / 6.0

M_MAX = 100

TAYLOR_MAX_TERMS = 500
TAYLOR_TOL = 1e-14
# Largest tolerated ratio max|term| / |sum| before the Taylor path is
# considered cancellation-poisoned and the ODE path takes over.
TAYLOR_CANCEL_LIMIT = 1e6

# Tighter than the nominal 1e-10/1e-12 working pair: global error over a
# long oscillatory integration drifts ~30x above the local tolerance, and
# the evaluation contract is 1e-9 relative.
ODE_RTOL = 1e-12
ODE_ATOL = 1e-14

_LANCZOS_G = 7.0
_LANCZOS_COEF = (
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
)


def _lanczos_core(x):
    # valid for x >= 0.5; returns log Gamma(x)
    x = x - 1.0
    acc = _LANCZOS_COEF[0]
    for i, coef in enumerate(_LANCZOS_COEF[1:], start=1):
        acc += coef / (x + i)
    t = x + _LANCZOS_G + 0.5
    return 0.5 * math.log(2.0 * math.pi) + (x + 0.5) * math.log(t) - t + math.log(acc)


def lgamma_sign(x: float) -> tuple[float, float]:
    """Return (log |Gamma(x)|, sign of Gamma(x)).

    Sign 0.0 marks a pole (x a non-positive integer), where 1/Gamma = 0.
    """
    if x >= 0.5:
        return _lanczos_core(x), 1.0
    s = math.sin(math.pi * x)
    if s == 0.0 or x == math.floor(x):
        return math.inf, 0.0
    # reflection: Gamma(x) Gamma(1-x) = pi / sin(pi x)
    lg = math.log(math.pi) - math.log(abs(s)) - _lanczos_core(1.0 - x)
    return lg, math.copysign(1.0, s)


def gamma(x: float) -> float:
    """Gamma function via the Lanczos approximation (g = 7, 9 coefficients)."""
    lg, sign = lgamma_sign(x)
    if sign == 0.0:
        raise DomainError(f"gamma pole at x = {x}")
    if lg > 709.0:
        raise OverflowError(f"gamma({x}) exceeds the floating range")
    return sign * math.exp(lg)


def _check_hyp_args(c: float, z) -> None:
    if c <= 0.0 and c == math.floor(c):
        raise DomainError(f"c = {c} is a non-positive integer")
    z = np.asarray(z, dtype=float)
    if np.any(z < 0.0) or np.any(z >= 1.0):
        raise DomainError("z must lie in [0, 1)")


# ---------------------------------------------------------------------------
# Taylor path
# ---------------------------------------------------------------------------


def _taylor_batch(a, b, c, z):
    """Vectorised Taylor sums for column parameters (a, b, c) at points z.

    Returns (values (M, N), ok (N,)) where ok flags columns whose series
    converged within TAYLOR_MAX_TERMS at every z without exceeding the
    cancellation limit.
    """
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    c = np.asarray(c, float)
    z = np.asarray(z, float)
    n_col = a.size
    n_z = z.size
    term = np.ones((n_z, n_col))
    total = np.ones((n_z, n_col))
    peak = np.ones((n_z, n_col))
    converged = np.zeros((n_z, n_col), dtype=bool)
    zc = z[:, None]
    for n in range(TAYLOR_MAX_TERMS):
        ratio = (a + n) * (b + n) / ((c + n) * (n + 1.0))
        term = term * ratio * zc
        total += term
        np.maximum(peak, np.abs(term), out=peak)
        converged |= np.abs(term) <= TAYLOR_TOL * np.maximum(np.abs(total), 1e-300)
        if converged.all():
            break
    amplification = peak / np.maximum(np.abs(total), 1e-300)
    ok = converged.all(axis=0) & (amplification < TAYLOR_CANCEL_LIMIT).all(axis=0)
    return total, ok


def _taylor_predictor(a, b, z_max):
    """Cheap bound on the cancellation exponent of the Taylor series."""
    growth = np.sqrt(np.maximum(-np.asarray(a, float), 0.0)
                     * np.maximum(np.abs(np.asarray(b, float)), 1.0) * z_max)
    return 2.0 * growth


# ---------------------------------------------------------------------------
# Dormand-Prince path
# ---------------------------------------------------------------------------

_DP_C = (0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0)
_DP_A = (
    (0.2,),
    (3.0 / 40.0, 9.0 / 40.0),
    (44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0),
    (19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0),
    (9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0),
    (35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0),
)
_DP_B5 = np.array([35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0,
                   -2187.0 / 6784.0, 11.0 / 84.0, 0.0])
_DP_B4 = np.array([5179.0 / 57600.0, 0.0, 7571.0 / 16695.0, 393.0 / 640.0,
                   -92097.0 / 339200.0, 187.0 / 2100.0, 1.0 / 40.0])

_H_MIN = 1e-15


def _series_with_derivative(a, b, c, z):
    """Taylor values (F, F') at one small z where the series is unconditional.

    Used to step off the ODE's singular point at z = 0: the caller
    guarantees |a b z| << 1, so a few geometric terms reach machine
    precision for every column.
    """
    term = np.ones_like(a)
    total = np.ones_like(a)
    deriv = np.zeros_like(a)
    for n in range(120):
        dterm = term * (a + n) * (b + n) / ((c + n) * (n + 1.0))
        deriv += dterm * (n + 1.0)
        term = dterm * z
        total += term
        if np.all(np.abs(term) <= 1e-17 * np.maximum(np.abs(total), 1e-300)):
            break
    return total, deriv


def _ode_profile(a, b, c, z_targets, rtol=ODE_RTOL, atol=ODE_ATOL,
                 record_derivative=False):
    """Integrate the hypergeometric ODE for a batch of (a, b, c) columns.

    ``z_targets`` must be sorted ascending, unique, inside [0, 1).  Returns
    the matrix F (len(z_targets), len(a)); with ``record_derivative`` a
    second matrix of F' values is returned too.

    Initial data is the exact F(0) = 1, F'(0) = ab/c, continued off the
    singular point z = 0 by the (there unconditionally convergent) series;
    the Dormand-Prince sweep starts from that foothold.  Without it the
    0/0 structure of the right-hand side at z -> 0 amplifies rounding
    noise in the shared-step error estimate of wide batches.
    """
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    c = np.asarray(c, float)
    z_targets = np.asarray(z_targets, float)
    n = a.size
    m = z_targets.size
    out = np.empty((m, n))
    out_d = np.empty((m, n)) if record_derivative else None

    ab = a * b
    apb1 = a + b + 1.0
    lim0 = (a + 1.0) * (b + 1.0) / (c + 1.0)

    def rhs(z, y):
        if z <= 0.0:
            fpp = lim0 * y[1]
        else:
            fpp = (ab * y[0] - (c - apb1 * z) * y[1]) / (z * (1.0 - z))
        return np.stack((y[1], fpp))

    idx = 0
    while idx < m and z_targets[idx] <= 0.0:
        out[idx] = 1.0
        if record_derivative:
            out_d[idx] = ab / c
        idx += 1
    if idx >= m:
        return (out, out_d) if record_derivative else out

    z0 = min(1e-3, 0.01 / (1.0 + float(np.max(np.abs(ab)))))
    while idx < m and z_targets[idx] <= z0:
        f_t, fp_t = _series_with_derivative(a, b, c, float(z_targets[idx]))
        out[idx] = f_t
        if record_derivative:
            out_d[idx] = fp_t
        idx += 1
    if idx >= m:
        return (out, out_d) if record_derivative else out

    f0, fp0 = _series_with_derivative(a, b, c, z0)
    y = np.stack((f0, fp0))
    z = z0
    k1 = rhs(z, y)
    h = min(1e-3, max(z0, 1e-6))
    while idx < m:
        target = float(z_targets[idx])
        h_trial = h
        hit = z + h >= target
        h_use = target - z if hit else h
        if h_use <= 0.0:
            h_use = _H_MIN
        ks = [k1]
        for i in range(5):
            zi = z + _DP_C[i + 1] * h_use
            yi = y + h_use * sum(aij * kj for aij, kj in zip(_DP_A[i], ks))
            ks.append(rhs(zi, yi))
        y5 = y + h_use * sum(bj * kj for bj, kj in zip(_DP_B5[:6], ks))
        k7 = rhs(z + h_use, y5)
        ks.append(k7)
        y4 = y + h_use * sum(bj * kj for bj, kj in zip(_DP_B4, ks))
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y5))
        err = float(np.max(np.abs(y5 - y4) / scale))
        if err <= 1.0:
            z = target if hit else z + h_use
            y = y5
            k1 = k7
            factor = 5.0 if err == 0.0 else min(5.0, max(0.2, 0.9 * err ** -0.2))
            h = min(h_use * factor, 0.1)
            if hit:
                out[idx] = y[0]
                if record_derivative:
                    out_d[idx] = y[1]
                idx += 1
                # a step capped to land on a target says nothing against
                # the natural step size; keep it
                h = max(h, h_trial)
            h = max(h, _H_MIN)
        else:
            h = h_use * min(1.0, max(0.2, 0.9 * err ** -0.2))
            if h < _H_MIN:
                raise NoConvergence(
                    f"Dormand-Prince step underflow at z = {z:.3e}")
    return (out, out_d) if record_derivative else out


# ---------------------------------------------------------------------------
# Public 2F1 entry points
# ---------------------------------------------------------------------------


def hyp2f1(a: float, b: float, c: float, z: float) -> float:
    """Gauss hypergeometric 2F1(a, b; c; z) for real arguments, z in [0, 1).

    Tries the truncated Taylor series first; falls back to Dormand-Prince
    integration of the hypergeometric ODE when the series fails to converge
    cleanly within TAYLOR_MAX_TERMS terms.
    """
    _check_hyp_args(c, z)
    if z == 0.0:
        return 1.0
    values, ok = _taylor_batch([a], [b], [c], [z])
    if ok[0]:
        return float(values[0, 0])
    profile = _ode_profile(np.array([a]), np.array([b]), np.array([c]),
                           np.array([z]))
    return float(profile[0, 0])


def hyp2f1_taylor(a: float, b: float, c: float, z: float) -> float:
    """Taylor-path evaluation only; NoConvergence when the guard rejects it."""
    _check_hyp_args(c, z)
    values, ok = _taylor_batch([a], [b], [c], [z])
    if not ok[0]:
        raise NoConvergence("Taylor series rejected (divergent or cancellation)")
    return float(values[0, 0])


def hyp2f1_ode(a: float, b: float, c: float, z: float,
               rtol: float = ODE_RTOL, atol: float = ODE_ATOL) -> float:
    """ODE-path evaluation only (always applicable for z in [0, 1))."""
    _check_hyp_args(c, z)
    if z == 0.0:
        return 1.0
    profile = _ode_profile(np.array([a]), np.array([b]), np.array([c]),
                           np.array([z]), rtol=rtol, atol=atol)
    return float(profile[0, 0])


def hyp2f1_profile(a, b, c, z_targets, rtol=ODE_RTOL, atol=ODE_ATOL):
    """Batched 2F1 over column parameters (a, b, c) and shared points z.

    Returns a matrix of shape (len(z_targets), len(a)).  Columns whose
    Taylor series passes the cancellation guard use the series; the rest
    share one batched ODE sweep.  ``z_targets`` may be unsorted.
    """
    a = np.atleast_1d(np.asarray(a, float))
    b = np.atleast_1d(np.asarray(b, float))
    c = np.atleast_1d(np.asarray(c, float))
    for ci in np.unique(c):
        _check_hyp_args(float(ci), 0.0)
    z = np.atleast_1d(np.asarray(z_targets, float))
    if np.any(z < 0.0) or np.any(z >= 1.0):
        raise DomainError("z targets must lie in [0, 1)")
    order = np.argsort(z, kind="stable")
    z_sorted, first_pos = np.unique(z[order], return_index=True)
    out = np.empty((z.size, a.size))

    predictor = _taylor_predictor(a, b, float(z_sorted[-1]) if z_sorted.size else 0.0)
    try_taylor = predictor < 14.0
    unique_vals = np.empty((z_sorted.size, a.size))
    pending = np.ones(a.size, dtype=bool)
    if np.any(try_taylor):
        vals, ok = _taylor_batch(a[try_taylor], b[try_taylor], c[try_taylor],
                                 z_sorted)
        cols = np.flatnonzero(try_taylor)[ok]
        unique_vals[:, cols] = vals[:, ok]
        pending[cols] = False
    if np.any(pending):
        unique_vals[:, pending] = _ode_profile(a[pending], b[pending],
                                               c[pending], z_sorted,
                                               rtol=rtol, atol=atol)
    inverse = np.searchsorted(z_sorted, z)
    out[:] = unique_vals[inverse]
    return out


# ---------------------------------------------------------------------------
# Associated Legendre functions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AlfQuery:
    """Arguments of one associated-Legendre evaluation."""

    degree: float
    order: int
    x: float

    def __post_init__(self):
        if not math.isfinite(self.degree) or self.degree < 0.0:
            raise DomainError(f"degree must be finite and >= 0, got {self.degree}")
        if self.order < 0 or self.order > M_MAX:
            raise DomainError(f"order must be in [0, {M_MAX}], got {self.order}")
        if not (-1.0 < self.x <= 1.0):
            raise DomainError(f"x must lie in (-1, 1], got {self.x}")


@dataclass(frozen=True)
class NormFactor:
    """Schmidt semi-normalisation factor with its internal terms.

    ``ratio_factor`` is the asymptotic correction the source formula also
    calls "k"; renamed here to avoid colliding with the harmonic index k.
    """

    value: float
    ratio_factor: float | None = None
    p: float | None = None
    e1: float | None = None
    e2: float | None = None


def legendre_f(l: float, m: int, x: float) -> float:
    """Hypergeometric core F(l, m, x) = 2F1(m-l, m+l+1; m+1; (1-x)/2)."""
    return hyp2f1(m - l, m + l + 1.0, m + 1.0, (1.0 - x) / 2.0)


def legendre_f_batch(l_values, m: int, x: float, rtol=ODE_RTOL, atol=ODE_ATOL):
    """F(l, m, x) for an array of degrees at one fixed x."""
    l_values = np.atleast_1d(np.asarray(l_values, float))
    profile = hyp2f1_profile(m - l_values, m + l_values + 1.0,
                             np.full(l_values.size, m + 1.0),
                             np.array([(1.0 - x) / 2.0]), rtol=rtol, atol=atol)
    return profile[0]


def alf(query: AlfQuery) -> float:
    """Fractional-degree associated Legendre function P^m_l(x).

    Follows the hypergeometric definition directly, which carries no
    Condon-Shortley phase: for integer degrees the result equals the
    classical (phase-bearing) polynomial times (-1)^m.
    """
    l, m, x = query.degree, query.order, query.x
    lg_num, s_num = lgamma_sign(l + m + 1.0)
    lg_den, s_den = lgamma_sign(l - m + 1.0)
    if s_den == 0.0:
        return 0.0
    log_pref = lg_num - lg_den - m * math.log(2.0) - _lanczos_core(m + 1.0)
    if log_pref > 700.0:
        raise OverflowError(
            f"gamma ratio overflows for degree {l}, order {m}")
    core = legendre_f(l, m, x)
    return s_num * s_den * math.exp(log_pref) * (1.0 - x * x) ** (m / 2.0) * core


def norm_factor(l: float, m: int) -> NormFactor:
    """Asymptotic Schmidt semi-normalisation factor K^m_l (Haines form).

    K = 1 for m = 0.  For m >= 1 (requires l > m):

        K = ratio_factor * 2^-m / sqrt(m pi) * ((l+m)/(l-m))^(l/2 + 1/4)
        ratio_factor = p^(m/2) * exp(e1 + e2),  p = (l/m)^2
        e1 = -(1 + 1/p) / (12 m)
        e2 = (1 + 3/p^2 + 4/p^3) / (360 m^3)
    """
    if m == 0:
        return NormFactor(1.0)
    if m < 0:
        raise DomainError(f"order must be >= 0, got {m}")
    if l <= m:
        raise DomainError(f"norm_factor requires l > m for m >= 1 "
                          f"(got l = {l}, m = {m})")
    p = (l / m) ** 2
    e1 = -(1.0 + 1.0 / p) / (12.0 * m)
    e2 = (1.0 + 3.0 / p ** 2 + 4.0 / p ** 3) / (360.0 * m ** 3)
    log_ratio = m * math.log(l / m) + e1 + e2
    log_k = (log_ratio - m * math.log(2.0) - 0.5 * math.log(m * math.pi)
             + (l / 2.0 + 0.25) * (math.log(l + m) - math.log(l - m)))
    if log_k > 709.0:
        raise OverflowError(f"normalisation overflows for l = {l}, m = {m}")
    return NormFactor(math.exp(log_k), math.exp(log_ratio), p, e1, e2)


def normalized_alf(query: AlfQuery) -> float:
    """Schmidt semi-normalised ALF: K^m_l (1-x^2)^(m/2) F(l, m, x)."""
    l, m, x = query.degree, query.order, query.x
    k = norm_factor(l, m).value
    return k * (1.0 - x * x) ** (m / 2.0) * legendre_f(l, m, x)


def normalized_alf_matrix(degrees, orders, x_values, rtol=ODE_RTOL,
                          atol=ODE_ATOL):
    """Columns of normalised ALFs over shared sample points.

    ``degrees`` and ``orders`` are parallel arrays describing one column
    each; the result has shape (len(x_values), len(degrees)).
    """
    degrees = np.atleast_1d(np.asarray(degrees, float))
    orders = np.atleast_1d(np.asarray(orders, int))
    x_values = np.atleast_1d(np.asarray(x_values, float))
    z = (1.0 - x_values) / 2.0
    core = hyp2f1_profile(orders - degrees, orders + degrees + 1.0,
                          orders + 1.0, z, rtol=rtol, atol=atol)
    k_values = np.array([norm_factor(float(l), int(m)).value
                         for l, m in zip(degrees, orders)])
    sin_pow = (1.0 - x_values * x_values)[:, None] ** (orders[None, :] / 2.0)
    return core * sin_pow * k_values[None, :]
