"""Cap-harmonic basis evaluation, coefficient fitting and reconstruction.

The basis column for (m >= 0, k) is

    C^m_k(theta, phi) = Pbar^m_{l(m)_k}(cos theta) * exp(i m phi)

with degrees drawn from the dense even-set table (Neumann rim condition,
consecutive roots at k = m, m+1, ...); negative orders are the phase-
conjugated copies C^-m_k = (-1)^m conj(C^m_k).  Columns are laid out by
the index bijection j(m, k) = k^2 + k + m over -k <= m <= k.

Coefficients solve min ||B q - V|| per Cartesian channel on the
mean-centered vertex matrix via an orthogonal (SVD) factorisation with
column equilibration; the normal-equations form (B^T B)^-1 B^T V is the
mathematical contract, not the algorithm.  The k = m = 0 row is the
patch centroid and is zeroed after fitting for location invariance.

Reconstruction sample grids are geodesic domes: an area-preserving
square-to-disk grid, Delaunay-triangulated, rescaled by
r_l = sqrt(2 (1 - cos theta_c)) and lifted to the cap by the inverse
Lambert azimuthal projection (mirrored so the pole sits at +z).
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import Delaunay

from .capmap import CapParam
from .eigensolve import EigenTable
from .errors import (DomainError, EigenTableMismatch, IoError,
                     IllConditionedWarning, OversamplingWarning, ParseError,
                     Underdetermined)
from .hyperfun import normalized_alf_matrix
from .meshkit import TriMesh, center_on_mean

OVERSAMPLING_TARGET = 4.0
CONDITION_WARN = 1e8


def j_index(m: int, k: int) -> int:
    """Column index j(m, k) = k^2 + k + m for -k <= m <= k."""
    if abs(m) > k:
        raise DomainError(f"|m| = {abs(m)} exceeds k = {k}")
    return k * k + k + m


def index_to_mk(j: int) -> tuple[int, int]:
    k = int(math.isqrt(j))
    m = j - k * k - k
    return m, k


def n_columns(k_max: int) -> int:
    return (k_max + 1) ** 2


@dataclass(frozen=True)
class SchBasisMatrix:
    """Dense complex basis-function matrix: rows = samples, cols = j(m, k)."""

    values: np.ndarray
    theta_c: float
    k_max: int
    parity: str = "even"


@dataclass(frozen=True)
class SchCoefficients:
    """Complex coefficient matrix, one column per Cartesian channel."""

    theta_c: float
    k_max: int
    q: np.ndarray  # ((k_max+1)^2, 3) complex
    centroid: np.ndarray  # (3,)
    parity: str = "even"

    def __post_init__(self):
        if self.q.shape != (n_columns(self.k_max), 3):
            raise DomainError(
                f"coefficient matrix must be {n_columns(self.k_max)} x 3")

    def row(self, m: int, k: int) -> np.ndarray:
        return self.q[j_index(m, k)]

    def band_mask(self, k_min: int, k_max: int) -> np.ndarray:
        mask = np.zeros(len(self.q), dtype=bool)
        for k in range(k_min, k_max + 1):
            mask[j_index(-k, k):j_index(k, k) + 1] = True
        return mask


@dataclass(frozen=True)
class GeodesicDome:
    """Near-uniform triangulation of the unit cap used for reconstruction."""

    mesh: TriMesh
    theta_c: float
    resolution: int

    def cap_param(self) -> CapParam:
        v = self.mesh.vertices
        theta = np.arccos(np.clip(v[:, 2], -1.0, 1.0))
        theta = np.minimum(theta, self.theta_c)
        phi = np.mod(np.arctan2(v[:, 1], v[:, 0]), 2.0 * math.pi)
        return CapParam(self.theta_c, theta, phi, self.mesh.checksum())


# ---------------------------------------------------------------------------
# Basis evaluation
# ---------------------------------------------------------------------------


def _check_table(theta_c: float, eig: EigenTable, k_max: int) -> None:
    if abs(eig.theta_c - theta_c) > 1e-9:
        raise EigenTableMismatch(
            f"table theta_c = {eig.theta_c} does not match {theta_c}")
    if not eig.covers_expansion(k_max):
        raise EigenTableMismatch(
            f"table (parity={eig.parity}, indexing={eig.indexing}, "
            f"k_max={eig.k_max}) does not cover a dense basis up to k = {k_max}")


def eval_basis(theta_c: float, eig: EigenTable, k_max: int, theta, phi,
               k_min: int = 0) -> SchBasisMatrix:
    """Evaluate basis columns j(m, k) for k in [k_min, k_max] at (theta, phi).

    Columns outside the requested band are zero, so the matrix shape is
    always (n_points, (k_max+1)^2) and the index bijection holds.
    """
    _check_table(theta_c, eig, k_max)
    theta = np.atleast_1d(np.asarray(theta, float))
    phi = np.atleast_1d(np.asarray(phi, float))
    if np.any(theta < 0.0) or np.any(theta > theta_c + 1e-9):
        raise DomainError("sample theta outside [0, theta_c]")
    pairs = [(m, k) for k in range(k_min, k_max + 1) for m in range(k + 1)]
    degrees = np.array([eig.degree(m, k) for m, k in pairs])
    orders = np.array([m for m, _ in pairs])
    profiles = normalized_alf_matrix(degrees, orders, np.cos(theta))
    values = np.zeros((theta.size, n_columns(k_max)), dtype=complex)
    for col, (m, k) in enumerate(pairs):
        pos = profiles[:, col] * np.exp(1j * m * phi)
        values[:, j_index(m, k)] = pos
        if m > 0:
            values[:, j_index(-m, k)] = (-1) ** m * np.conj(pos)
    return SchBasisMatrix(values, theta_c, k_max)


# ---------------------------------------------------------------------------
# Least-squares expansion
# ---------------------------------------------------------------------------


def conjugate_asymmetry(coeffs: SchCoefficients) -> float:
    """Relative deviation from the real-signal symmetry q^-m = (-1)^m conj(q^m)."""
    total = 0.0
    norm = 0.0
    for k in range(coeffs.k_max + 1):
        for m in range(1, k + 1):
            qp = coeffs.row(m, k)
            qm = coeffs.row(-m, k)
            total += float(np.sum(np.abs(qm - (-1) ** m * np.conj(qp)) ** 2))
            norm += float(np.sum(np.abs(qp) ** 2 + np.abs(qm) ** 2))
    return math.sqrt(total / norm) if norm > 0.0 else 0.0


def fit_coefficients(mesh: TriMesh, cap: CapParam, k_max: int,
                     eig: EigenTable) -> tuple[SchCoefficients, dict]:
    """Least-squares expansion of the mean-centered vertex signals.

    Returns the coefficients and a diagnostics record with the basis
    condition estimate, the oversampling ratio and the conjugate-symmetry
    asymmetry of the fitted rows.
    """
    if cap.n_vertices != mesh.n_vertices:
        raise DomainError("cap parameterisation does not pair with the mesh")
    if cap.mesh_checksum != mesh.checksum():
        warnings.warn("cap parameterisation checksum differs from the mesh",
                      UserWarning, stacklevel=2)
    cols = n_columns(k_max)
    n_v = mesh.n_vertices
    if n_v <= cols:
        raise Underdetermined(
            f"{n_v} vertices cannot determine {cols} coefficients")
    if n_v < OVERSAMPLING_TARGET * cols:
        warnings.warn(
            f"vertex count {n_v} below {OVERSAMPLING_TARGET}x oversampling "
            f"of {cols} coefficients", OversamplingWarning, stacklevel=2)
    centered, centroid = center_on_mean(mesh)
    basis = eval_basis(cap.theta_c, eig, k_max, cap.theta, cap.phi)
    b_mat = basis.values
    scale = np.linalg.norm(b_mat, axis=0)
    scale[scale == 0.0] = 1.0
    q_scaled, _, rank, sv = np.linalg.lstsq(b_mat / scale, centered.vertices,
                                            rcond=None)
    q = q_scaled / scale[:, None]
    condition = float(sv[0] / sv[-1]) if sv[-1] > 0.0 else math.inf
    if condition > CONDITION_WARN:
        warnings.warn(f"basis condition estimate {condition:.3e}",
                      IllConditionedWarning, stacklevel=2)
    q[0] = 0.0  # breathing mode carries the centroid; zeroed for invariance
    coeffs = SchCoefficients(cap.theta_c, k_max, q, np.asarray(centroid))
    diagnostics = {
        "condition": condition,
        "rank": int(rank),
        "oversampling": n_v / cols,
        "conjugate_asymmetry": conjugate_asymmetry(coeffs),
    }
    return coeffs, diagnostics


def reconstruct(coeffs: SchCoefficients, eig: EigenTable, theta, phi,
                k_min: int = 0, k_max: int | None = None,
                include_centroid: bool = True) -> np.ndarray:
    """Evaluate the truncated series at (theta, phi); real part per channel.

    ``k_min``/``k_max`` select a sub-band of indices (the rectangular
    spectral window); the stored centroid is added back unless disabled.
    """
    band_hi = coeffs.k_max if k_max is None else k_max
    if band_hi > coeffs.k_max or k_min < 0 or k_min > band_hi:
        raise DomainError(f"band [{k_min}, {band_hi}] outside [0, {coeffs.k_max}]")
    basis = eval_basis(coeffs.theta_c, eig, band_hi, theta, phi, k_min=k_min)
    out = np.real(basis.values @ coeffs.q[:n_columns(band_hi)])
    if include_centroid:
        out = out + coeffs.centroid
    return out


# ---------------------------------------------------------------------------
# Geodesic domes
# ---------------------------------------------------------------------------


def rosca_square_to_disk(points: np.ndarray) -> np.ndarray:
    """Area-preserving map of the square [-1, 1]^2 onto the unit disk."""
    x = points[:, 0]
    y = points[:, 1]
    u = np.zeros_like(x)
    v = np.zeros_like(y)
    first = (np.abs(x) >= np.abs(y)) & (x != 0.0)
    t = np.zeros_like(x)
    t[first] = math.pi * y[first] / (4.0 * x[first])
    u[first] = x[first] * np.cos(t[first])
    v[first] = x[first] * np.sin(t[first])
    second = (~first) & (y != 0.0)
    t[second] = math.pi * x[second] / (4.0 * y[second])
    u[second] = y[second] * np.sin(t[second])
    v[second] = y[second] * np.cos(t[second])
    return np.column_stack((u, v))


def lambert_scale(theta_c: float) -> float:
    """Disk rescale factor giving the cap the correct area under the lift."""
    return math.sqrt(2.0 * (1.0 - math.cos(theta_c)))


def inv_lambert(points: np.ndarray) -> np.ndarray:
    """Inverse Lambert azimuthal equal-area lift, mirrored to the +z pole.

    The equal-area chart lands the disk center on the south pole; the
    final z sign is flipped so domes sit around +z like every other cap
    object here.
    """
    x = points[:, 0]
    y = points[:, 1]
    s = x * x + y * y
    root = np.sqrt(np.maximum(1.0 - s / 4.0, 0.0))
    return np.column_stack((root * x, root * y, 1.0 - s / 2.0))


def disk_grid_points(resolution: int) -> np.ndarray:
    """Uniform unit-disk points from a resolution x resolution line grid."""
    if resolution < 4:
        raise DomainError(f"grid resolution must be >= 4, got {resolution}")
    if resolution % 2:
        raise DomainError(f"grid resolution must be even, got {resolution}")
    side = np.linspace(-1.0, 1.0, resolution // 2)
    gx, gy = np.meshgrid(side, side)
    square = np.column_stack((gx.ravel(), gy.ravel()))
    return rosca_square_to_disk(square)


def _oriented_delaunay(points2d: np.ndarray) -> np.ndarray:
    tri = Delaunay(points2d)
    faces = tri.simplices.astype(np.int32)
    p = points2d
    u = p[faces[:, 1]] - p[faces[:, 0]]
    w = p[faces[:, 2]] - p[faces[:, 0]]
    flip = (u[:, 0] * w[:, 1] - u[:, 1] * w[:, 0]) < 0.0
    faces[flip] = faces[flip][:, [0, 2, 1]]
    return faces


def make_dome(theta_c: float, resolution: int) -> GeodesicDome:
    """Geodesic dome on the unit cap from an equal-area disk grid.

    ``resolution`` counts grid lines (half per direction), so the dome has
    (resolution/2)^2 vertices before triangulation.
    """
    disk = disk_grid_points(resolution)
    faces = _oriented_delaunay(disk)
    lifted = inv_lambert(disk * lambert_scale(theta_c))
    mesh = TriMesh(lifted, faces, units="1")
    return GeodesicDome(mesh, theta_c, resolution)


def choose_dome_resolution(omega_min: float, fdec_circumference: float) -> int:
    """Smallest even grid resolution whose vertex spacing resolves omega_min.

    Spacing model: the (n/2)^2 dome vertices sample a surface of
    circumference zeta, giving an inter-vertex spacing of about
    4 zeta / (pi n); a quarter-wavelength sampling of omega_min then
    needs n >= 4 zeta / (pi omega_min), floored at 4 and rounded up even.
    """
    if omega_min <= 0.0 or fdec_circumference <= 0.0:
        raise DomainError("wavelength and circumference must be positive")
    n = max(4, math.ceil(4.0 * fdec_circumference / (math.pi * omega_min)))
    return n + (n % 2)


# ---------------------------------------------------------------------------
# Coefficient file format
# ---------------------------------------------------------------------------

_COEF_MAGIC = "capharm-coefficients"
_COEF_VERSION = 1


def save_coefficients(coeffs: SchCoefficients, path: str) -> None:
    rows = [[float(coeffs.q[j, ch].real) if part == 0 else float(coeffs.q[j, ch].imag)
             for ch in range(3) for part in (0, 1)]
            for j in range(len(coeffs.q))]
    payload = {
        "format": _COEF_MAGIC,
        "version": _COEF_VERSION,
        "theta_c": float(coeffs.theta_c),
        "k_max": int(coeffs.k_max),
        "parity": coeffs.parity,
        "centroid": [float(x) for x in coeffs.centroid],
        "rows": rows,
    }
    try:
        with open(path, "w") as fh:
            json.dump(payload, fh)
            fh.write("\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_coefficients(path: str) -> SchCoefficients:
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if payload.get("format") != _COEF_MAGIC:
        raise ParseError(f"{path}: not a coefficients file")
    rows = np.array(payload["rows"], float)
    q = rows[:, 0::2] + 1j * rows[:, 1::2]
    return SchCoefficients(float(payload["theta_c"]), int(payload["k_max"]),
                           q, np.array(payload["centroid"], float),
                           payload.get("parity", "even"))
