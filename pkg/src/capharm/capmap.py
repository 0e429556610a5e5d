"""Conformal parameterisation of disk patches onto polar spherical caps.

The composite map is f = tau^-1 o h o g:

    g : patch -> unit disk      discrete harmonic map, circle boundary
    h : unit disk -> disk(r)    Moebius automorphism scaled to radius
                                r = sqrt((1 - cos theta_c)/(1 + cos theta_c))
    tau^-1 : disk(r) -> cap     inverse south-pole stereographic projection

g is solved from the cotangent Laplacian with an arc-length boundary,
then one conformality refinement pass reallocates the boundary spacing
by the interior conformal stretch (kept only when it lowers the angle
distortion).  h's two real parameters are found by a seeded
population-sampling global search plus a Nelder-Mead polish on the mean
absolute log area-ratio d_area; the identity Moebius is always evaluated
first, so the search can never return anything worse than it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.optimize import minimize
from scipy.sparse.linalg import spsolve

from .errors import ConvergenceError, DegenerateFace, DomainError, IoError, ParseError
from .hyperfun import THETA_C_MAX, THETA_C_MIN
from .meshkit import TriMesh, ordered_boundary_loop, require_disk_patch

DEFAULT_SEED = 10
DEFAULT_BUDGET = 600
PSS_POPULATION = 30
PSS_ACCEPTANCE = 0.97


@dataclass(frozen=True)
class DiskParam:
    """Per-vertex 2D coordinates inside the closed unit disk."""

    points: np.ndarray  # (n_v, 2)
    mesh_checksum: str

    def complex_points(self) -> np.ndarray:
        return self.points[:, 0] + 1j * self.points[:, 1]


@dataclass(frozen=True)
class MobiusCoeff:
    """Center (A, B) of the disk automorphism h; must stay inside the disk."""

    A: float
    B: float

    def __post_init__(self):
        if self.A ** 2 + self.B ** 2 >= 1.0:
            raise DomainError("Moebius center must satisfy A^2 + B^2 < 1")

    @property
    def mu(self) -> complex:
        return complex(self.A, self.B)


@dataclass(frozen=True)
class CapParam:
    """Per-vertex cap coordinates paired 1:1 with a source mesh."""

    theta_c: float
    theta: np.ndarray
    phi: np.ndarray
    mesh_checksum: str

    def __post_init__(self):
        if np.any(self.theta > self.theta_c + 1e-9) or np.any(self.theta < 0.0):
            raise DomainError("theta outside [0, theta_c]")

    @property
    def n_vertices(self) -> int:
        return len(self.theta)

    def unit_sphere_points(self) -> np.ndarray:
        st = np.sin(self.theta)
        return np.column_stack((st * np.cos(self.phi),
                                st * np.sin(self.phi),
                                np.cos(self.theta)))


@dataclass(frozen=True)
class DistortionReport:
    d_area: float
    d_angle: float


# ---------------------------------------------------------------------------
# Projections
# ---------------------------------------------------------------------------


def cap_disk_radius(theta_c: float) -> float:
    """Radius of the stereographic image of the cap rim."""
    if not (THETA_C_MIN <= theta_c <= THETA_C_MAX):
        raise DomainError(f"theta_c = {theta_c} outside supported range")
    c = math.cos(theta_c)
    return math.sqrt((1.0 - c) / (1.0 + c))


def stereographic(points) -> np.ndarray:
    """South-pole stereographic projection (x, y, z) -> (x, y)/(1 + z)."""
    p = np.atleast_2d(np.asarray(points, float))
    denom = 1.0 + p[:, 2]
    if np.any(np.abs(denom) < 1e-300):
        raise DomainError("stereographic projection undefined at z = -1")
    out = p[:, :2] / denom[:, None]
    return out if np.asarray(points).ndim > 1 else out[0]


def inv_stereographic(points) -> np.ndarray:
    """Inverse projection (X, Y) -> (2X, 2Y, 1 - X^2 - Y^2)/(1 + X^2 + Y^2)."""
    q = np.atleast_2d(np.asarray(points, float))
    s = q[:, 0] ** 2 + q[:, 1] ** 2
    denom = 1.0 + s
    out = np.column_stack((2.0 * q[:, 0], 2.0 * q[:, 1], 1.0 - s)) / denom[:, None]
    return out if np.asarray(points).ndim > 1 else out[0]


def mobius_apply(coeff: MobiusCoeff, theta_c: float, disk: DiskParam) -> DiskParam:
    """Apply h(w) = r (w - mu)/(1 - conj(mu) w) to a unit-disk parameterisation."""
    r = cap_disk_radius(theta_c)
    w = disk.complex_points()
    mapped = r * (w - coeff.mu) / (1.0 - np.conj(coeff.mu) * w)
    return DiskParam(np.column_stack((mapped.real, mapped.imag)),
                     disk.mesh_checksum)


# ---------------------------------------------------------------------------
# Distortion measures
# ---------------------------------------------------------------------------


def _triangle_areas(points: np.ndarray, faces: np.ndarray) -> np.ndarray:
    if points.shape[1] == 2:
        p = np.concatenate([points, np.zeros((len(points), 1))], axis=1)
    else:
        p = points
    cross = np.cross(p[faces[:, 1]] - p[faces[:, 0]], p[faces[:, 2]] - p[faces[:, 0]])
    return 0.5 * np.linalg.norm(cross, axis=1)


def _corner_angles(points: np.ndarray, faces: np.ndarray) -> np.ndarray:
    if points.shape[1] == 2:
        p = np.concatenate([points, np.zeros((len(points), 1))], axis=1)
    else:
        p = points
    out = np.empty((len(faces), 3))
    for i in range(3):
        a = p[faces[:, i]]
        u = p[faces[:, (i + 1) % 3]] - a
        v = p[faces[:, (i + 2) % 3]] - a
        nu = np.linalg.norm(u, axis=1)
        nv = np.linalg.norm(v, axis=1)
        cosang = np.einsum("ij,ij->i", u, v) / np.maximum(nu * nv, 1e-300)
        out[:, i] = np.arccos(np.clip(cosang, -1.0, 1.0))
    return out


def _area_distortion(areas_src: np.ndarray, areas_dst: np.ndarray) -> float:
    total_src = areas_src.sum()
    total_dst = areas_dst.sum()
    if np.any(areas_src <= 0.0) or np.any(areas_dst <= 0.0):
        raise DegenerateFace("zero-area face in distortion measure")
    ratio = (areas_dst / total_dst) / (areas_src / total_src)
    return float(np.mean(np.abs(np.log(ratio))))


def _angle_distortion(points_src, points_dst, faces) -> float:
    ang_src = _corner_angles(points_src, faces)
    ang_dst = _corner_angles(points_dst, faces)
    return float(np.mean(np.abs(ang_dst - ang_src)) / math.pi)


def distortion(mesh: TriMesh, cap: CapParam) -> DistortionReport:
    """Mean |log normalised-area-ratio| and mean corner-angle change.

    Mapped triangle areas and angles use the flat 3D triangles of the
    cap-mapped vertices.
    """
    mapped = cap.unit_sphere_points()
    areas_src = mesh.face_areas()
    areas_dst = _triangle_areas(mapped, mesh.faces)
    return DistortionReport(
        d_area=_area_distortion(areas_src, areas_dst),
        d_angle=_angle_distortion(mesh.vertices, mapped, mesh.faces),
    )


# ---------------------------------------------------------------------------
# Disk conformal map
# ---------------------------------------------------------------------------


def _cotan_weights(mesh: TriMesh, clamp: bool) -> sparse.csr_matrix:
    v, f = mesh.vertices, mesh.faces
    n = len(v)
    rows, cols, vals = [], [], []
    for i in range(3):
        a = f[:, i]
        b = f[:, (i + 1) % 3]
        c = f[:, (i + 2) % 3]
        u = v[a] - v[c]
        w = v[b] - v[c]
        cross = np.linalg.norm(np.cross(u, w), axis=1)
        dot = np.einsum("ij,ij->i", u, w)
        cot = dot / np.maximum(cross, 1e-300)
        if clamp:
            cot = np.maximum(cot, 1e-8)
        rows.extend([a, b])
        cols.extend([b, a])
        vals.extend([0.5 * cot, 0.5 * cot])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    w_mat = sparse.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    diag = np.asarray(w_mat.sum(axis=1)).ravel()
    return sparse.diags(diag) - w_mat


def _solve_harmonic(lap, boundary, interior, boundary_xy, n):
    uv = np.zeros((n, 2))
    uv[boundary] = boundary_xy
    lap_ii = lap[interior][:, interior].tocsc()
    lap_ib = lap[interior][:, boundary]
    rhs = -lap_ib @ boundary_xy
    uv[interior] = np.column_stack([spsolve(lap_ii, rhs[:, 0]),
                                    spsolve(lap_ii, rhs[:, 1])])
    return uv


def _signed_areas_2d(points, faces):
    p = points
    u = p[faces[:, 1]] - p[faces[:, 0]]
    w = p[faces[:, 2]] - p[faces[:, 0]]
    return 0.5 * (u[:, 0] * w[:, 1] - u[:, 1] * w[:, 0])


def _is_fold_free(points, faces) -> bool:
    s = _signed_areas_2d(points, faces)
    return bool(np.all(s > 0.0) or np.all(s < 0.0))


def disk_conformal_map(mesh: TriMesh) -> DiskParam:
    """Map a disk-topology patch to the closed unit disk, angle-preserving.

    Harmonic (cotangent-Laplacian) interior with the boundary loop pinned
    to the circle by arc length, followed by one boundary-respacing
    refinement driven by the interior conformal stretch.  Falls back to
    clamped-positive weights when the unclamped solve folds.
    """
    require_disk_patch(mesh)
    loop = ordered_boundary_loop(mesh)
    n = mesh.n_vertices
    boundary_mask = np.zeros(n, dtype=bool)
    boundary_mask[loop] = True
    interior = np.flatnonzero(~boundary_mask)

    loop_pts = mesh.vertices[loop]
    seg = np.linalg.norm(np.roll(loop_pts, -1, axis=0) - loop_pts, axis=1)
    if np.any(seg <= 0.0):
        raise ConvergenceError("degenerate boundary edge")

    def solve_with_arcs(arcs, lap):
        angles = 2.0 * math.pi * np.concatenate([[0.0], np.cumsum(arcs)[:-1]]) / arcs.sum()
        boundary_xy = np.column_stack((np.cos(angles), np.sin(angles)))
        return _solve_harmonic(lap, loop, interior, boundary_xy, n)

    lap = _cotan_weights(mesh, clamp=False)
    uv = solve_with_arcs(seg, lap)
    if not _is_fold_free(uv, mesh.faces):
        lap = _cotan_weights(mesh, clamp=True)
        uv = solve_with_arcs(seg, lap)
        if not _is_fold_free(uv, mesh.faces):
            folded = int(np.sum(_signed_areas_2d(uv, mesh.faces) <= 0.0))
            raise ConvergenceError(
                f"disk map folded on {folded} faces even with clamped weights")

    # refinement: respace the boundary by the interior conformal stretch
    d_angle_0 = _angle_distortion(mesh.vertices, uv, mesh.faces)
    stretch = _boundary_stretch(mesh, uv, loop, boundary_mask)
    if stretch is not None:
        arcs = seg * 0.5 * (stretch + np.roll(stretch, -1))
        uv_ref = solve_with_arcs(arcs, lap)
        if (_is_fold_free(uv_ref, mesh.faces)
                and _angle_distortion(mesh.vertices, uv_ref, mesh.faces) < d_angle_0):
            uv = uv_ref

    radii = np.linalg.norm(uv, axis=1)
    if radii.max() > 1.0 + 1e-9:
        uv = uv / radii.max()
    return DiskParam(uv, mesh.checksum())


def _boundary_stretch(mesh, uv, loop, boundary_mask):
    """Per-boundary-vertex mean length ratio of incident interior edges."""
    edge_set = set()
    for tri in mesh.faces:
        a, b, c = (int(x) for x in tri)
        for u, v in ((a, b), (b, c), (c, a)):
            if boundary_mask[u] and not boundary_mask[v]:
                edge_set.add((u, v))
    if not edge_set:
        return None
    sums = np.zeros(mesh.n_vertices)
    counts = np.zeros(mesh.n_vertices)
    for u, v in edge_set:
        src = np.linalg.norm(mesh.vertices[u] - mesh.vertices[v])
        dst = np.linalg.norm(uv[u] - uv[v])
        if src > 0.0:
            sums[u] += dst / src
            counts[u] += 1.0
    vals = np.ones(mesh.n_vertices)
    ok = counts > 0
    vals[ok] = sums[ok] / counts[ok]
    stretch = vals[loop]
    med = np.median(stretch[stretch > 0.0]) or 1.0
    stretch[stretch <= 0.0] = med
    return stretch


# ---------------------------------------------------------------------------
# Moebius optimisation
# ---------------------------------------------------------------------------


def _cap_areas(w_mapped: np.ndarray, faces: np.ndarray) -> np.ndarray:
    pts = inv_stereographic(np.column_stack((w_mapped.real, w_mapped.imag)))
    return _triangle_areas(pts, faces)


def optimize_mobius(mesh: TriMesh, disk: DiskParam, theta_c: float,
                    budget: int = DEFAULT_BUDGET, seed: int = DEFAULT_SEED
                    ) -> tuple[MobiusCoeff, DistortionReport]:
    """Minimise d_area over the Moebius center, never worse than identity.

    The search runs in (X, Y) with modulus = tanh(X) and angle = Y:
    a seeded population of PSS_POPULATION samples per outer iteration,
    contracting the sampling box around the incumbent by PSS_ACCEPTANCE
    per iteration, then a Nelder-Mead polish.
    """
    r = cap_disk_radius(theta_c)
    w = disk.complex_points()
    areas_src = mesh.face_areas()
    if np.any(areas_src <= 0.0):
        raise DegenerateFace("zero-area source face")
    src_norm = areas_src / areas_src.sum()

    def objective(xy) -> float:
        mu = math.tanh(xy[0]) * complex(math.cos(xy[1]), math.sin(xy[1]))
        mapped = r * (w - mu) / (1.0 - mu.conjugate() * w)
        areas = _cap_areas(mapped, mesh.faces)
        total = areas.sum()
        if total <= 0.0 or np.any(areas <= 0.0):
            return math.inf
        return float(np.mean(np.abs(np.log((areas / total) / src_norm))))

    rng = np.random.Generator(np.random.Philox(seed))
    incumbent_xy = np.array([0.0, 0.0])
    incumbent_val = objective(incumbent_xy)
    identity_val = incumbent_val

    iterations = max(1, budget // PSS_POPULATION)
    half = np.array([3.0, math.pi])
    center = incumbent_xy.copy()
    lo_box = np.array([-3.0, -math.pi])
    hi_box = np.array([3.0, math.pi])
    for _ in range(iterations):
        samples = rng.uniform(np.maximum(center - half, lo_box),
                              np.minimum(center + half, hi_box),
                              size=(PSS_POPULATION, 2))
        for xy in samples:
            val = objective(xy)
            if val < incumbent_val:
                incumbent_val = val
                incumbent_xy = xy.copy()
        center = incumbent_xy
        half = half * PSS_ACCEPTANCE

    res = minimize(objective, incumbent_xy, method="Nelder-Mead",
                   options={"xatol": 1e-12, "fatol": 1e-14, "maxiter": 400})
    if res.fun < incumbent_val:
        incumbent_val = float(res.fun)
        incumbent_xy = res.x
    if identity_val <= incumbent_val:
        incumbent_val = identity_val
        incumbent_xy = np.array([0.0, 0.0])

    modulus = math.tanh(incumbent_xy[0])
    coeff = MobiusCoeff(modulus * math.cos(incumbent_xy[1]),
                        modulus * math.sin(incumbent_xy[1]))
    mapped = mobius_apply(coeff, theta_c, disk)
    cap_pts = inv_stereographic(mapped.points)
    report = DistortionReport(
        d_area=incumbent_val,
        d_angle=_angle_distortion(mesh.vertices, cap_pts, mesh.faces),
    )
    return coeff, report


def _cap_param_from_points(points: np.ndarray, theta_c: float,
                           checksum: str) -> CapParam:
    z = np.clip(points[:, 2], -1.0, 1.0)
    theta = np.arccos(z)
    theta = np.minimum(theta, theta_c)  # clip rim rounding
    phi = np.mod(np.arctan2(points[:, 1], points[:, 0]), 2.0 * math.pi)
    return CapParam(theta_c, theta, phi, checksum)


def parameterize_to_cap(mesh: TriMesh, theta_c: float,
                        budget: int = DEFAULT_BUDGET, seed: int = DEFAULT_SEED
                        ) -> tuple[CapParam, DistortionReport]:
    """Full composition: disk map, Moebius search, inverse stereographic."""
    disk = disk_conformal_map(mesh)
    coeff, report = optimize_mobius(mesh, disk, theta_c, budget=budget, seed=seed)
    mapped = mobius_apply(coeff, theta_c, disk)
    if not _is_fold_free(mapped.points, mesh.faces):
        raise ConvergenceError("Moebius-mapped parameterisation folded")
    pts = inv_stereographic(mapped.points)
    cap = _cap_param_from_points(pts, theta_c, mesh.checksum())
    return cap, report


def optimize_theta_c(mesh: TriMesh, theta_lb: float, theta_ub: float,
                     budget: int = DEFAULT_BUDGET, seed: int = DEFAULT_SEED,
                     probes: int = 7
                     ) -> tuple[float, CapParam, DistortionReport]:
    """Outer 1D search of the inner Moebius objective over theta_c.

    Coarse probe grid plus golden-section refinement around the best
    probe; among candidates within 1e-4 of the best objective the
    smallest theta_c wins.
    """
    if not (THETA_C_MIN <= theta_lb < theta_ub <= THETA_C_MAX):
        raise DomainError(
            f"need {THETA_C_MIN:.4f} <= lb < ub <= {THETA_C_MAX:.4f}, "
            f"got [{theta_lb}, {theta_ub}]")
    disk = disk_conformal_map(mesh)
    cache: dict[float, float] = {}

    def inner(theta_c: float) -> float:
        key = round(theta_c, 12)
        if key not in cache:
            _, rep = optimize_mobius(mesh, disk, theta_c, budget=budget, seed=seed)
            cache[key] = rep.d_area
        return cache[key]

    grid = list(np.linspace(theta_lb, theta_ub, probes))
    values = [inner(t) for t in grid]
    best_i = int(np.argmin(values))
    lo = grid[max(best_i - 1, 0)]
    hi = grid[min(best_i + 1, len(grid) - 1)]

    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    x1 = hi - invphi * (hi - lo)
    x2 = lo + invphi * (hi - lo)
    f1, f2 = inner(x1), inner(x2)
    for _ in range(10):
        if f1 <= f2:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - invphi * (hi - lo)
            f1 = inner(x1)
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + invphi * (hi - lo)
            f2 = inner(x2)

    best_val = min(cache.values())
    best_theta = min(t for t, v in cache.items() if v <= best_val + 1e-4)
    cap, report = parameterize_to_cap(mesh, best_theta, budget=budget, seed=seed)
    return best_theta, cap, report


# ---------------------------------------------------------------------------
# CapParam file format
# ---------------------------------------------------------------------------

_CAP_MAGIC = "capharm-capparam"
_CAP_VERSION = 1


def save_capparam(cap: CapParam, path: str) -> None:
    lines = [
        f"{_CAP_MAGIC} {_CAP_VERSION}",
        f"theta_c {cap.theta_c!r}",
        f"n_v {cap.n_vertices}",
        f"mesh_checksum {cap.mesh_checksum}",
    ]
    for t, p in zip(cap.theta, cap.phi):
        lines.append(f"{float(t)!r} {float(p)!r}")
    try:
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_capparam(path: str) -> CapParam:
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if not lines or not lines[0].startswith(_CAP_MAGIC):
        raise ParseError(f"{path}: not a capparam file")
    header = dict(line.split(None, 1) for line in lines[1:4])
    n_v = int(header["n_v"])
    rows = [line.split() for line in lines[4:4 + n_v]]
    if len(rows) != n_v:
        raise ParseError(f"{path}: expected {n_v} vertex rows")
    theta = np.array([float(r[0]) for r in rows])
    phi = np.array([float(r[1]) for r in rows])
    return CapParam(float(header["theta_c"]), theta, phi,
                    header["mesh_checksum"])
