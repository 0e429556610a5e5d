"""Triangulated-mesh data model, OBJ/STL I/O and patch validation.

Meshes are immutable after construction (arrays are write-protected) and
all operations are pure, so values can be shared freely across threads.
Supported formats are deliberately narrow: OBJ v/f records with 1-based
indices, and STL in ASCII or little-endian binary form.  STL stores one
vertex triple per facet, so loading welds vertices by exact bit-equality
of their coordinates; fuzzed scanner output must be cleaned upstream.
"""

from __future__ import annotations

import hashlib
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import IoError, ParseError, TopologyError

# Degenerate-face threshold: faces with area below EPS_AREA_FACTOR times
# the squared bounding-box diagonal count as degenerate (scale invariant).
EPS_AREA_FACTOR = 1e-12


def _frozen(arr, dtype):
    out = np.ascontiguousarray(np.asarray(arr, dtype=dtype))
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class TriMesh:
    """An open triangulated surface patch.

    vertices: (n_v, 3) float64, in the length units of the scan.
    faces: (n_f, 3) int32 vertex indices, winding preserved from file.
    attribute: optional per-vertex scalar channel (in-memory only).
    units: opaque length-unit label; formulas never interpret it.
    """

    vertices: np.ndarray
    faces: np.ndarray
    attribute: np.ndarray | None = None
    units: str = "mm"

    def __post_init__(self):
        object.__setattr__(self, "vertices", _frozen(self.vertices, np.float64))
        object.__setattr__(self, "faces", _frozen(self.faces, np.int32))
        if self.attribute is not None:
            object.__setattr__(self, "attribute", _frozen(self.attribute, np.float64))
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ParseError("vertices must be an (n, 3) array")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ParseError("faces must be an (n, 3) array")
        if self.faces.size:
            if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
                raise ParseError("face index out of range")
            f = self.faces
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2])
                      | (f[:, 0] == f[:, 2])):
                raise ParseError("face with repeated vertex indices")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def bbox_diagonal(self) -> float:
        if not len(self.vertices):
            return 0.0
        span = self.vertices.max(axis=0) - self.vertices.min(axis=0)
        return float(np.linalg.norm(span))

    def face_areas(self) -> np.ndarray:
        v = self.vertices
        f = self.faces
        cross = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        return 0.5 * np.linalg.norm(cross, axis=1)

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(self.vertices.tobytes())
        h.update(self.faces.tobytes())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class MeshDiagnostics:
    """Counters filled by validate_patch; reported, never thrown."""

    vertex_count: int
    face_count: int
    boundary_loop_count: int
    min_face_area: float
    duplicate_face_count: int
    nonmanifold_edge_count: int
    degenerate_face_count: int = 0

    def is_valid_patch(self) -> bool:
        return (self.boundary_loop_count == 1
                and self.nonmanifold_edge_count == 0
                and self.duplicate_face_count == 0
                and self.degenerate_face_count == 0)


# ---------------------------------------------------------------------------
# Topology
# ---------------------------------------------------------------------------


def edge_face_count(mesh: TriMesh) -> dict:
    """Undirected edge -> number of incident faces."""
    counts: dict = {}
    for tri in mesh.faces:
        a, b, c = int(tri[0]), int(tri[1]), int(tri[2])
        for u, v in ((a, b), (b, c), (c, a)):
            key = (u, v) if u < v else (v, u)
            counts[key] = counts.get(key, 0) + 1
    return counts


def boundary_edges(mesh: TriMesh) -> list:
    return [e for e, n in edge_face_count(mesh).items() if n == 1]


def _count_boundary_loops(edges) -> int:
    # cyclomatic number of the boundary graph: every boundary vertex has
    # even degree, so independent cycles = E - V + components
    if not edges:
        return 0
    adj: dict = {}
    for u, v in edges:
        adj.setdefault(u, []).append(v)
        adj.setdefault(v, []).append(u)
    seen = set()
    components = 0
    for start in adj:
        if start in seen:
            continue
        components += 1
        stack = [start]
        seen.add(start)
        while stack:
            node = stack.pop()
            for nxt in adj[node]:
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
    return len(edges) - len(adj) + components


def ordered_boundary_loop(mesh: TriMesh) -> np.ndarray:
    """Vertex indices of the single boundary loop, in walk order.

    Requires a clean disk patch (validate first); raises TopologyError
    otherwise.  Orientation follows the face winding.
    """
    directed = set()
    for tri in mesh.faces:
        a, b, c = (int(x) for x in tri)
        directed.update(((a, b), (b, c), (c, a)))
    bnd = {(u, v) for (u, v) in directed if (v, u) not in directed}
    if not bnd:
        raise TopologyError("mesh has no boundary (closed surface)")
    nxt = {}
    for u, v in bnd:
        if u in nxt:
            raise TopologyError("boundary is not a simple loop")
        nxt[u] = v
    start = next(iter(nxt))
    loop = [start]
    node = nxt[start]
    while node != start:
        loop.append(node)
        node = nxt.get(node)
        if node is None or len(loop) > len(bnd):
            raise TopologyError("boundary walk did not close")
    if len(loop) != len(bnd):
        raise TopologyError(f"{len(bnd) - len(loop)} boundary edges outside the main loop")
    return np.array(loop, dtype=np.int32)


def euler_characteristic(mesh: TriMesh) -> int:
    return mesh.n_vertices - len(edge_face_count(mesh)) + mesh.n_faces


def vertex_normals(mesh: TriMesh) -> np.ndarray:
    """Area-weighted per-vertex unit normals."""
    v, f = mesh.vertices, mesh.faces
    fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    normals = np.zeros_like(v)
    for i in range(3):
        np.add.at(normals, f[:, i], fn)
    norm = np.linalg.norm(normals, axis=1, keepdims=True)
    norm[norm == 0.0] = 1.0
    return normals / norm


def validate_patch(mesh: TriMesh) -> MeshDiagnostics:
    """Fill the patch-selection diagnostics; pure and deterministic."""
    counts = edge_face_count(mesh)
    nonmanifold = sum(1 for n in counts.values() if n > 2)
    boundary = [e for e, n in counts.items() if n == 1]
    loops = _count_boundary_loops(boundary)
    sorted_faces = np.sort(mesh.faces, axis=1)
    _, dup_counts = np.unique(sorted_faces, axis=0, return_counts=True)
    duplicates = int(np.sum(dup_counts - 1))
    areas = mesh.face_areas() if mesh.n_faces else np.array([0.0])
    eps_area = EPS_AREA_FACTOR * mesh.bbox_diagonal() ** 2
    degenerate = int(np.sum(areas < eps_area)) if mesh.n_faces else 0
    return MeshDiagnostics(
        vertex_count=mesh.n_vertices,
        face_count=mesh.n_faces,
        boundary_loop_count=loops,
        min_face_area=float(areas.min()),
        duplicate_face_count=duplicates,
        nonmanifold_edge_count=nonmanifold,
        degenerate_face_count=degenerate,
    )


def require_disk_patch(mesh: TriMesh) -> MeshDiagnostics:
    diag = validate_patch(mesh)
    if not diag.is_valid_patch():
        raise TopologyError(
            f"not a clean disk patch: loops={diag.boundary_loop_count}, "
            f"nonmanifold={diag.nonmanifold_edge_count}, "
            f"duplicates={diag.duplicate_face_count}, "
            f"degenerate={diag.degenerate_face_count}")
    return diag


def center_on_mean(mesh: TriMesh) -> tuple[TriMesh, np.ndarray]:
    """Shift vertices so their mean is the zero vector; returns the mean."""
    if mesh.n_vertices < 1:
        raise ParseError("cannot center an empty mesh")
    centroid = mesh.vertices.mean(axis=0)
    shifted = mesh.vertices - centroid
    # subtract any residual rounding so the output mean is exactly machine-zero
    shifted = shifted - shifted.mean(axis=0)
    return (TriMesh(shifted, mesh.faces, mesh.attribute, mesh.units), centroid)


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------


def _detect_format(path: str) -> str:
    ext = os.path.splitext(path)[1].lower()
    if ext == ".obj":
        return "obj"
    if ext == ".stl":
        with open(path, "rb") as fh:
            head = fh.read(5)
        if head == b"solid":
            # ASCII unless the facet count matches the binary layout
            try:
                size = os.path.getsize(path)
                with open(path, "rb") as fh:
                    fh.seek(80)
                    n = struct.unpack("<I", fh.read(4))[0]
                if size == 84 + 50 * n:
                    return "stl-binary"
            except (OSError, struct.error):
                pass
            return "stl-ascii"
        return "stl-binary"
    raise ParseError(f"cannot infer mesh format from path: {path}")


def _load_obj(path: str) -> TriMesh:
    vertices = []
    faces = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise ParseError(f"{path}:{lineno}: malformed vertex record")
                vertices.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                if len(parts) != 4:
                    raise ParseError(f"{path}:{lineno}: only triangles are supported")
                idx = []
                for tok in parts[1:]:
                    head = tok.partition("/")[0]
                    i = int(head)
                    if i < 1:
                        raise ParseError(
                            f"{path}:{lineno}: OBJ indices are 1-based, got {i}")
                    idx.append(i - 1)
                faces.append(idx)
    try:
        return TriMesh(np.array(vertices, float).reshape(-1, 3),
                       np.array(faces, np.int32).reshape(-1, 3))
    except ParseError as exc:
        raise ParseError(f"{path}: {exc}") from exc


def _weld_facets(facet_vertices: np.ndarray) -> TriMesh:
    # facet_vertices: (n_f, 3, 3); weld by exact bit-equality of coordinates
    flat = facet_vertices.reshape(-1, 3)
    view = flat.view([("x", flat.dtype), ("y", flat.dtype), ("z", flat.dtype)])
    _, first, inverse = np.unique(view, return_index=True, return_inverse=True)
    order = np.argsort(first)
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    vertices = flat[np.sort(first)]
    faces = rank[inverse].reshape(-1, 3)
    return TriMesh(np.asarray(vertices, np.float64), faces.astype(np.int32))


def _load_stl_ascii(path: str) -> TriMesh:
    coords = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "vertex":
                if len(parts) != 4:
                    raise ParseError(f"{path}:{lineno}: malformed vertex record")
                coords.append([float(x) for x in parts[1:4]])
    if not coords or len(coords) % 3:
        raise ParseError(f"{path}: vertex count is not a multiple of 3")
    pts = np.array(coords, np.float32).astype(np.float64)
    return _weld_facets(pts.reshape(-1, 3, 3))


def _load_stl_binary(path: str) -> TriMesh:
    try:
        with open(path, "rb") as fh:
            header = fh.read(80)
            if len(header) < 80:
                raise ParseError(f"{path}: truncated binary STL header")
            (count,) = struct.unpack("<I", fh.read(4))
            payload = fh.read(50 * count)
    except OSError as exc:
        raise IoError(str(exc)) from exc
    if len(payload) != 50 * count:
        raise ParseError(f"{path}: truncated binary STL payload")
    rec = np.frombuffer(payload, dtype=np.uint8).reshape(count, 50)
    floats = rec[:, :48].copy().view("<f4").reshape(count, 4, 3)
    facet_vertices = floats[:, 1:4, :].astype(np.float64)
    return _weld_facets(facet_vertices)


def load_mesh(path: str, fmt: str = "auto", strict: bool = False) -> TriMesh:
    """Load an OBJ or STL mesh.

    OBJ keeps vertices in file order; STL welds per-facet vertices by
    exact coordinate match.  ``strict`` additionally requires a clean
    single-boundary manifold patch (TopologyError otherwise).
    """
    if not os.path.exists(path):
        raise IoError(f"no such file: {path}")
    if fmt == "auto":
        fmt = _detect_format(path)
    try:
        if fmt == "obj":
            mesh = _load_obj(path)
        elif fmt == "stl-ascii":
            mesh = _load_stl_ascii(path)
        elif fmt == "stl-binary":
            mesh = _load_stl_binary(path)
        else:
            raise ParseError(f"unknown mesh format: {fmt}")
    except (ValueError, struct.error) as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if strict:
        require_disk_patch(mesh)
    return mesh


def _atomic_write(path: str, writer) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    try:
        fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                writer(fh)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def save_mesh(mesh: TriMesh, path: str, fmt: str = "auto") -> None:
    """Write OBJ, ASCII STL or binary STL; binary STL round-trips bit-exactly."""
    if fmt == "auto":
        ext = os.path.splitext(path)[1].lower()
        fmt = "obj" if ext == ".obj" else "stl-binary" if ext == ".stl" else None
        if fmt is None:
            raise ParseError(f"cannot infer output format from path: {path}")

    if fmt == "obj":
        def writer(fh):
            for v in mesh.vertices:
                fh.write(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n".encode())
            for f in mesh.faces:
                fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n".encode())
    elif fmt == "stl-ascii":
        def writer(fh):
            fh.write(b"solid capharm\n")
            v = mesh.vertices.astype(np.float32)
            for f in mesh.faces:
                n = np.cross(v[f[1]] - v[f[0]], v[f[2]] - v[f[0]])
                norm = np.linalg.norm(n)
                n = n / norm if norm else n
                fh.write(("  facet normal " + " ".join(repr(float(x)) for x in n)
                          + "\n").encode())
                fh.write(b"    outer loop\n")
                for i in f:
                    fh.write(("      vertex " + " ".join(repr(float(x)) for x in v[i])
                              + "\n").encode())
                fh.write(b"    endloop\n  endfacet\n")
            fh.write(b"endsolid capharm\n")
    elif fmt == "stl-binary":
        def writer(fh):
            fh.write(b"\0" * 80)
            fh.write(struct.pack("<I", mesh.n_faces))
            v = mesh.vertices.astype(np.float32)
            for f in mesh.faces:
                n = np.cross(v[f[1]] - v[f[0]], v[f[2]] - v[f[0]])
                norm = np.linalg.norm(n)
                n = (n / norm if norm else n).astype(np.float32)
                rec = np.concatenate([n, v[f[0]], v[f[1]], v[f[2]]]).tobytes()
                fh.write(rec + b"\0\0")
    else:
        raise ParseError(f"unknown mesh format: {fmt}")
    _atomic_write(path, writer)
