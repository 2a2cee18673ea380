"""Triangle mesh container, OBJ/PLY input-output and normalization."""
import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import trimesh
import trimesh.sample
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from services.errors import EmptyMesh, ParseError

log = logging.getLogger(__name__)

DEGENERATE_AREA = 1e-12
SUPPORTED_FORMATS = (".obj", ".ply")


@dataclass(frozen=True)
class Aabb:
    min: np.ndarray
    max: np.ndarray

    @property
    def center(self) -> np.ndarray:
        return (self.min + self.max) / 2.0

    @property
    def extent(self) -> np.ndarray:
        return self.max - self.min


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Indexed triangle soup. vertices (V,3) float64, faces (F,3) int64."""

    vertices: np.ndarray
    faces: np.ndarray
    face_normals: np.ndarray | None = None

    @classmethod
    def from_arrays(cls, vertices, faces, drop_degenerate: bool = True) -> "TriangleMesh":
        """Validate arrays, drop zero-area faces and attach unit face normals."""
        vertices = np.ascontiguousarray(vertices, dtype=np.float64).reshape(-1, 3)
        faces = np.ascontiguousarray(faces, dtype=np.int64).reshape(-1, 3)
        if faces.size and (faces.min() < 0 or faces.max() >= len(vertices)):
            raise ParseError(
                f"face index out of range (vertex count {len(vertices)}, max index {faces.max()})"
            )
        cross = _face_cross(vertices, faces)
        doubled_area = np.linalg.norm(cross, axis=1)
        repeated = (
            (faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2]) | (faces[:, 0] == faces[:, 2])
        )
        keep = ~repeated & (0.5 * doubled_area >= DEGENERATE_AREA)
        dropped = int(len(faces) - keep.sum())
        if dropped:
            if not drop_degenerate:
                raise ParseError(f"{dropped} degenerate face(s)")
            log.warning("Dropped %d degenerate face(s)", dropped)
            faces, cross, doubled_area = faces[keep], cross[keep], doubled_area[keep]
        normals = cross / doubled_area[:, None] if len(faces) else np.zeros((0, 3))
        return cls(vertices=vertices, faces=faces, face_normals=normals)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def aabb(self) -> Aabb:
        if not len(self.vertices):
            raise EmptyMesh("mesh has no vertices")
        used = self.vertices[np.unique(self.faces)] if len(self.faces) else self.vertices
        return Aabb(min=used.min(axis=0), max=used.max(axis=0))

    def triangles(self) -> np.ndarray:
        """(F,3,3) corner coordinates."""
        return self.vertices[self.faces]

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(_face_cross(self.vertices, self.faces), axis=1)

    def transformed(self, matrix: np.ndarray) -> "TriangleMesh":
        """Apply a 3x3 linear map to every vertex (rotations keep orientation)."""
        return TriangleMesh.from_arrays(self.vertices @ np.asarray(matrix).T, self.faces)

    def flipped(self) -> "TriangleMesh":
        return TriangleMesh.from_arrays(self.vertices, self.faces[:, ::-1])

    def to_trimesh(self) -> trimesh.Trimesh:
        return trimesh.Trimesh(vertices=self.vertices, faces=self.faces, process=False)


def _face_cross(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    if not len(faces):
        return np.zeros((0, 3))
    tri = vertices[faces]
    return np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])


def concatenate(meshes: list[TriangleMesh]) -> TriangleMesh:
    """Merge meshes into one soup without welding."""
    offset = 0
    verts, faces = [], []
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + offset)
        offset += len(m.vertices)
    return TriangleMesh.from_arrays(np.concatenate(verts), np.concatenate(faces))


def mesh_hash(mesh: TriangleMesh) -> str:
    """Content hash of geometry and topology."""
    h = hashlib.sha1()
    h.update(np.ascontiguousarray(mesh.vertices, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(mesh.faces, dtype="<i8").tobytes())
    return h.hexdigest()


# --- Loading ---

def _load_arrays(path: Path) -> tuple[np.ndarray, np.ndarray]:
    """Vertex and face arrays as stored; polygons come back fan-triangulated."""
    try:
        loaded = trimesh.load(str(path), file_type=path.suffix.lower()[1:], process=False, force="mesh")
    except Exception as e:
        raise ParseError(f"{path}: {e}") from e
    vertices = np.asarray(loaded.vertices, dtype=np.float64)
    faces = np.asarray(getattr(loaded, "faces", np.zeros((0, 3))), dtype=np.int64)
    return vertices, faces


def load_mesh(path) -> TriangleMesh:
    """Load an OBJ or binary PLY file into a validated TriangleMesh."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"mesh not found: {path}")
    suffix = path.suffix.lower()
    if suffix not in SUPPORTED_FORMATS:
        raise ParseError(f"unsupported mesh format: {suffix}")
    vertices, faces = _load_arrays(path)
    mesh = TriangleMesh.from_arrays(vertices, faces)
    if not mesh.n_faces:
        raise EmptyMesh(f"{path}: no faces after validation")
    log.info("Loaded %s: %d vertices, %d faces", path.name, len(mesh.vertices), mesh.n_faces)
    return mesh


def save_mesh(mesh: TriangleMesh, path) -> None:
    """Write a triangle mesh as OBJ (ASCII) or PLY (binary little-endian)."""
    if not mesh.n_faces:
        raise EmptyMesh("refusing to write a mesh without faces")
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix not in SUPPORTED_FORMATS:
        raise ParseError(f"unsupported mesh format: {suffix}")
    path.parent.mkdir(parents=True, exist_ok=True)
    tm = mesh.to_trimesh()
    if suffix == ".obj":
        tm.export(str(path), file_type="obj", include_normals=False, include_texture=False, digits=10)
    else:
        tm.export(str(path), file_type="ply", encoding="binary")


# --- Normalization ---

def normalize_to(mesh: TriangleMesh, half_extent: float) -> TriangleMesh:
    """Center the Aabb at the origin and scale the longest axis to [-half_extent, half_extent]."""
    if not mesh.n_faces:
        raise EmptyMesh("cannot normalize an empty mesh")
    box = mesh.aabb()
    longest = float(box.extent.max())
    if longest <= 0:
        raise EmptyMesh("mesh has zero extent")
    scale = 2.0 * half_extent / longest
    vertices = (mesh.vertices - box.center) * scale
    return TriangleMesh(vertices=vertices, faces=mesh.faces, face_normals=mesh.face_normals)


def normalize_mesh(mesh: TriangleMesh) -> TriangleMesh:
    return normalize_to(mesh, 0.5)


# --- Topology helpers ---

def edge_face_counts(mesh: TriangleMesh) -> tuple[np.ndarray, np.ndarray]:
    """Unique undirected edges (E,2) and how many faces use each."""
    edges = np.sort(mesh.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    unique, counts = np.unique(edges, axis=0, return_counts=True)
    return unique, counts


def is_closed_manifold(mesh: TriangleMesh) -> bool:
    _, counts = edge_face_counts(mesh)
    return bool(len(counts)) and bool(np.all(counts == 2))


def euler_characteristic(mesh: TriangleMesh) -> int:
    edges, _ = edge_face_counts(mesh)
    n_vertices = len(np.unique(mesh.faces))
    return int(n_vertices - len(edges) + mesh.n_faces)


def component_count(mesh: TriangleMesh) -> int:
    """Connected components of the face-vertex graph."""
    used = np.unique(mesh.faces)
    remap = np.full(len(mesh.vertices), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    f = remap[mesh.faces]
    rows = np.concatenate([f[:, 0], f[:, 1], f[:, 2]])
    cols = np.concatenate([f[:, 1], f[:, 2], f[:, 0]])
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(used), len(used)))
    n, _ = connected_components(graph, directed=False)
    return int(n)


def boundary_loop_count(mesh: TriangleMesh) -> int:
    """Number of closed loops formed by edges used by a single face."""
    edges, counts = edge_face_counts(mesh)
    boundary = edges[counts == 1]
    if not len(boundary):
        return 0
    used = np.unique(boundary)
    remap = {v: i for i, v in enumerate(used)}
    rows = np.array([remap[v] for v in boundary[:, 0]])
    cols = np.array([remap[v] for v in boundary[:, 1]])
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(used), len(used)))
    n, _ = connected_components(graph, directed=False)
    return int(n)


def signed_volume(mesh: TriangleMesh) -> float:
    tri = mesh.triangles()
    return float(np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum() / 6.0)


def sample_surface(mesh: TriangleMesh, n_samples: int, seed: int = 0) -> np.ndarray:
    """Area-weighted uniform surface samples, reproducible for a given seed."""
    points, _ = trimesh.sample.sample_surface(mesh.to_trimesh(), n_samples, seed=seed)
    return np.asarray(points)
