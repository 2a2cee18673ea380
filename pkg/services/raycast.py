"""
All-hits ray casting against triangle meshes.

A median-split BVH is built in numpy; traversal and the Moller-Trumbore test
run in numba kernels. Hits whose incidence cosine falls below a threshold are
discarded as near-parallel, and a caller may re-cast such rays with a small
deterministic direction perturbation.
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit, prange

from services.errors import EmptyMesh
from services.mesh_io import TriangleMesh

log = logging.getLogger(__name__)

T_MIN = 1e-6
MERGE_EPS = 1e-6
LEAF_SIZE = 8
MAX_HITS = 64
_RAW_HITS = 512
_EDGE_EPS = 1e-12
_BOX_PAD = 1e-9
_STACK_SIZE = 128


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        object.__setattr__(self, "direction", d)


@dataclass(frozen=True)
class Hit:
    t: float
    face_id: int
    normal: tuple[float, float, float]
    cos_incidence: float


@dataclass(frozen=True)
class HitList:
    hits: tuple[Hit, ...] = ()
    parallel_discards: int = 0
    retried: bool = False

    def __len__(self) -> int:
        return len(self.hits)

    @property
    def t(self) -> np.ndarray:
        return np.array([h.t for h in self.hits])

    @property
    def face_ids(self) -> np.ndarray:
        return np.array([h.face_id for h in self.hits], dtype=np.int64)


@dataclass(frozen=True, eq=False)
class Bvh:
    """Flattened tree. Leaves own the contiguous slice order[start:start+count]."""

    node_min: np.ndarray
    node_max: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    count: np.ndarray
    order: np.ndarray
    v0: np.ndarray = field(repr=False)
    e1: np.ndarray = field(repr=False)
    e2: np.ndarray = field(repr=False)
    normals: np.ndarray = field(repr=False)

    @property
    def n_nodes(self) -> int:
        return len(self.left)

    def depth(self) -> int:
        deepest = 0
        stack = [(0, 1)]
        while stack:
            node, d = stack.pop()
            deepest = max(deepest, d)
            if self.left[node] >= 0:
                stack.append((self.left[node], d + 1))
                stack.append((self.right[node], d + 1))
        return deepest


@dataclass(frozen=True, eq=False)
class RayBatch:
    """Per-ray hit arrays; rows are padded past counts[i]."""

    counts: np.ndarray
    t: np.ndarray
    face: np.ndarray
    facing: np.ndarray
    parallel: np.ndarray
    retried: np.ndarray

    @property
    def overflow(self) -> int:
        return int((self.counts > self.t.shape[1]).sum())


# --- BVH construction ---

def build_bvh(mesh: TriangleMesh) -> Bvh:
    """Median split on the longest node axis until leaves hold at most LEAF_SIZE faces."""
    if not mesh.n_faces:
        raise EmptyMesh("cannot build a BVH over zero faces")
    tri = mesh.triangles()
    face_min = tri.min(axis=1)
    face_max = tri.max(axis=1)
    centroids = tri.mean(axis=1)

    node_min, node_max, left, right, start, count = [], [], [], [], [], []
    order: list[np.ndarray] = []
    n_ordered = 0

    def new_node() -> int:
        for lst in (node_min, node_max):
            lst.append(None)
        for lst in (left, right, start, count):
            lst.append(-1)
        return len(left) - 1

    stack = [(new_node(), np.arange(mesh.n_faces))]
    while stack:
        node, idx = stack.pop()
        node_min[node] = face_min[idx].min(axis=0) - _BOX_PAD
        node_max[node] = face_max[idx].max(axis=0) + _BOX_PAD
        if len(idx) <= LEAF_SIZE:
            start[node] = n_ordered
            count[node] = len(idx)
            order.append(idx)
            n_ordered += len(idx)
            continue
        axis = int(np.argmax(node_max[node] - node_min[node]))
        ranked = idx[np.argsort(centroids[idx, axis], kind="stable")]
        half = len(ranked) // 2
        lo, hi = new_node(), new_node()
        left[node], right[node] = lo, hi
        stack.append((hi, ranked[half:]))
        stack.append((lo, ranked[:half]))

    bvh = Bvh(
        node_min=np.array(node_min),
        node_max=np.array(node_max),
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        start=np.array(start, dtype=np.int64),
        count=np.array(count, dtype=np.int64),
        order=np.concatenate(order).astype(np.int64),
        v0=np.ascontiguousarray(tri[:, 0]),
        e1=np.ascontiguousarray(tri[:, 1] - tri[:, 0]),
        e2=np.ascontiguousarray(tri[:, 2] - tri[:, 0]),
        normals=np.ascontiguousarray(mesh.face_normals),
    )
    log.debug("BVH: %d faces, %d nodes, depth %d", mesh.n_faces, bvh.n_nodes, bvh.depth())
    return bvh


# --- Kernels ---

@njit(cache=True, nogil=True)
def _triangle_hit(o, d, f, v0, e1, e2, normals, cos_thr):
    """Returns (status, t, facing). status: 0 miss, 1 hit, 2 near-parallel discard."""
    px = d[1] * e2[f, 2] - d[2] * e2[f, 1]
    py = d[2] * e2[f, 0] - d[0] * e2[f, 2]
    pz = d[0] * e2[f, 1] - d[1] * e2[f, 0]
    det = e1[f, 0] * px + e1[f, 1] * py + e1[f, 2] * pz
    facing = d[0] * normals[f, 0] + d[1] * normals[f, 1] + d[2] * normals[f, 2]
    sx = o[0] - v0[f, 0]
    sy = o[1] - v0[f, 1]
    sz = o[2] - v0[f, 2]
    if abs(det) < 1e-300:
        # ray lies in or parallel to the plane; only the in-plane case is ambiguous
        dist = sx * normals[f, 0] + sy * normals[f, 1] + sz * normals[f, 2]
        if abs(dist) < 1e-12:
            return 2, 0.0, facing
        return 0, 0.0, facing
    inv = 1.0 / det
    u = (sx * px + sy * py + sz * pz) * inv
    if u < -_EDGE_EPS or u > 1.0 + _EDGE_EPS:
        return 0, 0.0, facing
    qx = sy * e1[f, 2] - sz * e1[f, 1]
    qy = sz * e1[f, 0] - sx * e1[f, 2]
    qz = sx * e1[f, 1] - sy * e1[f, 0]
    v = (d[0] * qx + d[1] * qy + d[2] * qz) * inv
    if v < -_EDGE_EPS or u + v > 1.0 + _EDGE_EPS:
        return 0, 0.0, facing
    t = (e2[f, 0] * qx + e2[f, 1] * qy + e2[f, 2] * qz) * inv
    if t <= T_MIN:
        return 0, 0.0, facing
    if abs(facing) < cos_thr:
        return 2, t, facing
    return 1, t, facing


@njit(cache=True, nogil=True)
def _finalize(raw_t, raw_f, raw_s, n_raw, t_out, f_out, s_out):
    """Sort raw hits by (t, face), merge within MERGE_EPS; returns merged count."""
    for i in range(1, n_raw):
        kt, kf, ks = raw_t[i], raw_f[i], raw_s[i]
        j = i - 1
        while j >= 0 and (raw_t[j] > kt or (raw_t[j] == kt and raw_f[j] > kf)):
            raw_t[j + 1] = raw_t[j]
            raw_f[j + 1] = raw_f[j]
            raw_s[j + 1] = raw_s[j]
            j -= 1
        raw_t[j + 1] = kt
        raw_f[j + 1] = kf
        raw_s[j + 1] = ks
    cap = t_out.shape[0]
    n = 0
    last = -1.0
    for i in range(n_raw):
        if n > 0 and raw_t[i] - last <= MERGE_EPS:
            continue
        if n < cap:
            t_out[n] = raw_t[i]
            f_out[n] = raw_f[i]
            s_out[n] = raw_s[i]
        last = raw_t[i]
        n += 1
    return n


@njit(cache=True, nogil=True)
def _ray_box(o, inv, bmin, bmax):
    tnear = 0.0
    tfar = np.inf
    for a in range(3):
        t1 = (bmin[a] - o[a]) * inv[a]
        t2 = (bmax[a] - o[a]) * inv[a]
        if t1 > t2:
            t1, t2 = t2, t1
        if t1 > tnear:
            tnear = t1
        if t2 < tfar:
            tfar = t2
        if tnear > tfar:
            return False
    return True


@njit(cache=True, nogil=True)
def _cast_one(o, d, node_min, node_max, left, right, start, count, order,
              v0, e1, e2, normals, cos_thr, t_out, f_out, s_out):
    inv = np.empty(3)
    for a in range(3):
        inv[a] = 1.0 / d[a] if d[a] != 0.0 else math.copysign(1e300, d[a])
    raw_t = np.empty(_RAW_HITS)
    raw_f = np.empty(_RAW_HITS, dtype=np.int64)
    raw_s = np.empty(_RAW_HITS)
    n_raw = 0
    n_parallel = 0
    stack = np.empty(_STACK_SIZE, dtype=np.int64)
    sp = 0
    stack[sp] = 0
    sp += 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        if not _ray_box(o, inv, node_min[node], node_max[node]):
            continue
        if left[node] < 0:
            for k in range(start[node], start[node] + count[node]):
                f = order[k]
                status, t, facing = _triangle_hit(o, d, f, v0, e1, e2, normals, cos_thr)
                if status == 1 and n_raw < _RAW_HITS:
                    raw_t[n_raw] = t
                    raw_f[n_raw] = f
                    raw_s[n_raw] = facing
                    n_raw += 1
                elif status == 2:
                    n_parallel += 1
        else:
            stack[sp] = right[node]
            stack[sp + 1] = left[node]
            sp += 2
    n = _finalize(raw_t, raw_f, raw_s, n_raw, t_out, f_out, s_out)
    return n, n_parallel


@njit(cache=True, nogil=True)
def _cast_brute_one(o, d, v0, e1, e2, normals, cos_thr, t_out, f_out, s_out):
    raw_t = np.empty(_RAW_HITS)
    raw_f = np.empty(_RAW_HITS, dtype=np.int64)
    raw_s = np.empty(_RAW_HITS)
    n_raw = 0
    n_parallel = 0
    for f in range(v0.shape[0]):
        status, t, facing = _triangle_hit(o, d, f, v0, e1, e2, normals, cos_thr)
        if status == 1 and n_raw < _RAW_HITS:
            raw_t[n_raw] = t
            raw_f[n_raw] = f
            raw_s[n_raw] = facing
            n_raw += 1
        elif status == 2:
            n_parallel += 1
    n = _finalize(raw_t, raw_f, raw_s, n_raw, t_out, f_out, s_out)
    return n, n_parallel


@njit(cache=True, nogil=True, parallel=True)
def _cast_batch(origins, dirs, node_min, node_max, left, right, start, count, order,
                v0, e1, e2, normals, cos_thr, counts, parallel, t_out, f_out, s_out):
    for i in prange(origins.shape[0]):
        n, p = _cast_one(origins[i], dirs[i], node_min, node_max, left, right, start, count,
                         order, v0, e1, e2, normals, cos_thr, t_out[i], f_out[i], s_out[i])
        counts[i] = n
        parallel[i] = p


# --- Python API ---

def _hitlist(n, n_parallel, t, f, s, normals, retried=False) -> HitList:
    hits = []
    for i in range(min(n, len(t))):
        face = int(f[i])
        hits.append(Hit(
            t=float(t[i]),
            face_id=face,
            normal=tuple(float(x) for x in normals[face]),
            cos_incidence=float(min(abs(s[i]), 1.0)),
        ))
    return HitList(hits=tuple(hits), parallel_discards=int(n_parallel), retried=retried)


def _buffers(cap):
    return np.empty(cap), np.empty(cap, dtype=np.int64), np.empty(cap)


def intersect_all(bvh: Bvh, mesh: TriangleMesh, ray: Ray,
                  parallel_cos_threshold: float = 1e-4) -> HitList:
    """Every intersection with t > T_MIN, ascending, near-parallel hits removed."""
    t, f, s = _buffers(MAX_HITS)
    n, p = _cast_one(ray.origin, ray.direction, bvh.node_min, bvh.node_max, bvh.left, bvh.right,
                     bvh.start, bvh.count, bvh.order, bvh.v0, bvh.e1, bvh.e2, bvh.normals,
                     parallel_cos_threshold, t, f, s)
    return _hitlist(n, p, t, f, s, bvh.normals)


def intersect_brute_force(mesh: TriangleMesh, ray: Ray,
                          parallel_cos_threshold: float = 1e-4) -> HitList:
    """Reference all-triangle cast; same hit semantics as intersect_all."""
    tri = mesh.triangles()
    v0 = np.ascontiguousarray(tri[:, 0])
    e1 = np.ascontiguousarray(tri[:, 1] - tri[:, 0])
    e2 = np.ascontiguousarray(tri[:, 2] - tri[:, 0])
    normals = np.ascontiguousarray(mesh.face_normals)
    t, f, s = _buffers(MAX_HITS)
    n, p = _cast_brute_one(ray.origin, ray.direction, v0, e1, e2, normals,
                           parallel_cos_threshold, t, f, s)
    return _hitlist(n, p, t, f, s, normals)


def perturb_direction(direction: np.ndarray, sigma: float, seed: int, index: int) -> np.ndarray:
    """Deterministic offset of magnitude sigma, seeded by (seed, ray index), renormalized."""
    rng = np.random.default_rng([seed, index])
    offset = rng.standard_normal(3)
    offset *= sigma / np.linalg.norm(offset)
    d = np.asarray(direction, dtype=np.float64) + offset
    return d / np.linalg.norm(d)


def intersect_all_with_retry(bvh: Bvh, mesh: TriangleMesh, ray: Ray,
                             parallel_cos_threshold: float = 1e-4, perturb_sigma: float = 1e-5,
                             seed: int = 0, index: int = 0) -> HitList:
    """Re-cast once with a perturbed direction if any hit was discarded as near-parallel."""
    first = intersect_all(bvh, mesh, ray, parallel_cos_threshold)
    if not first.parallel_discards:
        return first
    nudged = Ray(ray.origin, perturb_direction(ray.direction, perturb_sigma, seed, index))
    second = intersect_all(bvh, mesh, nudged, parallel_cos_threshold)
    return HitList(hits=second.hits, parallel_discards=second.parallel_discards, retried=True)


def cast_rays(bvh: Bvh, origins: np.ndarray, dirs: np.ndarray,
              parallel_cos_threshold: float = 1e-4, max_hits: int = MAX_HITS) -> RayBatch:
    """Batched intersect_all over (R,3) origins and unit directions."""
    origins = np.ascontiguousarray(np.broadcast_to(origins, dirs.shape), dtype=np.float64)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64)
    r = len(dirs)
    counts = np.zeros(r, dtype=np.int64)
    parallel = np.zeros(r, dtype=np.int64)
    t = np.zeros((r, max_hits))
    f = np.full((r, max_hits), -1, dtype=np.int64)
    s = np.zeros((r, max_hits))
    _cast_batch(origins, dirs, bvh.node_min, bvh.node_max, bvh.left, bvh.right, bvh.start,
                bvh.count, bvh.order, bvh.v0, bvh.e1, bvh.e2, bvh.normals,
                parallel_cos_threshold, counts, parallel, t, f, s)
    return RayBatch(counts=counts, t=t, face=f, facing=s, parallel=parallel,
                    retried=np.zeros(r, dtype=bool))


def cast_rays_with_retry(bvh: Bvh, origins: np.ndarray, dirs: np.ndarray,
                         parallel_cos_threshold: float = 1e-4, perturb_sigma: float = 1e-5,
                         seed: int = 0, max_hits: int = MAX_HITS) -> RayBatch:
    """cast_rays, then re-cast every ray that lost a near-parallel hit; retry results replace the row."""
    batch = cast_rays(bvh, origins, dirs, parallel_cos_threshold, max_hits)
    redo = np.flatnonzero(batch.parallel)
    if not len(redo):
        return batch
    log.warning("Re-casting %d ray(s) with near-parallel hits", len(redo))
    origins = np.broadcast_to(origins, dirs.shape)
    nudged = np.stack([perturb_direction(dirs[i], perturb_sigma, seed, int(i)) for i in redo])
    again = cast_rays(bvh, origins[redo], nudged, parallel_cos_threshold, max_hits)
    batch.counts[redo] = again.counts
    batch.parallel[redo] = again.parallel
    batch.t[redo] = again.t
    batch.face[redo] = again.face
    batch.facing[redo] = again.facing
    batch.retried[redo] = True
    return batch
