"""Triangle meshes, point clouds and the spatial queries built on them.

All coordinates are meters. Queries are pure numpy functions; callers that
need gradients (the loss module) use the nearest-point indices returned here
and recompute distances on their own differentiable tensors.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.spatial import cKDTree

BRUTE_FORCE_BELOW = 64
_CHUNK = 1 << 20  # max pair count held in memory at once


def _frozen(a, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = _frozen(self.vertices, np.float64).reshape(-1, 3)
        f = _frozen(self.faces, np.int64).reshape(-1, 3)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if not np.all(np.isfinite(v)):
            raise ValueError("mesh has non-finite vertex coordinates")
        if f.size:
            if f.min() < 0 or f.max() >= len(v):
                raise ValueError("face index out of range")
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise ValueError("degenerate face (repeated vertex index)")

    @cached_property
    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    @cached_property
    def face_areas(self) -> np.ndarray:
        t = self.triangles
        return 0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1)

    @cached_property
    def face_normals(self) -> np.ndarray:
        t = self.triangles
        n = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.where(norm > 0, norm, 1.0)

    @cached_property
    def is_watertight(self) -> bool:
        """Closed and consistently oriented: every directed edge has exactly one twin."""
        if len(self.faces) == 0:
            return False
        f = self.faces
        directed = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        key = directed[:, 0] * len(self.vertices) + directed[:, 1]
        twin = directed[:, 1] * len(self.vertices) + directed[:, 0]
        if len(np.unique(key)) != len(key):
            return False
        return bool(np.all(np.isin(twin, key)))

    @cached_property
    def volume(self) -> float:
        t = self.triangles
        return float(np.einsum("ij,ij->i", t[:, 0], np.cross(t[:, 1], t[:, 2])).sum() / 6.0)

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def transformed(self, rotation=None, translation=None) -> "TriMesh":
        v = self.vertices
        if rotation is not None:
            v = v @ np.asarray(rotation, dtype=np.float64).T
        if translation is not None:
            v = v + np.asarray(translation, dtype=np.float64)
        return TriMesh(v, self.faces)


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray

    def __post_init__(self):
        p = _frozen(self.points, np.float64).reshape(-1, 3)
        if len(p) < 1:
            raise ValueError("point cloud must contain at least one point")
        if not np.all(np.isfinite(p)):
            raise ValueError("point cloud has non-finite coordinates")
        object.__setattr__(self, "points", p)

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    origin: np.ndarray
    resolution: float
    occupancy: np.ndarray

    def __post_init__(self):
        if not self.resolution > 0:
            raise ValueError("resolution must be positive")
        if self.occupancy.ndim != 3 or min(self.occupancy.shape) < 1:
            raise ValueError("occupancy must be a non-empty 3D array")

    @property
    def count(self) -> int:
        return int(self.occupancy.sum())

    def centers(self, index) -> np.ndarray:
        return self.origin + (np.asarray(index) + 0.5) * self.resolution


def merge_meshes(meshes) -> TriMesh:
    """Concatenate meshes. Overlapping closed parts act as a union under winding-number tests."""
    verts, faces, offset = [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        faces.append(m.faces + offset)
        offset += len(m.vertices)
    return TriMesh(np.concatenate(verts), np.concatenate(faces))


# ---------------------------------------------------------------- primitives


def icosphere(subdivisions: int = 3, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> TriMesh:
    t = (1.0 + 5**0.5) / 2.0
    v = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0), (0, -1, t), (0, 1, t),
         (0, -1, -t), (0, 1, -t), (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    f = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
         (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
         (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in v]
    faces = list(f)
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return TriMesh(np.array(verts) * radius + np.asarray(center, dtype=np.float64), np.array(faces))


def box(extents=(1.0, 1.0, 1.0), center=(0.0, 0.0, 0.0)) -> TriMesh:
    h = np.asarray(extents, dtype=np.float64) / 2.0
    corners = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=np.float64)
    faces = np.array([
        [0, 1, 3], [0, 3, 2],  # -x
        [4, 6, 7], [4, 7, 5],  # +x
        [0, 4, 5], [0, 5, 1],  # -y
        [2, 3, 7], [2, 7, 6],  # +y
        [0, 2, 6], [0, 6, 4],  # -z
        [1, 5, 7], [1, 7, 3],  # +z
    ])
    return TriMesh(corners * h + np.asarray(center, dtype=np.float64), faces)


def _ring_faces(ring_a: int, ring_b: int, n: int) -> list[tuple[int, int, int]]:
    out = []
    for k in range(n):
        a0, a1 = ring_a + k, ring_a + (k + 1) % n
        b0, b1 = ring_b + k, ring_b + (k + 1) % n
        out += [(a0, a1, b1), (a0, b1, b0)]
    return out


def revolve(profile, n_around: int) -> TriMesh:
    """Closed surface of revolution about +z.

    ``profile`` lists (radius, z) from the bottom pole to the top pole; first and
    last radii must be zero (poles), interior radii positive.
    """
    profile = np.asarray(profile, dtype=np.float64)
    if profile[0, 0] != 0 or profile[-1, 0] != 0:
        raise ValueError("profile must start and end on the axis")
    phi = 2 * np.pi * np.arange(n_around) / n_around
    verts = [(0.0, 0.0, profile[0, 1])]
    rings = []
    for r, z in profile[1:-1]:
        rings.append(len(verts))
        verts += [(r * np.cos(p), r * np.sin(p), z) for p in phi]
    verts.append((0.0, 0.0, profile[-1, 1]))
    top = len(verts) - 1
    faces = [(0, rings[0] + (k + 1) % n_around, rings[0] + k) for k in range(n_around)]
    for ra, rb in zip(rings[:-1], rings[1:]):
        faces += _ring_faces(ra, rb, n_around)
    faces += [(rings[-1] + k, rings[-1] + (k + 1) % n_around, top) for k in range(n_around)]
    return TriMesh(np.array(verts), np.array(faces))


def cylinder(radius: float, height: float, segments: int = 20) -> TriMesh:
    """Capped cylinder along z, centered at the origin. Caps are fans around a center vertex."""
    h = height / 2
    return revolve([(0, -h), (radius, -h), (radius, h), (0, h)], segments)


def capsule(radius: float, length: float, segments: int = 16, cap_rings: int = 4) -> TriMesh:
    """Capsule along z: cylinder of ``length`` plus hemispherical caps (total height length + 2r)."""
    h = length / 2
    th = np.linspace(0, np.pi / 2, cap_rings + 1)[1:]
    bottom = [(radius * np.sin(a), -h - radius * np.cos(a)) for a in th]
    top = [(radius * np.sin(a), h + radius * np.cos(a)) for a in th[::-1]]
    return revolve([(0, -h - radius)] + bottom + top + [(0, h + radius)], segments)


def rotation_matrix(axis_angle) -> np.ndarray:
    r = np.asarray(axis_angle, dtype=np.float64)
    theta = np.linalg.norm(r)
    if theta < 1e-12:
        return np.eye(3)
    k = r / theta
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(theta) * K + (1 - np.cos(theta)) * K @ K


# ---------------------------------------------------------------- sampling


def sample_surface(mesh: TriMesh, n: int, seed: int) -> PointCloud:
    """Area-uniform surface samples, deterministic in ``seed``."""
    if len(mesh.faces) == 0 or mesh.face_areas.sum() <= 0:
        raise ValueError("degenerate mesh")
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas
    idx = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    t = mesh.triangles[idx]
    pts = (1 - r1)[:, None] * t[:, 0] + (r1 * (1 - r2))[:, None] * t[:, 1] + (r1 * r2)[:, None] * t[:, 2]
    return PointCloud(pts)


# ---------------------------------------------------------------- nearest neighbors


def _as_points(x) -> np.ndarray:
    if isinstance(x, PointCloud):
        return x.points
    return np.asarray(x, dtype=np.float64).reshape(-1, 3)


def nearest_neighbors(query, ref) -> tuple[np.ndarray, np.ndarray]:
    """Index of the nearest ``ref`` point for each ``query`` point, plus its squared distance.

    The squared distance is always recomputed as dx*dx + dy*dy + dz*dz so both
    search paths return identical values for identical neighbors.
    """
    q, r = _as_points(query), _as_points(ref)
    if len(q) == 0 or len(r) == 0:
        raise ValueError("nearest_neighbors needs non-empty inputs")
    if len(r) < BRUTE_FORCE_BELOW:
        idx = np.empty(len(q), dtype=np.int64)
        step = max(1, _CHUNK // len(r))
        for s in range(0, len(q), step):
            d = q[s:s + step, None, :] - r[None, :, :]
            idx[s:s + step] = np.argmin((d * d).sum(-1), axis=1)
    else:
        _, idx = cKDTree(r).query(q, k=1)
        idx = np.asarray(idx, dtype=np.int64)
    d = q - r[idx]
    return idx, (d * d).sum(-1)


def chamfer(a, b) -> float:
    """Mean squared nearest-neighbor distance a->b plus b->a (m^2)."""
    pa, pb = _as_points(a), _as_points(b)
    if len(pa) == 0 or len(pb) == 0:
        raise ValueError("chamfer needs non-empty point sets")
    return float(nearest_neighbors(pa, pb)[1].mean() + nearest_neighbors(pb, pa)[1].mean())


# ---------------------------------------------------------------- point / triangle queries


def _closest_on_triangles(p, a, b, c):
    """Closest point on triangles (a, b, c) to points p; all broadcastable (..., 3)."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = (ab * ap).sum(-1)
    d2 = (ac * ap).sum(-1)
    bp = p - b
    d3 = (ab * bp).sum(-1)
    d4 = (ac * bp).sum(-1)
    cp = p - c
    d5 = (ab * cp).sum(-1)
    d6 = (ac * cp).sum(-1)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4
    with np.errstate(divide="ignore", invalid="ignore"):
        v_ab = d1 / (d1 - d3)
        w_ac = d2 / (d2 - d6)
        w_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        denom = 1.0 / (va + vb + vc)
        v_in, w_in = vb * denom, vc * denom
    conds = [
        (d1 <= 0) & (d2 <= 0),
        (d3 >= 0) & (d4 <= d3),
        (vc <= 0) & (d1 >= 0) & (d3 <= 0),
        (d6 >= 0) & (d5 <= d6),
        (vb <= 0) & (d2 >= 0) & (d6 <= 0),
        (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0),
    ]
    # barycentric weights (of b and c) per region; region order mirrors Ericson's test sequence
    zero, one = np.zeros_like(d1), np.ones_like(d1)
    v = np.select(conds, [zero, one, v_ab, zero, zero, 1 - w_bc], default=v_in)
    w = np.select(conds, [zero, zero, zero, one, w_ac, w_bc], default=w_in)
    return a + v[..., None] * ab + w[..., None] * ac


def closest_points(mesh: TriMesh, points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Closest surface point, squared distance and face index for each query point."""
    p = _as_points(points)
    tri = mesh.triangles
    nf = len(tri)
    out_pt = np.empty_like(p)
    out_d2 = np.empty(len(p))
    out_f = np.empty(len(p), dtype=np.int64)
    step = max(1, _CHUNK // max(nf, 1))
    for s in range(0, len(p), step):
        q = p[s:s + step, None, :]
        cp = _closest_on_triangles(q, tri[None, :, 0], tri[None, :, 1], tri[None, :, 2])
        d = cp - q
        d2 = (d * d).sum(-1)
        j = np.argmin(d2, axis=1)
        rows = np.arange(len(j))
        out_pt[s:s + step] = cp[rows, j]
        out_d2[s:s + step] = d2[rows, j]
        out_f[s:s + step] = j
    return out_pt, out_d2, out_f


def winding_number(mesh: TriMesh, points) -> np.ndarray:
    """Generalized winding number (solid-angle sum / 4 pi) of the mesh at each point."""
    p = _as_points(points)
    tri = mesh.triangles
    out = np.empty(len(p))
    step = max(1, _CHUNK // max(len(tri), 1))
    for s in range(0, len(p), step):
        q = p[s:s + step, None, :]
        a, b, c = tri[None, :, 0] - q, tri[None, :, 1] - q, tri[None, :, 2] - q
        la, lb, lc = (np.linalg.norm(x, axis=-1) for x in (a, b, c))
        num = (a * np.cross(b, c)).sum(-1)
        den = la * lb * lc + (a * b).sum(-1) * lc + (b * c).sum(-1) * la + (c * a).sum(-1) * lb
        out[s:s + step] = 2.0 * np.arctan2(num, den).sum(axis=1)
    return out / (4.0 * np.pi)


def inside(mesh: TriMesh, points) -> np.ndarray:
    """Boolean containment by winding number >= 0.5 (points on the surface may go either way)."""
    if not mesh.is_watertight:
        raise ValueError("inside/outside queries need a watertight mesh")
    p = _as_points(points)
    result = np.zeros(len(p), dtype=bool)
    lo, hi = mesh.bounds
    cand = np.all((p >= lo) & (p <= hi), axis=1)
    if cand.any():
        result[cand] = winding_number(mesh, p[cand]) >= 0.5
    return result


def signed_distance(mesh: TriMesh, points, signed: bool = True):
    """Distance to the surface, negative inside. A single 3-vector returns a float.

    ``signed=False`` gives the unsigned distance and works on open meshes.
    """
    single = np.ndim(points) == 1
    p = _as_points(points)
    _, d2, _ = closest_points(mesh, p)
    d = np.sqrt(d2)
    if signed:
        d = np.where(inside(mesh, p), -d, d)
    return float(d[0]) if single else d


# ---------------------------------------------------------------- voxelization


def _column_winding(mesh: TriMesh, origin, res: float, dims) -> np.ndarray:
    """Integer winding number at voxel centers by signed +z ray crossings per column.

    Edge functions are evaluated on canonically ordered edges and ties are given
    to exactly one of the two triangles sharing an edge, so a closed mesh is
    rasterized without gaps or double hits.
    """
    nx, ny, nz = (int(d) for d in dims)
    ox, oy, oz = (float(o) for o in origin)
    tri = mesh.triangles
    fv = mesh.faces
    x, y, z = tri[..., 0], tri[..., 1], tri[..., 2]
    area2 = (x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0])
    i0 = np.ceil((x.min(1) - ox) / res - 0.5).astype(np.int64).clip(0, nx)
    i1 = np.floor((x.max(1) - ox) / res - 0.5).astype(np.int64).clip(-1, nx - 1)
    j0 = np.ceil((y.min(1) - oy) / res - 0.5).astype(np.int64).clip(0, ny)
    j1 = np.floor((y.max(1) - oy) / res - 0.5).astype(np.int64).clip(-1, ny - 1)
    ni = np.maximum(i1 - i0 + 1, 0)
    nj = np.maximum(j1 - j0 + 1, 0)
    keep = (area2 != 0) & (ni > 0) & (nj > 0)
    diff = np.zeros((nx, ny, nz + 1), dtype=np.int32)
    tris = np.nonzero(keep)[0]
    if len(tris) == 0:
        return diff[:, :, :nz]
    counts = ni[tris] * nj[tris]
    # process in batches of triangles so the pair expansion stays bounded
    starts = np.concatenate([[0], np.cumsum(counts)])
    b0 = 0
    while b0 < len(tris):
        b1 = int(np.searchsorted(starts, starts[b0] + _CHUNK, side="right")) - 1
        b1 = max(b1, b0 + 1)
        t = np.repeat(tris[b0:b1], counts[b0:b1])
        local = np.arange(starts[b1] - starts[b0]) - np.repeat(starts[b0:b1] - starts[b0], counts[b0:b1])
        ci = i0[t] + local // nj[t]
        cj = j0[t] + local % nj[t]
        px = ox + (ci + 0.5) * res
        py = oy + (cj + 0.5) * res
        sgn_area = np.sign(area2[t])
        ok = np.ones(len(t), dtype=bool)
        e = []
        for k in range(3):
            va, vb = fv[t, k], fv[t, (k + 1) % 3]
            lo_first = va < vb
            la = np.where(lo_first, k, (k + 1) % 3)
            lb = np.where(lo_first, (k + 1) % 3, k)
            xa, ya = x[t, la], y[t, la]
            xb, yb = x[t, lb], y[t, lb]
            f = (xb - xa) * (py - ya) - (yb - ya) * (px - xa)
            s = np.where(lo_first, 1.0, -1.0)
            sigma = s * sgn_area
            ok &= (sigma * f > 0) | ((f == 0) & (sigma > 0))
            e.append(s * f)  # oriented edge function of edge k
        # barycentric z: edge k is opposite vertex (k + 2) % 3
        zc = (e[1] * z[t, 0] + e[2] * z[t, 1] + e[0] * z[t, 2]) / (e[0] + e[1] + e[2])
        kz = (np.floor((zc - oz) / res - 0.5).astype(np.int64) + 1).clip(0, nz)
        # +z ray enters the solid through faces whose outward normal points down
        contrib = (-sgn_area).astype(np.int32)
        np.add.at(diff, (ci[ok], cj[ok], kz[ok]), contrib[ok])
        b0 = b1
    return np.cumsum(diff, axis=2)[:, :, :nz]


def _grid_dims(extent: np.ndarray, res: float) -> np.ndarray:
    return np.maximum(np.ceil(extent / res - 1e-9).astype(np.int64), 1)


def voxelize_solid(mesh: TriMesh, resolution: float) -> VoxelGrid:
    """Occupancy of voxel centers on the bounding box padded by one voxel."""
    if not resolution > 0:
        raise ValueError("resolution must be positive")
    if not mesh.is_watertight:
        raise ValueError("voxelization needs a watertight mesh")
    lo, hi = mesh.bounds
    origin = lo - resolution
    dims = _grid_dims(hi - lo, resolution) + 2
    occ = _column_winding(mesh, origin, resolution, dims) >= 1
    return VoxelGrid(origin, float(resolution), occ)


def occupancy_on_grid(mesh: TriMesh, origin, resolution: float, dims) -> np.ndarray:
    if not mesh.is_watertight:
        raise ValueError("voxelization needs a watertight mesh")
    return _column_winding(mesh, np.asarray(origin, dtype=np.float64), resolution, dims) >= 1


def intersection_volume(a: TriMesh, b: TriMesh, resolution: float) -> float:
    """Volume (cm^3) of voxels whose centers lie inside both meshes, on a shared lattice."""
    if not resolution > 0:
        raise ValueError("resolution must be positive")
    if not (a.is_watertight and b.is_watertight):
        raise ValueError("voxelization needs a watertight mesh")
    (alo, ahi), (blo, bhi) = a.bounds, b.bounds
    lattice = np.minimum(alo, blo) - resolution
    lo, hi = np.maximum(alo, blo), np.minimum(ahi, bhi)
    if np.any(lo > hi):
        return 0.0
    first = np.ceil((lo - lattice) / resolution - 0.5).astype(np.int64)
    last = np.floor((hi - lattice) / resolution - 0.5).astype(np.int64)
    dims = last - first + 1
    if np.any(dims < 1):
        return 0.0
    origin = lattice + first * resolution
    occ = occupancy_on_grid(a, origin, resolution, dims)
    if not occ.any():
        return 0.0
    occ &= occupancy_on_grid(b, origin, resolution, dims)
    return float(occ.sum()) * resolution**3 * 1e6
