"""Template body mesh: construction, upsampling, joint regression, geodesics.

The template is a procedurally generated body-like surface: a chain of
tube segments (rings of vertices around a vertical centerline, closed by
two cap vertices) whose per-segment radii and lengths get a small seeded
jitter.  A coarse version of the same chain, sharing every ring-stride-th
ring, provides the low-resolution vertex set the model regresses; a fixed
convex-weight matrix lifts coarse vertices back to the full mesh.

Units are centimeters throughout.  Edge lengths are quantized to 2^-20 cm
at construction so that shortest-path sums are exact in double precision
(any summation order yields the identical float), which keeps graph
distance comparisons against all-pairs oracles exact.
"""

from __future__ import annotations

import heapq
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DataError, ShapeError

MESH_MAGIC = b"GCMESH1\x00"

_LENGTH_QUANTUM = 2.0**-20


@dataclass(frozen=True)
class MeshConfig:
    """Extents of the capsule-chain template."""

    v_full: int = 386
    v_coarse: int = 98
    joints: int = 8
    ring_size: int = 6
    height_cm: float = 16.0

    def validate(self):
        if self.joints < 2:
            raise ConfigError(f"need at least 2 joints, got {self.joints}")
        if self.v_coarse >= self.v_full:
            raise ConfigError(f"v_coarse {self.v_coarse} must be < v_full {self.v_full}")
        for name, v in (("v_full", self.v_full), ("v_coarse", self.v_coarse)):
            if (v - 2) % self.ring_size:
                raise ConfigError(f"{name}={v} is not rings*{self.ring_size}+2")
        rings = self.full_rings
        if rings % self.joints:
            raise ConfigError(f"{rings} rings do not split into {self.joints} segments")
        if rings % self.coarse_rings:
            raise ConfigError(f"coarse rings {self.coarse_rings} do not divide {rings}")

    @property
    def full_rings(self) -> int:
        return (self.v_full - 2) // self.ring_size

    @property
    def coarse_rings(self) -> int:
        return (self.v_coarse - 2) // self.ring_size


@dataclass
class MeshTemplate:
    """Immutable template mesh plus the fixed linear operators built on it."""

    config: MeshConfig
    seed: int
    rest_vertices: np.ndarray  # (v_full, 3) cm
    faces: np.ndarray  # (n_faces, 3) int32
    coarse_rest_vertices: np.ndarray  # (v_coarse, 3) cm
    coarse_faces: np.ndarray  # int32
    upsample_matrix: np.ndarray  # (v_full, v_coarse), rows sum to 1
    joint_regressor: np.ndarray  # (joints, v_full), rows sum to 1
    edges: np.ndarray  # (n_edges, 2) int32, u < v
    edge_lengths: np.ndarray  # (n_edges,) cm, dyadic rationals
    segment_ids: np.ndarray  # (v_full,) int32, body segment per vertex
    rest_pivots: np.ndarray  # (joints, 3) chain pivot points in rest pose
    upsample_residual: float  # max |U @ coarse_rest - rest| recorded at build
    _adjacency: list | None = field(default=None, repr=False)

    @property
    def v_full(self) -> int:
        return self.rest_vertices.shape[0]

    @property
    def v_coarse(self) -> int:
        return self.coarse_rest_vertices.shape[0]

    @property
    def n_joints(self) -> int:
        return self.joint_regressor.shape[0]

    def neighbor_lists(self):
        """Per-vertex [(neighbor, edge length)] lists, built once."""
        if self._adjacency is None:
            adj = [[] for _ in range(self.v_full)]
            for (u, v), w in zip(self.edges, self.edge_lengths):
                adj[u].append((int(v), float(w)))
                adj[v].append((int(u), float(w)))
            self._adjacency = adj
        return self._adjacency


def _ring_profile(config: MeshConfig, rng: np.random.Generator):
    """Per-ring (height, radius) along the chain, with seeded segment jitter."""
    rings = config.full_rings
    per_seg = rings // config.joints
    # Body-ish radius plan: slim ends, bulging middle, rounded top.
    base = np.array([0.55, 0.8, 1.05, 1.3, 1.35, 1.15, 0.7, 1.0])
    if config.joints != base.size:
        base = np.interp(
            np.linspace(0, 1, config.joints), np.linspace(0, 1, base.size), base
        )
    seg_radius = base * (1.0 + 0.1 * rng.uniform(-1.0, 1.0, size=config.joints))
    seg_length = np.full(config.joints, config.height_cm / config.joints) * (
        1.0 + 0.08 * rng.uniform(-1.0, 1.0, size=config.joints)
    )

    heights = np.zeros(rings)
    radii = np.zeros(rings)
    h = 0.0
    for j in range(config.joints):
        r0 = seg_radius[j]
        r1 = seg_radius[min(j + 1, config.joints - 1)]
        for k in range(per_seg):
            t = k / per_seg
            idx = j * per_seg + k
            heights[idx] = h + t * seg_length[j]
            radii[idx] = (1 - t) * r0 + t * r1
        h += seg_length[j]
    return heights, radii, seg_length


def _chain_mesh(heights, radii, ring_size):
    """Vertices and faces of one capped tube: bottom cap, rings, top cap."""
    rings = heights.size
    angles = 2.0 * np.pi * np.arange(ring_size) / ring_size
    verts = [np.array([0.0, heights[0] - radii[0], 0.0])]
    for k in range(rings):
        for a in angles:
            verts.append(np.array([radii[k] * np.cos(a), heights[k], radii[k] * np.sin(a)]))
    verts.append(np.array([0.0, heights[-1] + radii[-1], 0.0]))
    verts = np.asarray(verts)

    def ring_idx(k, j):
        return 1 + k * ring_size + (j % ring_size)

    faces = []
    for j in range(ring_size):
        faces.append((0, ring_idx(0, j + 1), ring_idx(0, j)))
    for k in range(rings - 1):
        for j in range(ring_size):
            a, b = ring_idx(k, j), ring_idx(k, j + 1)
            c, d = ring_idx(k + 1, j + 1), ring_idx(k + 1, j)
            faces.append((a, b, c))
            faces.append((a, c, d))
    top = verts.shape[0] - 1
    for j in range(ring_size):
        faces.append((top, ring_idx(rings - 1, j), ring_idx(rings - 1, j + 1)))
    return verts, np.asarray(faces, dtype=np.int32)


def _edges_from_faces(faces, vertices):
    pairs = set()
    for a, b, c in faces:
        for u, v in ((a, b), (b, c), (a, c)):
            pairs.add((min(u, v), max(u, v)))
    edges = np.asarray(sorted(pairs), dtype=np.int32)
    lengths = np.linalg.norm(vertices[edges[:, 0]] - vertices[edges[:, 1]], axis=1)
    lengths = np.round(lengths / _LENGTH_QUANTUM) * _LENGTH_QUANTUM
    return edges, lengths


def _nearest_interp_matrix(targets, anchors, k=4):
    """Convex inverse-distance weights onto the <= k nearest anchor points."""
    mat = np.zeros((targets.shape[0], anchors.shape[0]))
    for i, p in enumerate(targets):
        d = np.linalg.norm(anchors - p, axis=1)
        near = np.argsort(d)[:k]
        if d[near[0]] < 1e-9:
            mat[i, near[0]] = 1.0
            continue
        w = 1.0 / d[near]
        mat[i, near] = w / w.sum()
    return mat


def _check_connected(n_vertices, edges):
    seen = np.zeros(n_vertices, dtype=bool)
    adj = [[] for _ in range(n_vertices)]
    for u, v in edges:
        adj[u].append(v)
        adj[v].append(u)
    stack = [0]
    seen[0] = True
    while stack:
        u = stack.pop()
        for v in adj[u]:
            if not seen[v]:
                seen[v] = True
                stack.append(v)
    return bool(seen.all())


def build_template(config: MeshConfig, rng_seed: int) -> MeshTemplate:
    """Deterministically build the capsule-chain template for (config, seed)."""
    config.validate()
    rng = np.random.default_rng(rng_seed)
    heights, radii, seg_length = _ring_profile(config, rng)

    verts, faces = _chain_mesh(heights, radii, config.ring_size)
    stride = config.full_rings // config.coarse_rings
    coarse_verts, coarse_faces = _chain_mesh(
        heights[::stride], radii[::stride], config.ring_size
    )

    edges, edge_lengths = _edges_from_faces(faces, verts)
    if not _check_connected(verts.shape[0], edges):
        raise ConfigError("template construction produced a disconnected edge graph")

    upsample = _nearest_interp_matrix(verts, coarse_verts)
    residual = float(np.abs(upsample @ coarse_verts - verts).max())

    per_seg = config.full_rings // config.joints
    segment_ids = np.empty(verts.shape[0], dtype=np.int32)
    segment_ids[0] = 0
    segment_ids[-1] = config.joints - 1
    for k in range(config.full_rings):
        seg = k // per_seg
        segment_ids[1 + k * config.ring_size : 1 + (k + 1) * config.ring_size] = seg

    regressor = np.zeros((config.joints, verts.shape[0]))
    for j in range(config.joints):
        members = segment_ids == j
        regressor[j, members] = 1.0 / members.sum()

    bounds = np.concatenate([[heights[0]], np.cumsum(seg_length)[:-1] + heights[0]])
    pivots = np.stack([np.zeros_like(bounds), bounds, np.zeros_like(bounds)], axis=1)

    return MeshTemplate(
        config=config,
        seed=rng_seed,
        rest_vertices=verts,
        faces=faces,
        coarse_rest_vertices=coarse_verts,
        coarse_faces=coarse_faces,
        upsample_matrix=upsample,
        joint_regressor=regressor,
        edges=edges,
        edge_lengths=edge_lengths,
        segment_ids=segment_ids,
        rest_pivots=pivots,
        upsample_residual=residual,
    )


# ---------------------------------------------------------------------------
# differentiable linear operators


def upsample(coarse_vertices: Tensor, template: MeshTemplate) -> Tensor:
    """Lift coarse vertices to the full mesh via the fixed convex-weight matrix."""
    if coarse_vertices.shape != (template.v_coarse, 3):
        raise ShapeError(
            f"upsample expects {(template.v_coarse, 3)}, got {coarse_vertices.shape}"
        )
    return ad.matmul(Tensor(template.upsample_matrix), coarse_vertices)


def regress_joints(full_vertices: Tensor, template: MeshTemplate) -> Tensor:
    """Per-segment joint positions as fixed convex combinations of vertices."""
    if full_vertices.shape != (template.v_full, 3):
        raise ShapeError(
            f"regress_joints expects {(template.v_full, 3)}, got {full_vertices.shape}"
        )
    return ad.matmul(Tensor(template.joint_regressor), full_vertices)


# ---------------------------------------------------------------------------
# surface distances


def geodesic_distances(template: MeshTemplate, sources) -> Tensor:
    """Multi-source shortest-path distance (cm) over the mesh edge graph."""
    sources = list(sources)
    if not sources:
        raise ContractError("geodesic_distances needs at least one source vertex")
    n = template.v_full
    for s in sources:
        if not 0 <= s < n:
            raise ContractError(f"source vertex {s} outside [0, {n})")
    adj = template.neighbor_lists()
    dist = np.full(n, np.inf)
    heap = []
    for s in sources:
        dist[s] = 0.0
        heapq.heappush(heap, (0.0, s))
    while heap:
        d, u = heapq.heappop(heap)
        if d > dist[u]:
            continue
        for v, w in adj[u]:
            nd = d + w
            if nd < dist[v]:
                dist[v] = nd
                heapq.heappush(heap, (nd, v))
    return Tensor(dist)


# ---------------------------------------------------------------------------
# posing (used by the scene generator)


def _rot_x(t):
    c, s = np.cos(t), np.sin(t)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _rot_z(t):
    c, s = np.cos(t), np.sin(t)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def pose_vertices(template: MeshTemplate, pose_params) -> np.ndarray:
    """Deform the rest mesh by per-joint rigid rotations along the chain.

    The first joints-1 parameters bend about x at each internal pivot, the
    following ones bend about z; extras are ignored.
    """
    pose = np.asarray(pose_params, dtype=np.float64).reshape(-1)
    nj = template.n_joints
    thx = np.zeros(nj)
    thz = np.zeros(nj)
    nx = min(pose.size, nj - 1)
    thx[1 : 1 + nx] = pose[:nx]
    nz = min(max(pose.size - (nj - 1), 0), nj - 1)
    thz[1 : 1 + nz] = pose[nj - 1 : nj - 1 + nz]

    verts = template.rest_vertices.copy()
    pivots = template.rest_pivots.copy()
    seg = template.segment_ids
    for j in range(1, nj):
        if thx[j] == 0.0 and thz[j] == 0.0:
            continue
        rot = _rot_x(thx[j]) @ _rot_z(thz[j])
        p = pivots[j]
        vmask = seg >= j
        verts[vmask] = (verts[vmask] - p) @ rot.T + p
        pmask = np.arange(nj) > j
        pivots[pmask] = (pivots[pmask] - p) @ rot.T + p
    return verts


def coarse_adjacency(template: MeshTemplate) -> np.ndarray:
    """Row-normalized coarse-mesh adjacency with self-loops, rows sum to 1."""
    n = template.v_coarse
    a = np.eye(n)
    for f in template.coarse_faces:
        for u, v in ((f[0], f[1]), (f[1], f[2]), (f[0], f[2])):
            a[u, v] = 1.0
            a[v, u] = 1.0
    return a / a.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# serialization


def _write_array(fh, arr, dtype):
    fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def _read_array(buf, offset, count, dtype):
    dt = np.dtype(dtype)
    end = offset + count * dt.itemsize
    if end > len(buf):
        raise DataError(f"template file truncated at byte {offset}")
    return np.frombuffer(buf[offset:end], dtype=dt).copy(), end


def write_template(template: MeshTemplate, path):
    """Single self-describing binary file: magic, extents, then raw arrays."""
    with open(path, "wb") as fh:
        fh.write(MESH_MAGIC)
        extents = (
            template.v_full,
            template.v_coarse,
            template.n_joints,
            template.faces.shape[0],
            template.coarse_faces.shape[0],
            template.edges.shape[0],
            template.config.ring_size,
            template.seed,
        )
        fh.write(struct.pack("<8i", *extents))
        fh.write(struct.pack("<2d", template.config.height_cm, template.upsample_residual))
        _write_array(fh, template.rest_vertices, "<f8")
        _write_array(fh, template.faces, "<i4")
        _write_array(fh, template.coarse_rest_vertices, "<f8")
        _write_array(fh, template.coarse_faces, "<i4")
        _write_array(fh, template.upsample_matrix, "<f8")
        _write_array(fh, template.joint_regressor, "<f8")
        _write_array(fh, template.edges, "<i4")
        _write_array(fh, template.edge_lengths, "<f8")
        _write_array(fh, template.segment_ids, "<i4")
        _write_array(fh, template.rest_pivots, "<f8")


def read_template(path) -> MeshTemplate:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != MESH_MAGIC:
        raise DataError(f"{path}: not a template file (bad magic {buf[:8]!r})")
    vf, vc, nj, nf, nfc, ne, ring, seed = struct.unpack_from("<8i", buf, 8)
    height, residual = struct.unpack_from("<2d", buf, 40)
    off = 56
    rest, off = _read_array(buf, off, vf * 3, "<f8")
    faces, off = _read_array(buf, off, nf * 3, "<i4")
    coarse, off = _read_array(buf, off, vc * 3, "<f8")
    cfaces, off = _read_array(buf, off, nfc * 3, "<i4")
    ups, off = _read_array(buf, off, vf * vc, "<f8")
    reg, off = _read_array(buf, off, nj * vf, "<f8")
    edges, off = _read_array(buf, off, ne * 2, "<i4")
    lengths, off = _read_array(buf, off, ne, "<f8")
    segs, off = _read_array(buf, off, vf, "<i4")
    pivots, off = _read_array(buf, off, nj * 3, "<f8")
    if off != len(buf):
        raise DataError(f"{path}: {len(buf) - off} trailing bytes after template payload")
    config = MeshConfig(v_full=vf, v_coarse=vc, joints=nj, ring_size=ring, height_cm=height)
    return MeshTemplate(
        config=config,
        seed=seed,
        rest_vertices=rest.reshape(vf, 3),
        faces=faces.reshape(nf, 3),
        coarse_rest_vertices=coarse.reshape(vc, 3),
        coarse_faces=cfaces.reshape(nfc, 3),
        upsample_matrix=ups.reshape(vf, vc),
        joint_regressor=reg.reshape(nj, vf),
        edges=edges.reshape(ne, 2),
        edge_lengths=lengths,
        segment_ids=segs,
        rest_pivots=pivots.reshape(nj, 3),
        upsample_residual=residual,
    )
