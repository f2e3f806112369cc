"""Procedural scene/sample generator with exact contact ground truth.

Each sample poses the template body (kinematic chain bends drawn from a
small set of base poses plus jitter), orients it in one of three placement
modes (standing, leaning, lying), and drops it onto the support envelope
of a ground plane plus up to two axis-aligned boxes so that the closest
vertex sits within the contact epsilon.  Contact labels are recomputable
from the stored geometry: a vertex is in contact iff its unsigned
distance to the nearest scene surface is at most epsilon.

Images are flat-shaded orthographic renders from a fixed oblique camera;
body segments are color-coded so pose (and hence contact structure) is
visible, and the rasterizer's id buffers provide semantic and body-part
masks at image and feature-grid resolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, GenerationError
from .mesh import MeshTemplate, pose_vertices
from .tensorio import read_tensor_table, write_tensor_table

SAMPLE_MAGIC = b"GCSMP1\x00"
MANIFEST_NAME = "manifest.txt"

SEM_BACKGROUND, SEM_GROUND, SEM_BOX, SEM_BODY = 0, 1, 2, 3

_GROUND_COLOR = np.array([0.32, 0.42, 0.28])
_BOX_COLOR = np.array([0.62, 0.47, 0.25])
_BACKGROUND_COLOR = np.array([0.06, 0.06, 0.12])
_PART_PALETTE = np.array([
    [0.90, 0.10, 0.10],
    [0.95, 0.55, 0.05],
    [0.90, 0.90, 0.10],
    [0.15, 0.80, 0.15],
    [0.10, 0.85, 0.85],
    [0.15, 0.35, 0.95],
    [0.60, 0.15, 0.90],
    [0.95, 0.30, 0.70],
])

# Fixed oblique orthographic camera: tilt about x, then drop depth.
_CAM_TILT = 0.6
_VIEW_X = (-13.0, 13.0)
_VIEW_V = (-9.0, 17.0)

_BASE_POSES = np.array([
    [0.0] * 12,
    [0.0, 0.25, 0.45, 0.35, 0.1, 0.0, 0.0] + [0.0] * 5,  # C-bend
    [0.0, 0.0, 0.0, 0.9, 0.2, 0.0, 0.0] + [0.15, 0.0, 0.0, 0.0, 0.0],  # L-bend
    [0.0, -0.35, 0.3, 0.35, -0.3, 0.2, 0.0] + [0.0, 0.2, -0.2, 0.0, 0.0],  # S-bend
])

_MODES = ("standing", "leaning", "lying")


@dataclass(frozen=True)
class SceneConfig:
    pose_params: int = 12
    contact_epsilon_cm: float = 1.0
    max_boxes: int = 2
    image_size: int = 64
    grid_side: int = 4
    c_sem: int = 4
    c_bp: int = 9  # background + one class per body segment
    pose_jitter: float = 0.08

    def validate(self, template: MeshTemplate | None = None):
        if self.contact_epsilon_cm <= 0:
            raise ConfigError(f"contact epsilon must be > 0, got {self.contact_epsilon_cm}")
        if self.c_sem != 4:
            raise ConfigError("semantic classes are fixed: background/ground/box/body")
        if self.image_size % self.grid_side:
            raise ConfigError(
                f"image size {self.image_size} not divisible by grid side {self.grid_side}"
            )
        if not 0 <= self.max_boxes <= 2:
            raise ConfigError(f"max_boxes must be 0..2, got {self.max_boxes}")
        if template is not None and self.c_bp != template.n_joints + 1:
            raise ConfigError(
                f"c_bp={self.c_bp} must be template joints + background "
                f"= {template.n_joints + 1}"
            )


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) float64 in [0, 1]
    gt_vertices: np.ndarray  # (v_full, 3) cm
    gt_contacts: np.ndarray  # (v_full,) uint8
    sem_mask: np.ndarray  # (H, W) int32 class ids
    bp_mask: np.ndarray  # (H, W) int32 part ids (0 = background)
    sem_grid: np.ndarray  # (grid_side**2,) int32
    bp_grid: np.ndarray  # (grid_side**2,) int32
    pose: np.ndarray  # (pose_params,) stored for debugging
    boxes: np.ndarray  # (n_boxes, 6) min corner + sizes


# ---------------------------------------------------------------------------
# geometry


def surface_distances(points: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """Unsigned distance from each point to the nearest scene surface.

    The ground plane y=0 contributes |y|; each box contributes the usual
    Euclidean distance outside and the distance to the nearest face inside.
    """
    d = np.abs(points[:, 1])
    for box in boxes:
        lo = box[:3]
        hi = box[:3] + box[3:]
        center = (lo + hi) / 2.0
        half = (hi - lo) / 2.0
        q = np.abs(points - center) - half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        inside = -q.max(axis=1)  # depth below the nearest face when interior
        d = np.minimum(d, np.where(q.max(axis=1) > 0.0, outside, inside))
    return d


def contact_labels(points: np.ndarray, boxes: np.ndarray, epsilon: float) -> np.ndarray:
    return (surface_distances(points, boxes) <= epsilon).astype(np.uint8)


def _support_height(x, z, boxes):
    h = np.zeros_like(x)
    for box in boxes:
        lo, size = box[:3], box[3:]
        inside = (x >= lo[0]) & (x <= lo[0] + size[0]) & (z >= lo[2]) & (z <= lo[2] + size[2])
        h = np.where(inside, np.maximum(h, lo[1] + size[1]), h)
    return h


def _rot_y(t):
    c, s = math.cos(t), math.sin(t)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rot_z(t):
    c, s = math.cos(t), math.sin(t)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _rot_x(t):
    c, s = math.cos(t), math.sin(t)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


# ---------------------------------------------------------------------------
# rasterizer


def _project(points: np.ndarray, image_size: int):
    """World points -> (px, py, depth) under the fixed oblique camera."""
    cam = points @ _rot_x(_CAM_TILT).T
    u, v, depth = cam[:, 0], cam[:, 1], cam[:, 2]
    px = (u - _VIEW_X[0]) / (_VIEW_X[1] - _VIEW_X[0]) * image_size
    py = (1.0 - (v - _VIEW_V[0]) / (_VIEW_V[1] - _VIEW_V[0])) * image_size
    return px, py, depth


class _Raster:
    def __init__(self, image_size):
        self.size = image_size
        self.rgb = np.tile(_BACKGROUND_COLOR[:, None, None], (1, image_size, image_size))
        self.zbuf = np.full((image_size, image_size), -np.inf)
        self.sem = np.zeros((image_size, image_size), dtype=np.int32)
        self.bp = np.zeros((image_size, image_size), dtype=np.int32)

    def triangle(self, px, py, depth, color, sem_id, bp_id):
        n = self.size
        x0 = max(int(math.floor(px.min())), 0)
        x1 = min(int(math.ceil(px.max())), n - 1)
        y0 = max(int(math.floor(py.min())), 0)
        y1 = min(int(math.ceil(py.max())), n - 1)
        if x0 > x1 or y0 > y1:
            return
        denom = (py[1] - py[2]) * (px[0] - px[2]) + (px[2] - px[1]) * (py[0] - py[2])
        if abs(denom) < 1e-12:
            return
        ys, xs = np.mgrid[y0 : y1 + 1, x0 : x1 + 1]
        cx = xs + 0.5
        cy = ys + 0.5
        w0 = ((py[1] - py[2]) * (cx - px[2]) + (px[2] - px[1]) * (cy - py[2])) / denom
        w1 = ((py[2] - py[0]) * (cx - px[2]) + (px[0] - px[2]) * (cy - py[2])) / denom
        w2 = 1.0 - w0 - w1
        z = w0 * depth[0] + w1 * depth[1] + w2 * depth[2]
        hit = (w0 >= 0) & (w1 >= 0) & (w2 >= 0) & (z > self.zbuf[y0 : y1 + 1, x0 : x1 + 1])
        if not hit.any():
            return
        win = (slice(y0, y1 + 1), slice(x0, x1 + 1))
        self.zbuf[win][hit] = z[hit]
        for c in range(3):
            plane = self.rgb[c][win]
            plane[hit] = color[c]
        self.sem[win][hit] = sem_id
        self.bp[win][hit] = bp_id

    def mesh(self, vertices, faces, colors, sem_ids, bp_ids):
        px, py, depth = _project(vertices, self.size)
        for f, color, sem_id, bp_id in zip(faces, colors, sem_ids, bp_ids):
            self.triangle(px[f], py[f], depth[f], color, sem_id, bp_id)


def _box_mesh(box):
    lo, size = box[:3], box[3:]
    corners = np.array([
        lo + size * np.array([dx, dy, dz])
        for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)
    ])
    quads = [
        (0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1),
        (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3),
    ]
    faces = []
    for a, b, c, d in quads:
        faces.append((a, b, c))
        faces.append((a, c, d))
    return corners, np.asarray(faces)


def render(vertices, template, boxes, config: SceneConfig):
    """Rasterize scene + posed body; returns (image, sem_mask, bp_mask)."""
    r = _Raster(config.image_size)
    ground = np.array([
        [-25.0, 0.0, -25.0], [25.0, 0.0, -25.0], [25.0, 0.0, 25.0], [-25.0, 0.0, 25.0],
    ])
    gfaces = np.array([[0, 1, 2], [0, 2, 3]])
    r.mesh(ground, gfaces, [_GROUND_COLOR] * 2, [SEM_GROUND] * 2, [0] * 2)
    for box in boxes:
        corners, bfaces = _box_mesh(box)
        r.mesh(corners, bfaces, [_BOX_COLOR] * len(bfaces), [SEM_BOX] * len(bfaces),
               [0] * len(bfaces))
    face_seg = template.segment_ids[template.faces[:, 0]]
    colors = _PART_PALETTE[face_seg % len(_PART_PALETTE)]
    r.mesh(vertices, template.faces, colors, [SEM_BODY] * len(template.faces),
           (face_seg + 1).tolist())
    return np.clip(r.rgb, 0.0, 1.0), r.sem, r.bp


def downsample_mask(mask: np.ndarray, grid_side: int) -> np.ndarray:
    """Majority class id per grid cell; ties break toward the lowest id."""
    n = mask.shape[0]
    cell = n // grid_side
    out = np.zeros(grid_side * grid_side, dtype=np.int32)
    for gy in range(grid_side):
        for gx in range(grid_side):
            block = mask[gy * cell : (gy + 1) * cell, gx * cell : (gx + 1) * cell]
            counts = np.bincount(block.reshape(-1))
            out[gy * grid_side + gx] = int(counts.argmax())
    return out


# ---------------------------------------------------------------------------
# sample generation


def _sample_boxes(rng, n_boxes, body_xz_bounds):
    """Boxes on the ground, kept off the body footprint (1 cm margin).

    Placement picks a side region (beyond the body along x or z) that has
    room; a box is skipped when no side can hold it.
    """
    world = 11.0
    x_lo, x_hi, z_lo, z_hi = body_xz_bounds
    boxes = []
    for _ in range(n_boxes):
        size = rng.uniform([3.0, 2.0, 3.0], [8.0, 6.0, 8.0])
        sides = []
        if (x_lo - 1.0) - size[0] > -world:
            sides.append(("x", -world, x_lo - 1.0 - size[0]))
        if x_hi + 1.0 < world - size[0]:
            sides.append(("x", x_hi + 1.0, world - size[0]))
        if (z_lo - 1.0) - size[2] > -world:
            sides.append(("z", -world, z_lo - 1.0 - size[2]))
        if z_hi + 1.0 < world - size[2]:
            sides.append(("z", z_hi + 1.0, world - size[2]))
        if not sides:
            continue
        axis, lo, hi = sides[rng.integers(len(sides))]
        if axis == "x":
            corner_x = rng.uniform(lo, hi)
            corner_z = rng.uniform(-world, world - size[2])
        else:
            corner_z = rng.uniform(lo, hi)
            corner_x = rng.uniform(-world, world - size[0])
        boxes.append([corner_x, 0.0, corner_z, size[0], size[1], size[2]])
    return np.asarray(boxes) if boxes else np.zeros((0, 6))


def generate_sample(config: SceneConfig, template: MeshTemplate, rng) -> Sample:
    """One fully labeled scene; deterministic given (config, template, rng state)."""
    config.validate(template)
    eps = config.contact_epsilon_cm

    base = _BASE_POSES[rng.integers(len(_BASE_POSES))][: config.pose_params]
    pose = np.zeros(config.pose_params)
    pose[: base.size] = base
    pose += rng.normal(0.0, config.pose_jitter, size=config.pose_params)
    posed = pose_vertices(template, pose)

    mode = _MODES[rng.integers(len(_MODES))]
    roll = rng.uniform(0.0, 2.0 * math.pi)
    yaw = rng.uniform(0.0, 2.0 * math.pi)
    if mode == "standing":
        tilt = rng.uniform(0.0, 0.12)
    elif mode == "leaning":
        tilt = rng.uniform(0.45, 0.95)
    else:
        tilt = math.pi / 2.0
    rot = _rot_y(yaw) @ _rot_z(tilt) @ _rot_y(roll)
    verts = posed @ rot.T
    verts[:, 0] += rng.uniform(-3.0, 3.0)
    verts[:, 2] += rng.uniform(-3.0, 3.0)

    span = (verts[:, 0].min(), verts[:, 0].max(), verts[:, 2].min(), verts[:, 2].max())
    n_boxes = int(rng.integers(0, config.max_boxes + 1))
    boxes = _sample_boxes(rng, n_boxes, span)

    # Drop onto the support envelope so the closest vertex is within epsilon.
    support = _support_height(verts[:, 0], verts[:, 2], boxes)
    clearance = verts[:, 1] - support
    verts[:, 1] -= clearance.min() - rng.uniform(0.15, 0.7) * eps

    contacts = contact_labels(verts, boxes, eps)
    if not contacts.any():
        raise GenerationError("drop placement produced no contacts")

    image, sem_mask, bp_mask = render(verts, template, boxes, config)
    return Sample(
        image=image,
        gt_vertices=verts,
        gt_contacts=contacts,
        sem_mask=sem_mask,
        bp_mask=bp_mask,
        sem_grid=downsample_mask(sem_mask, config.grid_side),
        bp_grid=downsample_mask(bp_mask, config.grid_side),
        pose=pose,
        boxes=boxes,
    )


def generate_dataset(config: SceneConfig, template: MeshTemplate, count: int, seed: int):
    """Samples from per-index derived RNG streams; independent of generation order."""
    return [
        generate_sample(config, template, np.random.default_rng([seed, i]))
        for i in range(count)
    ]


# ---------------------------------------------------------------------------
# dataset directory IO


def _sample_tensors(s: Sample) -> dict:
    return {
        "image": s.image,
        "gt_vertices": s.gt_vertices,
        "gt_contacts": s.gt_contacts,
        "sem_mask": s.sem_mask,
        "bp_mask": s.bp_mask,
        "sem_grid": s.sem_grid,
        "bp_grid": s.bp_grid,
        "pose": s.pose,
        "boxes": s.boxes,
    }


def write_sample(s: Sample, path):
    with open(path, "wb") as fh:
        fh.write(SAMPLE_MAGIC)
        write_tensor_table(fh, _sample_tensors(s))


def read_sample(path) -> Sample:
    buf = Path(path).read_bytes()
    if buf[: len(SAMPLE_MAGIC)] != SAMPLE_MAGIC:
        raise DataError(f"{path}: bad sample magic {buf[:7]!r}")
    tensors, end = read_tensor_table(buf, len(SAMPLE_MAGIC))
    if end != len(buf):
        raise DataError(f"{path}: {len(buf) - end} trailing bytes after sample payload")
    try:
        return Sample(
            image=tensors["image"],
            gt_vertices=tensors["gt_vertices"],
            gt_contacts=tensors["gt_contacts"],
            sem_mask=tensors["sem_mask"],
            bp_mask=tensors["bp_mask"],
            sem_grid=tensors["sem_grid"],
            bp_grid=tensors["bp_grid"],
            pose=tensors["pose"],
            boxes=tensors["boxes"],
        )
    except KeyError as exc:
        raise DataError(f"{path}: sample blob is missing tensor {exc}") from exc


def write_dataset(samples, path, config_hash: str):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        write_sample(s, path / f"sample_{i:05d}.bin")
    manifest = path / MANIFEST_NAME
    manifest.write_text(
        f"format=GCSET1\nconfig_hash={config_hash}\ncount={len(samples)}\n"
    )


def read_manifest(path) -> dict:
    manifest = Path(path) / MANIFEST_NAME
    if not manifest.exists():
        raise DataError(f"no {MANIFEST_NAME} in {path}")
    out = {}
    for line in manifest.read_text().splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            out[key] = value
    if out.get("format") != "GCSET1":
        raise DataError(f"{manifest}: unknown dataset format {out.get('format')!r}")
    return out


def read_dataset(path, expected_hash: str | None = None):
    path = Path(path)
    meta = read_manifest(path)
    if expected_hash is not None and meta.get("config_hash") != expected_hash:
        raise DataError(
            f"{path}: dataset config hash {meta.get('config_hash')} does not match "
            f"expected {expected_hash}"
        )
    count = int(meta["count"])
    files = sorted(path.glob("sample_*.bin"))
    if len(files) != count:
        raise DataError(f"{path}: manifest says {count} samples, found {len(files)} files")
    return [read_sample(f) for f in files]
