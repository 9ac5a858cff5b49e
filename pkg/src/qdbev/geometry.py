"""Pinhole camera rig, BEV pillar grid, view mask and synthetic scenes.

World frame: x/y span the ground plane, z is height. A camera of yaw
``psi`` looks along ``(cos psi, sin psi, 0)``. Its image ``u`` axis runs
along ``(-sin psi, cos psi, 0)`` and ``v`` grows with world height, so the
world-to-camera rotation is proper (det = +1).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import seeded_rng

OBJECT_HEIGHT = 0.0  # m, objects sit on the ground plane
OBJECT_RADIUS = 0.4  # m, world radius behind the disc size


@dataclass(frozen=True)
class Camera:
    extrinsic: np.ndarray  # 4x4 world -> camera
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        ext = np.asarray(self.extrinsic, dtype=np.float64)
        if ext.shape != (4, 4):
            raise ValueError(f"extrinsic must be 4x4, got {ext.shape}")
        rot = ext[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-9) or np.linalg.det(rot) < 0:
            raise ValueError("extrinsic rotation must be orthonormal with det +1")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        object.__setattr__(self, "extrinsic", ext)

    @classmethod
    def from_yaw(cls, yaw_deg: float, position=(0.0, 0.0, 1.0), fov_deg: float = 70.0,
                 image_size=(32, 32)) -> "Camera":
        """Camera at ``position`` looking horizontally with yaw ``yaw_deg``."""
        w, h = image_size
        psi = math.radians(yaw_deg)
        fwd = np.array([math.cos(psi), math.sin(psi), 0.0])
        right = np.array([-math.sin(psi), math.cos(psi), 0.0])
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd])
        ext = np.eye(4)
        ext[:3, :3] = rot
        ext[:3, 3] = -rot @ np.asarray(position, dtype=np.float64)
        f = (w / 2.0) / math.tan(math.radians(fov_deg) / 2.0)
        return cls(ext, f, f, w / 2.0, h / 2.0, int(w), int(h))

    def transformed(self, rigid: np.ndarray) -> "Camera":
        """The same camera after moving the world by ``rigid`` (4x4)."""
        return Camera(self.extrinsic @ np.linalg.inv(rigid), self.fx, self.fy,
                      self.cx, self.cy, self.width, self.height)


@dataclass(frozen=True)
class BevGrid:
    h: int = 16
    w: int = 16
    cell_size: float = 1.0
    z_levels: tuple = (0.0, 0.5, 1.0, 1.5)
    origin: tuple | None = None  # world xy of cell (0, 0); centred on ego if None

    def __post_init__(self):
        if self.h < 1 or self.w < 1:
            raise ValueError(f"grid must have at least one cell, got {self.h}x{self.w}")
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")
        z = tuple(float(v) for v in self.z_levels)
        if not z or any(b <= a for a, b in zip(z, z[1:])):
            raise ValueError(f"z_levels must be nonempty and strictly increasing, got {z}")
        object.__setattr__(self, "z_levels", z)
        if self.origin is None:
            object.__setattr__(self, "origin", (-(self.h - 1) * self.cell_size / 2.0,
                                                -(self.w - 1) * self.cell_size / 2.0))

    @property
    def n_cells(self) -> int:
        return self.h * self.w

    def cell_centers(self) -> np.ndarray:
        """[H*W, 2] world xy of every cell, row-major over (i, j)."""
        i, j = np.meshgrid(np.arange(self.h), np.arange(self.w), indexing="ij")
        x = self.origin[0] + i.ravel() * self.cell_size
        y = self.origin[1] + j.ravel() * self.cell_size
        return np.stack([x, y], axis=1)

    def pillar_points(self) -> np.ndarray:
        """[H*W, Z, 3] world points at each cell centre and height."""
        c = self.cell_centers()
        z = np.asarray(self.z_levels)
        pts = np.empty((len(c), len(z), 3))
        pts[..., :2] = c[:, None, :]
        pts[..., 2] = z[None, :]
        return pts

    def cell_of(self, xy) -> int | None:
        """Flat cell index containing world point ``xy``, or None."""
        i = math.floor((xy[0] - self.origin[0]) / self.cell_size + 0.5)
        j = math.floor((xy[1] - self.origin[1]) / self.cell_size + 0.5)
        if 0 <= i < self.h and 0 <= j < self.w:
            return i * self.w + j
        return None


def default_rig(n_cameras: int = 6, fov_deg: float = 70.0, image_size=(32, 32),
                height: float = 1.0) -> list[Camera]:
    step = 360.0 / n_cameras
    return [Camera.from_yaw(k * step, (0.0, 0.0, height), fov_deg, image_size)
            for k in range(n_cameras)]


def project_points(cam: Camera, pts: np.ndarray):
    """Vectorised projection. Returns (uv [..., 2], visible [...])."""
    pts = np.asarray(pts, dtype=np.float64)
    cam_pts = pts @ cam.extrinsic[:3, :3].T + cam.extrinsic[:3, 3]
    depth = cam_pts[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.cx + cam.fx * cam_pts[..., 0] / depth
        v = cam.cy + cam.fy * cam_pts[..., 1] / depth
    vis = (depth > 0) & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    return np.stack([u, v], axis=-1), vis


def project_point(cam: Camera, p) -> tuple[float, float] | None:
    """Pixel (u, v) of world point ``p`` or None if behind or out of frame."""
    uv, vis = project_points(cam, np.asarray(p, dtype=np.float64)[None])
    if not vis[0]:
        return None
    return float(uv[0, 0]), float(uv[0, 1])


@dataclass
class BevMask:
    raw: np.ndarray  # [N, B, H*W, Z] in {0, 1}
    flat: np.ndarray  # [N, H*W]
    pixels: np.ndarray = field(repr=False)  # [N, H*W, Z, 2] image uv, -1 if invisible

    @property
    def n_cameras(self) -> int:
        return self.raw.shape[0]


def flatten_mask(raw: np.ndarray) -> np.ndarray:
    """Fractional visibility: mean over heights of the batch-0 slice."""
    return np.asarray(raw, dtype=np.float64)[:, 0].mean(axis=-1)


def build_bev_mask(rig: list[Camera], grid: BevGrid, batch: int = 1) -> BevMask:
    if not rig:
        raise ValueError("rig must contain at least one camera")
    pts = grid.pillar_points()
    vis, pix = [], []
    for cam in rig:
        uv, v = project_points(cam, pts)
        vis.append(v)
        pix.append(np.where(v[..., None], uv, -1.0))
    vis = np.stack(vis).astype(np.float64)  # [N, P, Z]
    raw = np.repeat(vis[:, None], batch, axis=1)
    return BevMask(raw=raw, flat=flatten_mask(raw), pixels=np.stack(pix))


# ----------------------------------------------------------------- scenes


def render_scene(objects_xy, rig: list[Camera], grid: BevGrid):
    """Render ground objects as depth-scaled discs.

    Returns ``(images [N, 1, H, W], truth [H*W])``.
    """
    cam0 = rig[0]
    images = np.zeros((len(rig), 1, cam0.height, cam0.width))
    truth = np.zeros(grid.n_cells)
    objs = np.asarray(objects_xy, dtype=np.float64).reshape(-1, 2)
    for xy in objs:
        cell = grid.cell_of(xy)
        if cell is not None:
            truth[cell] = 1.0
    if not len(objs):
        return images, truth
    centres = np.concatenate([objs, np.full((len(objs), 1), OBJECT_HEIGHT)], axis=1)
    for n, cam in enumerate(rig):
        cam_pts = centres @ cam.extrinsic[:3, :3].T + cam.extrinsic[:3, 3]
        uv, vis = project_points(cam, centres)
        vv, uu = np.meshgrid(np.arange(cam.height) + 0.5, np.arange(cam.width) + 0.5,
                             indexing="ij")
        for k in range(len(objs)):
            depth = cam_pts[k, 2]
            if depth <= 0:
                continue
            radius = cam.fx * OBJECT_RADIUS / depth
            disc = (uu - uv[k, 0]) ** 2 + (vv - uv[k, 1]) ** 2 <= radius**2
            images[n, 0][disc] = 1.0
            if vis[k]:
                images[n, 0, int(uv[k, 1]), int(uv[k, 0])] = 1.0
    return images, truth


def synthesize_scene(seed: int, n_objects: int, rig: list[Camera], grid: BevGrid):
    """Seeded scene: ``n_objects`` uniformly placed over the grid footprint."""
    if n_objects < 0:
        raise ValueError("n_objects must be nonnegative")
    rng = seeded_rng(seed)
    half = grid.cell_size / 2.0
    lo = np.array(grid.origin) - half
    hi = lo + np.array([grid.h, grid.w]) * grid.cell_size
    objs = rng.uniform(lo, hi, size=(n_objects, 2))
    return render_scene(objs, rig, grid)


# ------------------------------------------------------------------ files


def load_rig(path) -> tuple[list[Camera], BevGrid]:
    """Read a rig/grid JSON description."""
    spec = json.loads(Path(path).read_text())
    rig = [Camera.from_yaw(c["yaw_deg"], tuple(c["position"]), c["fov_deg"],
                           tuple(c["image_size"])) for c in spec["cameras"]]
    g = spec["grid"]
    grid = BevGrid(h=int(g["h"]), w=int(g["w"]), cell_size=float(g["cell_size"]),
                   z_levels=tuple(g["z_levels"]),
                   origin=tuple(g["origin"]) if "origin" in g else None)
    return rig, grid


def rig_to_json(cameras: list[dict], grid: BevGrid) -> str:
    """Serialise yaw-style camera dicts plus a grid block."""
    block = {"h": grid.h, "w": grid.w, "cell_size": grid.cell_size,
             "z_levels": list(grid.z_levels)}
    return json.dumps({"cameras": cameras, "grid": block}, indent=2)


def default_rig_spec(n_cameras: int = 6, fov_deg: float = 70.0, image_size=(32, 32),
                     height: float = 1.0) -> list[dict]:
    step = 360.0 / n_cameras
    return [{"yaw_deg": k * step, "position": [0.0, 0.0, height], "fov_deg": fov_deg,
             "image_size": list(image_size)} for k in range(n_cameras)]
