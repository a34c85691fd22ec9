"""Point-cloud frames, spatial tiling, frustum visibility and the VCHR metric.

Camera convention: the device looks along its body +z axis, body +x is the
horizontal image axis and body +y the vertical one. A world point ``p`` seen
from pose ``(c, R)`` has camera coordinates ``R.T @ (p - c)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import GeometryError, ParameterError, ParseError, ValidationError
from .pose_trace import Pose
from . import rotation as rot

# Corner-based plane separation rejects a tile only when it is clearly outside.
SEPARATION_EPS = 1e-9


@dataclass(frozen=True, eq=False)
class PointCloudFrame:
    frame_index: int
    points: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=float).reshape(-1, 3)
        if len(pts) < 1:
            raise ValidationError("a frame needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise ValidationError("non-finite point coordinate")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class TileGrid:
    """Axis-aligned box split into ``nx * ny * nz`` equal cells.

    Tile id of cell (ix, iy, iz) is ``(ix * ny + iy) * nz + iz``.
    """

    bounds_min: tuple[float, float, float]
    bounds_max: tuple[float, float, float]
    dims: tuple[int, int, int] = (1, 1, 1)

    def __post_init__(self):
        lo = tuple(float(v) for v in self.bounds_min)
        hi = tuple(float(v) for v in self.bounds_max)
        dims = tuple(int(d) for d in self.dims)
        if len(lo) != 3 or len(hi) != 3 or len(dims) != 3:
            raise ValidationError("bounds and dims must have 3 components")
        if not all(a < b for a, b in zip(lo, hi)):
            raise ValidationError(f"bounds_min {lo} must be below bounds_max {hi} on every axis")
        if any(d < 1 for d in dims):
            raise ValidationError(f"dims must be positive, got {dims}")
        object.__setattr__(self, "bounds_min", lo)
        object.__setattr__(self, "bounds_max", hi)
        object.__setattr__(self, "dims", dims)

    @property
    def n_tiles(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    def cell_size(self) -> np.ndarray:
        return (np.array(self.bounds_max) - np.array(self.bounds_min)) / np.array(self.dims)

    @cached_property
    def tile_corners(self) -> np.ndarray:
        """(n_tiles, 8, 3) array of tile box corners, indexed by tile id."""
        lo = np.array(self.bounds_min)
        hi = np.array(self.bounds_max)
        dims = np.array(self.dims)
        edges = [np.linspace(lo[a], hi[a], dims[a] + 1) for a in range(3)]
        ix, iy, iz = np.meshgrid(*(np.arange(d) for d in dims), indexing="ij")
        ix, iy, iz = ix.ravel(), iy.ravel(), iz.ravel()
        corners = np.empty((len(ix), 8, 3))
        for c in range(8):
            bx, by, bz = (c >> 0) & 1, (c >> 1) & 1, (c >> 2) & 1
            corners[:, c, 0] = edges[0][ix + bx]
            corners[:, c, 1] = edges[1][iy + by]
            corners[:, c, 2] = edges[2][iz + bz]
        corners.setflags(write=False)
        return corners

    @cached_property
    def tile_centers(self) -> np.ndarray:
        c = self.tile_corners.mean(axis=1)
        c.setflags(write=False)
        return c

    def assign(self, points: np.ndarray) -> np.ndarray:
        """Tile id per point; raises :class:`GeometryError` for points outside the box."""
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        lo = np.array(self.bounds_min)
        hi = np.array(self.bounds_max)
        outside = np.any((pts < lo) | (pts > hi), axis=1)
        if np.any(outside):
            i = int(np.argmax(outside))
            raise GeometryError(f"point {i} {tuple(pts[i])} lies outside the tile grid bounds")
        dims = np.array(self.dims)
        cell = np.floor((pts - lo) / (hi - lo) * dims).astype(np.int64)
        cell = np.minimum(cell, dims - 1)
        return np.ravel_multi_index(cell.T, self.dims)


@dataclass(frozen=True, eq=False)
class TiledFrame:
    frame: PointCloudFrame
    grid: TileGrid
    assignment: np.ndarray

    @cached_property
    def tile_counts(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.grid.n_tiles)


@dataclass(frozen=True)
class Frustum:
    hfov_deg: float = 90.0
    vfov_deg: float = 90.0
    near_m: float = 0.1
    far_m: float = 10.0

    def __post_init__(self):
        for name in ("hfov_deg", "vfov_deg"):
            v = getattr(self, name)
            if not 0.0 < v < 180.0:
                raise ValidationError(f"{name} must lie in (0, 180), got {v}")
        if not 0.0 < self.near_m < self.far_m:
            raise ValidationError(f"need 0 < near < far, got near={self.near_m}, far={self.far_m}")

    @property
    def tan_half_h(self) -> float:
        return math.tan(math.radians(self.hfov_deg) / 2.0)

    @property
    def tan_half_v(self) -> float:
        return math.tan(math.radians(self.vfov_deg) / 2.0)


def _camera_coords(points: np.ndarray, position, orientation) -> np.ndarray:
    r = rot.to_matrix(orientation)
    return (np.asarray(points) - np.asarray(position)) @ r


def tile_frame(frame: PointCloudFrame, grid: TileGrid) -> TiledFrame:
    assignment = grid.assign(frame.points)
    assignment.setflags(write=False)
    return TiledFrame(frame=frame, grid=grid, assignment=assignment)


def visible_mask(points: np.ndarray, position, orientation, cam: Frustum) -> np.ndarray:
    c = _camera_coords(points, position, orientation)
    x, y, z = c[..., 0], c[..., 1], c[..., 2]
    return (
        (z >= cam.near_m)
        & (z <= cam.far_m)
        & (np.abs(x) <= z * cam.tan_half_h)
        & (np.abs(y) <= z * cam.tan_half_v)
    )


def visible_points(frame: PointCloudFrame, pose: Pose, cam: Frustum) -> set[int]:
    """Indices of frame points inside the camera frustum at ``pose``."""
    mask = visible_mask(frame.points, pose.position, pose.orientation, cam)
    return set(np.flatnonzero(mask).tolist())


def selected_tile_mask(grid: TileGrid, position, orientation, cam: Frustum) -> np.ndarray:
    """Boolean mask over tile ids, True unless one frustum plane separates the tile.

    A tile is rejected only when all 8 of its corners lie strictly outside the
    same bounding plane of the frustum, so no tile holding a visible point is
    ever dropped. The maximum of a plane function over a box is reached at a
    corner and equals ``n . centre + d + sum(|n_a| * half_a)``, which is what
    gets evaluated here.
    """
    r = rot.to_matrix(orientation)
    th, tv = cam.tan_half_h, cam.tan_half_v
    # inward normals (camera frame) and offsets of near, far, left/right, bottom/top
    normals = np.array([
        [0.0, 0.0, 1.0],
        [0.0, 0.0, -1.0],
        [-1.0, 0.0, th],
        [1.0, 0.0, th],
        [0.0, -1.0, tv],
        [0.0, 1.0, tv],
    ])
    offsets = np.array([-cam.near_m, cam.far_m, 0.0, 0.0, 0.0, 0.0])
    world_n = normals @ r.T
    world_d = offsets - world_n @ np.asarray(position, dtype=float)
    reach = np.abs(world_n) @ (0.5 * grid.cell_size())
    best = grid.tile_centers @ world_n.T + (world_d + reach)
    return ~np.any(best < -SEPARATION_EPS, axis=1)


def select_tiles(tf: TiledFrame, predicted: Pose, cam: Frustum) -> set[int]:
    mask = selected_tile_mask(tf.grid, predicted.position, predicted.orientation, cam)
    return set(np.flatnonzero(mask).tolist())


def vchr(delivered: Iterable[int], tf: TiledFrame, true_pose: Pose, cam: Frustum) -> float:
    """Share of the points rendered at ``true_pose`` that belong to delivered tiles.

    Returns 1.0 when nothing is rendered.
    """
    rendered = visible_mask(tf.frame.points, true_pose.position, true_pose.orientation, cam)
    n_rendered = int(rendered.sum())
    if n_rendered == 0:
        return 1.0
    tiles = np.fromiter((int(t) for t in delivered), dtype=np.int64)
    hit = rendered & np.isin(tf.assignment, tiles)
    return int(hit.sum()) / n_rendered


def synth_frame(seed: int, n_points: int, bounds_min, bounds_max, frame_index: int = 0) -> PointCloudFrame:
    """Seeded uniform point cloud inside the given box."""
    if n_points < 1:
        raise ParameterError("n_points must be at least 1")
    rng = np.random.default_rng(seed)
    lo = np.asarray(bounds_min, dtype=float)
    hi = np.asarray(bounds_max, dtype=float)
    pts = lo + rng.random((int(n_points), 3)) * (hi - lo)
    return PointCloudFrame(frame_index=frame_index, points=pts)


def parse_ply_ascii(text: str, frame_index: int = 0) -> PointCloudFrame:
    """Read the x, y, z vertex properties of an ASCII PLY file."""
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing 'ply' magic", 1)
    n_vertex = None
    props: list[str] = []
    in_vertex = False
    body = None
    for i, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format" and parts[1] != "ascii":
            raise ParseError(f"only ascii PLY is supported, got {parts[1]}", i)
        if parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                n_vertex = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            if parts[1] == "list":
                raise ParseError("list properties on vertices are not supported", i)
            props.append(parts[-1])
        elif parts[0] == "end_header":
            body = i
            break
    if body is None or n_vertex is None:
        raise ParseError("PLY header lacks end_header or element vertex")
    try:
        cols = [props.index(a) for a in ("x", "y", "z")]
    except ValueError:
        raise ParseError("vertex element lacks x, y or z") from None
    pts = []
    for j in range(n_vertex):
        lineno = body + 1 + j
        if lineno - 1 >= len(lines):
            raise ParseError(f"expected {n_vertex} vertices, file ends early", lineno)
        fields = lines[lineno - 1].split()
        if len(fields) < len(props):
            raise ParseError(f"expected {len(props)} properties", lineno)
        try:
            pts.append([float(fields[c]) for c in cols])
        except ValueError:
            raise ParseError("non-numeric vertex coordinate", lineno) from None
    return PointCloudFrame(frame_index=frame_index, points=pts)


def parse_xyz_csv(text: str, frame_index: int = 0) -> PointCloudFrame:
    pts = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        fields = line.split(",")
        if lineno == 1 and fields[0].strip() == "x":
            continue
        if len(fields) != 3:
            raise ParseError(f"expected 3 fields, got {len(fields)}", lineno)
        try:
            pts.append([float(f) for f in fields])
        except ValueError:
            raise ParseError("non-numeric coordinate", lineno) from None
    return PointCloudFrame(frame_index=frame_index, points=pts)


def read_frames(directory) -> list[PointCloudFrame]:
    """Load ``*.ply`` / ``*.csv`` frames from a directory in sorted name order."""
    directory = Path(directory)
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in (".ply", ".csv"))
    frames = []
    for j, path in enumerate(files):
        text = path.read_text(encoding="utf-8")
        if path.suffix.lower() == ".ply":
            frames.append(parse_ply_ascii(text, frame_index=j))
        else:
            frames.append(parse_xyz_csv(text, frame_index=j))
    return frames
