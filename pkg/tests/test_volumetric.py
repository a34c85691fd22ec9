import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import yaw
from udtnet.errors import GeometryError, ParameterError, ParseError, ValidationError
from udtnet.pose_trace import Pose
from udtnet.volumetric import (
    Frustum,
    PointCloudFrame,
    TileGrid,
    parse_ply_ascii,
    parse_xyz_csv,
    read_frames,
    select_tiles,
    synth_frame,
    tile_frame,
    vchr,
    visible_points,
)


def quat_rotate_inverse(q, v):
    """Rotate world vector v into the body frame: q* v q, written out by hand."""
    w, x, y, z = q
    # conjugate
    cw, cx, cy, cz = w, -x, -y, -z
    # t = q* (0, v)
    tw = -cx * v[0] - cy * v[1] - cz * v[2]
    tx = cw * v[0] + cy * v[2] - cz * v[1]
    ty = cw * v[1] - cx * v[2] + cz * v[0]
    tz = cw * v[2] + cx * v[1] - cy * v[0]
    # t q
    return (
        tw * x + tx * w + ty * z - tz * y,
        tw * y - tx * z + ty * w + tz * x,
        tw * z + tx * y - ty * x + tz * w,
    )


def oracle_visible(points, pose, cam):
    th = math.tan(math.radians(cam.hfov_deg) / 2)
    tv = math.tan(math.radians(cam.vfov_deg) / 2)
    out = set()
    for i, p in enumerate(points):
        rel = [p[k] - pose.position[k] for k in range(3)]
        x, y, z = quat_rotate_inverse(pose.orientation, rel)
        if cam.near_m <= z <= cam.far_m and abs(x) <= z * th and abs(y) <= z * tv:
            out.add(i)
    return out


class TestTypes:
    def test_frame_needs_points(self):
        with pytest.raises(ValidationError):
            PointCloudFrame(0, np.empty((0, 3)))

    def test_frame_finite(self):
        with pytest.raises(ValidationError):
            PointCloudFrame(0, [(0, 0, math.nan)])

    @pytest.mark.parametrize("lo,hi,dims", [((0, 0, 0), (1, 0, 1), (1, 1, 1)), ((0, 0, 0), (1, 1, 1), (0, 1, 1))])
    def test_bad_grid(self, lo, hi, dims):
        with pytest.raises(ValidationError):
            TileGrid(lo, hi, dims)

    @pytest.mark.parametrize("kw", [dict(hfov_deg=0), dict(vfov_deg=180), dict(near_m=0), dict(near_m=2, far_m=1)])
    def test_bad_frustum(self, kw):
        with pytest.raises(ValidationError):
            Frustum(**kw)


class TestTiling:
    def test_single_cell(self):
        fr = synth_frame(0, 50, (0, 0, 0), (1, 1, 1))
        tf = tile_frame(fr, TileGrid((0, 0, 0), (1, 1, 1), (1, 1, 1)))
        assert set(tf.assignment.tolist()) == {0}

    def test_cube_corners_distinct(self):
        corners = [(a, b, c) for a in (0, 1) for b in (0, 1) for c in (0, 1)]
        tf = tile_frame(PointCloudFrame(0, corners), TileGrid((0, 0, 0), (1, 1, 1), (2, 2, 2)))
        # half-open cells, max face folded into the last cell: id = (ix * 2 + iy) * 2 + iz
        assert tf.assignment.tolist() == [(a * 2 + b) * 2 + c for a, b, c in corners]

    def test_max_boundary_is_last_tile(self):
        g = TileGrid((0, 0, 0), (1, 2, 3), (3, 4, 5))
        tf = tile_frame(PointCloudFrame(0, [(1, 2, 3)]), g)
        assert tf.assignment[0] == g.n_tiles - 1

    def test_outside_names_index(self):
        with pytest.raises(GeometryError, match="point 1"):
            tile_frame(PointCloudFrame(0, [(0.5, 0.5, 0.5), (1.5, 0, 0)]), TileGrid((0, 0, 0), (1, 1, 1)))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 1000), st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5)))
    def test_partition(self, seed, dims):
        fr = synth_frame(seed, 300, (-1, 0, 2), (1, 3, 4))
        g = TileGrid((-1, 0, 2), (1, 3, 4), dims)
        tf = tile_frame(fr, g)
        assert tf.assignment.min() >= 0 and tf.assignment.max() < g.n_tiles
        assert tf.tile_counts.sum() == len(fr)
        # every point sits inside the box of its tile
        box = g.tile_corners[tf.assignment]
        assert np.all(fr.points >= box.min(axis=1) - 1e-12)
        assert np.all(fr.points <= box.max(axis=1) + 1e-12)


class TestVisibility:
    def test_behind_camera(self, wide_cam):
        assert visible_points(PointCloudFrame(0, [(0, 0, -1)]), Pose(), wide_cam) == set()

    def test_on_axis(self):
        assert visible_points(PointCloudFrame(0, [(0, 0, 1)]), Pose(), Frustum(60, 60, 0.1, 10)) == {0}

    def test_fov_edges(self, wide_cam):
        fr = PointCloudFrame(0, [(0.5, 0, 1), (-0.5, 0, 1), (1.5, 0, 1)])
        assert visible_points(fr, Pose(), wide_cam) == {0, 1}

    def test_rotated_camera(self, wide_cam):
        # turned 90 degrees to the right: +z of the device points along world +x
        fr = PointCloudFrame(0, [(2, 0, 0), (0, 0, 2)])
        assert visible_points(fr, Pose((0, 0, 0), yaw(90)), wide_cam) == {0}

    def test_matches_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            pts = rng.uniform(-3, 3, (40, 3))
            pose = Pose(tuple(rng.normal(size=3)), tuple(rng.normal(size=4)))
            cam = Frustum(rng.uniform(20, 150), rng.uniform(20, 150), 0.1, rng.uniform(1, 6))
            assert visible_points(PointCloudFrame(0, pts), pose, cam) == oracle_visible(pts, pose, cam)


class TestSelectTiles:
    def test_enclosing_frustum_selects_all(self, two_point_frame, split_grid):
        tf = tile_frame(two_point_frame, split_grid)
        cam = Frustum(120, 120, 0.1, 50)
        assert select_tiles(tf, Pose((0, 0, -5)), cam) == {0, 1}

    def test_far_plane_short_selects_none(self, two_point_frame, split_grid):
        tf = tile_frame(two_point_frame, split_grid)
        assert select_tiles(tf, Pose((0, 0, -5)), Frustum(90, 90, 0.1, 1.0)) == set()

    def test_half_space(self, two_point_frame, split_grid):
        # 60 degree frustum yawed 45 degrees left covers directions 15..75 degrees left of +z
        tf = tile_frame(two_point_frame, split_grid)
        got = select_tiles(tf, Pose((0, 0, 0), yaw(-45)), Frustum(60, 60, 0.1, 10))
        assert got == {int(tf.assignment[0])} == {0}

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10**6))
    def test_conservative(self, seed):
        rng = np.random.default_rng(seed)
        fr = synth_frame(seed, 500, (-1, -1, -1), (1, 1, 1))
        g = TileGrid((-1, -1, -1), (1, 1, 1), tuple(rng.integers(1, 7, 3)))
        tf = tile_frame(fr, g)
        pose = Pose(tuple(rng.uniform(-3, 3, 3)), tuple(rng.normal(size=4)))
        cam = Frustum(rng.uniform(10, 120), rng.uniform(10, 120), 0.1, rng.uniform(0.5, 6))
        sel = select_tiles(tf, pose, cam)
        vis = visible_points(fr, pose, cam)
        assert {int(tf.assignment[i]) for i in vis} <= sel
        if vis:
            assert vchr(sel, tf, pose, cam) == 1.0


class TestVchr:
    def test_full_delivery(self, two_point_frame, split_grid, wide_cam):
        tf = tile_frame(two_point_frame, split_grid)
        assert vchr({0, 1}, tf, Pose(), wide_cam) == 1.0

    def test_nothing_delivered(self, two_point_frame, split_grid, wide_cam):
        tf = tile_frame(two_point_frame, split_grid)
        assert vchr(set(), tf, Pose(), wide_cam) == 0.0

    def test_half(self, two_point_frame, split_grid, wide_cam):
        tf = tile_frame(two_point_frame, split_grid)
        assert oracle_visible(two_point_frame.points, Pose(), wide_cam) == {0, 1}
        assert vchr({int(tf.assignment[0])}, tf, Pose(), wide_cam) == 0.5

    def test_empty_viewport_is_one(self, two_point_frame, split_grid, wide_cam):
        tf = tile_frame(two_point_frame, split_grid)
        assert vchr(set(), tf, Pose((0, 0, 0), yaw(180)), wide_cam) == 1.0

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10**6), st.sets(st.integers(0, 26)), st.sets(st.integers(0, 26)))
    def test_monotone_in_delivery(self, seed, d1, d2):
        rng = np.random.default_rng(seed)
        fr = synth_frame(seed, 200, (-1, -1, -1), (1, 1, 1))
        tf = tile_frame(fr, TileGrid((-1, -1, -1), (1, 1, 1), (3, 3, 3)))
        pose = Pose((0, 0, -2.0), tuple(rng.normal(size=4) * 0.1 + [1, 0, 0, 0]))
        cam = Frustum(50, 50, 0.1, 10)
        small = vchr(d1, tf, pose, cam)
        big = vchr(d1 | d2, tf, pose, cam)
        assert 0.0 <= small <= big <= 1.0


class TestSynthAndIo:
    def test_single_point(self):
        fr = synth_frame(1, 1, (0, 0, 0), (1, 1, 1))
        assert len(fr) == 1 and np.all((fr.points >= 0) & (fr.points <= 1))

    def test_determinism(self):
        a, b = synth_frame(9, 100, (0, 0, 0), (1, 1, 1)), synth_frame(9, 100, (0, 0, 0), (1, 1, 1))
        assert np.array_equal(a.points, b.points)

    def test_containment(self):
        fr = synth_frame(3, 10_000, (-2, 0, 1), (2, 1, 3))
        assert np.all(fr.points >= [-2, 0, 1]) and np.all(fr.points <= [2, 1, 3])

    def test_zero_points(self):
        with pytest.raises(ParameterError):
            synth_frame(0, 0, (0, 0, 0), (1, 1, 1))

    def test_ply(self):
        text = "\n".join([
            "ply", "format ascii 1.0", "element vertex 2", "property float x", "property float y",
            "property float z", "property uchar red", "element face 0",
            "property list uchar int vertex_indices", "end_header", "1 2 3 255", "4 5 6 0", "",
        ])
        fr = parse_ply_ascii(text)
        assert fr.points.tolist() == [[1, 2, 3], [4, 5, 6]]

    def test_ply_binary_rejected(self):
        with pytest.raises(ParseError):
            parse_ply_ascii("ply\nformat binary_little_endian 1.0\nelement vertex 0\nend_header\n")

    def test_xyz_csv(self):
        assert parse_xyz_csv("x,y,z\n1,2,3\n").points.tolist() == [[1, 2, 3]]
        with pytest.raises(ParseError, match="line 2"):
            parse_xyz_csv("1,2,3\n1,2\n")

    def test_read_frames(self, tmp_path):
        (tmp_path / "b.csv").write_text("0,0,0\n")
        (tmp_path / "a.ply").write_text("ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\n"
                                        "property float y\nproperty float z\nend_header\n1 1 1\n")
        frames = read_frames(tmp_path)
        assert [f.points.tolist() for f in frames] == [[[1, 1, 1]], [[0, 0, 0]]]
