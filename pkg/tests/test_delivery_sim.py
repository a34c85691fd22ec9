import math

import numpy as np
import pytest

from conftest import static_trace, yaw
from udtnet.errors import ParameterError, ValidationError
from udtnet.pose_trace import Pose, PoseTrace, SynthParams, predict_pose, resample, synth_trace
from udtnet.volumetric import Frustum, TileGrid, select_tiles, synth_frame, tile_frame, vchr
from udtnet.delivery_sim import DeliveryConfig, SampleTable, run_delivery, sweep

GRID = TileGrid((-1, -1, -1), (1, 1, 1), (4, 4, 4))
CAM = Frustum(60, 45, 0.1, 10)


@pytest.fixture(scope="module")
def video():
    return [synth_frame(100 + j, 800, (-1, -1, -1), (1, 1, 1), frame_index=j) for j in range(30)]


@pytest.fixture(scope="module")
def moving():
    p = SynthParams(seed=3, duration_s=1.0, rate_hz=30.0, step_sigma_m=0.01, turn_sigma_deg=3.0,
                    volatility=0.3, start_position=(0, 0, -1.6))
    return synth_trace(p, user_id="mover")


def reference_run(trace, video, cfg, f):
    """Frame-by-frame replay through the public per-step functions."""
    stream = resample(trace, f)
    out = []
    for j, fr in enumerate(video):
        t = j / cfg.frame_rate
        tf = tile_frame(fr, cfg.grid)
        known = [i for i, s in enumerate(stream.times) if s + cfg.uplink_delay_s <= t + 1e-9]
        if known:
            sub = type(stream)(stream.user_id, stream.times[: known[-1] + 1],
                               stream.positions[: known[-1] + 1], stream.orientations[: known[-1] + 1],
                               stream.collection_frequency)
            pred = predict_pose(sub, t, cfg.predictor)
        else:
            pred = trace.pose(0)
        sel = select_tiles(tf, pred, cfg.camera)
        out.append(vchr(sel, tf, trace.pose(trace.index_at(t)), cfg.camera))
    return out


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(frame_rate=0), dict(predictor="kalman"), dict(uplink_delay_s=-1)])
    def test_rejects(self, kw):
        base = dict(frame_rate=30, camera=CAM, grid=GRID)
        with pytest.raises(ValidationError):
            DeliveryConfig(**{**base, **kw})


class TestRunDelivery:
    def test_perfect_information(self, video, moving):
        cfg = DeliveryConfig(30, CAM, GRID)
        res = run_delivery(moving, video, cfg, 30.0)
        assert res.per_frame_vchr == (1.0,) * len(video)
        assert res.mean_vchr == 1.0

    def test_static_user_any_frequency(self, video):
        cfg = DeliveryConfig(30, CAM, GRID)
        trace = PoseTrace("s", np.arange(31) / 30, np.tile([0, 0, -1.6], (31, 1)), np.tile([1.0, 0, 0, 0], (31, 1)))
        for f in (0.5, 1.0, 7.0):
            assert run_delivery(trace, video, cfg, f).mean_vchr == 1.0

    def test_two_frame_toy(self, two_point_frame, split_grid):
        # frame 0 looks left (sees p0), frame 1 looks right (sees p1)
        trace = PoseTrace("toy", [0.0, 1.0], [(0, 0, 0), (0, 0, 0)], [yaw(-45), yaw(45)])
        cfg = DeliveryConfig(1.0, Frustum(60, 60, 0.1, 10), split_grid)
        video = [two_point_frame, two_point_frame]
        slow = run_delivery(trace, video, cfg, 0.5)
        assert slow.per_frame_vchr == (1.0, 0.0)
        assert slow.mean_vchr == 0.5
        assert run_delivery(trace, video, cfg, 1.0).mean_vchr == 1.0

    @pytest.mark.parametrize("predictor,delay", [("hold_last", 0.0), ("linear", 0.0), ("hold_last", 0.1)])
    def test_matches_reference(self, video, moving, predictor, delay):
        cfg = DeliveryConfig(30, CAM, GRID, predictor=predictor, uplink_delay_s=delay)
        for f in (2.0, 9.5):
            res = run_delivery(moving, video, cfg, f)
            ref = reference_run(moving, video, cfg, f)
            assert res.per_frame_vchr == pytest.approx(ref, abs=1e-12)
            assert res.mean_vchr == pytest.approx(math.fsum(ref) / len(ref), abs=1e-12)

    def test_delay_falls_back_to_initial_pose(self, video):
        cfg = DeliveryConfig(30, CAM, GRID, uplink_delay_s=100.0)
        trace = static_trace()
        res = run_delivery(trace, video, cfg, 5.0)
        assert res.mean_vchr == 1.0

    def test_bounds(self, video, moving):
        cfg = DeliveryConfig(30, CAM, GRID)
        res = run_delivery(moving, video, cfg, 1.0)
        assert all(0.0 <= v <= 1.0 for v in res.per_frame_vchr)
        assert 0 < res.tiles_delivered_total <= GRID.n_tiles * len(video)

    @pytest.mark.parametrize("f", [0.0, -1.0])
    def test_bad_frequency(self, video, moving, f):
        with pytest.raises(ParameterError):
            run_delivery(moving, video, DeliveryConfig(30, CAM, GRID), f)

    def test_empty_video(self, moving):
        with pytest.raises(ParameterError):
            run_delivery(moving, [], DeliveryConfig(30, CAM, GRID), 1.0)


class TestSweep:
    def test_single(self, video, moving):
        table = sweep([moving], video, DeliveryConfig(30, CAM, GRID), [4.0])
        assert len(table) == 1 and table.rows[0][:2] == ("mover", 4.0)

    def test_arity_and_order(self, video):
        video = video[:3]
        traces = [synth_trace(SynthParams(seed=i, duration_s=0.2, start_position=(0, 0, -1.5)), f"u{i:02d}")
                  for i in range(40)]
        freqs = list(np.geomspace(1, 30, 10))
        table = sweep(traces, video, DeliveryConfig(30, CAM, GRID), freqs)
        assert len(table) == 400
        assert [(u, f) for u, f, _ in table.rows] == [(t.user_id, f) for t in traces for f in freqs]

    def test_threads_equal_sequential(self, video, moving):
        traces = [moving] + [synth_trace(SynthParams(seed=i, duration_s=1.0, start_position=(0, 0, -1.5)), f"u{i}")
                             for i in range(4)]
        cfg = DeliveryConfig(30, CAM, GRID)
        a = sweep(traces, video, cfg, [1, 3, 10])
        b = sweep(traces, video, cfg, [1, 3, 10], threads=3)
        assert a.rows == b.rows

    def test_matches_run_delivery(self, video, moving):
        cfg = DeliveryConfig(30, CAM, GRID)
        table = sweep([moving], video, cfg, [2.0, 6.0])
        assert [y for *_, y in table.rows] == [run_delivery(moving, video, cfg, f).mean_vchr for f in (2.0, 6.0)]

    @pytest.mark.parametrize("freqs", [[], [1.0, 1.0], [0.0]])
    def test_bad_frequencies(self, video, moving, freqs):
        with pytest.raises(ParameterError):
            sweep([moving], video, DeliveryConfig(30, CAM, GRID), freqs)


class TestSampleTable:
    def test_roundtrip(self):
        t = SampleTable([("a", 1.0, 0.25), ("a", 2.5, 1 / 3), ("b", 1.0, 0.9)])
        assert SampleTable.from_csv(t.to_csv()).rows == t.rows

    def test_duplicate(self):
        with pytest.raises(ValidationError):
            SampleTable([("a", 1.0, 0.5), ("a", 1.0, 0.6)])

    def test_bad_header(self):
        with pytest.raises(ValidationError):
            SampleTable.from_csv("user,f,y\n")
