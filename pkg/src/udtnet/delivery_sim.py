"""Edge delivery loop: pose collection at frequency f -> tile prefetch -> VCHR.

The ground-truth viewport of a user does not depend on the collection
frequency, so :func:`sweep` computes, once per user, how many rendered points
fall in each tile of each frame. A frequency run then only has to select tiles
from the predicted pose and sum those counts.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ParameterError, ValidationError
from .pose_trace import PREDICTORS, TIME_EPS, PoseTrace, _predict, resample
from .volumetric import (
    Frustum,
    PointCloudFrame,
    TiledFrame,
    TileGrid,
    selected_tile_mask,
    tile_frame,
    visible_mask,
)


@dataclass(frozen=True)
class DeliveryConfig:
    frame_rate: float
    camera: Frustum
    grid: TileGrid
    predictor: str = "hold_last"
    uplink_delay_s: float = 0.0

    def __post_init__(self):
        if not self.frame_rate > 0:
            raise ValidationError("frame_rate must be positive")
        if not self.uplink_delay_s >= 0:
            raise ValidationError("uplink_delay_s must be non-negative")
        if self.predictor not in PREDICTORS:
            raise ValidationError(f"predictor must be one of {PREDICTORS}")


@dataclass(frozen=True)
class RunResult:
    user_id: str
    collection_frequency: float
    per_frame_vchr: tuple[float, ...]
    mean_vchr: float
    tiles_delivered_total: int


@dataclass
class SampleTable:
    """Rows of (user_id, frequency_hz, mean_vchr); (user, frequency) pairs are unique."""

    rows: list[tuple[str, float, float]] = field(default_factory=list)

    HEADER = ("user_id", "frequency_hz", "mean_vchr")

    def __post_init__(self):
        seen = set()
        for u, f, _ in self.rows:
            if (u, f) in seen:
                raise ValidationError(f"duplicate sample for user {u!r} at {f} Hz")
            seen.add((u, f))

    def __len__(self) -> int:
        return len(self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.HEADER)
        for u, f, y in self.rows:
            w.writerow([u, repr(float(f)), repr(float(y))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "SampleTable":
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if header is None or tuple(header) != cls.HEADER:
            raise ValidationError(f"sample table header must be {','.join(cls.HEADER)}")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != 3:
                raise ValidationError(f"line {lineno}: expected 3 fields")
            rows.append((rec[0], float(rec[1]), float(rec[2])))
        return cls(rows)


def prepare_video(video: Sequence[PointCloudFrame], grid: TileGrid) -> list[TiledFrame]:
    if not video:
        raise ParameterError("video must contain at least one frame")
    return [tile_frame(fr, grid) for fr in video]


def rendered_tile_counts(trace: PoseTrace, tiled: Sequence[TiledFrame], cfg: DeliveryConfig) -> np.ndarray:
    """(n_frames, n_tiles) counts of points visible at the true pose of each frame."""
    n_tiles = cfg.grid.n_tiles
    counts = np.zeros((len(tiled), n_tiles), dtype=np.int64)
    for j, tf in enumerate(tiled):
        i = trace.index_at(j / cfg.frame_rate)
        mask = visible_mask(tf.frame.points, trace.positions[i], trace.orientations[i], cfg.camera)
        counts[j] = np.bincount(tf.assignment[mask], minlength=n_tiles)
    return counts


def _run_from_counts(trace: PoseTrace, counts: np.ndarray, cfg: DeliveryConfig, f: float) -> RunResult:
    stream = resample(trace, f)
    times, pos, quats = stream.times, stream.positions, stream.orientations
    per_frame = []
    delivered_total = 0
    last_key, sel = None, None
    for j in range(counts.shape[0]):
        t_j = j / cfg.frame_rate
        known = int(np.searchsorted(times + cfg.uplink_delay_s, t_j + TIME_EPS, side="right"))
        if known == 0:
            # nothing has arrived yet: fall back to the initial trace pose
            p, q = trace.positions[0], trace.orientations[0]
        else:
            p, q = _predict(times, pos, quats, known, t_j, cfg.predictor)
        key = (p.tobytes(), q.tobytes())
        if key != last_key:
            sel = selected_tile_mask(cfg.grid, p, q, cfg.camera)
            last_key = key
        delivered_total += int(sel.sum())
        rendered = counts[j].sum()
        per_frame.append(1.0 if rendered == 0 else float(counts[j][sel].sum() / rendered))
    return RunResult(
        user_id=trace.user_id,
        collection_frequency=float(f),
        per_frame_vchr=tuple(per_frame),
        mean_vchr=math.fsum(per_frame) / len(per_frame),
        tiles_delivered_total=delivered_total,
    )


def run_delivery(trace: PoseTrace, video: Sequence[PointCloudFrame], cfg: DeliveryConfig, f: float,
                 tiled: Sequence[TiledFrame] | None = None) -> RunResult:
    """Simulate one user watching ``video`` with poses collected at ``f`` Hz.

    Frame j is shown at ``j / frame_rate``. The server predicts the pose from
    observations that have arrived (stamp + uplink delay <= frame time),
    prefetches the tiles intersecting the predicted frustum, and the frame is
    scored against the true pose (hold-last on the native trace; the last
    pose is reused past the end of the trace).
    """
    if not f > 0:
        raise ParameterError(f"collection frequency must be positive, got {f}")
    if tiled is None:
        tiled = prepare_video(video, cfg.grid)
    counts = rendered_tile_counts(trace, tiled, cfg)
    return _run_from_counts(trace, counts, cfg, f)


def sweep(traces: Sequence[PoseTrace], video: Sequence[PointCloudFrame], cfg: DeliveryConfig,
          frequencies: Sequence[float], threads: int = 1,
          tiled: Sequence[TiledFrame] | None = None) -> SampleTable:
    """Mean VCHR for every (user, frequency); rows ordered users-outer, frequencies-inner."""
    freqs = [float(f) for f in frequencies]
    if not freqs:
        raise ParameterError("at least one frequency is required")
    if any(not f > 0 for f in freqs):
        raise ParameterError("frequencies must be positive")
    if len(set(freqs)) != len(freqs):
        raise ParameterError("duplicate frequency in sweep")
    if tiled is None:
        tiled = prepare_video(video, cfg.grid)

    def one_user(trace: PoseTrace) -> list[tuple[str, float, float]]:
        counts = rendered_tile_counts(trace, tiled, cfg)
        return [(trace.user_id, f, _run_from_counts(trace, counts, cfg, f).mean_vchr) for f in freqs]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_user = list(pool.map(one_user, traces))
    else:
        per_user = [one_user(t) for t in traces]
    return SampleTable([row for rows in per_user for row in rows])
