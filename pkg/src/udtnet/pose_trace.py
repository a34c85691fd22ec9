"""6DoF pose traces: ingestion, synthesis, uplink resampling and prediction.

A trace is the device-side ground truth sampled at its native rate. The edge
server only sees a resampled version of it (:class:`ObservedPoseStream`) whose
rate is the pose collection frequency allocated on the uplink.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rotation as rot
from .errors import ParameterError, ParseError, StateError, ValidationError

# Timestamps produced by k / f and i / rate rarely agree to the last ulp.
TIME_EPS = 1e-9

QUAT_COLUMNS = ("t", "x", "y", "z", "qw", "qx", "qy", "qz")
EULER_COLUMNS = ("t", "x", "y", "z", "rx", "ry", "rz")


@dataclass(frozen=True)
class Pose:
    """Device position (m) and unit orientation quaternion (w, x, y, z)."""

    position: tuple[float, float, float] = (0.0, 0.0, 0.0)
    orientation: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        p = tuple(float(v) for v in self.position)
        if len(p) != 3 or not all(math.isfinite(v) for v in p):
            raise ValidationError(f"position must be 3 finite values, got {self.position!r}")
        q = tuple(float(v) for v in self.orientation)
        if len(q) != 4 or not all(math.isfinite(v) for v in q):
            raise ValidationError(f"orientation must be 4 finite values, got {self.orientation!r}")
        try:
            qn = rot.normalize(q)
        except ValueError as exc:
            raise ValidationError(str(exc)) from None
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "orientation", tuple(float(v) for v in qn))

    @property
    def rotation_matrix(self) -> np.ndarray:
        return rot.to_matrix(self.orientation)


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class _PoseSeries:
    user_id: str
    times: np.ndarray
    positions: np.ndarray
    orientations: np.ndarray

    def __post_init__(self):
        times = _frozen(self.times).reshape(-1)
        positions = _frozen(self.positions).reshape(-1, 3)
        quats = np.array(self.orientations, dtype=float).reshape(-1, 4)
        if not (len(times) == len(positions) == len(quats)):
            raise ValidationError("times, positions and orientations differ in length")
        if not (np.all(np.isfinite(times)) and np.all(np.isfinite(positions)) and np.all(np.isfinite(quats))):
            raise ValidationError("non-finite value in pose series")
        norms = np.linalg.norm(quats, axis=1)
        if np.any(norms == 0):
            raise ValidationError("zero-norm orientation quaternion")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "positions", positions)
        object.__setattr__(self, "orientations", _frozen(quats / norms[:, None]))
        object.__setattr__(self, "user_id", str(self.user_id))

    def __len__(self) -> int:
        return len(self.times)

    def pose(self, i: int) -> Pose:
        return Pose(tuple(self.positions[i]), tuple(self.orientations[i]))

    @property
    def samples(self) -> list[tuple[float, Pose]]:
        return [(float(t), self.pose(i)) for i, t in enumerate(self.times)]

    @property
    def end_time(self) -> float:
        return float(self.times[-1])

    def index_at(self, t: float) -> int:
        """Index of the latest sample with timestamp <= t, clamped to 0."""
        i = int(np.searchsorted(self.times, t + TIME_EPS, side="right")) - 1
        return max(i, 0)

    def __eq__(self, other):
        if type(self) is not type(other):
            return NotImplemented
        return (
            self.user_id == other.user_id
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.positions, other.positions)
            and np.array_equal(self.orientations, other.orientations)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class PoseTrace(_PoseSeries):
    """Ground-truth pose samples of one user at the device's native rate."""

    native_rate: float = 0.0

    def __post_init__(self):
        super().__post_init__()
        if len(self.times) < 2:
            raise ValidationError("a pose trace needs at least 2 samples")
        if np.any(np.diff(self.times) <= 0):
            bad = int(np.argmax(np.diff(self.times) <= 0)) + 1
            raise ValidationError(f"timestamps must be strictly increasing (sample {bad})")
        if not self.native_rate:
            object.__setattr__(self, "native_rate", float(1.0 / np.median(np.diff(self.times))))

    def __eq__(self, other):
        eq = super().__eq__(other)
        if eq is NotImplemented or not eq:
            return eq
        return self.native_rate == other.native_rate

    def to_csv(self) -> str:
        """Normalized ``t,x,y,z,qw,qx,qy,qz`` serialization (lossless floats)."""
        out = [",".join(QUAT_COLUMNS)]
        for t, p, q in zip(self.times, self.positions, self.orientations):
            out.append(",".join(repr(float(v)) for v in (t, *p, *q)))
        return "\n".join(out) + "\n"


@dataclass(frozen=True, eq=False)
class ObservedPoseStream(_PoseSeries):
    """What the edge server receives when poses are collected at ``collection_frequency``."""

    collection_frequency: float = 0.0


@dataclass(frozen=True)
class TraceFormatSpec:
    """Column layout of a trace file.

    ``rotation`` is ``"quaternion"`` (columns qw, qx, qy, qz) or
    ``"euler_xyz_deg"`` (columns rx, ry, rz, intrinsic X then Y then Z, degrees).
    A header line is skipped when its first field is not numeric.
    """

    columns: tuple[str, ...] = QUAT_COLUMNS
    rotation: str = "quaternion"
    delimiter: str = ","

    def __post_init__(self):
        need = QUAT_COLUMNS if self.rotation == "quaternion" else EULER_COLUMNS
        if self.rotation not in ("quaternion", "euler_xyz_deg"):
            raise ValidationError(f"unknown rotation convention {self.rotation!r}")
        missing = [c for c in need if c not in self.columns]
        if missing:
            raise ValidationError(f"format lacks columns {missing}")

    @classmethod
    def euler(cls) -> "TraceFormatSpec":
        return cls(columns=EULER_COLUMNS, rotation="euler_xyz_deg")


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def parse_trace(raw_text: str, fmt: TraceFormatSpec | None = None, user_id: str = "user") -> PoseTrace:
    """Parse a delimited trace into a :class:`PoseTrace` starting at t = 0."""
    fmt = fmt or TraceFormatSpec()
    if not raw_text or not raw_text.strip():
        raise ParseError("empty trace text")
    col = {name: i for i, name in enumerate(fmt.columns)}
    times, positions, quats = [], [], []
    for lineno, line in enumerate(io.StringIO(raw_text), start=1):
        line = line.strip()
        if not line:
            continue
        fields = [f.strip() for f in line.split(fmt.delimiter)]
        if not times and lineno == 1 and not _is_number(fields[0]):
            continue
        if len(fields) != len(fmt.columns):
            raise ParseError(f"expected {len(fmt.columns)} fields, got {len(fields)}", lineno)
        try:
            vals = [float(f) for f in fields]
        except ValueError:
            raise ParseError(f"non-numeric field in {line!r}", lineno) from None
        if not all(math.isfinite(v) for v in vals):
            raise ParseError("non-finite field", lineno)
        times.append(vals[col["t"]])
        positions.append([vals[col["x"]], vals[col["y"]], vals[col["z"]]])
        if fmt.rotation == "quaternion":
            quats.append([vals[col[c]] for c in ("qw", "qx", "qy", "qz")])
        else:
            quats.append(rot.from_euler_xyz_deg(vals[col["rx"]], vals[col["ry"]], vals[col["rz"]]))
    if len(times) < 2:
        raise ValidationError("a pose trace needs at least 2 samples")
    t = np.asarray(times)
    return PoseTrace(user_id=user_id, times=t - t[0], positions=positions, orientations=quats)


@dataclass(frozen=True)
class SynthParams:
    """Seeded random-walk trace parameters.

    ``volatility`` in [0, 1] is the innovation weight of the step process: each
    step is ``(1 - v) * previous_step + sqrt(1 - (1 - v)**2) * noise``, so the
    step marginal spread stays at the given sigma while small values give
    long, persistent sweeps and ``v = 0`` freezes the pose. ``recenter_rate``
    (1/s) pulls the gaze back towards ``look_at``.
    """

    seed: int = 0
    duration_s: float = 10.0
    rate_hz: float = 30.0
    step_sigma_m: float = 0.005
    turn_sigma_deg: float = 1.0
    volatility: float = 1.0
    start_position: tuple[float, float, float] = (0.0, 0.0, -2.0)
    look_at: tuple[float, float, float] = (0.0, 0.0, 0.0)
    recenter_rate: float = 0.0


def synth_trace(params: SynthParams, user_id: str = "user") -> PoseTrace:
    p = params
    if not p.duration_s > 0 or not p.rate_hz > 0:
        raise ParameterError("duration_s and rate_hz must be positive")
    if p.step_sigma_m < 0 or p.turn_sigma_deg < 0:
        raise ParameterError("sigmas must be non-negative")
    if not 0.0 <= p.volatility <= 1.0:
        raise ParameterError("volatility must lie in [0, 1]")
    if p.recenter_rate < 0:
        raise ParameterError("recenter_rate must be non-negative")

    n = int(math.floor(p.duration_s * p.rate_hz + TIME_EPS)) + 1
    n = max(n, 2)
    rng = np.random.default_rng(p.seed)
    pos_noise = rng.standard_normal((n, 3)) * p.step_sigma_m
    rot_noise = rng.standard_normal((n, 3)) * math.radians(p.turn_sigma_deg)

    keep = 1.0 - p.volatility
    innov = math.sqrt(max(0.0, 1.0 - keep * keep))
    home = rot.look_at(p.start_position, p.look_at)
    pull = min(1.0, p.recenter_rate / p.rate_hz)

    positions = np.empty((n, 3))
    quats = np.empty((n, 4))
    pos = np.asarray(p.start_position, dtype=float)
    q = home
    v_pos = np.zeros(3)
    v_rot = np.zeros(3)
    positions[0], quats[0] = pos, q
    for i in range(1, n):
        v_pos = keep * v_pos + innov * pos_noise[i]
        v_rot = keep * v_rot + innov * rot_noise[i]
        pos = pos + v_pos
        q = rot.normalize(rot.multiply(q, rot.from_rotvec(v_rot)))
        if pull > 0:
            q = rot.slerp(q, home, pull)
        positions[i], quats[i] = pos, q
    times = np.arange(n) / p.rate_hz
    return PoseTrace(user_id=user_id, times=times, positions=positions, orientations=quats,
                     native_rate=float(p.rate_hz))


def resample(trace: _PoseSeries, f: float) -> ObservedPoseStream:
    """Poses the server holds when the device reports every ``1/f`` seconds.

    Observation k is stamped ``k / f`` and carries the latest trace sample at or
    before that time.
    """
    if not f > 0:
        raise ParameterError(f"collection frequency must be positive, got {f}")
    count = int(math.floor(trace.end_time * f + TIME_EPS)) + 1
    t_k = np.arange(count) / f
    idx = np.searchsorted(trace.times, t_k + TIME_EPS, side="right") - 1
    idx = np.maximum(idx, 0)
    return ObservedPoseStream(
        user_id=trace.user_id,
        times=t_k,
        positions=trace.positions[idx],
        orientations=trace.orientations[idx],
        collection_frequency=float(f),
    )


PREDICTORS = ("hold_last", "linear")
MAX_EXTRAPOLATION = 2.0


def _predict(times, positions, quats, n_known: int, target_t: float, predictor: str):
    """Array-level predictor over the first ``n_known`` observations."""
    if n_known <= 0:
        raise StateError("cannot predict from an empty pose stream")
    i = int(np.searchsorted(times[:n_known], target_t + TIME_EPS, side="right")) - 1
    if i < 0:
        return positions[0], quats[0]
    if predictor == "hold_last" or i == 0:
        return positions[i], quats[i]
    if predictor != "linear":
        raise ParameterError(f"unknown predictor {predictor!r}")
    t0, t1 = times[i - 1], times[i]
    s = min(max((target_t - t0) / (t1 - t0), 0.0), MAX_EXTRAPOLATION)
    pos = positions[i - 1] + s * (positions[i] - positions[i - 1])
    return pos, rot.slerp(quats[i - 1], quats[i], s)


def predict_pose(stream: ObservedPoseStream, target_t: float, predictor: str = "hold_last") -> Pose:
    if predictor not in PREDICTORS:
        raise ParameterError(f"unknown predictor {predictor!r}")
    if target_t < 0:
        raise ParameterError("target time must be non-negative")
    pos, q = _predict(stream.times, stream.positions, stream.orientations, len(stream), target_t, predictor)
    return Pose(tuple(pos), tuple(q))


def read_trace(path, fmt: TraceFormatSpec | None = None, user_id: str | None = None) -> PoseTrace:
    path = Path(path)
    return parse_trace(path.read_text(encoding="utf-8"), fmt, user_id or path.stem)
