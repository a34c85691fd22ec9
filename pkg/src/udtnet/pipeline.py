"""End-to-end experiment: cohort -> sweep -> UDT store -> QoE fits -> selection -> allocation."""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from . import manage, qoe, udtof
from .config import ExperimentConfig
from .delivery_sim import DeliveryConfig, SampleTable, prepare_video, sweep
from .errors import RankError, StateError, UdtError
from .pose_trace import PoseTrace, SynthParams, TraceFormatSpec, read_trace, synth_trace
from .udt_store import TwoTierStore, UdtRecord
from .volumetric import Frustum, PointCloudFrame, TileGrid, read_frames, synth_frame

log = logging.getLogger(__name__)

DEVICE_CATEGORY = "mar_headset"
LOCK_NAME = ".udtnet.lock"
MANIFEST_NAME = "manifest.csv"


class StageError(UdtError, RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        super().__init__(f"stage {stage!r} failed: {cause}")


@dataclass
class RunReport:
    files: dict[str, str] = field(default_factory=dict)
    stage_seconds: dict[str, float] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)


# -- inputs -------------------------------------------------------------------


def user_id(i: int) -> str:
    return f"user{i:03d}"


def synth_params_for_user(cfg: ExperimentConfig, i: int) -> SynthParams:
    """Heterogeneous motion parameters for user ``i``, seeded by ``master_seed + i``."""
    seed = cfg.master_seed + i
    rng = np.random.default_rng([seed, 1])

    def draw(rng_range):
        lo, hi = rng_range
        return float(rng.uniform(lo, hi))

    azimuth = float(rng.uniform(0.0, 2.0 * np.pi))
    distance = draw(cfg.distance_m)
    height = draw(cfg.height_m)
    b = np.asarray(cfg.bounds)
    centre = 0.5 * (b[:3] + b[3:])
    start = centre + np.array([distance * np.sin(azimuth), height, distance * np.cos(azimuth)])
    return SynthParams(
        seed=seed,
        duration_s=cfg.duration_s,
        rate_hz=cfg.rate_hz,
        step_sigma_m=draw(cfg.step_sigma_m),
        turn_sigma_deg=draw(cfg.turn_sigma_deg),
        volatility=draw(cfg.volatility),
        start_position=tuple(float(v) for v in start),
        look_at=tuple(float(v) for v in centre),
        recenter_rate=draw(cfg.recenter_rate),
    )


def build_traces(cfg: ExperimentConfig) -> list[PoseTrace]:
    if cfg.cohort_source == "synthetic":
        return [synth_trace(synth_params_for_user(cfg, i), user_id=user_id(i)) for i in range(cfg.n_users)]
    fmt = TraceFormatSpec() if cfg.trace_format == "quaternion" else TraceFormatSpec.euler()
    paths = sorted(Path(cfg.trace_dir).glob("*.csv"))
    if not paths:
        raise StateError(f"no *.csv traces in {cfg.trace_dir}")
    return [read_trace(p, fmt) for p in paths]


def build_video(cfg: ExperimentConfig) -> list[PointCloudFrame]:
    if cfg.video_source == "ply_dir":
        frames = read_frames(cfg.video_dir)
        if not frames:
            raise StateError(f"no frames in {cfg.video_dir}")
        return frames
    seed = cfg.master_seed if cfg.video_seed is None else cfg.video_seed
    lo, hi = cfg.bounds[:3], cfg.bounds[3:]
    return [synth_frame([seed, 2, j], cfg.n_points, lo, hi, frame_index=j) for j in range(cfg.n_frames)]


def delivery_config(cfg: ExperimentConfig, video: Optional[list[PointCloudFrame]] = None) -> DeliveryConfig:
    lo, hi = np.array(cfg.bounds[:3]), np.array(cfg.bounds[3:])
    if video is not None and cfg.video_source == "ply_dir":
        pts = np.concatenate([fr.points for fr in video])
        lo, hi = np.minimum(lo, pts.min(axis=0)), np.maximum(hi, pts.max(axis=0))
    return DeliveryConfig(
        frame_rate=cfg.frame_rate,
        camera=Frustum(cfg.hfov_deg, cfg.vfov_deg, cfg.near_m, cfg.far_m),
        grid=TileGrid(tuple(lo), tuple(hi), cfg.grid_dims),
        predictor=cfg.predictor,
        uplink_delay_s=cfg.uplink_delay_s,
    )


# -- stages ---------------------------------------------------------------------


def simulate(cfg: ExperimentConfig, traces: Optional[list[PoseTrace]] = None) -> SampleTable:
    traces = traces if traces is not None else build_traces(cfg)
    video = build_video(cfg)
    dcfg = delivery_config(cfg, video)
    return sweep(traces, video, dcfg, cfg.frequencies, threads=cfg.threads,
                 tiled=prepare_video(video, dcfg.grid))


def ingest_samples(samples: SampleTable, store: Optional[TwoTierStore] = None) -> TwoTierStore:
    """Write each sweep row into the network-wide tier as one UDT record."""
    store = store or TwoTierStore()
    for i, (u, f, y) in enumerate(samples.rows):
        store.ingest(UdtRecord(u, float(i), {
            "device_category": DEVICE_CATEGORY,
            "user_id": u,
            "collection_frequency": float(f),
            "mean_vchr": float(y),
            "timestamp": float(i),
        }))
    return store


@dataclass
class FitOutcome:
    slices: dict[str, udtof.Dataset]
    per_user: dict[str, qoe.QoEModel]
    agnostic: Optional[qoe.QoEModel]
    per_user_rmse: dict[str, float]
    agnostic_rmse: dict[str, float]
    warnings: list[str]


def fit_models(store: TwoTierStore) -> FitOutcome:
    """Fit the pooled model and one model per user; users that cannot be fitted keep the pooled one."""
    ds = udtof.clean(udtof.prepare(store))
    slices = udtof.slice_by_user(ds)
    warnings: list[str] = []
    try:
        agnostic = qoe.fit_agnostic(ds)
    except RankError as exc:
        msg = f"fit skipped: {exc}"
        log.warning(msg)
        return FitOutcome(slices, {}, None, {}, {}, [msg])
    per_user = {}
    for u, sl in slices.items():
        try:
            per_user[u] = qoe.fit_qoe(sl, scope="per_user", user_id=u)
        except RankError as exc:
            msg = f"per-user fit for {u} skipped: {exc}"
            log.warning(msg)
            warnings.append(msg)
    agnostic_rmse = {u: qoe.modeling_error(agnostic, sl).rmse for u, sl in slices.items()}
    per_user_rmse = {u: qoe.modeling_error(m, slices[u]).rmse for u, m in per_user.items()}
    return FitOutcome(slices, per_user, agnostic, per_user_rmse, agnostic_rmse, warnings)


def fig4a_csv(fit: FitOutcome) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["user_id", "frequency_hz", "observed_vchr", "per_user_vchr", "agnostic_vchr"])
    for u, sl in fit.slices.items():
        for r in sl.rows:
            per = fit.per_user.get(u)
            w.writerow([u, repr(r.x), repr(r.y),
                        "" if per is None else repr(qoe.predict_qoe(per, r.x)),
                        repr(qoe.predict_qoe(fit.agnostic, r.x))])
    return buf.getvalue()


def selection_curve(fit: FitOutcome, strategies, ks, n_seeds: int, master_seed: int):
    """Rows of (k, strategy, seed, average RMSE) for the UDT-count experiment."""
    users = sorted(fit.per_user)
    per_user_rmse = {u: fit.per_user_rmse[u] for u in users}
    agnostic_rmse = {u: fit.agnostic_rmse[u] for u in users}
    rows = []
    for strategy in strategies:
        seeds = [None] if strategy == "min_modeling_error" else [master_seed + s for s in range(n_seeds)]
        for seed in seeds:
            for k in ks:
                sel = manage.select_users(agnostic_rmse, k, strategy, seed)
                rows.append((sel.k, strategy, seed, manage.error_curve(per_user_rmse, agnostic_rmse, sel)))
    return rows


def allocate(cfg: ExperimentConfig, store: TwoTierStore, fit: FitOutcome) -> manage.Allocation:
    """Establish UDTs for the worst-modelled users, refit from their twins, split the budget."""
    users = sorted(fit.per_user)
    k = len(users) if cfg.allocation_udt_k is None else cfg.allocation_udt_k
    sel = manage.select_users({u: fit.agnostic_rmse[u] for u in users}, k, "min_modeling_error")
    twin_models = {}
    for u in sorted(sel.selected):
        twin = store.udt(u) if u in store.udt_tier else store.establish_udt(u)
        rows = tuple(udtof.Row(u, r.values["collection_frequency"], r.values["mean_vchr"]) for r in twin.records)
        twin_models[u] = qoe.fit_qoe(udtof.clean(udtof.Dataset(rows)), scope="per_user", user_id=u)
    assignment = manage.assign_models(sel, twin_models, fit.agnostic, cohort=users)
    return manage.allocate_frequencies(assignment, cfg.allocation_grid, cfg.allocation_budget)


# -- output ---------------------------------------------------------------------


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def read_manifest(output_dir) -> dict[str, str]:
    path = Path(output_dir) / MANIFEST_NAME
    if not path.exists():
        return {}
    reader = csv.reader(io.StringIO(path.read_text(encoding="utf-8")))
    next(reader, None)
    return {rec[0]: rec[1] for rec in reader if rec}


def emit_report(tables: Mapping[str, str], output_dir, merge: bool = False) -> RunReport:
    """Write text tables (LF endings) and a ``manifest.csv`` of their SHA-256 digests.

    The manifest is only written once every table is on disk. With ``merge``
    the entries of an existing manifest are kept for files not rewritten here,
    so step-by-step CLI invocations accumulate one manifest.
    """
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = RunReport()
    previous = read_manifest(out) if merge else {}
    for name in sorted(tables):
        data = tables[name].encode("utf-8")
        path = out / name
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(data)
        report.files[name] = sha256(data)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["file", "sha256"])
    for name, digest in sorted({**previous, **report.files}.items()):
        w.writerow([name, digest])
    with open(out / MANIFEST_NAME, "wb") as fh:
        fh.write(buf.getvalue().encode("utf-8"))
    return report


def verify_manifest(output_dir) -> dict[str, bool]:
    out = Path(output_dir)
    if not (out / MANIFEST_NAME).exists():
        raise StateError(f"no {MANIFEST_NAME} in {out}")
    status = {}
    for name, digest in read_manifest(out).items():
        path = out / name
        status[name] = path.exists() and sha256(path.read_bytes()) == digest
    return status


@contextmanager
def output_lock(output_dir):
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    lock = out / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise StateError(f"{out} is locked by another run ({lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield out
    finally:
        lock.unlink(missing_ok=True)


def _store_tables(store: TwoTierStore) -> dict[str, str]:
    glob = store.global_tier
    udt_recs = [r for u in sorted(store.udt_tier) for r in store.udt_tier[u].records]
    return {
        "store/schema.txt": store.schema.outline(),
        "store/global_tier.csv": TwoTierStore._long_rows(glob),
        "store/udt_tier.csv": TwoTierStore._long_rows(udt_recs),
    }


def run_experiment(cfg: ExperimentConfig) -> RunReport:
    """Run every stage and write the result tables to ``cfg.output_dir``."""
    timings: dict[str, float] = {}
    warnings: list[str] = []
    tables: dict[str, str] = {}

    @contextmanager
    def stage(name):
        t0 = time.perf_counter()
        try:
            yield
        except UdtError as exc:
            if isinstance(exc, StageError):
                raise
            raise StageError(name, exc) from exc
        finally:
            timings[name] = time.perf_counter() - t0

    with output_lock(cfg.output_dir):
        with stage("cohort"):
            traces = build_traces(cfg)
        with stage("simulate"):
            samples = simulate(cfg, traces)
            tables["samples.csv"] = samples.to_csv()
        with stage("ingest"):
            store = ingest_samples(samples)
        with stage("fit"):
            fit = fit_models(store)
            warnings.extend(fit.warnings)
        if fit.agnostic is not None:
            models = [fit.agnostic] + [fit.per_user[u] for u in fit.slices if u in fit.per_user]
            tables["models.csv"] = qoe.models_to_csv(models)
            tables["fig4a_curves.csv"] = fig4a_csv(fit)
            with stage("select"):
                ks = cfg.selection_k if cfg.selection_k is not None else range(len(fit.per_user) + 1)
                rows = selection_curve(fit, cfg.strategies, ks, cfg.selection_seeds, cfg.master_seed)
                tables["fig4b_curve.csv"] = manage.fig4b_rows_to_csv(rows)
            if cfg.allocation_grid is not None:
                with stage("allocate"):
                    tables["allocation.csv"] = allocate(cfg, store, fit).to_csv()
        else:
            tables["models.csv"] = qoe.models_to_csv([])
        tables.update(_store_tables(store))
        with stage("report"):
            report = emit_report(tables, cfg.output_dir)
    report.stage_seconds = timings
    report.warnings = warnings
    return report
