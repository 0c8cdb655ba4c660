"""Batch experiment runner.

A scenario is one JSON document (strictly validated: unknown keys are
errors). ``run_scenario`` wires simulator -> filter, scores the estimate
against truth, and writes one directory of artifacts per run:

    config.json  truth.csv  estimate.csv  metrics.csv  gates.csv  report.txt

plus the sensor logs (imu.csv, tracks.csv, range.csv, range_truth.csv) that
are the interchange format with the simulator. ``compare_modes`` runs both
filter modes on byte-identical streams; ``sweep`` fans a scenario across
seeds; ``run_observability`` drives the observability lab instead of the
filter.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DivergenceError
from .facet import GateVerdict
from .filterloop import FilterSettings, RangeVioFilter
from .observability import (
    AnalysisState,
    LabTrajectory,
    NullspaceReport,
    nullspace_report,
    stack_rows,
    write_report,
)
from .propagation import ImuSample, NoiseModel
from .rotations import Quaternion, quat_to_rotation
from .simulation import (
    Scene,
    SensorRig,
    SensorStreams,
    TrajectoryProfile,
    generate_streams,
    make_scene,
    read_imu_csv,
    read_range_csv,
    read_tracks_csv,
    write_stream_csvs,
)
from .state import FilterState, InertialState, WorldConstants
from .vision import MeasurementNoise

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def _check_keys(d: dict, allowed: set[str], ctx: str):
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {ctx}: {sorted(unknown)}")


@dataclass
class InitConfig:
    """Filter initialization relative to truth."""

    mode: str = "truth"  # truth | perturbed
    sigma_p: float = 1e-3
    sigma_v: float = 0.1
    sigma_theta: float = 0.004
    sigma_bg: float = 1e-4
    sigma_ba: float = 0.02
    velocity_scale: float = 1.0  # deterministic scale offset on initial velocity

    @staticmethod
    def from_dict(d: dict) -> "InitConfig":
        _check_keys(d, {f.name for f in dataclasses.fields(InitConfig)}, "init")
        out = InitConfig(**d)
        if out.mode not in ("truth", "perturbed"):
            raise ConfigError(f"init.mode must be truth|perturbed, got {out.mode}")
        return out


@dataclass
class ScenarioConfig:
    scene_name: str = "flat_plane"
    scene_params: dict = field(default_factory=dict)
    trajectory: TrajectoryProfile = field(default_factory=TrajectoryProfile)
    rig: SensorRig = field(default_factory=SensorRig)
    filter_settings: FilterSettings = field(default_factory=FilterSettings)
    init: InitConfig = field(default_factory=InitConfig)
    mode: str = "range_vio"  # vio | range_vio
    seed: int = 0
    noiseless: bool = False
    scheduled_outlier: tuple[float, float] | None = None
    out_dir: str | None = None

    def __post_init__(self):
        if self.mode not in ("vio", "range_vio"):
            raise ConfigError(f"mode must be vio|range_vio, got {self.mode}")
        if self.filter_settings.max_clones < 2:
            raise ConfigError("filter.max_clones must be >= 2")
        if self.mode == "range_vio" and self.filter_settings.max_slam_features < 3:
            raise ConfigError("range mode needs at least 3 SLAM features")
        if self.filter_settings.range_gate_gamma <= 0:
            raise ConfigError("range gate gamma must be positive")

    @staticmethod
    def from_dict(d: dict) -> "ScenarioConfig":
        top = {
            "scene",
            "trajectory",
            "rig",
            "filter",
            "init",
            "mode",
            "seed",
            "noiseless",
            "scheduled_outlier",
            "out_dir",
        }
        _check_keys(d, top, "scenario")

        scene = d.get("scene", {})
        _check_keys(scene, {"name", "params"}, "scene")
        scene_name = scene.get("name", "flat_plane")
        scene_params = dict(scene.get("params", {}))

        tr = dict(d.get("trajectory", {}))
        tr_fields = {f.name for f in dataclasses.fields(TrajectoryProfile)}
        _check_keys(tr, tr_fields, "trajectory")
        for key in ("start", "excitation_amp", "excitation_freq"):
            if key in tr:
                tr[key] = np.asarray(tr[key], dtype=float)
        trajectory = TrajectoryProfile(**tr)

        rig_d = dict(d.get("rig", {}))
        rig_fields = {f.name for f in dataclasses.fields(SensorRig)}
        _check_keys(rig_d, rig_fields, "rig")
        if "imu_noise" in rig_d:
            rig_d["imu_noise"] = NoiseModel(**rig_d["imu_noise"])
        if "meas_noise" in rig_d:
            rig_d["meas_noise"] = MeasurementNoise(**rig_d["meas_noise"])
        if "outlier_mag" in rig_d:
            rig_d["outlier_mag"] = tuple(rig_d["outlier_mag"])
        if "mount" in rig_d or "lrf" in rig_d:
            raise ConfigError("camera mount and laser extrinsics are fixed in configs; omit them")
        rig = SensorRig(**rig_d)

        fl = dict(d.get("filter", {}))
        fl_fields = {f.name for f in dataclasses.fields(FilterSettings)}
        _check_keys(fl, fl_fields, "filter")
        filter_settings = FilterSettings(**fl)

        init = InitConfig.from_dict(dict(d.get("init", {})))

        sched = d.get("scheduled_outlier")
        if sched is not None:
            sched = (float(sched[0]), float(sched[1]))

        return ScenarioConfig(
            scene_name=scene_name,
            scene_params=scene_params,
            trajectory=trajectory,
            rig=rig,
            filter_settings=filter_settings,
            init=init,
            mode=d.get("mode", "range_vio"),
            seed=int(d.get("seed", 0)),
            noiseless=bool(d.get("noiseless", False)),
            scheduled_outlier=sched,
            out_dir=d.get("out_dir"),
        )

    @staticmethod
    def from_json(path) -> "ScenarioConfig":
        with open(path) as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as e:
                raise ConfigError(f"invalid JSON in {path}: {e}") from e
        return ScenarioConfig.from_dict(d)

    def echo_dict(self) -> dict:
        def clean(x):
            if isinstance(x, np.ndarray):
                return x.tolist()
            if isinstance(x, Quaternion):
                return [x.w, x.x, x.y, x.z]
            if dataclasses.is_dataclass(x):
                return {f.name: clean(getattr(x, f.name)) for f in dataclasses.fields(x)}
            if isinstance(x, (list, tuple)):
                return [clean(v) for v in x]
            if isinstance(x, dict):
                return {k: clean(v) for k, v in x.items()}
            return x

        return {
            "scene": {"name": self.scene_name, "params": clean(self.scene_params)},
            "trajectory": clean(self.trajectory),
            "rig": clean(self.rig),
            "filter": clean(self.filter_settings),
            "init": clean(self.init),
            "mode": self.mode,
            "seed": self.seed,
            "noiseless": self.noiseless,
            "scheduled_outlier": list(self.scheduled_outlier) if self.scheduled_outlier else None,
        }

    def with_updates(self, **kw) -> "ScenarioConfig":
        return dataclasses.replace(self, **kw)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass
class RunMetrics:
    stamps: np.ndarray
    pos_err: np.ndarray  # (T, 3)
    vel_err: np.ndarray
    att_err: np.ndarray  # (T, 3) small-angle
    max_pos_err: float
    final_pos_err: float
    distance: float
    pct_of_distance: float
    runtime_s: float
    diverged: bool
    gate_counts: dict
    seed: int
    mode: str
    extras: dict = field(default_factory=dict)


def _attitude_error(q_est: Quaternion, q_true: Quaternion) -> np.ndarray:
    # minimal rotation carrying the estimate onto the truth
    return q_est.rotvec_to(q_true)


def compute_metrics(
    stamps, est_p, est_v, est_q, truth_p, truth_v, truth_q, distance, runtime_s, diverged, gate_counts, seed, mode
) -> RunMetrics:
    pos_err = est_p - truth_p
    vel_err = est_v - truth_v
    att_err = np.array([_attitude_error(qe, qt) for qe, qt in zip(est_q, truth_q)])
    norms = np.linalg.norm(pos_err, axis=1)
    max_pos = float(np.max(norms)) if len(norms) else float("nan")
    final_pos = float(norms[-1]) if len(norms) else float("nan")
    return RunMetrics(
        stamps=np.asarray(stamps),
        pos_err=pos_err,
        vel_err=vel_err,
        att_err=att_err,
        max_pos_err=max_pos,
        final_pos_err=final_pos,
        distance=float(distance),
        pct_of_distance=100.0 * max_pos / distance if distance > 0 else float("nan"),
        runtime_s=runtime_s,
        diverged=diverged,
        gate_counts=gate_counts,
        seed=seed,
        mode=mode,
    )


# ---------------------------------------------------------------------------
# Run loop
# ---------------------------------------------------------------------------


def _initial_filter_state(config: ScenarioConfig, profile: TrajectoryProfile) -> FilterState:
    init = config.init
    truth0 = profile.initial_state()
    cov = np.diag(
        np.concatenate(
            [
                np.full(3, max(init.sigma_p, 1e-6) ** 2),
                np.full(3, max(init.sigma_v, 1e-6) ** 2),
                np.full(3, max(init.sigma_theta, 1e-6) ** 2),
                np.full(3, max(init.sigma_bg, 1e-8) ** 2),
                np.full(3, max(init.sigma_ba, 1e-8) ** 2),
            ]
        )
    )
    st = truth0.copy()
    if init.mode == "perturbed":
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 404]))
        st.p_w_i = st.p_w_i + init.sigma_p * rng.standard_normal(3)
        st.v_w_i = st.v_w_i + init.sigma_v * rng.standard_normal(3)
        from .rotations import apply_attitude_error

        st.q_w_i = apply_attitude_error(st.q_w_i, init.sigma_theta * rng.standard_normal(3))
        st.b_g = st.b_g + init.sigma_bg * rng.standard_normal(3)
        st.b_a = st.b_a + init.sigma_ba * rng.standard_normal(3)
    if init.velocity_scale != 1.0:
        st.v_w_i = init.velocity_scale * st.v_w_i
    return FilterState(InertialState(st.p_w_i, st.v_w_i, st.q_w_i, st.b_g, st.b_a), cov, 0.0)


@dataclass
class _RunResult:
    metrics: RunMetrics
    filt: RangeVioFilter
    streams: SensorStreams
    checksum: str
    feature_stats: list


def _drive_filter(
    config: ScenarioConfig,
    streams: SensorStreams,
    profile: TrajectoryProfile,
    collect_feature_stats: bool = False,
) -> _RunResult:
    world = WorldConstants()
    state = _initial_filter_state(config, profile)
    filt = RangeVioFilter(
        state,
        config.filter_settings,
        config.rig.mount,
        config.rig.lrf,
        streams_noise_model(config),
        config.rig.meas_noise,
        world,
        use_range=(config.mode == "range_vio"),
    )

    events: list[tuple[float, int, object]] = []
    for stamp, obs in streams.frames:
        events.append((stamp, 0, obs))
    for rs in streams.ranges:
        events.append((rs.stamp, 1, rs))
    events.sort(key=lambda e: (e[0], e[1]))

    est_rows = []
    feature_stats = []
    t_start = time.time()
    diverged = False
    try:
        ei = 0
        for sample in streams.imu:
            while ei < len(events) and events[ei][0] <= sample.stamp + 1e-12:
                t_e, kind, payload = events[ei]
                if t_e > filt.state.stamp + 1e-12:
                    filt.process_imu(ImuSample(sample.omega_m, sample.accel_m, t_e), t_e - filt.state.stamp)
                if kind == 0:
                    filt.process_frame(t_e, payload)
                    inert = filt.state.inertial
                    est_rows.append(
                        (t_e, inert.p_w_i.copy(), inert.v_w_i.copy(), inert.q_w_i)
                    )
                    if collect_feature_stats:
                        feature_stats.append(_feature_snapshot(filt, t_e))
                else:
                    filt.process_range(payload)
                ei += 1
            if sample.stamp > filt.state.stamp + 1e-12:
                filt.process_imu(sample, sample.stamp - filt.state.stamp)
    except DivergenceError:
        diverged = True
    runtime = time.time() - t_start

    stamps = [r[0] for r in est_rows]
    est_p = np.array([r[1] for r in est_rows]) if est_rows else np.zeros((0, 3))
    est_v = np.array([r[2] for r in est_rows]) if est_rows else np.zeros((0, 3))
    est_q = [r[3] for r in est_rows]
    truth = [profile.state_at(t) for t in stamps]
    truth_p = np.array([t[0] for t in truth]) if truth else np.zeros((0, 3))
    truth_v = np.array([t[1] for t in truth]) if truth else np.zeros((0, 3))
    truth_q = [t[3] for t in truth]

    gate_counts: dict[str, int] = {}
    for rec in filt.gate_records:
        gate_counts[rec.verdict.value] = gate_counts.get(rec.verdict.value, 0) + 1

    metrics = compute_metrics(
        stamps,
        est_p,
        est_v,
        est_q,
        truth_p,
        truth_v,
        truth_q,
        profile.path_length(),
        runtime,
        diverged,
        gate_counts,
        config.seed,
        config.mode,
    )
    metrics.extras["counters"] = dict(filt.counters)
    metrics.extras["est_p"] = est_p
    metrics.extras["est_v"] = est_v
    metrics.extras["est_q"] = est_q
    return _RunResult(metrics, filt, streams, "", feature_stats)


def streams_noise_model(config: ScenarioConfig) -> NoiseModel:
    if config.noiseless:
        return NoiseModel(0.0, 0.0, 0.0, 0.0)
    return config.rig.imu_noise


def _feature_snapshot(filt: RangeVioFilter, stamp: float) -> dict:
    st = filt.state
    facet_ids = set()
    for rec in reversed(filt.gate_records):
        if rec.feature_ids is not None:
            facet_ids = set(rec.feature_ids)
            break
    rows = []
    for j, f in enumerate(st.features):
        sl = st.feature_slice(j)
        rows.append(
            {
                "track_id": f.track_id,
                "rho": f.rho,
                "var_rho": float(st.cov[sl.start + 2, sl.start + 2]),
                "in_facet": f.track_id in facet_ids,
            }
        )
    return {"stamp": stamp, "features": rows}


def stream_checksum(paths: dict) -> str:
    h = hashlib.sha256()
    for key in ("imu", "tracks", "range"):
        with open(paths[key], "rb") as fh:
            h.update(fh.read())
    return h.hexdigest()


def run_scenario(
    config: ScenarioConfig,
    out_dir=None,
    collect_feature_stats: bool = False,
) -> RunMetrics:
    """Simulate, filter, score; write the artifact directory when requested."""
    scene = make_scene(config.scene_name, config.scene_params)
    profile = config.trajectory
    streams = generate_streams(
        profile,
        scene,
        config.rig,
        config.seed,
        noiseless=config.noiseless,
        scheduled_outlier=config.scheduled_outlier,
    )

    out = Path(out_dir) if out_dir else (Path(config.out_dir) if config.out_dir else None)
    checksum = ""
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        paths = write_stream_csvs(streams, profile, out)
        checksum = stream_checksum(paths)
        # the filter consumes the parsed sensor logs, not the in-memory stream
        streams = dataclasses.replace(
            streams,
            imu=read_imu_csv(paths["imu"]),
            frames=_frames_on_grid(read_tracks_csv(paths["tracks"]), profile, config.rig),
            ranges=read_range_csv(paths["range"]),
        )

    result = _drive_filter(config, streams, profile, collect_feature_stats)
    result.checksum = checksum
    metrics = result.metrics
    metrics.extras["checksum"] = checksum
    if collect_feature_stats:
        metrics.extras["feature_stats"] = result.feature_stats

    if out is not None:
        _write_run_artifacts(config, result, out)
    return metrics


def _frames_on_grid(
    frames_csv: list, profile: TrajectoryProfile, rig: SensorRig
) -> list[tuple[float, list]]:
    """Reattach parsed observations to the full camera-frame grid (empty frames kept)."""
    by_stamp = {round(s, 9): obs for s, obs in frames_csv}
    dt = 1.0 / rig.cam_rate
    n = int(np.floor(profile.duration / dt + 1e-9))
    return [(j * dt, by_stamp.get(round(j * dt, 9), [])) for j in range(1, n + 1)]


def _write_run_artifacts(config: ScenarioConfig, result: _RunResult, out: Path):
    m = result.metrics
    with open(out / "config.json", "w") as fh:
        json.dump(config.echo_dict(), fh, indent=2)

    with open(out / "estimate.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stamp", "px", "py", "pz", "vx", "vy", "vz", "qw", "qx", "qy", "qz"])
        for stamp, p, v, q in zip(m.stamps, m.extras["est_p"], m.extras["est_v"], m.extras["est_q"]):
            w.writerow(
                [f"{stamp:.9f}"]
                + [f"{x:.12e}" for x in (*p, *v)]
                + [f"{x:.12e}" for x in (q.w, q.x, q.y, q.z)]
            )

    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["key", "value"])
        w.writerow(["max_pos_err_m", f"{m.max_pos_err:.9e}"])
        w.writerow(["final_pos_err_m", f"{m.final_pos_err:.9e}"])
        w.writerow(["distance_m", f"{m.distance:.9e}"])
        w.writerow(["pct_of_distance", f"{m.pct_of_distance:.9e}"])
        w.writerow(["runtime_s", f"{m.runtime_s:.3f}"])
        w.writerow(["diverged", int(m.diverged)])
        w.writerow(["seed", m.seed])
        w.writerow(["mode", m.mode])

    with open(out / "gates.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stamp", "verdict", "measured", "predicted", "innovation", "innovation_var"])
        for rec in result.filt.gate_records:
            w.writerow(
                [
                    f"{rec.stamp:.9f}",
                    rec.verdict.value,
                    f"{rec.measured:.6e}",
                    f"{rec.predicted:.6e}",
                    f"{rec.innovation:.6e}",
                    f"{rec.innovation_var:.6e}",
                ]
            )

    with open(out / "report.txt", "w") as fh:
        fh.write(f"scenario: scene={config.scene_name} mode={config.mode} seed={config.seed}\n")
        fh.write(f"distance travelled: {m.distance:.2f} m\n")
        fh.write(f"max position error: {m.max_pos_err:.4f} m ({m.pct_of_distance:.3f}% of distance)\n")
        fh.write(f"final position error: {m.final_pos_err:.4f} m\n")
        fh.write(f"diverged: {m.diverged}\n")
        fh.write(f"gate verdicts: {m.gate_counts}\n")
        fh.write(f"runtime: {m.runtime_s:.2f} s\n")


# ---------------------------------------------------------------------------
# Compare / sweep / observability
# ---------------------------------------------------------------------------


def compare_modes(config: ScenarioConfig, out_dir=None) -> dict[str, RunMetrics]:
    """Run vio and range_vio on byte-identical sensor streams (checksummed)."""
    out = Path(out_dir) if out_dir else None
    results = {}
    checksums = {}
    for mode in ("vio", "range_vio"):
        cfg = config.with_updates(mode=mode)
        mode_out = (out / mode) if out else None
        m = run_scenario(cfg, out_dir=mode_out)
        results[mode] = m
        checksums[mode] = m.extras.get("checksum", "")
    if out is not None and checksums["vio"] != checksums["range_vio"]:
        raise AssertionError("modes consumed different streams")
    return results


def _sweep_worker(args) -> RunMetrics:
    config_dict, seed, out_dir = args
    cfg = ScenarioConfig.from_dict(config_dict).with_updates(seed=seed)
    return run_scenario(cfg, out_dir=Path(out_dir) / f"seed_{seed:03d}" if out_dir else None)


def sweep(config: ScenarioConfig, seeds: list[int], out_dir=None, workers: int = 1) -> list[RunMetrics]:
    """Monte-Carlo sweep over seeds; each run owns its state and output directory."""
    args = [(config.echo_dict(), s, str(out_dir) if out_dir else None) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_sweep_worker, args))
    else:
        results = [_sweep_worker(a) for a in args]
    if out_dir:
        with open(Path(out_dir) / "sweep_summary.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["seed", "mode", "max_pos_err_m", "pct_of_distance", "diverged"])
            for m in results:
                w.writerow([m.seed, m.mode, f"{m.max_pos_err:.6e}", f"{m.pct_of_distance:.6e}", int(m.diverged)])
    return results


def lab_setup_from_config(
    config: ScenarioConfig, n_features: int = 12, dt: float = 1.0 / 250.0
) -> tuple[LabTrajectory, AnalysisState, np.ndarray, np.ndarray]:
    """Observability-lab inputs matching a scenario.

    The analysis body is the camera frame (the mount folded into the
    attitude); features are scene landmarks visible from the starting pose,
    best detection scores first.
    """
    profile = config.trajectory
    if profile.kind == "excited":
        raise ConfigError("observability analysis needs hover or constant-velocity trajectories")
    scene = make_scene(config.scene_name, config.scene_params)
    rig = config.rig

    p0, v0, _, q0, _ = profile.state_at(0.0)
    cam_p, cam_q = rig.mount.camera_pose(p0, q0)
    C_cam = quat_to_rotation(cam_q)

    rel = (scene.landmarks - cam_p) @ C_cam.T
    with np.errstate(divide="ignore", invalid="ignore"):
        u = rel[:, 0] / rel[:, 2]
        v = rel[:, 1] / rel[:, 2]
    ok = (rel[:, 2] > rig.z_min) & (np.abs(u) <= rig.fov_u) & (np.abs(v) <= rig.fov_v)
    idxs = np.nonzero(ok)[0]
    if len(idxs) < n_features:
        raise ConfigError(f"only {len(idxs)} landmarks visible; need {n_features}")
    order = idxs[np.argsort(-scene.scores[idxs])][:n_features]
    feats = scene.landmarks[order]

    initial = InertialState(cam_p, v0, cam_q, np.zeros(3), np.zeros(3))
    analysis = AnalysisState(initial, feats)
    steps = int(round(profile.duration / dt))
    traj = LabTrajectory.constant_acceleration(initial, np.zeros(3), dt, steps)
    return traj, analysis, rig.lrf.u_r_cam, np.zeros(3)


def run_observability(
    config: ScenarioConfig,
    out_dir=None,
    n_features: int = 12,
    dt: float = 1.0 / 250.0,
    row_interval_s: float = 0.5,
) -> dict[str, NullspaceReport]:
    """Nullspace reports for the vio and range_vio sensor sets on one trajectory."""
    traj, analysis, u_r, accel_body = lab_setup_from_config(config, n_features, dt)
    stride = max(1, int(round(row_interval_s / dt)))
    ks = list(range(2, len(traj) + 1, stride))
    reports = {}
    for label, include_range in (("vio", False), ("range_vio", True)):
        M = stack_rows(
            traj,
            analysis,
            ks,
            u_r_body=u_r if include_range else None,
            include_vision=True,
            include_range=include_range,
        )
        rep = nullspace_report(M, analysis, traj.state(1), accel_body=accel_body)
        reports[label] = rep
        if out_dir is not None:
            write_report(rep, out_dir, label)
    if out_dir is not None:
        with open(Path(out_dir) / "observability_summary.txt", "w") as fh:
            for label, rep in reports.items():
                scale_v = rep.verdicts.get("scale", "n/a")
                fh.write(f"{label}: scale: {scale_v}; nullity {rep.nullity}\n")
    return reports
