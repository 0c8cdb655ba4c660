"""Synthetic ground truth: scenes, trajectory profiles, and sensor streams.

Trajectories are closed-form (position, velocity, acceleration) so the IMU
signals are exact; transitions between rest and cruise use quintic velocity
blends, keeping the synthesized specific force continuous. All randomness is
driven by a seeded generator: identical (config, seed) pairs give bit-identical
streams.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .facet import LrfExtrinsics, RangeSample
from .mesh import TriangleMesh, make_box, make_rectangle, merge_meshes
from .propagation import ImuSample, NoiseModel
from .rotations import Quaternion, quat_to_rotation
from .state import CameraMount, InertialState, WorldConstants
from .vision import FeatureObservation, MeasurementNoise


# ---------------------------------------------------------------------------
# Scenes
# ---------------------------------------------------------------------------


@dataclass
class Scene:
    name: str
    mesh: TriangleMesh
    landmarks: np.ndarray  # (L, 3), on mesh faces
    scores: np.ndarray  # (L,) synthetic detection scores in (0, 1)


def _sample_landmarks(mesh: TriangleMesh, count: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    pts, _ = mesh.sample_surface(count, rng)
    scores = rng.uniform(0.2, 1.0, size=count)
    return pts, scores


def flat_plane(
    x_min=-30.0, x_max=180.0, y_min=-12.0, y_max=12.0, landmarks=600, seed=12345
) -> Scene:
    verts, faces = make_rectangle(x_min, x_max, y_min, y_max, 0.0)
    mesh = TriangleMesh(verts, faces)
    pts, scores = _sample_landmarks(mesh, int(landmarks), int(seed))
    return Scene("flat_plane", mesh, pts, scores)


def urban_strip(
    x_min=-30.0,
    x_max=180.0,
    y_min=-12.0,
    y_max=12.0,
    transition=0.5,
    box_size=6.0,
    box_gap=2.0,
    min_height=2.0,
    max_height=6.0,
    landmarks=750,
    seed=12345,
) -> Scene:
    """Flat ground for the first part of the strip, box 'rooftops' after it."""
    parts = [make_rectangle(x_min, x_max, y_min, y_max, 0.0)]
    rng = np.random.default_rng(int(seed) + 1)
    x_t = x_min + transition * (x_max - x_min)
    x = x_t
    while x + box_size <= x_max:
        y = y_min
        while y + box_size <= y_max:
            h = rng.uniform(min_height, max_height)
            parts.append(
                make_box(
                    center=(x + box_size / 2, y + box_size / 2, h / 2),
                    size=(box_size, box_size, h),
                )
            )
            y += box_size + box_gap
        x += box_size + box_gap
    mesh = merge_meshes(parts)
    pts, scores = _sample_landmarks(mesh, int(landmarks), int(seed))
    return Scene("urban_strip", mesh, pts, scores)


def indoor_boxes(
    x_min=-2.0,
    x_max=16.0,
    y_min=-2.5,
    y_max=2.5,
    box_len=1.5,
    box_width=2.0,
    heights=(0.4, 1.0, 0.5, 1.2, 0.3, 0.9, 0.6, 1.1),
    landmarks=2500,
    seed=12345,
) -> Scene:
    """Adjacent boxes of stepped heights under the path: repeated 90-degree drop-offs."""
    parts = [make_rectangle(x_min, x_max, y_min, y_max, 0.0)]
    x = 0.0
    i = 0
    while x + box_len <= x_max - 1.0:
        h = heights[i % len(heights)]
        parts.append(
            make_box(center=(x + box_len / 2, 0.0, h / 2), size=(box_len, box_width, h))
        )
        x += box_len  # no gaps: tops meet at vertical steps
        i += 1
    mesh = merge_meshes(parts)
    pts, scores = _sample_landmarks(mesh, int(landmarks), int(seed))
    return Scene("indoor_boxes", mesh, pts, scores)


def textured_wall(
    x_min=-5.0, x_max=25.0, z_min=0.0, z_max=8.0, y_wall=4.0, landmarks=350, seed=12345
) -> Scene:
    """Vertical plane at y = y_wall, for side-looking rigs."""
    verts = np.array(
        [
            [x_min, y_wall, z_min],
            [x_max, y_wall, z_min],
            [x_max, y_wall, z_max],
            [x_min, y_wall, z_max],
        ]
    )
    faces = np.array([[0, 1, 2], [0, 2, 3]])
    mesh = TriangleMesh(verts, faces)
    pts, scores = _sample_landmarks(mesh, int(landmarks), int(seed))
    return Scene("textured_wall", mesh, pts, scores)


BUILTIN_SCENES = {
    "flat_plane": flat_plane,
    "urban_strip": urban_strip,
    "indoor_boxes": indoor_boxes,
    "textured_wall": textured_wall,
}


def builtin_scenes() -> dict:
    return dict(BUILTIN_SCENES)


def make_scene(name: str, params: dict | None = None) -> Scene:
    if name not in BUILTIN_SCENES:
        raise KeyError(f"unknown scene '{name}'")
    return BUILTIN_SCENES[name](**(params or {}))


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------


def _smoothstep(u: float) -> tuple[float, float, float]:
    """Quintic smoothstep and its first two derivatives on [0, 1]."""
    u = min(max(u, 0.0), 1.0)
    e = u**3 * (6 * u**2 - 15 * u + 10)
    de = 30 * u**2 * (u - 1) ** 2
    dde = 60 * u * (2 * u - 1) * (u - 1)
    return e, de, dde


def _smoothstep_integral(u: float) -> float:
    u = min(max(u, 0.0), 1.0)
    return u**4 * (u**2 - 3 * u + 2.5)


@dataclass
class TrajectoryProfile:
    """Closed-form trajectory: hover lead-in, quintic blend to cruise, optional
    sinusoidal excitation ramped in smoothly after cruise begins."""

    kind: str = "constant_velocity"  # hover | constant_velocity | excited
    duration: float = 60.0
    speed: float = 2.0
    start: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 11.0]))
    hover_time: float = 0.0
    blend_time: float = 0.0
    excitation_amp: np.ndarray = field(default_factory=lambda: np.array([0.5, 0.3, 0.4]))
    excitation_freq: np.ndarray = field(default_factory=lambda: np.array([0.40, 0.50, 0.45]))
    excitation_ramp: float = 2.0
    attitude: Quaternion = field(default_factory=Quaternion.identity)

    def __post_init__(self):
        if self.kind not in ("hover", "constant_velocity", "excited"):
            raise ValueError(f"unknown trajectory kind '{self.kind}'")
        self.start = np.asarray(self.start, dtype=float)
        self.excitation_amp = np.asarray(self.excitation_amp, dtype=float)
        self.excitation_freq = np.asarray(self.excitation_freq, dtype=float)
        if self.kind == "hover":
            self.speed = 0.0

    def cruise_start(self) -> float:
        return self.hover_time + self.blend_time

    def state_at(self, t: float) -> tuple[np.ndarray, np.ndarray, np.ndarray, Quaternion, np.ndarray]:
        """(position, velocity, acceleration, attitude, body rate) at time t."""
        direction = np.array([1.0, 0.0, 0.0])
        p = self.start.copy()
        v = np.zeros(3)
        a = np.zeros(3)
        if self.kind != "hover" and self.speed != 0.0:
            t_h, t_b = self.hover_time, self.blend_time
            if t >= t_h and t_b > 0.0:
                tau = (t - t_h) / t_b
                if tau < 1.0:
                    e, de, _ = _smoothstep(tau)
                    p += direction * self.speed * t_b * _smoothstep_integral(tau)
                    v += direction * self.speed * e
                    a += direction * self.speed * de / t_b
                else:
                    p += direction * self.speed * (t_b * 0.5 + (t - t_h - t_b))
                    v += direction * self.speed
            elif t >= t_h:
                # no blend: the traverse starts already at cruise speed
                p += direction * self.speed * (t - t_h)
                v += direction * self.speed
        if self.kind == "excited":
            t_c = self.cruise_start()
            if t > t_c:
                s = t - t_c
                if self.excitation_ramp > 0:
                    w, dw, ddw = _smoothstep(s / self.excitation_ramp)
                    dw /= self.excitation_ramp
                    ddw /= self.excitation_ramp**2
                else:
                    w, dw, ddw = 1.0, 0.0, 0.0
                om = 2.0 * math.pi * self.excitation_freq
                osc = self.excitation_amp * np.sin(om * s)
                dosc = self.excitation_amp * om * np.cos(om * s)
                ddosc = -self.excitation_amp * om**2 * np.sin(om * s)
                p += w * osc
                v += dw * osc + w * dosc
                a += ddw * osc + 2 * dw * dosc + w * ddosc
        return p, v, a, self.attitude, np.zeros(3)

    def initial_state(self) -> InertialState:
        p, v, _, q, _ = self.state_at(0.0)
        return InertialState(p, v, q, np.zeros(3), np.zeros(3))

    def path_length(self, n: int = 2000) -> float:
        ts = np.linspace(0.0, self.duration, n)
        ps = np.array([self.state_at(t)[0] for t in ts])
        return float(np.sum(np.linalg.norm(np.diff(ps, axis=0), axis=1)))


# ---------------------------------------------------------------------------
# Sensor rig and streams
# ---------------------------------------------------------------------------


@dataclass
class SensorRig:
    imu_rate: float = 250.0
    cam_rate: float = 30.0
    lrf_rate: float = 25.0
    imu_noise: NoiseModel = field(
        default_factory=lambda: NoiseModel(1e-4, 1.5e-3, 1e-6, 1e-5)
    )
    meas_noise: MeasurementNoise = field(default_factory=MeasurementNoise)
    mount: CameraMount = field(default_factory=CameraMount.nadir)
    lrf: LrfExtrinsics = field(default_factory=LrfExtrinsics.along_optical_axis)
    fov_u: float = 1.0
    fov_v: float = 0.75
    z_min: float = 0.2
    max_range: float = 40.0
    outlier_prob: float = 0.0
    outlier_mag: tuple[float, float] = (2.0, 10.0)
    max_track_frames: int | None = None

    def __post_init__(self):
        if self.imu_rate <= 0 or self.cam_rate <= 0 or self.lrf_rate <= 0:
            raise ValueError("sensor rates must be positive")

    def noiseless(self) -> "SensorRig":
        out = SensorRig(
            self.imu_rate,
            self.cam_rate,
            self.lrf_rate,
            NoiseModel(0.0, 0.0, 0.0, 0.0),
            self.meas_noise,
            self.mount,
            self.lrf,
            self.fov_u,
            self.fov_v,
            self.z_min,
            self.max_range,
            0.0,
            self.outlier_mag,
            self.max_track_frames,
        )
        return out


@dataclass
class RangeTruth:
    stamp: float
    range_true: float
    hit_point: np.ndarray
    outlier: bool


@dataclass
class SensorStreams:
    imu: list[ImuSample]
    frames: list[tuple[float, list[FeatureObservation]]]
    ranges: list[RangeSample]
    bias_gyro: np.ndarray  # (n_imu, 3) true bias at each sample
    bias_accel: np.ndarray
    range_truth: list[RangeTruth]
    track_landmark: dict[int, int]  # track id -> landmark index


def camera_pose_at(profile: TrajectoryProfile, rig: SensorRig, t: float):
    p, _, _, q, _ = profile.state_at(t)
    return rig.mount.camera_pose(p, q)


def synth_imu(
    profile: TrajectoryProfile,
    rig: SensorRig,
    seed: int,
    world: WorldConstants | None = None,
    noiseless: bool = False,
) -> tuple[list[ImuSample], np.ndarray, np.ndarray]:
    """IMU stream at the rig rate; signals are exact at interval midpoints.

    Returns (samples, true gyro bias per sample, true accel bias per sample).
    Bias random walks and white noise come from the seeded generator; zero
    densities (or noiseless=True) give the exact analytic signals.
    """
    if world is None:
        world = WorldConstants()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 101]))
    dt = 1.0 / rig.imu_rate
    n = int(round(profile.duration / dt))
    nm = rig.imu_noise if not noiseless else NoiseModel(0, 0, 0, 0)
    g = world.gravity_w

    samples = []
    bg = np.zeros(3)
    ba = np.zeros(3)
    bgs = np.zeros((n, 3))
    bas = np.zeros((n, 3))
    sq = math.sqrt(dt)
    for k in range(n):
        t_mid = (k + 0.5) * dt
        _, _, a_w, q, omega = profile.state_at(t_mid)
        C = quat_to_rotation(q)
        f_body = C @ (a_w - g)
        w_noise = nm.gyro_noise_density / sq * rng.standard_normal(3)
        a_noise = nm.accel_noise_density / sq * rng.standard_normal(3)
        samples.append(ImuSample(omega + bg + w_noise, f_body + ba + a_noise, (k + 1) * dt))
        bgs[k] = bg
        bas[k] = ba
        bg = bg + nm.gyro_bias_walk * sq * rng.standard_normal(3)
        ba = ba + nm.accel_bias_walk * sq * rng.standard_normal(3)
    return samples, bgs, bas


def _visible_set(scene: Scene, cam_pos, C_cam, rig: SensorRig) -> tuple[np.ndarray, np.ndarray]:
    """Indices and normalized-plane uvs of landmarks visible from this pose.

    Frustum test is vectorized over all landmarks; occlusion is resolved by
    ray casting only the frustum survivors.
    """
    rel = (scene.landmarks - cam_pos) @ C_cam.T
    z = rel[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = rel[:, 0] / z
        v = rel[:, 1] / z
    in_fov = (z >= rig.z_min) & (np.abs(u) <= rig.fov_u) & (np.abs(v) <= rig.fov_v)
    idxs = np.nonzero(in_fov)[0]
    if len(idxs) == 0:
        return idxs, np.zeros((0, 2))
    dirs = scene.landmarks[idxs] - cam_pos
    # with direction length = landmark distance, an unoccluded landmark's
    # first hit is its own face at t ~= 1
    t_first = scene.mesh.first_hit_distances(cam_pos, dirs)
    keep = idxs[t_first >= 1.0 - 1e-6]
    uvs = np.column_stack([u[keep], v[keep]]) if len(keep) else np.zeros((0, 2))
    return keep, uvs


def synth_tracks(
    profile: TrajectoryProfile,
    scene: Scene,
    rig: SensorRig,
    seed: int,
    noiseless: bool = False,
) -> tuple[list[tuple[float, list[FeatureObservation]]], dict[int, int]]:
    """Per-frame feature observations with visibility, occlusion, noise, and
    track birth/death. Track lifetimes can be capped (texture-poverty stand-in)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 202]))
    dt = 1.0 / rig.cam_rate
    n = int(math.floor(profile.duration / dt + 1e-9))
    sigma = 0.0 if noiseless else rig.meas_noise.sigma_v

    L = len(scene.landmarks)
    generation = np.zeros(L, dtype=int)
    active_id = np.full(L, -1, dtype=int)
    frames_alive = np.zeros(L, dtype=int)
    lifetime = np.full(L, -1, dtype=int)
    track_landmark: dict[int, int] = {}
    frames = []
    for j in range(1, n + 1):
        t = j * dt
        cam_pos, q_cam = camera_pose_at(profile, rig, t)
        C_cam = quat_to_rotation(q_cam)
        vis_idx, vis_uv = _visible_set(scene, cam_pos, C_cam, rig)
        vis_mask = np.zeros(L, dtype=bool)
        vis_mask[vis_idx] = True
        obs_list = []
        lost = ~vis_mask & (active_id >= 0)
        active_id[lost] = -1
        frames_alive[lost] = 0
        for li, uv in zip(vis_idx, vis_uv):
            if rig.max_track_frames is not None and active_id[li] >= 0:
                if frames_alive[li] >= lifetime[li]:
                    # force a one-frame gap; the landmark re-enters as a new track
                    active_id[li] = -1
                    frames_alive[li] = 0
                    continue
            if active_id[li] < 0:
                generation[li] += 1
                active_id[li] = li + L * generation[li]
                track_landmark[int(active_id[li])] = li
                if rig.max_track_frames is not None:
                    lifetime[li] = rig.max_track_frames + int(rng.integers(0, 5))
            frames_alive[li] += 1
            noisy = uv + sigma * rng.standard_normal(2)
            obs_list.append(
                FeatureObservation(int(active_id[li]), t, noisy, float(scene.scores[li]))
            )
        frames.append((t, obs_list))
    return frames, track_landmark


def synth_range(
    profile: TrajectoryProfile,
    scene: Scene,
    rig: SensorRig,
    seed: int,
    noiseless: bool = False,
    scheduled_outlier: tuple[float, float] | None = None,
) -> tuple[list[RangeSample], list[RangeTruth]]:
    """Laser samples along the trajectory: exact ray-mesh range plus noise and
    (optionally) outlier spikes. A scheduled outlier (stamp, magnitude) hits
    the sample nearest that stamp, emulating a spurious tall obstacle."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 303]))
    dt = 1.0 / rig.lrf_rate
    n = int(math.floor(profile.duration / dt + 1e-9))
    sigma = 0.0 if noiseless else rig.meas_noise.sigma_r

    samples = []
    truth = []
    sched_idx = None
    if scheduled_outlier is not None:
        sched_idx = int(round(scheduled_outlier[0] / dt))
    for j in range(1, n + 1):
        t = j * dt
        cam_pos, q_cam = camera_pose_at(profile, rig, t)
        C_cam = quat_to_rotation(q_cam)
        u_w = C_cam.T @ rig.lrf.u_r_cam
        hit = scene.mesh.ray_cast(cam_pos, u_w)
        # draw noise deterministically whether or not the ray hits
        noise = sigma * rng.standard_normal()
        bern = rng.uniform()
        mag = rng.uniform(rig.outlier_mag[0], rig.outlier_mag[1])
        if hit is None or hit.t > rig.max_range:
            continue
        value = hit.t + noise
        outlier = False
        if not noiseless and rig.outlier_prob > 0 and bern < rig.outlier_prob:
            value += mag
            outlier = True
        if sched_idx is not None and j == sched_idx:
            value = hit.t + noise + scheduled_outlier[1]
            outlier = True
        value = min(max(value, 1e-3), rig.max_range)
        samples.append(RangeSample(value, t))
        truth.append(RangeTruth(t, float(hit.t), hit.point, outlier))
    return samples, truth


def generate_streams(
    profile: TrajectoryProfile,
    scene: Scene,
    rig: SensorRig,
    seed: int,
    noiseless: bool = False,
    scheduled_outlier: tuple[float, float] | None = None,
    world: WorldConstants | None = None,
) -> SensorStreams:
    imu, bgs, bas = synth_imu(profile, rig, seed, world, noiseless)
    frames, track_landmark = synth_tracks(profile, scene, rig, seed, noiseless)
    ranges, range_truth = synth_range(profile, scene, rig, seed, noiseless, scheduled_outlier)
    return SensorStreams(imu, frames, ranges, bgs, bas, range_truth, track_landmark)


# ---------------------------------------------------------------------------
# CSV interchange (sensor and truth logs)
# ---------------------------------------------------------------------------


def write_stream_csvs(streams: SensorStreams, profile: TrajectoryProfile, out_dir) -> dict:
    """Write imu/tracks/range sensor logs plus truth logs; returns paths."""
    import csv
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}

    paths["imu"] = out / "imu.csv"
    with open(paths["imu"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stamp", "wx", "wy", "wz", "ax", "ay", "az"])
        for s in streams.imu:
            w.writerow([f"{s.stamp:.9f}"] + [f"{v:.12e}" for v in (*s.omega_m, *s.accel_m)])

    paths["tracks"] = out / "tracks.csv"
    with open(paths["tracks"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stamp", "track_id", "u", "v", "score"])
        for stamp, obs in streams.frames:
            for o in obs:
                w.writerow([f"{stamp:.9f}", o.track_id, f"{o.uv[0]:.12e}", f"{o.uv[1]:.12e}", f"{o.score:.6f}"])

    paths["range"] = out / "range.csv"
    with open(paths["range"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stamp", "range_m"])
        for r in streams.ranges:
            w.writerow([f"{r.stamp:.9f}", f"{r.range_m:.12e}"])

    paths["truth"] = out / "truth.csv"
    with open(paths["truth"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stamp", "px", "py", "pz", "vx", "vy", "vz", "qw", "qx", "qy", "qz"])
        for stamp, _ in streams.frames:
            p, v, _, q, _ = profile.state_at(stamp)
            w.writerow([f"{stamp:.9f}"] + [f"{x:.12e}" for x in (*p, *v, q.w, q.x, q.y, q.z)])

    paths["range_truth"] = out / "range_truth.csv"
    with open(paths["range_truth"], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stamp", "range_true", "hit_x", "hit_y", "hit_z", "outlier"])
        for rt in streams.range_truth:
            w.writerow(
                [f"{rt.stamp:.9f}", f"{rt.range_true:.12e}"]
                + [f"{x:.12e}" for x in rt.hit_point]
                + [int(rt.outlier)]
            )
    return paths


def read_imu_csv(path) -> list[ImuSample]:
    import csv

    out = []
    with open(path, newline="") as fh:
        r = csv.DictReader(fh)
        for row in r:
            out.append(
                ImuSample(
                    np.array([float(row["wx"]), float(row["wy"]), float(row["wz"])]),
                    np.array([float(row["ax"]), float(row["ay"]), float(row["az"])]),
                    float(row["stamp"]),
                )
            )
    return out


def read_tracks_csv(path) -> list[tuple[float, list[FeatureObservation]]]:
    import csv

    frames: dict[float, list[FeatureObservation]] = {}
    order = []
    with open(path, newline="") as fh:
        r = csv.DictReader(fh)
        for row in r:
            stamp = float(row["stamp"])
            if stamp not in frames:
                frames[stamp] = []
                order.append(stamp)
            frames[stamp].append(
                FeatureObservation(
                    int(row["track_id"]),
                    stamp,
                    np.array([float(row["u"]), float(row["v"])]),
                    float(row["score"]),
                )
            )
    return [(s, frames[s]) for s in order]


def read_range_csv(path) -> list[RangeSample]:
    import csv

    out = []
    with open(path, newline="") as fh:
        r = csv.DictReader(fh)
        for row in r:
            out.append(RangeSample(float(row["range_m"]), float(row["stamp"])))
    return out
