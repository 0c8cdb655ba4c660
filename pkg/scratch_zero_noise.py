import time

import numpy as np

from rangevio.filterloop import FilterSettings, RangeVioFilter
from rangevio.propagation import ImuSample, NoiseModel
from rangevio.simulation import SensorRig, TrajectoryProfile, flat_plane, generate_streams
from rangevio.state import FilterState, WorldConstants
from rangevio.vision import MeasurementNoise

t0 = time.time()
profile = TrajectoryProfile(kind="constant_velocity", duration=10.0, speed=2.0)
scene = flat_plane()
rig = SensorRig()
streams = generate_streams(profile, scene, rig, seed=0, noiseless=True)
print(f"gen {time.time()-t0:.1f}s: imu={len(streams.imu)} frames={len(streams.frames)} ranges={len(streams.ranges)}")
print("obs counts first frames:", [len(o) for _, o in streams.frames[:5]])

world = WorldConstants()
state = FilterState(profile.initial_state(), np.eye(15) * 1e-8, 0.0)
filt = RangeVioFilter(
    state,
    FilterSettings(),
    rig.mount,
    rig.lrf,
    NoiseModel(0, 0, 0, 0),
    MeasurementNoise(),
    world,
    use_range=True,
)

events = []
for stamp, obs in streams.frames:
    events.append((stamp, 1, obs))
for rs in streams.ranges:
    events.append((rs.stamp, 2, rs))
events.sort(key=lambda e: (e[0], e[1]))

ei = 0
max_vis_innov = 0.0
max_rng_innov = 0.0
n_acc = 0
for sample in streams.imu:
    while ei < len(events) and events[ei][0] <= sample.stamp + 1e-12:
        t_e, kind, payload = events[ei]
        if t_e > filt.state.stamp + 1e-12:
            filt.process_imu(ImuSample(sample.omega_m, sample.accel_m, t_e), t_e - filt.state.stamp)
        if kind == 1:
            rep = filt.process_frame(t_e, payload)
            max_vis_innov = max(max_vis_innov, rep.max_innovation)
        else:
            rec = filt.process_range(payload)
            if rec.verdict.value == "accepted":
                n_acc += 1
                max_rng_innov = max(max_rng_innov, abs(rec.innovation))
        ei += 1
    if sample.stamp > filt.state.stamp + 1e-12:
        filt.process_imu(sample, sample.stamp - filt.state.stamp)

p_true, v_true, _, _, _ = profile.state_at(filt.state.stamp)
print(f"run total {time.time()-t0:.1f}s")
print("features in state:", len(filt.state.features), "clones:", len(filt.state.clones))
print("max visual innovation:", max_vis_innov)
print("range accepted:", n_acc, "of", len(streams.ranges), "max range innov:", max_rng_innov)
print("final pos err:", np.linalg.norm(filt.state.inertial.p_w_i - p_true))
print("final vel err:", np.linalg.norm(filt.state.inertial.v_w_i - v_true))
print("counters:", filt.counters)
verdicts = {}
for r in filt.gate_records:
    verdicts[r.verdict.value] = verdicts.get(r.verdict.value, 0) + 1
print("verdicts:", verdicts)
