"""Ground-truthed synthetic scene generator for the multi-array experiment.

Builds scenarios with known array poses, calibration points, and source
trajectories, then synthesizes what the fusion center would receive: per-array
DOAs with angular noise, optional snapping to the level-4 search grid, and
per-observation array dropout.  Multichannel audio synthesis for the SRP-PHAT
front end uses windowed-sinc fractional delays matching the plane-wave TDOA
model.

Array positions here are ground truth only the simulator knows; the mapping
methods never see them.  The default scenario places five arrays (three
ceiling, two wall) around an office-sized room, with 11 calibration points:
six on a table at 0.78 m, whose points 1-4 form a 0.76 m x 1.37 m rectangle
and points 5-6 a long edge, and five on chairs at 0.50 m.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .fusion import CalibrationSet, ConcatenatedDoa, concat_doas
from .grid import ArrayGeometry, HalfSphereGrid, build_halfsphere_grid
from .srp import MultichannelFrame, frame_signal

SINC_HALF_WIDTH = 32


@dataclass(frozen=True)
class ArrayPose:
    """Global position plus local-to-global rotation of one array."""

    position: np.ndarray
    orientation: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=float)
        rot = np.asarray(self.orientation, dtype=float)
        if pos.shape != (3,) or rot.shape != (3, 3):
            raise ValueError("pose needs a 3-vector position and 3x3 orientation")
        if np.max(np.abs(rot.T @ rot - np.eye(3))) > 1e-9 \
                or abs(np.linalg.det(rot) - 1.0) > 1e-9:
            raise ValueError("orientation must be a proper rotation matrix")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "orientation", rot)

    @classmethod
    def from_axes(cls, position, x_axis, y_axis, z_axis) -> "ArrayPose":
        """Build from the global directions of the local axes (columns)."""
        return cls(position=np.asarray(position, dtype=float),
                   orientation=np.array([x_axis, y_axis, z_axis], dtype=float).T)


@dataclass
class DropoutPolicy:
    """Per-observation array dropout.

    ``one_of_m`` drops one uniformly-chosen array with probability ``prob``
    per record.  Drops that would leave a record with no active array are
    skipped unless ``allow_empty`` is set.
    """

    kind: str = "none"  # "none" | "one_of_m"
    prob: float = 0.5
    allow_empty: bool = False

    def apply(self, mask: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "none":
            return mask
        if self.kind != "one_of_m":
            raise ValueError(f"unknown dropout kind {self.kind!r}")
        mask = mask.copy()
        if rng.random() < self.prob:
            victim = int(rng.integers(len(mask)))
            if mask[victim] and (self.allow_empty or mask.sum() > 1):
                mask[victim] = False
        return mask


@dataclass
class Trajectory:
    """Ordered waypoints traversed at constant speed."""

    waypoints: np.ndarray
    speed_mps: float = 0.25

    def __post_init__(self):
        w = np.asarray(self.waypoints, dtype=float)
        if w.ndim != 2 or w.shape[1] != 3 or w.shape[0] < 2:
            raise ValueError("waypoints must be (>=2, 3)")
        object.__setattr__(self, "waypoints", w)

    def total_length(self) -> float:
        return float(np.sum(np.linalg.norm(np.diff(self.waypoints, axis=0), axis=1)))

    def position_at(self, distance: float) -> np.ndarray:
        segs = np.diff(self.waypoints, axis=0)
        lens = np.linalg.norm(segs, axis=1)
        acc = 0.0
        for seg, length, start in zip(segs, lens, self.waypoints[:-1]):
            if distance <= acc + length and length > 0.0:
                return start + seg * ((distance - acc) / length)
            acc += length
        return self.waypoints[-1].copy()


@dataclass
class Scenario:
    """Complete synthetic-experiment description."""

    poses: list[ArrayPose]
    calibration_points: dict[int, np.ndarray]
    trajectories: dict[str, Trajectory]
    noise_deg: float = 2.0
    quantize_to_grid: bool = True
    dropout: DropoutPolicy = field(default_factory=DropoutPolicy)
    seed: int = 0
    room_size: np.ndarray = field(default_factory=lambda: np.array([4.2, 4.6, 2.4]))

    def __post_init__(self):
        self.calibration_points = {int(k): np.asarray(v, dtype=float)
                                   for k, v in self.calibration_points.items()}
        self.room_size = np.asarray(self.room_size, dtype=float)
        for name, traj in self.trajectories.items():
            w = traj.waypoints
            if np.any(w < 0.0) or np.any(w > self.room_size):
                raise ValueError(f"trajectory {name!r} leaves the room bounds")

    @property
    def n_arrays(self) -> int:
        return len(self.poses)


@dataclass
class GroundTruthRecord:
    """True source state plus the observation the fusion center would see."""

    timestamp_ms: int
    true_position: np.ndarray
    true_doas: list[np.ndarray | None]
    observed: ConcatenatedDoa


def true_doa(pose: ArrayPose, source: np.ndarray) -> np.ndarray | None:
    """Unit direction to a source in the array's local frame.

    Returns None when the source lies behind the array's half-sphere
    (local z < 0); the z = 0 boundary is accepted.
    """
    delta = np.asarray(source, dtype=float) - pose.position
    dist = np.linalg.norm(delta)
    if dist == 0.0:
        raise ValueError("source coincides with the array position")
    local = pose.orientation.T @ (delta / dist)
    return None if local[2] < 0.0 else local


def perturb_doa(d: np.ndarray, sigma_deg: float, rng: np.random.Generator) -> np.ndarray:
    """Rotate a DOA by an angle ~ Normal(0, sigma) about a random tangent axis."""
    if sigma_deg == 0.0:
        return d
    theta = np.radians(rng.normal(0.0, sigma_deg))
    axis = rng.normal(size=3)
    axis -= d * (axis @ d)
    axis /= np.linalg.norm(axis)
    rotated = d * np.cos(theta) + np.cross(axis, d) * np.sin(theta)
    if rotated[2] < 0.0:
        rotated[2] = 0.0
    return rotated / np.linalg.norm(rotated)


def _observe(scn: Scenario, source: np.ndarray, grid: HalfSphereGrid | None,
             rng: np.random.Generator, timestamp_ms: int,
             with_dropout: bool = True) -> GroundTruthRecord:
    truths: list[np.ndarray | None] = []
    emitted: list[np.ndarray | None] = []
    for pose in scn.poses:
        d = true_doa(pose, source)
        truths.append(d)
        if d is None:
            emitted.append(None)
            continue
        obs = perturb_doa(d, scn.noise_deg, rng)
        if grid is not None:
            obs = grid.points[grid.nearest_index(obs)]
        emitted.append(obs)
    mask = np.array([e is not None for e in emitted])
    if with_dropout:
        mask = scn.dropout.apply(mask, rng)
    per_array = [e if mask[a] else None for a, e in enumerate(emitted)]
    return GroundTruthRecord(
        timestamp_ms=timestamp_ms,
        true_position=np.asarray(source, dtype=float).copy(),
        true_doas=truths,
        observed=concat_doas(per_array, timestamp_ms=timestamp_ms))


def synthesize_doa_stream(scn: Scenario, trajectory: str, period_ms: int = 64,
                          rng: np.random.Generator | None = None,
                          start_ms: int = 0) -> list[GroundTruthRecord]:
    """Emit one observation per period while the source rides a trajectory.

    The source moves at the trajectory's constant speed; per array the true
    DOA gets angular noise, optional snapping to the level-4 grid, and the
    scenario's dropout policy.  Deterministic for a given seed.
    """
    if trajectory not in scn.trajectories:
        raise KeyError(f"scenario has no trajectory {trajectory!r}")
    traj = scn.trajectories[trajectory]
    rng = np.random.default_rng(scn.seed) if rng is None else rng
    grid = build_halfsphere_grid(4) if scn.quantize_to_grid else None
    total = traj.total_length()
    records = []
    step = 0
    while True:
        t_s = step * period_ms / 1000.0
        dist = t_s * traj.speed_mps
        if dist > total:
            break
        records.append(_observe(scn, traj.position_at(dist), grid, rng,
                                timestamp_ms=start_ms + step * period_ms))
        step += 1
    return records


def synthesize_calibration(scn: Scenario, dwell_s: float = 30.0,
                           period_ms: int = 64, n_dim: int = 2,
                           points=None,
                           rng: np.random.Generator | None = None) -> CalibrationSet:
    """Record the source dwelling at each calibration point.

    Each point contributes ``floor(dwell_s * 1000 / period_ms)`` observations
    (468 for the 30 s / 64 ms defaults).  Noise and grid quantization follow
    the scenario; dropout is not applied, since calibration sources are
    assumed strong enough for every array.
    """
    rng = np.random.default_rng(scn.seed) if rng is None else rng
    grid = build_halfsphere_grid(4) if scn.quantize_to_grid else None
    ids = sorted(scn.calibration_points) if points is None else list(points)
    per_point = int(dwell_s * 1000.0 // period_ms)
    cols_d, cols_r, ts, segments = [], [], [], []
    masks = []
    for k, pid in enumerate(ids):
        src = scn.calibration_points[pid]
        start = len(cols_d)
        for i in range(per_point):
            rec = _observe(scn, src, grid, rng, with_dropout=False,
                           timestamp_ms=int(k * dwell_s * 1000) + i * period_ms)
            cols_d.append(rec.observed.values)
            cols_r.append(src[:n_dim])
            masks.append(rec.observed.active_mask)
            ts.append(rec.timestamp_ms)
        segments.append((pid, start, len(cols_d)))
    return CalibrationSet(
        D=np.array(cols_d).T, R=np.array(cols_r).T, segments=segments,
        timestamps_ms=np.array(ts), masks=np.array(masks).T)


def fractional_delay(src: np.ndarray, delay: float, n_out: int, offset: int) -> np.ndarray:
    """Windowed-sinc interpolation: out[n] = src(n + offset - delay)."""
    shifted = offset - delay
    n0 = int(np.floor(shifted))
    frac = shifted - n0
    taps = np.arange(-SINC_HALF_WIDTH, SINC_HALF_WIDTH + 1)
    kernel = np.sinc(frac - taps) * np.hanning(2 * SINC_HALF_WIDTH + 1)
    out = np.zeros(n_out)
    for i, tap in enumerate(taps):
        start = n0 + tap
        out += kernel[i] * src[start:start + n_out]
    return out


def synthesize_audio_signal(geom: ArrayGeometry, pose: ArrayPose,
                            source_signal: np.ndarray, source_pos: np.ndarray,
                            snr_db: float | None = None,
                            rng: np.random.Generator | None = None) -> np.ndarray:
    """Eight-channel signal for a source, with plane-wave per-mic delays.

    Microphone m receives the source delayed by ``fs * (mic_m . d) / c``
    samples (matching :func:`doafusion.grid.tdoa_for_doa`), via windowed-sinc
    interpolation, plus white noise at ``snr_db`` (None means noiseless).
    """
    d = true_doa(pose, source_pos)
    if d is None:
        raise ValueError("source is behind the array's half-sphere")
    rng = np.random.default_rng(0) if rng is None else rng
    source_signal = np.asarray(source_signal, dtype=float)
    delays = geom.sample_rate / geom.speed_of_sound * (geom.mic_positions @ d)
    pad = SINC_HALF_WIDTH + int(np.ceil(np.max(np.abs(delays)))) + 2
    src = np.concatenate([np.zeros(pad), source_signal, np.zeros(pad)])
    n_out = source_signal.shape[0]
    out = np.stack([fractional_delay(src, dm, n_out, offset=pad) for dm in delays])
    if snr_db is not None:
        p_sig = float(np.mean(out ** 2))
        p_noise = p_sig / 10.0 ** (snr_db / 10.0)
        out = out + rng.normal(scale=np.sqrt(p_noise), size=out.shape)
    return out


def synthesize_audio(geom: ArrayGeometry, pose: ArrayPose,
                     source_signal: np.ndarray, source_pos: np.ndarray,
                     snr_db: float | None = None,
                     rng: np.random.Generator | None = None,
                     frame_len: int = 512, hop: int = 128) -> list[MultichannelFrame]:
    """Like :func:`synthesize_audio_signal`, framed for the SRP-PHAT front end."""
    signal = synthesize_audio_signal(geom, pose, source_signal, source_pos,
                                     snr_db=snr_db, rng=rng)
    return frame_signal(signal, geom.sample_rate, frame_len=frame_len, hop=hop)


def default_paper_scenario(seed: int = 0) -> Scenario:
    """Five arrays and eleven calibration points in an office-sized room.

    Layout (global frame: x east, y north, z up; all coordinates are
    plausible approximations, not measured values):

    * array-0 on the south wall facing north, local y up
    * array-1 on the west wall facing east, local y up
    * arrays 2-4 on the ceiling facing down, local y north
    * points 1-4: table rectangle corners, 0.76 m (x) by 1.37 m (y), at 0.78 m
    * points 5-6: a second table's long edge at 0.78 m
    * points 7-11: chair positions at 0.50 m
    """
    down_ceiling = dict(x_axis=[-1, 0, 0], y_axis=[0, 1, 0], z_axis=[0, 0, -1])
    poses = [
        ArrayPose.from_axes([2.1, 0.05, 1.3],
                            x_axis=[-1, 0, 0], y_axis=[0, 0, 1], z_axis=[0, 1, 0]),
        ArrayPose.from_axes([0.05, 2.3, 1.3],
                            x_axis=[0, 1, 0], y_axis=[0, 0, 1], z_axis=[1, 0, 0]),
        ArrayPose.from_axes([1.1, 1.3, 2.4], **down_ceiling),
        ArrayPose.from_axes([3.1, 1.7, 2.4], **down_ceiling),
        ArrayPose.from_axes([2.0, 3.3, 2.4], **down_ceiling),
    ]
    table_h, chair_h = 0.78, 0.50
    points = {
        1: [1.50, 1.00, table_h],
        2: [2.26, 1.00, table_h],
        3: [2.26, 2.37, table_h],
        4: [1.50, 2.37, table_h],
        5: [0.90, 3.60, table_h],
        6: [2.70, 3.60, table_h],
        7: [0.70, 0.90, chair_h],
        8: [3.30, 0.90, chair_h],
        9: [3.50, 2.80, chair_h],
        10: [0.80, 2.90, chair_h],
        11: [2.60, 3.10, chair_h],
    }
    rect = [points[1], points[2], points[3], points[4], points[1]]
    line = [points[5], points[6]]
    return Scenario(
        poses=poses,
        calibration_points=points,
        trajectories={
            "rectangle-1234": Trajectory(waypoints=np.array(rect)),
            "line-56": Trajectory(waypoints=np.array(line)),
        },
        noise_deg=2.0,
        quantize_to_grid=True,
        dropout=DropoutPolicy(kind="none"),
        seed=seed,
    )


# ---------------------------------------------------------------------------
# scenario and ground-truth I/O

def scenario_to_json(scn: Scenario) -> str:
    doc = {
        "poses": [{"position": p.position.tolist(),
                   "orientation": p.orientation.tolist()} for p in scn.poses],
        "calibration_points": {str(k): v.tolist()
                               for k, v in scn.calibration_points.items()},
        "trajectories": {name: {"waypoints": t.waypoints.tolist(),
                                "speed_mps": t.speed_mps}
                         for name, t in scn.trajectories.items()},
        "noise_deg": scn.noise_deg,
        "quantize_to_grid": scn.quantize_to_grid,
        "dropout": {"kind": scn.dropout.kind, "prob": scn.dropout.prob,
                    "allow_empty": scn.dropout.allow_empty},
        "seed": scn.seed,
        "room_size": scn.room_size.tolist(),
    }
    return json.dumps(doc, indent=2)


def scenario_from_json(text: str) -> Scenario:
    doc = json.loads(text)
    return Scenario(
        poses=[ArrayPose(position=np.array(p["position"]),
                         orientation=np.array(p["orientation"]))
               for p in doc["poses"]],
        calibration_points={int(k): np.array(v)
                            for k, v in doc["calibration_points"].items()},
        trajectories={name: Trajectory(waypoints=np.array(t["waypoints"]),
                                       speed_mps=t["speed_mps"])
                      for name, t in doc["trajectories"].items()},
        noise_deg=doc["noise_deg"],
        quantize_to_grid=doc["quantize_to_grid"],
        dropout=DropoutPolicy(**doc["dropout"]),
        seed=doc["seed"],
        room_size=np.array(doc["room_size"]),
    )


def save_scenario(path, scn: Scenario) -> None:
    with open(path, "w") as fh:
        fh.write(scenario_to_json(scn))


def load_scenario(path) -> Scenario:
    with open(path) as fh:
        return scenario_from_json(fh.read())


def ground_truth_to_csv(path, records: list[GroundTruthRecord]) -> None:
    """Columns: timestamp_ms, true position, then per-array emitted DOA and mask."""
    import csv as _csv
    if not records:
        raise ValueError("no records to write")
    m = records[0].observed.n_arrays
    header = ["timestamp_ms", "true_x", "true_y", "true_z"]
    for a in range(m):
        header += [f"d{a}_x", f"d{a}_y", f"d{a}_z"]
    header += [f"m{a}" for a in range(m)]
    with open(path, "w", newline="") as fh:
        w = _csv.writer(fh)
        w.writerow(header)
        for rec in records:
            row = [rec.timestamp_ms] + [repr(float(x)) for x in rec.true_position]
            row += [repr(float(x)) for x in rec.observed.values]
            row += [int(b) for b in rec.observed.active_mask]
            w.writerow(row)


def ground_truth_from_csv(path) -> list[GroundTruthRecord]:
    import csv as _csv
    records = []
    with open(path, newline="") as fh:
        reader = _csv.reader(fh)
        header = next(reader)
        m = sum(1 for h in header if h.startswith("m"))
        for row in reader:
            ts = int(row[0])
            pos = np.array([float(x) for x in row[1:4]])
            values = np.array([float(x) for x in row[4:4 + 3 * m]])
            mask = np.array([bool(int(x)) for x in row[4 + 3 * m:]])
            records.append(GroundTruthRecord(
                timestamp_ms=ts, true_position=pos, true_doas=[None] * m,
                observed=ConcatenatedDoa(values=values, active_mask=mask,
                                         timestamp_ms=ts)))
    return records
