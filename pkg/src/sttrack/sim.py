"""Synthetic scenario generation.

Ground-truth trajectories follow closed-form motion profiles, so the
per-frame state vectors are exact analytic derivatives of the positions.
Detections are ground-truth boxes perturbed by a configurable noise model,
with per-object persistent appearance signatures, plus Poisson false
positives and Bernoulli misses. Provenance (which object produced each
detection, -1 for false positives) is kept alongside the detections for
the trainer and the metrics oracle only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import Box7, ClassId, Detection, StateVector, normalize_heading

FALSE_POSITIVE = -1

_PROFILE_KINDS = ("static", "constant_velocity", "constant_acceleration", "turn")


@dataclass(frozen=True, slots=True)
class MotionProfile:
    kind: str
    velocity: tuple[float, float] = (0.0, 0.0)
    acceleration: tuple[float, float] = (0.0, 0.0)
    speed: float = 0.0
    yaw_rate: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in _PROFILE_KINDS:
            raise ValueError(f"unknown motion profile kind: {self.kind!r}")
        params = (*self.velocity, *self.acceleration, self.speed, self.yaw_rate)
        if not all(math.isfinite(p) for p in params):
            raise ValueError("motion profile parameters must be finite")
        if self.kind == "turn" and self.yaw_rate == 0.0:
            raise ValueError("turn profile requires a nonzero yaw rate")

    @staticmethod
    def static() -> "MotionProfile":
        return MotionProfile("static")

    @staticmethod
    def constant_velocity(vx: float, vy: float) -> "MotionProfile":
        return MotionProfile("constant_velocity", velocity=(vx, vy))

    @staticmethod
    def constant_acceleration(
        v0: tuple[float, float], a: tuple[float, float]
    ) -> "MotionProfile":
        return MotionProfile(
            "constant_acceleration", velocity=tuple(v0), acceleration=tuple(a)
        )

    @staticmethod
    def turn(speed: float, yaw_rate: float) -> "MotionProfile":
        return MotionProfile("turn", speed=speed, yaw_rate=yaw_rate)


@dataclass(frozen=True, slots=True)
class NoiseModel:
    center_sigma: float = 0.1
    heading_sigma: float = 0.02
    size_sigma: float = 0.02
    appearance_sigma: float = 0.1
    fp_rate: float = 0.5
    miss_prob: float = 0.05
    confidence_noise: float = 0.05

    def __post_init__(self) -> None:
        sigmas = (
            self.center_sigma,
            self.heading_sigma,
            self.size_sigma,
            self.appearance_sigma,
            self.confidence_noise,
        )
        if any(s < 0 for s in sigmas):
            raise ValueError("noise sigmas must be >= 0")
        if not 0.0 <= self.miss_prob < 1.0:
            raise ValueError(f"miss_prob must be in [0, 1), got {self.miss_prob}")
        if self.fp_rate < 0:
            raise ValueError(f"fp_rate must be >= 0, got {self.fp_rate}")

    @staticmethod
    def noiseless() -> "NoiseModel":
        return NoiseModel(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True, slots=True)
class SpeedThresholds:
    """Boundaries of the static / slow / fast ground-truth speed buckets."""

    static_max: float = 0.2
    fast_min_vehicle: float = 3.0
    fast_min_pedestrian: float = 1.0

    def fast_min(self, class_id: ClassId) -> float:
        if class_id is ClassId.VEHICLE:
            return self.fast_min_vehicle
        return self.fast_min_pedestrian


def speed_class(
    gt_speed: float, class_id: ClassId, thresholds: SpeedThresholds = SpeedThresholds()
) -> str:
    """Bucket a ground-truth speed into static / slow / fast."""
    if gt_speed < 0:
        raise ValueError(f"speed must be >= 0, got {gt_speed}")
    if gt_speed < thresholds.static_max:
        return "static"
    if gt_speed > thresholds.fast_min(class_id):
        return "fast"
    return "slow"


@dataclass(frozen=True, slots=True)
class ObjectSpec:
    class_id: ClassId
    profile: MotionProfile
    start_position: tuple[float, float]
    heading: float
    size: tuple[float, float, float]


@dataclass(frozen=True, slots=True)
class SimConfig:
    frames: int
    dt: float = 0.1
    objects: tuple[ObjectSpec, ...] = ()
    noise: NoiseModel = field(default_factory=NoiseModel)
    appearance_dim: int = 16
    field_size: float = 60.0
    speed_thresholds: SpeedThresholds = field(default_factory=SpeedThresholds)

    def __post_init__(self) -> None:
        if self.frames < 2:
            raise ValueError(f"need at least 2 frames, got {self.frames}")
        if len(self.objects) < 1:
            raise ValueError("need at least one object")
        if self.dt <= 0:
            raise ValueError(f"dt must be > 0, got {self.dt}")
        if self.appearance_dim < 1:
            raise ValueError("appearance_dim must be >= 1")
        if self.field_size <= 0:
            raise ValueError("field_size must be > 0")


@dataclass(frozen=True, slots=True)
class GtTrack:
    object_id: int
    class_id: ClassId
    boxes: tuple[Box7, ...]
    states: tuple[StateVector, ...]


@dataclass(frozen=True, slots=True)
class Scenario:
    frames: int
    dt: float
    gt_tracks: tuple[GtTrack, ...]
    detections: tuple[tuple[Detection, ...], ...]
    provenance: tuple[tuple[int, ...], ...]  # aligned with detections; -1 = FP


def trajectory_at(spec: ObjectSpec, t: np.ndarray):
    """Closed-form (position, velocity, acceleration, heading) at times t."""
    t = np.asarray(t, dtype=float)
    n = t.shape[0]
    x0, y0 = spec.start_position
    p = spec.profile
    pos = np.zeros((n, 2))
    vel = np.zeros((n, 2))
    acc = np.zeros((n, 2))
    heading = np.full(n, spec.heading)

    if p.kind == "static":
        pos[:, 0] = x0
        pos[:, 1] = y0
    elif p.kind == "constant_velocity":
        vx, vy = p.velocity
        pos[:, 0] = x0 + vx * t
        pos[:, 1] = y0 + vy * t
        vel[:, 0] = vx
        vel[:, 1] = vy
        if math.hypot(vx, vy) > 1e-9:
            heading[:] = math.atan2(vy, vx)
    elif p.kind == "constant_acceleration":
        vx, vy = p.velocity
        ax, ay = p.acceleration
        pos[:, 0] = x0 + vx * t + 0.5 * ax * t * t
        pos[:, 1] = y0 + vy * t + 0.5 * ay * t * t
        vel[:, 0] = vx + ax * t
        vel[:, 1] = vy + ay * t
        acc[:, 0] = ax
        acc[:, 1] = ay
        moving = np.hypot(vel[:, 0], vel[:, 1]) > 1e-9
        heading[moving] = np.arctan2(vel[moving, 1], vel[moving, 0])
    else:  # turn: constant speed on a circle
        w = p.yaw_rate
        s = p.speed
        theta = spec.heading + w * t
        pos[:, 0] = x0 + (s / w) * (np.sin(theta) - math.sin(spec.heading))
        pos[:, 1] = y0 + (s / w) * (math.cos(spec.heading) - np.cos(theta))
        vel[:, 0] = s * np.cos(theta)
        vel[:, 1] = s * np.sin(theta)
        acc[:, 0] = -s * w * np.sin(theta)
        acc[:, 1] = s * w * np.cos(theta)
        heading = theta

    heading = np.array([normalize_heading(h) for h in heading])
    return pos, vel, acc, heading


def generate(config: SimConfig, seed: int) -> Scenario:
    """Generate a scenario deterministically for a fixed seed."""
    rng = np.random.default_rng(seed)
    noise = config.noise
    n_frames = config.frames
    dt = config.dt
    d_a = config.appearance_dim
    times = np.arange(n_frames) * dt

    # Per-object draws happen in object order, then frame-level draws, so the
    # stream layout (and therefore the scenario) is reproducible.
    gt_tracks = []
    signatures = []
    trajectories = []
    for oid, spec in enumerate(config.objects):
        sig = rng.standard_normal(d_a)
        sig /= np.linalg.norm(sig)
        signatures.append(sig)
        pos, vel, acc, heading = trajectory_at(spec, times)
        trajectories.append((pos, vel, acc, heading))
        boxes = tuple(
            Box7(
                (pos[k, 0], pos[k, 1], 0.5 * spec.size[2]),
                spec.size,
                float(heading[k]),
            )
            for k in range(n_frames)
        )
        states = tuple(
            StateVector(
                (float(pos[k, 0]), float(pos[k, 1])),
                (float(vel[k, 0]), float(vel[k, 1])),
                (float(acc[k, 0]), float(acc[k, 1])),
            )
            for k in range(n_frames)
        )
        gt_tracks.append(GtTrack(oid, spec.class_id, boxes, states))

    per_object = []
    for oid, spec in enumerate(config.objects):
        per_object.append(
            {
                "miss": rng.random(n_frames),
                "center": rng.standard_normal((n_frames, 3)) * noise.center_sigma,
                "heading": rng.standard_normal(n_frames) * noise.heading_sigma,
                "size": rng.standard_normal((n_frames, 3)) * noise.size_sigma,
                "appearance": rng.standard_normal((n_frames, d_a))
                * noise.appearance_sigma,
                "conf": np.abs(rng.standard_normal(n_frames)) * noise.confidence_noise,
            }
        )
    fp_counts = rng.poisson(noise.fp_rate, size=n_frames)

    half = 0.5 * config.field_size
    classes = sorted({spec.class_id for spec in config.objects}, key=lambda c: c.value)
    detections: list[tuple[Detection, ...]] = []
    provenance: list[tuple[int, ...]] = []
    last_seen: list[tuple[int, np.ndarray] | None] = [None] * len(config.objects)

    for k in range(n_frames):
        frame_dets: list[Detection] = []
        frame_prov: list[int] = []
        det_id = 0
        for oid, spec in enumerate(config.objects):
            draws = per_object[oid]
            if draws["miss"][k] < noise.miss_prob:
                continue
            gt_box = gt_tracks[oid].boxes[k]
            center = np.array(gt_box.center) + draws["center"][k]
            size = np.maximum(np.array(spec.size) + draws["size"][k], 0.05)
            heading = normalize_heading(gt_box.heading + float(draws["heading"][k]))
            appearance = signatures[oid] + draws["appearance"][k]
            center_err = float(np.hypot(draws["center"][k, 0], draws["center"][k, 1]))
            conf = float(np.clip(1.0 - center_err - draws["conf"][k], 0.0, 1.0))
            if last_seen[oid] is None:
                motion = (0.0, 0.0)
            else:
                prev_k, prev_center = last_seen[oid]
                elapsed = (k - prev_k) * dt
                motion = (
                    float((center[0] - prev_center[0]) / elapsed),
                    float((center[1] - prev_center[1]) / elapsed),
                )
            last_seen[oid] = (k, center[:2].copy())
            frame_dets.append(
                Detection(
                    box=Box7(tuple(center), tuple(size), heading),
                    appearance=tuple(appearance),
                    motion=motion,
                    confidence=conf,
                    frame_index=k,
                    detection_id=det_id,
                    class_id=spec.class_id,
                )
            )
            frame_prov.append(oid)
            det_id += 1

        for _ in range(int(fp_counts[k])):
            cx, cy = rng.uniform(-half, half, size=2)
            cls = classes[int(rng.integers(len(classes)))]
            if cls is ClassId.VEHICLE:
                size = (
                    float(rng.uniform(1.6, 2.2)),
                    float(rng.uniform(3.5, 5.5)),
                    float(rng.uniform(1.4, 1.8)),
                )
            else:
                size = (
                    float(rng.uniform(0.5, 1.0)),
                    float(rng.uniform(0.5, 1.0)),
                    float(rng.uniform(1.6, 1.9)),
                )
            heading = normalize_heading(float(rng.uniform(-math.pi, math.pi)))
            sig = rng.standard_normal(d_a)
            sig /= np.linalg.norm(sig)
            conf = float(rng.uniform(0.05, 0.4))
            frame_dets.append(
                Detection(
                    box=Box7((cx, cy, 0.5 * size[2]), size, heading),
                    appearance=tuple(sig),
                    motion=(0.0, 0.0),
                    confidence=conf,
                    frame_index=k,
                    detection_id=det_id,
                    class_id=cls,
                )
            )
            frame_prov.append(FALSE_POSITIVE)
            det_id += 1

        detections.append(tuple(frame_dets))
        provenance.append(tuple(frame_prov))

    return Scenario(
        frames=n_frames,
        dt=dt,
        gt_tracks=tuple(gt_tracks),
        detections=tuple(detections),
        provenance=tuple(provenance),
    )


def population_specs(
    class_id: ClassId,
    n_static: int,
    n_slow: int,
    n_fast: int,
    field_size: float,
    rng: np.random.Generator,
    thresholds: SpeedThresholds = SpeedThresholds(),
) -> list[ObjectSpec]:
    """Random object specs covering the static / slow / fast speed buckets."""
    half = 0.45 * field_size
    fast_min = thresholds.fast_min(class_id)

    def size() -> tuple[float, float, float]:
        if class_id is ClassId.VEHICLE:
            return (
                float(rng.uniform(1.8, 2.1)),
                float(rng.uniform(4.2, 4.8)),
                float(rng.uniform(1.4, 1.7)),
            )
        return (
            float(rng.uniform(0.6, 0.9)),
            float(rng.uniform(0.6, 0.9)),
            float(rng.uniform(1.6, 1.9)),
        )

    def place() -> tuple[float, float]:
        return (float(rng.uniform(-half, half)), float(rng.uniform(-half, half)))

    specs: list[ObjectSpec] = []
    for _ in range(n_static):
        specs.append(
            ObjectSpec(
                class_id,
                MotionProfile.static(),
                place(),
                float(rng.uniform(-math.pi, math.pi)),
                size(),
            )
        )
    for bucket, count in (("slow", n_slow), ("fast", n_fast)):
        for _ in range(count):
            if bucket == "slow":
                speed = float(rng.uniform(1.5 * thresholds.static_max, 0.8 * fast_min))
            else:
                speed = float(rng.uniform(1.2 * fast_min, 2.5 * fast_min))
            heading = float(rng.uniform(-math.pi, math.pi))
            kind = int(rng.integers(3))
            if kind == 0:
                profile = MotionProfile.constant_velocity(
                    speed * math.cos(heading), speed * math.sin(heading)
                )
            elif kind == 1:
                # gentle speed-up along the heading
                accel = float(rng.uniform(0.1, 0.6))
                profile = MotionProfile.constant_acceleration(
                    (speed * math.cos(heading), speed * math.sin(heading)),
                    (accel * math.cos(heading), accel * math.sin(heading)),
                )
            else:
                yaw = float(rng.uniform(0.1, 0.4)) * (1 if rng.random() < 0.5 else -1)
                profile = MotionProfile.turn(speed, yaw)
            specs.append(ObjectSpec(class_id, profile, place(), heading, size()))
    return specs
