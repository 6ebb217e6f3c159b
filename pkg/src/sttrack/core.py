"""Core domain types and geometry shared by every module.

Positions, velocities, and accelerations live in the ground (XY) plane.
Boxes carry a Z extent but no state math ever looks at it: road objects
are tracked as rotated footprint rectangles in bird's-eye view.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

import numpy as np

TAU = 2.0 * math.pi


class ClassId(enum.Enum):
    VEHICLE = "vehicle"
    PEDESTRIAN = "pedestrian"


class TrackStatus(enum.Enum):
    ACTIVE = "active"
    DEAD = "dead"


def normalize_heading(h: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    h = math.fmod(h, TAU)
    if h <= -math.pi:
        h += TAU
    elif h > math.pi:
        h -= TAU
    return h


@dataclass(frozen=True, slots=True)
class StateVector:
    """Position / velocity / acceleration in the XY plane, all finite."""

    position: tuple[float, float]
    velocity: tuple[float, float]
    acceleration: tuple[float, float]

    def __post_init__(self) -> None:
        for comp in (*self.position, *self.velocity, *self.acceleration):
            if not math.isfinite(comp):
                raise ValueError(f"non-finite state component: {comp!r}")

    @staticmethod
    def zero(position: tuple[float, float] = (0.0, 0.0)) -> "StateVector":
        return StateVector(position, (0.0, 0.0), (0.0, 0.0))

    def as_array(self) -> np.ndarray:
        """Flat [x, y, vx, vy, ax, ay] vector."""
        return np.array([*self.position, *self.velocity, *self.acceleration])

    @staticmethod
    def from_array(arr: np.ndarray) -> "StateVector":
        a = [float(v) for v in np.asarray(arr).reshape(6)]
        return StateVector((a[0], a[1]), (a[2], a[3]), (a[4], a[5]))

    @property
    def speed(self) -> float:
        return math.hypot(*self.velocity)


@dataclass(frozen=True, slots=True)
class Box7:
    """7-DoF box: 3D center, (width, length, height), heading in (-pi, pi].

    Length runs along the heading direction, width across it. Sizes must be
    strictly positive; the heading is normalized at construction.
    """

    center: tuple[float, float, float]
    size: tuple[float, float, float]
    heading: float

    def __post_init__(self) -> None:
        if not all(s > 0.0 and math.isfinite(s) for s in self.size):
            raise ValueError(f"box sizes must be strictly positive, got {self.size}")
        if not all(math.isfinite(c) for c in self.center):
            raise ValueError(f"non-finite box center: {self.center}")
        if not math.isfinite(self.heading):
            raise ValueError(f"non-finite heading: {self.heading}")
        object.__setattr__(self, "heading", normalize_heading(self.heading))

    @property
    def center_xy(self) -> tuple[float, float]:
        return (self.center[0], self.center[1])

    def footprint(self) -> list[tuple[float, float]]:
        """Counterclockwise corners of the heading-rotated BEV rectangle."""
        cx, cy = self.center[0], self.center[1]
        w2 = 0.5 * self.size[0]
        l2 = 0.5 * self.size[1]
        ch, sh = math.cos(self.heading), math.sin(self.heading)
        ax, ay = ch * l2, sh * l2  # half-length along heading
        bx, by = -sh * w2, ch * w2  # half-width across heading
        return [
            (cx + ax + bx, cy + ay + by),
            (cx - ax + bx, cy - ay + by),
            (cx - ax - bx, cy - ay - by),
            (cx + ax - bx, cy + ay - by),
        ]

    @property
    def footprint_area(self) -> float:
        return self.size[0] * self.size[1]

    @property
    def circumradius(self) -> float:
        """Radius of the smallest center-circle covering the footprint."""
        return 0.5 * math.hypot(self.size[0], self.size[1])


@dataclass(frozen=True, slots=True)
class Detection:
    """One detector box hypothesis with appearance/motion features."""

    box: Box7
    appearance: tuple[float, ...]
    motion: tuple[float, ...]
    confidence: float
    frame_index: int
    detection_id: int
    class_id: ClassId

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must be in [0, 1], got {self.confidence}")


@dataclass(frozen=True, slots=True)
class Track:
    """A persistent identity: associated detections plus estimated states.

    Functional updates only; every mutator returns a new Track so values can
    be shared freely across workers.
    """

    track_id: int
    class_id: ClassId
    history: tuple[tuple[int, Detection], ...] = ()
    states: tuple[tuple[int, StateVector], ...] = ()
    query: tuple[float, ...] | None = None
    misses: int = 0
    status: TrackStatus = TrackStatus.ACTIVE

    def __post_init__(self) -> None:
        for seq in (self.history, self.states):
            frames = [f for f, _ in seq]
            if any(b <= a for a, b in zip(frames, frames[1:])):
                raise ValueError("frame indices must be strictly increasing")
        if self.misses < 0:
            raise ValueError("misses must be >= 0")

    @property
    def last_detection(self) -> Detection:
        return self.history[-1][1]

    @property
    def last_state(self) -> StateVector:
        return self.states[-1][1]

    @property
    def last_state_frame(self) -> int:
        return self.states[-1][0]

    def with_observation(
        self,
        frame_index: int,
        det: Detection,
        state: StateVector,
        max_length: int,
        query: tuple[float, ...] | None = None,
    ) -> "Track":
        """Append a matched detection + state, truncating history to max_length."""
        history = (*self.history, (frame_index, det))[-max_length:]
        states = (*self.states, (frame_index, state))[-max_length:]
        return replace(
            self, history=history, states=states, query=query, misses=0
        )

    def with_miss(self, deletion_budget: int) -> "Track":
        misses = self.misses + 1
        status = TrackStatus.DEAD if misses > deletion_budget else self.status
        return replace(self, misses=misses, status=status)


# ---------------------------------------------------------------------------
# Geometry


def _polygon_area(poly: list[tuple[float, float]]) -> float:
    """Shoelace area; positive for counterclockwise polygons."""
    n = len(poly)
    if n < 3:
        return 0.0
    acc = 0.0
    x0, y0 = poly[-1]
    for x1, y1 in poly:
        acc += x0 * y1 - x1 * y0
        x0, y0 = x1, y1
    return 0.5 * acc


def _clip_polygon(
    subject: list[tuple[float, float]], clip: list[tuple[float, float]]
) -> list[tuple[float, float]]:
    """Sutherland-Hodgman clip of `subject` against convex CCW `clip`."""
    output = subject
    cx0, cy0 = clip[-1]
    for cx1, cy1 in clip:
        if not output:
            break
        ex, ey = cx1 - cx0, cy1 - cy0
        inp = output
        output = []
        px, py = inp[-1]
        pin = ex * (py - cy0) - ey * (px - cx0) >= 0.0
        for qx, qy in inp:
            qin = ex * (qy - cy0) - ey * (qx - cx0) >= 0.0
            if qin != pin:
                # intersection of segment pq with the clip edge line
                dx, dy = qx - px, qy - py
                denom = ex * dy - ey * dx
                if denom != 0.0:
                    t = (ex * (cy0 - py) - ey * (cx0 - px)) / denom
                    output.append((px + t * dx, py + t * dy))
            if qin:
                output.append((qx, qy))
            px, py, pin = qx, qy, qin
        cx0, cy0 = cx1, cy1
    return output


def bev_iou(a: Box7, b: Box7) -> float:
    """Rotated-rectangle IoU of two box footprints in the XY plane."""
    dx = a.center[0] - b.center[0]
    dy = a.center[1] - b.center[1]
    reach = a.circumradius + b.circumradius
    if dx * dx + dy * dy >= reach * reach:
        return 0.0
    ca = a.footprint()
    cb = b.footprint()
    inter = _polygon_area(_clip_polygon(ca, cb))
    if inter <= 0.0:
        return 0.0
    union = a.footprint_area + b.footprint_area - inter
    return min(max(inter / union, 0.0), 1.0)


def bev_iou_matrix(boxes_a: list[Box7], boxes_b: list[Box7]) -> np.ndarray:
    """Pairwise BEV IoU with a cheap center-distance pre-gate."""
    out = np.zeros((len(boxes_a), len(boxes_b)))
    if not boxes_a or not boxes_b:
        return out
    centers_a = np.array([b.center_xy for b in boxes_a])
    centers_b = np.array([b.center_xy for b in boxes_b])
    radii_a = np.array([b.circumradius for b in boxes_a])
    radii_b = np.array([b.circumradius for b in boxes_b])
    d2 = ((centers_a[:, None, :] - centers_b[None, :, :]) ** 2).sum(axis=2)
    reach = radii_a[:, None] + radii_b[None, :]
    live = d2 < reach * reach
    for i, j in zip(*np.nonzero(live)):
        out[i, j] = bev_iou(boxes_a[i], boxes_b[j])
    return out


def extrapolate(s: StateVector, dt: float) -> StateVector:
    """Constant-acceleration forward prediction of a state by dt seconds."""
    if dt < 0.0:
        raise ValueError(f"dt must be >= 0, got {dt}")
    px, py = s.position
    vx, vy = s.velocity
    ax, ay = s.acceleration
    return StateVector(
        (px + vx * dt + 0.5 * ax * dt * dt, py + vy * dt + 0.5 * ay * dt * dt),
        (vx + ax * dt, vy + ay * dt),
        (ax, ay),
    )


def center_distance(pred: StateVector, b: Box7) -> float:
    """XY Euclidean distance between a predicted position and a box center."""
    return math.hypot(pred.position[0] - b.center[0], pred.position[1] - b.center[1])
