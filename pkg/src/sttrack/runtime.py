"""Shared online tracking loop.

One loop serves both backends: each frame, the backend produces a gated
track-by-detection cost matrix, the assignment solver resolves it, matched
detections extend track histories, unmatched tracks accumulate misses until
deletion, and unmatched detections spawn new tracks with zero initial
velocity and acceleration. Backends only differ in how they cost pairs and
estimate states, so lifecycle behavior is identical across them.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import assign
from .core import (
    Box7,
    ClassId,
    Detection,
    StateVector,
    Track,
    TrackStatus,
    extrapolate,
)
from .kalman import KfParams, KfState, init_state, kf_association_cost, predict, update
from .model import (
    SttConfig,
    context_scores,
    decode_states,
    queries_from_histories,
    select_context,
)
from .sim import Scenario


class DuplicateDetectionError(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class LifecycleConfig:
    creation_score_threshold: float = 0.5
    max_misses: int = 3
    min_confidence: float = 0.1
    max_history: int = 10

    def __post_init__(self) -> None:
        if not 0.0 <= self.creation_score_threshold <= 1.0:
            raise ValueError("creation_score_threshold must be in [0, 1]")
        if self.max_misses < 0:
            raise ValueError("max_misses must be >= 0")
        if not 0.0 <= self.min_confidence <= 1.0:
            raise ValueError("min_confidence must be in [0, 1]")
        if self.max_history < 1:
            raise ValueError("max_history must be >= 1")


@dataclass(frozen=True, slots=True)
class TrackerRow:
    frame: int
    track_id: int
    class_id: ClassId
    box: Box7
    state: StateVector
    confidence: float


@dataclass(slots=True)
class TrackerOutput:
    frames: list[list[TrackerRow]] = field(default_factory=list)
    frame_seconds: list[float] = field(default_factory=list)

    @property
    def total_emissions(self) -> int:
        return sum(len(rows) for rows in self.frames)


class KalmanBackend:
    """IoU-gated association with one constant-acceleration filter per track."""

    def __init__(self, params: KfParams, dt: float):
        self.params = params
        self.dt = dt
        self.filters: dict[int, KfState] = {}

    def frame_costs(
        self, frame_index: int, tracks: list[Track], dets: list[Detection]
    ) -> np.ndarray:
        for track in tracks:
            self.filters[track.track_id] = predict(
                self.filters[track.track_id], self.dt, self.params
            )
        costs = np.full((len(tracks), len(dets)), assign.FORBIDDEN)
        for i, track in enumerate(tracks):
            kf = self.filters[track.track_id]
            last_box = track.last_detection.box
            for j, det in enumerate(dets):
                costs[i, j] = kf_association_cost(kf, last_box, det, self.params)
        return costs

    def update_matched(
        self, frame_index: int, pairs: list[tuple[Track, Detection]]
    ) -> list[tuple[StateVector, tuple[float, ...] | None]]:
        out = []
        for track, det in pairs:
            kf = update(
                self.filters[track.track_id],
                det.box.center_xy,
                self.params,
            )
            self.filters[track.track_id] = kf
            out.append((kf.state_vector(), None))
        return out

    def create_tracks(
        self, frame_index: int, track_ids: list[int], dets: list[Detection]
    ) -> list[tuple[StateVector, tuple[float, ...] | None]]:
        out = []
        for tid, det in zip(track_ids, dets):
            kf = init_state(det.box.center_xy, self.params)
            self.filters[tid] = kf
            out.append((kf.state_vector(), None))
        return out

    def forget(self, track_ids: list[int]) -> None:
        for tid in track_ids:
            self.filters.pop(tid, None)


class SttBackend:
    """Learned association: per-track context scoring with cached queries."""

    def __init__(
        self,
        params: dict,
        cfg: SttConfig,
        lifecycle: LifecycleConfig,
        dt: float,
    ):
        self.params = params
        self.cfg = cfg
        self.lifecycle = lifecycle
        self.dt = dt
        self._tdi_states: dict[int, StateVector] = {}

    def frame_costs(
        self, frame_index: int, tracks: list[Track], dets: list[Detection]
    ) -> np.ndarray:
        costs = np.full((len(tracks), len(dets)), assign.FORBIDDEN)
        self._tdi_states = {}
        if not tracks or not dets:
            return costs
        col_of = {det.detection_id: j for j, det in enumerate(dets)}
        live_rows: list[int] = []
        contexts: list[list[Detection]] = []
        anchors: list[tuple[float, float]] = []
        queries: list[np.ndarray] = []
        for i, track in enumerate(tracks):
            elapsed = (frame_index - track.last_state_frame) * self.dt
            pred = extrapolate(track.last_state, elapsed)
            context = select_context(
                pred, dets, self.cfg.context_radius, self.cfg.k_max
            )
            if not context:
                continue
            live_rows.append(i)
            contexts.append(context)
            anchors.append(track.last_detection.box.center_xy)
            queries.append(np.asarray(track.query))
        if not live_rows:
            return costs
        scores, states = context_scores(
            self.params, self.cfg, np.stack(queries), contexts, anchors
        )
        threshold = self.lifecycle.creation_score_threshold
        for row, i in enumerate(live_rows):
            track = tracks[i]
            anchor = anchors[row]
            rel = states[row]
            self._tdi_states[track.track_id] = StateVector(
                (rel[0] + anchor[0], rel[1] + anchor[1]),
                (rel[2], rel[3]),
                (rel[4], rel[5]),
            )
            for j, det in enumerate(contexts[row]):
                score = scores[row, j]
                if score >= threshold:
                    costs[i, col_of[det.detection_id]] = 1.0 - score
        return costs

    def update_matched(
        self, frame_index: int, pairs: list[tuple[Track, Detection]]
    ) -> list[tuple[StateVector, tuple[float, ...] | None]]:
        if not pairs:
            return []
        histories = []
        anchors = []
        for track, det in pairs:
            history = [d for _, d in track.history] + [det]
            histories.append(history[-self.cfg.t_max :])
            anchors.append(det.box.center_xy)
        queries = queries_from_histories(self.params, self.cfg, histories, anchors)
        out = []
        if self.cfg.state_source == "tsd":
            rel_states = decode_states(self.params, queries)
            for row, ((track, det), anchor) in enumerate(zip(pairs, anchors)):
                rel = rel_states[row]
                state = StateVector(
                    (rel[0] + anchor[0], rel[1] + anchor[1]),
                    (rel[2], rel[3]),
                    (rel[4], rel[5]),
                )
                out.append((state, tuple(queries[row])))
        else:  # tdi: state predicted during the association pass
            for row, (track, det) in enumerate(pairs):
                state = self._tdi_states.get(track.track_id)
                if state is None:  # matched without a scored context: fall back
                    state = StateVector(det.box.center_xy, (0.0, 0.0), (0.0, 0.0))
                out.append((state, tuple(queries[row])))
        return out

    def create_tracks(
        self, frame_index: int, track_ids: list[int], dets: list[Detection]
    ) -> list[tuple[StateVector, tuple[float, ...] | None]]:
        if not dets:
            return []
        anchors = [det.box.center_xy for det in dets]
        queries = queries_from_histories(
            self.params, self.cfg, [[det] for det in dets], anchors
        )
        return [
            (StateVector(det.box.center_xy, (0.0, 0.0), (0.0, 0.0)), tuple(q))
            for det, q in zip(dets, queries)
        ]

    def forget(self, track_ids: list[int]) -> None:
        for tid in track_ids:
            self._tdi_states.pop(tid, None)


class Tracker:
    """Frame-by-frame tracking state machine over a pluggable backend."""

    def __init__(self, backend, lifecycle: LifecycleConfig):
        self.backend = backend
        self.lifecycle = lifecycle
        self.tracks: dict[int, Track] = {}
        self.next_track_id = 1
        self.last_frame = -1

    def step(self, frame_index: int, detections: list[Detection]) -> list[TrackerRow]:
        if frame_index <= self.last_frame:
            raise ValueError(
                f"frame indices must be monotone: {frame_index} after {self.last_frame}"
            )
        self.last_frame = frame_index
        ids = [d.detection_id for d in detections]
        if len(set(ids)) != len(ids):
            raise DuplicateDetectionError(
                f"duplicate detection ids in frame {frame_index}"
            )
        dets = sorted(
            (d for d in detections if d.confidence >= self.lifecycle.min_confidence),
            key=lambda d: d.detection_id,
        )
        active = [self.tracks[tid] for tid in sorted(self.tracks)]

        costs = self.backend.frame_costs(frame_index, active, dets)
        pairs = assign.solve(costs)
        matched_rows = {r for r, _ in pairs}
        matched_cols = {c for _, c in pairs}

        rows: list[TrackerRow] = []
        matched = [(active[r], dets[c]) for r, c in pairs]
        estimates = self.backend.update_matched(frame_index, matched)
        for (track, det), (state, query) in zip(matched, estimates):
            updated = track.with_observation(
                frame_index, det, state, self.lifecycle.max_history, query
            )
            self.tracks[track.track_id] = updated
            rows.append(
                TrackerRow(
                    frame_index, track.track_id, det.class_id, det.box, state,
                    det.confidence,
                )
            )

        dead: list[int] = []
        for r, track in enumerate(active):
            if r in matched_rows:
                continue
            missed = track.with_miss(self.lifecycle.max_misses)
            if missed.status is TrackStatus.DEAD:
                dead.append(track.track_id)
                del self.tracks[track.track_id]
            else:
                self.tracks[track.track_id] = missed
        if dead:
            self.backend.forget(dead)

        new_dets = [dets[c] for c in range(len(dets)) if c not in matched_cols]
        new_ids = list(
            range(self.next_track_id, self.next_track_id + len(new_dets))
        )
        self.next_track_id += len(new_dets)
        created = self.backend.create_tracks(frame_index, new_ids, new_dets)
        for tid, det, (state, query) in zip(new_ids, new_dets, created):
            track = Track(
                track_id=tid,
                class_id=det.class_id,
                history=((frame_index, det),),
                states=((frame_index, state),),
                query=query,
            )
            self.tracks[tid] = track
            rows.append(
                TrackerRow(frame_index, tid, det.class_id, det.box, state,
                           det.confidence)
            )
        rows.sort(key=lambda row: row.track_id)
        return rows


def run_sequence(
    scenario: Scenario, backend, lifecycle: LifecycleConfig
) -> TrackerOutput:
    """Track a whole scenario; deterministic, with per-frame wall time."""
    tracker = Tracker(backend, lifecycle)
    output = TrackerOutput()
    for frame_index in range(scenario.frames):
        start = time.perf_counter()
        rows = tracker.step(frame_index, list(scenario.detections[frame_index]))
        output.frame_seconds.append(time.perf_counter() - start)
        output.frames.append(rows)
    return output


def make_backend(
    kind: str,
    dt: float,
    lifecycle: LifecycleConfig,
    kf_params: KfParams | None = None,
    stt_params: dict | None = None,
    stt_cfg: SttConfig | None = None,
):
    if kind == "kalman":
        return KalmanBackend(kf_params or KfParams(), dt)
    if kind == "stt":
        if stt_params is None or stt_cfg is None:
            raise ValueError("stt backend needs parameters and a model config")
        return SttBackend(stt_params, stt_cfg, lifecycle, dt)
    raise ValueError(f"unknown backend kind: {kind!r}")
