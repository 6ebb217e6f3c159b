"""JSONL interchange formats.

Every output file starts with a header object carrying the schema version,
the file kind, the fully resolved configuration, a version string, and a
creation timestamp. The timestamp is the only nondeterministic field;
`normalized_digest` hashes a file with it removed so byte-level determinism
checks can ignore it.

Row schemas (one JSON object per line after the header):
  ground_truth: frame, object_id, class, cx, cy, cz, w, l, h, heading,
                state {px, py, vx, vy, ax, ay}
  detections:   frame, id, class, cx, cy, cz, w, l, h, heading, conf,
                appearance [...], motion [...], provenance (-1 = false pos.)
  tracks:       frame, track_id, class, cx, cy, cz, w, l, h, heading, conf,
                state {px, py, vx, vy, ax, ay}
"""

from __future__ import annotations

import datetime
import hashlib
import json
import subprocess
from pathlib import Path

from . import __version__
from .core import Box7, ClassId, Detection, StateVector
from .metrics import EvalBox
from .runtime import TrackerOutput
from .sim import GtTrack, Scenario

SCHEMA_VERSION = 1

KINDS = ("ground_truth", "detections", "tracks")


class FormatError(ValueError):
    pass


def version_string() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True,
            text=True,
            timeout=5,
            cwd=Path(__file__).parent,
        )
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def make_header(kind: str, config: dict) -> dict:
    if kind not in KINDS and kind != "metrics":
        raise FormatError(f"unknown file kind: {kind!r}")
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": kind,
        "version": version_string(),
        "created": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "config": config,
    }


def write_jsonl(path, kind: str, config: dict, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write(json.dumps(make_header(kind, config), sort_keys=True) + "\n")
        for row in rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")


def read_jsonl(path, expected_kind: str | None = None) -> tuple[dict, list[dict]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines:
        raise FormatError(f"{path}: empty file")
    header = json.loads(lines[0])
    if header.get("schema_version") != SCHEMA_VERSION:
        raise FormatError(
            f"{path}: schema_version {header.get('schema_version')!r}, "
            f"expected {SCHEMA_VERSION}"
        )
    if expected_kind is not None and header.get("kind") != expected_kind:
        raise FormatError(
            f"{path}: kind {header.get('kind')!r}, expected {expected_kind!r}"
        )
    return header, [json.loads(line) for line in lines[1:]]


def normalized_digest(path) -> str:
    """Content hash with the header timestamp removed."""
    with open(path) as f:
        lines = f.read().splitlines()
    header = json.loads(lines[0])
    header.pop("created", None)
    payload = json.dumps(header, sort_keys=True) + "\n" + "\n".join(lines[1:])
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


# --- row encoders/decoders ---------------------------------------------------


def _box_fields(box: Box7) -> dict:
    return {
        "cx": box.center[0],
        "cy": box.center[1],
        "cz": box.center[2],
        "w": box.size[0],
        "l": box.size[1],
        "h": box.size[2],
        "heading": box.heading,
    }


def _box_from_row(row: dict) -> Box7:
    return Box7(
        (row["cx"], row["cy"], row["cz"]),
        (row["w"], row["l"], row["h"]),
        row["heading"],
    )


def _state_fields(state: StateVector) -> dict:
    return {
        "px": state.position[0],
        "py": state.position[1],
        "vx": state.velocity[0],
        "vy": state.velocity[1],
        "ax": state.acceleration[0],
        "ay": state.acceleration[1],
    }


def _state_from_row(row: dict) -> StateVector:
    return StateVector(
        (row["px"], row["py"]), (row["vx"], row["vy"]), (row["ax"], row["ay"])
    )


def scenario_rows(scenario: Scenario) -> tuple[list[dict], list[dict]]:
    gt_rows = []
    for k in range(scenario.frames):
        for track in scenario.gt_tracks:
            gt_rows.append(
                {
                    "frame": k,
                    "object_id": track.object_id,
                    "class": track.class_id.value,
                    **_box_fields(track.boxes[k]),
                    "state": _state_fields(track.states[k]),
                }
            )
    det_rows = []
    for k in range(scenario.frames):
        for det, prov in zip(scenario.detections[k], scenario.provenance[k]):
            det_rows.append(
                {
                    "frame": k,
                    "id": det.detection_id,
                    "class": det.class_id.value,
                    **_box_fields(det.box),
                    "conf": det.confidence,
                    "appearance": list(det.appearance),
                    "motion": list(det.motion),
                    "provenance": prov,
                }
            )
    return gt_rows, det_rows


def write_scenario(out_dir, name: str, scenario: Scenario, config: dict) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    gt_rows, det_rows = scenario_rows(scenario)
    meta = dict(config)
    meta["frames"] = scenario.frames
    meta["dt"] = scenario.dt
    gt_path = out_dir / f"{name}.gt.jsonl"
    det_path = out_dir / f"{name}.det.jsonl"
    write_jsonl(gt_path, "ground_truth", meta, gt_rows)
    write_jsonl(det_path, "detections", meta, det_rows)
    return gt_path, det_path


def read_scenario(gt_path, det_path) -> Scenario:
    gt_header, gt_rows = read_jsonl(gt_path, "ground_truth")
    det_header, det_rows = read_jsonl(det_path, "detections")
    frames = gt_header["config"]["frames"]
    dt = gt_header["config"]["dt"]

    by_object: dict[int, list[dict]] = {}
    for row in gt_rows:
        by_object.setdefault(row["object_id"], []).append(row)
    gt_tracks = []
    for oid in sorted(by_object):
        rows = sorted(by_object[oid], key=lambda r: r["frame"])
        if len(rows) != frames:
            raise FormatError(f"object {oid}: {len(rows)} rows for {frames} frames")
        gt_tracks.append(
            GtTrack(
                object_id=oid,
                class_id=ClassId(rows[0]["class"]),
                boxes=tuple(_box_from_row(r) for r in rows),
                states=tuple(_state_from_row(r["state"]) for r in rows),
            )
        )

    detections: list[list[Detection]] = [[] for _ in range(frames)]
    provenance: list[list[int]] = [[] for _ in range(frames)]
    for row in det_rows:
        k = row["frame"]
        detections[k].append(
            Detection(
                box=_box_from_row(row),
                appearance=tuple(row["appearance"]),
                motion=tuple(row["motion"]),
                confidence=row["conf"],
                frame_index=k,
                detection_id=row["id"],
                class_id=ClassId(row["class"]),
            )
        )
        provenance[k].append(row["provenance"])
    return Scenario(
        frames=frames,
        dt=dt,
        gt_tracks=tuple(gt_tracks),
        detections=tuple(tuple(f) for f in detections),
        provenance=tuple(tuple(f) for f in provenance),
    )


def tracker_rows(output: TrackerOutput) -> list[dict]:
    rows = []
    for frame_rows in output.frames:
        for r in frame_rows:
            rows.append(
                {
                    "frame": r.frame,
                    "track_id": r.track_id,
                    "class": r.class_id.value,
                    **_box_fields(r.box),
                    "conf": r.confidence,
                    "state": _state_fields(r.state),
                }
            )
    return rows


def write_tracker_output(path, output: TrackerOutput, config: dict, frames: int) -> None:
    meta = dict(config)
    meta["frames"] = frames
    write_jsonl(path, "tracks", meta, tracker_rows(output))


def read_pred_frames(path) -> tuple[dict, list[list[EvalBox]]]:
    """Tracks file to per-frame evaluation boxes."""
    header, rows = read_jsonl(path, "tracks")
    frames = header["config"]["frames"]
    out: list[list[EvalBox]] = [[] for _ in range(frames)]
    for row in rows:
        out[row["frame"]].append(
            EvalBox(
                ident=row["track_id"],
                class_id=ClassId(row["class"]),
                box=_box_from_row(row),
                state=_state_from_row(row["state"]),
            )
        )
    return header, out


def read_label_frames(path) -> tuple[dict, list[list[EvalBox]]]:
    """Ground-truth file to per-frame evaluation boxes."""
    header, rows = read_jsonl(path, "ground_truth")
    frames = header["config"]["frames"]
    out: list[list[EvalBox]] = [[] for _ in range(frames)]
    for row in rows:
        out[row["frame"]].append(
            EvalBox(
                ident=row["object_id"],
                class_id=ClassId(row["class"]),
                box=_box_from_row(row),
                state=_state_from_row(row["state"]),
            )
        )
    return header, out
