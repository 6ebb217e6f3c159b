"""Command-line entry points tying the pipeline together.

Commands: simulate -> train -> track -> eval -> report, plus an ablation
harness that reruns the pipeline across a chosen axis (track length, joint
optimization, detector noise). Every command is idempotent for identical
inputs and seed, writes provenance headers into its outputs, and exits
nonzero with a machine-readable error line on failure.

Exit codes: 0 success, 1 unexpected error, 2 config/schema violation,
3 missing input file, 4 checkpoint/config mismatch.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import autodiff, formats, model
from .config import ConfigError, RunConfig, load_run_config, resolved_dict
from .metrics import Evaluator, MatchingPolicy, format_report, report_csv_rows
from .model import TrainSettings, extract_examples
from .runtime import make_backend, run_sequence
from .sim import SimConfig, generate, population_specs

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_MISMATCH = 4


class CheckpointMismatchError(RuntimeError):
    pass


# --- shared helpers ----------------------------------------------------------


def scenario_seed(base_seed: int, index: int) -> tuple[int, int]:
    return (base_seed, index)


def build_scenario(cfg: RunConfig, index: int):
    """One deterministic scenario: specs and noise derive from (seed, index)."""
    rng = np.random.default_rng((cfg.seed, index, 0))
    specs = population_specs(
        cfg.class_id,
        cfg.sim.population.static,
        cfg.sim.population.slow,
        cfg.sim.population.fast,
        cfg.sim.field_size,
        rng,
        cfg.sim.speed_thresholds,
    )
    sim_cfg = SimConfig(
        frames=cfg.sim.frames,
        dt=cfg.sim.dt,
        objects=tuple(specs),
        noise=cfg.sim.noise,
        appearance_dim=cfg.sim.appearance_dim,
        field_size=cfg.sim.field_size,
        speed_thresholds=cfg.sim.speed_thresholds,
    )
    return generate(sim_cfg, seed=(cfg.seed, index, 1))


def scenario_names(data_dir: Path) -> list[str]:
    names = sorted(p.name[: -len(".det.jsonl")] for p in data_dir.glob("*.det.jsonl"))
    if not names:
        raise FileNotFoundError(f"no scenario files (*.det.jsonl) in {data_dir}")
    return names


def load_checkpoint_for(cfg: RunConfig, path: Path):
    if not path.exists():
        raise FileNotFoundError(f"no such checkpoint: {path}")
    arrays, metadata = autodiff.load_checkpoint(path)
    stored = metadata.get("stt")
    if stored != cfg.stt.to_dict():
        raise CheckpointMismatchError(
            f"checkpoint {path} was trained with a different model config: "
            f"{stored} vs {cfg.stt.to_dict()}"
        )
    return {name: autodiff.Tensor(data) for name, data in arrays.items()}, metadata


def train_on_directory(
    cfg: RunConfig, data_dir: Path, out_dir: Path, steps: int | None = None
) -> Path:
    """Extract examples from a scenario directory and train a model."""
    names = scenario_names(data_dir)[: cfg.train.train_scenarios]
    examples = []
    for name in names:
        scenario = formats.read_scenario(
            data_dir / f"{name}.gt.jsonl", data_dir / f"{name}.det.jsonl"
        )
        examples.extend(extract_examples(scenario, cfg.stt))
    if len(examples) > cfg.train.max_examples:
        rng = np.random.default_rng((cfg.seed, 2))
        keep = rng.choice(len(examples), size=cfg.train.max_examples, replace=False)
        examples = [examples[i] for i in sorted(keep)]
    n_steps = steps if steps is not None else cfg.train.steps
    optimizer = dataclasses.replace(cfg.train.optimizer(), total_steps=n_steps)
    settings = TrainSettings(
        steps=n_steps,
        batch_size=cfg.train.batch_size,
        log_every=cfg.train.log_every,
        optimizer=optimizer,
    )
    params, log = model.train(examples, cfg.stt, settings, seed=cfg.seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / "model.ckpt"
    autodiff.save_checkpoint(
        ckpt,
        params,
        {
            "stt": cfg.stt.to_dict(),
            "class_id": cfg.class_id.value,
            "seed": cfg.seed,
            "steps": n_steps,
            "examples": len(examples),
        },
    )
    model.write_training_log(out_dir / "training_log.csv", log)
    return ckpt


def _track_one(
    cfg: RunConfig,
    backend_kind: str,
    data_dir: Path,
    out_dir: Path,
    name: str,
    stt_arrays: dict | None,
) -> dict:
    scenario = formats.read_scenario(
        data_dir / f"{name}.gt.jsonl", data_dir / f"{name}.det.jsonl"
    )
    lifecycle = cfg.tracking_lifecycle()
    stt_params = (
        {k: autodiff.Tensor(v) for k, v in stt_arrays.items()} if stt_arrays else None
    )
    backend = make_backend(
        backend_kind,
        scenario.dt,
        lifecycle,
        kf_params=cfg.kf,
        stt_params=stt_params,
        stt_cfg=cfg.stt if backend_kind == "stt" else None,
    )
    output = run_sequence(scenario, backend, lifecycle)
    provenance = resolved_dict(cfg)
    provenance["backend"] = backend_kind
    formats.write_tracker_output(
        out_dir / f"{name}.tracks.jsonl", output, provenance, scenario.frames
    )
    timing = {
        "frames": scenario.frames,
        "total_seconds": sum(output.frame_seconds),
        "mean_ms_per_frame": 1000.0 * np.mean(output.frame_seconds),
        "fps": scenario.frames / max(sum(output.frame_seconds), 1e-12),
    }
    (out_dir / f"{name}.timing.json").write_text(json.dumps(timing, sort_keys=True))
    return timing


def track_directory(
    cfg: RunConfig,
    backend_kind: str,
    data_dir: Path,
    out_dir: Path,
    checkpoint: Path | None,
    workers: int = 1,
) -> list[dict]:
    names = scenario_names(data_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stt_arrays = None
    if backend_kind == "stt":
        if checkpoint is None:
            raise CheckpointMismatchError("stt backend requires --checkpoint")
        params, _ = load_checkpoint_for(cfg, checkpoint)
        stt_arrays = {k: t.data for k, t in params.items()}
    if workers <= 1:
        return [
            _track_one(cfg, backend_kind, data_dir, out_dir, name, stt_arrays)
            for name in names
        ]
    with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [
            pool.submit(_track_one, cfg, backend_kind, data_dir, out_dir, name, stt_arrays)
            for name in names
        ]
        return [f.result() for f in futures]


def evaluate_directories(
    gt_dir: Path, results_dir: Path, policy: MatchingPolicy
) -> dict:
    names = scenario_names_from_tracks(results_dir)
    evaluator = Evaluator(policy)
    for name in names:
        gt_path = gt_dir / f"{name}.gt.jsonl"
        if not gt_path.exists():
            raise FileNotFoundError(f"no ground truth for scenario {name}: {gt_path}")
        _, labels = formats.read_label_frames(gt_path)
        _, preds = formats.read_pred_frames(results_dir / f"{name}.tracks.jsonl")
        evaluator.add_sequence(labels, preds)
    return evaluator.report()


def scenario_names_from_tracks(results_dir: Path) -> list[str]:
    names = sorted(
        p.name[: -len(".tracks.jsonl")] for p in results_dir.glob("*.tracks.jsonl")
    )
    if not names:
        raise FileNotFoundError(f"no track files (*.tracks.jsonl) in {results_dir}")
    return names


def write_metrics_file(path: Path, report: dict, provenance: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"header": formats.make_header("metrics", provenance), "report": report}
    path.write_text(json.dumps(payload, sort_keys=True, indent=1))


def mota_only_policy(policy: MatchingPolicy) -> MatchingPolicy:
    from .metrics import INF

    return MatchingPolicy(
        iou_threshold=dict(policy.iou_threshold),
        state_thresholds={
            cls: {state: INF for state in per} for cls, per in policy.state_thresholds.items()
        },
        alpha_s=policy.alpha_s,
        persistence=policy.persistence,
        speed_thresholds=policy.speed_thresholds,
    )


# --- commands ------------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    provenance = resolved_dict(cfg)
    for index in range(args.count):
        scenario = build_scenario(cfg, index)
        name = f"scenario_{index:04d}"
        formats.write_scenario(out_dir, name, scenario, provenance)
    print(f"simulate: wrote {args.count} scenario(s) to {out_dir}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    ckpt = train_on_directory(cfg, Path(args.data), Path(args.out), steps=args.steps)
    print(f"train: checkpoint at {ckpt}")
    return EXIT_OK


def cmd_track(args) -> int:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    backend_kind = args.backend or cfg.backend
    checkpoint = Path(args.checkpoint) if args.checkpoint else None
    timings = track_directory(
        cfg, backend_kind, Path(args.data), Path(args.out), checkpoint, args.workers
    )
    total = sum(t["total_seconds"] for t in timings)
    frames = sum(t["frames"] for t in timings)
    print(
        f"track[{backend_kind}]: {len(timings)} scenario(s), {frames} frames, "
        f"{frames / max(total, 1e-12):.0f} frames/s"
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.config:
        cfg = load_run_config(args.config)
    else:
        cfg = RunConfig()
    policy = cfg.policy
    if args.policy == "mota-only":
        policy = mota_only_policy(policy)
    report = evaluate_directories(Path(args.gt), Path(args.results), policy)
    out_path = Path(args.out)
    write_metrics_file(out_path, report, resolved_dict(cfg))
    if args.emit_csv:
        rows = report_csv_rows(report)
        csv_path = out_path.with_suffix(".csv")
        with open(csv_path, "w") as f:
            if rows:
                f.write(",".join(rows[0].keys()) + "\n")
                for row in rows:
                    f.write(",".join("" if v is None else str(v) for v in row.values()) + "\n")
    print(format_report(report))
    print(f"eval: report at {out_path}")
    return EXIT_OK


def _comparison_table(runs: list[tuple[str, dict]], class_name: str) -> str:
    headers = [
        "run", "MOTA", "S-MOTA", "FP%", "Miss%", "MM%",
        "MOTP_v[static]", "MOTP_v[all]", "MOTP_a[all]",
    ]
    lines = ["  ".join(f"{h:>14}" for h in headers)]

    def cell(value) -> str:
        if value is None:
            return f"{'-':>14}"
        return f"{value:>14.3f}"

    for label, report in runs:
        row = report["classes"].get(class_name)
        if row is None:
            lines.append(f"{label:>14}  " + "  ".join([f"{'-':>14}"] * 8))
            continue
        pct = lambda v: None if v is None else 100.0 * v
        cells = [
            cell(row["mota"]),
            cell(row["s_mota"]),
            cell(pct(row["fp_pct"])),
            cell(pct(row["miss_pct"])),
            cell(pct(row["mismatch_pct"])),
            cell(row["motp"]["velocity"]["static"]),
            cell(row["motp"]["velocity"]["all"]),
            cell(row["motp"]["acceleration"]["all"]),
        ]
        lines.append(f"{label:>14}  " + "  ".join(cells))
    return "\n".join(lines)


def cmd_report(args) -> int:
    labels = args.labels or [Path(p).stem for p in args.inputs]
    if len(labels) != len(args.inputs):
        raise ConfigError("--labels must match --inputs in length")
    runs = []
    class_names = set()
    for label, path in zip(labels, args.inputs):
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"no such metrics file: {path}")
        payload = json.loads(path.read_text())
        runs.append((label, payload["report"]))
        class_names.update(payload["report"]["classes"])
    blocks = []
    for class_name in sorted(class_names):
        blocks.append(f"== {class_name} ==")
        blocks.append(_comparison_table(runs, class_name))
    defaults = json.dumps(resolved_dict(RunConfig()), sort_keys=True, indent=1)
    blocks.append("== shipped defaults ==")
    blocks.append(defaults)
    text = "\n".join(blocks)
    print(text)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    return EXIT_OK


def _run_variant_pipeline(
    cfg: RunConfig,
    label: str,
    out_dir: Path,
    train_dir: Path,
    eval_dir: Path,
    steps: int | None,
    workers: int,
) -> dict:
    variant_dir = out_dir / "variants" / label
    ckpt = None
    if cfg.backend == "stt":
        ckpt = train_on_directory(cfg, train_dir, variant_dir, steps=steps)
    track_directory(cfg, cfg.backend, eval_dir, variant_dir / "tracks", ckpt, workers)
    report = evaluate_directories(eval_dir, variant_dir / "tracks", cfg.policy)
    write_metrics_file(variant_dir / "eval.json", report, resolved_dict(cfg))
    return report


def cmd_ablate(args) -> int:
    cfg = load_run_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    out_dir = Path(args.out)
    train_dir = out_dir / "data" / "train"
    eval_dir = out_dir / "data" / "eval"

    def simulate_into(target: Path, variant_cfg: RunConfig, count: int, seed: int):
        target.mkdir(parents=True, exist_ok=True)
        run_cfg = dataclasses.replace(variant_cfg, seed=seed)
        provenance = resolved_dict(run_cfg)
        for index in range(count):
            scenario = build_scenario(run_cfg, index)
            formats.write_scenario(target, f"scenario_{index:04d}", scenario, provenance)

    variants: list[tuple[str, RunConfig]] = []
    if args.axis == "track-length":
        values = [int(v) for v in args.values.split(",")] if args.values else [3, 5, 10, 20]
        for t in values:
            stt = dataclasses.replace(cfg.stt, t_max=t)
            variants.append((f"T={t}", dataclasses.replace(cfg, backend="stt", stt=stt)))
    elif args.axis == "joint-opt":
        joint = dataclasses.replace(cfg, backend="stt")
        assoc_stt = dataclasses.replace(
            cfg.stt,
            lambda_position=0.0,
            lambda_velocity=0.0,
            lambda_acceleration=0.0,
            alpha=0.0,
        )
        variants.append(("joint", joint))
        variants.append(("assoc-only", dataclasses.replace(joint, stt=assoc_stt)))
    elif args.axis == "noise":
        values = [float(v) for v in args.values.split(",")] if args.values else [0.5, 1.0, 2.0]
        for mult in values:
            noise = dataclasses.replace(
                cfg.sim.noise, center_sigma=cfg.sim.noise.center_sigma * mult
            )
            sim = dataclasses.replace(cfg.sim, noise=noise)
            variants.append((f"noise x{mult:g}", dataclasses.replace(cfg, sim=sim)))
    else:
        raise ConfigError(f"unknown ablation axis: {args.axis!r}")

    shared_data = args.axis != "noise"
    if shared_data:
        simulate_into(train_dir, cfg, args.train_scenarios, cfg.seed)
        simulate_into(eval_dir, cfg, args.eval_scenarios, cfg.seed + 10_000)

    runs = []
    for label, variant_cfg in variants:
        if not shared_data:
            train_dir = out_dir / "data" / label.replace(" ", "_") / "train"
            eval_dir = out_dir / "data" / label.replace(" ", "_") / "eval"
            simulate_into(train_dir, variant_cfg, args.train_scenarios, variant_cfg.seed)
            simulate_into(eval_dir, variant_cfg, args.eval_scenarios, variant_cfg.seed + 10_000)
        report = _run_variant_pipeline(
            variant_cfg, label.replace(" ", "_"), out_dir, train_dir, eval_dir,
            args.steps, args.workers,
        )
        runs.append((label, report))

    class_name = cfg.class_id.value
    table = _comparison_table(runs, class_name)
    text = f"ablation axis: {args.axis}\n== {class_name} ==\n{table}\n"
    print(text)
    (out_dir / "comparison.txt").write_text(text)
    payload = {
        "axis": args.axis,
        "runs": [{"label": label, "report": report} for label, report in runs],
    }
    (out_dir / "comparison.json").write_text(json.dumps(payload, sort_keys=True, indent=1))
    return EXIT_OK


# --- argument parsing ----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sttrack",
        description="Desk-scale multi-object tracking: simulate, train, track, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="generate synthetic scenario files")
    sim.add_argument("--config", required=True)
    sim.add_argument("--out", required=True)
    sim.add_argument("--count", type=int, default=1)
    sim.add_argument("--seed", type=int, default=None)
    sim.set_defaults(func=cmd_simulate)

    tr = sub.add_parser("train", help="train the learned tracker on scenario files")
    tr.add_argument("--config", required=True)
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--seed", type=int, default=None)
    tr.add_argument("--steps", type=int, default=None)
    tr.set_defaults(func=cmd_train)

    tk = sub.add_parser("track", help="run a tracker over scenario files")
    tk.add_argument("--config", required=True)
    tk.add_argument("--data", required=True)
    tk.add_argument("--out", required=True)
    tk.add_argument("--checkpoint", default=None)
    tk.add_argument("--backend", choices=["kalman", "stt"], default=None)
    tk.add_argument("--workers", type=int, default=1)
    tk.add_argument("--seed", type=int, default=None)
    tk.set_defaults(func=cmd_track)

    ev = sub.add_parser("eval", help="score tracker output against ground truth")
    ev.add_argument("--gt", required=True)
    ev.add_argument("--results", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--config", default=None)
    ev.add_argument("--policy", choices=["stateful", "mota-only"], default="stateful")
    ev.add_argument("--emit-csv", action="store_true")
    ev.set_defaults(func=cmd_eval)

    rp = sub.add_parser("report", help="consolidated comparison of eval outputs")
    rp.add_argument("--inputs", nargs="+", required=True)
    rp.add_argument("--labels", nargs="*", default=None)
    rp.add_argument("--out", default=None)
    rp.set_defaults(func=cmd_report)

    ab = sub.add_parser("ablate", help="run an ablation axis end to end")
    ab.add_argument("--config", required=True)
    ab.add_argument("--out", required=True)
    ab.add_argument("--axis", choices=["track-length", "joint-opt", "noise"],
                    required=True)
    ab.add_argument("--values", default=None)
    ab.add_argument("--steps", type=int, default=None)
    ab.add_argument("--train-scenarios", type=int, default=12)
    ab.add_argument("--eval-scenarios", type=int, default=4)
    ab.add_argument("--workers", type=int, default=1)
    ab.add_argument("--seed", type=int, default=None)
    ab.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, formats.FormatError) as exc:
        print(json.dumps({"error": str(exc), "exit_code": EXIT_CONFIG}), file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(json.dumps({"error": str(exc), "exit_code": EXIT_MISSING}), file=sys.stderr)
        return EXIT_MISSING
    except CheckpointMismatchError as exc:
        print(json.dumps({"error": str(exc), "exit_code": EXIT_MISMATCH}), file=sys.stderr)
        return EXIT_MISMATCH
    except Exception as exc:  # pragma: no cover - defensive
        print(json.dumps({"error": str(exc), "exit_code": EXIT_ERROR}), file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
