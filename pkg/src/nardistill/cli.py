"""Command-line entry point (``nardistill <command> ...``)."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import torch

from .errors import ConfigError, FeasibilityError, InvalidArgument, ParseError, StateError, TrainingError
from .harness import (
    bench_latency,
    config_hash,
    confidence_stats,
    evaluate,
    load_config,
    load_model,
    run_distill_stage,
    run_experiment,
    run_teacher_stage,
    solve,
)
from .problem import (
    Tour,
    load_instances,
    make_dataset,
    parse_tsplib,
    save_instances,
    stack_instances,
    tour_length,
    trim_actions,
)
from .student import Student
from .teacher import Teacher


def _out_dir(args, cfg: dict) -> Path:
    out = Path(args.out or Path("runs") / cfg["name"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _progress(row: dict) -> None:
    print(json.dumps(row), file=sys.stderr, flush=True)


def _split_models(spec: str) -> dict:
    models = {}
    for path in spec.split(","):
        model = load_model(path)
        role = "teacher" if isinstance(model, Teacher) else "student"
        name = role if role not in models else f"{role}:{Path(path).stem}"
        models[name] = model
    return models


def cmd_generate(args) -> int:
    data = make_dataset(args.kind, args.n, args.count, args.seed)
    save_instances(args.out, data)
    print(f"wrote {len(data)} {args.kind}-{args.n} instances to {args.out}")
    return 0


def cmd_train_teacher(args) -> int:
    cfg = load_config(args.config)
    out = _out_dir(args, cfg)
    _, info = run_teacher_stage(cfg, out, _progress)
    print(json.dumps({"checkpoint": str(out / "teacher.ckpt"), "sha256": info["checkpoint_sha256"],
                      "config_hash": config_hash(cfg)}))
    return 0


def cmd_distill(args) -> int:
    cfg = load_config(args.config)
    teacher = load_model(args.teacher)
    if not isinstance(teacher, Teacher):
        raise ConfigError(f"{args.teacher} is not a teacher checkpoint", "teacher")
    out = _out_dir(args, cfg)
    _, info = run_distill_stage(cfg, teacher, out, _progress)
    print(json.dumps({"checkpoint": str(out / "student.ckpt"), "sha256": info["checkpoint_sha256"],
                      "config_hash": config_hash(cfg)}))
    return 0


def cmd_evaluate(args) -> int:
    models = _split_models(args.models)
    data = load_instances(args.dataset)
    modes = args.modes.split(",")
    h = config_hash({"models": args.models, "dataset": args.dataset, "modes": modes, "seed": args.seed})
    report = evaluate(models, data, modes, args.seed, args.repetitions, h)
    _write_report(report, args.out)
    return 0


def cmd_bench(args) -> int:
    models = _split_models(args.models)
    teacher = next((m for m in models.values() if isinstance(m, Teacher)), None)
    student = next((m for m in models.values() if isinstance(m, Student)), None)
    if teacher is None or student is None:
        raise ConfigError("bench needs one teacher and one student checkpoint", "models")
    sizes = [int(s) for s in args.sizes.split(",")]
    h = config_hash({"models": args.models, "sizes": sizes, "batch": args.batch, "seed": args.seed})
    report = bench_latency(teacher, student, sizes, args.batch, args.repetitions, args.seed, h)
    _write_report(report, args.out)
    for row in report.extra["latency"]:
        print(f"n={row['n']}: teacher {row['teacher_batch_s']:.4f}s student {row['student_batch_s']:.4f}s "
              f"ratio {row['ratio_batch']:.2f} (calls {row['teacher_calls']} vs {row['student_calls']})")
    return 0


def _write_report(report, out) -> None:
    text = report.to_json()
    if out:
        out = Path(out)
        if out.suffix == ".csv":
            report.write_csv(out)
            out.with_suffix(".json").write_text(text + "\n")
        else:
            out.write_text(text + "\n")
            report.write_csv(out.with_suffix(".csv"))
    print(text)


def cmd_tsplib(args) -> int:
    instance = parse_tsplib(Path(args.file).read_text())
    model = load_model(args.model)
    with torch.no_grad():
        acts = solve(model, stack_instances([instance]), args.mode, args.seed)
    tour: Tour = trim_actions(instance.kind, acts[0].tolist())
    print(json.dumps({"name": instance.id, "n": instance.n, "mode": args.mode,
                      "length": tour_length(instance, tour, raw=True),
                      "normalized_length": tour_length(instance, tour), "tour": list(tour.actions)}))
    return 0


def cmd_stats(args) -> int:
    traces = json.loads(Path(args.traces).read_text())
    stats = confidence_stats(traces, args.threshold)
    print(json.dumps(stats, indent=2))
    return 0


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    summary = run_experiment(args.config, _out_dir(args, cfg), _progress)
    print(json.dumps({k: summary[k] for k in ("config_hash", "stages")}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nardistill", description="Distil autoregressive routing policies "
                                "into one-shot successor scorers.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a seeded random dataset")
    g.add_argument("--kind", choices=["TSP", "CVRP"], required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train-teacher", help="train the autoregressive teacher")
    t.add_argument("--config", required=True)
    t.add_argument("--out", help="output directory (default runs/<name>)")
    t.set_defaults(fn=cmd_train_teacher)

    d = sub.add_parser("distill", help="distil a student from a teacher checkpoint")
    d.add_argument("--teacher", required=True)
    d.add_argument("--config", required=True)
    d.add_argument("--out", help="output directory (default runs/<name>)")
    d.set_defaults(fn=cmd_distill)

    e = sub.add_parser("evaluate", help="lengths and gaps on a dataset")
    e.add_argument("--models", required=True, help="comma-separated checkpoints")
    e.add_argument("--dataset", required=True)
    e.add_argument("--modes", default="greedy", help="e.g. greedy,sample:128,beam:16,multistart")
    e.add_argument("--out")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--repetitions", type=int, default=5)
    e.set_defaults(fn=cmd_evaluate)

    b = sub.add_parser("bench", help="decode latency of teacher vs student")
    b.add_argument("--models", required=True, help="teacher and student checkpoints, comma-separated")
    b.add_argument("--sizes", required=True, help="comma-separated problem sizes")
    b.add_argument("--batch", type=int, default=256)
    b.add_argument("--out")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--repetitions", type=int, default=5)
    b.set_defaults(fn=cmd_bench)

    s = sub.add_parser("tsplib", help="solve a TSPLIB EUC_2D file")
    s.add_argument("--file", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--mode", default="greedy")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_tsplib)

    c = sub.add_parser("stats", help="confidence statistics of action probabilities")
    c.add_argument("--traces", required=True, help="JSON list of per-instance traces")
    c.add_argument("--threshold", type=float, default=0.75)
    c.set_defaults(fn=cmd_stats)

    r = sub.add_parser("run", help="run the whole configured pipeline")
    r.add_argument("--config", required=True)
    r.add_argument("--out", help="output directory (default runs/<name>)")
    r.set_defaults(fn=cmd_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ParseError, InvalidArgument, FeasibilityError, StateError, TrainingError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
