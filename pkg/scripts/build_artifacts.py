"""Train the cached models used by the acceptance suite.

    python3 scripts/build_artifacts.py teacher12 teacher20 student20-T0.1 student20-T10

Each target writes ``artifacts/<target>.ckpt`` plus a CSV training log. The
checkpoint manifest records the training config and CPU / wall seconds.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import torch

from nardistill.distill import DistillConfig, distill
from nardistill.harness import load_model, save_model
from nardistill.teacher import TeacherTrainConfig, train_teacher

ROOT = Path(__file__).resolve().parent.parent / "artifacts"

TEACHERS = {
    "teacher12": TeacherTrainConfig(n=12, epochs=20, batches_per_epoch=500, batch_size=64, lr=1e-4, seed=1),
    "teacher20": TeacherTrainConfig(n=20, epochs=30, batches_per_epoch=250, batch_size=64, lr=1e-4, seed=2),
}
STUDENTS = {
    "student20-T0.1": ("teacher20", DistillConfig(n=20, T1=0.1, epochs=100, batches_per_epoch=100,
                                                  batch_size=100, lr=3e-4, seed=3)),
    "student20-T10": ("teacher20", DistillConfig(n=20, T1=10.0, epochs=100, batches_per_epoch=100,
                                                 batch_size=100, lr=3e-4, seed=3)),
}


def _log(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def _progress(name):
    def fn(row):
        print(name, json.dumps(row), flush=True)
    return fn


def build(target: str, root: Path = ROOT) -> Path:
    root.mkdir(parents=True, exist_ok=True)
    torch.set_num_threads(1)
    cpu, wall = time.process_time(), time.perf_counter()
    if target in TEACHERS:
        cfg = TEACHERS[target]
        res = train_teacher(cfg, _progress(target))
        model, log, config = res.model, res.log, cfg.to_dict()
    elif target in STUDENTS:
        parent, cfg = STUDENTS[target]
        teacher = load_model(root / f"{parent}.ckpt")
        res = distill(teacher, cfg, _progress(target))
        model, log, config = res.student, res.log, cfg.to_dict()
    else:
        raise SystemExit(f"unknown target {target}")
    extra = {"config": config, "train_cpu_seconds": time.process_time() - cpu,
             "train_wall_seconds": time.perf_counter() - wall}
    path = root / f"{target}.ckpt"
    save_model(path, model, extra)
    _log(root / f"{target}_log.csv", log)
    print(target, "done", json.dumps(extra), flush=True)
    return path


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("targets", nargs="+", choices=[*TEACHERS, *STUDENTS])
    args = p.parse_args(argv)
    for t in args.targets:
        build(t)
    return 0


if __name__ == "__main__":
    sys.exit(main())
