"""Experiment orchestration: evaluation tables, latency benchmarks, confidence
statistics, checkpoints on disk and the config-driven pipeline."""

from __future__ import annotations

import csv
import hashlib
import json
import os
import platform
import statistics
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np
import torch

from .diffmath import checkpoint_bytes, load_checkpoint
from .distill import DistillConfig, distill, epoch_means
from .errors import ConfigError, FeasibilityError, InvalidArgument, StateError
from .oracle import (
    CVRP_BRUTE_MAX_N,
    HELD_KARP_MAX_N,
    brute_force_cvrp,
    cvrp_proxy,
    held_karp_batch,
    nearest_neighbor,
    two_opt,
)
from .problem import (
    InstanceBatch,
    Kind,
    VrpInstance,
    batch_tour_lengths,
    make_dataset,
    stack_instances,
    tour_length,
    trim_actions,
    validate_tour,
)
from .search import nar_beam_batch, nar_greedy_actions, nar_greedy_batch, nar_sample_batch, select_beam
from .student import Student, init_student_from_teacher, student_from_arrays, student_manifest
from .teacher import (
    ModelConfig,
    Teacher,
    TeacherTrainConfig,
    heldout_batch,
    multi_start_greedy,
    teacher_from_arrays,
    teacher_manifest,
    train_teacher,
)

HIST_BINS = 20


# ---------------------------------------------------------------------------
# checkpoints


def save_model(path, model: Teacher | Student, extra: dict | None = None) -> str:
    """Write ``model`` to ``path``; returns the sha256 of the file contents."""
    arrays = {k: p.detach().numpy() for k, p in model.named_parameters()}
    manifest = teacher_manifest(model, extra) if isinstance(model, Teacher) else student_manifest(model, extra)
    blob = checkpoint_bytes(arrays, manifest)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_model(path) -> Teacher | Student:
    manifest, arrays = load_checkpoint(path)
    role = manifest.get("role")
    if role == "teacher":
        model = teacher_from_arrays(manifest, arrays)
    elif role == "student":
        model = student_from_arrays(manifest, arrays)
    else:
        raise ConfigError(f"{path}: unknown checkpoint role {role!r}", "role")
    model.eval()
    return model


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def config_hash(config: Mapping) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# reports


def relative_gap(length: float, reference: float) -> float:
    """(length - reference) / reference."""
    if reference <= 0:
        raise InvalidArgument(f"reference length must be positive, got {reference}")
    return (length - reference) / reference


@dataclass
class MethodRecord:
    method: str
    mode: str
    mean_length: float
    gap_vs_oracle: float | None  # percent, mean of per-instance gaps
    gap_vs_teacher: float | None  # percent, gap of mean lengths
    time_single_s: float | None
    time_batch_total_s: float | None
    instances: int


RECORD_FIELDS = [f.name for f in fields(MethodRecord)]
TIMING_FIELDS = ("time_single_s", "time_batch_total_s")


@dataclass
class BenchReport:
    records: list[MethodRecord]
    environment: dict
    extra: dict = field(default_factory=dict)

    def to_dict(self, timings: bool = True) -> dict:
        recs = []
        for r in self.records:
            d = asdict(r)
            if not timings:
                for k in TIMING_FIELDS:
                    d.pop(k)
            recs.append(d)
        out = {"records": recs, "environment": dict(self.environment)}
        extra = dict(self.extra)
        if not timings:
            extra.pop("latency", None)
            out["environment"].pop("hardware", None)
        out["extra"] = extra
        return out

    def to_json(self, timings: bool = True) -> str:
        return json.dumps(self.to_dict(timings), sort_keys=True, indent=2)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=RECORD_FIELDS)
            w.writeheader()
            for r in self.records:
                w.writerow(asdict(r))

    def record(self, method: str, mode: str) -> MethodRecord:
        for r in self.records:
            if r.method == method and r.mode == mode:
                return r
        raise KeyError((method, mode))


def validate_report(report: Mapping) -> None:
    """Raise ``ConfigError`` unless ``report`` has the documented report layout."""
    if not isinstance(report, Mapping):
        raise ConfigError("report must be an object", "")
    for key in ("records", "environment"):
        if key not in report:
            raise ConfigError(f"report lacks {key!r}", key)
    for k in ("seed", "config_hash"):
        if k not in report["environment"]:
            raise ConfigError(f"environment lacks {k!r}", f"environment.{k}")
    for i, rec in enumerate(report["records"]):
        for name in RECORD_FIELDS:
            if name in TIMING_FIELDS and name not in rec:
                continue
            if name not in rec:
                raise ConfigError(f"record {i} lacks {name!r}", f"records[{i}].{name}")
        if not isinstance(rec["method"], str) or not isinstance(rec["mode"], str):
            raise ConfigError(f"record {i}: method/mode must be strings", f"records[{i}]")
        if not isinstance(rec["instances"], int) or rec["instances"] < 1:
            raise ConfigError(f"record {i}: instances must be a positive integer", f"records[{i}].instances")
        for name in ("mean_length", "gap_vs_oracle", "gap_vs_teacher", *TIMING_FIELDS):
            v = rec.get(name)
            if v is not None and not (isinstance(v, (int, float)) and np.isfinite(v)):
                raise ConfigError(f"record {i}: {name} must be a finite number or null", f"records[{i}].{name}")


def environment(seed: int, cfg_hash: str, **more) -> dict:
    env = {
        "hardware": f"{platform.machine()} {platform.processor() or 'cpu'} x{os.cpu_count()}",
        "python": platform.python_version(),
        "torch": torch.__version__,
        "threads": torch.get_num_threads(),
        "seed": seed,
        "config_hash": cfg_hash,
    }
    env.update(more)
    return env


# ---------------------------------------------------------------------------
# solving a dataset


def parse_mode(mode: str) -> tuple[str, int | None]:
    """``greedy``, ``multistart``, ``sample:K`` or ``beam:W``."""
    name, _, arg = mode.partition(":")
    if name in ("greedy", "multistart") and not arg:
        return name, None
    if name in ("sample", "beam"):
        try:
            k = int(arg) if arg else (128 if name == "sample" else 16)
        except ValueError:
            raise InvalidArgument(f"bad mode {mode!r}") from None
        if k < 1:
            raise InvalidArgument(f"bad mode {mode!r}")
        return name, k
    raise InvalidArgument(f"unknown mode {mode!r}")


def supports(model, mode: str) -> bool:
    name, _ = parse_mode(mode)
    return name != "multistart" or isinstance(model, Teacher)


def solve(model, batch: InstanceBatch, mode: str, seed: int = 0) -> torch.Tensor:
    """Best action rows (B, L) for ``batch`` under ``mode``."""
    name, k = parse_mode(mode)
    with torch.no_grad():
        if isinstance(model, Student):
            S = model(batch).square()
            if name == "greedy":
                return nar_greedy_actions(S, batch)
            if name == "sample":
                return nar_sample_batch(S, batch, k, seed)[1]
            if name == "beam":
                beams = nar_beam_batch(S, batch, k)
                return beams.actions[torch.arange(batch.size), select_beam(batch, beams)]
            raise InvalidArgument(f"mode {mode!r} is not available for the student")
        if name == "greedy":
            return model.greedy_actions(batch)
        if name == "multistart":
            return multi_start_greedy(model, batch)[1]
        if name == "beam":
            beams = model.beam(batch, k)
            return beams.actions[torch.arange(batch.size), select_beam(batch, beams)]
        gen = torch.Generator().manual_seed(int(seed))
        rep = batch[torch.arange(batch.size).repeat_interleave(k)]
        acts = model.rollout(rep, "sample", 1.0, gen).actions
        lens = batch_tour_lengths(rep, acts).reshape(batch.size, k)
        j = lens.argmin(dim=1)
        return acts.reshape(batch.size, k, -1)[torch.arange(batch.size), j]


def solve_lengths(model, instances: Sequence[VrpInstance], mode: str, seed: int = 0,
                  chunk: int = 250, check: bool = True) -> np.ndarray:
    """Tour lengths for every instance; every tour is validated when ``check``."""
    out = []
    for lo in range(0, len(instances), chunk):
        part = list(instances[lo : lo + chunk])
        batch = stack_instances(part)
        acts = solve(model, batch, mode, seed + lo)
        if check:
            for inst, row in zip(part, acts.tolist()):
                v = validate_tour(inst, trim_actions(inst.kind, row))
                if v is not None:
                    raise FeasibilityError(v)
        out.append(batch_tour_lengths(batch, acts).numpy())
    return np.concatenate(out)


def reference_lengths(instances: Sequence[VrpInstance]) -> tuple[np.ndarray, str]:
    """Exact optima where affordable, otherwise a labeled heuristic proxy."""
    kind, n = instances[0].kind, instances[0].n
    if kind is Kind.TSP and n <= HELD_KARP_MAX_N:
        coords = np.stack([i.coords for i in instances])
        lengths = np.concatenate([held_karp_batch(coords[lo : lo + 100])[0] for lo in range(0, len(coords), 100)])
        return lengths, "oracle"
    if kind is Kind.CVRP and n <= CVRP_BRUTE_MAX_N:
        return np.array([brute_force_cvrp(i).length for i in instances]), "oracle"
    if kind is Kind.TSP:
        return np.array([tour_length(i, two_opt(i, nearest_neighbor(i))) for i in instances]), "proxy"
    return np.array([tour_length(i, cvrp_proxy(i)) for i in instances]), "proxy"


def _median_time(fn: Callable[[], Any], repetitions: int) -> float:
    fn()  # warm-up, excluded
    times = []
    for _ in range(max(5, repetitions)):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return float(statistics.median(times))


def evaluate(models: Mapping[str, Teacher | Student], dataset: Sequence[VrpInstance], modes: Sequence[str],
             seed: int = 0, repetitions: int = 5, cfg_hash: str = "", chunk: int = 250,
             timings: bool = True) -> BenchReport:
    """Lengths, gaps against the reference and learning gaps of students.

    The first teacher in ``models`` is the reference for ``gap_vs_teacher``.
    """
    if not dataset:
        raise ConfigError("dataset is empty", "dataset")
    kind, n = dataset[0].kind, dataset[0].n
    if any(i.kind is not kind or i.n != n for i in dataset):
        raise ConfigError("dataset mixes kinds or sizes", "dataset")
    for name, m in models.items():
        if m.kind is not kind:
            raise ConfigError(f"model {name} solves {m.kind.value}, dataset is {kind.value}", f"models.{name}")
    ref, label = reference_lengths(dataset)
    teacher_name = next((k for k, m in models.items() if isinstance(m, Teacher)), None)
    lengths: dict[tuple[str, str], np.ndarray] = {}
    records = []
    single = stack_instances([dataset[0]])
    for mode in modes:
        parse_mode(mode)
        for name, model in models.items():
            if not supports(model, mode):
                continue
            L = solve_lengths(model, dataset, mode, seed, chunk)
            lengths[(name, mode)] = L
            t_single = t_total = None
            if timings:
                t_single = _median_time(lambda: solve(model, single, mode, seed), repetitions)
                t_total = _median_time(lambda: solve_lengths(model, dataset, mode, seed, chunk, check=False),
                                       repetitions)
            records.append(MethodRecord(name, mode, float(L.mean()), 100 * float(np.mean(L / ref - 1)), None,
                                        t_single, t_total, len(dataset)))
    for r in records:
        key = (teacher_name, r.mode)
        if teacher_name is not None and key in lengths:
            r.gap_vs_teacher = 100 * relative_gap(r.mean_length, float(lengths[key].mean()))
    # normal-approximation 95% half-widths of the mean lengths
    ci = {f"{m}|{mode}": 1.96 * float(L.std(ddof=1)) / np.sqrt(len(L)) if len(L) > 1 else 0.0
          for (m, mode), L in lengths.items()}
    env = environment(seed, cfg_hash, reference=label, kind=kind.value, n=n)
    return BenchReport(records, env, {"reference_mean_length": float(ref.mean()), "ci95_mean_length": ci})


def bench_latency(teacher: Teacher, student: Student, sizes: Sequence[int], batch: int = 256,
                  repetitions: int = 5, seed: int = 0, cfg_hash: str = "") -> BenchReport:
    """Median wall-clock of greedy decoding, single instance and batched.

    The student's time covers its forward pass plus the greedy read-out.
    """
    kind = teacher.kind
    if student.kind is not kind:
        raise ConfigError("teacher and student solve different problems", "models")
    torch.set_num_threads(1)
    records, rows = [], []
    for n in sizes:
        data = heldout_batch(kind, n, batch, seed)
        one = data[torch.arange(1)]
        calls = call_counts(teacher, student, one)
        t_fn = lambda b: solve(teacher, b, "greedy")  # noqa: E731
        s_fn = lambda b: solve(student, b, "greedy")  # noqa: E731
        tb, sb = _median_time(lambda: t_fn(data), repetitions), _median_time(lambda: s_fn(data), repetitions)
        ts, ss = _median_time(lambda: t_fn(one), repetitions), _median_time(lambda: s_fn(one), repetitions)
        t_len = float(batch_tour_lengths(data, t_fn(data)).mean())
        s_len = float(batch_tour_lengths(data, s_fn(data)).mean())
        records.append(MethodRecord(f"teacher@{n}", "greedy", t_len, None, 0.0, ts, tb, batch))
        records.append(MethodRecord(f"student@{n}", "greedy", s_len, None, 100 * relative_gap(s_len, t_len),
                                    ss, sb, batch))
        rows.append({"n": n, "batch": batch, "teacher_batch_s": tb, "student_batch_s": sb,
                     "ratio_batch": tb / sb, "teacher_single_s": ts, "student_single_s": ss,
                     "ratio_single": ts / ss, **calls})
    env = environment(seed, cfg_hash, kind=kind.value, repetitions=max(5, repetitions))
    calls_only = [{k: r[k] for k in ("n", "teacher_calls", "student_calls")} for r in rows]
    return BenchReport(records, env, {"latency": rows, "call_counts": calls_only})


def call_counts(teacher: Teacher, student: Student, one: InstanceBatch) -> dict:
    """Decoder invocations for one instance: the teacher needs one per action,
    the student exactly one."""
    teacher.decoder_calls = 0
    student.decoder_calls = 0
    steps = solve(teacher, one, "greedy").shape[1]
    solve(student, one, "greedy")
    if teacher.decoder_calls != steps or student.decoder_calls != 1:
        raise StateError(f"call counts teacher={teacher.decoder_calls} (expected {steps}), "
                         f"student={student.decoder_calls} (expected 1)")
    return {"teacher_calls": teacher.decoder_calls, "student_calls": student.decoder_calls}


# ---------------------------------------------------------------------------
# confidence


def confidence_stats(traces: Sequence, threshold: float = 0.75) -> dict:
    """Summary of per-step action probabilities.

    Each trace is either ``(l, N)`` per-step distributions (the greedy choice
    is the arg-max, so its probability is the row maximum) or ``(l,)`` chosen
    probabilities.
    """
    if not len(traces):
        raise InvalidArgument("traces must be nonempty")
    peaks = []
    for tr in traces:
        a = np.asarray(tr, dtype=float)
        peaks.append(a.max(axis=-1) if a.ndim == 2 else a.reshape(-1))
    p = np.concatenate(peaks)
    if p.size == 0:
        raise InvalidArgument("traces hold no steps")
    hist, edges = np.histogram(p, bins=HIST_BINS, range=(0.0, 1.0))
    return {
        "min_prob": float(p.min()),
        "fraction_confident": float(np.mean(p >= threshold)),
        "threshold": float(threshold),
        "steps": int(p.size),
        "histogram": hist.tolist(),
        "bin_edges": edges.tolist(),
    }


def student_traces(student: Student, instances: Sequence[VrpInstance], T: float = 1.0) -> list[np.ndarray]:
    """Chosen-action probabilities of the student's greedy decode, one array per instance."""
    batch = stack_instances(list(instances))
    with torch.no_grad():
        dec = nar_greedy_batch(student(batch).square(), batch, T)
    return [dec.chosen_probs[b][dec.valid[b]].numpy() for b in range(batch.size)]


# ---------------------------------------------------------------------------
# config-driven pipeline

STAGES = ("train-teacher", "distill", "evaluate", "bench")

# section -> field -> (type, default); a default of REQUIRED marks a required field
REQUIRED = object()
_NUM = (int, float)
SCHEMA: dict[str, Any] = {
    "name": (str, "experiment"),
    "kind": (str, REQUIRED),
    "n": (int, REQUIRED),
    "seed": (int, REQUIRED),
    "pipeline": (list, list(STAGES)),
    "teacher_checkpoint": (str, None),
    "model": {
        "d_h": (int, 64), "heads": (int, 4), "layers": (int, 2), "ff_dim": (int, 256), "clip": (_NUM, 10.0),
    },
    "teacher": {
        "epochs": (int, REQUIRED), "batches_per_epoch": (int, 100), "batch_size": (int, 64),
        "lr": (_NUM, 1e-4), "multi_start": (bool, True), "eval_size": (int, 200),
    },
    "distill": {
        "epochs": (int, REQUIRED), "batches_per_epoch": (int, 100), "batch_size": (int, 100),
        "lr": (_NUM, 1e-4), "T1": (_NUM, 0.1), "T2": (_NUM, 1.0), "probe_size": (int, 200),
    },
    "evaluate": {
        "count": (int, 1000), "modes": (list, ["greedy"]), "repetitions": (int, 5), "timings": (bool, True),
    },
    "bench": {
        "sizes": (list, None), "batch": (int, 256), "repetitions": (int, 5),
    },
}
OPTIONAL_SECTIONS = ("model", "evaluate", "bench")


def _check_value(path: str, value, typ) -> None:
    if isinstance(value, bool) and typ is not bool and bool not in (typ if isinstance(typ, tuple) else (typ,)):
        raise ConfigError(f"{path}: expected {getattr(typ, '__name__', 'number')}, got bool", path)
    if not isinstance(value, typ):
        want = typ.__name__ if isinstance(typ, type) else "number"
        raise ConfigError(f"{path}: expected {want}, got {type(value).__name__}", path)


def _fill(spec: dict, given: Mapping, prefix: str) -> dict:
    if not isinstance(given, Mapping):
        raise ConfigError(f"{prefix or 'config'} must be an object", prefix)
    unknown = set(given) - set(spec)
    if unknown:
        k = sorted(unknown)[0]
        raise ConfigError(f"unknown field {prefix}{k}", f"{prefix}{k}")
    out = {}
    for key, rule in spec.items():
        path = f"{prefix}{key}"
        if isinstance(rule, dict):
            if key not in given:
                if key not in OPTIONAL_SECTIONS:
                    raise ConfigError(f"missing required field {path}", path)
                out[key] = _fill(rule, {}, path + ".")
            else:
                out[key] = _fill(rule, given[key], path + ".")
            continue
        typ, default = rule
        if key not in given:
            if default is REQUIRED:
                raise ConfigError(f"missing required field {path}", path)
            out[key] = default
        else:
            if given[key] is not None or default is not None:
                _check_value(path, given[key], typ)
            out[key] = given[key]
    return out


def load_config(source) -> dict:
    """Validate a config (path or mapping) and fill in defaults."""
    if isinstance(source, (str, os.PathLike)):
        try:
            raw = json.loads(Path(source).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{source}: invalid JSON ({exc.msg})", "") from exc
    else:
        raw = source
    cfg = _fill(SCHEMA, raw, "")
    if cfg["kind"] not in ("TSP", "CVRP"):
        raise ConfigError(f"kind must be TSP or CVRP, got {cfg['kind']!r}", "kind")
    for stage in cfg["pipeline"]:
        if stage not in STAGES:
            raise ConfigError(f"unknown pipeline stage {stage!r}", "pipeline")
    for mode in cfg["evaluate"]["modes"]:
        try:
            parse_mode(mode)
        except InvalidArgument as exc:
            raise ConfigError(str(exc), "evaluate.modes") from None
    if cfg["bench"]["sizes"] is None:
        cfg["bench"]["sizes"] = [cfg["n"]]
    if "train-teacher" not in cfg["pipeline"] and not cfg["teacher_checkpoint"] and \
            {"distill", "evaluate", "bench"} & set(cfg["pipeline"]):
        raise ConfigError("missing required field teacher_checkpoint (pipeline skips train-teacher)",
                          "teacher_checkpoint")
    return cfg


def teacher_config(cfg: dict) -> TeacherTrainConfig:
    model = ModelConfig(kind=cfg["kind"], seed=cfg["seed"], **cfg["model"])
    return TeacherTrainConfig(n=cfg["n"], kind=cfg["kind"], seed=cfg["seed"], model=model, **cfg["teacher"])


def distill_config(cfg: dict) -> DistillConfig:
    return DistillConfig(n=cfg["n"], seed=cfg["seed"], **cfg["distill"])


def _write_rows(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        if not rows:
            return
        w = csv.DictWriter(f, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def _dump(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def run_teacher_stage(cfg: dict, out: Path, progress=None) -> tuple[Teacher, dict]:
    h = config_hash(cfg)
    res = train_teacher(teacher_config(cfg), progress)
    digest = save_model(out / "teacher.ckpt", res.model, {"config_hash": h})
    _write_rows(out / "teacher_log.csv", res.log)
    return res.model, {"checkpoint_sha256": digest, "final_heldout_mean_len": res.log[-1]["mean_len"],
                       "log": res.log}


def run_distill_stage(cfg: dict, teacher: Teacher, out: Path, progress=None) -> tuple[Student, dict]:
    h = config_hash(cfg)
    res = distill(teacher, distill_config(cfg), progress)
    digest = save_model(out / "student.ckpt", res.student, {"config_hash": h, "T1": cfg["distill"]["T1"]})
    _write_rows(out / "distill_log.csv", res.log)
    epochs = [{"epoch": i + 1, "kd_loss": v} for i, v in enumerate(epoch_means(res.log))]
    return res.student, {"checkpoint_sha256": digest, "epochs": epochs,
                         "final_student_greedy_mean_len": res.log[-1]["student_greedy_mean_len"]}


def run_experiment(config, out_dir, progress=None) -> dict:
    """Run the configured stages, writing checkpoints, CSV tables and
    ``summary.json`` (timing-free, hence byte-identical across reruns)."""
    torch.set_num_threads(1)
    cfg = load_config(config)
    h = config_hash(cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _dump(out / "config.json", cfg)
    summary: dict[str, Any] = {"config_hash": h, "config": cfg, "stages": list(cfg["pipeline"])}
    teacher = student = None
    if "train-teacher" in cfg["pipeline"]:
        teacher, summary["teacher"] = run_teacher_stage(cfg, out, progress)
    elif cfg["teacher_checkpoint"]:
        teacher = load_model(cfg["teacher_checkpoint"])
        summary["teacher"] = {"checkpoint_sha256": file_sha256(cfg["teacher_checkpoint"])}
    if teacher is not None and (teacher.kind.value != cfg["kind"]):
        raise ConfigError("teacher checkpoint kind does not match config", "teacher_checkpoint")
    if "distill" in cfg["pipeline"]:
        student, summary["student"] = run_distill_stage(cfg, teacher, out, progress)
    if "evaluate" in cfg["pipeline"]:
        models = {"teacher": teacher}
        if student is not None:
            models["student"] = student
        ev = cfg["evaluate"]
        data = make_dataset(cfg["kind"], cfg["n"], ev["count"], cfg["seed"])
        rep = evaluate(models, data, ev["modes"], cfg["seed"], ev["repetitions"], h, timings=ev["timings"])
        validate_report(rep.to_dict())
        rep.write_csv(out / "evaluate.csv")
        _dump(out / "evaluate.json", rep.to_dict())
        summary["evaluate"] = rep.to_dict(timings=False)
    if "bench" in cfg["pipeline"] and student is not None:
        b = cfg["bench"]
        rep = bench_latency(teacher, student, b["sizes"], b["batch"], b["repetitions"], cfg["seed"], h)
        validate_report(rep.to_dict())
        rep.write_csv(out / "bench.csv")
        _write_rows(out / "latency.csv", rep.extra["latency"])
        _dump(out / "bench.json", rep.to_dict())
        summary["bench"] = rep.to_dict(timings=False)
    _dump(out / "summary.json", summary)
    return summary


__all__ = [
    "BenchReport", "MethodRecord", "evaluate", "bench_latency", "confidence_stats", "run_experiment",
    "load_config", "relative_gap", "save_model", "load_model", "solve", "solve_lengths",
    "reference_lengths", "student_traces", "validate_report", "config_hash", "call_counts", "parse_mode",
]
