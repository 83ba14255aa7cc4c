"""Guided knowledge distillation from the AR teacher into the NAR student.

Each batch: the frozen teacher decodes greedily and records its raw scores
and masks; the student scores every successor in one pass; the student's
per-step distributions are then read along the *teacher's* tour (the
teacher, not the student's own choices, advances the state) and pulled
towards the teacher's temperature-sharpened distributions with a KL loss.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
import torch

from .diffmath import ParamStore, adam_step, backward, log_softmax_t, softmax_t
from .errors import ConfigError, FeasibilityError, NonFiniteError, StateError, TrainingError
from .problem import InstanceBatch, Kind, Tour, VrpInstance, batch_tour_lengths, check_tour, stack_instances
from .search import capacity_update, initial_state, mask_step, nar_greedy_batch, settle_finished
from .student import Student, TightnessMatrix, init_student_from_teacher
from .teacher import Teacher, heldout_batch, training_batch

LOG_EPS = 1e-12


@dataclass
class DistillConfig:
    n: int = 20
    T1: float = 0.1
    T2: float = 1.0
    epochs: int = 100
    batches_per_epoch: int = 1000
    batch_size: int = 100
    lr: float = 1e-5
    seed: int = 0
    probe_size: int = 200

    def __post_init__(self):
        if self.T1 <= 0 or self.T2 <= 0:
            raise ConfigError("temperatures must be positive", "T1/T2")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive", "lr")
        if self.n < 2 or self.epochs < 0 or self.batches_per_epoch < 1 or self.batch_size < 1:
            raise ConfigError("n >= 2, epochs >= 0, batches_per_epoch >= 1 and batch_size >= 1 required")

    def to_dict(self) -> dict:
        return asdict(self)


def replay_log_probs(S: torch.Tensor, batch: InstanceBatch, actions: torch.Tensor,
                     T2: float = 1.0) -> tuple[torch.Tensor, torch.Tensor]:
    """Student log-distributions along a guide tour.

    ``S`` is the square score tensor (B, n + 1, n + 1); ``actions`` (B, L) is
    the guide, as produced by a batched decode (CVRP rows padded with depot).
    Step ``t`` reads row ``a_{t-1}`` (row 0 at t=1), masks ``set_t`` and
    normalises at temperature ``T2``. Returns (log_probs (B, L, n + 1),
    masks (B, L, n + 1)).
    """
    state = initial_state(batch)
    logps, masks = [], []
    for t in range(actions.shape[1]):
        infeasible = mask_step(state)
        rows = S.gather(1, state.last[:, None, None].expand(-1, 1, S.shape[-1]))[:, 0]
        rows = settle_finished(rows, state.done)
        logps.append(log_softmax_t(rows, T2, infeasible))
        masks.append(infeasible)
        state = capacity_update(state, actions[:, t], infeasible)
    return torch.stack(logps, dim=1), torch.stack(masks, dim=1)


def guided_distributions(A: TightnessMatrix, guide: Tour, instance: VrpInstance, T2: float = 1.0) -> torch.Tensor:
    """Per-step student distributions (l, n + 1) along a feasible guide tour."""
    check_tour(instance, guide)
    batch = stack_instances([instance])
    acts = torch.tensor([guide.actions], dtype=torch.long)
    if instance.kind is Kind.CVRP and guide.actions and guide.actions[-1] == 0:
        acts = acts[:, :-1]
    try:
        logp, _ = replay_log_probs(A.square(), batch, acts, T2)
    except StateError as exc:
        raise FeasibilityError(str(exc)) from exc
    return logp[0].exp()


class KDStats:
    """Counts log-argument clamps; non-zero means the masks disagreed."""

    def __init__(self):
        self.clamped = 0


def kd_loss(teacher_probs: torch.Tensor, student_log_probs: torch.Tensor,
            valid: torch.Tensor | None = None, stats: KDStats | None = None) -> torch.Tensor:
    """Batch-mean of the summed per-step KL(teacher || student).

    ``teacher_probs`` / ``student_log_probs`` are (B, L, N) or (L, N) for a
    single tour; ``valid`` (B, L) drops padding steps. Terms with zero
    teacher probability contribute 0.
    """
    p = teacher_probs.detach()
    logq = student_log_probs
    if p.dim() == 2:
        p, logq = p[None], logq[None]
        valid = None if valid is None else valid[None]
    if p.shape != logq.shape:
        raise ValueError(f"shape mismatch {tuple(p.shape)} vs {tuple(logq.shape)}")
    floor = math.log(LOG_EPS)
    low = (p > 0) & (logq < floor)
    if bool(low.any()):
        count = int(low.sum())
        if stats is not None:
            stats.clamped += count
        warnings.warn(f"kd_loss clamped {count} student log-probabilities", RuntimeWarning)
    terms = torch.xlogy(p, p) - p * logq.clamp(min=floor)
    per_step = terms.sum(dim=-1)
    if valid is not None:
        per_step = per_step * valid
    return per_step.sum(dim=-1).mean()


class TeacherTrace(NamedTuple):
    actions: torch.Tensor
    probs: torch.Tensor  # teacher distributions at T1 (B, L, n + 1)
    masks: torch.Tensor
    valid: torch.Tensor
    lengths: torch.Tensor


def teacher_trace(teacher: Teacher, batch: InstanceBatch, T1: float) -> TeacherTrace:
    """Greedy teacher tour with its distributions recomputed at ``T1``.

    The arg-max does not depend on temperature, so the tour is the teacher's
    ordinary greedy tour.
    """
    with torch.no_grad():
        dec = teacher.rollout(batch, "greedy", keep_trace=True)
        probs = softmax_t(dec.logits, T1, dec.masks)
    return TeacherTrace(dec.actions, probs, dec.masks, dec.valid, batch_tour_lengths(batch, dec.actions))


def distill_loss(student: Student, batch: InstanceBatch, trace: TeacherTrace, T2: float,
                 stats: KDStats | None = None) -> torch.Tensor:
    S = student(batch).square()
    logq, masks = replay_log_probs(S, batch, trace.actions, T2)
    if not torch.equal(masks, trace.masks):
        raise StateError("student and teacher masks differ along the guide tour")
    return kd_loss(trace.probs, logq, trace.valid, stats)


class DistillResult(NamedTuple):
    student: Student
    log: list[dict]
    seconds: float


def student_greedy_lengths(student: Student, batch: InstanceBatch, T2: float = 1.0) -> torch.Tensor:
    with torch.no_grad():
        S = student(batch).square()
        dec = nar_greedy_batch(S, batch, T2)
    return batch_tour_lengths(batch, dec.actions)


def distill(teacher: Teacher, config: DistillConfig, progress=None) -> DistillResult:
    torch.set_num_threads(1)
    cfg = config
    kind = teacher.kind
    student = init_student_from_teacher(teacher, seed=cfg.seed)
    store = ParamStore(student)
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    probe = heldout_batch(kind, cfg.n, cfg.probe_size, cfg.seed + 7919)
    stats = KDStats()
    log: list[dict] = []
    start = time.perf_counter()
    batch_index = 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            for b in range(1, cfg.batches_per_epoch + 1):
                batch = training_batch(kind, cfg.n, cfg.batch_size, cfg.seed + 104729, batch_index)
                batch_index += 1
                trace = teacher_trace(teacher, batch, cfg.T1)
                try:
                    loss = distill_loss(student, batch, trace, cfg.T2, stats)
                except NonFiniteError as exc:
                    raise TrainingError(f"KD loss diverged at batch {batch_index}: {exc}", batch_index) from exc
                if not torch.isfinite(loss):
                    raise TrainingError(f"KD loss diverged at batch {batch_index}", batch_index)
                backward(loss, store)
                adam_step(store, cfg.lr)
                row = {"epoch": epoch, "batch": b, "kd_loss": float(loss.detach()),
                       "teacher_mean_len": float(trace.lengths.mean()), "student_greedy_mean_len": None}
                log.append(row)
            log[-1]["student_greedy_mean_len"] = float(student_greedy_lengths(student, probe, cfg.T2).mean())
            if progress is not None:
                progress(log[-1])
    finally:
        for p in teacher.parameters():
            p.requires_grad_(True)
    return DistillResult(student, log, time.perf_counter() - start)


def epoch_means(log: list[dict]) -> list[float]:
    by_epoch: dict[int, list[float]] = {}
    for row in log:
        by_epoch.setdefault(row["epoch"], []).append(row["kd_loss"])
    return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


__all__ = [
    "DistillConfig", "replay_log_probs", "guided_distributions", "kd_loss", "KDStats",
    "teacher_trace", "distill_loss", "distill", "DistillResult", "epoch_means",
    "student_greedy_lengths",
]
