"""Autoregressive attention-model teacher.

The encoder is a stack of attention blocks over node embeddings. The decoder
builds one query per step from the action history, attends over the node
embeddings with visited / over-capacity nodes masked, and scores the next
node with a tanh-clipped compatibility head.
"""

from __future__ import annotations

import copy
import math
import time
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np
import torch
from torch import nn

from .diffmath import (
    AttentionBlock,
    MultiHeadAttention,
    ParamStore,
    adam_step,
    backward,
    check_finite,
    init_uniform_,
    load_arrays_into,
    log_softmax_t,
    softmax_t,
)
from .errors import ConfigError, NonFiniteError, TrainingError
from .problem import InstanceBatch, Kind, Tour, VrpInstance, batch_tour_lengths, generate, stack_instances
from .search import (
    BeamResult,
    Decoded,
    MaskState,
    beam_decode,
    beam_tours,
    decode,
    greedy_actions,
    initial_state,
)


@dataclass
class ModelConfig:
    kind: str = "TSP"
    d_h: int = 64
    heads: int = 4
    layers: int = 2
    ff_dim: int = 256
    clip: float = 10.0
    seed: int = 0

    @property
    def problem(self) -> Kind:
        return Kind(self.kind)


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.kind = cfg.problem
        if self.kind is Kind.CVRP:
            self.embed_depot = nn.Linear(2, cfg.d_h)
            self.embed = nn.Linear(3, cfg.d_h)
        else:
            self.embed = nn.Linear(2, cfg.d_h)
        self.layers = nn.ModuleList(AttentionBlock(cfg.d_h, cfg.heads, cfg.ff_dim) for _ in range(cfg.layers))

    def forward(self, batch: InstanceBatch) -> torch.Tensor:
        """(B, n, d_h) for TSP, (B, n + 1, d_h) for CVRP with the depot in row 0."""
        if batch.kind is not self.kind:
            raise ConfigError(f"encoder configured for {self.kind.value}, got {batch.kind.value} instances")
        if self.kind is Kind.CVRP:
            cust = torch.cat([batch.locs, batch.demands[..., None]], dim=-1)
            h = torch.cat([self.embed_depot(batch.depot)[:, None], self.embed(cust)], dim=1)
        else:
            h = self.embed(batch.locs)
        for layer in self.layers:
            h = layer(h)
        return check_finite(h, "encoder")


def node_table(H: torch.Tensor, kind: Kind) -> torch.Tensor:
    """Embeddings indexed by node id (B, n + 1, d); TSP row 0 is a zero filler."""
    if kind is Kind.TSP:
        return torch.cat([torch.zeros_like(H[:, :1]), H], dim=1)
    return H


def pick_rows(table: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """``table[b, idx[b, j]]`` via gather: table (B, N, d), idx (B, r) -> (B, r, d)."""
    return table.gather(1, idx[..., None].expand(-1, -1, table.shape[-1]))


class Fixed(NamedTuple):
    """Per-instance decoder quantities computed once per rollout.

    Decoding rows are grouped instance-major: with ``R = B * r`` rows, row
    ``i`` belongs to instance ``i // r``. The ``r`` rows of an instance become
    ``r`` queries against one shared key/value set.
    """

    nodes: torch.Tensor  # (B, n + 1, d) embeddings by node id
    mean: torch.Tensor  # (B, d)
    glimpse_k: torch.Tensor
    glimpse_v: torch.Tensor
    logit_k: torch.Tensor  # (B, n + 1, d)

    @property
    def size(self) -> int:
        return self.nodes.shape[0]


class Teacher(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_h
        self.encoder = Encoder(cfg)
        self.z = nn.Parameter(torch.zeros(d))
        ctx_in = 3 * d if cfg.problem is Kind.TSP else 2 * d + 1
        self.context = nn.Linear(ctx_in, d, bias=False)
        self.glimpse = MultiHeadAttention(d, cfg.heads)
        self.logit_key = nn.Linear(d, d, bias=False)
        init_uniform_(self, torch.Generator().manual_seed(cfg.seed))
        # instrumentation for the latency benchmark
        self.decoder_calls = 0

    @property
    def kind(self) -> Kind:
        return self.cfg.problem

    def precompute(self, H: torch.Tensor) -> Fixed:
        nodes = node_table(H, self.kind)
        k, v = self.glimpse.project_kv(nodes)
        return Fixed(nodes, H.mean(dim=1), k, v, self.logit_key(nodes))

    def context_embedding(self, fixed: Fixed, state: MaskState) -> torch.Tensor:
        """Query (B, r, d) for the next step: ``z`` / depot row at t=1, else a projection of the history."""
        B = fixed.size
        r = state.size // B
        if state.step == 1:
            if self.kind is Kind.TSP:
                return self.z.expand(B, r, -1)
            return fixed.nodes[:, :1].expand(B, r, -1)
        last = pick_rows(fixed.nodes, state.last.view(B, r))
        mean = fixed.mean[:, None].expand(B, r, -1)
        if self.kind is Kind.TSP:
            first = pick_rows(fixed.nodes, state.first.view(B, r))
            ctx = torch.cat([mean, first, last], dim=-1)
        else:
            ctx = torch.cat([mean, last, state.remaining.view(B, r, 1)], dim=-1)
        return self.context(ctx)

    def step_logits(self, fixed: Fixed, q: torch.Tensor, infeasible: torch.Tensor) -> torch.Tensor:
        """Clipped compatibility scores (R, n + 1) for queries q (B, r, d).

        Masked nodes are excluded from the glimpse attention.
        """
        self.decoder_calls += 1
        B, r, _ = q.shape
        mask = infeasible.view(B, r, -1)
        g = self.glimpse.attend(q, fixed.glimpse_k, fixed.glimpse_v, mask)
        compat = (g @ fixed.logit_k.transpose(1, 2)) / math.sqrt(self.cfg.d_h)
        return (self.cfg.clip * torch.tanh(compat)).reshape(B * r, -1)

    def logits_fn(self, fixed: Fixed):
        def fn(state: MaskState, infeasible: torch.Tensor) -> torch.Tensor:
            return self.step_logits(fixed, self.context_embedding(fixed, state), infeasible)

        return fn

    def rollout(self, batch: InstanceBatch, mode: str = "greedy", T: float = 1.0,
                generator: torch.Generator | None = None, multi_start: bool = False,
                keep_trace: bool = False) -> Decoded:
        """Batched tour construction.

        With ``multi_start`` every instance is rolled out ``n`` times, rollout
        ``j`` forced to start at node ``j + 1``; rows are instance-major.
        """
        H = self.encoder(batch)
        fixed = self.precompute(H)
        if multi_start:
            n = batch.n
            state = initial_state(batch, repeat=n)
            forced = torch.arange(1, n + 1).repeat(batch.size)
        else:
            state = initial_state(batch)
            forced = None
        return decode(self.logits_fn(fixed), state, mode, T, generator, forced, keep_trace)

    def greedy_actions(self, batch: InstanceBatch) -> torch.Tensor:
        """Greedy action rows (B, L) without per-step probabilities."""
        fixed = self.precompute(self.encoder(batch))
        return greedy_actions(self.logits_fn(fixed), initial_state(batch))

    def beam(self, batch: InstanceBatch, width: int, T: float = 1.0) -> BeamResult:
        with torch.no_grad():
            # beam rows never leave their instance's block, so the grouped layout holds
            fixed = self.precompute(self.encoder(batch))
            return beam_decode(self.logits_fn(fixed), initial_state(batch), width, T)


# ---------------------------------------------------------------------------
# per-instance API


def _batch(instance) -> InstanceBatch:
    if isinstance(instance, InstanceBatch):
        return instance
    if isinstance(instance, VrpInstance):
        return stack_instances([instance])
    return stack_instances(list(instance))


def encode(teacher: Teacher, instance) -> torch.Tensor:
    """Node embeddings; unbatched ``(n, d_h)`` / ``(n + 1, d_h)`` for a single instance."""
    H = teacher.encoder(_batch(instance))
    return H[0] if isinstance(instance, VrpInstance) else H


def context_embedding(teacher: Teacher, H: torch.Tensor, state: MaskState) -> torch.Tensor:
    if H.dim() == 2:
        H = H[None]
    return teacher.context_embedding(teacher.precompute(H), state)


def ar_step(teacher: Teacher, H: torch.Tensor, q: torch.Tensor, infeasible: torch.Tensor, T: float = 1.0) -> torch.Tensor:
    """Next-node distribution (R, n + 1) given queries; masked nodes get exactly 0."""
    if H.dim() == 2:
        H = H[None]
    if q.dim() == 1:
        q = q[None, None]
    elif q.dim() == 2:
        q = q[:, None]
    if infeasible.dim() == 1:
        infeasible = infeasible[None]
    logits = teacher.step_logits(teacher.precompute(H), q, infeasible)
    return softmax_t(logits, T, infeasible)


class RolloutTrace(NamedTuple):
    tour: Tour
    dists: torch.Tensor  # (l, n + 1)
    log_prob: float


def ar_rollout(teacher: Teacher, instance: VrpInstance, mode: str = "greedy", T: float = 1.0,
               seed: int = 0) -> RolloutTrace:
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        dec = teacher.rollout(stack_instances([instance]), mode, T, gen, keep_trace=True)
    keep = dec.valid[0]
    dists = log_softmax_t(dec.logits[0], T, dec.masks[0]).exp()[keep]
    return RolloutTrace(dec.tours(instance.kind)[0], dists, float(dec.log_probs[0].sum()))


def ar_beam_search(teacher: Teacher, instance: VrpInstance, width: int, select: str = "length") -> Tour:
    batch = stack_instances([instance])
    return beam_tours(batch, teacher.beam(batch, width), select)[0]


def multi_start_greedy(teacher: Teacher, batch: InstanceBatch) -> tuple[torch.Tensor, torch.Tensor]:
    """Best of the ``n`` greedy rollouts per instance: (lengths, actions)."""
    with torch.no_grad():
        dec = teacher.rollout(batch, "greedy", multi_start=True)
    n = batch.n
    rep = batch[torch.arange(batch.size).repeat_interleave(n)]
    lens = batch_tour_lengths(rep, dec.actions).reshape(batch.size, n)
    j = lens.argmin(dim=1)
    acts = dec.actions.reshape(batch.size, n, -1)[torch.arange(batch.size), j]
    return lens.gather(1, j[:, None])[:, 0], acts


# ---------------------------------------------------------------------------
# training


@dataclass
class TeacherTrainConfig:
    n: int = 10
    kind: str = "TSP"
    epochs: int = 10
    batches_per_epoch: int = 100
    batch_size: int = 64
    lr: float = 1e-4
    multi_start: bool = True
    seed: int = 0
    eval_size: int = 200
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        self.model.kind = self.kind
        if self.n < 2 or self.epochs < 0 or self.batches_per_epoch < 1 or self.batch_size < 1:
            raise ConfigError("n >= 2, epochs >= 0, batches_per_epoch >= 1 and batch_size >= 1 required")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive", "lr")

    def to_dict(self) -> dict:
        return asdict(self)


class TrainResult(NamedTuple):
    model: nn.Module
    log: list[dict]
    seconds: float


# distinct seed ranges for training and held-out data
TRAIN_SEED_OFFSET = 1 << 40
EVAL_SEED_OFFSET = 1 << 41


def training_batch(kind: Kind | str, n: int, size: int, seed: int, index: int) -> InstanceBatch:
    base = TRAIN_SEED_OFFSET + seed * (1 << 32) + index * size
    return stack_instances([generate(kind, n, base + k) for k in range(size)])


def heldout_batch(kind: Kind | str, n: int, size: int, seed: int) -> InstanceBatch:
    base = EVAL_SEED_OFFSET + seed * (1 << 32)
    return stack_instances([generate(kind, n, base + k) for k in range(size)])


def greedy_lengths(model: Teacher, batch: InstanceBatch) -> torch.Tensor:
    with torch.no_grad():
        dec = model.rollout(batch, "greedy")
    return batch_tour_lengths(batch, dec.actions)


def _reinforce_loss(teacher, baseline, batch, cfg, gen, base_lens) -> torch.Tensor:
    if cfg.multi_start:
        dec = teacher.rollout(batch, "sample", 1.0, gen, multi_start=True)
        rep = batch[torch.arange(batch.size).repeat_interleave(cfg.n)]
        lens = batch_tour_lengths(rep, dec.actions).reshape(batch.size, cfg.n)
        base = lens.mean(dim=1, keepdim=True)
        adv = (lens - base).reshape(-1)
    else:
        dec = teacher.rollout(batch, "sample", 1.0, gen)
        lens = batch_tour_lengths(batch, dec.actions)
        base = greedy_lengths(baseline, batch)
        adv = lens - base
    base_lens.append(float(base.mean()))
    return (adv.detach() * dec.log_probs.sum(dim=1)).mean()


def train_teacher(config: TeacherTrainConfig, progress=None) -> TrainResult:
    """REINFORCE training.

    ``multi_start=False``: one sampled rollout per instance against the greedy
    rollout of a frozen baseline copy, refreshed after any epoch that improves
    the held-out greedy length. ``multi_start=True``: ``n`` sampled rollouts per
    instance with distinct forced starts sharing their mean length as baseline.
    """
    torch.set_num_threads(1)
    cfg = config
    teacher = Teacher(cfg.model)
    store = ParamStore(teacher)
    gen = torch.Generator().manual_seed(cfg.seed)
    heldout = heldout_batch(cfg.kind, cfg.n, cfg.eval_size, cfg.seed)
    baseline = copy.deepcopy(teacher) if not cfg.multi_start else None
    eval_len = float(greedy_lengths(teacher, heldout).mean())
    best_eval = eval_len
    log = [{"epoch": 0, "mean_len": eval_len, "baseline_len": eval_len, "loss": float("nan")}]
    start = time.perf_counter()
    batch_index = 0
    for epoch in range(1, cfg.epochs + 1):
        losses, base_lens = [], []
        for _ in range(cfg.batches_per_epoch):
            batch = training_batch(cfg.kind, cfg.n, cfg.batch_size, cfg.seed, batch_index)
            batch_index += 1
            try:
                loss = _reinforce_loss(teacher, baseline, batch, cfg, gen, base_lens)
            except NonFiniteError as exc:
                raise TrainingError(f"training diverged in epoch {epoch}: {exc}", epoch) from exc
            if not torch.isfinite(loss):
                raise TrainingError(f"loss diverged in epoch {epoch}", epoch)
            backward(loss, store)
            adam_step(store, cfg.lr)
            losses.append(float(loss.detach()))
        try:
            eval_len = float(greedy_lengths(teacher, heldout).mean())
        except NonFiniteError as exc:
            raise TrainingError(f"training diverged in epoch {epoch}: {exc}", epoch) from exc
        if baseline is not None and eval_len < best_eval:
            baseline.load_state_dict(teacher.state_dict())
        best_eval = min(best_eval, eval_len)
        row = {"epoch": epoch, "mean_len": eval_len, "baseline_len": float(np.mean(base_lens)),
               "loss": float(np.mean(losses))}
        log.append(row)
        if progress is not None:
            progress(row)
    return TrainResult(teacher, log, time.perf_counter() - start)


# ---------------------------------------------------------------------------
# checkpoints


def teacher_manifest(teacher: Teacher, extra: dict | None = None) -> dict:
    out = {"role": "teacher", "model": asdict(teacher.cfg)}
    if extra:
        out.update(extra)
    return out


def teacher_from_arrays(manifest: dict, arrays) -> Teacher:
    if manifest.get("role") != "teacher":
        raise ConfigError(f"checkpoint role is {manifest.get('role')!r}, expected 'teacher'", "role")
    teacher = Teacher(ModelConfig(**manifest["model"]))
    load_arrays_into(teacher, arrays)
    return teacher


__all__ = [
    "ModelConfig", "Encoder", "Teacher", "encode", "context_embedding", "ar_step",
    "ar_rollout", "ar_beam_search", "RolloutTrace", "TeacherTrainConfig", "train_teacher",
    "multi_start_greedy",
]
