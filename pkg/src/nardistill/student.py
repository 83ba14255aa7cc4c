"""Non-autoregressive student derived from a trained teacher.

The encoder is the teacher's. The decoder drops everything that depends on
the action history: every node embedding (plus the start placeholder) is
mapped through one shared linear query map, attends over all node
embeddings without a mask and without positional information, and a
clipped compatibility head scores every possible successor at once.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass

import torch
from torch import nn

from .diffmath import MultiHeadAttention, check_finite, init_uniform_, load_arrays_into
from .errors import ConfigError
from .problem import InstanceBatch, Kind, VrpInstance, stack_instances
from .teacher import Encoder, ModelConfig, Teacher


@dataclass
class TightnessMatrix:
    """Successor scores; rows = predecessor (row 0 = start), columns = successor.

    TSP: ``(B, n + 1, n)``, column ``j`` scores node ``j + 1``.
    CVRP: ``(B, n + 1, n + 1)``, column ``j`` scores node ``j`` (0 = depot).
    Self-successor entries hold ``-inf``; every other entry is finite.
    """

    scores: torch.Tensor
    kind: Kind

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.scores.shape)

    def square(self) -> torch.Tensor:
        """(B, n + 1, n + 1) indexed by node id on both axes."""
        if self.kind is Kind.TSP:
            pad = torch.full_like(self.scores[..., :1], -math.inf)
            return torch.cat([pad, self.scores], dim=-1)
        return self.scores

    def __getitem__(self, b: int) -> "TightnessMatrix":
        return TightnessMatrix(self.scores[b : b + 1], self.kind)


class Student(nn.Module):
    def __init__(self, cfg: ModelConfig, decoder_seed: int = 0):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_h
        self.encoder = Encoder(cfg)
        if cfg.problem is Kind.TSP:
            self.z = nn.Parameter(torch.zeros(d))
        self.query_map = nn.Linear(d, d, bias=False)
        self.glimpse = MultiHeadAttention(d, cfg.heads)
        self.logit_key = nn.Linear(d, d, bias=False)
        init_uniform_(self, torch.Generator().manual_seed(decoder_seed))
        self.decoder_calls = 0

    @property
    def kind(self) -> Kind:
        return self.cfg.problem

    def decode(self, H: torch.Tensor, query_rows: torch.Tensor | None = None) -> torch.Tensor:
        """Decoder pass from node embeddings alone.

        ``H`` is the encoder output. Returns raw scores (B, R, n_cols) for the
        predecessor rows in ``query_rows`` (default: all ``n + 1`` rows).
        """
        self.decoder_calls += 1
        if self.kind is Kind.TSP:
            starts = self.z.expand(H.shape[0], 1, -1)
            sources = torch.cat([starts, H], dim=1)
        else:
            sources = H
        if query_rows is not None:
            sources = sources[:, query_rows]
        q = self.query_map(sources)
        g = self.glimpse(q, H)
        compat = g @ self.logit_key(H).transpose(1, 2) / math.sqrt(self.cfg.d_h)
        return self.cfg.clip * torch.tanh(compat)

    def forward(self, batch: InstanceBatch, query_rows: torch.Tensor | None = None) -> TightnessMatrix:
        H = self.encoder(batch)
        scores = check_finite(self.decode(H, query_rows), "student decoder")
        rows = torch.arange(scores.shape[1]) if query_rows is None else torch.as_tensor(query_rows)
        # a node is never its own successor
        if self.kind is Kind.TSP:
            self_col = rows - 1
        else:
            self_col = rows
        hit = self_col >= 0
        mask = torch.zeros(scores.shape[1:], dtype=torch.bool)
        mask[torch.arange(len(rows))[hit], self_col[hit]] = True
        return TightnessMatrix(scores.masked_fill(mask, -math.inf), self.kind)


def init_student_from_teacher(teacher: Teacher, seed: int = 0) -> Student:
    """Copy encoder and placeholder verbatim; query map and head are fresh."""
    student = Student(copy.deepcopy(teacher.cfg), decoder_seed=seed)
    student.encoder.load_state_dict(teacher.encoder.state_dict())
    if teacher.kind is Kind.TSP:
        with torch.no_grad():
            student.z.copy_(teacher.z)
    return student


def student_forward(student: Student, instance) -> TightnessMatrix:
    if isinstance(instance, VrpInstance):
        instance = stack_instances([instance])
    elif not isinstance(instance, InstanceBatch):
        instance = stack_instances(list(instance))
    return student(instance)


def student_manifest(student: Student, extra: dict | None = None) -> dict:
    out = {"role": "student", "model": asdict(student.cfg)}
    if extra:
        out.update(extra)
    return out


def student_from_arrays(manifest: dict, arrays) -> Student:
    if manifest.get("role") != "student":
        raise ConfigError(f"checkpoint role is {manifest.get('role')!r}, expected 'student'", "role")
    student = Student(ModelConfig(**manifest["model"]))
    load_arrays_into(student, arrays)
    return student
