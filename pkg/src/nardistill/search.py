"""Feasibility masking and tour construction (greedy, sampling, beam).

The decode loops are model-agnostic: they take a ``logits_fn(state, infeasible)``
returning raw scores over node ids ``0..n`` and handle masking, temperature and
bookkeeping. The student plugs in row lookups of its tightness matrix; the
teacher plugs in one decoder step.

All tensors are batched. Column / node id 0 is the CVRP depot or, for TSP, the
start placeholder that can never be chosen.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, NamedTuple

import torch

from .diffmath import log_softmax_t
from .errors import InvalidArgument, StateError
from .problem import CAPACITY_TOL, InstanceBatch, Kind, Tour, VrpInstance, batch_tour_lengths, stack_instances, trim_actions


@dataclass(frozen=True)
class MaskState:
    """Decoding state for a batch of partial tours.

    ``last`` is 0 before the first action (placeholder / depot start);
    ``first`` is -1 until the first action is taken; ``step`` is the 1-based
    index of the next action.
    """

    kind: Kind
    visited: torch.Tensor  # (B, n + 1) bool, column 0 never set
    remaining: torch.Tensor  # (B,) remaining capacity Q_t
    last: torch.Tensor  # (B,) long
    first: torch.Tensor  # (B,) long
    demands: torch.Tensor  # (B, n + 1), zero at id 0
    capacity: float
    step: int = 1

    @property
    def size(self) -> int:
        return self.visited.shape[0]

    @property
    def done(self) -> torch.Tensor:
        return self.visited[:, 1:].all(dim=1)

    def index(self, idx: torch.Tensor) -> "MaskState":
        return replace(
            self,
            visited=self.visited[idx],
            remaining=self.remaining[idx],
            last=self.last[idx],
            first=self.first[idx],
            demands=self.demands[idx],
        )


def initial_state(batch: InstanceBatch, repeat: int = 1) -> MaskState:
    """Fresh state; with ``repeat > 1`` every instance appears ``repeat`` times in a row."""
    B, n = batch.size, batch.n
    demands = batch.node_demands()
    if repeat > 1:
        demands = demands.repeat_interleave(repeat, dim=0)
    rows = B * repeat
    return MaskState(
        kind=batch.kind,
        visited=torch.zeros(rows, n + 1, dtype=torch.bool),
        remaining=torch.full((rows,), float(batch.capacity)),
        last=torch.zeros(rows, dtype=torch.long),
        first=torch.full((rows,), -1, dtype=torch.long),
        demands=demands,
        capacity=float(batch.capacity),
    )


def mask_step(state: MaskState) -> torch.Tensor:
    """Boolean (B, n + 1) tensor, True where a node may not be chosen next."""
    infeasible = state.visited.clone()
    if state.kind is Kind.TSP:
        infeasible[:, 0] = True
        return infeasible
    infeasible |= state.demands > state.remaining[:, None] + CAPACITY_TOL
    infeasible[:, 0] = state.last == 0
    done = state.done
    stuck = infeasible[:, 1:].all(dim=1)
    # all unvisited customers exceed the load left: the only way on is home
    infeasible[:, 0] &= ~stuck
    if bool(done.any()):
        infeasible[done] = True
        infeasible[done, 0] = False
    if bool(infeasible.all(dim=1).any()):
        raise StateError("no feasible successor in a reachable state")
    return infeasible


def capacity_update(state: MaskState, chosen: torch.Tensor, infeasible: torch.Tensor | None = None) -> MaskState:
    """Advance every row of ``state`` by the node ids in ``chosen`` (B,)."""
    chosen = chosen.long()
    if infeasible is None:
        infeasible = mask_step(state)
    if bool(infeasible.gather(1, chosen[:, None]).any()):
        raise StateError("chosen node is infeasible in the current state")
    visited = state.visited.clone()
    visited.scatter_(1, chosen[:, None], True)
    visited[:, 0] = False
    at_depot = chosen == 0
    if state.kind is Kind.CVRP:
        used = state.demands.gather(1, chosen[:, None])[:, 0]
        remaining = torch.where(at_depot, torch.full_like(state.remaining, state.capacity),
                                (state.remaining - used).clamp(min=0.0))
    else:
        remaining = state.remaining
    first = torch.where(state.first < 0, chosen, state.first)
    return replace(state, visited=visited, remaining=remaining, last=chosen, first=first, step=state.step + 1)


def settle_finished(logits: torch.Tensor, done: torch.Tensor) -> torch.Tensor:
    """Zero the scores of finished rows; only their depot padding is feasible and
    its own score may be -inf (a node is never its own successor)."""
    if bool(done.any()):
        return torch.where(done[:, None], torch.zeros_like(logits), logits)
    return logits


def max_steps(kind: Kind, n: int) -> int:
    return n if kind is Kind.TSP else 2 * n


class Decoded(NamedTuple):
    """Result of a batched decode.

    ``actions`` (B, L) node ids; CVRP rows are padded with depot visits after
    the last customer, flagged False in ``valid``. ``log_probs`` holds the log
    probability of each chosen action (0 on padding and on forced starts).
    ``logits``/``masks`` are kept only when a trace is requested.
    """

    actions: torch.Tensor
    log_probs: torch.Tensor
    max_probs: torch.Tensor
    chosen_probs: torch.Tensor
    valid: torch.Tensor
    logits: torch.Tensor | None = None
    masks: torch.Tensor | None = None

    def tours(self, kind: Kind) -> list[Tour]:
        out = []
        for row, ok in zip(self.actions.tolist(), self.valid.tolist()):
            out.append(trim_actions(kind, [a for a, v in zip(row, ok) if v]))
        return out


LogitsFn = Callable[[MaskState, torch.Tensor], torch.Tensor]


def decode(logits_fn: LogitsFn, state: MaskState, mode: str = "greedy", T: float = 1.0,
           generator: torch.Generator | None = None, forced_first: torch.Tensor | None = None,
           keep_trace: bool = False) -> Decoded:
    """Construct complete tours one action at a time.

    ``greedy`` takes the arg-max (lowest id on ties); ``sample`` draws from the
    masked temperature softmax. ``forced_first`` pins the first action (multi-
    start rollouts) and contributes nothing to ``log_probs``.
    """
    if mode not in ("greedy", "sample"):
        raise InvalidArgument(f"unknown decode mode {mode!r}")
    n = state.visited.shape[1] - 1
    acts, logps, maxp, chp, valid, lg, mk = [], [], [], [], [], [], []
    for _ in range(max_steps(state.kind, n)):
        done = state.done
        if bool(done.all()):
            break
        infeasible = mask_step(state)
        logits = settle_finished(logits_fn(state, infeasible), done)
        logp = log_softmax_t(logits, T, infeasible)
        probs = logp.detach().exp()
        if forced_first is not None and state.step == 1:
            a = forced_first.long()
            step_logp = torch.zeros_like(logp[:, 0])
        else:
            if mode == "greedy":
                a = probs.argmax(dim=1)
            else:
                a = torch.multinomial(probs, 1, generator=generator)[:, 0]
            step_logp = logp.gather(1, a[:, None])[:, 0]
        live = ~done
        acts.append(a)
        logps.append(torch.where(live, step_logp, torch.zeros_like(step_logp)))
        maxp.append(probs.max(dim=1).values)
        chp.append(probs.gather(1, a[:, None])[:, 0])
        valid.append(live)
        if keep_trace:
            lg.append(logits.detach())
            mk.append(infeasible)
        state = capacity_update(state, a, infeasible)
    stack = lambda xs: torch.stack(xs, dim=1)  # noqa: E731
    return Decoded(
        stack(acts), stack(logps), stack(maxp), stack(chp), stack(valid),
        stack(lg) if keep_trace else None, stack(mk) if keep_trace else None,
    )


def greedy_actions(logits_fn: LogitsFn, state: MaskState) -> torch.Tensor:
    """Greedy action rows (B, L) without per-step probabilities.

    The arg-max of a masked softmax at any temperature is the arg-max of the
    masked scores, so the tours equal those of ``decode(..., "greedy")``.
    """
    n = state.visited.shape[1] - 1
    acts = []
    for _ in range(max_steps(state.kind, n)):
        done = state.done
        if bool(done.all()):
            break
        infeasible = mask_step(state)
        logits = settle_finished(logits_fn(state, infeasible), done)
        a = logits.masked_fill(infeasible, -math.inf).argmax(dim=1)
        acts.append(a)
        state = capacity_update(state, a, infeasible)
    return torch.stack(acts, dim=1)


class BeamResult(NamedTuple):
    actions: torch.Tensor  # (B, W, L)
    scores: torch.Tensor  # (B, W) summed log probabilities, -inf for dead beams
    valid: torch.Tensor  # (B, W, L)


def beam_decode(logits_fn: LogitsFn, state: MaskState, width: int, T: float = 1.0) -> BeamResult:
    """Keep the ``width`` most probable prefixes per instance at every step.

    ``state`` holds one row per instance; it is expanded to ``B * width`` rows
    internally and ``logits_fn`` must accept rows ordered instance-major.
    Ties between candidates are broken towards lower beam index, then lower
    node id, so ``width=1`` reproduces greedy decoding exactly.
    """
    if width < 1:
        raise InvalidArgument("beam width must be >= 1")
    B = state.size
    n = state.visited.shape[1] - 1
    W = width
    state = state.index(torch.arange(B).repeat_interleave(W))
    scores = torch.full((B, W), -math.inf)
    scores[:, 0] = 0.0
    hist = torch.zeros(B, W, 0, dtype=torch.long)
    vhist = torch.zeros(B, W, 0, dtype=torch.bool)
    base = (torch.arange(B) * W)[:, None]
    for _ in range(max_steps(state.kind, n)):
        done = state.done
        if bool(done.all()):
            break
        infeasible = mask_step(state)
        logits = settle_finished(logits_fn(state, infeasible), done)
        logp = log_softmax_t(logits, T, infeasible).detach()
        cand = (scores.reshape(-1, 1) + logp).reshape(B, W * (n + 1))
        order = torch.sort(cand, dim=1, descending=True, stable=True).indices[:, :W]
        new_scores = cand.gather(1, order)
        parent = order // (n + 1)
        action = order % (n + 1)
        rows = (base + parent).reshape(-1)
        # dead candidates (score -inf) still need a legal action to keep state sane
        dead = torch.isinf(new_scores).reshape(-1)
        action = action.reshape(-1)
        if bool(dead.any()):
            fallback = (~infeasible[rows]).float().argmax(dim=1)
            action = torch.where(dead, fallback, action)
        live = ~done[rows]
        state = state.index(rows)
        state = capacity_update(state, action)
        hist = torch.cat([hist.reshape(B * W, -1)[rows], action[:, None]], dim=1).reshape(B, W, -1)
        vhist = torch.cat([vhist.reshape(B * W, -1)[rows], live[:, None]], dim=1).reshape(B, W, -1)
        scores = new_scores
    return BeamResult(hist, scores, vhist)


def select_beam(batch: InstanceBatch, beams: BeamResult, select: str = "length") -> torch.Tensor:
    """Index (B,) of the chosen beam: shortest tour, or highest probability."""
    if select == "probability":
        return beams.scores.argmax(dim=1)
    if select != "length":
        raise InvalidArgument(f"unknown beam selection {select!r}")
    B, W, L = beams.actions.shape
    rep = batch[torch.arange(B).repeat_interleave(W)]
    lengths = batch_tour_lengths(rep, beams.actions.reshape(B * W, L)).reshape(B, W)
    lengths = lengths.masked_fill(torch.isinf(beams.scores), math.inf)
    return lengths.argmin(dim=1)


def beam_tours(batch: InstanceBatch, beams: BeamResult, select: str = "length") -> list[Tour]:
    pick = select_beam(batch, beams, select)
    out = []
    for b, w in enumerate(pick.tolist()):
        acts = beams.actions[b, w][beams.valid[b, w]].tolist()
        out.append(trim_actions(batch.kind, acts))
    return out


# ---------------------------------------------------------------------------
# decoding a tightness matrix


def square_scores(A: torch.Tensor, kind: Kind) -> torch.Tensor:
    """(B, n + 1, n + 1) scores indexed [current node id, successor id].

    TSP matrices carry no placeholder column; it is added as -inf.
    """
    if kind is Kind.TSP:
        pad = torch.full_like(A[..., :1], -math.inf)
        return torch.cat([pad, A], dim=-1)
    return A


def row_logits(S: torch.Tensor) -> LogitsFn:
    """``logits_fn`` reading row ``last`` of a square score tensor.

    Rows of the state map onto instances of ``S`` by integer division, so a
    state expanded instance-major (beam, multi-sample) reuses ``S`` unchanged.
    """
    B = S.shape[0]

    def fn(state: MaskState, infeasible: torch.Tensor) -> torch.Tensor:
        rows = state.size
        inst = torch.arange(rows) // (rows // B)
        return S[inst, state.last]

    return fn


def _as_batch(instances) -> InstanceBatch:
    if isinstance(instances, InstanceBatch):
        return instances
    if isinstance(instances, VrpInstance):
        return stack_instances([instances])
    return stack_instances(list(instances))


def nar_greedy_batch(S: torch.Tensor, batch: InstanceBatch, T: float = 1.0, keep_trace: bool = False) -> Decoded:
    return decode(row_logits(S), initial_state(batch), "greedy", T, keep_trace=keep_trace)


def nar_greedy_actions(S: torch.Tensor, batch: InstanceBatch) -> torch.Tensor:
    return greedy_actions(row_logits(S), initial_state(batch))


def nar_sample_batch(S: torch.Tensor, batch: InstanceBatch, k: int, seed: int, T: float = 1.0,
                     chunk: int = 65536) -> tuple[torch.Tensor, torch.Tensor]:
    """Best of ``k`` samples per instance: returns (lengths (B,), actions (B, L))."""
    if k < 1:
        raise InvalidArgument("k must be >= 1")
    gen = torch.Generator().manual_seed(int(seed))
    B = batch.size
    per = max(1, chunk // k)
    best_len, best_act = [], []
    for lo in range(0, B, per):
        idx = torch.arange(lo, min(B, lo + per))
        sub = batch[idx]
        dec = decode(row_logits(S[idx]), initial_state(sub, repeat=k), "sample", T, generator=gen)
        rep = sub[torch.arange(len(idx)).repeat_interleave(k)]
        lens = batch_tour_lengths(rep, dec.actions).reshape(len(idx), k)
        j = lens.argmin(dim=1)
        best_len.append(lens.gather(1, j[:, None])[:, 0])
        acts = dec.actions.reshape(len(idx), k, -1)
        best_act.append(acts[torch.arange(len(idx)), j])
    L = max(a.shape[1] for a in best_act)
    best_act = [torch.nn.functional.pad(a, (0, L - a.shape[1])) for a in best_act]
    return torch.cat(best_len), torch.cat(best_act)


def nar_beam_batch(S: torch.Tensor, batch: InstanceBatch, width: int, T: float = 1.0) -> BeamResult:
    return beam_decode(row_logits(S), initial_state(batch), width, T)


# per-instance entry points ---------------------------------------------------


def _scores_for(A, instance: VrpInstance) -> torch.Tensor:
    from .student import TightnessMatrix

    if isinstance(A, TightnessMatrix):
        A = A.scores
    A = torch.as_tensor(A)
    if A.dim() == 2:
        A = A[None]
    n = instance.n
    want = (n + 1, n) if instance.kind is Kind.TSP else (n + 1, n + 1)
    if tuple(A.shape[1:]) != want:
        raise InvalidArgument(f"tightness matrix shape {tuple(A.shape[1:])} does not match {want}")
    return square_scores(A, instance.kind)


def nar_greedy(A, instance: VrpInstance, T: float = 1.0) -> tuple[Tour, torch.Tensor]:
    """Greedy tour and the per-step distributions it was read from (l, n + 1)."""
    S = _scores_for(A, instance)
    dec = nar_greedy_batch(S, stack_instances([instance]), T, keep_trace=True)
    keep = dec.valid[0]
    dists = torch.softmax(log_softmax_t(dec.logits[0], T, dec.masks[0]), dim=-1)[keep]
    return dec.tours(instance.kind)[0], dists


def nar_sample(A, instance: VrpInstance, k: int, seed: int, T: float = 1.0) -> Tour:
    S = _scores_for(A, instance)
    _, acts = nar_sample_batch(S, stack_instances([instance]), k, seed, T)
    return trim_actions(instance.kind, acts[0].tolist())


def nar_beam(A, instance: VrpInstance, width: int, select: str = "length", T: float = 1.0) -> Tour:
    S = _scores_for(A, instance)
    batch = stack_instances([instance])
    return beam_tours(batch, nar_beam_batch(S, batch, width, T), select)[0]
