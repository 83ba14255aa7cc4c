"""Differentiable building blocks shared by the teacher and the student.

Everything runs in float64 on top of torch autograd. ``ParamStore`` adds the
bits the training loops rely on: a stable parameter order, explicit gradient
slots and a hand-rolled Adam state, plus a documented checkpoint container.
"""

from __future__ import annotations

import json
import math
import struct
from collections import OrderedDict
from typing import Mapping

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import DegenerateMaskError, InvalidArgument, NonFiniteError, StateError

DTYPE = torch.float64
torch.set_default_dtype(DTYPE)


def check_finite(x: torch.Tensor, where: str) -> torch.Tensor:
    if not bool(torch.isfinite(x).all()):
        raise NonFiniteError(f"non-finite values in {where}")
    return x


def _masked_scaled(logits: torch.Tensor, T: float, mask: torch.Tensor | None) -> torch.Tensor:
    if T <= 0:
        raise InvalidArgument(f"temperature must be positive, got {T}")
    scaled = logits / T
    if mask is None:
        return scaled
    mask = mask.expand_as(scaled)
    if bool(mask.all(dim=-1).any()):
        raise DegenerateMaskError("every entry of a row is masked")
    return scaled.masked_fill(mask, -math.inf)


def softmax_t(logits: torch.Tensor, T: float = 1.0, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Temperature softmax over the last axis.

    ``mask`` marks excluded entries (True = excluded); they get probability
    exactly 0 and take no part in the normalisation.
    """
    return torch.softmax(_masked_scaled(logits, T, mask), dim=-1)


def log_softmax_t(logits: torch.Tensor, T: float = 1.0, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Log of :func:`softmax_t`; masked entries are ``-inf``."""
    return torch.log_softmax(_masked_scaled(logits, T, mask), dim=-1)


def init_uniform_(module: nn.Module, generator: torch.Generator) -> None:
    """uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every weight, bias and vector.

    Normalisation layers keep their identity initialisation.
    """
    with torch.no_grad():
        for name, p in module.named_parameters():
            if name.endswith("norm_scale"):
                p.fill_(1.0)
            elif name.endswith("norm_shift"):
                p.zero_()
            else:
                bound = 1.0 / math.sqrt(p.shape[-1])
                p.copy_(torch.rand(p.shape, generator=generator) * 2 * bound - bound)


class MultiHeadAttention(nn.Module):
    def __init__(self, d_h: int, heads: int):
        super().__init__()
        if d_h % heads:
            raise InvalidArgument(f"d_h={d_h} not divisible by heads={heads}")
        self.heads = heads
        self.d_k = d_h // heads
        self.w_q = nn.Linear(d_h, d_h, bias=False)
        self.w_k = nn.Linear(d_h, d_h, bias=False)
        self.w_v = nn.Linear(d_h, d_h, bias=False)
        self.w_o = nn.Linear(d_h, d_h, bias=False)

    def split(self, x: torch.Tensor) -> torch.Tensor:
        B, N, _ = x.shape
        return x.view(B, N, self.heads, self.d_k).transpose(1, 2)

    def project_kv(self, kv: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.split(self.w_k(kv)), self.split(self.w_v(kv))

    def attend(self, q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
               mask: torch.Tensor | None = None) -> torch.Tensor:
        """``q`` (B, Nq, d) raw queries; ``k``/``v`` already projected and split."""
        B, Nq, _ = q.shape
        qh = self.split(self.w_q(q))
        allowed = None
        if mask is not None:
            m = mask if mask.dim() == 4 else mask[:, None]
            if bool(m.all(dim=-1).any()):
                raise DegenerateMaskError("attention query with every key masked")
            allowed = ~m
        # fused softmax(q k^T / sqrt(d_k)) v
        out = F.scaled_dot_product_attention(qh, k, v, attn_mask=allowed)
        return self.w_o(out.transpose(1, 2).reshape(B, Nq, -1))

    def forward(self, q: torch.Tensor, kv: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        k, v = self.project_kv(kv)
        return self.attend(q, k, v, mask)


class InstanceNorm(nn.Module):
    """Normalise every feature channel across the nodes of one instance."""

    def __init__(self, d_h: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.norm_scale = nn.Parameter(torch.ones(d_h))
        self.norm_shift = nn.Parameter(torch.zeros(d_h))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        centred = x - x.mean(dim=1, keepdim=True)
        var = centred.square().mean(dim=1, keepdim=True)  # population variance
        return torch.addcmul(self.norm_shift, centred, torch.rsqrt(var + self.eps) * self.norm_scale)


class AttentionBlock(nn.Module):
    """Self-attention + residual + norm, feed-forward + residual + norm."""

    def __init__(self, d_h: int, heads: int, ff_dim: int):
        super().__init__()
        self.mha = MultiHeadAttention(d_h, heads)
        self.norm1 = InstanceNorm(d_h)
        self.ff = nn.Sequential(nn.Linear(d_h, ff_dim), nn.ReLU(inplace=True), nn.Linear(ff_dim, d_h))
        self.norm2 = InstanceNorm(d_h)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        h = self.norm1(x + self.mha(x, x, mask))
        return self.norm2(h + self.ff(h))


def attention_block(x: torch.Tensor, block: AttentionBlock, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Apply ``block`` to an unbatched ``(n, d_h)`` or batched ``(B, n, d_h)`` input."""
    squeeze = x.dim() == 2
    if squeeze:
        x = x[None]
        mask = None if mask is None else mask[None]
    out = check_finite(block(x, mask), "attention block")
    return out[0] if squeeze else out


class ParamStore:
    """Named parameters of a module with gradient slots and Adam moments."""

    def __init__(self, module: nn.Module, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.module = module
        self.params: OrderedDict[str, nn.Parameter] = OrderedDict(module.named_parameters())
        self.grads: dict[str, torch.Tensor | None] = {k: None for k in self.params}
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: torch.zeros_like(p) for k, p in self.params.items()}
        self.v = {k: torch.zeros_like(p) for k, p in self.params.items()}
        self.step = 0

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        self.grads = {k: None for k in self.params}

    def has_grads(self) -> bool:
        return any(g is not None for g in self.grads.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.detach().numpy().copy() for k, p in self.params.items()}


def backward(loss: torch.Tensor, store: ParamStore) -> None:
    """Accumulate d(loss)/d(param) into ``store.grads``.

    Parameters that do not reach the loss receive a zero gradient.
    """
    if loss.numel() != 1:
        raise InvalidArgument(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    check_finite(loss, "loss")
    names = [k for k, p in store.params.items() if p.requires_grad]
    grads = torch.autograd.grad(loss.reshape(()), [store.params[k] for k in names], allow_unused=True)
    for k, g in zip(names, grads):
        if g is None:
            g = torch.zeros_like(store.params[k])
        prev = store.grads[k]
        store.grads[k] = g if prev is None else prev + g


def adam_step(store: ParamStore, lr: float) -> None:
    if not store.has_grads():
        raise StateError("adam_step called without gradients")
    store.step += 1
    b1, b2 = store.beta1, store.beta2
    c1 = 1 - b1 ** store.step
    c2 = 1 - b2 ** store.step
    with torch.no_grad():
        for k, p in store.params.items():
            g = store.grads[k]
            if g is None:
                continue
            store.m[k].mul_(b1).add_(g, alpha=1 - b1)
            store.v[k].mul_(b2).addcmul_(g, g, value=1 - b2)
            p.sub_(lr * (store.m[k] / c1) / (torch.sqrt(store.v[k] / c2) + store.eps))
    store.zero_grad()


# ---------------------------------------------------------------------------
# checkpoint container
#
# All integers little-endian.
#   magic        8 bytes  b"NRDCKPT\0"
#   version      u32      (1)
#   manifest     u64 length + UTF-8 JSON (sorted keys, no whitespace)
#   count        u32      number of arrays
#   per array:   u16 name length, UTF-8 name, u8 ndim, ndim x u64 dims,
#                prod(dims) x f64 values in row-major order

MAGIC = b"NRDCKPT\0"
VERSION = 1


def save_checkpoint(path, arrays: Mapping[str, np.ndarray], manifest: Mapping) -> None:
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(arrays, manifest))


def checkpoint_bytes(arrays: Mapping[str, np.ndarray], manifest: Mapping) -> bytes:
    meta = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    chunks = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(meta)), meta,
              struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode()
        chunks.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def load_checkpoint(path) -> tuple[dict, OrderedDict[str, np.ndarray]]:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:8] != MAGIC:
        raise StateError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", buf, 8)
    if version != VERSION:
        raise StateError(f"{path}: unsupported checkpoint version {version}")
    (mlen,) = struct.unpack_from("<Q", buf, 12)
    pos = 20
    manifest = json.loads(buf[pos : pos + mlen].decode())
    pos += mlen
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    arrays: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
        pos += 8 * size
    return manifest, arrays


def load_arrays_into(module: nn.Module, arrays: Mapping[str, np.ndarray]) -> None:
    params = dict(module.named_parameters())
    missing = set(params) - set(arrays)
    if missing:
        raise StateError(f"checkpoint lacks parameters {sorted(missing)}")
    with torch.no_grad():
        for k, p in params.items():
            if tuple(arrays[k].shape) != tuple(p.shape):
                raise StateError(f"shape mismatch for {k}: {arrays[k].shape} vs {tuple(p.shape)}")
            p.copy_(torch.from_numpy(arrays[k]))
