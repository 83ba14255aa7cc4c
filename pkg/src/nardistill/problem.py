"""Routing instances, tours, feasibility checks and TSPLIB parsing.

Node ids are shared by every part of the package: the CVRP depot is node 0 and
customers are ``1..n``; TSP nodes are ``1..n`` and id 0 is reserved for the
decoder's start placeholder (never a legal action).

Random instances are drawn from numpy's Philox4x64-10 counter-based generator
keyed directly with the 64-bit seed (``Philox(key=seed)``, counter starting at
zero). Uniform reals are ``(next_uint64 >> 11) * 2**-53``; this is numpy's
``Generator.random`` and is reproducible from the published Philox reference.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, NamedTuple, Sequence

import numpy as np
import torch

from .errors import FeasibilityError, InvalidArgument, ParseError, UnsupportedFormat

CAPACITY_TOL = 1e-9


class Kind(str, Enum):
    TSP = "TSP"
    CVRP = "CVRP"


@dataclass(frozen=True, eq=False)
class VrpInstance:
    """One routing problem.

    ``coords`` is ``(n, 2)`` for TSP and ``(n + 1, 2)`` for CVRP with the depot
    in row 0, so that for CVRP the row index equals the node id. ``demands``
    holds the ``n`` customer demands (CVRP only).
    """

    kind: Kind
    coords: np.ndarray
    demands: np.ndarray | None = None
    capacity: float | None = None
    id: str = ""
    normalized: bool = False
    raw_coords: np.ndarray | None = None

    @property
    def n(self) -> int:
        """Number of customers (TSP: number of nodes)."""
        return len(self.coords) - (1 if self.kind is Kind.CVRP else 0)

    def node_xy(self, raw: bool = False) -> np.ndarray:
        """Coordinates indexed by node id, shape ``(n + 1, 2)``."""
        xy = self.raw_coords if raw else self.coords
        if xy is None:
            raise InvalidArgument("instance carries no raw coordinates")
        if self.kind is Kind.CVRP:
            return xy
        return np.vstack([np.zeros((1, 2)), xy])

    def to_dict(self) -> dict:
        out = {
            "kind": self.kind.value,
            "coords": self.coords.tolist(),
            "demands": None if self.demands is None else self.demands.tolist(),
            "capacity": self.capacity,
            "id": self.id,
            "normalized": self.normalized,
        }
        if self.raw_coords is not None:
            out["raw_coords"] = self.raw_coords.tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "VrpInstance":
        kind = Kind(d["kind"])
        demands = d.get("demands")
        raw = d.get("raw_coords")
        return cls(
            kind=kind,
            coords=np.asarray(d["coords"], dtype=np.float64),
            demands=None if demands is None else np.asarray(demands, dtype=np.float64),
            capacity=None if d.get("capacity") is None else float(d["capacity"]),
            id=str(d.get("id", "")),
            normalized=bool(d.get("normalized", False)),
            raw_coords=None if raw is None else np.asarray(raw, dtype=np.float64),
        )


@dataclass(frozen=True)
class Tour:
    """Action sequence ``a_1..a_l``.

    For CVRP the vehicle starts at the depot before ``a_1`` and returns to it
    after ``a_l``; neither endpoint is written into ``actions``. A trailing
    explicit depot is tolerated.
    """

    actions: tuple[int, ...]
    kind: Kind

    def __post_init__(self):
        object.__setattr__(self, "actions", tuple(int(a) for a in self.actions))

    def __len__(self) -> int:
        return len(self.actions)


@dataclass(frozen=True)
class Violation:
    rule: str
    index: int | None  # 1-based position in the action sequence
    detail: str = ""

    def __str__(self) -> str:
        at = f" at position {self.index}" if self.index is not None else ""
        return f"{self.rule}{at}: {self.detail}" if self.detail else f"{self.rule}{at}"


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=int(seed) & 0xFFFF_FFFF_FFFF_FFFF))


def cvrp_demand_scale(n: int) -> int:
    return n // 5 + 30


def generate_tsp(n: int, seed: int) -> VrpInstance:
    if n < 2:
        raise InvalidArgument(f"n must be >= 2, got {n}")
    coords = _rng(seed).random((n, 2))
    return VrpInstance(Kind.TSP, coords, id=f"tsp{n}-{seed}")


def generate_cvrp(n: int, seed: int) -> VrpInstance:
    if n < 2:
        raise InvalidArgument(f"n must be >= 2, got {n}")
    rng = _rng(seed)
    coords = rng.random((n + 1, 2))
    raw_demand = rng.integers(1, 10, size=n)
    demands = raw_demand / cvrp_demand_scale(n)
    return VrpInstance(Kind.CVRP, coords, demands=demands, capacity=1.0, id=f"cvrp{n}-{seed}")


def generate(kind: Kind | str, n: int, seed: int) -> VrpInstance:
    return generate_tsp(n, seed) if Kind(kind) is Kind.TSP else generate_cvrp(n, seed)


def make_dataset(kind: Kind | str, n: int, count: int, seed: int) -> list[VrpInstance]:
    """Instance ``k`` uses seed ``seed + k``."""
    return [generate(kind, n, seed + k) for k in range(count)]


def validate_tour(instance: VrpInstance, tour: Tour | Sequence[int]) -> Violation | None:
    """Return ``None`` when the tour is feasible, else the first violation."""
    if isinstance(tour, Tour):
        if tour.kind is not instance.kind:
            return Violation("kind-mismatch", None, f"{tour.kind.value} tour for {instance.kind.value}")
        actions = tour.actions
    else:
        actions = tuple(int(a) for a in tour)
    n = instance.n
    seen = set()

    if instance.kind is Kind.TSP:
        for pos, a in enumerate(actions, 1):
            if not 1 <= a <= n:
                return Violation("node-out-of-range", pos, f"node {a}")
            if a in seen:
                return Violation("repeated-node", pos, f"node {a}")
            seen.add(a)
        if len(actions) != n:
            missing = sorted(set(range(1, n + 1)) - seen)
            return Violation("missing-node", None, f"nodes {missing} never visited")
        return None

    load = 0.0
    prev = 0
    for pos, a in enumerate(actions, 1):
        if not 0 <= a <= n:
            return Violation("node-out-of-range", pos, f"node {a}")
        if a == 0:
            if prev == 0:
                return Violation("consecutive-depot", pos, "depot visited twice in a row")
            load = 0.0
        else:
            if a in seen:
                return Violation("repeated-node", pos, f"node {a}")
            seen.add(a)
            load += float(instance.demands[a - 1])
            if load > instance.capacity + CAPACITY_TOL:
                return Violation("capacity-exceeded", pos, f"sub-tour demand {load:.6g} > {instance.capacity:g}")
        prev = a
    if len(seen) != n:
        missing = sorted(set(range(1, n + 1)) - seen)
        return Violation("missing-node", None, f"customers {missing} never visited")
    return None


def check_tour(instance: VrpInstance, tour: Tour | Sequence[int]) -> None:
    violation = validate_tour(instance, tour)
    if violation is not None:
        raise FeasibilityError(violation)


def _closed_path(instance: VrpInstance, actions: Sequence[int]) -> list[int]:
    if instance.kind is Kind.TSP:
        return list(actions) + [actions[0]]
    path = [0] + list(actions)
    if path[-1] != 0:
        path.append(0)
    return path


def tour_length(instance: VrpInstance, tour: Tour | Sequence[int], raw: bool = False) -> float:
    """Closed-tour Euclidean length; ``raw=True`` measures in native units."""
    check_tour(instance, tour)
    actions = tour.actions if isinstance(tour, Tour) else tuple(tour)
    xy = instance.node_xy(raw=raw)[_closed_path(instance, actions)]
    return float(np.sqrt(((xy[1:] - xy[:-1]) ** 2).sum(axis=1)).sum())


def optimality_gap(length: float, reference: float) -> float:
    return (length - reference) / reference


# ---------------------------------------------------------------------------
# TSPLIB


def _header_value(line: str) -> str:
    if ":" in line:
        return line.split(":", 1)[1].strip()
    parts = line.split(None, 1)
    return parts[1].strip() if len(parts) > 1 else ""


def parse_tsplib(text: str) -> VrpInstance:
    """Parse an EUC_2D TSPLIB problem and rescale it into the unit square."""
    lines = text.splitlines()
    name = ""
    dim = None
    ewt = None
    coords: dict[int, tuple[float, float]] = {}
    in_coords = False
    for lineno, raw_line in enumerate(lines, 1):
        line = raw_line.strip()
        if not line:
            continue
        key = line.split(":", 1)[0].split()[0].upper()
        if in_coords:
            if key in ("EOF", "DISPLAY_DATA_SECTION", "TOUR_SECTION", "DEMAND_SECTION", "DEPOT_SECTION"):
                in_coords = False
            else:
                parts = line.split()
                if len(parts) != 3:
                    raise ParseError(f"expected 'id x y', got {line!r}", lineno)
                try:
                    idx, x, y = int(parts[0]), float(parts[1]), float(parts[2])
                except ValueError as exc:
                    raise ParseError(f"bad coordinate record {line!r}", lineno) from exc
                if idx in coords:
                    raise ParseError(f"duplicate node id {idx}", lineno)
                coords[idx] = (x, y)
                continue
        if key == "NAME":
            name = _header_value(line)
        elif key == "TYPE":
            t = _header_value(line).upper()
            if t != "TSP":
                raise UnsupportedFormat(f"problem TYPE {t} not supported", lineno)
        elif key == "DIMENSION":
            try:
                dim = int(_header_value(line))
            except ValueError as exc:
                raise ParseError(f"bad DIMENSION {line!r}", lineno) from exc
        elif key == "EDGE_WEIGHT_TYPE":
            ewt = _header_value(line).upper()
            if ewt != "EUC_2D":
                raise UnsupportedFormat(f"EDGE_WEIGHT_TYPE {ewt} not supported (EUC_2D only)", lineno)
        elif key == "NODE_COORD_SECTION":
            if dim is None:
                raise ParseError("NODE_COORD_SECTION before DIMENSION", lineno)
            in_coords = True
        elif key == "EOF":
            break
        elif key in ("COMMENT", "EDGE_WEIGHT_FORMAT", "NODE_COORD_TYPE", "DISPLAY_DATA_TYPE", "CAPACITY"):
            continue
        else:
            raise ParseError(f"unsupported section {key}", lineno)

    end = len(lines)
    if dim is None:
        raise ParseError("missing DIMENSION", end)
    if ewt is None:
        raise ParseError("missing EDGE_WEIGHT_TYPE", end)
    if not coords:
        raise ParseError("missing NODE_COORD_SECTION", end)
    if sorted(coords) != list(range(1, dim + 1)):
        raise ParseError(f"expected node ids 1..{dim}, got {len(coords)} records", end)

    raw = np.array([coords[i] for i in range(1, dim + 1)], dtype=np.float64)
    lo = raw.min(axis=0)
    span = float((raw.max(axis=0) - lo).max())
    scaled = (raw - lo) / span if span > 0 else np.zeros_like(raw)
    return VrpInstance(Kind.TSP, scaled, id=name, normalized=True, raw_coords=raw)


# ---------------------------------------------------------------------------
# JSON instance files


def save_instances(path, instances: Iterable[VrpInstance]) -> None:
    with open(path, "w") as f:
        json.dump([inst.to_dict() for inst in instances], f)


def load_instances(path) -> list[VrpInstance]:
    with open(path) as f:
        data = json.load(f)
    if isinstance(data, dict):
        data = [data]
    return [VrpInstance.from_dict(d) for d in data]


# ---------------------------------------------------------------------------
# batched tensors for the networks


class InstanceBatch(NamedTuple):
    kind: Kind
    locs: torch.Tensor  # (B, n, 2) customer / city coordinates
    depot: torch.Tensor | None  # (B, 2)
    demands: torch.Tensor | None  # (B, n)
    capacity: float

    @property
    def size(self) -> int:
        return self.locs.shape[0]

    @property
    def n(self) -> int:
        return self.locs.shape[1]

    def node_xy(self) -> torch.Tensor:
        """(B, n + 1, 2) coordinates by node id (TSP row 0 is zeros)."""
        head = self.depot[:, None] if self.kind is Kind.CVRP else torch.zeros_like(self.locs[:, :1])
        return torch.cat([head, self.locs], dim=1)

    def node_demands(self) -> torch.Tensor:
        """(B, n + 1) demands by node id, zero at id 0."""
        zero = torch.zeros_like(self.locs[:, :, 0][:, :1])
        dem = self.demands if self.demands is not None else torch.zeros_like(self.locs[:, :, 0])
        return torch.cat([zero, dem], dim=1)

    def __getitem__(self, idx):
        if isinstance(idx, int):
            return tuple.__getitem__(self, idx)
        return InstanceBatch(
            self.kind,
            self.locs[idx],
            None if self.depot is None else self.depot[idx],
            None if self.demands is None else self.demands[idx],
            self.capacity,
        )


def stack_instances(instances: Sequence[VrpInstance]) -> InstanceBatch:
    if not instances:
        raise InvalidArgument("empty instance list")
    kind = instances[0].kind
    n = instances[0].n
    for inst in instances:
        if inst.kind is not kind or inst.n != n:
            raise InvalidArgument("instances in a batch must share kind and size")
    coords = torch.from_numpy(np.stack([inst.coords for inst in instances]))
    if kind is Kind.TSP:
        return InstanceBatch(kind, coords, None, None, 1.0)
    demands = torch.from_numpy(np.stack([inst.demands for inst in instances]))
    caps = {inst.capacity for inst in instances}
    if len(caps) != 1:
        raise InvalidArgument("instances in a batch must share capacity")
    return InstanceBatch(kind, coords[:, 1:], coords[:, 0], demands, float(caps.pop()))


def batch_tour_lengths(batch: InstanceBatch, actions: torch.Tensor) -> torch.Tensor:
    """Lengths for (B, L) action tensors; CVRP rows may be padded with depot visits."""
    xy = batch.node_xy()
    if batch.kind is Kind.TSP:
        path = torch.cat([actions, actions[:, :1]], dim=1)
    else:
        zero = torch.zeros_like(actions[:, :1])
        path = torch.cat([zero, actions, zero], dim=1)
    pts = xy.gather(1, path[..., None].expand(-1, -1, 2))
    return (pts[:, 1:] - pts[:, :-1]).norm(dim=-1).sum(dim=1)


def trim_actions(kind: Kind, row: Sequence[int]) -> Tour:
    """Drop the depot padding a batched CVRP decode leaves after completion."""
    acts = [int(a) for a in row]
    if kind is Kind.CVRP:
        while acts and acts[-1] == 0:
            acts.pop()
    return Tour(tuple(acts), kind)


__all__ = [
    "Kind", "VrpInstance", "Tour", "Violation", "InstanceBatch", "generate_tsp",
    "generate_cvrp", "generate", "make_dataset", "validate_tour", "check_tour",
    "tour_length", "optimality_gap", "parse_tsplib", "save_instances",
    "load_instances", "stack_instances", "batch_tour_lengths", "trim_actions",
]
