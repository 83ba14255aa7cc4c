"""Reference solvers: exact Held-Karp (TSP), exhaustive CVRP, 2-opt."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidArgument, SizeLimitError
from .problem import Kind, Tour, VrpInstance, check_tour, tour_length

HELD_KARP_MAX_N = 16
CVRP_BRUTE_MAX_N = 8


@dataclass(frozen=True)
class OracleResult:
    length: float
    tour: Tour
    exact: bool


def distance_matrix(xy: np.ndarray) -> np.ndarray:
    diff = xy[..., :, None, :] - xy[..., None, :, :]
    return np.sqrt((diff ** 2).sum(-1))


def held_karp_batch(coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact TSP over a batch of equally sized instances.

    ``coords`` is ``(B, n, 2)``. Returns ``(lengths (B,), tours (B, n))`` with
    1-based node ids; every tour starts at node 1.
    """
    coords = np.asarray(coords, dtype=np.float64)
    B, n, _ = coords.shape
    if n > HELD_KARP_MAX_N:
        raise SizeLimitError(f"Held-Karp is capped at n <= {HELD_KARP_MAX_N}, got {n}")
    if n < 2:
        raise InvalidArgument("need at least two nodes")
    d = distance_matrix(coords)
    if n == 2:
        return 2 * d[:, 0, 1], np.tile(np.array([1, 2]), (B, 1))

    # node 0 is the fixed start; the other m nodes are indexed by bit position
    m = n - 1
    full = 1 << m
    dp = np.full((B, full, m), np.inf)
    parent = np.full((B, full, m), -1, dtype=np.int8)
    for j in range(m):
        dp[:, 1 << j, j] = d[:, 0, j + 1]
    popcount = np.array([bin(s).count("1") for s in range(full)])
    inner = d[:, 1:, 1:]  # (B, m, m)
    for k in range(2, m + 1):
        masks_k = np.nonzero(popcount == k)[0]
        for j in range(m):
            sel = masks_k[(masks_k >> j) & 1 == 1]
            prev = sel ^ (1 << j)
            cand = dp[:, prev, :] + inner[:, None, :, j]  # (B, |sel|, m)
            best = cand.argmin(-1)
            dp[:, sel, j] = np.take_along_axis(cand, best[..., None], -1)[..., 0]
            parent[:, sel, j] = best
    closing = dp[:, full - 1, :] + d[:, 1:, 0]
    last = closing.argmin(-1)
    lengths = closing[np.arange(B), last]

    tours = np.empty((B, n), dtype=np.int64)
    for b in range(B):
        mask = full - 1
        j = int(last[b])
        rev = []
        while j >= 0:
            rev.append(j + 2)  # bit j is node index j + 1, id j + 2
            pj = int(parent[b, mask, j])
            mask ^= 1 << j
            j = pj if mask else -1
        tours[b] = [1] + rev[::-1]
    return lengths, tours


def held_karp_tsp(instance: VrpInstance) -> OracleResult:
    if instance.kind is not Kind.TSP:
        raise InvalidArgument("held_karp_tsp needs a TSP instance")
    if instance.n > HELD_KARP_MAX_N:
        raise SizeLimitError(f"Held-Karp is capped at n <= {HELD_KARP_MAX_N}, got {instance.n}")
    lengths, tours = held_karp_batch(instance.coords[None])
    tour = Tour(tuple(tours[0]), Kind.TSP)
    return OracleResult(float(lengths[0]), tour, True)


def _split_all(perms: np.ndarray, d: np.ndarray, dem: np.ndarray, cap: float):
    """Optimal depot insertion for every customer order in ``perms`` (P, n).

    Classic split: ``best[k]`` is the cheapest way to serve the first ``k``
    customers of the order with complete depot-to-depot routes.
    """
    P, n = perms.shape
    best = np.full((P, n + 1), np.inf)
    best[:, 0] = 0.0
    cut = np.zeros((P, n + 1), dtype=np.int64)
    to_depot = d[0][perms]  # (P, n)
    step = d[perms[:, :-1], perms[:, 1:]]  # (P, n-1)
    load = dem[perms - 1]
    for start in range(n):
        route_load = np.zeros(P)
        inner = np.zeros(P)
        for end in range(start, n):
            route_load = route_load + load[:, end]
            if end > start:
                inner = inner + step[:, end - 1]
            ok = route_load <= cap + 1e-9
            cost = best[:, start] + to_depot[:, start] + inner + to_depot[:, end]
            better = ok & (cost < best[:, end + 1])
            best[:, end + 1] = np.where(better, cost, best[:, end + 1])
            cut[:, end + 1] = np.where(better, start, cut[:, end + 1])
    return best[:, n], cut


def brute_force_cvrp(instance: VrpInstance) -> OracleResult:
    """Exact CVRP by enumerating customer orders with optimal depot insertion."""
    if instance.kind is not Kind.CVRP:
        raise InvalidArgument("brute_force_cvrp needs a CVRP instance")
    n = instance.n
    if n > CVRP_BRUTE_MAX_N:
        raise SizeLimitError(f"exhaustive CVRP is capped at n <= {CVRP_BRUTE_MAX_N}, got {n}")
    d = distance_matrix(instance.coords)
    perms = np.array(list(itertools.permutations(range(1, n + 1))), dtype=np.int64)
    costs, cuts = _split_all(perms, d, instance.demands, instance.capacity)
    i = int(costs.argmin())
    tour = _routes_tour(perms[i], cuts[i])
    return OracleResult(tour_length(instance, tour), tour, True)


def _routes_tour(order: np.ndarray, cut: np.ndarray) -> Tour:
    routes = []
    end = len(order)
    while end > 0:
        start = int(cut[end])
        routes.append([int(a) for a in order[start:end]])
        end = start
    actions: list[int] = []
    for r in reversed(routes):
        if actions:
            actions.append(0)
        actions.extend(r)
    return Tour(tuple(actions), Kind.CVRP)


def split_tour(instance: VrpInstance, order: Sequence[int]) -> Tour:
    """Cheapest feasible depot insertion into a fixed customer order."""
    if instance.kind is not Kind.CVRP:
        raise InvalidArgument("split_tour needs a CVRP instance")
    perm = np.asarray(order, dtype=np.int64)[None]
    if sorted(perm[0].tolist()) != list(range(1, instance.n + 1)):
        raise InvalidArgument("order must be a permutation of the customers")
    d = distance_matrix(instance.coords)
    _, cuts = _split_all(perm, d, instance.demands, instance.capacity)
    return _routes_tour(perm[0], cuts[0])


def cvrp_proxy(instance: VrpInstance) -> Tour:
    """Heuristic CVRP reference: 2-opt giant tour through depot and customers, then split."""
    if instance.kind is not Kind.CVRP:
        raise InvalidArgument("cvrp_proxy needs a CVRP instance")
    giant = VrpInstance(Kind.TSP, instance.coords)
    route = two_opt(giant, nearest_neighbor(giant, start=1)).actions
    k = route.index(1)
    order = [a - 1 for a in route[k + 1 :] + route[:k]]
    return split_tour(instance, order)


def nearest_neighbor(instance: VrpInstance, start: int = 1) -> Tour:
    if instance.kind is not Kind.TSP:
        raise InvalidArgument("nearest_neighbor needs a TSP instance")
    d = distance_matrix(instance.coords)
    n = instance.n
    visited = np.zeros(n, dtype=bool)
    cur = start - 1
    order = [cur]
    visited[cur] = True
    for _ in range(n - 1):
        row = np.where(visited, np.inf, d[cur])
        cur = int(row.argmin())
        visited[cur] = True
        order.append(cur)
    return Tour(tuple(i + 1 for i in order), Kind.TSP)


def two_opt(instance: VrpInstance, start: Tour | Sequence[int], max_passes: int = 1000) -> Tour:
    """First-improvement 2-opt; stops at a local optimum or after ``max_passes``."""
    if instance.kind is not Kind.TSP:
        raise InvalidArgument("two_opt needs a TSP instance")
    check_tour(instance, start)
    acts = start.actions if isinstance(start, Tour) else tuple(start)
    d = distance_matrix(instance.coords)
    route = np.array(acts, dtype=np.int64) - 1
    n = len(route)
    if n < 4:
        return Tour(tuple(acts), Kind.TSP)
    for _ in range(max_passes):
        improved = False
        for i in range(n - 2):
            a, b = route[i], route[i + 1]
            # reversing route[i+1..j] swaps edges (a,b),(c,e) for (a,c),(b,e)
            js = np.arange(i + 2, n if i > 0 else n - 1)
            c = route[js]
            e = route[(js + 1) % n]
            delta = d[a, c] + d[b, e] - d[a, b] - d[c, e]
            hits = np.nonzero(delta < -1e-12)[0]
            if hits.size:
                j = int(js[hits[0]])
                route[i + 1 : j + 1] = route[i + 1 : j + 1][::-1].copy()
                improved = True
        if not improved:
            break
    return Tour(tuple(int(v) + 1 for v in route), Kind.TSP)
