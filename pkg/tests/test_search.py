from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from nardistill.errors import InvalidArgument, StateError
from nardistill.problem import Kind, VrpInstance, batch_tour_lengths, generate, make_dataset, stack_instances, tour_length, validate_tour
from nardistill.search import (
    capacity_update,
    decode,
    initial_state,
    mask_step,
    nar_beam,
    nar_beam_batch,
    nar_greedy,
    nar_greedy_batch,
    nar_sample,
    nar_sample_batch,
    row_logits,
    select_beam,
)
from nardistill.student import TightnessMatrix
from oracles import enumerate_tsp_tour_probs


def random_scores(kind: Kind, n: int, seed: int, batch: int = 1, scale: float = 2.0) -> torch.Tensor:
    cols = n if kind is Kind.TSP else n + 1
    return scale * torch.randn(batch, n + 1, cols, generator=torch.Generator().manual_seed(seed))


def square(kind, A):
    return TightnessMatrix(A, kind).square()


def cvrp_instance(demands, capacity=1.0, seed=0):
    n = len(demands)
    coords = np.random.default_rng(seed).random((n + 1, 2))
    return VrpInstance(Kind.CVRP, coords, demands=np.asarray(demands, dtype=float), capacity=capacity)


# masks ---------------------------------------------------------------------


def test_tsp_first_step_all_nodes_feasible():
    state = initial_state(stack_instances([generate("TSP", 6, 0)]))
    infeasible = mask_step(state)
    assert infeasible[0, 0] and not infeasible[0, 1:].any()


def test_tsp_feasible_count_shrinks_by_one():
    batch = stack_instances([generate("TSP", 7, 1)])
    state = initial_state(batch)
    for t, a in enumerate([3, 1, 7, 2, 6, 5, 4], 1):
        infeasible = mask_step(state)
        assert int((~infeasible).sum()) == 7 - t + 1
        state = capacity_update(state, torch.tensor([a]))


def test_cvrp_only_depot_when_all_customers_too_heavy():
    inst = cvrp_instance([0.9, 0.2, 0.2])
    state = capacity_update(initial_state(stack_instances([inst])), torch.tensor([1]))
    assert float(state.remaining[0]) == pytest.approx(0.1)
    infeasible = mask_step(state)
    assert infeasible[0].tolist() == [False, True, True, True]


def test_cvrp_depot_blocked_at_start_and_after_depot():
    inst = cvrp_instance([0.3, 0.3, 0.3])
    state = initial_state(stack_instances([inst]))
    assert mask_step(state)[0, 0]
    state = capacity_update(state, torch.tensor([2]))
    assert not mask_step(state)[0, 0]
    state = capacity_update(state, torch.tensor([0]))
    assert mask_step(state)[0, 0]


def test_capacity_update_examples():
    inst = cvrp_instance([0.5, 0.2, 0.3])
    state = initial_state(stack_instances([inst]))
    state = capacity_update(state, torch.tensor([1]))
    assert float(state.remaining[0]) == pytest.approx(0.5)
    state = capacity_update(state, torch.tensor([2]))
    assert float(state.remaining[0]) == pytest.approx(0.3)
    state = capacity_update(state, torch.tensor([0]))
    assert float(state.remaining[0]) == 1.0
    assert state.step == 4 and int(state.last[0]) == 0
    assert not state.visited[0, 0]


def test_capacity_update_rejects_infeasible_choice():
    state = initial_state(stack_instances([cvrp_instance([0.5, 0.2])]))
    with pytest.raises(StateError):
        capacity_update(state, torch.tensor([0]))
    state = capacity_update(state, torch.tensor([1]))
    with pytest.raises(StateError):
        capacity_update(state, torch.tensor([1]))


# greedy --------------------------------------------------------------------


def test_engineered_chain():
    inst = generate("TSP", 3, 0)
    A = torch.zeros(4, 3)
    A[0, 0] = A[1, 1] = A[2, 2] = 5.0
    A[1, 0] = A[2, 1] = A[3, 2] = -math.inf
    tour, dists = nar_greedy(TightnessMatrix(A[None], Kind.TSP), inst)
    assert tour.actions == (1, 2, 3)
    assert dists.shape == (3, 4)


def test_ties_go_to_lowest_index():
    inst = generate("TSP", 5, 0)
    tour, _ = nar_greedy(torch.zeros(6, 5), inst)
    assert tour.actions == (1, 2, 3, 4, 5)


@pytest.mark.parametrize("kind", [Kind.TSP, Kind.CVRP])
def test_greedy_deterministic_and_valid(kind):
    inst = generate(kind, 9, 4)
    A = random_scores(kind, 9, 5)
    t1, d1 = nar_greedy(A, inst)
    t2, d2 = nar_greedy(A, inst)
    assert t1 == t2 and torch.equal(d1, d2)
    assert validate_tour(inst, t1) is None
    assert torch.allclose(d1.sum(-1), torch.ones(len(d1)), atol=1e-12)


@pytest.mark.parametrize("kind", [Kind.TSP, Kind.CVRP])
def test_greedy_probability_is_product_of_max_probs(kind):
    data = make_dataset(kind, 8, 16, 30)
    batch = stack_instances(data)
    S = square(kind, random_scores(kind, 8, 31, batch=16))
    dec = nar_greedy_batch(S, batch, keep_trace=True)
    from_logp = dec.log_probs.sum(dim=1).exp()
    from_max = torch.where(dec.valid, dec.max_probs, torch.ones_like(dec.max_probs)).prod(dim=1)
    assert torch.allclose(from_logp, from_max, rtol=1e-9, atol=0)


def test_shape_mismatch_rejected():
    with pytest.raises(InvalidArgument):
        nar_greedy(torch.zeros(5, 5), generate("TSP", 5, 0))


# beam ----------------------------------------------------------------------


@pytest.mark.parametrize("kind", [Kind.TSP, Kind.CVRP])
def test_beam_width_one_is_greedy(kind):
    data = make_dataset(kind, 10, 50, 70)
    batch = stack_instances(data)
    S = square(kind, random_scores(kind, 10, 71, batch=50, scale=0.5))
    greedy = nar_greedy_batch(S, batch)
    beams = nar_beam_batch(S, batch, 1)
    for b in range(50):
        g = greedy.actions[b][greedy.valid[b]]
        assert torch.equal(beams.actions[b, 0][beams.valid[b, 0]], g)


@pytest.mark.parametrize("seed", range(5))
def test_exhaustive_beam_finds_most_probable_tour(seed):
    n = 5
    inst = generate("TSP", n, seed)
    A = random_scores(Kind.TSP, n, 100 + seed)
    best_perm, best_p = max(enumerate_tsp_tour_probs(square(Kind.TSP, A)[0].numpy(), n), key=lambda x: x[1])
    tour = nar_beam(A, inst, 120, select="probability")
    assert tour.actions == best_perm
    beams = nar_beam_batch(square(Kind.TSP, A), stack_instances([inst]), 120)
    assert float(beams.scores.max().exp()) == pytest.approx(best_p, rel=1e-9)


@pytest.mark.parametrize("kind", [Kind.TSP, Kind.CVRP])
def test_beam_by_length_not_worse_than_greedy(kind):
    inst = generate(kind, 9, 8)
    A = random_scores(kind, 9, 9)
    g, _ = nar_greedy(A, inst)
    b = nar_beam(A, inst, 16)
    assert validate_tour(inst, b) is None
    assert tour_length(inst, b) <= tour_length(inst, g) + 1e-12


def test_beam_select_validation():
    batch = stack_instances([generate("TSP", 4, 0)])
    beams = nar_beam_batch(square(Kind.TSP, random_scores(Kind.TSP, 4, 0)), batch, 2)
    with pytest.raises(InvalidArgument):
        select_beam(batch, beams, "shortest")
    with pytest.raises(InvalidArgument):
        nar_beam_batch(square(Kind.TSP, random_scores(Kind.TSP, 4, 0)), batch, 0)


# sampling ------------------------------------------------------------------


@pytest.mark.parametrize("kind", [Kind.TSP, Kind.CVRP])
def test_sample_reproducible(kind):
    inst = generate(kind, 8, 2)
    A = random_scores(kind, 8, 3)
    assert nar_sample(A, inst, 1, seed=4) == nar_sample(A, inst, 1, seed=4)
    assert validate_tour(inst, nar_sample(A, inst, 32, seed=4)) is None


def test_sample_returns_minimum_of_its_draws():
    data = make_dataset("TSP", 7, 3, 40)
    batch = stack_instances(data)
    S = square(Kind.TSP, random_scores(Kind.TSP, 7, 41, batch=3, scale=0.3))
    best, acts = nar_sample_batch(S, batch, 50, seed=9)
    gen = torch.Generator().manual_seed(9)
    dec = decode(row_logits(S), initial_state(batch, repeat=50), "sample", generator=gen)
    rep = batch[torch.arange(3).repeat_interleave(50)]
    lens = batch_tour_lengths(rep, dec.actions).reshape(3, 50)
    assert torch.allclose(best, lens.min(dim=1).values)
    assert torch.allclose(batch_tour_lengths(batch, acts), best)


def test_sample_rejects_zero_k():
    with pytest.raises(InvalidArgument):
        nar_sample(torch.zeros(5, 4), generate("TSP", 4, 0), 0, seed=0)


def test_sampling_frequencies_follow_row_distribution():
    # two cities: the first action decides the tour; P(first = 1) = softmax(row 0)[0]
    inst = generate("TSP", 2, 0)
    A = torch.tensor([[[0.3, -0.4], [-math.inf, 0.0], [0.0, -math.inf]]])
    S = square(Kind.TSP, A)
    batch = stack_instances([inst])
    gen = torch.Generator().manual_seed(0)
    dec = decode(row_logits(S), initial_state(batch, repeat=20000), "sample", generator=gen)
    freq = float((dec.actions[:, 0] == 1).double().mean())
    p = 1 / (1 + math.exp(-0.7))
    assert abs(freq - p) < 4 * math.sqrt(p * (1 - p) / 20000)


def test_unknown_decode_mode():
    batch = stack_instances([generate("TSP", 3, 0)])
    S = square(Kind.TSP, random_scores(Kind.TSP, 3, 0))
    with pytest.raises(InvalidArgument):
        decode(row_logits(S), initial_state(batch), "topk")
