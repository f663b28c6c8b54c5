import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_masks, tiny_model
from oracles import randomize
from xpruner.autodiff import Tape, Tensor, grad_check, ops
from xpruner.checkpoint import Checkpoint, from_bytes, to_bytes
from xpruner.errors import DegenerateArchitectureError, NonFiniteLossError
from xpruner.prune import (
    PruneState,
    ThresholdSearch,
    accumulated_rate,
    check_budget_feasible,
    finetune,
    hard_prune,
    init_prune_state,
    kept_count,
    lagrangian,
    max_rate,
    soft_prune,
    top_k_mask,
)
from xpruner.resources import count_flops
from xpruner.vit import forward, prunable_units
from xpruner.xmask import masked_forward, unit_scores

IMAGES = np.random.default_rng(7).uniform(0, 1, size=(6, 1, 16, 16))
LABELS = np.array([0, 1, 2, 0, 1, 2])


def setup(alpha=0.5, seed=0, **kw):
    model = randomize(tiny_model(seed=seed), seed=seed, scale=0.2)
    masks = random_masks(model, seed=seed + 1, low=0.2, high=1.8)
    state = init_prune_state(masks, prunable_units(model), alpha, **kw)
    return model, masks, state


# -- selection --------------------------------------------------------------------------------

def test_kept_count():
    assert kept_count(0.5, 4) == 2
    assert kept_count(0.3, 10) == 7
    assert kept_count(0.26, 4) == 3
    assert kept_count(0.99, 4) == 1
    assert max_rate(4) == 0.75


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 5), min_size=1, max_size=12), st.data())
def test_top_k_keeps_highest_with_low_index_ties(values, data):
    scores = np.array(values, dtype=float)
    k = data.draw(st.integers(1, len(values)))
    kept = top_k_mask(scores, k)
    assert kept.sum() == k
    if k < len(values):
        assert scores[kept].min() >= scores[~kept].max()
        # among equal scores on the boundary, lower indices win
        boundary = scores[kept].min()
        tied = np.flatnonzero(scores == boundary)
        assert list(kept[tied]) == sorted(kept[tied], reverse=True)


# -- gating -----------------------------------------------------------------------------------

@pytest.mark.parametrize("variant", ["verbatim", "rectified"])
def test_soft_prune_values(variant):
    model, masks, state = setup(variant=variant)
    gated, decision = soft_prune(masks, state)
    g = decision.group(1, "neuron")
    s = unit_scores(masks, 1, "neuron").data
    theta = state.theta.data[state.group_index(1, "neuron")]
    gate = np.tanh(10 * (s - theta))
    np.testing.assert_allclose(g.gates, gate, rtol=1e-15)
    assert g.kept.sum() == kept_count(0.5, 32)
    fc1 = masks.layers[1]["fc1"].data
    drop = 500 * (np.maximum(gate, 0) if variant == "rectified" else gate)
    expected = np.where(g.kept[None, :, None], fc1 * gate[None, :, None], drop[None, :, None])
    np.testing.assert_allclose(gated.layers[1]["fc1"].data, expected, rtol=1e-14)


def test_boundary_init_separates_kept_and_dropped():
    _, masks, state = setup()
    _, decision = soft_prune(masks, state)
    for g in decision.groups:
        assert (g.gates[g.kept] > 0).all() and (g.gates[~g.kept] < 0).all()


def test_gate_asymptotics():
    _, masks, state = setup()
    scores = unit_scores(masks, 0, "neuron").data
    gi = state.group_index(0, "neuron")
    state.theta.data[gi] = scores.min() - 0.5
    gated, _ = soft_prune(masks, state)
    rel = np.abs(gated.layers[0]["fc1"].data - masks.layers[0]["fc1"].data) / masks.layers[0]["fc1"].data
    kept = soft_prune(masks, state)[1].group(0, "neuron").kept
    assert rel[:, kept, :].max() < 1e-4
    state.theta.data[gi] = scores[5]
    gated, _ = soft_prune(masks, state)
    assert np.all(gated.layers[0]["fc1"].data[:, 5, :] == 0.0)
    assert np.all(gated.layers[0]["fc2"].data[:, :, 5] == 0.0)


def test_soft_prune_gradients_wrt_masks_and_theta():
    model, masks, state = setup()
    probe = np.random.default_rng(0).normal(size=masks.layers[0]["fc1"].shape)

    def via_theta(t):
        state.theta = t
        gated, _ = soft_prune(masks, state)
        return ops.sum(gated.layers[0]["fc1"] * Tensor(probe)) + ops.sum(gated.layers[1]["head"])

    assert grad_check(via_theta, state.theta.data.copy()) < 1e-6

    def via_mask(t):
        masks.layers[0]["fc1"] = t
        gated, _ = soft_prune(masks, state)
        return ops.sum(gated.layers[0]["fc1"] * Tensor(probe))

    # tiny perturbations do not reorder the well-separated scores
    assert grad_check(via_mask, masks.layers[0]["fc1"].data.copy(), coords=40) < 1e-4


def test_elementwise_soft_prune_keeps_entry_fraction():
    _, masks, state = setup(granularity="elementwise")
    gated, decision = soft_prune(masks, state)
    g = decision.group(0, "head")
    assert g.kept.sum() == kept_count(0.5, g.kept.size)
    head = masks.layers[0]["head"].data
    theta = state.theta.data[state.group_index(0, "head")]
    kept = g.kept[: head.size].reshape(head.shape)
    np.testing.assert_allclose(gated.layers[0]["head"].data[kept], (head * np.tanh(10 * (head - theta)))[kept])


# -- budget -----------------------------------------------------------------------------------

def test_accumulated_rate_by_hand():
    _, _, state = setup()
    state.rate.data = np.array([0.5, 0.25, 0.0, 0.75])
    n = np.array(state.group_params, dtype=float)
    assert accumulated_rate(state).item() == pytest.approx(float((state.rate.data * n).sum() / n.sum()), abs=1e-15)
    R = accumulated_rate(state)
    Tape(R).backward()
    np.testing.assert_array_equal(state.rate.grad, n / n.sum())


def test_lagrangian_gradients():
    _, _, state = setup(alpha=0.4)
    state.beta.data = np.array(2.0)
    state.gamma.data = np.array(-0.7)
    state.rate.data = np.array([0.1, 0.6, 0.3, 0.2])

    def f(t):
        state.rate = t
        return lagrangian(state, accumulated_rate(state))

    assert grad_check(f, state.rate.data.copy()) < 1e-8
    R = float(accumulated_rate(state).item())
    n = np.array(state.group_params, dtype=float)
    g = Tensor(state.rate.data.copy(), requires_grad=True)
    state.rate = g
    Tape(lagrangian(state, accumulated_rate(state))).backward()
    np.testing.assert_allclose(g.grad, -(2 * 2.0 * (0.4 - R) - 0.7) * n / n.sum(), rtol=1e-12)


def test_infeasible_budget():
    _, _, state = setup(alpha=0.99)
    with pytest.raises(DegenerateArchitectureError):
        check_budget_feasible(state)
    check_budget_feasible(setup(alpha=0.5)[2])


# -- search -----------------------------------------------------------------------------------

def test_search_step_respects_bounds_and_moves_theta():
    model, masks, state = setup(alpha=0.3)
    state.rate.data = np.zeros(4)
    theta0 = state.theta.data.copy()
    search = ThresholdSearch(model, masks, state)
    for _ in range(5):
        metrics = search.step(IMAGES, LABELS)
    assert set(metrics) >= {"loss", "ce", "lagrangian", "R", "R_after", "beta", "gamma", "step"}
    assert metrics["step"] == 5 and state.step == 5
    assert np.all(state.rate.data >= 0) and np.all(state.rate.data <= state.rate_bounds())
    assert float(state.beta.data) >= 0
    assert metrics["gamma"] > 0  # R < alpha pushes the linear multiplier up
    assert metrics["R_after"] > 0
    assert not np.array_equal(theta0, state.theta.data)


def test_search_resume_is_exact():
    def fresh():
        model, masks, state = setup(alpha=0.3, seed=5)
        state.rate.data = np.full(4, 0.1)
        return model, masks, state

    model, masks, state = fresh()
    search = ThresholdSearch(model, masks, state)
    losses = [search.step(IMAGES, LABELS)["loss"] for _ in range(4)]

    model, masks, state = fresh()
    search = ThresholdSearch(model, masks, state)
    for _ in range(3):
        search.step(IMAGES, LABELS)
    ckpt = from_bytes(to_bytes(Checkpoint(model, masks, state, optimizer=search.optimizer_arrays())))
    resumed = ThresholdSearch(ckpt.model, ckpt.masks, ckpt.prune_state)
    resumed.load_optimizer_arrays(ckpt.optimizer)
    assert resumed.step(IMAGES, LABELS)["loss"] == losses[3]


def test_nonfinite_loss_names_term():
    model, masks, state = setup()
    for _, t in masks.named():
        t.data = t.data * 1e200
    search = ThresholdSearch(model, masks, state)
    with pytest.raises(NonFiniteLossError) as info:
        with np.errstate(all="ignore"):
            search.step(IMAGES, LABELS)
    assert info.value.term == "ce"


# -- hard prune and fold ------------------------------------------------------------------------

def test_hard_prune_keeps_top_units_and_reports_consistently():
    model, masks, state = setup()
    pruned, report = hard_prune(model, masks, state)
    for layer in range(2):
        scores = unit_scores(masks, layer, "neuron").data
        expected = sorted(np.argsort(-scores, kind="stable")[: kept_count(0.5, 32)].tolist())
        assert report.layers[layer]["kept_neurons"] == expected
        assert pruned.hidden[layer] == 16 and pruned.heads[layer] == 1
    after = count_flops(pruned)
    assert report.flops_after == after.flops_total and report.params_after == after.total_params
    assert abs(report.flops_ratio - after.flops_total / count_flops(model).flops_total) < 1e-12
    assert report.achieved_rate == pytest.approx(0.5, abs=1e-12)
    assert report.target_rate == pytest.approx(0.5)
    assert report.to_dict()["layers"][0]["rate"]["heads"] == 0.5


def test_fold_equivalence_with_class_uniform_masks():
    model, masks, _ = setup()
    for key, t in masks.named():
        axis = 1 if key.endswith("head") else 0
        t.data = np.repeat(np.take(t.data, [0], axis=axis), 3, axis=axis)
    # thresholds between kept and dropped scores: dropped entries gate to exactly zero
    state = init_prune_state(masks, prunable_units(model), 0.5, variant="rectified")
    gated, _ = soft_prune(masks, state)
    pruned, _ = hard_prune(model, masks, state)
    soft = masked_forward(model, gated, IMAGES, LABELS).data
    np.testing.assert_allclose(forward(pruned, IMAGES).data, soft, atol=1e-10)


def test_elementwise_hard_prune_zeroes_but_keeps_shape():
    model, masks, state = setup(alpha=0.3, granularity="elementwise")
    pruned, report = hard_prune(model, masks, state)
    assert pruned.heads == model.heads and pruned.hidden == model.hidden
    zeroed = sum(sum(row["zeroed_weights"].values()) for row in report.layers)
    assert zeroed > 0 and report.params_after == report.params_before
    assert report.achieved_rate == pytest.approx(zeroed / report.prunable_before)


def test_finetune_zero_epochs_is_identity():
    model, _, _ = setup()
    tuned, history = finetune(model, IMAGES, LABELS, epochs=0, lr=1e-3)
    assert tuned.weight_hash() == model.weight_hash() and len(history.rows) == 1


def test_finetune_returns_new_model():
    model, _, _ = setup()
    h = model.weight_hash()
    tuned, history = finetune(model, IMAGES, LABELS, epochs=2, lr=1e-3, batch_size=3)
    assert model.weight_hash() == h and tuned.weight_hash() != h
    assert [r["epoch"] for r in history.rows] == [0, 1, 2]


def test_state_scalars_round_trip():
    _, _, state = setup()
    back = PruneState.from_parts(state.scalars(), state.arrays())
    assert back.scalars() == state.scalars()
    np.testing.assert_array_equal(back.rate.data, state.rate.data)
    assert math.isclose(accumulated_rate(back).item(), accumulated_rate(state).item())
