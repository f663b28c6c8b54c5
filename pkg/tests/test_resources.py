import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_model
from xpruner.resources import block_flops, count_flops, count_params, remaining_ratio
from xpruner.vit import Keep, ModelConfig, apply_structural_prune, head_param_count, neuron_param_count, prunable_units

DEIT_T = ModelConfig(224, 16, 192, 12, 3, 4.0, 1000, 3)
DEIT_S = ModelConfig(224, 16, 384, 12, 6, 4.0, 1000, 3)
DEIT_B = ModelConfig(224, 16, 768, 12, 12, 4.0, 1000, 3)


def test_param_count_by_enumeration(tiny):
    report = count_params(tiny)
    assert report.total_params == sum(t.data.size for t in tiny.params.values())
    assert report.prunable_params == sum(u.param_count for u in prunable_units(tiny))
    assert sum(report.per_layer) == report.prunable_params
    assert report.groups == [(0, "head"), (0, "neuron"), (1, "head"), (1, "neuron")]


def test_drop_one_head(tiny):
    pruned = apply_structural_prune(tiny, {1: Keep([1], list(range(32)))})
    assert count_params(tiny).total_params - count_params(pruned).total_params == head_param_count(tiny)
    assert count_params(tiny).per_layer[2] - count_params(pruned).per_layer[2] == head_param_count(tiny)


def test_empty_prune_identical(tiny):
    same = apply_structural_prune(tiny, {0: Keep([0, 1], list(range(32)))})
    assert count_flops(same).to_dict() == count_flops(tiny).to_dict()


def test_deit_published_sizes():
    t, s, b = count_flops(DEIT_T), count_flops(DEIT_S), count_flops(DEIT_B)
    assert t.flops_total / 1e9 == pytest.approx(1.3, rel=0.05)
    assert s.flops_total / 1e9 == pytest.approx(4.6, rel=0.05)
    assert b.flops_total / 1e9 == pytest.approx(17.6, rel=0.05)
    assert t.total_params / 1e6 == pytest.approx(5.7, rel=0.01)
    assert s.total_params / 1e6 == pytest.approx(22.1, rel=0.01)


def test_config_and_model_reports_agree(tiny):
    from_model = count_flops(tiny)
    from_config = count_flops(tiny.config)
    assert from_model.to_dict() == from_config.to_dict()


def test_flops_by_hand_for_one_block():
    # T=5 tokens, d=4, 2 heads of width 2, hidden 8
    f = block_flops(5, 4, 2, 2, 8)
    assert f["attention"] == 3 * 5 * 4 * 4 + 2 * (2 * 25 * 2) + 5 * 2 * 25 + 5 * 4 * 4
    assert f["mlp"] == 2 * 5 * 4 * 8 + 5 * 5 * 8
    assert f["norm"] == 2 * 5 * 5 * 4


def test_halving_hidden_halves_mlp_flops():
    full = block_flops(17, 64, 4, 16, 128)
    half = block_flops(17, 64, 4, 16, 64)
    assert half["mlp"] * 2 == full["mlp"]


def test_attention_flops_depend_on_input_size(tiny):
    small = count_flops(tiny, (1, 16, 16))
    large = count_flops(tiny, (1, 32, 32))
    assert large.flops_total > small.flops_total
    assert large.input_shape == (1, 32, 32)


@settings(max_examples=20, deadline=None)
@given(st.lists(st.integers(0, 31), min_size=1, max_size=31, unique=True), st.integers(0, 1))
def test_strictly_monotone_under_pruning(neurons, layer):
    model = tiny_model()
    base = count_flops(model)
    pruned = count_flops(apply_structural_prune(model, {layer: Keep([0, 1], neurons)}))
    assert pruned.total_params == base.total_params - (32 - len(neurons)) * neuron_param_count(model)
    if len(neurons) < 32:
        assert pruned.flops_total < base.flops_total and pruned.total_params < base.total_params


def test_counts_ignore_weight_values(tiny):
    before = count_flops(tiny).to_dict()
    for t in tiny.params.values():
        t.data = t.data * 7.0
    assert count_flops(tiny).to_dict() == before


def test_remaining_ratio():
    assert remaining_ratio(count_flops(DEIT_S), count_flops(DEIT_S)) == 1.0
    assert round(100 * remaining_ratio(2.4, 4.6), 1) == 52.2
    with pytest.raises(ZeroDivisionError):
        remaining_ratio(1.0, 0.0)


def test_report_serializes(tiny):
    d = json.loads(json.dumps(count_flops(tiny).to_dict()))
    assert d["input_shape"] == [1, 16, 16] and d["groups"][1] == [0, "neuron"]
    assert np.isclose(sum(b["total"] for b in d["flops_per_block"]) + sum(d["flops_other"].values()), d["flops_total"])
