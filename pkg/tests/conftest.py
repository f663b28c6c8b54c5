"""Shared fixtures, plus the per-criterion summary printed after the acceptance suite."""

from __future__ import annotations

import numpy as np
import pytest

from xpruner.vit import ModelConfig, build_model
from xpruner.xmask import init_masks

TINY = ModelConfig(image_size=16, patch_size=8, embed_dim=16, depth=2, num_heads=2, mlp_ratio=2.0, num_classes=3)
TOY = ModelConfig()  # 2 blocks, 4 heads, d=64, hidden 128, 3 classes


def tiny_model(seed: int = 0, **overrides):
    cfg = ModelConfig(**{**TINY.to_dict(), "seed": seed, **overrides})
    return build_model(cfg)


def random_masks(model, seed: int = 0, low: float = 0.5, high: float = 1.5):
    """Random positive masks with gradients enabled (model gets frozen)."""
    masks = init_masks(model)
    rng = np.random.default_rng(seed)
    for _, t in masks.named():
        t.data = rng.uniform(low, high, size=t.shape)
    return masks


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny():
    return tiny_model()


@pytest.fixture
def tiny_images(rng):
    return rng.uniform(0, 1, size=(5, 1, 16, 16))


# -- acceptance summary --------------------------------------------------------------------------

_CRITERIA: dict[int, tuple[str, list[str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion exercised by the test")


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    number, title = marker
    if report.when == "call" or report.outcome != "passed":
        _CRITERIA.setdefault(number, (title, []))[1].append(report.outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result().criterion = tuple(marker.args)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, outcomes = _CRITERIA[number]
        status = "PASS" if outcomes and all(o == "passed" for o in outcomes) else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {status}  {title}")
