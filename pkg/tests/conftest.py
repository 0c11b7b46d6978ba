"""Shared fixtures: tiny corpora and lightly-trained models, plus a terminal
summary hook that prints one line per acceptance criterion."""

from __future__ import annotations

from dataclasses import replace

import pytest
import torch

from rainrobust.models import init_model
from rainrobust.synthesis import RainParams, SceneParams, make_dataset
from rainrobust.training import TrainConfig, pretrain_derain, pretrain_seg

# (criterion number, description, passed) tuples appended by test_acceptance
ACCEPTANCE_RESULTS: list[tuple[int, str, bool]] = []


def record_criterion(number: int, description: str, passed: bool) -> None:
    ACCEPTANCE_RESULTS.append((number, description, passed))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number, description, passed in sorted(ACCEPTANCE_RESULTS):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[criterion {number}] {status} - {description}")


@pytest.fixture(scope="session")
def tiny_scene() -> SceneParams:
    return SceneParams(height=32, width=32, num_classes=4, shapes_per_image=3, seed=100)


@pytest.fixture(scope="session")
def tiny_rain() -> RainParams:
    return RainParams(seed=100)


@pytest.fixture(scope="session")
def tiny_corpus(tiny_scene, tiny_rain):
    return make_dataset(tiny_scene, tiny_rain, 48)


@pytest.fixture(scope="session")
def tiny_test_corpus(tiny_scene, tiny_rain):
    return make_dataset(replace(tiny_scene, seed=9000), replace(tiny_rain, seed=9000), 16)


@pytest.fixture(scope="session")
def seg_desc() -> dict:
    return {"num_classes": 4, "base_channels": 8}


@pytest.fixture(scope="session")
def derain_desc() -> dict:
    return {"channels": 8, "blocks": 3, "mode": "residual"}


@pytest.fixture(scope="session")
def trained_seg(tiny_corpus, seg_desc):
    """Segmenter trained well enough on the tiny corpus to be attackable."""
    model = init_model("seg", seg_desc, seed=7)
    cfg = TrainConfig(epochs=4, batch_size=16, learning_rate=3e-2, optimizer="sgd_momentum", seed=7)
    pretrain_seg(model, tiny_corpus, cfg)
    model.eval()
    return model


@pytest.fixture(scope="session")
def trained_derain(tiny_corpus, derain_desc):
    model = init_model("derain", derain_desc, seed=8)
    cfg = TrainConfig(epochs=3, batch_size=16, learning_rate=2e-3, optimizer="adam", seed=8)
    pretrain_derain(model, tiny_corpus, cfg)
    model.eval()
    return model
