"""Shared fixtures and the acceptance gate summary printed at the end of the session."""

from __future__ import annotations

import numpy as np
import pytest

from disa.config import load_config
from disa.encoders import DualEncoder, EncoderConfig

GATES: list[tuple[str, bool, str]] = []


def record_gate(label: str, ok: bool, detail: str = "") -> bool:
    GATES.append((label, bool(ok), detail))
    print(f"{'PASS' if ok else 'FAIL'} {label} {detail}")
    return ok


def pytest_terminal_summary(terminalreporter):
    if not GATES:
        return
    terminalreporter.section("acceptance criteria")
    for label, ok, detail in GATES:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {label}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_config():
    """A two-layer, 16-wide encoder with short pretraining: quick enough for plumbing tests."""
    return load_config(overrides={
        "encoder.d": "16", "encoder.layers": "2", "encoder.heads": "2",
        "pretrain.steps": "200", "optim.epochs": "1", "data.samples_per_class": "24",
        "data.test_per_class": "4", "data.k_shot": "2", "data.n_classes": "6",
        "run.seeds": "1", "run.figures": "false", "data.few_shot_ks": "1, 2", "optim.few_shot_epochs": "2",
    })


@pytest.fixture(scope="session")
def tiny_encoder(tiny_config):
    from disa.harness import build_encoder

    return build_encoder(tiny_config, 0)


@pytest.fixture
def small_encoder():
    return DualEncoder(EncoderConfig(d=16, layers=2, heads=2), seed=7)
