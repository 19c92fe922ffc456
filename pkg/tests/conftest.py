import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from mnat.data import generate_synthetic_task  # noqa: E402
from mnat.model import ModelConfig, NATModel  # noqa: E402


def tiny_config(**overrides) -> ModelConfig:
    base = dict(vocab_size=16, model_dim=16, hidden_dim=32, layers_enc=1, layers_dec=2, heads=2,
                max_positions=12, max_length_bins=12, dropout_rate=0.0, seed=3)
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model() -> NATModel:
    return NATModel(tiny_config())


@pytest.fixture
def copy_pairs():
    return generate_synthetic_task("copy", 12, 64, 8, seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria report: one line per criterion, filled by tests/test_acceptance.py
CRITERIA: dict[int, tuple[str, bool, str]] = {}


def record_criterion(number: int, title: str, passed: bool, detail: str = "") -> None:
    CRITERIA[number] = (title, bool(passed), detail)
    print(f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        title, passed, detail = CRITERIA[number]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number:2d}. {title}  {detail}")
