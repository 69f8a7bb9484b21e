import numpy as np
import pytest
import torch

from chsnet.model import ModelConfig


def tiny_model_config(**kw) -> ModelConfig:
    """Narrow toy network used wherever a test needs a real forward pass."""
    base = dict(
        encoder_widths=[4, 8],
        feature_channels=8,
        encoder_stride=8,
        conv_head={"n_blocks": 2, "dilation": 2},
        tran_head={"n_layers": 1, "n_attention_heads": 2, "ffn_multiplier": 2},
        regression_channels=[8, 4],
    )
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_cfg():
    return tiny_model_config()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, name: str, passed: bool, detail: str = "") -> bool:
    line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {name}" + (f" -- {detail}" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
