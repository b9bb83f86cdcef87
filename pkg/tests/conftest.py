import numpy as np
import pytest

from depthvla import env
from depthvla.backbone import VlbConfig
from depthvla.expert import ExpertConfig
from depthvla.idem import IdemConfig
from depthvla.model import ModelConfig


def tiny_model(**kw) -> ModelConfig:
    """A few-thousand-parameter model that still exercises every module."""
    args = dict(
        idem=IdemConfig(num_layers=2, boundary=1, token_dim=8, num_heads=2),
        vlb=VlbConfig(vision_layers=1, language_layers_kept=1, hidden_dim=8, num_heads=2),
        expert=ExpertConfig(num_layers=1, hidden_dim=16, num_heads=2, cond_dim=8),
    )
    args.update(kw)
    return ModelConfig(**args)


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "train.evds"
    return env.load_dataset(env.generate_dataset(path, 0, 24, "train"))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


_RESULTS: dict = {}


def record(criterion, passed: bool, detail: str) -> None:
    """Store one acceptance line; printed in the terminal summary."""
    _RESULTS[criterion] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_RESULTS, key=lambda k: (isinstance(k, str), k if isinstance(k, int) else 0, str(k))):
        passed, detail = _RESULTS[key]
        label = f"criterion {key:>2}" if isinstance(key, int) else f"check {key}"
        terminalreporter.write_line(f"{label}: {'PASS' if passed else 'FAIL'}  {detail}")
