import numpy as np
import pytest

from diloco_desk.models import Batch, ModelSpec
from diloco_desk.numkit import Rng


def random_batch(spec: ModelSpec, size: int, seed: int) -> Batch:
    rng = Rng(seed, 99)
    ctx = rng.integers(size * spec.context_length, spec.vocab_size).reshape(size, -1)
    return Batch(ctx, rng.integers(size, spec.vocab_size), spec.vocab_size)


@pytest.fixture
def softmax_spec():
    return ModelSpec(kind="softmax-regression", vocab_size=7, context_length=1, hidden_dims=(),
                     init_scale=0.5, init_seed=3)


@pytest.fixture
def mlp_spec():
    return ModelSpec(kind="mlp-char-lm", vocab_size=11, context_length=3, hidden_dims=(9, 6),
                     embed_dim=4, init_scale=0.5, init_seed=4)


# One line per acceptance criterion, filled in by test_acceptance.py.
ACCEPTANCE: list = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[0].lstrip("#"))):
        terminalreporter.write_line(line)
