import numpy as np
import pytest

from dmtl.config import ModelConfig, TrainConfig
from dmtl.features import Batch, FeatureSchema

SMALL_SCHEMA = FeatureSchema(
    user_fields=(("user_id", 7), ("user_cluster", 3), ("user_noise", 2)),
    item_fields=(("item_id", 9), ("item_cluster", 4)),
    dense_dim=3,
    embedding_dim=4,
)
SMALL_MODEL = ModelConfig(embedding_dim=4, num_experts=2, expert_sizes=(6, 5), head_sizes=(4,), tower_sizes=(6, 5))


def random_batch(schema: FeatureSchema, n: int, seed: int = 0, threshold: float = 50.0) -> Batch:
    rng = np.random.default_rng(seed)
    users = np.stack([rng.integers(0, c, n) for _, c in schema.user_fields], axis=1)
    items = np.stack([rng.integers(0, c, n) for _, c in schema.item_fields], axis=1)
    click = rng.integers(0, 2, n)
    dur = np.where(click == 1, rng.uniform(1.0, 120.0, n), 0.0)
    return Batch(users, items, rng.normal(size=(n, schema.dense_dim)), click, dur, threshold)


@pytest.fixture
def schema():
    return SMALL_SCHEMA


@pytest.fixture
def model_cfg():
    return SMALL_MODEL


@pytest.fixture
def batch16():
    b = random_batch(SMALL_SCHEMA, 16, seed=11)
    assert b.z.any() and b.click.any() and not b.click.all()
    return b


@pytest.fixture
def train_cfg():
    return TrainConfig()


_CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def report_criterion():
    """Record the outcome of one numbered acceptance criterion for the summary."""

    def record(number: int, passed: bool, detail: str):
        _CRITERIA[number] = (bool(passed), detail)
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        passed, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}")
