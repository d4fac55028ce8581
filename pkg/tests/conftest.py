import dataclasses

import pytest

from restlab import synthdata as sd
from restlab.expert_reward import IRLHyper, NegativeRecipe, build_demonstrations, synthesize_negatives, \
    train_expert_reward
from restlab.segnet import SegHyper, train_supervised

SHAPE = sd.ShapeConfig(size=32, radius=(1.6, 4.0))


@pytest.fixture(scope="session")
def small_split():
    """60 labeled (5 folds) and 48 unlabeled 32 px images."""
    return sd.with_folds(sd.generate_dataset(60, 48, seed=1, shape=SHAPE), 5, 0)


@pytest.fixture(scope="session")
def seg_hyper():
    return SegHyper(epochs=30, seed=0)


@pytest.fixture(scope="session")
def trained_seg(small_split, seg_hyper):
    return train_supervised(small_split, 0, seg_hyper)


@pytest.fixture(scope="session")
def demonstrations(trained_seg, small_split):
    train, _ = small_split.fold_pairs(0)
    pos = build_demonstrations(trained_seg.model, train)
    neg = synthesize_negatives(pos, 0, NegativeRecipe.for_size(32))
    return pos, neg


@pytest.fixture(scope="session")
def expert(demonstrations):
    pos, neg = demonstrations
    return train_expert_reward(pos, neg, IRLHyper(seed=0))


def replace(obj, **kw):
    return dataclasses.replace(obj, **kw)


_ACCEPTANCE_LINES: list = []


@pytest.fixture
def acceptance_line():
    """Record one pass/fail line for the acceptance summary."""
    def emit(number: int, name: str, passed: bool, detail: str = "") -> bool:
        line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {name}" + (f": {detail}" if detail else "")
        _ACCEPTANCE_LINES.append((number, line))
        print(line)
        return passed
    return emit


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
