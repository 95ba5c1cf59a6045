from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sceneqa import tensor as T  # noqa: E402
from sceneqa.datakit import generate_dataset, load_clouds  # noqa: E402
from sceneqa.lm import Vocabulary  # noqa: E402

ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def record(criterion: str, ok: bool, detail: str) -> None:
    """Store one acceptance outcome; printed in the terminal summary."""
    ACCEPTANCE[criterion] = (ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key} {'PASS' if ok else 'FAIL'}: {detail}")


@pytest.fixture(autouse=True)
def float64_default():
    """Every test starts in float64 with gradients enabled."""
    T.set_precision("float64")
    yield
    T.set_precision("float64")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Eight seeded synthetic scenes (6 train, 2 val) with clouds loaded."""
    root = tmp_path_factory.mktemp("ds")
    manifests = generate_dataset(root, 7, 8, val_fraction=0.25)
    for m in manifests.values():
        load_clouds(m, root)
    vocab = Vocabulary.build(x for m in manifests.values() for s in m.samples for q in s.qa
                             for x in (q.instruction, *q.refs()))
    return root, manifests, vocab
