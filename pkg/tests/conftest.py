import json
from pathlib import Path

import numpy as np
import pytest

from pavc.augment import augment_dataset
from pavc.classifier import fit
from pavc.codec import encoder_available
from pavc.scenes import sunny_dataset, synthetic_clip

DATA = Path(__file__).parent / "data"

requires_encoder = pytest.mark.skipif(not encoder_available(), reason="no H.264 encoder installed")


@pytest.fixture(scope="session")
def clip():
    return synthetic_clip()


@pytest.fixture(scope="session")
def reference_sweep():
    return json.loads((DATA / "reference_sweep.json").read_text())


@pytest.fixture(scope="session")
def small_model():
    """Classifier fit on 96x96 scenes, the bundled clip's size."""
    ds = augment_dataset(sunny_dataset(30, 96, 1), seed=3)
    return fit([(f, int(c)) for c, rows in ds.items() for f, _ in rows])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one verdict line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
