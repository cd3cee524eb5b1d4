import sys
from pathlib import Path

import numpy as np
import pytest

from eggscan.synth import SynthSpec, generate_image

TESTS_DIR = Path(__file__).resolve().parent
ECHO_BACKEND = TESTS_DIR / "echo_backend.py"

# lines recorded by the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES = []


def echo_command(*flags):
    """Command line (for ``cmd:`` backends) running the echo test double."""
    return " ".join([sys.executable, str(ECHO_BACKEND), *flags])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_corpus():
    """Eight synthetic frames, two per egg class, as ``(rgb, annotations)`` pairs."""
    spec = SynthSpec(seed=5)
    classes = ["AL", "HD", "FB", "Tn"] * 2
    return [generate_image(spec, [5, i], c) for i, c in enumerate(classes)]


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
