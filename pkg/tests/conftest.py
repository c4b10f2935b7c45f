import numpy as np
import pytest

from ctaf.datamodel import D_EEG, D_PHYS, ClipWindow, ModalSequence
from ctaf.model import ModelConfig


def make_window(rng, S_e=6, S_p=6, subject="S01", p_drop=0.3, label=(3.0, 3.0), span=(0.0, 5.0), clip_id="c"):
    """Random well-formed window on equal-width bins with at least one valid token per stream."""
    def seq(S, D):
        width = (span[1] - span[0]) / S
        t = span[0] + (np.arange(S) + 0.5) * width
        m = (rng.random(S) >= p_drop).astype(float)
        m[rng.integers(S)] = 1.0
        return ModalSequence(rng.normal(size=(S, D)), t, m)

    return ClipWindow(seq(S_e, D_EEG), seq(S_p, D_PHYS), subject, label, span, clip_id)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(d_model=8, n_layers=1, n_heads=2, ff_mult=2, proj_dim=8, n_freqs=2)


# acceptance outcomes, keyed by criterion number, echoed after the run
ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
