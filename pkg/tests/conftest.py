import re

import numpy as np
import pytest

from p2v.model import ArchConfig


def pytest_runtest_logreport(report):
    """Print one PASS/FAIL line per acceptance criterion.

    A failed fixture (setup phase) counts as a failure of the criteria
    that depend on it, so those lines are printed too.
    """
    if "test_acceptance.py::" not in report.nodeid:
        return
    finished_call = report.when == "call"
    failed_setup = report.when == "setup" and report.outcome != "passed"
    if not (finished_call or failed_setup):
        return
    match = re.match(r"test_(\d+)_(\w+)", report.nodeid.rsplit("::", 1)[-1])
    if not match:
        return
    number, label = match.groups()
    status = "PASS" if report.outcome == "passed" else "FAIL"
    print(f"\nACCEPTANCE {number} {label.replace('_', ' ')}: {status}")


def tiny_arch(dropout=0.0):
    """Reduced widths for fast tests; same topology as the default."""
    return ArchConfig(
        trunk=(4, 4, 8, 16),
        head_hidden=(8,),
        tnet_pointwise=(4, 8),
        tnet_fc=8,
        decoder_hidden=(8, 16),
        dropout=dropout,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_cloud(rng, n, scale=1.0, centered=True):
    pts = scale * rng.normal(size=(n, 3))
    if centered:
        pts = pts - pts.mean(axis=0)
    return pts
