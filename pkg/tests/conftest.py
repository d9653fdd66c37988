from __future__ import annotations

import time
from contextlib import contextmanager

import numpy as np
import pytest

from latentps.synth_trial import GenConfig, generate
from latentps.trial_data import TrialDataset


def toy_dataset(n_sections: int = 3) -> TrialDataset:
    """Five students in two blocks; the three treated ones have logs."""
    ids = ["s1", "s2", "s3", "s4", "s5"]
    blocks = ["b1", "b1", "b1", "b2", "b2"]
    schools = ["h1", "h1", "h2", "h3", "h4"]
    teachers = ["t1", "t2", "t3", "t4", "t5"]
    z = [1, 1, 0, 1, 0]
    y = [0.3, -0.4, 1.1, 0.2, -0.9]
    X = np.array([[0.5, 1.0], [-1.2, 0.0], [0.3, 1.0], [1.5, 0.0], [-0.7, 1.0]])
    secs = tuple(f"sec{k}" for k in range(n_sections))
    rs = [0, 0, 0, 1, 1, 3, 3]
    rk = [0, 1, 2, 0, 2, 1, 2]
    rm = [1, 0, 1, 1, 0, 0, 1]
    keep = [k for k in range(len(rs)) if rk[k] < n_sections]
    return TrialDataset(ids, blocks, schools, teachers, z, y, X, ("pretest", "x1"), secs,
                        [rs[k] for k in keep], [rk[k] for k in keep], [rm[k] for k in keep])


@pytest.fixture
def toy():
    return toy_dataset()


@pytest.fixture(scope="session")
def small_trial():
    cfg = GenConfig(n_blocks=3, students_per_teacher=6, n_sections=10, mean_sections=6, seed=4)
    return generate(cfg)


def rel_err(fd, g):
    return np.max(np.abs(fd - g) / np.maximum(1.0, np.abs(g)))


def central_fd(f, x, h=1e-5):
    out = np.zeros_like(x)
    for j in range(len(x)):
        e = np.zeros_like(x)
        e[j] = h
        out[j] = (f(x + e) - f(x - e)) / (2 * h)
    return out


# -- acceptance reporting ------------------------------------------------------

ACCEPTANCE: list[str] = []


@contextmanager
def criterion(number: int, title: str):
    """Record one pass/fail line; the body may set ``info["detail"]``."""
    info = {"detail": ""}
    t0 = time.perf_counter()
    ok = False
    try:
        yield info
        ok = True
    finally:
        line = (f"criterion {number} {'PASS' if ok else 'FAIL'}: {title}"
                f" [{time.perf_counter() - t0:.1f}s] {info['detail']}")
        ACCEPTANCE.append(line)
        print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
