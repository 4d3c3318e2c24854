from dataclasses import replace

import pytest

from cacseg.data import Dataset, SceneSpec, generate

TINY = SceneSpec(h=8, w=8)


def make_dataset(spec, count, sample_seed=0):
    spec = replace(spec, sample_seed=sample_seed)
    return Dataset(generate(spec, count), spec.h, spec.w, spec.n_classes)


@pytest.fixture(scope="session")
def tiny_sets():
    return make_dataset(TINY, 24), make_dataset(TINY, 8, sample_seed=1)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
