import numpy as np
import pytest

from slideagg.dataset import PatchSet, SyntheticSpec, generate_synthetic

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_slides(rng, n, dim, n_classes=2, n_range=(2, 6)):
    return [PatchSet(f"s{i:03d}", i % n_classes, rng.standard_normal((int(rng.integers(*n_range)), dim)))
            for i in range(n)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset():
    """4 classes, 8 slides each, dim 8: quick to train on, easy to separate."""
    return generate_synthetic(SyntheticSpec(num_classes=4, slides_per_class=8, patches_per_slide_range=(4, 8),
                                            embedding_dim=8, seed=5))


@pytest.fixture(scope="session")
def two_class_dataset():
    return generate_synthetic(SyntheticSpec(num_classes=2, slides_per_class=10, patches_per_slide_range=(4, 8),
                                            embedding_dim=8, seed=7))
