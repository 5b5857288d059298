import time

import numpy as np
import pytest

from rttdp.data import SyntheticSpec, generate, pretrain_source


TIMINGS: dict = {}
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def vector_spec():
    return SyntheticSpec(num_classes=4, form="vector", dim=12, separation=1.5,
                         corruptions=[("gaussian-noise", 3), ("contrast", 3)], samples_per_segment=96, seed=0)


@pytest.fixture(scope="session")
def vector_source(vector_spec):
    return pretrain_source(vector_spec, "mlp", epochs=8, n_train=800, seed=0)


@pytest.fixture(scope="session")
def image_spec():
    return SyntheticSpec(num_classes=5, form="image", image_shape=(3, 8, 8), separation=1.5,
                         corruptions=[("gaussian-noise", 5)], samples_per_segment=96, seed=0)


@pytest.fixture(scope="session")
def image_source(image_spec):
    return pretrain_source(image_spec, "cnn", epochs=6, n_train=600, seed=0)


@pytest.fixture(scope="session")
def image_stream(image_spec):
    return generate(image_spec)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def reference_config():
    from rttdp.config import load_config, reference_config_path

    return load_config(reference_config_path())


@pytest.fixture(scope="session")
def reference_source(reference_config):
    """The pinned benchmark's source model, trained once per test session."""
    from rttdp.experiment import prepare_source

    t0 = time.perf_counter()
    model = prepare_source(reference_config)
    TIMINGS["reference_pretrain"] = time.perf_counter() - t0
    return model
