import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from vqff.feature_io import FeatureMap, SyntheticSceneSpec, generate_synthetic_scene, unit_rows

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def random_unit(rng, shape):
    """Unit float32 vectors along the last axis."""
    flat = rng.standard_normal((int(np.prod(shape[:-1])), shape[-1]))
    return unit_rows(flat)[0].reshape(shape)


def random_map(seed, h, w, d):
    return FeatureMap(random_unit(np.random.default_rng(seed), (h, w, d)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_scene():
    return generate_synthetic_scene(
        SyntheticSceneSpec(num_images=4, num_scales=2, height=48, width=48, dim=16, num_regions=4, noise_sigma=0.05, seed=7)
    )


@pytest.fixture(scope="session")
def clean_scene():
    return generate_synthetic_scene(
        SyntheticSceneSpec(num_images=4, num_scales=2, height=64, width=64, dim=16, num_regions=4, noise_sigma=0.0, seed=3)
    )


# One PASS/FAIL line per acceptance criterion, printed after the run.
_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call":
        return
    number, title = marker.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    _CRITERIA[number] = (title, call.excinfo is None, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[number]
        line = f"{'PASS' if ok else 'FAIL'} criterion {number:2d}: {title}"
        terminalreporter.write_line(line + (f" | {detail}" if detail else ""))
