import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from glintforge.brdf import bake_dfg_lut
from glintforge.envlight import constant_chain, prefilter, texel_directions

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def lut():
    return bake_dfg_lut(64, 4096, seed=0)


@pytest.fixture(scope="session")
def white_env():
    return constant_chain(1.0, face_size=16, levels=5)


@pytest.fixture(scope="session")
def gradient_env():
    # smooth sky-to-ground ramp, bounded away from zero so relative errors stay meaningful
    d = texel_directions(64)
    return prefilter(np.repeat(1.0 + 0.5 * d[..., 1:2], 3, axis=-1), levels=5)


@pytest.fixture(scope="session")
def bright_face_base():
    base = np.full((6, 32, 32, 3), 0.1, dtype=np.float32)
    base[0] = 5.0
    return base


@pytest.fixture(scope="session")
def bright_face_env(bright_face_base):
    return prefilter(bright_face_base, levels=5)


def sphere_doc(albedo=(1, 1, 1), roughness=0.8, metallic=0.0, **extra):
    doc = {
        "sigma": 500,
        "camera": {"position": [0, 0, 3], "look_at": [0, 0, 0], "fov_deg": 40},
        "primitives": [{"type": "sphere", "radius": 1.0,
                        "material": {"albedo": list(albedo), "roughness": roughness, "metallic": metallic}}],
    }
    doc.update(extra)
    return doc


MIRROR_WALL = {
    "sigma": 500,
    "camera": {"position": [1.2, 0.3, 3.0], "look_at": [-0.3, 0, 0], "fov_deg": 45},
    "march": {"near": 0.5, "far": 7.0, "samples": 128, "secondary_samples": 64},
    "primitives": [
        {"type": "sphere", "radius": 0.7, "material": {"albedo": [0.9, 0.9, 0.9], "roughness": 0.02, "metallic": 1.0}},
        {"type": "box", "center": [-1.4, 0, 0], "size": [0.2, 2.4, 2.4],
         "material": {"albedo": [0.8, 0.1, 0.1], "roughness": 0.8, "metallic": 0.0}},
    ],
}


# --- acceptance reporting -------------------------------------------------------

ACCEPTANCE_FILE = "test_acceptance.py"


def pytest_configure(config):
    config.acceptance_lines = []
    config.suite_results = []


def pytest_collection_modifyitems(config, items):
    # acceptance runs last so the invariant-suite criterion can see the rest of the session
    items.sort(key=lambda it: it.path.name == ACCEPTANCE_FILE)


def pytest_runtest_logreport(report):
    if ACCEPTANCE_FILE in report.nodeid:
        return
    cfg = _CONFIG.get("config")
    if cfg is not None:
        cfg.suite_results.append((report.nodeid, report.when, report.outcome, report.duration))


_CONFIG = {}


def pytest_sessionstart(session):
    _CONFIG["config"] = session.config


def pytest_terminal_summary(terminalreporter, config):
    if config.acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in config.acceptance_lines:
            terminalreporter.write_line(line)


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line per acceptance criterion."""

    def report(number, title, ok, detail):
        line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
        request.config.acceptance_lines.append(line)
        print(line)
        return ok

    return report
