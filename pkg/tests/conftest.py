import numpy as np
import pytest
from hypothesis import settings

from coisac.config import config_from_dict, paper_scene

settings.register_profile("ci", max_examples=30, deadline=None)
settings.load_profile("ci")


def scene_dict(n=36, m=64, nt=8, nr=8, stations=((0.0, 0.0), (100.0, 100.0), (50.0, 100.0)),
               target=(60.0, 40.0, 30.0, 50.0), **top):
    raw = {
        "ofdm": {"n_subcarriers": n, "n_symbols": m},
        "array": {"n_tx": nt, "n_rx": nr},
        "stations": [{"position_m": list(p)} for p in stations],
        "target": dict(zip(("x0_m", "y0_m", "vx_mps", "vy_mps"), target)),
    }
    raw.update(top)
    return raw


def make_scene(**kw):
    return config_from_dict(scene_dict(**kw))


@pytest.fixture(scope="session")
def paper():
    return paper_scene()


@pytest.fixture
def small():
    return make_scene(n=8, m=8, nt=4, nr=4)


def rel_err(a, b):
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / max(np.linalg.norm(np.asarray(b)), 1e-300))


ACCEPTANCE_LINES = []


def acceptance_line(name, passed, detail=""):
    """Print one PASS/FAIL line and keep it for the end-of-run summary."""
    line = f"{'PASS' if passed else 'FAIL'} {name}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
