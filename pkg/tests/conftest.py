import numpy as np
import pytest
import scipy.sparse as sp

from dynlead.dynamics import DynamicsModel
from dynlead.forward import SphereConfig, build_sphere_geometry, compute_lead_field


def random_stable(p, seed, radius=0.8):
    """Dense asymmetric transition with spectral radius ``radius`` and a random SPD Q diagonal."""
    rng = np.random.default_rng(seed)
    f = rng.standard_normal((p, p))
    f *= radius / np.max(np.abs(np.linalg.eigvals(f)))
    q = rng.uniform(0.5, 2.0, size=p)
    return f, q


def random_model(p=5, seed=7, radius=0.8):
    f, q = random_stable(p, seed, radius)
    return DynamicsModel.from_transition(sp.csr_matrix(f), q, radius)


@pytest.fixture(scope="session")
def desk_geometry():
    cfg = SphereConfig()
    return cfg, build_sphere_geometry(cfg)


@pytest.fixture(scope="session")
def desk_lead(desk_geometry):
    cfg, geo = desk_geometry
    return compute_lead_field(geo.sources, geo.sensors, sphere_radius=cfg.sphere_radius)


@pytest.fixture(scope="session")
def desk_dyn(desk_geometry, desk_lead):
    return DynamicsModel.build(desk_geometry[1].sources, desk_lead, phi=0.95)


@pytest.fixture(scope="session")
def small_model():
    """50-source sphere model used by the unification checks."""
    cfg = SphereConfig(sensor_count=12, source_count=50, seed=3)
    geo = build_sphere_geometry(cfg)
    lead = compute_lead_field(geo.sources, geo.sensors, sphere_radius=cfg.sphere_radius)
    return geo, lead, DynamicsModel.build(geo.sources, lead, phi=0.95)


_ACCEPTANCE = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line; the lines are echoed in the terminal summary."""
    def record(number, passed, text):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {text}"
        _ACCEPTANCE.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
