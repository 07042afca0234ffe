import numpy as np
import pytest

from msrc.forward import assemble_dn_map
from msrc.fields import make_phantom
from msrc.mesh import DomainSpec, build_boundary_mesh, build_grid


@pytest.fixture(scope="session")
def spec():
    return DomainSpec()


@pytest.fixture(scope="session")
def mesh(spec):
    return build_boundary_mesh(spec, 500)


@pytest.fixture(scope="session")
def g32(spec):
    return build_grid(spec, 32)


@pytest.fixture(scope="session")
def g48(spec):
    return build_grid(spec, 48)


@pytest.fixture(scope="session")
def phantoms32(g32, spec):
    return {k: make_phantom(k, g32, rho=0.5, spec=spec) for k in ("zero", "stream", "combined", "gradient", "electric")}


@pytest.fixture(scope="session")
def dn32(phantoms32, mesh):
    cache = {}

    def get(kind):
        if kind not in cache:
            cache[kind] = assemble_dn_map(phantoms32[kind], mesh)
        return cache[kind]

    return get


def rel(a, b):
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / np.linalg.norm(np.asarray(b)))


ACCEPTANCE = {}


@pytest.fixture
def criterion():
    """Record one acceptance line: criterion(number, ok, detail)."""

    def record(number, ok, detail):
        ACCEPTANCE[number] = (bool(ok), detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
