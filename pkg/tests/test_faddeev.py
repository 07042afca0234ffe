import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from msrc.faddeev import (
    G0, GreenEval, ShiftedLattice, ZetaFrame, delta_zeta_inverse, make_zeta, newton_constant,
    solver_residual, symbol, weighted_estimate_suite, zeta_ceiling, zeta_pair,
)
from msrc.fields import bump
from msrc.mesh import Grid

vec = st.lists(st.floats(-5, 5), min_size=3, max_size=3).map(np.array)


@pytest.fixture(scope="module")
def g64():
    return Grid(64, 2.0)


@pytest.fixture(scope="module")
def green(g64):
    return GreenEval(make_zeta([1.0, 0.0, 0.0], 2.0, pair=(0, 1)), g64)


def test_newton_constant_exact():
    assert G0(np.array([1.0, 0.0, 0.0])) == 1 / (4 * np.pi)
    assert newton_constant(3) == pytest.approx(1 / (4 * np.pi), rel=1e-15)
    # n = 4: 1 / (8 * pi^2 / 2) = 1 / (4 pi^2)
    assert newton_constant(4) == pytest.approx(1 / (4 * np.pi**2), rel=1e-14)


@settings(max_examples=50, deadline=None)
@given(vec, st.floats(0.1, 20), st.sampled_from([None, (0, 1), (0, 2), (1, 2)]))
def test_frame_invariants(xi, s, pair):
    fr = make_zeta(xi, s, pair=pair)
    fr.check(1e-10)
    assert abs(fr.zeta @ fr.zeta) <= 1e-10 * s**2
    assert abs(fr.zeta @ xi) <= 1e-10 * s * (1 + np.linalg.norm(xi))
    assert fr.norm == pytest.approx(np.sqrt(2) * s)
    c = fr.conjugate()
    assert np.allclose(c.zeta, np.conj(fr.zeta))


def test_pair_frame_direction():
    xi = np.array([1.0, 2.0, 0.5])
    fr = make_zeta(xi, 1.0, pair=(0, 1))
    v = xi[0] * np.eye(3)[1] - xi[1] * np.eye(3)[0]
    assert np.allclose(fr.gamma1, v / np.linalg.norm(v))


@settings(max_examples=50, deadline=None)
@given(vec, st.floats(3.0, 20))
def test_zeta_pair_sums_to_minus_xi(xi, s):
    assume(s > np.linalg.norm(xi) / 2)  # below this no real gamma_1 component exists
    f1, f2 = zeta_pair(xi, s)
    assert np.allclose(f1.zeta + f2.zeta, -xi, atol=1e-12)
    for f in (f1, f2):
        assert abs(f.zeta @ f.zeta) <= 1e-10 * s**2


def test_zeta_pair_needs_large_s():
    with pytest.raises(ValueError):
        zeta_pair([4.0, 0, 0], 1.0)


def test_ceiling():
    g = Grid(32, 2.0)
    assert zeta_ceiling(g) == pytest.approx(2 * np.sqrt(2) * (np.pi / g.h) / 4)
    with pytest.raises(ValueError):
        make_zeta([1.0, 0, 0], 16.0, grid=g)


def test_symbol_matches_definition():
    z = np.array([1.0, 1j, 0.0])
    k = np.array([0.3, -0.2, 1.1]).reshape(3, 1)
    assert symbol(z, k)[0] == pytest.approx(np.sum(k**2) + 2 * z @ k[:, 0])


def test_solver_residual_against_fd(g64):
    f = bump(g64.radius, 0.8, 6).astype(complex)
    for s in (1.0, 4.0):
        assert solver_residual(f, make_zeta([1.0, 0.0, 0.0], s, pair=(0, 1)), g64) < 1e-2


def test_solver_zero_rhs(g64):
    fr = make_zeta([1.0, 0, 0], 1.0)
    assert not np.any(delta_zeta_inverse(np.zeros(g64.shape), fr, g64))


def test_shifted_lattice_avoids_characteristic_set(g64):
    lat = ShiftedLattice(make_zeta([1.0, 0, 0], 3.0), g64)
    assert np.min(np.abs(lat.sym)) > 1e-8


def test_green_split_independent_of_sigma(green, g64):
    other = GreenEval(green.frame, g64, sigma=0.3)
    pts = np.random.default_rng(0).uniform(-1.5, 1.5, (50, 3))
    assert np.abs(other.H(pts) - green.H(pts)).max() <= 1e-5 * np.abs(green.H(pts)).max()


def test_green_harmonic_part_is_harmonic(green):
    pts = np.random.default_rng(1).uniform(-1.5, 1.5, (50, 3))
    eps = 0.05
    lap = -6 * green.H(pts)
    for j in range(3):
        e = eps * np.eye(3)[j]
        lap = lap + green.H(pts + e) + green.H(pts - e)
    lap /= eps**2
    assert np.abs(lap).max() < 1e-2 * np.abs(green.H(pts)).max()


def test_green_gradient_matches_differences(green):
    pts = np.random.default_rng(2).uniform(-1.5, 1.5, (30, 3))
    _, gH = green.H(pts, grad=True)
    fd = np.stack([(green.H(pts + 1e-4 * e) - green.H(pts - 1e-4 * e)) / 2e-4 for e in np.eye(3)], -1)
    assert np.abs(fd - gH).max() < 1e-3 * np.abs(gH).max()


def test_green_conjugation_symmetry(green, g64):
    # conj G_zeta = G_{-conj zeta}, since Delta is real
    fr = green.frame
    other = GreenEval(ZetaFrame(fr.xi, -fr.gamma1, fr.gamma2, fr.s, -np.conj(fr.zeta)), g64)
    pts = np.random.default_rng(3).uniform(-1.5, 1.5, (60, 3))
    pts = pts[np.linalg.norm(pts, axis=1) > 0.3]
    assert np.abs(other.G(pts) - np.conj(green.G(pts))).max() < 1e-5 * np.abs(green.G(pts)).max()


def test_green_reflection_symmetry(green, g64):
    fr = green.frame
    other = GreenEval(ZetaFrame(fr.xi, -fr.gamma1, -fr.gamma2, fr.s, -fr.zeta), g64)
    pts = np.random.default_rng(4).uniform(-1.5, 1.5, (40, 3))
    assert np.abs(other.G(-pts) - green.G(pts)).max() < 1e-10 * np.abs(green.G(pts)).max()


def test_estimate_ratio_decays_with_zeta(g64):
    out = weighted_estimate_suite([8.0, 16.0], g64)
    r0 = out["ratios"][0]
    assert r0[1] < r0[0]
    with pytest.raises(ValueError):
        weighted_estimate_suite([8.0], g64, delta=0.5)
