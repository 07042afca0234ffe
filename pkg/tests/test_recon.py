from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import spherical_jn

from msrc.bie import solve_ie
from msrc.faddeev import ShiftedLattice, make_zeta
from msrc.fields import PAIRS, curl, fourier, make_phantom
from msrc.forward import assemble_dn_map, reference_dn_matrix
from msrc.mesh import build_grid
from msrc.recon import (
    best_pair, check_schedule_ceiling, construct_wtilde, curl_residual, dirichlet_eigenvalues,
    divergence_free_part, eigen_guard, layer_ops, r_limit, recover_curl, richardson, scattering_transform,
    wtilde_dn_maps,
)


def _ball_indicator_hat(k):
    return 4 * np.pi * (np.sin(k) - k * np.cos(k)) / k**3


# ---------------------------------------------------------------- eigenvalue guard

def test_dirichlet_eigenvalues_unit_ball():
    ev = dirichlet_eigenvalues(1.0, 7.0)
    # first zeros of j_0 (pi), j_1 (4.4934) and j_2 (5.7635)
    assert ev[0] == pytest.approx(np.pi**2, rel=1e-10)
    assert ev[1] == pytest.approx(4.493409457909064**2, rel=1e-10)
    assert ev[2] == pytest.approx(5.763459196894550**2, rel=1e-10)
    for k2 in ev:
        # every listed value is a Bessel zero of some order
        assert min(abs(spherical_jn(l, np.sqrt(k2))) for l in range(8)) < 1e-9


def test_eigen_guard():
    assert not eigen_guard(np.pi**2, 1.0)
    assert eigen_guard(np.pi**2 + 0.1, 1.0)
    assert eigen_guard(0.0, 1.0)
    # scaling: eigenvalues of a ball of radius a are those of the unit ball over a^2
    assert not eigen_guard(np.pi**2 / 4, 2.0)


def test_transform_refuses_eigenvalue(mesh, g32):
    xi = np.array([np.pi, 0.0, 0.0])
    fr = make_zeta(xi, 2.0)
    with pytest.raises(ValueError, match="eigenvalue"):
        scattering_transform(reference_dn_matrix(mesh, 0.0), xi, fr, SimpleNamespace(mesh=mesh))


# ---------------------------------------------------------------- Richardson

@settings(max_examples=40, deadline=None)
@given(
    st.complex_numbers(max_magnitude=10, allow_nan=False, allow_infinity=False),
    st.complex_numbers(max_magnitude=10, allow_nan=False, allow_infinity=False),
    st.floats(0.5, 4.0),
)
def test_richardson_exact_on_first_order_model(R, c1, s0):
    s = s0 * np.array([1.0, 2.0, 4.0])
    got, g1, res = richardson(s, R + c1 / s)
    assert abs(got - R) <= 1e-9 * (1 + abs(R) + abs(c1))
    assert abs(g1 - c1) <= 1e-8 * (1 + abs(R) + abs(c1))
    assert res < 1e-9


def test_richardson_order_zero_is_mean():
    R, _, _ = richardson([1, 2, 3], [1.0, 2.0, 6.0], order=0)
    assert R == pytest.approx(3.0)


def test_richardson_needs_points():
    with pytest.raises(ValueError):
        richardson([1.0], [1.0], order=1)


def test_schedule_ceiling(g32):
    check_schedule_ceiling([4, 8, 12], g32)
    with pytest.raises(ValueError, match="ceiling"):
        check_schedule_ceiling([8, 16, 32], g32)


def test_best_pair():
    assert best_pair(np.array([0.0, 0.0, 1.0])) in ((0, 2), (1, 2))
    assert best_pair(np.array([1.0, 2.0, 0.0])) == (0, 1)


# ---------------------------------------------------------------- transforms

@pytest.mark.parametrize("k", [0.5, 1.0, 2.5, 4.0])
def test_free_transform_is_ball_indicator(k, mesh, g32):
    # Lambda_meas = Lambda_00: t reduces to |xi|^2 times the indicator transform of the ball
    xi = np.array([k, 0.0, 0.0]) @ np.linalg.qr(np.array([[1.0, 0.3, 0.2], [0.1, 1.0, 0.4], [0.2, 0.1, 1.0]]))[0]
    fr = make_zeta(xi, 2.0)
    smp = scattering_transform(reference_dn_matrix(mesh, 0.0), xi, fr, layer_ops(fr, mesh, g32))
    exact = k**2 * _ball_indicator_hat(k)
    assert abs(smp.value - exact) <= 0.03 * abs(exact)


def test_zero_frequency_is_admissible(mesh, g32):
    xi = np.zeros(3)
    fr = make_zeta(xi, 2.0)
    smp = scattering_transform(reference_dn_matrix(mesh, 0.0), xi, fr, layer_ops(fr, mesh, g32))
    assert abs(smp.value) < 1e-6


@pytest.mark.parametrize("idx", [(1, 0, 0), (1, 1, 0)])
@pytest.mark.parametrize("s", [1.0, 2.0])
def test_transform_matches_volume_integral(idx, s, spec, mesh, g32):
    # t = int e^{-ix.xi} [2 W.(zeta + D) w + (W.W + D.W + q) w] + |xi|^2 int_ball e^{-ix.xi} w, w = 1 + omega
    P = make_phantom("combined", g32, amplitude=0.1, q_amplitude=0.5, rho=0.5, spec=spec)
    dn = assemble_dn_map(P, mesh)
    xi = g32.dual_coords[(slice(None),) + idx]
    k = np.linalg.norm(xi)
    fr = make_zeta(xi, s, pair=best_pair(xi))
    sol = solve_ie(P, fr)
    lat = ShiftedLattice(fr, g32)
    w = 1 + sol.omega
    Dw = np.stack([lat.D(sol.omega, j) for j in range(3)])
    e = np.exp(-1j * np.tensordot(xi, g32.coords, axes=(0, 0)))
    lead = 2 * np.einsum("j...,j...->...", P.W, fr.zeta[:, None, None, None] * w + Dw)
    vol = np.sum(e * (lead + (P.Wsq + P.divW + P.q) * w)) * g32.cell_volume
    vol += k**2 * np.sum((g32.radius < 1) * e * sol.omega) * g32.cell_volume
    ops = layer_ops(fr, mesh, g32)
    be = scattering_transform(dn, xi, fr, ops).value
    free = scattering_transform(reference_dn_matrix(mesh, 0.0), xi, fr, ops).value
    # compare the potential-dependent parts; the free part is checked against the indicator above
    assert abs((be - free) - vol) <= 0.03 * abs(vol)


def test_limit_vanishes_without_magnetic_field(spec, mesh, g32):
    P = make_phantom("electric", g32, rho=0.5, spec=spec)
    dn = assemble_dn_map(P, mesh)
    qh = fourier(P.q, g32)
    for idx in [(1, 0, 0), (1, 1, 0)]:
        xi = g32.dual_coords[(slice(None),) + idx]
        out = r_limit(dn, xi, make_zeta(xi, 1.5, pair=best_pair(xi)), [1.5, 2.0, 2.5], g32, mesh)
        # s t / s -> q^(xi) while t / s -> 0
        assert abs(out["R"]) <= 0.05 * abs(qh[idx])
        assert abs(out["values"][-1] * 2.5 - qh[idx]) <= 0.02 * abs(qh[idx])


def test_limit_rejects_bad_schedule(mesh, g32, dn32):
    xi = g32.dual_coords[:, 1, 0, 0]
    with pytest.raises(ValueError):
        r_limit(dn32("zero"), xi, make_zeta(xi, 1.0), [2.0, 1.0, 3.0], g32, mesh)


@pytest.mark.xfail(reason="s^-1 t converges slowly at the scales this grid resolves", strict=False)
def test_limit_recovers_transverse_field(spec, mesh, g32):
    P = make_phantom("stream", g32, amplitude=0.1, rho=0.7, power=4, spec=spec)
    dn = assemble_dn_map(P, mesh)
    idx = (1, 0, 0)
    xi = g32.dual_coords[(slice(None),) + idx]
    fr = make_zeta(xi, 1.0, pair=best_pair(xi))
    Wh = np.stack([fourier(P.W[j], g32)[idx] for j in range(3)])
    exact = 2 * (fr.mu @ Wh)
    out = r_limit(dn, xi, fr, [1.0, 2.0, 3.0], g32, mesh)
    assert abs(out["R"] - exact) <= 0.05 * abs(exact)


# ---------------------------------------------------------------- curl recovery

@pytest.fixture(scope="module")
def g16(spec):
    return build_grid(spec, 16)


@pytest.mark.parametrize("pairs", ["best", "all"])
def test_recover_curl_free_map_is_zero(pairs, mesh, g16):
    out = recover_curl(reference_dn_matrix(mesh, 0.0), g16, mesh, [1.5, 2.0, 2.5], k_max=1.6, pairs=pairs)
    assert out.meta["holes"] == 0
    assert len(out.meta["rows"]) == 3
    for c in out.curl_hat.values():
        assert np.abs(c).max() < 1e-10


def test_recover_curl_structure(spec, mesh, g16):
    P = make_phantom("stream", build_grid(spec, 32), amplitude=0.1, rho=0.45, spec=spec)
    out = recover_curl(assemble_dn_map(P, mesh), g16, mesh, [1.5, 2.0, 2.5], k_max=1.6, pairs="best")
    K = g16.dual_coords
    inside = np.sqrt(np.sum(K**2, axis=0)) <= 1.6 + 1e-12
    n = g16.n
    mirror = np.ix_(*(3 * [(-np.arange(n)) % n]))
    for (p, q) in PAIRS:
        c = out.curl_hat[(p, q)]
        assert np.array_equal(out.curl_hat[(q, p)], -c)
        assert np.all(c[~inside] == 0)
        # zero exactly when xi_p = xi_q = 0, populated elsewhere
        seen = np.hypot(K[p], K[q]) > 0
        assert np.all(c[inside & ~seen] == 0)
        assert np.all(np.abs(c[inside & seen]) > 0)
        # real W: C(-xi) = -conj C(xi)
        assert np.allclose(c[mirror], -np.conj(c), atol=1e-14)
    assert len(out.samples) == 3 * 2 * 3


def test_recover_curl_refuses_unresolvable_schedule(mesh, g32):
    with pytest.raises(ValueError, match="ceiling"):
        recover_curl(reference_dn_matrix(mesh, 0.0), g32, mesh, [8, 16, 32])


# ---------------------------------------------------------------- W-tilde

@pytest.fixture(scope="module")
def stream_wtilde(spec, phantoms32, g32):
    P = phantoms32["stream"]
    return P, construct_wtilde(P.curlW, g32, spec)


def test_wtilde_zero_field(spec, g32):
    zero = {pq: np.zeros(g32.shape, dtype=complex) for pq in curl(np.zeros((3,) + g32.shape), g32)}
    assert not np.any(construct_wtilde(zero, g32, spec))


def test_wtilde_curl_matches(stream_wtilde, g32):
    P, Wt = stream_wtilde
    assert curl_residual(Wt, P.curlW, g32) <= 0.02


def test_wtilde_vanishes_near_boundary(stream_wtilde, g32):
    _, Wt = stream_wtilde
    assert not np.any(Wt[:, g32.radius >= 1 - g32.h])


def test_wtilde_same_dn_map(stream_wtilde, dn32, g32, mesh):
    P, Wt = stream_wtilde
    lam_t, _ = wtilde_dn_maps(Wt.real, g32, mesh)
    lam = assemble_dn_map(P.with_q(np.zeros(g32.shape)), mesh, background=0.0).matrix
    assert np.linalg.norm(lam_t - lam, 2) <= 1e-3 * np.linalg.norm(lam, 2)


@pytest.mark.xfail(reason="curl(W~ - W) carries the spectral ringing of the phantom's curl, ~3e-3", strict=False)
def test_wtilde_difference_is_curl_free(stream_wtilde, g32):
    P, Wt = stream_wtilde
    C = curl(Wt - P.W, g32)
    assert max(np.abs(C[p]).max() for p in PAIRS) <= 1e-6


def test_wtilde_rejects_divergent_axial_field(spec, g32):
    F = {pq: np.zeros(g32.shape, dtype=complex) for pq in curl(np.zeros((3,) + g32.shape), g32)}
    b = np.exp(-8 * g32.radius**2)
    F[(0, 1)], F[(1, 0)] = b, -b
    with pytest.raises(ValueError, match="divergence"):
        construct_wtilde(F, g32, spec)


def test_divergence_free_part_projects(phantoms32, g32):
    F = phantoms32["stream"].curlW
    G = divergence_free_part(F, g32)
    for p in PAIRS:
        # a genuine curl is left unchanged; a second projection changes nothing
        assert np.abs(G[p] - F[p]).max() <= 1e-10 * np.abs(F[p]).max()
    H = divergence_free_part(G, g32)
    assert max(np.abs(H[p] - G[p]).max() for p in PAIRS) <= 1e-12 * max(np.abs(G[p]).max() for p in PAIRS)
