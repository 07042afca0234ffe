"""Complex frequency frames, the Faddeev-type Green function and the solver for Delta_zeta.

Delta_zeta = Delta + 2 zeta.D has symbol |xi|^2 + 2 zeta.xi.  It is inverted by
FFT on a dual lattice shifted by half a cell along gamma_2, which keeps every
sample off the characteristic circle {|xi + s gamma_1| = s, xi.gamma_2 = 0}.
The shifted lattice makes the solution quasi-periodic:
u(x + 2L e_j) = exp(2iL delta_j) u(x), with delta the shift vector.
"""
from dataclasses import dataclass
from functools import cached_property
from math import gamma, pi

import numpy as np
from scipy import ndimage
from scipy.special import erf, erfc

from .fields import weighted_norm

# the characteristic circle reaches |xi| = sqrt(2)|zeta|; keep it inside the Nyquist ball
CEILING_FACTOR = 2 * np.sqrt(2)


class DenominatorError(ArithmeticError):
    pass


@dataclass(frozen=True, eq=False)
class ZetaFrame:
    """xi, orthonormal gamma_1, gamma_2 (both orthogonal to xi), scale s and zeta."""

    xi: np.ndarray
    gamma1: np.ndarray
    gamma2: np.ndarray
    s: float
    zeta: np.ndarray

    @property
    def mu(self):
        return self.gamma1 + 1j * self.gamma2

    @property
    def h(self):
        return np.sqrt(2) / np.linalg.norm(self.zeta)

    @property
    def norm(self):
        return float(np.linalg.norm(self.zeta))

    def conjugate(self):
        """Frame for mu-bar = gamma_1 - i gamma_2."""
        return ZetaFrame(self.xi, self.gamma1, -self.gamma2, self.s, np.conj(self.zeta))

    def scaled(self, s):
        return make_frame(self.xi, self.gamma1, self.gamma2, s)

    def check(self, tol=1e-12):
        z = self.zeta
        g1, g2 = self.gamma1, self.gamma2
        errs = {
            "null": abs(np.dot(z, z)) / max(np.dot(abs(z), abs(z)), 1e-300),
            "unit1": abs(np.linalg.norm(g1) - 1),
            "unit2": abs(np.linalg.norm(g2) - 1),
            "orth": abs(np.dot(g1, g2)),
        }
        nx = np.linalg.norm(self.xi)
        if nx > 0:
            errs["xi1"] = abs(np.dot(g1, self.xi)) / nx
            errs["xi2"] = abs(np.dot(g2, self.xi)) / nx
        bad = {k: v for k, v in errs.items() if v > tol}
        if bad:
            raise ValueError(f"zeta frame invariants violated: {bad}")
        return errs

    def key(self):
        return tuple(np.round(np.concatenate([self.zeta.real, self.zeta.imag]), 12))


def make_frame(xi, gamma1, gamma2, s):
    xi = np.asarray(xi, dtype=float)
    g1 = np.asarray(gamma1, dtype=float)
    g2 = np.asarray(gamma2, dtype=float)
    return ZetaFrame(xi, g1, g2, float(s), s * (g1 + 1j * g2))


def zeta_ceiling(grid):
    """Largest |zeta| whose characteristic circle fits inside the grid's Nyquist ball."""
    return CEILING_FACTOR * grid.nyquist / 4


def make_zeta(xi, s, pair=None, grid=None):
    """Deterministic frame with gamma_1, gamma_2 orthogonal to xi and zeta = s(gamma_1 + i gamma_2).

    ``pair`` = (j, k), zero based, requests gamma_1 along xi_j e_k - xi_k e_j.
    When ``grid`` is given, |zeta| is checked against the grid ceiling.
    """
    if s <= 0:
        raise ValueError("s must be positive")
    xi = np.asarray(xi, dtype=float)
    nx = np.linalg.norm(xi)
    e = np.eye(3)
    if nx == 0:
        g1, g2 = e[1], e[2]
    else:
        xh = xi / nx
        g1 = None
        if pair is not None:
            j, k = pair
            v = xi[j] * e[k] - xi[k] * e[j]
            if np.linalg.norm(v) > 1e-14 * nx:
                g1 = v / np.linalg.norm(v)
        if g1 is None:
            a = int(np.argmin(np.abs(xh)))
            v = e[a] - xh[a] * xh
            g1 = v / np.linalg.norm(v)
        g2 = np.cross(xh, g1)
        g2 /= np.linalg.norm(g2)
        # re-orthogonalise against rounding
        g1 = g1 - np.dot(g1, xh) * xh
        g1 /= np.linalg.norm(g1)
    frame = make_frame(xi, g1, g2, s)
    if grid is not None and frame.norm > zeta_ceiling(grid):
        raise ValueError(
            f"|zeta| = {frame.norm:.3g} exceeds the grid ceiling {zeta_ceiling(grid):.3g}"
        )
    return frame


def zeta_pair(xi, s, grid=None, base=None):
    """Frames with zeta_1 + zeta_2 = -xi, both null, and zeta_1 / s -> gamma_1 + i gamma_2.

    ``base`` supplies gamma_1, gamma_2 (default: the frame of make_zeta).
    """
    xi = np.asarray(xi, dtype=float)
    nx = np.linalg.norm(xi)
    if s <= nx / 2:
        raise ValueError(f"s = {s} must exceed |xi|/2 = {nx / 2}")
    if base is None:
        base = make_zeta(xi, s)
    g1, g2 = base.gamma1, base.gamma2
    a = s * np.sqrt(1 - nx**2 / (4 * s**2))
    z1 = -xi / 2 + a * g1 + 1j * s * g2
    z2 = -xi - z1
    f1 = ZetaFrame(xi, g1, g2, float(s), z1)
    f2 = ZetaFrame(xi, -g1, -g2, float(s), z2)
    if grid is not None:
        for f in (f1, f2):
            if f.norm > zeta_ceiling(grid):
                raise ValueError(f"|zeta| = {f.norm:.3g} exceeds the grid ceiling")
    return f1, f2


def symbol(zeta, xi_vectors):
    """|xi|^2 + 2 zeta.xi for an array of dual vectors with components first."""
    return np.sum(xi_vectors**2, axis=0) + 2 * np.tensordot(zeta, xi_vectors, axes=(0, 0))


def lattice_shift(frame, grid):
    """Half a dual cell along gamma_2 (the direction normal to the characteristic plane)."""
    g2 = frame.zeta.imag
    g2 = g2 / np.linalg.norm(g2) if np.linalg.norm(g2) > 0 else frame.gamma2
    return 0.5 * grid.dual_spacing * g2


class ShiftedLattice:
    """Quasi-periodic spectral calculus for one frame on one grid."""

    def __init__(self, frame, grid, min_denominator=1e-8):
        self.frame = frame
        self.grid = grid
        self.delta = lattice_shift(frame, grid)
        K = grid.dual_coords + self.delta[:, None, None, None]
        self.K = K
        self.sym = symbol(frame.zeta, K)
        small = np.abs(self.sym) < min_denominator
        if np.any(small):
            i = np.argwhere(small)[0]
            raise DenominatorError(
                f"symbol {abs(self.sym[tuple(i)]):.2e} at dual point {K[:, i[0], i[1], i[2]]}"
            )

    @cached_property
    def twist(self):
        return np.exp(1j * np.tensordot(self.delta, self.grid.coords, axes=(0, 0)))

    def forward(self, u):
        return np.fft.fftn(u / self.twist)

    def backward(self, uh):
        return self.twist * np.fft.ifftn(uh)

    def solve(self, f):
        return self.backward(self.forward(f) / self.sym)

    def apply(self, u):
        """Delta_zeta u, spectrally."""
        return self.backward(self.forward(u) * self.sym)

    def D(self, u, j):
        return self.backward(self.forward(u) * self.K[j])


def delta_zeta_inverse(f, frame, grid):
    """Solve Delta_zeta u = f by symbol division on the shifted dual lattice."""
    f = np.asarray(f)
    if not np.any(f):
        return np.zeros(grid.shape, dtype=complex)
    return ShiftedLattice(frame, grid).solve(f)


def fd_delta_zeta(u, frame, grid):
    """Delta_zeta u by fourth-order central differences (quasi-periodic wrap)."""
    h = grid.h
    delta = lattice_shift(frame, grid)
    out = np.zeros(grid.shape, dtype=complex)
    for j in range(3):
        ph = np.exp(2j * grid.L * delta[j])

        def sh(m):
            # u(x + m h e_j) using u(x + 2L e_j) = ph u(x)
            v = np.roll(u, -m, axis=j)
            idx = [slice(None)] * 3
            if m > 0:
                idx[j] = slice(grid.n - m, None)
                v[tuple(idx)] *= ph
            else:
                idx[j] = slice(None, -m)
                v[tuple(idx)] /= ph
            return v

        d2 = (-sh(2) + 16 * sh(1) - 30 * u + 16 * sh(-1) - sh(-2)) / (12 * h**2)
        d1 = (-sh(2) + 8 * sh(1) - 8 * sh(-1) + sh(-2)) / (12 * h)
        out += -d2 + 2 * frame.zeta[j] * (-1j) * d1
    return out


def solver_residual(f, frame, grid):
    """Relative L2 residual of the spectral solution under an independent FD Delta_zeta."""
    u = delta_zeta_inverse(f, frame, grid)
    r = fd_delta_zeta(u, frame, grid) - f
    return float(np.linalg.norm(r) / np.linalg.norm(f))


def unit_ball_volume(n):
    return pi ** (n / 2) / gamma(n / 2 + 1)


def newton_constant(n=3):
    """c_n = 1 / (n (n-2) alpha(n)), alpha(n) the volume of the unit ball."""
    return 1.0 / (n * (n - 2) * unit_ball_volume(n))


def G0(x, n=3):
    """Fundamental solution c_n |x|^(2-n) of Delta = -nabla^2."""
    r = np.linalg.norm(np.asarray(x, dtype=float), axis=-1)
    return newton_constant(n) * r ** (2 - n)


class GreenEval:
    """Faddeev-type Green function realised on a grid.

    G_zeta = G0_short + exp(i zeta.x) Q, where G0_short = erfc(|x|/sigma) G0 is
    exact and Q = Delta_zeta^{-1}(exp(-i zeta.x) rho_sigma) is a smooth grid
    field; rho_sigma is the Gaussian charge that G0_short leaves over.  The
    harmonic part is H_zeta = exp(i zeta.x) Q - erf(|x|/sigma) G0.
    """

    def __init__(self, frame, grid, sigma=None):
        self.frame = frame
        self.grid = grid
        # the erfc part is not periodised, so its images at distance ~L must be negligible
        self.sigma = max(0.2 * grid.L, 2.5 * grid.h) if sigma is None else sigma
        lat = ShiftedLattice(frame, grid)
        self.lattice = lat
        # spectrum of exp(-i zeta.x) rho_sigma is exp(-sigma^2 p(xi) / 4)
        kint = lat.K - lat.delta[:, None, None, None]
        # grid origin sits at -L in every axis
        origin = np.exp(-1j * grid.L * kint.sum(axis=0))
        qh = np.exp(-(self.sigma**2) * lat.sym / 4) / lat.sym * origin
        P = np.fft.ifftn(qh) / grid.cell_volume
        # Q = twist * P; P is periodic
        self.P = P
        self.delta = lat.delta
        dP = [np.fft.ifftn(qh * 1j * kint[j]) / grid.cell_volume for j in range(3)]
        self._coeffs = [self._filter(a) for a in [P] + dP]

    @staticmethod
    def _filter(a):
        return (
            ndimage.spline_filter(a.real, order=3, mode="grid-wrap"),
            ndimage.spline_filter(a.imag, order=3, mode="grid-wrap"),
        )

    def _interp(self, coeffs, pts):
        s = ((pts + self.grid.L) / self.grid.h).T
        re = ndimage.map_coordinates(coeffs[0], s, order=3, mode="grid-wrap", prefilter=False)
        im = ndimage.map_coordinates(coeffs[1], s, order=3, mode="grid-wrap", prefilter=False)
        return re + 1j * im

    def Q(self, pts, grad=False):
        pts = np.atleast_2d(pts)
        tw = np.exp(1j * pts @ self.delta)
        P = self._interp(self._coeffs[0], pts)
        if not grad:
            return tw * P
        dP = np.stack([self._interp(c, pts) for c in self._coeffs[1:]], axis=-1)
        return tw * P, tw[:, None] * (1j * self.delta * P[:, None] + dP)

    def G(self, pts):
        pts = np.atleast_2d(pts)
        r = np.linalg.norm(pts, axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            short = erfc(r / self.sigma) / (4 * pi * r)
        return short + np.exp(1j * pts @ self.frame.zeta) * self.Q(pts)

    def H(self, pts, grad=False):
        """Harmonic part G_zeta - G0 (smooth through x = 0), optionally with its gradient."""
        pts = np.atleast_2d(pts)
        r = np.linalg.norm(pts, axis=-1)
        sig = self.sigma
        with np.errstate(divide="ignore", invalid="ignore"):
            long = np.where(r > 1e-12, erf(r / sig) / (4 * pi * r), 1 / (2 * pi**1.5 * sig))
        e = np.exp(1j * pts @ self.frame.zeta)
        if not grad:
            return e * self.Q(pts) - long
        Q, dQ = self.Q(pts, grad=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            rs = np.where(r > 1e-12, r, 1.0)
            dlong_dr = np.where(
                r > 1e-12,
                (2 / np.sqrt(pi) * np.exp(-(r / sig) ** 2) / sig * r - erf(r / sig)) / (4 * pi * rs**2),
                0.0,
            )
        grad_long = (dlong_dr / rs)[:, None] * pts
        gH = e[:, None] * (1j * self.frame.zeta * Q[:, None] + dQ) - grad_long
        return e * Q - long, gH

    def kernel_on_grid(self):
        """g_zeta = exp(-i zeta.x) G_zeta sampled on the grid (origin set by continuity of Q)."""
        X = self.grid.coords
        pts = X.reshape(3, -1).T
        r = np.linalg.norm(pts, axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            short = np.where(r > 0, erfc(r / self.sigma) / (4 * pi * r), 0.0)
        e = np.exp(-1j * pts @ self.frame.zeta)
        Q = self.lattice.twist.reshape(-1) * self.P.reshape(-1)
        return (e * short + Q).reshape(self.grid.shape)


def green_gzeta(frame, grid, sigma=None):
    return GreenEval(frame, grid, sigma)


def characteristic_bump(frame, grid, rho=0.5, power=6):
    """Bump modulated onto the characteristic circle, which saturates the |zeta|^(s-1) rates."""
    from .fields import bump

    g3 = np.cross(frame.gamma1, frame.gamma2)
    eta = frame.s * (-frame.gamma1 + g3)
    phase = np.exp(1j * np.tensordot(eta, grid.coords, axes=(0, 0)))
    return bump(grid.radius, rho, power) * phase


def weighted_estimate_suite(zeta_norms, grid, delta=-0.5, f_list=None, direction=None):
    """Ratios ||Delta_zeta^{-1} f||_{H^s_delta} / ||f||_{L^2_{delta+1}} and fitted |zeta| exponents.

    For each |zeta| the worst ratio over ``f_list`` is kept.  Entries of
    ``f_list`` are arrays or callables frame -> array.
    """
    from .fields import bump

    if not -1 < delta < 0:
        raise ValueError("delta must lie in (-1, 0)")
    if f_list is None:
        f_list = [bump(grid.radius, 0.5), lambda fr: characteristic_bump(fr, grid)]
    if direction is None:
        direction = np.array([1.0, 0.0, 0.0])
    table = {0: [], 1: [], 2: []}
    for zn in zeta_norms:
        frame = make_zeta(direction, zn / np.sqrt(2))
        lat = ShiftedLattice(frame, grid)
        best = {0: 0.0, 1: 0.0, 2: 0.0}
        for f in f_list:
            fv = f(frame) if callable(f) else f
            u = lat.solve(fv)
            fn = weighted_norm(fv, grid, 0, delta + 1, check_range=False)
            for s in (0, 1, 2):
                best[s] = max(best[s], weighted_norm(u, grid, s, delta, shift=lat.delta) / fn)
        for s in (0, 1, 2):
            table[s].append(best[s])
    logz = np.log(np.asarray(zeta_norms, dtype=float))
    exponents = {s: float(np.polyfit(logz, np.log(table[s]), 1)[0]) for s in (0, 1, 2)}
    return {"zeta": list(zeta_norms), "ratios": table, "exponents": exponents}
