"""Grid fields, spectral calculus, Fourier transforms, weighted norms and phantoms.

Convention: D_j = -i d/dx_j, so D_j acts on Fourier modes e^{ik.x} as multiplication by k_j.
"""
from dataclasses import dataclass, field

import numpy as np

PAIRS = ((0, 1), (0, 2), (1, 2))


@dataclass(eq=False)
class GridField:
    """Scalar (shape grid.shape) or vector (shape (3,) + grid.shape) samples on a grid."""

    grid: object
    data: np.ndarray
    support_radius: float = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.shape == self.grid.shape:
            self.rank = "scalar"
        elif self.data.shape == (3,) + self.grid.shape:
            self.rank = "vector3"
        else:
            raise ValueError(f"data shape {self.data.shape} does not fit grid {self.grid.shape}")
        if self.support_radius is not None:
            check_compact_support(self.data, self.grid, self.support_radius)


def as_array(u):
    """Raw samples of a GridField or array."""
    return u.data if isinstance(u, GridField) else np.asarray(u)


def check_compact_support(data, grid, radius, rtol=1e-14):
    """Raise if samples outside B(0, radius) exceed rtol times the inside maximum."""
    outside = grid.radius >= radius
    a = np.abs(data)
    if a.ndim == 4:
        a = a.max(axis=0)
    inside_max = a[~outside].max(initial=0.0)
    outside_max = a[outside].max(initial=0.0)
    if outside_max > rtol * inside_max:
        raise ValueError(
            f"field is not supported in B(0,{radius}): outside max {outside_max:.3e}"
        )


def _spectral(data, mult, axis):
    return np.fft.ifft(np.fft.fft(data, axis=axis) * mult, axis=axis)


def _deriv_multiplier(grid, axis):
    k = grid.wavenumbers.copy()
    if grid.n % 2 == 0:
        # the Nyquist mode has no well defined odd derivative
        k[grid.n // 2] = 0.0
    shape = [1, 1, 1]
    shape[axis] = grid.n
    return k.reshape(shape)


def D(u, j, grid):
    """Spectral D_j = -i d/dx_j applied to scalar samples."""
    return _spectral(u, _deriv_multiplier(grid, j), j)


def partial(u, j, grid):
    """Spectral d/dx_j."""
    return 1j * D(u, j, grid)


def gradient(u, grid):
    return np.stack([partial(u, j, grid) for j in range(3)])


def divergence(W, grid):
    return sum(partial(W[j], j, grid) for j in range(3))


def curl(W, grid):
    """Antisymmetric components {(j,k): D_j W_k - D_k W_j} for all ordered pairs j != k."""
    W = as_array(W)
    if W.shape != (3,) + grid.shape:
        raise ValueError("curl needs a vector field")
    out = {}
    for j, k in PAIRS:
        c = D(W[k], j, grid) - D(W[j], k, grid)
        out[(j, k)] = c
        out[(k, j)] = -c
    return out


def curl_vector(W, grid):
    """Ordinary curl (d x W) as a vector field."""
    return np.stack(
        [
            partial(W[2], 1, grid) - partial(W[1], 2, grid),
            partial(W[0], 2, grid) - partial(W[2], 0, grid),
            partial(W[1], 0, grid) - partial(W[0], 1, grid),
        ]
    )


def axial_from_components(F):
    """Axial vector a with curl components F[(j,k)] = -i (d_j W_k - d_k W_j) expressed as -i (curl W)."""
    return 1j * np.stack([F[(1, 2)], -F[(0, 2)], F[(0, 1)]])


def laplacian(u, grid):
    """Spectral nabla^2 (note Delta = -nabla^2 in the operator convention)."""
    K = grid.dual_coords
    return np.fft.ifftn(-np.sum(K**2, axis=0) * np.fft.fftn(u))


def _phase(grid):
    K = grid.dual_coords
    return np.exp(1j * grid.L * (K[0] + K[1] + K[2]))


def fourier(u, grid):
    """Approximation of the integral of e^{-i x.xi} u(x) on the dual lattice (FFT order)."""
    return grid.cell_volume * _phase(grid) * np.fft.fftn(u)


def inverse_fourier(uh, grid):
    return np.fft.ifftn(uh / _phase(grid)) / grid.cell_volume


def japanese(grid):
    """<x> = (1 + |x|^2)^(1/2) on the grid."""
    return np.sqrt(1.0 + grid.radius**2)


def weighted_norm(u, grid, s=0, delta=-0.5, h=None, check_range=True, shift=None):
    """Weighted Sobolev norm sqrt(sum_{|a|<=s} ||<x>^delta (h D)^a u||^2).

    Weights are applied pointwise after spectral differentiation.  Mixed
    second derivatives are counted once per ordered pair.  ``h`` switches to
    the semiclassical scaling.  ``shift`` is the dual-lattice offset of a
    quasi-periodic u (u exp(-i shift.x) periodic).
    """
    if s not in (0, 1, 2):
        raise ValueError("Sobolev order must be 0, 1 or 2")
    if check_range and not -1 < delta < 0:
        raise ValueError(f"weight exponent {delta} is outside (-1, 0)")
    scale = 1.0 if h is None else h
    w = japanese(grid) ** delta
    dv = grid.cell_volume
    total = np.sum(np.abs(w * u) ** 2) * dv
    if s >= 1:
        K = grid.dual_coords
        if shift is not None:
            shift = np.asarray(shift, dtype=float)
            u = u * np.exp(-1j * np.tensordot(shift, grid.coords, axes=(0, 0)))
            K = K + shift[:, None, None, None]
        uh = np.fft.fftn(u)
        for j in range(3):
            dj = np.fft.ifftn(K[j] * uh)
            total += scale**2 * np.sum(np.abs(w * dj) ** 2) * dv
            if s == 2:
                for k in range(3):
                    djk = np.fft.ifftn(K[j] * K[k] * uh)
                    total += scale**4 * np.sum(np.abs(w * djk) ** 2) * dv
    return float(np.sqrt(total))


def bump(r, rho, power=6):
    """Radial polynomial bump (1 - r^2/rho^2)^power on r < rho, zero outside."""
    t = np.clip(1.0 - (r / rho) ** 2, 0.0, None)
    return t**power


@dataclass(eq=False)
class PotentialPair:
    """Magnetic potential W, electric potential q and their derived quantities."""

    grid: object
    W: np.ndarray
    q: np.ndarray
    divW: np.ndarray = None
    Wsq: np.ndarray = None
    curlW: dict = None
    tag: str = "custom"
    support: float = None
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=complex)
        self.q = np.asarray(self.q, dtype=complex)
        if self.W.shape != (3,) + self.grid.shape or self.q.shape != self.grid.shape:
            raise ValueError("W must be a vector field and q a scalar field on the grid")
        if self.divW is None:
            self.divW = sum(D(self.W[j], j, self.grid) for j in range(3))
        if self.Wsq is None:
            self.Wsq = np.sum(self.W * self.W, axis=0)
        if self.curlW is None:
            self.curlW = curl(self.W, self.grid)

    @property
    def is_magnetic(self):
        return bool(np.any(self.W != 0))

    def negated(self):
        """(-W, q)."""
        return PotentialPair(
            self.grid, -self.W, self.q, -self.divW, self.Wsq,
            {jk: -c for jk, c in self.curlW.items()}, tag=f"neg({self.tag})", support=self.support,
        )

    def with_q(self, q, tag=None):
        return PotentialPair(
            self.grid, self.W, q, self.divW, self.Wsq, self.curlW,
            tag=tag or f"{self.tag}|q", support=self.support,
        )


def make_phantom(kind, grid, amplitude=1.0, rho=0.5, center=(0.0, 0.0, 0.0),
                 q_amplitude=None, spec=None, power=6):
    """Synthetic potential pairs built from polynomial bumps.

    kind: zero, stream (W = curl(0,0,psi)), gradient (W = grad p),
    electric (q bump, W = 0), combined (stream W plus q bump).
    Derivatives are spectral, so div of the stream field and curl of the
    gradient field vanish to rounding.
    """
    c = np.asarray(center, dtype=float)
    reach = np.linalg.norm(c) + rho
    limit = spec.radius - 2 * grid.h if spec is not None and spec.shape == "ball" else grid.L / 2
    if kind != "zero" and reach >= limit:
        raise ValueError(f"phantom support radius {reach:.3f} reaches the domain margin {limit:.3f}")
    X = grid.coords - c[:, None, None, None]
    r = np.sqrt(np.sum(X**2, axis=0))
    b = bump(r, rho, power)
    zero_v = np.zeros((3,) + grid.shape, dtype=complex)
    zero_s = np.zeros(grid.shape, dtype=complex)
    if kind == "zero":
        return PotentialPair(grid, zero_v, zero_s, tag="zero", support=0.0)
    if q_amplitude is None:
        q_amplitude = amplitude
    if kind in ("stream", "combined"):
        # off-axis modulation gives curl components in every pair
        psi = amplitude * b * (1.0 + X[0] / rho) * rho
        W = np.stack([partial(psi, 1, grid), -partial(psi, 0, grid), zero_s])
        W = W + 0.5 * np.stack([zero_s, partial(psi, 2, grid), -partial(psi, 1, grid)])
        W = W.real.astype(complex)
        q = zero_s if kind == "stream" else q_amplitude * bump(r, rho, power) * (1.0 - 0.3 * X[2] / rho)
        return PotentialPair(grid, W, q, tag=kind, support=reach, extras={"psi": psi})
    if kind == "gradient":
        p = amplitude * b * (1.0 + X[1] / rho) * rho
        W = gradient(p, grid).real.astype(complex)
        return PotentialPair(grid, W, zero_s, tag="gradient", support=reach, extras={"p": p})
    if kind == "electric":
        q = q_amplitude * b * (1.0 + 0.3 * X[0] / rho)
        return PotentialPair(grid, zero_v, q.astype(complex), tag="electric", support=reach)
    raise ValueError(f"unknown phantom kind {kind!r}")
