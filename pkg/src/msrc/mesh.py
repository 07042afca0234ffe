"""Computational grid, domain geometry and boundary quadrature."""
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.special import roots_legendre, sph_harm_y


@dataclass(frozen=True)
class DomainSpec:
    """Ball or box domain.

    ``M`` bounds the support: the closed domain sits inside B(0, M/2).
    When omitted it is set to 2.5 times the circumradius about the origin.
    """

    shape: str = "ball"
    radius: float = 1.0
    half_widths: tuple = (1.0, 1.0, 1.0)
    center: tuple = (0.0, 0.0, 0.0)
    M: float = None

    def __post_init__(self):
        if self.shape not in ("ball", "box"):
            raise ValueError(f"unsupported domain shape {self.shape!r}")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "half_widths", tuple(float(c) for c in self.half_widths))
        if self.shape == "ball" and self.radius <= 0:
            raise ValueError("ball radius must be positive")
        if self.shape == "box" and min(self.half_widths) <= 0:
            raise ValueError("box half widths must be positive")
        if self.M is None:
            object.__setattr__(self, "M", 2.5 * self.circumradius)
        if self.M / 2 <= self.circumradius:
            raise ValueError(
                f"M/2 = {self.M / 2} must exceed the circumradius {self.circumradius}"
            )

    @property
    def circumradius(self):
        """Radius of the smallest origin-centred ball containing the domain."""
        c = np.asarray(self.center)
        if self.shape == "ball":
            return float(np.linalg.norm(c) + self.radius)
        corner = np.abs(c) + np.asarray(self.half_widths)
        return float(np.linalg.norm(corner))

    @property
    def bounding_halfwidth(self):
        """Half width of the origin-centred cube containing the domain."""
        c = np.abs(np.asarray(self.center))
        if self.shape == "ball":
            return float(np.max(c) + self.radius)
        return float(np.max(c + np.asarray(self.half_widths)))

    def contains(self, pts):
        """Boolean mask of points strictly inside the domain."""
        d = np.asarray(pts, dtype=float) - np.asarray(self.center)
        if self.shape == "ball":
            return np.einsum("...i,...i->...", d, d) < self.radius**2
        return np.all(np.abs(d) < np.asarray(self.half_widths), axis=-1)


def _admissible_size(n):
    # powers of two, plus 3*2^k from 24 up so refinement steps such as 24 and 48 exist
    if n < 8:
        return False
    if n & (n - 1) == 0:
        return True
    return n % 3 == 0 and n >= 24 and (n // 3) & (n // 3 - 1) == 0


@dataclass(frozen=True)
class Grid:
    """Uniform periodic grid on the cube [-L, L)^3 with n cells per axis."""

    n: int
    L: float

    @property
    def h(self):
        return 2 * self.L / self.n

    @property
    def shape(self):
        return (self.n, self.n, self.n)

    @property
    def origin(self):
        return (-self.L,) * 3

    @property
    def cell_volume(self):
        return self.h**3

    @cached_property
    def axis(self):
        return -self.L + self.h * np.arange(self.n)

    @cached_property
    def coords(self):
        """Coordinate arrays X, Y, Z stacked along the first axis."""
        return np.stack(np.meshgrid(self.axis, self.axis, self.axis, indexing="ij"))

    @cached_property
    def radius(self):
        return np.sqrt(np.sum(self.coords**2, axis=0))

    @cached_property
    def wavenumbers(self):
        """Angular wavenumbers of the FFT ordering along one axis."""
        return 2 * np.pi * np.fft.fftfreq(self.n, self.h)

    @cached_property
    def dual_coords(self):
        k = self.wavenumbers
        return np.stack(np.meshgrid(k, k, k, indexing="ij"))

    @property
    def dual_spacing(self):
        return np.pi / self.L

    @property
    def nyquist(self):
        return np.pi / self.h

    def fingerprint(self):
        return f"grid:n={self.n}:L={self.L!r}"


def build_grid(spec, n):
    """Grid over the cube whose half width is twice the domain's bounding half width."""
    n = int(n)
    if not _admissible_size(n):
        raise ValueError(f"grid size n={n} must be >= 8 and a power of two (or 3*2^k >= 24)")
    L = 2.0 * spec.bounding_halfwidth
    grid = Grid(n, L)
    margin = (L - spec.bounding_halfwidth) / grid.h
    if margin < 2:
        raise ValueError(f"domain margin of {margin:.2f} cells is below 2")
    return grid


@dataclass(frozen=True, eq=False)
class BoundaryMesh:
    """Quadrature nodes on the boundary with outer normals and area weights."""

    spec: DomainSpec
    nodes: np.ndarray
    normals: np.ndarray
    weights: np.ndarray
    patch_map: np.ndarray
    # product-rule layout for the ball, used by the spherical harmonic transform
    n_theta: int = 0
    n_phi: int = 0
    theta: np.ndarray = field(default=None, repr=False)
    phi: np.ndarray = field(default=None, repr=False)

    @property
    def size(self):
        return len(self.weights)

    @property
    def lmax(self):
        """Largest degree resolved exactly by the product rule."""
        return min(self.n_theta - 1, (self.n_phi - 1) // 2)

    def fingerprint(self):
        s = self.spec
        return (
            f"mesh:{s.shape}:r={s.radius!r}:hw={s.half_widths}:c={s.center}:"
            f"nt={self.n_theta}:np={self.n_phi}:N={self.size}"
        )

    def ylm(self, lmax=None, theta=None, phi=None):
        """Real orthonormal spherical harmonics, columns ordered (l, m) with m = -l..l.

        Evaluated at the nodes by default, or at the given angles.
        """
        if self.spec.shape != "ball":
            raise ValueError("spherical harmonics are defined for ball meshes only")
        if lmax is None:
            lmax = self.lmax
        if theta is None:
            theta, phi = self.theta, self.phi
        return real_ylm(lmax, theta, phi)

    def angles_of(self, pts):
        d = (np.asarray(pts) - np.asarray(self.spec.center)) / self.spec.radius
        theta = np.arccos(np.clip(d[..., 2] / np.linalg.norm(d, axis=-1), -1, 1))
        phi = np.mod(np.arctan2(d[..., 1], d[..., 0]), 2 * np.pi)
        return theta, phi

    @cached_property
    def _analysis(self):
        # Y^T diag(w) / r^2 maps nodal values to coefficients exactly up to lmax
        Y = self.ylm()
        return Y.T * (self.weights / self.spec.radius**2)

    def to_coefficients(self, f):
        return self._analysis @ f

    def interpolate(self, f, pts):
        """Evaluate the band-limited spherical harmonic interpolant of f at pts."""
        theta, phi = self.angles_of(pts)
        return self.ylm(theta=theta, phi=phi) @ self.to_coefficients(f)


def degree_index(lmax):
    """Degree l of each column of a real spherical harmonic basis."""
    return np.concatenate([np.full(2 * l + 1, l) for l in range(lmax + 1)])


def real_ylm(lmax, theta, phi):
    theta = np.atleast_1d(theta)
    phi = np.atleast_1d(phi)
    cols = []
    for l in range(lmax + 1):
        for m in range(-l, l + 1):
            y = sph_harm_y(l, abs(m), theta, phi)
            if m > 0:
                cols.append(np.sqrt(2) * (-1) ** m * y.real)
            elif m < 0:
                cols.append(np.sqrt(2) * (-1) ** m * y.imag)
            else:
                cols.append(y.real)
    return np.stack(cols, axis=-1)


def build_boundary_mesh(spec, n_nodes=500):
    """Product Gauss-Legendre by uniform-azimuth rule (ball) or per-face Gauss rule (box)."""
    n_nodes = int(n_nodes)
    if n_nodes < 24:
        raise ValueError(f"n_nodes={n_nodes} is below the minimum of 24")
    c = np.asarray(spec.center)
    if spec.shape == "ball":
        nt = max(2, int(round(np.sqrt(n_nodes / 2))))
        nph = n_nodes // nt
        x, wx = roots_legendre(nt)
        theta_ring = np.arccos(x[::-1])
        w_ring = wx[::-1]
        phi_ring = 2 * np.pi * np.arange(nph) / nph
        theta = np.repeat(theta_ring, nph)
        phi = np.tile(phi_ring, nt)
        nu = np.stack(
            [np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)], axis=-1
        )
        r = spec.radius
        nodes = c + r * nu
        nu = (nodes - c) / r
        weights = np.repeat(w_ring, nph) * (2 * np.pi / nph) * r**2
        patch = np.repeat(np.arange(nt), nph)
        return BoundaryMesh(spec, nodes, nu, weights, patch, nt, nph, theta, phi)
    m = max(2, int(round(np.sqrt(n_nodes / 6))))
    t, wt = roots_legendre(m)
    hw = np.asarray(spec.half_widths)
    nodes, normals, weights, patch = [], [], [], []
    face = 0
    for axis in range(3):
        others = [a for a in range(3) if a != axis]
        a, b = others
        ua, ub = np.meshgrid(t * hw[a], t * hw[b], indexing="ij")
        wab = np.outer(wt * hw[a], wt * hw[b]).ravel()
        for sign in (-1.0, 1.0):
            p = np.zeros((m * m, 3))
            p[:, axis] = sign * hw[axis]
            p[:, a] = ua.ravel()
            p[:, b] = ub.ravel()
            nrm = np.zeros((m * m, 3))
            nrm[:, axis] = sign
            nodes.append(p + c)
            normals.append(nrm)
            weights.append(wab)
            patch.append(np.full(m * m, face))
            face += 1
    return BoundaryMesh(
        spec,
        np.concatenate(nodes),
        np.concatenate(normals),
        np.concatenate(weights),
        np.concatenate(patch),
    )


def boundary_pairing(f, g, mesh):
    """Bilinear pairing sum_i f_i g_i w_i (no conjugation)."""
    f = np.asarray(f)
    g = np.asarray(g)
    if f.shape[0] != mesh.size or g.shape[0] != mesh.size:
        raise ValueError(
            f"boundary vectors of length {f.shape[0]}, {g.shape[0]} do not match mesh size {mesh.size}"
        )
    return np.sum(f * g * mesh.weights)


def trilinear(u, grid, pts):
    """Trilinear interpolation of grid samples at arbitrary points inside the grid."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    s = (pts + grid.L) / grid.h
    if np.any(s < 0) or np.any(s > grid.n - 1):
        bad = pts[np.any((s < 0) | (s > grid.n - 1), axis=1)][0]
        raise ValueError(f"point {bad} lies outside the grid extent")
    i0 = np.minimum(np.floor(s).astype(int), grid.n - 2)
    t = s - i0
    out = 0
    for dx in (0, 1):
        wx = t[:, 0] if dx else 1 - t[:, 0]
        for dy in (0, 1):
            wy = t[:, 1] if dy else 1 - t[:, 1]
            for dz in (0, 1):
                wz = t[:, 2] if dz else 1 - t[:, 2]
                out = out + wx * wy * wz * u[i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz]
    return out


def trace(u, mesh, grid=None):
    """Boundary values of a grid field by trilinear interpolation at the mesh nodes."""
    if isinstance(u, np.ndarray):
        data = u
    else:
        data, grid = u.data, grid if grid is not None else u.grid
    return trilinear(data, grid, mesh.nodes)
