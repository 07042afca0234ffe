"""Inverse of N_mu = mu.nabla, mu = gamma_1 + i gamma_2, on compactly supported data.

In frame coordinates x = a gamma_1 + b gamma_2 + c gamma_3 the operator is
d_a + i d_b on each plane c = const, whose decaying inverse is convolution
with 1/(2 pi (a + i b)).  Each plane through the support is resampled on a
refined square grid and convolved by zero-padded FFT; the kernel sample at
the origin is set to zero (its cell average), which is second order.
"""
import numpy as np
from scipy import ndimage, signal

from .fields import D


def frame_axes(frame):
    g1 = np.asarray(frame.gamma1, dtype=float)
    g2 = np.asarray(frame.gamma2, dtype=float)
    return g1, g2, np.cross(g1, g2)


def grid_sampler(f, grid):
    """Cubic-spline sampler of grid data at arbitrary points (zero outside the grid)."""
    f = np.asarray(f)
    re = ndimage.spline_filter(f.real, order=3, mode="grid-constant")
    im = ndimage.spline_filter(f.imag, order=3, mode="grid-constant") if np.iscomplexobj(f) else None

    def sample(pts):
        s = ((np.asarray(pts) + grid.L) / grid.h).T
        out = ndimage.map_coordinates(re, s, order=3, mode="grid-constant", cval=0.0, prefilter=False)
        if im is not None:
            out = out + 1j * ndimage.map_coordinates(im, s, order=3, mode="grid-constant", cval=0.0, prefilter=False)
        return out

    return sample


def _fd4(v, ax, h):
    """Fourth-order central difference with zero padding (v vanishes near the edges)."""
    p = [(0, 0)] * v.ndim
    p[ax] = (2, 2)
    w = np.pad(v, p)
    n = v.shape[ax]

    def take(o):
        return np.take(w, np.arange(2 + o, 2 + o + n), axis=ax)

    return (-take(2) + 8 * take(1) - 8 * take(-1) + take(-2)) / (12 * h)


class CauchyPlan:
    """Precomputed planar geometry for one frame, grid and support radius."""

    def __init__(self, frame, grid, support_radius, refine=3):
        self.frame = frame
        self.grid = grid
        self.rho = float(support_radius)
        self.hr = grid.h / refine
        self.axes = frame_axes(frame)
        m = int(np.ceil(self.rho / self.hr)) + 2
        self.src = np.arange(-m, m + 1) * self.hr
        # targets must cover every grid point's in-plane coordinates
        reach = np.sqrt(3) * grid.L + 2 * self.hr
        t = int(np.ceil(reach / self.hr))
        self.tgt = np.arange(-t, t + 1) * self.hr
        self.levels = self.src.copy()
        # kernel on offsets tgt - src
        off = np.arange(-(t + m), t + m + 1) * self.hr
        A, B = np.meshgrid(off, off, indexing="ij")
        z = A + 1j * B
        with np.errstate(divide="ignore", invalid="ignore"):
            K = np.where(z != 0, 1.0 / (2 * np.pi * z), 0.0)
        self.kernel = K * self.hr**2

    def _points(self, a, b, c):
        g1, g2, g3 = self.axes
        return a[..., None] * g1 + b[..., None] * g2 + c[..., None] * g3

    def solve_planes(self, f):
        """N_mu^{-1} f on the refined frame grid: array (levels, tgt, tgt)."""
        sample = grid_sampler(f, self.grid)
        A, B, C = np.meshgrid(self.src, self.src, self.levels, indexing="ij")
        fs = sample(self._points(A, B, C).reshape(-1, 3)).reshape(A.shape)
        self.f_planes = np.moveaxis(fs, 2, 0)
        out = np.empty((len(self.levels), len(self.tgt), len(self.tgt)), dtype=complex)
        m = len(self.src)
        t0 = int(round((self.src[0] - self.tgt[0]) / self.hr))
        for i, plane in enumerate(self.f_planes):
            if not np.any(plane):
                out[i] = 0.0
                continue
            out[i] = signal.fftconvolve(self.kernel, plane, mode="valid")
            dz = _fd4(plane, 0, self.hr) - 1j * _fd4(plane, 1, self.hr)
            out[i, t0:t0 + m, t0:t0 + m] -= self.hr**2 * dz / (4 * np.pi)
        return out

    def to_points(self, planes, pts):
        """Interpolate plane solutions to points; zero when the plane misses the support."""
        pts = np.asarray(pts, dtype=float)
        g1, g2, g3 = self.axes
        a, b, c = pts @ g1, pts @ g2, pts @ g3
        h = self.hr
        ia = (a - self.tgt[0]) / h
        ib = (b - self.tgt[0]) / h
        ic = (c - self.levels[0]) / h
        coords = np.stack([ic, ia, ib])
        re = ndimage.map_coordinates(planes.real, coords, order=3, mode="constant", cval=0.0)
        im = ndimage.map_coordinates(planes.imag, coords, order=3, mode="constant", cval=0.0)
        out = re + 1j * im
        out[np.abs(c) >= self.rho + h] = 0.0
        return out

    def direct(self, pts):
        """Quadrature at arbitrary (typically far) points from the stored source planes."""
        pts = np.atleast_2d(pts)
        g1, g2, g3 = self.axes
        A, B = np.meshgrid(self.src, self.src, indexing="ij")
        w = A + 1j * B
        out = np.zeros(len(pts), dtype=complex)
        for n, p in enumerate(pts):
            z = p @ g1 + 1j * (p @ g2)
            c = p @ g3
            x = (c - self.levels[0]) / self.hr
            i0 = int(np.floor(x))
            if i0 < 0 or i0 + 1 >= len(self.levels):
                continue
            t = x - i0
            plane = (1 - t) * self.f_planes[i0] + t * self.f_planes[i0 + 1]
            d = z - w
            with np.errstate(divide="ignore", invalid="ignore"):
                k = np.where(d != 0, 1.0 / (2 * np.pi * d), 0.0)
            out[n] = np.sum(k * plane) * self.hr**2
        return out

    def residual(self, planes, margin=3):
        """Relative L2 residual of (d_a + i d_b) u - f on the source region (fourth-order FD)."""
        m = len(self.src)
        t0 = int(round((self.src[0] - self.tgt[0]) / self.hr))
        u = planes[:, t0 - margin:t0 + m + margin, t0 - margin:t0 + m + margin]
        r = _fd4(u, 1, self.hr) + 1j * _fd4(u, 2, self.hr)
        core = (slice(None), slice(margin, margin + m), slice(margin, margin + m))
        r = r[core] - self.f_planes
        return float(np.linalg.norm(r) / np.linalg.norm(self.f_planes))


def support_radius_of(f, grid, floor=0.0):
    a = np.abs(f)
    if a.ndim == 4:
        a = a.max(axis=0)
    if not np.any(a > floor):
        return grid.h
    return float(grid.radius[a > floor].max()) + grid.h


def nmu_inverse(f, frame, grid, support_radius=None, refine=3, return_plan=False):
    """Decaying solution of mu.nabla u = f, sampled on the grid."""
    f = np.asarray(f)
    if support_radius is None:
        support_radius = support_radius_of(f, grid)
    plan = CauchyPlan(frame, grid, support_radius, refine)
    planes = plan.solve_planes(f)
    u = plan.to_points(planes, grid.coords.reshape(3, -1).T).reshape(grid.shape)
    if return_plan:
        return u, plan, planes
    return u


def phi_of_W(W, frame, grid, support_radius=None, refine=3):
    """phi = N_mu^{-1}(-mu.W)."""
    mu = frame.gamma1 + 1j * frame.gamma2
    rhs = -np.tensordot(mu, np.asarray(W), axes=(0, 0))
    if not np.any(rhs):
        return np.zeros(grid.shape, dtype=complex)
    return nmu_inverse(rhs, frame, grid, support_radius, refine)


def n_mu(u, frame, grid):
    """mu.nabla u, spectrally (for compactly supported u)."""
    mu = frame.gamma1 + 1j * frame.gamma2
    return sum(mu[j] * 1j * D(u, j, grid) for j in range(3))


def eskin_ralston_check(W, frame, xi, grid, support_radius=None, refine=3):
    """Compare 2 int e^{-ix.xi} e^{i phi} mu.W with 2 int e^{-ix.xi} mu.W, for xi orthogonal to mu."""
    xi = np.asarray(xi, dtype=float)
    mu = frame.gamma1 + 1j * frame.gamma2
    if abs(np.dot(mu, xi)) > 1e-10 * max(np.linalg.norm(xi), 1.0):
        raise ValueError("xi must be orthogonal to gamma_1 and gamma_2")
    W = np.asarray(W)
    muW = np.tensordot(mu, W, axes=(0, 0))
    phi = phi_of_W(W, frame, grid, support_radius, refine)
    e = np.exp(-1j * np.tensordot(xi, grid.coords, axes=(0, 0)))
    dv = grid.cell_volume
    nonlinear = 2 * np.sum(e * np.exp(1j * phi) * muW) * dv
    linear = 2 * np.sum(e * muW) * dv
    scale = max(abs(linear), 2 * np.sum(np.abs(muW)) * dv)
    return {"nonlinear": nonlinear, "linear": linear, "gap": abs(nonlinear - linear) / scale, "phi": phi}
