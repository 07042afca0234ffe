"""Layer potentials for G_zeta, the boundary equation for CGO traces and the volume equation.

G_zeta = G0 + H_zeta.  On the ball the G0 layer potentials act diagonally on
spherical harmonics (single layer R/(2l+1), double layer -1/(2(2l+1))), which
gives a spectrally accurate treatment of the weak singularity.  The smooth
H_zeta part is integrated with the plain node rule.
"""
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lu_factor, lu_solve
from scipy.sparse.linalg import LinearOperator, gmres

from .cauchy import grid_sampler
from .faddeev import GreenEval, ShiftedLattice
from .forward import reference_dn_matrix
from .mesh import degree_index

MAX_CONDITION = 1e8


class BoundaryEquationError(RuntimeError):
    pass


class IterationError(RuntimeError):
    pass


def _require_ball(mesh):
    if mesh.spec.shape != "ball":
        raise NotImplementedError("layer operators are implemented for ball meshes")


@dataclass(eq=False)
class LayerOperators:
    frame: object
    mesh: object
    green: GreenEval
    S: np.ndarray
    B: np.ndarray

    def _local(self, pts):
        c = np.asarray(self.mesh.spec.center)
        return np.asarray(pts, dtype=float) - c

    def _g0_layers(self, pts, f, kind):
        """G0 single or double layer of density f at points off the sphere (spherical harmonics)."""
        mesh = self.mesh
        R = mesh.spec.radius
        d = self._local(pts)
        r = np.linalg.norm(d, axis=-1)
        theta, phi = mesh.angles_of(np.asarray(pts))
        L = mesh.lmax
        Y = mesh.ylm(L, theta, phi)
        coef = mesh.to_coefficients(f)
        deg = degree_index(L)
        rr = (r / R)[:, None]
        inside = (r < R)[:, None]
        l = deg[None, :]
        if kind == "single":
            val = np.where(inside, R / (2 * l + 1) * rr**l, R / (2 * l + 1) * rr ** (-l - 1))
            dval = np.where(inside, l / (2 * l + 1) * rr ** np.maximum(l - 1, 0), -(l + 1) / (2 * l + 1) * rr ** (-l - 2))
        else:
            val = np.where(inside, -(l + 1) / (2 * l + 1) * rr**l, l / (2 * l + 1) * rr ** (-l - 1))
            dval = np.where(inside, -(l + 1) * l / (2 * l + 1) * rr ** np.maximum(l - 1, 0) / R,
                            -l * (l + 1) / (2 * l + 1) * rr ** (-l - 2) / R)
        return (Y * val) @ coef, (Y * dval) @ coef

    def single_layer(self, pts, f, radial_derivative=False):
        """S_zeta f at points off the boundary (optionally with d/dr)."""
        pts = np.atleast_2d(pts)
        v0, d0 = self._g0_layers(pts, f, "single")
        y = self.mesh.nodes
        w = self.mesh.weights
        diff = pts[:, None, :] - y[None, :, :]
        if not radial_derivative:
            H = self.green.H(diff.reshape(-1, 3)).reshape(diff.shape[:2])
            return v0 + H @ (w * f)
        H, gH = self.green.H(diff.reshape(-1, 3), grad=True)
        H = H.reshape(diff.shape[:2])
        gH = gH.reshape(diff.shape)
        rhat = self._local(pts)
        rhat = rhat / np.linalg.norm(rhat, axis=-1, keepdims=True)
        dH = np.einsum("ijk,ik->ij", gH, rhat)
        return v0 + H @ (w * f), d0 + dH @ (w * f)

    def double_layer(self, pts, f):
        """D_zeta f at points off the boundary; kernel d/dnu_y G_zeta(x - y)."""
        pts = np.atleast_2d(pts)
        v0, _ = self._g0_layers(pts, f, "double")
        y = self.mesh.nodes
        diff = pts[:, None, :] - y[None, :, :]
        _, gH = self.green.H(diff.reshape(-1, 3), grad=True)
        gH = gH.reshape(diff.shape)
        kern = -np.einsum("ijk,jk->ij", gH, self.mesh.normals)
        return v0 + kern @ (self.mesh.weights * f)

    def identity_defect(self):
        """Norm of S Lambda_00 - I/2 - B in the weighted L2 sense."""
        lam = reference_dn_matrix(self.mesh, 0.0)
        P = self.mesh.ylm() @ self.mesh._analysis
        M = self.S @ lam - 0.5 * P - self.B
        return weighted_operator_norm(M, self.mesh)

    def jump_check(self, f, eps=1e-3, nodes=None):
        """Relative errors of the single-layer normal-derivative jump and both double-layer limits.

        One-sided limits are extrapolated linearly from offsets eps and 2 eps.
        """
        mesh = self.mesh
        idx = np.arange(mesh.size) if nodes is None else np.asarray(nodes)
        c = np.asarray(mesh.spec.center)
        R = mesh.spec.radius
        nh = (mesh.nodes[idx] - c) / R

        def at(t):
            return c + R * nh * t

        def limit(fun, sign):
            return 2 * fun(at(1 + sign * eps)) - fun(at(1 + 2 * sign * eps))

        dS = lambda p: self.single_layer(p, f, radial_derivative=True)[1]
        Dv = lambda p: self.double_layer(p, f)
        scale = np.abs(f).max()
        jump = limit(dS, -1) - limit(dS, +1)
        Bf = (self.B @ f)[idx]
        return {
            "single_jump": float(np.abs(jump - f[idx]).max() / scale),
            "double_plus": float(np.abs(limit(Dv, +1) - (0.5 * f[idx] + Bf)).max() / scale),
            "double_minus": float(np.abs(limit(Dv, -1) - (-0.5 * f[idx] + Bf)).max() / scale),
        }


def weighted_operator_norm(M, mesh):
    s = np.sqrt(mesh.weights)
    return float(np.linalg.norm((s[:, None] * M) / s[None, :], 2))


KERNEL_MIN_N = 64


def kernel_grid(grid):
    """Grid for the Green kernel: same box as the field grid, at least KERNEL_MIN_N cells."""
    from .mesh import Grid

    return grid if grid.n >= KERNEL_MIN_N else Grid(KERNEL_MIN_N, grid.L)


def build_layer_ops(frame, mesh, green=None, grid=None):
    """Nystrom matrices S_zeta and B_zeta on the mesh nodes."""
    _require_ball(mesh)
    if green is None:
        if grid is None:
            raise ValueError("need a GreenEval or a grid to build one")
        green = GreenEval(frame, kernel_grid(grid))
    R = mesh.spec.radius
    L = mesh.lmax
    deg = degree_index(L)
    Y = mesh.ylm()
    A = mesh._analysis
    S0 = (Y * (R / (2 * deg + 1))) @ A
    B0 = (Y * (-0.5 / (2 * deg + 1))) @ A
    x = mesh.nodes
    diff = (x[:, None, :] - x[None, :, :]).reshape(-1, 3)
    H, gH = green.H(diff, grad=True)
    N = mesh.size
    H = H.reshape(N, N)
    gH = gH.reshape(N, N, 3)
    w = mesh.weights
    S = S0 + H * w[None, :]
    B = B0 - np.einsum("ijk,jk->ij", gH, mesh.normals) * w[None, :]
    if not (np.all(np.isfinite(S)) and np.all(np.isfinite(B))):
        bad = np.argwhere(~np.isfinite(S) | ~np.isfinite(B))[0]
        raise BoundaryEquationError(f"non-finite layer kernel at node pair {tuple(bad)}")
    return LayerOperators(frame, mesh, green, S, B)


@dataclass(eq=False)
class CGOSolution:
    frame: object
    trace: np.ndarray
    provenance: str
    omega: np.ndarray = None
    grid: object = None
    info: dict = field(default_factory=dict)

    def u(self):
        if self.omega is None:
            return None
        e = np.exp(1j * np.tensordot(self.frame.zeta, self.grid.coords, axes=(0, 0)))
        return e * (1 + self.omega)


def plane_wave_trace(zeta, mesh):
    return np.exp(1j * mesh.nodes @ np.asarray(zeta))


def solve_be(dn, frame, ops, form="standard", lam00=None):
    """Boundary trace f of the CGO solution.

    form="standard": (I/2 + S Lambda - B) f = e^{i zeta.x};
    form="remark":   (I + S (Lambda - Lambda_00)) f = e^{i zeta.x}.
    """
    mesh = ops.mesh
    lam = dn.matrix if hasattr(dn, "matrix") else np.asarray(dn)
    N = mesh.size
    if form == "standard":
        # node-space modes above the resolved degree take the high-degree limit S0 Lambda_00 -> I/2
        P = mesh.ylm() @ mesh._analysis
        M = np.eye(N) - 0.5 * P + ops.S @ lam - ops.B
    elif form == "remark":
        if lam00 is None:
            lam00 = reference_dn_matrix(mesh, 0.0)
        M = np.eye(N) + ops.S @ (lam - lam00)
    else:
        raise ValueError(f"unknown form {form!r}")
    s = np.sqrt(mesh.weights)
    cond = float(np.linalg.cond((s[:, None] * M) / s[None, :]))
    if cond > MAX_CONDITION:
        raise BoundaryEquationError(
            f"boundary system condition number {cond:.2e} exceeds {MAX_CONDITION:.0e} at |zeta| = {frame.norm:.3g}"
        )
    rhs = plane_wave_trace(frame.zeta, mesh)
    f = lu_solve(lu_factor(M), rhs)
    res = float(np.linalg.norm(M @ f - rhs) / np.linalg.norm(rhs))
    return CGOSolution(frame, f, "BE", info={"condition": cond, "residual": res, "form": form})


class VolumeOperator:
    """omega -> omega + Delta_zeta^{-1}(V_zeta omega) with V_zeta u = 2W.(D + zeta)u + (W^2 + D.W + q)u."""

    def __init__(self, P, frame):
        self.P = P
        self.frame = frame
        self.grid = P.grid
        self.lat = ShiftedLattice(frame, P.grid)
        self.scalar = P.Wsq + P.divW + P.q
        self.magnetic = P.is_magnetic

    def potential(self, w):
        out = self.scalar * w
        if self.magnetic:
            for j in range(3):
                out = out + 2 * self.P.W[j] * (self.lat.D(w, j) + self.frame.zeta[j] * w)
        return out

    def rhs(self):
        """-Delta_zeta^{-1}(2 zeta.W + W^2 + D.W + q)."""
        src = self.scalar + 2 * np.tensordot(self.frame.zeta, self.P.W, axes=(0, 0))
        return -self.lat.solve(src)

    def matvec(self, w):
        w = w.reshape(self.grid.shape)
        return (w + self.lat.solve(self.potential(w))).reshape(-1)


def solve_ie(P, frame, tol=1e-8, maxiter=400, restart=60):
    """Remainder omega of u = e^{i zeta.x}(1 + omega) by GMRES on the volume equation."""
    grid = P.grid
    op = VolumeOperator(P, frame)
    b = op.rhs().reshape(-1)
    if not np.any(b):
        omega = np.zeros(grid.shape, dtype=complex)
        return CGOSolution(frame, None, "IE", omega, grid, {"iterations": 0, "residual": 0.0})
    n = b.size
    A = LinearOperator((n, n), matvec=op.matvec, dtype=complex)
    count = [0]

    def cb(_):
        count[0] += 1

    x, code = gmres(A, b, rtol=tol, atol=0.0, restart=restart, maxiter=maxiter, callback=cb,
                    callback_type="pr_norm")
    res = float(np.linalg.norm(op.matvec(x) - b) / np.linalg.norm(b))
    if code != 0 or res > 10 * tol:
        raise IterationError(f"volume iteration stalled at residual {res:.2e} (|zeta| = {frame.norm:.3g})")
    omega = x.reshape(grid.shape)
    return CGOSolution(frame, None, "IE", omega, grid, {"iterations": count[0], "residual": res})


def ie_trace(sol, mesh):
    """Trace of e^{i zeta.x}(1 + omega) at the mesh nodes (the smooth factor is interpolated)."""
    sample = grid_sampler(sol.omega, sol.grid)
    return plane_wave_trace(sol.frame.zeta, mesh) * (1 + sample(mesh.nodes))


def cross_validate(dn, P, frame, ops, form="standard"):
    """Relative discrepancy between the BE trace and the IE trace."""
    be = solve_be(dn, frame, ops, form=form)
    ie = solve_ie(P, frame)
    t_ie = ie_trace(ie, ops.mesh)
    w = ops.mesh.weights
    err = np.sqrt(np.sum(w * np.abs(be.trace - t_ie) ** 2) / np.sum(w * np.abs(be.trace) ** 2))
    return float(err), be, ie


def radiation_check(sol, green, probes, radius=None, n_theta=32, n_phi=64):
    """Sphere integral of G d_nu u - u d_nu G at probe points, compared with e^{i zeta.x}."""
    from numpy.polynomial.legendre import leggauss

    grid = sol.grid
    R = 0.9 * grid.L if radius is None else radius
    x, wx = leggauss(n_theta)
    th = np.arccos(x)
    ph = 2 * np.pi * np.arange(n_phi) / n_phi
    T, Ph = np.meshgrid(th, ph, indexing="ij")
    nrm = np.stack([np.sin(T) * np.cos(Ph), np.sin(T) * np.sin(Ph), np.cos(T)], -1).reshape(-1, 3)
    wts = (wx[:, None] * np.full(n_phi, 2 * np.pi / n_phi)[None, :]).reshape(-1) * R**2
    y = R * nrm
    zeta = sol.frame.zeta
    lat = ShiftedLattice(sol.frame, grid)
    om = sol.omega
    grads = [lat.D(om, j) * 1j for j in range(3)]
    s_om = grid_sampler(om, grid)(y)
    s_gr = np.stack([grid_sampler(g, grid)(y) for g in grads], -1)
    e = np.exp(1j * y @ zeta)
    u = e * (1 + s_om)
    du = np.einsum("ij,ij->i", e[:, None] * (1j * zeta * (1 + s_om)[:, None] + s_gr), nrm)
    out = []
    for p in np.atleast_2d(probes):
        d = p - y
        G = green.G(d)
        Hd, gH = green.H(d, grad=True)
        r = np.linalg.norm(d, axis=-1)
        gG0 = -d / (4 * np.pi * r[:, None] ** 3)
        # gradient in y of G(p - y) is minus the gradient in its argument
        dG = -np.einsum("ij,ij->i", gH + gG0, nrm)
        out.append(np.sum(wts * (G * du - u * dG)))
    out = np.array(out)
    ref = np.exp(1j * np.atleast_2d(probes) @ zeta)
    return {"value": out, "expected": ref, "rel_error": np.abs(out - ref) / np.abs(ref)}


def remainder_norm_scan(P, frames, spec=None):
    """||omega||_{L2(Omega)} for each frame."""
    grid = P.grid
    R = 1.0 if spec is None else spec.radius
    c = np.zeros(3) if spec is None else np.asarray(spec.center)
    inside = np.linalg.norm(grid.coords - c[:, None, None, None], axis=0) < R
    rows = []
    for fr in frames:
        sol = solve_ie(P, fr)
        nrm = float(np.sqrt(np.sum(np.abs(sol.omega[inside]) ** 2) * grid.cell_volume))
        rows.append({"zeta": fr.norm, "omega_norm": nrm, "iterations": sol.info["iterations"]})
    return rows
