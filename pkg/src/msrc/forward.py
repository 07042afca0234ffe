"""Dirichlet solver for the magnetic Schroedinger operator and DN map assembly.

The interior operator sum_j (D_j + W_j)^2 + q is discretised with link phases
exp(i * integral of W along each grid edge), which keeps the discrete operator
covariant under W -> W + grad p.  Boundary rows use Shortley-Weller spacing to
the exact crossing of each grid line with the sphere.

DN maps are assembled from the weak form with the lifting e_g chosen as the
exact solution of the reference problem H_{0,q0} e = 0 (q0 the constant
background of q).  Integrating the gradient term by parts leaves

    <Lambda f, g> = <f, Lambda_{0,q0} g> + integral of ((H - H_ref) u_f) e_g,

whose volume integrand vanishes outside the support of (W, q - q0).
"""
from dataclasses import dataclass
import logging
import warnings

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.special import spherical_in, spherical_jn

from .fields import PotentialPair, gradient
from .mesh import degree_index, real_ylm

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    pass


def link_integrals(W, grid, rule="exact"):
    """Integral of W_j along the edge from x to x + h e_j, for every grid point.

    ``exact`` integrates the trigonometric interpolant of W_j in closed form;
    ``simpson`` uses Simpson's rule with spectrally interpolated midpoints.
    """
    h = grid.h
    k = grid.wavenumbers
    out = np.empty((3,) + grid.shape, dtype=complex)
    for j in range(3):
        shape = [1, 1, 1]
        shape[j] = grid.n
        kk = k.reshape(shape)
        Wh = np.fft.fft(W[j], axis=j)
        if rule == "exact":
            with np.errstate(invalid="ignore", divide="ignore"):
                mult = np.where(kk == 0, h, (np.exp(1j * kk * h) - 1) / (1j * np.where(kk == 0, 1, kk)))
            out[j] = np.fft.ifft(Wh * mult, axis=j)
        elif rule == "simpson":
            mid = np.fft.ifft(Wh * np.exp(0.5j * kk * h), axis=j)
            out[j] = h / 6 * (W[j] + 4 * mid + np.roll(W[j], -1, axis=j))
        else:
            raise ValueError(f"unknown link rule {rule!r}")
    return out


def radial_factor(l, r, q0, derivative=False):
    """Regular radial solution of the reference problem, normalised to 1 at r = 1.

    Degree l, background potential q0: r^l for q0 = 0, j_l(kr)/j_l(k) for
    q0 = -k^2 and i_l(kr)/i_l(k) for q0 = +k^2.
    """
    r = np.asarray(r, dtype=float)
    if q0 == 0:
        if derivative:
            return l * r ** max(l - 1, 0) if l > 0 else np.zeros_like(r)
        return r**l
    k = np.sqrt(abs(q0))
    fn = spherical_jn if q0 < 0 else spherical_in
    den = fn(l, k)
    # j_l has no zero below k = l; beyond that compare against its envelope 1/k
    if q0 < 0 and k > l and abs(den) < 1e-12 / k:
        raise SolverError(f"|xi|^2 = {-q0} is a Dirichlet eigenvalue of the ball (degree {l})")
    if derivative:
        return k * fn(l, k * r, derivative=True) / den
    return fn(l, k * r) / den


def reference_dn_eigenvalues(lmax, q0, radius=1.0):
    """Eigenvalues of Lambda_{0,q0} on degree-l harmonics for a ball."""
    # scale to the unit ball: q0 -> q0 r^2, eigenvalue / r
    return np.array([radial_factor(l, 1.0, q0 * radius**2, derivative=True) / radius
                     for l in range(lmax + 1)])


def reference_lifting(mesh, pts, q0=0.0, lmax=None):
    """Matrix mapping nodal boundary data to the reference-problem solution at pts."""
    spec = mesh.spec
    lmax = mesh.lmax if lmax is None else lmax
    d = (np.asarray(pts) - np.asarray(spec.center)) / spec.radius
    r = np.linalg.norm(d, axis=-1)
    safe = np.where(r > 0, r, 1.0)
    theta = np.arccos(np.clip(d[:, 2] / safe, -1, 1))
    phi = np.mod(np.arctan2(d[:, 1], d[:, 0]), 2 * np.pi)
    Y = real_ylm(lmax, theta, phi)
    deg = degree_index(lmax)
    radial = np.stack([radial_factor(l, r, q0 * spec.radius**2) for l in range(lmax + 1)], axis=-1)
    return (Y * radial[:, deg]) @ mesh._analysis


@dataclass(eq=False)
class DNMap:
    """DN map acting on nodal boundary vectors; paired against the mesh weights."""

    matrix: np.ndarray
    mesh: object
    potentials_tag: str
    background: float = 0.0
    fingerprint: str = ""

    def __matmul__(self, f):
        return self.matrix @ f

    def __sub__(self, other):
        if other.mesh.fingerprint() != self.mesh.fingerprint():
            raise ValueError("DN maps live on different meshes")
        return self.matrix - other.matrix


@dataclass(eq=False)
class DirichletSolution:
    u: np.ndarray
    f: np.ndarray
    residual: float
    mask: np.ndarray


class BallDirichletOperator:
    """Discrete H_{W,q} on the grid points strictly inside a ball, with boundary coupling."""

    def __init__(self, P, mesh, link_rule="exact", background=None):
        spec = mesh.spec
        if spec.shape != "ball":
            raise NotImplementedError("the forward solver supports ball domains only")
        self.P = P
        self.mesh = mesh
        self.grid = grid = P.grid
        self.link_rule = link_rule
        if background is None:
            background = estimate_background(P, spec)
        self.background = background
        c = np.asarray(spec.center)
        R = spec.radius
        rel = grid.coords - c[:, None, None, None]
        r2 = np.sum(rel**2, axis=0)
        self.inside = r2 < R**2
        self.N = int(self.inside.sum())
        index = -np.ones(grid.shape, dtype=np.int64)
        index[self.inside] = np.arange(self.N)
        self.index = index
        self.points = grid.coords[:, self.inside].T
        self._rel = rel
        self._r2 = r2
        self._R = R
        self._build_geometry()
        self.A, self.B = self._matrices(P.W, P.q)
        self._lu = None

    def _build_geometry(self):
        h = self.grid.h
        ins = self.inside
        rel_in = self._rel[:, ins]
        r2_in = self._r2[ins]
        geo = []
        crossings = []
        ncross = 0
        for j in range(3):
            per_sign = {}
            for s in (1, -1):
                nbr_inside = np.roll(ins, -s, axis=j)[ins]
                nbr_index = np.roll(self.index, -s, axis=j)[ins]
                t = np.ones(self.N)
                out = ~nbr_inside
                rj = rel_in[j, out]
                disc = rj**2 - (r2_in[out] - self._R**2)
                t_out = (-s * rj + np.sqrt(disc)) / h
                t[out] = t_out
                cross_id = -np.ones(self.N, dtype=np.int64)
                cross_id[out] = ncross + np.arange(out.sum())
                pts = self.points[out].copy()
                pts[:, j] += s * t_out * h
                crossings.append(pts)
                ncross += int(out.sum())
                per_sign[s] = (nbr_index, t, out, cross_id)
            geo.append(per_sign)
        self.geometry = geo
        self.crossings = np.concatenate(crossings)
        self.n_cross = ncross

    def _matrices(self, W, q):
        grid, h = self.grid, self.grid.h
        ins = self.inside
        I = link_integrals(W, grid, self.link_rule) if np.any(W != 0) else None
        rows, cols, vals = [], [], []
        brows, bcols, bvals = [], [], []
        diag = np.asarray(q, dtype=complex)[ins].copy()
        ar = np.arange(self.N)
        for j in range(3):
            d = {s: self.geometry[j][s][1] * h for s in (1, -1)}
            total = d[1] + d[-1]
            for s in (1, -1):
                nbr_index, t, out, cross_id = self.geometry[j][s]
                coef = 2.0 / (d[s] * total)
                if I is None:
                    phase = np.zeros(self.N, dtype=complex)
                else:
                    full = I[j][ins] if s == 1 else -np.roll(I[j], 1, axis=j)[ins]
                    # partial edge to the boundary: trapezoid with linear interpolation of W_j
                    w0 = W[j][ins]
                    w1 = np.roll(W[j], -s, axis=j)[ins]
                    part = s * t * h * (w0 + (w0 + t * (w1 - w0))) / 2
                    phase = np.where(out, part, full)
                U = np.exp(1j * phase)
                diag += coef
                inn = ~out
                rows.append(ar[inn])
                cols.append(nbr_index[inn])
                vals.append(-coef[inn] * U[inn])
                brows.append(ar[out])
                bcols.append(cross_id[out])
                bvals.append(-coef[out] * U[out])
        rows.append(ar)
        cols.append(ar)
        vals.append(diag)
        A = sp.csc_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(self.N, self.N)
        )
        B = sp.csr_matrix(
            (np.concatenate(bvals), (np.concatenate(brows), np.concatenate(bcols))),
            shape=(self.N, self.n_cross),
        )
        return A, B

    @property
    def lu(self):
        if self._lu is None:
            self._lu = spla.splu(self.A)
        return self._lu

    def boundary_values(self, f):
        """Nodal data interpolated to the grid-line crossings (spherical harmonic interpolant)."""
        return self.mesh.interpolate(f, self.crossings)

    def _cross_matrix(self):
        theta, phi = self.mesh.angles_of(self.crossings)
        return self.mesh.ylm(theta=theta, phi=phi) @ self.mesh._analysis

    def solve(self, g, tol=1e-8, method="direct"):
        """Interior values for crossing data g (vector or matrix of columns)."""
        rhs = -(self.B @ g)
        if method == "direct":
            u = self.lu.solve(np.asarray(rhs, dtype=complex))
        elif method == "gmres":
            dinv = 1.0 / self.A.diagonal()
            M = spla.LinearOperator(self.A.shape, matvec=lambda x: dinv * x, dtype=complex)
            u, info = spla.gmres(self.A, rhs, rtol=tol, restart=200, maxiter=50, M=M)
            if info != 0:
                res = np.linalg.norm(self.A @ u - rhs) / max(np.linalg.norm(rhs), 1e-300)
                raise SolverError(f"GMRES did not converge (info={info}, residual={res:.2e})")
        else:
            raise ValueError(f"unknown method {method!r}")
        return u

    def residual(self, u, g):
        rhs = -(self.B @ g)
        den = max(np.linalg.norm(rhs), np.linalg.norm(self.A @ u), 1e-300)
        return float(np.linalg.norm(self.A @ u - rhs) / den)

    def to_grid(self, u_int):
        out = np.zeros(self.grid.shape, dtype=complex)
        out[self.inside] = u_int
        return out


def estimate_background(P, spec):
    """Constant value of q near the boundary (q - q0 must vanish there)."""
    grid = P.grid
    r = np.sqrt(np.sum((grid.coords - np.asarray(spec.center)[:, None, None, None]) ** 2, axis=0))
    shell = (r > spec.radius - 2 * grid.h) & (r < spec.radius)
    vals = P.q[shell]
    q0 = complex(np.mean(vals)) if vals.size else 0.0
    if abs(q0.imag) > 1e-12 or np.max(np.abs(vals - q0), initial=0.0) > 1e-9 * max(1.0, abs(q0)):
        raise ValueError("q must be constant on a neighbourhood of the boundary")
    return float(q0.real)


_OPERATOR_CACHE = {}


def dirichlet_operator(P, mesh, link_rule="exact"):
    key = (id(P), mesh.fingerprint(), link_rule)
    op = _OPERATOR_CACHE.get(key)
    if op is None or op.P is not P:
        op = BallDirichletOperator(P, mesh, link_rule)
        _OPERATOR_CACHE.clear()
        _OPERATOR_CACHE[key] = op
    return op


def solve_dirichlet(P, f, mesh, tol=1e-8, method="direct", link_rule="exact"):
    """Solve H_{W,q} u = 0 in the ball with u = f on the boundary."""
    op = dirichlet_operator(P, mesh, link_rule)
    guard = None
    g = op.boundary_values(np.asarray(f))
    u = op.solve(g, tol=tol, method=method)
    res = op.residual(u, g)
    if res > tol:
        raise SolverError(f"Dirichlet solve residual {res:.2e} exceeds tol {tol:.1e}")
    if method == "direct":
        guard = zero_eigenvalue_guard(P, mesh, op=op)
        if guard["flag"]:
            warnings.warn(f"operator is close to singular (sigma_min ~ {guard['sigma_min']:.3e})")
    return DirichletSolution(op.to_grid(u), np.asarray(f), res, op.inside)


def assemble_dn_map(P, mesh, tol=1e-8, link_rule="exact", background=None):
    """DN map matrix of H_{W,q} in the nodal basis of ``mesh``."""
    op = BallDirichletOperator(P, mesh, link_rule, background=background)
    q0 = op.background
    grid = op.grid
    E = op._cross_matrix()
    G = E  # crossing data for each nodal basis vector
    U = op.solve(G)
    res = op.residual(U, G)
    if res > tol:
        raise SolverError(f"DN column solves reached residual {res:.2e} > {tol:.1e}")
    ref = BallDirichletOperator.__new__(BallDirichletOperator)
    ref.__dict__.update(op.__dict__)
    ref._lu = None
    zero = np.zeros((3,) + grid.shape)
    Aref, Bref = ref._matrices(zero, np.full(grid.shape, q0))
    dA = (op.A - Aref).tocsr()
    dB = (op.B - Bref).tocsr()
    rows = np.unique(np.concatenate([dA.nonzero()[0], dB.nonzero()[0]]))
    lam_ref = reference_dn_matrix(mesh, q0)
    if rows.size == 0:
        matrix = lam_ref
    else:
        lift = reference_lifting(mesh, op.points[rows], q0)
        source = dA[rows] @ U + dB[rows] @ G
        K = grid.cell_volume * (lift.T @ source)
        matrix = lam_ref + K / mesh.weights[:, None]
    return DNMap(matrix, mesh, P.tag, q0, fingerprint=mesh.fingerprint())


def reference_dn_matrix(mesh, q0=0.0):
    """Lambda_{0,q0} for the ball in the nodal basis (exact on the resolved harmonics)."""
    lam = reference_dn_eigenvalues(mesh.lmax, q0, mesh.spec.radius)
    deg = degree_index(mesh.lmax)
    Y = mesh.ylm()
    return (Y * lam[deg]) @ mesh._analysis


def normal_derivative_fd(sol, mesh, grid, depths=(2.0, 3.0)):
    """One-sided quadratic difference of u along the inward normal at every node."""
    from .mesh import trilinear

    h = grid.h
    vals = [sol.f]
    ts = [0.0]
    for d in depths:
        pts = mesh.nodes - d * h * mesh.normals
        vals.append(trilinear(sol.u, grid, pts))
        ts.append(d * h)
    t = np.asarray(ts)
    V = np.vander(t, 3, increasing=True)
    coef = np.linalg.solve(V, np.stack(vals))
    return -coef[1]


def dn_neumann_check(P, f, mesh, dn=None):
    """Relative discrepancy between Lambda f and a directly differenced normal derivative."""
    f = np.asarray(f)
    if not np.any(f):
        return 0.0
    if dn is None:
        dn = assemble_dn_map(P, mesh)
    sol = solve_dirichlet(P, f, mesh)
    direct = normal_derivative_fd(sol, mesh, P.grid)
    lam_f = dn.matrix @ f
    num = np.sqrt(np.sum(np.abs(lam_f - direct) ** 2 * mesh.weights))
    den = np.sqrt(np.sum(np.abs(lam_f) ** 2 * mesh.weights))
    return float(num / den)


def gauge_transform(P, p, spec=None):
    """(W + grad p, q); p must vanish on a neighbourhood of the boundary."""
    grid = P.grid
    p = np.asarray(p)
    if spec is not None:
        r = np.sqrt(np.sum((grid.coords - np.asarray(spec.center)[:, None, None, None]) ** 2, axis=0))
        near = r > spec.radius - 2 * grid.h
        if np.max(np.abs(p[near]), initial=0.0) > 0:
            raise ValueError("gauge function must vanish near the boundary")
    gp = gradient(p, grid)
    if np.isrealobj(p):
        gp = gp.real
    W = P.W + gp
    return PotentialPair(grid, W, P.q, curlW=P.curlW, tag=f"gauge({P.tag})", support=P.support)


def zero_eigenvalue_guard(P, mesh, threshold=0.05, op=None, iters=60):
    """Estimate the smallest singular value of the discrete interior operator.

    The estimate comes from power iteration on (A^H A)^{-1}.  It is flagged
    when it falls below ``threshold`` times the same estimate for the
    Dirichlet Laplacian on the grid.
    """
    if op is None:
        op = BallDirichletOperator(P, mesh)
    sigma = _sigma_min(op.A, op.lu, iters)
    lap = BallDirichletOperator.__new__(BallDirichletOperator)
    lap.__dict__.update(op.__dict__)
    zero = np.zeros((3,) + op.grid.shape)
    Alap, _ = lap._matrices(zero, np.zeros(op.grid.shape))
    scale = _sigma_min(Alap, spla.splu(Alap.tocsc()), iters)
    return {"sigma_min": sigma, "scale": scale, "flag": bool(sigma < threshold * scale)}


def _sigma_min(A, lu, iters):
    rng = np.random.default_rng(0)
    x = rng.standard_normal(A.shape[0]) + 0j
    x /= np.linalg.norm(x)
    est = 0.0
    for _ in range(iters):
        y = lu.solve(x)
        z = lu.solve(y, trans="H")
        nz = np.linalg.norm(z)
        if nz == 0:
            return np.inf
        est_new = np.sqrt(nz)
        x = z / nz
        if abs(est_new - est) < 1e-10 * est_new:
            est = est_new
            break
        est = est_new
    return 1.0 / est
