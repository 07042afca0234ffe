"""Blind reconstruction of curl W and q from a DN map.

Only the DN map, the domain geometry and simulator-computable reference maps
enter these functions; the phantom is never a parameter.  Real potentials are
assumed, so lattice values at -xi follow from those at xi.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
import hashlib
import os

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.optimize import brentq
from scipy.special import spherical_jn

from .bie import LayerOperators, build_layer_ops, kernel_grid, plane_wave_trace, solve_be
from .cauchy import grid_sampler
from .faddeev import GreenEval, make_zeta, zeta_pair
from .fields import axial_from_components, curl, inverse_fourier, PAIRS
from .forward import assemble_dn_map, reference_dn_matrix
from .mesh import boundary_pairing

EIG_WINDOW = 1e-3


# ---------------------------------------------------------------- eigenvalue guard

@lru_cache(maxsize=None)
def _bessel_zeros(l, kmax):
    """Positive zeros of j_l below kmax (bracketed on a fine scan)."""
    x = np.linspace(1e-6, kmax, max(200, int(40 * kmax)))
    y = spherical_jn(l, x)
    roots = []
    for i in np.nonzero(np.sign(y[:-1]) * np.sign(y[1:]) < 0)[0]:
        roots.append(brentq(lambda t: spherical_jn(l, t), x[i], x[i + 1]))
    return tuple(roots)


def dirichlet_eigenvalues(radius, kmax):
    """Dirichlet eigenvalues (j_{l,m}/R)^2 of Delta on the ball below kmax^2."""
    vals = []
    l = 0
    while True:
        z = _bessel_zeros(l, float(kmax * radius) + 1.0)
        z = [t for t in z if t <= kmax * radius]
        if not z:
            break
        vals.extend((t / radius) ** 2 for t in z)
        l += 1
    return np.sort(np.array(vals))


def eigen_guard(k2, radius, window=EIG_WINDOW):
    """True when |xi|^2 = k2 is at least a relative ``window`` away from every Dirichlet eigenvalue."""
    if k2 == 0:
        return True
    ev = dirichlet_eigenvalues(radius, np.sqrt(k2) * (1 + 2 * window) + 1e-9)
    return not np.any(np.abs(ev - k2) <= window * k2)


# ---------------------------------------------------------------- layer operator cache

CACHE_ENV = "MSRC_CACHE_DIR"


def layer_ops(frame, mesh, grid):
    """Layer operators for ``frame``, reused from $MSRC_CACHE_DIR when set."""
    kg = kernel_grid(grid)
    root = os.environ.get(CACHE_ENV)
    if not root:
        return build_layer_ops(frame, mesh, green=GreenEval(frame, kg))
    key = hashlib.sha256(
        np.ascontiguousarray(frame.zeta).tobytes() + np.ascontiguousarray(frame.xi).tobytes()
        + mesh.fingerprint().encode() + kg.fingerprint().encode()
    ).hexdigest()[:24]
    path = os.path.join(root, f"layer_{key}.npz")
    if os.path.exists(path):
        with np.load(path) as d:
            return LayerOperators(frame, mesh, None, d["S"], d["B"])
    ops = build_layer_ops(frame, mesh, green=GreenEval(frame, kg))
    os.makedirs(root, exist_ok=True)
    tmp = path + f".{os.getpid()}.tmp.npz"
    np.savez(tmp, S=ops.S, B=ops.B)
    os.replace(tmp, path)
    return ops


# ---------------------------------------------------------------- samples

@dataclass
class ScatterSample:
    xi: np.ndarray
    s: float
    frame_id: str
    value: complex
    kind: str
    residual: float = 0.0

    def record(self):
        x = self.xi
        return (f"{x[0]:.17g},{x[1]:.17g},{x[2]:.17g},{self.s:.17g},{self.frame_id},"
                f"{self.value.real:.17g},{self.value.imag:.17g},{self.kind},{self.residual:.17g}")


SAMPLE_HEADER = "xi1,xi2,xi3,s,frame,re,im,kind,residual"


@dataclass(eq=False)
class FieldReconstruction:
    grid: object
    curl_hat: dict = None
    curlW: dict = None
    q_hat: np.ndarray = None
    q: np.ndarray = None
    samples: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)


def _frame_id(frame):
    z = frame.zeta
    return "z[" + ";".join(f"{c.real:.6g}{c.imag:+.6g}i" for c in z) + "]"


def scattering_transform(dn_meas, xi, frame, ops, lam_ref=None, kind="t_magnetic"):
    """t(xi, zeta) = <(Lambda_meas - Lambda_{0,-|xi|^2}) f_BE, e^{-ix.(xi+zeta)}>."""
    xi = np.asarray(xi, dtype=float)
    mesh = ops.mesh
    k2 = float(xi @ xi)
    if not eigen_guard(k2, mesh.spec.radius):
        raise ValueError(f"|xi|^2 = {k2:.6g} is within the Dirichlet eigenvalue window")
    if lam_ref is None:
        lam_ref = reference_dn_matrix(mesh, -k2)
    lam = dn_meas.matrix if hasattr(dn_meas, "matrix") else np.asarray(dn_meas)
    be = solve_be(lam, frame, ops)
    g = plane_wave_trace(-(xi + frame.zeta), mesh)
    value = boundary_pairing((lam - lam_ref) @ be.trace, g, mesh)
    return ScatterSample(xi, frame.s, _frame_id(frame), complex(value), kind, be.info["residual"])


def richardson(s_values, values, order=1):
    """Fit values = R + c1/s (+ c2/s^2 ...) by least squares; returns R, c1 and the fit residual."""
    s = np.asarray(s_values, dtype=float)
    v = np.asarray(values, dtype=complex)
    if order + 1 > len(s):
        raise ValueError(f"order {order} needs at least {order + 1} points")
    A = np.stack([s ** (-p) for p in range(order + 1)], axis=1)
    coef, *_ = np.linalg.lstsq(A, v, rcond=None)
    res = float(np.linalg.norm(A @ coef - v) / max(np.linalg.norm(v), 1e-300))
    return complex(coef[0]), complex(coef[1]) if order >= 1 else 0j, res


def _check_schedule(s_schedule):
    s = list(s_schedule)
    if len(s) < 3 or any(b <= a for a, b in zip(s, s[1:])):
        raise ValueError("s_schedule must be increasing with at least 3 points")
    return s


def pair_transform(dn_meas, xi, s, frame, grid, mesh, lam00=None):
    """<(Lambda_meas - Lambda_{0,0}) f_{zeta_1}, e^{i zeta_2.x}> with zeta_1 + zeta_2 = -xi.

    Same limit of s^{-1}(.) as t(xi, s mu), since zeta_1 / s -> mu, but the
    reference map carries no |xi|^2 term, so the correction is O(1/s) at first order.
    """
    f1, f2 = zeta_pair(xi, s, grid=grid, base=frame)
    if lam00 is None:
        lam00 = reference_dn_matrix(mesh, 0.0)
    ops = layer_ops(f1, mesh, grid)
    lam = dn_meas.matrix if hasattr(dn_meas, "matrix") else np.asarray(dn_meas)
    be = solve_be(lam, f1, ops)
    value = boundary_pairing((lam - lam00) @ be.trace, plane_wave_trace(f2.zeta, mesh), mesh)
    return ScatterSample(np.asarray(xi, float), float(s), _frame_id(f1), complex(value), "t_pair",
                         be.info["residual"])


def r_limit(dn_meas, xi, frame, s_schedule, grid, mesh, lam_ref=None, method="pair", order=1):
    """Extrapolate s^{-1} t(xi, s mu) to s -> infinity along the frame's direction.

    method="pair" uses pair_transform; method="direct" uses scattering_transform
    with the free-map transform (same boundary solver) subtracted, which removes
    the bounded |xi|^2 chi-hat term without changing the limit.
    """
    s_list = _check_schedule(s_schedule)
    xi = np.asarray(xi, dtype=float)
    lam00 = reference_dn_matrix(mesh, 0.0)
    vals, samples = [], []
    for s in s_list:
        fr = make_zeta_like(frame, s, grid)
        if method == "pair":
            smp = pair_transform(dn_meas, xi, s, fr, grid, mesh, lam00)
            v = smp.value
        elif method == "direct":
            if lam_ref is None:
                lam_ref = reference_dn_matrix(mesh, -float(xi @ xi))
            ops = layer_ops(fr, mesh, grid)
            smp = scattering_transform(dn_meas, xi, fr, ops, lam_ref)
            v = smp.value - scattering_transform(lam00, xi, fr, ops, lam_ref).value
        else:
            raise ValueError(f"unknown method {method!r}")
        samples.append(smp)
        vals.append(v / s)
    R, c1, res = richardson(s_list, vals, order)
    diffs = np.abs(np.asarray(vals) - R)
    monotone = bool(np.all(np.diff(diffs) <= 1e-12 + 1e-9 * np.abs(R)))
    return {"R": R, "c1": c1, "residual": res, "monotone": monotone, "samples": samples, "values": vals}


def make_zeta_like(frame, s, grid=None):
    fr = frame.scaled(s)
    if grid is not None:
        from .faddeev import zeta_ceiling

        if fr.norm > zeta_ceiling(grid):
            raise ValueError(f"|zeta| = {fr.norm:.3g} exceeds the grid ceiling {zeta_ceiling(grid):.3g}")
    return fr


# ---------------------------------------------------------------- lattice helpers

def _lattice(grid, k_max, radius=None):
    """FFT-ordered dual lattice, the |xi| <= k_max mask, the canonical half space and the guard."""
    K = grid.dual_coords
    kk = np.sqrt(np.sum(K**2, axis=0))
    inside = kk <= k_max + 1e-12
    tol = 1e-12 * grid.dual_spacing
    pos = [K[j] > tol for j in range(3)]
    zero = [np.abs(K[j]) <= tol for j in range(3)]
    canon = pos[0] | (zero[0] & (pos[1] | (zero[1] & pos[2])))
    guard = np.ones(grid.shape, dtype=bool)
    if radius is not None:
        for idx in np.argwhere(inside):
            guard[tuple(idx)] = eigen_guard(kk[tuple(idx)] ** 2, radius)
    return K, inside, canon, guard


def _mirror_index(grid):
    n = grid.n
    idx = (-np.arange(n)) % n
    return np.ix_(idx, idx, idx)


def _fill_holes(values, holes, valid):
    """Fill guarded holes by the mean of valid lattice neighbours (one sweep per call)."""
    out = values.copy()
    todo = np.argwhere(holes)
    n = values.shape[-1]
    for (i, j, k) in todo:
        acc, cnt = 0.0, 0
        for d in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
            a, b, c = (i + d[0]) % n, (j + d[1]) % n, (k + d[2]) % n
            if valid[a, b, c]:
                acc = acc + values[..., a, b, c]
                cnt += 1
        if cnt:
            out[..., i, j, k] = acc / cnt
    return out


def _with_context(exc, xi):
    try:
        return type(exc)(f"at xi = {np.round(xi, 6).tolist()}: {exc}")
    except Exception:
        return exc


def _run(task, items, workers):
    """Ordered map, threaded when workers > 1; results are written to disjoint slots."""
    if workers is None or workers <= 1:
        return map(task, items)
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(task, items))


def best_pair(xi):
    """Pair (j, k) maximising |xi_j e_k - xi_k e_j|."""
    return max(PAIRS, key=lambda p: np.hypot(xi[p[0]], xi[p[1]]))


# ---------------------------------------------------------------- curl W

def transverse_hat(dn_meas, xi, s_schedule, grid, mesh, order=1):
    """(gamma_1.W)^ and (gamma_2.W)^ at xi from R(xi, mu) and R(xi, mu-bar), best-pair frame."""
    frame = make_zeta(xi, s_schedule[0], pair=best_pair(xi))
    a = r_limit(dn_meas, xi, frame, s_schedule, grid, mesh, order=order)
    b = r_limit(dn_meas, xi, frame.conjugate(), s_schedule, grid, mesh, order=order)
    # R(mu) = 2 (g1.W)^ + 2i (g2.W)^,  R(mu-bar) = 2 (g1.W)^ - 2i (g2.W)^
    w1 = (a["R"] + b["R"]) / 4
    w2 = (a["R"] - b["R"]) / (4j)
    return frame, w1, w2, a, b


def check_schedule_ceiling(s_schedule, grid, xi_max=0.0):
    """Refuse a schedule whose largest |zeta| exceeds the grid ceiling."""
    from .faddeev import zeta_ceiling

    zmax = np.sqrt(2.0) * max(s_schedule)
    if zmax > zeta_ceiling(grid):
        raise ValueError(
            f"s = {max(s_schedule):g} gives |zeta| = {zmax:.3g} above the grid ceiling {zeta_ceiling(grid):.3g}"
        )


def recover_curl(dn_meas, grid, mesh, s_schedule, k_max=None, pairs="all", order=1, workers=1, log=None):
    """Curl components (D_j W_k - D_k W_j) on ``grid`` from the DN map.

    pairs="all": one conjugate frame pair per (j, k) with gamma_1 along
    xi_j e_k - xi_k e_j, giving that component as n_jk (R(mu) + R(mu-bar)) / 4.
    pairs="best": a single conjugate pair per xi; both transverse parts of W^
    follow from it and every component is assembled from them (a third of the cost).
    """
    s_schedule = _check_schedule(s_schedule)
    if pairs not in ("all", "best"):
        raise ValueError(f"unknown pairs mode {pairs!r}")
    check_schedule_ceiling(s_schedule, grid)
    if k_max is None:
        k_max = grid.nyquist / 2
    R = mesh.spec.radius
    K, inside, canon, guard = _lattice(grid, k_max, R)
    C = {p: np.zeros(grid.shape, dtype=complex) for p in PAIRS}
    done = np.zeros(grid.shape, dtype=bool)
    done[0, 0, 0] = True  # the transform of a derivative of a compact field vanishes at 0
    samples, rows = [], []
    todo = [tuple(t) for t in np.argwhere(inside & canon & guard)]

    def task(idx):
        xi = K[(slice(None),) + idx]
        vals = {}
        try:
            if pairs == "best":
                frame, w1, w2, a, b = transverse_hat(dn_meas, xi, s_schedule, grid, mesh, order)
                What = w1 * frame.gamma1 + w2 * frame.gamma2
                for (p, q) in PAIRS:
                    vals[(p, q)] = xi[p] * What[q] - xi[q] * What[p]
                fits = [a, b]
            else:
                fits = []
                for (p, q) in PAIRS:
                    n_pq = np.hypot(xi[p], xi[q])
                    if n_pq < 1e-12:
                        continue  # xi_p = xi_q = 0: the component vanishes identically
                    frame = make_zeta(xi, s_schedule[0], pair=(p, q))
                    a = r_limit(dn_meas, xi, frame, s_schedule, grid, mesh, order=order)
                    b = r_limit(dn_meas, xi, frame.conjugate(), s_schedule, grid, mesh, order=order)
                    vals[(p, q)] = n_pq * (a["R"] + b["R"]) / 4
                    fits += [a, b]
        except Exception as exc:
            raise _with_context(exc, xi) from exc
        return xi, vals, fits

    for idx, (xi, vals, fits) in zip(todo, _run(task, todo, workers)):
        for pq, v in vals.items():
            C[pq][idx] = v
        done[idx] = True
        for f in fits:
            samples += f["samples"]
        rows.append({"xi": xi.tolist(), "residual": max(f["residual"] for f in fits),
                     "monotone": all(f["monotone"] for f in fits)})
        if log is not None:
            log(f"xi={np.round(xi, 4).tolist()} residual={rows[-1]['residual']:.2e}")
    mirror = _mirror_index(grid)
    for p in PAIRS:
        c = C[p]
        # C(-xi) = -conj C(xi) for real W
        mirrored = -np.conj(c[mirror])
        fill = (~done) & done[mirror]
        c[fill] = mirrored[fill]
    valid = done | done[mirror]
    holes = inside & ~valid
    stacked = np.stack([C[p] for p in PAIRS])
    stacked = _fill_holes(stacked, holes, valid)
    curl_hat = {}
    curlW = {}
    for n_, (p, q) in enumerate(PAIRS):
        curl_hat[(p, q)] = stacked[n_]
        curl_hat[(q, p)] = -stacked[n_]
        field_ = inverse_fourier(stacked[n_], grid)
        curlW[(p, q)] = field_
        curlW[(q, p)] = -field_
    return FieldReconstruction(grid, curl_hat=curl_hat, curlW=curlW, samples=samples,
                               meta={"s_schedule": list(s_schedule), "k_max": float(k_max), "rows": rows,
                                     "holes": int(holes.sum()), "pairs": pairs})


# ---------------------------------------------------------------- W-tilde

def construct_wtilde(F, grid, spec, support_radius=None, div_tol=1e-6, support_tol=1e-2):
    """Vector field with curl components F that vanishes on a neighbourhood of the boundary.

    W0 = curl A with A the (periodic) Newtonian potential of the axial field of F;
    on the shell outside supp F, W0 = grad p1 with p1 = 0 on the boundary, found by
    radial integration; W = (1 - chi) W0 - p1 grad chi, chi = 1 near the boundary.
    """
    Bax = axial_from_components(F)  # ordinary curl, real for real W
    K = grid.dual_coords.copy()
    if grid.n % 2 == 0:
        # match the spectral derivative, which drops the Nyquist mode
        K[np.abs(np.abs(K) - grid.nyquist) < 1e-9 * grid.nyquist] = 0.0
    k2 = np.sum(K**2, axis=0)
    Bh = np.stack([np.fft.fftn(b) for b in Bax])
    div = np.abs(np.sum(1j * K * Bh, axis=0))
    scale = np.sqrt(k2) * np.sqrt(np.sum(np.abs(Bh) ** 2, axis=0))
    if np.max(scale) > 0 and np.max(div) > div_tol * np.max(scale) + 1e-300:
        raise ValueError(f"curl components are not divergence free (ratio {np.max(div) / np.max(scale):.2e})")
    if not np.any(Bh):
        return np.zeros((3,) + grid.shape, dtype=complex)
    with np.errstate(divide="ignore", invalid="ignore"):
        Ah = np.where(k2 > 0, Bh / k2, 0.0)
    # W0 = curl A
    cA = np.stack([
        1j * K[1] * Ah[2] - 1j * K[2] * Ah[1],
        1j * K[2] * Ah[0] - 1j * K[0] * Ah[2],
        1j * K[0] * Ah[1] - 1j * K[1] * Ah[0],
    ])
    W0 = np.stack([np.fft.ifftn(c) for c in cA])
    R = spec.radius
    c = np.asarray(spec.center, dtype=float)
    X = grid.coords - c[:, None, None, None]
    r = np.sqrt(np.sum(X**2, axis=0))
    if support_radius is None:
        a = np.sqrt(np.sum(np.abs(Bax) ** 2, axis=0))
        support_radius = float(r[a > support_tol * a.max()].max()) + grid.h
    r1 = support_radius
    r2 = R - grid.h
    if r2 - r1 < 1.5 * grid.h:
        raise ValueError(f"shell [{r1:.3g}, {r2:.3g}] is too thin for the cutoff")
    chi, dchi = _cutoff(r, r1, r2)
    # p1(x) = -int_r^{R} W0(t xhat).xhat dt for r >= r1, extended outward the same way
    shell = r >= r1
    pts = X[:, shell].T
    rr = r[shell]
    xhat = pts / rr[:, None]
    nodes, wts = leggauss(16)
    samplers = [grid_sampler(W0[j], grid) for j in range(3)]
    p1 = np.zeros(rr.shape, dtype=complex)
    for t, w in zip(nodes, wts):
        tt = 0.5 * (rr + R) + 0.5 * (R - rr) * t  # maps [-1, 1] to [r, R] (reversed when r > R)
        y = c + tt[:, None] * xhat
        wr = sum(samplers[j](y) * xhat[:, j] for j in range(3))
        p1 -= 0.5 * (R - rr) * w * wr
    P1 = np.zeros(grid.shape, dtype=complex)
    P1[shell] = p1
    grad_chi = dchi * X / np.where(r > 0, r, 1.0)
    W = (1 - chi) * W0 - P1 * grad_chi
    return W


def divergence_free_part(F, grid):
    """Curl components whose axial field is the divergence-free projection of that of F."""
    Bh = np.stack([np.fft.fftn(b) for b in axial_from_components(F)])
    K = grid.dual_coords.copy()
    if grid.n % 2 == 0:
        K[np.abs(np.abs(K) - grid.nyquist) < 1e-9 * grid.nyquist] = 0.0
    k2 = np.sum(K**2, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        proj = np.where(k2 > 0, np.sum(K * Bh, axis=0) / k2, 0.0)
    B = np.stack([np.fft.ifftn(Bh[j] - K[j] * proj) for j in range(3)])
    # invert a = i (F12, -F02, F01)
    out = {}
    for (p, q), comp, sign in (((1, 2), 0, 1), ((0, 2), 1, -1), ((0, 1), 2, 1)):
        v = -1j * sign * B[comp]
        out[(p, q)] = v
        out[(q, p)] = -v
    return out


def _cutoff(r, r1, r2):
    """Smooth step: 0 for r <= r1, 1 for r >= r2, with its radial derivative."""
    t = np.clip((r - r1) / (r2 - r1), 0.0, 1.0)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        a = np.where(t > 0, np.exp(-1 / np.where(t > 0, t, 1)), 0.0)
        b = np.where(t < 1, np.exp(-1 / np.where(t < 1, 1 - t, 1)), 0.0)
        chi = a / (a + b)
        da = np.where(t > 0, a / np.where(t > 0, t, 1) ** 2, 0.0)
        db = np.where(t < 1, -b / np.where(t < 1, 1 - t, 1) ** 2, 0.0)
        dchi = (da * b - a * db) / (a + b) ** 2 / (r2 - r1)
    return chi, np.nan_to_num(dchi)


def curl_residual(Wt, F, grid):
    """Relative L2 mismatch between curl Wt and F over the independent pairs."""
    C = curl(Wt, grid)
    num = sum(np.linalg.norm(C[p] - F[p]) ** 2 for p in PAIRS)
    den = sum(np.linalg.norm(F[p]) ** 2 for p in PAIRS)
    return float(np.sqrt(num / den)) if den > 0 else float(np.sqrt(num))


# ---------------------------------------------------------------- q

def wtilde_dn_maps(Wt, grid, mesh, tag="wtilde"):
    """Lambda_{W~,0} and Lambda_{-W~,0} by forward solves on the known field W~."""
    from .fields import PotentialPair

    zero = np.zeros(grid.shape, dtype=complex)
    if not np.any(Wt):
        lam = reference_dn_matrix(mesh, 0.0)
        return lam, lam
    P = PotentialPair(grid, Wt, zero, tag=tag)
    plus = assemble_dn_map(P, mesh, background=0.0).matrix
    minus = assemble_dn_map(P.negated(), mesh, background=0.0).matrix
    return plus, minus


def q_transform(dn_meas, xi, s, grid, mesh, lam_w0, lam_mw0, free_v=False):
    """t~(xi) = <(Lambda_meas - Lambda_{W~,0}) u_{zeta_1}, v_{zeta_2}> for one s."""
    f1, f2 = zeta_pair(xi, s, grid=grid)
    ops1 = layer_ops(f1, mesh, grid)
    lam = dn_meas.matrix if hasattr(dn_meas, "matrix") else np.asarray(dn_meas)
    u = solve_be(lam, f1, ops1)
    res = u.info["residual"]
    if free_v:
        # W~ = 0: the CGO solution of the free problem is the plane wave itself
        v_trace = plane_wave_trace(f2.zeta, mesh)
    else:
        ops2 = layer_ops(f2, mesh, grid)
        v = solve_be(lam_mw0, f2, ops2)
        v_trace = v.trace
        res = max(res, v.info["residual"])
    value = boundary_pairing((lam - lam_w0) @ u.trace, v_trace, mesh)
    return ScatterSample(np.asarray(xi, float), s, _frame_id(f1), complex(value), "t_tilde", res)


def recover_q(dn_meas, grid, mesh, s_schedule, wtilde=None, k_max=None, order=1, workers=1, log=None):
    """Electric potential on ``grid`` from the DN map and a curl-matching W~ (None for W = 0)."""
    s_schedule = _check_schedule(s_schedule)
    check_schedule_ceiling(s_schedule, grid)
    if k_max is None:
        k_max = grid.nyquist / 2
    if wtilde is None:
        wtilde = np.zeros((3,) + grid.shape, dtype=complex)
    lam_w0, lam_mw0 = wtilde_dn_maps(wtilde, grid, mesh)
    free_v = not np.any(wtilde)
    K, inside, canon, _ = _lattice(grid, k_max)
    canon = canon.copy()
    canon[0, 0, 0] = True
    qh = np.zeros(grid.shape, dtype=complex)
    done = np.zeros(grid.shape, dtype=bool)
    samples, rows = [], []
    todo = [tuple(t) for t in np.argwhere(inside & canon)]

    def task(idx):
        xi = K[(slice(None),) + idx]
        try:
            smps = [q_transform(dn_meas, xi, s, grid, mesh, lam_w0, lam_mw0, free_v) for s in s_schedule]
        except Exception as exc:
            raise _with_context(exc, xi) from exc
        return xi, smps

    for idx, (xi, smps) in zip(todo, _run(task, todo, workers)):
        qv, c1, res = richardson(s_schedule, [m.value for m in smps], order)
        qh[idx] = qv
        done[idx] = True
        samples += smps
        rows.append({"xi": xi.tolist(), "residual": res})
        if log is not None:
            log(f"xi={np.round(xi, 4).tolist()} residual={res:.2e}")
    mirror = _mirror_index(grid)
    mirrored = np.conj(qh[mirror])
    fill = (~done) & done[mirror]
    qh[fill] = mirrored[fill]
    q = inverse_fourier(qh, grid)
    return FieldReconstruction(grid, q_hat=qh, q=q, samples=samples,
                               meta={"s_schedule": list(s_schedule), "k_max": k_max, "rows": rows})
