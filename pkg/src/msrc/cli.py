"""Command line workflow: forward simulation, blind reconstruction and invariant checks.

Arrays are exchanged in a small binary container: a magic line, one header
line of name=value pairs, a blank line and a little-endian row-major payload.
"""
import configparser
import hashlib
import json
import logging
import os
import sys

import click
import numpy as np

log = logging.getLogger("msrc")

MAGIC = b"MSRC1\n"
DTYPES = {"f64": np.dtype("<f8"), "c128": np.dtype("<c16")}
EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_INTEGRITY = 0, 1, 2, 3
COMPONENT_PAIRS = ((0, 1), (0, 2), (1, 2))


class IntegrityError(RuntimeError):
    """A file is truncated, corrupt or does not belong to the configuration."""


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- container

def write_array(path, arr, dim_names, fingerprint, extra=None):
    """Write ``arr`` with named dimensions; complex data goes as interleaved (re, im) pairs."""
    arr = np.asarray(arr)
    if len(dim_names) != arr.ndim:
        raise ValueError(f"{len(dim_names)} dimension names for an array of rank {arr.ndim}")
    code = "c128" if np.iscomplexobj(arr) else "f64"
    data = np.ascontiguousarray(arr, dtype=DTYPES[code])
    fields = [
        "dims=" + ";".join(f"{n}:{s}" for n, s in zip(dim_names, arr.shape)),
        f"dtype={code}",
        "order=row-major",
        "byteorder=LE",
        f"fingerprint={fingerprint}",
    ]
    for k, v in (extra or {}).items():
        fields.append(f"{k}={v}")
    header = " ".join(fields).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + header + b"\n\n" + data.tobytes())
    os.replace(tmp, path)


def read_array(path, fingerprint=None):
    """Read a container; returns (array, dim names, header dict)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(MAGIC):
        raise IntegrityError(f"{path}: not an MSRC1 container")
    end = blob.find(b"\n\n", len(MAGIC))
    if end < 0:
        raise IntegrityError(f"{path}: header is not terminated")
    header = dict(item.split("=", 1) for item in blob[len(MAGIC):end].decode("utf-8").split(" "))
    for key in ("dims", "dtype", "order", "byteorder", "fingerprint"):
        if key not in header:
            raise IntegrityError(f"{path}: header lacks {key}")
    if header["order"] != "row-major" or header["byteorder"] != "LE" or header["dtype"] not in DTYPES:
        raise IntegrityError(f"{path}: unsupported layout {header['dtype']}/{header['order']}/{header['byteorder']}")
    dims = [d.split(":") for d in header["dims"].split(";")] if header["dims"] else []
    names = [d[0] for d in dims]
    shape = tuple(int(d[1]) for d in dims)
    dt = DTYPES[header["dtype"]]
    payload = blob[end + 2:]
    need = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if len(payload) != need:
        raise IntegrityError(f"{path}: payload has {len(payload)} bytes, expected {need}")
    if fingerprint is not None and header["fingerprint"] != fingerprint:
        raise IntegrityError(
            f"{path}: fingerprint {header['fingerprint']} does not match configuration {fingerprint}"
        )
    arr = np.frombuffer(payload, dtype=dt).reshape(shape).copy()
    return arr, names, header


# ---------------------------------------------------------------- configuration

def load_config(path):
    cfg = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path) as fh:
            cfg.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return cfg


def _get(cfg, section, key, cast=str, default=None, required=False):
    if cfg.has_option(section, key):
        raw = cfg.get(section, key)
        try:
            return cast(raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {section}.{key}: {raw!r}") from exc
    if required:
        raise ConfigError(f"missing key {section}.{key}")
    return default


def _floats(raw):
    return tuple(float(x) for x in raw.replace(";", ",").split(",") if x.strip())


def config_fingerprint(cfg):
    """64-bit hex hash of the measurement geometry (domain and grid sections)."""
    h = hashlib.sha256()
    for section in ("domain", "grid"):
        if cfg.has_section(section):
            for k in sorted(cfg[section]):
                h.update(f"{section}.{k}={cfg[section][k].strip()}\n".encode())
    return h.hexdigest()[:16]


class Setup:
    """Objects built from a configuration: domain, grid, mesh and options."""

    def __init__(self, cfg):
        from .mesh import DomainSpec, build_boundary_mesh, build_grid

        self.cfg = cfg
        n = _get(cfg, "grid", "n", int, required=True)
        shape = _get(cfg, "domain", "shape", str, "ball")
        radius = _get(cfg, "domain", "radius", float, 1.0)
        center = _get(cfg, "domain", "center", _floats, (0.0, 0.0, 0.0))
        self.spec = DomainSpec(shape=shape, radius=radius, center=center)
        self.grid = build_grid(self.spec, n)
        self.n_nodes = _get(cfg, "grid", "n_nodes", int, 500)
        self.mesh = build_boundary_mesh(self.spec, self.n_nodes)
        self.recon_n = _get(cfg, "grid", "recon_n", int, n)
        self.recon_grid = build_grid(self.spec, self.recon_n)
        self.s_schedule = _get(cfg, "schedule", "s", _floats, None)
        self.k_max = _get(cfg, "schedule", "k_max", float, None)
        self.pairs = _get(cfg, "schedule", "pairs", str, "all")
        self.order = _get(cfg, "schedule", "order", int, 1)
        self.curl_floor = _get(cfg, "tolerances", "curl_floor", float, 1e-3)
        self.solver_tol = _get(cfg, "tolerances", "solver", float, 1e-8)
        self.fingerprint = config_fingerprint(cfg)

    def schedule(self):
        if self.s_schedule is None:
            raise ConfigError("missing key schedule.s")
        return list(self.s_schedule)

    def phantom(self):
        from .fields import bump, make_phantom
        from .forward import gauge_transform

        cfg = self.cfg
        kind = _get(cfg, "phantom", "kind", str, required=True)
        center = np.array(_get(cfg, "phantom", "center", _floats, (0.0, 0.0, 0.0)))
        jitter = _get(cfg, "phantom", "jitter", float, 0.0)
        if jitter:
            rng = np.random.default_rng(_get(cfg, "phantom", "seed", int, 0))
            center = center + jitter * rng.uniform(-1, 1, 3)
        P = make_phantom(
            kind, self.grid,
            amplitude=_get(cfg, "phantom", "amplitude", float, 1.0),
            rho=_get(cfg, "phantom", "rho", float, 0.5),
            center=tuple(center),
            q_amplitude=_get(cfg, "phantom", "q_amplitude", float, None),
            spec=self.spec,
            power=_get(cfg, "phantom", "power", int, 6),
        )
        gauge = _get(cfg, "phantom", "gauge", float, 0.0)
        if gauge:
            X = self.grid.coords - np.asarray(self.spec.center)[:, None, None, None]
            r = np.sqrt(np.sum(X**2, axis=0))
            # keep two cells clear of the boundary, as the gauge check requires
            rho = min(0.7 * self.spec.radius, self.spec.radius - 2.5 * self.grid.h)
            p = gauge * bump(r, rho, 6) * (X[0] + 0.3 * X[1] + 0.2)
            P = gauge_transform(P, p, self.spec)
        return P


# ---------------------------------------------------------------- helpers

def _out_path(out, name):
    os.makedirs(out, exist_ok=True)
    return os.path.join(out, name)


def load_dn(path, setup):
    from .forward import DNMap

    arr, _, header = read_array(path, setup.fingerprint)
    mesh_id = hashlib.sha256(setup.mesh.fingerprint().encode()).hexdigest()[:16]
    if header.get("mesh") != mesh_id:
        raise IntegrityError(f"{path}: boundary mesh does not match the configuration")
    if arr.shape != (setup.mesh.size, setup.mesh.size):
        raise IntegrityError(f"{path}: DN matrix shape {arr.shape} does not fit the mesh")
    return DNMap(arr, setup.mesh, header.get("tag", ""), fingerprint=setup.mesh.fingerprint())


def write_samples(path, samples):
    from .recon import SAMPLE_HEADER

    with open(path, "w") as fh:
        fh.write(SAMPLE_HEADER + "\n")
        for smp in samples:
            fh.write(smp.record() + "\n")


def _curl_stack(curlW):
    return np.stack([curlW[p] for p in COMPONENT_PAIRS])


def _curl_dict(stack):
    out = {}
    for i, (p, q) in enumerate(COMPONENT_PAIRS):
        out[(p, q)] = stack[i]
        out[(q, p)] = -stack[i]
    return out


def run_recon_b(setup, dn, out, workers):
    from .recon import recover_curl

    rec = recover_curl(dn, setup.recon_grid, setup.mesh, setup.schedule(), k_max=setup.k_max,
                       pairs=setup.pairs, order=setup.order, workers=workers, log=log.info)
    fp = setup.fingerprint
    stack = _curl_stack(rec.curlW)
    write_array(_out_path(out, "curlW.msrc"), stack, ["comp", "x", "y", "z"], fp)
    write_array(_out_path(out, "curlW_hat.msrc"), _curl_stack(rec.curl_hat), ["comp", "kx", "ky", "kz"], fp)
    mid = setup.recon_grid.n // 2
    write_array(_out_path(out, "curlW_slice.msrc"), stack[:, :, :, mid], ["comp", "x", "y"], fp)
    write_samples(_out_path(out, "samples_b.csv"), rec.samples)
    with open(_out_path(out, "recon_b.json"), "w") as fh:
        json.dump(rec.meta, fh, indent=1, sort_keys=True)
    return rec


def run_recon_q(setup, dn, curl_stack, out, workers):
    from .recon import construct_wtilde, divergence_free_part, recover_q

    grid = setup.recon_grid
    wt = None
    if curl_stack is not None and np.max(np.abs(curl_stack)) > setup.curl_floor:
        F = divergence_free_part(_curl_dict(curl_stack), grid)
        wt = construct_wtilde(F, grid, setup.spec).real.astype(complex)
        if grid.n != setup.grid.n:
            raise ConfigError("a magnetic W~ needs grid.recon_n equal to grid.n")
    rec = recover_q(dn, grid, setup.mesh, setup.schedule(), wtilde=wt, k_max=setup.k_max,
                    order=setup.order, workers=workers, log=log.info)
    fp = setup.fingerprint
    write_array(_out_path(out, "q.msrc"), rec.q, ["x", "y", "z"], fp)
    write_array(_out_path(out, "q_slice.msrc"), rec.q[:, :, grid.n // 2], ["x", "y"], fp)
    if wt is not None:
        write_array(_out_path(out, "wtilde.msrc"), wt, ["comp", "x", "y", "z"], fp)
    write_samples(_out_path(out, "samples_q.csv"), rec.samples)
    return rec


# ---------------------------------------------------------------- verify suites

def _check(name, value, limit, compare="le"):
    ok = value <= limit if compare == "le" else value >= limit
    return {"check": name, "value": float(value), "limit": float(limit), "pass": bool(ok)}


def _suite_rho(setup, rho=0.5):
    """Phantom radius for the suites, shrunk on coarse grids to keep the boundary margin."""
    return min(rho, setup.spec.radius - 3 * setup.grid.h)


def suite_mesh(setup):
    mesh = setup.mesh
    R = setup.spec.radius
    area = abs(mesh.weights.sum() - 4 * np.pi * R**2) / (4 * np.pi * R**2)
    Y = mesh.ylm()
    gram = (Y.T * mesh.weights) @ Y / R**2
    return [_check("mesh.area", area, 1e-12),
            _check("mesh.ylm_orthonormal", np.abs(gram - np.eye(gram.shape[0])).max(), 1e-10)]


def suite_forward(setup):
    from .fields import bump, make_phantom
    from .forward import assemble_dn_map, gauge_transform
    from .mesh import degree_index

    grid, mesh = setup.grid, setup.mesh
    P = make_phantom("stream", grid, rho=_suite_rho(setup), spec=setup.spec)
    X = grid.coords
    p = bump(grid.radius, _suite_rho(setup, 0.6), 6) * (X[0] + 0.5)
    a = assemble_dn_map(P, mesh).matrix
    b = assemble_dn_map(gauge_transform(P, p, setup.spec), mesh).matrix
    gap = np.linalg.norm(a - b) / np.linalg.norm(a)
    # Lambda_00 through the grid solver: a pure gauge potential exercises the full assembly
    lam = assemble_dn_map(gauge_transform(make_phantom("zero", grid), p, setup.spec), mesh).matrix
    Y = mesh.ylm()
    deg = degree_index(mesh.lmax)
    worst = 0.0
    for l in range(1, 4):
        cols = Y[:, deg == l]
        rq = np.real(np.einsum("il,i,il->l", cols, mesh.weights, lam @ cols)) / np.einsum(
            "il,i,il->l", cols, mesh.weights, cols)
        worst = max(worst, float(np.max(np.abs(rq - l) / l)))
    return [_check("forward.gauge_gap", gap, 1e-4), _check("forward.ball_spectrum", worst, 0.02)]


def suite_faddeev(setup):
    from .faddeev import G0, make_zeta, solver_residual
    from .fields import bump

    grid = setup.grid
    g0 = abs(G0(np.array([1.0, 0.0, 0.0])) - 1 / (4 * np.pi)) * 4 * np.pi
    f = bump(grid.radius, 0.8, 6).astype(complex)
    res = solver_residual(f, make_zeta([1.0, 0.0, 0.0], 2.0, pair=(0, 1)), grid)
    return [_check("faddeev.green_constant", g0, 1e-15), _check("faddeev.solver_residual", res, 2e-2)]


def suite_cauchy(setup):
    from .cauchy import eskin_ralston_check, n_mu, nmu_inverse
    from .faddeev import make_zeta
    from .fields import bump, make_phantom

    grid = setup.grid
    frame = make_zeta([1.0, 0.0, 0.0], 1.0, pair=(0, 1))
    X = grid.coords
    # wide bump resolved at n = 32; narrow ones are limited by the grid, not the transform
    g = bump(grid.radius, 1.0, 8) * (1 + 0.3 * X[0])
    back = nmu_inverse(n_mu(g, frame, grid), frame, grid)
    rt = np.linalg.norm(back - g) / np.linalg.norm(g)
    out = [_check("cauchy.round_trip", rt, 1e-3 if grid.n >= 32 else 1e-2)]
    for kind in ("stream", "combined", "gradient"):
        P = make_phantom(kind, grid, rho=_suite_rho(setup), spec=setup.spec)
        gap = eskin_ralston_check(P.W, frame, frame.xi, grid)["gap"]
        out.append(_check(f"cauchy.eskin_ralston[{kind}]", gap, 1e-2))
    return out


def suite_bie(setup):
    from .bie import build_layer_ops
    from .faddeev import make_zeta

    frame = make_zeta([1.0, 0.0, 0.0], 1.0, pair=(0, 1))
    ops = build_layer_ops(frame, setup.mesh, grid=setup.grid)
    mesh = setup.mesh
    f = 1 + mesh.nodes[:, 0] + 0.5 * mesh.nodes[:, 1] * mesh.nodes[:, 2]
    jumps = ops.jump_check(f.astype(complex), nodes=np.arange(0, mesh.size, 7))
    return [_check("bie.identity_defect", ops.identity_defect(), 5e-3)] + [
        _check(f"bie.{k}", v, 0.02) for k, v in jumps.items()
    ]


def suite_recon(setup):
    from .bie import build_layer_ops
    from .faddeev import make_zeta
    from .forward import reference_dn_matrix
    from .recon import scattering_transform

    mesh = setup.mesh
    lam0 = reference_dn_matrix(mesh, 0.0)
    out = []
    for k in (1.0, 2.5):
        xi = np.array([k, 0.0, 0.0])
        frame = make_zeta(xi, 1.0, pair=(0, 1))
        smp = scattering_transform(lam0, xi, frame, build_layer_ops(frame, mesh, grid=setup.grid))
        exact = k**2 * 4 * np.pi * (np.sin(k) - k * np.cos(k)) / k**3
        out.append(_check(f"recon.free_transform[|xi|={k}]", abs(smp.value - exact) / abs(exact), 0.03))
    return out


SUITES = {
    "mesh": suite_mesh,
    "forward": suite_forward,
    "faddeev": suite_faddeev,
    "cauchy": suite_cauchy,
    "bie": suite_bie,
    "recon": suite_recon,
}


def run_suite(name, setup):
    if name == "all":
        rows = []
        for key in SUITES:
            rows += SUITES[key](setup)
        return rows
    if name not in SUITES:
        raise click.UsageError(f"unknown suite {name!r}; choose from {', '.join(list(SUITES) + ['all'])}")
    return SUITES[name](setup)


# ---------------------------------------------------------------- commands

def _default_threads():
    return os.cpu_count() or 1


@click.group()
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False),
              help="INI file with sections domain, grid, phantom, schedule, tolerances.")
@click.option("--out", default="msrc_out", show_default=True, help="Output directory.")
@click.option("--threads", default=None, type=click.IntRange(min=1), help="Worker threads (default: CPU count).")
@click.option("--log-level", default="WARNING", show_default=True,
              type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False))
@click.pass_context
def cli(ctx, config_path, out, threads, log_level):
    """Magnetic Schroedinger inverse problem: simulate DN maps and reconstruct curl W and q."""
    logging.basicConfig(level=log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    ctx.obj = {"config": config_path, "out": out, "threads": threads or _default_threads()}


def _setup(ctx):
    return Setup(load_config(ctx.obj["config"]))


@cli.command()
@click.pass_context
def forward(ctx):
    """Assemble the DN map of the configured phantom."""
    from .forward import assemble_dn_map

    setup = _setup(ctx)
    P = setup.phantom()
    dn = assemble_dn_map(P, setup.mesh, tol=setup.solver_tol)
    mesh_id = hashlib.sha256(setup.mesh.fingerprint().encode()).hexdigest()[:16]
    path = _out_path(ctx.obj["out"], "dn.msrc")
    write_array(path, dn.matrix, ["row", "col"], setup.fingerprint, {"mesh": mesh_id, "tag": P.tag})
    click.echo(path)


@cli.command("recon-b")
@click.option("--dn", "dn_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.pass_context
def recon_b(ctx, dn_path):
    """Recover the curl components of W from a DN map file."""
    setup = _setup(ctx)
    dn = load_dn(dn_path, setup)
    run_recon_b(setup, dn, ctx.obj["out"], ctx.obj["threads"])
    click.echo(os.path.join(ctx.obj["out"], "curlW.msrc"))


@cli.command("recon-q")
@click.option("--dn", "dn_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--curl", "curl_path", default="auto", show_default=True,
              help="curlW container from recon-b, 'auto' to run it first, or 'zero' for W = 0.")
@click.pass_context
def recon_q(ctx, dn_path, curl_path):
    """Recover q from a DN map file."""
    setup = _setup(ctx)
    dn = load_dn(dn_path, setup)
    if curl_path == "auto":
        stack = _curl_stack(run_recon_b(setup, dn, ctx.obj["out"], ctx.obj["threads"]).curlW)
    elif curl_path == "zero":
        stack = None
    else:
        stack, _, _ = read_array(curl_path, setup.fingerprint)
    run_recon_q(setup, dn, stack, ctx.obj["out"], ctx.obj["threads"])
    click.echo(os.path.join(ctx.obj["out"], "q.msrc"))


@cli.command()
@click.option("--dn", "dn_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--xi", required=True, help="xi as 'a,b,c'.")
@click.option("--s", "s_value", required=True, type=float)
@click.option("--pair", default=None, help="Frame pair 'j,k' (zero based).")
@click.pass_context
def transform(ctx, dn_path, xi, s_value, pair):
    """Evaluate the scattering transform at a single (xi, s)."""
    from .faddeev import make_zeta
    from .recon import SAMPLE_HEADER, layer_ops, scattering_transform

    setup = _setup(ctx)
    dn = load_dn(dn_path, setup)
    xi_v = np.array(_floats(xi))
    if xi_v.shape != (3,):
        raise click.UsageError("--xi needs three components")
    pr = tuple(int(v) for v in pair.split(",")) if pair else None
    frame = make_zeta(xi_v, s_value, pair=pr, grid=setup.recon_grid)
    smp = scattering_transform(dn, xi_v, frame, layer_ops(frame, setup.mesh, setup.recon_grid))
    path = _out_path(ctx.obj["out"], "transform.csv")
    new = not os.path.exists(path)
    with open(path, "a") as fh:
        if new:
            fh.write(SAMPLE_HEADER + "\n")
        fh.write(smp.record() + "\n")
    click.echo(smp.record())


@cli.command()
@click.argument("suite")
@click.pass_context
def verify(ctx, suite):
    """Run invariant checks: mesh, forward, faddeev, cauchy, bie, recon or all."""
    setup = _setup(ctx)
    rows = run_suite(suite, setup)
    for r in rows:
        click.echo(f"{'PASS' if r['pass'] else 'FAIL'} {r['check']:<36} {r['value']:.3e} (limit {r['limit']:.1e})")
    with open(_out_path(ctx.obj["out"], f"verify_{suite}.json"), "w") as fh:
        json.dump(rows, fh, indent=1)
    if not all(r["pass"] for r in rows):
        ctx.exit(EXIT_NUMERIC)


def main(argv=None):
    """Entry point with the documented exit codes."""
    from .bie import BoundaryEquationError, IterationError
    from .faddeev import DenominatorError
    from .forward import SolverError

    try:
        rv = cli.main(args=argv, prog_name="msrc", standalone_mode=False)
        if isinstance(rv, int):
            return rv
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_USAGE
    except (click.UsageError, ConfigError) as exc:
        click.echo(f"error: {exc.format_message() if hasattr(exc, 'format_message') else exc}", err=True)
        return EXIT_USAGE
    except IntegrityError as exc:
        click.echo(f"integrity error: {exc}", err=True)
        return EXIT_INTEGRITY
    except (SolverError, BoundaryEquationError, IterationError, DenominatorError,
            ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
        click.echo(f"numeric failure: {exc}", err=True)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
