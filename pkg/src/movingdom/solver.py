"""IMEX time integration of the transformed problem.

The linear divergence-form part A(t) is implicit, everything else —
nonlinearity f(t,v), drift b . grad v, explicit sources and the lagged
off-diagonal diffusion correction — sits in F and is treated explicitly:

    backward-euler:  (I + dt A(t_{n+1})) v_{n+1} = v_n + dt F(t_n, v_n)
    crank-nicolson:  (I + dt/2 A(t_{n+1})) v* =
                         (I - dt/2 A(t_n)) v_n + dt F(t_n + dt/2, v_n)

followed, for crank-nicolson, by one corrector solve with F re-evaluated
at the midpoint state (v_n + v*)/2.  When F does not depend on the state
the corrector right-hand side is identical and the solve returns v*
immediately, so the scheme degenerates to the plain one-solve form; with
state-dependent F the correction restores second order in time.

Time marches by accumulation (t_{n+1} = t_n + dt) and operators are
memoized per exact time value, so a run restarted from a stored state on
the step lattice reproduces the uninterrupted run bit for bit.  The final
step is shortened to land exactly on the requested end time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import expr as ex
from .diffeo import boundary_points
from .grid import (GridField, as_field, assemble_A, boundary_residual,
                   gradient_array, mass, norm_H1, norm_L2)


class SolverError(Exception):
    pass


class CgError(SolverError):
    pass


SCHEMES = ("backward-euler", "crank-nicolson")


@dataclass(frozen=True)
class StepperConfig:
    dt: float
    scheme: str = "backward-euler"
    cg_tol: float = 1e-10
    cg_maxiter: int = 0          # 0 means the 10*N default
    snapshot_every: int = 0      # 0 keeps only the first and last snapshot

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise SolverError(f"unknown scheme {self.scheme!r}; pick one of {SCHEMES}")
        if not self.dt > 0:
            raise SolverError(f"dt must be positive, got {self.dt}")
        if not self.cg_tol > 0:
            raise SolverError(f"cg_tol must be positive, got {self.cg_tol}")


@dataclass
class StepMetrics:
    step: int
    t: float
    L2: float
    H1: float
    mass: float
    boundary_residual: float
    cg_iters: int


@dataclass
class Trajectory:
    grid: object
    times: list
    snapshots: list
    metrics: list = field(default_factory=list)

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise SolverError("snapshot times must be strictly increasing")

    @property
    def final(self) -> GridField:
        return self.snapshots[-1]


# ---------------------------------------------------------------------------
# conjugate gradients on the volume-weighted SPD form

def _cg(op, rhs, tol, maxiter=0, x0=None):
    """Solve op x = rhs, op = flux/vol + beta I, via CG on flux + beta*diag(vol).

    Jacobi preconditioned; stops when |op x - rhs|_2 <= tol |rhs|_2.
    """
    rhs = np.asarray(rhs, dtype=float)
    M = op.spd_matrix
    V = op.volumes
    b = V * rhs
    cap = maxiter if maxiter else 10 * op.n
    d = M.diagonal()
    if np.any(d <= 0):
        raise CgError("operator diagonal is not positive; CG needs an SPD operator")
    x = np.zeros_like(b) if x0 is None else np.asarray(x0, dtype=float).copy()
    r = b - M @ x
    target = tol * float(np.linalg.norm(rhs))
    if float(np.linalg.norm(r / V)) <= target:
        return x, 0
    z = r / d
    p = z.copy()
    rz = float(r @ z)
    for it in range(1, cap + 1):
        q = M @ p
        pq = float(p @ q)
        if pq <= 0:
            raise CgError(f"breakdown at iteration {it}: operator is not positive definite")
        alpha = rz / pq
        x = x + alpha * p
        r = r - alpha * q
        if float(np.linalg.norm(r / V)) <= target:
            return x, it
        z = r / d
        rz_next = float(r @ z)
        p = z + (rz_next / rz) * p
        rz = rz_next
    raise CgError(f"no convergence within {cap} iterations; "
                  f"residual {float(np.linalg.norm(r / V)):.3e}, target {target:.3e}")


def cg_solve(A, rhs, tol=1e-10, maxiter=0) -> GridField:
    x, _ = _cg(A, as_field(A.grid, rhs).values, tol, maxiter)
    return GridField(A.grid, x)


# ---------------------------------------------------------------------------
# stepping

def _explicit_rhs(p, grid, t, v, cross_op, homogeneous):
    if homogeneous:
        out = np.zeros_like(v)
    else:
        grads = gradient_array(grid, v)
        b = p.metric.eval_b(t, grid.embed())
        if grid.kind == "radial":
            if b.shape[1] > 1 and \
                    np.abs(b[:, 1:]).max() > 1e-9 * (1.0 + np.abs(b[:, 0]).max()):
                raise SolverError("radial grid requires a radial drift field")
            drift = b[:, 0] * grads[:, 0]
        else:
            drift = np.einsum("mk,mk->m", b, grads)
        out = p.f_values(t, v) - drift
        if p.source is not None:
            out += p.source_values(t, grid.embed())
    if cross_op.cross is not None:
        out -= cross_op.apply_explicit(v)
    return out


def _advance(p, grid, cfg, t, v, dt, get_op, homogeneous):
    t1 = t + dt
    A1 = get_op(t1)
    if cfg.scheme == "backward-euler":
        A0 = get_op(t)
        rhs = v + dt * _explicit_rhs(p, grid, t, v, A0, homogeneous)
        return _cg(A1.shifted(dt), rhs, cfg.cg_tol, cfg.cg_maxiter, x0=v)
    A0 = get_op(t)
    tm = t + 0.5 * dt
    cross_op = get_op(tm) if A0.cross is not None else A0
    base = v - (0.5 * dt) * A0.apply_implicit(v)
    left = A1.shifted(0.5 * dt)
    F0 = _explicit_rhs(p, grid, tm, v, cross_op, homogeneous)
    v_star, it1 = _cg(left, base + dt * F0, cfg.cg_tol, cfg.cg_maxiter, x0=v)
    Fm = _explicit_rhs(p, grid, tm, 0.5 * (v + v_star), cross_op, homogeneous)
    v_next, it2 = _cg(left, base + dt * Fm, cfg.cg_tol, cfg.cg_maxiter, x0=v_star)
    return v_next, it1 + it2


def step(p, grid, cfg: StepperConfig, t_n, v_n) -> GridField:
    """One IMEX step from (t_n, v_n) to t_n + cfg.dt."""
    ops = {}

    def get_op(t):
        if t not in ops:
            ops[t] = assemble_A(p, grid, t)
        return ops[t]

    v = as_field(grid, v_n).values
    v1, _ = _advance(p, grid, cfg, float(t_n), v, cfg.dt, get_op, False)
    return GridField(grid, v1)


def run(p, grid, cfg: StepperConfig, tau, T, v0=None, homogeneous=False) -> Trajectory:
    """March the problem from tau to T; ceil((T-tau)/dt) steps, last one short.

    v0 may be a GridField, array, scalar, or None (evaluates the problem's
    initial-data expression at the cell centers).
    """
    tau, T = float(tau), float(T)
    if not tau <= T:
        raise SolverError(f"need tau <= T, got [{tau}, {T}]")
    if v0 is None:
        v = p.initial_values(grid.embed())
    else:
        v = as_field(grid, v0).values.copy()
    if not homogeneous:
        lip = p.lipschitz_sup()
        if cfg.dt * lip > 0.5:
            raise SolverError(
                f"dt too large for the explicit nonlinearity: dt * sup|f_u| = "
                f"{cfg.dt * lip:.3g} > 0.5; shrink dt below {0.5 / lip:.3g}")

    ops = {}

    def get_op(t):
        if t not in ops:
            ops[t] = assemble_A(p, grid, t)
        return ops[t]

    def metrics_row(n, t, vals, iters):
        return StepMetrics(n, t, norm_L2(grid, vals), norm_H1(grid, vals),
                           mass(grid, vals), boundary_residual(p, grid, t, vals),
                           iters)

    times = [tau]
    snapshots = [GridField(grid, v)]
    metrics = [metrics_row(0, tau, v, 0)]
    tol_t = 1e-9 * cfg.dt
    t = tau
    n = 0
    prev_norm = metrics[0].L2
    while t < T - tol_t:
        t_next = t + cfg.dt
        if T - t_next <= tol_t:
            dt_step = cfg.dt if abs(T - t_next) <= tol_t else T - t
            t_next = T
        else:
            dt_step = cfg.dt
        v, iters = _advance(p, grid, cfg, t, v, dt_step, get_op, homogeneous)
        if not np.all(np.isfinite(v)):
            raise SolverError(f"non-finite state at t = {t_next}; "
                              "the explicit terms likely outran dt")
        n += 1
        row = metrics_row(n, t_next, v, iters)
        if homogeneous and cfg.scheme == "backward-euler" \
                and get_op(t_next).cross is None \
                and row.L2 > prev_norm * (1.0 + 10 * cfg.cg_tol) + 1e-300:
            raise SolverError(f"homogeneous backward-Euler norm grew at t = {t_next}: "
                              f"{prev_norm} -> {row.L2}")
        prev_norm = row.L2
        metrics.append(row)
        t = t_next
        if t == T or (cfg.snapshot_every and n % cfg.snapshot_every == 0):
            times.append(t)
            snapshots.append(GridField(grid, v))
    return Trajectory(grid, times, snapshots, metrics)


def run_homogeneous(p, grid, cfg: StepperConfig, tau, T, v0=None) -> Trajectory:
    """March v' + A(t)v = 0: drops f, drift and sources, keeps the linear part."""
    return run(p, grid, cfg, tau, T, v0, homogeneous=True)


# ---------------------------------------------------------------------------
# manufactured-solution convergence harness

@dataclass
class MmsReport:
    spatial: list        # (cell count, L2 error vs exact at T)
    spatial_orders: list
    temporal: list       # (dt, L2 error vs fine-dt reference on the last grid)
    temporal_orders: list


def _b(op, a, c):
    return ex.Binary(op, a, c)


def _exact_fn(e, dim):
    names = ("t",) + tuple(f"y{i + 1}" for i in range(dim))
    fn = ex.compiled(e, names)

    def at(t, pts):
        env = {"t": t}
        for i in range(dim):
            env[f"y{i + 1}"] = pts[:, i]
        return np.broadcast_to(fn(env), (len(pts),)).copy()

    return at


def manufactured_source(p, exact: ex.Expr) -> ex.Expr:
    """Residual of `exact` in the transformed equation, as an expression.

    g = d_t e - sum_j d_j(sum_k a_jk d_k e) + beta e - f(t,e) + sum_k b_k d_k e,
    so that running the problem with source g makes `exact` a solution.
    """
    yv = [f"y{i + 1}" for i in range(p.dim)]
    de = [ex.diff(exact, y) for y in yv]
    g = ex.diff(exact, "t")
    for j in range(p.dim):
        flux = None
        for k in range(p.dim):
            term = _b("mul", p.metric.a[j][k], de[k])
            flux = term if flux is None else _b("add", flux, term)
        g = _b("sub", g, ex.diff(flux, yv[j]))
    g = _b("add", g, _b("mul", ex.Const(p.beta), exact))
    if p.f is not None:
        g = _b("sub", g, ex.substitute(p.f, {"u": exact}))
    for k in range(p.dim):
        g = _b("add", g, _b("mul", p.metric.b[k], de[k]))
    return ex.simplify(g)


def _check_conormal(p, exact, times):
    """Fail fast when `exact` violates n.(M grad v)=0 on the boundary."""
    pts, normals = boundary_points(p.domain, p.dim)
    yv = [f"y{i + 1}" for i in range(p.dim)]
    de_fns = [_exact_fn(ex.diff(exact, y), p.dim) for y in yv]
    worst = 0.0
    scale = 1.0
    for t in times:
        a = p.metric.eval_a(t, pts)
        grads = np.column_stack([fn(t, pts) for fn in de_fns])
        flux = np.einsum("mj,mjk,mk->m", normals, a, grads)
        worst = max(worst, float(np.abs(flux).max()))
        scale = max(scale, float(np.abs(grads).max()))
    if worst > 1e-8 * scale:
        raise SolverError(
            f"manufactured profile violates the conormal boundary condition: "
            f"max |n.(a grad v)| = {worst:.3e} on the boundary")
    return worst


def mms_convergence(p, exact, grids, dts, scheme="backward-euler", tau=0.0,
                    T=0.25, dt_spatial=5e-4, cg_tol=1e-12) -> MmsReport:
    """Observed convergence orders against a manufactured exact solution.

    Spatial ladder: fixed tiny dt (always crank-nicolson, so the temporal
    error stays far below the spatial signal), error vs the exact profile
    at T.  Temporal ladder: the last grid in `grids`, errors vs a fine-dt
    crank-nicolson reference on that same grid, which isolates the time
    discretization from the spatial floor.
    """
    if isinstance(exact, str):
        exact = ex.parse(exact)
    bad = ex.free_vars(exact) - ({"t"} | {f"y{i + 1}" for i in range(p.dim)})
    if bad:
        raise SolverError(f"exact solution may depend on t and y only; uses {sorted(bad)}")
    _check_conormal(p, exact, (tau, 0.5 * (tau + T), T))
    from .problem import TransformedProblem
    pm = TransformedProblem(p.metric, p.beta, p.f,
                            source=manufactured_source(p, exact), initial=None)
    at = _exact_fn(exact, p.dim)

    spatial = []
    for g in grids:
        cfgS = StepperConfig(dt=dt_spatial, scheme="crank-nicolson",
                             cg_tol=cg_tol)
        traj = run(pm, g, cfgS, tau, T, at(tau, g.embed()))
        err = norm_L2(g, traj.final.values - at(T, g.embed()))
        spatial.append((g.m, err))
    spatial_orders = _orders([e for _, e in spatial], 2.0)

    tg = grids[-1]
    v0 = at(tau, tg.embed())
    span = T - tau
    # Snap each dt so it divides the horizon evenly: a leftover partial
    # step shrinks the final-step error and skews the observed order.
    eff = [span / max(1, round(span / dt)) for dt in dts]
    ref_cfg = StepperConfig(dt=min(eff) / 20.0, scheme="crank-nicolson",
                            cg_tol=cg_tol)
    ref = run(pm, tg, ref_cfg, tau, T, v0).final.values
    temporal = []
    for dt in eff:
        cfgT = StepperConfig(dt=dt, scheme=scheme, cg_tol=cg_tol)
        err = norm_L2(tg, run(pm, tg, cfgT, tau, T, v0).final.values - ref)
        temporal.append((dt, err))
    ratios = [eff[i] / eff[i + 1] for i in range(len(eff) - 1)]
    temporal_orders = _orders([e for _, e in temporal], ratios)
    return MmsReport(spatial, spatial_orders, temporal, temporal_orders)


def _orders(errors, ratio):
    ratios = [ratio] * (len(errors) - 1) if np.isscalar(ratio) else ratio
    out = []
    for e0, e1, r in zip(errors, errors[1:], ratios):
        if min(e0, e1) <= 1e-14:
            out.append(math.nan)
        else:
            out.append(math.log(e0 / e1) / math.log(r))
    return out
