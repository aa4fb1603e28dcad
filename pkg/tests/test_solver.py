import math

import numpy as np
import pytest
import scipy.sparse as sp

from movingdom import expr as ex
from movingdom.diffeo import BallDomain, BoxDomain, DiffeoSpec
from movingdom.grid import (BoxGrid, GridField, RadialGrid, SparseOperator,
                            assemble_A, mass, norm_L2)
from movingdom.problem import assemble
from movingdom.solver import (CgError, MmsReport, SolverError, StepperConfig,
                              cg_solve, mms_convergence, run, run_homogeneous,
                              step)


def identity_problem(dim, domain=None, beta=1.0, f=None):
    dom = domain or BoxDomain((1.0,) * dim)
    spec = DiffeoSpec(
        dim=dim, domain=dom,
        forward=tuple(ex.parse(f"y{i + 1}") for i in range(dim)),
        inverse=tuple(ex.parse(f"x{i + 1}") for i in range(dim)),
    )
    return assemble(spec, beta=beta, f=f)


def ball_shrink_problem(beta=1.0, f=None):
    spec = DiffeoSpec(
        dim=3, domain=BallDomain(3),
        forward=tuple(ex.parse(f"y{i} / (exp(-t^2) + 1)") for i in (1, 2, 3)),
        inverse=tuple(ex.parse(f"(exp(-t^2) + 1) * x{i}") for i in (1, 2, 3)),
    )
    return assemble(spec, beta=beta, f=f)


def shear_problem(gamma=0.2):
    spec = DiffeoSpec(
        dim=2, domain=BoxDomain((1.0, 1.0)),
        forward=(ex.parse(f"y1 + {gamma} * y2"), ex.parse("y2")),
        inverse=(ex.parse(f"x1 - {gamma} * x2"), ex.parse("x2")),
    )
    return assemble(spec, beta=1.0)


def test_config_validation():
    with pytest.raises(SolverError, match="scheme"):
        StepperConfig(dt=0.1, scheme="leapfrog")
    with pytest.raises(SolverError, match="dt"):
        StepperConfig(dt=0.0)
    with pytest.raises(SolverError, match="cg_tol"):
        StepperConfig(dt=0.1, cg_tol=0.0)


# ---------------------------------------------------------------------------
# conjugate gradients

def test_cg_identity_operator_converges_in_one_iteration():
    g = BoxGrid((1.0,), (8,))
    A = SparseOperator(g, sp.csr_matrix((8, 8)), g.volumes, 1.0, None, True, 0.0)
    rhs = np.arange(8.0)
    from movingdom.solver import _cg
    x, iters = _cg(A, rhs, tol=1e-12)
    assert iters == 1
    assert np.allclose(x, rhs, rtol=1e-14)


def test_cg_matches_dense_lu():
    p = identity_problem(1)
    g = BoxGrid((1.0,), (16,))
    A = assemble_A(p, g, 0.0)
    rng = np.random.default_rng(17)
    rhs = rng.normal(size=16)
    x = cg_solve(A, rhs, tol=1e-12).values
    dense = A.flux.toarray() / A.volumes[:, None] + np.eye(16)
    assert np.allclose(x, np.linalg.solve(dense, rhs), atol=1e-9)


def test_cg_rejects_indefinite_operator():
    p = identity_problem(1)
    g = BoxGrid((1.0,), (16,))
    A = assemble_A(p, g, 0.0)
    bad = SparseOperator(g, A.flux, A.volumes, -10.0, None, False, 0.0)
    with pytest.raises(CgError):
        cg_solve(bad, np.ones(16))


def test_cg_iteration_cap():
    p = identity_problem(1)
    g = BoxGrid((1.0,), (32,))
    A = assemble_A(p, g, 0.0)
    with pytest.raises(CgError, match="within 2 iterations"):
        cg_solve(A, np.sin(np.arange(32.0)), tol=1e-14, maxiter=2)


# ---------------------------------------------------------------------------
# stepping

def test_backward_euler_constant_mode():
    p = identity_problem(1)
    g = BoxGrid((1.0,), (8,))
    cfg = StepperConfig(dt=0.1, cg_tol=1e-13)
    v1 = step(p, g, cfg, 0.0, 2.0)
    assert np.allclose(v1.values, 2.0 / 1.1, rtol=1e-12)


def test_backward_euler_scalar_mode_error_bound():
    p = identity_problem(1)
    g = BoxGrid((1.0,), (8,))
    for dt in (0.05, 0.01):
        cfg = StepperConfig(dt=dt, cg_tol=1e-13)
        traj = run(p, g, cfg, 0.0, 1.0, 1.0)
        assert np.abs(traj.final.values - math.exp(-1.0)).max() <= 0.6 * dt


def test_zero_data_stays_zero():
    p = identity_problem(2)
    g = BoxGrid((1.0, 1.0), (4, 4))
    traj = run(p, g, StepperConfig(dt=0.1), 0.0, 0.5, 0.0)
    assert all(m.L2 == 0.0 for m in traj.metrics)
    assert np.all(traj.final.values == 0.0)


def test_radial_constant_mode_long_run():
    p = ball_shrink_problem()
    g = RadialGrid(3, 16)
    traj = run(p, g, StepperConfig(dt=1e-3, cg_tol=1e-12), 0.0, 2.0, 1.0)
    assert np.abs(traj.final.values - math.exp(-2.0)).max() <= 1e-3


def test_restart_is_bitwise():
    p = ball_shrink_problem(f="sin(t)")
    g = RadialGrid(3, 12)
    cfg = StepperConfig(dt=0.01, scheme="crank-nicolson")
    full = run(p, g, cfg, 0.0, 0.16, 1.0)
    s = 0.0
    for _ in range(8):
        s += 0.01
    leg1 = run(p, g, cfg, 0.0, s, 1.0)
    leg2 = run(p, g, cfg, s, 0.16, leg1.final)
    assert np.array_equal(leg2.final.values, full.final.values)
    assert np.array_equal(leg1.snapshots[0].values, np.ones(12))


def test_snapshot_cadence():
    p = identity_problem(1)
    g = BoxGrid((1.0,), (4,))
    traj = run(p, g, StepperConfig(dt=0.1, snapshot_every=2), 0.0, 0.95, 1.0)
    # 10 steps (last one short): snapshots at start, steps 2,4,6,8, and final
    assert len(traj.times) == 6
    assert traj.times[-1] == 0.95
    assert len(traj.metrics) == 11


def test_homogeneous_drops_forcing_and_drift():
    p = ball_shrink_problem(f="sin(t)")
    g = RadialGrid(3, 12)
    cfg = StepperConfig(dt=1e-3, scheme="crank-nicolson", cg_tol=1e-12)
    traj = run_homogeneous(p, g, cfg, 0.0, 1.0, 3.0)
    assert np.abs(traj.final.values - 3.0 * math.exp(-1.0)).max() <= 1e-5
    l2 = [m.L2 for m in traj.metrics]
    assert all(b <= a for a, b in zip(l2, l2[1:]))


def test_continuous_dependence_bound():
    p = identity_problem(1, f="sin(u)")
    g = BoxGrid((1.0,), (16,))
    cfg = StepperConfig(dt=0.05, cg_tol=1e-12)
    rng = np.random.default_rng(3)
    x = rng.normal(size=16)
    y = x + 0.1 * rng.normal(size=16)
    dist0 = norm_L2(g, x - y)
    tx = run(p, g, cfg, 0.0, 1.0, x)
    ty = run(p, g, cfg, 0.0, 1.0, y)
    dist1 = norm_L2(g, tx.final.values - ty.final.values)
    lip = p.lipschitz_sup()
    assert dist1 <= math.exp(lip * 1.0) * dist0 * (1 + 1e-9)


def test_step_size_guard():
    p = identity_problem(1, f="u^3")
    g = BoxGrid((1.0,), (8,))
    with pytest.raises(SolverError, match="dt too large"):
        run(p, g, StepperConfig(dt=0.01), 0.0, 1.0, 1.0)


def test_blowup_is_reported():
    p = identity_problem(1, f="u^3")
    g = BoxGrid((1.0,), (8,))
    with pytest.raises((SolverError, ex.EvalError)):
        run(p, g, StepperConfig(dt=1.5e-3), 0.0, 1.0, 1000.0)


def test_mass_balance_per_step():
    p = identity_problem(2, f="sin(t)")
    g = BoxGrid((1.0, 1.0), (8, 8))
    cfg = StepperConfig(dt=0.05, snapshot_every=1, cg_tol=1e-13)
    traj = run(p, g, cfg, 0.0, 0.5, 1.0)
    for i in range(len(traj.times) - 1):
        dt = traj.times[i + 1] - traj.times[i]
        v0, v1 = traj.snapshots[i].values, traj.snapshots[i + 1].values
        lhs = (mass(g, v1) - mass(g, v0)) / dt
        rhs = -p.beta * mass(g, v1) + math.sin(traj.times[i]) * mass(g, np.ones(g.m))
        assert lhs == pytest.approx(rhs, rel=1e-7, abs=1e-9)


# ---------------------------------------------------------------------------
# manufactured solutions

def test_mms_identity_box_orders():
    p = identity_problem(1)
    grids = [BoxGrid((1.0,), (n,)) for n in (16, 32, 64)]
    rep = mms_convergence(p, "exp(-t) * cos(pi * y1)", grids,
                          dts=(0.04, 0.02, 0.01), scheme="backward-euler")
    assert all(abs(o - 2.0) <= 0.3 for o in rep.spatial_orders)
    assert all(abs(o - 1.0) <= 0.2 for o in rep.temporal_orders)
    rep_cn = mms_convergence(p, "exp(-t) * cos(pi * y1)", grids[-1:],
                             dts=(0.04, 0.02, 0.01), scheme="crank-nicolson")
    assert all(abs(o - 2.0) <= 0.3 for o in rep_cn.temporal_orders)


def test_mms_radial_orders():
    p = ball_shrink_problem()
    exact = "exp(-t) * (1 - (y1^2 + y2^2 + y3^2))^2"
    grids = [RadialGrid(3, n) for n in (16, 32, 64)]
    rep = mms_convergence(p, exact, grids, dts=(0.04, 0.02, 0.01),
                          scheme="crank-nicolson")
    assert all(abs(o - 2.0) <= 0.4 for o in rep.spatial_orders)
    assert all(abs(o - 2.0) <= 0.3 for o in rep.temporal_orders)


def test_mms_cross_terms_spatial_order():
    p = shear_problem(0.2)
    exact = "exp(-t) * (16 * y1 * (1 - y1) * y2 * (1 - y2))^2"
    grids = [BoxGrid((1.0, 1.0), (n, n)) for n in (12, 24, 48)]
    rep = mms_convergence(p, exact, grids, dts=(0.02, 0.01), T=0.05,
                          dt_spatial=5e-5)
    assert all(o >= 1.6 for o in rep.spatial_orders)


def test_mms_constant_exact_is_reproduced():
    p = identity_problem(1)
    grids = [BoxGrid((1.0,), (n,)) for n in (16, 32)]
    rep = mms_convergence(p, "3", grids, dts=(0.02, 0.01))
    assert all(e <= 1e-8 for _, e in rep.spatial)
    assert all(e <= 1e-8 for _, e in rep.temporal)


def test_mms_rejects_incompatible_profile():
    p = identity_problem(1)
    with pytest.raises(SolverError, match="conormal"):
        mms_convergence(p, "y1", [BoxGrid((1.0,), (16,))], dts=(0.02,))


def test_mms_rejects_stray_variables():
    p = identity_problem(1)
    with pytest.raises(SolverError, match="y2"):
        mms_convergence(p, "y2 * exp(-t)", [BoxGrid((1.0,), (16,))], dts=(0.02,))
