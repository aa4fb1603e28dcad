"""End-to-end checks of the command line front end and its file formats."""

import numpy as np
import pytest

from movingdom.cli import (ConfigError, fixture_path, load_config, main,
                           read_table, write_table)

BALL_SHRINK_A11_AT_T1 = 1.8710941655794973  # (exp(-1) + 1)^2


def run_cli(args):
    return main([str(a) for a in args])


def read_rows(path):
    name, version, header, rows = read_table(path)
    assert version == 1
    return name, header, rows


# ---------------------------------------------------------------------------
# config parsing


def test_fixture_path_unknown_name():
    with pytest.raises(ConfigError, match="ball_shrink"):
        fixture_path("no_such_fixture")


def test_load_config_reads_problem_and_numerics():
    rc = load_config(fixture_path("ball_shrink"))
    assert rc.dim == 3
    assert rc.domain_kind == "ball"
    assert len(rc.forward) == 3
    assert rc.beta == 1.0
    assert rc.scheme == "crank-nicolson"
    assert rc.dt == 0.01
    assert rc.grid_ladder == (32, 64, 128, 256)


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.cfg")


def test_load_config_requires_problem_section(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("[numerics]\ngrid = 8\n")
    with pytest.raises(ConfigError, match="problem"):
        load_config(p)


def test_load_config_requires_quoted_expressions(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("[problem]\ndim = 1\nextents = 1.0\n"
                 "forward = y1\ninverse = \"x1\"\nbeta = 1.0\n")
    with pytest.raises(ConfigError, match="quoted"):
        load_config(p)


def test_load_config_wrong_component_count(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text('[problem]\ndim = 2\nextents = 1.0, 1.0\n'
                 'forward = "y1"\ninverse = "x1", "x2"\nbeta = 1.0\n')
    with pytest.raises(ConfigError, match="2 forward"):
        load_config(p)


# ---------------------------------------------------------------------------
# table format


def test_table_round_trip_is_byte_identical(tmp_path):
    rows = [(0, 0.1, "free text"), (1, 1.0 / 3.0, "x")]
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    write_table(a, "demo", ("i", "v", "note"), rows)
    name, header, parsed = read_rows(a)
    assert name == "demo"
    assert header == ["i", "v", "note"]
    # floats are re-read exactly through repr
    assert float(parsed[1][1]) == 1.0 / 3.0
    write_table(b, "demo", header, [(int(i), float(v), s) for i, v, s in parsed])
    assert a.read_bytes() == b.read_bytes()


def test_read_table_rejects_untagged_file(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("a,b\n1,2\n")
    with pytest.raises(ConfigError, match="schema"):
        read_table(p)


def test_numpy_scalars_do_not_leak_into_tables(tmp_path):
    p = tmp_path / "n.csv"
    write_table(p, "demo", ("v",), [(np.float64(0.5),)])
    assert "np.float64" not in p.read_text()
    assert p.read_text().splitlines()[2] == "0.5"


# ---------------------------------------------------------------------------
# check: exit codes and report content


def test_check_passes_on_moving_ball(tmp_path):
    assert run_cli(["check", "--config", fixture_path("ball_shrink"),
                    "--out", tmp_path]) == 0
    _, header, rows = read_rows(tmp_path / "hypothesis_report.csv")
    assert header == ["check", "status", "value", "detail"]
    by_name = {r[0]: r[1] for r in rows}
    assert by_name["inverse"] == "pass"
    assert by_name["H1"] == "pass"
    # the sampled-horizon consistency probe flags this geometry, which is
    # reported without failing the run
    assert by_name["H4"] == "advisory"
    assert "fail" not in {r[1] for r in rows}


def test_check_identity_is_fully_consistent(tmp_path):
    assert run_cli(["check", "--config", fixture_path("identity"),
                    "--out", tmp_path]) == 0
    by_name = {r[0]: r[1] for r in read_rows(tmp_path / "hypothesis_report.csv")[2]}
    assert by_name["H4"] == "pass"


def test_check_rejects_rotation_with_witness(tmp_path):
    assert run_cli(["check", "--config", fixture_path("rotation"),
                    "--out", tmp_path]) == 1
    _, _, rows = read_rows(tmp_path / "hypothesis_report.csv")
    by_name = {r[0]: r for r in rows}
    assert by_name["H1"][1] == "fail"
    # the witness row pins the sample where separability breaks
    assert "H1_witness" in by_name
    assert "t=" in by_name["H1_witness"][3]


def test_check_rejects_cubic_for_sign_condition(tmp_path):
    assert run_cli(["check", "--config", fixture_path("cubic"),
                    "--out", tmp_path]) == 1
    by_name = {r[0]: r[1] for r in read_rows(tmp_path / "hypothesis_report.csv")[2]}
    assert by_name["H2"] == "pass"
    assert by_name["H3"] == "fail"


def test_check_rejects_quintic_for_growth(tmp_path):
    assert run_cli(["check", "--config", fixture_path("quintic"),
                    "--out", tmp_path]) == 1
    by_name = {r[0]: r[1] for r in read_rows(tmp_path / "hypothesis_report.csv")[2]}
    assert by_name["H2"] == "fail"


def test_check_accepts_bounded_nonlinearity(tmp_path):
    assert run_cli(["check", "--config", fixture_path("sin_u"),
                    "--out", tmp_path]) == 0


def test_malformed_expression_exits_2(tmp_path, capsys):
    p = tmp_path / "bad.cfg"
    p.write_text('[problem]\ndim = 1\nextents = 1.0\n'
                 'forward = "y1 + "\ninverse = "x1"\nbeta = 1.0\n')
    assert run_cli(["check", "--config", p, "--out", tmp_path]) == 2
    assert "offset" in capsys.readouterr().err


def test_missing_config_exits_2(tmp_path):
    assert run_cli(["check", "--config", tmp_path / "nope.cfg",
                    "--out", tmp_path]) == 2


def test_degenerate_map_exits_1(tmp_path):
    p = tmp_path / "flat.cfg"
    # collapsing the inverse makes the metric singular
    p.write_text('[problem]\ndim = 1\nextents = 1.0\n'
                 'forward = "y1"\ninverse = "x1 * 0"\nbeta = 1.0\n')
    assert run_cli(["check", "--config", p, "--out", tmp_path]) == 1


# ---------------------------------------------------------------------------
# transform


def test_transform_identity_symbolic(tmp_path):
    assert run_cli(["transform", "--config", fixture_path("identity"),
                    "--out", tmp_path]) == 0
    _, _, rows = read_rows(tmp_path / "transform_symbolic.csv")
    by_entry = dict((r[0], r[1]) for r in rows)
    assert float(by_entry["a_11"]) == 1.0
    assert float(by_entry["b_1"]) == 0.0
    ks = [v for k, v in by_entry.items() if k.startswith("K[")]
    assert ks and all(float(v) == 1.0 for v in ks)


def test_transform_moving_ball_samples(tmp_path):
    assert run_cli(["transform", "--config", fixture_path("ball_shrink"),
                    "--out", tmp_path]) == 0
    _, header, rows = read_rows(tmp_path / "transform_samples.csv")
    i_t = header.index("t")
    i_a11 = header.index("a_11")
    i_a12 = header.index("a_12")
    i_b1 = header.index("b_1")
    at_t1 = [r for r in rows if float(r[i_t]) == 1.0]
    assert at_t1
    for r in at_t1:
        assert float(r[i_a11]) == pytest.approx(BALL_SHRINK_A11_AT_T1, abs=1e-12)
        assert float(r[i_a12]) == 0.0
    # drift scales linearly in the radial coordinate
    i_y1 = header.index("y1")
    slopes = {float(r[i_b1]) / float(r[i_y1]) for r in at_t1 if float(r[i_y1]) > 0.1}
    assert max(slopes) - min(slopes) < 1e-12

    _, bh, brows = read_rows(tmp_path / "transform_boundary.csv")
    i_K = bh.index("K")
    k1 = [float(r[i_K]) for r in brows if float(r[bh.index("t")]) == 1.0]
    h1 = np.exp(-1.0) + 1.0
    assert k1 and all(abs(v - 1.0 / h1) < 1e-12 for v in k1)


def test_transform_refuses_failing_config(tmp_path):
    assert run_cli(["transform", "--config", fixture_path("rotation"),
                    "--out", tmp_path]) == 1
    assert not (tmp_path / "transform_symbolic.csv").exists()


# ---------------------------------------------------------------------------
# solve


def test_solve_writes_metrics_and_snapshots(tmp_path):
    assert run_cli(["solve", "--config", fixture_path("identity"),
                    "--out", tmp_path]) == 0
    _, header, rows = read_rows(tmp_path / "metrics.csv")
    assert header == ["step", "t", "L2", "H1", "mass",
                      "boundary_residual", "cg_iters"]
    assert len(rows) == 101  # 100 steps plus the initial row
    assert float(rows[0][1]) == 0.0
    assert float(rows[-1][1]) == 1.0
    # cos(pi y) is a homogeneous eigenmode: L2 norm decays like
    # exp(-(pi^2 + beta) t)
    rate = np.log(float(rows[0][2]) / float(rows[-1][2]))
    assert rate == pytest.approx(np.pi**2 + 1.0, rel=1e-3)

    snaps = sorted(tmp_path.glob("fixed_*.snap"))
    movings = sorted(tmp_path.glob("moving_*.csv"))
    assert len(snaps) == len(movings) == 6  # every 20 of 100 steps, plus final


def test_solve_moving_frame_uses_forward_map(tmp_path):
    assert run_cli(["solve", "--config", fixture_path("ball_shrink"),
                    "--out", tmp_path]) == 0
    _, header, rows = read_rows(sorted(tmp_path.glob("moving_*.csv"))[-1])
    assert header == ["t", "x1", "x2", "x3", "u"]
    t = float(rows[0][0])
    assert t == 1.0
    # the physical radial coordinate is y / (exp(-t^2) + 1)
    h = np.exp(-1.0) + 1.0
    xs = np.array([float(r[1]) for r in rows])
    assert xs.max() < 1.0 / h + 1e-9
    assert np.all(np.array([float(r[2]) for r in rows]) == 0.0)


def test_solve_needs_initial_data(tmp_path):
    assert run_cli(["solve", "--config", fixture_path("sin_t"),
                    "--out", tmp_path]) == 2


def test_solver_blowup_exits_3(tmp_path):
    p = tmp_path / "blow.cfg"
    p.write_text('[problem]\ndim = 1\nextents = 1.0\n'
                 'forward = "y1"\ninverse = "x1"\nbeta = 1.0\n'
                 'f = "sin(u) * 1e12"\ninitial = "1 + y1"\n'
                 '[numerics]\ngrid = 16\ndt = 0.5\n'
                 '[experiment]\ntau = 0.0\nt = 2.0\n')
    assert run_cli(["solve", "--config", p, "--out", tmp_path]) == 3


# ---------------------------------------------------------------------------
# mms


def test_mms_orders_table(tmp_path):
    assert run_cli(["mms", "--config", fixture_path("identity"),
                    "--out", tmp_path]) == 0
    _, _, rows = read_rows(tmp_path / "orders.csv")
    spatial = [float(r[2]) for r in rows if r[0] == "spatial_order"]
    temporal = [float(r[2]) for r in rows if r[0] == "temporal_order"]
    assert spatial and all(abs(o - 2.0) < 0.3 for o in spatial)
    assert temporal and all(abs(o - 2.0) < 0.3 for o in temporal)


def test_mms_needs_exact_solution(tmp_path):
    assert run_cli(["mms", "--config", fixture_path("sin_u"),
                    "--out", tmp_path]) == 2


# ---------------------------------------------------------------------------
# pullback


@pytest.fixture(scope="module")
def identity_pullback(tmp_path_factory):
    out = tmp_path_factory.mktemp("pb")
    code = run_cli(["pullback", "--config", fixture_path("identity"),
                    "--out", out])
    return code, out


def test_pullback_report_sections(identity_pullback):
    code, out = identity_pullback
    assert code == 0
    _, header, rows = read_rows(out / "pullback_report.csv")
    assert header == ["section", "name", "value", "detail"]
    sections = {r[0] for r in rows}
    assert sections == {"decay", "drift", "gaps", "radius", "cocycle",
                        "factorization"}
    by = {(r[0], r[1]): float(r[2]) for r in rows}
    assert by[("decay", "b")] >= 0.9
    assert by[("cocycle", "residual")] == 0.0
    # static geometry: no drift, and the homogeneous factorization is exact
    assert by[("drift", "gap=1.0")] == 0.0
    assert by[("factorization", "H1")] == 0.0
    assert by[("gaps", "cauchy")] == 1.0
    assert by[("gaps", "truncated")] == 0.0
    gaps = [float(r[2]) for r in rows if r[0] == "gaps" and r[1].startswith("k=")]
    assert len(gaps) == 5
    assert all(b < a for a, b in zip(gaps[1:4], gaps[2:5]))


def test_pullback_plot_files(identity_pullback):
    _, out = identity_pullback
    _, _, grows = read_rows(out / "gaps_plot.csv")
    assert [int(r[0]) for r in grows] == [0, 1, 2, 3, 4]
    _, _, drows = read_rows(out / "drift_plot.csv")
    assert [float(r[0]) for r in drows] == [1.0, 2.0, 4.0, 8.0]


def test_pullback_is_deterministic(tmp_path):
    cfg = tmp_path / "fast.cfg"
    cfg.write_text(
        '[problem]\ndim = 1\nextents = 1.0\n'
        'forward = "y1"\ninverse = "x1"\nbeta = 1.0\n'
        'f = "sin(t)"\n'
        '[numerics]\ngrid = 32\nscheme = crank-nicolson\ndt = 0.02\n'
        'cg_tol = 1e-12\n'
        '[experiment]\nt_star = 0.0\nk_max = 4\nhorizon = 10.0\nseeds = 2\n'
        'radii = 1.0, 10.0\nradius_k = 3\n')
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_cli(["pullback", "--config", cfg, "--out", a]) == 0
    assert run_cli(["pullback", "--config", cfg, "--out", b]) == 0
    for fn in ("pullback_report.csv", "gaps_plot.csv", "drift_plot.csv"):
        assert (a / fn).read_bytes() == (b / fn).read_bytes()


def test_pullback_jobs_deterministic(tmp_path):
    cfg = tmp_path / "fast.cfg"
    cfg.write_text(
        '[problem]\ndim = 1\nextents = 1.0\n'
        'forward = "y1"\ninverse = "x1"\nbeta = 1.0\n'
        '[numerics]\ngrid = 32\nscheme = crank-nicolson\ndt = 0.02\n'
        'cg_tol = 1e-12\n'
        '[experiment]\nt_star = 0.0\nk_max = 4\nhorizon = 10.0\nseeds = 2\n'
        'radii = 1.0, 10.0\nradius_k = 3\n')
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_cli(["pullback", "--config", cfg, "--out", a]) == 0
    assert run_cli(["pullback", "--config", cfg, "--out", b, "--jobs", 4]) == 0
    assert ((a / "pullback_report.csv").read_bytes()
            == (b / "pullback_report.csv").read_bytes())


def test_pullback_seed_changes_draws(tmp_path):
    cfg = tmp_path / "fast.cfg"
    cfg.write_text(
        '[problem]\ndim = 1\nextents = 1.0\n'
        'forward = "y1"\ninverse = "x1"\nbeta = 1.0\n'
        '[numerics]\ngrid = 32\ndt = 0.02\n'
        '[experiment]\nt_star = 0.0\nk_max = 4\nhorizon = 10.0\nseeds = 2\n'
        'radii = 1.0, 10.0\nradius_k = 3\n')
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_cli(["pullback", "--config", cfg, "--out", a, "--seed", 0]) == 0
    assert run_cli(["pullback", "--config", cfg, "--out", b, "--seed", 1]) == 0
    ra = read_rows(a / "pullback_report.csv")[2]
    rb = read_rows(b / "pullback_report.csv")[2]
    ka = [r for r in ra if r[1] == "K"][0][2]
    kb = [r for r in rb if r[1] == "K"][0][2]
    assert ka != kb


def test_pullback_step_cap_exits_4(tmp_path, capsys):
    cfg = tmp_path / "capped.cfg"
    cfg.write_text(
        '[problem]\ndim = 1\nextents = 1.0\n'
        'forward = "y1"\ninverse = "x1"\nbeta = 1.0\n'
        '[numerics]\ngrid = 16\ndt = 0.01\n'
        '[experiment]\nt_star = 0.0\nk_max = 6\nhorizon = 10.0\nseeds = 1\n'
        'radii = 1.0\nradius_k = 1\nmax_total_steps = 400\n')
    code = run_cli(["pullback", "--config", cfg, "--out", tmp_path])
    assert code == 4
    # the shortened report is still written before the resource exit
    _, _, rows = read_rows(tmp_path / "pullback_report.csv")
    by = {(r[0], r[1]): r[2] for r in rows}
    assert float(by[("gaps", "truncated")]) == 1.0


def test_pullback_short_horizon_is_config_error(tmp_path):
    cfg = tmp_path / "short.cfg"
    cfg.write_text(
        '[problem]\ndim = 1\nextents = 1.0\n'
        'forward = "y1"\ninverse = "x1"\nbeta = 1.0\n'
        '[numerics]\ngrid = 16\ndt = 0.01\n'
        '[experiment]\nt_star = 0.0\nk_max = 3\nhorizon = 2.0\nseeds = 1\n')
    assert run_cli(["pullback", "--config", cfg, "--out", tmp_path]) == 2


# ---------------------------------------------------------------------------
# environment plumbing


def test_log_level_env_is_validated(tmp_path, monkeypatch):
    monkeypatch.setenv("MOVINGDOM_LOG", "loud")
    assert run_cli(["check", "--config", fixture_path("identity"),
                    "--out", tmp_path]) == 2


def test_console_entry_point_runs():
    import subprocess
    import sys
    r = subprocess.run([sys.executable, "-m", "movingdom", "check",
                        "--config", str(fixture_path("identity")),
                        "--out", "/tmp/movingdom-entry-test"],
                       capture_output=True, text=True)
    assert r.returncode == 0
