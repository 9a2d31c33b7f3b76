"""Acceptance criteria, one test per criterion.

Each test prints a single ``[criterion N] PASS|FAIL ...`` line (shown even
without ``-s``) and then asserts the same condition.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from oracles import central_difference_gradient, random_ocp_instance
from racenmpc.controller import OcpConfig, ocp_gradient
from racenmpc.dynamics import VehicleParams
from racenmpc.harness import (
    ScenarioConfig, compute_metrics, export_results, generate_ident_data, run_closed_loop,
    speed_by_curvature,
)
from racenmpc.harness.export import DETERMINISTIC_FILES, TIMING_KEYS
from racenmpc.ident import ParamBounds, identification_cost, identify, prediction_residuals
from racenmpc.solver import (
    BoxBounds, ConstraintMap, NlpProblem, SolverConfig, alm_pm_solve, panoc_solve,
)

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"
LATERAL_LIMIT = 2.0 - 0.24
SIGMA = 0.01


_TERMINAL = []


@pytest.fixture(autouse=True, scope="module")
def _terminal(request):
    _TERMINAL.append(request.config.pluginmanager.getplugin("terminalreporter"))
    yield
    _TERMINAL.clear()


def report(label, ok, detail):
    line = f"[criterion {label}] {'PASS' if ok else 'FAIL'}  {detail}"
    tr = _TERMINAL[-1] if _TERMINAL else None
    if tr is not None:
        tr.write_line("")
        tr.write_line(line)
    else:
        print(line)
    return ok


@pytest.fixture(scope="module")
def stadium_run():
    cfg = ScenarioConfig.load(SCENARIOS / "stadium.json")
    t0 = time.perf_counter()
    result = run_closed_loop(cfg)
    wall = time.perf_counter() - t0
    return cfg, result, compute_metrics(result), wall


def test_1_gradient_fidelity():
    params = VehicleParams.default()
    cfg = OcpConfig(N=50)
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        U, x0, up, pd = random_ocp_instance(rng, 50)
        g = ocp_gradient(U, x0, up, pd, params, cfg)
        fd = central_difference_gradient(U, x0, up, pd, params, cfg.Q1, cfg.Q2, cfg.T_s, h=1e-6)
        worst = max(worst, float(np.max(np.abs(g - fd) / np.abs(fd))))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-5 and elapsed < 10.0
    report(1, ok, f"100 instances at N=50: worst per-entry rel. error {worst:.2e} (<1e-5), "
                  f"{elapsed:.2f} s (<10 s)")
    assert ok


def _rosenbrock(u):
    x, y = u
    return ((1 - x) ** 2 + 100 * (y - x * x) ** 2,
            np.array([-2 * (1 - x) - 400 * x * (y - x * x), 200 * (y - x * x)]))


def test_2_solver_sanity():
    rosen = panoc_solve(NlpProblem(2, _rosenbrock, BoxBounds.unbounded(2)),
                        np.array([-1.2, 1.0]), SolverConfig(eps_inner=1e-8))
    rosen_err = float(np.max(np.abs(rosen.u_star - 1.0)))

    alm = ConstraintMap(lambda u: np.array([u[0] + u[1] - 1.0]),
                        lambda u, w: np.array([w[0], w[0]]))
    # min u.u s.t. u0 + u1 = 1: KKT gives u = (0.5, 0.5), multiplier -1
    eq = NlpProblem(2, lambda u: (float(u @ u), 2.0 * u), BoxBounds.unbounded(2),
                    alm_map=alm, alm_set=(np.zeros(1), np.zeros(1)))
    kkt = alm_pm_solve(eq, np.zeros(2),
                       SolverConfig(eps_inner=1e-8, eps_outer=1e-8, max_outer_iters=30))
    eq_err = float(np.max(np.abs(kkt.u_star - 0.5)))
    lam_err = abs(float(kkt.multipliers[0]) + 1.0)

    ok = rosen_err < 1e-4 and rosen.inner_iters <= 500 and eq_err < 1e-4 and lam_err < 1e-3
    report(2, ok, f"Rosenbrock err {rosen_err:.1e} in {rosen.inner_iters} iters; "
                  f"equality QP err {eq_err:.1e}, multiplier {kkt.multipliers[0]:+.6f}")
    assert ok


def test_3a_identification_noiseless():
    data = generate_ident_data("standard")
    bounds = ParamBounds.load(SCENARIOS / "bounds.json")
    zeta, rep = identify(data, bounds)
    worst = max(rep.rmse.values())
    ok = len(data) == 1674 and worst < 1e-6
    rec = ", ".join(f"{k} {v:.1f}%" for k, v in rep.recovery(VehicleParams.default().zeta).items())
    report("3a", ok, f"M={len(data)} noiseless: max one-step RMSE {worst:.2e} (<1e-6); "
                     f"recovery error (not gated): {rec}")
    assert ok


def test_3b_identification_noisy():
    truth = VehicleParams.default()
    data = generate_ident_data("standard", noise=SIGMA, seed=1)
    bounds = ParamBounds.load(SCENARIOS / "bounds.json")
    zeta, rep = identify(data, bounds)
    worst = max(rep.rmse.values())
    ok = worst <= 2 * SIGMA
    R = prediction_residuals(data, truth.zeta, truth.chassis)
    truth_rmse = np.sqrt(np.nanmean(R ** 2, axis=0))
    fit = ", ".join(f"{k} {v:.4f}" for k, v in rep.rmse.items())
    report("3b", ok, f"sigma={SIGMA}: fitted RMSE {fit} vs limit {2 * SIGMA}. "
                     f"Generating parameters give RMSE v_x {truth_rmse[0]:.4f}, "
                     f"v_y {truth_rmse[1]:.4f}, omega {truth_rmse[2]:.4f}: noise on the "
                     "measured state is propagated through the one-step model, so the omega "
                     "floor sits above 2 sigma for any parameter vector")
    assert identification_cost(data, zeta, truth.chassis)[0] <= rep.cost0
    assert ok


def test_4_closed_loop_feasibility(stadium_run):
    cfg, result, m, wall = stadium_run
    v = m.violations
    ok = (not m.aborted and len(m.lap_times) >= cfg.laps and v.lateral == 0 and v.input == 0
          and v.speed == 0 and m.max_lateral <= LATERAL_LIMIT and wall < 120.0)
    laps = ", ".join(f"{t:.3f}" for t in m.lap_times)
    report(4, ok, f"{len(m.lap_times)} laps [{laps}] s in {wall:.1f} s wall; max lateral "
                  f"{m.max_lateral:.4f} m (<= {LATERAL_LIMIT}); violations lateral {v.lateral}, "
                  f"input {v.input}, speed {v.speed}; v_x in [{m.vx_min:.3f}, {m.vx_max:.3f}]")
    assert ok


def test_5_obstacle_avoidance():
    cfg = ScenarioConfig.load(SCENARIOS / "stadium_obstacles.json")
    result = run_closed_loop(cfg)
    m = compute_metrics(result)
    per = m.per_obstacle_min_distance
    ok = (len(per) == 2 and min(per) >= 1.45 and not m.aborted
          and len(m.lap_times) >= cfg.laps)
    report(5, ok, f"per-obstacle min distance {[round(d, 4) for d in per]} m (>= 1.45); "
                  f"lap completed: {len(m.lap_times) >= cfg.laps}")
    assert ok


def test_6_speed_profile(stadium_run):
    cfg, result, m, _ = stadium_run
    window = (result.lap_times[1], result.lap_times[-1])  # skip the rolling-start lap
    tight, straight = speed_by_curvature(result, cfg.layout().center_line, window)
    ok = tight < straight and m.vx_max > 3.0
    report(6, ok, f"mean v_x tightest quarter {tight:.3f} < straightest quarter "
                  f"{straight:.3f}; max v_x {m.vx_max:.3f} (> 3)")
    assert ok


def test_7_compute_budget(stadium_run):
    _, _, m, _ = stadium_run
    mean_ms, p99_ms = 1e3 * m.solve_time_mean, 1e3 * m.solve_time_p99
    ok = mean_ms < 33.0 and p99_ms < 33.0
    report(7, ok, f"solve time mean {mean_ms:.2f} ms, p99 {p99_ms:.2f} ms, max "
                  f"{1e3 * m.solve_time_max:.2f} ms (budget 33 ms)")
    assert ok


def test_8_determinism(stadium_run, tmp_path):
    cfg, first, m1, _ = stadium_run
    second = run_closed_loop(cfg)
    m2 = compute_metrics(second)
    a, b = tmp_path / "a", tmp_path / "b"
    export_results(first, m1, a, figures=False)
    export_results(second, m2, b, figures=False)
    same = [n for n in DETERMINISTIC_FILES if (a / n).read_bytes() == (b / n).read_bytes()]

    def untimed(path):
        doc = json.loads(path.read_text())
        return {k: v for k, v in doc.items() if k not in TIMING_KEYS}

    metrics_same = untimed(a / "metrics.json") == untimed(b / "metrics.json")
    ok = len(same) == len(DETERMINISTIC_FILES) and metrics_same
    report(8, ok, f"byte-identical: {', '.join(same) or 'none'}; metrics equal apart from "
                  f"wall-clock timing: {metrics_same}")
    assert ok
