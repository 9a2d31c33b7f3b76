import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from racenmpc import cli
from racenmpc.controller import Controller
from racenmpc.harness import (
    METRICS_SCHEMA, ConfigError, ScenarioConfig, SimResult, compute_metrics, detect_laps,
    export_results, generate_ident_data, load_result, load_series, save_result,
    solve_time_histogram, validate_metrics,
)
from racenmpc.harness import sim as sim_mod
from racenmpc.harness.datagen import suite_duration
from racenmpc.harness.export import DETERMINISTIC_FILES
from racenmpc.ident import Dataset, prediction_residuals


def make_result(n, rng=None, *, obstacles=((5.0, 0.0, 1.5),)):
    """Synthetic, internally consistent result with ``n`` ticks."""
    rng = rng or np.random.default_rng(0)
    t = np.arange(n) * 0.033
    X = np.zeros((n, 6))
    X[:, 0] = np.linspace(0, 10, n)
    X[:, 3] = rng.uniform(0.5, 4.5, n)
    U = np.column_stack([rng.uniform(0, 1, n), rng.uniform(-0.5, 0.5, n)])
    obs = np.array(obstacles, dtype=float).reshape(-1, 3)
    dist = (np.min(np.hypot(X[:, 0, None] - obs[:, 0], X[:, 1, None] - obs[:, 1]), axis=1)
            if len(obs) else np.full(n, np.inf))
    return SimResult(
        t=t, states=X, inputs=U, solve_time=rng.uniform(0, 0.05, n),
        inner_iters=rng.integers(0, 50, n), outer_iters=rng.integers(1, 5, n),
        status=["converged"] * n, degraded=np.zeros(n, bool),
        lateral_deviation=rng.uniform(0, 1.5, n), obstacle_distance=dist,
        projection_index=np.arange(n), lap_times=np.array([0.5, 7.0])[: min(n, 2)],
        obstacles=obs, half_width=1.76,
    )


def circle_positions(radius, speed, dt, t_end, phase=0.0):
    t = np.arange(0.0, t_end, dt)
    a = phase + speed * t / radius
    return np.column_stack([radius * np.cos(a), radius * np.sin(a)]), t


class TestDetectLaps:
    LINE = (np.array([5.0, 0.0]), np.array([0.0, 1.0]), 2.0)

    def test_never_crosses(self):
        pos = np.column_stack([np.linspace(-3, 3, 50), np.full(50, 1.0)])
        assert detect_laps(pos, np.arange(50) * 0.1, self.LINE).size == 0
        assert detect_laps(pos[:1], [0.0], self.LINE).size == 0

    @pytest.mark.parametrize("speed", [1.0, 2.5, 4.0])
    def test_circle_lap_time(self, speed):
        r, dt = 5.0, 0.033
        pos, t = circle_positions(r, speed, dt, 3.2 * 2 * math.pi * r / speed, phase=-0.3)
        laps = np.diff(detect_laps(pos, t, self.LINE))
        assert len(laps) == 3
        np.testing.assert_allclose(laps, 2 * math.pi * r / speed, atol=dt)

    def test_sample_on_line_counts_once(self):
        pos = np.array([[5.0, -0.2], [5.0, 0.0], [5.0, 0.2], [5.0, 0.4]])
        got = detect_laps(pos, [0.0, 1.0, 2.0, 3.0], self.LINE)
        np.testing.assert_array_equal(got, [1.0])

    def test_direction_and_extent(self):
        backwards = np.array([[5.0, 0.2], [5.0, -0.2]])
        assert detect_laps(backwards, [0, 1], self.LINE).size == 0
        # crosses the infinite line but outside the segment
        far = np.array([[8.0, -0.2], [8.0, 0.2]])
        assert detect_laps(far, [0, 1], (np.array([5.0, 0.0]), np.array([0.0, 1.0]), 2.0)).size == 0


class TestMetrics:
    def test_single_tick(self):
        r = make_result(1)
        m = compute_metrics(r)
        assert m.solve_time_mean == m.solve_time_max == r.solve_time[0]
        assert sum(m.histogram) == 1

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            compute_metrics(SimResult.empty())

    def test_handcrafted_violations(self):
        r = make_result(10, obstacles=())
        r.states[:, 3] = 2.0
        r.inputs[:] = [0.5, 0.0]
        r.lateral_deviation[:] = 0.5
        r.lateral_deviation[[2, 7]] = 1.8      # 2 lateral
        r.inputs[4] = [1.0 + 1e-12, 0.0]       # input bounds are exact
        r.inputs[5] = [0.5, -math.pi / 6 - 1e-9]
        r.states[6, 3] = 5.0005                # inside the speed slack
        r.states[8, 3] = 5.002                 # outside
        r.states[9, 3] = -2e-6                 # outside
        v = compute_metrics(r).violations
        assert (v.lateral, v.input, v.speed, v.obstacle) == (2, 2, 2, 0)
        assert v.total == 6

    def test_obstacle_violation_and_distance(self):
        r = make_result(11, obstacles=((5.0, 0.0, 1.5),))
        m = compute_metrics(r)
        # x passes through 5.0 exactly, so the car drives over the obstacle centre
        assert m.min_obstacle_distance == pytest.approx(0.0, abs=1e-12)
        expected = int(np.sum(np.abs(r.states[:, 0] - 5.0) < 1.45))
        assert m.violations.obstacle == expected

    def test_no_obstacles_gives_none(self):
        assert compute_metrics(make_result(5, obstacles=())).min_obstacle_distance is None

    @given(st.lists(st.floats(0.0, 1.0, allow_nan=False), min_size=1, max_size=300))
    def test_histogram_sums_to_ticks(self, times):
        h = solve_time_histogram(times)
        assert len(h) == 34
        assert h.sum() == len(times)
        assert h[-1] == sum(1 for v in times if v * 1e3 >= 33.0)


class TestExport:
    def test_empty_result_headers_only(self, tmp_path):
        paths = export_results(SimResult.empty(), None, tmp_path)
        for name in ("trajectory", "inputs", "laps", "timing", "histogram"):
            assert len(paths[name].read_text().splitlines()) == 1
        assert not (tmp_path / "metrics.json").exists()

    def test_trajectory_roundtrip(self, tmp_path):
        r = make_result(40)
        export_results(r, compute_metrics(r), tmp_path, figures=False)
        traj = load_series(tmp_path / "trajectory.csv")
        np.testing.assert_array_equal(traj["t"], r.t)
        for j, name in enumerate(("p_x", "p_y", "phi", "v_x", "v_y", "omega")):
            np.testing.assert_array_equal(traj[name], r.states[:, j])
        inp = load_series(tmp_path / "inputs.csv")
        np.testing.assert_array_equal(inp["delta"], r.inputs[:, 1])
        np.testing.assert_allclose(inp["delta_deg"], np.degrees(r.inputs[:, 1]))

    def test_result_file_roundtrip(self, tmp_path):
        r = make_result(25, obstacles=())
        back = load_result(save_result(r, tmp_path / "r.json"))
        np.testing.assert_array_equal(back.states, r.states)
        np.testing.assert_array_equal(back.obstacle_distance, r.obstacle_distance)
        assert back.status == r.status
        a, b = tmp_path / "a", tmp_path / "b"
        export_results(r, compute_metrics(r), a, figures=False)
        export_results(back, compute_metrics(back), b, figures=False)
        for name in DETERMINISTIC_FILES + ("metrics.json",):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_schema_validates_random_runs(self, tmp_path):
        rng = np.random.default_rng(7)
        for i in range(10):
            r = make_result(int(rng.integers(1, 200)), rng,
                            obstacles=() if i % 3 == 0 else ((3.0, 1.0, 1.5), (8.0, -1.0, 1.5)))
            export_results(r, compute_metrics(r), tmp_path / str(i), figures=False)
            validate_metrics(json.loads((tmp_path / str(i) / "metrics.json").read_text()))
        assert json.loads((tmp_path / "0" / "metrics.schema.json").read_text()) == METRICS_SCHEMA

    def test_schema_rejects_bad_document(self):
        import jsonschema

        doc = json.loads(json.dumps(compute_metrics(make_result(3)).to_dict()))
        doc["schema_version"] = "1.0"
        validate_metrics(doc)
        doc["histogram"] = doc["histogram"][:-1]
        with pytest.raises(jsonschema.ValidationError):
            validate_metrics(doc)

    def test_unwritable_directory_reports_path(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError, match="file"):
            export_results(make_result(3), None, blocker / "sub")

    def test_figures_written(self, tmp_path):
        r = make_result(30)
        paths = export_results(r, compute_metrics(r), tmp_path)
        for name in ("trajectory.png", "inputs.png", "histogram.png"):
            assert (tmp_path / name).stat().st_size > 0


class TestDatagen:
    def test_standard_suite_size(self):
        assert suite_duration("standard") == pytest.approx(83.7)
        assert len(generate_ident_data("standard")) == 1674

    def test_zero_noise_replays_exactly(self, params):
        data = generate_ident_data("short")
        R = prediction_residuals(data, params.zeta, params.chassis)
        assert np.nanmax(np.abs(R)) < 1e-12

    def test_seed_reproduces_bytes(self, tmp_path):
        a, b, c = (tmp_path / f"{n}.csv" for n in "abc")
        generate_ident_data("short", noise=0.01, seed=3).to_csv(a)
        generate_ident_data("short", noise=0.01, seed=3).to_csv(b)
        generate_ident_data("short", noise=0.01, seed=4).to_csv(c)
        assert a.read_bytes() == b.read_bytes()
        assert a.read_bytes() != c.read_bytes()

    def test_noise_only_on_velocities(self):
        clean = generate_ident_data("short")
        noisy = generate_ident_data("short", noise=0.01, seed=1)
        np.testing.assert_array_equal(clean.states[:, :3], noisy.states[:, :3])
        np.testing.assert_array_equal(clean.inputs, noisy.inputs)
        assert np.std(noisy.states[:, 3:] - clean.states[:, 3:]) == pytest.approx(0.01, rel=0.1)

    def test_unknown_suite(self):
        with pytest.raises(ValueError, match="suite"):
            generate_ident_data("nope")


class TestScenarioConfig:
    def test_period_must_be_multiple_of_plant_dt(self):
        with pytest.raises(ConfigError, match="integer multiple"):
            ScenarioConfig(plant_dt=0.002, control_period=0.033)
        assert ScenarioConfig().substeps == 33

    def test_laps(self):
        with pytest.raises(ConfigError):
            ScenarioConfig(laps=0)

    def test_unknown_key_and_json_position(self, tmp_path):
        with pytest.raises(ConfigError, match="unknown"):
            ScenarioConfig.from_dict({"lapz": 3})
        bad = tmp_path / "s.json"
        bad.write_text('{"laps": 3,\n "track": }')
        with pytest.raises(ConfigError, match=r"s.json:2:"):
            ScenarioConfig.load(bad)

    def test_dict_roundtrip(self):
        cfg = ScenarioConfig(laps=2, obstacles=False, name="x")
        back = ScenarioConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert back == cfg


class _Spy(Controller):
    def __init__(self, *a, **k):
        super().__init__(*a, **k)
        self.returned = []

    def reset(self):
        super().reset()
        self.returned = []  # drop the warmup solve

    def step(self, x):
        u, hs = super().step(x)
        self.returned.append(u.as_array().copy())
        return u, hs


def _short_run(cfg, controller=None):
    return sim_mod.run_closed_loop(cfg, controller)


class TestClosedLoop:
    def test_plant_equals_prediction(self, params):
        cfg = ScenarioConfig(obstacles=False, plant_integrator="euler", max_time_per_lap=1.0)
        r = _short_run(cfg)
        assert r.aborted  # the time budget is far below one lap
        assert len(r) > 20
        np.testing.assert_allclose(r.predicted_next[:-1], r.states[1:], atol=1e-10, rtol=0)

    def test_substeps_and_logged_inputs(self, params, monkeypatch):
        calls = []
        real = sim_mod.simulate_substeps

        def counting(x, u, dt, n, p, no_rev=True):
            calls.append((dt, n, np.array(u)))
            return real(x, u, dt, n, p, no_rev)

        monkeypatch.setattr(sim_mod, "simulate_substeps", counting)
        cfg = ScenarioConfig(obstacles=False, max_time_per_lap=0.5)
        layout = cfg.layout()
        spy = _Spy(params, layout, cfg.ocp, cfg.solver)
        r = _short_run(cfg, spy)
        assert all(n == 33 and dt == pytest.approx(0.001) for dt, n, _ in calls)
        np.testing.assert_array_equal(np.array(spy.returned), r.inputs)
        for (_, _, u), logged in zip(calls, r.inputs):
            np.testing.assert_array_equal(u, logged)
        np.testing.assert_allclose(np.diff(r.t), 0.033, rtol=0, atol=1e-12)

    def test_blowup_aborts_with_partial_log(self, monkeypatch):
        from racenmpc.dynamics import NumericalBlowupError

        count = {"n": 0}
        real = sim_mod.simulate_substeps

        def failing(*a):
            count["n"] += 1
            if count["n"] > 4:
                raise NumericalBlowupError("injected")
            return real(*a)

        monkeypatch.setattr(sim_mod, "simulate_substeps", failing)
        r = _short_run(ScenarioConfig(obstacles=False))
        assert r.aborted and "injected" in r.abort_reason
        assert len(r) == 5
        assert compute_metrics(r).aborted


class TestCli:
    def test_gen_data_identify(self, tmp_path, capsys):
        data = tmp_path / "d.csv"
        assert cli.main(["gen-data", "--suite", "short", "--seed", "1", "--noise", "0",
                         "--out", str(data)]) == 0
        assert len(Dataset.from_csv(data)) == 190
        bounds = tmp_path / "b.json"
        from racenmpc.dynamics import ZETA_NAMES, VehicleParams

        z = VehicleParams.default().zeta
        bounds.write_text(json.dumps({n: [0.8 * v, 1.5 * v] for n, v in zip(ZETA_NAMES, z)}))
        out = tmp_path / "fit"
        assert cli.main(["identify", "--data", str(data), "--bounds", str(bounds),
                         "--out", str(out), "--no-figures"]) == 0
        report = json.loads((out / "fit_report.json").read_text())
        assert report["cost"] <= report["cost0"]
        assert (out / "vehicle.json").exists()

    def test_bad_inputs_exit_1(self, tmp_path, capsys):
        assert cli.main(["identify", "--data", str(tmp_path / "missing.csv"),
                         "--bounds", "x.json"]) == 1
        with pytest.raises(SystemExit) as exc:
            cli.main(["race"])
        assert exc.value.code == 1
        bad = tmp_path / "s.json"
        bad.write_text('{"laps": 0}')
        assert cli.main(["race", "--scenario", str(bad)]) == 1

    def test_race_and_export_exit_codes(self, tmp_path, capsys):
        scen = tmp_path / "s.json"
        scen.write_text(json.dumps({"name": "short", "obstacles": False, "max_time_per_lap": 0.5}))
        out = tmp_path / "run"
        assert cli.main(["race", "--scenario", str(scen), "--out", str(out),
                         "--no-figures"]) == cli.EXIT_ABORTED
        assert (out / "result.json").exists()
        again = tmp_path / "again"
        assert cli.main(["export", "--result", str(out / "result.json"), "--out", str(again),
                         "--no-figures"]) == cli.EXIT_ABORTED
        for name in DETERMINISTIC_FILES:
            assert (out / name).read_bytes() == (again / name).read_bytes()

    def test_violating_run_exits_2(self, tmp_path):
        r = make_result(10, obstacles=())
        r.lateral_deviation[3] = 5.0
        path = save_result(r, tmp_path / "r.json")
        assert cli.main(["export", "--result", str(path), "--out", str(tmp_path / "e"),
                         "--no-figures"]) == cli.EXIT_VIOLATION
