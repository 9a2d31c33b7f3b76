"""Closed-loop simulation: NMPC at the controller period, RK4 plant in between."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ..controller import Controller
from ..dynamics import NumericalBlowupError, VehicleState, _deriv, simulate_substeps
from ..track import TrackLayout, project
from .config import ScenarioConfig

log = logging.getLogger(__name__)

MAX_DEGRADED_TICKS = 10


@dataclass
class SimResult:
    """Per-tick log of a closed-loop run (all arrays share the first dimension)."""

    t: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    solve_time: np.ndarray
    inner_iters: np.ndarray
    outer_iters: np.ndarray
    status: list
    degraded: np.ndarray
    lateral_deviation: np.ndarray
    obstacle_distance: np.ndarray
    projection_index: np.ndarray
    lap_times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    aborted: bool = False
    abort_reason: str = ""
    predicted_next: np.ndarray | None = None
    obstacles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))  # x, y, Gamma
    half_width: float = float("nan")
    input_bounds: tuple = ((0.0, -math.pi / 6), (1.0, math.pi / 6))
    vx_bounds: tuple = (0.0, 5.0)
    control_period: float = 0.033
    center_line: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))

    def __len__(self):
        return len(self.t)

    @classmethod
    def empty(cls) -> "SimResult":
        z = np.zeros(0)
        return cls(t=z, states=np.zeros((0, 6)), inputs=np.zeros((0, 2)), solve_time=z,
                   inner_iters=np.zeros(0, int), outer_iters=np.zeros(0, int), status=[],
                   degraded=np.zeros(0, bool), lateral_deviation=z, obstacle_distance=z,
                   projection_index=np.zeros(0, int))


def start_line(layout: TrackLayout, index: int = 0):
    """Start-line segment through center-line sample ``index``, perpendicular to the track.

    Returns ``(point, tangent, half_length)``; crossings are counted in the
    direction of ``tangent``.
    """
    pts = layout.center_line.points
    K = len(pts)
    t = pts[(index + 1) % K] - pts[index - 1]
    t = t / np.hypot(*t)
    return pts[index].copy(), t, layout.R_g


def detect_laps(positions, times, line) -> np.ndarray:
    """Timestamps of directed crossings of the start-line segment.

    A sample lying exactly on the line counts as crossed when the previous
    sample was strictly behind it, so a boundary sample is never counted twice.
    Crossing times are interpolated linearly between samples.
    """
    positions = np.asarray(positions, dtype=float)
    times = np.asarray(times, dtype=float)
    if len(positions) < 2:
        return np.zeros(0)
    p0, tangent, half = line
    normal = np.array([-tangent[1], tangent[0]])
    rel = positions - p0
    s = rel @ tangent
    lat = rel @ normal
    out = []
    for k in range(1, len(s)):
        if s[k - 1] < 0.0 <= s[k]:
            a = -s[k - 1] / (s[k] - s[k - 1])
            lat_c = lat[k - 1] + a * (lat[k] - lat[k - 1])
            if abs(lat_c) <= half:
                out.append(times[k - 1] + a * (times[k] - times[k - 1]))
    return np.array(out)


def _obstacle_distance(p, obstacles: np.ndarray) -> float:
    if obstacles.size == 0:
        return math.inf
    return float(np.min(np.hypot(obstacles[:, 0] - p[0], obstacles[:, 1] - p[1])))


def run_closed_loop(cfg: ScenarioConfig, controller: Controller | None = None) -> SimResult:
    """Race the scenario for ``cfg.laps`` laps (or until aborted)."""
    params = cfg.vehicle_params()
    layout = cfg.layout()
    ocp_cfg = cfg.ocp
    if cfg.plant_integrator == "euler" and abs(ocp_cfg.T_s - cfg.control_period) > 1e-12:
        log.warning("euler plant with T_s != control period; model match is not exact")
    ctrl = controller or Controller(params, layout, ocp_cfg, cfg.solver)
    ctrl.warmup()
    ctrl.reset()
    packed = params.packed()
    obstacles = layout.obstacle_array()
    line = start_line(layout, 0)
    n_sub = cfg.substeps
    dt_plant = cfg.control_period / n_sub if cfg.plant_integrator == "rk4" else cfg.control_period
    max_ticks = int(math.ceil(cfg.max_time_per_lap * cfg.laps / cfg.control_period))

    x = cfg.start_state(layout).as_array()
    rows = {k: [] for k in ("t", "x", "u", "st", "ii", "oi", "deg", "lat", "obs", "idx", "pred")}
    status = []
    crossings = 0
    degraded_run = 0
    aborted, reason = False, ""
    prev_pos = x[:2].copy()
    hint = None

    for tick in range(max_ticks):
        t = tick * cfg.control_period
        u, hs = ctrl.step(VehicleState.from_array(x))
        u_arr = u.as_array()
        sol = hs.solution
        pr = project(layout.center_line, x[:2], hint, None if hint is None else ocp_cfg.window)
        hint = pr.index
        rows["t"].append(t)
        rows["x"].append(x.copy())
        rows["u"].append(u_arr)
        rows["st"].append(sol.solve_time)
        rows["ii"].append(sol.inner_iters)
        rows["oi"].append(sol.outer_iters)
        rows["deg"].append(hs.degraded)
        rows["lat"].append(pr.distance)
        rows["obs"].append(_obstacle_distance(x, obstacles))
        rows["idx"].append(pr.index)
        rows["pred"].append(hs.predicted_states[1].copy())
        status.append(sol.status.value)

        if tick > 0:
            crossings += len(detect_laps(np.vstack([prev_pos, x[:2]]),
                                         [t - cfg.control_period, t], line))
        prev_pos = x[:2].copy()
        if crossings >= cfg.laps + 1:
            break

        degraded_run = degraded_run + 1 if hs.degraded else 0
        if degraded_run > MAX_DEGRADED_TICKS:
            aborted, reason = True, f"controller degraded for {degraded_run} consecutive ticks"
            break
        try:
            if cfg.plant_integrator == "rk4":
                x = simulate_substeps(x, u_arr, dt_plant, n_sub, packed, True)
            else:
                x = x + dt_plant * _deriv(x, u_arr, packed, True)
                if not np.isfinite(x).all():
                    raise NumericalBlowupError("plant state is not finite")
        except NumericalBlowupError as exc:
            aborted, reason = True, f"plant blowup: {exc}"
            break
    else:
        aborted, reason = True, f"lap count not reached within {max_ticks} ticks"

    if aborted:
        log.warning("run %s aborted: %s", cfg.name, reason)
    t_arr = np.array(rows["t"])
    states = np.array(rows["x"]).reshape(-1, 6)
    result = SimResult(
        t=t_arr, states=states, inputs=np.array(rows["u"]).reshape(-1, 2),
        solve_time=np.array(rows["st"]), inner_iters=np.array(rows["ii"], dtype=int),
        outer_iters=np.array(rows["oi"], dtype=int), status=status,
        degraded=np.array(rows["deg"], dtype=bool), lateral_deviation=np.array(rows["lat"]),
        obstacle_distance=np.array(rows["obs"]), projection_index=np.array(rows["idx"], dtype=int),
        aborted=aborted, abort_reason=reason,
        predicted_next=np.array(rows["pred"]).reshape(-1, 6),
        obstacles=obstacles.reshape(-1, 3).copy(),
        half_width=layout.half_width,
        input_bounds=(tuple(ocp_cfg.u_lo), tuple(ocp_cfg.u_hi)),
        vx_bounds=(ocp_cfg.vx_lo, ocp_cfg.vx_hi),
        control_period=cfg.control_period,
        center_line=np.array(layout.center_line.points),
    )
    result.lap_times = detect_laps(states[:, :2], t_arr, line)
    return result
