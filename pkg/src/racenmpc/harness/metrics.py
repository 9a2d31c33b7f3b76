"""Aggregate statistics of a closed-loop run."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..track import CenterLine
from .sim import SimResult

HIST_BIN_MS = 1.0
HIST_RANGE_MS = 33.0
VX_TOL_LO = 1e-6
VX_TOL_HI = 1e-3
OBSTACLE_TOL = 0.05  # penalty-method slack allowed inside Gamma [m]


def histogram_edges() -> np.ndarray:
    """1 ms bin edges over [0, 33] ms; the overflow bin is implicit."""
    n = int(round(HIST_RANGE_MS / HIST_BIN_MS))
    return np.linspace(0.0, HIST_RANGE_MS, n + 1)


def solve_time_histogram(solve_time_s) -> np.ndarray:
    """Counts per 1 ms bin, with a final bin for everything at or above 33 ms."""
    ms = np.asarray(solve_time_s, dtype=float) * 1e3
    edges = histogram_edges()
    n = len(edges) - 1
    idx = np.clip(np.floor(ms / HIST_BIN_MS).astype(int), 0, n)
    return np.bincount(idx, minlength=n + 1)


@dataclass
class Violations:
    lateral: int = 0
    input: int = 0
    speed: int = 0
    obstacle: int = 0

    @property
    def total(self) -> int:
        return self.lateral + self.input + self.speed + self.obstacle


@dataclass
class Metrics:
    n_ticks: int
    lap_times: list
    vx_min: float
    vx_mean: float
    vx_max: float
    max_lateral: float
    min_obstacle_distance: float | None
    violations: Violations
    solve_time_mean: float
    solve_time_max: float
    solve_time_p99: float
    histogram: list
    degraded_ticks: int = 0
    aborted: bool = False
    abort_reason: str = ""
    per_obstacle_min_distance: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["violations"]["total"] = self.violations.total
        d["histogram_edges_ms"] = [float(e) for e in histogram_edges()]
        return d


def _finite_or_none(v) -> float | None:
    return float(v) if math.isfinite(v) else None


def compute_metrics(result: SimResult) -> Metrics:
    n = len(result)
    if n == 0:
        raise ValueError("cannot compute metrics of an empty result")
    X, U = result.states, result.inputs
    (d_lo, delta_lo), (d_hi, delta_hi) = result.input_bounds
    vx_lo, vx_hi = result.vx_bounds
    vx = X[:, 3]

    obs = np.asarray(result.obstacles).reshape(-1, 3)
    per_obs, obs_viol = [], 0
    if len(obs):
        dist = np.hypot(X[:, 0, None] - obs[None, :, 0], X[:, 1, None] - obs[None, :, 1])
        per_obs = [float(v) for v in dist.min(axis=0)]
        obs_viol = int(np.any(dist < obs[None, :, 2] - OBSTACLE_TOL, axis=1).sum())
    viol = Violations(
        lateral=int(np.sum(result.lateral_deviation > result.half_width)),
        input=int(np.sum((U[:, 0] < d_lo) | (U[:, 0] > d_hi)
                         | (U[:, 1] < delta_lo) | (U[:, 1] > delta_hi))),
        speed=int(np.sum((vx < vx_lo - VX_TOL_LO) | (vx > vx_hi + VX_TOL_HI))),
        obstacle=obs_viol,
    )
    st = result.solve_time
    return Metrics(
        n_ticks=n,
        lap_times=[float(v) for v in np.diff(result.lap_times)],
        vx_min=float(vx.min()), vx_mean=float(vx.mean()), vx_max=float(vx.max()),
        max_lateral=float(np.max(result.lateral_deviation)),
        min_obstacle_distance=_finite_or_none(min(per_obs)) if per_obs else None,
        violations=viol,
        solve_time_mean=float(st.mean()), solve_time_max=float(st.max()),
        solve_time_p99=float(np.percentile(st, 99)),
        histogram=[int(c) for c in solve_time_histogram(st)],
        degraded_ticks=int(np.sum(result.degraded)),
        aborted=bool(result.aborted), abort_reason=result.abort_reason,
        per_obstacle_min_distance=per_obs,
    )


def curvature_quarters(center_line: CenterLine):
    """Index sets of the tightest and straightest quarters of the center line.

    Samples are ranked by discrete curvature (ties broken by index), so each
    set covers a quarter of the lap length.
    """
    kappa = center_line.curvature()
    order = np.argsort(kappa, kind="stable")
    q = len(kappa) // 4
    return order[-q:], order[:q]


def speed_by_curvature(result: SimResult, center_line: CenterLine, laps=None):
    """Mean ``v_x`` on the tightest and straightest quarters of the track.

    ``laps`` restricts the ticks to a ``(t_start, t_end)`` window; by default
    every logged tick counts.
    """
    tight, straight = curvature_quarters(center_line)
    mask = np.ones(len(result), bool)
    if laps is not None:
        mask = (result.t >= laps[0]) & (result.t <= laps[1])
    idx = result.projection_index[mask]
    vx = result.states[mask, 3]
    in_tight = np.isin(idx, tight)
    in_straight = np.isin(idx, straight)
    if not (in_tight.any() and in_straight.any()):
        raise ValueError("trajectory does not visit both quarters")
    return float(vx[in_tight].mean()), float(vx[in_straight].mean())
