"""Synthetic identification logs from scripted maneuvers.

A suite is a list of segments; each segment holds a throttle/steering law
for a fixed duration. The plant is advanced at the log interval (forward
Euler by default, so the data are exactly reproducible by the one-step
predictor) and velocities can be corrupted with seeded Gaussian noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..dynamics import VehicleParams, _deriv, simulate_substeps
from ..ident import Dataset

LOG_DT = 0.05


@dataclass(frozen=True)
class Segment:
    name: str
    duration: float
    law: Callable[[float], tuple]  # local time -> (d, delta)


def _const(d, delta=0.0):
    return lambda s: (d, delta)


def _chirp(d, amp, f0, f1, duration):
    k = (f1 - f0) / duration
    return lambda s: (d, amp * math.sin(2.0 * math.pi * (f0 * s + 0.5 * k * s * s)))


def _square(d, amp, half_period):
    return lambda s: (d, amp if int(s / half_period + 1e-9) % 2 == 0 else -amp)


def _throttle_steps(lo, hi, half_period, amp, freq):
    def law(s):
        d = hi if int(s / half_period + 1e-9) % 2 == 0 else lo
        return d, amp * math.sin(2.0 * math.pi * freq * s)
    return law


def _pulse_coast(hi, on, off):
    def law(s):
        return (hi if (s % (on + off)) < on - 1e-9 else 0.0), 0.0
    return law


# launch, coast-down and throttle steps excite the drivetrain terms; steering
# sweeps at speed (>= ~3 m/s, where the 50 ms Euler step is stable) excite the tires
SUITES = {
    "standard": [
        Segment("launch", 3.0, _const(1.0)),
        Segment("coast", 0.6, _const(0.0)),
        Segment("hold", 2.0, _const(0.7)),
        Segment("sweep-small", 15.0, _chirp(0.7, 0.15, 0.2, 1.0, 15.0)),
        Segment("step-steer", 12.0, _square(0.8, 0.2, 1.5)),
        Segment("sweep-large", 15.0, _chirp(0.9, 0.3, 0.3, 1.5, 15.0)),
        Segment("throttle-steps", 16.0, _throttle_steps(0.4, 1.0, 2.0, 0.1, 0.5)),
        Segment("coast-downs", 10.0, _pulse_coast(1.0, 2.0, 0.5)),
        Segment("sine", 10.1, _chirp(0.6, 0.25, 1.0, 1.0, 10.1)),
    ],
    "short": [
        Segment("launch", 3.0, _const(1.0)),
        Segment("sweep", 6.0, _chirp(0.8, 0.2, 0.3, 1.2, 6.0)),
        Segment("coast", 0.5, _const(0.0)),
    ],
}


def suite_duration(name: str) -> float:
    return float(sum(s.duration for s in _suite(name)))


def _suite(name: str):
    try:
        return SUITES[name]
    except KeyError:
        raise ValueError(f"unknown maneuver suite {name!r}; choose from {sorted(SUITES)}") from None


def suite_inputs(name: str, dt: float = LOG_DT) -> np.ndarray:
    """Input held over each log interval, ``(M, 2)`` with ``M = duration / dt``."""
    rows = []
    for seg in _suite(name):
        n = int(round(seg.duration / dt))
        if abs(n * dt - seg.duration) > 1e-9:
            raise ValueError(f"segment {seg.name!r} is not a whole number of {dt} s steps")
        rows.extend(seg.law(j * dt) for j in range(n))
    U = np.array(rows, dtype=float)
    U[:, 0] = np.clip(U[:, 0], 0.0, 1.0)
    U[:, 1] = np.clip(U[:, 1], -math.pi / 6, math.pi / 6)
    return U


def generate_ident_data(suite: str = "standard", params: VehicleParams | None = None,
                        noise: float = 0.0, seed: int = 0, dt: float = LOG_DT,
                        integrator: str = "euler", plant_dt: float = 0.001) -> Dataset:
    """Simulate ``suite`` from rest and log every ``dt`` seconds.

    ``integrator="euler"`` advances one Euler step per log interval (the
    identification model exactly); ``"rk4"`` uses ``plant_dt`` substeps.
    ``noise`` is the standard deviation added to ``v_x, v_y, omega``.
    """
    if noise < 0:
        raise ValueError("noise must be >= 0")
    if integrator not in ("euler", "rk4"):
        raise ValueError(f"integrator must be 'euler' or 'rk4', got {integrator!r}")
    params = params or VehicleParams.default()
    p = params.packed()
    U = suite_inputs(suite, dt)
    M = len(U)
    X = np.zeros((M, 6))
    n_sub = int(round(dt / plant_dt))
    for k in range(M - 1):
        if integrator == "euler":
            X[k + 1] = X[k] + dt * _deriv(X[k], U[k], p, True)
        else:
            X[k + 1] = simulate_substeps(X[k], U[k], plant_dt, n_sub, p, True)
    if noise > 0:
        rng = np.random.default_rng(seed)
        X[:, 3:6] += noise * rng.standard_normal((M, 3))
    t = dt * np.arange(M)
    return Dataset(t, X, U, dt)
