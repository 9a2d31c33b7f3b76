"""Tire/drivetrain parameter identification from logged drive data.

The parameter vector ``zeta`` (order of :data:`~racenmpc.dynamics.ZETA_NAMES`)
is fitted by box-constrained least squares on one-step velocity predictions:
every record ``k`` is advanced by one forward-Euler step and compared with
the velocities measured at record ``k + 1``. Chassis geometry is known.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from .dynamics import (
    ZETA_NAMES, ChassisParams, ControlInput, InvalidInputError, VehicleParams, VehicleState,
    _deriv_zeta_jac,
)
from .solver import BoxBounds, NlpProblem, SolverConfig, Status, panoc_solve

log = logging.getLogger(__name__)

CSV_HEADER = ("t", "p_x", "p_y", "phi", "v_x", "v_y", "omega", "d", "delta")
CHANNELS = ("v_x", "v_y", "omega")
MIN_SPEED = 0.3  # records below this v_x are left out of the cost [m/s]
DT_TOLERANCE = 0.05


class EmptyDatasetError(ValueError):
    """No record survives the exclusion rules."""


@dataclass(frozen=True)
class LogRecord:
    t: float
    state: VehicleState
    input: ControlInput


@dataclass(frozen=True, eq=False)
class Dataset:
    """``M`` records sampled every ``dt`` seconds, stored column-wise.

    ``t`` is ``(M,)``, ``states`` ``(M, 6)`` and ``inputs`` ``(M, 2)``.
    """

    t: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    dt: float

    def __post_init__(self):
        t = np.ascontiguousarray(self.t, dtype=float)
        X = np.ascontiguousarray(self.states, dtype=float).reshape(-1, 6)
        U = np.ascontiguousarray(self.inputs, dtype=float).reshape(-1, 2)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "states", X)
        object.__setattr__(self, "inputs", U)
        if not (len(t) == len(X) == len(U)):
            raise InvalidInputError(
                f"column lengths differ: t={len(t)}, states={len(X)}, inputs={len(U)}")
        if len(t) < 2:
            raise InvalidInputError(f"a dataset needs at least 2 records, got {len(t)}")
        if not self.dt > 0:
            raise InvalidInputError(f"dt must be > 0, got {self.dt}")
        if not np.isfinite(t).all():
            raise InvalidInputError("timestamps must be finite")
        gaps = np.diff(t)
        if np.any(gaps <= 0):
            k = int(np.argmax(gaps <= 0))
            raise InvalidInputError(f"timestamps not strictly increasing at record {k + 1}")
        bad = np.abs(gaps - self.dt) > DT_TOLERANCE * self.dt
        if np.any(bad):
            k = int(np.argmax(bad))
            raise InvalidInputError(
                f"gap {gaps[k]:.6g} s between records {k} and {k + 1} is not within "
                f"5% of dt={self.dt:.6g} s")

    def __len__(self):
        return len(self.t)

    def __getitem__(self, k) -> LogRecord:
        return LogRecord(float(self.t[k]), VehicleState.from_array(self.states[k]),
                         ControlInput.from_array(self.inputs[k]))

    @property
    def records(self) -> list[LogRecord]:
        return [self[k] for k in range(len(self))]

    @classmethod
    def from_records(cls, records, dt: float | None = None) -> "Dataset":
        records = list(records)
        t = np.array([r.t for r in records], dtype=float)
        X = np.array([r.state.as_array() for r in records], dtype=float).reshape(-1, 6)
        U = np.array([r.input.as_array() for r in records], dtype=float).reshape(-1, 2)
        return cls(t, X, U, _infer_dt(t) if dt is None else dt)

    def to_csv(self, path) -> None:
        """Write the log format (``t,p_x,...,delta``); float formatting is exact and stable."""
        path = Path(path)
        rows = np.column_stack([self.t, self.states, self.inputs])
        with open(path, "w", newline="") as fh:
            fh.write(",".join(CSV_HEADER) + "\n")
            for row in rows:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")

    @classmethod
    def from_csv(cls, path, dt: float | None = None) -> "Dataset":
        path = Path(path)
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
                raise InvalidInputError(
                    f"{path}: expected header {','.join(CSV_HEADER)}, got {header}")
            rows = []
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != len(CSV_HEADER):
                    raise InvalidInputError(
                        f"{path}:{lineno}: expected {len(CSV_HEADER)} fields, got {len(row)}")
                try:
                    rows.append([float(v) for v in row])
                except ValueError as exc:
                    raise InvalidInputError(f"{path}:{lineno}: {exc}") from None
        data = np.array(rows, dtype=float).reshape(-1, len(CSV_HEADER))
        t = data[:, 0]
        return cls(t, data[:, 1:7], data[:, 7:9], _infer_dt(t) if dt is None else dt)


def _infer_dt(t) -> float:
    if len(t) < 2:
        raise InvalidInputError(f"a dataset needs at least 2 records, got {len(t)}")
    return float(np.median(np.diff(t)))


@dataclass(frozen=True, eq=False)
class ParamBounds:
    zeta_lo: np.ndarray
    zeta_hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.zeta_lo, dtype=float).ravel()
        hi = np.asarray(self.zeta_hi, dtype=float).ravel()
        object.__setattr__(self, "zeta_lo", lo)
        object.__setattr__(self, "zeta_hi", hi)
        if lo.size != 10 or hi.size != 10:
            raise InvalidInputError(f"bounds need 10 entries each, got {lo.size} and {hi.size}")
        if not (np.isfinite(lo).all() and np.isfinite(hi).all()):
            raise InvalidInputError("bounds must be finite")
        for i, name in enumerate(ZETA_NAMES):
            if lo[i] > hi[i]:
                raise InvalidInputError(f"{name}: lower bound {lo[i]} exceeds upper {hi[i]}")
            if i < 6 and lo[i] <= 0:
                raise InvalidInputError(f"{name}: lower bound must be > 0, got {lo[i]}")

    @classmethod
    def around(cls, zeta, fraction: float = 0.5) -> "ParamBounds":
        """``zeta * (1 -/+ fraction)`` box (assumes positive entries)."""
        z = np.asarray(zeta, dtype=float)
        return cls(z * (1.0 - fraction), z * (1.0 + fraction))

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.zeta_lo + self.zeta_hi)

    def contains(self, zeta) -> bool:
        z = np.asarray(zeta, dtype=float)
        return bool(np.all(z >= self.zeta_lo) and np.all(z <= self.zeta_hi))

    def to_dict(self) -> dict:
        return {name: [float(self.zeta_lo[i]), float(self.zeta_hi[i])]
                for i, name in enumerate(ZETA_NAMES)}

    @classmethod
    def from_dict(cls, data: dict) -> "ParamBounds":
        """Accepts ``{"zeta_lo": [...], "zeta_hi": [...]}`` or ``{"B_f": [lo, hi], ...}``."""
        if "zeta_lo" in data or "zeta_hi" in data:
            return cls(data["zeta_lo"], data["zeta_hi"])
        missing = [n for n in ZETA_NAMES if n not in data]
        if missing:
            raise InvalidInputError(f"bounds missing entries for {missing}")
        unknown = sorted(set(data) - set(ZETA_NAMES))
        if unknown:
            raise InvalidInputError(f"unknown bound entries {unknown}")
        pairs = [data[n] for n in ZETA_NAMES]
        for n, pr in zip(ZETA_NAMES, pairs):
            if len(pr) != 2:
                raise InvalidInputError(f"{n}: expected [lo, hi], got {pr}")
        return cls([p[0] for p in pairs], [p[1] for p in pairs])

    @classmethod
    def load(cls, path) -> "ParamBounds":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise InvalidInputError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
        return cls.from_dict(data)


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

@njit(cache=True)
def _residuals(X, U, gaps, p, use):
    """Residuals ``(n_pairs, 3)`` and their ``zeta`` Jacobians ``(n_pairs, 3, 10)``.

    Row ``k`` compares the Euler prediction from record ``k`` with record
    ``k + 1``; rows with ``use[k] == False`` are zero.
    """
    n = X.shape[0] - 1
    R = np.zeros((n, 3))
    Jr = np.zeros((n, 3, 10))
    J = np.empty((3, 10))
    for k in range(n):
        if not use[k]:
            continue
        f = _deriv_zeta_jac(X[k], U[k], p, J)
        h = gaps[k]
        for c in range(3):
            R[k, c] = X[k, 3 + c] + h * f[c] - X[k + 1, 3 + c]
            for i in range(10):
                Jr[k, c, i] = h * J[c, i]
    return R, Jr


@njit(cache=True)
def _residuals_only(X, U, gaps, p, use):
    n = X.shape[0] - 1
    R = np.zeros((n, 3))
    J = np.empty((3, 10))
    for k in range(n):
        if not use[k]:
            continue
        f = _deriv_zeta_jac(X[k], U[k], p, J)
        h = gaps[k]
        for c in range(3):
            R[k, c] = X[k, 3 + c] + h * f[c] - X[k + 1, 3 + c]
    return R


def _packed(fixed: ChassisParams, zeta) -> np.ndarray:
    z = np.asarray(zeta, dtype=float).ravel()
    if z.size != 10:
        raise InvalidInputError(f"zeta needs 10 entries, got {z.size}")
    return np.concatenate([[fixed.l_f, fixed.l_r, fixed.m, fixed.J_z], z])


def usable_pairs(dataset: Dataset, exclude=None) -> np.ndarray:
    """Mask over the ``M - 1`` prediction pairs that enter the cost.

    A pair is dropped when record ``k`` is slower than :data:`MIN_SPEED`,
    when either record is non-finite, or when ``k`` is listed in ``exclude``.
    """
    X, U = dataset.states, dataset.inputs
    finite = np.isfinite(X).all(axis=1) & np.isfinite(U).all(axis=1)
    use = finite[:-1] & finite[1:]
    n_bad = int((~use).sum())
    if n_bad:
        log.warning("%d record pair(s) with non-finite values excluded", n_bad)
    with np.errstate(invalid="ignore"):
        use &= X[:-1, 3] >= MIN_SPEED
    if exclude is not None:
        idx = np.asarray(list(exclude), dtype=int)
        use[idx] = False
    return use


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------

def one_step_predict(record: LogRecord, zeta, fixed: ChassisParams, dt: float):
    """Velocities ``(v_x, v_y, omega)`` after one Euler step of length ``dt`` from ``record``."""
    x = record.state.as_array()
    u = record.input.as_array()
    if not (np.isfinite(x).all() and np.isfinite(u).all()):
        raise InvalidInputError(f"record at t={record.t} is not finite")
    J = np.empty((3, 10))
    f = _deriv_zeta_jac(x, u, _packed(fixed, zeta), J)
    v = x[3:6] + dt * f
    return float(v[0]), float(v[1]), float(v[2])


def identification_cost(dataset: Dataset, zeta, fixed: ChassisParams, *, exclude=None,
                        use=None):
    """Sum of squared one-step velocity residuals and its gradient w.r.t. ``zeta``."""
    if use is None:
        use = usable_pairs(dataset, exclude)
    if not use.any():
        raise EmptyDatasetError("no record pair left after exclusions")
    gaps = np.diff(dataset.t)
    R, Jr = _residuals(dataset.states, dataset.inputs, gaps, _packed(fixed, zeta), use)
    cost = float(np.sum(R * R))
    grad = 2.0 * np.einsum("kc,kci->i", R, Jr)
    return cost, grad


def prediction_residuals(dataset: Dataset, zeta, fixed: ChassisParams, use=None) -> np.ndarray:
    """``(M - 1, 3)`` residuals (prediction minus measurement); unused rows are NaN."""
    if use is None:
        use = usable_pairs(dataset)
    R = _residuals_only(dataset.states, dataset.inputs, np.diff(dataset.t),
                        _packed(fixed, zeta), use)
    R[~use] = np.nan
    return R


@dataclass
class FitReport:
    zeta: np.ndarray
    zeta0: np.ndarray
    status: Status
    iterations: int
    cost0: float
    cost: float
    rmse: dict
    n_used: int
    n_excluded: int
    t: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))
    measured: np.ndarray = field(repr=False, default_factory=lambda: np.zeros((0, 3)))
    predicted: np.ndarray = field(repr=False, default_factory=lambda: np.zeros((0, 3)))

    def recovery(self, zeta_true) -> dict:
        """Relative parameter error in percent (informational: Pacejka terms trade off)."""
        zt = np.asarray(zeta_true, dtype=float)
        return {n: float(100.0 * abs(self.zeta[i] - zt[i]) / abs(zt[i])) if zt[i] != 0
                else float("nan") for i, n in enumerate(ZETA_NAMES)}

    def to_dict(self) -> dict:
        return {
            "zeta": dict(zip(ZETA_NAMES, map(float, self.zeta))),
            "zeta0": dict(zip(ZETA_NAMES, map(float, self.zeta0))),
            "status": self.status.value, "iterations": int(self.iterations),
            "cost0": self.cost0, "cost": self.cost, "rmse": dict(self.rmse),
            "n_used": self.n_used, "n_excluded": self.n_excluded,
        }

    def traces_csv(self, path) -> None:
        """Measured vs predicted velocity traces of the used pairs."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"{c}_meas" for c in CHANNELS] + [f"{c}_pred" for c in CHANNELS])
            for k in range(len(self.t)):
                w.writerow([repr(float(self.t[k]))]
                           + [repr(float(v)) for v in self.measured[k]]
                           + [repr(float(v)) for v in self.predicted[k]])


def default_ident_solver() -> SolverConfig:
    # scaled coordinates: the gradient is w.r.t. zeta normalised to [0, 1]
    return SolverConfig(eps_inner=1e-9, max_inner_iters=20000, lbfgs_mem=20)


def identify(dataset: Dataset, bounds: ParamBounds, zeta0=None,
             fixed: ChassisParams | None = None, cfg: SolverConfig | None = None,
             exclude=None):
    """Fit ``zeta`` by PANOC over the ``bounds`` box.

    The search runs in coordinates normalised to the unit box. ``zeta0``
    defaults to the box midpoint. Returns ``(zeta_star, FitReport)``.
    """
    fixed = fixed or VehicleParams.default().chassis
    cfg = cfg or default_ident_solver()
    zeta0 = bounds.midpoint if zeta0 is None else np.asarray(zeta0, dtype=float)
    if not bounds.contains(zeta0):
        raise InvalidInputError("zeta0 lies outside the bounds")
    use = usable_pairs(dataset, exclude)
    if not use.any():
        raise EmptyDatasetError("no record pair left after exclusions")
    n_used = int(use.sum())
    lo, span = bounds.zeta_lo, bounds.zeta_hi - bounds.zeta_lo
    fixed_dim = span == 0
    span_safe = np.where(fixed_dim, 1.0, span)
    # mean squared residual keeps the tolerance independent of the record count
    scale = 1.0 / (3 * n_used)

    def to_zeta(z):
        return lo + span_safe * np.where(fixed_dim, 0.0, z)

    def cost_grad(z):
        c, g = identification_cost(dataset, to_zeta(z), fixed, use=use)
        return c * scale, np.where(fixed_dim, 0.0, g * span_safe) * scale

    z0 = np.where(fixed_dim, 0.0, (zeta0 - lo) / span_safe)
    box = BoxBounds(np.zeros(10), np.where(fixed_dim, 0.0, 1.0))
    problem = NlpProblem(n=10, cost_grad=cost_grad, box=box)
    sol = panoc_solve(problem, z0, cfg)
    zeta_star = np.clip(to_zeta(sol.u_star), bounds.zeta_lo, bounds.zeta_hi)
    if sol.status != Status.CONVERGED:
        log.warning("identification stopped after %d iterations (%s)", sol.inner_iters,
                    sol.status.value)

    cost0, _ = identification_cost(dataset, zeta0, fixed, use=use)
    cost, _ = identification_cost(dataset, zeta_star, fixed, use=use)
    if cost > cost0:
        # an unconverged run can end above its start; keep the better point
        zeta_star, cost = np.asarray(zeta0, dtype=float).copy(), cost0
    R = prediction_residuals(dataset, zeta_star, fixed, use)[use]
    measured = dataset.states[1:, 3:6][use]
    rmse = {c: float(math.sqrt(np.mean(R[:, i] ** 2))) for i, c in enumerate(CHANNELS)}
    report = FitReport(
        zeta=zeta_star, zeta0=np.asarray(zeta0, dtype=float), status=sol.status,
        iterations=sol.inner_iters, cost0=cost0, cost=cost, rmse=rmse, n_used=n_used,
        n_excluded=len(use) - n_used, t=dataset.t[1:][use], measured=measured,
        predicted=measured + R,
    )
    return zeta_star, report

