"""Problem, configuration and result containers for the NLP solver."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np


class SolverError(ValueError):
    """Malformed problem or configuration."""


class NumericalError(FloatingPointError):
    """Non-finite cost or gradient that the line search could not step around."""

    def __init__(self, message, iterate=None):
        super().__init__(message)
        self.iterate = None if iterate is None else np.array(iterate, copy=True)


class Status(str, enum.Enum):
    CONVERGED = "converged"
    MAX_ITERS = "max-iters"
    INFEASIBLE = "infeasible-penalty-exhausted"


@dataclass(frozen=True)
class BoxBounds:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float).ravel()
        hi = np.asarray(self.upper, dtype=float).ravel()
        if lo.shape != hi.shape:
            raise SolverError(f"bound shapes differ: {lo.shape} vs {hi.shape}")
        if np.any(lo > hi):
            i = int(np.argmax(lo > hi))
            raise SolverError(f"lower[{i}]={lo[i]} exceeds upper[{i}]={hi[i]}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def unbounded(cls, n: int) -> "BoxBounds":
        return cls(np.full(n, -np.inf), np.full(n, np.inf))

    @property
    def n(self) -> int:
        return self.lower.size


def project_box(u, box: BoxBounds) -> np.ndarray:
    """Euclidean projection onto the box (elementwise clamp)."""
    u = np.asarray(u, dtype=float)
    if u.shape != box.lower.shape:
        raise SolverError(f"dimension mismatch: u has shape {u.shape}, box has {box.lower.shape}")
    return np.minimum(np.maximum(u, box.lower), box.upper)


@dataclass(frozen=True)
class ConstraintMap:
    """Vector constraint mapping with its vector-Jacobian product ``J(u)^T w``."""

    value: Callable[[np.ndarray], np.ndarray]
    vjp: Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass
class NlpProblem:
    """``min f(u)`` over a box, optionally subject to ``F1(u) in [lo, hi]`` and ``F2(u) = 0``.

    ``F1`` is handled by the augmented Lagrangian method, ``F2`` by the
    quadratic penalty method. ``augmented`` is an optional fused evaluator
    ``(u, y, c) -> (psi, grad psi, F1, F2)`` that replaces assembling the
    augmented cost from ``cost_grad`` and the two maps.
    """

    n: int
    cost_grad: Callable[[np.ndarray], tuple]
    box: BoxBounds
    alm_map: Optional[ConstraintMap] = None
    alm_set: Optional[tuple] = None
    pm_map: Optional[ConstraintMap] = None
    augmented: Optional[Callable] = None
    n_alm: int = 0
    n_pm: int = 0
    cost: Optional[Callable[[np.ndarray], float]] = None
    augmented_value: Optional[Callable] = None
    compiled: Optional[tuple] = None

    def __post_init__(self):
        if self.box.n != self.n:
            raise SolverError(f"box has {self.box.n} entries, problem dimension is {self.n}")
        if self.alm_map is not None:
            if self.alm_set is None:
                raise SolverError("alm_map given without an interval target set")
            lo, hi = (np.asarray(v, dtype=float).ravel() for v in self.alm_set)
            if np.any(lo > hi):
                raise SolverError("ALM target set has lower > upper")
            self.alm_set = (lo, hi)
            self.n_alm = lo.size


@dataclass(frozen=True)
class SolverConfig:
    eps_inner: float = 1e-4
    eps_outer: float = 1e-3
    lbfgs_mem: int = 10
    max_inner_iters: int = 500
    max_outer_iters: int = 10
    penalty_init: float = 10.0
    penalty_update_factor: float = 5.0
    max_penalty: float = 1e8
    # shrink factor the violation must reach between outer iterations to keep the penalty
    violation_shrink: float = 0.1
    lambda_min: float = -1e12
    lambda_max: float = 1e12
    # inner tolerance of the first outer iteration; tightened by 10x down to eps_inner
    eps_inner_init: Optional[float] = None
    max_backtracks: int = 10
    record_trace: bool = False

    def __post_init__(self):
        if not (self.eps_inner > 0 and self.eps_outer > 0):
            raise SolverError("tolerances must be > 0")
        if self.lbfgs_mem < 1:
            raise SolverError("lbfgs_mem must be >= 1")
        if not self.penalty_update_factor > 1:
            raise SolverError("penalty_update_factor must be > 1")
        if self.max_inner_iters < 1 or self.max_outer_iters < 1:
            raise SolverError("iteration limits must be >= 1")
        if not self.penalty_init > 0 or self.max_penalty < self.penalty_init:
            raise SolverError("need 0 < penalty_init <= max_penalty")
        if self.lambda_min > self.lambda_max:
            raise SolverError("lambda_min exceeds lambda_max")

    @classmethod
    def from_dict(cls, data: dict) -> "SolverConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise SolverError(f"unknown solver option(s): {sorted(unknown)}")
        return cls(**data)


@dataclass
class NlpSolution:
    u_star: np.ndarray
    status: Status
    inner_iters: int = 0
    outer_iters: int = 0
    fbe_residual: float = float("nan")
    constraint_violation: float = 0.0
    multipliers: np.ndarray = field(default_factory=lambda: np.zeros(0))
    solve_time: float = 0.0
    cost: float = float("nan")
    penalty: float = 0.0
    fbe_trace: Optional[list] = None

    @property
    def converged(self) -> bool:
        return self.status == Status.CONVERGED
