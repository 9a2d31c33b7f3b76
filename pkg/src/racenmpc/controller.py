"""Single-shooting NMPC for racing along a sampled center line.

Decision vector: ``u = [d_0, delta_0, ..., d_{N-1}, delta_{N-1}]``. States are
eliminated by rolling out the forward-Euler model, and gradients are computed
by an adjoint sweep over the rollout.

Cost::

    (p_N - p_d)' Q1 (p_N - p_d) + sum_k (u_k - u_{k-1})' Q2 (u_k - u_{k-1})

Constraints:

* track boundary, ALM: ``|p_k - p'_k|^2 in [0, (R_g - R_c)^2]``
* obstacles, PM: ``max(0, Gamma_j^2 - |p_k - o_j|^2) = 0``
* speed bounds, PM: ``max(0, v_lo - v_x,k) = max(0, v_x,k - v_hi) = 0``

``p'_k`` is the nearest center-line sample to the predicted ``p_k``. It is
held fixed when differentiating.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from .dynamics import ControlInput, VehicleParams, VehicleState, _deriv_into, _deriv_jac_into
from .solver import BoxBounds, ConstraintMap, NlpProblem, NlpSolution, SolverConfig, Status
from .solver import alm_pm_solve, NumericalError
from .track import TrackLayout, lookahead_reference, project


@dataclass(frozen=True)
class OcpConfig:
    N: int = 50
    T_s: float = 0.033
    Q1: tuple = (10.0, 10.0)
    Q2: tuple = (10.0, 10.0)
    u_lo: tuple = (0.0, -math.pi / 6)
    u_hi: tuple = (1.0, math.pi / 6)
    vx_lo: float = 0.0
    vx_hi: float = 5.0
    vx_weight: float = 1.0
    lookahead: int = 90
    # projection window for the car position; None means 2 * lookahead
    projection_window: int | None = None
    # window around the previous step's index when projecting predicted points
    horizon_window: int = 20
    # constraint back-off absorbing plant/model mismatch [m]
    boundary_margin: float = 0.05
    obstacle_margin: float = 0.05
    # first constrained step; with forward Euler the positions p_0 and p_1
    # do not depend on the inputs, so earlier rows could only be infeasible
    constraint_start: int = 2
    warm_start_multipliers: bool = True
    warm_start_penalty: bool = True
    # the carried-over penalty is divided by this factor at every tick
    penalty_decay: float = 5.0

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if not self.T_s > 0:
            raise ValueError("T_s must be > 0")
        if min(self.Q1) < 0 or min(self.Q2) < 0:
            raise ValueError("Q1, Q2 diagonal entries must be >= 0")
        if self.vx_lo > self.vx_hi:
            raise ValueError("vx_lo exceeds vx_hi")
        if not 0 <= self.constraint_start < self.N:
            raise ValueError("constraint_start must lie in [0, N)")
        if self.penalty_decay < 1.0:
            raise ValueError("penalty_decay must be >= 1")
        if any(lo > hi for lo, hi in zip(self.u_lo, self.u_hi)):
            raise ValueError("input lower bound exceeds upper bound")

    @property
    def window(self) -> int:
        return 2 * self.lookahead if self.projection_window is None else self.projection_window

    @classmethod
    def from_dict(cls, data: dict) -> "OcpConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown OCP option(s): {sorted(unknown)}")
        data = dict(data)
        for key in ("Q1", "Q2", "u_lo", "u_hi"):
            if key in data:
                data[key] = tuple(float(v) for v in data[key])
        return cls(**data)


@dataclass
class ControllerState:
    u_prev: np.ndarray
    warm_start: np.ndarray
    last_projection_index: int | None = None
    multipliers: np.ndarray | None = None
    penalty: float | None = None
    degraded: bool = False

    @classmethod
    def initial(cls, cfg: OcpConfig) -> "ControllerState":
        ws = np.tile(np.clip([0.5, 0.0], cfg.u_lo, cfg.u_hi), (cfg.N, 1))
        return cls(u_prev=np.zeros(2), warm_start=ws)


@dataclass
class HorizonSolution:
    inputs: np.ndarray
    predicted_states: np.ndarray
    solution: NlpSolution
    reference: tuple = (0.0, 0.0)
    projection_index: int = 0
    degraded: bool = False


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

@njit(cache=True)
def _rollout(U, x0, p, Ts):
    N = U.shape[0]
    X = np.empty((N + 1, 6))
    f = np.empty(6)
    X[0] = x0
    for k in range(N):
        _deriv_into(X[k], U[k], p, False, f)
        for i in range(6):
            X[k + 1, i] = X[k, i] + Ts * f[i]
    return X


@njit(cache=True)
def _rollout_jac(U, x0, p, Ts):
    N = U.shape[0]
    X = np.empty((N + 1, 6))
    A = np.empty((N, 6, 6))
    B = np.empty((N, 6, 2))
    f = np.empty(6)
    X[0] = x0
    for k in range(N):
        _deriv_jac_into(X[k], U[k], p, f, A[k], B[k])
        for i in range(6):
            X[k + 1, i] = X[k, i] + Ts * f[i]
    return X, A, B


@njit(cache=True)
def _base_cost(U, X, u_prev, pd, q1, q2):
    N = U.shape[0]
    ex = X[N, 0] - pd[0]
    ey = X[N, 1] - pd[1]
    cost = q1[0] * ex * ex + q1[1] * ey * ey
    gu = np.zeros((N, 2))
    for k in range(N):
        prev0 = u_prev[0] if k == 0 else U[k - 1, 0]
        prev1 = u_prev[1] if k == 0 else U[k - 1, 1]
        d0 = U[k, 0] - prev0
        d1 = U[k, 1] - prev1
        cost += q2[0] * d0 * d0 + q2[1] * d1 * d1
        gu[k, 0] += 2.0 * q2[0] * d0
        gu[k, 1] += 2.0 * q2[1] * d1
        if k > 0:
            gu[k - 1, 0] -= 2.0 * q2[0] * d0
            gu[k - 1, 1] -= 2.0 * q2[1] * d1
    hx_term = np.zeros(6)
    hx_term[0] = 2.0 * q1[0] * ex
    hx_term[1] = 2.0 * q1[1] * ey
    return cost, gu, hx_term


@njit(cache=True)
def _adjoint(A, B, Ts, hx, gu):
    """Accumulate ``gu += dJ/du`` given per-state cost gradients ``hx`` (N+1, 6).

    Only the structural nonzeros of the bicycle-model Jacobians are read.
    """
    N = A.shape[0]
    l0, l1, l2, l3, l4, l5 = hx[N, 0], hx[N, 1], hx[N, 2], hx[N, 3], hx[N, 4], hx[N, 5]
    for k in range(N - 1, -1, -1):
        a = A[k]
        b = B[k]
        gu[k, 0] += Ts * (b[3, 0] * l3 + b[4, 0] * l4 + b[5, 0] * l5)
        gu[k, 1] += Ts * (b[3, 1] * l3 + b[4, 1] * l4 + b[5, 1] * l5)
        h = hx[k]
        n2 = h[2] + l2 + Ts * (a[0, 2] * l0 + a[1, 2] * l1)
        n3 = h[3] + l3 + Ts * (a[0, 3] * l0 + a[1, 3] * l1 + a[3, 3] * l3 + a[4, 3] * l4
                               + a[5, 3] * l5)
        n4 = h[4] + l4 + Ts * (a[0, 4] * l0 + a[1, 4] * l1 + a[3, 4] * l3 + a[4, 4] * l4
                               + a[5, 4] * l5)
        n5 = h[5] + l5 + Ts * (a[2, 5] * l2 + a[3, 5] * l3 + a[4, 5] * l4 + a[5, 5] * l5)
        l0 = h[0] + l0
        l1 = h[1] + l1
        l2, l3, l4, l5 = n2, n3, n4, n5
    return gu


@njit(cache=True)
def _nearest(pts, px, py, hint, max_moves, closed):
    """Walk from ``hint`` along the center line while the distance to ``(px, py)`` drops.

    Predicted positions advance by a couple of samples per step, so the
    local minimum next to the previous index is the projection; at most
    ``max_moves`` samples are visited in either direction.
    """
    K = pts.shape[0]
    if not (np.isfinite(px) and np.isfinite(py)):
        return hint, np.inf
    dx = pts[hint, 0] - px
    dy = pts[hint, 1] - py
    best = dx * dx + dy * dy
    best_i = hint
    for step in (1, -1):
        i = best_i
        moves = 0
        while moves < max_moves:
            j = i + step
            if closed:
                j %= K
            elif j < 0 or j >= K:
                break
            dx = pts[j, 0] - px
            dy = pts[j, 1] - py
            dd = dx * dx + dy * dy
            if dd >= best:
                break
            best, best_i, i = dd, j, j
            moves += 1
        if best_i != hint:
            break
    return best_i, best


@njit(cache=True)
def _constraints(X, pts, closed, hint0, window, obs, vlo, vhi, vw, k0):
    """Residuals ``F1`` (boundary, k=k0..N-1) and ``F2`` (obstacles + speed, k=k0..N).

    Also returns the projected center-line points used for ``F1``.
    """
    N = X.shape[0] - 1
    O = obs.shape[0]
    n1 = N - k0
    n2 = (N + 1 - k0) * (O + 2)
    F1 = np.empty(n1)
    F2 = np.empty(n2)
    proj = np.empty((N + 1, 2))
    idx = np.empty(N + 1, dtype=np.int64)
    hint = hint0
    for k in range(N + 1):
        i, dd = _nearest(pts, X[k, 0], X[k, 1], hint, window, closed)
        idx[k] = i
        proj[k, 0] = pts[i, 0]
        proj[k, 1] = pts[i, 1]
        hint = i
        if k >= k0 and k < N:
            F1[k - k0] = dd
        if k >= k0:
            base = (k - k0) * (O + 2)
            for j in range(O):
                dx = X[k, 0] - obs[j, 0]
                dy = X[k, 1] - obs[j, 1]
                r = obs[j, 2] * obs[j, 2] - (dx * dx + dy * dy)
                F2[base + j] = r if r > 0.0 else 0.0
            lo = vw * (vlo - X[k, 3])
            hi = vw * (X[k, 3] - vhi)
            F2[base + O] = lo if lo > 0.0 else 0.0
            F2[base + O + 1] = hi if hi > 0.0 else 0.0
    return F1, F2, proj, idx


@njit(cache=True)
def _constraint_state_grad(X, proj, obs, vlo, vhi, vw, k0, w1, w2):
    """``hx`` with ``sum_k hx_k . dx_k = w1' dF1 + w2' dF2``, projections held fixed."""
    N = X.shape[0] - 1
    O = obs.shape[0]
    hx = np.zeros((N + 1, 6))
    for k in range(k0, N):
        e = w1[k - k0]
        hx[k, 0] += 2.0 * e * (X[k, 0] - proj[k, 0])
        hx[k, 1] += 2.0 * e * (X[k, 1] - proj[k, 1])
    for k in range(k0, N + 1):
        base = (k - k0) * (O + 2)
        for j in range(O):
            dx = X[k, 0] - obs[j, 0]
            dy = X[k, 1] - obs[j, 1]
            if obs[j, 2] * obs[j, 2] - (dx * dx + dy * dy) > 0.0:
                hx[k, 0] -= 2.0 * w2[base + j] * dx
                hx[k, 1] -= 2.0 * w2[base + j] * dy
        if vw * (vlo - X[k, 3]) > 0.0:
            hx[k, 3] -= vw * w2[base + O]
        if vw * (X[k, 3] - vhi) > 0.0:
            hx[k, 3] += vw * w2[base + O + 1]
    return hx


@njit(cache=True)
def _augmented(uflat, x0, u_prev, pd, q1, q2, p, Ts, pts, closed, hint0, window,
               b_hi, obs, vlo, vhi, vw, k0, y, c, use_alm, use_pm):
    N = uflat.shape[0] // 2
    U = uflat.reshape((N, 2))
    X, A, B = _rollout_jac(U, x0, p, Ts)
    cost, gu, hterm = _base_cost(U, X, u_prev, pd, q1, q2)
    F1, F2, proj, idx = _constraints(X, pts, closed, hint0, window, obs, vlo, vhi, vw, k0)
    w1 = np.zeros(F1.shape[0])
    w2 = np.zeros(F2.shape[0])
    if use_alm:
        for i in range(F1.shape[0]):
            w = F1[i] + y[i] / c
            pr = w
            if pr < 0.0:
                pr = 0.0
            elif pr > b_hi:
                pr = b_hi
            e = w - pr
            cost += 0.5 * c * e * e
            w1[i] = c * e
    if use_pm:
        for i in range(F2.shape[0]):
            cost += 0.5 * c * F2[i] * F2[i]
            w2[i] = c * F2[i]
    hx = _constraint_state_grad(X, proj, obs, vlo, vhi, vw, k0, w1, w2)
    hx[N] += hterm
    gu = _adjoint(A, B, Ts, hx, gu)
    return cost, gu.reshape(2 * N), F1, F2


@njit(cache=True)
def _base_value(U, X, u_prev, pd, q1, q2):
    N = U.shape[0]
    ex = X[N, 0] - pd[0]
    ey = X[N, 1] - pd[1]
    cost = q1[0] * ex * ex + q1[1] * ey * ey
    for k in range(N):
        prev0 = u_prev[0] if k == 0 else U[k - 1, 0]
        prev1 = u_prev[1] if k == 0 else U[k - 1, 1]
        d0 = U[k, 0] - prev0
        d1 = U[k, 1] - prev1
        cost += q2[0] * d0 * d0 + q2[1] * d1 * d1
    return cost


@njit(cache=True)
def _augmented_value(uflat, x0, u_prev, pd, q1, q2, p, Ts, pts, closed, hint0, window,
                     b_hi, obs, vlo, vhi, vw, k0, y, c, use_alm, use_pm):
    N = uflat.shape[0] // 2
    U = uflat.reshape((N, 2))
    X = _rollout(U, x0, p, Ts)
    cost = _base_value(U, X, u_prev, pd, q1, q2)
    F1, F2, proj, idx = _constraints(X, pts, closed, hint0, window, obs, vlo, vhi, vw, k0)
    if use_alm:
        for i in range(F1.shape[0]):
            w = F1[i] + y[i] / c
            pr = w
            if pr < 0.0:
                pr = 0.0
            elif pr > b_hi:
                pr = b_hi
            e = w - pr
            cost += 0.5 * c * e * e
    if use_pm:
        for i in range(F2.shape[0]):
            cost += 0.5 * c * F2[i] * F2[i]
    return cost


@njit(cache=True)
def _aug_fg(u, a):
    cost, g, F1, F2 = _augmented(u, *a)
    return cost, g


@njit(cache=True)
def _aug_fv(u, a):
    return _augmented_value(u, *a)


@njit(cache=True)
def _maps_vjp(uflat, x0, p, Ts, pts, closed, hint0, window, obs, vlo, vhi, vw, k0, w1, w2):
    N = uflat.shape[0] // 2
    U = uflat.reshape((N, 2))
    X, A, B = _rollout_jac(U, x0, p, Ts)
    F1, F2, proj, idx = _constraints(X, pts, closed, hint0, window, obs, vlo, vhi, vw, k0)
    hx = _constraint_state_grad(X, proj, obs, vlo, vhi, vw, k0, w1, w2)
    gu = np.zeros((N, 2))
    gu = _adjoint(A, B, Ts, hx, gu)
    return gu.reshape(2 * N)


# ---------------------------------------------------------------------------
# OCP façade
# ---------------------------------------------------------------------------

def _as_state_array(x0):
    return x0.as_array() if isinstance(x0, VehicleState) else np.asarray(x0, dtype=float)


def _as_input_array(u):
    return u.as_array() if isinstance(u, ControlInput) else np.asarray(u, dtype=float)


class Ocp:
    """One instance of the racing OCP for a fixed measured state and reference."""

    def __init__(self, params: VehicleParams, cfg: OcpConfig, layout: TrackLayout | None,
                 x0, u_prev, p_d, hint: int = 0):
        self.cfg = cfg
        self.p = params.packed()
        self.x0 = _as_state_array(x0)
        self.u_prev = _as_input_array(u_prev)
        self.pd = np.asarray(p_d, dtype=float)
        self.q1 = np.asarray(cfg.Q1, dtype=float)
        self.q2 = np.asarray(cfg.Q2, dtype=float)
        self.k0 = cfg.constraint_start
        self.layout = layout
        if layout is not None:
            self.pts = layout.center_line.points
            self.closed = layout.center_line.closed
            obs = layout.obstacle_array()
            if obs.size:
                obs = obs.copy()
                obs[:, 2] += cfg.obstacle_margin
            self.obs = np.ascontiguousarray(obs)
            half = max(layout.half_width - cfg.boundary_margin, 0.0)
            self.b_hi = half * half
        else:
            self.pts = np.zeros((3, 2))
            self.closed = True
            self.obs = np.zeros((0, 3))
            self.b_hi = np.inf
        self.hint = int(hint)
        N = cfg.N
        self.n_alm = N - self.k0
        self.n_pm = (N + 1 - self.k0) * (self.obs.shape[0] + 2)

    # -- unconstrained objective -------------------------------------------------
    def rollout(self, u) -> np.ndarray:
        U = np.ascontiguousarray(np.asarray(u, dtype=float).reshape(self.cfg.N, 2))
        return _rollout(U, self.x0, self.p, self.cfg.T_s)

    def cost(self, u) -> float:
        return self.cost_value(u)

    def cost_value(self, u) -> float:
        U = np.ascontiguousarray(np.asarray(u, dtype=float).reshape(self.cfg.N, 2))
        X = _rollout(U, self.x0, self.p, self.cfg.T_s)
        return float(_base_value(U, X, self.u_prev, self.pd, self.q1, self.q2))

    def gradient(self, u) -> np.ndarray:
        return self.cost_grad(u)[1]

    def cost_grad(self, u):
        uflat = np.ascontiguousarray(np.asarray(u, dtype=float).ravel())
        N = self.cfg.N
        U = uflat.reshape(N, 2)
        X, A, B = _rollout_jac(U, self.x0, self.p, self.cfg.T_s)
        cost, gu, hterm = _base_cost(U, X, self.u_prev, self.pd, self.q1, self.q2)
        hx = np.zeros((N + 1, 6))
        hx[N] = hterm
        gu = _adjoint(A, B, self.cfg.T_s, hx, gu)
        return float(cost), gu.reshape(2 * N)

    # -- constraints ---------------------------------------------------------------
    def _kernel_args(self):
        cfg = self.cfg
        return (self.pts, self.closed, self.hint, cfg.horizon_window, self.obs,
                cfg.vx_lo, cfg.vx_hi, cfg.vx_weight, self.k0)

    def constraints(self, u):
        """Return ``(F1, F2)`` at ``u``."""
        X = self.rollout(u)
        F1, F2, _, _ = _constraints(X, *self._kernel_args())
        return F1, F2

    def constraint_maps(self):
        """Generic ``(alm_map, pm_map)`` pair with vector-Jacobian products."""
        n1, n2 = self.n_alm, self.n_pm

        def vjp(u, w1, w2):
            uflat = np.ascontiguousarray(np.asarray(u, dtype=float).ravel())
            return _maps_vjp(uflat, self.x0, self.p, self.cfg.T_s, *self._kernel_args(), w1, w2)

        alm = ConstraintMap(lambda u: self.constraints(u)[0],
                            lambda u, w: vjp(u, np.asarray(w, dtype=float), np.zeros(n2)))
        pm = ConstraintMap(lambda u: self.constraints(u)[1],
                           lambda u, w: vjp(u, np.zeros(n1), np.asarray(w, dtype=float)))
        return alm, pm

    def augmented(self, u, y, c):
        cfg = self.cfg
        uflat = np.ascontiguousarray(np.asarray(u, dtype=float).ravel())
        return _augmented(uflat, self.x0, self.u_prev, self.pd, self.q1, self.q2, self.p,
                          cfg.T_s, self.pts, self.closed, self.hint, cfg.horizon_window,
                          self.b_hi, self.obs, cfg.vx_lo, cfg.vx_hi, cfg.vx_weight, self.k0,
                          np.asarray(y, dtype=float), float(c), self.n_alm > 0, True)

    def _augmented_args(self, y, c) -> tuple:
        cfg = self.cfg
        return (self.x0, self.u_prev, self.pd, self.q1, self.q2, self.p, float(cfg.T_s),
                self.pts, self.closed, self.hint, cfg.horizon_window, float(self.b_hi),
                self.obs, float(cfg.vx_lo), float(cfg.vx_hi), float(cfg.vx_weight), self.k0,
                np.ascontiguousarray(y, dtype=float), float(c), self.n_alm > 0, True)

    def augmented_value(self, u, y, c) -> float:
        cfg = self.cfg
        uflat = np.ascontiguousarray(np.asarray(u, dtype=float).ravel())
        return _augmented_value(uflat, self.x0, self.u_prev, self.pd, self.q1, self.q2, self.p,
                                cfg.T_s, self.pts, self.closed, self.hint, cfg.horizon_window,
                                self.b_hi, self.obs, cfg.vx_lo, cfg.vx_hi, cfg.vx_weight,
                                self.k0, np.asarray(y, dtype=float), float(c), self.n_alm > 0,
                                True)

    def box(self) -> BoxBounds:
        N = self.cfg.N
        return BoxBounds(np.tile(self.cfg.u_lo, N), np.tile(self.cfg.u_hi, N))

    def problem(self, fused: bool = True) -> NlpProblem:
        alm, pm = self.constraint_maps()
        has_alm = self.layout is not None and self.n_alm > 0
        return NlpProblem(
            n=2 * self.cfg.N, cost_grad=self.cost_grad, box=self.box(),
            alm_map=alm if has_alm else None,
            alm_set=(np.zeros(self.n_alm), np.full(self.n_alm, self.b_hi)) if has_alm else None,
            pm_map=pm,
            augmented=self.augmented if fused else None,
            augmented_value=self.augmented_value if fused else None,
            cost=self.cost_value,
            compiled=(_aug_fg, _aug_fv, self._augmented_args) if fused else None,
            n_alm=self.n_alm if has_alm else 0, n_pm=self.n_pm,
        )


# module-level helpers mirroring the Ocp methods

def rollout(x0, inputs, params: VehicleParams, T_s: float) -> np.ndarray:
    """Forward-Euler rollout; returns the ``(N+1, 6)`` predicted state array."""
    U = np.ascontiguousarray(np.asarray([_as_input_array(u) for u in inputs], dtype=float)
                             .reshape(-1, 2))
    X = _rollout(U, _as_state_array(x0), params.packed(), float(T_s))
    if not np.isfinite(X).all():
        k = int(np.argmax(~np.isfinite(X).all(axis=1)))
        raise NumericalError(f"rollout blew up at step {k}")
    return X


def ocp_cost(inputs, x0, u_prev, p_d, params: VehicleParams, cfg: OcpConfig) -> float:
    cfg = replace(cfg, N=len(inputs))
    return Ocp(params, cfg, None, x0, u_prev, p_d).cost(np.asarray(inputs, dtype=float))


def ocp_gradient(inputs, x0, u_prev, p_d, params: VehicleParams, cfg: OcpConfig) -> np.ndarray:
    cfg = replace(cfg, N=len(inputs))
    g = Ocp(params, cfg, None, x0, u_prev, p_d).gradient(np.asarray(inputs, dtype=float))
    if not np.isfinite(g).all():
        raise NumericalError("non-finite gradient entry at step "
                             f"{int(np.argmax(~np.isfinite(g))) // 2}")
    return g


def build_constraint_maps(ocp: Ocp):
    return ocp.constraint_maps()


# ---------------------------------------------------------------------------
# receding-horizon controller
# ---------------------------------------------------------------------------

class Controller:
    """NMPC with warm starting across ticks."""

    def __init__(self, params: VehicleParams, layout: TrackLayout, cfg: OcpConfig | None = None,
                 solver_cfg: SolverConfig | None = None):
        self.params = params
        self.layout = layout
        self.cfg = cfg or OcpConfig()
        self.solver_cfg = solver_cfg or SolverConfig()
        self.state = ControllerState.initial(self.cfg)

    def reset(self):
        self.state = ControllerState.initial(self.cfg)

    def warmup(self):
        """Trigger kernel compilation outside of any timed region."""
        x0 = VehicleState(v_x=1.0)
        saved = self.state
        self.step(x0)
        self.state = saved

    def step(self, x_measured):
        u, sol, self.state = control_step(x_measured, self.layout, self.state, self.cfg,
                                          self.solver_cfg, self.params)
        return u, sol


def control_step(x_measured, layout: TrackLayout, cstate: ControllerState, cfg: OcpConfig,
                 solver_cfg: SolverConfig, params: VehicleParams):
    """One NMPC tick: reference generation, OCP solve, receding-horizon shift.

    Returns ``(u_applied, HorizonSolution, new ControllerState)``.
    """
    x0 = _as_state_array(x_measured)
    if not np.isfinite(x0).all():
        raise ValueError("measured state is not finite")
    cl = layout.center_line
    pr = project(cl, x0[:2], cstate.last_projection_index,
                 None if cstate.last_projection_index is None else cfg.window)
    p_d = lookahead_reference(cl, pr.index, cfg.lookahead)
    ocp = Ocp(params, cfg, layout, x0, cstate.u_prev, p_d, hint=pr.index)
    problem = ocp.problem()
    box = problem.box
    u0 = np.clip(cstate.warm_start.ravel(), box.lower, box.upper)

    y0 = cstate.multipliers if cfg.warm_start_multipliers else None
    if y0 is not None and y0.shape != (problem.n_alm,):
        y0 = None
    c0 = None
    if cfg.warm_start_penalty and cstate.penalty is not None:
        c0 = cstate.penalty / cfg.penalty_decay

    degraded = False
    try:
        sol = alm_pm_solve(problem, u0, solver_cfg, y0=y0, penalty0=c0)
    except NumericalError:
        sol = NlpSolution(u_star=u0, status=Status.INFEASIBLE, multipliers=np.zeros(problem.n_alm))
        degraded = True
    if sol.status == Status.INFEASIBLE:
        degraded = True

    if degraded:
        U = u0.reshape(cfg.N, 2)
        y_next, c_next = None, None
    else:
        U = sol.u_star.reshape(cfg.N, 2)
        y_next = sol.multipliers
        c_next = sol.penalty
    U = np.clip(U, cfg.u_lo, cfg.u_hi)
    X = ocp.rollout(U)
    u_applied = U[0].copy()

    shifted = np.vstack([U[1:], U[-1:]])
    if y_next is not None and y_next.size:
        y_next = np.concatenate([y_next[1:], y_next[-1:]])
    new_state = ControllerState(
        u_prev=u_applied.copy(), warm_start=shifted, last_projection_index=pr.index,
        multipliers=y_next, penalty=c_next, degraded=degraded,
    )
    hs = HorizonSolution(inputs=U, predicted_states=X, solution=sol, reference=p_d,
                         projection_index=pr.index, degraded=degraded)
    return ControlInput(float(u_applied[0]), float(u_applied[1])), hs, new_state
