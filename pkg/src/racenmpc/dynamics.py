"""Dynamic bicycle model with Pacejka lateral tire forces and a drivetrain model.

State ``x = [p_x, p_y, phi, v_x, v_y, omega]`` and input ``u = [d, delta]``.
Numerical kernels operate on flat float arrays and are compiled with numba;
the dataclasses below are the typed façade used by the rest of the package.

Packed parameter layout used by every kernel (14 entries)::

    [l_f, l_r, m, J_z, B_f, B_r, C_f, C_r, D_f, D_r, C_m1, C_m2, C_m3, C_m4]
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np
from numba import njit

V_EPS = 0.05  # slip-angle denominator clamp [m/s]

STATE_NAMES = ("p_x", "p_y", "phi", "v_x", "v_y", "omega")
ZETA_NAMES = ("B_f", "B_r", "C_f", "C_r", "D_f", "D_r", "C_m1", "C_m2", "C_m3", "C_m4")

# offsets into the packed parameter vector
_LF, _LR, _M, _JZ = 0, 1, 2, 3
ZETA_SLICE = slice(4, 14)


class InvalidInputError(ValueError):
    """Raised when a model input is non-finite or violates a type invariant."""


class NumericalBlowupError(FloatingPointError):
    """Raised when a model evaluation produces a non-finite quantity."""

    def __init__(self, message, field=None, step=None):
        super().__init__(message)
        self.field = field
        self.step = step


def _require(cond, message):
    if not cond:
        raise InvalidInputError(message)


@dataclass(frozen=True)
class ChassisParams:
    l_f: float
    l_r: float
    m: float
    J_z: float

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            _require(math.isfinite(v) and v > 0, f"{f.name} must be finite and > 0, got {v}")


@dataclass(frozen=True)
class TireParams:
    B_f: float
    B_r: float
    C_f: float
    C_r: float
    D_f: float
    D_r: float

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            _require(math.isfinite(v) and v > 0, f"{f.name} must be finite and > 0, got {v}")


@dataclass(frozen=True)
class DrivetrainParams:
    C_m1: float
    C_m2: float
    C_m3: float
    C_m4: float

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            _require(math.isfinite(v) and v >= 0, f"{f.name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class VehicleParams:
    chassis: ChassisParams
    tires: TireParams
    drivetrain: DrivetrainParams

    @classmethod
    def default(cls) -> "VehicleParams":
        """Identified small-scale car values (1:10 F1/10 platform)."""
        return cls(
            ChassisParams(l_f=0.178, l_r=0.147, m=5.692, J_z=0.204),
            TireParams(B_f=9.242, B_r=17.716, C_f=0.085, C_r=0.133, D_f=134.585, D_r=159.919),
            DrivetrainParams(C_m1=20.0, C_m2=6.92e-7, C_m3=3.99, C_m4=0.67),
        )

    @property
    def zeta(self) -> np.ndarray:
        """The 10 identifiable parameters ``[B_f, B_r, C_f, C_r, D_f, D_r, C_m1..C_m4]``."""
        t, d = self.tires, self.drivetrain
        return np.array([t.B_f, t.B_r, t.C_f, t.C_r, t.D_f, t.D_r, d.C_m1, d.C_m2, d.C_m3, d.C_m4])

    def with_zeta(self, zeta) -> "VehicleParams":
        z = np.asarray(zeta, dtype=float)
        if z.shape != (10,):
            raise InvalidInputError(f"zeta must have 10 entries, got shape {z.shape}")
        return VehicleParams(
            self.chassis,
            TireParams(*map(float, z[:6])),
            DrivetrainParams(*map(float, z[6:])),
        )

    def packed(self) -> np.ndarray:
        c = self.chassis
        return np.concatenate([[c.l_f, c.l_r, c.m, c.J_z], self.zeta])

    @classmethod
    def from_packed(cls, p) -> "VehicleParams":
        p = np.asarray(p, dtype=float)
        return cls(ChassisParams(*map(float, p[:4])), TireParams(*map(float, p[4:10])),
                   DrivetrainParams(*map(float, p[10:14])))

    def to_dict(self) -> dict:
        out = {}
        for part in (self.chassis, self.tires, self.drivetrain):
            out.update({f.name: getattr(part, f.name) for f in fields(part)})
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "VehicleParams":
        base = cls.default().to_dict()
        unknown = set(data) - set(base)
        if unknown:
            raise InvalidInputError(f"unknown vehicle parameter(s): {sorted(unknown)}")
        base.update({k: float(v) for k, v in data.items()})
        return cls(
            ChassisParams(*(base[k] for k in ("l_f", "l_r", "m", "J_z"))),
            TireParams(*(base[k] for k in ZETA_NAMES[:6])),
            DrivetrainParams(*(base[k] for k in ZETA_NAMES[6:])),
        )


@dataclass(frozen=True)
class VehicleState:
    p_x: float = 0.0
    p_y: float = 0.0
    phi: float = 0.0
    v_x: float = 0.0
    v_y: float = 0.0
    omega: float = 0.0

    def __post_init__(self):
        for name in STATE_NAMES:
            v = getattr(self, name)
            _require(math.isfinite(v), f"state field {name} is not finite: {v}")

    def as_array(self) -> np.ndarray:
        return np.array([self.p_x, self.p_y, self.phi, self.v_x, self.v_y, self.omega])

    @classmethod
    def from_array(cls, x) -> "VehicleState":
        return cls(*map(float, x))


# the derivative carries the same six slots in per-second units
StateDerivative = VehicleState


@dataclass(frozen=True)
class ControlInput:
    d: float = 0.0
    delta: float = 0.0

    def __post_init__(self):
        _require(math.isfinite(self.d) and math.isfinite(self.delta),
                 f"control input is not finite: ({self.d}, {self.delta})")

    def as_array(self) -> np.ndarray:
        return np.array([self.d, self.delta])

    @classmethod
    def from_array(cls, u) -> "ControlInput":
        return cls(float(u[0]), float(u[1]))


# ---------------------------------------------------------------------------
# compiled kernels
# ---------------------------------------------------------------------------

@njit(cache=True)
def _pacejka(D, C, B, alpha):
    return D * math.sin(C * math.atan(B * alpha))


@njit(cache=True)
def _deriv(x, u, p, no_reverse):
    """Right-hand side ``f_c(x, u)``; ``no_reverse`` applies the plant-only F_x clamp."""
    out = np.empty(6)
    _deriv_into(x, u, p, no_reverse, out)
    return out


@njit(cache=True)
def _deriv_into(x, u, p, no_reverse, out):
    phi, vx, vy, om = x[2], x[3], x[4], x[5]
    d, delta = u[0], u[1]
    lf, lr, m, jz = p[0], p[1], p[2], p[3]
    vxc = vx if vx > V_EPS else V_EPS
    af = -math.atan((om * lf + vy) / vxc) + delta
    ar = math.atan((om * lr - vy) / vxc)
    ffy = _pacejka(p[8], p[6], p[4], af)
    fry = _pacejka(p[9], p[7], p[5], ar)
    fx = (p[10] - p[11] * vx) * d - p[12] - p[13] * vx * vx
    if no_reverse and vx <= 0.0 and fx < 0.0:
        fx = 0.0
    cphi, sphi = math.cos(phi), math.sin(phi)
    cd, sd = math.cos(delta), math.sin(delta)
    out[0] = vx * cphi - vy * sphi
    out[1] = vx * sphi + vy * cphi
    out[2] = om
    out[3] = (fx - ffy * sd + fx * cd) / m + vy * om
    out[4] = (fry + ffy * cd + fx * sd) / m - vx * om
    out[5] = (lf * ffy * cd + lf * fx * sd - lr * fry) / jz


@njit(cache=True)
def _deriv_jac(x, u, p, A, B):
    """Return ``f_c`` and fill ``A = df/dx`` (6x6) and ``B = df/du`` (6x2) in place."""
    f = np.empty(6)
    _deriv_jac_into(x, u, p, f, A, B)
    return f


@njit(cache=True)
def _deriv_jac_into(x, u, p, f, A, B):
    phi, vx, vy, om = x[2], x[3], x[4], x[5]
    d, delta = u[0], u[1]
    lf, lr, m, jz = p[0], p[1], p[2], p[3]
    Bf, Br, Cf, Cr, Df, Dr = p[4], p[5], p[6], p[7], p[8], p[9]
    cm1, cm2, cm3, cm4 = p[10], p[11], p[12], p[13]

    if vx > V_EPS:
        vxc = vx
        dvxc = 1.0
    else:
        vxc = V_EPS
        dvxc = 0.0
    qf = (om * lf + vy) / vxc
    qr = (om * lr - vy) / vxc
    kf = 1.0 / (1.0 + qf * qf)
    kr = 1.0 / (1.0 + qr * qr)
    af = -math.atan(qf) + delta
    ar = math.atan(qr)
    # d(alpha)/d(vx, vy, om)
    daf_vx = kf * qf / vxc * dvxc
    daf_vy = -kf / vxc
    daf_om = -kf * lf / vxc
    dar_vx = -kr * qr / vxc * dvxc
    dar_vy = -kr / vxc
    dar_om = kr * lr / vxc

    tf = math.atan(Bf * af)
    tr = math.atan(Br * ar)
    ffy = Df * math.sin(Cf * tf)
    fry = Dr * math.sin(Cr * tr)
    dffy = Df * math.cos(Cf * tf) * Cf * Bf / (1.0 + (Bf * af) ** 2)
    dfry = Dr * math.cos(Cr * tr) * Cr * Br / (1.0 + (Br * ar) ** 2)

    fx = (cm1 - cm2 * vx) * d - cm3 - cm4 * vx * vx
    dfx_vx = -cm2 * d - 2.0 * cm4 * vx
    dfx_d = cm1 - cm2 * vx

    cphi, sphi = math.cos(phi), math.sin(phi)
    cd, sd = math.cos(delta), math.sin(delta)

    f[0] = vx * cphi - vy * sphi
    f[1] = vx * sphi + vy * cphi
    f[2] = om
    f[3] = (fx - ffy * sd + fx * cd) / m + vy * om
    f[4] = (fry + ffy * cd + fx * sd) / m - vx * om
    f[5] = (lf * ffy * cd + lf * fx * sd - lr * fry) / jz

    A[:, :] = 0.0
    B[:, :] = 0.0
    A[0, 2] = -vx * sphi - vy * cphi
    A[0, 3] = cphi
    A[0, 4] = -sphi
    A[1, 2] = vx * cphi - vy * sphi
    A[1, 3] = sphi
    A[1, 4] = cphi
    A[2, 5] = 1.0

    # front/rear lateral force sensitivities to (vx, vy, om)
    dffy_vx, dffy_vy, dffy_om = dffy * daf_vx, dffy * daf_vy, dffy * daf_om
    dfry_vx, dfry_vy, dfry_om = dfry * dar_vx, dfry * dar_vy, dfry * dar_om

    A[3, 3] = (dfx_vx * (1.0 + cd) - dffy_vx * sd) / m
    A[3, 4] = -dffy_vy * sd / m + om
    A[3, 5] = -dffy_om * sd / m + vy
    A[4, 3] = (dfry_vx + dffy_vx * cd + dfx_vx * sd) / m - om
    A[4, 4] = (dfry_vy + dffy_vy * cd) / m
    A[4, 5] = (dfry_om + dffy_om * cd) / m - vx
    A[5, 3] = (lf * dffy_vx * cd + lf * dfx_vx * sd - lr * dfry_vx) / jz
    A[5, 4] = (lf * dffy_vy * cd - lr * dfry_vy) / jz
    A[5, 5] = (lf * dffy_om * cd - lr * dfry_om) / jz

    # inputs: d enters through fx, delta through alpha_f and the trig factors
    B[3, 0] = dfx_d * (1.0 + cd) / m
    B[4, 0] = dfx_d * sd / m
    B[5, 0] = lf * dfx_d * sd / jz
    B[3, 1] = (-dffy * sd - ffy * cd - fx * sd) / m
    B[4, 1] = (dffy * cd - ffy * sd + fx * cd) / m
    B[5, 1] = (lf * dffy * cd - lf * ffy * sd + lf * fx * cd) / jz


@njit(cache=True)
def _deriv_zeta_jac(x, u, p, J):
    """Fill ``J = d(v_x', v_y', omega')/d(zeta)`` (3x10) and return the velocity rows of f_c."""
    vx, vy, om = x[3], x[4], x[5]
    d, delta = u[0], u[1]
    lf, lr, m, jz = p[0], p[1], p[2], p[3]
    Bf, Br, Cf, Cr, Df, Dr = p[4], p[5], p[6], p[7], p[8], p[9]
    vxc = vx if vx > V_EPS else V_EPS
    af = -math.atan((om * lf + vy) / vxc) + delta
    ar = math.atan((om * lr - vy) / vxc)
    tf = math.atan(Bf * af)
    tr = math.atan(Br * ar)
    sf, cf_ = math.sin(Cf * tf), math.cos(Cf * tf)
    sr, cr_ = math.sin(Cr * tr), math.cos(Cr * tr)
    ffy = Df * sf
    fry = Dr * sr
    fx = (p[10] - p[11] * vx) * d - p[12] - p[13] * vx * vx
    cd, sd = math.cos(delta), math.sin(delta)

    # partials of the three forces w.r.t. zeta (index order of ZETA_NAMES)
    g_ffy = np.zeros(10)
    g_fry = np.zeros(10)
    g_fx = np.zeros(10)
    g_ffy[0] = Df * cf_ * Cf * af / (1.0 + (Bf * af) ** 2)
    g_ffy[2] = Df * cf_ * tf
    g_ffy[4] = sf
    g_fry[1] = Dr * cr_ * Cr * ar / (1.0 + (Br * ar) ** 2)
    g_fry[3] = Dr * cr_ * tr
    g_fry[5] = sr
    g_fx[6] = d
    g_fx[7] = -vx * d
    g_fx[8] = -1.0
    g_fx[9] = -vx * vx

    for i in range(10):
        J[0, i] = (g_fx[i] * (1.0 + cd) - g_ffy[i] * sd) / m
        J[1, i] = (g_fry[i] + g_ffy[i] * cd + g_fx[i] * sd) / m
        J[2, i] = (lf * g_ffy[i] * cd + lf * g_fx[i] * sd - lr * g_fry[i]) / jz

    out = np.empty(3)
    out[0] = (fx - ffy * sd + fx * cd) / m + vy * om
    out[1] = (fry + ffy * cd + fx * sd) / m - vx * om
    out[2] = (lf * ffy * cd + lf * fx * sd - lr * fry) / jz
    return out


@njit(cache=True)
def _rk4(x, u, dt, p, no_reverse):
    k1 = _deriv(x, u, p, no_reverse)
    k2 = _deriv(x + 0.5 * dt * k1, u, p, no_reverse)
    k3 = _deriv(x + 0.5 * dt * k2, u, p, no_reverse)
    k4 = _deriv(x + dt * k3, u, p, no_reverse)
    return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


@njit(cache=True)
def _rk4_substeps(x, u, dt, n, p, no_reverse):
    for _ in range(n):
        x = _rk4(x, u, dt, p, no_reverse)
    return x


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------

def _finite_or_raise(vec, names, what, step=None):
    bad = ~np.isfinite(vec)
    if bad.any():
        name = names[int(np.argmax(bad))]
        raise NumericalBlowupError(f"non-finite {what} in field {name!r}", field=name, step=step)


def slip_angles(state: VehicleState, delta: float, chassis: ChassisParams):
    """Front and rear slip angles [rad]; ``v_x`` is clamped below at ``V_EPS``."""
    if not all(math.isfinite(v) for v in (state.v_x, state.v_y, state.omega, delta)):
        raise InvalidInputError("slip_angles received non-finite input")
    vxc = max(state.v_x, V_EPS)
    alpha_f = -math.atan((state.omega * chassis.l_f + state.v_y) / vxc) + delta
    alpha_r = math.atan((state.omega * chassis.l_r - state.v_y) / vxc)
    return alpha_f, alpha_r


def lateral_forces(alpha_f: float, alpha_r: float, tires: TireParams):
    if not (math.isfinite(alpha_f) and math.isfinite(alpha_r)):
        raise InvalidInputError("lateral_forces received non-finite slip angle")
    t = tires
    return (t.D_f * math.sin(t.C_f * math.atan(t.B_f * alpha_f)),
            t.D_r * math.sin(t.C_r * math.atan(t.B_r * alpha_r)))


def longitudinal_force(d: float, v_x: float, drivetrain: DrivetrainParams) -> float:
    if not (math.isfinite(d) and math.isfinite(v_x)):
        raise InvalidInputError("longitudinal_force received non-finite input")
    c = drivetrain
    return (c.C_m1 - c.C_m2 * v_x) * d - c.C_m3 - c.C_m4 * v_x * v_x


def state_derivative(state: VehicleState, u: ControlInput, params: VehicleParams,
                     no_reverse: bool = False) -> StateDerivative:
    """Evaluate the continuous-time bicycle model.

    ``no_reverse`` zeroes a negative drive force at ``v_x <= 0`` so the plant
    cannot be pushed backwards by braking; the prediction model leaves it off.
    """
    xdot = _deriv(state.as_array(), u.as_array(), params.packed(), no_reverse)
    _finite_or_raise(xdot, STATE_NAMES, "state derivative")
    return StateDerivative.from_array(xdot)


def step_euler(state: VehicleState, u: ControlInput, dt: float, params: VehicleParams,
               no_reverse: bool = False) -> VehicleState:
    if not dt > 0:
        raise InvalidInputError(f"dt must be > 0, got {dt}")
    x = state.as_array()
    x1 = x + dt * _deriv(x, u.as_array(), params.packed(), no_reverse)
    _finite_or_raise(x1, STATE_NAMES, "state after Euler step")
    return VehicleState.from_array(x1)


def step_rk4(state: VehicleState, u: ControlInput, dt: float, params: VehicleParams,
             no_reverse: bool = False) -> VehicleState:
    """Classical fourth-order Runge-Kutta step with ``u`` held over ``dt``."""
    if not dt > 0:
        raise InvalidInputError(f"dt must be > 0, got {dt}")
    x1 = _rk4(state.as_array(), u.as_array(), dt, params.packed(), no_reverse)
    _finite_or_raise(x1, STATE_NAMES, "state after RK4 step")
    return VehicleState.from_array(x1)


def simulate_substeps(x, u, dt, n_sub, packed_params, no_reverse=True):
    """Array-level plant advance: ``n_sub`` RK4 steps of ``dt`` with ``u`` held."""
    x1 = _rk4_substeps(np.asarray(x, dtype=float), np.asarray(u, dtype=float), float(dt),
                       int(n_sub), packed_params, no_reverse)
    _finite_or_raise(x1, STATE_NAMES, "plant state")
    return x1
