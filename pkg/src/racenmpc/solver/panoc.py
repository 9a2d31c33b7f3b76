"""PANOC: projected gradient steps accelerated by L-BFGS, globalised on the
forward-backward envelope (FBE).

At iterate ``u`` with step ``gamma`` the forward-backward point is
``ubar = P(u - gamma * grad f(u))`` and the fixed-point residual is
``r = u - ubar``. The envelope value is::

    phi(u) = f(u) - grad f(u)' r + |r|^2 / (2 gamma)

Candidates ``u - (1 - tau) r - tau H r`` are accepted once ``phi`` decreases
by ``sigma |r|^2``; ``tau = 0`` is the plain projected-gradient step, for which
the decrease is guaranteed whenever ``gamma`` is below ``1/L``.
"""

from __future__ import annotations

import time

import numpy as np
from numba import njit

from .lbfgs import LBFGS, _two_loop
from .problem import BoxBounds, NlpProblem, NlpSolution, NumericalError, SolverConfig, Status

GAMMA_L_COEFF = 0.95
MIN_L_ESTIMATE = 1e-10


def _estimate_lipschitz(cost_grad, u, g):
    h = np.maximum(1e-6, 1e-6 * np.abs(u))
    _, g2 = cost_grad(u + h)
    L = float(np.linalg.norm(g2 - g) / np.linalg.norm(h))
    if not np.isfinite(L):
        raise NumericalError("non-finite gradient while probing the Lipschitz constant", u)
    return max(L, MIN_L_ESTIMATE)


class _Panoc:
    def __init__(self, cost_grad, box: BoxBounds, cfg: SolverConfig, tol: float, cost=None):
        self.f = cost_grad
        # value-only evaluator for the forward-backward point; its gradient
        # is only needed when the line search falls back to tau = 0
        self.fval = cost
        self.lo = box.lower
        self.hi = box.upper
        self.cfg = cfg
        self.tol = tol
        self.lbfgs = LBFGS(box.n, cfg.lbfgs_mem)

    def _fb(self, u, g, gamma):
        ubar = np.minimum(np.maximum(u - gamma * g, self.lo), self.hi)
        return ubar, u - ubar

    def _value(self, u):
        if self.fval is None:
            return self.f(u)
        return self.fval(u), None

    def _lipschitz_ok(self, fu, g, r, fbar, L):
        # descent lemma with a small relative slack against round-off
        rhs = fu - g @ r + 0.5 * L * (r @ r) + 1e-12 * (1.0 + abs(fu))
        return fbar <= rhs

    def run(self, u0):
        cfg = self.cfg
        f = self.f
        u = np.minimum(np.maximum(np.asarray(u0, dtype=float), self.lo), self.hi)
        fu, g = f(u)
        if not (np.isfinite(fu) and np.all(np.isfinite(g))):
            raise NumericalError("non-finite cost or gradient at the initial point", u)
        L = _estimate_lipschitz(f, u, g)
        gamma = GAMMA_L_COEFF / L
        trace = [] if cfg.record_trace else None

        ubar, r = self._fb(u, g, gamma)
        fbar, gbar = self._value(ubar)
        while not self._lipschitz_ok(fu, g, r, fbar, L):
            L *= 2.0
            gamma *= 0.5
            ubar, r = self._fb(u, g, gamma)
            fbar, gbar = self._value(ubar)

        iters = 0
        status = Status.MAX_ITERS
        while True:
            res = float(np.max(np.abs(r))) / gamma if r.size else 0.0
            if res <= self.tol:
                status = Status.CONVERGED
                break
            if iters >= cfg.max_inner_iters:
                break
            sigma = (1.0 - GAMMA_L_COEFF) / (4.0 * gamma)
            rr = r @ r
            phi = fu - g @ r + rr / (2.0 * gamma)
            d = -self.lbfgs.apply(r)

            tau = 1.0
            for k in range(cfg.max_backtracks + 1):
                if k == cfg.max_backtracks:
                    tau = 0.0
                if tau > 0.0:
                    u_new = u - (1.0 - tau) * r + tau * d
                    f_new, g_new = f(u_new)
                    if not (np.isfinite(f_new) and np.all(np.isfinite(g_new))):
                        tau *= 0.5
                        continue
                else:
                    if gbar is None:
                        fbar, gbar = f(ubar)
                    u_new, f_new, g_new = ubar, fbar, gbar
                ubar_new, r_new = self._fb(u_new, g_new, gamma)
                phi_new = f_new - g_new @ r_new + (r_new @ r_new) / (2.0 * gamma)
                if tau == 0.0 or phi_new <= phi - sigma * rr:
                    break
                tau *= 0.5
            if trace is not None:
                trace.append((phi, phi_new))

            fbar_new, gbar_new = self._value(ubar_new)
            if not np.isfinite(fbar_new):
                raise NumericalError("non-finite cost at the forward-backward point", ubar_new)
            # Lipschitz safeguard at the new iterate; shrinking gamma invalidates the memory
            while not self._lipschitz_ok(f_new, g_new, r_new, fbar_new, L):
                L *= 2.0
                gamma *= 0.5
                self.lbfgs.reset()
                ubar_new, r_new = self._fb(u_new, g_new, gamma)
                fbar_new, gbar_new = self._value(ubar_new)

            self.lbfgs.update(u_new - u, r_new - r)
            u, fu, g = u_new, f_new, g_new
            ubar, r, fbar, gbar = ubar_new, r_new, fbar_new, gbar_new
            iters += 1

        return ubar, fbar, iters, res, status, trace


def panoc_solve(problem: NlpProblem, u0, cfg: SolverConfig | None = None, *,
                tol: float | None = None, cost_grad=None, cost=None) -> NlpSolution:
    """Minimise ``problem.cost_grad`` over ``problem.box`` from ``u0``.

    General constraint maps on ``problem`` are ignored here; see
    :func:`alm_pm_solve`. ``cost_grad`` overrides the problem's evaluator
    (used by the outer loop to pass the augmented cost); ``cost`` is the
    matching value-only evaluator.
    """
    cfg = cfg or SolverConfig()
    t0 = time.perf_counter()
    if cost_grad is None:
        cost_grad, cost = problem.cost_grad, problem.cost
    inner = _Panoc(cost_grad, problem.box, cfg, cfg.eps_inner if tol is None else tol, cost)
    u, fu, iters, res, status, trace = inner.run(u0)
    return NlpSolution(u_star=u, status=status, inner_iters=iters, outer_iters=0,
                       fbe_residual=res, cost=float(fu), solve_time=time.perf_counter() - t0,
                       fbe_trace=trace)


# ---------------------------------------------------------------------------
# compiled variant for numba-jitted evaluators
# ---------------------------------------------------------------------------

@njit(cache=True)
def _fb_jit(u, g, gamma, lo, hi, ubar, r):
    for i in range(u.shape[0]):
        v = u[i] - gamma * g[i]
        if v < lo[i]:
            v = lo[i]
        elif v > hi[i]:
            v = hi[i]
        ubar[i] = v
        r[i] = u[i] - v


@njit(cache=True)
def _all_finite(v):
    for i in range(v.shape[0]):
        if not np.isfinite(v[i]):
            return False
    return True


@njit
def _panoc_kernel(fg, fv, args, u0, lo, hi, tol, max_iters, mem, max_backtracks, record):
    """Same iteration as :class:`_Panoc`, for ``fg(u, args) -> (f, grad)`` and
    ``fv(u, args) -> f`` compiled with numba.

    Returns ``(ubar, fbar, iters, residual, code, trace, n_trace)`` where
    ``code`` is 0 (converged), 1 (max iterations) or -1 (non-finite values).
    Not cached: numba cannot cache functions taking other functions as
    arguments, so each evaluator pair compiles once per process.
    """
    n = u0.shape[0]
    S = np.zeros((mem, n))
    Y = np.zeros((mem, n))
    rho = np.zeros(mem)
    count = 0
    head = 0
    trace = np.empty((max_iters if record else 0, 2))
    n_trace = 0

    u = np.minimum(np.maximum(u0, lo), hi)
    fu, g = fg(u, args)
    if not (np.isfinite(fu) and _all_finite(g)):
        return u, fu, 0, np.inf, -1, trace, 0
    h = np.maximum(1e-6, 1e-6 * np.abs(u))
    _, g2 = fg(u + h, args)
    L = np.linalg.norm(g2 - g) / np.linalg.norm(h)
    if not np.isfinite(L):
        return u, fu, 0, np.inf, -1, trace, 0
    L = max(L, MIN_L_ESTIMATE)
    gamma = GAMMA_L_COEFF / L

    ubar = np.empty(n)
    r = np.empty(n)
    _fb_jit(u, g, gamma, lo, hi, ubar, r)
    fbar = fv(ubar, args)
    while not fbar <= fu - g @ r + 0.5 * L * (r @ r) + 1e-12 * (1.0 + abs(fu)):
        L *= 2.0
        gamma *= 0.5
        _fb_jit(u, g, gamma, lo, hi, ubar, r)
        fbar = fv(ubar, args)
    gbar = g
    have_gbar = False

    ubar_new = np.empty(n)
    r_new = np.empty(n)
    u_new = np.empty(n)
    iters = 0
    code = 1
    res = 0.0
    while True:
        res = np.max(np.abs(r)) / gamma if n > 0 else 0.0
        if res <= tol:
            code = 0
            break
        if iters >= max_iters:
            break
        sigma = (1.0 - GAMMA_L_COEFF) / (4.0 * gamma)
        rr = r @ r
        phi = fu - g @ r + rr / (2.0 * gamma)
        d = -_two_loop(S, Y, rho, count, head, r)

        tau = 1.0
        phi_new = phi
        f_new = fu
        g_new = g
        for k in range(max_backtracks + 1):
            if k == max_backtracks:
                tau = 0.0
            if tau > 0.0:
                for i in range(n):
                    u_new[i] = u[i] - (1.0 - tau) * r[i] + tau * d[i]
                f_new, g_new = fg(u_new, args)
                if not (np.isfinite(f_new) and _all_finite(g_new)):
                    tau *= 0.5
                    continue
            else:
                if not have_gbar:
                    fbar, gbar = fg(ubar, args)
                u_new[:] = ubar
                f_new, g_new = fbar, gbar
            _fb_jit(u_new, g_new, gamma, lo, hi, ubar_new, r_new)
            phi_new = f_new - g_new @ r_new + (r_new @ r_new) / (2.0 * gamma)
            if tau == 0.0 or phi_new <= phi - sigma * rr:
                break
            tau *= 0.5
        if record:
            trace[n_trace, 0] = phi
            trace[n_trace, 1] = phi_new
            n_trace += 1

        fbar_new = fv(ubar_new, args)
        if not np.isfinite(fbar_new):
            return ubar_new, fbar_new, iters, res, -1, trace, n_trace
        while not (fbar_new <= f_new - g_new @ r_new + 0.5 * L * (r_new @ r_new)
                   + 1e-12 * (1.0 + abs(f_new))):
            L *= 2.0
            gamma *= 0.5
            count = 0
            head = 0
            _fb_jit(u_new, g_new, gamma, lo, hi, ubar_new, r_new)
            fbar_new = fv(ubar_new, args)

        # curvature pair (s, y) = (u_new - u, r_new - r)
        s_vec = u_new - u
        y_vec = r_new - r
        sy = s_vec @ y_vec
        if sy > 1e-12 * (s_vec @ s_vec) and np.isfinite(sy):
            S[head] = s_vec
            Y[head] = y_vec
            rho[head] = 1.0 / sy
            head = (head + 1) % mem
            count = min(count + 1, mem)

        u[:] = u_new
        fu = f_new
        g = g_new
        ubar[:] = ubar_new
        r[:] = r_new
        fbar = fbar_new
        have_gbar = False
        iters += 1

    return ubar, fbar, iters, res, code, trace, n_trace


def panoc_solve_compiled(fg, fv, args, box: BoxBounds, u0, cfg: SolverConfig | None = None,
                         *, tol: float | None = None) -> NlpSolution:
    """:func:`panoc_solve` running entirely in compiled code.

    ``fg(u, args) -> (f, grad)`` and ``fv(u, args) -> f`` must be numba
    functions. Results match the Python loop up to floating-point association.
    """
    cfg = cfg or SolverConfig()
    t0 = time.perf_counter()
    u0 = np.ascontiguousarray(np.asarray(u0, dtype=float))
    ubar, fbar, iters, res, code, trace, n_trace = _panoc_kernel(
        fg, fv, args, u0, box.lower, box.upper, cfg.eps_inner if tol is None else tol,
        cfg.max_inner_iters, cfg.lbfgs_mem, cfg.max_backtracks, cfg.record_trace)
    if code < 0:
        raise NumericalError("non-finite cost or gradient in the inner solver", ubar)
    return NlpSolution(
        u_star=ubar, status=Status.CONVERGED if code == 0 else Status.MAX_ITERS,
        inner_iters=int(iters), outer_iters=0, fbe_residual=float(res), cost=float(fbar),
        solve_time=time.perf_counter() - t0,
        fbe_trace=[tuple(t) for t in trace[:n_trace]] if cfg.record_trace else None,
    )
