"""Augmented Lagrangian / quadratic penalty outer loop around PANOC.

Each outer iteration minimises over the box

    psi(u) = f(u) + c/2 * dist^2(F1(u) + y/c, C) + c/2 * |F2(u)|^2

then updates ``y <- c * (F1 + y/c - P_C(F1 + y/c))`` clipped to the
multiplier bounds, and multiplies ``c`` by the update factor whenever the
violation did not shrink enough.
"""

from __future__ import annotations

import time

import numpy as np

from .panoc import panoc_solve, panoc_solve_compiled
from .problem import NlpProblem, NlpSolution, SolverConfig, Status


def _assembled(problem: NlpProblem, y, c):
    """Augmented cost built from the separate cost and constraint evaluators."""
    lo, hi = problem.alm_set if problem.alm_map is not None else (None, None)

    def psi(u):
        f, g = problem.cost_grad(u)
        g = np.array(g, dtype=float)
        F1 = F2 = None
        if problem.alm_map is not None:
            F1 = np.asarray(problem.alm_map.value(u), dtype=float)
            w = F1 + y / c
            e = w - np.clip(w, lo, hi)
            f = f + 0.5 * c * (e @ e)
            g += c * np.asarray(problem.alm_map.vjp(u, e), dtype=float)
        if problem.pm_map is not None:
            F2 = np.asarray(problem.pm_map.value(u), dtype=float)
            f = f + 0.5 * c * (F2 @ F2)
            g += c * np.asarray(problem.pm_map.vjp(u, F2), dtype=float)
        return f, g, F1, F2

    return psi


def _maps_at(problem: NlpProblem, u, y, c):
    if problem.augmented is not None:
        _, _, F1, F2 = problem.augmented(u, y, c)
        return F1, F2
    F1 = None if problem.alm_map is None else np.asarray(problem.alm_map.value(u), dtype=float)
    F2 = None if problem.pm_map is None else np.asarray(problem.pm_map.value(u), dtype=float)
    return F1, F2


def _violation(problem: NlpProblem, u, y, c, has_alm, has_pm) -> float:
    F1, F2 = _maps_at(problem, u, y, c)
    viol = 0.0
    if has_alm and F1.size:
        lo, hi = problem.alm_set
        viol = float(np.max(np.abs(F1 - np.clip(F1, lo, hi))))
    if has_pm and F2.size:
        viol = max(viol, float(np.max(np.abs(F2))))
    return viol


def alm_pm_solve(problem: NlpProblem, u0, cfg: SolverConfig | None = None, *,
                 y0=None, penalty0: float | None = None) -> NlpSolution:
    """Solve a box-constrained NLP with ALM (``F1 in C``) and PM (``F2 = 0``) constraints.

    ``y0`` and ``penalty0`` warm-start the multipliers and the penalty weight.
    """
    cfg = cfg or SolverConfig()
    t0 = time.perf_counter()
    has_alm = problem.alm_map is not None or (problem.augmented is not None and problem.n_alm > 0)
    has_pm = problem.pm_map is not None or (problem.augmented is not None and problem.n_pm > 0)
    if not (has_alm or has_pm):
        sol = panoc_solve(problem, u0, cfg)
        sol.outer_iters = 1
        sol.penalty = 0.0
        return sol

    n_alm = problem.n_alm if has_alm else 0
    if has_alm:
        lo, hi = problem.alm_set
    y = np.zeros(n_alm) if y0 is None else np.clip(np.asarray(y0, dtype=float),
                                                   cfg.lambda_min, cfg.lambda_max)
    c = cfg.penalty_init if penalty0 is None else float(penalty0)
    c = min(max(c, cfg.penalty_init), cfg.max_penalty)
    tol = cfg.eps_inner if cfg.eps_inner_init is None else max(cfg.eps_inner_init, cfg.eps_inner)

    u = np.asarray(u0, dtype=float)
    inner_total = 0
    # the first outer iteration is judged against the violation at the start point
    prev_viol = _violation(problem, u, y, c, has_alm, has_pm)
    status = Status.MAX_ITERS
    trace = [] if cfg.record_trace else None
    sol = None
    viol = np.inf
    outer = 0
    for outer in range(1, cfg.max_outer_iters + 1):
        y_k, c_k = y.copy(), c
        psi_val = None
        if problem.augmented is not None:
            def psi_grad(v, y_k=y_k, c_k=c_k):
                out = problem.augmented(v, y_k, c_k)
                return out[0], out[1]
            if problem.augmented_value is not None:
                def psi_val(v, y_k=y_k, c_k=c_k):
                    return problem.augmented_value(v, y_k, c_k)
        else:
            full = _assembled(problem, y_k, c_k)

            def psi_grad(v, full=full):
                out = full(v)
                return out[0], out[1]

        if problem.compiled is not None:
            fg, fv, make_args = problem.compiled
            sol = panoc_solve_compiled(fg, fv, make_args(y_k, c_k), problem.box, u, cfg, tol=tol)
        else:
            sol = panoc_solve(problem, u, cfg, tol=tol, cost_grad=psi_grad, cost=psi_val)
        inner_total += sol.inner_iters
        if trace is not None:
            trace.extend(sol.fbe_trace)
        u = sol.u_star
        F1, F2 = _maps_at(problem, u, y_k, c_k)

        viol = 0.0
        if has_alm:
            w = F1 + y_k / c_k
            proj = np.clip(w, lo, hi)
            y = np.clip(c_k * (w - proj), cfg.lambda_min, cfg.lambda_max)
            if F1.size:
                viol = max(viol, float(np.max(np.abs(F1 - proj))))
        if has_pm and F2.size:
            viol = max(viol, float(np.max(np.abs(F2))))

        if viol <= cfg.eps_outer and sol.fbe_residual <= cfg.eps_inner:
            status = Status.CONVERGED
            break
        if viol > cfg.eps_outer and viol > cfg.violation_shrink * prev_viol:
            if c * cfg.penalty_update_factor > cfg.max_penalty:
                status = Status.INFEASIBLE
                break
            c *= cfg.penalty_update_factor
        prev_viol = viol
        tol = max(0.1 * tol, cfg.eps_inner)

    f_val, _ = problem.cost_grad(u)
    return NlpSolution(
        u_star=u, status=status, inner_iters=inner_total, outer_iters=outer,
        fbe_residual=sol.fbe_residual, constraint_violation=viol, multipliers=y,
        solve_time=time.perf_counter() - t0, cost=float(f_val), penalty=c, fbe_trace=trace,
    )
