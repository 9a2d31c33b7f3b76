"""Limited-memory BFGS inverse-Hessian products (two-loop recursion)."""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _two_loop(S, Y, rho, count, head, q):
    # newest pair sits at index head-1 (ring buffer of length S.shape[0])
    mem = S.shape[0]
    q = q.copy()
    alpha = np.empty(count)
    for k in range(count):
        i = (head - 1 - k) % mem
        a = rho[i] * np.dot(S[i], q)
        alpha[k] = a
        q -= a * Y[i]
    if count > 0:
        i = (head - 1) % mem
        q *= np.dot(S[i], Y[i]) / np.dot(Y[i], Y[i])
    for k in range(count - 1, -1, -1):
        i = (head - 1 - k) % mem
        b = rho[i] * np.dot(Y[i], q)
        q += (alpha[k] - b) * S[i]
    return q


class LBFGS:
    """Ring buffer of curvature pairs ``(s, y)``.

    Pairs whose curvature ``s'y`` is not sufficiently positive are rejected
    at insertion so the implied inverse Hessian stays positive definite.
    """

    def __init__(self, n: int, mem: int = 10, curvature_eps: float = 1e-12):
        self.n = n
        self.mem = mem
        self.curvature_eps = curvature_eps
        self.S = np.zeros((mem, n))
        self.Y = np.zeros((mem, n))
        self.rho = np.zeros(mem)
        self.count = 0
        self.head = 0

    def reset(self):
        self.count = 0
        self.head = 0

    def update(self, s, y) -> bool:
        sy = float(np.dot(s, y))
        if not (sy > self.curvature_eps * float(np.dot(s, s))) or not np.isfinite(sy):
            return False
        self.S[self.head] = s
        self.Y[self.head] = y
        self.rho[self.head] = 1.0 / sy
        self.head = (self.head + 1) % self.mem
        self.count = min(self.count + 1, self.mem)
        return True

    def apply(self, q) -> np.ndarray:
        """Approximate inverse Hessian times ``q`` (identity when empty)."""
        return _two_loop(self.S, self.Y, self.rho, self.count, self.head, np.asarray(q, dtype=float))


def lbfgs_direction(history, g) -> np.ndarray:
    """Quasi-Newton descent direction ``-H g`` from a list of ``(s, y)`` pairs, oldest first."""
    g = np.asarray(g, dtype=float)
    if not history:
        return -g
    buf = LBFGS(g.size, mem=len(history))
    for s, y in history:
        buf.update(np.asarray(s, dtype=float), np.asarray(y, dtype=float))
    return -buf.apply(g)
