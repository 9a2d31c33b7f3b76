"""Sampled lane center line, nearest-sample projection and look-ahead reference.

Tracks are either loaded from JSON or built procedurally from a short list of
straight/arc segments and resampled at constant arc-length spacing.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit


class TrackError(ValueError):
    """Invalid center line, obstacle placement or track file."""


@dataclass(frozen=True)
class CenterLine:
    points: np.ndarray
    d_s: float
    closed: bool = True

    def __post_init__(self):
        pts = np.ascontiguousarray(np.asarray(self.points, dtype=float))
        object.__setattr__(self, "points", pts)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise TrackError(f"points must have shape (K, 2), got {pts.shape}")
        if len(pts) <= 2:
            raise TrackError(f"center line needs more than 2 points, got {len(pts)}")
        if not (math.isfinite(self.d_s) and self.d_s > 0):
            raise TrackError(f"d_s must be > 0, got {self.d_s}")
        if not np.isfinite(pts).all():
            raise TrackError("center line contains non-finite coordinates")
        gaps = self.spacings()
        lo, hi = 0.9 * self.d_s, 1.1 * self.d_s
        bad = np.flatnonzero((gaps < lo) | (gaps > hi))
        if bad.size:
            i = int(bad[0])
            j = (i + 1) % len(pts)
            raise TrackError(
                f"points[{i}] -> points[{j}]: spacing {gaps[i]:.4f} m outside "
                f"[{lo:.4f}, {hi:.4f}] (d_s={self.d_s})")
        pts.setflags(write=False)

    def __len__(self):
        return len(self.points)

    def spacings(self) -> np.ndarray:
        pts = self.points
        nxt = np.roll(pts, -1, axis=0) if self.closed else pts[1:]
        cur = pts if self.closed else pts[:-1]
        return np.hypot(*(nxt - cur).T)

    @property
    def length(self) -> float:
        return float(self.spacings().sum())

    def curvature(self) -> np.ndarray:
        """Discrete unsigned curvature at each sample (turning angle / spacing)."""
        pts = self.points
        if self.closed:
            prev, nxt = np.roll(pts, 1, axis=0), np.roll(pts, -1, axis=0)
        else:
            prev = np.vstack([pts[:1], pts[:-1]])
            nxt = np.vstack([pts[1:], pts[-1:]])
        a = pts - prev
        b = nxt - pts
        cross = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
        dot = (a * b).sum(axis=1)
        ang = np.abs(np.arctan2(cross, dot))
        return ang / self.d_s


@dataclass(frozen=True)
class Obstacle:
    center: tuple
    radius: float
    gamma: float

    def __post_init__(self):
        c = tuple(float(v) for v in self.center)
        object.__setattr__(self, "center", c)
        if len(c) != 2 or not all(map(math.isfinite, c)):
            raise TrackError(f"obstacle center must be a finite planar point, got {self.center}")
        if not self.radius > 0:
            raise TrackError(f"obstacle radius must be > 0, got {self.radius}")
        if not self.gamma >= self.radius:
            raise TrackError(f"obstacle clearance Gamma={self.gamma} must be >= R={self.radius}")


@dataclass(frozen=True)
class TrackLayout:
    center_line: CenterLine
    obstacles: tuple = field(default_factory=tuple)
    R_g: float = 2.0
    R_c: float = 0.24

    def __post_init__(self):
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        if not (self.R_g > self.R_c > 0):
            raise TrackError(f"need R_g > R_c > 0, got R_g={self.R_g}, R_c={self.R_c}")
        half = self.R_g - self.R_c
        for j, ob in enumerate(self.obstacles):
            dist = project(self.center_line, ob.center).distance
            if not ob.gamma < dist + half:
                raise TrackError(
                    f"obstacles[{j}]: Gamma={ob.gamma} leaves no passable corridor "
                    f"(distance to center line {dist:.3f} m, half-width {half:.3f} m)")

    @property
    def half_width(self) -> float:
        return self.R_g - self.R_c

    def obstacle_array(self) -> np.ndarray:
        """``(O, 3)`` array of ``[c_x, c_y, Gamma]`` rows."""
        if not self.obstacles:
            return np.zeros((0, 3))
        return np.array([[*o.center, o.gamma] for o in self.obstacles])

    def without_obstacles(self) -> "TrackLayout":
        return TrackLayout(self.center_line, (), self.R_g, self.R_c)

    def to_dict(self) -> dict:
        cl = self.center_line
        return {
            "d_s": cl.d_s,
            "closed": cl.closed,
            "points": cl.points.tolist(),
            "R_g": self.R_g,
            "R_c": self.R_c,
            "obstacles": [{"center": list(o.center), "R": o.radius, "Gamma": o.gamma}
                          for o in self.obstacles],
        }


@dataclass(frozen=True)
class ProjectionResult:
    index: int
    point: tuple
    distance: float


# ---------------------------------------------------------------------------
# projection kernels
# ---------------------------------------------------------------------------

@njit(cache=True)
def _argmin_window(pts, px, py, hint, window, closed):
    """Nearest sample in ``hint +- window`` (whole line if window < 0); smallest index on ties."""
    K = pts.shape[0]
    if window < 0 or 2 * window + 1 >= K:
        lo, hi = 0, K - 1
        wrap = False
    elif closed:
        lo, hi = hint - window, hint + window
        wrap = True
    else:
        lo = max(0, hint - window)
        hi = min(K - 1, hint + window)
        wrap = False
    best_i = -1
    best_d = np.inf
    for jj in range(lo, hi + 1):
        j = jj % K if wrap else jj
        dx = pts[j, 0] - px
        dy = pts[j, 1] - py
        dd = dx * dx + dy * dy
        if dd < best_d or (dd == best_d and j < best_i):
            best_d = dd
            best_i = j
    return best_i, best_d


def project(cl: CenterLine, p, hint: int | None = None, window: int | None = None) -> ProjectionResult:
    """Nearest center-line sample to ``p``.

    Without ``hint`` (or ``window``) the full line is scanned. With both, only
    samples within ``hint +- window`` are considered (wrapping on closed lines).
    """
    if len(cl.points) == 0:
        raise TrackError("cannot project onto an empty center line")
    px, py = float(p[0]), float(p[1])
    if hint is None or window is None:
        i, dd = _argmin_window(cl.points, px, py, 0, -1, cl.closed)
    else:
        i, dd = _argmin_window(cl.points, px, py, int(hint) % len(cl), int(window), cl.closed)
    pt = cl.points[i]
    return ProjectionResult(int(i), (float(pt[0]), float(pt[1])), math.sqrt(dd))


def lookahead_index(cl: CenterLine, i_star: int, P: int) -> int:
    K = len(cl)
    if cl.closed:
        return (i_star + P) % K
    return min(i_star + P, K - 1)


def lookahead_reference(cl: CenterLine, i_star: int, P: int) -> tuple:
    """Point ``P`` samples ahead of ``i_star`` (wraps on closed lines, clamps on open ones)."""
    pt = cl.points[lookahead_index(cl, i_star, P)]
    return float(pt[0]), float(pt[1])


def lateral_deviation(cl: CenterLine, p, hint: int | None = None, window: int | None = None) -> float:
    return project(cl, p, hint, window).distance


# ---------------------------------------------------------------------------
# procedural tracks
# ---------------------------------------------------------------------------

def _segments_polyline(segments, start=(0.0, 0.0), heading=0.0, step=1e-3):
    """Dense polyline for turtle-style segments.

    Each segment is ``("straight", length)`` or ``("arc", radius, angle)`` with a
    positive angle turning left (counter-clockwise).
    """
    x, y = start
    h = heading
    out = [(x, y)]
    for seg in segments:
        kind = seg[0]
        if kind == "straight":
            length = float(seg[1])
            n = max(1, int(math.ceil(length / step)))
            for k in range(1, n + 1):
                s = length * k / n
                out.append((x + s * math.cos(h), y + s * math.sin(h)))
            x += length * math.cos(h)
            y += length * math.sin(h)
        elif kind == "arc":
            r, ang = float(seg[1]), float(seg[2])
            if r <= 0:
                raise TrackError(f"arc radius must be > 0, got {r}")
            sgn = 1.0 if ang > 0 else -1.0
            cx = x - sgn * r * math.sin(h)
            cy = y + sgn * r * math.cos(h)
            n = max(1, int(math.ceil(abs(ang) * r / step)))
            th0 = h - sgn * math.pi / 2
            for k in range(1, n + 1):
                th = th0 + ang * k / n
                out.append((cx + r * math.cos(th), cy + r * math.sin(th)))
            h += ang
            th = th0 + ang
            x, y = cx + r * math.cos(th), cy + r * math.sin(th)
        else:
            raise TrackError(f"unknown segment kind {kind!r}")
    return np.array(out)


def resample_closed(dense: np.ndarray, d_s: float) -> np.ndarray:
    """Resample a closed dense polyline at equal arc-length spacing close to ``d_s``."""
    if np.hypot(*(dense[-1] - dense[0])) < 1e-9:
        dense = dense[:-1]
    loop = np.vstack([dense, dense[:1]])
    seg = np.hypot(*np.diff(loop, axis=0).T)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    L = s[-1]
    K = max(3, int(round(L / d_s)))
    targets = np.arange(K) * (L / K)
    return np.column_stack([np.interp(targets, s, loop[:, 0]), np.interp(targets, s, loop[:, 1])])


def _segments_intersect(pts: np.ndarray, closed: bool) -> bool:
    """Proper intersection test between non-adjacent polyline segments."""
    a = pts
    b = np.roll(pts, -1, axis=0) if closed else pts[1:]
    a = a[: len(b)]
    n = len(a)
    d = b - a
    for i in range(n):
        j = np.arange(i + 2, n)
        if closed and i == 0:
            j = j[j != n - 1]
        if j.size == 0:
            continue
        p, r = a[i], d[i]
        q, s = a[j], d[j]
        rxs = r[0] * s[:, 1] - r[1] * s[:, 0]
        qp = q - p
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (qp[:, 0] * s[:, 1] - qp[:, 1] * s[:, 0]) / rxs
            u = (qp[:, 0] * r[1] - qp[:, 1] * r[0]) / rxs
        hit = (np.abs(rxs) > 1e-14) & (t >= 0) & (t <= 1) & (u >= 0) & (u <= 1)
        if hit.any():
            return True
    return False


def stadium_segments(straight=8.0, radius=2.5):
    return [("straight", straight), ("arc", radius, math.pi),
            ("straight", straight), ("arc", radius, math.pi)]


def winding_segments(width=16.0, height=11.0, radii=(2.5, 4.0, 2.5, 3.5)):
    """Rounded rectangle with four corners of different radius."""
    r1, r2, r3, r4 = radii
    q = math.pi / 2
    return [("straight", width - r4 - r1), ("arc", r1, q),
            ("straight", height - r1 - r2), ("arc", r2, q),
            ("straight", width - r2 - r3), ("arc", r3, q),
            ("straight", height - r3 - r4), ("arc", r4, q)]


def _obstacle_from_spec(cl: CenterLine, spec: dict, R_default: float, gamma_default: float) -> Obstacle:
    """Obstacle either at an explicit center or at a center-line fraction plus lateral offset."""
    R = float(spec.get("R", R_default))
    gamma = float(spec.get("Gamma", gamma_default))
    if "center" in spec:
        return Obstacle(tuple(spec["center"]), R, gamma)
    frac = float(spec["at"]) % 1.0
    i = int(round(frac * len(cl))) % len(cl)
    pts = cl.points
    t = pts[(i + 1) % len(cl)] - pts[i - 1]
    t = t / np.hypot(*t)
    normal = np.array([-t[1], t[0]])  # left of travel direction
    c = pts[i] + float(spec.get("offset", 0.0)) * normal
    return Obstacle((float(c[0]), float(c[1])), R, gamma)


def build_track(spec: dict) -> TrackLayout:
    """Build a closed track from a procedural description.

    ``spec["kind"]`` is ``"circle"`` (``circumference``), ``"stadium"``
    (``straight``, ``radius``), ``"winding"`` (``width``, ``height``,
    ``radii``) or ``"segments"`` (explicit ``segments`` list). Obstacles are
    given as ``{"at": lap fraction, "offset": m}`` or ``{"center": [x, y]}``.
    """
    d_s = float(spec.get("d_s", 0.1))
    kind = spec.get("kind", "stadium")
    if kind == "circle":
        L = float(spec.get("circumference", 20.0))
        K = int(round(L / d_s))
        r = L / (2 * math.pi)
        th = 2 * math.pi * np.arange(K) / K
        c = spec.get("center", (0.0, 0.0))
        pts = np.column_stack([c[0] + r * np.cos(th), c[1] + r * np.sin(th)])
    else:
        if kind == "stadium":
            segs = stadium_segments(spec.get("straight", 8.0), spec.get("radius", 2.5))
        elif kind == "winding":
            segs = winding_segments(spec.get("width", 16.0), spec.get("height", 11.0),
                                    tuple(spec.get("radii", (2.5, 4.0, 2.5, 3.5))))
        elif kind == "segments":
            segs = [tuple(s) for s in spec["segments"]]
        else:
            raise TrackError(f"unknown track kind {kind!r}")
        dense = _segments_polyline(segs, tuple(spec.get("start", (0.0, 0.0))),
                                   float(spec.get("heading", 0.0)), step=min(1e-3, d_s / 20))
        gap = float(np.hypot(*(dense[-1] - dense[0])))
        if gap > 1e-6:
            raise TrackError(f"segments do not close (end-point gap {gap:.3g} m)")
        pts = resample_closed(dense, d_s)
    if _segments_intersect(pts, closed=True):
        raise TrackError("center line self-intersects")
    cl = CenterLine(pts, d_s, closed=True)
    R_j = float(spec.get("R_j", 1.0))
    gamma = float(spec.get("Gamma", 1.5))
    obstacles = [_obstacle_from_spec(cl, o, R_j, gamma) for o in spec.get("obstacles", [])]
    return TrackLayout(cl, obstacles, float(spec.get("R_g", 2.0)), float(spec.get("R_c", 0.24)))


# ---------------------------------------------------------------------------
# JSON track files
# ---------------------------------------------------------------------------

def _field(data, key, where, kind=float):
    if key not in data:
        raise TrackError(f"{where}: missing required field {key!r}")
    try:
        return kind(data[key])
    except (TypeError, ValueError) as exc:
        raise TrackError(f"{where}.{key}: {exc}") from None


def track_from_dict(data: dict, source: str = "<track>") -> TrackLayout:
    if not isinstance(data, dict):
        raise TrackError(f"{source}: top level must be an object")
    d_s = _field(data, "d_s", source)
    closed = _field(data, "closed", source, bool)
    raw = data.get("points")
    if not isinstance(raw, list):
        raise TrackError(f"{source}: 'points' must be a list of [x, y] pairs")
    for i, pt in enumerate(raw):
        if not (isinstance(pt, (list, tuple)) and len(pt) == 2
                and all(isinstance(v, (int, float)) for v in pt)):
            raise TrackError(f"{source}: points[{i}] must be [x, y] numbers, got {pt!r}")
    try:
        cl = CenterLine(np.array(raw, dtype=float).reshape(-1, 2), d_s, closed)
    except TrackError as exc:
        raise TrackError(f"{source}: {exc}") from None
    obstacles = []
    for j, ob in enumerate(data.get("obstacles", [])):
        where = f"{source}: obstacles[{j}]"
        try:
            obstacles.append(Obstacle(tuple(ob["center"]), float(ob["R"]), float(ob["Gamma"])))
        except KeyError as exc:
            raise TrackError(f"{where}: missing field {exc}") from None
        except TrackError as exc:
            raise TrackError(f"{where}: {exc}") from None
    try:
        return TrackLayout(cl, obstacles, _field(data, "R_g", source), _field(data, "R_c", source))
    except TrackError as exc:
        raise TrackError(f"{source}: {exc}") from None


def load_track(path) -> TrackLayout:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise TrackError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    return track_from_dict(data, str(path))


def save_track(layout: TrackLayout, path) -> None:
    Path(path).write_text(json.dumps(layout.to_dict(), indent=1))
