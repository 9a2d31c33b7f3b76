"""File exports of closed-loop runs: CSV series, metrics JSON, figures.

Layout of an export directory (schema version :data:`SCHEMA_VERSION`)::

    trajectory.csv   t, pose, velocities, lateral deviation, obstacle distance
    inputs.csv       t, d, delta [rad], delta_deg, solver iterations, status
    laps.csv         lap index, start and end timestamps, lap time
    timing.csv       t, solve_time_ms
    histogram.csv    1 ms solve-time bins over [0, 33] ms plus an overflow row
    metrics.json     aggregate metrics, validated against METRICS_SCHEMA
    *.png            trajectory (colored by v_x), inputs with bounds, histogram

The first three files depend only on the scenario and are byte-identical
across repeated runs. The timing files hold wall-clock measurements and do
not.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .metrics import Metrics, histogram_edges, solve_time_histogram
from .sim import SimResult

SCHEMA_VERSION = "1.0"
TRAJECTORY_COLUMNS = ("t", "p_x", "p_y", "phi", "v_x", "v_y", "omega",
                      "lateral_deviation", "obstacle_distance", "projection_index")
INPUT_COLUMNS = ("t", "d", "delta", "delta_deg", "inner_iters", "outer_iters", "status",
                 "degraded")
LAP_COLUMNS = ("lap", "t_start", "t_end", "lap_time")
TIMING_COLUMNS = ("t", "solve_time_ms")
HISTOGRAM_COLUMNS = ("bin_lo_ms", "bin_hi_ms", "count")
DETERMINISTIC_FILES = ("trajectory.csv", "inputs.csv", "laps.csv")
TIMING_KEYS = ("solve_time_mean", "solve_time_max", "solve_time_p99", "histogram")

_NUM = {"type": "number"}
_COUNT = {"type": "integer", "minimum": 0}
METRICS_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "$id": f"racenmpc/metrics/{SCHEMA_VERSION}",
    "title": "closed-loop run metrics",
    "type": "object",
    "required": ["schema_version", "n_ticks", "lap_times", "vx_min", "vx_mean", "vx_max",
                 "max_lateral", "min_obstacle_distance", "violations", "solve_time_mean",
                 "solve_time_max", "solve_time_p99", "histogram", "histogram_edges_ms",
                 "degraded_ticks", "aborted", "abort_reason", "per_obstacle_min_distance"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "n_ticks": {"type": "integer", "minimum": 1},
        "lap_times": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
        "vx_min": _NUM, "vx_mean": _NUM, "vx_max": _NUM,
        "max_lateral": {"type": "number", "minimum": 0},
        "min_obstacle_distance": {"type": ["number", "null"], "minimum": 0},
        "per_obstacle_min_distance": {"type": "array", "items": {"type": "number", "minimum": 0}},
        "violations": {
            "type": "object",
            "required": ["lateral", "input", "speed", "obstacle", "total"],
            "additionalProperties": False,
            "properties": {k: _COUNT for k in ("lateral", "input", "speed", "obstacle", "total")},
        },
        "solve_time_mean": {"type": "number", "minimum": 0},
        "solve_time_max": {"type": "number", "minimum": 0},
        "solve_time_p99": {"type": "number", "minimum": 0},
        "histogram": {"type": "array", "items": _COUNT, "minItems": 34, "maxItems": 34},
        "histogram_edges_ms": {"type": "array", "items": _NUM, "minItems": 34, "maxItems": 34},
        "degraded_ticks": _COUNT,
        "aborted": {"type": "boolean"},
        "abort_reason": {"type": "string"},
    },
}


class ExportError(OSError):
    pass


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    return repr(float(v))


def _write_csv(path: Path, header, rows) -> Path:
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) for v in row])
    except OSError as exc:
        raise ExportError(f"{path}: {exc.strerror or exc}") from None
    return path


def _write_json(path: Path, data) -> Path:
    try:
        path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise ExportError(f"{path}: {exc.strerror or exc}") from None
    return path


def metrics_document(metrics: Metrics) -> dict:
    doc = metrics.to_dict()
    doc["schema_version"] = SCHEMA_VERSION
    return doc


def validate_metrics(doc: dict) -> None:
    """Raise ``jsonschema.ValidationError`` if ``doc`` does not match the schema."""
    import jsonschema

    jsonschema.validate(doc, METRICS_SCHEMA)


def export_results(result: SimResult, metrics: Metrics | None, out_dir, *,
                   figures: bool = True) -> dict:
    """Write the export directory; returns ``{name: path}``.

    An empty result produces header-only CSV files and no metrics.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ExportError(f"{out}: {exc.strerror or exc}") from None
    X, U, t = result.states, result.inputs, result.t
    paths = {}
    paths["trajectory"] = _write_csv(out / "trajectory.csv", TRAJECTORY_COLUMNS, (
        (t[k], *X[k], result.lateral_deviation[k], result.obstacle_distance[k],
         int(result.projection_index[k])) for k in range(len(result))))
    paths["inputs"] = _write_csv(out / "inputs.csv", INPUT_COLUMNS, (
        (t[k], U[k, 0], U[k, 1], math.degrees(U[k, 1]), int(result.inner_iters[k]),
         int(result.outer_iters[k]), str(result.status[k]), bool(result.degraded[k]))
        for k in range(len(result))))
    lt = result.lap_times
    paths["laps"] = _write_csv(out / "laps.csv", LAP_COLUMNS, (
        (i + 1, lt[i], lt[i + 1], lt[i + 1] - lt[i]) for i in range(len(lt) - 1)))
    paths["timing"] = _write_csv(out / "timing.csv", TIMING_COLUMNS, (
        (t[k], 1e3 * result.solve_time[k]) for k in range(len(result))))
    edges = histogram_edges()
    rows = []
    if len(result):
        counts = solve_time_histogram(result.solve_time)
        rows = [(edges[i], edges[i + 1] if i + 1 < len(edges) else math.inf, counts[i])
                for i in range(len(counts))]
    paths["histogram"] = _write_csv(out / "histogram.csv", HISTOGRAM_COLUMNS, rows)
    if metrics is not None:
        doc = metrics_document(metrics)
        validate_metrics(doc)
        paths["metrics"] = _write_json(out / "metrics.json", doc)
        paths["metrics_schema"] = _write_json(out / "metrics.schema.json", METRICS_SCHEMA)
        if figures and len(result):
            paths.update(render_figures(result, metrics, out))
    return paths


def load_series(path) -> dict:
    """Read an exported CSV back into ``{column: array}``."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    out = {}
    for j, name in enumerate(header):
        col = [r[j] for r in rows]
        try:
            out[name] = np.array([float(v) for v in col], dtype=float)
        except ValueError:
            out[name] = np.array(col, dtype=object)
    return out


# ---------------------------------------------------------------- result file

_ARRAY_FIELDS = ("t", "states", "inputs", "solve_time", "inner_iters", "outer_iters",
                 "degraded", "lateral_deviation", "obstacle_distance", "projection_index",
                 "lap_times", "predicted_next", "obstacles", "center_line")


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return [_jsonable(x) for x in v.tolist()] if v.ndim > 1 else [
            x if not isinstance(x, float) or math.isfinite(x) else None for x in v.tolist()]
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def save_result(result: SimResult, path) -> Path:
    """Serialize a :class:`SimResult` to JSON (floats round-trip exactly)."""
    data = {"schema_version": SCHEMA_VERSION}
    for name in _ARRAY_FIELDS:
        v = getattr(result, name)
        data[name] = None if v is None else _jsonable(np.asarray(v))
    data.update(status=list(result.status), aborted=result.aborted,
                abort_reason=result.abort_reason, half_width=result.half_width,
                input_bounds=_jsonable(result.input_bounds),
                vx_bounds=_jsonable(result.vx_bounds), control_period=result.control_period)
    path = Path(path)
    try:
        path.write_text(json.dumps(data))
    except OSError as exc:
        raise ExportError(f"{path}: {exc.strerror or exc}") from None
    return path


def load_result(path) -> SimResult:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise ExportError(f"{path}: {exc.strerror or exc}") from None
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if data.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported result schema {data.get('schema_version')!r}")

    def arr(name, dtype=float, cols=None):
        v = data.get(name)
        if v is None:
            return None
        a = np.array([math.inf if x is None else x for x in v] if cols is None else v,
                     dtype=dtype)
        return a.reshape(-1, cols) if cols else a

    return SimResult(
        t=arr("t"), states=arr("states", cols=6), inputs=arr("inputs", cols=2),
        solve_time=arr("solve_time"), inner_iters=arr("inner_iters", int),
        outer_iters=arr("outer_iters", int), status=list(data["status"]),
        degraded=arr("degraded", bool), lateral_deviation=arr("lateral_deviation"),
        obstacle_distance=arr("obstacle_distance"),
        projection_index=arr("projection_index", int), lap_times=arr("lap_times"),
        aborted=bool(data["aborted"]), abort_reason=data["abort_reason"],
        predicted_next=arr("predicted_next", cols=6), obstacles=arr("obstacles", cols=3),
        half_width=float(data["half_width"]),
        input_bounds=tuple(tuple(b) for b in data["input_bounds"]),
        vx_bounds=tuple(data["vx_bounds"]), control_period=float(data["control_period"]),
        center_line=arr("center_line", cols=2),
    )


# -------------------------------------------------------------------- figures

def render_figures(result: SimResult, metrics: Metrics, out_dir) -> dict:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.collections import LineCollection

    out = Path(out_dir)
    paths = {}
    X = result.states

    fig, ax = plt.subplots(figsize=(7, 5))
    cl = result.center_line
    if len(cl):
        loop = np.vstack([cl, cl[:1]])
        tang = np.gradient(loop, axis=0)
        nrm = np.column_stack([-tang[:, 1], tang[:, 0]])
        nrm /= np.hypot(nrm[:, 0], nrm[:, 1])[:, None]
        ax.plot(loop[:, 0], loop[:, 1], "k--", lw=0.6)
        for s in (1.0, -1.0):
            b = loop + s * result.half_width * nrm
            ax.plot(b[:, 0], b[:, 1], "k-", lw=0.8)
    for cx, cy, gamma in result.obstacles:
        ax.add_patch(plt.Circle((cx, cy), gamma, color="tab:red", alpha=0.25, lw=0))
        ax.plot(cx, cy, "x", color="tab:red")
    seg = np.stack([X[:-1, :2], X[1:, :2]], axis=1)
    lc = LineCollection(seg, cmap="viridis", linewidths=2)
    lc.set_array(X[:-1, 3])
    ax.add_collection(lc)
    fig.colorbar(lc, ax=ax, label="$v_x$ [m/s]")
    ax.set_aspect("equal")
    ax.autoscale()
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    paths["fig_trajectory"] = _savefig(fig, out / "trajectory.png")

    fig, (a1, a2) = plt.subplots(2, 1, sharex=True, figsize=(7, 4.5))
    (d_lo, delta_lo), (d_hi, delta_hi) = result.input_bounds
    a1.plot(result.t, result.inputs[:, 0], lw=1)
    for b in (d_lo, d_hi):
        a1.axhline(b, color="tab:red", ls="--", lw=0.8)
    a1.set_ylabel("d [-]")
    a2.plot(result.t, np.degrees(result.inputs[:, 1]), lw=1)
    for b in (delta_lo, delta_hi):
        a2.axhline(math.degrees(b), color="tab:red", ls="--", lw=0.8)
    a2.set_ylabel(r"$\delta$ [deg]")
    a2.set_xlabel("t [s]")
    paths["fig_inputs"] = _savefig(fig, out / "inputs.png")

    fig, ax = plt.subplots(figsize=(6, 3.5))
    edges = histogram_edges()
    counts = np.asarray(metrics.histogram)
    ax.bar(edges[:-1], counts[:-1], width=np.diff(edges), align="edge", color="tab:blue")
    ax.bar(edges[-1], counts[-1], width=1.0, align="edge", color="tab:red")
    ax.set_xlabel("solve time [ms]")
    ax.set_ylabel("ticks")
    ax.set_title(f"mean {1e3 * metrics.solve_time_mean:.2f} ms, "
                 f"p99 {1e3 * metrics.solve_time_p99:.2f} ms")
    paths["fig_histogram"] = _savefig(fig, out / "histogram.png")
    return paths


def _savefig(fig, path: Path) -> Path:
    import matplotlib.pyplot as plt

    try:
        fig.tight_layout()
        fig.savefig(path, dpi=120)
    except OSError as exc:
        raise ExportError(f"{path}: {exc.strerror or exc}") from None
    finally:
        plt.close(fig)
    return path
