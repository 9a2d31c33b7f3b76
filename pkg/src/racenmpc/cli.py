"""Command-line entry point: ``racenmpc {race,identify,gen-data,export}``.

Exit codes: 0 success, 1 invalid input or I/O failure, 2 the run violated a
constraint, 3 the run was aborted.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_VIOLATION = 2
EXIT_ABORTED = 3

log = logging.getLogger("racenmpc")


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; 2 is reserved for violating runs
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _run_exit_code(metrics) -> int:
    if metrics.aborted:
        return EXIT_ABORTED
    if metrics.violations.total > 0:
        return EXIT_VIOLATION
    return EXIT_OK


def _print_metrics(m) -> None:
    laps = ", ".join(f"{v:.3f}" for v in m.lap_times) or "none"
    print(f"ticks {m.n_ticks}  laps [{laps}] s")
    print(f"v_x min/mean/max {m.vx_min:.3f}/{m.vx_mean:.3f}/{m.vx_max:.3f} m/s  "
          f"max lateral {m.max_lateral:.4f} m")
    if m.min_obstacle_distance is not None:
        print(f"min obstacle distance {m.min_obstacle_distance:.4f} m")
    print(f"solve time mean {1e3 * m.solve_time_mean:.2f} ms  p99 {1e3 * m.solve_time_p99:.2f} ms"
          f"  max {1e3 * m.solve_time_max:.2f} ms")
    v = m.violations
    print(f"violations lateral={v.lateral} input={v.input} speed={v.speed} "
          f"obstacle={v.obstacle}  degraded ticks {m.degraded_ticks}")
    if m.aborted:
        print(f"ABORTED: {m.abort_reason}")


def cmd_race(args) -> int:
    from .harness import ScenarioConfig, compute_metrics, export_results, run_closed_loop, save_result

    cfg = ScenarioConfig.load(args.scenario)
    changes = {}
    if args.laps is not None:
        changes["laps"] = args.laps
    if args.no_obstacles:
        changes["obstacles"] = False
    cfg = cfg.with_(**changes)
    out = Path(args.out or f"runs/{cfg.name}")
    result = run_closed_loop(cfg)
    metrics = compute_metrics(result)
    paths = export_results(result, metrics, out, figures=not args.no_figures)
    save_result(result, out / "result.json")
    (out / "scenario.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
    _print_metrics(metrics)
    print(f"wrote {len(paths) + 2} files to {out}")
    return _run_exit_code(metrics)


def cmd_identify(args) -> int:
    from .dynamics import VehicleParams
    from .ident import Dataset, ParamBounds, identify

    data = Dataset.from_csv(args.data)
    bounds = ParamBounds.load(args.bounds)
    zeta, report = identify(data, bounds)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    params = VehicleParams.default().with_zeta(zeta)
    (out / "vehicle.json").write_text(json.dumps(params.to_dict(), indent=2) + "\n")
    (out / "fit_report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    report.traces_csv(out / "fit_traces.csv")
    if not args.no_figures:
        _plot_fit(report, out / "fit_traces.png")
    print(f"status {report.status.value} after {report.iterations} iterations; "
          f"cost {report.cost0:.6g} -> {report.cost:.6g}")
    print("rmse " + "  ".join(f"{k}={v:.3e}" for k, v in report.rmse.items()))
    print(f"wrote identified parameters to {out / 'vehicle.json'}")
    return EXIT_OK


def _plot_fit(report, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .ident import CHANNELS

    fig, axes = plt.subplots(3, 1, sharex=True, figsize=(7, 6))
    for i, (ax, name) in enumerate(zip(axes, CHANNELS)):
        ax.plot(report.t, report.measured[:, i], ".", ms=2, label="measured")
        ax.plot(report.t, report.predicted[:, i], lw=0.8, label="one-step prediction")
        ax.set_ylabel(name)
    axes[0].legend(loc="upper right", fontsize="small")
    axes[-1].set_xlabel("t [s]")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_gen_data(args) -> int:
    from .harness.datagen import generate_ident_data

    data = generate_ident_data(args.suite, noise=args.noise, seed=args.seed,
                               integrator=args.integrator)
    out = Path(args.out)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    data.to_csv(out)
    print(f"wrote {len(data)} records to {out}")
    return EXIT_OK


def cmd_export(args) -> int:
    from .harness import compute_metrics, export_results, load_result

    result = load_result(args.result)
    metrics = compute_metrics(result) if len(result) else None
    paths = export_results(result, metrics, args.out, figures=not args.no_figures)
    if metrics is not None:
        _print_metrics(metrics)
    print(f"wrote {len(paths)} files to {args.out}")
    return EXIT_OK if metrics is None else _run_exit_code(metrics)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="racenmpc", description="NMPC racing simulation and identification")
    p.add_argument("-v", "--verbose", action="store_true", help="log solver warnings")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("race", help="run a closed-loop scenario")
    r.add_argument("--scenario", required=True, help="scenario JSON file")
    r.add_argument("--laps", type=int, help="override the lap count")
    r.add_argument("--no-obstacles", action="store_true")
    r.add_argument("--out", help="output directory (default runs/<name>)")
    r.add_argument("--no-figures", action="store_true")
    r.set_defaults(func=cmd_race)

    i = sub.add_parser("identify", help="fit tire/drivetrain parameters to a log")
    i.add_argument("--data", required=True, help="log CSV")
    i.add_argument("--bounds", required=True, help="parameter bounds JSON")
    i.add_argument("--out", help="output directory (default .)")
    i.add_argument("--no-figures", action="store_true")
    i.set_defaults(func=cmd_identify)

    g = sub.add_parser("gen-data", help="simulate an identification maneuver suite")
    g.add_argument("--suite", default="standard")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--noise", type=float, default=0.0, help="velocity noise std")
    g.add_argument("--integrator", choices=("euler", "rk4"), default="euler")
    g.add_argument("--out", required=True, help="output CSV")
    g.set_defaults(func=cmd_gen_data)

    e = sub.add_parser("export", help="re-export a saved result file")
    e.add_argument("--result", required=True, help="result.json written by `race`")
    e.add_argument("--out", required=True)
    e.add_argument("--no-figures", action="store_true")
    e.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
