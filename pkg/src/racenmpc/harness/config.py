"""Scenario configuration (JSON) for closed-loop runs."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

from ..controller import OcpConfig
from ..dynamics import VehicleParams, VehicleState
from ..solver import SolverConfig
from ..track import TrackLayout, build_track, load_track

# obstacle placement for the stadium: mid-straight and corner exit
STADIUM_OBSTACLES = [{"at": 0.125, "offset": 0.55}, {"at": 0.55, "offset": -0.55}]
WINDING_OBSTACLES = [{"at": 0.12, "offset": 0.55}, {"at": 0.62, "offset": -0.55}]

BUILTIN_TRACKS = {
    "stadium": {"kind": "stadium", "straight": 8.0, "radius": 2.5, "obstacles": STADIUM_OBSTACLES},
    "winding": {"kind": "winding", "obstacles": WINDING_OBSTACLES},
}


class ConfigError(ValueError):
    pass


def racing_solver_config() -> SolverConfig:
    """Solver settings for closed-loop racing.

    Residuals are squared distances in m^2; 1e-2 keeps the boundary within
    a few millimetres of its backed-off value, and the inner tolerance is
    loosened accordingly so high-penalty solves do not stall on the
    clamped obstacle residuals.
    """
    return SolverConfig(eps_inner=1e-3, eps_outer=1e-2)


@dataclass(frozen=True)
class ScenarioConfig:
    track: object = "stadium"
    vehicle: object = None
    ocp: OcpConfig = field(default_factory=OcpConfig)
    solver: SolverConfig = field(default_factory=racing_solver_config)
    plant_dt: float = 0.001
    control_period: float = 0.033
    laps: int = 1
    initial_speed: float = 2.0
    # start this many center-line samples behind the start line
    start_offset: int = 5
    initial_state: VehicleState | None = None
    obstacles: bool = True
    plant_integrator: str = "rk4"
    max_time_per_lap: float = 40.0
    name: str = "scenario"

    def __post_init__(self):
        if self.laps < 1:
            raise ConfigError("laps must be >= 1")
        if not (self.plant_dt > 0 and self.control_period > 0):
            raise ConfigError("plant_dt and control_period must be > 0")
        if self.plant_integrator not in ("rk4", "euler"):
            raise ConfigError(f"plant_integrator must be 'rk4' or 'euler', got {self.plant_integrator!r}")
        if self.plant_integrator == "rk4":
            n = self.control_period / self.plant_dt
            if abs(n - round(n)) > 1e-9 or round(n) < 1:
                raise ConfigError(
                    f"control period {self.control_period} s is not an integer multiple "
                    f"of plant dt {self.plant_dt} s")

    @property
    def substeps(self) -> int:
        if self.plant_integrator == "euler":
            return 1
        return int(round(self.control_period / self.plant_dt))

    def vehicle_params(self) -> VehicleParams:
        if self.vehicle is None:
            return VehicleParams.default()
        if isinstance(self.vehicle, VehicleParams):
            return self.vehicle
        if isinstance(self.vehicle, (str, Path)):
            return VehicleParams.from_dict(json.loads(Path(self.vehicle).read_text()))
        return VehicleParams.from_dict(dict(self.vehicle))

    def layout(self) -> TrackLayout:
        t = self.track
        if isinstance(t, TrackLayout):
            layout = t
        elif isinstance(t, str) and t in BUILTIN_TRACKS:
            layout = build_track(BUILTIN_TRACKS[t])
        elif isinstance(t, (str, Path)):
            layout = load_track(t)
        elif isinstance(t, dict):
            layout = build_track(t)
        else:
            raise ConfigError(f"cannot interpret track specification {t!r}")
        return layout if self.obstacles else layout.without_obstacles()

    def start_state(self, layout: TrackLayout) -> VehicleState:
        if self.initial_state is not None:
            return self.initial_state
        pts = layout.center_line.points
        K = len(pts)
        i = (-self.start_offset) % K
        t = pts[(i + 1) % K] - pts[i]
        return VehicleState(p_x=float(pts[i, 0]), p_y=float(pts[i, 1]),
                            phi=math.atan2(t[1], t[0]), v_x=self.initial_speed)

    def to_dict(self) -> dict:
        track = self.track
        if isinstance(track, TrackLayout):
            track = track.to_dict()
        elif isinstance(track, Path):
            track = str(track)
        vehicle = self.vehicle
        if isinstance(vehicle, VehicleParams):
            vehicle = vehicle.to_dict()
        elif isinstance(vehicle, Path):
            vehicle = str(vehicle)
        out = {
            "name": self.name, "track": track, "vehicle": vehicle,
            "ocp": {k: getattr(self.ocp, k) for k in self.ocp.__dataclass_fields__},
            "solver": {k: getattr(self.solver, k) for k in self.solver.__dataclass_fields__},
            "plant_dt": self.plant_dt, "control_period": self.control_period,
            "laps": self.laps, "initial_speed": self.initial_speed,
            "start_offset": self.start_offset, "obstacles": self.obstacles,
            "plant_integrator": self.plant_integrator,
            "max_time_per_lap": self.max_time_per_lap,
            "initial_state": None if self.initial_state is None
            else list(self.initial_state.as_array()),
        }
        for key in ("Q1", "Q2", "u_lo", "u_hi"):
            out["ocp"][key] = list(out["ocp"][key])
        return out

    @classmethod
    def from_dict(cls, data: dict, base_dir: Path | None = None) -> "ScenarioConfig":
        data = dict(data)
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown scenario key(s): {sorted(unknown)}")
        try:
            if "ocp" in data:
                data["ocp"] = OcpConfig.from_dict(data["ocp"] or {})
            if "solver" in data:
                merged = {**racing_solver_config().__dict__, **(data["solver"] or {})}
                data["solver"] = SolverConfig.from_dict(merged)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        if data.get("initial_state") is not None:
            data["initial_state"] = VehicleState.from_array(data["initial_state"])
        if base_dir is not None:
            for key in ("track", "vehicle"):
                v = data.get(key)
                if isinstance(v, str) and v not in BUILTIN_TRACKS and not Path(v).is_absolute():
                    data[key] = str(base_dir / v)
        return cls(**data)

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
        return cls.from_dict(data, base_dir=path.parent)

    def with_(self, **changes) -> "ScenarioConfig":
        return replace(self, **changes)
