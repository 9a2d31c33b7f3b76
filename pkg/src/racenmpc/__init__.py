"""Small-scale autonomous racing: vehicle model, track geometry, NMPC and identification."""

from .controller import (
    Controller, ControllerState, HorizonSolution, OcpConfig, control_step, ocp_cost,
    ocp_gradient, rollout,
)
from .dynamics import (
    ChassisParams, ControlInput, DrivetrainParams, InvalidInputError, NumericalBlowupError,
    TireParams, VehicleParams, VehicleState, state_derivative, step_euler, step_rk4,
)
from .ident import Dataset, LogRecord, ParamBounds, identification_cost, identify, one_step_predict
from .track import CenterLine, Obstacle, TrackLayout, build_track, load_track, project

__version__ = "0.1.0"

__all__ = [
    "CenterLine", "ChassisParams", "ControlInput", "Controller", "ControllerState", "Dataset",
    "DrivetrainParams", "HorizonSolution", "InvalidInputError", "LogRecord", "NumericalBlowupError",
    "Obstacle", "OcpConfig", "ParamBounds", "TireParams", "TrackLayout", "VehicleParams",
    "VehicleState", "build_track", "control_step", "identification_cost", "identify",
    "load_track", "ocp_cost", "ocp_gradient", "one_step_predict", "project", "rollout",
    "state_derivative", "step_euler", "step_rk4",
]
