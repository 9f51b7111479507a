"""EMG-driven neuromechanical joint torque estimation and exoskeleton assistance."""

from .activation import activation, envelope, normalize_mvc
from .errors import ConvergenceError, DataError, DivergenceError, NmbcError, NumericalError
from .model import ModelDef, MtuParams, Trace, load_model, load_trace, save_model, write_trace
from .muscle import CurveSet, MuscleTendonUnit, default_curves, solve_equilibrium
from .torque import AssistanceConfig, Pipeline, run_pipeline

__version__ = "0.1.0"
