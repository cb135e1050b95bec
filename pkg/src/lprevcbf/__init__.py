"""Limited-preview control barrier functions for linear input-delay systems.

Library + CLI: barrier evaluation with a fixed preview horizon, the QP
safety filter, standard-CBF and unlimited-preview baselines, and a
fixed-step closed-loop simulator for the two built-in case studies.
"""

from .baselines import (
    StandardCbfConfig,
    StandardCbfEngine,
    prev_cbf,
    standard_amax_exo,
    standard_amax_generic,
    standard_h,
    standard_input_box,
)
from .engine import (
    BarrierEval,
    LimitedPreviewEngine,
    UnlimitedPreviewEngine,
    barrier,
    extremal_inputs,
    qp_row,
    stopping_residual,
    stopping_time,
)
from .errors import ConfigInfeasible, Infeasible, NoStoppingTime, SimulationFailed
from .matops import conv_const, conv_signal, expm
from .plant import (
    DelaySystem,
    DisturbanceSignal,
    InputHistory,
    PreviewWindow,
    phi,
    predict_state,
    sinusoid_disturbance,
    zero_disturbance,
)
from .safety_filter import (
    FilterConfig,
    nominal_statefb,
    nominal_zero,
    solve_qp_scalar,
    step_filter,
)
from .sim import (
    RunMetrics,
    Scenario,
    SimTrace,
    metrics,
    min_safe_um,
    simulate,
    sweep_um,
)

__all__ = [
    "BarrierEval", "ConfigInfeasible", "DelaySystem", "DisturbanceSignal",
    "FilterConfig", "Infeasible", "InputHistory", "LimitedPreviewEngine",
    "NoStoppingTime", "PreviewWindow", "RunMetrics", "Scenario", "SimTrace",
    "SimulationFailed", "StandardCbfConfig", "StandardCbfEngine",
    "UnlimitedPreviewEngine", "barrier", "conv_const", "conv_signal",
    "expm", "extremal_inputs", "metrics", "min_safe_um", "nominal_statefb",
    "nominal_zero", "phi", "predict_state", "prev_cbf", "qp_row",
    "simulate", "sinusoid_disturbance", "solve_qp_scalar",
    "standard_amax_exo", "standard_amax_generic", "standard_h",
    "standard_input_box", "step_filter", "stopping_residual",
    "stopping_time", "sweep_um", "zero_disturbance",
]

__version__ = "0.1.0"
