"""flowq: closed-loop flow-rate/temperature setpoint control for extrusion
3D printing, trained in a stochastic simulator and deployed zero-shot."""

from .dqn import Adam, QNetwork, ReplayBuffer, TrainHyper, select_action, soft_update
from .simulator import (
    Action,
    PhaseConfig,
    PlantState,
    SimEnv,
    SynthDistConfig,
    ground_truth_class,
    present_class,
    reward,
    synth_distribution,
    thermal_step,
)
from .state import (
    ClassDistribution,
    ClassLabel,
    HistoryVector,
    ProcessState,
    assemble_state,
    flatten_state,
    push_history,
    scale_distribution,
    window_distribution,
)
from .training import Trainer, default_curriculum, evaluate, evaluate_grid
from .vision import (
    AdrConfig,
    IntensityGrid,
    KeyRectangle,
    LineSegment,
    augment,
    equalize,
    extract_patch,
    rect_vertices,
    sweep_max_intensity,
    to_grayscale,
)

__version__ = "0.1.0"
