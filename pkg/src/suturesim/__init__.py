"""suturesim: circular-needle pose estimation and a deterministic suturing simulator."""

from .config import ConfigError, config_from_dict, load_config
from .controller import (
    ControllerParams,
    Decision,
    ErrorKind,
    PipelineState,
    PrimitiveSet,
    cinch_length,
    run_suture,
)
from .harness import (
    ExperimentConfig,
    MetricsReport,
    PRESETS,
    TrialLog,
    compute_metrics,
    read_logs,
    report_render,
    run_experiment,
    run_trial,
    validate_event_trace,
    write_logs,
)
from .perception import (
    NeedlePose,
    NeedleSpec,
    NoiseModel,
    RansacParams,
    estimate_needle_pose,
    pose_agreement,
    synth_needle_cloud,
)
from .simworld import FailureModel, TimingModel, WorldState, WoundSpec, make_world, make_wound

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ControllerParams",
    "Decision",
    "ErrorKind",
    "ExperimentConfig",
    "FailureModel",
    "MetricsReport",
    "NeedlePose",
    "NeedleSpec",
    "NoiseModel",
    "PRESETS",
    "PipelineState",
    "PrimitiveSet",
    "RansacParams",
    "TimingModel",
    "TrialLog",
    "WorldState",
    "WoundSpec",
    "cinch_length",
    "compute_metrics",
    "config_from_dict",
    "estimate_needle_pose",
    "load_config",
    "make_world",
    "make_wound",
    "pose_agreement",
    "read_logs",
    "report_render",
    "run_experiment",
    "run_suture",
    "run_trial",
    "synth_needle_cloud",
    "validate_event_trace",
    "write_logs",
]
