"""Experiment configuration files.

A config file is a YAML mapping of the sections below; every field is
optional and missing values fall back to the shipped defaults. Angles
live in the file in degrees (fields suffixed ``_deg``) and are converted
to radians on load. Validation failures raise ConfigError whose message
starts with the dotted path of the offending field.
"""

from __future__ import annotations

import math
from dataclasses import replace

import yaml

from .controller import ControllerParams
from .harness import ExperimentConfig, PRESETS
from .perception import NeedleSpec, NoiseModel, RansacParams
from .simworld import FailureModel, TimingModel, make_wound


class ConfigError(ValueError):
    """A config file failed to parse or validate."""


def _number(value, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{path}: expected a number, got {value!r}")
    return float(value)


def _integer(value, path: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{path}: expected an integer, got {value!r}")
    return value


def _degrees(value, path: str) -> float:
    return math.radians(_number(value, path))


def _triple(value, path: str) -> tuple:
    if not isinstance(value, (list, tuple)) or len(value) != 3:
        raise ConfigError(f"{path}: expected a list of 3 numbers, got {value!r}")
    return tuple(_number(v, f"{path}[{i}]") for i, v in enumerate(value))


def _string(value, path: str) -> str:
    if not isinstance(value, str):
        raise ConfigError(f"{path}: expected a string, got {value!r}")
    return value


def _mapping(value, path: str) -> dict:
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(value).__name__}")
    return value


def _gather(section: dict, path: str, converters: dict) -> dict:
    """Convert a section's raw values into constructor kwargs.

    `converters` maps the file-facing key to (constructor field, fn).
    Unknown keys are an error: silently ignored typos in experiment
    configs are how wrong results get published.
    """
    out = {}
    for key, value in section.items():
        if key not in converters:
            raise ConfigError(f"{path}.{key}: unknown field")
        target, fn = converters[key]
        out[target] = fn(value, f"{path}.{key}")
    return out


_EXPERIMENT = {
    "preset": ("preset", _string),
    "n_trials": ("n_trials", _integer),
    "base_seed": ("base_seed", _integer),
    "n_cloud_points": ("n_cloud_points", _integer),
    "thread_length": ("thread_length", _number),
}

_CONTROLLER = {
    "insertion_rotation_deg": ("insertion_rotation", _degrees),
    "extraction_rotation_deg": ("extraction_rotation", _degrees),
    "correction_final_rotation_deg": ("correction_final_rotation", _degrees),
    "approach_offset": ("approach_offset", _number),
    "approach_advance": ("approach_advance", _number),
    "handover_jitter_max": ("handover_jitter_max", _number),
    "extraction_progress_threshold": ("extraction_progress_threshold", _number),
    "max_retries": ("max_retries", _integer),
    "normal_samples": ("normal_samples", _integer),
    "correction_corner": ("correction_corner", _triple),
    "l_des": ("l_des", _number),
    "l_each": ("l_each", _number),
    "normal_change_epsilon_deg": ("normal_change_epsilon", _degrees),
    "handover_test_offset": ("handover_test_offset", _triple),
    "handover_miss_epsilon": ("handover_miss_epsilon", _number),
    "lift_clear": ("lift_clear", _number),
}

_FAILURES = {
    "grasp_miss_base": ("grasp_miss_base", _number),
    "grasp_miss_per_mm_pose_error": ("grasp_miss_per_mm_pose_error", _number),
    "entanglement_prob_unswept": ("entanglement_prob_unswept", _number),
    "entanglement_prob_swept": ("entanglement_prob_swept", _number),
    "insertion_slip_prob": ("insertion_slip_prob", _number),
    "perception_corruption_prob": ("perception_corruption_prob", _number),
}

_NOISE = {
    "gaussian_sigma": ("gaussian_sigma", _number),
    "outlier_fraction": ("outlier_fraction", _number),
    "outlier_box": ("outlier_box", _triple),
    "dropout_fraction": ("dropout_fraction", _number),
    "occlusion_arc_deg": ("occlusion_arc", _degrees),
}

_RANSAC = {
    "iterations": ("iterations", _integer),
    "inlier_threshold": ("inlier_threshold", _number),
    "min_inliers": ("min_inliers", _integer),
}

_NEEDLE = {
    "radius": ("radius", _number),
    "arc_span_deg": ("arc_span", _degrees),
}

_WOUND = {
    "n_sutures": ("n_sutures", _integer),
    "spacing": ("spacing", _number),
    "ridge_half_width": ("ridge_half_width", _number),
    "ridge_height": ("ridge_height", _number),
    "entry_height": ("entry_height", _number),
}

_TIMING_SCALARS = {
    "perception_period": ("perception_period", _number),
}


def _build(cls, kwargs: dict, path: str, base=None):
    try:
        if base is not None:
            return replace(base, **kwargs)
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def config_from_dict(data: dict | None) -> ExperimentConfig:
    """Build an ExperimentConfig from parsed YAML (None = all defaults)."""
    data = dict(_mapping(data, "config"))
    defaults = ExperimentConfig()

    top = _gather(_mapping(data.pop("experiment", None), "experiment"), "experiment", _EXPERIMENT)
    if "preset" in top and top["preset"] not in PRESETS:
        raise ConfigError(
            f"experiment.preset: unknown preset {top['preset']!r}; expected one of {sorted(PRESETS)}"
        )

    controller = _build(
        ControllerParams,
        _gather(_mapping(data.pop("controller", None), "controller"), "controller", _CONTROLLER),
        "controller",
        base=defaults.controller,
    )
    failures = _build(
        FailureModel,
        _gather(_mapping(data.pop("failure_model", None), "failure_model"), "failure_model", _FAILURES),
        "failure_model",
        base=defaults.failures,
    )

    timing_raw = _mapping(data.pop("timing", None), "timing")
    durations = _mapping(timing_raw.pop("durations", None), "timing.durations")
    timing_kw = _gather(timing_raw, "timing", _TIMING_SCALARS)
    merged = dict(defaults.timing.durations)
    for name, value in durations.items():
        if name not in merged:
            raise ConfigError(f"timing.durations.{name}: unknown primitive")
        merged[name] = _number(value, f"timing.durations.{name}")
    timing = _build(TimingModel, {**timing_kw, "durations": merged}, "timing")

    noise = _build(
        NoiseModel,
        _gather(_mapping(data.pop("noise", None), "noise"), "noise", _NOISE),
        "noise",
        base=defaults.noise,
    )
    ransac = _build(
        RansacParams,
        _gather(_mapping(data.pop("ransac", None), "ransac"), "ransac", _RANSAC),
        "ransac",
        base=defaults.ransac,
    )
    circle_ransac = _build(
        RansacParams,
        _gather(_mapping(data.pop("circle_ransac", None), "circle_ransac"), "circle_ransac", _RANSAC),
        "circle_ransac",
        base=defaults.circle_ransac,
    )
    needle = _build(
        NeedleSpec,
        _gather(_mapping(data.pop("needle", None), "needle"), "needle", _NEEDLE),
        "needle",
        base=defaults.needle,
    )

    wound_kw = _gather(_mapping(data.pop("wound", None), "wound"), "wound", _WOUND)
    try:
        wound = make_wound(**wound_kw)
    except ValueError as exc:
        raise ConfigError(f"wound: {exc}") from exc

    if data:
        raise ConfigError(f"{sorted(data)[0]}: unknown section")

    try:
        return ExperimentConfig(
            controller=controller,
            failures=failures,
            timing=timing,
            noise=noise,
            ransac=ransac,
            circle_ransac=circle_ransac,
            needle=needle,
            wound=wound,
            **top,
        )
    except ValueError as exc:
        raise ConfigError(f"experiment: {exc}") from exc


def load_config(path) -> ExperimentConfig:
    """Read and validate a YAML config file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config: not valid YAML: {exc}") from exc
    return config_from_dict(data)


def apply_overrides(
    config: ExperimentConfig,
    preset: str | None = None,
    n_trials: int | None = None,
    base_seed: int | None = None,
) -> ExperimentConfig:
    """Command-line overrides win over file values."""
    changes = {}
    if preset is not None:
        changes["preset"] = preset
    if n_trials is not None:
        changes["n_trials"] = n_trials
    if base_seed is not None:
        changes["base_seed"] = base_seed
    if not changes:
        return config
    try:
        return replace(config, **changes)
    except ValueError as exc:
        raise ConfigError(f"experiment: {exc}") from exc
