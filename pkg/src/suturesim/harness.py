"""Monte Carlo trial runner: ablation presets, metrics, logs, reports.

A trial is one wound (six throws unless configured otherwise) driven by
the per-suture state machine until closure or an unrecoverable error.
Everything downstream of the seed is deterministic, so experiment logs
are byte-reproducible: records carry simulation clock only, never wall
time.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

from .controller import ControllerParams, PipelineState, PrimitiveSet, run_suture
from .perception import NeedleSpec, NoiseModel, RansacParams, DEFAULT_CIRCLE_THRESHOLD
from .simworld import (
    FailureModel,
    ThreadState,
    TimingModel,
    WoundSpec,
    make_world,
    make_wound,
)

LOG_FORMAT_VERSION = 1

#: preset name -> (enabled primitives, human-intervention budget)
PRESETS: dict[str, tuple[PrimitiveSet, int]] = {
    "sensing_only": (PrimitiveSet(sweep=False, cinch=False, correction=False), 0),
    "thread_handling": (PrimitiveSet(sweep=True, cinch=True, correction=False), 0),
    "stitch": (PrimitiveSet(sweep=True, cinch=True, correction=True), 0),
    "stitch_human": (PrimitiveSet(sweep=True, cinch=True, correction=True), 2),
}

#: shipped simulator sensing noise (the estimator is tested against far
#: harsher clouds separately; this is the plant model for closed-loop runs)
DEFAULT_SIM_NOISE = NoiseModel(
    gaussian_sigma=3e-4,
    outlier_fraction=0.05,
    dropout_fraction=0.05,
)


class HarnessError(RuntimeError):
    """Base class for experiment-harness failures."""


class LogFormatError(HarnessError):
    """A persisted log file does not parse; message names the line."""


class TraceInvariantError(HarnessError):
    """An event trace violates a structural invariant."""


@dataclass
class ExperimentConfig:
    """Everything a reproducible experiment needs, in one bag."""

    preset: str = "stitch"
    n_trials: int = 15
    base_seed: int = 0
    controller: ControllerParams = field(default_factory=ControllerParams)
    failures: FailureModel = field(default_factory=FailureModel)
    timing: TimingModel = field(default_factory=TimingModel)
    noise: NoiseModel = field(default_factory=lambda: replace(DEFAULT_SIM_NOISE))
    # In-loop sensing runs against the benign plant noise above, where
    # consensus saturates long before the offline estimator's default
    # hypothesis budget; fewer iterations keep 2000-trial sweeps fast.
    ransac: RansacParams = field(default_factory=lambda: RansacParams(iterations=120))
    circle_ransac: RansacParams = field(
        default_factory=lambda: RansacParams(
            iterations=120, inlier_threshold=DEFAULT_CIRCLE_THRESHOLD
        )
    )
    needle: NeedleSpec = field(default_factory=NeedleSpec)
    wound: WoundSpec = field(default_factory=make_wound)
    n_cloud_points: int = 140
    thread_length: float = 0.40

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(
                f"unknown preset {self.preset!r}; expected one of {sorted(PRESETS)}"
            )
        if self.n_trials < 1:
            raise ValueError("n_trials must be >= 1")
        if self.n_cloud_points < 1:
            raise ValueError("n_cloud_points must be >= 1")
        if not (self.thread_length > 0.0):
            raise ValueError("thread_length must be positive")

    @property
    def primitives(self) -> PrimitiveSet:
        return PRESETS[self.preset][0]

    @property
    def intervention_budget(self) -> int:
        return PRESETS[self.preset][1]


@dataclass
class TrialLog:
    """One trial's identity, outcome, and full ordered event trace."""

    trial: int
    seed: int
    preset: str
    status: str  # "wound_closed" | "failed"
    error: str | None  # I/E/H/T letter when status == "failed"
    sutures_completed: int
    elapsed: float  # simulation seconds
    events: list

    def __post_init__(self):
        if self.status not in ("wound_closed", "failed"):
            raise ValueError(f"unknown terminal status {self.status!r}")


@dataclass
class MetricsReport:
    """Aggregate success metrics over a set of trials.

    Rates are fractions in [0, 1]; the renderer formats them as
    percentages. mean_time_per_suture and mean_sutures_to_intervention
    are None when their denominators are empty (no successful throw /
    no intervention events).
    """

    n_trials: int
    mean_sutures_to_failure: float
    single_suture_success_rate: float
    three_throw_success_rate: float
    full_wound_success_rate: float
    mean_time_per_suture: float | None
    error_counts: dict
    mean_sutures_to_intervention: float | None
    histogram: list


# ---------------------------------------------------------------------------
# Running trials


def run_trial(config: ExperimentConfig, trial_index: int) -> TrialLog:
    """Run one seeded trial to its terminal state."""
    seed = config.base_seed + trial_index
    enabled, budget = PRESETS[config.preset]
    world = make_world(
        seed=seed,
        spec=config.needle,
        wound=config.wound,
        failures=replace(config.failures, intervention_budget=budget),
        timing=replace(config.timing, durations=dict(config.timing.durations)),
        noise=config.noise,
        ransac=config.ransac,
        circle_ransac=config.circle_ransac,
        thread=ThreadState(total_length=config.thread_length),
        n_cloud_points=config.n_cloud_points,
    )
    status, error, completed = "wound_closed", None, 0
    for i in range(1, config.wound.n_target_sutures + 1):
        outcome = run_suture(world, config.controller, i, enabled)
        if outcome.state_after is not PipelineState.DONE:
            status = "failed"
            error = outcome.error.value if outcome.error else None
            break
        completed = i
        if i < config.wound.n_target_sutures:
            world.advance_suture()
    return TrialLog(
        trial=trial_index,
        seed=seed,
        preset=config.preset,
        status=status,
        error=error,
        sutures_completed=completed,
        elapsed=world.clock,
        events=world.events,
    )


def run_experiment(config: ExperimentConfig) -> list[TrialLog]:
    """n_trials independent trials; trial k is seeded base_seed + k."""
    return [run_trial(config, k) for k in range(config.n_trials)]


# ---------------------------------------------------------------------------
# Metrics


def compute_metrics(logs: list[TrialLog]) -> MetricsReport:
    if not logs:
        raise HarnessError("cannot compute metrics over zero trials")

    completed = [log.sutures_completed for log in logs]
    attempts = 0
    successes = 0
    error_counts = {"I": 0, "E": 0, "H": 0, "T": 0}
    intervention_gaps: list[int] = []
    total_elapsed = 0.0

    for log in logs:
        total_elapsed += log.elapsed
        closed_since_intervention = 0
        for event in log.events:
            kind = event.get("kind")
            if kind == "suture_attempt":
                attempts += 1
            elif kind == "suture_closed":
                successes += 1
                closed_since_intervention += 1
            elif kind == "suture_failed":
                err = event.get("error")
                if err in error_counts:
                    error_counts[err] += 1
            elif kind == "intervention":
                intervention_gaps.append(closed_since_intervention)
                closed_since_intervention = 0

    bins = [0] * (max(completed + [6]) + 1)
    for c in completed:
        bins[c] += 1

    return MetricsReport(
        n_trials=len(logs),
        mean_sutures_to_failure=sum(completed) / len(logs),
        single_suture_success_rate=(successes / attempts) if attempts else 0.0,
        three_throw_success_rate=sum(c >= 3 for c in completed) / len(logs),
        full_wound_success_rate=sum(log.status == "wound_closed" for log in logs) / len(logs),
        mean_time_per_suture=(total_elapsed / successes) if successes else None,
        error_counts=error_counts,
        mean_sutures_to_intervention=(
            sum(intervention_gaps) / len(intervention_gaps) if intervention_gaps else None
        ),
        histogram=bins,
    )


# ---------------------------------------------------------------------------
# Persistence: line-delimited JSON, one record per line


def _dump(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


def write_logs(logs: list[TrialLog], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_dump({"record": "header", "version": LOG_FORMAT_VERSION, "n_trials": len(logs)}) + "\n")
        for log in logs:
            fh.write(
                _dump(
                    {
                        "record": "trial_start",
                        "trial": log.trial,
                        "seed": log.seed,
                        "preset": log.preset,
                    }
                )
                + "\n"
            )
            for event in log.events:
                fh.write(_dump({"record": "event", "trial": log.trial, "data": event}) + "\n")
            fh.write(
                _dump(
                    {
                        "record": "trial_end",
                        "trial": log.trial,
                        "status": log.status,
                        "error": log.error,
                        "sutures_completed": log.sutures_completed,
                        "elapsed": log.elapsed,
                    }
                )
                + "\n"
            )


def read_logs(path) -> list[TrialLog]:
    logs: list[TrialLog] = []
    open_trial: dict | None = None
    events: list = []
    saw_header = False
    lineno = 0
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            raw = raw.strip()
            if not raw:
                continue
            try:
                record = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise LogFormatError(f"line {lineno}: not valid JSON ({exc.msg})") from exc
            kind = record.get("record")
            if not saw_header:
                # the first non-blank record must be the header
                if kind != "header":
                    raise LogFormatError(f"line {lineno}: expected header record, got {kind!r}")
                if record.get("version") != LOG_FORMAT_VERSION:
                    raise LogFormatError(
                        f"line {lineno}: unsupported log version {record.get('version')!r}"
                    )
                saw_header = True
                continue
            if kind == "trial_start":
                if open_trial is not None:
                    raise LogFormatError(
                        f"line {lineno}: trial_start while trial {open_trial['trial']} is open"
                    )
                open_trial = record
                events = []
            elif kind == "event":
                if open_trial is None or record.get("trial") != open_trial["trial"]:
                    raise LogFormatError(f"line {lineno}: event outside its trial")
                events.append(record["data"])
            elif kind == "trial_end":
                if open_trial is None or record.get("trial") != open_trial["trial"]:
                    raise LogFormatError(f"line {lineno}: trial_end without matching trial_start")
                logs.append(
                    TrialLog(
                        trial=open_trial["trial"],
                        seed=open_trial["seed"],
                        preset=open_trial["preset"],
                        status=record["status"],
                        error=record["error"],
                        sutures_completed=record["sutures_completed"],
                        elapsed=record["elapsed"],
                        events=events,
                    )
                )
                open_trial = None
            elif kind == "header":
                raise LogFormatError(f"line {lineno}: duplicate header")
            else:
                raise LogFormatError(f"line {lineno}: unknown record type {kind!r}")
    if not saw_header:
        raise LogFormatError("line 1: empty file (missing header)")
    if open_trial is not None:
        raise LogFormatError(
            f"line {lineno}: file ends inside trial {open_trial['trial']} (truncated?)"
        )
    return logs


# ---------------------------------------------------------------------------
# Rendering


def format_mean(value: float | None) -> str:
    return "-" if value is None else f"{value:.2f}"


def format_rate(value: float | None) -> str:
    return "-" if value is None else f"{100.0 * value:.1f}%"


def format_time(value: float | None) -> str:
    return "-" if value is None else f"{value:.1f}"


_COLUMNS = [
    ("preset", None),
    ("trials", None),
    ("mean_sutures_to_failure", format_mean),
    ("single_suture_success_rate", format_rate),
    ("three_throw_success_rate", format_rate),
    ("full_wound_success_rate", format_rate),
    ("mean_time_per_suture_s", format_time),
    ("errors_I", None),
    ("errors_E", None),
    ("errors_H", None),
    ("errors_T", None),
    ("mean_sutures_to_intervention", format_mean),
]


def _row(name: str, m: MetricsReport) -> list[str]:
    return [
        name,
        str(m.n_trials),
        format_mean(m.mean_sutures_to_failure),
        format_rate(m.single_suture_success_rate),
        format_rate(m.three_throw_success_rate),
        format_rate(m.full_wound_success_rate),
        format_time(m.mean_time_per_suture),
        str(m.error_counts.get("I", 0)),
        str(m.error_counts.get("E", 0)),
        str(m.error_counts.get("H", 0)),
        str(m.error_counts.get("T", 0)),
        format_mean(m.mean_sutures_to_intervention),
    ]


def report_render(metrics, format: str = "table") -> str:
    """Render one report or an ordered {name: report} mapping.

    `table` is aligned plain text; `csv` adds the sutures-to-failure
    histogram as trailing hist_<k> columns (one data row per preset).
    """
    if isinstance(metrics, MetricsReport):
        metrics = {"all": metrics}
    if format not in ("table", "csv"):
        raise ValueError(f"unknown report format {format!r}")

    header = [name for name, _ in _COLUMNS]
    rows = [_row(name, report) for name, report in metrics.items()]

    if format == "csv":
        width = max((len(r.histogram) for r in metrics.values()), default=0)
        lines = [",".join(header + [f"hist_{k}" for k in range(width)])]
        for (name, report), row in zip(metrics.items(), rows):
            hist = list(report.histogram) + [0] * (width - len(report.histogram))
            lines.append(",".join(row + [str(h) for h in hist]))
        return "\n".join(lines) + "\n"

    widths = [max(len(header[c]), *(len(r[c]) for r in rows)) for c in range(len(header))]
    out = ["  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip()]
    out.append("  ".join("-" * w for w in widths))
    for row in rows:
        out.append("  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip())
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# Trace validation


_STATES = [s.value for s in PipelineState]
_FORWARD = {
    "insertion": "sweep",
    "sweep": "extraction",
    "extraction": "cinch",
    "cinch": "handover",
    "handover": "pose_correction",
    "pose_correction": "done",
}
_RETRYABLE = ("extraction", "handover")


def validate_event_trace(
    log: TrialLog,
    controller: ControllerParams | None = None,
    budget: int | None = None,
    n_sutures: int = 6,
) -> None:
    """Check a trial trace against the structural invariants.

    Raises TraceInvariantError naming the first violated rule: monotone
    ids/clock, legal state-machine edges only, per-phase retry bounds,
    every successful grasp gated by a fresh successful observation,
    exact cinch arithmetic, strict jitter bound, intervention budget,
    and a terminal record consistent with the trial status.
    """
    params = controller or ControllerParams()

    def fail(lineno: int, rule: str) -> None:
        raise TraceInvariantError(f"trial {log.trial}, event {lineno}: {rule}")

    last_t = -math.inf
    retries: dict[tuple, int] = {}
    attempt_no = 0  # a fresh attempt (post-intervention) gets a fresh retry budget
    interventions = 0
    observed_since_mark = False
    closed = 0
    last_terminal = None

    for k, event in enumerate(log.events):
        if event.get("n") != k:
            fail(k, f"event ids must be dense, got {event.get('n')!r}")
        t = event.get("t", 0.0)
        if t < last_t:
            fail(k, f"clock ran backwards ({t} < {last_t})")
        last_t = t
        kind = event.get("kind")

        if kind == "transition":
            frm, to = event.get("frm"), event.get("to")
            if frm not in _STATES or to not in _STATES:
                fail(k, f"transition between unknown states {frm!r} -> {to!r}")
            legal = (
                _FORWARD.get(frm) == to
                or to == "failed"
                or (frm == "failed" and to == "insertion")
                or (frm == to and frm in _RETRYABLE)
            )
            if not legal:
                fail(k, f"illegal transition {frm} -> {to}")
            observed_since_mark = False
        elif kind == "retry":
            key = (attempt_no, event.get("suture"), event.get("primitive"))
            retries[key] = retries.get(key, 0) + 1
            if retries[key] > params.max_retries:
                fail(k, f"{event.get('primitive')} retried more than {params.max_retries} times")
            if event.get("attempt") != retries[key]:
                fail(k, "retry attempt counter out of sequence")
            observed_since_mark = False
        elif kind == "suture_attempt":
            attempt_no += 1
            observed_since_mark = False
            last_terminal = None
        elif kind == "observation":
            if event.get("ok"):
                observed_since_mark = True
        elif kind == "grasp":
            if event.get("success") and not observed_since_mark:
                fail(k, "grasp attempted without a fresh successful observation")
        elif kind == "pull_thread":
            i = event.get("suture")
            expected = params.l_des - (i - 1) * params.l_each
            if event.get("length") != expected:
                fail(k, f"cinch length {event.get('length')!r} != {expected!r} for suture {i}")
        elif kind == "handover_jitter":
            if not (event.get("magnitude") < params.handover_jitter_max):
                fail(k, "handover jitter magnitude must stay strictly under the bound")
        elif kind == "intervention":
            interventions += 1
            if budget is not None and interventions > budget:
                fail(k, f"interventions exceed the budget of {budget}")
            observed_since_mark = False
        elif kind == "suture_closed":
            closed += 1
            last_terminal = "closed"
        elif kind == "suture_failed":
            last_terminal = ("failed", event.get("error"))

    if log.status == "wound_closed":
        if last_terminal != "closed" or closed != n_sutures:
            raise TraceInvariantError(
                f"trial {log.trial}: wound_closed status but {closed} closures"
            )
    else:
        if not isinstance(last_terminal, tuple):
            raise TraceInvariantError(
                f"trial {log.trial}: failed status but the trace does not end in a failure"
            )
        if last_terminal[1] != log.error:
            raise TraceInvariantError(
                f"trial {log.trial}: status error {log.error!r} != trace error {last_terminal[1]!r}"
            )
    if log.sutures_completed != closed:
        raise TraceInvariantError(
            f"trial {log.trial}: sutures_completed={log.sutures_completed} but trace closed {closed}"
        )
