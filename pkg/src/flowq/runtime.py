"""Zero-shot deployment loop: aggregate windows of per-image class labels,
wait out the post-action settle time, query the trained policy greedily and
emit flow/temperature setpoint commands.

Telemetry arrives as newline-delimited JSON records {t, label, u_hat,
u_bar}; commands leave as newline-delimited JSON {step, kind, delta,
new_value} or, optionally, as M221/M104 G-code lines.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .dqn import QNetwork, select_action
from .simulator import (
    Action,
    clamp_flow,
    clamp_temp_target,
    ground_truth_class,
    present_class,
    thermal_step,
)
from .state import (
    HistoryVector,
    ProcessState,
    assemble_state,
    flatten_state,
    push_history,
    scale_distribution,
    window_distribution,
)

# Ties between equally frequent window labels go to the more severe
# condition: excessive, then insufficient, then optimal.
LABEL_SEVERITY = (2, 0, 1)


class SessionError(ValueError):
    """Malformed telemetry or an inconsistent session stream."""


@dataclass(frozen=True)
class RuntimeConfig:
    window: int = 20
    settle_seconds: float = 6.0
    lam: int = 10
    initial_flow: float = 100.0
    mode: str = "replay"
    max_decisions: int | None = None
    eta: int = 30

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be at least 1")
        if self.settle_seconds < 0.0:
            raise ValueError("settle_seconds must be non-negative")
        if self.lam < 1:
            raise ValueError("lam must be at least 1")
        if self.mode not in ("live", "replay"):
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass(frozen=True)
class TelemetryRecord:
    timestamp: float
    label: int
    u_hat: float
    u_bar: float


@dataclass(frozen=True)
class SetpointCommand:
    kind: str  # "flow" or "temperature"
    new_value: float
    delta: float
    step_index: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "step": self.step_index,
                "kind": self.kind,
                "delta": self.delta,
                "new_value": self.new_value,
            },
            separators=(",", ":"),
        )

    def to_gcode(self) -> str:
        if self.kind == "flow":
            return f"M221 S{self.new_value:g}"
        return f"M104 S{self.new_value:g}"


def parse_telemetry_line(line: str, line_number: int) -> TelemetryRecord:
    try:
        doc = json.loads(line)
        rec = TelemetryRecord(
            timestamp=float(doc["t"]),
            label=int(doc["label"]),
            u_hat=float(doc["u_hat"]),
            u_bar=float(doc["u_bar"]),
        )
    except (ValueError, KeyError, TypeError) as exc:
        raise SessionError(f"line {line_number}: malformed telemetry record ({exc})") from None
    if rec.label not in (0, 1, 2):
        raise SessionError(f"line {line_number}: label must be 0, 1 or 2")
    return rec


def read_telemetry(lines):
    """Yield TelemetryRecords from an iterable of NDJSON lines, enforcing
    non-decreasing timestamps."""
    last_t = None
    for i, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        rec = parse_telemetry_line(line, i)
        if last_t is not None and rec.timestamp < last_t:
            raise SessionError(f"line {i}: timestamps must be non-decreasing")
        last_t = rec.timestamp
        yield rec


def telemetry_line(rec: TelemetryRecord) -> str:
    return json.dumps(
        {"t": rec.timestamp, "label": rec.label, "u_hat": rec.u_hat, "u_bar": rec.u_bar},
        separators=(",", ":"),
    )


def modal_label(labels) -> int:
    counts = [0, 0, 0]
    for x in labels:
        counts[x] += 1
    best = max(counts)
    for label in LABEL_SEVERITY:
        if counts[label] == best:
            return label
    raise AssertionError("unreachable")


def decide(
    history: HistoryVector,
    window_labels,
    u_hat: float,
    u_bar: float,
    net: QNetwork,
    t: int,
    lam: int = 10,
) -> tuple[Action, ProcessState]:
    """One control decision from a full label window.

    Builds the scaled window distribution, pushes the window's modal label
    into the history and queries the policy greedily; the temperature head
    only acts when t is a multiple of lam. The returned state carries the
    updated history.
    """
    labels = list(window_labels)
    raw = window_distribution(labels, len(labels))
    dist = scale_distribution(raw)
    history = push_history(history, modal_label(labels))
    obs = assemble_state(history, dist, u_hat, u_bar)
    action = select_action(net, flatten_state(obs), 0.0, t, lam)
    return action, obs


@dataclass
class SessionLog:
    decisions: int = 0
    commands: list[SetpointCommand] = field(default_factory=list)
    final_flow: float | None = None
    final_temp_target: float | None = None
    discarded_partial_window: int = 0


def run_session(source, sink, net: QNetwork, cfg: RuntimeConfig) -> SessionLog:
    """Consume telemetry, emit setpoint commands until the stream ends.

    Per decision: collect cfg.window records, decide, emit the temperature
    command (on every lam-th decision) then the flow command, then discard
    records within cfg.settle_seconds of the last collected record. A
    partial window at stream end is discarded. In replay mode the settle
    skip follows record timestamps; in live mode the wall clock.
    """
    log = SessionLog()
    history = HistoryVector.fresh(cfg.eta)
    flow = float(cfg.initial_flow)
    temp_target = None
    stream = iter(source)
    t = 0
    skip_until = None
    while True:
        if cfg.max_decisions is not None and t >= cfg.max_decisions:
            break
        window: list[TelemetryRecord] = []
        for rec in stream:
            if skip_until is not None and rec.timestamp < skip_until:
                continue
            window.append(rec)
            if len(window) == cfg.window:
                break
        if len(window) < cfg.window:
            log.discarded_partial_window = len(window)
            break
        last = window[-1]
        if temp_target is None:
            temp_target = float(last.u_bar)
        action, obs = decide(
            history, [rec.label for rec in window], last.u_hat, temp_target, net, t, cfg.lam
        )
        history = obs.history
        if action.temp_active:
            temp_target = clamp_temp_target(temp_target + action.temp_delta)
            cmd = SetpointCommand("temperature", temp_target, action.temp_delta, t)
            log.commands.append(cmd)
            sink(cmd)
        flow = clamp_flow(flow + action.flow_delta)
        cmd = SetpointCommand("flow", flow, action.flow_delta, t)
        log.commands.append(cmd)
        sink(cmd)
        if cfg.mode == "replay":
            skip_until = last.timestamp + cfg.settle_seconds
        else:
            deadline = time.monotonic() + cfg.settle_seconds
            while time.monotonic() < deadline:
                time.sleep(min(0.01, deadline - time.monotonic()))
            skip_until = None
        t += 1
    log.decisions = t
    log.final_flow = flow
    log.final_temp_target = temp_target
    return log


class SimulatedPrinter:
    """Desk-scale plant standing in for a printer during closed-loop tests.

    Produces 20 Hz telemetry frames whose labels follow the true flow class
    at precision rho, except during `noise_seconds` after each applied flow
    command, when transient labels are uniform over all three classes. Flow
    commands also advance the thermal tracking one interaction.
    """

    def __init__(
        self,
        start_q: float,
        start_u: float,
        *,
        rho: float = 0.7,
        noise_seconds: float = 0.0,
        frame_hz: float = 20.0,
        tracking_divisor: float = 4.0,
        rng=None,
    ):
        self.q = float(start_q)
        self.u_hat = float(start_u)
        self.u_bar = float(start_u)
        self.rho = rho
        self.noise_seconds = noise_seconds
        self.frame_period = 1.0 / frame_hz
        self.tracking_divisor = tracking_divisor
        self.rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        self.clock = 0.0
        self.last_action_time = -float("inf")
        self.applied: list[SetpointCommand] = []

    def frames(self):
        while True:
            self.clock += self.frame_period
            if self.clock - self.last_action_time < self.noise_seconds:
                label = int(self.rng.integers(3))
            else:
                label = present_class(ground_truth_class(self.q), self.rho, self.rng)
            yield TelemetryRecord(self.clock, label, self.u_hat, self.u_bar)

    def apply(self, cmd: SetpointCommand) -> None:
        self.applied.append(cmd)
        if cmd.kind == "temperature":
            self.u_bar = clamp_temp_target(self.u_bar + cmd.delta)
        else:
            self.q = clamp_flow(self.q + cmd.delta)
            self.u_hat = thermal_step(self.u_hat, self.u_bar, self.tracking_divisor)
            self.last_action_time = self.clock


@dataclass
class ClosedLoopResult:
    qs: list[float]
    u_hats: list[float]
    flow_deltas: list[float]
    decisions_to_convergence: int
    converged: bool


def run_closed_loop(
    net: QNetwork,
    cfg: RuntimeConfig,
    *,
    start_q: float,
    start_u: float,
    decisions: int = 100,
    rho: float = 0.7,
    noise_seconds: float = 0.0,
    seed: int = 0,
    flow_band=(90.0, 110.0),
    temp_center: float = 210.0,
    temp_tol: float = 10.0,
) -> ClosedLoopResult:
    """Run the deployment loop against the simulated printer and report the
    first decision index after which the plant stays inside the bands."""
    printer = SimulatedPrinter(
        start_q, start_u, rho=rho, noise_seconds=noise_seconds, rng=seed
    )
    cfg = RuntimeConfig(
        window=cfg.window,
        settle_seconds=cfg.settle_seconds,
        lam=cfg.lam,
        initial_flow=start_q,
        mode="replay",
        max_decisions=decisions,
        eta=cfg.eta,
    )
    qs: list[float] = []
    u_hats: list[float] = []
    flow_deltas: list[float] = []

    def sink(cmd: SetpointCommand) -> None:
        printer.apply(cmd)
        if cmd.kind == "flow":
            qs.append(printer.q)
            u_hats.append(printer.u_hat)
            flow_deltas.append(cmd.delta)

    run_session(printer.frames(), sink, net, cfg)
    n = len(qs)
    settled = n
    for i in range(n - 1, -1, -1):
        if flow_band[0] <= qs[i] <= flow_band[1] and abs(u_hats[i] - temp_center) <= temp_tol:
            settled = i
        else:
            break
    converged = settled < n
    return ClosedLoopResult(qs, u_hats, flow_deltas, settled if converged else n, converged)
