"""Stochastic synthetic-transition environment for the setpoint controller.

One environment step is one printing segment: the flow action lands
immediately, the target temperature moves only on scheduled steps, the
actual temperature relaxes toward the target, and the presented class
distribution is a noisy exponential decay around the (possibly
misreported) flow class. Reward falls off with the rotated elliptical
distance of (flow, actual temperature) from the optimum.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .state import (
    ClassDistribution,
    HistoryVector,
    ProcessState,
    assemble_state,
    push_history,
)

FLOW_DELTAS = (-10.0, -5.0, 0.0, 5.0, 10.0)
TEMP_DELTAS = (-20.0, -10.0, 0.0, 10.0, 20.0)

FLOW_MIN, FLOW_MAX = 5.0, 400.0
TEMP_TARGET_MIN, TEMP_TARGET_MAX = 180.0, 240.0

OPTIMAL_FLOW = 100.0
OPTIMAL_TEMP = 210.0

# Flow classes: below 90% insufficient, 90-110% (inclusive) optimal, above
# 110% excessive.
CLASS_LOW_EDGE = 90.0
CLASS_HIGH_EDGE = 110.0

RESET_FLOW_VALUES = tuple(float(q) for q in range(30, 305, 5))
RESET_TEMP_VALUES = (190.0, 200.0, 210.0, 220.0, 230.0)

DEFAULT_TRACKING_DIVISOR = 4.0

TRACE_COLUMNS = (
    "step",
    "q",
    "u_hat",
    "u_bar",
    "shown_class",
    "truth_class",
    "p0",
    "p1",
    "p2",
    "flow_delta",
    "temp_delta",
    "reward",
)


@dataclass(frozen=True)
class Action:
    """One control decision: a flow-rate delta always, a target-temperature
    delta only on steps where the temperature head is scheduled."""

    flow_delta: float
    temp_delta: float = 0.0
    temp_active: bool = False

    def __post_init__(self):
        if self.flow_delta not in FLOW_DELTAS:
            raise ValueError(f"flow_delta must be one of {FLOW_DELTAS}")
        if self.temp_active:
            if self.temp_delta not in TEMP_DELTAS:
                raise ValueError(f"temp_delta must be one of {TEMP_DELTAS}")
        elif self.temp_delta != 0.0:
            raise ValueError("temp_delta must be 0 when temp_active is false")

    @property
    def flow_index(self) -> int:
        return FLOW_DELTAS.index(self.flow_delta)

    @property
    def temp_index(self):
        return TEMP_DELTAS.index(self.temp_delta) if self.temp_active else None

    @classmethod
    def from_indices(cls, flow_idx: int, temp_idx=None) -> "Action":
        if temp_idx is None:
            return cls(FLOW_DELTAS[flow_idx])
        return cls(FLOW_DELTAS[flow_idx], TEMP_DELTAS[temp_idx], True)


@dataclass
class PlantState:
    """True (hidden) process condition."""

    q: float
    u_hat: float
    u_bar: float
    t: int = 0

    def __post_init__(self):
        if not (FLOW_MIN <= self.q <= FLOW_MAX):
            raise ValueError(f"flow {self.q} outside [{FLOW_MIN}, {FLOW_MAX}]")
        if not (TEMP_TARGET_MIN <= self.u_bar <= TEMP_TARGET_MAX):
            raise ValueError(
                f"target temp {self.u_bar} outside [{TEMP_TARGET_MIN}, {TEMP_TARGET_MAX}]"
            )
        if not math.isfinite(self.u_hat):
            raise ValueError("u_hat must be finite")


@dataclass(frozen=True)
class SynthDistConfig:
    """Noisy-exponential-decay distribution parameters."""

    alpha: float = 1.0
    sigma: float = 0.1

    def __post_init__(self):
        if self.alpha <= 0.0:
            raise ValueError("alpha must be positive")
        if self.sigma < 0.0:
            raise ValueError("sigma must be non-negative")


@dataclass(frozen=True)
class PhaseConfig:
    """Reward-ellipse geometry and presentation accuracy for one training
    phase."""

    a: float
    b: float
    rot_deg: float = 70.0
    rho: float = 1.0
    episodes: int = 300

    def __post_init__(self):
        if not (self.a >= self.b > 0.0):
            raise ValueError("ellipse axes must satisfy a >= b > 0")
        if not (0.0 < self.rho <= 1.0):
            raise ValueError("rho must lie in (0, 1]")
        if self.episodes < 0:
            raise ValueError("episode budget must be non-negative")


def clamp_flow(q: float) -> float:
    return min(max(q, FLOW_MIN), FLOW_MAX)


def clamp_temp_target(u: float) -> float:
    return min(max(u, TEMP_TARGET_MIN), TEMP_TARGET_MAX)


def thermal_step(u_hat: float, u_bar: float, divisor: float = DEFAULT_TRACKING_DIVISOR) -> float:
    """Move the actual temperature 1/divisor of the way to the target."""
    if divisor < 1.0:
        raise ValueError("tracking divisor must be >= 1")
    return u_hat + (u_bar - u_hat) / divisor

def ground_truth_class(q: float) -> int:
    """Flow class from the true flow rate."""
    if not (FLOW_MIN <= q <= FLOW_MAX):
        raise ValueError(f"flow {q} outside [{FLOW_MIN}, {FLOW_MAX}]")
    if q < CLASS_LOW_EDGE:
        return 0
    if q <= CLASS_HIGH_EDGE:
        return 1
    return 2


def present_class(truth: int, rho: float, rng: np.random.Generator) -> int:
    """Report the true class with probability rho, otherwise one of the two
    other classes uniformly."""
    if not (0.0 < rho <= 1.0):
        raise ValueError("rho must lie in (0, 1]")
    if truth not in (0, 1, 2):
        raise ValueError(f"invalid class {truth}")
    if rng.random() < rho:
        return truth
    others = [c for c in (0, 1, 2) if c != truth]
    return others[int(rng.integers(2))]


def synth_distribution(
    x0: int, cfg: SynthDistConfig, rng: np.random.Generator
) -> ClassDistribution:
    """Scaled distribution with 1 at the selected class and noisy exponential
    decay, clamped to [0, 1], elsewhere."""
    if x0 not in (0, 1, 2):
        raise ValueError(f"invalid class {x0}")
    others = [i for i in (0, 1, 2) if i != x0]
    noise = rng.normal(0.0, cfg.sigma, size=len(others))
    p = [0.0, 0.0, 0.0]
    p[x0] = 1.0
    for k, i in enumerate(others):
        v = math.exp(-cfg.alpha * abs(i - x0)) + float(noise[k])
        p[i] = min(max(v, 0.0), 1.0)
    return ClassDistribution(tuple(p), "scaled")


def reward(
    q: float,
    u: float,
    phase: PhaseConfig,
    q_star: float = OPTIMAL_FLOW,
    u_star: float = OPTIMAL_TEMP,
) -> float:
    """Tilted-ellipse reward in (-1, 1]; 1 exactly at the optimum.

    The displacement from the optimum is rotated by the phase angle, then
    measured in the elliptical norm with semi-axes (a, b).
    """
    theta = math.radians(phase.rot_deg)
    dq = q - q_star
    du = u - u_star
    q_rot = dq * math.cos(theta) - du * math.sin(theta)
    u_rot = dq * math.sin(theta) + du * math.cos(theta)
    norm = math.sqrt((q_rot / phase.a) ** 2 + (u_rot / phase.b) ** 2)
    return 2.0 / (1.0 + norm) - 1.0


class SimEnv:
    """Synthetic-transition environment.

    All randomness is drawn from the single generator handed in (or seeded
    here), so identical seeds give bit-identical episodes. The environment
    exposes `info` with the truth/shown classes of the last transition for
    trace logging.
    """

    def __init__(
        self,
        phase: PhaseConfig,
        synth: SynthDistConfig | None = None,
        *,
        tracking_divisor: float = DEFAULT_TRACKING_DIVISOR,
        eta: int = 30,
        rng=None,
    ):
        if tracking_divisor < 1.0:
            raise ValueError("tracking divisor must be >= 1")
        self.phase = phase
        self.synth = synth if synth is not None else SynthDistConfig()
        self.tracking_divisor = float(tracking_divisor)
        self.eta = int(eta)
        self.rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        self.plant: PlantState | None = None
        self.history: HistoryVector | None = None
        self.info: dict = {}

    def reset(self, q0: float | None = None, u0: float | None = None,
              u_bar0: float | None = None):
        """Start an episode; q and the temperatures are drawn uniformly from
        the start grids unless given explicitly. u_bar0 lets a scripted run
        start with the actual temperature displaced from its target."""
        if q0 is None:
            q0 = RESET_FLOW_VALUES[int(self.rng.integers(len(RESET_FLOW_VALUES)))]
        if u0 is None:
            u0 = RESET_TEMP_VALUES[int(self.rng.integers(len(RESET_TEMP_VALUES)))]
        if u_bar0 is None:
            u_bar0 = u0
        self.plant = PlantState(q=float(q0), u_hat=float(u0), u_bar=float(u_bar0), t=0)
        self.history = HistoryVector.fresh(self.eta)
        truth = ground_truth_class(self.plant.q)
        shown = present_class(truth, self.phase.rho, self.rng)
        dist = synth_distribution(shown, self.synth, self.rng)
        self.info = {"truth": truth, "shown": shown}
        state = assemble_state(self.history, dist, self.plant.u_hat, self.plant.u_bar)
        return self.plant, state

    def step(self, action: Action):
        """Apply one action; returns (next_state, reward, plant)."""
        if self.plant is None:
            raise RuntimeError("call reset() before step()")
        p = self.plant
        q = clamp_flow(p.q + action.flow_delta)
        u_bar = clamp_temp_target(p.u_bar + action.temp_delta) if action.temp_active else p.u_bar
        u_hat = thermal_step(p.u_hat, u_bar, self.tracking_divisor)
        truth = ground_truth_class(q)
        shown = present_class(truth, self.phase.rho, self.rng)
        dist = synth_distribution(shown, self.synth, self.rng)
        self.history = push_history(self.history, shown)
        r = reward(q, u_hat, self.phase)
        self.plant = PlantState(q=q, u_hat=u_hat, u_bar=u_bar, t=p.t + 1)
        self.info = {"truth": truth, "shown": shown}
        state = assemble_state(self.history, dist, u_hat, u_bar)
        return state, r, self.plant


@dataclass(frozen=True)
class TraceRow:
    """One environment transition, as written to episode trace CSVs."""

    step: int
    q: float
    u_hat: float
    u_bar: float
    shown_class: int
    truth_class: int
    p0: float
    p1: float
    p2: float
    flow_delta: float
    temp_delta: float
    reward: float


def trace_row(step: int, plant: PlantState, state: ProcessState, action: Action,
              r: float, info: dict) -> TraceRow:
    return TraceRow(
        step=step,
        q=plant.q,
        u_hat=plant.u_hat,
        u_bar=plant.u_bar,
        shown_class=info["shown"],
        truth_class=info["truth"],
        p0=state.dist.p[0],
        p1=state.dist.p[1],
        p2=state.dist.p[2],
        flow_delta=action.flow_delta,
        temp_delta=action.temp_delta if action.temp_active else 0.0,
        reward=r,
    )


def write_trace_csv(path, rows) -> None:
    with open(path, "w", newline="") as fp:
        writer = csv.writer(fp)
        writer.writerow(TRACE_COLUMNS)
        for row in rows:
            writer.writerow([repr(getattr(row, c)) if isinstance(getattr(row, c), float)
                             else getattr(row, c) for c in TRACE_COLUMNS])


def read_trace_csv(path) -> list[TraceRow]:
    out = []
    with open(path, newline="") as fp:
        reader = csv.DictReader(fp)
        for rec in reader:
            out.append(
                TraceRow(
                    step=int(rec["step"]),
                    q=float(rec["q"]),
                    u_hat=float(rec["u_hat"]),
                    u_bar=float(rec["u_bar"]),
                    shown_class=int(rec["shown_class"]),
                    truth_class=int(rec["truth_class"]),
                    p0=float(rec["p0"]),
                    p1=float(rec["p1"]),
                    p2=float(rec["p2"]),
                    flow_delta=float(rec["flow_delta"]),
                    temp_delta=float(rec["temp_delta"]),
                    reward=float(rec["reward"]),
                )
            )
    return out
