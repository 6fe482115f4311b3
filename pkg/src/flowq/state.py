"""Controller state encoding: window class distributions, max-scaling, the
rolling classification history, and the flattened vector fed to the network.

Shared verbatim by the simulator and the deployment runtime so both sides
see identical inputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

N_CLASSES = 3
DEFAULT_HISTORY = 30

# Temperatures are centered on the PLA optimum and scaled to roughly unit
# range before entering the network, so they do not dwarf the probability
# entries in the first linear layer. Raw values stay in ProcessState.
TEMP_CENTER = 210.0
TEMP_SCALE = 40.0


class ClassLabel(IntEnum):
    INSUFFICIENT = 0
    OPTIMAL = 1
    EXCESSIVE = 2


def _check_label(x) -> int:
    xi = int(x)
    if xi not in (0, 1, 2):
        raise ValueError(f"class label must be 0, 1 or 2, got {x!r}")
    return xi


@dataclass(frozen=True)
class ClassDistribution:
    """Per-class mass over {insufficient, optimal, excessive}.

    kind "raw": entries sum to 1. kind "scaled": max entry is exactly 1.
    """

    p: tuple[float, float, float]
    kind: str

    def __post_init__(self):
        if len(self.p) != N_CLASSES:
            raise ValueError("distribution must have exactly 3 entries")
        if self.kind not in ("raw", "scaled"):
            raise ValueError(f"unknown distribution kind {self.kind!r}")
        if any(not (0.0 <= v <= 1.0) for v in self.p):
            raise ValueError(f"entries must lie in [0, 1], got {self.p}")
        if self.kind == "raw":
            if abs(sum(self.p) - 1.0) > 1e-9:
                raise ValueError(f"raw distribution must sum to 1, got {self.p}")
        elif max(self.p) != 1.0:
            raise ValueError(f"scaled distribution must have max 1, got {self.p}")

    def as_array(self) -> np.ndarray:
        return np.array(self.p, dtype=np.float64)


@dataclass(frozen=True)
class HistoryVector:
    """Last eta classification results, oldest first, each encoded label/3."""

    values: tuple[float, ...]

    def __post_init__(self):
        if len(self.values) < 1:
            raise ValueError("history must have at least one slot")
        if any(not (0.0 <= v <= 1.0) for v in self.values):
            raise ValueError("history entries must lie in [0, 1]")

    @classmethod
    def fresh(cls, eta: int = DEFAULT_HISTORY) -> "HistoryVector":
        return cls((1.0 / N_CLASSES,) * eta)

    @property
    def eta(self) -> int:
        return len(self.values)


def push_history(h: HistoryVector, label) -> HistoryVector:
    """Shift the window by one: drop the oldest entry, append label/3."""
    x = _check_label(label)
    return HistoryVector(h.values[1:] + (x / N_CLASSES,))


@dataclass(frozen=True)
class ProcessState:
    """Full controller observation: history, scaled distribution, actual and
    target nozzle temperatures (degrees C, unnormalized)."""

    history: HistoryVector
    dist: ClassDistribution
    u_hat: float
    u_bar: float

    def __post_init__(self):
        if self.dist.kind != "scaled":
            raise ValueError("ProcessState requires a scaled distribution")

    @property
    def dimension(self) -> int:
        return self.history.eta + N_CLASSES + 2


def window_distribution(labels, w: int) -> ClassDistribution:
    """Per-class proportions over a window of w labels (raw distribution)."""
    labels = list(labels)
    if w < 1:
        raise ValueError("window size must be at least 1")
    if len(labels) != w:
        raise ValueError(f"expected {w} labels, got {len(labels)}")
    counts = [0, 0, 0]
    for x in labels:
        counts[_check_label(x)] += 1
    return ClassDistribution(tuple(c / w for c in counts), "raw")


def scale_distribution(dist: ClassDistribution) -> ClassDistribution:
    """Divide by the max entry so the modal class sits exactly at 1."""
    m = max(dist.p)
    if m <= 0.0:
        raise ValueError("cannot scale an all-zero distribution")
    return ClassDistribution(tuple(v / m for v in dist.p), "scaled")


def assemble_state(
    history: HistoryVector, dist: ClassDistribution, u_hat: float, u_bar: float
) -> ProcessState:
    return ProcessState(history, dist, float(u_hat), float(u_bar))


def flatten_state(state: ProcessState) -> np.ndarray:
    """Network input: [history oldest..newest, p0, p1, p2, u_hat', u_bar']
    with temperatures normalized to (u - 210) / 40."""
    eta = state.history.eta
    vec = np.empty(eta + N_CLASSES + 2, dtype=np.float64)
    vec[:eta] = state.history.values
    vec[eta : eta + N_CLASSES] = state.dist.p
    vec[eta + N_CLASSES] = (state.u_hat - TEMP_CENTER) / TEMP_SCALE
    vec[eta + N_CLASSES + 1] = (state.u_bar - TEMP_CENTER) / TEMP_SCALE
    return vec


def unflatten_state(vec, eta: int = DEFAULT_HISTORY) -> ProcessState:
    """Inverse of flatten_state (denormalizes the two temperatures)."""
    arr = np.asarray(vec, dtype=np.float64)
    if arr.shape != (eta + N_CLASSES + 2,):
        raise ValueError(f"expected a {eta + N_CLASSES + 2}-vector, got {arr.shape}")
    history = HistoryVector(tuple(float(v) for v in arr[:eta]))
    dist = ClassDistribution(tuple(float(v) for v in arr[eta : eta + N_CLASSES]), "scaled")
    u_hat = float(arr[eta + N_CLASSES]) * TEMP_SCALE + TEMP_CENTER
    u_bar = float(arr[eta + N_CLASSES + 1]) * TEMP_SCALE + TEMP_CENTER
    return ProcessState(history, dist, u_hat, u_bar)


def state_to_json(state: ProcessState, step: int) -> str:
    """Canonical one-line JSON encoding for logs and replay files."""
    doc = {
        "history": list(state.history.values),
        "dist": list(state.dist.p),
        "u_hat": state.u_hat,
        "u_bar": state.u_bar,
        "step": int(step),
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def state_from_json(text: str) -> tuple[ProcessState, int]:
    doc = json.loads(text)
    state = ProcessState(
        HistoryVector(tuple(doc["history"])),
        ClassDistribution(tuple(doc["dist"]), "scaled"),
        float(doc["u_hat"]),
        float(doc["u_bar"]),
    )
    return state, int(doc["step"])
