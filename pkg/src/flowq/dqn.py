"""Two-branch Q-network with dual 5-way heads, trained from scratch.

The network, backpropagation, Adam, the replay memory and the soft target
update are implemented directly on float64 numpy arrays so gradients can
be verified against finite differences and runs are bit-reproducible.
Parameters live in one flat buffer exposed through named views, which
keeps the optimizer and target blending down to a few vector operations.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .simulator import Action

N_FLOW_ACTIONS = 5
N_TEMP_ACTIONS = 5

# Exploration schedule shared by both heads (floor + decaying span).
EPS_FLOOR = 0.05
EPS_SPAN = 0.85
EPS_DECAY_STEPS = 2000.0

CHECKPOINT_VERSION = 1

PARAM_KEYS = ("w1v", "b1v", "w1u", "b1u", "w2", "b2", "w3", "b3")


def epsilon_schedule(step: int) -> float:
    return EPS_FLOOR + EPS_SPAN * math.exp(-step / EPS_DECAY_STEPS)


@dataclass(frozen=True)
class TrainHyper:
    """Training hyperparameters (defaults are the production settings).

    update_every controls how many environment steps pass between gradient
    updates; replay reuse keeps learning unchanged while halving compute
    on slow machines.
    """

    gamma: float = 0.99
    tau: float = 0.005
    lam: int = 10
    batch: int = 512
    learning_rate: float = 1e-4
    episode_length: int = 100
    replay_capacity: int = 100_000
    learn_start: int = 1000
    update_every: int = 2

    def __post_init__(self):
        if not (0.0 < self.gamma < 1.0):
            raise ValueError("gamma must lie in (0, 1)")
        if not (0.0 < self.tau <= 1.0):
            raise ValueError("tau must lie in (0, 1]")
        for name in ("lam", "batch", "episode_length", "replay_capacity",
                     "learn_start", "update_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.learning_rate <= 0.0:
            raise ValueError("learning rate must be positive")


class ParamVector(dict):
    """Named (out, in) parameter views backed by one flat float64 buffer."""

    def __init__(self, specs: list[tuple[str, tuple[int, ...]]], flat: np.ndarray | None = None):
        total = sum(int(np.prod(shape)) for _, shape in specs)
        if flat is None:
            flat = np.zeros(total, dtype=np.float64)
        elif flat.shape != (total,):
            raise ValueError(f"flat buffer must have {total} entries")
        self.flat = flat
        self.specs = list(specs)
        views = {}
        offset = 0
        for key, shape in specs:
            n = int(np.prod(shape))
            views[key] = self.flat[offset : offset + n].reshape(shape)
            offset += n
        super().__init__(views)

    def copy(self) -> "ParamVector":
        return ParamVector(self.specs, self.flat.copy())


class QNetwork:
    """MLP with separate first-layer branches for the vision slice (history
    plus distribution) and the temperature slice, concatenated into one
    hidden layer and a 10-way output split into two 5-way heads."""

    def __init__(
        self,
        vision_dim: int = 33,
        temp_dim: int = 2,
        vision_features: int = 256,
        temp_features: int = 32,
        hidden: int = 128,
        rng=None,
    ):
        self.vision_dim = vision_dim
        self.temp_dim = temp_dim
        self.vision_features = vision_features
        self.temp_features = temp_features
        self.hidden = hidden
        self.out_dim = N_FLOW_ACTIONS + N_TEMP_ACTIONS
        self.params = ParamVector(self.param_specs())
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        for wkey, bkey, n_in in (
            ("w1v", "b1v", vision_dim),
            ("w1u", "b1u", temp_dim),
            ("w2", "b2", vision_features + temp_features),
            ("w3", "b3", hidden),
        ):
            bound = 1.0 / math.sqrt(n_in)
            self.params[wkey][...] = rng.uniform(-bound, bound, self.params[wkey].shape)
            self.params[bkey][...] = rng.uniform(-bound, bound, self.params[bkey].shape)

    def param_specs(self) -> list[tuple[str, tuple[int, ...]]]:
        fv, fu, h = self.vision_features, self.temp_features, self.hidden
        return [
            ("w1v", (fv, self.vision_dim)),
            ("b1v", (fv,)),
            ("w1u", (fu, self.temp_dim)),
            ("b1u", (fu,)),
            ("w2", (h, fv + fu)),
            ("b2", (h,)),
            ("w3", (self.out_dim, h)),
            ("b3", (self.out_dim,)),
        ]

    @property
    def state_dim(self) -> int:
        return self.vision_dim + self.temp_dim

    def num_params(self) -> int:
        return self.params.flat.size

    def dims(self) -> dict:
        return {
            "vision_dim": self.vision_dim,
            "temp_dim": self.temp_dim,
            "vision_features": self.vision_features,
            "temp_features": self.temp_features,
            "hidden": self.hidden,
        }

    def copy(self) -> "QNetwork":
        other = QNetwork.__new__(QNetwork)
        other.vision_dim = self.vision_dim
        other.temp_dim = self.temp_dim
        other.vision_features = self.vision_features
        other.temp_features = self.temp_features
        other.hidden = self.hidden
        other.out_dim = self.out_dim
        other.params = self.params.copy()
        return other

    def grad_buffer(self) -> ParamVector:
        return ParamVector(self.param_specs())

    def _check_states(self, states) -> np.ndarray:
        arr = np.asarray(states, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.ndim != 2 or arr.shape[1] != self.state_dim:
            raise ValueError(
                f"expected states of dimension {self.state_dim}, got {np.shape(states)}"
            )
        return arr

    def _forward_to_output(self, arr: np.ndarray):
        """Shared forward pass; the hidden layer sums the two branch
        contributions so every caller follows one summation order."""
        p = self.params
        fv = self.vision_features
        xv = arr[:, : self.vision_dim]
        xu = arr[:, self.vision_dim :]
        a1v = xv @ p["w1v"].T
        a1v += p["b1v"]
        np.maximum(a1v, 0.0, out=a1v)
        a1u = xu @ p["w1u"].T
        a1u += p["b1u"]
        np.maximum(a1u, 0.0, out=a1u)
        a2 = a1v @ p["w2"][:, :fv].T
        a2 += a1u @ p["w2"][:, fv:].T
        a2 += p["b2"]
        np.maximum(a2, 0.0, out=a2)
        out = a2 @ p["w3"].T
        out += p["b3"]
        return out, {"xv": xv, "xu": xu, "a1v": a1v, "a1u": a1u, "a2": a2}

    def forward(self, states):
        """Q-values for a state or batch; returns (q_flow, q_temp)."""
        out, _ = self._forward_to_output(self._check_states(states))
        if np.ndim(states) == 1:
            return out[0, :N_FLOW_ACTIONS], out[0, N_FLOW_ACTIONS:]
        return out[:, :N_FLOW_ACTIONS], out[:, N_FLOW_ACTIONS:]

    def forward_cached(self, states):
        """Batch forward keeping activations for backward(); bit-identical
        to forward()."""
        return self._forward_to_output(self._check_states(np.atleast_2d(states)))

    def backward(self, cache, dout: np.ndarray) -> ParamVector:
        """Parameter gradients given d(loss)/d(output); gradients w.r.t. the
        inputs are not needed and not computed. ReLU masks come from the
        activations (a > 0 iff the pre-activation was > 0)."""
        p = self.params
        grads = self.grad_buffer()
        fv = self.vision_features
        a1v, a1u, a2 = cache["a1v"], cache["a1u"], cache["a2"]
        np.matmul(dout.T, a2, out=grads["w3"])
        np.sum(dout, axis=0, out=grads["b3"])
        dz2 = dout @ p["w3"]
        dz2 *= a2 > 0.0
        grads["w2"][:, :fv] = dz2.T @ a1v
        grads["w2"][:, fv:] = dz2.T @ a1u
        np.sum(dz2, axis=0, out=grads["b2"])
        dz1v = dz2 @ p["w2"][:, :fv]
        dz1v *= a1v > 0.0
        np.matmul(dz1v.T, cache["xv"], out=grads["w1v"])
        np.sum(dz1v, axis=0, out=grads["b1v"])
        dz1u = dz2 @ p["w2"][:, fv:]
        dz1u *= a1u > 0.0
        np.matmul(dz1u.T, cache["xu"], out=grads["w1u"])
        np.sum(dz1u, axis=0, out=grads["b1u"])
        return grads


class Adam:
    """Adam with bias correction; moments are serialized with checkpoints."""

    def __init__(self, params: ParamVector, learning_rate: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = ParamVector(params.specs)
        self.v = ParamVector(params.specs)

    def step(self, params: ParamVector, grads: ParamVector) -> None:
        self.t += 1
        g = grads.flat
        m, v = self.m.flat, self.v.flat
        m *= self.beta1
        m += (1.0 - self.beta1) * g
        v *= self.beta2
        v += (1.0 - self.beta2) * np.square(g)
        m_hat = m / (1.0 - self.beta1**self.t)
        v_hat = v / (1.0 - self.beta2**self.t)
        np.sqrt(v_hat, out=v_hat)
        v_hat += self.eps
        m_hat /= v_hat
        m_hat *= self.learning_rate
        params.flat -= m_hat


def soft_update(target: QNetwork, policy: QNetwork, tau: float) -> None:
    """Blend the policy parameters into the target: tau*policy + (1-tau)*target."""
    if target.params.specs != policy.params.specs:
        raise ValueError("parameter layouts do not match")
    t = target.params.flat
    t *= 1.0 - tau
    t += tau * policy.params.flat


@dataclass
class Batch:
    """Column arrays of sampled transitions."""

    states: np.ndarray
    flow_idx: np.ndarray
    temp_idx: np.ndarray  # -1 where no temperature action was taken
    rewards: np.ndarray
    next_states: np.ndarray
    terminal: np.ndarray
    temp_active: np.ndarray

    def __len__(self):
        return len(self.rewards)


class ReplayBuffer:
    """Fixed-capacity ring of transitions with uniform without-replacement
    minibatch sampling."""

    def __init__(self, capacity: int = 100_000, state_dim: int = 35):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.state_dim = state_dim
        self.states = np.zeros((capacity, state_dim), dtype=np.float64)
        self.next_states = np.zeros((capacity, state_dim), dtype=np.float64)
        self.flow_idx = np.zeros(capacity, dtype=np.int64)
        self.temp_idx = np.full(capacity, -1, dtype=np.int64)
        self.rewards = np.zeros(capacity, dtype=np.float64)
        self.terminal = np.zeros(capacity, dtype=bool)
        self.temp_active = np.zeros(capacity, dtype=bool)
        self.size = 0
        self.pos = 0

    def __len__(self):
        return self.size

    def push(self, state, flow_idx, temp_idx, reward, next_state, terminal, temp_active):
        if temp_active != (temp_idx is not None):
            raise ValueError("temp_idx must be present exactly when temp_active")
        i = self.pos
        self.states[i] = state
        self.next_states[i] = next_state
        self.flow_idx[i] = flow_idx
        self.temp_idx[i] = -1 if temp_idx is None else temp_idx
        self.rewards[i] = reward
        self.terminal[i] = terminal
        self.temp_active[i] = temp_active
        self.pos = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, batch: int, rng: np.random.Generator) -> np.ndarray:
        if batch < 1 or batch > self.size:
            raise ValueError(f"cannot sample {batch} of {self.size} transitions")
        return rng.choice(self.size, size=batch, replace=False, shuffle=False)

    def gather(self, idx: np.ndarray) -> Batch:
        return Batch(
            states=self.states[idx],
            flow_idx=self.flow_idx[idx],
            temp_idx=self.temp_idx[idx],
            rewards=self.rewards[idx],
            next_states=self.next_states[idx],
            terminal=self.terminal[idx],
            temp_active=self.temp_active[idx],
        )

    def sample(self, batch: int, rng: np.random.Generator) -> Batch:
        return self.gather(self.sample_indices(batch, rng))


def td_targets(batch: Batch, target_net: QNetwork, gamma: float):
    """Per-head bootstrap targets: r + gamma * max_a Q_target(next state),
    plain r on terminal transitions. The temperature targets are only
    meaningful on rows with temp_active."""
    qf_next, qt_next = target_net.forward(batch.next_states)
    cont = ~batch.terminal
    y_flow = batch.rewards + gamma * qf_next.max(axis=1) * cont
    y_temp = batch.rewards + gamma * qt_next.max(axis=1) * cont
    return y_flow, y_temp


def td_loss(net: QNetwork, batch: Batch, y_flow: np.ndarray, y_temp: np.ndarray) -> float:
    """Mean squared TD error; the flow head averages over the whole batch,
    the temperature head only over rows where a temperature action ran."""
    qf, qt = net.forward(batch.states)
    n = len(batch)
    rows = np.arange(n)
    err_f = qf[rows, batch.flow_idx] - y_flow
    loss = float(err_f @ err_f) / n
    active = batch.temp_active
    n_active = int(active.sum())
    if n_active:
        err_t = qt[active, batch.temp_idx[active]] - y_temp[active]
        loss += float(err_t @ err_t) / n_active
    return loss


def td_loss_and_grads(net: QNetwork, batch: Batch, y_flow: np.ndarray, y_temp: np.ndarray):
    """Loss plus parameter gradients via backprop; matches td_loss exactly."""
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")
    out, cache = net.forward_cached(batch.states)
    rows = np.arange(n)
    dout = np.zeros_like(out)
    err_f = out[rows, batch.flow_idx] - y_flow
    loss = float(err_f @ err_f) / n
    dout[rows, batch.flow_idx] = 2.0 * err_f / n
    active = batch.temp_active
    n_active = int(active.sum())
    if n_active:
        cols = N_FLOW_ACTIONS + batch.temp_idx[active]
        err_t = out[active, cols] - y_temp[active]
        loss += float(err_t @ err_t) / n_active
        dout[active, cols] += 2.0 * err_t / n_active
    return loss, net.backward(cache, dout)


def select_action(
    net: QNetwork,
    state: np.ndarray,
    eps: float,
    t: int,
    lam: int,
    rng: np.random.Generator | None = None,
) -> Action:
    """Epsilon-greedy per head; the temperature head only acts on steps
    where t is a multiple of lam. Greedy ties go to the smallest index."""
    if not (0.0 <= eps <= 1.0):
        raise ValueError("eps must lie in [0, 1]")
    if eps > 0.0 and rng is None:
        raise ValueError("exploration requires a generator")
    qf, qt = net.forward(state)
    if eps > 0.0 and rng.random() < eps:
        flow_idx = int(rng.integers(N_FLOW_ACTIONS))
    else:
        flow_idx = int(np.argmax(qf))
    if t % lam != 0:
        return Action.from_indices(flow_idx)
    if eps > 0.0 and rng.random() < eps:
        temp_idx = int(rng.integers(N_TEMP_ACTIONS))
    else:
        temp_idx = int(np.argmax(qt))
    return Action.from_indices(flow_idx, temp_idx)


def _rng_state_doc(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _rng_from_doc(doc: dict) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = doc
    return np.random.Generator(bg)


def save_checkpoint(
    path,
    *,
    policy: QNetwork,
    target: QNetwork | None = None,
    optimizer: Adam | None = None,
    rng: np.random.Generator | None = None,
    buffer: ReplayBuffer | None = None,
    counters: dict | None = None,
    extra: dict | None = None,
) -> None:
    """Write a single-file training checkpoint (npz).

    Everything needed to resume bit-identically is included when given:
    both networks, Adam moments, the replay buffer contents and the
    generator state.
    """
    meta = {
        "version": CHECKPOINT_VERSION,
        "dims": policy.dims(),
        "counters": dict(counters or {}),
        "extra": dict(extra or {}),
        "has_target": target is not None,
        "has_optimizer": optimizer is not None,
        "has_buffer": buffer is not None,
        "has_rng": rng is not None,
    }
    arrays: dict[str, np.ndarray] = {}
    for k, v in policy.params.items():
        arrays[f"policy.{k}"] = v
    if target is not None:
        for k, v in target.params.items():
            arrays[f"target.{k}"] = v
    if optimizer is not None:
        meta["adam"] = {
            "t": optimizer.t,
            "learning_rate": optimizer.learning_rate,
            "beta1": optimizer.beta1,
            "beta2": optimizer.beta2,
            "eps": optimizer.eps,
        }
        for k, v in optimizer.m.items():
            arrays[f"adam_m.{k}"] = v
        for k, v in optimizer.v.items():
            arrays[f"adam_v.{k}"] = v
    if buffer is not None:
        meta["buffer"] = {
            "capacity": buffer.capacity,
            "state_dim": buffer.state_dim,
            "size": buffer.size,
            "pos": buffer.pos,
        }
        n = buffer.size
        arrays["buffer.states"] = buffer.states[:n]
        arrays["buffer.next_states"] = buffer.next_states[:n]
        arrays["buffer.flow_idx"] = buffer.flow_idx[:n]
        arrays["buffer.temp_idx"] = buffer.temp_idx[:n]
        arrays["buffer.rewards"] = buffer.rewards[:n]
        arrays["buffer.terminal"] = buffer.terminal[:n]
        arrays["buffer.temp_active"] = buffer.temp_active[:n]
    if rng is not None:
        meta["rng"] = _rng_state_doc(rng)
    arrays["meta"] = np.array(json.dumps(meta))
    with open(path, "wb") as fp:
        np.savez(fp, **arrays)


@dataclass
class Checkpoint:
    policy: QNetwork
    target: QNetwork | None
    optimizer: Adam | None
    rng: np.random.Generator | None
    buffer: ReplayBuffer | None
    counters: dict
    extra: dict


def _net_from_arrays(dims: dict, arrays, prefix: str) -> QNetwork:
    net = QNetwork(**dims, rng=0)
    for k in PARAM_KEYS:
        net.params[k][...] = arrays[f"{prefix}.{k}"]
    return net


def load_checkpoint(path) -> Checkpoint:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        dims = meta["dims"]
        policy = _net_from_arrays(dims, data, "policy")
        target = _net_from_arrays(dims, data, "target") if meta["has_target"] else None
        optimizer = None
        if meta["has_optimizer"]:
            adam_meta = meta["adam"]
            optimizer = Adam(
                policy.params,
                learning_rate=adam_meta["learning_rate"],
                beta1=adam_meta["beta1"],
                beta2=adam_meta["beta2"],
                eps=adam_meta["eps"],
            )
            optimizer.t = adam_meta["t"]
            for k in PARAM_KEYS:
                optimizer.m[k][...] = data[f"adam_m.{k}"]
                optimizer.v[k][...] = data[f"adam_v.{k}"]
        buffer = None
        if meta["has_buffer"]:
            bm = meta["buffer"]
            buffer = ReplayBuffer(bm["capacity"], bm["state_dim"])
            n = bm["size"]
            buffer.states[:n] = data["buffer.states"]
            buffer.next_states[:n] = data["buffer.next_states"]
            buffer.flow_idx[:n] = data["buffer.flow_idx"]
            buffer.temp_idx[:n] = data["buffer.temp_idx"]
            buffer.rewards[:n] = data["buffer.rewards"]
            buffer.terminal[:n] = data["buffer.terminal"]
            buffer.temp_active[:n] = data["buffer.temp_active"]
            buffer.size = n
            buffer.pos = bm["pos"]
        rng = _rng_from_doc(meta["rng"]) if meta["has_rng"] else None
    return Checkpoint(policy, target, optimizer, rng, buffer, meta["counters"], meta["extra"])


def load_policy(path) -> QNetwork:
    """Convenience: just the policy network from a checkpoint."""
    return load_checkpoint(path).policy
