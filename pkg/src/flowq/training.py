"""Four-phase curriculum training and greedy policy evaluation.

Phases 1-3 run with perfect class presentation while the reward ellipse
tightens (minor axis halved, then both axes); phase 4 keeps the tight
ellipse and presents the wrong class 30% of the time so the policy learns
to hesitate instead of chasing misreports.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import dqn
from .dqn import Adam, QNetwork, ReplayBuffer, TrainHyper, epsilon_schedule, select_action
from .simulator import (
    PhaseConfig,
    SimEnv,
    SynthDistConfig,
    TraceRow,
    trace_row,
)
from .state import flatten_state

FLOW_BAND = (90.0, 110.0)
TEMP_TOLERANCE = 10.0
CONVERGENCE_TAIL = 20

EVAL_START_FLOWS = (30.0, 60.0, 80.0, 120.0, 150.0, 200.0, 300.0)
EVAL_START_TEMPS = (190.0, 210.0, 230.0)


def default_curriculum() -> list[PhaseConfig]:
    return [
        PhaseConfig(a=40.0, b=20.0, rot_deg=70.0, rho=1.0, episodes=300),
        PhaseConfig(a=40.0, b=10.0, rot_deg=70.0, rho=1.0, episodes=300),
        PhaseConfig(a=20.0, b=10.0, rot_deg=70.0, rho=1.0, episodes=300),
        PhaseConfig(a=20.0, b=10.0, rot_deg=70.0, rho=0.7, episodes=400),
    ]


@dataclass
class TrainLog:
    """Per-episode cumulative rewards with phase boundaries; append-only."""

    rows: list[tuple[int, int, float]] = field(default_factory=list)  # (episode, phase, cum_reward)
    phase_starts: list[int] = field(default_factory=list)  # first episode index of each phase
    eval_summaries: list[dict] = field(default_factory=list)

    def append(self, episode: int, phase: int, cum_reward: float) -> None:
        if self.rows and episode <= self.rows[-1][0]:
            raise ValueError("episode indices must be strictly increasing")
        self.rows.append((episode, phase, cum_reward))

    def rewards_for_phase(self, phase: int) -> list[float]:
        return [r for _, p, r in self.rows if p == phase]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fp:
            writer = csv.writer(fp)
            writer.writerow(["episode", "phase", "cumulative_reward"])
            for episode, phase, cum in self.rows:
                writer.writerow([episode, phase, repr(cum)])

    @classmethod
    def from_csv(cls, path) -> "TrainLog":
        log = cls()
        last_phase = None
        with open(path, newline="") as fp:
            for rec in csv.DictReader(fp):
                episode = int(rec["episode"])
                phase = int(rec["phase"])
                if phase != last_phase:
                    log.phase_starts.append(episode)
                    last_phase = phase
                log.append(episode, phase, float(rec["cumulative_reward"]))
        return log

    def summary(self) -> dict:
        phases = sorted({p for _, p, _ in self.rows})
        per_phase = {}
        for p in phases:
            rewards = self.rewards_for_phase(p)
            tail = rewards[-30:]
            per_phase[str(p)] = {
                "episodes": len(rewards),
                "final_smoothed_reward": sum(tail) / len(tail) if tail else None,
            }
        return {
            "episodes": len(self.rows),
            "phase_starts": self.phase_starts,
            "phases": per_phase,
            "eval_summaries": self.eval_summaries,
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fp:
            json.dump(self.summary(), fp, indent=2, sort_keys=True)
            fp.write("\n")


def smoothed(series, window: int = 30) -> list[float]:
    """Trailing moving average (shorter head windows included)."""
    out = []
    acc = 0.0
    vals = list(series)
    for i, v in enumerate(vals):
        acc += v
        if i >= window:
            acc -= vals[i - window]
        out.append(acc / min(i + 1, window))
    return out


class Trainer:
    """Owns the policy/target networks, optimizer, replay memory and one
    random generator; runs curriculum phases in order."""

    def __init__(
        self,
        curriculum: list[PhaseConfig] | None = None,
        hyper: TrainHyper = TrainHyper(),
        synth: SynthDistConfig = SynthDistConfig(),
        *,
        tracking_divisor: float = 4.0,
        eta: int = 30,
        seed: int = 0,
        out_dir=None,
        eps_fn=None,
    ):
        self.curriculum = list(curriculum) if curriculum is not None else default_curriculum()
        self.hyper = hyper
        self.synth = synth
        self.tracking_divisor = tracking_divisor
        self.eta = eta
        self.seed = seed
        self.out_dir = out_dir
        self.eps_fn = eps_fn if eps_fn is not None else epsilon_schedule
        self.rng = np.random.default_rng(seed)
        self.policy = QNetwork(vision_dim=eta + 3, rng=self.rng)
        self.target = self.policy.copy()
        self.optimizer = Adam(self.policy.params, learning_rate=hyper.learning_rate)
        self.buffer = ReplayBuffer(hyper.replay_capacity, state_dim=eta + 5)
        self.global_step = 0
        self.episode = 0
        self.next_phase = 0
        self.log = TrainLog()

    def _env(self, phase: PhaseConfig) -> SimEnv:
        return SimEnv(
            phase,
            self.synth,
            tracking_divisor=self.tracking_divisor,
            eta=self.eta,
            rng=self.rng,
        )

    def _learn_step(self) -> None:
        batch = self.buffer.sample(self.hyper.batch, self.rng)
        y_flow, y_temp = dqn.td_targets(batch, self.target, self.hyper.gamma)
        _, grads = dqn.td_loss_and_grads(self.policy, batch, y_flow, y_temp)
        self.optimizer.step(self.policy.params, grads)
        dqn.soft_update(self.target, self.policy, self.hyper.tau)

    def run_phase(self, phase: PhaseConfig, phase_number: int) -> None:
        """Run one phase's episode budget, logging cumulative rewards."""
        env = self._env(phase)
        hyper = self.hyper
        self.log.phase_starts.append(self.episode)
        for _ in range(phase.episodes):
            _, state = env.reset()
            vec = flatten_state(state)
            cum = 0.0
            for t in range(hyper.episode_length):
                eps = self.eps_fn(self.global_step)
                action = select_action(self.policy, vec, eps, t, hyper.lam, self.rng)
                next_state, r, _ = env.step(action)
                next_vec = flatten_state(next_state)
                # Episodes end by time limit, not by reaching an absorbing
                # state, so transitions are never stored as terminal.
                self.buffer.push(
                    vec,
                    action.flow_index,
                    action.temp_index,
                    r,
                    next_vec,
                    False,
                    action.temp_active,
                )
                self.global_step += 1
                if (
                    self.buffer.size >= hyper.learn_start
                    and self.global_step % hyper.update_every == 0
                ):
                    self._learn_step()
                vec = next_vec
                cum += r
            self.log.append(self.episode, phase_number, cum)
            self.episode += 1

    def run(self) -> TrainLog:
        """Run the remaining curriculum phases; writes a checkpoint and log
        files at every phase boundary when out_dir is set."""
        while self.next_phase < len(self.curriculum):
            idx = self.next_phase
            self.run_phase(self.curriculum[idx], idx + 1)
            self.next_phase = idx + 1
            if self.out_dir is not None:
                self.save(os.path.join(self.out_dir, f"checkpoint_phase{idx + 1}.npz"))
        if self.out_dir is not None:
            self.log.to_csv(os.path.join(self.out_dir, "trainlog.csv"))
            self.log.to_json(os.path.join(self.out_dir, "summary.json"))
        return self.log

    def counters(self) -> dict:
        return {
            "global_step": self.global_step,
            "episode": self.episode,
            "next_phase": self.next_phase,
            "seed": self.seed,
        }

    def save(self, path) -> None:
        extra = {
            "hyper": dataclasses.asdict(self.hyper),
            "synth": {"alpha": self.synth.alpha, "sigma": self.synth.sigma},
            "tracking_divisor": self.tracking_divisor,
            "eta": self.eta,
            "curriculum": [
                {"a": p.a, "b": p.b, "rot_deg": p.rot_deg, "rho": p.rho, "episodes": p.episodes}
                for p in self.curriculum
            ],
        }
        dqn.save_checkpoint(
            path,
            policy=self.policy,
            target=self.target,
            optimizer=self.optimizer,
            rng=self.rng,
            buffer=self.buffer,
            counters=self.counters(),
            extra=extra,
        )

    @classmethod
    def load(cls, path, out_dir=None) -> "Trainer":
        """Rebuild a trainer from a phase-boundary checkpoint; run() then
        continues exactly as the uninterrupted run would."""
        ckpt = dqn.load_checkpoint(path)
        if ckpt.target is None or ckpt.optimizer is None or ckpt.rng is None or ckpt.buffer is None:
            raise ValueError("checkpoint does not contain full training state")
        extra = ckpt.extra
        trainer = cls.__new__(cls)
        trainer.curriculum = [PhaseConfig(**doc) for doc in extra["curriculum"]]
        trainer.hyper = TrainHyper(**extra["hyper"])
        trainer.synth = SynthDistConfig(**extra["synth"])
        trainer.tracking_divisor = extra["tracking_divisor"]
        trainer.eta = extra["eta"]
        trainer.seed = ckpt.counters["seed"]
        trainer.out_dir = out_dir
        trainer.eps_fn = epsilon_schedule
        trainer.rng = ckpt.rng
        trainer.policy = ckpt.policy
        trainer.target = ckpt.target
        trainer.optimizer = ckpt.optimizer
        trainer.buffer = ckpt.buffer
        trainer.global_step = ckpt.counters["global_step"]
        trainer.episode = ckpt.counters["episode"]
        trainer.next_phase = ckpt.counters["next_phase"]
        trainer.log = TrainLog()
        return trainer


@dataclass
class EvalResult:
    rows: list[TraceRow]
    converged: bool

    @property
    def final_q(self) -> float:
        return self.rows[-1].q

    @property
    def final_u(self) -> float:
        return self.rows[-1].u_hat


def converged_bands(
    qs,
    us,
    tail: int = CONVERGENCE_TAIL,
    flow_band=FLOW_BAND,
    temp_center: float = 210.0,
    temp_tol: float = TEMP_TOLERANCE,
) -> bool:
    """True when every one of the last `tail` samples sits inside the flow
    band with temperature within tolerance of the optimum."""
    qs = list(qs)
    us = list(us)
    if len(qs) < tail:
        return False
    return all(
        flow_band[0] <= q <= flow_band[1] and abs(u - temp_center) <= temp_tol
        for q, u in zip(qs[-tail:], us[-tail:])
    )


def count_reversals(flow_deltas) -> int:
    """Sign changes between consecutive nonzero flow deltas."""
    signs = [1 if d > 0 else -1 for d in flow_deltas if d != 0]
    return sum(1 for a, b in zip(signs, signs[1:]) if a != b)


def evaluate(
    net: QNetwork,
    start_q: float,
    start_u: float,
    *,
    steps: int = 100,
    rho: float = 1.0,
    seed: int = 0,
    lam: int = 10,
    synth: SynthDistConfig = SynthDistConfig(),
    tracking_divisor: float = 4.0,
    eta: int = 30,
    ellipse: PhaseConfig | None = None,
) -> EvalResult:
    """Greedy rollout from a fixed start point; converged when the last 20
    steps stay inside the flow band and temperature tolerance."""
    phase = ellipse if ellipse is not None else PhaseConfig(a=20.0, b=10.0, rho=rho)
    if phase.rho != rho:
        phase = PhaseConfig(phase.a, phase.b, phase.rot_deg, rho, phase.episodes)
    env = SimEnv(phase, synth, tracking_divisor=tracking_divisor, eta=eta,
                 rng=np.random.default_rng(seed))
    _, obs = env.reset(q0=start_q, u0=start_u)
    rows: list[TraceRow] = []
    for t in range(steps):
        action = select_action(net, flatten_state(obs), 0.0, t, lam)
        obs, r, plant = env.step(action)
        rows.append(trace_row(t, plant, obs, action, r, env.info))
    ok = converged_bands([row.q for row in rows], [row.u_hat for row in rows])
    return EvalResult(rows, ok)


def evaluate_grid(
    net: QNetwork,
    *,
    rho: float,
    seed: int = 0,
    flows=EVAL_START_FLOWS,
    temps=EVAL_START_TEMPS,
    **kwargs,
) -> dict:
    """Evaluate every start-point combination; returns per-start results and
    the converged count."""
    results = {}
    converged = 0
    for i, q0 in enumerate(flows):
        for j, u0 in enumerate(temps):
            res = evaluate(net, q0, u0, rho=rho, seed=seed * 1000 + i * 10 + j, **kwargs)
            results[(q0, u0)] = res
            converged += res.converged
    return {"results": results, "converged": converged, "total": len(results)}


def train_default_run(seed: int, out_dir) -> dict:
    """Train the full default curriculum for one seed, writing checkpoints
    and logs under out_dir; returns the artifact paths."""
    os.makedirs(out_dir, exist_ok=True)
    trainer = Trainer(seed=seed, out_dir=out_dir)
    trainer.run()
    return {
        "seed": seed,
        "out_dir": str(out_dir),
        "trainlog": os.path.join(out_dir, "trainlog.csv"),
        "checkpoints": [
            os.path.join(out_dir, f"checkpoint_phase{i + 1}.npz")
            for i in range(len(trainer.curriculum))
        ],
    }
