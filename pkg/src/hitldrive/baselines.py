"""Comparison methods sharing the simulator and the from-scratch nets:
behavioral cloning, demonstration-pretrained Q-learning with a large-margin
imitation loss, and human-gated iterative aggregation.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agent import AgentConfig, RunReport, run_training
from .intervene import ScriptedExpert
from .nets import (
    AdamState,
    DuelingNet,
    DuelingNetPair,
    TrainingFault,
    adam_step,
)
from .replay import (
    NO_HUMAN_ACTION,
    EvaluativeStore,
    PriorityBuffer,
    ReplayConfig,
    Transition,
)
from .track import DrivingEnv, EpisodeStatus

log = logging.getLogger(__name__)


class DatasetQualityError(RuntimeError):
    pass


@dataclass
class DemoDataset:
    """Expert-labeled transitions (a_agent holds the expert action)."""

    transitions: list[Transition]
    expert: str = "scripted"
    seed: int = 0

    def __len__(self) -> int:
        return len(self.transitions)

    def observations(self) -> np.ndarray:
        return np.stack([t.s for t in self.transitions])

    def actions(self) -> np.ndarray:
        return np.array([t.a_agent for t in self.transitions], dtype=np.int64)

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(json.dumps({
                "schema": "hitldrive-demos", "v": 1,
                "expert": self.expert, "seed": self.seed,
            }) + "\n")
            for t in self.transitions:
                f.write(json.dumps(t.to_record()) + "\n")

    @classmethod
    def load(cls, path) -> "DemoDataset":
        p = Path(path)
        with open(p) as f:
            header = json.loads(f.readline())
            if header.get("schema") != "hitldrive-demos":
                raise ValueError(f"{p} is not a demo dataset file")
            items = [Transition.from_record(json.loads(line)) for line in f]
        return cls(items, expert=header.get("expert", "?"), seed=header.get("seed", 0))


def collect_demonstrations(
    expert: ScriptedExpert, env: DrivingEnv, n_transitions: int, seed: int = 0
) -> DemoDataset:
    """Roll the expert for exactly n transitions across episodes.

    Raises DatasetQualityError when more than half the completed episodes
    crash: that expert cannot supply usable demonstrations.
    """
    if n_transitions < 1:
        raise ValueError("n_transitions must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 17]))
    out: list[Transition] = []
    episodes = 0
    crashes = 0
    episode_idx = 0
    _state, obs = env.reset(rng)
    while len(out) < n_transitions:
        a = expert.action_for(env.state)
        prev = obs
        _nxt, obs, breakdown, crashed, status, truncated = env.step(a)
        out.append(Transition(
            s=prev, a_agent=a, a_human=NO_HUMAN_ACTION, r=breakdown.r_total,
            s_next=obs, done=status is not EpisodeStatus.CONTINUE,
            intervened=0, crashed=crashed, episode=episode_idx,
        ))
        if status is not EpisodeStatus.CONTINUE or truncated:
            episodes += 1
            crashes += int(status is EpisodeStatus.FAILURE)
            episode_idx += 1
            _state, obs = env.reset(rng)
    if episodes and crashes / episodes > 0.5:
        raise DatasetQualityError(
            f"expert crashed in {crashes}/{episodes} episodes; "
            "check the expert/track pairing"
        )
    return DemoDataset(out, expert="scripted", seed=seed)


def bc_train(
    dataset: DemoDataset,
    net: DuelingNet,
    epochs: int = 40,
    batch: int = 32,
    lr: float = 0.00025,
    seed: int = 0,
) -> dict:
    """Supervised cross-entropy on softmax(Q) against expert labels.

    Never touches the environment; returns final training accuracy.
    """
    if len(dataset) == 0:
        raise ValueError("demo dataset is empty")
    rng = np.random.default_rng(seed)
    x = dataset.observations()
    y = dataset.actions()
    opt = AdamState(lr=lr)
    n = len(x)
    bsz = min(batch, n)
    losses = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        for b in range(max(n // bsz, 1)):
            rows = order[b * bsz : (b + 1) * bsz]
            logits, cache = net.forward_cached(x[rows])
            z = logits - logits.max(axis=1, keepdims=True)
            e = np.exp(z)
            probs = e / e.sum(axis=1, keepdims=True)
            loss = float(np.mean(-np.log(probs[np.arange(len(rows)), y[rows]] + 1e-12)))
            if not np.isfinite(loss):
                raise TrainingFault(f"BC loss diverged at epoch {epoch}")
            dq = probs
            dq[np.arange(len(rows)), y[rows]] -= 1.0
            dq /= len(rows)
            grads = net.backward(cache, dq)
            adam_step(net.params, grads, opt)
            losses.append(loss)
    pred = np.argmax(net.forward(x), axis=1)
    acc = float(np.mean(pred == y))
    return {"accuracy": acc, "final_loss": losses[-1], "epochs": epochs,
            "n_samples": n}


@dataclass
class DqfdConfig:
    margin: float = 0.8
    lambda_e: float = 1.0
    pretrain_steps: int = 4000

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be > 0")


def margin_loss_and_grad(q_row: np.ndarray, a_expert: int, margin: float):
    """Large-margin hinge: max_a [Q(a) + m*1(a != a_E)] - Q(a_E).

    Zero (with zero gradient) once the expert action wins by the margin.
    Returns (loss, dloss/dQ row).
    """
    aug = q_row + margin
    aug[a_expert] = q_row[a_expert]
    a_star = int(np.argmax(aug))
    loss = float(aug[a_star] - q_row[a_expert])
    grad = np.zeros_like(q_row)
    grad[a_star] += 1.0
    grad[a_expert] -= 1.0
    return loss, grad


def dqfd_pretrain(
    pair: DuelingNetPair,
    dataset: DemoDataset,
    cfg: DqfdConfig,
    agent_cfg: AgentConfig,
    rng: np.random.Generator,
) -> dict:
    """Demo-only phase: clipped-double TD loss plus the weighted margin loss
    on each online net, with soft target updates throughout."""
    x = dataset.observations()
    y = dataset.actions()
    r = np.array([t.r for t in dataset.transitions])
    s_next = np.stack([t.s_next for t in dataset.transitions])
    done = np.array([float(t.done) for t in dataset.transitions])
    n = len(x)
    bsz = min(agent_cfg.batch, n)
    td_losses = []
    margin_losses = []
    for _step in range(cfg.pretrain_steps):
        rows = rng.integers(0, n, size=bsz)
        q1n = pair.q1.forward(s_next[rows])
        a_star = np.argmax(q1n, axis=1)
        rr = np.arange(bsz)
        t1 = pair.target1.forward(s_next[rows])[rr, a_star]
        t2 = pair.target2.forward(s_next[rows])[rr, a_star]
        targets = r[rows] + agent_cfg.gamma * np.minimum(t1, t2) * (1.0 - done[rows])
        for net, opt in ((pair.q1, pair.adam1), (pair.q2, pair.adam2)):
            q, cache = net.forward_cached(x[rows])
            q_sel = q[rr, y[rows]]
            err = targets - q_sel
            td_loss = float(np.mean(err * err))
            dq = np.zeros_like(q)
            dq[rr, y[rows]] = -2.0 * err / bsz
            m_total = 0.0
            if cfg.lambda_e > 0:
                for i in range(bsz):
                    ml, mg = margin_loss_and_grad(q[i], int(y[rows][i]), cfg.margin)
                    m_total += ml
                    dq[i] += cfg.lambda_e * mg / bsz
            loss = td_loss + cfg.lambda_e * m_total / bsz
            if not np.isfinite(loss):
                raise TrainingFault("DQfD pretraining loss diverged")
            grads = net.backward(cache, dq)
            adam_step(net.params, grads, opt)
            if net is pair.q1:
                td_losses.append(td_loss)
                margin_losses.append(m_total / bsz)
        pair.soft_update_targets(agent_cfg.tau)
        pair.train_steps += 1
    match = float(np.mean(np.argmax(pair.q1.forward(x), axis=1) == y))
    return {
        "pretrain_steps": cfg.pretrain_steps,
        "demo_match_rate": match,
        "final_td_loss": td_losses[-1] if td_losses else 0.0,
        "final_margin_loss": margin_losses[-1] if margin_losses else 0.0,
    }


def dqfd_run(
    dataset: DemoDataset,
    cfg: DqfdConfig,
    env: DrivingEnv,
    agent_cfg: AgentConfig,
    replay_cfg: ReplayConfig | None = None,
    total_steps: int = 20000,
    evaluative: EvaluativeStore | None = None,
    hooks=None,
) -> tuple[DuelingNetPair, dict, RunReport]:
    """Pretrain on demonstrations, then fine-tune with the plain clipped
    double-Q trainer while the demos stay pinned in the replay buffer."""
    if len(dataset) == 0:
        raise ValueError("demo dataset is empty")
    pair = DuelingNetPair(hidden=agent_cfg.hidden, lr=agent_cfg.lr,
                          seed=agent_cfg.seed)
    rng_pre = np.random.default_rng(np.random.SeedSequence([agent_cfg.seed, 23]))
    pre_stats = dqfd_pretrain(pair, dataset, cfg, agent_cfg, rng_pre)
    buffer = PriorityBuffer(replay_cfg or ReplayConfig())
    for t in dataset.transitions:
        buffer.push(t, initial_priority=1.0)
    buffer.pin_current()
    report = run_training(
        env, pair, buffer, evaluative, agent_cfg, total_steps,
        plan="vanilla", hooks=hooks,
    )
    return pair, pre_stats, report


def hg_dagger_run(
    initial: DemoDataset,
    expert: ScriptedExpert,
    env: DrivingEnv,
    iterations: int = 4,
    add_per_iter: int = 300,
    takeover_frac: float = 0.5,
    bc_epochs: int = 40,
    batch: int = 32,
    lr: float = 0.00025,
    seed: int = 0,
    hidden: tuple[int, ...] = (128, 128),
) -> tuple[DuelingNet, dict]:
    """Iterative aggregation with gated expert takeover.

    Round 0 is plain behavioral cloning on the initial demonstrations.
    Each later round rolls the current policy; the expert takes over when
    the normalized cross-track offset exceeds `takeover_frac` (releasing at
    half that, so corrections run to completion), and only expert-labeled
    transitions are aggregated. The policy is retrained from scratch on the
    aggregate each round.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    aggregate = list(initial.transitions)
    rounds = []
    net = DuelingNet(hidden=hidden, seed=seed * 977 + 1)
    stats = bc_train(DemoDataset(aggregate, initial.expert, seed), net,
                     epochs=bc_epochs, batch=batch, lr=lr, seed=seed)
    rounds.append({"iteration": 0, "dataset_size": len(aggregate),
                   "bc_accuracy": stats["accuracy"], "collected": 0})

    for it in range(1, iterations):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 31, it]))
        collected: list[Transition] = []
        engaged = False
        _state, obs = env.reset(rng)
        episode_idx = 0
        step_cap = add_per_iter * 60
        for _ in range(step_cap):
            cross = abs(obs[9])
            if not engaged and cross > takeover_frac:
                engaged = True
            elif engaged and cross <= takeover_frac / 2:
                engaged = False
            if engaged:
                a = expert.action_for(env.state)
            else:
                a = int(np.argmax(net.forward(obs)[0]))
            prev = obs
            _nxt, obs, breakdown, crashed, status, truncated = env.step(a)
            if engaged:
                collected.append(Transition(
                    s=prev, a_agent=a, a_human=NO_HUMAN_ACTION,
                    r=breakdown.r_total, s_next=obs,
                    done=status is not EpisodeStatus.CONTINUE,
                    intervened=0, crashed=crashed, episode=episode_idx,
                ))
            if status is not EpisodeStatus.CONTINUE or truncated:
                episode_idx += 1
                engaged = False
                _state, obs = env.reset(rng)
            if len(collected) >= add_per_iter:
                break
        if not collected:
            log.warning("hg-dagger iteration %d: expert never took over", it)
        aggregate.extend(collected[:add_per_iter])
        net = DuelingNet(hidden=hidden, seed=seed * 977 + 1 + it)
        stats = bc_train(DemoDataset(aggregate, initial.expert, seed), net,
                         epochs=bc_epochs, batch=batch, lr=lr,
                         seed=np.random.SeedSequence([seed, 41, it]).generate_state(1)[0])
        rounds.append({"iteration": it, "dataset_size": len(aggregate),
                       "bc_accuracy": stats["accuracy"],
                       "collected": len(collected[:add_per_iter])})
    return net, {"rounds": rounds, "final_dataset_size": len(aggregate)}


def pair_from_policy(net: DuelingNet, lr: float = 0.00025) -> DuelingNetPair:
    """Wrap a single policy net as a checkpointable net pair."""
    pair = DuelingNetPair(obs_dim=net.obs_dim, n_actions=net.n_actions,
                          hidden=net.hidden, lr=lr)
    pair.q1 = net.copy()
    pair.q2 = net.copy()
    pair.target1 = net.copy()
    pair.target2 = net.copy()
    return pair
