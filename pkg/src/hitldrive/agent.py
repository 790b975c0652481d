"""Interactive double Q-learning: action blending, combined Q-values,
clipped double targets, and the full acting/training loop.

Two trainer plans share one loop. The "interactive" plan blends each
network's Q-values for the human and agent actions with the per-sample
human weight recorded at storage time; the "vanilla" plan is an
independently coded clipped double DQN update (target from the minimum of
both target nets at the online argmax, per-net squared TD loss). With the
human weight pinned to zero and no interventions the two produce identical
parameter trajectories, which the test suite checks bitwise.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .intervene import InterventionSchedule, NullSource
from .nets import AdamState, DuelingNetPair, TrainingFault, adam_step
from .replay import NO_HUMAN_ACTION, PriorityBuffer, EvaluativeStore, Transition
from .track import DrivingEnv, EpisodeStatus


class ContractViolation(ValueError):
    pass


@dataclass(frozen=True)
class HumanWeightSchedule:
    """Constant weight, or linear decay from `start` to `end` over `over_steps`."""

    mode: str = "decay"  # "constant" | "decay"
    constant: float = 0.0
    start: float = 1.0
    end: float = 0.0
    over_steps: int = 40000

    def __post_init__(self):
        if self.mode not in ("constant", "decay"):
            raise ValueError(f"unknown schedule mode {self.mode!r}")
        if self.mode == "constant" and not 0.0 <= self.constant <= 1.0:
            raise ValueError("constant weight must be in [0, 1]")
        if self.mode == "decay" and self.over_steps < 1:
            raise ValueError("over_steps must be >= 1")

    def value(self, step: int) -> float:
        if self.mode == "constant":
            return self.constant
        frac = min(max(step, 0) / self.over_steps, 1.0)
        return self.start + (self.end - self.start) * frac

    @classmethod
    def constant_of(cls, value: float) -> "HumanWeightSchedule":
        return cls(mode="constant", constant=value)


@dataclass
class AgentConfig:
    gamma: float = 0.99
    batch: int = 32
    train_every: int = 4
    tau: float = 0.0075
    lr: float = 0.00025
    epsilon_init: float = 1.0
    epsilon_decay: float = 1e-4
    epsilon_floor: float = 0.05
    learn_start: int = 500
    hidden: tuple[int, ...] = (128, 128)
    strict_paper_blend: bool = True
    schedule: HumanWeightSchedule = field(default_factory=HumanWeightSchedule)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must be in (0, 1]")
        if not 0.0 <= self.epsilon_floor <= self.epsilon_init <= 1.0:
            raise ValueError("need 0 <= epsilon_floor <= epsilon_init <= 1")

    def epsilon_at(self, step: int) -> float:
        return max(self.epsilon_floor, self.epsilon_init - self.epsilon_decay * step)


def select_action(obs, epsilon: float, net, rng: np.random.Generator) -> int:
    """Epsilon-greedy on the first online net; argmax ties go to the lowest index."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must be in [0, 1]")
    r = rng.random()  # always drawn, so the stream is policy-independent
    if r < epsilon:
        return int(rng.integers(net.n_actions))
    q = net.forward(obs)[0]
    return int(np.argmax(q))


def blend_action(a_agent: int, a_human: int, intervened: int) -> int:
    """Executed action: the human's when intervening, the agent's otherwise."""
    if intervened:
        if a_human == NO_HUMAN_ACTION:
            raise ContractViolation("intervened=1 requires a valid human action")
        return int(a_human)
    return int(a_agent)


def q_combined(q1_h: float, q2_h: float, q1_a: float, q2_a: float,
               lambda_h: float, intervened: int,
               strict_paper_blend: bool = True) -> float:
    """Weighted mix of the human-action and agent-action clipped Q-values.

    Strict mode zeroes the human term off-intervention (which scales the
    agent term by 1 - lambda_h); relaxed mode returns the plain agent value
    when no intervention occurred.
    """
    if not 0.0 <= lambda_h <= 1.0:
        raise ValueError("lambda_h must be in [0, 1]")
    agent_min = min(q1_a, q2_a)
    if not intervened:
        if strict_paper_blend:
            return lambda_h * 0.0 + (1.0 - lambda_h) * agent_min
        return agent_min
    return lambda_h * min(q1_h, q2_h) + (1.0 - lambda_h) * agent_min


def q_target(r: float, s_next, done: bool, pair: DuelingNetPair,
             gamma: float) -> float:
    """Clipped double target: bootstrap with the smaller target-net value at
    the first online net's argmax action."""
    a_star = int(np.argmax(pair.q1.forward(s_next)[0]))
    t1 = float(pair.target1.forward(s_next)[0, a_star])
    t2 = float(pair.target2.forward(s_next)[0, a_star])
    return q_target_scalar(r, t1, t2, gamma, done)


def q_target_scalar(r: float, qt1: float, qt2: float, gamma: float,
                    done: bool) -> float:
    return r + gamma * min(qt1, qt2) * (1.0 - float(done))


def td_error(q_target_value: float, q_combined_value: float) -> float:
    return q_target_value - q_combined_value


@dataclass
class TrainStats:
    loss1: float
    loss2: float
    mean_abs_td: float
    mean_lambda: float


def _batch_arrays(batch: list[Transition]):
    s = np.stack([t.s for t in batch])
    s_next = np.stack([t.s_next for t in batch])
    a_agent = np.array([t.a_agent for t in batch], dtype=np.int64)
    a_human = np.array([t.a_human for t in batch], dtype=np.int64)
    r = np.array([t.r for t in batch], dtype=np.float64)
    done = np.array([float(t.done) for t in batch], dtype=np.float64)
    intervened = np.array([float(t.intervened) for t in batch], dtype=np.float64)
    lam = np.array([t.lambda_h for t in batch], dtype=np.float64)
    return s, a_agent, a_human, r, s_next, done, intervened, lam


def _clipped_targets(pair: DuelingNetPair, r, s_next, done, gamma: float):
    q1n = pair.q1.forward(s_next)
    a_star = np.argmax(q1n, axis=1)
    rows = np.arange(len(r))
    t1 = pair.target1.forward(s_next)[rows, a_star]
    t2 = pair.target2.forward(s_next)[rows, a_star]
    return r + gamma * np.minimum(t1, t2) * (1.0 - done)


def _apply_update(pair: DuelingNetPair, caches, dqs, tau: float):
    g1 = pair.q1.backward(caches[0], dqs[0])
    g2 = pair.q2.backward(caches[1], dqs[1])
    adam_step(pair.q1.params, g1, pair.adam1)
    adam_step(pair.q2.params, g2, pair.adam2)
    pair.soft_update_targets(tau)
    pair.train_steps += 1


def train_step(pair: DuelingNetPair, buffer: PriorityBuffer, cfg: AgentConfig,
               rng: np.random.Generator, plan: str = "iddqn") -> TrainStats:
    """One gradient step for both online nets from a prioritized batch.

    interactive plan: each net's prediction for a sample is the per-net
    blend lambda*Q_i(s, a_human) + (1-lambda)*Q_i(s, a_agent) (human term
    zero off-intervention in strict mode, plain agent value in relaxed
    mode); the shared target is the clipped double bootstrap. Priorities
    take |target - prediction| from net 1, which reduces exactly to the
    plain clipped-DDQN TD when lambda=0 and nothing is intervened.
    """
    batch, idx, weights = buffer.sample(cfg.batch, rng)
    s, a_agent, a_human, r, s_next, done, intervened, lam = _batch_arrays(batch)
    b = len(batch)
    rows = np.arange(b)

    targets = _clipped_targets(pair, r, s_next, done, cfg.gamma)
    if not np.all(np.isfinite(targets)):
        raise TrainingFault(f"non-finite targets: {targets[~np.isfinite(targets)][:5]}")

    q1, cache1 = pair.q1.forward_cached(s)
    q2, cache2 = pair.q2.forward_cached(s)

    losses = []
    dqs = []
    preds1 = None
    for q, _cache in ((q1, cache1), (q2, cache2)):
        qa = q[rows, a_agent]
        if plan == "vanilla":
            pred = qa
            w_agent = np.ones(b)
            w_human = np.zeros(b)
        else:
            safe_h = np.where(a_human == NO_HUMAN_ACTION, 0, a_human)
            qh = np.where(intervened > 0, q[rows, safe_h], 0.0)
            if cfg.strict_paper_blend:
                pred = lam * qh + (1.0 - lam) * qa
                w_agent = 1.0 - lam
                w_human = np.where(intervened > 0, lam, 0.0)
            else:
                blended = lam * qh + (1.0 - lam) * qa
                pred = np.where(intervened > 0, blended, qa)
                w_agent = np.where(intervened > 0, 1.0 - lam, 1.0)
                w_human = np.where(intervened > 0, lam, 0.0)
        err = targets - pred
        loss = float(np.mean(weights * err * err))
        if not np.isfinite(loss):
            raise TrainingFault(
                f"non-finite loss (plan={plan}); batch rewards {r[:5]}, "
                f"targets {targets[:5]}"
            )
        dpred = -2.0 * weights * err / b
        dq = np.zeros_like(q)
        np.add.at(dq, (rows, a_agent), dpred * w_agent)
        if plan != "vanilla":
            hmask = intervened > 0
            if np.any(hmask):
                np.add.at(dq, (rows[hmask], a_human[hmask]),
                          (dpred * w_human)[hmask])
        losses.append(loss)
        dqs.append(dq)
        if preds1 is None:
            preds1 = pred

    tds = targets - preds1
    buffer.update_priorities(idx, tds)
    _apply_update(pair, (cache1, cache2), dqs, cfg.tau)
    return TrainStats(
        loss1=losses[0], loss2=losses[1],
        mean_abs_td=float(np.mean(np.abs(tds))),
        mean_lambda=float(np.mean(lam)),
    )


@dataclass
class RunReport:
    episodes: list[dict]
    total_steps: int
    interventions_used: int
    intervened_steps: int
    final_epsilon: float
    final_lambda: float

    def rewards(self) -> list[float]:
        return [e["cumulative_reward"] for e in self.episodes]


@dataclass
class TrainerHooks:
    """Optional observer/controls; all callables must be non-blocking."""

    on_episode: object | None = None  # callable(record: dict)
    on_frame: object | None = None  # callable(frame: dict)
    on_checkpoint: object | None = None  # callable(step: int, pair)
    checkpoint_every: int = 0
    pause_check: object | None = None  # callable() -> bool, True while paused
    stop_check: object | None = None  # callable() -> bool
    steps_per_second: float = 0.0  # 0 = unpaced


def run_training(
    env: DrivingEnv,
    pair: DuelingNetPair,
    buffer: PriorityBuffer,
    evaluative: EvaluativeStore | None,
    cfg: AgentConfig,
    total_steps: int,
    schedule: InterventionSchedule | None = None,
    source=None,
    plan: str = "iddqn",
    hooks: TrainerHooks | None = None,
) -> RunReport:
    """The full acting/learning loop.

    Per step: evaluate the intervention gate, poll the human source while
    it is open, pick the agent action epsilon-greedily, execute the blended
    action, store the transition in both buffers, and train every
    `train_every` steps once `learn_start` transitions exist.
    """
    schedule = schedule or InterventionSchedule()
    source = source or NullSource()
    hooks = hooks or TrainerHooks()
    seq = np.random.SeedSequence(cfg.seed)
    rng_action, rng_env, rng_replay = (
        np.random.default_rng(s) for s in seq.spawn(3)
    )

    episodes: list[dict] = []
    episode_idx = 0
    intervened_steps = 0
    state, obs = env.reset(rng_env)
    ep_steps = 0
    ep_intervened = 0
    next_pace = time.monotonic()

    step_i = 0
    while step_i < total_steps:
        if hooks.stop_check is not None and hooks.stop_check():
            break
        if hooks.pause_check is not None and hooks.pause_check():
            time.sleep(0.02)
            continue
        if hooks.steps_per_second > 0:
            now = time.monotonic()
            if now < next_pace:
                time.sleep(next_pace - now)
            next_pace = max(next_pace + 1.0 / hooks.steps_per_second, now - 0.5)

        epsilon = cfg.epsilon_at(step_i)
        lam = cfg.schedule.value(step_i)
        gate_open = schedule.gate(step_i)
        a_human = source.poll(step_i, obs, env.state) if gate_open else None
        intervened = int(a_human is not None)
        a_agent = select_action(obs, epsilon, pair.q1, rng_action)
        a_exec = blend_action(a_agent, a_human if intervened else NO_HUMAN_ACTION,
                              intervened)

        prev_obs = obs
        sim_before = env.snapshot() if evaluative is not None else None
        nxt, obs, breakdown, crashed, status, truncated = env.step(a_exec)
        done = status is not EpisodeStatus.CONTINUE
        ep_steps += 1
        intervened_steps += intervened
        ep_intervened += intervened

        tr = Transition(
            s=prev_obs, a_agent=a_agent,
            a_human=a_human if intervened else NO_HUMAN_ACTION,
            r=breakdown.r_total, s_next=obs, done=done,
            intervened=intervened, crashed=crashed, lambda_h=lam,
            episode=episode_idx, sim=sim_before,
        )
        buffer.push(tr)
        if evaluative is not None:
            evaluative.append(tr)

        if hooks.on_frame is not None:
            hooks.on_frame({
                "step": step_i,
                "pose": [float(nxt.position[0]), float(nxt.position[1]),
                         float(nxt.heading)],
                "rays": [float(v) for v in obs[:9]],
                "reward": breakdown.r_total,
                "cum_reward": env.cumulative_reward,
                "lambda_h": lam,
                "gate": "open" if gate_open else "closed",
                "intervened": bool(intervened),
                "epsilon": epsilon,
                "episode": episode_idx,
            })

        if (step_i + 1) % cfg.train_every == 0 and len(buffer) >= max(
            cfg.batch, cfg.learn_start
        ):
            train_step(pair, buffer, cfg, rng_replay, plan=plan)

        if hooks.checkpoint_every and (step_i + 1) % hooks.checkpoint_every == 0:
            if hooks.on_checkpoint is not None:
                hooks.on_checkpoint(step_i + 1, pair)

        if done or truncated:
            record = {
                "episode": episode_idx,
                "steps": ep_steps,
                "cumulative_reward": float(env.cumulative_reward),
                "crashed": bool(status is EpisodeStatus.FAILURE),
                "lambda_h": lam,
                "epsilon": epsilon,
                "interventions_used": schedule.windows_used(step_i),
                "intervened_steps": ep_intervened,
                "status": status.value if not truncated else "truncated",
                "global_step": step_i + 1,
            }
            episodes.append(record)
            if hooks.on_episode is not None:
                hooks.on_episode(record)
            episode_idx += 1
            ep_steps = 0
            ep_intervened = 0
            state, obs = env.reset(rng_env)
        step_i += 1

    final_step = max(step_i - 1, 0)
    return RunReport(
        episodes=episodes,
        total_steps=step_i,
        interventions_used=schedule.windows_used(final_step),
        intervened_steps=intervened_steps,
        final_epsilon=cfg.epsilon_at(final_step),
        final_lambda=cfg.schedule.value(final_step),
    )


def greedy_rollout(env: DrivingEnv, net, rng_env: np.random.Generator,
                   max_steps: int | None = None):
    """One greedy (epsilon=0) episode; returns (cumulative reward, steps, status)."""
    _state, obs = env.reset(rng_env)
    steps = 0
    cap = max_steps or env.max_episode_steps
    while steps < cap:
        a = int(np.argmax(net.forward(obs)[0]))
        _nxt, obs, _breakdown, _crashed, status, truncated = env.step(a)
        steps += 1
        if status is not EpisodeStatus.CONTINUE or truncated:
            return env.cumulative_reward, steps, status
    return env.cumulative_reward, steps, EpisodeStatus.CONTINUE
