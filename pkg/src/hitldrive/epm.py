"""Post-hoc assessment of human interventions.

Two learned components over the evaluative store: a dynamics model mapping
(observation, one-hot action) to (next observation, reward), and a crash
classifier over (observation, next observation) pairs. A counterfactual
rollout replays "what if the agent had acted" from each intervention onset:
first the agent's logged action, then greedy actions from the first online
Q-net, stopping with total -1 as soon as a crash is predicted. Oracle mode
swaps both models for the true simulator, which pins down the rollout logic
independently of model quality.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .nets import MLP, AdamState, TrainingFault, adam_step, load_mlp, save_mlp
from .replay import EvaluativeStore, Transition
from .track import (
    DT,
    N_ACTIONS,
    OBS_DIM,
    OBS_HIGH,
    OBS_LOW,
    ActionHistory,
    RewardConfig,
    TrackSpec,
    state_from_snapshot,
    step as sim_step,
)


class EpmConfigurationError(ValueError):
    pass


@dataclass
class EpmConfig:
    horizon: int = 4
    lr_predictive: float = 0.0002
    lr_classifier: float = 0.0005
    batch: int = 64
    dropout: float = 0.4
    input_noise: float = 0.1
    hidden: tuple[int, ...] = (128, 128)
    epochs_predictive: int = 30
    epochs_classifier: int = 20
    crash_batch_frac: float = 0.2
    holdout_frac: float = 0.1
    threshold: float = 0.5
    oracle_mode: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.horizon < 1:
            raise EpmConfigurationError("horizon must be >= 1")


@dataclass
class EpmVerdict:
    """Per-intervention-window comparison of actual vs counterfactual return."""

    window_id: int
    episode: int
    onset_index: int
    horizon: int
    window_length: int
    sum_r_human: float
    sum_r_agent: float
    agrees: bool
    counterfactual_crashed: bool

    def to_record(self) -> dict:
        return {
            "window_id": self.window_id,
            "episode": self.episode,
            "onset_index": self.onset_index,
            "horizon": self.horizon,
            "window_length": self.window_length,
            "sum_r_human": float(self.sum_r_human),
            "sum_r_agent": float(self.sum_r_agent),
            "agrees": bool(self.agrees),
            "counterfactual_crashed": bool(self.counterfactual_crashed),
        }


def _one_hot(actions: np.ndarray, n: int = N_ACTIONS) -> np.ndarray:
    out = np.zeros((len(actions), n))
    out[np.arange(len(actions)), actions] = 1.0
    return out


def _executed_actions(transitions: list[Transition]) -> np.ndarray:
    return np.array(
        [t.a_human if t.intervened else t.a_agent for t in transitions],
        dtype=np.int64,
    )


class PredictiveModel:
    """Dense dynamics model: (obs ++ one-hot action) -> (next obs, reward).

    Predicted observations are clamped to the valid observation ranges.
    """

    def __init__(self, cfg: EpmConfig, seed: int = 0):
        self.cfg = cfg
        sizes = [OBS_DIM + N_ACTIONS, *cfg.hidden, OBS_DIM + 1]
        self.net = MLP(sizes, seed=seed, dropout=cfg.dropout)

    def predict(self, obs: np.ndarray, action: int) -> tuple[np.ndarray, float]:
        x = np.concatenate([obs, _one_hot(np.array([action]))[0]])
        out = self.net.forward(x)[0]
        s_next = np.clip(out[:OBS_DIM], OBS_LOW, OBS_HIGH)
        return s_next, float(out[OBS_DIM])

    def save(self, path) -> None:
        save_mlp(self.net, path, {"kind": "predictive"})

    @classmethod
    def load(cls, path, cfg: EpmConfig | None = None) -> "PredictiveModel":
        net, meta = load_mlp(path)
        if meta.get("kind") != "predictive":
            raise EpmConfigurationError(f"{path} is not a predictive model")
        model = cls.__new__(cls)
        model.cfg = cfg or EpmConfig()
        model.net = net
        return model


class CrashClassifier:
    """Two-class dense net over (obs, next obs); exposes P(crash)."""

    def __init__(self, cfg: EpmConfig, seed: int = 0):
        self.cfg = cfg
        sizes = [2 * OBS_DIM, *cfg.hidden, 2]
        self.net = MLP(sizes, seed=seed, dropout=cfg.dropout)
        self.threshold = cfg.threshold

    def crash_probability(self, obs: np.ndarray, obs_next: np.ndarray) -> float:
        x = np.concatenate([obs, obs_next])
        logits = self.net.forward(x)[0]
        z = logits - logits.max()
        e = np.exp(z)
        return float(e[1] / e.sum())

    def flags_crash(self, obs: np.ndarray, obs_next: np.ndarray) -> bool:
        return self.crash_probability(obs, obs_next) >= self.threshold

    def save(self, path) -> None:
        save_mlp(self.net, path, {"kind": "classifier", "threshold": self.threshold})

    @classmethod
    def load(cls, path, cfg: EpmConfig | None = None) -> "CrashClassifier":
        net, meta = load_mlp(path)
        if meta.get("kind") != "classifier":
            raise EpmConfigurationError(f"{path} is not a classifier model")
        model = cls.__new__(cls)
        model.cfg = cfg or EpmConfig()
        model.net = net
        model.threshold = meta.get("threshold", 0.5)
        return model


def train_predictive(
    transitions: list[Transition], cfg: EpmConfig
) -> tuple[PredictiveModel, dict]:
    """Fit the dynamics model with MAE loss and Gaussian input-noise
    regularization (noise on the observation part only; one-hot action
    bits stay exact). Returns held-out state/reward MAEs."""
    if len(transitions) < 1000:
        raise EpmConfigurationError(
            f"predictive model needs >= 1000 transitions, got {len(transitions)}"
        )
    rng = np.random.default_rng(cfg.seed)
    obs = np.stack([t.s for t in transitions])
    nxt = np.stack([t.s_next for t in transitions])
    rew = np.array([t.r for t in transitions])
    act = _one_hot(_executed_actions(transitions))
    x = np.concatenate([obs, act], axis=1)
    y = np.concatenate([nxt, rew[:, None]], axis=1)

    n = len(x)
    perm = rng.permutation(n)
    n_hold = max(int(n * cfg.holdout_frac), 1)
    hold, train = perm[:n_hold], perm[n_hold:]
    model = PredictiveModel(cfg, seed=cfg.seed + 1)
    opt = AdamState(lr=cfg.lr_predictive)

    nb = len(train) // cfg.batch
    for epoch in range(cfg.epochs_predictive):
        order = rng.permutation(train)
        for b in range(nb):
            rows = order[b * cfg.batch : (b + 1) * cfg.batch]
            xb = x[rows].copy()
            xb[:, :OBS_DIM] += rng.normal(0.0, cfg.input_noise,
                                          size=(len(rows), OBS_DIM))
            out, cache = model.net.forward_cached(xb, train=True, rng=rng)
            diff = out - y[rows]
            loss = float(
                np.mean(np.abs(diff[:, :OBS_DIM])) + np.mean(np.abs(diff[:, OBS_DIM]))
            )
            if not np.isfinite(loss):
                raise TrainingFault(
                    f"predictive loss diverged at epoch {epoch} batch {b}"
                )
            dout = np.zeros_like(out)
            dout[:, :OBS_DIM] = np.sign(diff[:, :OBS_DIM]) / (len(rows) * OBS_DIM)
            dout[:, OBS_DIM] = np.sign(diff[:, OBS_DIM]) / len(rows)
            grads = model.net.backward(cache, dout)
            adam_step(model.net.params, grads, opt)

    out_hold = model.net.forward(x[hold])
    state_pred = np.clip(out_hold[:, :OBS_DIM], OBS_LOW, OBS_HIGH)
    state_mae = float(np.mean(np.abs(state_pred - y[hold][:, :OBS_DIM])))
    reward_mae = float(np.mean(np.abs(out_hold[:, OBS_DIM] - y[hold][:, OBS_DIM])))
    return model, {"state_mae": state_mae, "reward_mae": reward_mae,
                   "n_train": int(len(train)), "n_holdout": int(n_hold)}


def train_classifier(
    transitions: list[Transition], cfg: EpmConfig
) -> tuple[CrashClassifier, dict]:
    """Fit the crash classifier with cross-entropy; crash rows are
    oversampled so each batch holds at least crash_batch_frac of them."""
    labels = np.array([int(t.crashed) for t in transitions], dtype=np.int64)
    if labels.sum() == 0:
        raise EpmConfigurationError("dataset has no crash transitions")
    if labels.sum() == len(labels):
        raise EpmConfigurationError("dataset has no non-crash transitions")
    rng = np.random.default_rng(cfg.seed)
    x = np.concatenate(
        [np.stack([t.s for t in transitions]), np.stack([t.s_next for t in transitions])],
        axis=1,
    )

    n = len(x)
    perm = rng.permutation(n)
    n_hold = max(int(n * cfg.holdout_frac), 1)
    hold, train = perm[:n_hold], perm[n_hold:]
    # make the held-out split usable even under extreme class skew
    if labels[hold].sum() == 0 or labels[hold].sum() == len(hold):
        crash_idx = perm[labels[perm] == 1]
        clean_idx = perm[labels[perm] == 0]
        n_hc = max(int(len(crash_idx) * cfg.holdout_frac), 1)
        n_hn = max(int(len(clean_idx) * cfg.holdout_frac), 1)
        hold = np.concatenate([crash_idx[:n_hc], clean_idx[:n_hn]])
        train = np.concatenate([crash_idx[n_hc:], clean_idx[n_hn:]])

    crash_rows = train[labels[train] == 1]
    clean_rows = train[labels[train] == 0]
    n_crash = max(int(cfg.batch * cfg.crash_batch_frac), 1)
    n_clean = cfg.batch - n_crash

    model = CrashClassifier(cfg, seed=cfg.seed + 2)
    opt = AdamState(lr=cfg.lr_classifier)
    nb = max(len(train) // cfg.batch, 1)
    for epoch in range(cfg.epochs_classifier):
        for _ in range(nb):
            rows = np.concatenate([
                rng.choice(crash_rows, size=n_crash, replace=True),
                rng.choice(clean_rows, size=n_clean,
                           replace=len(clean_rows) < n_clean),
            ])
            xb = x[rows] + rng.normal(0.0, cfg.input_noise, size=(len(rows), x.shape[1]))
            yb = labels[rows]
            logits, cache = model.net.forward_cached(xb, train=True, rng=rng)
            z = logits - logits.max(axis=1, keepdims=True)
            e = np.exp(z)
            probs = e / e.sum(axis=1, keepdims=True)
            loss = float(np.mean(-np.log(probs[np.arange(len(rows)), yb] + 1e-12)))
            if not np.isfinite(loss):
                raise TrainingFault(f"classifier loss diverged at epoch {epoch}")
            dlogits = probs.copy()
            dlogits[np.arange(len(rows)), yb] -= 1.0
            dlogits /= len(rows)
            grads = model.net.backward(cache, dlogits)
            adam_step(model.net.params, grads, opt)

    logits = model.net.forward(x[hold])
    pred = (logits[:, 1] - logits[:, 0] >= 0).astype(np.int64)
    truth = labels[hold]
    acc = float(np.mean(pred == truth))
    tp = int(np.sum((pred == 1) & (truth == 1)))
    fp = int(np.sum((pred == 1) & (truth == 0)))
    fn = int(np.sum((pred == 0) & (truth == 1)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return model, {"accuracy": acc, "f1": f1, "n_holdout": int(len(hold)),
                   "holdout_crash_rate": float(np.mean(truth))}


@dataclass
class OracleModels:
    """True-simulator stand-ins for the learned dynamics and crash models."""

    track: TrackSpec
    reward_cfg: RewardConfig = field(default_factory=RewardConfig)
    dt: float = DT


@dataclass
class LearnedModels:
    predictive: PredictiveModel
    classifier: CrashClassifier


def counterfactual_rollout(onset: Transition, q1, models, horizon: int) -> tuple[float, bool]:
    """Total reward of the simulated agent-only trajectory from an onset.

    The first simulated action is the agent's logged proposal; afterwards
    actions come from argmax over q1. A flagged crash ends the rollout with
    total exactly -1. Returns (sum_r_agent, crashed).
    """
    if horizon < 1:
        raise EpmConfigurationError("horizon must be >= 1")
    if isinstance(models, OracleModels):
        if onset.sim is None:
            raise EpmConfigurationError(
                "oracle mode needs simulator snapshots in the store"
            )
        state, hist = state_from_snapshot(onset.sim)
        action = onset.a_agent
        total = 0.0
        for _ in range(horizon):
            state, obs, breakdown, crashed = sim_step(
                state, action, models.track, models.reward_cfg, hist, models.dt
            )
            if crashed:
                return -1.0, True
            total += breakdown.r_total
            action = int(np.argmax(q1.forward(obs)[0]))
        return total, False
    if not isinstance(models, LearnedModels):
        raise EpmConfigurationError(f"unknown models object: {type(models)!r}")
    obs = np.asarray(onset.s, dtype=np.float64)
    action = onset.a_agent
    total = 0.0
    for _ in range(horizon):
        obs_next, r = models.predictive.predict(obs, action)
        if models.classifier.flags_crash(obs, obs_next):
            return -1.0, True
        total += r
        action = int(np.argmax(q1.forward(obs_next)[0]))
        obs = obs_next
    return total, False


def intervention_windows(store: EvaluativeStore) -> list[tuple[int, int]]:
    """(onset index, length) of each maximal run of intervened transitions,
    never crossing episode boundaries."""
    items = store.snapshot()
    windows = []
    start = None
    for i, tr in enumerate(items):
        boundary = i > 0 and items[i - 1].episode != tr.episode
        if start is not None and (not tr.intervened or boundary):
            windows.append((start, i - start))
            start = None
        if tr.intervened and start is None:
            start = i
    if start is not None:
        windows.append((start, len(items) - start))
    return windows


def evaluate_interventions(
    store: EvaluativeStore, q1, models, cfg: EpmConfig
) -> tuple[list[EpmVerdict], float | None]:
    """One verdict per intervention window: actual human-driven return vs
    the counterfactual agent-only return over the same horizon. The rate is
    None (not-applicable) when the store holds no interventions."""
    items = store.snapshot()
    verdicts: list[EpmVerdict] = []
    for wid, (onset, length) in enumerate(intervention_windows(store)):
        horizon = min(length, cfg.horizon)
        sum_human = float(sum(items[k].r for k in range(onset, onset + horizon)))
        sum_agent, crashed = counterfactual_rollout(items[onset], q1, models, horizon)
        verdicts.append(EpmVerdict(
            window_id=wid,
            episode=items[onset].episode,
            onset_index=onset,
            horizon=horizon,
            window_length=length,
            sum_r_human=sum_human,
            sum_r_agent=sum_agent,
            agrees=sum_human >= sum_agent,
            counterfactual_crashed=crashed,
        ))
    rate = (
        float(np.mean([v.agrees for v in verdicts])) if verdicts else None
    )
    return verdicts, rate


def global_comparison(store: EvaluativeStore, q1, models, cfg: EpmConfig):
    """Literal single-accumulator comparison: every non-intervention reward
    adds to the human sum; every intervened transition triggers a rollout
    whose rewards add to the agent sum (a predicted crash overwrites it
    with -1). Kept for fidelity; window verdicts are the default reading."""
    sum_human = 0.0
    sum_agent = 0.0
    for tr in store.snapshot():
        if tr.intervened:
            total, crashed = counterfactual_rollout(tr, q1, models, cfg.horizon)
            sum_agent = -1.0 if crashed else sum_agent + total
        else:
            sum_human += tr.r
    return sum_human, sum_agent


def save_verdicts(path, verdicts: list[EpmVerdict], rate: float | None) -> None:
    """Line-delimited verdict records followed by one summary record."""
    with open(path, "w") as f:
        f.write(json.dumps({"schema": "hitldrive-verdicts", "v": 1}) + "\n")
        for v in verdicts:
            f.write(json.dumps(v.to_record()) + "\n")
        summary = {
            "summary": True,
            "n_windows": len(verdicts),
            "agreement_rate": rate,
            "mean_sum_r_human": (
                float(np.mean([v.sum_r_human for v in verdicts])) if verdicts else None
            ),
            "mean_sum_r_agent": (
                float(np.mean([v.sum_r_agent for v in verdicts])) if verdicts else None
            ),
        }
        f.write(json.dumps(summary) + "\n")
