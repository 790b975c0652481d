"""Declarative run configuration: JSON files with namespaced sections.

A persisted config plus its seed fully determines every artifact a run
emits. Unknown keys and type mismatches are reported with their section
path so the CLI can fail with a field-level message (exit code 2).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ..agent import AgentConfig, HumanWeightSchedule
from ..epm import EpmConfig
from ..replay import ReplayConfig
from ..track import RewardConfig, TrackSpec, make_track

AGENT_KINDS = ("iddqn", "ddqn", "bc", "dqfd", "hgdagger")


class ConfigError(ValueError):
    def __init__(self, fieldpath: str, message: str):
        self.fieldpath = fieldpath
        super().__init__(f"{fieldpath}: {message}")


def _take(d: dict, section: str, key: str, default, kinds):
    v = d.get(key, default)
    if v is None:
        return v
    if kinds is bool:
        if not isinstance(v, bool):
            raise ConfigError(f"{section}.{key}", f"expected boolean, got {v!r}")
        return v
    if kinds is int:
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError(f"{section}.{key}", f"expected integer, got {v!r}")
        return v
    if kinds is float:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{section}.{key}", f"expected number, got {v!r}")
        return float(v)
    if kinds is str:
        if not isinstance(v, str):
            raise ConfigError(f"{section}.{key}", f"expected string, got {v!r}")
        return v
    return v


def _reject_unknown(d: dict, section: str, known: set[str]):
    for k in d:
        if k not in known:
            raise ConfigError(f"{section}.{k}", "unknown key")


@dataclass
class TrackConfig:
    generator: str = "loop"
    file: str | None = None
    seed: int = 0
    params: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict, section: str = "env.track") -> "TrackConfig":
        _reject_unknown(d, section, {"generator", "file", "seed", "params"})
        return cls(
            generator=_take(d, section, "generator", "loop", str),
            file=_take(d, section, "file", None, str),
            seed=_take(d, section, "seed", 0, int),
            params=d.get("params", {}),
        )

    def build(self) -> TrackSpec:
        if self.file:
            return TrackSpec.load(self.file)
        return make_track(self.generator, seed=self.seed, **self.params)


@dataclass
class EnvConfig:
    track: TrackConfig = field(default_factory=TrackConfig)
    success_threshold: float = 300.0
    max_episode_steps: int = 2000
    delta: float = 0.2
    beta_pos: float = 0.2
    xi: float = 0.5
    history_len: int = 4

    @classmethod
    def from_dict(cls, d: dict, section: str = "env") -> "EnvConfig":
        _reject_unknown(d, section, {
            "track", "success_threshold", "max_episode_steps", "reward",
        })
        r = d.get("reward", {})
        _reject_unknown(r, f"{section}.reward", {"delta", "beta_pos", "xi", "history_len"})
        return cls(
            track=TrackConfig.from_dict(d.get("track", {}), f"{section}.track"),
            success_threshold=_take(d, section, "success_threshold", 300.0, float),
            max_episode_steps=_take(d, section, "max_episode_steps", 2000, int),
            delta=_take(r, f"{section}.reward", "delta", 0.2, float),
            beta_pos=_take(r, f"{section}.reward", "beta_pos", 0.2, float),
            xi=_take(r, f"{section}.reward", "xi", 0.5, float),
            history_len=_take(r, f"{section}.reward", "history_len", 4, int),
        )

    def reward_config(self) -> RewardConfig:
        return RewardConfig(
            delta=self.delta, beta_pos=self.beta_pos, xi=self.xi,
            history_len=self.history_len,
        )


@dataclass
class AgentSection:
    gamma: float = 0.99
    batch: int = 32
    train_every: int = 4
    tau: float = 0.0075
    lr: float = 0.00025
    epsilon_init: float = 1.0
    epsilon_decay: float = 1e-4
    epsilon_floor: float = 0.05
    learn_start: int = 500
    hidden: list[int] = field(default_factory=lambda: [128, 128])
    strict_paper_blend: bool = True
    lambda_mode: str = "decay"  # "decay" | "constant"
    lambda_value: float = 0.0  # used when mode == constant
    lambda_decay_steps: int = 40000

    @classmethod
    def from_dict(cls, d: dict, section: str = "agent") -> "AgentSection":
        _reject_unknown(d, section, {
            "gamma", "batch", "train_every", "tau", "lr", "epsilon_init",
            "epsilon_decay", "epsilon_floor", "learn_start", "hidden",
            "strict_paper_blend", "lambda_mode", "lambda_value",
            "lambda_decay_steps",
        })
        out = cls(
            gamma=_take(d, section, "gamma", 0.99, float),
            batch=_take(d, section, "batch", 32, int),
            train_every=_take(d, section, "train_every", 4, int),
            tau=_take(d, section, "tau", 0.0075, float),
            lr=_take(d, section, "lr", 0.00025, float),
            epsilon_init=_take(d, section, "epsilon_init", 1.0, float),
            epsilon_decay=_take(d, section, "epsilon_decay", 1e-4, float),
            epsilon_floor=_take(d, section, "epsilon_floor", 0.05, float),
            learn_start=_take(d, section, "learn_start", 500, int),
            hidden=d.get("hidden", [128, 128]),
            strict_paper_blend=_take(d, section, "strict_paper_blend", True, bool),
            lambda_mode=_take(d, section, "lambda_mode", "decay", str),
            lambda_value=_take(d, section, "lambda_value", 0.0, float),
            lambda_decay_steps=_take(d, section, "lambda_decay_steps", 40000, int),
        )
        if out.lambda_mode not in ("decay", "constant"):
            raise ConfigError(f"{section}.lambda_mode",
                              f"must be 'decay' or 'constant', got {out.lambda_mode!r}")
        return out

    def schedule(self) -> HumanWeightSchedule:
        if self.lambda_mode == "constant":
            return HumanWeightSchedule.constant_of(self.lambda_value)
        return HumanWeightSchedule(mode="decay", over_steps=self.lambda_decay_steps)

    def agent_config(self, seed: int) -> AgentConfig:
        return AgentConfig(
            gamma=self.gamma, batch=self.batch, train_every=self.train_every,
            tau=self.tau, lr=self.lr, epsilon_init=self.epsilon_init,
            epsilon_decay=self.epsilon_decay, epsilon_floor=self.epsilon_floor,
            learn_start=self.learn_start, hidden=tuple(self.hidden),
            strict_paper_blend=self.strict_paper_blend,
            schedule=self.schedule(), seed=seed,
        )


@dataclass
class ReplaySection:
    capacity: int = 50000
    alpha: float = 0.9
    beta_is: float = 0.4
    epsilon_priority: float = 1e-3
    intervened_boost: float = 1.0

    @classmethod
    def from_dict(cls, d: dict, section: str = "replay") -> "ReplaySection":
        _reject_unknown(d, section, {
            "capacity", "alpha", "beta_is", "epsilon_priority", "intervened_boost",
        })
        return cls(
            capacity=_take(d, section, "capacity", 50000, int),
            alpha=_take(d, section, "alpha", 0.9, float),
            beta_is=_take(d, section, "beta_is", 0.4, float),
            epsilon_priority=_take(d, section, "epsilon_priority", 1e-3, float),
            intervened_boost=_take(d, section, "intervened_boost", 1.0, float),
        )

    def replay_config(self) -> ReplayConfig:
        return ReplayConfig(
            capacity=self.capacity, alpha=self.alpha, beta_is=self.beta_is,
            epsilon_priority=self.epsilon_priority,
            intervened_boost=self.intervened_boost,
        )


@dataclass
class InterventionSection:
    h_freq: int = 2000
    h_steps: int = 200
    h_limit: int = 5
    source: str = "scripted"  # scripted | trace | live | none
    lookahead: float = 6.0
    trace_path: str | None = None

    @classmethod
    def from_dict(cls, d: dict, section: str = "intervention") -> "InterventionSection":
        _reject_unknown(d, section, {
            "h_freq", "h_steps", "h_limit", "source", "lookahead", "trace_path",
        })
        out = cls(
            h_freq=_take(d, section, "h_freq", 2000, int),
            h_steps=_take(d, section, "h_steps", 200, int),
            h_limit=_take(d, section, "h_limit", 5, int),
            source=_take(d, section, "source", "scripted", str),
            lookahead=_take(d, section, "lookahead", 6.0, float),
            trace_path=_take(d, section, "trace_path", None, str),
        )
        if out.source not in ("scripted", "trace", "live", "none"):
            raise ConfigError(f"{section}.source", f"unknown source {out.source!r}")
        if out.source == "trace" and not out.trace_path:
            raise ConfigError(f"{section}.trace_path", "required when source='trace'")
        return out


@dataclass
class DqfdSection:
    margin: float = 0.8
    lambda_e: float = 1.0
    pretrain_steps: int = 4000

    @classmethod
    def from_dict(cls, d: dict, section: str = "baseline.dqfd") -> "DqfdSection":
        _reject_unknown(d, section, {"margin", "lambda_e", "pretrain_steps"})
        out = cls(
            margin=_take(d, section, "margin", 0.8, float),
            lambda_e=_take(d, section, "lambda_e", 1.0, float),
            pretrain_steps=_take(d, section, "pretrain_steps", 4000, int),
        )
        if out.margin <= 0:
            raise ConfigError(f"{section}.margin", "must be > 0")
        return out


@dataclass
class HgDaggerSection:
    iterations: int = 4
    add_per_iter: int = 300
    takeover_frac: float = 0.5

    @classmethod
    def from_dict(cls, d: dict, section: str = "baseline.hgdagger") -> "HgDaggerSection":
        _reject_unknown(d, section, {"iterations", "add_per_iter", "takeover_frac"})
        return cls(
            iterations=_take(d, section, "iterations", 4, int),
            add_per_iter=_take(d, section, "add_per_iter", 300, int),
            takeover_frac=_take(d, section, "takeover_frac", 0.5, float),
        )


@dataclass
class BaselineSection:
    demo_size: int = 3000
    bc_epochs: int = 40
    dqfd: DqfdSection = field(default_factory=DqfdSection)
    hgdagger: HgDaggerSection = field(default_factory=HgDaggerSection)

    @classmethod
    def from_dict(cls, d: dict, section: str = "baseline") -> "BaselineSection":
        _reject_unknown(d, section, {"demo_size", "bc_epochs", "dqfd", "hgdagger"})
        return cls(
            demo_size=_take(d, section, "demo_size", 3000, int),
            bc_epochs=_take(d, section, "bc_epochs", 40, int),
            dqfd=DqfdSection.from_dict(d.get("dqfd", {})),
            hgdagger=HgDaggerSection.from_dict(d.get("hgdagger", {})),
        )


@dataclass
class EpmSection:
    horizon: int = 4
    lr_predictive: float = 0.0002
    lr_classifier: float = 0.0005
    batch: int = 64
    dropout: float = 0.4
    input_noise: float = 0.1
    hidden: list[int] = field(default_factory=lambda: [128, 128])
    epochs_predictive: int = 30
    epochs_classifier: int = 20
    oracle_mode: bool = False

    @classmethod
    def from_dict(cls, d: dict, section: str = "epm") -> "EpmSection":
        _reject_unknown(d, section, {
            "horizon", "lr_predictive", "lr_classifier", "batch", "dropout",
            "input_noise", "hidden", "epochs_predictive", "epochs_classifier",
            "oracle_mode",
        })
        return cls(
            horizon=_take(d, section, "horizon", 4, int),
            lr_predictive=_take(d, section, "lr_predictive", 0.0002, float),
            lr_classifier=_take(d, section, "lr_classifier", 0.0005, float),
            batch=_take(d, section, "batch", 64, int),
            dropout=_take(d, section, "dropout", 0.4, float),
            input_noise=_take(d, section, "input_noise", 0.1, float),
            hidden=d.get("hidden", [128, 128]),
            epochs_predictive=_take(d, section, "epochs_predictive", 30, int),
            epochs_classifier=_take(d, section, "epochs_classifier", 20, int),
            oracle_mode=_take(d, section, "oracle_mode", False, bool),
        )

    def epm_config(self, seed: int = 0) -> EpmConfig:
        return EpmConfig(
            horizon=self.horizon, lr_predictive=self.lr_predictive,
            lr_classifier=self.lr_classifier, batch=self.batch,
            dropout=self.dropout, input_noise=self.input_noise,
            hidden=tuple(self.hidden),
            epochs_predictive=self.epochs_predictive,
            epochs_classifier=self.epochs_classifier,
            oracle_mode=self.oracle_mode, seed=seed,
        )


@dataclass
class RunConfig:
    kind: str = "iddqn"
    seed: int = 0
    total_steps: int = 50000
    out: str = "runs/run"
    label: str = ""
    checkpoint_every: int = 0
    env: EnvConfig = field(default_factory=EnvConfig)
    agent: AgentSection = field(default_factory=AgentSection)
    replay: ReplaySection = field(default_factory=ReplaySection)
    intervention: InterventionSection = field(default_factory=InterventionSection)
    baseline: BaselineSection = field(default_factory=BaselineSection)
    epm: EpmSection = field(default_factory=EpmSection)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        _reject_unknown(d, "config", {
            "run", "env", "agent", "replay", "intervention", "baseline", "epm",
        })
        run = d.get("run", {})
        _reject_unknown(run, "run", {
            "kind", "seed", "total_steps", "out", "label", "checkpoint_every",
        })
        kind = _take(run, "run", "kind", "iddqn", str)
        if kind not in AGENT_KINDS:
            raise ConfigError("run.kind", f"must be one of {AGENT_KINDS}, got {kind!r}")
        cfg = cls(
            kind=kind,
            seed=_take(run, "run", "seed", 0, int),
            total_steps=_take(run, "run", "total_steps", 50000, int),
            out=_take(run, "run", "out", "runs/run", str),
            label=_take(run, "run", "label", "", str),
            checkpoint_every=_take(run, "run", "checkpoint_every", 0, int),
            env=EnvConfig.from_dict(d.get("env", {})),
            agent=AgentSection.from_dict(d.get("agent", {})),
            replay=ReplaySection.from_dict(d.get("replay", {})),
            intervention=InterventionSection.from_dict(d.get("intervention", {})),
            baseline=BaselineSection.from_dict(d.get("baseline", {})),
            epm=EpmSection.from_dict(d.get("epm", {})),
        )
        if not cfg.label:
            cfg.label = default_label(cfg)
        return cfg

    def to_dict(self) -> dict:
        d = {
            "run": {
                "kind": self.kind, "seed": self.seed,
                "total_steps": self.total_steps, "out": self.out,
                "label": self.label, "checkpoint_every": self.checkpoint_every,
            },
            "env": {
                "track": asdict(self.env.track),
                "success_threshold": self.env.success_threshold,
                "max_episode_steps": self.env.max_episode_steps,
                "reward": {
                    "delta": self.env.delta, "beta_pos": self.env.beta_pos,
                    "xi": self.env.xi, "history_len": self.env.history_len,
                },
            },
            "agent": asdict(self.agent),
            "replay": asdict(self.replay),
            "intervention": asdict(self.intervention),
            "baseline": asdict(self.baseline),
            "epm": asdict(self.epm),
        }
        return d

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        if not p.exists():
            raise ConfigError("config", f"file not found: {p}")
        try:
            d = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError("config", f"invalid JSON in {p}: {e}") from e
        return cls.from_dict(d)


def default_label(cfg: RunConfig) -> str:
    if cfg.kind == "iddqn":
        lam = (
            "decay" if cfg.agent.lambda_mode == "decay"
            else f"{cfg.agent.lambda_value:g}"
        )
        return f"iddqn-lh{lam}"
    return cfg.kind
