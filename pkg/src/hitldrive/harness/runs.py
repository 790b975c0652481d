"""Experiment orchestration: training dispatch, evaluation, comparison,
sweeps, and plot-series emission. Every command is reproducible: the
resolved config plus seed determines each emitted artifact byte for byte,
so no wall-clock values ever enter these files.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..agent import RunReport, TrainerHooks, greedy_rollout, run_training
from ..baselines import (
    DemoDataset,
    DqfdConfig,
    bc_train,
    collect_demonstrations,
    dqfd_run,
    hg_dagger_run,
    pair_from_policy,
)
from ..epm import (
    CrashClassifier,
    EpmConfig,
    LearnedModels,
    OracleModels,
    PredictiveModel,
    evaluate_interventions,
    save_verdicts,
    train_classifier,
    train_predictive,
)
from ..intervene import (
    InterventionSchedule,
    LiveSource,
    NullSource,
    ScriptedExpert,
    TraceRecorder,
    TraceSource,
)
from ..nets import DuelingNet, DuelingNetPair, load_pair, save_pair
from ..replay import EvaluativeStore, PriorityBuffer
from ..track import DrivingEnv, EpisodeStatus, TrackSpec, make_track
from .config import ConfigError, RunConfig

METRICS_FILE = "metrics.jsonl"
STORE_FILE = "evaluative.jsonl"
TRACE_FILE = "trace.jsonl"
CHECKPOINT_FILE = "checkpoint.bin"
SUMMARY_FILE = "summary.json"
CONFIG_FILE = "config.json"


def build_env(cfg: RunConfig) -> DrivingEnv:
    track = cfg.env.track.build()
    return DrivingEnv(
        track,
        reward_cfg=cfg.env.reward_config(),
        success_threshold=cfg.env.success_threshold,
        max_episode_steps=cfg.env.max_episode_steps,
    )


def build_source(cfg: RunConfig, track: TrackSpec, live: LiveSource | None = None):
    s = cfg.intervention
    if s.source == "none":
        return NullSource()
    if s.source == "scripted":
        return ScriptedExpert(track, lookahead=s.lookahead)
    if s.source == "trace":
        return TraceSource(s.trace_path)
    if s.source == "live":
        return live if live is not None else NullSource()
    raise ConfigError("intervention.source", f"unknown source {s.source!r}")


class _JsonlWriter:
    def __init__(self, path: Path):
        self._f = open(path, "w")

    def write(self, record: dict) -> None:
        self._f.write(json.dumps(record) + "\n")

    def close(self) -> None:
        self._f.close()


@dataclass
class EvalReport:
    env_id: str
    episodes: int
    rewards: list[float]
    mean: float
    std: float
    success_count: int
    crash_count: int

    @classmethod
    def from_rewards(cls, env_id: str, rewards: list[float],
                     successes: int, crashes: int) -> "EvalReport":
        arr = np.asarray(rewards, dtype=np.float64)
        return cls(
            env_id=env_id,
            episodes=len(rewards),
            rewards=[float(v) for v in rewards],
            mean=float(arr.mean()),
            std=float(arr.std()),
            success_count=successes,
            crash_count=crashes,
        )

    def to_dict(self) -> dict:
        return {
            "env_id": self.env_id, "episodes": self.episodes,
            "mean": self.mean, "std": self.std,
            "success_count": self.success_count,
            "crash_count": self.crash_count, "rewards": self.rewards,
        }


def execute_train(cfg: RunConfig, live: LiveSource | None = None,
                  hooks_extra: TrainerHooks | None = None) -> Path:
    """Run one configured training job and write its artifact directory."""
    run_dir = Path(cfg.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(run_dir / CONFIG_FILE)
    if cfg.kind in ("iddqn", "ddqn"):
        report = _train_rl(cfg, run_dir, live=live, hooks_extra=hooks_extra)
        summary = _rl_summary(cfg, report)
    elif cfg.kind == "bc":
        summary = _train_bc(cfg, run_dir)
    elif cfg.kind == "dqfd":
        summary = _train_dqfd(cfg, run_dir)
    elif cfg.kind == "hgdagger":
        summary = _train_hgdagger(cfg, run_dir)
    else:
        raise ConfigError("run.kind", f"unknown kind {cfg.kind!r}")
    (run_dir / SUMMARY_FILE).write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return run_dir


def _rl_summary(cfg: RunConfig, report: RunReport) -> dict:
    rewards = report.rewards()
    tail = rewards[max(len(rewards) - max(len(rewards) // 5, 1), 0):]
    return {
        "label": cfg.label,
        "kind": cfg.kind,
        "seed": cfg.seed,
        "total_steps": report.total_steps,
        "episodes": len(report.episodes),
        "interventions_used": report.interventions_used,
        "intervened_steps": report.intervened_steps,
        "final_epsilon": report.final_epsilon,
        "final_lambda": report.final_lambda,
        "mean_reward": float(np.mean(rewards)) if rewards else 0.0,
        "tail_mean_reward": float(np.mean(tail)) if tail else 0.0,
    }


def _train_rl(cfg: RunConfig, run_dir: Path, live: LiveSource | None,
              hooks_extra: TrainerHooks | None) -> RunReport:
    env = build_env(cfg)
    agent_cfg = cfg.agent.agent_config(cfg.seed)
    if cfg.kind == "ddqn":
        plan = "vanilla"
        source = NullSource()
    else:
        plan = "iddqn"
        source = build_source(cfg, env.track, live=live)
    recorder = TraceRecorder(source, tag=cfg.intervention.source)
    schedule = InterventionSchedule(
        h_freq=cfg.intervention.h_freq,
        h_steps=cfg.intervention.h_steps,
        h_limit=cfg.intervention.h_limit,
    )
    pair = DuelingNetPair(hidden=agent_cfg.hidden, lr=agent_cfg.lr, seed=cfg.seed)
    buffer = PriorityBuffer(cfg.replay.replay_config())
    store = EvaluativeStore()
    metrics = _JsonlWriter(run_dir / METRICS_FILE)

    base = hooks_extra or TrainerHooks()
    prev_on_episode = base.on_episode

    def on_episode(rec: dict) -> None:
        metrics.write(rec)
        if prev_on_episode is not None:
            prev_on_episode(rec)

    def on_checkpoint(step: int, p: DuelingNetPair) -> None:
        save_pair(p, run_dir / f"checkpoint_step{step}.bin")

    hooks = TrainerHooks(
        on_episode=on_episode,
        on_frame=base.on_frame,
        on_checkpoint=on_checkpoint if cfg.checkpoint_every else None,
        checkpoint_every=cfg.checkpoint_every,
        pause_check=base.pause_check,
        stop_check=base.stop_check,
        steps_per_second=base.steps_per_second,
    )
    try:
        report = run_training(
            env, pair, buffer, store, agent_cfg, cfg.total_steps,
            schedule=schedule, source=recorder, plan=plan, hooks=hooks,
        )
    except BaseException:
        # preserve what we can for post-mortem before re-raising
        save_pair(pair, run_dir / CHECKPOINT_FILE)
        store.save(run_dir / STORE_FILE)
        metrics.close()
        raise
    if isinstance(source, TraceSource):
        source.verify_exhausted()
    metrics.close()
    store.save(run_dir / STORE_FILE)
    recorder.save(run_dir / TRACE_FILE)
    save_pair(pair, run_dir / CHECKPOINT_FILE)
    return report


def _train_bc(cfg: RunConfig, run_dir: Path) -> dict:
    env = build_env(cfg)
    expert = ScriptedExpert(env.track, lookahead=cfg.intervention.lookahead)
    demos = collect_demonstrations(expert, env, cfg.baseline.demo_size, seed=cfg.seed)
    demos.save(run_dir / "demos.jsonl")
    net = DuelingNet(hidden=tuple(cfg.agent.hidden), seed=cfg.seed * 977 + 1)
    stats = bc_train(demos, net, epochs=cfg.baseline.bc_epochs,
                     batch=cfg.agent.batch, lr=cfg.agent.lr, seed=cfg.seed)
    save_pair(pair_from_policy(net, lr=cfg.agent.lr), run_dir / CHECKPOINT_FILE)
    metrics = _JsonlWriter(run_dir / METRICS_FILE)
    metrics.write({"phase": "bc", **stats})
    metrics.close()
    return {"label": cfg.label, "kind": cfg.kind, "seed": cfg.seed, **stats}


def _train_dqfd(cfg: RunConfig, run_dir: Path) -> dict:
    env = build_env(cfg)
    expert = ScriptedExpert(env.track, lookahead=cfg.intervention.lookahead)
    demos = collect_demonstrations(expert, env, cfg.baseline.demo_size, seed=cfg.seed)
    demos.save(run_dir / "demos.jsonl")
    metrics = _JsonlWriter(run_dir / METRICS_FILE)
    hooks = TrainerHooks(on_episode=metrics.write)
    store = EvaluativeStore()
    dq = cfg.baseline.dqfd
    pair, pre_stats, report = dqfd_run(
        demos,
        DqfdConfig(margin=dq.margin, lambda_e=dq.lambda_e,
                   pretrain_steps=dq.pretrain_steps),
        env,
        cfg.agent.agent_config(cfg.seed),
        replay_cfg=cfg.replay.replay_config(),
        total_steps=cfg.total_steps,
        evaluative=store,
        hooks=hooks,
    )
    metrics.close()
    store.save(run_dir / STORE_FILE)
    save_pair(pair, run_dir / CHECKPOINT_FILE)
    summary = _rl_summary(cfg, report)
    summary.update({f"pretrain_{k}": v for k, v in pre_stats.items()})
    return summary


def _train_hgdagger(cfg: RunConfig, run_dir: Path) -> dict:
    env = build_env(cfg)
    expert = ScriptedExpert(env.track, lookahead=cfg.intervention.lookahead)
    demos = collect_demonstrations(expert, env, cfg.baseline.demo_size, seed=cfg.seed)
    demos.save(run_dir / "demos.jsonl")
    hg = cfg.baseline.hgdagger
    net, info = hg_dagger_run(
        demos, expert, env,
        iterations=hg.iterations, add_per_iter=hg.add_per_iter,
        takeover_frac=hg.takeover_frac, bc_epochs=cfg.baseline.bc_epochs,
        batch=cfg.agent.batch, lr=cfg.agent.lr, seed=cfg.seed,
        hidden=tuple(cfg.agent.hidden),
    )
    save_pair(pair_from_policy(net, lr=cfg.agent.lr), run_dir / CHECKPOINT_FILE)
    metrics = _JsonlWriter(run_dir / METRICS_FILE)
    for r in info["rounds"]:
        metrics.write(r)
    metrics.close()
    return {"label": cfg.label, "kind": cfg.kind, "seed": cfg.seed, **info}


def evaluate_checkpoint(
    checkpoint_path,
    track: TrackSpec,
    episodes: int = 100,
    seed: int = 0,
    success_threshold: float = 300.0,
    max_episode_steps: int = 2000,
) -> EvalReport:
    """Greedy (epsilon=0) rollouts with independent per-episode seeds."""
    try:
        pair = load_pair(checkpoint_path)
    except (ValueError, KeyError, OSError) as e:
        raise ConfigError("eval.checkpoint", f"cannot load {checkpoint_path}: {e}") from e
    env = DrivingEnv(track, success_threshold=success_threshold,
                     max_episode_steps=max_episode_steps)
    rewards = []
    successes = 0
    crashes = 0
    for ep in range(episodes):
        rng = np.random.default_rng(np.random.SeedSequence([seed, ep]))
        total, _steps, status = greedy_rollout(env, pair.q1, rng)
        rewards.append(total)
        successes += int(status is EpisodeStatus.SUCCESS)
        crashes += int(status is EpisodeStatus.FAILURE)
    return EvalReport.from_rewards(track.name, rewards, successes, crashes)


def load_metrics(run_dir) -> list[dict]:
    path = Path(run_dir) / METRICS_FILE
    if not path.exists():
        raise ConfigError("compare.run_dir", f"no {METRICS_FILE} in {run_dir}")
    return [json.loads(line) for line in path.read_text().splitlines() if line]


def load_summary(run_dir) -> dict:
    path = Path(run_dir) / SUMMARY_FILE
    if not path.exists():
        raise ConfigError("compare.run_dir", f"no {SUMMARY_FILE} in {run_dir}")
    return json.loads(path.read_text())


def compare_runs(run_dirs: list, out_dir, grid_points: int = 100) -> dict:
    """Align episodic rewards from several runs on one step grid.

    Runs sharing a label are treated as seeds of one configuration; their
    reward curves are linearly interpolated onto a common grid (documented
    resampling) and reduced to mean and std series.
    """
    if len(run_dirs) < 2:
        raise ConfigError("compare", "need at least 2 run directories")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    groups: dict[str, list[list[dict]]] = {}
    for rd in run_dirs:
        label = load_summary(rd).get("label", Path(rd).name)
        groups.setdefault(label, []).append(load_metrics(rd))

    max_step = min(
        max(rec["global_step"] for rec in metrics)
        for series in groups.values()
        for metrics in series
        if metrics
    )
    grid = np.linspace(0, max_step, grid_points)
    table_rows = []
    series_out = {}
    for label, series in sorted(groups.items()):
        curves = []
        for metrics in series:
            steps = np.array([rec["global_step"] for rec in metrics], dtype=np.float64)
            rew = np.array([rec["cumulative_reward"] for rec in metrics], dtype=np.float64)
            curves.append(np.interp(grid, steps, rew))
        curves = np.stack(curves)
        mean = curves.mean(axis=0)
        std = curves.std(axis=0)
        series_out[label] = (mean, std)
        path = out / f"series_{label}.tsv"
        with open(path, "w") as f:
            f.write("step\tmean_reward\tstd_reward\tn_seeds\n")
            for g, m, s in zip(grid, mean, std):
                f.write(f"{g:.1f}\t{float(m)!r}\t{float(s)!r}\t{len(series)}\n")
        table_rows.append({
            "label": label, "n_seeds": len(series),
            "final_mean": float(mean[-1]), "final_std": float(std[-1]),
        })
    with open(out / "compare.tsv", "w") as f:
        f.write("label\tn_seeds\tfinal_mean\tfinal_std\n")
        for row in table_rows:
            f.write(f"{row['label']}\t{row['n_seeds']}\t"
                    f"{row['final_mean']!r}\t{row['final_std']!r}\n")
    return {"labels": sorted(groups), "rows": table_rows,
            "grid_max_step": float(max_step)}


def plot_runs(run_dirs: list, out_dir, window: int = 25) -> list[str]:
    """Emit one plain-text series file per run: step, reward, moving mean."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for rd in run_dirs:
        metrics = load_metrics(rd)
        label = load_summary(rd).get("label", Path(rd).name)
        seed = load_summary(rd).get("seed", 0)
        path = out / f"plot_{label}_s{seed}.tsv"
        rewards = [rec.get("cumulative_reward") for rec in metrics]
        with open(path, "w") as f:
            f.write("global_step\treward\tmoving_mean\n")
            for i, rec in enumerate(metrics):
                if "global_step" not in rec:
                    continue
                lo = max(0, i - window + 1)
                mm = float(np.mean([r for r in rewards[lo:i + 1] if r is not None]))
                f.write(f"{rec['global_step']}\t{float(rec['cumulative_reward'])!r}\t{mm!r}\n")
        written.append(str(path))
    return written


def expand_sweep(spec: dict) -> list[tuple[dict, dict, int]]:
    """Cartesian grid of dotted-key overrides; returns
    (config dict, overrides, seed) cells."""
    if "base" not in spec:
        raise ConfigError("sweep.base", "missing base config")
    grid: dict = spec.get("grid", {})
    if not grid:
        raise ConfigError("sweep.grid", "grid is empty")
    seeds = spec.get("seeds", [0])
    keys = sorted(grid)
    combos: list[dict] = [{}]
    for k in keys:
        vals = grid[k]
        if not isinstance(vals, list) or not vals:
            raise ConfigError(f"sweep.grid.{k}", "must be a non-empty list")
        combos = [{**c, k: v} for c in combos for v in vals]
    cells = []
    for combo in combos:
        for seed in seeds:
            base = json.loads(json.dumps(spec["base"]))
            for dotted, value in combo.items():
                _apply_dotted(base, dotted, value)
            cells.append((base, combo, seed))
    return cells


def _apply_dotted(d: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    cur = d
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value


def run_sweep(spec: dict, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells = expand_sweep(spec)
    rows = []
    for i, (base, combo, seed) in enumerate(cells):
        base.setdefault("run", {})
        base["run"]["seed"] = seed
        base["run"]["out"] = str(out / f"cell{i:03d}")
        cfg = RunConfig.from_dict(base)
        run_dir = execute_train(cfg)
        summary = load_summary(run_dir)
        rows.append({"cell": i, "overrides": combo, "seed": seed,
                     "out": str(run_dir), "summary": summary})
    with open(out / "sweep.jsonl", "w") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")
    return out


def epm_train_from_store(store_path, cfg: EpmConfig, out_dir) -> dict:
    store = EvaluativeStore.load(store_path)
    transitions = store.snapshot()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    predictive, pred_metrics = train_predictive(transitions, cfg)
    classifier, cls_metrics = train_classifier(transitions, cfg)
    predictive.save(out / "predictive.bin")
    classifier.save(out / "classifier.bin")
    metrics = {"predictive": pred_metrics, "classifier": cls_metrics,
               "n_transitions": len(transitions)}
    (out / "epm_metrics.json").write_text(json.dumps(metrics, indent=1, sort_keys=True) + "\n")
    return metrics


def epm_eval_from_store(
    store_path, checkpoint_path, cfg: EpmConfig, out_path,
    models_dir=None, oracle_track: TrackSpec | None = None,
    reward_cfg=None,
) -> tuple[int, float | None]:
    store = EvaluativeStore.load(store_path)
    pair = load_pair(checkpoint_path)
    if cfg.oracle_mode:
        if oracle_track is None:
            raise ConfigError("epm.oracle_mode", "oracle mode needs a track")
        models = OracleModels(oracle_track, reward_cfg) if reward_cfg else OracleModels(oracle_track)
    else:
        if models_dir is None:
            raise ConfigError("epm.models", "need --models dir (or oracle mode)")
        md = Path(models_dir)
        models = LearnedModels(
            predictive=PredictiveModel.load(md / "predictive.bin", cfg),
            classifier=CrashClassifier.load(md / "classifier.bin", cfg),
        )
    verdicts, rate = evaluate_interventions(store, pair.q1, models, cfg)
    save_verdicts(out_path, verdicts, rate)
    return len(verdicts), rate
