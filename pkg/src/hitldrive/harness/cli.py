"""Command-line entry point.

Exit codes: 0 success, 2 invalid configuration/input (field-level message),
3 runtime fault (checkpoint preserved where possible).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from ..epm import EpmConfigurationError
from ..intervene import ReplayDivergence
from ..nets import TrainingFault
from ..replay import StorageError
from ..track import ConfigurationError, SimulatorFault, TrackSpec, make_track
from .config import ConfigError, RunConfig
from . import runs as R

EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _load_run_config(args) -> RunConfig:
    if not args.config:
        raise ConfigError("config", "--config is required")
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out = args.out
    return cfg


def _resolve_track(spec: str, seed: int) -> TrackSpec:
    if spec.endswith(".json") or "/" in spec:
        return TrackSpec.load(spec)
    return make_track(spec, seed=seed)


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    run_dir = R.execute_train(cfg)
    summary = R.load_summary(run_dir)
    print(f"run complete: {run_dir}")
    print(json.dumps(summary, indent=1, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    track = _resolve_track(args.track, args.track_seed)
    report = R.evaluate_checkpoint(
        args.checkpoint, track, episodes=args.episodes, seed=args.seed or 0,
        success_threshold=args.success_threshold,
        max_episode_steps=args.max_episode_steps,
    )
    line = (f"{report.env_id}: mean {report.mean:.2f} +/- {report.std:.2f} "
            f"over {report.episodes} episodes "
            f"({report.success_count} success / {report.crash_count} crash)")
    print(line)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(
            json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
        print(f"report written to {args.out}")
    return 0


def cmd_compare(args) -> int:
    result = R.compare_runs(args.run_dirs, args.out)
    print(f"compared {len(args.run_dirs)} runs "
          f"({len(result['labels'])} configurations) -> {args.out}")
    for row in result["rows"]:
        print(f"  {row['label']}: final {row['final_mean']:.2f} "
              f"+/- {row['final_std']:.2f} ({row['n_seeds']} seeds)")
    return 0


def cmd_serve(args) -> int:
    from .server import SessionServer

    cfg = _load_run_config(args)
    cfg.intervention.source = "live"
    server = SessionServer(cfg, port=args.port, rate=args.rate, host=args.host)
    print(f"serving live session on ws://{args.host}:{args.port} "
          f"(rate {args.rate} steps/s)")
    server.run()
    print("session complete")
    return 0


def cmd_epm(args) -> int:
    if args.config:
        cfg = RunConfig.load(args.config)
        epm_cfg = cfg.epm.epm_config(seed=args.seed if args.seed is not None else cfg.seed)
    else:
        cfg = RunConfig()
        epm_cfg = cfg.epm.epm_config(seed=args.seed or 0)
    if args.epm_cmd == "train":
        metrics = R.epm_train_from_store(args.store, epm_cfg, args.out)
        print(json.dumps(metrics, indent=1, sort_keys=True))
        return 0
    epm_cfg.oracle_mode = args.oracle or epm_cfg.oracle_mode
    oracle_track = None
    reward_cfg = None
    if epm_cfg.oracle_mode:
        oracle_track = cfg.env.track.build()
        reward_cfg = cfg.env.reward_config()
    n, rate = R.epm_eval_from_store(
        args.store, args.checkpoint, epm_cfg, args.out,
        models_dir=args.models, oracle_track=oracle_track, reward_cfg=reward_cfg,
    )
    if rate is None:
        print(f"no intervention windows in store; verdicts not applicable ({n} windows)")
    else:
        print(f"{n} intervention windows, agreement rate {rate:.3f}")
    print(f"verdicts written to {args.out}")
    return 0


def cmd_sweep(args) -> int:
    spec_path = Path(args.config)
    if not spec_path.exists():
        raise ConfigError("sweep.config", f"file not found: {spec_path}")
    spec = json.loads(spec_path.read_text())
    if "base_path" in spec:
        spec["base"] = json.loads(Path(spec["base_path"]).read_text())
    out = R.run_sweep(spec, args.out)
    print(f"sweep complete -> {out / 'sweep.jsonl'}")
    return 0


def cmd_plot(args) -> int:
    written = R.plot_runs(args.run_dirs, args.out)
    for w in written:
        print(w)
    return 0


def cmd_demo_collect(args) -> int:
    from ..baselines import collect_demonstrations
    from ..intervene import ScriptedExpert

    cfg = _load_run_config(args)
    env = R.build_env(cfg)
    expert = ScriptedExpert(env.track, lookahead=cfg.intervention.lookahead)
    n = args.n or cfg.baseline.demo_size
    demos = collect_demonstrations(expert, env, n, seed=cfg.seed)
    out = args.out or "demos.jsonl"
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    demos.save(out)
    crashes = sum(t.crashed for t in demos.transitions)
    print(f"collected {len(demos)} demonstrations ({crashes} crash transitions) -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="path to a JSON run configuration")
    common.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    common.add_argument("--out", default=None, help="override the output path")

    p = argparse.ArgumentParser(
        prog="hitldrive",
        description="Human-in-the-loop RL lab on a 2D waypoint driving simulator",
    )
    sub = p.add_subparsers(dest="cmd", required=True)

    sp = sub.add_parser("train", parents=[common], help="run one training job")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", parents=[common],
                        help="greedy evaluation of a checkpoint on a track")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--track", default="loop",
                    help="generator name (straight|loop|s-curve|coastal-like) or track file")
    sp.add_argument("--track-seed", type=int, default=0)
    sp.add_argument("--episodes", type=int, default=100)
    sp.add_argument("--success-threshold", type=float, default=300.0)
    sp.add_argument("--max-episode-steps", type=int, default=2000)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("compare", parents=[common],
                        help="align several runs on one step grid")
    sp.add_argument("run_dirs", nargs="+")
    sp.set_defaults(fn=cmd_compare, out="compare_out")

    sp = sub.add_parser("serve", parents=[common],
                        help="live training session over a websocket")
    sp.add_argument("--port", type=int, default=8765)
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--rate", type=float, default=10.0,
                    help="paced environment steps per second")
    sp.set_defaults(fn=cmd_serve)

    sp = sub.add_parser("epm", parents=[common],
                        help="intervention-assessment models and verdicts")
    sp.add_argument("epm_cmd", choices=["train", "eval"])
    sp.add_argument("--store", required=True, help="evaluative store file")
    sp.add_argument("--models", default=None, help="directory of trained models")
    sp.add_argument("--checkpoint", default=None, help="Q-net checkpoint (eval)")
    sp.add_argument("--oracle", action="store_true",
                    help="use the true simulator instead of learned models")
    sp.set_defaults(fn=cmd_epm)

    sp = sub.add_parser("sweep", parents=[common],
                        help="expand and run a parameter grid")
    sp.set_defaults(fn=cmd_sweep, out="sweep_out")

    sp = sub.add_parser("plot", parents=[common],
                        help="emit plain-text reward series for plotting")
    sp.add_argument("run_dirs", nargs="+")
    sp.set_defaults(fn=cmd_plot, out="plot_out")

    sp = sub.add_parser("demo-collect", parents=[common],
                        help="record scripted-expert demonstrations")
    sp.add_argument("-n", type=int, default=None, help="number of transitions")
    sp.set_defaults(fn=cmd_demo_collect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ConfigurationError, EpmConfigurationError,
            StorageError, FileNotFoundError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (SimulatorFault, TrainingFault, ReplayDivergence) as e:
        print(f"runtime fault: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
