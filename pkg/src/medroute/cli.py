"""Operator surface: pool building, training, diagnosis runs, evaluation,
gradient checks, and synthetic-world generation.

Exit codes: 0 success, 1 runtime failure, 2 usage/config error. Diagnostics
go to stderr; one-line summaries go to stdout; every machine-readable
artifact goes to a file. Defaults are desk scale (model dim 64, small pools,
synthetic worlds); the full-scale recipe (dim 768, lr 1e-5, pools of 50-60)
stays reachable through flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib  # py >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from . import backends, eval as eval_mod, orchestrator, rl, router, synthclinic
from .backends import BackendConfig, ChatBackend, record_replay
from .core import DatasetError, load_dataset, SpecialistPool
from .embed import EmbedConfig
from .orchestrator import EpisodeConfig, EpisodeError, LiveEnvironment, log_trajectory
from .router import RouterConfig, init_router_params, load_checkpoint, save_checkpoint
from .rl import TrainConfig
from .synthclinic import SynthEnvironment, SynthWorld

logger = logging.getLogger("medroute")


class UsageError(ValueError):
    pass


def _err(msg: str) -> None:
    print(f"medroute: {msg}", file=sys.stderr)


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {p}")
    with p.open("rb") as fh:
        return tomllib.load(fh)


def _pick(args_value, file_cfg: dict, key: str, default):
    """Merge precedence: CLI flag > config file > default."""
    if args_value is not None:
        return args_value
    if key in file_cfg:
        return file_cfg[key]
    return default


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _build_backend(args, file_cfg: dict):
    cfg = BackendConfig(
        base_url=_pick(args.base_url, file_cfg, "base_url", BackendConfig.base_url),
        model_name=_pick(args.model, file_cfg, "model_name", BackendConfig.model_name),
        api_key_env=_pick(args.api_key_env, file_cfg, "api_key_env", BackendConfig.api_key_env),
        temperature=_pick(args.backend_temperature, file_cfg, "backend_temperature", 0.7),
    )
    if getattr(args, "replay", None):
        return record_replay("replay", _require_file(args.replay, "replay store"), cfg=cfg)
    if getattr(args, "record", None):
        return record_replay("record", args.record, backend=ChatBackend(cfg=cfg))
    return ChatBackend(cfg=cfg)


def _add_backend_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--base-url", dest="base_url", help="chat-completions base URL")
    p.add_argument("--model", help="backend model name")
    p.add_argument("--api-key-env", dest="api_key_env", help="env var holding the API key")
    p.add_argument("--backend-temperature", type=float, dest="backend_temperature")
    p.add_argument("--record", metavar="STORE", help="record responses into a JSONL store")
    p.add_argument("--replay", metavar="STORE", help="replay responses from a JSONL store")


def _load_world_or_dataset(args) -> tuple[list, SpecialistPool | None, SynthWorld | None]:
    if getattr(args, "synth", None):
        world = SynthWorld.load(_require_file(args.synth, "world file"))
        return list(world.cases), world.pool, world
    if not getattr(args, "dataset", None):
        raise UsageError("either --synth WORLD or --dataset FILE is required")
    cases = load_dataset(_require_file(args.dataset, "dataset"))
    pool = None
    if getattr(args, "pool", None):
        pool = SpecialistPool.load(_require_file(args.pool, "pool file"))
    return cases, pool, None


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    if args.k < 2:
        raise UsageError("--k must be >= 2")
    if args.cases < 1:
        raise UsageError("--cases must be >= 1")
    if not 1 <= args.max_seq <= 3:
        raise UsageError("--max-seq must be in [1, 3]")
    world = synthclinic.generate_world(args.seed, args.k, args.cases, args.max_seq)
    world.save(args.out)
    _err(f"wrote world with {len(world.cases)} cases to {args.out}")
    rng = np.random.default_rng(args.seed)
    mean_reward, acc = synthclinic.random_baseline(
        world, args.baseline_episodes, args.max_steps, rng, gamma=args.gamma
    )
    print(
        f"baseline accuracy={acc:.4f} mean_reward={mean_reward:.4f} "
        f"episodes={args.baseline_episodes} k={args.k}"
    )
    return 0


def cmd_pool(args) -> int:
    file_cfg = _load_config_file(args.config)
    if args.top_k < 1:
        raise UsageError("--top-k must be >= 1")
    cases = load_dataset(_require_file(args.dataset, "dataset"))
    backend = _build_backend(args, file_cfg)
    pool = orchestrator.build_pool([c.question for c in cases], backend, args.top_k)
    pool.save(args.out)
    _err(f"wrote pool of {pool.k} specialists to {args.out}")
    print(f"pool k={pool.k} roles={','.join(s.role_name for s in pool.specialists)}")
    return 0


def _router_config(args, file_cfg: dict, pool_k: int) -> RouterConfig:
    k_max = _pick(args.k_max, file_cfg, "k_max", max(16, pool_k))
    if k_max < pool_k:
        raise UsageError(f"--k-max {k_max} is smaller than the pool size {pool_k}")
    return RouterConfig(
        d=_pick(args.dim, file_cfg, "dim", 64),
        hidden=_pick(args.hidden, file_cfg, "hidden", 64),
        k_max=k_max,
        head=_pick(args.head, file_cfg, "head", "mlp"),
        embed=EmbedConfig(
            dim=_pick(args.embed_dim, file_cfg, "embed_dim", 64),
            hash_seed=_pick(args.hash_seed, file_cfg, "hash_seed", 7),
        ),
    )


def cmd_train(args) -> int:
    file_cfg = _load_config_file(args.config)
    cases, pool, world = _load_world_or_dataset(args)
    if pool is None:
        raise UsageError("training on a dataset needs --pool")
    holdout = _pick(args.holdout, file_cfg, "holdout", 0)
    if holdout >= len(cases):
        raise UsageError(f"--holdout {holdout} leaves no training cases")
    train_cases = cases[: len(cases) - holdout] if holdout else cases
    held_out = cases[len(cases) - holdout :] if holdout else []

    cfg = TrainConfig(
        gamma=_pick(args.gamma, file_cfg, "gamma", 0.98),
        lr=_pick(args.lr, file_cfg, "lr", 1e-3),
        group_size_G=_pick(args.group_size, file_cfg, "group_size", 8),
        temperature=_pick(args.temperature, file_cfg, "temperature", 0.7),
        epochs=_pick(args.epochs, file_cfg, "epochs", 10),
        samples_per_epoch=_pick(args.samples_per_epoch, file_cfg, "samples_per_epoch", 100),
        epsilon=_pick(args.epsilon, file_cfg, "epsilon", 1e-8),
        max_steps=_pick(args.max_steps, file_cfg, "max_steps", 5),
        early_stop_on_correct=not args.no_early_stop,
        seed=_pick(args.seed, file_cfg, "seed", 0),
    )
    if world is not None:
        env = SynthEnvironment(world)
    else:
        env = LiveEnvironment(_build_backend(args, file_cfg))

    rcfg = _router_config(args, file_cfg, pool.k)
    params = init_router_params(rcfg, seed=cfg.seed)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = Path(args.log) if args.log else out_dir / "training_log.jsonl"

    params, stats = rl.train(
        train_cases, pool, params, env, cfg,
        jobs=args.jobs, checkpoint_dir=out_dir, log_path=log_path,
    )
    final_path = out_dir / "final.json"
    save_checkpoint(params, final_path)
    _err(f"wrote checkpoints to {out_dir} (final: {final_path})")

    line = (
        f"trained epochs={cfg.epochs} final_accuracy_on_sample="
        f"{stats[-1].accuracy_on_sample:.4f} mean_length={stats[-1].mean_length:.3f}"
    )
    if held_out:
        acc = rl.greedy_accuracy(held_out, pool, params, env, max_steps=cfg.max_steps)
        line += f" holdout_accuracy={acc:.4f}"
    print(line)
    return 0


def cmd_diagnose(args) -> int:
    file_cfg = _load_config_file(args.config)
    cases, pool, world = _load_world_or_dataset(args)
    if pool is None:
        raise UsageError("diagnosing a dataset needs --pool")
    params = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    if pool.k > params.config.k_max:
        raise UsageError(f"pool size {pool.k} exceeds checkpoint k_max {params.config.k_max}")
    env = SynthEnvironment(world) if world is not None else LiveEnvironment(_build_backend(args, file_cfg))

    temperature = 0.0 if args.greedy else _pick(args.temperature, file_cfg, "temperature", 0.7)
    seed = _pick(args.seed, file_cfg, "seed", 0)
    rng = np.random.default_rng(seed)
    failures = 0
    rewards: list[int] = []
    for case in cases:
        ecfg = EpisodeConfig(
            max_steps=_pick(args.max_steps, file_cfg, "max_steps", 5),
            temperature=temperature,
            head=args.head,
            seed=seed if temperature == 0.0 else int(rng.integers(0, 2**31 - 1)),
        )
        try:
            _, traj = orchestrator.diagnose(case, pool, params, env, ecfg)
        except EpisodeError as exc:
            failures += 1
            _err(f"episode failed for case {case.id}: {exc}")
            if exc.trajectory is not None:
                log_trajectory(exc.trajectory, args.log)
            continue
        log_trajectory(traj, args.log)
        rewards.append(int(round(traj.reward)))
    _err(f"logged {len(rewards)} trajectories to {args.log}")
    if rewards:
        print(
            f"accuracy={sum(rewards) / len(rewards):.4f} n={len(rewards)} "
            f"correct={sum(rewards)} failures={failures}"
        )
    if failures:
        _err(f"{failures} episode(s) failed")
        return 1
    return 0


def cmd_eval(args) -> int:
    file_cfg = _load_config_file(args.config)
    cases, _, world = _load_world_or_dataset(args)
    trajs = orchestrator.read_trajectories(_require_file(args.log, "trajectory log"))
    if not trajs:
        raise RuntimeError(f"trajectory log {args.log} is empty")
    by_id = {c.id: c for c in cases}
    backend = _build_backend(args, file_cfg) if args.judge == "live" else None
    records = []
    for traj in trajs:
        case = by_id.get(traj.case_id)
        if case is None:
            raise RuntimeError(f"trajectory references unknown case {traj.case_id!r}")
        records.append(eval_mod.judge_case(case, traj.final_decision, backend))
    if args.scores:
        eval_mod.write_scores(records, args.scores)
        _err(f"wrote {len(records)} scores to {args.scores}")
    print(eval_mod.summary_line([r.score for r in records]))
    return 0


def cmd_gradcheck(args) -> int:
    worst = 0.0
    for head in ("mlp", "cosine"):
        report = rl.router_gradcheck(
            d=args.dim, k=args.k, seed=args.seed, head=head,
            h=args.h, max_coords=args.coords, corrupt=args.corrupt,
        )
        worst = max(worst, report.max_rel_error)
        print(f"head={head} max_rel_error={report.max_rel_error:.3e} "
              f"coords={report.coords_checked}")
        for name in sorted(report.per_param, key=report.per_param.get, reverse=True)[:8]:
            print(f"  param={name} worst={report.per_param[name]:.3e}")
    threshold = 1e-4
    print(f"overall max_rel_error={worst:.3e} threshold={threshold:.0e} "
          f"{'OK' if worst <= threshold else 'FAIL'}")
    return 0 if worst <= threshold else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="medroute",
        description=(
            "Dynamic specialist routing: build pools, train the routing policy, "
            "run diagnosis episodes, and evaluate. Defaults are desk scale; pass "
            "--dim 768 --lr 1e-5 etc. for the full-scale recipe."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic world and print a random baseline")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--k", type=int, default=6)
    p.add_argument("--cases", type=int, default=300)
    p.add_argument("--max-seq", type=int, dest="max_seq", default=2)
    p.add_argument("--max-steps", type=int, dest="max_steps", default=5)
    p.add_argument("--gamma", type=float, default=0.98)
    p.add_argument("--baseline-episodes", type=int, dest="baseline_episodes", default=10000)
    p.add_argument("--out", default="world.json")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pool", help="build a specialist pool from dataset questions")
    p.add_argument("--dataset", required=True)
    p.add_argument("--top-k", type=int, dest="top_k", default=8,
                   help="pool size (desk default 8; 50-60 at full scale)")
    p.add_argument("--out", default="pool.json")
    p.add_argument("--config")
    _add_backend_flags(p)
    p.set_defaults(func=cmd_pool)

    p = sub.add_parser("train", help="train the routing policy")
    p.add_argument("--synth", help="synthetic world file (train offline)")
    p.add_argument("--dataset", help="JSONL dataset (live backend)")
    p.add_argument("--pool", help="pool file (required with --dataset)")
    p.add_argument("--holdout", type=int, help="hold out the last N cases for reporting")
    p.add_argument("--gamma", type=float, help="length-decay factor (default 0.98)")
    p.add_argument("--lr", type=float,
                   help="learning rate (desk default 1e-3; full-scale recipe uses 1e-5)")
    p.add_argument("--group-size", type=int, dest="group_size", help="traces per question (default 8)")
    p.add_argument("--temp", type=float, dest="temperature", help="trace temperature (default 0.7)")
    p.add_argument("--epochs", type=int, help="default 10")
    p.add_argument("--samples-per-epoch", type=int, dest="samples_per_epoch", help="default 100")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--max-steps", type=int, dest="max_steps")
    p.add_argument("--no-early-stop", action="store_true", dest="no_early_stop",
                   help="keep sampling all G traces even after a correct one")
    p.add_argument("--seed", type=int)
    p.add_argument("--head", choices=router.HEADS)
    p.add_argument("--dim", type=int, help="router model dim (desk default 64; paper scale 768)")
    p.add_argument("--hidden", type=int)
    p.add_argument("--k-max", type=int, dest="k_max")
    p.add_argument("--embed-dim", type=int, dest="embed_dim")
    p.add_argument("--hash-seed", type=int, dest="hash_seed")
    p.add_argument("--jobs", type=int, default=1, help="parallel trace generation (1 = reproducible)")
    p.add_argument("--out-dir", dest="out_dir", default="checkpoints")
    p.add_argument("--log", help="epoch-stats JSONL (default <out-dir>/training_log.jsonl)")
    p.add_argument("--config")
    _add_backend_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("diagnose", help="run episodes with a trained checkpoint")
    p.add_argument("--synth")
    p.add_argument("--dataset")
    p.add_argument("--pool")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--log", required=True, help="trajectory JSONL sink")
    p.add_argument("--greedy", action="store_true")
    p.add_argument("--temperature", type=float)
    p.add_argument("--max-steps", type=int, dest="max_steps")
    p.add_argument("--head", choices=router.HEADS)
    p.add_argument("--seed", type=int)
    p.add_argument("--config")
    _add_backend_flags(p)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("eval", help="judge a trajectory log against a dataset")
    p.add_argument("--log", required=True)
    p.add_argument("--synth")
    p.add_argument("--dataset")
    p.add_argument("--judge", choices=("offline", "live"), default="offline")
    p.add_argument("--scores", help="ScoreRecord JSONL output")
    p.add_argument("--config")
    _add_backend_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="verify router gradients against finite differences")
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--h", type=float, default=1e-4)
    p.add_argument("--coords", type=int, default=200)
    p.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        _err(str(exc))
        return 2
    except FileNotFoundError as exc:
        _err(str(exc))
        return 2
    except (ValueError, DatasetError) as exc:
        # config-shaped mistakes (bad flag combinations, invalid ranges)
        if isinstance(exc, DatasetError):
            _err(f"bad dataset: {exc}")
            return 1
        _err(str(exc))
        return 2
    except KeyboardInterrupt:
        _err("interrupted")
        return 1
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        _err(f"{type(exc).__name__}: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
