"""Policy-gradient training of the router: length-decayed rewards, grouped
advantage normalization, and REINFORCE over full routing trajectories.

The loss treats each sampled trajectory as one unit: its advantage weights
the sum of its per-step action log-probabilities (taken under the sampling
temperature). Gradients come from replaying the logged actions through the
router graph, which is exact because every piece of the pipeline is
deterministic given the trajectory.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import (
    STOP_ACTION,
    Case,
    Diagnosis,
    DiagnosticRecord,
    SpecialistPool,
    Trajectory,
    append_diagnosis,
)
from .embed import history_embed, role_embed, task_embed
from .numerics import AdamWState, Tape, adamw_step
from .orchestrator import DEFAULT_CONTEXT_CHARS, Environment, EpisodeConfig, diagnose
from .router import RouterParams, bind_params, save_checkpoint, step_graph

logger = logging.getLogger(__name__)


class TrainError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    gamma: float = 0.98
    lr: float = 1e-5
    group_size_G: int = 8
    temperature: float = 0.7
    epochs: int = 10
    samples_per_epoch: int = 100
    epsilon: float = 1e-8
    max_steps: int = 5
    early_stop_on_correct: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")
        if self.group_size_G < 2:
            raise ValueError("group_size_G must be >= 2")
        if self.temperature <= 0:
            raise ValueError("trace-generation temperature must be > 0")
        if min(self.lr, self.epsilon) < 0 or min(self.epochs, self.samples_per_epoch, self.max_steps) < 1:
            raise ValueError("training config values must be positive")


@dataclass
class TraceGroup:
    case_id: str
    trajectories: list[Trajectory]
    rewards: np.ndarray
    advantages: np.ndarray


@dataclass
class EpochStats:
    epoch: int
    mean_reward: float
    mean_length: float
    loss: float
    accuracy_on_sample: float

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "mean_reward": self.mean_reward,
            "mean_length": self.mean_length,
            "loss": self.loss,
            "accuracy_on_sample": self.accuracy_on_sample,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EpochStats":
        return cls(
            d["epoch"], d["mean_reward"], d["mean_length"], d["loss"], d["accuracy_on_sample"]
        )


def compute_reward(rm_score: int, l: int, gamma: float) -> float:
    """Length-decayed binary reward: gamma^l * rm."""
    if rm_score not in (0, 1):
        raise ValueError("rm_score must be 0 or 1")
    if l < 0:
        raise ValueError("trajectory length must be >= 0")
    if not 0 < gamma <= 1:
        raise ValueError("gamma must be in (0, 1]")
    return (gamma**l) * rm_score


def grouped_advantage(rewards, epsilon: float = 1e-8) -> np.ndarray:
    """(r - mean) / (std + eps) with population std; zero-variance groups map
    to all-zero advantages so they contribute no gradient."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise ValueError("advantage needs a group of at least 2 rewards")
    std = float(r.std())
    if std == 0.0:
        return np.zeros_like(r)
    return (r - r.mean()) / (std + epsilon)


def policy_loss(logprob_sums, advantages) -> float:
    """-(1/G) * sum_t A_t * (summed step log-probs of trajectory t)."""
    lp = np.asarray(logprob_sums, dtype=np.float64)
    adv = np.asarray(advantages, dtype=np.float64)
    if lp.shape != adv.shape:
        raise ValueError("log-prob sums and advantages must align")
    return float(-(lp * adv).mean())


# ---------------------------------------------------------------------------
# Loss graph construction (trajectory replay)
# ---------------------------------------------------------------------------


def trajectory_logprob_node(
    tape: Tape,
    bp: dict[str, int],
    params: RouterParams,
    case: Case,
    pool: SpecialistPool,
    traj: Trajectory,
    temperature: float,
) -> int:
    """Rebuild the router graph along a logged trajectory; returns the node
    holding the trajectory's summed action log-probability."""
    embed_cfg = params.config.embed
    q = task_embed(case, embed_cfg)
    roles = [role_embed(s, embed_cfg) for s in pool.specialists]
    record = DiagnosticRecord()
    consulted: set[int] = set()
    total: int | None = None
    for st in traj.steps:
        h = history_embed(record, embed_cfg, DEFAULT_CONTEXT_CHARS)
        logits, _, mask = step_graph(
            tape, bp, params.config, q, roles, h, consulted, st.step
        )
        idx = pool.k if st.action == STOP_ACTION else int(st.action)
        lp = tape.masked_log_prob(logits, mask, idx, temperature)
        total = lp if total is None else tape.add(total, lp)
        if st.action != STOP_ACTION:
            specialist = pool.specialists[int(st.action)]
            append_diagnosis(
                record,
                Diagnosis(int(st.action), specialist.role_name, st.diagnosis or "", st.step),
            )
            consulted.add(int(st.action))
    if total is None:
        raise TrainError(f"trajectory for case {traj.case_id} has no steps")
    return total


def group_loss_node(
    tape: Tape,
    bp: dict[str, int],
    params: RouterParams,
    case: Case,
    pool: SpecialistPool,
    group: TraceGroup,
    temperature: float,
) -> int:
    """Policy-gradient loss node for one trace group. Zero-advantage
    trajectories are skipped: their term is exactly zero either way."""
    g = len(group.trajectories)
    terms: list[int] = []
    for traj, adv in zip(group.trajectories, group.advantages):
        if adv == 0.0:
            continue
        lp = trajectory_logprob_node(tape, bp, params, case, pool, traj, temperature)
        terms.append(tape.mul_const(lp, float(adv)))
    if not terms:
        return tape.constant(np.float32(0.0))
    total = terms[0]
    for t in terms[1:]:
        total = tape.add(total, t)
    return tape.mul_const(total, -1.0 / g)


# ---------------------------------------------------------------------------
# Gradient verification on a toy routing instance
# ---------------------------------------------------------------------------


def router_gradcheck(
    d: int = 16,
    k: int = 4,
    seed: int = 0,
    head: str = "mlp",
    h: float = 1e-4,
    max_coords: int = 200,
    corrupt: bool = False,
):
    """Finite-difference check of the full policy-gradient loss on a small
    router. corrupt=True deliberately scales one backward path as a negative
    control; the checker must then report a large error."""
    from .core import Specialist, TrajectoryStep
    from .embed import EmbedConfig
    from .numerics import gradcheck
    from .router import RouterConfig, init_router_params

    embed_cfg = EmbedConfig(dim=max(8, d))
    cfg = RouterConfig(d=d, hidden=d, k_max=k, head=head, embed=embed_cfg)
    params = init_router_params(cfg, seed=seed, zero_head=False)
    pool = SpecialistPool(
        specialists=tuple(
            Specialist(f"Role{i}", f"handles topic {chr(ord('a') + i)} findings")
            for i in range(k)
        )
    )
    case = Case(id="toy", question="toy complaint with topic a and topic c", answer="x")

    def uniform(n_live: int, mask_len: int, live: list[int]) -> tuple[float, ...]:
        dist = [0.0] * mask_len
        for i in live:
            dist[i] = 1.0 / n_live
        return tuple(dist)

    t1 = Trajectory(
        case_id="toy",
        steps=[
            TrajectoryStep(1, 0, uniform(k, k + 1, list(range(k))), -1.0, "finding alpha"),
            TrajectoryStep(2, 2, uniform(k, k + 1, [1, 2, 3, k]), -1.0, "finding beta"),
            TrajectoryStep(3, STOP_ACTION, uniform(k - 1, k + 1, [1, 3, k]), -0.5, None),
        ],
        final_decision="x",
        length_l=2,
        reward=compute_reward(1, 2, 0.98),
        seed=0,
    )
    t2 = Trajectory(
        case_id="toy",
        steps=[
            TrajectoryStep(1, 1, uniform(k, k + 1, list(range(k))), -1.0, "nothing seen"),
            TrajectoryStep(2, STOP_ACTION, uniform(k, k + 1, [0, 2, 3, k]), -1.0, None),
        ],
        final_decision="y",
        length_l=1,
        reward=0.0,
        seed=1,
    )
    rewards = np.asarray([t1.reward, t2.reward])
    group = TraceGroup("toy", [t1, t2], rewards, grouped_advantage(rewards))

    def builder(tape: Tape, leaf_ids: dict[str, int]) -> int:
        loss = group_loss_node(tape, leaf_ids, params, case, pool, group, temperature=0.7)
        if corrupt:
            loss = tape.custom(
                "corrupted_identity", (loss,), tape.value(loss).copy(), lambda g: (g * 1.5,)
            )
        return loss

    return gradcheck(builder, params.tensors, h=h, max_coords=max_coords, seed=seed)


# ---------------------------------------------------------------------------
# Trace sampling
# ---------------------------------------------------------------------------


def sample_trace_group(
    case: Case,
    pool: SpecialistPool,
    params: RouterParams,
    env: Environment,
    cfg: TrainConfig,
    rng: np.random.Generator,
    jobs: int = 1,
) -> TraceGroup:
    """Sample up to G trajectories for one case and normalize their rewards.

    With early stopping, no new traces are issued once one is correct; a
    group that stops at a single trace is padded with one more so the
    advantage stays defined. jobs > 1 samples traces in parallel waves (the
    early-stop check then applies per wave).
    """
    if pool.k < 1:
        raise ValueError("pool must not be empty")
    g_max = cfg.group_size_G
    seeds = [int(s) for s in rng.integers(0, 2**31 - 1, size=g_max)]

    def run(i: int) -> tuple[Trajectory, int]:
        ecfg = EpisodeConfig(
            max_steps=cfg.max_steps, temperature=cfg.temperature, head=None, seed=seeds[i]
        )
        try:
            _, traj = diagnose(case, pool, params, env, ecfg)
        except Exception as exc:
            raise TrainError(f"trace {i} failed for case {case.id}: {exc}") from exc
        rm = int(round(traj.reward))
        traj.reward = compute_reward(rm, traj.length_l, cfg.gamma)
        return traj, rm

    trajectories: list[Trajectory] = []
    hit = False
    if jobs <= 1:
        for i in range(g_max):
            traj, rm = run(i)
            trajectories.append(traj)
            if cfg.early_stop_on_correct and rm == 1:
                hit = True
                break
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool_exec:
            i = 0
            while i < g_max and not hit:
                wave = list(range(i, min(i + jobs, g_max)))
                for traj, rm in pool_exec.map(run, wave):
                    trajectories.append(traj)
                    hit = hit or (cfg.early_stop_on_correct and rm == 1)
                i = wave[-1] + 1
    if len(trajectories) == 1:
        traj, _ = run(1)  # pad so the group advantage is well-defined
        trajectories.append(traj)

    rewards = np.asarray([t.reward for t in trajectories], dtype=np.float64)
    advantages = grouped_advantage(rewards, cfg.epsilon)
    return TraceGroup(
        case_id=case.id, trajectories=trajectories, rewards=rewards, advantages=advantages
    )


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def greedy_accuracy(
    cases: list[Case],
    pool: SpecialistPool,
    params: RouterParams,
    env: Environment,
    max_steps: int = 5,
) -> float:
    """Fraction of cases whose greedy episode ends in a correct decision."""
    if not cases:
        raise ValueError("cases must be non-empty")
    ecfg = EpisodeConfig(max_steps=max_steps, temperature=0.0, seed=0)
    hits = 0
    for case in cases:
        final, _ = diagnose(case, pool, params, env, ecfg)
        hits += env.reward(final, case.answer)
    return hits / len(cases)


def train(
    cases: list[Case],
    pool: SpecialistPool,
    params: RouterParams,
    env: Environment,
    cfg: TrainConfig,
    jobs: int = 1,
    checkpoint_dir: str | Path | None = None,
    log_path: str | Path | None = None,
) -> tuple[RouterParams, list[EpochStats]]:
    """Epoch loop: sample cases with replacement, one optimizer step per
    trace group. Checkpoints and epoch stats are written when paths are given.
    Fully deterministic for a fixed seed when jobs == 1."""
    if not cases:
        raise ValueError("cases must be non-empty")
    import json

    rng = np.random.default_rng(cfg.seed)
    state = AdamWState(lr=cfg.lr)
    stats_out: list[EpochStats] = []
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)

    for epoch in range(1, cfg.epochs + 1):
        picks = rng.integers(0, len(cases), size=cfg.samples_per_epoch)
        losses: list[float] = []
        all_rewards: list[float] = []
        all_lengths: list[int] = []
        for pick in picks:
            case = cases[int(pick)]
            group = sample_trace_group(case, pool, params, env, cfg, rng, jobs=jobs)
            all_rewards.extend(float(t.reward) for t in group.trajectories)
            all_lengths.extend(t.length_l for t in group.trajectories)

            tape = Tape()
            bp = bind_params(tape, params, trainable=True)
            loss_node = group_loss_node(tape, bp, params, case, pool, group, cfg.temperature)
            loss = float(np.reshape(tape.value(loss_node), ()))
            if not np.isfinite(loss):
                raise TrainError(f"non-finite loss on case {case.id}")
            losses.append(loss)
            grads_by_leaf = tape.backward(loss_node)
            grads = {name: grads_by_leaf[nid] for name, nid in bp.items()}
            adamw_step(state, params.tensors, grads)

        sample_cases = [cases[int(p)] for p in picks]
        acc = greedy_accuracy(sample_cases, pool, params, env, max_steps=cfg.max_steps)
        stats = EpochStats(
            epoch=epoch,
            mean_reward=float(np.mean(all_rewards)) if all_rewards else 0.0,
            mean_length=float(np.mean(all_lengths)) if all_lengths else 0.0,
            loss=float(np.mean(losses)) if losses else 0.0,
            accuracy_on_sample=acc,
        )
        stats_out.append(stats)
        logger.info(
            "epoch %d: reward=%.4f length=%.2f loss=%.5f acc=%.3f",
            epoch, stats.mean_reward, stats.mean_length, stats.loss, stats.accuracy_on_sample,
        )
        if checkpoint_dir is not None:
            save_checkpoint(params, Path(checkpoint_dir) / f"epoch_{epoch:03d}.json")
        if log_path is not None:
            with Path(log_path).open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(stats.to_dict()) + "\n")
    return params, stats_out
