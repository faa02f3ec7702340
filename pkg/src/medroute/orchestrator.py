"""The GP loop: pool construction, sequential routing with history feedback,
specialist invocation, moderation, and trajectory logging.

The episode loop is generic over an Environment; the live implementation
backs each agent call with a chat backend, the synthetic one with the
synthclinic world. Both run through the same code path.
"""

from __future__ import annotations

import logging
import re
import threading
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import backends
from .backends import BackendError, ChatMessage
from .core import (
    Case,
    Diagnosis,
    DiagnosticRecord,
    Specialist,
    SpecialistPool,
    Trajectory,
    TrajectoryStep,
    append_diagnosis,
    render_history,
)
from .embed import history_embed, role_embed, task_embed
from .router import (
    RouterParams,
    assemble_input,
    forward,
    sample_action,
    sampling_distribution,
)

logger = logging.getLogger(__name__)

DEFAULT_CONTEXT_CHARS = 2048
_PROMPTS_DIR = Path(__file__).resolve().parent / "prompts"
_ROLE_LINE_PREFIX = re.compile(r"^\s*(?:[-*•]|\d+[.)])\s*")
_log_lock = threading.Lock()


class PoolBuildError(RuntimeError):
    """No question produced usable specialist suggestions."""


class EpisodeError(RuntimeError):
    """An environment call failed mid-episode; carries the partial trajectory."""

    def __init__(self, message: str, trajectory: Trajectory | None = None):
        super().__init__(message)
        self.trajectory = trajectory


def load_prompt(name: str, prompts_dir: str | Path | None = None) -> str:
    base = Path(prompts_dir) if prompts_dir is not None else _PROMPTS_DIR
    path = base / f"{name}.txt"
    return path.read_text(encoding="utf-8")


def extract_answer(text: str) -> str:
    """The last "ANSWER:" line of a moderator reply, else the whole text."""
    answer = None
    for line in text.splitlines():
        if line.strip().upper().startswith("ANSWER:"):
            answer = line.strip()[len("ANSWER:") :].strip()
    return answer if answer is not None else text.strip()


class Environment:
    """Agent surface one episode talks to; implementations must be
    deterministic given identical inputs in test mode."""

    def prepare_case(self, case: Case) -> Case:
        return case

    def specialist_call(self, case: Case, specialist: Specialist, record: DiagnosticRecord) -> str:
        raise NotImplementedError

    def moderator_call(self, case: Case, record: DiagnosticRecord) -> str:
        raise NotImplementedError

    def reward(self, pred: str, gt: str) -> int:
        raise NotImplementedError


@dataclass
class EpisodeConfig:
    max_steps: int = 5
    temperature: float = 0.0  # 0 = greedy
    head: str | None = None  # None = the head the params were built for
    seed: int = 0

    def __post_init__(self) -> None:
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


def _options_block(case: Case) -> str:
    if not case.options:
        return ""
    lines = [f"({chr(ord('A') + i)}) {opt}" for i, opt in enumerate(case.options)]
    return "Options:\n" + "\n".join(lines) + "\n"


class LiveEnvironment(Environment):
    """Backs every agent call with a chat backend using the packaged prompts."""

    def __init__(self, backend, prompts_dir: str | Path | None = None):
        self.backend = backend
        self.prompts_dir = prompts_dir

    def _prompt(self, name: str) -> str:
        return load_prompt(name, self.prompts_dir)

    def prepare_case(self, case: Case) -> Case:
        if case.caption or not case.image_ref:
            return case
        caption = backends.caption_image(
            self.backend, case.image_ref, instruction=self._prompt("caption").strip()
        )
        return Case(
            id=case.id,
            question=case.question,
            answer=case.answer,
            options=case.options,
            answer_index=case.answer_index,
            caption=caption,
            image_ref=case.image_ref,
        )

    def specialist_call(self, case: Case, specialist: Specialist, record: DiagnosticRecord) -> str:
        caption_block = f"Image caption:\n{case.caption}\n" if case.caption else ""
        history = render_history(record, DEFAULT_CONTEXT_CHARS) or "(none yet)"
        user = self._prompt("specialist").format(
            question=case.question,
            options_block=_options_block(case),
            caption_block=caption_block,
            history=history,
        )
        return self.backend.complete(
            [
                ChatMessage(role="system", content=specialist.responsibility or specialist.role_name),
                ChatMessage(role="user", content=user),
            ]
        )

    def moderator_call(self, case: Case, record: DiagnosticRecord) -> str:
        user = self._prompt("moderator").format(
            question=case.question,
            options_block=_options_block(case),
            history=render_history(record, DEFAULT_CONTEXT_CHARS) or "(none)",
        )
        return extract_answer(self.backend.complete([ChatMessage(role="user", content=user)]))

    def reward(self, pred: str, gt: str) -> int:
        from .eval import parse_binary_judgement

        prompt = self._prompt("judge_open").format(
            question="(final diagnosis check)", answer=gt, prediction=pred
        )
        reply = self.backend.complete([ChatMessage(role="user", content=prompt)])
        return parse_binary_judgement(reply)


# ---------------------------------------------------------------------------
# Pool construction
# ---------------------------------------------------------------------------


def _parse_role_lines(reply: str) -> list[str]:
    roles = []
    for line in reply.splitlines():
        line = _ROLE_LINE_PREFIX.sub("", line).strip()
        if not line or line.endswith(":"):
            continue
        roles.append(line.title())
    return roles


def build_pool(
    questions: list[str],
    backend,
    k_top: int,
    prompts_dir: str | Path | None = None,
) -> SpecialistPool:
    """Ask the backend for 3-7 roles per question, rank by how many questions
    named each role, keep the top k (ties broken lexicographically), then
    fetch one responsibility paragraph per kept role."""
    if not questions:
        raise ValueError("questions must be non-empty")
    if k_top < 1:
        raise ValueError("k_top must be >= 1")
    suggest_tpl = load_prompt("pool_suggest", prompts_dir)
    counts: Counter[str] = Counter()
    ok = 0
    for i, q in enumerate(questions):
        try:
            reply = backend.complete(
                [ChatMessage(role="user", content=suggest_tpl.format(question=q))]
            )
        except BackendError as exc:
            logger.warning("pool suggestion failed for question %d: %s", i, exc)
            continue
        roles = _parse_role_lines(reply)
        if len(roles) > 7:
            logger.warning("question %d: %d suggestions, clipping to 7", i, len(roles))
            roles = roles[:7]
        elif len(roles) < 3:
            logger.warning("question %d: only %d suggestions (expected 3-7)", i, len(roles))
        if not roles:
            continue
        ok += 1
        counts.update(set(roles))
    if ok == 0:
        raise PoolBuildError("no question produced specialist suggestions")

    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    top = [name for name, _ in ranked[:k_top]]

    resp_tpl = load_prompt("responsibility", prompts_dir)
    specialists = []
    for name in top:
        responsibility = backend.complete(
            [ChatMessage(role="user", content=resp_tpl.format(role_name=name))]
        ).strip()
        specialists.append(Specialist(role_name=name, responsibility=responsibility))
    return SpecialistPool(specialists=tuple(specialists))


# ---------------------------------------------------------------------------
# Episodes
# ---------------------------------------------------------------------------


def diagnose(
    case: Case,
    pool: SpecialistPool,
    params: RouterParams,
    env: Environment,
    cfg: EpisodeConfig,
) -> tuple[str, Trajectory]:
    """Run one full routing episode and return the moderator's decision plus
    the logged trajectory (reward holds the raw 0/1 correctness; the trainer
    overwrites it with the length-decayed value)."""
    case = env.prepare_case(case)
    embed_cfg = params.config.embed
    q = task_embed(case, embed_cfg)
    roles = [role_embed(s, embed_cfg) for s in pool.specialists]
    record = DiagnosticRecord()
    consulted: set[int] = set()
    steps: list[TrajectoryStep] = []
    rng = np.random.default_rng(cfg.seed)

    def fail(step: int, exc: Exception) -> EpisodeError:
        traj = Trajectory(
            case_id=case.id,
            steps=steps,
            final_decision=f"[FAILED] {exc}",
            length_l=len(consulted),
            reward=0.0,
            seed=cfg.seed,
        )
        return EpisodeError(f"environment call failed at step {step}: {exc}", traj)

    for step in range(1, cfg.max_steps + 1):
        h = history_embed(record, embed_cfg, DEFAULT_CONTEXT_CHARS)
        rin = assemble_input(q, roles, h, params, consulted, step)
        out = forward(params, rin, cfg.head)
        action, log_prob = sample_action(out, cfg.temperature, rng)
        dist = sampling_distribution(out, cfg.temperature)
        if action.is_stop:
            steps.append(
                TrajectoryStep(step, "STOP", tuple(float(p) for p in dist), log_prob, None)
            )
            break
        specialist = pool.specialists[action.index]
        try:
            text = env.specialist_call(case, specialist, record)
        except Exception as exc:  # persisted with a failure marker by callers
            raise fail(step, exc) from exc
        append_diagnosis(
            record, Diagnosis(action.index, specialist.role_name, text, step)
        )
        consulted.add(action.index)
        steps.append(
            TrajectoryStep(step, action.index, tuple(float(p) for p in dist), log_prob, text)
        )

    try:
        final = env.moderator_call(case, record)
    except Exception as exc:
        raise fail(len(steps) + 1, exc) from exc
    traj = Trajectory(
        case_id=case.id,
        steps=steps,
        final_decision=final,
        length_l=len(consulted),
        reward=float(env.reward(final, case.answer)),
        seed=cfg.seed,
    )
    return final, traj


def log_trajectory(traj: Trajectory, sink: str | Path) -> None:
    """Append one JSONL line; a single locked write keeps lines atomic."""
    import json

    line = json.dumps(traj.to_dict(), ensure_ascii=False) + "\n"
    with _log_lock:
        with Path(sink).open("a", encoding="utf-8") as fh:
            fh.write(line)


def read_trajectories(path: str | Path) -> list[Trajectory]:
    import json

    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(Trajectory.from_dict(json.loads(line)))
    return out
