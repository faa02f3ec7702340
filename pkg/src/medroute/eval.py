"""Binary judge scoring and accuracy aggregation.

A backend-prompted judge scores predictions 0/1 (MCQ and open-ended
variants); without a backend both fall back to deterministic exact matching
so CI stays hermetic. Each score records which mode produced it.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

from .backends import ChatMessage
from .core import Case
from .orchestrator import load_prompt

_INT_TOKEN = re.compile(r"-?\d+")
_LETTER_ONLY = re.compile(r"^\(?([A-Za-z])[.)]?$")


class JudgeError(RuntimeError):
    """The judge reply could not be parsed as 0/1, even after a re-ask."""


@dataclass(frozen=True)
class ScoreRecord:
    case_id: str
    prediction: str
    score: int
    judge_mode: str  # mcq | open | exact

    def __post_init__(self) -> None:
        if self.score not in (0, 1):
            raise ValueError("score must be 0 or 1")

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "prediction": self.prediction,
            "score": self.score,
            "judge_mode": self.judge_mode,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScoreRecord":
        return cls(d["case_id"], d["prediction"], d["score"], d["judge_mode"])


def _norm(text: str) -> str:
    return " ".join(text.strip().casefold().split())


def parse_binary_judgement(reply: str) -> int:
    """Take the last integer token of the reply; it must be 0 or 1."""
    tokens = _INT_TOKEN.findall(reply)
    if tokens and tokens[-1] in ("0", "1"):
        return int(tokens[-1])
    raise JudgeError(f"cannot parse judge reply: {reply[:120]!r}")


def _ask_judge(backend, prompt: str) -> int:
    reply = backend.complete([ChatMessage(role="user", content=prompt)])
    try:
        return parse_binary_judgement(reply)
    except JudgeError:
        retry = prompt + "\n\nYour previous reply was not parseable. Reply with only 0 or 1."
        return parse_binary_judgement(backend.complete([ChatMessage(role="user", content=retry)]))


def _offline_mcq(case: Case, prediction: str) -> int:
    correct = case.options[case.answer_index]
    pred = prediction.strip()
    m = _LETTER_ONLY.match(pred)
    if m:
        return int(m.group(1).upper() == chr(ord("A") + case.answer_index))
    return int(_norm(pred) == _norm(correct))


def judge_mcq(case: Case, prediction: str, backend=None, prompts_dir=None) -> int:
    """Score a multiple-choice prediction; offline mode falls back to exact
    option-letter / option-text matching."""
    if case.options is None or case.answer_index is None:
        raise ValueError(f"case {case.id} has no options/answer_index for MCQ judging")
    if backend is None:
        return _offline_mcq(case, prediction)
    options_block = "\n".join(
        f"({chr(ord('A') + i)}) {opt}" for i, opt in enumerate(case.options)
    )
    prompt = load_prompt("judge_mcq", prompts_dir).format(
        question=case.question,
        options_block=options_block,
        letter=chr(ord("A") + case.answer_index),
        answer=case.options[case.answer_index],
        prediction=prediction,
    )
    return _ask_judge(backend, prompt)


def judge_open(case: Case, prediction: str, backend=None, prompts_dir=None) -> int:
    """Score an open-ended prediction; offline mode is normalized exact match."""
    if backend is None:
        return int(_norm(prediction) == _norm(case.answer))
    prompt = load_prompt("judge_open", prompts_dir).format(
        question=case.question, answer=case.answer, prediction=prediction
    )
    return _ask_judge(backend, prompt)


def judge_case(case: Case, prediction: str, backend=None, prompts_dir=None) -> ScoreRecord:
    """Route to the MCQ or open judge based on the case shape."""
    if case.options is not None and case.answer_index is not None:
        score = judge_mcq(case, prediction, backend, prompts_dir)
        mode = "mcq" if backend is not None else "exact"
    else:
        score = judge_open(case, prediction, backend, prompts_dir)
        mode = "open" if backend is not None else "exact"
    return ScoreRecord(case_id=case.id, prediction=prediction, score=score, judge_mode=mode)


def accuracy(scores) -> float:
    """100 * mean score, half-up rounded to 2 decimals."""
    scores = list(scores)
    if not scores:
        raise ValueError("cannot compute accuracy of zero scores")
    if any(s not in (0, 1) for s in scores):
        raise ValueError("scores must be 0 or 1")
    pct = Decimal(100 * sum(scores)) / Decimal(len(scores))
    return float(pct.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def write_scores(records: list[ScoreRecord], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict()) + "\n")


def read_scores(path: str | Path) -> list[ScoreRecord]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(ScoreRecord.from_dict(json.loads(line)))
    return out


def summary_line(scores: list[int]) -> str:
    return f"accuracy={accuracy(scores):.2f} n={len(scores)} correct={sum(scores)}"
