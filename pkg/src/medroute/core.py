"""Domain data model: cases, specialists, diagnostic records, trajectories.

Everything here is plain data plus JSONL (de)serialization. All values are
immutable after construction except DiagnosticRecord, which is owned by a
single in-flight episode.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

STOP_ACTION = "STOP"


class DatasetError(ValueError):
    """Malformed dataset file (bad JSON, missing fields, duplicate ids)."""


class DuplicateSpecialistError(ValueError):
    """A specialist was consulted twice in one episode."""


@dataclass(frozen=True)
class Case:
    """One diagnostic task: question, optional options/caption/image, ground truth."""

    id: str
    question: str
    answer: str
    options: tuple[str, ...] | None = None
    answer_index: int | None = None
    caption: str | None = None
    image_ref: str | None = None

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("case id must be non-empty")
        if self.options is not None:
            if len(self.options) < 2:
                raise ValueError(f"case {self.id}: options must have >= 2 entries")
            object.__setattr__(self, "options", tuple(self.options))
        if self.answer_index is not None:
            if self.options is None or not 0 <= self.answer_index < len(self.options):
                raise ValueError(f"case {self.id}: answer_index out of range")

    def to_dict(self) -> dict:
        out: dict = {"id": self.id, "question": self.question, "answer": self.answer}
        if self.options is not None:
            out["options"] = list(self.options)
        if self.answer_index is not None:
            out["answer_index"] = self.answer_index
        if self.caption is not None:
            out["caption"] = self.caption
        if self.image_ref is not None:
            out["image_ref"] = self.image_ref
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "Case":
        try:
            return cls(
                id=d["id"],
                question=d["question"],
                answer=d["answer"],
                options=tuple(d["options"]) if d.get("options") is not None else None,
                answer_index=d.get("answer_index"),
                caption=d.get("caption"),
                image_ref=d.get("image_ref"),
            )
        except KeyError as exc:
            raise DatasetError(f"case record missing field {exc}") from exc


@dataclass(frozen=True)
class Specialist:
    """A candidate role: name plus a one-paragraph duty statement."""

    role_name: str
    responsibility: str = ""

    def __post_init__(self) -> None:
        if not self.role_name:
            raise ValueError("role_name must be non-empty")

    def to_dict(self) -> dict:
        return {"role_name": self.role_name, "responsibility": self.responsibility}

    @classmethod
    def from_dict(cls, d: dict) -> "Specialist":
        return cls(role_name=d["role_name"], responsibility=d.get("responsibility", ""))


@dataclass(frozen=True)
class SpecialistPool:
    """Ordered roster of candidate roles; order defines action indices 0..k-1."""

    specialists: tuple[Specialist, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "specialists", tuple(self.specialists))
        if self.k < 1:
            raise ValueError("pool must contain at least one specialist")
        seen = set()
        for s in self.specialists:
            key = s.role_name.lower()
            if key in seen:
                raise ValueError(f"duplicate role in pool: {s.role_name!r}")
            seen.add(key)

    @property
    def k(self) -> int:
        return len(self.specialists)

    def index_of(self, role_name: str) -> int:
        key = role_name.lower()
        for i, s in enumerate(self.specialists):
            if s.role_name.lower() == key:
                return i
        raise KeyError(role_name)

    def to_dict(self) -> dict:
        return {"specialists": [s.to_dict() for s in self.specialists], "k": self.k}

    @classmethod
    def from_dict(cls, d: dict) -> "SpecialistPool":
        pool = cls(specialists=tuple(Specialist.from_dict(s) for s in d["specialists"]))
        if "k" in d and d["k"] != pool.k:
            raise ValueError(f"pool k={d['k']} disagrees with {pool.k} specialists")
        return pool

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "SpecialistPool":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class Diagnosis:
    """One specialist's contribution to the shared record."""

    specialist_index: int
    specialist_role: str
    text: str
    step: int

    def to_dict(self) -> dict:
        return {
            "specialist_index": self.specialist_index,
            "specialist_role": self.specialist_role,
            "text": self.text,
            "step": self.step,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Diagnosis":
        return cls(d["specialist_index"], d["specialist_role"], d["text"], d["step"])


@dataclass
class DiagnosticRecord:
    """Growing history of (specialist, diagnosis) entries for one episode."""

    entries: list[Diagnosis] = field(default_factory=list)

    def consulted_indices(self) -> set[int]:
        return {d.specialist_index for d in self.entries}

    def to_dict(self) -> dict:
        return {"entries": [d.to_dict() for d in self.entries]}

    @classmethod
    def from_dict(cls, d: dict) -> "DiagnosticRecord":
        return cls(entries=[Diagnosis.from_dict(e) for e in d["entries"]])


def append_diagnosis(record: DiagnosticRecord, d: Diagnosis) -> DiagnosticRecord:
    """Append one diagnosis; the step number is assigned here (previous max + 1)."""
    if d.specialist_index in record.consulted_indices():
        raise DuplicateSpecialistError(
            f"specialist index {d.specialist_index} already consulted"
        )
    next_step = max((e.step for e in record.entries), default=0) + 1
    record.entries.append(replace(d, step=next_step))
    return record


def render_history(record: DiagnosticRecord, max_chars: int) -> str:
    """Render the record as "ROLE: text" lines, newest entries kept under the budget.

    Whole oldest entries are dropped first; if a single remaining entry still
    exceeds the budget its head is truncated (the tail carries the most recent
    signal). An empty record renders as the empty string.
    """
    if max_chars <= 0:
        raise ValueError("max_chars must be positive")
    lines = [f"{d.specialist_role}: {d.text}" for d in sorted(record.entries, key=lambda e: e.step)]
    if not lines:
        return ""
    text = "\n".join(lines)
    while len(text) > max_chars and len(lines) > 1:
        lines = lines[1:]
        text = "\n".join(lines)
    if len(text) > max_chars:
        text = text[len(text) - max_chars :]
    return text


@dataclass(frozen=True)
class TrajectoryStep:
    """One routing decision: the sampling distribution, the action taken, and
    the resulting diagnosis (None for STOP)."""

    step: int
    action: int | str
    distribution: tuple[float, ...]
    log_prob: float
    diagnosis: str | None = None

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "action": self.action,
            "distribution": list(self.distribution),
            "log_prob": self.log_prob,
            "diagnosis": self.diagnosis,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrajectoryStep":
        return cls(
            step=d["step"],
            action=d["action"],
            distribution=tuple(d["distribution"]),
            log_prob=d["log_prob"],
            diagnosis=d.get("diagnosis"),
        )


@dataclass
class Trajectory:
    """One full routing episode, as logged by the inference pipeline."""

    case_id: str
    steps: list[TrajectoryStep]
    final_decision: str
    length_l: int
    reward: float
    seed: int

    def __post_init__(self) -> None:
        if self.length_l != self.computed_length():
            raise ValueError(
                f"length_l={self.length_l} but steps contain "
                f"{self.computed_length()} specialist consultations"
            )

    def computed_length(self) -> int:
        return sum(1 for s in self.steps if s.action != STOP_ACTION)

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "steps": [s.to_dict() for s in self.steps],
            "final_decision": self.final_decision,
            "length_l": self.length_l,
            "reward": self.reward,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Trajectory":
        return cls(
            case_id=d["case_id"],
            steps=[TrajectoryStep.from_dict(s) for s in d["steps"]],
            final_decision=d["final_decision"],
            length_l=d["length_l"],
            reward=d["reward"],
            seed=d["seed"],
        )


def load_dataset(path: str | Path) -> list[Case]:
    """Load a JSONL dataset, one case per line. Ids must be unique."""
    path = Path(path)
    cases: list[Case] = []
    seen_ids: set[str] = set()
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            try:
                case = Case.from_dict(raw)
            except (DatasetError, ValueError, TypeError) as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from exc
            if case.id in seen_ids:
                raise DatasetError(f"{path}:{lineno}: duplicate case id {case.id!r}")
            seen_ids.add(case.id)
            cases.append(case)
    return cases


def save_dataset(cases: list[Case], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for case in cases:
            fh.write(json.dumps(case.to_dict(), ensure_ascii=False) + "\n")
