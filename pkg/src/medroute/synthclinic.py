"""Deterministic synthetic clinic: specialists, moderator, and reward model
with known ground truth, so the full RL pipeline is verifiable offline.

Each case carries a hidden required sequence of specialists. A specialist
reveals its clue token only when it is the next unmet element of that
sequence given the record; the moderator emits the case label only when all
clues appear in the record in order. Keyword vocabularies are disjoint
across specialties, so task embeddings carry real routing signal.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (
    Case,
    Diagnosis,
    DiagnosticRecord,
    Specialist,
    SpecialistPool,
    append_diagnosis,
)

NO_FINDING = "NO FINDING"
INCONCLUSIVE = "INCONCLUSIVE"

# (role name, keyword vocabulary) per built-in specialty; vocabularies are
# pairwise disjoint, which generate_world re-validates.
_SPECIALTY_BANK: list[tuple[str, list[str]]] = [
    ("Cardiologist", ["palpitations", "arrhythmia", "angina", "troponin", "stenosis",
                      "bradycardia", "tachycardia", "murmur", "infarction", "pericardium"]),
    ("Neurologist", ["seizure", "aura", "neuropathy", "tremor", "aphasia",
                     "migraine", "dementia", "vertigo", "hemiparesis", "myoclonus"]),
    ("Pulmonologist", ["wheeze", "dyspnea", "asthma", "emphysema", "pleurisy",
                       "hypoxia", "bronchitis", "sputum", "atelectasis", "pneumothorax"]),
    ("Gastroenterologist", ["reflux", "jaundice", "colitis", "dyspepsia", "hepatitis",
                            "ascites", "melena", "gallstone", "pancreatitis", "bloating"]),
    ("Orthopedist", ["fracture", "sprain", "scoliosis", "kyphosis", "meniscus",
                     "dislocation", "osteoporosis", "bursitis", "tendonitis", "nonunion"]),
    ("Dermatologist", ["rash", "eczema", "psoriasis", "melanoma", "urticaria",
                       "pruritus", "dermatitis", "blister", "nevus", "keratosis"]),
    ("Nephrologist", ["proteinuria", "creatinine", "dialysis", "hematuria", "oliguria",
                      "uremia", "nephritis", "azotemia", "glomerulus", "polyuria"]),
    ("Endocrinologist", ["thyroid", "insulin", "glucose", "goiter", "cortisol",
                         "diabetes", "hypoglycemia", "acromegaly", "prolactin", "ketoacidosis"]),
    ("Hematologist", ["anemia", "platelets", "leukemia", "lymphoma", "clotting",
                      "hemoglobin", "thrombosis", "neutropenia", "ferritin", "coagulopathy"]),
    ("Ophthalmologist", ["cataract", "glaucoma", "retina", "diplopia", "uveitis",
                         "myopia", "strabismus", "keratitis", "floaters", "amblyopia"]),
    ("Otolaryngologist", ["tinnitus", "sinusitis", "epistaxis", "hoarseness", "otitis",
                          "dysphagia", "laryngitis", "rhinorrhea", "tonsillitis", "earache"]),
    ("Rheumatologist", ["lupus", "gout", "fibromyalgia", "synovitis", "vasculitis",
                        "stiffness", "sacroiliitis", "myositis", "scleroderma", "spondylitis"]),
]


@dataclass(frozen=True)
class SynthCase(Case):
    """A Case plus the hidden routing ground truth."""

    required_sequence: tuple[int, ...] = ()
    clue_tokens: tuple[str, ...] = ()
    label: str = ""

    def to_dict(self) -> dict:
        out = super().to_dict()
        out["required_sequence"] = list(self.required_sequence)
        out["clue_tokens"] = list(self.clue_tokens)
        out["label"] = self.label
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "SynthCase":
        return cls(
            id=d["id"],
            question=d["question"],
            answer=d["answer"],
            caption=d.get("caption"),
            required_sequence=tuple(d["required_sequence"]),
            clue_tokens=tuple(d["clue_tokens"]),
            label=d["label"],
        )


@dataclass
class SynthWorld:
    seed: int
    k: int
    vocab: list[list[str]]
    pool: SpecialistPool
    cases: list[SynthCase]

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "k": self.k,
            "vocab": self.vocab,
            "pool": self.pool.to_dict(),
            "cases": [c.to_dict() for c in self.cases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthWorld":
        return cls(
            seed=d["seed"],
            k=d["k"],
            vocab=[list(v) for v in d["vocab"]],
            pool=SpecialistPool.from_dict(d["pool"]),
            cases=[SynthCase.from_dict(c) for c in d["cases"]],
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_dict(), sort_keys=True) + "\n", encoding="utf-8"
        )

    @classmethod
    def load(cls, path: str | Path) -> "SynthWorld":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _specialties(k: int) -> list[tuple[str, list[str]]]:
    out = list(_SPECIALTY_BANK[:k])
    for n in range(len(out), k):
        out.append(
            (f"Specialty{n}Consultant", [f"kw{n}{chr(ord('a') + j)}" for j in range(10)])
        )
    return out


def generate_world(seed: int, k: int, n_cases: int, max_seq_len: int) -> SynthWorld:
    """Seeded, fully deterministic world generation."""
    if k < 2:
        raise ValueError("k must be >= 2")
    if n_cases < 1:
        raise ValueError("n_cases must be >= 1")
    if not 1 <= max_seq_len <= 3:
        raise ValueError("max_seq_len must be in [1, 3]")
    rng = np.random.default_rng(seed)
    specialties = _specialties(k)
    vocab = [list(words) for _, words in specialties]
    flat = [w for words in vocab for w in words]
    if len(set(flat)) != len(flat):
        raise AssertionError("specialty vocabularies must be disjoint")

    pool = SpecialistPool(
        specialists=tuple(
            Specialist(
                role_name=name,
                responsibility=(
                    f"Evaluates findings such as {', '.join(words[:6])} and gives a"
                    f" focused {name.lower()} assessment of the presenting complaint."
                ),
            )
            for name, words in specialties
        )
    )

    cases: list[SynthCase] = []
    for i in range(n_cases):
        case_id = f"synth-{i:04d}"
        seq_len = int(rng.integers(1, max_seq_len + 1))
        required = tuple(int(j) for j in rng.choice(k, size=seq_len, replace=False))
        clues = tuple(f"marker-{case_id}-{j}" for j in range(seq_len))
        label = f"condition-{case_id}"

        # sorted keyword runs repeat across cases of one specialty, which keeps
        # their hashed bigrams signal instead of per-question noise
        primary = sorted(vocab[required[0]][int(j)] for j in rng.choice(10, size=5, replace=False))
        parts = ["Patient reports: " + ", ".join(primary) + "."]
        for spec_idx in required[1:]:
            hints = sorted(vocab[spec_idx][int(j)] for j in rng.choice(10, size=2, replace=False))
            parts.append("Records also note: " + ", ".join(hints) + ".")
        cases.append(
            SynthCase(
                id=case_id,
                question=" ".join(parts),
                answer=label,
                required_sequence=required,
                clue_tokens=clues,
                label=label,
            )
        )
    return SynthWorld(seed=seed, k=k, vocab=vocab, pool=pool, cases=cases)


def _next_unmet(case: SynthCase, record: DiagnosticRecord) -> int | None:
    """Index into required_sequence of the first clue not yet in the record."""
    texts = [d.text for d in record.entries]
    for j, clue in enumerate(case.clue_tokens):
        if not any(clue in t for t in texts):
            return j
    return None


def specialist_respond(
    world: SynthWorld, case: SynthCase, specialist_index: int, record: DiagnosticRecord
) -> str:
    """The clue token is revealed only by the next unmet required specialist."""
    if not 0 <= specialist_index < world.k:
        raise ValueError(f"specialist index {specialist_index} out of range")
    j = _next_unmet(case, record)
    if j is not None and case.required_sequence[j] == specialist_index:
        return f"FINDING: {case.clue_tokens[j]}"
    return NO_FINDING


def moderator_respond(world: SynthWorld, case: SynthCase, record: DiagnosticRecord) -> str:
    """Emit the label iff every clue appears in the record in required order."""
    positions = []
    for clue in case.clue_tokens:
        pos = next((i for i, d in enumerate(record.entries) if clue in d.text), None)
        if pos is None:
            return INCONCLUSIVE
        positions.append(pos)
    if all(a < b for a, b in zip(positions, positions[1:])):
        return case.label
    return INCONCLUSIVE


def reward_model(pred: str, gt: str) -> int:
    """Exact match after trimming and case-folding."""
    return int(pred.strip().casefold() == gt.strip().casefold())


def random_baseline(
    world: SynthWorld,
    episodes: int,
    max_steps: int,
    rng: np.random.Generator,
    gamma: float = 0.98,
) -> tuple[float, float]:
    """Monte-Carlo (mean reward, accuracy) under uniform-random valid actions.

    Masking is honored: no repeats, STOP only after the first consultation.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    total_reward = 0.0
    correct = 0
    n_cases = len(world.cases)
    for _ in range(episodes):
        case = world.cases[int(rng.integers(n_cases))]
        record = DiagnosticRecord()
        consulted: set[int] = set()
        for step in range(1, max_steps + 1):
            options = [i for i in range(world.k) if i not in consulted]
            if step > 1:
                options.append(world.k)  # STOP
            choice = options[int(rng.integers(len(options)))]
            if choice == world.k:
                break
            text = specialist_respond(world, case, choice, record)
            append_diagnosis(
                record,
                Diagnosis(choice, world.pool.specialists[choice].role_name, text, step),
            )
            consulted.add(choice)
        pred = moderator_respond(world, case, record)
        rm = reward_model(pred, case.answer)
        correct += rm
        total_reward += (gamma ** len(consulted)) * rm
    return total_reward / episodes, correct / episodes


@dataclass
class SynthEnvironment:
    """Environment adapter over a SynthWorld (pure and deterministic)."""

    world: SynthWorld
    _by_id: dict[str, SynthCase] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self._by_id = {c.id: c for c in self.world.cases}

    def _resolve(self, case: Case) -> SynthCase:
        if isinstance(case, SynthCase):
            return case
        try:
            return self._by_id[case.id]
        except KeyError:
            raise KeyError(f"case {case.id!r} is not part of this world") from None

    def prepare_case(self, case: Case) -> Case:
        return case

    def specialist_call(self, case: Case, specialist: Specialist, record: DiagnosticRecord) -> str:
        idx = self.world.pool.index_of(specialist.role_name)
        return specialist_respond(self.world, self._resolve(case), idx, record)

    def moderator_call(self, case: Case, record: DiagnosticRecord) -> str:
        return moderator_respond(self.world, self._resolve(case), record)

    def reward(self, pred: str, gt: str) -> int:
        return reward_model(pred, gt)
