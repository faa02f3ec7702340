"""Deterministic text embedders for the router's task, role, and history vectors.

Signed feature hashing over unigrams and bigrams: each token is mapped by two
seeded hash functions to a coordinate (mod dim) and a sign, accumulated, and
L2-normalized. Frozen featurizers; only the router's projectors and
transformer learn.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .core import Case, DiagnosticRecord, Specialist, render_history
from .numerics import Tensor

_TOKEN_SPLIT = re.compile(r"[^0-9a-z]+")

EmbeddingKind = Literal["task", "role", "history"]


@dataclass(frozen=True)
class EmbedConfig:
    dim: int = 64
    hash_seed: int = 7

    def __post_init__(self) -> None:
        if self.dim < 8:
            raise ValueError("embedding dim must be >= 8")

    def to_dict(self) -> dict:
        return {"dim": self.dim, "hash_seed": self.hash_seed}

    @classmethod
    def from_dict(cls, d: dict) -> "EmbedConfig":
        return cls(dim=d["dim"], hash_seed=d["hash_seed"])


@dataclass(frozen=True)
class Embedding:
    """Unit-norm feature vector (exactly zero for empty source text)."""

    vector: Tensor
    kind: EmbeddingKind


def _tokens(text: str) -> list[str]:
    words = [w for w in _TOKEN_SPLIT.split(text.lower()) if w]
    return words + [f"{a} {b}" for a, b in zip(words, words[1:])]


def _hash(token: str, seed: int, stream: int) -> int:
    key = f"{seed}:{stream}".encode()
    digest = hashlib.blake2b(token.encode(), key=key, digest_size=8).digest()
    return int.from_bytes(digest, "little")


def hash_embed(text: str, cfg: EmbedConfig, kind: EmbeddingKind = "task") -> Embedding:
    """Signed feature hashing of unigrams + bigrams; empty token set -> zero vector."""
    vec = np.zeros(cfg.dim, dtype=np.float32)
    for tok in _tokens(text):
        idx = _hash(tok, cfg.hash_seed, 1) % cfg.dim
        sign = 1.0 if _hash(tok, cfg.hash_seed, 2) % 2 == 0 else -1.0
        vec[idx] += sign
    norm = float(np.linalg.norm(vec))
    if norm > 0:
        vec /= np.float32(norm)
    return Embedding(vector=Tensor(vec), kind=kind)


def task_embed(case: Case, cfg: EmbedConfig) -> Embedding:
    """Embed the question, fused with the caption when one is present."""
    text = case.question if not case.caption else f"{case.question} {case.caption}"
    return hash_embed(text, cfg, kind="task")


def role_embed(s: Specialist, cfg: EmbedConfig) -> Embedding:
    text = f"{s.role_name} {s.responsibility}" if s.responsibility else s.role_name
    return hash_embed(text, cfg, kind="role")


def history_embed(record: DiagnosticRecord, cfg: EmbedConfig, max_chars: int = 2048) -> Embedding:
    """Embed the rendered record; an empty record embeds to the exact zero vector."""
    return hash_embed(render_history(record, max_chars), cfg, kind="history")


def cosine_similarity(a: Embedding, b: Embedding) -> float:
    va, vb = a.vector.data, b.vector.data
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0 or nb == 0:
        return 0.0
    return float(va @ vb / (na * nb))
