"""The specialist allocator: token assembly, routing transformer, and heads.

The network consumes one token per context element (task, each candidate
role, history, specialist vector, specialist-history vector), runs two
pre-norm bidirectional attention blocks, mean-pools, and scores the k
candidate actions plus an explicit STOP action with either an MLP head or a
cosine-similarity head. Already-consulted specialists are masked out; STOP
is masked at step 1 so at least one specialist is always consulted.
"""

from __future__ import annotations

import base64
import binascii
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import STOP_ACTION
from .embed import EmbedConfig, Embedding
from .numerics import (
    MASK_SENTINEL,
    NumericsError,
    Tape,
    Tensor,
    softmax_row,
    xavier_uniform,
)

CHECKPOINT_VERSION = 1

HEADS = ("mlp", "cosine")


class RouterError(ValueError):
    """Invalid router input (pool too large, empty action set, bad shapes)."""


class CheckpointError(ValueError):
    """Base class for checkpoint load failures."""


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class UnknownVersionError(CheckpointError):
    pass


@dataclass(frozen=True)
class RouterConfig:
    d: int = 64
    hidden: int = 64
    k_max: int = 16
    n_heads: int = 4
    n_blocks: int = 2
    head: str = "mlp"
    embed: EmbedConfig = field(default_factory=EmbedConfig)

    def __post_init__(self) -> None:
        if self.d % self.n_heads != 0:
            raise ValueError(f"d={self.d} not divisible by n_heads={self.n_heads}")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}")
        if self.k_max < 1 or self.hidden < 1 or self.n_blocks < 1:
            raise ValueError("k_max, hidden, n_blocks must be positive")

    @property
    def embed_dim(self) -> int:
        return self.embed.dim

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "hidden": self.hidden,
            "k_max": self.k_max,
            "n_heads": self.n_heads,
            "n_blocks": self.n_blocks,
            "head": self.head,
            "embed": self.embed.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RouterConfig":
        return cls(
            d=d["d"],
            hidden=d["hidden"],
            k_max=d["k_max"],
            n_heads=d["n_heads"],
            n_blocks=d["n_blocks"],
            head=d["head"],
            embed=EmbedConfig.from_dict(d["embed"]),
        )


def _param_specs(cfg: RouterConfig) -> list[tuple[str, tuple[int, ...], str]]:
    d, e, hid, ff = cfg.d, cfg.embed_dim, cfg.hidden, 4 * cfg.d
    specs: list[tuple[str, tuple[int, ...], str]] = [
        ("input_proj", (e, d), "xavier"),
        ("sv_proj", (d, d), "xavier"),
        ("shv_proj", (d, d), "xavier"),
        ("type_task", (d,), "type"),
        ("type_role", (d,), "type"),
        ("type_history", (d,), "type"),
        ("type_sv", (d,), "type"),
        ("type_shv", (d,), "type"),
    ]
    for i in range(cfg.n_blocks):
        specs += [
            (f"block{i}_ln1_gain", (d,), "ones"),
            (f"block{i}_ln1_bias", (d,), "zeros"),
            (f"block{i}_wq", (d, d), "xavier"),
            (f"block{i}_wk", (d, d), "xavier"),
            (f"block{i}_wv", (d, d), "xavier"),
            (f"block{i}_wo", (d, d), "xavier"),
            (f"block{i}_ln2_gain", (d,), "ones"),
            (f"block{i}_ln2_bias", (d,), "zeros"),
            (f"block{i}_fc1", (d, ff), "xavier"),
            (f"block{i}_fc1_bias", (ff,), "zeros"),
            (f"block{i}_fc2", (ff, d), "xavier"),
            (f"block{i}_fc2_bias", (d,), "zeros"),
        ]
    specs += [
        ("final_ln_gain", (d,), "ones"),
        ("final_ln_bias", (d,), "zeros"),
        ("head_w1", (d, hid), "xavier"),
        ("head_b1", (hid,), "zeros"),
        ("head_w2", (hid, cfg.k_max + 1), "head"),
        ("head_b2", (cfg.k_max + 1,), "zeros"),
        ("cosine_temp", (1,), "ones"),
        ("cosine_stop_bias", (1,), "zeros"),
    ]
    return specs


@dataclass
class RouterParams:
    """All learnable tensors, keyed by name; config travels with them."""

    config: RouterConfig
    tensors: dict[str, Tensor]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def copy(self) -> "RouterParams":
        return RouterParams(self.config, {k: t.copy() for k, t in self.tensors.items()})

    def allclose(self, other: "RouterParams", atol: float = 0.0) -> bool:
        if set(self.tensors) != set(other.tensors):
            return False
        return all(
            np.allclose(t.data, other.tensors[k].data, atol=atol, rtol=0.0)
            for k, t in self.tensors.items()
        )


def init_router_params(cfg: RouterConfig, seed: int = 0, zero_head: bool = True) -> RouterParams:
    """Seeded Xavier-uniform init; head output layer starts at zero by default
    so the initial policy is uniform over unmasked actions."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    for name, shape, kind in _param_specs(cfg):
        if kind == "xavier":
            tensors[name] = xavier_uniform(rng, shape[0], shape[-1], shape)
        elif kind == "head":
            if zero_head:
                tensors[name] = Tensor(np.zeros(shape, dtype=np.float32))
            else:
                tensors[name] = xavier_uniform(rng, shape[0], shape[-1], shape)
        elif kind == "type":
            tensors[name] = xavier_uniform(rng, 1, shape[0], shape)
        elif kind == "ones":
            tensors[name] = Tensor(np.ones(shape, dtype=np.float32))
        else:
            tensors[name] = Tensor(np.zeros(shape, dtype=np.float32))
    return RouterParams(config=cfg, tensors=tensors)


# ---------------------------------------------------------------------------
# Actions and forward outputs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Action:
    """Either a specialist index in [0, k) or STOP."""

    index: int | None = None

    @property
    def is_stop(self) -> bool:
        return self.index is None

    def to_json(self) -> int | str:
        return STOP_ACTION if self.index is None else self.index

    @classmethod
    def stop(cls) -> "Action":
        return cls(index=None)


@dataclass
class RouterInput:
    """Assembled token matrix plus the action mask for one routing step."""

    tokens: Tensor  # [T, d], T = k + 4
    role_slice: tuple[int, int]
    mask: np.ndarray  # bool [k+1]; index k = STOP
    k: int


@dataclass
class RouterOutput:
    logits: Tensor  # [k+1], sentinel at masked entries
    dist: Tensor  # [k+1], exact zeros at masked entries
    pooled: Tensor  # [d]


def build_mask(k: int, consulted: set[int], step: int) -> np.ndarray:
    """Selectable-action mask: consulted specialists off, STOP off at step 1."""
    mask = np.ones(k + 1, dtype=bool)
    for i in consulted:
        if not 0 <= i < k:
            raise RouterError(f"consulted index {i} outside pool of size {k}")
        mask[i] = False
    mask[k] = step > 1
    if not mask.any():
        raise RouterError("empty action set: everything masked")
    return mask


def apply_mask(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    out = logits.copy()
    out[~mask] = MASK_SENTINEL
    return out


# ---------------------------------------------------------------------------
# Graph construction (shared by inference and training)
# ---------------------------------------------------------------------------


def bind_params(tape: Tape, params: RouterParams, trainable: bool) -> dict[str, int]:
    """Put every parameter on the tape, as leaves (trainable) or constants."""
    put = tape.leaf if trainable else tape.constant
    return {name: put(t) for name, t in params.tensors.items()}


def _token_nodes(
    tape: Tape,
    bp: dict[str, int],
    q: Embedding,
    roles: list[Embedding],
    h: Embedding,
) -> tuple[int, list[int]]:
    """Project embeddings to model space, add type embeddings, stack to [T, d]."""
    proj_q = tape.matmul(tape.constant(q.vector), bp["input_proj"])
    task_tok = tape.add(proj_q, bp["type_task"])
    role_toks = [
        tape.add(tape.matmul(tape.constant(r.vector), bp["input_proj"]), bp["type_role"])
        for r in roles
    ]
    hist_tok = tape.add(
        tape.matmul(tape.constant(h.vector), bp["input_proj"]), bp["type_history"]
    )
    sv_tok = tape.add(tape.matmul(proj_q, bp["sv_proj"]), bp["type_sv"])
    shv_tok = tape.add(tape.matmul(proj_q, bp["shv_proj"]), bp["type_shv"])
    tokens = tape.stack_rows([task_tok] + role_toks + [hist_tok, sv_tok, shv_tok])
    return tokens, role_toks


def _block_nodes(tape: Tape, bp: dict[str, int], i: int, x: int, n_heads: int) -> int:
    a = tape.layer_norm(x, bp[f"block{i}_ln1_gain"], bp[f"block{i}_ln1_bias"])
    att = tape.attention(
        tape.matmul(a, bp[f"block{i}_wq"]),
        tape.matmul(a, bp[f"block{i}_wk"]),
        tape.matmul(a, bp[f"block{i}_wv"]),
        n_heads,
    )
    x = tape.add(x, tape.matmul(att, bp[f"block{i}_wo"]))
    m = tape.layer_norm(x, bp[f"block{i}_ln2_gain"], bp[f"block{i}_ln2_bias"])
    h1 = tape.relu(tape.add(tape.matmul(m, bp[f"block{i}_fc1"]), bp[f"block{i}_fc1_bias"]))
    f = tape.add(tape.matmul(h1, bp[f"block{i}_fc2"]), bp[f"block{i}_fc2_bias"])
    return tape.add(x, f)


def _pooled_node(tape: Tape, bp: dict[str, int], cfg: RouterConfig, tokens: int) -> int:
    x = tokens
    for i in range(cfg.n_blocks):
        x = _block_nodes(tape, bp, i, x, cfg.n_heads)
    # pre-norm stacks need a final norm before anything consumes the stream
    x = tape.layer_norm(x, bp["final_ln_gain"], bp["final_ln_bias"])
    return tape.mean_rows(x)


def _mlp_logits_node(tape: Tape, bp: dict[str, int], pooled: int, k: int) -> int:
    h1 = tape.relu(tape.add(tape.matmul(pooled, bp["head_w1"]), bp["head_b1"]))
    full = tape.add(tape.matmul(h1, bp["head_w2"]), bp["head_b2"])
    return tape.slice_vec(full, 0, k + 1)


def _cosine_logits_node(
    tape: Tape, bp: dict[str, int], pooled: int, role_toks: list[int]
) -> int:
    if float(np.linalg.norm(tape.value(pooled))) == 0.0:
        raise RouterError("degenerate pooled state")
    scaled = [
        tape.div_by_scalar(tape.cosine(pooled, rt), bp["cosine_temp"]) for rt in role_toks
    ]
    return tape.stack_scalars(scaled + [bp["cosine_stop_bias"]])


def step_graph(
    tape: Tape,
    bp: dict[str, int],
    cfg: RouterConfig,
    q: Embedding,
    roles: list[Embedding],
    h: Embedding,
    consulted: set[int],
    step: int,
    head: str | None = None,
) -> tuple[int, int, np.ndarray]:
    """Full routing-step graph; returns (logits node, pooled node, mask)."""
    k = len(roles)
    if k > cfg.k_max:
        raise RouterError(f"pool size {k} exceeds k_max={cfg.k_max}")
    if k < 1:
        raise RouterError("pool must not be empty")
    head = head or cfg.head
    if head not in HEADS:
        raise RouterError(f"unknown head {head!r}")
    mask = build_mask(k, consulted, step)
    tokens, role_toks = _token_nodes(tape, bp, q, roles, h)
    pooled = _pooled_node(tape, bp, cfg, tokens)
    if head == "mlp":
        logits = _mlp_logits_node(tape, bp, pooled, k)
    else:
        logits = _cosine_logits_node(tape, bp, pooled, role_toks)
    return logits, pooled, mask


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------


def assemble_input(
    q: Embedding,
    roles: list[Embedding],
    h: Embedding,
    params: RouterParams,
    consulted: set[int],
    step: int,
) -> RouterInput:
    """Build the [task, roles..., history, sv, shv] token matrix and action mask."""
    k = len(roles)
    if k > params.config.k_max:
        raise RouterError(f"pool size {k} exceeds k_max={params.config.k_max}")
    tape = Tape()
    bp = bind_params(tape, params, trainable=False)
    tokens, _ = _token_nodes(tape, bp, q, roles, h)
    return RouterInput(
        tokens=Tensor(tape.value(tokens)),
        role_slice=(1, 1 + k),
        mask=build_mask(k, consulted, step),
        k=k,
    )


def _run_on_tokens(params: RouterParams, rin: RouterInput, head: str, roles: list[Embedding] | None) -> RouterOutput:
    tape = Tape()
    bp = bind_params(tape, params, trainable=False)
    tokens = tape.constant(rin.tokens)
    pooled = _pooled_node(tape, bp, params.config, tokens)
    if head == "mlp":
        logits = _mlp_logits_node(tape, bp, pooled, rin.k)
    else:
        if roles is not None and len(roles) != rin.k:
            raise RouterError(f"got {len(roles)} role embeddings for k={rin.k}")
        role_toks = [tape.slice_row(tokens, 1 + i) for i in range(rin.k)]
        logits = _cosine_logits_node(tape, bp, pooled, role_toks)
    masked = apply_mask(tape.value(logits).copy(), rin.mask)
    return RouterOutput(
        logits=Tensor(masked),
        dist=Tensor(softmax_row(masked)),
        pooled=Tensor(tape.value(pooled)),
    )


def forward_mlp(params: RouterParams, rin: RouterInput) -> RouterOutput:
    """Transformer + 2-layer ReLU head over the first k+1 output units."""
    return _run_on_tokens(params, rin, "mlp", None)


def forward_cosine(params: RouterParams, rin: RouterInput, roles: list[Embedding] | None = None) -> RouterOutput:
    """Transformer + cosine(pool output, projected role tokens) / temperature;
    the STOP logit is a learned scalar bias."""
    try:
        return _run_on_tokens(params, rin, "cosine", roles)
    except NumericsError as exc:
        raise RouterError(str(exc)) from exc


def forward(params: RouterParams, rin: RouterInput, head: str | None = None) -> RouterOutput:
    head = head or params.config.head
    if head == "mlp":
        return forward_mlp(params, rin)
    if head == "cosine":
        return forward_cosine(params, rin)
    raise RouterError(f"unknown head {head!r}")


def block_forward(params: RouterParams, x: Tensor, block: int = 0) -> Tensor:
    """Run one pre-norm residual block on a [T, d] token matrix."""
    if x.data.ndim != 2 or x.shape[1] != params.config.d:
        raise RouterError(f"expected [T, {params.config.d}] tokens, got {x.shape}")
    tape = Tape()
    bp = bind_params(tape, params, trainable=False)
    out = _block_nodes(tape, bp, block, tape.constant(x), params.config.n_heads)
    return Tensor(tape.value(out))


def sampling_distribution(out: RouterOutput, temperature: float) -> np.ndarray:
    """The distribution actions are drawn from: softmax(logits / T) under the
    mask encoded in the sentinel entries; temperature 0 is greedy (one-hot)."""
    logits = out.logits.data
    live = logits > MASK_SENTINEL / 2
    if not live.any():
        raise RouterError("empty action set")
    p = np.zeros(logits.shape, dtype=np.float64)
    if temperature == 0:
        p[int(np.argmax(np.where(live, logits, -np.inf)))] = 1.0
        return p
    z = logits[live].astype(np.float64) / temperature
    e = np.exp(z - z.max())
    p[live] = e / e.sum()
    return p


def sample_action(
    out: RouterOutput, temperature: float, rng: np.random.Generator
) -> tuple[Action, float]:
    """Draw an action (or take argmax for temperature 0) and return its log
    probability under the sampling distribution."""
    if temperature < 0:
        raise RouterError("temperature must be >= 0")
    p = sampling_distribution(out, temperature)
    k_plus_1 = p.shape[0]
    if temperature == 0:
        idx = int(np.argmax(p))
        log_prob = 0.0
    else:
        idx = int(rng.choice(k_plus_1, p=p / p.sum()))
        log_prob = float(np.log(p[idx]))
    action = Action.stop() if idx == k_plus_1 - 1 else Action(index=idx)
    return action, log_prob


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(params: RouterParams, path: str | Path) -> None:
    """Versioned JSON envelope; tensor payloads are base64 little-endian f32."""
    tensors = {}
    for name, t in params.tensors.items():
        payload = t.data.astype("<f4").tobytes()
        tensors[name] = {
            "shape": list(t.shape),
            "data": base64.b64encode(payload).decode("ascii"),
        }
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "config": params.config.to_dict(),
        "tensors": tensors,
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")


def load_checkpoint(path: str | Path) -> RouterParams:
    raw = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise CorruptCheckpointError(f"corrupt payload: {exc}") from exc
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise CorruptCheckpointError("corrupt payload: missing format_version")
    if doc["format_version"] != CHECKPOINT_VERSION:
        raise UnknownVersionError(
            f"unknown checkpoint version {doc['format_version']} (want {CHECKPOINT_VERSION})"
        )
    try:
        cfg = RouterConfig.from_dict(doc["config"])
        entries = doc["tensors"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptCheckpointError(f"corrupt payload: {exc}") from exc

    expected = {name: shape for name, shape, _ in _param_specs(cfg)}
    if set(entries) != set(expected):
        missing = set(expected) ^ set(entries)
        raise CheckpointShapeError(f"tensor set mismatch: {sorted(missing)}")
    tensors: dict[str, Tensor] = {}
    for name, entry in entries.items():
        shape = tuple(entry["shape"])
        if shape != expected[name]:
            raise CheckpointShapeError(
                f"{name}: shape {shape} does not match config-derived {expected[name]}"
            )
        try:
            payload = base64.b64decode(entry["data"], validate=True)
        except (binascii.Error, ValueError) as exc:
            raise CorruptCheckpointError(f"corrupt payload in {name}: {exc}") from exc
        if len(payload) != 4 * math.prod(shape):
            raise CheckpointShapeError(
                f"{name}: payload holds {len(payload) // 4} values, shape wants {math.prod(shape)}"
            )
        arr = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
        tensors[name] = Tensor(arr)
    return RouterParams(config=cfg, tensors=tensors)
