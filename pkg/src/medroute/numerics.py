"""Minimal dense-tensor math with reverse-mode differentiation.

A small tape-based autodiff over numpy float32 arrays, covering exactly the
op set the routing network needs (projections, pre-norm attention blocks,
layer norm, masked log-softmax), plus an AdamW optimizer and a
finite-difference gradient checker. No GPU, no sparsity, no generality
beyond that.

Masked logits use the finite sentinel MASK_SENTINEL rather than a literal
-inf so tensors stay NaN/Inf-free; anything <= MASK_SENTINEL / 2 is treated
as masked.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

MASK_SENTINEL = np.float32(-1e30)
_LN_EPS = 1e-5


class NumericsError(ValueError):
    """Shape mismatch, non-finite values, or an empty action set."""


class Tensor:
    """Dense row-major array of 32-bit reals (float64 only inside gradcheck)."""

    __slots__ = ("data",)

    def __init__(self, data, dtype=np.float32):
        self.data = np.ascontiguousarray(data, dtype=dtype)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.data.dtype)

    def tolist(self) -> list:
        return self.data.tolist()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"


def require_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite values in {what}")
    return arr


def softmax_row(logits: "Tensor | np.ndarray") -> "Tensor | np.ndarray":
    """Stable softmax of a 1-D logits row; sentinel-masked entries map to exact 0."""
    wrap = isinstance(logits, Tensor)
    x = logits.data if wrap else np.asarray(logits)
    if x.ndim != 1 or x.size < 1:
        raise NumericsError(f"softmax_row expects a 1-D row, got shape {x.shape}")
    masked = x <= MASK_SENTINEL / 2
    if masked.all():
        raise NumericsError("empty action set")
    live = x[~masked].astype(np.float64)
    require_finite(live, "softmax_row logits")
    e = np.exp(live - live.max())
    out = np.zeros(x.shape, dtype=x.dtype)
    out[~masked] = (e / e.sum()).astype(x.dtype)
    return Tensor(out, dtype=x.dtype) if wrap else out


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


@dataclass
class Node:
    op: str
    parents: tuple[int, ...]
    value: np.ndarray
    # maps the output gradient to one gradient per parent; None for leaves/constants
    backward_fn: Callable[[np.ndarray], tuple[np.ndarray, ...]] | None = None


@dataclass
class Tape:
    """Topologically ordered op recording; backward walks it once in reverse."""

    nodes: list[Node] = field(default_factory=list)
    leaf_ids: list[int] = field(default_factory=list)

    def _push(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def value(self, nid: int) -> np.ndarray:
        return self.nodes[nid].value

    def constant(self, arr) -> int:
        data = arr.data if isinstance(arr, Tensor) else np.asarray(arr)
        return self._push(Node("const", (), data))

    def leaf(self, t: Tensor) -> int:
        nid = self._push(Node("leaf", (), t.data))
        self.leaf_ids.append(nid)
        return nid

    # -- arithmetic -------------------------------------------------------

    def add(self, a: int, b: int) -> int:
        va, vb = self.value(a), self.value(b)
        out = va + vb

        def bwd(g):
            return _unbroadcast(g, va.shape), _unbroadcast(g, vb.shape)

        return self._push(Node("add", (a, b), out, bwd))

    def mul_const(self, a: int, c: float) -> int:
        va = self.value(a)
        cc = va.dtype.type(c)
        return self._push(Node("mul_const", (a,), va * cc, lambda g: (g * cc,)))

    def matmul(self, a: int, b: int) -> int:
        """1-D @ 2-D or 2-D @ 2-D matrix product."""
        va, vb = self.value(a), self.value(b)
        if vb.ndim != 2 or va.shape[-1] != vb.shape[0]:
            raise NumericsError(f"matmul shape mismatch: {va.shape} @ {vb.shape}")
        out = va @ vb

        def bwd(g):
            if va.ndim == 1:
                return g @ vb.T, np.outer(va, g)
            return g @ vb.T, va.T @ g

        return self._push(Node("matmul", (a, b), out, bwd))

    def relu(self, a: int) -> int:
        va = self.value(a)
        keep = va > 0
        return self._push(Node("relu", (a,), va * keep, lambda g: (g * keep,)))

    def mean_rows(self, a: int) -> int:
        """[T, d] -> [d] mean over rows."""
        va = self.value(a)
        t = va.shape[0]
        out = va.mean(axis=0)

        def bwd(g):
            return (np.broadcast_to(g / va.dtype.type(t), va.shape).astype(va.dtype),)

        return self._push(Node("mean_rows", (a,), out, bwd))

    def stack_rows(self, ids: list[int]) -> int:
        """List of [d] vectors -> [T, d] matrix."""
        vals = [self.value(i) for i in ids]
        out = np.stack(vals, axis=0)

        def bwd(g):
            return tuple(g[i] for i in range(len(ids)))

        return self._push(Node("stack_rows", tuple(ids), out, bwd))

    def slice_row(self, a: int, i: int) -> int:
        va = self.value(a)
        out = va[i]

        def bwd(g):
            ga = np.zeros_like(va)
            ga[i] = g
            return (ga,)

        return self._push(Node("slice_row", (a,), out, bwd))

    def slice_vec(self, a: int, start: int, stop: int) -> int:
        """Contiguous slice of a 1-D vector."""
        va = self.value(a)
        out = va[start:stop]

        def bwd(g):
            ga = np.zeros_like(va)
            ga[start:stop] = g
            return (ga,)

        return self._push(Node("slice_vec", (a,), out, bwd))

    def stack_scalars(self, ids: list[int]) -> int:
        """List of scalar (or 1-element) nodes -> [n] vector."""
        vals = [np.reshape(self.value(i), ()) for i in ids]
        out = np.stack(vals).astype(vals[0].dtype)

        def bwd(g):
            return tuple(np.reshape(g[i], self.value(nid).shape) for i, nid in enumerate(ids))

        return self._push(Node("stack_scalars", tuple(ids), out, bwd))

    def sum_all(self, a: int) -> int:
        va = self.value(a)
        out = np.asarray(va.sum(), dtype=va.dtype)

        def bwd(g):
            return (np.broadcast_to(g, va.shape).astype(va.dtype),)

        return self._push(Node("sum_all", (a,), out, bwd))

    def mul(self, a: int, b: int) -> int:
        va, vb = self.value(a), self.value(b)
        out = va * vb

        def bwd(g):
            return _unbroadcast(g * vb, va.shape), _unbroadcast(g * va, vb.shape)

        return self._push(Node("mul", (a, b), out, bwd))

    # -- network layers ---------------------------------------------------

    def layer_norm(self, a: int, gain: int, bias: int) -> int:
        """Row-wise layer norm over the last axis: gain * (x - mu) / sigma + bias."""
        x, g_, b_ = self.value(a), self.value(gain), self.value(bias)
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        sigma = np.sqrt(var + x.dtype.type(_LN_EPS))
        xhat = (x - mu) / sigma
        out = g_ * xhat + b_

        def bwd(g):
            d = x.shape[-1]
            gxhat = g * g_
            m1 = gxhat.mean(axis=-1, keepdims=True)
            m2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
            dx = (gxhat - m1 - xhat * m2) / sigma
            dgain = (g * xhat).reshape(-1, d).sum(axis=0).reshape(g_.shape)
            dbias = g.reshape(-1, d).sum(axis=0).reshape(b_.shape)
            return dx.astype(x.dtype), dgain.astype(x.dtype), dbias.astype(x.dtype)

        return self._push(Node("layer_norm", (a, gain, bias), out, bwd))

    def attention(self, q: int, k: int, v: int, n_heads: int) -> int:
        """Full (bidirectional) multi-head scaled dot-product attention.

        q, k, v: [T, d] with d divisible by n_heads; returns [T, d].
        """
        vq, vk, vv = self.value(q), self.value(k), self.value(v)
        t, d = vq.shape
        if d % n_heads != 0:
            raise NumericsError(f"model dim {d} not divisible by {n_heads} heads")
        dh = d // n_heads
        scale = vq.dtype.type(1.0 / math.sqrt(dh))

        def split(x):  # [T, d] -> [H, T, dh]
            return x.reshape(t, n_heads, dh).transpose(1, 0, 2)

        hq, hk, hv = split(vq), split(vk), split(vv)
        scores = (hq @ hk.transpose(0, 2, 1)) * scale  # [H, T, T]
        scores = scores - scores.max(axis=-1, keepdims=True)
        e = np.exp(scores)
        p = e / e.sum(axis=-1, keepdims=True)
        out_h = p @ hv  # [H, T, dh]
        out = out_h.transpose(1, 0, 2).reshape(t, d)

        def bwd(g):
            gh = g.reshape(t, n_heads, dh).transpose(1, 0, 2)
            dv_h = p.transpose(0, 2, 1) @ gh
            dp = gh @ hv.transpose(0, 2, 1)
            ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
            ds = ds * scale
            dq_h = ds @ hk
            dk_h = ds.transpose(0, 2, 1) @ hq

            def merge(x):  # [H, T, dh] -> [T, d]
                return x.transpose(1, 0, 2).reshape(t, d)

            return merge(dq_h), merge(dk_h), merge(dv_h)

        return self._push(Node("attention", (q, k, v), out, bwd))

    def cosine(self, a: int, b: int) -> int:
        """Cosine similarity of two vectors -> scalar node."""
        va, vb = self.value(a), self.value(b)
        na, nb = np.linalg.norm(va), np.linalg.norm(vb)
        if na == 0 or nb == 0:
            raise NumericsError("cosine of zero-norm vector")
        c = float(va @ vb) / float(na * nb)
        out = np.asarray(c, dtype=va.dtype)

        def bwd(g):
            gs = float(g)
            da = gs * (vb / (na * nb) - c * va / (na * na))
            db = gs * (va / (na * nb) - c * vb / (nb * nb))
            return da.astype(va.dtype), db.astype(vb.dtype)

        return self._push(Node("cosine", (a, b), out, bwd))

    def div_by_scalar(self, a: int, s: int) -> int:
        """Divide node a by a scalar (shape [] or [1]) parameter node."""
        va, vs = self.value(a), self.value(s)
        sv = float(np.reshape(vs, ()))
        out = va / va.dtype.type(sv)

        def bwd(g):
            da = g / va.dtype.type(sv)
            ds = np.asarray(-(g * va).sum() / (sv * sv), dtype=vs.dtype).reshape(vs.shape)
            return da, ds

        return self._push(Node("div_by_scalar", (a, s), out, bwd))

    def masked_log_prob(self, logits: int, mask: np.ndarray, index: int, temperature: float = 1.0) -> int:
        """log softmax(logits / temperature over mask-true entries)[index] -> scalar.

        The chosen index must be unmasked; temperature must be positive.
        """
        x = self.value(logits)
        if temperature <= 0:
            raise NumericsError("masked_log_prob needs temperature > 0")
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise NumericsError("empty action set")
        if not mask[index]:
            raise NumericsError(f"chosen index {index} is masked")
        z = x.astype(np.float64) / temperature
        z_live = np.where(mask, z, -np.inf)
        m = z_live.max()
        e = np.exp(z_live - m)
        denom = e.sum()
        p = e / denom
        out = np.asarray(math.log(p[index]), dtype=x.dtype)

        def bwd(g):
            gs = float(g)
            onehot = np.zeros_like(p)
            onehot[index] = 1.0
            dx = gs * (onehot - p) / temperature
            dx[~mask] = 0.0
            return (dx.astype(x.dtype),)

        return self._push(Node("masked_log_prob", (logits,), out, bwd))

    def custom(
        self,
        op: str,
        parents: tuple[int, ...],
        value,
        backward_fn: Callable[[np.ndarray], tuple[np.ndarray, ...]] | None,
    ) -> int:
        """Escape hatch for ops defined outside the tape (tests, probes)."""
        return self._push(Node(op, tuple(parents), np.asarray(value), backward_fn))

    # -- reverse pass -----------------------------------------------------

    def backward(self, loss_id: int) -> dict[int, np.ndarray]:
        """Accumulate gradients of a scalar loss node w.r.t. every leaf.

        Leaves not on any path to the loss get zero gradients.
        """
        loss = self.nodes[loss_id]
        if np.size(loss.value) != 1:
            raise NumericsError(f"loss must be scalar, got shape {loss.value.shape}")
        grads: dict[int, np.ndarray] = {
            loss_id: np.ones_like(loss.value).reshape(loss.value.shape)
        }
        for nid in range(loss_id, -1, -1):
            node = self.nodes[nid]
            if node.backward_fn is None:
                continue  # leaf or constant: any accumulated gradient stays put
            g = grads.pop(nid, None)
            if g is None:
                continue  # not on a path to the loss
            for pid, pg in zip(node.parents, node.backward_fn(g)):
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg
        out = {}
        for lid in self.leaf_ids:
            out[lid] = grads.get(lid, np.zeros_like(self.nodes[lid].value))
        return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a gradient back to the shape of a broadcast operand."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.astype(g.dtype)


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------


@dataclass
class AdamWState:
    """Decoupled-weight-decay Adam moments, keyed like the parameter dict."""

    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(state: AdamWState, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> None:
    """One in-place AdamW update with bias-corrected moments."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient for {name}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name].astype(np.float64)
        m = state.m.setdefault(name, np.zeros(p.shape, dtype=np.float64))
        v = state.v.setdefault(name, np.zeros(p.shape, dtype=np.float64))
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        mhat = m / bc1
        vhat = v / bc2
        w = p.data.astype(np.float64)
        w -= state.lr * (mhat / (np.sqrt(vhat) + state.eps) + state.weight_decay * w)
        p.data = w.astype(p.data.dtype)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict[str, float]
    coords_checked: int


def gradcheck(
    graph_builder: Callable[[Tape, dict[str, int]], int],
    params: dict[str, Tensor],
    h: float = 1e-3,
    max_coords: int = 200,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    graph_builder receives a fresh tape plus leaf node ids (one per
    parameter) and returns the scalar loss node. Evaluation runs in float64
    so the comparison measures the backward formulas, not float32 noise.
    Relative error per coordinate is |a - n| / max(|a|, |n|, 1e-8).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    work = {name: Tensor(p.data, dtype=np.float64) for name, p in params.items()}

    def run(ps: dict[str, Tensor]) -> tuple[float, dict[str, np.ndarray]]:
        tape = Tape()
        leaf_ids = {name: tape.leaf(t) for name, t in ps.items()}
        loss_id = graph_builder(tape, leaf_ids)
        grads = tape.backward(loss_id)
        return float(np.reshape(tape.value(loss_id), ())), {
            name: grads[leaf_ids[name]] for name in ps
        }

    _, analytic = run(work)

    coords: list[tuple[str, int]] = []
    for name, t in work.items():
        coords.extend((name, i) for i in range(t.size))
    rng = np.random.default_rng(seed)
    if len(coords) > max_coords:
        picked = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(picked)]

    per_param: dict[str, float] = {name: 0.0 for name in work}
    worst = 0.0
    for name, flat_idx in coords:
        base = work[name].data
        orig = base.flat[flat_idx]
        base.flat[flat_idx] = orig + h
        lp, _ = run(work)
        base.flat[flat_idx] = orig - h
        lm, _ = run(work)
        base.flat[flat_idx] = orig
        numeric = (lp - lm) / (2.0 * h)
        a = float(analytic[name].flat[flat_idx])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        per_param[name] = max(per_param[name], rel)
        worst = max(worst, rel)
    return GradCheckReport(max_rel_error=worst, per_param=per_param, coords_checked=len(coords))


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape: tuple[int, ...]) -> Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(np.float32))
