"""Residual mixture of experts over a nested filtration of condition subspaces.

Expert ``i`` (1-based) sees the condition with every group at or beyond
``i - 1`` zeroed, so expert 1 sees all zeros and expert N sees everything.
The gate scores the full condition and the action is the gate-weighted sum
of successive expert increments ``a_i - a_{i-1}``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fileio import write_csv
from .nn.layers import DenseNet, Module, prefixed, softmax


@dataclass(frozen=True)
class PartitionSchema:
    """Group boundaries ``0 = b_0 < b_1 < ... < b_{N-1} = D`` (N-1 groups, N experts)."""

    bounds: tuple
    total: int | None = None

    def __post_init__(self):
        b = tuple(int(x) for x in self.bounds)
        object.__setattr__(self, "bounds", b)
        if len(b) < 1 or b[0] != 0:
            raise ValueError("partition must start at 0")
        if any(b[i + 1] <= b[i] for i in range(len(b) - 1)):
            raise ValueError(f"partition groups must be non-empty and ordered: {b}")
        if len(b) == 1 and not self.total:
            raise ValueError("a single-expert schema needs `total` (the condition width)")
        if self.total is not None and len(b) > 1 and self.total != b[-1]:
            raise ValueError("`total` disagrees with the last boundary")

    @classmethod
    def from_sizes(cls, sizes):
        return cls(tuple(np.concatenate([[0], np.cumsum(sizes)]).astype(int)))

    @property
    def dim(self):
        return self.total if len(self.bounds) == 1 else self.bounds[-1]

    @property
    def n_experts(self):
        return len(self.bounds)

    @property
    def groups(self):
        return [(self.bounds[i], self.bounds[i + 1]) for i in range(len(self.bounds) - 1)]

    def masks(self):
        """``(N, D)`` 0/1 masks; row i keeps groups ``< i``.

        With a single expert there is nothing to nest and its mask is the full
        vector.
        """
        N, D = self.n_experts, self.dim
        if N == 1:
            return np.ones((1, D))
        m = np.zeros((N, D))
        for i in range(N):
            m[i, : self.bounds[i]] = 1.0
        return m


def partition_condition(c, schema):
    c = np.asarray(c, dtype=np.float64)
    if c.shape[-1] != schema.dim:
        raise ValueError(f"condition length {c.shape[-1]} != schema dimension {schema.dim}")
    return [c * m for m in schema.masks()]


def gate_weights(logits):
    return softmax(np.asarray(logits, dtype=np.float64), axis=-1)


def fuse(expert_outputs, w):
    """``sum_i w_i (a_i - a_{i-1})`` with ``a_0 = 0``.

    ``expert_outputs`` is ``(N, A)`` or ``(B, N, A)``; ``w`` matches the
    leading axes.
    """
    a = np.asarray(expert_outputs, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    inc = increments(a)
    return np.sum(w[..., None] * inc, axis=-2)


def increments(a):
    a = np.asarray(a, dtype=np.float64)
    inc = a.copy()
    inc[..., 1:, :] = a[..., 1:, :] - a[..., :-1, :]
    return inc


def fuse_telescoped(expert_outputs, w):
    """The same quantity written as ``sum_i a_i (w_i - w_{i+1})``, ``w_{N+1} = 0``."""
    a = np.asarray(expert_outputs, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    wn = np.concatenate([w[..., 1:], np.zeros(w.shape[:-1] + (1,))], axis=-1)
    return np.sum((w - wn)[..., None] * a, axis=-2)


class DeltaMoE(Module):
    """Gated expert ensemble; ``kind`` is ``"delta"`` (residual) or ``"vanilla"``."""

    def __init__(self, schema, action_dim, expert_hidden=(64, 64), gate_hidden=(64,), kind="delta",
                 rng=None, activation="elu", final_scale=0.01):
        super().__init__()
        if kind not in ("delta", "vanilla"):
            raise ValueError(f"unknown MoE kind {kind!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.schema = schema
        self.kind = kind
        self.action_dim = int(action_dim)
        D, N = schema.dim, schema.n_experts
        acts = [activation] * len(expert_hidden) + ["linear"]
        for i in range(N):
            self.children[f"expert{i}"] = DenseNet([D, *expert_hidden, action_dim], acts, rng, final_scale=final_scale)
        gacts = [activation] * len(gate_hidden) + ["linear"]
        self.children["gate"] = DenseNet([D, *gate_hidden, N], gacts, rng, final_scale=final_scale)
        self._masks = schema.masks()

    @property
    def n_experts(self):
        return self.schema.n_experts

    @property
    def experts(self):
        return [self.children[f"expert{i}"] for i in range(self.n_experts)]

    @property
    def gate(self):
        return self.children["gate"]

    def expert_inputs(self, c):
        if self.kind == "vanilla":
            return [c] * self.n_experts
        return [c * m for m in self._masks]

    def gate_forward(self, c):
        return gate_weights(self.gate.forward(c))

    def expert_outputs(self, c):
        c = np.asarray(c, dtype=np.float64)
        return np.stack([e.forward(x) for e, x in zip(self.experts, self.expert_inputs(c))], axis=-2)

    def forward(self, c):
        c = np.asarray(c, dtype=np.float64)
        if c.shape[-1] != self.schema.dim:
            raise ValueError(f"condition length {c.shape[-1]} != {self.schema.dim}")
        a = self.expert_outputs(c)
        w = self.gate_forward(c)
        if self.kind == "vanilla":
            return np.sum(w[..., None] * a, axis=-2)
        return fuse(a, w)

    __call__ = forward

    def forward_train(self, c):
        c = np.asarray(c, dtype=np.float64)
        outs, caches = [], []
        for e, x in zip(self.experts, self.expert_inputs(c)):
            y, cache = e.forward_train(x)
            outs.append(y)
            caches.append(cache)
        a = np.stack(outs, axis=-2)
        logits, gcache = self.gate.forward_train(c)
        w = gate_weights(logits)
        if self.kind == "vanilla":
            y = np.sum(w[..., None] * a, axis=-2)
        else:
            y = fuse(a, w)
        return y, (a, w, caches, gcache)

    def backward(self, cache, gy):
        a, w, caches, gcache = cache
        gy = np.asarray(gy, dtype=np.float64)
        if self.kind == "vanilla":
            gw = np.sum(gy[..., None, :] * a, axis=-1)
            ga = w[..., None] * gy[..., None, :]
        else:
            gw = np.sum(gy[..., None, :] * increments(a), axis=-1)
            wn = np.concatenate([w[..., 1:], np.zeros(w.shape[:-1] + (1,))], axis=-1)
            ga = (w - wn)[..., None] * gy[..., None, :]
        glogits = w * (gw - np.sum(gw * w, axis=-1, keepdims=True))
        grads = {}
        for i, e in enumerate(self.experts):
            _, g = e.backward(caches[i], ga[..., i, :])
            grads.update(prefixed(f"expert{i}", g))
        _, g = self.gate.backward(gcache, glogits)
        grads.update(prefixed("gate", g))
        return grads

    def increments(self, c):
        """Per-sample ``(B, N, A)`` components: ``a_1, a_2 - a_1, ...`` (delta) or ``a_i`` (vanilla)."""
        a = self.expert_outputs(np.atleast_2d(c))
        return increments(a) if self.kind == "delta" else a


def moe_forward(moe, c):
    return moe.forward(c)


def vanilla_moe_forward(moe, c):
    """Weighted sum of experts that all see the full condition, reusing ``moe``'s weights."""
    c = np.asarray(c, dtype=np.float64)
    a = np.stack([e.forward(c) for e in moe.experts], axis=-2)
    w = moe.gate_forward(c)
    return np.sum(w[..., None] * a, axis=-2)


def increment_dump(moe, batch):
    """Rows ``[sample_id, expert_index, dim_0..]`` with 1-based expert indices."""
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if batch.shape[0] == 0:
        raise ValueError("empty batch")
    inc = moe.increments(batch)
    B, N, A = inc.shape
    rows = []
    for s in range(B):
        for i in range(N):
            rows.append([s, i + 1, *inc[s, i]])
    return rows


def write_increment_csv(path, moe, batch):
    rows = increment_dump(moe, batch)
    header = ["sample_id", "expert_index"] + [f"dim_{k}" for k in range(moe.action_dim)]
    write_csv(path, header, rows)
    return len(rows)
