"""Differentiable building blocks with hand-written backward passes.

Every block follows the same protocol:

* ``forward(x)`` evaluates without keeping intermediates,
* ``forward_train(x)`` returns ``(y, cache)``,
* ``backward(cache, gy)`` returns ``(gx, grads)`` where ``grads`` is keyed
  exactly like ``parameters()``.

All arithmetic is float64 so finite-difference checks are meaningful.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import NumericalFailure

ACTIVATIONS = ("linear", "tanh", "relu", "elu")


def activate(name, z):
    if name == "linear":
        return z
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "elu":
        return np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))
    raise ValueError(f"unknown activation {name!r}")


def activate_grad(name, z, y):
    """Derivative of the activation, reusing its output ``y`` where cheaper."""
    if name == "linear":
        return np.ones_like(z)
    if name == "tanh":
        return 1.0 - y * y
    if name == "relu":
        return (z > 0).astype(z.dtype)
    if name == "elu":
        return np.where(z > 0, 1.0, y + 1.0)
    raise ValueError(f"unknown activation {name!r}")


class Module:
    """Holds named parameter arrays and child modules."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.children: dict[str, Module] = {}

    def parameters(self) -> dict[str, np.ndarray]:
        out = dict(self.params)
        for cname, child in self.children.items():
            for k, v in child.parameters().items():
                out[f"{cname}.{k}"] = v
        return out

    def load_parameters(self, flat):
        own = self.parameters()
        missing = set(own) - set(flat)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)}")
        for k, arr in own.items():
            src = np.asarray(flat[k], dtype=np.float64)
            if src.shape != arr.shape:
                raise ValueError(f"shape mismatch for {k}: {src.shape} vs {arr.shape}")
            arr[...] = src

    def num_parameters(self):
        return sum(v.size for v in self.parameters().values())

    def zero_grads(self):
        return {k: np.zeros_like(v) for k, v in self.parameters().items()}


def prefixed(prefix, grads):
    return {f"{prefix}.{k}": v for k, v in grads.items()}


def check_finite(grads, where):
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalFailure(f"non-finite gradient in {where}:{k}")


class DenseNet(Module):
    """Feed-forward stack ``widths[0] -> ... -> widths[-1]``.

    ``activations`` has one entry per layer; the last is usually ``"linear"``.
    Weights use a fan-in scaled uniform init; ``final_scale`` shrinks the last
    layer (0.01 for policy heads so initial actions sit near zero).
    """

    def __init__(self, widths, activations, rng=None, final_scale=1.0):
        super().__init__()
        widths = [int(w) for w in widths]
        if len(widths) < 2 or any(w <= 0 for w in widths):
            raise ValueError(f"invalid layer widths {widths}")
        if isinstance(activations, str):
            activations = [activations] * (len(widths) - 2) + ["linear"]
        if len(activations) != len(widths) - 1:
            raise ValueError("need one activation per layer")
        for a in activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        self.widths = widths
        self.activations = list(activations)
        rng = rng if rng is not None else np.random.default_rng(0)
        n = len(widths) - 1
        for i in range(n):
            fan_in, fan_out = widths[i], widths[i + 1]
            bound = 1.0 / math.sqrt(fan_in)
            W = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            if i == n - 1:
                W *= final_scale
            self.params[f"W{i}"] = W
            self.params[f"b{i}"] = np.zeros(fan_out)

    @property
    def n_layers(self):
        return len(self.widths) - 1

    @property
    def in_dim(self):
        return self.widths[0]

    @property
    def out_dim(self):
        return self.widths[-1]

    def _check(self, x):
        if x.shape[-1] != self.widths[0]:
            raise ValueError(f"expected input width {self.widths[0]}, got {x.shape[-1]}")

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        self._check(x)
        h = x
        for i, act in enumerate(self.activations):
            h = activate(act, h @ self.params[f"W{i}"] + self.params[f"b{i}"])
        return h

    __call__ = forward

    def forward_train(self, x):
        x = np.asarray(x, dtype=np.float64)
        self._check(x)
        xs, zs, ys = [], [], []
        h = x
        for i, act in enumerate(self.activations):
            xs.append(h)
            z = h @ self.params[f"W{i}"] + self.params[f"b{i}"]
            h = activate(act, z)
            zs.append(z)
            ys.append(h)
        return h, (xs, zs, ys)

    def backward(self, cache, gy):
        xs, zs, ys = cache
        grads = {}
        g = np.asarray(gy, dtype=np.float64)
        for i in reversed(range(self.n_layers)):
            gz = g * activate_grad(self.activations[i], zs[i], ys[i])
            x = xs[i]
            if x.ndim == 1:
                grads[f"W{i}"] = np.outer(x, gz)
                grads[f"b{i}"] = gz.copy()
            else:
                x2 = x.reshape(-1, x.shape[-1])
                gz2 = gz.reshape(-1, gz.shape[-1])
                grads[f"W{i}"] = x2.T @ gz2
                grads[f"b{i}"] = gz2.sum(axis=0)
            g = gz @ self.params[f"W{i}"].T
        check_finite(grads, "DenseNet")
        return g, grads


class LayerNorm:
    """Per-feature normalisation over the last axis, no learnable affine."""

    def __init__(self, eps=1e-5):
        self.eps = eps

    def forward_train(self, x):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + self.eps)
        y = xc * inv
        return y, (y, inv)

    def forward(self, x):
        return self.forward_train(x)[0]

    def backward(self, cache, gy):
        y, inv = cache
        gx = inv * (gy - gy.mean(axis=-1, keepdims=True) - y * (gy * y).mean(axis=-1, keepdims=True))
        return gx


class AdaptiveModulation(Module):
    """Condition-driven scale and shift on layer-normalised features.

    ``y = LN(x) * (1 + s(c)) + h(c)`` with ``[s, h] = c @ W + b``. The
    projection starts at zero, so a fresh block is the identity on LN(x).
    """

    def __init__(self, condition_dim, feature_dim):
        super().__init__()
        self.condition_dim = int(condition_dim)
        self.feature_dim = int(feature_dim)
        self.params["W"] = np.zeros((self.condition_dim, 2 * self.feature_dim))
        self.params["b"] = np.zeros(2 * self.feature_dim)
        self.norm = LayerNorm()

    def forward_train(self, x, c):
        if x.shape[-1] != self.feature_dim or c.shape[-1] != self.condition_dim:
            raise ValueError("AdaptiveModulation shape mismatch")
        n, ncache = self.norm.forward_train(x)
        sh = c @ self.params["W"] + self.params["b"]
        F = self.feature_dim
        s, h = sh[..., :F], sh[..., F:]
        y = n * (1.0 + s) + h
        return y, (n, ncache, s, c)

    def forward(self, x, c):
        return self.forward_train(x, c)[0]

    def backward(self, cache, gy):
        n, ncache, s, c = cache
        gs = gy * n
        gh = gy
        gsh = np.concatenate([gs, gh], axis=-1)
        gn = gy * (1.0 + s)
        gx = self.norm.backward(ncache, gn)
        gc = gsh @ self.params["W"].T
        c2 = c.reshape(-1, c.shape[-1])
        gsh2 = gsh.reshape(-1, gsh.shape[-1])
        grads = {"W": c2.T @ gsh2, "b": gsh2.sum(axis=0)}
        return gx, gc, grads


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


class TemporalAttention(Module):
    """Multi-head self-attention over the time axis.

    The output at each position is the per-head convex combination of the
    value projections (heads concatenated); no output projection here, the
    enclosing block owns that.
    """

    def __init__(self, model_dim, num_heads, rng=None):
        super().__init__()
        if model_dim % num_heads:
            raise ValueError("model_dim must be divisible by num_heads")
        self.model_dim = int(model_dim)
        self.num_heads = int(num_heads)
        self.head_dim = self.model_dim // self.num_heads
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / math.sqrt(model_dim)
        for name in ("Wq", "Wk", "Wv"):
            self.params[name] = rng.uniform(-bound, bound, size=(model_dim, model_dim))

    def _split(self, X):
        B, L, _ = X.shape
        return X.reshape(B, L, self.num_heads, self.head_dim).transpose(0, 2, 1, 3)

    def _merge(self, X):
        B, H, L, d = X.shape
        return X.transpose(0, 2, 1, 3).reshape(B, L, H * d)

    def forward_train(self, X):
        X = np.asarray(X, dtype=np.float64)
        squeeze = X.ndim == 2
        if squeeze:
            X = X[None]
        if X.shape[1] == 0:
            raise ValueError("empty sequence")
        if X.shape[-1] != self.model_dim:
            raise ValueError(f"expected model_dim {self.model_dim}, got {X.shape[-1]}")
        Q = self._split(X @ self.params["Wq"])
        K = self._split(X @ self.params["Wk"])
        V = self._split(X @ self.params["Wv"])
        scale = 1.0 / math.sqrt(self.head_dim)
        P = softmax(Q @ K.transpose(0, 1, 3, 2) * scale)
        out = self._merge(P @ V)
        cache = (X, Q, K, V, P, scale, squeeze)
        if squeeze:
            out = out[0]
        return out, cache

    def forward(self, X):
        return self.forward_train(X)[0]

    def attention_weights(self, X):
        return self.forward_train(X)[1][4]

    def backward(self, cache, gout):
        X, Q, K, V, P, scale, squeeze = cache
        if squeeze:
            gout = gout[None]
        gO = self._split(gout)
        gP = gO @ V.transpose(0, 1, 3, 2)
        gV = P.transpose(0, 1, 3, 2) @ gO
        gS = P * (gP - (gP * P).sum(axis=-1, keepdims=True))
        gQ = gS @ K * scale
        gK = gS.transpose(0, 1, 3, 2) @ Q * scale
        gQ, gK, gV = self._merge(gQ), self._merge(gK), self._merge(gV)
        X2 = X.reshape(-1, self.model_dim)
        grads = {
            "Wq": X2.T @ gQ.reshape(-1, self.model_dim),
            "Wk": X2.T @ gK.reshape(-1, self.model_dim),
            "Wv": X2.T @ gV.reshape(-1, self.model_dim),
        }
        gX = gQ @ self.params["Wq"].T + gK @ self.params["Wk"].T + gV @ self.params["Wv"].T
        if squeeze:
            gX = gX[0]
        return gX, grads


def temporal_attention(block, sequence):
    """Apply ``block`` to a ``(L, D)`` or ``(B, L, D)`` sequence."""
    return block.forward(sequence)


class TransformerBlock(Module):
    """Pre-norm attention + feed-forward block with residual connections."""

    def __init__(self, model_dim, num_heads, rng=None, ff_mult=2):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.children["attn"] = TemporalAttention(model_dim, num_heads, rng)
        self.children["proj"] = DenseNet([model_dim, model_dim], ["linear"], rng)
        self.children["ff"] = DenseNet([model_dim, ff_mult * model_dim, model_dim], ["elu", "linear"], rng)
        self.ln1 = LayerNorm()
        self.ln2 = LayerNorm()

    def forward_train(self, X):
        attn, proj, ff = self.children["attn"], self.children["proj"], self.children["ff"]
        n1, c_ln1 = self.ln1.forward_train(X)
        a, c_attn = attn.forward_train(n1)
        p, c_proj = proj.forward_train(a)
        X1 = X + p
        n2, c_ln2 = self.ln2.forward_train(X1)
        f, c_ff = ff.forward_train(n2)
        return X1 + f, (c_ln1, c_attn, c_proj, c_ln2, c_ff)

    def forward(self, X):
        return self.forward_train(X)[0]

    def backward(self, cache, gy):
        c_ln1, c_attn, c_proj, c_ln2, c_ff = cache
        attn, proj, ff = self.children["attn"], self.children["proj"], self.children["ff"]
        gn2, g_ff = ff.backward(c_ff, gy)
        gX1 = gy + self.ln2.backward(c_ln2, gn2)
        ga, g_proj = proj.backward(c_proj, gX1)
        gn1, g_attn = attn.backward(c_attn, ga)
        gX = gX1 + self.ln1.backward(c_ln1, gn1)
        grads = {}
        grads.update(prefixed("attn", g_attn))
        grads.update(prefixed("proj", g_proj))
        grads.update(prefixed("ff", g_ff))
        return gX, grads


def sinusoidal_encoding(positions, dim):
    """Standard sin/cos encoding of integer or real positions; shape ``(len, dim)``."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    ang = positions * freqs[None, :]
    enc = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if enc.shape[1] < dim:
        enc = np.concatenate([enc, np.zeros((enc.shape[0], dim - enc.shape[1]))], axis=1)
    return enc
