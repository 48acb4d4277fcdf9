"""Audio/motion latent alignment.

A small VAE over flattened motion windows provides the motion latent; an
attention-based adaptor maps per-frame audio features to a pooled audio
latent, and a linear alignment head projects that latent into the motion
latent space where InfoNCE pulls matching pairs together.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalFailure
from .nn.layers import DenseNet, Module, TransformerBlock, prefixed, sinusoidal_encoding, softmax
from .nn.optim import Adam


def l2_normalize(x, eps=1e-12):
    x = np.asarray(x, dtype=np.float64)
    n = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    return x / np.maximum(n, eps)


def l2_normalize_backward(x, gy, eps=1e-12):
    n = np.maximum(np.sqrt(np.sum(x * x, axis=-1, keepdims=True)), eps)
    y = x / n
    return (gy - y * np.sum(gy * y, axis=-1, keepdims=True)) / n


def gaussian_kl(mu, logvar):
    """Per-sample ``KL(N(mu, diag exp(logvar)) || N(0, I))`` summed over latent dims."""
    return 0.5 * np.sum(mu * mu + np.exp(logvar) - 1.0 - logvar, axis=-1)


# -- motion VAE ----------------------------------------------------------------


class MotionVAE(Module):
    """Dense encoder/decoder over flattened ``(window, joints)`` motion windows."""

    COLLAPSE_KL = 1e-8
    COLLAPSE_STEPS = 100

    def __init__(self, window, n_joints, latent_dim=64, hidden=128, kl_weight=1e-3, rng=None, activation="tanh"):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        if latent_dim <= 0:
            raise ValueError("latent_dim must be positive")
        if kl_weight < 0:
            raise ValueError("kl_weight must be non-negative")
        self.window, self.n_joints = int(window), int(n_joints)
        self.latent_dim = int(latent_dim)
        self.kl_weight = float(kl_weight)
        flat = self.window * self.n_joints
        self.children["encoder"] = DenseNet([flat, hidden, 2 * latent_dim], [activation, "linear"], rng)
        self.children["decoder"] = DenseNet([latent_dim, hidden, flat], [activation, "linear"], rng)
        self.low_kl_streak = 0
        self.collapsed = False

    @property
    def encoder(self):
        return self.children["encoder"]

    @property
    def decoder(self):
        return self.children["decoder"]

    def _flatten(self, windows):
        x = np.asarray(windows, dtype=np.float64)
        if x.shape[-2:] != (self.window, self.n_joints):
            raise ValueError(f"motion window shape {x.shape[-2:]} != {(self.window, self.n_joints)}")
        return x.reshape(x.shape[:-2] + (self.window * self.n_joints,))

    def encode(self, windows):
        h = self.encoder.forward(self._flatten(windows))
        return h[..., : self.latent_dim], h[..., self.latent_dim :]

    def encode_mean(self, windows):
        return self.encode(windows)[0]

    def decode(self, z):
        y = self.decoder.forward(z)
        return y.reshape(y.shape[:-1] + (self.window, self.n_joints))

    def losses(self, windows, rng=None, noise_scale=1.0):
        """``(reconstruction MSE, mean KL)`` for one batch."""
        return self._forward_train(windows, rng, noise_scale)[:2]

    def _forward_train(self, windows, rng, noise_scale):
        x = np.atleast_2d(self._flatten(windows))
        h, c_enc = self.encoder.forward_train(x)
        L = self.latent_dim
        mu, logvar = h[:, :L], h[:, L:]
        std = np.exp(0.5 * logvar)
        if noise_scale > 0:
            eps = rng.normal(size=mu.shape) * noise_scale
        else:
            eps = np.zeros_like(mu)
        z = mu + std * eps
        y, c_dec = self.decoder.forward_train(z)
        diff = y - x
        recon = float(np.mean(diff * diff))
        kl = float(np.mean(gaussian_kl(mu, logvar)))
        return recon, kl, (x, diff, mu, logvar, std, eps, c_enc, c_dec)

    def loss_and_grads(self, windows, rng=None, noise_scale=1.0):
        recon, kl, cache = self._forward_train(windows, rng, noise_scale)
        x, diff, mu, logvar, std, eps, c_enc, c_dec = cache
        B = x.shape[0]
        gy = 2.0 * diff / diff.size
        gz, g_dec = self.decoder.backward(c_dec, gy)
        beta = self.kl_weight
        gmu = gz + beta * mu / B
        glogvar = gz * eps * std * 0.5 + beta * 0.5 * (np.exp(logvar) - 1.0) / B
        _, g_enc = self.encoder.backward(c_enc, np.concatenate([gmu, glogvar], axis=1))
        grads = {**prefixed("encoder", g_enc), **prefixed("decoder", g_dec)}
        return recon + beta * kl, recon, kl, grads

    def track_collapse(self, kl):
        self.low_kl_streak = self.low_kl_streak + 1 if kl < self.COLLAPSE_KL else 0
        if self.low_kl_streak >= self.COLLAPSE_STEPS:
            self.collapsed = True
        return self.collapsed


def vae_train_step(vae, windows, optimizer, rng, noise_scale=1.0):
    """One Adam step; returns ``{"loss", "recon", "kl", "collapsed"}``."""
    loss, recon, kl, grads = vae.loss_and_grads(windows, rng, noise_scale)
    if not (math.isfinite(loss)):
        raise NumericalFailure("VAE loss is not finite")
    optimizer.step(grads)
    return {"loss": loss, "recon": recon, "kl": kl, "collapsed": vae.track_collapse(kl)}


def encode_motion(vae, window):
    """Unit-norm posterior mean for one window ``(W, J)`` or a batch ``(B, W, J)``."""
    return l2_normalize(vae.encode_mean(window))


# -- audio adaptor -------------------------------------------------------------


class AudioAdaptor(Module):
    """Per-frame projection, attention blocks, mean pooling, output projection."""

    def __init__(self, feature_dim, model_dim=32, n_blocks=6, n_heads=4, latent_dim=256, positional=True, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.feature_dim, self.model_dim = int(feature_dim), int(model_dim)
        self.latent_dim = int(latent_dim)
        self.positional = bool(positional)
        self.children["inproj"] = DenseNet([feature_dim, model_dim], ["linear"], rng)
        for i in range(n_blocks):
            self.children[f"block{i}"] = TransformerBlock(model_dim, n_heads, rng)
        self.children["outproj"] = DenseNet([model_dim, latent_dim], ["linear"], rng)
        self.n_blocks = int(n_blocks)

    def _embed_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim < 2 or x.shape[-2] == 0:
            raise ValueError("audio window must contain at least one frame")
        if x.shape[-1] != self.feature_dim:
            raise ValueError(f"audio feature width {x.shape[-1]} != {self.feature_dim}")
        return x

    def forward_train(self, window):
        x = self._embed_input(window)
        h, c_in = self.children["inproj"].forward_train(x)
        if self.positional:
            h = h + sinusoidal_encoding(np.arange(x.shape[-2]), self.model_dim)
        caches = []
        for i in range(self.n_blocks):
            h, c = self.children[f"block{i}"].forward_train(h)
            caches.append(c)
        pooled = h.mean(axis=-2)
        y, c_out = self.children["outproj"].forward_train(pooled)
        return y, (h.shape, c_in, caches, c_out)

    def forward(self, window):
        return self.forward_train(window)[0]

    __call__ = forward

    def backward(self, cache, gy):
        shape, c_in, caches, c_out = cache
        gp, g_out = self.children["outproj"].backward(c_out, gy)
        gh = np.broadcast_to(np.expand_dims(gp, -2) / shape[-2], shape).copy()
        grads = prefixed("outproj", g_out)
        for i in reversed(range(self.n_blocks)):
            gh, g = self.children[f"block{i}"].backward(caches[i], gh)
            grads.update(prefixed(f"block{i}", g))
        gx, g_in = self.children["inproj"].backward(c_in, gh)
        grads.update(prefixed("inproj", g_in))
        return gx, grads


def adapt_audio(adaptor, window):
    """Unit-norm audio latent."""
    return l2_normalize(adaptor.forward(window))


# -- contrastive objective -----------------------------------------------------


def _check_pairs(a, m, tau):
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    if a.shape != m.shape or a.shape[0] < 1:
        raise ValueError(f"need equal, non-empty latent batches, got {a.shape} and {m.shape}")
    return a, m


def infonce_from_similarity(sim):
    """Loss from a precomputed (already temperature-scaled) similarity matrix."""
    sim = np.asarray(sim, dtype=np.float64)
    mx = sim.max(axis=1, keepdims=True)
    lse = mx[:, 0] + np.log(np.exp(sim - mx).sum(axis=1))
    return float(np.mean(lse - np.diag(sim)))


def infonce_loss(audio_latents, motion_latents, tau=0.07):
    a, m = _check_pairs(audio_latents, motion_latents, tau)
    return infonce_from_similarity(a @ m.T / tau)


def infonce_grad(audio_latents, motion_latents, tau=0.07):
    """``(loss, d loss / d audio_latents)`` with motion latents held fixed."""
    a, m = _check_pairs(audio_latents, motion_latents, tau)
    sim = a @ m.T / tau
    N = a.shape[0]
    gsim = (softmax(sim, axis=1) - np.eye(N)) / N
    return infonce_from_similarity(sim), gsim @ m / tau


def retrieval_ranks(audio_latents, motion_latents):
    """0-based rank of the true motion for each audio query; ties go to the lower index."""
    a = l2_normalize(audio_latents)
    m = l2_normalize(motion_latents)
    sim = a @ m.T
    diag = np.diag(sim)[:, None]
    N = sim.shape[0]
    lower = np.arange(N)[None, :] < np.arange(N)[:, None]
    return np.sum((sim > diag) | ((sim == diag) & lower), axis=1)


def retrieval_metrics(audio_latents, motion_latents, ks=(1, 2, 3)):
    a = np.atleast_2d(np.asarray(audio_latents, dtype=np.float64))
    m = np.atleast_2d(np.asarray(motion_latents, dtype=np.float64))
    if a.shape != m.shape or a.shape[0] < 3:
        raise ValueError("retrieval needs equal latent counts with N >= 3")
    ranks = retrieval_ranks(a, m)
    out = {f"R@{k}": float(np.mean(ranks < k)) for k in ks}
    out["MMDist"] = float(np.mean(np.linalg.norm(l2_normalize(a) - l2_normalize(m), axis=1)))
    return out


# -- alignment model and training ----------------------------------------------


class AlignmentModel(Module):
    """Adaptor plus a linear head from the audio latent to the motion latent space."""

    def __init__(self, adaptor, motion_latent_dim, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.children["adaptor"] = adaptor
        self.children["head"] = DenseNet([adaptor.latent_dim, motion_latent_dim], ["linear"], rng)

    @property
    def adaptor(self):
        return self.children["adaptor"]

    def audio_latent(self, window):
        """The adaptor's own unit-norm latent (the style latent fed to the policy)."""
        return adapt_audio(self.adaptor, window)

    def forward_train(self, window):
        la, c_ad = self.adaptor.forward_train(window)
        n = l2_normalize(la)
        p, c_head = self.children["head"].forward_train(n)
        return l2_normalize(p), (la, c_ad, p, c_head)

    def forward(self, window):
        return self.forward_train(window)[0]

    __call__ = forward

    def backward(self, cache, gy):
        la, c_ad, p, c_head = cache
        gn, g_head = self.children["head"].backward(c_head, l2_normalize_backward(p, gy))
        _, g_ad = self.adaptor.backward(c_ad, l2_normalize_backward(la, gn))
        return {**prefixed("adaptor", g_ad), **prefixed("head", g_head)}


@dataclass
class AlignConfig:
    window: int = 60
    latent_dim: int = 64
    vae_hidden: int = 128
    vae_steps: int = 1500
    vae_lr: float = 1e-3
    kl_weight: float = 1e-4
    vae_batch: int = 64
    model_dim: int = 32
    n_blocks: int = 6
    n_heads: int = 4
    audio_latent_dim: int = 256
    positional: bool = True
    align_steps: int = 1200
    align_lr: float = 1e-3
    cosine_decay: bool = True
    batch: int = 32
    tau: float = 0.07
    max_grad_norm: float = 1.0


@dataclass
class AlignmentResult:
    vae: MotionVAE
    model: AlignmentModel
    history: list = field(default_factory=list)


def train_vae(clips, cfg, rng, log=None):
    J = clips[0].motion.n_joints
    vae = MotionVAE(cfg.window, J, cfg.latent_dim, cfg.vae_hidden, cfg.kl_weight, rng)
    opt = Adam(vae.parameters(), lr=cfg.vae_lr, max_grad_norm=cfg.max_grad_norm)
    history = []
    for step in range(cfg.vae_steps):
        x = _random_windows(clips, cfg.window, rng, cfg.vae_batch, motion=True)
        stats = vae_train_step(vae, x, opt, rng)
        history.append({"step": step, **{k: stats[k] for k in ("loss", "recon", "kl")}})
        if log and step % 250 == 0:
            log(f"vae step {step} recon={stats['recon']:.5f} kl={stats['kl']:.3f}")
    return vae, history


def _random_windows(clips, window, rng, batch, motion):
    idx = rng.integers(0, len(clips), size=batch)
    out = []
    for ci in idx:
        F = clips[ci].motion.n_frames
        s = int(rng.integers(0, F - window + 1))
        src = clips[ci].motion.q if motion else clips[ci].audio.features
        out.append(src[s : s + window])
    return np.stack(out)


def _paired_batch(clips, window, rng, batch):
    """One random crop from each of ``batch`` distinct clips (no in-batch duplicates)."""
    idx = rng.choice(len(clips), size=min(batch, len(clips)), replace=False)
    mw, aw = [], []
    for ci in idx:
        F = clips[ci].motion.n_frames
        s = int(rng.integers(0, F - window + 1))
        mw.append(clips[ci].motion.q[s : s + window])
        aw.append(clips[ci].audio.features[s : s + window])
    return np.stack(mw), np.stack(aw)


def train_alignment(clips, cfg=None, rng=None, log=None):
    """Pretrain the motion VAE, freeze it, then fit the adaptor with InfoNCE."""
    cfg = cfg or AlignConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    vae, vae_hist = train_vae(clips, cfg, rng, log)
    feat_dim = clips[0].audio.features.shape[1]
    adaptor = AudioAdaptor(feat_dim, cfg.model_dim, cfg.n_blocks, cfg.n_heads, cfg.audio_latent_dim, cfg.positional, rng)
    model = AlignmentModel(adaptor, cfg.latent_dim, rng)
    opt = Adam(model.parameters(), lr=cfg.align_lr, max_grad_norm=cfg.max_grad_norm)
    history = [{"phase": "vae", **h} for h in vae_hist]
    for step in range(cfg.align_steps):
        if cfg.cosine_decay:
            opt.lr = cfg.align_lr * 0.5 * (1.0 + math.cos(math.pi * step / cfg.align_steps))
        mw, aw = _paired_batch(clips, cfg.window, rng, cfg.batch)
        target = encode_motion(vae, mw)
        pred, cache = model.forward_train(aw)
        loss, gpred = infonce_grad(pred, target, cfg.tau)
        if not math.isfinite(loss):
            raise NumericalFailure(f"InfoNCE loss not finite at step {step}")
        opt.step(model.backward(cache, gpred))
        history.append({"phase": "align", "step": step, "loss": loss})
        if log and step % 100 == 0:
            log(f"align step {step} infonce={loss:.4f}")
    return AlignmentResult(vae, model, history)


def evaluate_alignment(result, clips, window, start=0):
    """Retrieval metrics over the first window (or ``start``) of each clip."""
    mw = np.stack([c.motion.q[start : start + window] for c in clips])
    aw = np.stack([c.audio.features[start : start + window] for c in clips])
    return retrieval_metrics(result.model.forward(aw), encode_motion(result.vae, mw))
