"""Diffusion student: noise schedules, the conditioned denoiser and its samplers.

Timesteps run ``1..T``; index 0 of every schedule array is the clean end
(``alpha_bar_0 = 1``). Samplers read ``denoiser.schedule`` and
``denoiser.objective`` so toy denoisers in tests can stand in for the
network.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericalFailure
from .nn.layers import AdaptiveModulation, DenseNet, Module, activate, activate_grad, prefixed, sinusoidal_encoding

COSINE_OFFSET = 0.008
LINEAR_BETA_START = 1e-4


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    kind: str
    beta_max: float
    betas: np.ndarray  # (T+1,), betas[0] = 0
    alpha_bars: np.ndarray  # (T+1,), alpha_bars[0] = 1

    @property
    def alphas(self):
        return 1.0 - self.betas

    def alpha_bar(self, t):
        return self.alpha_bars[np.asarray(t)]

    def posterior_variance(self, t):
        """``beta_tilde_t = beta_t (1 - abar_{t-1}) / (1 - abar_t)``."""
        t = np.asarray(t)
        return self.betas[t] * (1.0 - self.alpha_bars[t - 1]) / (1.0 - self.alpha_bars[t])


def build_schedule(T=50, kind="cosine", beta_max=0.2):
    if int(T) < 1:
        raise ConfigError("diffusion.T", f"need at least one timestep, got {T}")
    if not 0.0 < beta_max < 1.0:
        raise ConfigError("diffusion.beta_max", f"must lie in (0, 1), got {beta_max}")
    T = int(T)
    if kind == "cosine":
        steps = np.arange(T + 1) / T
        f = np.cos((steps + COSINE_OFFSET) / (1 + COSINE_OFFSET) * math.pi / 2) ** 2
        raw = f / f[0]
        betas = 1.0 - raw[1:] / raw[:-1]
        betas = np.minimum(betas, beta_max)
    elif kind == "linear":
        if beta_max <= LINEAR_BETA_START:
            raise ConfigError("diffusion.beta_max", f"linear schedule needs beta_max > {LINEAR_BETA_START}")
        betas = np.linspace(LINEAR_BETA_START, beta_max, T)
    else:
        raise ConfigError("diffusion.kind", f"unknown schedule {kind!r}")
    betas = np.concatenate([[0.0], betas])
    alpha_bars = np.cumprod(1.0 - betas)
    return NoiseSchedule(T, kind, float(beta_max), betas, alpha_bars)


def forward_noise(a, t, eps, schedule):
    """``x_t = sqrt(abar_t) a + sqrt(1 - abar_t) eps`` (``t`` scalar or per-row)."""
    a = np.asarray(a, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if a.shape != eps.shape:
        raise ValueError("noise must match the action shape")
    ab = np.asarray(schedule.alpha_bar(t), dtype=np.float64)
    if ab.ndim:
        ab = ab.reshape(ab.shape + (1,) * (a.ndim - ab.ndim))
    return np.sqrt(ab) * a + np.sqrt(1.0 - ab) * eps


def x0_from_eps(x_t, t, eps_hat, schedule):
    ab = _col(schedule.alpha_bar(t), x_t)
    return (x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def eps_from_x0(x_t, t, a_hat, schedule):
    ab = _col(schedule.alpha_bar(t), x_t)
    return (x_t - np.sqrt(ab) * a_hat) / np.sqrt(1.0 - ab)


def _col(v, like):
    v = np.asarray(v, dtype=np.float64)
    if v.ndim and np.ndim(like) > v.ndim:
        v = v.reshape(v.shape + (1,) * (np.ndim(like) - v.ndim))
    return v


# -- network -------------------------------------------------------------------


class StudentDenoiser(Module):
    """Dense denoiser with adaptive-norm conditioning and additive style injection.

    Block ``i``: ``o_i = elu(AdaLN(Linear(o_{i-1}), e)) + style_scale * l_audio @ P_i``
    where ``e`` embeds ``[cond, time encoding]``. The first block also sees
    ``e`` concatenated to ``x_t``.
    """

    def __init__(self, action_dim, cond_dim, audio_dim=256, width=128, n_blocks=4, time_dim=32, objective="x0",
                 style_scale=0.1, schedule=None, rng=None):
        super().__init__()
        if objective not in ("x0", "epsilon"):
            raise ConfigError("diffusion.objective", f"expected 'x0' or 'epsilon', got {objective!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.action_dim, self.cond_dim, self.audio_dim = int(action_dim), int(cond_dim), int(audio_dim)
        self.width, self.n_blocks, self.time_dim = int(width), int(n_blocks), int(time_dim)
        self.objective = objective
        self.style_scale = float(style_scale)
        self.schedule = schedule if schedule is not None else build_schedule()
        self.children["embed"] = DenseNet([cond_dim + time_dim, width], ["elu"], rng)
        for i in range(n_blocks):
            fan_in = action_dim + width if i == 0 else width
            self.children[f"lin{i}"] = DenseNet([fan_in, width], ["linear"], rng)
            self.children[f"mod{i}"] = AdaptiveModulation(width, width)
            self.params[f"style{i}"] = rng.uniform(-1, 1, size=(audio_dim, width)) / math.sqrt(audio_dim)
        self.children["out"] = DenseNet([width, action_dim], ["linear"], rng)

    def time_encoding(self, t, batch):
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (batch,))
        return sinusoidal_encoding(t, self.time_dim)

    def forward_train(self, x_t, t, cond, l_audio):
        x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
        cond = np.atleast_2d(np.asarray(cond, dtype=np.float64))
        l_audio = np.atleast_2d(np.asarray(l_audio, dtype=np.float64))
        B = x_t.shape[0]
        if cond.shape != (B, self.cond_dim) or l_audio.shape != (B, self.audio_dim) or x_t.shape[1] != self.action_dim:
            raise ValueError(
                f"denoiser inputs {x_t.shape}, {cond.shape}, {l_audio.shape} do not match "
                f"(B, {self.action_dim}), (B, {self.cond_dim}), (B, {self.audio_dim})"
            )
        e, c_emb = self.children["embed"].forward_train(np.concatenate([cond, self.time_encoding(t, B)], axis=1))
        o = np.concatenate([x_t, e], axis=1)
        caches = []
        for i in range(self.n_blocks):
            z, c_lin = self.children[f"lin{i}"].forward_train(o)
            m, c_mod = self.children[f"mod{i}"].forward_train(z, e)
            h = activate("elu", m)
            o = h + self.style_scale * (l_audio @ self.params[f"style{i}"])
            caches.append((c_lin, c_mod, m, h))
        y, c_out = self.children["out"].forward_train(o)
        if not np.all(np.isfinite(y)):
            raise NumericalFailure("denoiser produced a non-finite output")
        return y, (c_emb, caches, c_out, l_audio)

    def forward(self, x_t, t, cond, l_audio):
        return self.forward_train(x_t, t, cond, l_audio)[0]

    __call__ = forward

    def backward(self, cache, gy):
        """Parameter gradients plus ``(g_x_t, g_cond, g_l_audio)``."""
        c_emb, caches, c_out, l_audio = cache
        grads = {}
        go, g = self.children["out"].backward(c_out, gy)
        grads.update(prefixed("out", g))
        ge = 0.0
        g_audio = np.zeros_like(l_audio)
        A = self.action_dim
        for i in reversed(range(self.n_blocks)):
            c_lin, c_mod, m, h = caches[i]
            P = self.params[f"style{i}"]
            grads[f"style{i}"] = self.style_scale * (l_audio.T @ go)
            g_audio += self.style_scale * (go @ P.T)
            gm = go * activate_grad("elu", m, h)
            gz, gc, g = self.children[f"mod{i}"].backward(c_mod, gm)
            grads.update(prefixed(f"mod{i}", g))
            ge = ge + gc
            go, g = self.children[f"lin{i}"].backward(c_lin, gz)
            grads.update(prefixed(f"lin{i}", g))
        g_x = go[:, :A]
        ge = ge + go[:, A:]
        gin, g = self.children["embed"].backward(c_emb, ge)
        grads.update(prefixed("embed", g))
        return grads, (g_x, gin[:, : self.cond_dim], g_audio)


def predict_x0(denoiser, x_t, t, cond, l_audio):
    """The clean-action estimate regardless of the network's parameterisation."""
    out = denoiser(x_t, t, cond, l_audio)
    if denoiser.objective == "x0":
        return out
    return x0_from_eps(x_t, t, out, denoiser.schedule)


def denoise(denoiser, x_t, t, cond, l_audio):
    """Raw network output: the action estimate (x0) or the noise estimate (epsilon)."""
    return denoiser(x_t, t, cond, l_audio)


def diffusion_loss(denoiser, actions, cond, l_audio, rng):
    """One Monte-Carlo draw of the denoising objective and its parameter gradients.

    ``t`` is uniform on ``1..T`` per row; the x0 objective regresses the clean
    action, the epsilon objective regresses the injected noise.
    """
    actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
    B = actions.shape[0]
    sched = denoiser.schedule
    t = rng.integers(1, sched.T + 1, size=B)
    eps = rng.normal(size=actions.shape)
    x_t = forward_noise(actions, t, eps, sched)
    y, cache = denoiser.forward_train(x_t, t, cond, l_audio)
    target = actions if denoiser.objective == "x0" else eps
    diff = y - target
    loss = float(np.mean(np.sum(diff * diff, axis=1)))
    grads, _ = denoiser.backward(cache, 2.0 * diff / B)
    return loss, grads


# -- samplers ------------------------------------------------------------------


def ddim_timesteps(T, steps):
    if steps < 1:
        raise ConfigError("diffusion.steps", f"need at least one step, got {steps}")
    if steps > T:
        raise ConfigError("diffusion.steps", f"{steps} sampling steps exceed T = {T}")
    if steps == 1:
        return [T]
    return [int(v) for v in np.round(np.linspace(T, 1, steps)).astype(int)]


def ddim_sample(denoiser, cond, l_audio, steps=2, eta=0.0, rng=None, x_T=None, trace=None):
    """Deterministic (eta = 0) to ancestral (eta = 1) DDIM over an even sub-sequence.

    Returns the last clean-action estimate. If ``trace`` is a list, each
    ``(t, x_t, a_hat)`` visited is appended to it.
    """
    if not 0.0 <= eta <= 1.0:
        raise ConfigError("diffusion.eta", f"must lie in [0, 1], got {eta}")
    sched = denoiser.schedule
    seq = ddim_timesteps(sched.T, steps)
    cond = np.atleast_2d(cond)
    B = cond.shape[0]
    x = rng.normal(size=(B, denoiser.action_dim)) if x_T is None else np.array(x_T, dtype=np.float64, ndmin=2)
    a_hat = None
    for k, t in enumerate(seq):
        out = denoiser(x, t, cond, l_audio)
        if denoiser.objective == "x0":
            a_hat = out
            eps_hat = eps_from_x0(x, t, a_hat, sched)
        else:
            eps_hat = out
            a_hat = x0_from_eps(x, t, eps_hat, sched)
        if trace is not None:
            trace.append((t, x.copy(), a_hat.copy()))
        t_prev = seq[k + 1] if k + 1 < len(seq) else 0
        if t_prev == 0:
            break
        ab_prev = sched.alpha_bars[t_prev]
        sigma = ddim_sigma(sched, t, t_prev, eta)
        noise = rng.normal(size=x.shape) if eta > 0 else 0.0
        x = math.sqrt(ab_prev) * a_hat + math.sqrt(max(1 - ab_prev - sigma**2, 0.0)) * eps_hat + sigma * noise
    return a_hat


def ddim_sigma(schedule, t, t_prev, eta):
    ab, ab_prev = schedule.alpha_bars[t], schedule.alpha_bars[t_prev]
    return eta * math.sqrt((1 - ab_prev) / (1 - ab) * (1 - ab / ab_prev))


def ddpm_sample(denoiser, cond, l_audio, rng, x_T=None, trace=None):
    """Full-T ancestral sampling; with ``abar_0 = 1`` the last step returns its ``a_hat``."""
    sched = denoiser.schedule
    cond = np.atleast_2d(cond)
    B = cond.shape[0]
    x = rng.normal(size=(B, denoiser.action_dim)) if x_T is None else np.array(x_T, dtype=np.float64, ndmin=2)
    for t in range(sched.T, 0, -1):
        a_hat = predict_x0(denoiser, x, t, cond, l_audio)
        ab, ab_prev, beta = sched.alpha_bars[t], sched.alpha_bars[t - 1], sched.betas[t]
        mean = (math.sqrt(ab_prev) * beta / (1 - ab)) * a_hat + (math.sqrt(1 - beta) * (1 - ab_prev) / (1 - ab)) * x
        var = sched.posterior_variance(t)
        x = mean + math.sqrt(var) * rng.normal(size=x.shape)
        if trace is not None:
            trace.append((t, x.copy(), a_hat.copy()))
    return x


@dataclass
class SamplerConfig:
    sampler: str = "ddim"
    steps: int = 2
    eta: float = 0.0


def sample_action(denoiser, cond, l_audio, rng, sampler_cfg):
    if sampler_cfg.sampler == "ddim":
        return ddim_sample(denoiser, cond, l_audio, sampler_cfg.steps, sampler_cfg.eta, rng)
    if sampler_cfg.sampler == "ddpm":
        return ddpm_sample(denoiser, cond, l_audio, rng)
    raise ConfigError("diffusion.sampler", f"unknown sampler {sampler_cfg.sampler!r}")


def latency_probe(denoiser, steps_list, cond=None, l_audio=None, repeats=20, warmup=3, include_ddpm=False, seed=0):
    """Mean wall time (ms) per sampler call, one row per entry of ``steps_list``.

    Rows are ``{"sampler", "steps", "mean_ms"}``. Timing is inherently
    machine-dependent; only the ordering is meaningful.
    """
    cond = np.zeros((1, denoiser.cond_dim)) if cond is None else np.atleast_2d(cond)
    l_audio = np.zeros((1, denoiser.audio_dim)) if l_audio is None else np.atleast_2d(l_audio)
    rng = np.random.default_rng(seed)
    jobs = [("ddim", s) for s in steps_list]
    if include_ddpm:
        jobs.append(("ddpm", denoiser.schedule.T))
    rows = []
    for sampler, steps in jobs:
        run = (lambda s=steps: ddim_sample(denoiser, cond, l_audio, s, 0.0, rng)) if sampler == "ddim" else (
            lambda: ddpm_sample(denoiser, cond, l_audio, rng))
        for _ in range(warmup):
            run()
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            run()
            times.append(time.perf_counter() - t0)
        rows.append({"sampler": sampler, "steps": int(steps), "mean_ms": 1e3 * float(np.mean(times))})
    return rows
