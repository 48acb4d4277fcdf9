"""Teacher PPO with a residual mixture-of-experts policy, and DAgger distillation of the diffusion student."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .align import adapt_audio, l2_normalize
from .data import sliding_windows
from .diffusion import SamplerConfig, StudentDenoiser, build_schedule, diffusion_loss, sample_action
from .errors import ConfigError, NumericalFailure
from .metrics import ClipResult, EvalReport, mpjpe, mpkpe, rollout_bas, success
from .moe import DeltaMoE, PartitionSchema
from .nn import Adam, DenseNet
from .nn.layers import check_finite, prefixed
from .rewards import (
    CurriculumState,
    ReferenceFrame,
    RewardConfig,
    StepState,
    advance_curriculum,
    total_reward,
    update_adaptive_sigma,
    update_air_time,
)
from .sim.env import CAUSES, CONTINUE, NUMERICAL, POLICY_DT, BatchedEnv, SimConfig, check_termination, frame_dim
from .sim.model import keypoints

log = logging.getLogger(__name__)

THETA_FLOOR = 0.3
LOG_2PI = math.log(2.0 * math.pi)


def _seed_sequence(seed):
    return seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)


# -- references --------------------------------------------------------------


class ReferenceTrack:
    """A paired clip resampled onto the policy clock (linear interpolation, nearest-frame contacts)."""

    def __init__(self, model, clip, dt=POLICY_DT):
        m = clip.motion
        if m.n_joints != model.n_joints:
            raise ConfigError("env.body", f"clip has {m.n_joints} joints but the body has {model.n_joints}")
        self.clip = clip
        self.clip_id = clip.meta.clip_id
        self.task = clip.meta.task
        self.fps = m.fps
        frame_t = np.arange(m.n_frames) / m.fps
        self.n_steps = int(math.floor(frame_t[-1] / dt + 1e-9)) + 1
        t = np.arange(self.n_steps) * dt
        self.times = t

        def interp(x):
            x = np.asarray(x, dtype=np.float64).reshape(m.n_frames, -1)
            return np.stack([np.interp(t, frame_t, x[:, j]) for j in range(x.shape[1])], axis=1)

        q, qd = interp(m.q), interp(m.qd)
        root_pos, root_vel = interp(m.root_pos), interp(m.root_vel)
        pitch, pitch_rate = interp(m.root_pitch)[:, 0], interp(m.root_pitch_rate)[:, 0]
        self.g = model.coords(q, root_pos, pitch)
        self.gd = model.coords(qd, root_vel, pitch_rate)
        self.frame_index = np.minimum(np.rint(t * m.fps).astype(int), m.n_frames - 1)
        self.contacts = np.asarray(m.contacts, dtype=bool)[self.frame_index]
        self.keypoints = keypoints(model, self.g)
        self.beats = np.asarray(clip.audio.beats, dtype=np.float64)
        self.audio_latents = None  # (n_steps, d) once attached

    def attach_audio_latents(self, latents_per_frame):
        self.audio_latents = np.asarray(latents_per_frame)[self.frame_index]


def audio_latents_per_frame(adaptor, features, window):
    """Unit-norm adaptor latent of the window ending at every frame."""
    F = features.shape[0]
    return adapt_audio(adaptor, sliding_windows(features, window, np.arange(F)))


def attach_audio(tracks, adaptor, window, features=None):
    for i, tr in enumerate(tracks):
        feats = tr.clip.audio.features if features is None else features[i]
        tr.attach_audio_latents(audio_latents_per_frame(adaptor, feats, window))


def clip_motion_latent(vae, clip, window):
    """Mean VAE posterior mean over a clip's non-overlapping windows."""
    q = clip.motion.q
    wins = np.stack([q[s : s + window] for s in range(0, q.shape[0] - window + 1, window)])
    return vae.encode_mean(wins).mean(axis=0)


def make_content_latent(vae, task, clips, window):
    """Unit-norm mean of the per-clip latents of every clip labelled ``task``."""
    chosen = [c for c in clips if c.meta.task == task]
    if not chosen:
        raise ValueError(f"no clips labelled {task!r}")
    return l2_normalize(np.mean([clip_motion_latent(vae, c, window) for c in chosen], axis=0))


def content_latents(vae, clips, window):
    """One latent per task present in ``clips``, in sorted task order."""
    return {task: make_content_latent(vae, task, clips, window) for task in sorted({c.meta.task for c in clips})}


# -- task environment ---------------------------------------------------------------


@dataclass
class TaskConfig:
    body: str = "chain"
    n_envs: int = 8
    teacher_history: int = 5
    student_history: int = 26
    lookahead: int = 4
    action_scale: float = 0.5
    randomize: bool = True
    pushes: bool = True
    eval_theta: float = THETA_FLOOR

    def validate(self):
        if self.n_envs < 1:
            raise ConfigError("env.n_envs", "need at least one environment")
        if not 1 <= self.teacher_history <= 26:
            raise ConfigError("env.teacher_history", "must lie in 1..26")
        if not 1 <= self.student_history <= 26:
            raise ConfigError("env.student_history", "must lie in 1..26")
        if self.lookahead < 1:
            raise ConfigError("env.lookahead", "must be >= 1")
        if self.action_scale <= 0:
            raise ConfigError("env.action_scale", "must be positive")
        return self


class TrackingEnv:
    """Batched tracking task: simulator + references + rewards + curricula.

    The teacher's action is a residual on the next reference pose:
    ``target = q_ref[k+1] + action_scale * a``.
    """

    N_PRIVILEGED = 5

    def __init__(self, model, tracks, task=None, reward_cfg=None, curriculum=None, seed=0, n_envs=None):
        if not tracks:
            raise ValueError("tracking needs at least one reference clip")
        self.model = model
        self.tracks = tracks
        self.task = (task or TaskConfig()).validate()
        self.reward_cfg = (reward_cfg or RewardConfig()).validate()
        self.curriculum = curriculum if curriculum is not None else CurriculumState()
        E = n_envs or self.task.n_envs
        ss = _seed_sequence(seed)
        sim_seed, pick_seed = ss.spawn(2)
        sim_cfg = SimConfig(randomize=self.task.randomize, pushes=self.task.pushes)
        self.sim = BatchedEnv(model, E, sim_cfg, seed=sim_seed)
        self.pick_rng = np.random.default_rng(pick_seed)
        self.n_envs = E
        nf = len(model.feet)
        self.clip_idx = np.zeros(E, dtype=int)
        self.k = np.zeros(E, dtype=int)
        self.air = np.zeros((E, nf))
        self.prev_residual = np.zeros((E, model.n_joints))
        self.ep_return = np.zeros(E)
        self.ep_len = np.zeros(E, dtype=int)
        self.theta_override = None
        self.advance_curriculum = True
        # stacked references padded to a common length so per-env indexing is one gather
        self._max_steps = max(t.n_steps for t in tracks)
        self._n_steps = np.array([t.n_steps for t in tracks])
        self._g = self._stack("g")
        self._gd = self._stack("gd")
        self._kp = self._stack("keypoints")
        self._contacts = self._stack("contacts")

    def _stack(self, name):
        arrs = []
        for t in self.tracks:
            a = getattr(t, name)
            pad = np.repeat(a[-1:], self._max_steps - a.shape[0], axis=0)
            arrs.append(np.concatenate([a, pad], axis=0))
        return np.stack(arrs)

    # -- references -----------------------------------------------------------

    @property
    def theta(self):
        return self.curriculum.theta if self.theta_override is None else self.theta_override

    def _ref_index(self, offset):
        return np.minimum(self.k + offset, self._n_steps[self.clip_idx] - 1)

    def ref_g(self, offset=0):
        return self._g[self.clip_idx, self._ref_index(offset)]

    def ref_gd(self, offset=0):
        return self._gd[self.clip_idx, self._ref_index(offset)]

    def ref_q(self, offset=0):
        return self.model.joint_part(self.ref_g(offset))

    def audio_latent(self):
        idx = self._ref_index(0)
        return np.stack([self.tracks[c].audio_latents[i] for c, i in zip(self.clip_idx, idx)])

    # -- episodes -----------------------------------------------------------------

    def reset(self, ids=None, phase=None, clips=None):
        """RSI: each listed env gets a clip and a start step drawn uniformly over all but the last step."""
        ids = np.arange(self.n_envs) if ids is None else np.atleast_1d(ids)
        if len(ids) == 0:
            return
        for j, i in enumerate(ids):
            c = int(self.pick_rng.integers(len(self.tracks))) if clips is None else int(np.atleast_1d(clips)[j])
            last = self.tracks[c].n_steps - 2
            ph = self.pick_rng.uniform(0.0, 1.0) if phase is None else phase
            self.clip_idx[i] = c
            self.k[i] = int(round(ph * last))
        self.sim.set_state(ids, self._g[self.clip_idx[ids], self.k[ids]], self._gd[self.clip_idx[ids], self.k[ids]])
        self.air[ids] = 0.0
        self.prev_residual[ids] = 0.0
        self.ep_return[ids] = 0.0
        self.ep_len[ids] = 0

    # -- observations ---------------------------------------------------------------

    def privileged(self):
        p = self.sim.params
        return np.stack([p.friction, p.gain_scale, p.mass_scale, p.com_offset / 0.05, p.delay_ms / 40.0], axis=1)

    def group_sizes(self):
        m, t = self.model, self.task
        J, L = m.n_joints, m.n_links
        proprio = t.teacher_history * frame_dim(J)
        ref = J + J + J + 2 * L + J * (t.lookahead - 1)
        root = 6 if m.floating_base else 0
        return [proprio, ref, root + self.N_PRIVILEGED]

    def condition(self):
        """Teacher condition: [proprioception | reference targets | root targets + privileged]."""
        m, t = self.model, self.task
        proprio = self.sim.observation(t.teacher_history)
        q = self.sim.q
        qn = self.ref_q(1)
        x, z, _ = m.root_pose(self.sim.g)
        origin = np.stack([x, z], axis=1)[:, None, :]
        kp = (self._kp[self.clip_idx, self._ref_index(1)] - origin).reshape(self.n_envs, -1)
        ahead = [self.ref_q(o) for o in range(2, t.lookahead + 1)]
        ref = np.concatenate([qn, m.joint_part(self.ref_gd(1)), qn - q, kp, *ahead], axis=1)
        parts = [proprio, ref]
        if m.floating_base:
            gr, gdr = self.ref_g(1), self.ref_gd(1)
            rx, rz, rp = m.root_pose(gr)
            parts.append(np.stack([rx - x, rz, rp, gdr[:, 0], gdr[:, 1], gdr[:, 2]], axis=1))
        parts.append(self.privileged())
        return np.concatenate(parts, axis=1)

    def critic_obs(self, cond=None):
        cond = self.condition() if cond is None else cond
        frac = self.k / np.maximum(self._n_steps[self.clip_idx] - 1, 1)
        return np.concatenate([cond, frac[:, None], np.full((self.n_envs, 1), self.theta)], axis=1)

    def student_proprio(self):
        return self.sim.observation(self.task.student_history)

    # -- stepping ---------------------------------------------------------------------

    def targets_from_residual(self, residual):
        return self.ref_q(1) + self.task.action_scale * residual

    def step(self, targets, residual=None):
        """Apply absolute joint targets; returns ``(reward, terminated, truncated, info)``."""
        E = self.n_envs
        targets = np.asarray(targets, dtype=np.float64)
        residual = (targets - self.ref_q(1)) / self.task.action_scale if residual is None else residual
        self.sim.step(targets)
        self.k = np.minimum(self.k + 1, self._n_steps[self.clip_idx] - 1)
        g_ref = self.ref_g(0)
        cause, dev = check_termination(self.sim, g_ref, self.theta)
        terminated = cause != CONTINUE
        self.air = update_air_time(self.air, self.sim.contacts, POLICY_DT)
        state = StepState(
            g=self.sim.g.copy(), gd=self.sim.gd.copy(), torque=self.sim.torque.copy(),
            action=np.asarray(residual, dtype=np.float64), prev_action=self.prev_residual.copy(),
            contacts=self.sim.contacts.copy(), foot_force=self.sim.foot_force.copy(),
            foot_velocity=self.sim.foot_velocity.copy(), air_time=self.air.copy(), terminated=terminated,
        )
        ref = ReferenceFrame(g=g_ref, gd=self.ref_gd(0), contacts=self._contacts[self.clip_idx, self.k])
        reward, parts, errors = total_reward(self.model, state, ref, self.reward_cfg, self.curriculum)
        if self.advance_curriculum:
            for _ in range(E):
                advance_curriculum(self.curriculum)
            update_adaptive_sigma(self.curriculum, errors)
        truncated = (self.k >= self._n_steps[self.clip_idx] - 1) & ~terminated
        self.prev_residual = np.asarray(residual, dtype=np.float64).copy()
        self.ep_return += reward
        self.ep_len += 1
        q_err = np.mean(np.abs(self.sim.q - self.model.joint_part(g_ref)), axis=1)
        info = {"cause": cause, "deviation": dev, "parts": parts, "q_err": q_err, "aborted": self.sim.aborted.copy()}
        return reward, terminated, truncated, info


# -- policies -------------------------------------------------------------------------


class RunningNorm:
    """Per-feature running mean/variance (parallel Welford), clipped standardisation."""

    def __init__(self, dim, clip=10.0):
        self.mean = np.zeros(dim)
        self.var = np.ones(dim)
        self.count = 1e-4
        self.clip = clip

    def update(self, x):
        x = np.asarray(x, dtype=np.float64).reshape(-1, self.mean.shape[0])
        n = x.shape[0]
        if n == 0:
            return
        bm, bv = x.mean(axis=0), x.var(axis=0)
        tot = self.count + n
        delta = bm - self.mean
        self.mean = self.mean + delta * n / tot
        self.var = (self.var * self.count + bv * n + delta**2 * self.count * n / tot) / tot
        self.count = tot

    def __call__(self, x):
        return np.clip((x - self.mean) / np.sqrt(self.var + 1e-8), -self.clip, self.clip)

    def state(self, prefix):
        return {f"{prefix}.mean": self.mean, f"{prefix}.var": self.var, f"{prefix}.count": np.array([self.count])}

    def load(self, tensors, prefix):
        self.mean = tensors[f"{prefix}.mean"].copy()
        self.var = tensors[f"{prefix}.var"].copy()
        self.count = float(tensors[f"{prefix}.count"][0])


def gaussian_logp(a, mu, log_std):
    z = (a - mu) * np.exp(-log_std)
    return -0.5 * np.sum(z * z, axis=-1) - np.sum(log_std) - 0.5 * a.shape[-1] * LOG_2PI


def gaussian_entropy(log_std):
    return float(np.sum(log_std) + 0.5 * log_std.shape[-1] * (1.0 + LOG_2PI))


class TeacherPolicy:
    """Mixture-of-experts mean with a state-independent learned log-std."""

    def __init__(self, moe, init_log_std=-0.7):
        self.moe = moe
        self.log_std = np.full(moe.action_dim, float(init_log_std))
        self.norm = RunningNorm(moe.schema.dim)

    def parameters(self):
        return {**prefixed("moe", self.moe.parameters()), "log_std": self.log_std}

    def mean(self, cond):
        return self.moe.forward(self.norm(cond))

    def act(self, cond, rng):
        mu = self.mean(cond)
        a = mu + np.exp(self.log_std) * rng.normal(size=mu.shape)
        return a, gaussian_logp(a, mu, self.log_std)

    def state(self):
        return {**self.parameters(), **self.norm.state("norm")}

    def load(self, tensors):
        self.moe.load_parameters({k[4:]: v for k, v in tensors.items() if k.startswith("moe.")})
        self.log_std[...] = tensors["log_std"]
        self.norm.load(tensors, "norm")


class Critic:
    def __init__(self, obs_dim, hidden=(128, 128), rng=None):
        self.net = DenseNet([obs_dim, *hidden, 1], ["elu"] * len(hidden) + ["linear"], rng)
        self.norm = RunningNorm(obs_dim)
        self.ret_norm = RunningNorm(1, clip=np.inf)

    def parameters(self):
        return self.net.parameters()

    def value(self, obs):
        out = self.net.forward(self.norm(obs))[:, 0]
        return self.ret_norm.mean[0] + math.sqrt(self.ret_norm.var[0] + 1e-8) * out

    def state(self):
        return {**prefixed("net", self.net.parameters()), **self.norm.state("norm"), **self.ret_norm.state("ret")}

    def load(self, tensors):
        self.net.load_parameters({k[4:]: v for k, v in tensors.items() if k.startswith("net.")})
        self.norm.load(tensors, "norm")
        self.ret_norm.load(tensors, "ret")


# -- PPO ----------------------------------------------------------------------------------


@dataclass
class PpoConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    entropy_coef: float = 0.01
    value_coef: float = 1.0
    epochs: int = 5
    minibatches: int = 4
    max_grad_norm: float = 1.0
    batch: int = 2048
    lr: float = 1e-3
    iterations: int = 30
    n_experts: int = 4
    moe_kind: str = "delta"
    expert_hidden: tuple = (64, 64)
    gate_hidden: tuple = (64,)
    critic_hidden: tuple = (128, 128)
    init_log_std: float = -0.7

    def validate(self):
        if not (0 < self.gamma <= 1):
            raise ConfigError("ppo.gamma", "must lie in (0, 1]")
        if not (0 < self.lam <= 1):
            raise ConfigError("ppo.lam", "must lie in (0, 1]")
        if self.clip <= 0:
            raise ConfigError("ppo.clip", "must be positive")
        if self.lr <= 0:
            raise ConfigError("ppo.lr", "must be positive")
        if self.epochs < 1 or self.minibatches < 1:
            raise ConfigError("ppo.epochs", "epochs and minibatches must be >= 1")
        if self.moe_kind not in ("delta", "vanilla"):
            raise ConfigError("ppo.moe_kind", f"expected 'delta' or 'vanilla', got {self.moe_kind!r}")
        if not 1 <= self.n_experts <= 8:
            raise ConfigError("ppo.n_experts", "must lie in 1..8")
        return self


def compute_gae(rewards, values, dones, gamma=0.99, lam=0.95):
    """Backward GAE recursion over the leading (time) axis; ``values`` carries one bootstrap row."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    T = rewards.shape[0]
    if values.shape[0] != T + 1 or dones.shape[0] != T:
        raise ValueError(f"GAE needs T+1 values and T done flags (got {values.shape[0]}, {dones.shape[0]} for T={T})")
    adv = np.zeros_like(rewards)
    last = np.zeros(rewards.shape[1:])
    for t in reversed(range(T)):
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * nonterminal * values[t + 1] - values[t]
        last = delta + gamma * lam * nonterminal * last
        adv[t] = last
    return adv, adv + values[:T]


def clipped_surrogate(ratio, adv, clip):
    """Per-sample ``min(r A, clip(r, 1 - c, 1 + c) A)``."""
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - clip, 1.0 + clip) * adv)


def normalize_advantages(adv):
    return (adv - adv.mean()) / (adv.std() + 1e-8)


@dataclass
class RolloutBuffer:
    obs: np.ndarray
    critic_obs: np.ndarray
    actions: np.ndarray
    logp: np.ndarray
    rewards: np.ndarray
    values: np.ndarray  # (T + 1, E)
    dones: np.ndarray
    valid: np.ndarray
    causes: np.ndarray
    q_err: np.ndarray
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None
    episodes: list = field(default_factory=list)

    def flat(self, name):
        a = getattr(self, name)
        return a.reshape((-1,) + a.shape[2:])


def policy_loss_and_grads(policy, obs_n, actions, old_logp, adv, cfg):
    """Clipped-surrogate loss with entropy bonus; returns (loss, grads, stats)."""
    B = obs_n.shape[0]
    mu, cache = policy.moe.forward_train(obs_n)
    log_std = policy.log_std
    logp = gaussian_logp(actions, mu, log_std)
    ratio = np.exp(logp - old_logp)
    s1 = ratio * adv
    s2 = np.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip) * adv
    surrogate = np.minimum(s1, s2)
    entropy = gaussian_entropy(log_std)
    loss = -float(np.mean(surrogate)) - cfg.entropy_coef * entropy
    dlogp = -(s1 <= s2).astype(np.float64) * ratio * adv / B
    inv_var = np.exp(-2.0 * log_std)
    diff = actions - mu
    g_mu = dlogp[:, None] * diff * inv_var
    grads = prefixed("moe", policy.moe.backward(cache, g_mu))
    grads["log_std"] = np.sum(dlogp[:, None] * (diff * diff * inv_var - 1.0), axis=0) - cfg.entropy_coef
    stats = {
        "policy_loss": -float(np.mean(surrogate)),
        "entropy": entropy,
        "approx_kl": float(np.mean(old_logp - logp)),
        "clip_frac": float(np.mean(np.abs(ratio - 1.0) > cfg.clip)),
        "ratio_mean": float(np.mean(ratio)),
    }
    return loss, grads, stats


def value_loss_and_grads(critic, cobs_n, ret_n, value_coef):
    B = cobs_n.shape[0]
    v, cache = critic.net.forward_train(cobs_n)
    diff = v[:, 0] - ret_n
    loss = float(np.mean(diff * diff))
    _, grads = critic.net.backward(cache, (2.0 * value_coef * diff / B)[:, None])
    return value_coef * loss, grads, loss


def ppo_update(policy, critic, buffer, cfg, opt_policy, opt_critic, rng):
    """Epochs x minibatches of clipped PPO; returns averaged stats.

    Non-finite losses stop the update early and are reported under
    ``"diagnostic"`` without touching parameters for that minibatch.
    """
    valid = buffer.flat("valid").astype(bool)
    obs = policy.norm(buffer.flat("obs")[valid])
    cobs = critic.norm(buffer.flat("critic_obs")[valid])
    actions = buffer.flat("actions")[valid]
    old_logp = buffer.flat("logp")[valid]
    adv = normalize_advantages(buffer.advantages.reshape(-1)[valid])
    ret = buffer.returns.reshape(-1)[valid]
    ret_n = (ret - critic.ret_norm.mean[0]) / math.sqrt(critic.ret_norm.var[0] + 1e-8)
    N = obs.shape[0]
    sums, n = {}, 0
    for _ in range(cfg.epochs):
        perm = rng.permutation(N)
        for idx in np.array_split(perm, cfg.minibatches):
            if idx.size == 0:
                continue
            ploss, pgrads, stats = policy_loss_and_grads(policy, obs[idx], actions[idx], old_logp[idx], adv[idx], cfg)
            vloss, vgrads, raw_v = value_loss_and_grads(critic, cobs[idx], ret_n[idx], cfg.value_coef)
            total = ploss + vloss
            try:
                if not math.isfinite(total):
                    raise NumericalFailure(f"non-finite PPO loss {total}")
                check_finite(pgrads, "policy")
                check_finite(vgrads, "critic")
            except NumericalFailure as exc:
                log.error("PPO update aborted: %s", exc)
                out = {k: v / max(n, 1) for k, v in sums.items()}
                out["diagnostic"] = str(exc)
                return out
            opt_policy.step(pgrads)
            opt_critic.step(vgrads)
            stats.update({"value_loss": raw_v, "total_loss": total})
            for k, v in stats.items():
                sums[k] = sums.get(k, 0.0) + v
            n += 1
    return {k: v / max(n, 1) for k, v in sums.items()}


def rollout(env, policy, critic, n_steps, rng, gamma=0.99):
    """Collect ``n_steps`` batched transitions with RSI resets; returns a RolloutBuffer."""
    E = env.n_envs
    cond0 = env.condition()
    D, C, A = cond0.shape[1], env.critic_obs(cond0).shape[1], env.model.n_joints
    buf = RolloutBuffer(
        obs=np.zeros((n_steps, E, D)), critic_obs=np.zeros((n_steps, E, C)), actions=np.zeros((n_steps, E, A)),
        logp=np.zeros((n_steps, E)), rewards=np.zeros((n_steps, E)), values=np.zeros((n_steps + 1, E)),
        dones=np.zeros((n_steps, E)), valid=np.ones((n_steps, E)), causes=np.zeros((n_steps, E), dtype=int),
        q_err=np.zeros((n_steps, E)),
    )
    start = np.zeros(E, dtype=int)  # buffer row where each env's current episode began
    for t in range(n_steps):
        cond = env.condition()
        cobs = env.critic_obs(cond)
        a, logp = policy.act(cond, rng)
        buf.obs[t], buf.critic_obs[t], buf.actions[t], buf.logp[t] = cond, cobs, a, logp
        buf.values[t] = critic.value(cobs)
        reward, term, trunc, info = env.step(env.targets_from_residual(a), a)
        aborted = info["aborted"]
        if trunc.any():
            reward = reward + gamma * np.where(trunc, critic.value(env.critic_obs()), 0.0)
        buf.rewards[t] = np.where(aborted, 0.0, reward)
        done = term | trunc | aborted
        buf.dones[t] = done
        buf.causes[t] = np.where(aborted, NUMERICAL, info["cause"])
        buf.q_err[t] = np.where(aborted, 0.0, info["q_err"])
        for i in np.flatnonzero(done):
            if aborted[i]:
                # a numerical abort discards the whole episode from the update
                buf.valid[start[i] : t + 1, i] = 0.0
            cause = "truncated" if trunc[i] else CAUSES[int(buf.causes[t, i])]
            buf.episodes.append({"length": int(env.ep_len[i]), "return": float(env.ep_return[i]),
                                 "cause": cause, "discarded": bool(aborted[i])})
            start[i] = t + 1
        env.reset(np.flatnonzero(done))
    buf.values[n_steps] = critic.value(env.critic_obs())
    return buf


# -- teacher training -----------------------------------------------------------------------


def build_teacher(env, cfg, rng):
    schema = PartitionSchema.from_sizes(_schema_sizes(env.group_sizes(), cfg.n_experts))
    moe = DeltaMoE(schema, env.model.n_joints, cfg.expert_hidden, cfg.gate_hidden, kind=cfg.moe_kind, rng=rng)
    policy = TeacherPolicy(moe, cfg.init_log_std)
    critic = Critic(env.critic_obs().shape[1], cfg.critic_hidden, rng)
    return policy, critic


def _schema_sizes(groups, n_experts):
    """Fit the three observation groups to ``n_experts - 1`` nested groups.

    Fewer experts merge trailing groups; more experts split the last group
    into equal pieces (the order of the filtration is preserved).
    """
    groups = [g for g in groups if g > 0]
    want = n_experts - 1
    if want <= 0:
        return [sum(groups)]
    while len(groups) > want:
        groups = groups[:-2] + [groups[-2] + groups[-1]]
    while len(groups) < want:
        big = int(np.argmax(groups))
        if groups[big] < 2:
            raise ConfigError("ppo.n_experts", "too many experts for the condition width")
        a = groups[big] // 2
        groups = groups[:big] + [a, groups[big] - a] + groups[big + 1 :]
    return groups


@dataclass
class TeacherResult:
    policy: TeacherPolicy
    critic: Critic
    timeline: list
    curriculum: CurriculumState


TIMELINE_FIELDS = ["iteration", "mean_reward", "episode_length", "train_mpjpe", "theta", "penalty_scale",
                   "policy_loss", "value_loss", "entropy", "approx_kl", "n_episodes", "tracking_failures"]


def update_normalizers(policy, critic, buf):
    valid = buf.flat("valid").astype(bool)
    policy.norm.update(buf.flat("obs")[valid])
    critic.norm.update(buf.flat("critic_obs")[valid])
    critic.ret_norm.update(buf.returns.reshape(-1, 1))


def train_teacher(model, tracks, task=None, ppo=None, reward_cfg=None, seed=0, log_fn=None, curriculum=None,
                  env_seed=None):
    """PPO from scratch; one timeline row per iteration.

    ``curriculum`` is a starting state (copied, never mutated). ``env_seed``
    overrides the environment stream so variants can share env draws.
    """
    task = (task or TaskConfig()).validate()
    ppo = (ppo or PpoConfig()).validate()
    ss = _seed_sequence(seed)
    own_env_seed, init_seed, act_seed, upd_seed = ss.spawn(4)
    env_seed = own_env_seed if env_seed is None else env_seed
    start = copy.deepcopy(curriculum) if curriculum is not None else CurriculumState()
    env = TrackingEnv(model, tracks, task, reward_cfg, start, seed=env_seed)
    init_rng = np.random.default_rng(init_seed)
    act_rng = np.random.default_rng(act_seed)
    upd_rng = np.random.default_rng(upd_seed)
    policy, critic = build_teacher(env, ppo, init_rng)
    opt_p = Adam(policy.parameters(), lr=ppo.lr, max_grad_norm=ppo.max_grad_norm)
    opt_c = Adam(critic.parameters(), lr=ppo.lr, max_grad_norm=ppo.max_grad_norm)
    n_steps = max(1, ppo.batch // env.n_envs)
    env.reset()
    # one discarded rollout seeds the observation statistics; afterwards they
    # change only between updates, so stored log-probs stay on-policy
    warm = rollout(env, policy, critic, n_steps, act_rng, ppo.gamma)
    warm.advantages, warm.returns = compute_gae(warm.rewards, warm.values, warm.dones, ppo.gamma, ppo.lam)
    update_normalizers(policy, critic, warm)
    timeline = []
    for it in range(ppo.iterations):
        buf = rollout(env, policy, critic, n_steps, act_rng, ppo.gamma)
        buf.advantages, buf.returns = compute_gae(buf.rewards, buf.values, buf.dones, ppo.gamma, ppo.lam)
        stats = ppo_update(policy, critic, buf, ppo, opt_p, opt_c, upd_rng)
        update_normalizers(policy, critic, buf)
        eps = [e for e in buf.episodes if not e["discarded"]]
        row = {
            "iteration": it,
            "mean_reward": float(buf.rewards.mean()),
            "episode_length": float(np.mean([e["length"] for e in eps])) if eps else float(n_steps),
            "train_mpjpe": float(buf.q_err.mean()),
            "theta": env.curriculum.theta,
            "penalty_scale": env.curriculum.penalty_scale,
            "policy_loss": stats.get("policy_loss", float("nan")),
            "value_loss": stats.get("value_loss", float("nan")),
            "entropy": stats.get("entropy", float("nan")),
            "approx_kl": stats.get("approx_kl", float("nan")),
            "n_episodes": len(eps),
            "tracking_failures": sum(e["cause"] == "tracking" for e in eps),
        }
        timeline.append(row)
        if log_fn:
            log_fn(row)
    return TeacherResult(policy, critic, timeline, env.curriculum)


# -- closed-loop evaluation ---------------------------------------------------------------------


def teacher_actor(policy):
    def act(env):
        residual = policy.mean(env.condition())
        return env.targets_from_residual(residual), residual

    return act


def evaluate(model, tracks, actor, task=None, seed=0, label="", held_out=False, reward_cfg=None, trajectories=None):
    """Run every clip once from its first step to its last; one env per clip.

    Termination uses ``task.eval_theta`` (the curriculum floor by default).
    Metrics of a failed clip cover the steps up to and including the failure.
    When ``trajectories`` is a list, one dict of per-step arrays per clip is
    appended to it.
    """
    task = (task or TaskConfig()).validate()
    E = len(tracks)
    env = TrackingEnv(model, tracks, task, reward_cfg, CurriculumState(theta=task.eval_theta), seed=seed, n_envs=E)
    env.theta_override = task.eval_theta
    env.advance_curriculum = False
    env.reset(phase=0.0, clips=np.arange(E))
    steps = env._n_steps - 1
    fail_step = np.zeros(E, dtype=int)
    fail_cause = [None] * E
    qs, gs, qds, refs, devs = [], [], [], [], []
    for t in range(int(steps.max())):
        targets, residual = actor(env)
        _, term, _, info = env.step(targets, residual)
        qs.append(env.sim.q.copy())
        gs.append(env.sim.g.copy())
        qds.append(env.sim.qd.copy())
        refs.append(env.ref_g(0).copy())
        devs.append(info["deviation"].copy())
        newly = (fail_step == 0) & (t < steps) & (term | info["aborted"])
        for i in np.flatnonzero(newly):
            fail_step[i] = t + 1
            fail_cause[i] = "numerical" if info["aborted"][i] else CAUSES[int(info["cause"][i])]
    qs, gs, qds, refs, devs = map(np.stack, (qs, gs, qds, refs, devs))
    pitch = model.root_pose(gs)[2] if model.floating_base else None
    report = EvalReport(label=label)
    for i, tr in enumerate(tracks):
        n = int(fail_step[i]) or int(steps[i])
        ok, cause = success(devs[:n, i], fail_cause[i] is not None, None if pitch is None else pitch[:n, i])
        try:
            score = rollout_bas(qds[:n, i], 1.0 / POLICY_DT, tr.beats) if n >= 3 else 0.0
        except ValueError:
            score = 0.0
        report.add(ClipResult(
            clip_id=tr.clip_id, success=bool(ok), cause=fail_cause[i] or cause,
            mpjpe=mpjpe(qs[:n, i], model.joint_part(refs[:n, i])), mpkpe=mpkpe(model, gs[:n, i], refs[:n, i]),
            bas=score, held_out=held_out, steps=n,
        ))
        if trajectories is not None:
            trajectories.append({"clip_id": tr.clip_id, "time": np.arange(1, n + 1) * POLICY_DT, "q": qs[:n, i],
                                 "q_ref": model.joint_part(refs[:n, i]), "qd": qds[:n, i], "deviation": devs[:n, i]})
    return report


# -- student ----------------------------------------------------------------------------------


@dataclass
class DistillConfig:
    iterations: int = 50
    warmup_iterations: int = 1
    n_envs: int = 16
    steps_per_iteration: int = 64
    grad_steps: int = 200
    batch: int = 128
    lr: float = 1e-3
    final_lr_ratio: float = 0.1
    max_grad_norm: float = 1.0
    dataset_cap: int = 60000
    width: int = 128
    n_blocks: int = 4
    time_dim: int = 32
    objective: str = "x0"
    T: int = 50
    beta_max: float = 0.2
    schedule: str = "cosine"
    style_scale: float = 0.1
    use_audio: bool = True
    use_content: bool = True
    collect_theta: float = 0.5
    # share of DAgger resets at the clip's first step instead of a random phase;
    # deployment always starts there and random phases rarely visit it
    start_fraction: float = 0.5
    sampler: str = "ddim"
    sampler_steps: int = 2
    eta: float = 0.0

    def validate(self):
        if self.objective not in ("x0", "epsilon"):
            raise ConfigError("distill.objective", f"expected 'x0' or 'epsilon', got {self.objective!r}")
        if self.iterations < 1 or self.grad_steps < 0 or self.batch < 1:
            raise ConfigError("distill.iterations", "iterations, grad_steps and batch must be positive")
        if self.sampler not in ("ddim", "ddpm"):
            raise ConfigError("distill.sampler", f"unknown sampler {self.sampler!r}")
        if not 0 <= self.eta <= 1:
            raise ConfigError("distill.eta", "must lie in [0, 1]")
        if not 0.0 <= self.start_fraction <= 1.0:
            raise ConfigError("distill.start_fraction", "must lie in [0, 1]")
        return self

    def sampler_config(self):
        return SamplerConfig(self.sampler, self.sampler_steps, self.eta)


class StudentPolicy:
    """Denoiser plus the fixed content latents; acts from proprio history and the audio latent."""

    def __init__(self, denoiser, content_latents, history, use_audio=True):
        self.denoiser = denoiser
        self.content = {k: np.asarray(v, dtype=np.float64) for k, v in content_latents.items()}
        self.history = history
        self.use_audio = use_audio
        self.norm = RunningNorm(denoiser.cond_dim - len(next(iter(self.content.values()))))

    def conditioning(self, env):
        content = np.stack([self.content[env.tracks[c].task] for c in env.clip_idx])
        proprio = self.norm(env.student_proprio())
        return np.concatenate([content, proprio], axis=1)

    def style(self, env):
        if not self.use_audio:
            return np.zeros((env.n_envs, self.denoiser.audio_dim))
        return env.audio_latent()

    def act(self, env, rng, sampler_cfg):
        return sample_action(self.denoiser, self.conditioning(env), self.style(env), rng, sampler_cfg)

    def state(self):
        out = {**prefixed("denoiser", self.denoiser.parameters()), **self.norm.state("norm")}
        for k, v in self.content.items():
            out[f"content.{k}"] = v
        return out

    def load(self, tensors):
        self.denoiser.load_parameters({k[9:]: v for k, v in tensors.items() if k.startswith("denoiser.")})
        self.norm.load(tensors, "norm")

    @classmethod
    def from_state(cls, tensors, model, task, cfg):
        content = {k[8:]: v for k, v in tensors.items() if k.startswith("content.")}
        audio_dim = tensors["denoiser.style0"].shape[0]
        student = build_student(model, content, audio_dim, task, cfg, np.random.default_rng(0))
        student.load(tensors)
        return student


def student_actor(student, rng, sampler_cfg):
    def act(env):
        return student.act(env, rng, sampler_cfg), None

    return act


def build_student(model, content_latents, audio_dim, task, cfg, rng):
    cond_dim = len(next(iter(content_latents.values()))) + task.student_history * frame_dim(model.n_joints)
    sched = build_schedule(cfg.T, cfg.schedule, cfg.beta_max)
    den = StudentDenoiser(model.n_joints, cond_dim, audio_dim, cfg.width, cfg.n_blocks, cfg.time_dim, cfg.objective,
                          cfg.style_scale, sched, rng)
    return StudentPolicy(den, content_latents, task.student_history, cfg.use_audio)


@dataclass
class DistillResult:
    student: StudentPolicy
    timeline: list
    dropped_labels: int


DISTILL_FIELDS = ["iteration", "dataset_size", "loss", "label_mpjpe", "episode_length", "dropped_labels"]


def dagger_distill(model, tracks, teacher, content_latents, task=None, cfg=None, seed=0, log_fn=None, env_seed=None):
    """Pure student rollouts labelled by the teacher, aggregated, regressed with the denoising loss."""
    task = (task or TaskConfig()).validate()
    cfg = (cfg or DistillConfig()).validate()
    if any(t.audio_latents is None for t in tracks):
        raise ValueError("attach audio latents to every track before distillation")
    ss = _seed_sequence(seed)
    own_env_seed, init_seed, act_seed, train_seed, start_seed = ss.spawn(5)
    env_seed = own_env_seed if env_seed is None else env_seed
    if not cfg.use_content:
        content_latents = {k: np.zeros_like(v) for k, v in content_latents.items()}
    audio_dim = tracks[0].audio_latents.shape[1]
    student = build_student(model, content_latents, audio_dim, task, cfg, np.random.default_rng(init_seed))
    env = TrackingEnv(model, tracks, task, None, CurriculumState(theta=cfg.collect_theta), seed=env_seed,
                      n_envs=cfg.n_envs)
    env.theta_override = cfg.collect_theta
    env.advance_curriculum = False
    act_rng, train_rng = np.random.default_rng(act_seed), np.random.default_rng(train_seed)
    opt = Adam(student.denoiser.parameters(), lr=cfg.lr, max_grad_norm=cfg.max_grad_norm)
    teacher_act = teacher_actor(teacher)
    sampler = cfg.sampler_config()
    start_rng = np.random.default_rng(start_seed)

    def reset(ids):
        at_start = start_rng.random(len(ids)) < cfg.start_fraction
        env.reset(ids[~at_start])
        env.reset(ids[at_start], phase=0.0)

    data_c, data_proprio, data_a, data_l = [], [], [], []
    timeline, dropped = [], 0
    reset(np.arange(env.n_envs))
    for it in range(cfg.iterations):
        lengths, label_err = [], []
        for _ in range(cfg.steps_per_iteration):
            labels, _ = teacher_act(env)
            ok = np.all(np.isfinite(labels), axis=1)
            dropped += int((~ok).sum())
            content = np.stack([student.content[env.tracks[c].task] for c in env.clip_idx])
            proprio = env.student_proprio()
            style = student.style(env)
            data_c.append(content[ok])
            data_proprio.append(proprio[ok])
            data_a.append(labels[ok])
            data_l.append(style[ok])
            action = student.act(env, act_rng, sampler)
            if ok.any():
                label_err.append(np.mean(np.abs(action - labels)[ok]))
            if it < cfg.warmup_iterations:
                action = labels
            _, term, trunc, info = env.step(action)
            done = term | trunc | info["aborted"]
            lengths.extend(env.ep_len[done].tolist())
            reset(np.flatnonzero(done))
        C, P = np.concatenate(data_c), np.concatenate(data_proprio)
        Aa, Ll = np.concatenate(data_a), np.concatenate(data_l)
        if C.shape[0] > cfg.dataset_cap:
            C, P, Aa, Ll = C[-cfg.dataset_cap :], P[-cfg.dataset_cap :], Aa[-cfg.dataset_cap :], Ll[-cfg.dataset_cap :]
        data_c, data_proprio, data_a, data_l = [C], [P], [Aa], [Ll]
        student.norm.update(P[-cfg.steps_per_iteration * env.n_envs :])
        cond = np.concatenate([C, student.norm(P)], axis=1)
        progress = it / max(cfg.iterations - 1, 1)
        opt.lr = cfg.lr * (cfg.final_lr_ratio + (1.0 - cfg.final_lr_ratio) * 0.5 * (1.0 + math.cos(math.pi * progress)))
        losses = []
        for _ in range(cfg.grad_steps if cond.shape[0] else 0):
            idx = train_rng.integers(0, cond.shape[0], size=min(cfg.batch, cond.shape[0]))
            loss, grads = diffusion_loss(student.denoiser, Aa[idx], cond[idx], Ll[idx], train_rng)
            check_finite(grads, "student")
            opt.step(grads)
            losses.append(loss)
        row = {
            "iteration": it,
            "dataset_size": int(cond.shape[0]),
            "loss": float(np.mean(losses)) if losses else float("nan"),
            "label_mpjpe": float(np.mean(label_err)) if label_err else float("nan"),
            "episode_length": float(np.mean(lengths)) if lengths else float(cfg.steps_per_iteration),
            "dropped_labels": dropped,
        }
        timeline.append(row)
        if log_fn:
            log_fn(row)
    return DistillResult(student, timeline, dropped)


def timeline_rows(timeline, fields):
    return [[row[f] for f in fields] for row in timeline]


def config_dict(obj):
    return asdict(obj)
