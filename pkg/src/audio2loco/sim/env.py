"""Batched planar simulation: PD actuation, delay, contact, pushes, RSI, termination."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from ..fileio import write_csv
from .model import keypoints, kinematics, mass_matrix, passive_forces

POLICY_DT = 0.02
MAX_DELAY_MS = 40.0

CONTINUE, TRACKING, HEIGHT, PITCH, NUMERICAL = 0, 1, 2, 3, 4
CAUSES = {CONTINUE: "continue", TRACKING: "tracking", HEIGHT: "fall_height", PITCH: "fall_pitch", NUMERICAL: "numerical"}


@dataclass
class DomainParams:
    """Per-environment dynamics parameters (scalars or ``(E,)`` arrays)."""

    friction: object = 1.0
    gain_scale: object = 1.0
    mass_scale: object = 1.0
    com_offset: object = 0.0
    delay_ms: object = 0.0
    push_velocity: float = 0.5
    push_interval: tuple = (5.0, 10.0)
    torque_noise: float = 0.0

    def broadcast(self, n):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("push_velocity", "push_interval", "torque_noise"):
                out[f.name] = v
            else:
                out[f.name] = np.broadcast_to(np.asarray(v, dtype=np.float64), (n,)).copy()
        return DomainParams(**out)

    def row(self, i):
        return {f.name: (getattr(self, f.name)[i] if isinstance(getattr(self, f.name), np.ndarray) else getattr(self, f.name))
                for f in fields(self)}


RANDOMIZATION_RANGES = {
    "friction": (0.2, 1.5),
    "gain_scale": (0.75, 1.25),
    "mass_scale": (0.9, 1.1),
    "com_offset": (-0.05, 0.05),
    "delay_ms": (0.0, 40.0),
}
ERFI_SCALE = 0.05


def randomize_domain(rng, n=None):
    """Independent uniform draws per field, in a fixed order."""
    size = None if n is None else (n,)
    vals = {name: rng.uniform(lo, hi, size=size) for name, (lo, hi) in RANDOMIZATION_RANGES.items()}
    return DomainParams(**vals, torque_noise=ERFI_SCALE)


def delay_steps(delay_ms):
    return np.rint(np.asarray(delay_ms) / (POLICY_DT * 1e3)).astype(int)


@dataclass
class SimConfig:
    dt: float = 0.002
    substeps: int = 10
    kp: float = 40.0
    kd: float = 2.0
    contact_stiffness: float = 2e4
    contact_damping: float = 200.0
    tangential_damping: float = 1000.0
    contact_flag_force: float = 1.0
    history: int = 26
    randomize: bool = True
    pushes: bool = True
    fall_height: float = 0.5
    fall_pitch: float = 1.0


def frame_dim(n_joints):
    """Per-frame proprioception: q, qdot, last action, root angular velocity (3), projected gravity (3)."""
    return 3 * n_joints + 6


class BatchedEnv:
    """``n_envs`` independent copies of one body, stepped together.

    Each copy owns its state, domain parameters and random stream; nothing is
    shared between copies except the read-only body model.
    """

    def __init__(self, model, n_envs, cfg=None, seed=0):
        self.model = model
        self.cfg = cfg or SimConfig()
        self.n_envs = E = int(n_envs)
        ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        self.rngs = [np.random.default_rng(s) for s in ss.spawn(E)]
        J, n = model.n_joints, model.n_coords
        self.g = np.zeros((E, n))
        self.gd = np.zeros((E, n))
        self.last_action = np.zeros((E, J))
        self.max_delay = int(delay_steps(MAX_DELAY_MS))
        self.queue = np.zeros((E, self.max_delay + 1, J))
        self.time = np.zeros(E)
        self.next_push = np.full(E, np.inf)
        self.contacts = np.zeros((E, len(model.feet)), dtype=bool)
        self.foot_force = np.zeros((E, len(model.feet), 2))
        self.foot_velocity = np.zeros((E, len(model.feet), 2))
        self.torque = np.zeros((E, J))
        self.history = np.zeros((E, self.cfg.history, frame_dim(J)))
        self.aborted = np.zeros(E, dtype=bool)
        self.diagnostics = []
        self.params = DomainParams().broadcast(E)
        if self.cfg.randomize:
            for i in range(E):
                self.resample_domain(i)

    # -- parameters --------------------------------------------------------

    def resample_domain(self, i):
        p = randomize_domain(self.rngs[i])
        for f in fields(DomainParams):
            v = getattr(p, f.name)
            if isinstance(getattr(self.params, f.name), np.ndarray):
                getattr(self.params, f.name)[i] = v
            else:
                setattr(self.params, f.name, v)

    @property
    def delay(self):
        return delay_steps(self.params.delay_ms)

    # -- state -------------------------------------------------------------

    def set_state(self, ids, g, gd):
        ids = np.atleast_1d(ids)
        self.g[ids] = g
        self.gd[ids] = gd
        q = self.model.joint_part(self.g[ids])
        self.queue[ids] = q[:, None, :]
        self.last_action[ids] = q
        self.time[ids] = 0.0
        self.aborted[ids] = False
        self.torque[ids] = 0.0
        for i in ids:
            self.next_push[i] = self.rngs[i].uniform(*self.params.push_interval)
        self._refresh_contacts()
        frame = self.proprio_frame()[ids]
        self.history[ids] = frame[:, None, :]

    def root_angular_velocity(self):
        E = self.n_envs
        w = np.zeros((E, 3))
        if self.model.floating_base:
            w[:, 1] = self.gd[:, 2]
        return w

    def projected_gravity(self):
        E = self.n_envs
        pitch = self.g[:, 2] if self.model.floating_base else np.zeros(E)
        return np.stack([np.sin(pitch), np.zeros(E), -np.cos(pitch)], axis=1)

    def proprio_frame(self):
        m = self.model
        return np.concatenate(
            [m.joint_part(self.g), m.joint_part(self.gd), self.last_action, self.root_angular_velocity(),
             self.projected_gravity()],
            axis=1,
        )

    def observation(self, n_frames):
        """Last ``n_frames`` proprioceptive frames, oldest first, flattened."""
        if not 1 <= n_frames <= self.cfg.history:
            raise ValueError(f"history depth {n_frames} outside 1..{self.cfg.history}")
        return self.history[:, -n_frames:].reshape(self.n_envs, -1)

    @property
    def q(self):
        return self.model.joint_part(self.g)

    @property
    def qd(self):
        return self.model.joint_part(self.gd)

    def keypoints(self):
        return keypoints(self.model, self.g)

    # -- dynamics ----------------------------------------------------------

    def _contact_forces(self, kin):
        m, cfg = self.model, self.cfg
        if not m.feet:
            return np.zeros((self.n_envs, 0, 2)), np.zeros((self.n_envs, 0, 2))
        p = kin.end[:, m.feet]
        v = kin.v_end[:, m.feet]
        pen = m.ground_height - p[..., 1]
        fn = np.where(pen > 0, cfg.contact_stiffness * pen - cfg.contact_damping * v[..., 1], 0.0)
        fn = np.maximum(fn, 0.0)
        cap = self.params.friction[:, None] * fn
        ft = np.clip(-cfg.tangential_damping * v[..., 0], -cap, cap)
        return np.stack([ft, fn], axis=-1), v

    def _refresh_contacts(self):
        kin = kinematics(self.model, self.g, self.gd, self.params.com_offset)
        F, v = self._contact_forces(kin)
        self.foot_force = F
        self.foot_velocity = v
        self.contacts = np.linalg.norm(F, axis=-1) >= self.cfg.contact_flag_force

    def _substep(self, torque_fn, target, noise, dt):
        """One semi-implicit Euler substep; returns applied torque and contact forces.

        Stiff terms (contact damping, PD damping and the PD spring's one-step
        look-ahead) enter a linear solve for a trial velocity. Forces are then
        evaluated at that velocity, clipped to the torque limits and friction
        cones, and applied explicitly. Without clipping the update equals the
        linearly implicit one.
        """
        m, cfg = self.model, self.cfg
        E, b = self.n_envs, m.base_dofs
        g, gd = self.g, self.gd
        kin = kinematics(m, g, gd, self.params.com_offset)
        M, masses = mass_matrix(m, kin, self.params.mass_scale)
        f = passive_forces(m, kin, masses)
        A = M.copy()
        rhs = np.einsum("eij,ej->ei", M, gd)
        if target is not None:
            gs = self.params.gain_scale[:, None]
            kp, kd = cfg.kp * gs, cfg.kd * gs
            bias = kp * (target - g[:, b:]) + noise * self.params.torque_noise * m.torque_limit
            jd = kd + dt * kp
            A[:, b:, b:] += dt * jd[:, :, None] * np.eye(m.n_joints)
            rhs[:, b:] += dt * bias
        else:
            fixed = torque_fn(0)
        if m.feet:
            Jc = kin.J_end[:, m.feet]
            v = kin.v_end[:, m.feet]
            pen = m.ground_height - kin.end[:, m.feet, 1]
            active = pen > 0
            spring = np.where(active, cfg.contact_stiffness * pen, 0.0)
            damp = np.stack([np.where(active, cfg.tangential_damping, 0.0),
                             np.where(active, cfg.contact_damping, 0.0)], axis=-1)
            A += dt * np.einsum("efki,efkj->eij", Jc, Jc * damp[..., None])
            rhs += dt * np.einsum("efi,ef->ei", Jc[:, :, 1], spring)
        if target is None:
            rhs[:, b:] += dt * fixed
        rhs += dt * f
        trial = np.linalg.solve(A, rhs[..., None])[..., 0]
        if target is not None:
            tau = np.clip(bias - jd * trial[:, b:], -m.torque_limit, m.torque_limit)
        else:
            tau = fixed
        f[:, b:] += tau
        if m.feet:
            vt = np.einsum("efki,ei->efk", Jc, trial)
            fn = np.maximum(spring - damp[..., 1] * vt[..., 1], 0.0)
            cap = self.params.friction[:, None] * fn
            ft = np.clip(-damp[..., 0] * vt[..., 0], -cap, cap)
            F = np.stack([ft, fn], axis=-1)
            f += np.einsum("efki,efk->ei", Jc, F)
        else:
            F = v = np.zeros((E, 0, 2))
        self.gd = gd + dt * np.linalg.solve(M, f[..., None])[..., 0]
        self.g = g + dt * self.gd
        self._enforce_limits(M)
        self.torque = tau
        self.foot_force, self.foot_velocity = F, v

    def integrate(self, torque_fn=None, substeps=1, target=None, noise=None):
        """Advance ``substeps`` inner steps.

        With ``target`` the joints are PD-driven toward it (``noise`` is the
        per-substep ERFI draw in [-1, 1]); otherwise ``torque_fn(s)`` gives raw
        joint torques.
        """
        for s in range(substeps):
            if target is not None:
                ns = np.zeros_like(target) if noise is None else noise[s]
                self._substep(None, target, ns, self.cfg.dt)
            else:
                self._substep(lambda _: torque_fn(s), None, None, self.cfg.dt)
        if self.model.feet:
            self.contacts = np.linalg.norm(self.foot_force, axis=-1) >= self.cfg.contact_flag_force

    def _enforce_limits(self, M):
        """Clamp joints into range and remove outward velocity with a plastic impulse.

        The impulse acts only along the offending joint axes through ``M^-1``,
        so it cannot add kinetic energy (simply zeroing coordinates can).
        """
        m = self.model
        b = m.base_dofs
        q = self.g[:, b:]
        low, high = q < m.lower, q > m.upper
        if not (low.any() or high.any()):
            return
        self.g[:, b:] = np.clip(q, m.lower, m.upper)
        for e in np.flatnonzero((low | high).any(axis=1)):
            Minv = None
            active = np.zeros(m.n_joints, dtype=bool)
            for _ in range(m.n_joints):
                qd = self.gd[e, b:]
                out = (low[e] & (qd < 0)) | (high[e] & (qd > 0))
                if not (out & ~active).any():
                    break
                active |= out
                if Minv is None:
                    Minv = np.linalg.inv(M[e])
                idx = b + np.flatnonzero(active)
                lam = np.linalg.solve(Minv[np.ix_(idx, idx)], -self.gd[e, idx])
                self.gd[e] += Minv[:, idx] @ lam

    def step(self, actions):
        """Advance one policy step with target joint positions ``actions`` ``(E, J)``."""
        actions = np.asarray(actions, dtype=np.float64).reshape(self.n_envs, self.model.n_joints)
        self.queue[:, 1:] = self.queue[:, :-1]
        self.queue[:, 0] = actions
        applied = self.queue[np.arange(self.n_envs), self.delay]
        S = self.cfg.substeps
        if self.params.torque_noise > 0:
            noise = np.stack([r.uniform(-1.0, 1.0, size=(S, self.model.n_joints)) for r in self.rngs], axis=1)
        else:
            noise = np.zeros((S, self.n_envs, self.model.n_joints))
        g_prev, gd_prev = self.g.copy(), self.gd.copy()
        self.integrate(substeps=S, target=applied, noise=noise)
        bad = ~(np.all(np.isfinite(self.g), axis=1) & np.all(np.isfinite(self.gd), axis=1))
        if bad.any():
            for i in np.flatnonzero(bad):
                self.diagnostics.append(f"env {i}: non-finite state at t={self.time[i] + POLICY_DT:.2f}s; episode aborted")
            self.g[bad], self.gd[bad] = g_prev[bad], gd_prev[bad]
            self.aborted |= bad
        self.time += POLICY_DT
        self.last_action = actions.copy()
        if self.cfg.pushes:
            self.maybe_push()
        self.history[:, :-1] = self.history[:, 1:]
        self.history[:, -1] = self.proprio_frame()
        return applied

    def maybe_push(self):
        """Apply due pushes; returns the boolean mask of pushed environments."""
        due = self.time >= self.next_push - 1e-9
        for i in np.flatnonzero(due):
            r = self.rngs[i]
            if self.model.floating_base:
                angle = r.uniform(0.0, 2.0 * math.pi)
                self.gd[i, 0] += self.params.push_velocity * math.cos(angle)
                self.gd[i, 1] += self.params.push_velocity * math.sin(angle)
            self.next_push[i] += r.uniform(*self.params.push_interval)
        return due


def maybe_push(env):
    return env.maybe_push()


def rsi_frame_index(phase, n_frames):
    return int(round(phase * (n_frames - 1)))


def clip_state(model, clip, idx):
    g = model.coords(clip.q[idx], clip.root_pos[idx], clip.root_pitch[idx])[0]
    gd = model.coords(clip.qd[idx], clip.root_vel[idx], clip.root_pitch_rate[idx])[0]
    return g, gd


def reset_rsi(env, clip, rng=None, env_ids=None, phase=None):
    """Start each environment at a uniformly drawn phase of ``clip``; returns frame indices.

    Phases come from ``rng`` when given, otherwise from each environment's
    own stream. A fixed ``phase`` skips the draw.
    """
    if clip.n_frames < 1:
        raise ValueError("cannot initialise from an empty clip")
    ids = np.arange(env.n_envs) if env_ids is None else np.atleast_1d(env_ids)
    frames = []
    for i in ids:
        if phase is not None:
            phi = phase
        else:
            phi = (rng if rng is not None else env.rngs[i]).uniform(0.0, 1.0)
        idx = rsi_frame_index(phi, clip.n_frames)
        g, gd = clip_state(env.model, clip, idx)
        env.set_state(i, g, gd)
        frames.append(idx)
    return np.array(frames)


def termination_cause(deviation, theta, root_height=None, root_pitch=None, fall_height=None, fall_pitch=None):
    """Vectorised cause codes: tracking failure first, then falls."""
    deviation = np.atleast_1d(np.asarray(deviation, dtype=np.float64))
    cause = np.where(deviation > theta, TRACKING, CONTINUE)
    if root_height is not None and fall_height is not None:
        cause = np.where((cause == CONTINUE) & (np.asarray(root_height) < fall_height), HEIGHT, cause)
    if root_pitch is not None and fall_pitch is not None:
        cause = np.where((cause == CONTINUE) & (np.abs(np.asarray(root_pitch)) > fall_pitch), PITCH, cause)
    return cause


def keypoint_deviation(model, g, ref_g):
    return np.linalg.norm(keypoints(model, g) - keypoints(model, ref_g), axis=-1).mean(axis=-1)


def check_termination(env, ref_g, theta):
    m = env.model
    dev = keypoint_deviation(m, env.g, ref_g)
    if m.floating_base:
        x, z, pitch = m.root_pose(env.g)
        cause = termination_cause(dev, theta, z, pitch, env.cfg.fall_height, env.cfg.fall_pitch)
    else:
        cause = termination_cause(dev, theta)
    return np.where(env.aborted, NUMERICAL, cause), dev


@dataclass
class TrajectoryRecorder:
    """Per-policy-step rows for one environment of a batched rollout."""

    model: object
    env_index: int = 0
    rows: list = field(default_factory=list)

    def record(self, env, step, action):
        i = self.env_index
        x, z, pitch = self.model.root_pose(env.g[i : i + 1])
        self.rows.append([step, env.time[i], *env.q[i], *env.qd[i], *np.asarray(action)[i], x[0], z[0], pitch[0],
                          *[int(c) for c in env.contacts[i]]])

    def header(self):
        J, nf = self.model.n_joints, len(self.model.feet)
        return (["step", "time"] + [f"q_{j}" for j in range(J)] + [f"qd_{j}" for j in range(J)]
                + [f"action_{j}" for j in range(J)] + ["root_x", "root_z", "root_pitch"]
                + [f"contact_{k}" for k in range(nf)])

    def save(self, path):
        write_csv(path, self.header(), self.rows)
