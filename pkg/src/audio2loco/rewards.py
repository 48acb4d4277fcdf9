"""Tracking rewards, regularization penalties, soft limits and training curricula.

Every tracking term except the contact mask has the bounded form
``exp(-x^2 / sigma^2)`` where ``x`` is the term's error magnitude. Sigmas can
adapt online: each follows an exponential moving average of its own recent
error, clipped to a fixed band. That update rule is a local design choice;
only the reward form itself is prescribed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .sim.model import kinematics

TRACKING_WEIGHTS = {
    "joint_pos": 1.0,
    "joint_vel": 1.0,
    "body_pos": 1.0,
    "body_rot": 0.5,
    "body_vel": 0.5,
    "body_ang_vel": 0.5,
    "vr_points": 1.6,
    "feet_pos": 1.0,
    "max_joint_pos": 1.0,
    "contact": 0.5,
}

PENALTY_WEIGHTS = {
    "joint_pos_limits": -10.0,
    "joint_vel_limits": -5.0,
    "torque_limits": -5.0,
    "slippage": -1.0,
    "feet_contact_forces": -0.01,
    "air_time": -1.0,
    "stumble": -2.0,
    "torque": -1e-6,
    "action_rate": -0.02,
    "collision": -30.0,
    "termination": -200.0,
}

# positions start at 0.5, velocities at 1.0, then adapt
DEFAULT_SIGMAS = {
    "joint_pos": 0.5,
    "joint_vel": 1.0,
    "body_pos": 0.5,
    "body_rot": 0.5,
    "body_vel": 1.0,
    "body_ang_vel": 1.0,
    "vr_points": 0.5,
    "feet_pos": 0.5,
    "max_joint_pos": 0.5,
}

INDICATOR_PENALTIES = ("joint_pos_limits", "joint_vel_limits", "torque_limits", "air_time", "stumble", "collision",
                       "termination")


@dataclass
class RewardConfig:
    weights: dict = field(default_factory=lambda: dict(TRACKING_WEIGHTS))
    sigmas: dict = field(default_factory=lambda: dict(DEFAULT_SIGMAS))
    penalty_weights: dict = field(default_factory=lambda: dict(PENALTY_WEIGHTS))
    soft_ratio: float = 0.95
    contact_force_limit: float = 400.0
    slip_force: float = 1.0
    air_time_limit: float = 0.3
    stumble_ratio: float = 5.0

    def validate(self):
        if set(self.weights) != set(TRACKING_WEIGHTS):
            raise ConfigError("rewards.weights", f"expected terms {sorted(TRACKING_WEIGHTS)}")
        if set(self.penalty_weights) != set(PENALTY_WEIGHTS):
            raise ConfigError("rewards.penalty_weights", f"expected terms {sorted(PENALTY_WEIGHTS)}")
        if set(self.sigmas) != set(DEFAULT_SIGMAS):
            raise ConfigError("rewards.sigmas", f"expected terms {sorted(DEFAULT_SIGMAS)}")
        for name, s in self.sigmas.items():
            if not s > 0:
                raise ConfigError(f"rewards.sigmas.{name}", "sigma must be positive")
        if not 0 < self.soft_ratio <= 1:
            raise ConfigError("rewards.soft_ratio", "must lie in (0, 1]")
        return self


@dataclass
class CurriculumState:
    """Termination threshold, penalty scale and adaptive sigmas for one training run."""

    theta: float = 1.5
    theta_decay: float = 2.5e-5
    theta_bounds: tuple = (0.3, 2.0)
    penalty_scale: float = 0.1
    penalty_growth: float = 1e-4
    penalty_bounds: tuple = (0.0, 1.0)
    sigmas: dict = field(default_factory=lambda: dict(DEFAULT_SIGMAS))
    sigma_rate: float = 0.01
    sigma_bounds: tuple = (1e-3, 10.0)
    adapt_sigma: bool = True

    def to_dict(self):
        return {"theta": self.theta, "penalty_scale": self.penalty_scale, "sigmas": dict(self.sigmas)}


# -- elementary terms --------------------------------------------------------


def soft_limits(lower, upper, ratio=0.95):
    """Shrink hard limits symmetrically about their midpoint by ``ratio``."""
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    if np.any(lower >= upper):
        raise ValueError("soft limits need lower < upper")
    if not 0 < ratio <= 1:
        raise ValueError(f"soft-limit ratio {ratio} outside (0, 1]")
    mid = 0.5 * (lower + upper)
    half = 0.5 * (upper - lower) * ratio
    return mid - half, mid + half


def tracking_reward(error_sq, sigma):
    return np.exp(-np.asarray(error_sq, dtype=np.float64) / float(sigma) ** 2)


def contact_reward(contacts, ref_contacts):
    c = np.asarray(contacts, dtype=np.float64)
    r = np.asarray(ref_contacts, dtype=np.float64)
    if c.shape[-1] == 0:
        return np.ones(c.shape[:-1])
    return 1.0 - np.abs(c - r).sum(axis=-1) / 2.0


def wrap_angle(a):
    return (np.asarray(a) + np.pi) % (2.0 * np.pi) - np.pi


# -- state snapshots ----------------------------------------------------------


@dataclass
class StepState:
    """What the reward needs from one policy step of a batch of environments."""

    g: np.ndarray
    gd: np.ndarray
    torque: np.ndarray
    action: np.ndarray
    prev_action: np.ndarray
    contacts: np.ndarray  # (E, F) bool
    foot_force: np.ndarray  # (E, F, 2)
    foot_velocity: np.ndarray  # (E, F, 2)
    air_time: np.ndarray  # (E, F) seconds since the foot last touched down
    terminated: np.ndarray  # (E,) bool


@dataclass
class ReferenceFrame:
    g: np.ndarray
    gd: np.ndarray
    contacts: np.ndarray


def state_from_env(env, prev_action, air_time, terminated):
    return StepState(
        g=env.g.copy(),
        gd=env.gd.copy(),
        torque=env.torque.copy(),
        action=env.last_action.copy(),
        prev_action=np.asarray(prev_action, dtype=np.float64).copy(),
        contacts=env.contacts.copy(),
        foot_force=env.foot_force.copy(),
        foot_velocity=env.foot_velocity.copy(),
        air_time=np.asarray(air_time, dtype=np.float64).copy(),
        terminated=np.asarray(terminated, dtype=bool).copy(),
    )


def update_air_time(air_time, contacts, dt):
    """Seconds each foot has been airborne; resets on touchdown."""
    return np.where(contacts, 0.0, air_time + dt)


# -- tracking ------------------------------------------------------------------


def _mean_sq(diff):
    """Squared distance averaged over bodies, summed over coordinates: ``(E, B, d) -> (E,)``."""
    if diff.shape[1] == 0:
        return np.zeros(diff.shape[0])
    return np.sum(diff**2, axis=-1).mean(axis=1)


def tracking_errors(model, state, ref):
    """Squared error magnitude ``x^2`` per tracking term, each ``(E,)``."""
    if ref is None:
        raise ValueError("a reference frame is required")
    b = model.base_dofs
    kin = kinematics(model, state.g, state.gd)
    kref = kinematics(model, np.broadcast_to(ref.g, state.g.shape), np.broadcast_to(ref.gd, state.gd.shape))
    dq = state.g[:, b:] - np.atleast_2d(ref.g)[:, b:]
    dqd = state.gd[:, b:] - np.atleast_2d(ref.gd)[:, b:]
    feet, vr = model.feet, model.vr_index
    return {
        "joint_pos": np.sum(dq**2, axis=1),
        "joint_vel": np.sum(dqd**2, axis=1),
        "body_pos": _mean_sq(kin.end - kref.end),
        "body_rot": np.mean(wrap_angle(kin.psi - kref.psi) ** 2, axis=1),
        "body_vel": _mean_sq(kin.v_end - kref.v_end),
        "body_ang_vel": np.mean((kin.psi_dot - kref.psi_dot) ** 2, axis=1),
        "vr_points": _mean_sq(kin.end[:, vr] - kref.end[:, vr]),
        "feet_pos": _mean_sq(kin.end[:, feet] - kref.end[:, feet]),
        "max_joint_pos": np.max(np.abs(dq), axis=1) ** 2,
    }


# -- penalties -----------------------------------------------------------------


def _outside(x, lo, hi):
    return np.any((x < lo) | (x > hi), axis=-1).astype(np.float64)


def penalty_terms(model, state, cfg):
    """Raw (unweighted) penalty values per row, each ``(E,)``; indicator rows are 0/1."""
    E = state.g.shape[0]
    r = cfg.soft_ratio
    q_lo, q_hi = soft_limits(model.lower, model.upper, r)
    v_lo, v_hi = soft_limits(-model.velocity_limit, model.velocity_limit, r)
    t_lo, t_hi = soft_limits(-model.torque_limit, model.torque_limit, r)
    b = model.base_dofs
    out = {
        "joint_pos_limits": _outside(state.g[:, b:], q_lo, q_hi),
        "joint_vel_limits": _outside(state.gd[:, b:], v_lo, v_hi),
        "torque_limits": _outside(state.torque, t_lo, t_hi),
        "torque": np.sum(state.torque**2, axis=1),
        "action_rate": np.sum((state.action - state.prev_action) ** 2, axis=1),
        "termination": np.asarray(state.terminated, dtype=np.float64).reshape(E),
    }
    if model.feet:
        F = state.foot_force
        fnorm = np.linalg.norm(F, axis=-1)
        loaded = fnorm >= cfg.slip_force
        out["slippage"] = np.sum(state.foot_velocity[..., 0] ** 2 * loaded, axis=1)
        out["feet_contact_forces"] = np.sum(np.maximum(fnorm - cfg.contact_force_limit, 0.0) ** 2, axis=1)
        out["air_time"] = np.any(state.air_time > cfg.air_time_limit, axis=1).astype(np.float64)
        out["stumble"] = np.any(np.abs(F[..., 0]) > cfg.stumble_ratio * F[..., 1], axis=1).astype(np.float64)
    else:
        for name in ("slippage", "feet_contact_forces", "air_time", "stumble"):
            out[name] = np.zeros(E)
    out["collision"] = collision_indicator(model, state.g)
    return out


def collision_indicator(model, g):
    """1 where any non-foot link end or the root touches the ground."""
    E = np.atleast_2d(g).shape[0]
    if model.ground_height is None:
        return np.zeros(E)
    kin = kinematics(model, g, np.zeros_like(np.atleast_2d(g)))
    others = [k for k in range(model.n_links) if k not in model.feet]
    z = np.concatenate([kin.end[:, others, 1], kin.start[:, :1, 1]], axis=1)
    return np.any(z <= model.ground_height, axis=1).astype(np.float64)


# -- totals --------------------------------------------------------------------


def total_reward(model, state, ref, cfg, curriculum):
    """Weighted tracking terms plus curriculum-scaled penalties.

    Returns ``(total, breakdown, errors)``. ``breakdown`` holds the weighted
    contribution of every row and sums to ``total``; ``errors`` holds the
    per-term squared tracking errors for sigma adaptation.
    """
    errors = tracking_errors(model, state, ref)
    parts = {}
    for name, err in errors.items():
        parts[name] = cfg.weights[name] * tracking_reward(err, curriculum.sigmas[name])
    parts["contact"] = cfg.weights["contact"] * contact_reward(state.contacts, np.broadcast_to(ref.contacts, state.contacts.shape))
    raw = penalty_terms(model, state, cfg)
    for name, value in raw.items():
        parts[name] = curriculum.penalty_scale * cfg.penalty_weights[name] * value
    total = np.zeros(state.g.shape[0])
    for v in parts.values():
        total = total + v
    return total, parts, errors


# -- curricula -------------------------------------------------------------------


def update_termination_curriculum(cur):
    lo, hi = cur.theta_bounds
    cur.theta = float(np.clip(cur.theta * (1.0 - cur.theta_decay), lo, hi))
    return cur


def update_penalty_curriculum(cur):
    lo, hi = cur.penalty_bounds
    cur.penalty_scale = float(np.clip(cur.penalty_scale * (1.0 + cur.penalty_growth), lo, hi))
    return cur


def update_adaptive_sigma(cur, errors):
    """EMA of each term's recent error magnitude, clipped to ``sigma_bounds``.

    ``errors`` maps term -> squared errors (any shape); the batch mean of the
    magnitudes is the new sample.
    """
    if not cur.adapt_sigma:
        return cur
    lo, hi = cur.sigma_bounds
    for name, err in errors.items():
        err = np.asarray(err, dtype=np.float64)
        if err.size == 0:
            raise ValueError(f"no recent errors for {name}")
        sample = float(np.mean(np.sqrt(err)))
        s = cur.sigmas[name]
        cur.sigmas[name] = float(np.clip(s + cur.sigma_rate * (sample - s), lo, hi))
    return cur


def advance_curriculum(cur, errors=None):
    """All per-transition curriculum updates in a fixed order."""
    update_termination_curriculum(cur)
    update_penalty_curriculum(cur)
    if errors is not None:
        update_adaptive_sigma(cur, errors)
    return cur
