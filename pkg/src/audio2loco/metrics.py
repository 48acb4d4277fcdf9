"""Evaluation metrics: success, joint/keypoint errors, beat alignment and the stability filter."""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .fileio import write_csv, write_json
from .sim.model import keypoints

log = logging.getLogger(__name__)

BAS_FPS = 30.0
BAS_SIGMA = 3.0
SUCCESS_DEVIATION = 0.5


# -- success -----------------------------------------------------------------


def success(deviation, terminated_early=False, root_pitch=None, pitch_limit=1.0, threshold=SUCCESS_DEVIATION):
    """``(True, None)`` or ``(False, cause)`` for one time-aligned rollout."""
    if terminated_early:
        return False, "terminated"
    deviation = np.asarray(deviation, dtype=np.float64)
    if deviation.size and np.max(deviation) > threshold:
        return False, "deviation"
    if root_pitch is not None and np.size(root_pitch) and np.max(np.abs(root_pitch)) > pitch_limit:
        return False, "fall"
    return True, None


# -- pose errors -----------------------------------------------------------------


def _aligned(a, b, what):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[0] != b.shape[0]:
        n = min(a.shape[0], b.shape[0])
        warnings.warn(f"{what}: rollout has {a.shape[0]} frames, reference {b.shape[0]}; truncating to {n}",
                      stacklevel=3)
        a, b = a[:n], b[:n]
    return a, b


def mpjpe(q, q_ref):
    """Mean absolute joint-angle error (rad) over frames and joints."""
    q, q_ref = _aligned(q, q_ref, "mpjpe")
    return float(np.mean(np.abs(q - q_ref)))


def mpkpe(model, g, g_ref):
    """Mean Euclidean keypoint error (m) via forward kinematics of both trajectories."""
    g, g_ref = _aligned(g, g_ref, "mpkpe")
    return float(np.mean(np.linalg.norm(keypoints(model, g) - keypoints(model, g_ref), axis=-1)))


# -- beats -------------------------------------------------------------------------


def kinematic_beats(qd, fps=BAS_FPS):
    """Times (s) of strict local minima of the joint-speed norm."""
    qd = np.asarray(qd, dtype=np.float64)
    if qd.ndim == 1:
        qd = qd[:, None]
    if qd.shape[0] < 3:
        raise ValueError("kinematic beats need at least 3 frames")
    k = np.linalg.norm(qd, axis=1)
    idx = np.flatnonzero((k[1:-1] < k[:-2]) & (k[1:-1] < k[2:])) + 1
    return idx / float(fps)


def resample(values, src_rate, dst_rate):
    """Linear resampling of ``(T, ...)`` samples from ``src_rate`` to ``dst_rate`` Hz."""
    values = np.asarray(values, dtype=np.float64)
    T = values.shape[0]
    t_src = np.arange(T) / src_rate
    t_dst = np.arange(int(np.floor(t_src[-1] * dst_rate + 1e-9)) + 1) / dst_rate
    flat = values.reshape(T, -1)
    out = np.stack([np.interp(t_dst, t_src, flat[:, j]) for j in range(flat.shape[1])], axis=1)
    return out.reshape((len(t_dst),) + values.shape[1:])


def bas(kinematic, music, sigma=BAS_SIGMA, fps=BAS_FPS):
    """Beat alignment score; beat times in seconds, distances measured in frames at ``fps``."""
    music = np.asarray(music, dtype=np.float64)
    if music.size == 0:
        raise ValueError("BAS needs at least one music beat")
    kinematic = np.asarray(kinematic, dtype=np.float64)
    if kinematic.size == 0:
        log.warning("no kinematic beats detected; BAS = 0")
        return 0.0
    d = np.min(np.abs(kinematic[:, None] - music[None, :]), axis=1) * fps
    return float(np.mean(np.exp(-(d**2) / (2.0 * sigma**2))))


def rollout_bas(qd, rate, music_beats, fps=BAS_FPS, sigma=BAS_SIGMA):
    """BAS for joint velocities sampled at ``rate`` Hz, resampled to ``fps`` before beat detection."""
    qd30 = resample(qd, rate, fps)
    return bas(kinematic_beats(qd30, fps), music_beats, sigma, fps)


# -- stability filter ----------------------------------------------------------------


def centre_of_pressure(foot_x, weights):
    """Weighted mean foot x per frame; NaN when nothing is loaded."""
    foot_x = np.asarray(foot_x, dtype=np.float64)
    w = np.clip(np.asarray(weights, dtype=np.float64), 0.0, None)
    total = w.sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        cop = np.sum(foot_x * w, axis=-1) / total
    return np.where(total > 0, cop, np.nan)


def com_cop_distance(model, g, foot_weights):
    """Ground-projected distance between centre of mass and centre of pressure per frame."""
    from .sim.model import kinematics

    g = np.atleast_2d(g)
    kin = kinematics(model, g, np.zeros_like(g))
    com_x = np.sum(model.masses * kin.com[..., 0], axis=1) / model.masses.sum()
    cop = centre_of_pressure(kin.end[:, model.feet, 0], foot_weights)
    d = np.abs(com_x - cop)
    return np.where(np.isnan(d), np.inf, d)


def longest_run(mask):
    best = cur = 0
    for m in np.asarray(mask, dtype=bool):
        cur = cur + 1 if m else 0
        best = max(best, cur)
    return best


def motion_filter(delta_d, eps_stab=0.1, max_unstable=100):
    """``("retain", None)`` or ``("reject", cause)`` from per-frame CoM/CoP distances."""
    stable = np.asarray(delta_d, dtype=np.float64) < eps_stab
    return filter_decision(stable, max_unstable)


def filter_decision(stable, max_unstable=100):
    stable = np.asarray(stable, dtype=bool)
    if stable.size == 0 or not (stable[0] and stable[-1]):
        return "reject", "unstable-endpoints"
    if longest_run(~stable) >= max_unstable:
        return "reject", "unstable-run"
    return "retain", None


# -- reports ----------------------------------------------------------------------


@dataclass
class ClipResult:
    clip_id: str
    success: bool
    cause: str | None
    mpjpe: float
    mpkpe: float
    bas: float
    held_out: bool = False
    steps: int = 0


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    label: str = ""

    def add(self, row):
        self.rows.append(row)

    def aggregate(self):
        n = len(self.rows)
        ok = [r for r in self.rows if r.success]

        def mean(rows, key):
            return float(np.mean([getattr(r, key) for r in rows])) if rows else float("nan")

        return {
            "label": self.label,
            "n_clips": n,
            "n_success": len(ok),
            "success_rate": len(ok) / n if n else 0.0,
            "mpjpe_success": mean(ok, "mpjpe"),
            "mpkpe_success": mean(ok, "mpkpe"),
            "bas_success": mean(ok, "bas"),
            "mpjpe_all": mean(self.rows, "mpjpe"),
            "mpkpe_all": mean(self.rows, "mpkpe"),
            "bas_all": mean(self.rows, "bas"),
        }

    def to_dict(self):
        return {"aggregate": self.aggregate(), "clips": [asdict(r) for r in self.rows]}

    def save(self, json_path, csv_path=None):
        write_json(json_path, self.to_dict())
        if csv_path is not None:
            header = list(asdict(self.rows[0])) if self.rows else [f for f in ClipResult.__dataclass_fields__]
            write_csv(csv_path, header, [[_cell(v) for v in asdict(r).values()] for r in self.rows])


def _cell(v):
    if isinstance(v, bool):
        return int(v)
    return "" if v is None else v
