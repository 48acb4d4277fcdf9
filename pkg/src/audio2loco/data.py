"""Motion/audio clip containers, the synthetic paired corpus and its on-disk layout.

Corpus layout (one directory per clip)::

    clip_0000/motion.csv   frame,time,q_0..,qd_0..,root_x,root_z,root_pitch,
                           root_vx,root_vz,root_pitch_rate,contact_0..
    clip_0000/audio.csv    frame,f_0..f_{d-1}
    clip_0000/beats.txt    beat times in seconds, one per line
    clip_0000/meta.json    style, tempo, seed, phase, energy, task
    manifest.json          generator config + clip list

The synthetic motion is a cosine sway per joint whose speed norm vanishes
exactly on the beat grid, so kinematic beats coincide with music beats by
construction. Styles differ in mean pose, per-joint amplitude and sign, and
each style has its own timbre profile in the audio features.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fileio import atomic_write_text, fmt, read_json, write_csv, write_json

TASKS = ("dance", "speech")


@dataclass
class MotionClip:
    fps: float
    q: np.ndarray  # (F, J) joint angles, rad
    qd: np.ndarray  # (F, J) rad/s
    root_pos: np.ndarray  # (F, 2) x, z in m
    root_pitch: np.ndarray  # (F,)
    root_vel: np.ndarray  # (F, 2)
    root_pitch_rate: np.ndarray  # (F,)
    contacts: np.ndarray  # (F, n_feet) bool

    @property
    def n_frames(self):
        return self.q.shape[0]

    @property
    def n_joints(self):
        return self.q.shape[1]

    @property
    def duration(self):
        return self.n_frames / self.fps

    def frame(self, i):
        return {
            "q": self.q[i],
            "qd": self.qd[i],
            "root_pos": self.root_pos[i],
            "root_pitch": self.root_pitch[i],
            "root_vel": self.root_vel[i],
            "root_pitch_rate": self.root_pitch_rate[i],
            "contacts": self.contacts[i],
        }

    @classmethod
    def fixed_base(cls, q, qd, fps):
        F = q.shape[0]
        return cls(fps, q, qd, np.zeros((F, 2)), np.zeros(F), np.zeros((F, 2)), np.zeros(F), np.zeros((F, 0), bool))


@dataclass
class AudioTrack:
    fps: float
    features: np.ndarray  # (F, d)
    beats: np.ndarray  # seconds


@dataclass
class ClipMeta:
    clip_id: str
    style: int
    tempo: float
    phase: float
    energy: float
    seed: int
    task: str


@dataclass
class PairedClip:
    meta: ClipMeta
    motion: MotionClip
    audio: AudioTrack


@dataclass
class SyntheticConfig:
    n_clips: int = 64
    n_styles: int = 4
    tempos: tuple = (80.0, 100.0, 120.0, 140.0)
    fps: float = 30.0
    duration: float = 4.0
    window: int = 60
    n_joints: int = 3
    tempo_jitter: float = 2.0
    energy_range: tuple = (0.7, 1.3)
    audio_noise: float = 0.05
    onset_width: float = 0.07
    offbeat_accent: float = 0.5
    seed: int = 0

    def validate(self):
        slowest = min(self.tempos) - self.tempo_jitter
        if slowest <= 0:
            raise ValueError("tempos must stay positive after jitter")
        beat_frames = 60.0 / slowest * self.fps
        if self.window < beat_frames:
            raise ValueError(
                f"window of {self.window} frames is shorter than one beat period "
                f"({beat_frames:.1f} frames at {slowest:g} BPM)"
            )
        if self.window > round(self.duration * self.fps):
            raise ValueError("window longer than the clip")
        if self.n_styles < 1 or self.n_clips < 1:
            raise ValueError("need at least one style and one clip")


def beat_period_frames(bpm, fps):
    return 60.0 / bpm * fps


def task_of_style(style, n_styles):
    """First half of the styles are dance proxies, second half speech proxies."""
    return TASKS[0] if style < max(n_styles // 2, 1) else TASKS[1]


@dataclass
class StyleSignature:
    mean_pose: np.ndarray
    amplitude: np.ndarray
    sign: float
    timbre: np.ndarray


def style_signature(style, n_joints, n_styles):
    rng = np.random.default_rng([7919, style, n_joints])
    timbre = np.zeros(n_styles)
    timbre[style] = 1.0
    timbre += 0.2 * rng.uniform(size=n_styles)
    return StyleSignature(
        mean_pose=rng.uniform(-0.4, 0.4, size=n_joints),
        amplitude=rng.uniform(0.15, 0.45, size=n_joints),
        sign=1.0 if style % 2 == 0 else -1.0,
        timbre=timbre,
    )


def beat_times(bpm, phase, duration):
    period = 60.0 / bpm
    n = int(math.floor((duration - phase) / period)) + 1
    t = phase + period * np.arange(max(n, 0))
    return t[t < duration]


def synth_motion(sig, bpm, phase, energy, fps, n_frames):
    t = np.arange(n_frames) / fps
    omega = math.pi * bpm / 60.0
    arg = omega * (t - phase)
    amp = sig.sign * energy * sig.amplitude
    q = sig.mean_pose[None, :] - amp[None, :] * np.cos(arg)[:, None]
    qd = amp[None, :] * omega * np.sin(arg)[:, None]
    return MotionClip.fixed_base(q, qd, fps)


def onset_envelope(grid, accent, energy, fps, n_frames, cfg):
    """Gaussian pulses at the ``grid`` times (s), weighted by ``accent`` and scaled by ``energy``."""
    t = np.arange(n_frames) / fps
    pulses = np.exp(-((t[:, None] - np.asarray(grid)[None, :]) ** 2) / (2 * cfg.onset_width**2))
    return energy * (pulses * np.asarray(accent)[None, :]).sum(axis=1)


def synth_audio(sig, bpm, phase, energy, fps, n_frames, beats, cfg, rng):
    # include the beat just before the window so the envelope has no edge gap
    grid = np.concatenate([[phase - 60.0 / bpm], beats])
    # the sway spans two beats, so alternate beats are accented (downbeats) to
    # tell the two extremes apart
    accent = np.where(np.arange(-1, len(beats)) % 2 == 0, 1.0, cfg.offbeat_accent)
    onset = onset_envelope(grid, accent, energy, fps, n_frames, cfg)
    tempo = np.full(n_frames, bpm / 100.0)
    timbre = sig.timbre[None, :] + cfg.audio_noise * rng.normal(size=(n_frames, len(sig.timbre)))
    noise = cfg.audio_noise * rng.normal(size=(n_frames, 2))
    return np.column_stack([onset, tempo, timbre, noise])


def shuffle_beats(clip, cfg, rng):
    """Control clip: same motion and non-onset channels, onsets at random times.

    The beat count is kept; the new beat times are uniform over the clip and
    become the clip's beat list, so alignment is scored against them.
    """
    n = len(clip.audio.beats)
    F = clip.audio.features.shape[0]
    beats = np.sort(rng.uniform(0.0, F / clip.audio.fps, size=n))
    accent = np.where(np.arange(n) % 2 == 0, 1.0, cfg.offbeat_accent)
    features = clip.audio.features.copy()
    features[:, 0] = onset_envelope(beats, accent, clip.meta.energy, clip.audio.fps, F, cfg)
    meta = dataclasses.replace(clip.meta, clip_id=f"{clip.meta.clip_id}_shuffled")
    return PairedClip(meta, clip.motion, AudioTrack(clip.audio.fps, features, beats))


def audio_feature_dim(n_styles):
    return 2 + n_styles + 2


def make_clip(cfg, style, bpm_nominal, seed, clip_id):
    rng = np.random.default_rng(seed)
    bpm = bpm_nominal + rng.uniform(-cfg.tempo_jitter, cfg.tempo_jitter)
    phase = rng.uniform(0.0, 60.0 / bpm)
    energy = rng.uniform(*cfg.energy_range)
    n_frames = int(round(cfg.duration * cfg.fps))
    sig = style_signature(style, cfg.n_joints, cfg.n_styles)
    motion = synth_motion(sig, bpm, phase, energy, cfg.fps, n_frames)
    beats = beat_times(bpm, phase, cfg.duration)
    feats = synth_audio(sig, bpm, phase, energy, cfg.fps, n_frames, beats, cfg, rng)
    meta = ClipMeta(clip_id, int(style), float(bpm), float(phase), float(energy), int(seed),
                    task_of_style(style, cfg.n_styles))
    return PairedClip(meta, motion, AudioTrack(cfg.fps, feats, beats))


def make_synthetic_pairs(cfg, rng=None):
    """Class-balanced corpus: clip i has style ``i % K`` and tempo ``(i // K) % len(tempos)``."""
    cfg.validate()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    seeds = rng.integers(0, 2**31 - 1, size=cfg.n_clips)
    clips = []
    for i in range(cfg.n_clips):
        style = i % cfg.n_styles
        tempo = cfg.tempos[(i // cfg.n_styles) % len(cfg.tempos)]
        clips.append(make_clip(cfg, style, tempo, int(seeds[i]), f"clip_{i:04d}"))
    return clips


def sliding_windows(x, window, ends):
    """Windows of ``window`` rows ending at each index in ``ends`` (edge-padded at the start)."""
    x = np.asarray(x)
    pad = np.concatenate([np.repeat(x[:1], window - 1, axis=0), x], axis=0)
    ends = np.asarray(ends, dtype=int)
    idx = ends[:, None] + np.arange(window)[None, :]
    return pad[idx]


def paired_windows(clips, window, starts=None, rng=None, per_clip=1):
    """Stack aligned ``(motion q, audio)`` windows.

    ``starts`` gives an explicit start frame per clip; otherwise ``per_clip``
    random crops are drawn with ``rng``.
    """
    mw, aw, ids = [], [], []
    for ci, clip in enumerate(clips):
        F = clip.motion.n_frames
        if starts is not None:
            ss = [int(starts[ci])]
        else:
            ss = rng.integers(0, F - window + 1, size=per_clip)
        for s in ss:
            mw.append(clip.motion.q[s : s + window])
            aw.append(clip.audio.features[s : s + window])
            ids.append(ci)
    return np.stack(mw), np.stack(aw), np.array(ids)


# -- file IO -----------------------------------------------------------------


def motion_header(J, n_feet):
    return (["frame", "time"] + [f"q_{j}" for j in range(J)] + [f"qd_{j}" for j in range(J)]
            + ["root_x", "root_z", "root_pitch", "root_vx", "root_vz", "root_pitch_rate"]
            + [f"contact_{k}" for k in range(n_feet)])


def save_clip(directory, clip):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    m = clip.motion
    J, nf = m.n_joints, m.contacts.shape[1]
    rows = []
    for i in range(m.n_frames):
        rows.append([i, i / m.fps, *m.q[i], *m.qd[i], *m.root_pos[i], m.root_pitch[i], *m.root_vel[i],
                     m.root_pitch_rate[i], *[int(c) for c in m.contacts[i]]])
    write_csv(d / "motion.csv", motion_header(J, nf), rows)
    a = clip.audio
    write_csv(d / "audio.csv", ["frame"] + [f"f_{k}" for k in range(a.features.shape[1])],
              [[i, *a.features[i]] for i in range(a.features.shape[0])])
    atomic_write_text(d / "beats.txt", "".join(fmt(float(b)) + "\n" for b in a.beats))
    meta = dataclasses.asdict(clip.meta)
    meta["fps"] = m.fps
    write_json(d / "meta.json", meta)


def load_clip(directory):
    from .fileio import read_csv

    d = Path(directory)
    meta = read_json(d / "meta.json")
    fps = float(meta.pop("fps"))
    header, rows = read_csv(d / "motion.csv")
    arr = np.array([[float(x) for x in r] for r in rows]).reshape(len(rows), len(header))
    J = sum(1 for h in header if h.startswith("q_"))
    nf = sum(1 for h in header if h.startswith("contact_"))
    c = 2
    q = arr[:, c : c + J]
    qd = arr[:, c + J : c + 2 * J]
    c += 2 * J
    motion = MotionClip(fps, q, qd, arr[:, c : c + 2], arr[:, c + 2], arr[:, c + 3 : c + 5], arr[:, c + 5],
                        arr[:, c + 6 : c + 6 + nf] > 0.5)
    ah, arows = read_csv(d / "audio.csv")
    feats = np.array([[float(x) for x in r[1:]] for r in arows]).reshape(len(arows), len(ah) - 1)
    text = (d / "beats.txt").read_text().split()
    beats = np.array([float(x) for x in text])
    return PairedClip(ClipMeta(**meta), motion, AudioTrack(fps, feats, beats))


def config_hash(obj):
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def save_corpus(directory, clips, cfg, extra=None):
    d = Path(directory)
    for clip in clips:
        save_clip(d / clip.meta.clip_id, clip)
    cfgd = dataclasses.asdict(cfg)
    manifest = {
        "kind": "paired-corpus",
        "version": 1,
        "config": cfgd,
        "config_hash": config_hash(cfgd),
        "clips": [c.meta.clip_id for c in clips],
    }
    if extra:
        manifest.update(extra)
    write_json(d / "manifest.json", manifest)
    return manifest


def load_corpus(directory):
    d = Path(directory)
    manifest = read_json(d / "manifest.json")
    return [load_clip(d / cid) for cid in manifest["clips"]], manifest


def corpus_config_from_manifest(manifest):
    cfg = dict(manifest["config"])
    cfg["tempos"] = tuple(cfg["tempos"])
    cfg["energy_range"] = tuple(cfg["energy_range"])
    return SyntheticConfig(**cfg)
