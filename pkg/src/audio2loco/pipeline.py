"""Pipeline stages behind the command line: corpus -> alignment -> teacher -> student -> evaluation.

Each stage reads its prerequisites from a run directory, writes checkpoints,
CSV timelines and a manifest, and never touches artifacts of other stages.
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import shutil
import time
import zlib
from importlib import metadata
from pathlib import Path

import numpy as np

from . import plotting
from .align import AlignConfig, AlignmentModel, AlignmentResult, AudioAdaptor, MotionVAE, evaluate_alignment, train_alignment
from .config import _overlay, config_to_dict, synthetic_config
from .data import load_corpus, make_synthetic_pairs, save_corpus, shuffle_beats
from .diffusion import latency_probe
from .errors import ConfigError, MissingArtifact
from .fileio import write_csv, write_json
from .metrics import com_cop_distance, longest_run, motion_filter, rollout_bas
from .nn.checkpoint import load_checkpoint, save_checkpoint
from .sim import biped_model, chain_model
from .sim.env import POLICY_DT
from .training import (
    DISTILL_FIELDS,
    TIMELINE_FIELDS,
    DistillConfig,
    PpoConfig,
    ReferenceTrack,
    StudentPolicy,
    TaskConfig,
    TrackingEnv,
    attach_audio,
    build_teacher,
    content_latents,
    dagger_distill,
    evaluate,
    student_actor,
    teacher_actor,
    timeline_rows,
    train_teacher,
)

log = logging.getLogger(__name__)

STREAMS = ("data", "env", "train", "eval")
SAMPLER_AXES = ("ddim_steps", "eta", "sampler")
STUDENT_AXES = ("beta_max", "objective", "adaptor", "content")
TEACHER_AXES = ("experts", "moe_kind")


class OutputExists(RuntimeError):
    pass


class RateMismatch(ValueError):
    pass


def package_version():
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0.0.0+local"


# -- seeds ---------------------------------------------------------------------------


def seed_streams(seed):
    """Named, independent sub-streams of one root seed."""
    return dict(zip(STREAMS, np.random.SeedSequence(int(seed)).spawn(len(STREAMS))))


def child(stream, name):
    """A deterministic named child of a stream (stable across code changes elsewhere)."""
    return np.random.SeedSequence(stream.entropy, spawn_key=(*stream.spawn_key, zlib.crc32(name.encode())))


def corpus_seed(cfg, split):
    explicit = cfg.data.train_seed if split == "train" else cfg.data.held_out_seed
    if explicit is not None:
        return int(explicit)
    return int(child(seed_streams(cfg.seed)["data"], split).generate_state(1)[0])


# -- run directory -----------------------------------------------------------------------------


class Layout:
    def __init__(self, out):
        self.root = Path(out)

    def corpus(self, split):
        return self.root / "corpus" / split

    @property
    def align_ckpt(self):
        return self.root / "align.ckpt"

    @property
    def teacher_ckpt(self):
        return self.root / "teacher.ckpt"

    @property
    def student_ckpt(self):
        return self.root / "student.ckpt"

    def timeline(self, stage):
        return self.root / "timelines" / f"{stage}.csv"

    def manifest(self, stage):
        return self.root / "manifests" / f"{stage}.json"

    def eval_dir(self):
        return self.root / "eval"

    def ablate_dir(self):
        return self.root / "ablate"


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(layout, stage, cfg, artifacts, metrics, started):
    paths = []
    for a in artifacts:
        a = Path(a)
        paths.extend(sorted(p for p in a.rglob("*") if p.is_file()) if a.is_dir() else [a])
    manifest = {
        "kind": "manifest",
        "stage": stage,
        "version": package_version(),
        "seed": cfg.seed,
        "config": config_to_dict(cfg),
        "artifacts": {str(p.relative_to(layout.root)): _sha256(p) for p in paths},
        "metrics": metrics,
        "wall_clock_s": time.perf_counter() - started,
    }
    write_json(layout.manifest(stage), manifest)
    return manifest


def _refuse_existing(path, force):
    path = Path(path)
    busy = path.is_dir() and any(path.iterdir()) or path.is_file()
    if busy and not force:
        raise OutputExists(f"{path} already exists; pass --force to overwrite it")
    if busy and path.is_dir():
        shutil.rmtree(path)


# -- loading --------------------------------------------------------------------------------------


def load_split(layout, split):
    d = layout.corpus(split)
    if not (d / "manifest.json").exists():
        raise MissingArtifact(f"corpus/{split}/manifest.json", d, "run `audio2loco gen-data` first")
    clips, _ = load_corpus(d)
    return clips


def select_clips(cfg, clips, limit=None):
    chosen = [c for c in clips if cfg.task == "all" or c.meta.task == cfg.task]
    if not chosen:
        raise ConfigError("task", f"no clips labelled {cfg.task!r} in the corpus")
    return chosen[:limit] if limit else chosen


def body_model(name, n_joints, key="env.body"):
    if name == "chain":
        return chain_model(n_joints)
    model = biped_model()
    if model.n_joints != n_joints:
        raise ConfigError(key, f"the biped has {model.n_joints} joints but the clips have {n_joints}")
    return model


def _require(path, name, hint):
    if not Path(path).exists():
        raise MissingArtifact(name, path, hint)


def require_all(items):
    """Name every missing prerequisite at once; ``items`` are ``(path, name, hint)``."""
    missing = [(p, n, h) for p, n, h in items if not Path(p).exists()]
    if missing:
        names = "`, `".join(n for _, n, _ in missing)  # MissingArtifact adds the outer backticks
        hints = "; ".join(h for _, _, h in missing)
        raise MissingArtifact(names, Path(missing[0][0]).parent, hints)


def load_alignment(layout):
    _require(layout.align_ckpt, "align.ckpt", "run `audio2loco train-align` first")
    tensors, header = load_checkpoint(layout.align_ckpt)
    meta = header["meta"]
    acfg = _overlay(AlignConfig(), meta["align"], "align")
    rng = np.random.default_rng(0)
    vae = MotionVAE(acfg.window, meta["n_joints"], acfg.latent_dim, acfg.vae_hidden, acfg.kl_weight, rng)
    adaptor = AudioAdaptor(meta["feature_dim"], acfg.model_dim, acfg.n_blocks, acfg.n_heads, acfg.audio_latent_dim,
                           acfg.positional, rng)
    model = AlignmentModel(adaptor, acfg.latent_dim, rng)
    vae.load_parameters({k[4:]: v for k, v in tensors.items() if k.startswith("vae.")})
    model.load_parameters({k[6:]: v for k, v in tensors.items() if k.startswith("model.")})
    return AlignmentResult(vae, model), meta


def check_rates(clips, trained_fps, what):
    """Reject corpora whose frame rate differs from the one a checkpoint was trained on."""
    for c in clips:
        if c.motion.fps != c.audio.fps:
            raise RateMismatch(f"clip {c.meta.clip_id}: motion at {c.motion.fps:g} FPS but audio at {c.audio.fps:g} FPS")
        if c.motion.fps != trained_fps:
            raise RateMismatch(
                f"clip {c.meta.clip_id} is sampled at {c.motion.fps:g} FPS but the {what} was trained on "
                f"{trained_fps:g} FPS clips; audio windows and reference interpolation onto the "
                f"{1 / POLICY_DT:g} Hz control clock would be misaligned. Regenerate the corpus at {trained_fps:g} FPS."
            )


def make_tracks(model, clips, alignment=None, window=None):
    tracks = [ReferenceTrack(model, c) for c in clips]
    if alignment is not None:
        attach_audio(tracks, alignment.model.adaptor, window)
    return tracks


def teacher_from_checkpoint(layout, model, tracks, path=None):
    path = Path(path) if path else layout.teacher_ckpt
    _require(path, path.name, "run `audio2loco train-teacher` first")
    tensors, header = load_checkpoint(path)
    meta = header["meta"]
    ppo = _overlay(PpoConfig(), meta["ppo"], "ppo")
    task = _overlay(TaskConfig(), meta["env"], "env")
    env = TrackingEnv(model, tracks, task, n_envs=1)
    policy, critic = build_teacher(env, ppo, np.random.default_rng(0))
    policy.load({k[7:]: v for k, v in tensors.items() if k.startswith("policy.")})
    critic.load({k[7:]: v for k, v in tensors.items() if k.startswith("critic.")})
    return policy, meta


def student_from_checkpoint(layout, model, path=None):
    path = Path(path) if path else layout.student_ckpt
    _require(path, path.name, "run `audio2loco distill` first")
    tensors, header = load_checkpoint(path)
    meta = header["meta"]
    dcfg = _overlay(DistillConfig(), meta["distill"], "distill")
    task = _overlay(TaskConfig(), meta["env"], "env")
    return StudentPolicy.from_state(tensors, model, task, dcfg), meta


# -- stages ---------------------------------------------------------------------------------------


def gen_data(cfg, layout, force=False):
    started = time.perf_counter()
    out = {}
    for split in ("train", "held_out"):
        d = layout.corpus(split)
        _refuse_existing(d, force)
    for split in ("train", "held_out"):
        seed = corpus_seed(cfg, split)
        scfg = synthetic_config(cfg, split, seed)
        clips = make_synthetic_pairs(scfg)
        save_corpus(layout.corpus(split), clips, scfg, {"split": split})
        out[split] = len(clips)
        log.info("wrote %d %s clips (seed %d) to %s", len(clips), split, seed, layout.corpus(split))
    write_manifest(layout, "gen-data", cfg, [layout.root / "corpus"], {"clips": out}, started)
    return out


def train_align(cfg, layout, force=False):
    started = time.perf_counter()
    _refuse_existing(layout.align_ckpt, force)
    clips = load_split(layout, "train")
    rng = np.random.default_rng(child(seed_streams(cfg.seed)["train"], "align"))
    result = train_alignment(clips, cfg.align, rng, log=log.info)
    tensors = {**{f"vae.{k}": v for k, v in result.vae.parameters().items()},
               **{f"model.{k}": v for k, v in result.model.parameters().items()}}
    meta = {"align": config_to_dict(cfg.align), "n_joints": clips[0].motion.n_joints,
            "feature_dim": int(clips[0].audio.features.shape[1]), "fps": clips[0].motion.fps}
    save_checkpoint(layout.align_ckpt, tensors, seed=cfg.seed, meta=meta)
    header = ["phase", "step", "loss", "recon", "kl"]
    rows = [[h["phase"], h["step"], h["loss"], h.get("recon", ""), h.get("kl", "")] for h in result.history]
    write_csv(layout.timeline("align"), header, rows)
    plotting.plot_align_timeline(result.history, layout.timeline("align").with_suffix(".png"))
    metrics = {}
    for split in ("train", "held_out"):
        if (layout.corpus(split) / "manifest.json").exists():
            m = evaluate_alignment(result, load_split(layout, split), cfg.align.window)
            metrics[split] = {k: float(v) for k, v in m.items()}
    write_json(layout.eval_dir() / "align.json", metrics)
    write_manifest(layout, "train-align", cfg, [layout.align_ckpt, layout.timeline("align")], metrics, started)
    return metrics


def _teacher_tracks(cfg, layout):
    clips = select_clips(cfg, load_split(layout, "train"), cfg.train_clips)
    model = body_model(cfg.env.body, clips[0].motion.n_joints)
    return model, clips


def run_teacher(cfg, model, tracks, train_seed, env_seed, log_fn=None):
    return train_teacher(model, tracks, cfg.env, cfg.ppo, cfg.rewards, seed=train_seed, log_fn=log_fn,
                         curriculum=cfg.curriculum, env_seed=env_seed)


def save_teacher(path, cfg, result, fps):
    tensors = {**{f"policy.{k}": v for k, v in result.policy.state().items()},
               **{f"critic.{k}": v for k, v in result.critic.state().items()}}
    meta = {"ppo": config_to_dict(cfg.ppo), "env": config_to_dict(cfg.env), "fps": fps,
            "curriculum": result.curriculum.to_dict()}
    save_checkpoint(path, tensors, seed=cfg.seed, meta=meta)


def cmd_train_teacher(cfg, layout, force=False):
    started = time.perf_counter()
    _refuse_existing(layout.teacher_ckpt, force)
    model, clips = _teacher_tracks(cfg, layout)
    tracks = make_tracks(model, clips)
    streams = seed_streams(cfg.seed)
    result = run_teacher(cfg, model, tracks, child(streams["train"], "teacher"), child(streams["env"], "teacher"),
                         log_fn=lambda r: log.info("teacher it %d reward %.4f mpjpe %.4f theta %.3f", r["iteration"],
                                                   r["mean_reward"], r["train_mpjpe"], r["theta"]))
    save_teacher(layout.teacher_ckpt, cfg, result, clips[0].motion.fps)
    write_csv(layout.timeline("teacher"), TIMELINE_FIELDS, timeline_rows(result.timeline, TIMELINE_FIELDS))
    plotting.plot_timeline(result.timeline, ["mean_reward", "train_mpjpe", "theta", "episode_length"],
                           layout.timeline("teacher").with_suffix(".png"), "teacher PPO")
    metrics = {k: result.timeline[-1][k] for k in ("mean_reward", "train_mpjpe", "theta")} if result.timeline else {}
    write_manifest(layout, "train-teacher", cfg, [layout.teacher_ckpt, layout.timeline("teacher")], metrics, started)
    return result


def run_distill(cfg, model, clips, alignment, teacher, train_seed, env_seed, log_fn=None):
    tracks = make_tracks(model, clips, alignment, cfg.align.window)
    latents = content_latents(alignment.vae, clips, cfg.align.window)
    return dagger_distill(model, tracks, teacher, latents, cfg.env, cfg.distill, seed=train_seed, log_fn=log_fn,
                          env_seed=env_seed)


def save_student(path, cfg, result, fps):
    meta = {"distill": config_to_dict(cfg.distill), "env": config_to_dict(cfg.env), "fps": fps}
    save_checkpoint(path, result.student.state(), seed=cfg.seed, meta=meta)


def cmd_distill(cfg, layout, force=False):
    started = time.perf_counter()
    _refuse_existing(layout.student_ckpt, force)
    require_all([(layout.corpus("train") / "manifest.json", "corpus/train/manifest.json", "run `audio2loco gen-data`"),
                 (layout.teacher_ckpt, "teacher.ckpt", "run `audio2loco train-teacher`"),
                 (layout.align_ckpt, "align.ckpt", "run `audio2loco train-align`")])
    model, clips = _teacher_tracks(cfg, layout)
    alignment, ameta = load_alignment(layout)
    check_rates(clips, ameta["fps"], "adaptor")
    teacher, _ = teacher_from_checkpoint(layout, model, make_tracks(model, clips))
    streams = seed_streams(cfg.seed)
    result = run_distill(cfg, model, clips, alignment, teacher, child(streams["train"], "distill"),
                         child(streams["env"], "distill"),
                         log_fn=lambda r: log.info("distill it %d loss %.4f label %.4f", r["iteration"], r["loss"],
                                                   r["label_mpjpe"]))
    save_student(layout.student_ckpt, cfg, result, clips[0].motion.fps)
    write_csv(layout.timeline("distill"), DISTILL_FIELDS, timeline_rows(result.timeline, DISTILL_FIELDS))
    plotting.plot_timeline(result.timeline, ["loss", "label_mpjpe", "episode_length"],
                           layout.timeline("distill").with_suffix(".png"), "DAgger distillation")
    metrics = {k: result.timeline[-1][k] for k in ("loss", "label_mpjpe", "dropped_labels")}
    write_manifest(layout, "distill", cfg, [layout.student_ckpt, layout.timeline("distill")], metrics, started)
    return result


# -- evaluation ---------------------------------------------------------------------------------------


def eval_clips(cfg, layout):
    split = cfg.eval.split
    clips = load_split(layout, split)
    if split == "train":
        clips = select_clips(cfg, clips, cfg.train_clips)
    else:
        clips = select_clips(cfg, clips)
    return clips[: cfg.eval.clips] if cfg.eval.clips else clips


def _eval_task(cfg, meta_env):
    task = _overlay(TaskConfig(), meta_env, "env")
    return dataclasses.replace(task, eval_theta=cfg.eval.theta)


def evaluate_policy(cfg, layout, which, clips, label, trajectories=None, shuffled=False, policy_seed=None):
    """Closed-loop evaluation of the teacher or student checkpoint on ``clips``."""
    model = body_model(cfg.env.body, clips[0].motion.n_joints)
    streams = seed_streams(cfg.seed)
    eval_seed = child(streams["eval"], label)
    held_out = cfg.eval.split == "held_out"
    if which == "teacher":
        train_clips = _teacher_tracks(cfg, layout)[1]
        policy, meta = teacher_from_checkpoint(layout, model, make_tracks(model, train_clips))
        check_rates(clips, meta["fps"], "teacher")
        actor = teacher_actor(policy)
        tracks = make_tracks(model, clips)
    else:
        alignment, ameta = load_alignment(layout)
        student, meta = student_from_checkpoint(layout, model)
        check_rates(clips, ameta["fps"], "adaptor")
        if shuffled:
            rng = np.random.default_rng(child(streams["eval"], "shuffle"))
            clips = [shuffle_beats(c, cfg.data.synth, rng) for c in clips]
        tracks = make_tracks(model, clips, alignment, cfg.align.window)
        sampler = cfg.distill.sampler_config()
        rng = np.random.default_rng(policy_seed if policy_seed is not None else child(streams["eval"], "sampler"))
        actor = student_actor(student, rng, sampler)
    task = _eval_task(cfg, meta["env"])
    return evaluate(model, tracks, actor, task, seed=eval_seed, label=label, held_out=held_out,
                    trajectories=trajectories)


def save_report(report, directory, name):
    directory = Path(directory)
    report.save(directory / f"{name}.json", directory / f"{name}.csv")
    plotting.plot_eval(report, directory / f"{name}.png")


def save_trajectories(trajectories, directory):
    for tr in trajectories:
        J = tr["q"].shape[1]
        header = ["time"] + [f"q_{j}" for j in range(J)] + [f"q_ref_{j}" for j in range(J)] + \
                 [f"qd_{j}" for j in range(J)] + ["deviation"]
        rows = np.column_stack([tr["time"], tr["q"], tr["q_ref"], tr["qd"], tr["deviation"]])
        write_csv(Path(directory) / f"{tr['clip_id']}.csv", header, rows.tolist())


def cmd_eval(cfg, layout, which="student", label=None):
    started = time.perf_counter()
    label = label or f"{which}_{cfg.eval.split}"
    clips = eval_clips(cfg, layout)
    trajectories = [] if cfg.eval.trajectories else None
    report = evaluate_policy(cfg, layout, which, clips, label, trajectories)
    save_report(report, layout.eval_dir(), label)
    outputs = [layout.eval_dir() / f"{label}.csv"]
    summary = {label: report.aggregate()}
    if trajectories is not None:
        save_trajectories(trajectories, layout.eval_dir() / f"{label}_trajectories")
    if cfg.eval.shuffle_control and which == "student":
        ctrl = evaluate_policy(cfg, layout, which, clips, f"{label}_shuffled", shuffled=True)
        save_report(ctrl, layout.eval_dir(), f"{label}_shuffled")
        outputs.append(layout.eval_dir() / f"{label}_shuffled.csv")
        summary[f"{label}_shuffled"] = ctrl.aggregate()
    write_manifest(layout, f"eval-{label}", cfg, outputs, summary, started)
    return summary


# -- ablations ---------------------------------------------------------------------------------------


def _variant(cfg, axis, value):
    if axis == "ddim_steps":
        return dataclasses.replace(cfg, distill=dataclasses.replace(cfg.distill, sampler="ddim", sampler_steps=int(value)))
    if axis == "eta":
        return dataclasses.replace(cfg, distill=dataclasses.replace(cfg.distill, sampler="ddim", eta=float(value)))
    if axis == "sampler":
        return dataclasses.replace(cfg, distill=dataclasses.replace(cfg.distill, sampler=str(value)))
    if axis == "beta_max":
        return dataclasses.replace(cfg, distill=dataclasses.replace(cfg.distill, beta_max=float(value)))
    if axis == "objective":
        return dataclasses.replace(cfg, distill=dataclasses.replace(cfg.distill, objective=str(value)))
    if axis == "adaptor":
        return dataclasses.replace(cfg, distill=dataclasses.replace(cfg.distill, use_audio=_on(value, axis)))
    if axis == "content":
        return dataclasses.replace(cfg, distill=dataclasses.replace(cfg.distill, use_content=_on(value, axis)))
    if axis == "experts":
        return dataclasses.replace(cfg, ppo=dataclasses.replace(cfg.ppo, n_experts=int(value)))
    if axis == "moe_kind":
        return dataclasses.replace(cfg, ppo=dataclasses.replace(cfg.ppo, moe_kind=str(value)))
    raise ConfigError("ablate.axis", f"unknown axis {axis!r}")


def _on(value, axis):
    if value in ("on", True):
        return True
    if value in ("off", False):
        return False
    raise ConfigError(f"ablate.grids.{axis}", f"expected 'on' or 'off', got {value!r}")


ABLATE_FIELDS = ["axis", "value", "seed", "success_rate", "mpjpe_success", "mpkpe_success", "bas_success",
                 "mpjpe_all", "latency_ms"]


def cmd_ablate(cfg, layout, axis, values=None):
    """Run one axis of the ablation grid; one CSV row per (value, seed)."""
    from .config import ABLATION_AXES

    if axis not in ABLATION_AXES:
        raise ConfigError("ablate.axis", f"unknown axis {axis!r}; expected one of {list(ABLATION_AXES)}")
    started = time.perf_counter()
    values = list(values if values is not None else cfg.ablate.grids[axis])
    out_dir = layout.ablate_dir() / axis
    model, clips = _teacher_tracks(cfg, layout)
    eval_set = eval_clips(cfg, layout)
    streams = seed_streams(cfg.seed)
    rows = []
    for value in values:
        vcfg = _variant(cfg, axis, value)
        vcfg = dataclasses.replace(vcfg, distill=vcfg.distill.validate(), ppo=vcfg.ppo.validate())
        for seed in cfg.ablate.seeds:
            tag = f"{axis}={value}/seed={seed}"
            train_ss = child(seed_streams(seed)["train"], tag.split("/")[0])
            vlayout = Layout(out_dir / f"{value}_seed{seed}")
            latency = ""
            if axis in TEACHER_AXES:
                res = run_teacher(vcfg, model, make_tracks(model, clips), child(train_ss, "teacher"),
                                  child(streams["env"], "teacher"))
                vlayout.root.mkdir(parents=True, exist_ok=True)
                save_teacher(vlayout.teacher_ckpt, vcfg, res, clips[0].motion.fps)
                report = evaluate(model, make_tracks(model, eval_set), teacher_actor(res.policy),
                                  _eval_task(vcfg, config_to_dict(vcfg.env)), seed=child(streams["eval"], tag),
                                  label=tag, held_out=vcfg.eval.split == "held_out")
            else:
                alignment, ameta = load_alignment(layout)
                check_rates(eval_set, ameta["fps"], "adaptor")
                if axis in STUDENT_AXES:
                    teacher, _ = teacher_from_checkpoint(layout, model, make_tracks(model, clips))
                    res = run_distill(vcfg, model, clips, alignment, teacher, child(train_ss, "distill"),
                                      child(streams["env"], "distill"))
                    save_student(vlayout.student_ckpt, vcfg, res, clips[0].motion.fps)
                    student = res.student
                else:
                    student, _ = student_from_checkpoint(layout, model)
                    if axis == "ddim_steps" or axis == "sampler":
                        steps = [vcfg.distill.sampler_steps]
                        probe = latency_probe(student.denoiser, steps, repeats=cfg.eval.latency_repeats,
                                              include_ddpm=vcfg.distill.sampler == "ddpm")
                        latency = probe[-1]["mean_ms"]
                tracks = make_tracks(model, eval_set, alignment, vcfg.align.window)
                rng = np.random.default_rng(child(seed_streams(seed)["eval"], tag))
                report = evaluate(model, tracks, student_actor(student, rng, vcfg.distill.sampler_config()),
                                  _eval_task(vcfg, config_to_dict(vcfg.env)), seed=child(streams["eval"], tag),
                                  label=tag, held_out=vcfg.eval.split == "held_out")
            agg = report.aggregate()
            rows.append([axis, value, seed, agg["success_rate"], agg["mpjpe_success"], agg["mpkpe_success"],
                         agg["bas_success"], agg["mpjpe_all"], latency])
            log.info("%s success %.3f mpjpe %.4f", tag, agg["success_rate"], agg["mpjpe_success"])
    csv_path = layout.ablate_dir() / f"{axis}.csv"
    write_csv(csv_path, ABLATE_FIELDS, rows)
    plotting.plot_ablation(ABLATE_FIELDS, rows, csv_path.with_suffix(".png"), axis)
    write_manifest(layout, f"ablate-{axis}", cfg, [csv_path], {"rows": len(rows)}, started)
    return rows


# -- filter and BAS utilities ------------------------------------------------------------------------


FILTER_FIELDS = ["clip_id", "decision", "cause", "unstable_frames", "longest_unstable_run"]


def filter_clips(clips, body, eps_stab, max_unstable):
    """Apply the CoM/CoP stability filter to each clip; one result row per clip."""
    rows = []
    for c in clips:
        m = c.motion
        model = body_model(body, m.n_joints, "filter.body")
        if not model.feet:
            raise ConfigError("filter.body", f"the {body!r} body has no feet, so no centre of pressure exists")
        g = model.coords(m.q, m.root_pos, m.root_pitch)
        dist = com_cop_distance(model, g, m.contacts.astype(np.float64))
        decision, cause = motion_filter(dist, eps_stab, max_unstable)
        unstable = dist >= eps_stab
        rows.append([c.meta.clip_id, decision, cause or "", int(unstable.sum()), longest_run(unstable)])
    return rows


def cmd_filter(cfg, layout, input_dir=None):
    started = time.perf_counter()
    src = Path(input_dir) if input_dir else layout.corpus("train")
    if not (src / "manifest.json").exists():
        raise MissingArtifact("manifest.json", src, "point --input at a corpus directory")
    clips, _ = load_corpus(src)
    rows = filter_clips(clips, cfg.filter.body, cfg.filter.eps_stab, cfg.filter.max_unstable)
    out = layout.root / "filter" / f"{src.name}.csv"
    write_csv(out, FILTER_FIELDS, rows)
    retained = [r[0] for r in rows if r[1] == "retain"]
    write_json(out.with_suffix(".json"), {"retained": retained, "rejected": [r[0] for r in rows if r[1] != "retain"]})
    write_manifest(layout, "filter-motions", cfg, [out], {"retained": len(retained), "total": len(rows)}, started)
    return rows


BAS_FIELDS = ["clip_id", "bas", "shuffled_bas"]


def cmd_bas(cfg, layout, input_dir=None):
    """BAS of each reference clip against its own beats and against a beat-shuffled control."""
    started = time.perf_counter()
    src = Path(input_dir) if input_dir else layout.corpus(cfg.eval.split)
    if not (src / "manifest.json").exists():
        raise MissingArtifact("manifest.json", src, "point --input at a corpus directory")
    clips, _ = load_corpus(src)
    rng = np.random.default_rng(child(seed_streams(cfg.seed)["eval"], "bas-shuffle"))
    rows = []
    for c in clips:
        real = rollout_bas(c.motion.qd, c.motion.fps, c.audio.beats)
        fake = rollout_bas(c.motion.qd, c.motion.fps, shuffle_beats(c, cfg.data.synth, rng).audio.beats)
        rows.append([c.meta.clip_id, real, fake])
    out = layout.root / "bas" / f"{src.name}.csv"
    write_csv(out, BAS_FIELDS, rows)
    arr = np.array([[r[1], r[2]] for r in rows])
    metrics = {"bas": float(arr[:, 0].mean()), "shuffled_bas": float(arr[:, 1].mean())}
    write_json(out.with_suffix(".json"), metrics)
    write_manifest(layout, "bas", cfg, [out], metrics, started)
    return metrics

