import dataclasses
import json
import shutil
from pathlib import Path

import numpy as np
import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from audio2loco.cli import main
from audio2loco.config import (
    RunConfig,
    apply_override,
    config_to_dict,
    dumps_config,
    loads_config,
    synthetic_config,
)
from audio2loco.data import (
    AudioTrack,
    ClipMeta,
    MotionClip,
    PairedClip,
    SyntheticConfig,
    load_corpus,
    save_corpus,
)
from audio2loco.errors import ConfigError
from audio2loco.fileio import read_csv, read_json
from audio2loco.nn.checkpoint import load_checkpoint
from audio2loco.pipeline import Layout, RateMismatch, check_rates, corpus_seed, seed_streams

TINY = {
    "seed": 3,
    "train_clips": 4,
    "data": {"train_clips": 8, "held_out_clips": 4, "synth": {"duration": 2.0}},
    "align": {"vae_steps": 20, "align_steps": 10, "batch": 8, "vae_hidden": 16, "model_dim": 8, "n_blocks": 1,
              "n_heads": 2, "audio_latent_dim": 16, "latent_dim": 8},
    "env": {"n_envs": 2},
    "ppo": {"iterations": 3, "batch": 32, "epochs": 1, "minibatches": 2, "expert_hidden": [8], "gate_hidden": [8],
            "critic_hidden": [8]},
    "distill": {"iterations": 2, "n_envs": 2, "steps_per_iteration": 4, "grad_steps": 2, "batch": 8, "width": 8,
                "n_blocks": 1, "time_dim": 4, "T": 10},
    "eval": {"clips": 2, "latency_repeats": 2},
}


def write_config(path, raw=TINY):
    path.write_text(yaml.safe_dump(raw))
    return str(path)


def cli(*args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("tiny")
    cfg = write_config(base / "tiny.yaml")
    out = base / "run"
    for cmd in ("gen-data", "train-align", "train-teacher", "distill"):
        assert cli(cmd, "--config", cfg, "--out", out) == 0, cmd
    return cfg, out


# -- configuration --------------------------------------------------------------


def test_default_config_round_trips():
    cfg = RunConfig()
    assert loads_config(dumps_config(cfg)) == cfg


@settings(max_examples=25, deadline=None)
@given(
    seed=st.integers(0, 2**31 - 1),
    lr=st.floats(1e-6, 1.0),
    eta=st.floats(0.0, 1.0),
    hidden=st.lists(st.integers(1, 256), min_size=1, max_size=3),
    objective=st.sampled_from(["x0", "epsilon"]),
    theta=st.one_of(st.floats(0.01, 5.0), st.just(float("inf"))),
)
def test_modified_config_round_trips_exactly(seed, lr, eta, hidden, objective, theta):
    cfg = loads_config(yaml.safe_dump({
        "seed": seed, "ppo": {"lr": lr, "expert_hidden": hidden}, "distill": {"eta": eta, "objective": objective},
        "eval": {"theta": theta},
    }))
    again = loads_config(dumps_config(cfg))
    assert again == cfg
    assert again.ppo.expert_hidden == tuple(hidden)


def test_exponent_floats_parse_as_numbers():
    cfg = loads_config("ppo: {lr: 1e-4}\nrewards: {penalty_weights: {torque: -2E-6}}")
    assert cfg.ppo.lr == 1e-4
    assert cfg.rewards.penalty_weights["torque"] == -2e-6
    assert apply_override(cfg, "ppo.lr", "3e-4").ppo.lr == 3e-4


@pytest.mark.parametrize(
    "text,path",
    [
        ("ppo: {clipp: 0.1}", "ppo.clipp"),
        ("bogus: 1", "bogus"),
        ("rewards: {sigmas: {joint_pos: -1.0}}", "rewards.sigmas.joint_pos"),
        ("rewards: {weights: {nope: 1.0}}", "rewards.weights.nope"),
        ("env: {n_envs: 1.5}", "env.n_envs"),
        ("env: {n_envs: 0}", "env.n_envs"),
        ("distill: {eta: 2.0}", "distill.eta"),
        ("distill: {objective: v}", "distill.objective"),
        ("ppo: {moe_kind: dense}", "ppo.moe_kind"),
        ("align: {n_heads: 5}", "align.n_heads"),
        ("data: {synth: {window: 10}}", "data.synth"),
        ("data: {synth: {n_clips: 3}}", "data.synth.n_clips"),
        ("task: opera", "task"),
        ("schema_version: 2", "schema_version"),
        ("eval: {split: test}", "eval.split"),
        ("ablate: {grids: {speed: [1]}}", "ablate.grids.speed"),
        ("randomize: [1, 2", "<file>"),
    ],
)
def test_invalid_configs_give_path_qualified_errors(text, path):
    with pytest.raises(ConfigError) as info:
        loads_config(text)
    assert info.value.path == path


def test_override_and_manifest_replay(tmp_path):
    cfg = apply_override(RunConfig(), "ppo.iterations", "7")
    assert cfg.ppo.iterations == 7
    with pytest.raises(ConfigError):
        apply_override(cfg, "ppo.nothing", "1")
    manifest = {"kind": "manifest", "config": config_to_dict(cfg), "metrics": {}}
    assert loads_config(json.dumps(manifest)) == cfg


def test_seed_streams_are_named_and_stable():
    a, b = seed_streams(5), seed_streams(5)
    draws = {k: np.random.default_rng(v).random() for k, v in a.items()}
    assert draws == {k: np.random.default_rng(v).random() for k, v in b.items()}
    assert len(set(draws.values())) == 4
    cfg = RunConfig()
    assert corpus_seed(cfg, "train") != corpus_seed(cfg, "held_out")
    pinned = dataclasses.replace(cfg, data=dataclasses.replace(cfg.data, train_seed=1))
    assert corpus_seed(pinned, "train") == 1
    assert synthetic_config(pinned, "held_out", 2).n_clips == 32


# -- gen-data ---------------------------------------------------------------------


def test_gen_data_writes_one_directory_per_clip(tmp_path):
    raw = {"data": {"train_clips": 64, "held_out_clips": 2, "synth": {"duration": 2.0}}}
    cfg = write_config(tmp_path / "c.yaml", raw)
    assert cli("gen-data", "--config", cfg, "--out", tmp_path / "run") == 0
    train = tmp_path / "run" / "corpus" / "train"
    assert len([d for d in train.iterdir() if d.is_dir()]) == 64
    assert (train / "manifest.json").exists()
    clips, manifest = load_corpus(train)
    assert len(clips) == 64 and manifest["split"] == "train"


def _tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(Path(root).rglob("*")) if p.is_file()}


def test_gen_data_is_byte_identical_refuses_and_forces(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.yaml")
    for name in ("a", "b"):
        assert cli("gen-data", "--config", cfg, "--out", tmp_path / name) == 0
    assert _tree_bytes(tmp_path / "a" / "corpus") == _tree_bytes(tmp_path / "b" / "corpus")
    assert cli("gen-data", "--config", cfg, "--out", tmp_path / "a") == 2
    assert "--force" in capsys.readouterr().err
    (tmp_path / "a" / "corpus" / "train" / "stray.txt").write_text("x")
    assert cli("gen-data", "--config", cfg, "--out", tmp_path / "a", "--force") == 0
    assert not (tmp_path / "a" / "corpus" / "train" / "stray.txt").exists()
    assert _tree_bytes(tmp_path / "a" / "corpus") == _tree_bytes(tmp_path / "b" / "corpus")


def test_seed_flag_changes_the_corpus(tmp_path):
    cfg = write_config(tmp_path / "c.yaml")
    cli("gen-data", "--config", cfg, "--out", tmp_path / "a")
    cli("gen-data", "--config", cfg, "--out", tmp_path / "b", "--seed", "4")
    assert _tree_bytes(tmp_path / "a" / "corpus") != _tree_bytes(tmp_path / "b" / "corpus")


# -- prerequisites ---------------------------------------------------------------------


def test_distill_without_teacher_names_the_checkpoint(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.yaml")
    cli("gen-data", "--config", cfg, "--out", tmp_path / "run")
    assert cli("distill", "--config", cfg, "--out", tmp_path / "run") == 2
    assert "teacher.ckpt" in capsys.readouterr().err


def test_train_align_without_corpus(tmp_path, capsys):
    assert cli("train-align", "--out", tmp_path / "empty") == 2
    assert "gen-data" in capsys.readouterr().err


def test_unknown_ablation_axis_rejected(tmp_path):
    with pytest.raises(SystemExit):
        cli("ablate", "speed", "--out", tmp_path)


# -- full tiny pipeline ---------------------------------------------------------------------


def test_timelines_have_one_row_per_iteration(tiny_run):
    _, out = tiny_run
    _, rows = read_csv(out / "timelines" / "teacher.csv")
    assert len(rows) == TINY["ppo"]["iterations"]
    _, rows = read_csv(out / "timelines" / "distill.csv")
    assert len(rows) == TINY["distill"]["iterations"]
    _, rows = read_csv(out / "timelines" / "align.csv")
    assert len(rows) == TINY["align"]["vae_steps"] + TINY["align"]["align_steps"]
    for stage in ("teacher", "distill", "align"):
        assert (out / "timelines" / f"{stage}.png").stat().st_size > 0


def test_manifests_hash_their_artifacts(tiny_run):
    _, out = tiny_run
    import hashlib

    m = read_json(out / "manifests" / "train-teacher.json")
    assert m["kind"] == "manifest" and m["seed"] == TINY["seed"]
    for rel, digest in m["artifacts"].items():
        assert hashlib.sha256((out / rel).read_bytes()).hexdigest() == digest
    _, header = load_checkpoint(out / "teacher.ckpt")
    assert header["meta"]["ppo"]["iterations"] == TINY["ppo"]["iterations"]


def test_manifest_replay_reproduces_teacher_timeline(tiny_run, tmp_path):
    _, out = tiny_run
    replay = tmp_path / "replay"
    shutil.copytree(out / "corpus", replay / "corpus")
    assert cli("train-teacher", "--config", out / "manifests" / "train-teacher.json", "--out", replay) == 0
    assert (replay / "timelines" / "teacher.csv").read_bytes() == (out / "timelines" / "teacher.csv").read_bytes()


def test_eval_marks_held_out_and_dumps_trajectories(tiny_run):
    cfg, out = tiny_run
    assert cli("eval", "--config", cfg, "--out", out, "--trajectories") == 0
    report = read_json(out / "eval" / "student_held_out.json")
    assert len(report["clips"]) == 2
    assert all(c["held_out"] for c in report["clips"])
    dumps = sorted((out / "eval" / "student_held_out_trajectories").glob("*.csv"))
    assert len(dumps) == 2
    header, rows = read_csv(dumps[0])
    assert header[0] == "time" and "deviation" in header and rows
    times = np.array([float(r[0]) for r in rows])
    np.testing.assert_allclose(np.diff(times), 0.02, atol=1e-12)
    assert (out / "eval" / "student_held_out.png").exists()


def test_eval_on_training_split_is_not_held_out(tiny_run):
    cfg, out = tiny_run
    assert cli("eval", "--config", cfg, "--out", out, "--policy", "teacher", "--split", "train") == 0
    report = read_json(out / "eval" / "teacher_train.json")
    assert not any(c["held_out"] for c in report["clips"])
    assert 0.0 <= report["aggregate"]["success_rate"] <= 1.0


def test_eval_ablation_label(tiny_run):
    cfg, out = tiny_run
    assert cli("eval", "--config", cfg, "--out", out, "--policy", "teacher", "--ablate", "moe_kind=vanilla") == 0
    report = read_json(out / "eval" / "teacher_held_out_moe_kind=vanilla.json")
    assert report["aggregate"]["label"] == "teacher_held_out_moe_kind=vanilla"


def test_eval_rejects_fps_mismatch(tiny_run, tmp_path, capsys):
    cfg, out = tiny_run
    run = tmp_path / "run"
    shutil.copytree(out, run)
    clips, manifest = load_corpus(run / "corpus" / "held_out")
    resampled = []
    for c in clips:
        m = dataclasses.replace(c.motion, fps=25.0)
        resampled.append(PairedClip(c.meta, m, dataclasses.replace(c.audio, fps=25.0)))
    shutil.rmtree(run / "corpus" / "held_out")
    save_corpus(run / "corpus" / "held_out", resampled, SyntheticConfig(fps=25.0, duration=2.0))
    assert cli("eval", "--config", cfg, "--out", run) == 2
    err = capsys.readouterr().err
    assert "25 FPS" in err and "30 FPS" in err


def test_check_rates_audio_motion_mismatch():
    clip = _biped_clip("x", np.ones(10, bool))
    bad = PairedClip(clip.meta, clip.motion, dataclasses.replace(clip.audio, fps=60.0))
    with pytest.raises(RateMismatch, match="audio"):
        check_rates([bad], 30.0, "adaptor")


def test_ablate_ddim_steps_table(tiny_run):
    cfg, out = tiny_run
    assert cli("ablate", "ddim_steps", "--values", "2,4", "--config", cfg, "--out", out) == 0
    header, rows = read_csv(out / "ablate" / "ddim_steps.csv")
    assert header[:3] == ["axis", "value", "seed"]
    assert [r[1] for r in rows] == ["2", "4"]
    assert all(float(r[header.index("latency_ms")]) > 0 for r in rows)
    assert (out / "ablate" / "ddim_steps.png").exists()


def test_ablate_moe_kind_two_rows(tiny_run):
    cfg, out = tiny_run
    assert cli("ablate", "moe_kind", "--config", cfg, "--out", out) == 0
    _, rows = read_csv(out / "ablate" / "moe_kind.csv")
    assert [r[1] for r in rows] == ["vanilla", "delta"]
    assert all(r[-1] == "" for r in rows)


def test_bas_command(tiny_run):
    cfg, out = tiny_run
    assert cli("bas", "--config", cfg, "--out", out) == 0
    metrics = read_json(out / "bas" / "held_out.json")
    assert metrics["bas"] > metrics["shuffled_bas"]


# -- motion filter --------------------------------------------------------------------------


def _biped_clip(clip_id, loaded, n=300):
    stance = np.tile([0.3, 0.0, -0.3, 0.0], (n, 1))
    root = np.tile([0.0, 0.86], (n, 1))
    contacts = np.repeat(np.asarray(loaded, bool)[:, None], 2, axis=1)
    motion = MotionClip(30.0, stance, np.zeros_like(stance), root, np.zeros(n), np.zeros((n, 2)), np.zeros(n),
                        contacts)
    audio = AudioTrack(30.0, np.zeros((n, 4)), np.array([1.0]))
    return PairedClip(ClipMeta(clip_id, 0, 100.0, 0.0, 1.0, 0, "dance"), motion, audio)


def _loaded(unstable_len, start=100, n=300):
    mask = np.ones(n, bool)
    mask[start : start + unstable_len] = False
    return mask


def test_filter_motions_command(tmp_path):
    clips = [
        _biped_clip("all_stable", np.ones(300, bool)),
        _biped_clip("run_99", _loaded(99)),
        _biped_clip("run_100", _loaded(100)),
        _biped_clip("endpoint", _loaded(1, start=299)),
    ]
    save_corpus(tmp_path / "bipeds", clips, SyntheticConfig())
    assert cli("filter-motions", "--input", tmp_path / "bipeds", "--out", tmp_path / "run") == 0
    _, rows = read_csv(tmp_path / "run" / "filter" / "bipeds.csv")
    assert [(r[0], r[1], r[2]) for r in rows] == [
        ("all_stable", "retain", ""),
        ("run_99", "retain", ""),
        ("run_100", "reject", "unstable-run"),
        ("endpoint", "reject", "unstable-endpoints"),
    ]
    assert read_json(tmp_path / "run" / "filter" / "bipeds.json")["retained"] == ["all_stable", "run_99"]


def test_filter_rejects_footless_body(tmp_path, capsys):
    save_corpus(tmp_path / "bipeds", [_biped_clip("a", np.ones(300, bool))], SyntheticConfig())
    code = cli("filter-motions", "--input", tmp_path / "bipeds", "--out", tmp_path / "run", "--set",
               "filter.body=chain")
    assert code == 2
    assert "filter.body" in capsys.readouterr().err


def test_layout_paths(tmp_path):
    lay = Layout(tmp_path)
    assert lay.teacher_ckpt.name == "teacher.ckpt"
    assert lay.timeline("teacher").parent.name == "timelines"


def test_set_overrides_are_validated_together(tmp_path):
    args = ["gen-data", "--out", tmp_path / "run", "--set", "data.train_clips=2", "--set", "data.held_out_clips=1",
            "--set", "train_clips=1", "--set", "data.synth.duration=2.0"]
    assert cli(*args) == 0
    assert len(load_corpus(tmp_path / "run" / "corpus" / "train")[0]) == 2
