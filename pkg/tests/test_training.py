import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from audio2loco.align import MotionVAE
from audio2loco.data import AudioTrack, ClipMeta, MotionClip, PairedClip, SyntheticConfig, make_synthetic_pairs
from audio2loco.diffusion import StudentDenoiser, build_schedule, diffusion_loss
from audio2loco.errors import ConfigError
from audio2loco.moe import DeltaMoE, PartitionSchema
from audio2loco.nn import Adam
from audio2loco.nn.gradcheck import check_gradients
from audio2loco.sim import chain_model
from audio2loco.training import (
    Critic,
    DistillConfig,
    PpoConfig,
    ReferenceTrack,
    RunningNorm,
    TaskConfig,
    TeacherPolicy,
    TrackingEnv,
    _schema_sizes,
    clipped_surrogate,
    compute_gae,
    content_latents,
    dagger_distill,
    evaluate,
    gaussian_logp,
    make_content_latent,
    normalize_advantages,
    policy_loss_and_grads,
    rollout,
    teacher_actor,
    train_teacher,
    value_loss_and_grads,
)

QUIET_TASK = TaskConfig(n_envs=3, randomize=False, pushes=False)


def static_clip(value=1.0, n_frames=60, clip_id="static", task="dance"):
    q = np.full((n_frames, 3), value)
    motion = MotionClip.fixed_base(q, np.zeros_like(q), 30.0)
    audio = AudioTrack(30.0, np.zeros((n_frames, 4)), np.array([0.5, 1.0, 1.5]))
    return PairedClip(ClipMeta(clip_id, 0, 100.0, 0.0, 1.0, 0, task), motion, audio)


@pytest.fixture(scope="module")
def clips():
    return make_synthetic_pairs(SyntheticConfig(n_clips=4, duration=2.0, seed=3))


@pytest.fixture(scope="module")
def tracks(clips):
    model = chain_model(3)
    out = [ReferenceTrack(model, c) for c in clips]
    for tr in out:
        tr.attach_audio_latents(np.random.default_rng(0).normal(size=(tr.clip.motion.n_frames, 8)))
    return out


def small_teacher(env, rng, kind="delta"):
    schema = PartitionSchema.from_sizes(_schema_sizes(env.group_sizes(), 3))
    moe = DeltaMoE(schema, env.model.n_joints, (16,), (8,), kind=kind, rng=rng)
    policy = TeacherPolicy(moe, -0.5)
    critic = Critic(env.critic_obs().shape[1], (16,), rng)
    return policy, critic


# -- GAE ------------------------------------------------------------------------


def test_gae_worked_example():
    rewards = np.array([[1.0], [1.0], [1.0]])
    values = np.zeros((4, 1))
    dones = np.array([[0.0], [0.0], [1.0]])
    adv, ret = compute_gae(rewards, values, dones, gamma=1.0, lam=1.0)
    assert adv[:, 0].tolist() == [3.0, 2.0, 1.0]
    assert np.array_equal(ret, adv)


def test_gae_zero_rewards_and_values():
    adv, ret = compute_gae(np.zeros((5, 2)), np.zeros((6, 2)), np.zeros((5, 2)))
    assert not adv.any() and not ret.any()


def test_gae_matches_explicit_sum():
    rng = np.random.default_rng(0)
    gamma, lam = 0.9, 0.8
    r, v = rng.normal(size=5), rng.normal(size=6)
    adv, _ = compute_gae(r[:, None], v[:, None], np.zeros((5, 1)), gamma, lam)
    for t in range(5):
        expected = sum(
            (gamma * lam) ** (k - t) * (r[k] + gamma * v[k + 1] - v[k]) for k in range(t, 5)
        )
        assert adv[t, 0] == pytest.approx(expected, abs=1e-12)


def test_gae_lambda_zero_is_td_error():
    rng = np.random.default_rng(1)
    r, v = rng.normal(size=(4, 3)), rng.normal(size=(5, 3))
    adv, _ = compute_gae(r, v, np.zeros((4, 3)), gamma=0.95, lam=0.0)
    assert np.allclose(adv, r + 0.95 * v[1:] - v[:-1], atol=1e-12)


def test_gae_done_cuts_bootstrap():
    r = np.array([[0.0], [2.0]])
    v = np.array([[0.0], [0.0], [100.0]])
    adv, _ = compute_gae(r, v, np.array([[1.0], [1.0]]), gamma=0.5, lam=1.0)
    assert adv[:, 0].tolist() == [0.0, 2.0]


def test_gae_length_mismatch_raises():
    with pytest.raises(ValueError):
        compute_gae(np.zeros((3, 1)), np.zeros((3, 1)), np.zeros((3, 1)))


# -- surrogate ----------------------------------------------------------------------


def test_clipped_surrogate_examples():
    assert clipped_surrogate(np.array([1.5]), np.array([1.0]), 0.2)[0] == pytest.approx(1.2)
    assert clipped_surrogate(np.array([0.5]), np.array([-1.0]), 0.2)[0] == pytest.approx(-0.8)
    adv = np.array([-2.0, 0.3, 5.0])
    assert np.array_equal(clipped_surrogate(np.ones(3), adv, 0.2), adv)


@settings(max_examples=50)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=2, max_size=64))
def test_normalized_advantages_zero_mean_unit_std(values):
    adv = np.array(values)
    if adv.std() < 1e-3:
        return
    out = normalize_advantages(adv)
    assert abs(out.mean()) < 1e-9
    assert out.std() == pytest.approx(1.0, abs=1e-6)


class ConstantMoE:
    """Mean fixed by a single bias vector, enough for a hand-computed loss."""

    def __init__(self, bias):
        self.bias = bias
        self.action_dim = bias.size

    def forward_train(self, obs):
        return np.broadcast_to(self.bias, (obs.shape[0], self.bias.size)).copy(), obs.shape[0]

    def backward(self, cache, gy):
        return {"bias": gy.sum(axis=0)}


def test_policy_loss_two_sample_oracle():
    cfg = PpoConfig(clip=0.2, entropy_coef=0.01)
    policy = TeacherPolicy.__new__(TeacherPolicy)
    policy.moe = ConstantMoE(np.array([0.1]))
    policy.log_std = np.array([-0.5])
    actions = np.array([[0.4], [-0.3]])
    adv = np.array([1.0, -2.0])
    old_logp = np.array([-0.2, 0.1])
    loss, _, _ = policy_loss_and_grads(policy, np.zeros((2, 1)), actions, old_logp, adv, cfg)
    sd = math.exp(-0.5)
    total = 0.0
    for a, A, old in zip(actions[:, 0], adv, old_logp):
        logp = -0.5 * ((a - 0.1) / sd) ** 2 - math.log(sd) - 0.5 * math.log(2 * math.pi)
        r = math.exp(logp - old)
        total += min(r * A, min(max(r, 0.8), 1.2) * A)
    entropy = 0.5 * math.log(2 * math.pi * math.e) + math.log(sd)
    assert loss == pytest.approx(-total / 2 - 0.01 * entropy, abs=1e-9)


@pytest.mark.parametrize("kind", ["delta", "vanilla"])
def test_policy_loss_gradcheck(kind):
    rng = np.random.default_rng(2)
    schema = PartitionSchema.from_sizes([3, 2, 2])
    policy = TeacherPolicy(DeltaMoE(schema, 2, (6,), (5,), kind=kind, rng=rng), -0.3)
    obs = rng.normal(size=(12, 7))
    actions = rng.normal(size=(12, 2)) * 0.5
    # old log-probs near the current ones so some ratios fall inside and some outside the clip band
    mu = policy.moe.forward(obs)
    old_logp = gaussian_logp(actions, mu, policy.log_std) + rng.normal(scale=0.3, size=12)
    adv = rng.normal(size=12)
    cfg = PpoConfig()
    params = policy.parameters()
    _, grads, _ = policy_loss_and_grads(policy, obs, actions, old_logp, adv, cfg)
    res = check_gradients(lambda: policy_loss_and_grads(policy, obs, actions, old_logp, adv, cfg)[0],
                          params, grads, probes=100, rng=rng)
    assert res.ok(1e-4), res


def test_value_loss_gradcheck():
    rng = np.random.default_rng(3)
    critic = Critic(5, (8, 8), rng)
    obs, ret = rng.normal(size=(10, 5)), rng.normal(size=10)
    _, grads, _ = value_loss_and_grads(critic, obs, ret, 0.5)
    res = check_gradients(lambda: value_loss_and_grads(critic, obs, ret, 0.5)[0], critic.parameters(), grads,
                          probes=100, rng=rng)
    assert res.ok(1e-4), res


def test_running_norm_matches_batch_statistics():
    rng = np.random.default_rng(4)
    x = rng.normal(loc=3.0, scale=2.0, size=(500, 3))
    norm = RunningNorm(3)
    for chunk in np.array_split(x, 7):
        norm.update(chunk)
    assert np.allclose(norm.mean, x.mean(axis=0), atol=1e-3)
    assert np.allclose(norm.var, x.var(axis=0), rtol=1e-3)


# -- environment and rollouts ----------------------------------------------------------------


def test_reference_track_resampling(clips):
    model = chain_model(3)
    tr = ReferenceTrack(model, clips[0])
    assert tr.n_steps == 99  # last frame at 59/30 s = 98.3 policy steps
    # 0.1 s lies exactly on frame 3
    assert np.allclose(model.joint_part(tr.g[5]), clips[0].motion.q[3], atol=1e-12)
    assert tr.frame_index[5] == 3


def test_reference_track_four_second_clip():
    clip = make_synthetic_pairs(SyntheticConfig(n_clips=1))[0]
    assert ReferenceTrack(chain_model(3), clip).n_steps == 199


def test_condition_width_matches_groups(tracks):
    env = TrackingEnv(chain_model(3), tracks, QUIET_TASK)
    env.reset()
    assert env.condition().shape == (3, sum(env.group_sizes()))
    assert env.critic_obs().shape[1] == sum(env.group_sizes()) + 2


@pytest.mark.parametrize(
    "groups,n,expected",
    [([10, 6, 5], 4, [10, 6, 5]), ([10, 6, 5], 3, [10, 11]), ([10, 6, 5], 5, [5, 5, 6, 5]), ([10, 6, 5], 1, [21])],
)
def test_schema_sizes(groups, n, expected):
    assert _schema_sizes(groups, n) == expected


def test_schema_sizes_too_many_experts():
    with pytest.raises(ConfigError):
        _schema_sizes([1, 1], 8)


def test_stored_logp_matches_recomputed(tracks):
    env = TrackingEnv(chain_model(3), tracks, QUIET_TASK, seed=1)
    env.reset()
    policy, critic = small_teacher(env, np.random.default_rng(0))
    buf = rollout(env, policy, critic, 10, np.random.default_rng(1))
    mu = policy.mean(buf.flat("obs"))
    assert np.allclose(gaussian_logp(buf.flat("actions"), mu, policy.log_std), buf.flat("logp"), atol=1e-10)


def test_rollout_deterministic(tracks):
    def run():
        env = TrackingEnv(chain_model(3), tracks, TaskConfig(n_envs=3), seed=5)
        env.reset()
        policy, critic = small_teacher(env, np.random.default_rng(0))
        return rollout(env, policy, critic, 15, np.random.default_rng(2))

    a, b = run(), run()
    for name in ("obs", "actions", "rewards", "values", "dones"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


def test_zero_targets_on_static_clip_terminate_by_tracking():
    model = chain_model(3)
    env = TrackingEnv(model, [ReferenceTrack(model, static_clip(1.0))], QUIET_TASK)
    env.theta_override = 0.3
    env.reset(phase=0.0, clips=[0, 0, 0])
    causes = []
    for _ in range(40):
        _, term, _, info = env.step(np.zeros((3, 3)))
        if term.any():
            causes = info["cause"][term]
            break
    assert len(causes) and np.all(causes == 1)


class NanForEnv:
    """Zero residuals, except NaN for one env at one step."""

    def __init__(self, env_id, at):
        self.env_id, self.at, self.t = env_id, at, 0

    def act(self, cond, rng):
        a = np.zeros((cond.shape[0], 3))
        if self.t == self.at:
            a[self.env_id] = np.nan
        self.t += 1
        return a, np.zeros(cond.shape[0])


class ZeroCritic:
    def value(self, obs):
        return np.zeros(obs.shape[0])


def test_abort_discards_whole_episode():
    model = chain_model(3)
    env = TrackingEnv(model, [ReferenceTrack(model, static_clip(0.0))], QUIET_TASK)
    env.reset(phase=0.0, clips=[0, 0, 0])
    buf = rollout(env, NanForEnv(1, 4), ZeroCritic(), 8, np.random.default_rng(0))
    assert buf.valid[:5, 1].tolist() == [0.0] * 5
    assert buf.valid[5:, 1].all() and buf.valid[:, [0, 2]].all()
    assert np.isfinite(buf.rewards).all()
    assert buf.causes[4, 1] == 4
    discarded = [e for e in buf.episodes if e["discarded"]]
    assert len(discarded) == 1 and discarded[0]["cause"] == "numerical"
    adv, _ = compute_gae(buf.rewards, buf.values, buf.dones)
    assert np.isfinite(adv).all()


def test_evaluate_zero_residual_on_static_clip():
    model = chain_model(3)
    tracks = [ReferenceTrack(model, static_clip(0.0, clip_id="a")), ReferenceTrack(model, static_clip(0.0, clip_id="b"))]
    rep = evaluate(model, tracks, lambda env: (env.ref_q(1), None), QUIET_TASK, label="hold")
    agg = rep.aggregate()
    assert agg["success_rate"] == 1.0
    assert agg["mpjpe_all"] < 1e-6
    assert [r.steps for r in rep.rows] == [tracks[0].n_steps - 1] * 2


def test_train_teacher_smoke(tracks):
    ppo = PpoConfig(iterations=2, batch=48, epochs=1, minibatches=2, expert_hidden=(8,), gate_hidden=(8,),
                    critic_hidden=(8,), n_experts=3)
    res = train_teacher(chain_model(3), tracks, QUIET_TASK, ppo, seed=0)
    assert len(res.timeline) == 2
    assert all(math.isfinite(r["policy_loss"]) for r in res.timeline)
    rep = evaluate(chain_model(3), tracks[:2], teacher_actor(res.policy), QUIET_TASK)
    assert len(rep.rows) == 2


# -- distillation ----------------------------------------------------------------------------


class LabelEcho:
    """Stub denoiser whose prediction is the clean action carried in the conditioning."""

    def __init__(self, objective="x0"):
        self.schedule = build_schedule(10)
        self.objective = objective

    def forward_train(self, x_t, t, cond, l_audio):
        return cond.copy(), None

    def backward(self, cache, gy):
        return {}, None


def test_diffusion_loss_zero_for_perfect_predictor():
    actions = np.random.default_rng(0).normal(size=(16, 3))
    loss, _ = diffusion_loss(LabelEcho(), actions, actions, np.zeros((16, 2)), np.random.default_rng(1))
    assert loss == 0.0


class LinearX0:
    """x0-prediction linear in the conditioning, trained by the denoising loss."""

    def __init__(self, cond_dim, action_dim):
        self.schedule = build_schedule(10)
        self.objective = "x0"
        self.W = np.zeros((cond_dim, action_dim))

    def forward_train(self, x_t, t, cond, l_audio):
        return cond @ self.W, cond

    def backward(self, cache, gy):
        return {"W": cache.T @ gy}, None


def test_linear_student_converges_to_least_squares():
    rng = np.random.default_rng(0)
    cond = rng.normal(size=(64, 4))
    actions = cond @ rng.normal(size=(4, 2)) + 0.1 * rng.normal(size=(64, 2))
    student = LinearX0(4, 2)
    opt = Adam({"W": student.W}, lr=1e-2)
    for _ in range(3000):
        _, grads = diffusion_loss(student, actions, cond, None, rng)
        opt.step(grads)
    W_star = np.linalg.lstsq(cond, actions, rcond=None)[0]
    assert np.allclose(student.W, W_star, atol=1e-3)


def test_denoiser_fits_constant_teacher():
    rng = np.random.default_rng(0)
    den = StudentDenoiser(2, 3, 4, width=16, n_blocks=1, time_dim=8, objective="x0", style_scale=0.1,
                          schedule=build_schedule(10), rng=rng)
    opt = Adam(den.parameters(), lr=3e-3)
    target = np.tile([0.3, -0.2], (32, 1))
    cond, audio = rng.normal(size=(32, 3)), rng.normal(size=(32, 4))
    for _ in range(2000):
        _, grads = diffusion_loss(den, target, cond, audio, rng)
        opt.step(grads)
    losses = [diffusion_loss(den, target, cond, audio, rng)[0] for _ in range(20)]
    assert np.mean(losses) < 1e-4


def test_student_ignores_audio_when_style_scale_zero():
    rng = np.random.default_rng(0)
    den = StudentDenoiser(2, 3, 4, width=16, n_blocks=2, time_dim=8, objective="x0", style_scale=0.0,
                          schedule=build_schedule(10), rng=rng)
    x, cond = rng.normal(size=(5, 2)), rng.normal(size=(5, 3))
    t = np.full(5, 4)
    assert np.array_equal(den.forward(x, t, cond, rng.normal(size=(5, 4))), den.forward(x, t, cond, rng.normal(size=(5, 4))))


# -- content latents -----------------------------------------------------------------------------


@pytest.fixture(scope="module")
def vae():
    return MotionVAE(30, 3, latent_dim=8, hidden=16, rng=np.random.default_rng(0))


def test_content_latent_single_and_duplicated_clip(clips, vae):
    one = make_content_latent(vae, clips[0].meta.task, [clips[0]], 30)
    assert np.linalg.norm(one) == pytest.approx(1.0)
    twice = make_content_latent(vae, clips[0].meta.task, [clips[0], clips[0]], 30)
    assert np.allclose(one, twice, atol=1e-12)


def test_content_latents_per_task(clips, vae):
    lat = content_latents(vae, clips, 30)
    assert sorted(lat) == ["dance", "speech"]
    assert float(lat["dance"] @ lat["speech"]) < 1.0 - 1e-6
    with pytest.raises(ValueError):
        make_content_latent(vae, "opera", clips, 30)


def test_dagger_drops_nonfinite_labels(tracks, vae, clips):
    model = chain_model(3)
    env = TrackingEnv(model, tracks, QUIET_TASK)
    teacher, _ = small_teacher(env, np.random.default_rng(0))
    real_mean = teacher.mean
    calls = {"n": 0}

    def flaky_mean(cond):
        out = real_mean(cond)
        calls["n"] += 1
        if calls["n"] == 3:
            out[0] = np.nan
        return out

    teacher.mean = flaky_mean
    cfg = DistillConfig(iterations=2, n_envs=3, steps_per_iteration=4, grad_steps=3, batch=8, width=8, n_blocks=1,
                        time_dim=4, T=10)
    res = dagger_distill(model, tracks, teacher, content_latents(vae, clips, 30), QUIET_TASK, cfg, seed=0)
    assert res.dropped_labels == 1
    assert [r["dataset_size"] for r in res.timeline] == [11, 23]
    assert all(math.isfinite(r["loss"]) and math.isfinite(r["label_mpjpe"]) for r in res.timeline)


def test_dagger_requires_audio_latents(clips, vae):
    model = chain_model(3)
    bare = [ReferenceTrack(model, clips[0])]
    env = TrackingEnv(model, bare, QUIET_TASK)
    teacher, _ = small_teacher(env, np.random.default_rng(0))
    with pytest.raises(ValueError, match="audio latents"):
        dagger_distill(model, bare, teacher, content_latents(vae, clips, 30), QUIET_TASK)


def test_config_validation():
    with pytest.raises(ConfigError):
        PpoConfig(moe_kind="dense").validate()
    with pytest.raises(ConfigError):
        DistillConfig(objective="v").validate()
    with pytest.raises(ConfigError):
        DistillConfig(eta=1.5).validate()
    with pytest.raises(ConfigError, match="start_fraction"):
        DistillConfig(start_fraction=1.5).validate()
