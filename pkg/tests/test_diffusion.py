import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from audio2loco.diffusion import (
    StudentDenoiser,
    build_schedule,
    ddim_sample,
    ddim_sigma,
    ddim_timesteps,
    ddpm_sample,
    diffusion_loss,
    eps_from_x0,
    forward_noise,
    latency_probe,
    predict_x0,
    x0_from_eps,
)
from audio2loco.errors import ConfigError, NumericalFailure
from audio2loco.nn import check_gradients

from test_nn import loop_dense


class ToyDenoiser:
    """Scalar-friendly stand-in: output = gain * x_t + offset (+ cond column)."""

    def __init__(self, schedule, gain=0.5, offset=0.2, objective="x0"):
        self.schedule, self.gain, self.offset, self.objective = schedule, gain, offset, objective
        self.action_dim = 1

    def __call__(self, x_t, t, cond, l_audio):
        return self.gain * np.asarray(x_t) + self.offset


class FixedTarget:
    def __init__(self, schedule, target):
        self.schedule, self.target, self.objective = schedule, np.atleast_2d(target), "x0"
        self.action_dim = self.target.shape[1]

    def __call__(self, x_t, t, cond, l_audio):
        return np.broadcast_to(self.target, np.shape(x_t)).copy()


class ZeroNoise:
    def normal(self, size=None):
        return np.zeros(size)


# -- schedule --------------------------------------------------------------------


@pytest.mark.parametrize("kind", ["cosine", "linear"])
@pytest.mark.parametrize("T", [1, 5, 50])
def test_schedule_monotone(kind, T):
    s = build_schedule(T, kind, 0.2)
    assert np.all(np.diff(s.alpha_bars) < 0)
    assert s.alpha_bars[0] == 1.0 and s.alpha_bars[1] < 1.0
    assert np.all(s.betas[1:] <= 0.2 + 1e-15)


def cosine_oracle(T, beta_max, s=0.008):
    f = [math.cos(((t / T + s) / (1 + s)) * math.pi / 2) ** 2 for t in range(T + 1)]
    betas = [min(1 - (f[t] / f[0]) / (f[t - 1] / f[0]), beta_max) for t in range(1, T + 1)]
    ab, out = 1.0, [1.0]
    for b in betas:
        ab *= 1 - b
        out.append(ab)
    return betas, out


def test_cosine_schedule_matches_oracle_and_clamps():
    s = build_schedule(50, "cosine", 0.2)
    betas, abars = cosine_oracle(50, 0.2)
    np.testing.assert_allclose(s.betas[1:], betas, rtol=0, atol=1e-14)
    np.testing.assert_allclose(s.alpha_bars, abars, rtol=0, atol=1e-14)
    # the raw cosine beta exceeds 0.2 near t = T, so the clamp binds
    assert s.betas.max() == 0.2


def test_single_step_schedule():
    s = build_schedule(1, "cosine", 0.5)
    assert s.alpha_bars[1] == 1 - s.betas[1]


@pytest.mark.parametrize("bad", [0.0, 1.0, -0.1, 1.5])
def test_invalid_beta_max(bad):
    with pytest.raises(ConfigError):
        build_schedule(50, "cosine", bad)


# -- forward corruption ------------------------------------------------------------


class FakeSched:
    def __init__(self, ab):
        self.ab = ab

    def alpha_bar(self, t):
        return self.ab


def test_forward_noise_limits():
    a, e = np.array([1.0, -2.0]), np.array([0.5, 0.5])
    np.testing.assert_array_equal(forward_noise(a, 1, e, FakeSched(1.0)), a)
    np.testing.assert_array_equal(forward_noise(a, 1, e, FakeSched(0.0)), e)
    np.testing.assert_allclose(forward_noise(np.zeros(3), 1, np.ones(3), FakeSched(0.25)), math.sqrt(0.75), atol=1e-15)
    assert math.sqrt(0.75) == pytest.approx(0.8660, abs=1e-4)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 50), st.integers(0, 10_000))
def test_reconstruction_identity(t, seed):
    s = build_schedule(50, "cosine", 0.2)
    rng = np.random.default_rng(seed)
    a, eps = rng.normal(size=4), rng.normal(size=4)
    x = forward_noise(a, t, eps, s)
    np.testing.assert_allclose(x0_from_eps(x, t, eps, s), a, atol=1e-9)
    np.testing.assert_allclose(eps_from_x0(x, t, a, s), eps, atol=1e-9)
    ab = s.alpha_bars[t]
    assert math.sqrt(ab) ** 2 + math.sqrt(1 - ab) ** 2 == pytest.approx(1.0, abs=1e-15)


def test_forward_noise_variance_monte_carlo():
    s = build_schedule(50, "cosine", 0.2)
    rng = np.random.default_rng(0)
    n = 10_000
    for t in (1, 25, 50):
        x = forward_noise(np.full(n, 0.7), t, rng.normal(size=n), s)
        var = 1 - s.alpha_bars[t]
        # sample variance standard error for Gaussian data: var * sqrt(2 / (n - 1))
        assert abs(x.var(ddof=1) - var) < 3 * var * math.sqrt(2 / (n - 1))


# -- denoiser --------------------------------------------------------------------


def small_denoiser(objective="x0", style=0.1, seed=0):
    rng = np.random.default_rng(seed)
    return StudentDenoiser(2, 5, audio_dim=6, width=8, n_blocks=2, time_dim=4, objective=objective,
                           style_scale=style, schedule=build_schedule(10), rng=rng)


def randomize_modulation(den, rng):
    for k, v in den.parameters().items():
        if k.startswith("mod"):
            v[...] = 0.3 * rng.normal(size=v.shape)


def test_style_disabled_ignores_audio():
    den = small_denoiser(style=0.0)
    rng = np.random.default_rng(1)
    x, c, la = rng.normal(size=(3, 2)), rng.normal(size=(3, 5)), rng.normal(size=(3, 6))
    assert den(x, 4, c, la).tobytes() == den(x, 4, c, la + rng.normal(size=la.shape)).tobytes()


def test_style_gradient_nonzero_when_enabled():
    den = small_denoiser(style=0.1)
    rng = np.random.default_rng(2)
    x, c, la = rng.normal(size=(1, 2)), rng.normal(size=(1, 5)), rng.normal(size=(1, 6))
    h = 1e-6
    bump = np.zeros_like(la)
    bump[0, 3] = h
    fd = (den(x, 4, c, la + bump) - den(x, 4, c, la - bump)) / (2 * h)
    assert np.abs(fd).max() > 1e-6
    _, cache = den.forward_train(x, 4, c, la)
    _, (_, _, g_audio) = den.backward(cache, np.ones((1, 2)))
    assert g_audio[0, 3] == pytest.approx(fd.sum(), rel=1e-5)


def straight_line(den, x, t, c, la):
    e = loop_dense(den.children["embed"], np.concatenate([c, den.time_encoding(t, 1)[0]]))
    o = np.concatenate([x, e])
    for i in range(den.n_blocks):
        z = loop_dense(den.children[f"lin{i}"], o)
        mod = den.children[f"mod{i}"]
        n = (z - z.mean()) / math.sqrt(((z - z.mean()) ** 2).mean() + 1e-5)
        sh = e @ mod.params["W"] + mod.params["b"]
        m = n * (1 + sh[: len(z)]) + sh[len(z) :]
        h = np.where(m > 0, m, np.expm1(np.minimum(m, 0)))
        o = h + den.style_scale * (la @ den.params[f"style{i}"])
    return loop_dense(den.children["out"], o)


def test_denoiser_matches_straight_line_oracle():
    den = small_denoiser(seed=3)
    rng = np.random.default_rng(3)
    randomize_modulation(den, rng)
    x, c, la = rng.normal(size=2), rng.normal(size=5), rng.normal(size=6)
    np.testing.assert_allclose(den(x, 7, c, la)[0], straight_line(den, x, 7, c, la), atol=1e-12)


@pytest.mark.parametrize("objective", ["x0", "epsilon"])
def test_denoiser_gradcheck(objective):
    den = small_denoiser(objective, seed=4)
    rng = np.random.default_rng(4)
    randomize_modulation(den, rng)
    a, c, la = rng.normal(size=(6, 2)), rng.normal(size=(6, 5)), rng.normal(size=(6, 6))
    _, grads = diffusion_loss(den, a, c, la, np.random.default_rng(11))
    res = check_gradients(lambda: diffusion_loss(den, a, c, la, np.random.default_rng(11))[0], den.parameters(), grads,
                          rng=rng)
    assert res.ok(1e-4), res


def test_denoiser_input_gradients():
    den = small_denoiser(seed=5)
    rng = np.random.default_rng(5)
    randomize_modulation(den, rng)
    xs = {"x": rng.normal(size=(3, 2)), "c": rng.normal(size=(3, 5)), "la": rng.normal(size=(3, 6))}
    up = rng.normal(size=(3, 2))
    _, cache = den.forward_train(xs["x"], 3, xs["c"], xs["la"])
    _, (gx, gc, ga) = den.backward(cache, up)
    res = check_gradients(lambda: float(np.sum(den(xs["x"], 3, xs["c"], xs["la"]) * up)), xs,
                          {"x": gx, "c": gc, "la": ga}, probes=40, rng=rng)
    assert res.ok(1e-4), res


def test_denoiser_flags_nonfinite():
    den = small_denoiser()
    den.children["out"].params["b0"][0] = np.nan
    with pytest.raises(NumericalFailure):
        den(np.zeros((1, 2)), 1, np.zeros((1, 5)), np.zeros((1, 6)))


def test_objectives_agree_under_oracles():
    sched = build_schedule(10)
    rng = np.random.default_rng(6)
    a, eps = rng.normal(size=(1, 2)), rng.normal(size=(1, 2))
    x = forward_noise(a, 6, eps, sched)

    class Oracle:
        def __init__(self, objective):
            self.objective, self.schedule = objective, sched

        def __call__(self, x_t, t, cond, l_audio):
            return a if self.objective == "x0" else eps

    np.testing.assert_allclose(predict_x0(Oracle("x0"), x, 6, None, None), predict_x0(Oracle("epsilon"), x, 6, None, None),
                               atol=1e-9)


def test_rejects_unknown_objective():
    with pytest.raises(ConfigError):
        StudentDenoiser(2, 3, objective="v")


# -- samplers --------------------------------------------------------------------


def test_ddim_timesteps():
    assert ddim_timesteps(50, 2) == [50, 1]
    assert ddim_timesteps(50, 50) == list(range(50, 0, -1))
    assert ddim_timesteps(50, 1) == [50]
    with pytest.raises(ConfigError):
        ddim_timesteps(50, 51)


@pytest.mark.parametrize("steps", [1, 2, 5, 10])
def test_ddim_fixed_point(steps):
    sched = build_schedule(10)
    target = np.array([[0.3, -1.2]])
    out = ddim_sample(FixedTarget(sched, target), np.zeros((1, 1)), None, steps, 0.0, np.random.default_rng(0))
    np.testing.assert_allclose(out, target, atol=1e-12)


def test_ddim_eta_one_matches_ddpm_variance():
    sched = build_schedule(50)
    for t in range(2, 51):
        assert ddim_sigma(sched, t, t - 1, 1.0) ** 2 == pytest.approx(sched.posterior_variance(t), rel=1e-12)


def test_ddim_two_step_scalar_oracle():
    sched = build_schedule(50, "cosine", 0.2)
    toy = ToyDenoiser(sched, 0.5, 0.2)
    rng = np.random.default_rng(0)
    out = ddim_sample(toy, np.zeros((1, 1)), None, 2, 0.0, rng)
    # hand-rolled
    x = float(np.random.default_rng(0).normal())
    ab = [float(v) for v in sched.alpha_bars]
    a_hat = 0.5 * x + 0.2
    eps_hat = (x - math.sqrt(ab[50]) * a_hat) / math.sqrt(1 - ab[50])
    x = math.sqrt(ab[1]) * a_hat + math.sqrt(1 - ab[1]) * eps_hat
    a_hat = 0.5 * x + 0.2
    assert out[0, 0] == pytest.approx(a_hat, abs=1e-12)


def test_ddim_stochastic_scalar_oracle():
    sched = build_schedule(10)
    toy = ToyDenoiser(sched, -0.3, 0.1)
    out = ddim_sample(toy, np.zeros((1, 1)), None, 3, 0.5, np.random.default_rng(2))
    r = np.random.default_rng(2)
    ab = [float(v) for v in sched.alpha_bars]
    x = float(r.normal())
    seq = [10, 6, 1]  # round(linspace(10, 1, 3)) = [10, 5.5 -> 6, 1]
    assert ddim_timesteps(10, 3) == seq
    for k, t in enumerate(seq):
        a_hat = -0.3 * x + 0.1
        if k == len(seq) - 1:
            break
        tp = seq[k + 1]
        eps_hat = (x - math.sqrt(ab[t]) * a_hat) / math.sqrt(1 - ab[t])
        sig = 0.5 * math.sqrt((1 - ab[tp]) / (1 - ab[t]) * (1 - ab[t] / ab[tp]))
        x = math.sqrt(ab[tp]) * a_hat + math.sqrt(1 - ab[tp] - sig * sig) * eps_hat + sig * float(r.normal(size=(1, 1))[0, 0])
    assert out[0, 0] == pytest.approx(a_hat, abs=1e-12)


def test_ddim_deterministic_bitwise():
    den = small_denoiser()
    c, la = np.ones((2, 5)), np.ones((2, 6))
    xT = np.random.default_rng(0).normal(size=(2, 2))
    a = ddim_sample(den, c, la, 2, 0.0, np.random.default_rng(1), x_T=xT)
    b = ddim_sample(den, c, la, 2, 0.0, np.random.default_rng(99), x_T=xT)
    assert a.tobytes() == b.tobytes()


def test_ddpm_single_step_returns_oracle_action():
    sched = build_schedule(1, "cosine", 0.5)
    target = np.array([[0.4, 0.1]])
    assert sched.posterior_variance(1) == 0.0
    out = ddpm_sample(FixedTarget(sched, target), np.zeros((1, 1)), None, np.random.default_rng(0))
    np.testing.assert_allclose(out, target + math.sqrt(sched.posterior_variance(1)) * 0.0, atol=1e-15)


def test_ddpm_zero_noise_trace_is_posterior_means():
    sched = build_schedule(6)
    toy = ToyDenoiser(sched, 0.4, -0.1)
    trace = []
    out = ddpm_sample(toy, np.zeros((1, 1)), None, ZeroNoise(), x_T=np.array([[1.3]]), trace=trace)
    x = 1.3
    ab, b = sched.alpha_bars, sched.betas
    for (t, xt, _), expected_t in zip(trace, range(6, 0, -1)):
        a_hat = 0.4 * x - 0.1
        x = math.sqrt(ab[t - 1]) * b[t] / (1 - ab[t]) * a_hat + math.sqrt(1 - b[t]) * (1 - ab[t - 1]) / (1 - ab[t]) * x
        assert t == expected_t
        assert xt[0, 0] == pytest.approx(x, abs=1e-12)
    assert out[0, 0] == pytest.approx(x, abs=1e-12)


def test_ddpm_scalar_seed_oracle():
    sched = build_schedule(5, "linear", 0.2)
    toy = ToyDenoiser(sched, 0.7, 0.05)
    out = ddpm_sample(toy, np.zeros((1, 1)), None, np.random.default_rng(4))
    r = np.random.default_rng(4)
    ab, b = [float(v) for v in sched.alpha_bars], [float(v) for v in sched.betas]
    x = float(r.normal())
    for t in range(5, 0, -1):
        a_hat = 0.7 * x + 0.05
        mean = math.sqrt(ab[t - 1]) * b[t] / (1 - ab[t]) * a_hat + math.sqrt(1 - b[t]) * (1 - ab[t - 1]) / (1 - ab[t]) * x
        var = b[t] * (1 - ab[t - 1]) / (1 - ab[t])
        x = mean + math.sqrt(var) * float(r.normal(size=(1, 1))[0, 0])
    assert out[0, 0] == pytest.approx(x, abs=1e-12)


def test_latency_probe_rows():
    den = small_denoiser()
    rows = latency_probe(den, [2, 4, 6, 8, 10], repeats=5, warmup=1)
    assert [r["steps"] for r in rows] == [2, 4, 6, 8, 10]
    assert rows[0]["mean_ms"] <= rows[-1]["mean_ms"]
    twice = latency_probe(den, [2, 2], repeats=20, warmup=2)
    assert len(twice) == 2 and all(r["mean_ms"] > 0 for r in twice)
    with_ddpm = latency_probe(den, [2], repeats=5, warmup=1, include_ddpm=True)
    assert with_ddpm[-1]["sampler"] == "ddpm" and with_ddpm[-1]["mean_ms"] > with_ddpm[0]["mean_ms"]
