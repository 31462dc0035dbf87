import math

import numpy as np
import pytest

from oracles import transformer_forward_single
from seekarm import scenes
from seekarm.env import Observation
from seekarm.errors import CheckpointError, ContractViolation, NumericError
from seekarm.policy import (
    FORMAT_VERSION,
    PolicyConfig,
    act,
    backward,
    embed_tokens,
    forward,
    gaussian_log_prob,
    init_params,
    load_checkpoint,
    param_shapes,
    sample_action,
    save_checkpoint,
    validate_params,
)

SMALL = PolicyConfig(dof=3, layers=2, heads=3, width=12, head_hidden=10, action_bound=(0.05, 0.08, 0.1))


def random_obs(cfg, b, seed):
    rng = np.random.default_rng(seed)
    return Observation(rng.normal(size=(b, cfg.keypoint_width)), rng.normal(size=(b, cfg.dof, cfg.joint_width)))


def perturbed_params(cfg, seed, scale=0.1):
    """Random parameters away from the structured initial values."""
    rng = np.random.default_rng(seed + 1000)
    return {k: v + scale * rng.normal(size=v.shape) for k, v in init_params(cfg, seed).items()}


class TestConfig:
    def test_width_divisible(self):
        with pytest.raises(ValueError):
            PolicyConfig(width=10, heads=3)

    def test_bound_length(self):
        with pytest.raises(ValueError):
            PolicyConfig(dof=3, action_bound=(0.1, 0.1))

    def test_defaults(self):
        cfg = PolicyConfig()
        assert (cfg.layers, cfg.heads, cfg.width, cfg.ff) == (6, 3, 48, 192)

    def test_for_scene(self):
        s = scenes.drawer()
        cfg = PolicyConfig.for_scene(s, 0.1)
        assert cfg.dof == 4
        assert np.allclose(cfg.bound, s.step_bound)
        assert np.allclose(cfg.keypoint_center, s.guess)


class TestForward:
    def test_shapes_and_bound(self):
        cfg = PolicyConfig()
        out = forward(cfg, random_obs(cfg, 16, 0), perturbed_params(cfg, 0, 1.0))
        assert out.mean.shape == (16, 3) and out.value.shape == (16,) and out.log_std.shape == (3,)
        assert np.all(np.abs(out.mean) <= cfg.bound)

    @pytest.mark.parametrize("seed", [0, 1])
    def test_matches_straight_line_oracle(self, seed):
        cfg = SMALL.model_copy(update=dict(keypoint_center=(0.1, -0.2, 0.3), keypoint_scale=4.0))
        params = perturbed_params(cfg, seed, 0.3)
        obs = random_obs(cfg, 4, seed)
        out = forward(cfg, obs, params)
        for i in range(4):
            m, ls, v = transformer_forward_single(params, obs.keypoint[i], obs.joints[i], cfg.layers, cfg.heads, cfg.bound,
                                                  cfg.keypoint_center, cfg.keypoint_scale)
            assert np.max(np.abs(out.mean[i] - m)) < 1e-6
            assert abs(out.value[i] - v) < 1e-6
            assert np.max(np.abs(out.log_std - ls)) < 1e-6

    def test_deterministic(self):
        params = perturbed_params(SMALL, 3)
        obs = random_obs(SMALL, 8, 3)
        a, b = forward(SMALL, obs, params), forward(SMALL, obs, params)
        assert np.array_equal(a.mean, b.mean) and np.array_equal(a.value, b.value)

    def test_permutation_sensitive(self):
        params = perturbed_params(SMALL, 4, 0.5)
        obs = random_obs(SMALL, 2, 4)
        swapped = Observation(obs.keypoint, obs.joints[:, [1, 0, 2]])
        assert not np.array_equal(forward(SMALL, obs, params).mean, forward(SMALL, swapped, params).mean)

    def test_non_finite_fails_fast(self):
        params = perturbed_params(SMALL, 0)
        obs = random_obs(SMALL, 2, 0)
        obs.keypoint[0, 0] = np.nan
        with pytest.raises(NumericError):
            forward(SMALL, obs, params)

    def test_act_is_mean(self):
        params = perturbed_params(SMALL, 0)
        obs = random_obs(SMALL, 3, 0)
        assert np.array_equal(act(SMALL, params, obs), forward(SMALL, obs, params).mean)


class TestEmbedding:
    def test_length(self):
        x = embed_tokens(SMALL, random_obs(SMALL, 5, 0), init_params(SMALL, 0))
        assert x.shape == (5, 4, 12)

    def test_locality(self):
        params = perturbed_params(SMALL, 0)
        obs = random_obs(SMALL, 1, 0)
        other = Observation(obs.keypoint.copy(), obs.joints.copy())
        other.joints[0, 2] += 1.0  # joint 3 of 3
        diff = np.abs(embed_tokens(SMALL, obs, params) - embed_tokens(SMALL, other, params)).max(-1)[0]
        assert np.all(diff[:3] == 0) and diff[3] > 0

    def test_zero_obs_zero_embedding(self):
        params = init_params(SMALL, 0)
        params["embed.pos"] = np.zeros_like(params["embed.pos"])
        obs = Observation(np.zeros((2, 7)), np.zeros((2, 3, SMALL.joint_width)))
        assert np.all(embed_tokens(SMALL, obs, params) == 0)

    def test_layout_mismatch(self):
        with pytest.raises(ContractViolation):
            embed_tokens(SMALL, Observation(np.zeros((2, 7)), np.zeros((2, 4, SMALL.joint_width))), init_params(SMALL, 0))


def finite_difference_check(cfg, seed, h=1e-4):
    rng = np.random.default_rng(seed)
    params = perturbed_params(cfg, seed)
    obs = random_obs(cfg, 5, seed)
    cm, cl, cv = rng.normal(size=(5, cfg.dof)), rng.normal(size=cfg.dof), rng.normal(size=5)

    def loss(p):
        o = forward(cfg, obs, p)
        return float(np.sum(cm * o.mean) + np.sum(cl * o.log_std) + np.sum(cv * o.value))

    grads = backward(cfg, forward(cfg, obs, params, keep_cache=True), params, cm, cl, cv)
    worst = 0.0
    for name, v in params.items():
        for idx in np.ndindex(v.shape):
            old = v[idx]
            v[idx] = old + h
            lp = loss(params)
            v[idx] = old - h
            lm = loss(params)
            v[idx] = old
            fd = (lp - lm) / (2 * h)
            a = grads[name][idx]
            # the floor sits above central-difference roundoff (~eps * |L| / h), so
            # exactly-zero gradients (e.g. key biases under softmax) compare sanely
            worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), 1e-6))
    return worst


class TestBackward:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_finite_differences(self, seed):
        assert finite_difference_check(SMALL, seed) <= 1e-4

    def test_constant_loss_zero_grads(self):
        params = perturbed_params(SMALL, 0)
        g = backward(SMALL, forward(SMALL, random_obs(SMALL, 3, 0), params, keep_cache=True), params)
        assert all(np.all(v == 0) for v in g.values())

    def test_value_loss_leaves_actor_alone(self):
        params = perturbed_params(SMALL, 0)
        g = backward(SMALL, forward(SMALL, random_obs(SMALL, 3, 0), params, keep_cache=True), params, d_value=np.ones(3))
        for name in ("actor.w1", "actor.b1", "actor.w2", "actor.b2", "log_std"):
            assert np.all(g[name] == 0)
        assert np.any(g["critic.w2"] != 0)

    def test_requires_cache(self):
        params = init_params(SMALL, 0)
        with pytest.raises(ContractViolation):
            backward(SMALL, forward(SMALL, random_obs(SMALL, 1, 0), params), params)

    def test_gradients_cover_every_parameter(self):
        params = perturbed_params(SMALL, 0)
        g = backward(SMALL, forward(SMALL, random_obs(SMALL, 2, 0), params, keep_cache=True), params, np.ones((2, 3)))
        assert set(g) == set(params)
        assert all(g[k].shape == params[k].shape for k in params)


class TestSampling:
    def test_tiny_std_returns_mean(self):
        mean = np.array([[0.01, -0.02, 0.03]])
        a, _ = sample_action(mean, np.full(3, -10.0), 0)
        assert np.allclose(a, mean, atol=1e-3)

    def test_log_prob_at_mean(self):
        ls = np.array([-1.0, -2.0, 0.5])
        expected = -np.sum(ls + 0.5 * math.log(2 * math.pi))
        assert gaussian_log_prob(np.zeros(3), np.zeros(3), ls) == pytest.approx(expected, abs=1e-12)

    def test_empirical_std(self):
        ls = np.array([-1.0, -2.5, 0.3])
        a, _ = sample_action(np.zeros((10000, 3)), ls, 7)
        assert np.all(np.abs(a.std(0) / np.exp(ls) - 1) < 0.05)

    def test_clipped_after_sampling(self):
        mean = np.zeros((1000, 2))
        ls = np.zeros(2)
        a, logp = sample_action(mean, ls, 1, bound=np.array([0.1, 0.1]))
        assert np.all(np.abs(a) <= 0.1)
        raw, _ = sample_action(mean, ls, 1)
        assert np.array_equal(logp, gaussian_log_prob(raw, mean, ls))

    def test_seeded(self):
        m = np.zeros((4, 3))
        assert np.array_equal(sample_action(m, np.zeros(3), 9)[0], sample_action(m, np.zeros(3), 9)[0])


class TestParams:
    def test_init_deterministic(self):
        a, b = init_params(SMALL, 5), init_params(SMALL, 5)
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_shapes(self):
        p = init_params(SMALL, 0)
        assert {k: v.shape for k, v in p.items()} == param_shapes(SMALL)

    def test_validate(self):
        p = init_params(SMALL, 0)
        p["actor.w1"] = np.zeros((3, 3))
        with pytest.raises(ContractViolation):
            validate_params(SMALL, p)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        cfg = SMALL.model_copy(update=dict(keypoint_center=(0.4, 0.1, 0.2), keypoint_scale=10.0))
        params = perturbed_params(cfg, 0)
        path = tmp_path / "p.ckpt"
        save_checkpoint(path, cfg, params, {"seed": 3})
        cfg2, params2, meta = load_checkpoint(path)
        assert cfg2 == cfg and meta == {"seed": 3}
        for k in params:
            assert params2[k].tobytes() == params[k].tobytes()
        save_checkpoint(tmp_path / "q.ckpt", cfg2, params2, meta)
        assert (tmp_path / "q.ckpt").read_bytes() == path.read_bytes()

    def test_corruption_detected(self, tmp_path):
        path = tmp_path / "p.ckpt"
        save_checkpoint(path, SMALL, init_params(SMALL, 0))
        data = bytearray(path.read_bytes())
        data[len(data) // 2] ^= 0x01
        path.write_bytes(bytes(data))
        with pytest.raises(CheckpointError, match="integrity"):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "p.ckpt"
        save_checkpoint(path, SMALL, init_params(SMALL, 0))
        path.write_bytes(path.read_bytes()[:40])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "p.ckpt"
        path.write_bytes(b"NOTACKPT" + bytes(100))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_version_recorded(self, tmp_path):
        path = tmp_path / "p.ckpt"
        save_checkpoint(path, SMALL, init_params(SMALL, 0))
        import struct
        assert struct.unpack_from("<I", path.read_bytes(), 8)[0] == FORMAT_VERSION
