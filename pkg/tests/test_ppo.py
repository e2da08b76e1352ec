import json

import numpy as np
import pytest

from iamlab import autograd as ag
from iamlab import ppo as ppo_mod
from iamlab.autograd import finite_diff_check
from iamlab.envs.traffic import TrafficEnv
from iamlab.errors import ConfigError, ContractError, NumericError
from iamlab.policies import build_policy, evaluate_actions
from iamlab.ppo import (Adam, PpoConfig, Runner, clip_by_global_norm, collect_rollout, compute_gae,
                        evaluate_policy, global_norm, normalize_advantages, ppo_loss, ppo_update,
                        seed_streams, train)

SMALL = dict(workers=2, rollout=16, seq_len=8, minibatches=2, epochs=2, total_steps=64)
IAM_SPEC = {"variant": "iam", "selector": "manual", "hidden": 8, "fnn_widths": (16,)}
ENV_SPEC = {"name": "traffic", "horizon": 20}


def gae_brute(rewards, values, dones, bootstrap, gamma, lam):
    T = len(rewards)
    nxt = np.append(values[1:], bootstrap)
    delta = rewards + gamma * nxt * (1 - dones) - values
    adv = np.zeros(T)
    for t in range(T):
        coef = 1.0
        for k in range(t, T):
            adv[t] += coef * delta[k]
            if dones[k]:
                break
            coef *= gamma * lam
    return adv


class TestGae:
    def test_brute_force(self):
        for trial in range(50):
            r = np.random.default_rng(trial)
            T = int(r.integers(1, 65))
            rew, val = r.normal(size=T), r.normal(size=T)
            done = (r.random(T) < 0.1).astype(float)
            boot = r.normal()
            g, lam = r.uniform(0.8, 1.0), r.uniform(0.0, 1.0)
            adv, ret = compute_gae(rew[:, None], val[:, None], done[:, None], [boot], g, lam)
            np.testing.assert_allclose(adv[:, 0], gae_brute(rew, val, done, boot, g, lam),
                                       rtol=0, atol=1e-10)
            np.testing.assert_allclose(ret, adv + val[:, None], rtol=0, atol=1e-15)

    def test_lambda_zero_is_td_error(self, rng):
        rew, val = rng.normal(size=(10, 2)), rng.normal(size=(10, 2))
        done = np.zeros((10, 2))
        boot = rng.normal(size=2)
        adv, _ = compute_gae(rew, val, done, boot, 0.9, 0.0)
        nxt = np.vstack([val[1:], boot])
        np.testing.assert_allclose(adv, rew + 0.9 * nxt - val, rtol=0, atol=1e-14)

    def test_lambda_one_telescopes(self, rng):
        T, g = 12, 0.97
        rew, val, boot = rng.normal(size=T), rng.normal(size=T), rng.normal()
        adv, _ = compute_gae(rew[:, None], val[:, None], np.zeros((T, 1)), [boot], g, 1.0)
        for t in range(T):
            want = sum(g ** k * rew[t + k] for k in range(T - t)) + g ** (T - t) * boot - val[t]
            assert adv[t, 0] == pytest.approx(want, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            compute_gae(np.zeros((4, 1)), np.zeros((3, 1)), np.zeros((4, 1)), [0.0], 0.9, 0.9)

    def test_normalize(self, rng):
        a = normalize_advantages(rng.normal(3.0, 2.0, size=(16, 4)))
        assert abs(a.mean()) < 1e-12 and abs(a.std() - 1.0) < 1e-12
        assert np.array_equal(normalize_advantages(np.full(5, 2.0)), np.zeros(5))


class TestConfig:
    @pytest.mark.parametrize("kw", [{"gamma": 0.0}, {"gamma": 1.5}, {"lam": -0.1}, {"clip": 0.0},
                                    {"seq_len": 0}, {"rollout": 10, "seq_len": 8},
                                    {"minibatches": 1000}, {"lr": -1.0}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            PpoConfig(**kw)

    def test_num_updates(self):
        assert PpoConfig(**SMALL).num_updates == 2


def small_setup(seed=0, spec=IAM_SPEC, horizon=20, **kw):
    cfg = PpoConfig(**{**SMALL, **kw})
    streams = seed_streams(seed, cfg.workers)
    envs = [TrafficEnv(horizon=horizon, rng=r) for r in streams["envs"]]
    policy = build_policy(spec, envs[0], streams["init"])
    return cfg, streams, policy, Runner(envs, policy)


class TestRollout:
    def test_one_chunk_when_T_equals_L(self):
        cfg, streams, policy, runner = small_setup()
        buf = collect_rollout(policy, runner, 8, streams["act"], 8)
        assert buf.n_chunks == 1 and buf.obs.shape == (8, 2, 30)

    def test_state_zero_after_done(self):
        spec = {**IAM_SPEC, "selector": "static", "dset_size": 3}
        cfg, streams, policy, runner = small_setup(spec=spec, horizon=16)
        buf = collect_rollout(policy, runner, 48, streams["act"], 8)
        # horizon 16: episodes end at steps 15 and 31, so chunks 2 and 4 open fresh
        assert buf.dones[15].all() and buf.starts[16].all()
        for c, fresh in enumerate([True, False, True, False, True, False]):
            assert (not buf.chunk_states[c][0].any()) == fresh
        assert len(buf.episode_returns) == 3 * 2

    def test_replay_every_chunk(self):
        for spec in (IAM_SPEC, {"variant": "lstm", "hidden": 6, "fnn_widths": (8,)},
                     {"variant": "iam", "selector": "dynamic", "dset_size": 2, "hidden": 4,
                      "fnn_widths": (8,)}):
            cfg, streams, policy, runner = small_setup(spec=spec)
            buf = collect_rollout(policy, runner, 48, streams["act"], 8)
            for c in range(buf.n_chunks):
                ch = buf.chunk(c, [0, 1])
                ev = evaluate_actions(policy, ch["obs"], ch["actions"], ch["state"], ch["starts"], 8)
                assert np.array_equal(ev.logprobs.data, ch["logprobs"])
                assert np.array_equal(ev.values.data, ch["values"])

    def test_bad_length(self):
        cfg, streams, policy, runner = small_setup()
        with pytest.raises(ContractError):
            collect_rollout(policy, runner, 12, streams["act"], 8)


def minibatch(seed=0, spec=IAM_SPEC):
    cfg, streams, policy, runner = small_setup(seed, spec)
    buf = collect_rollout(policy, runner, 16, streams["act"], 8)
    adv, ret = compute_gae(buf.rewards, buf.values, buf.dones, buf.bootstrap, cfg.gamma, cfg.lam)
    buf.advantages, buf.returns = normalize_advantages(adv), ret
    return cfg, policy, buf, ppo_mod._gather(buf, [(0, 0), (1, 1), (0, 1)])


class TestLoss:
    def test_fresh_policy_surrogate(self):
        cfg, policy, buf, mb = minibatch()
        _, stats = ppo_loss(policy, mb, cfg)
        assert stats["policy_loss"] == pytest.approx(-mb["advantages"].mean(), abs=1e-14)
        assert stats["clip_frac"] == 0.0

    def test_zero_advantage(self):
        cfg, policy, buf, mb = minibatch()
        mb["advantages"] = np.zeros_like(mb["advantages"])
        loss, stats = ppo_loss(policy, mb, cfg)
        assert stats["policy_loss"] == 0.0
        want = cfg.vf_coef * stats["value_loss"] - cfg.ent_coef * stats["entropy"]
        assert float(loss.data) == pytest.approx(want, abs=1e-14)

    def test_gradients(self):
        cfg, policy, buf, mb = minibatch()
        # move away from rho = 1 so both clip branches are exercised off their kinks
        mb["logprobs"] = mb["logprobs"] + np.random.default_rng(0).uniform(-0.5, 0.5,
                                                                          mb["logprobs"].shape)
        assert finite_diff_check(lambda: ppo_loss(policy, mb, cfg)[0], policy.parameters(),
                                 max_coords=400, rng=np.random.default_rng(1)) < 1e-5

    def test_clip_inactive_matches_unclipped(self):
        cfg, policy, buf, mb = minibatch()
        mb["logprobs"] = mb["logprobs"] + np.random.default_rng(2).uniform(-0.1, 0.1,
                                                                          mb["logprobs"].shape)
        params = policy.parameters()

        def unclipped():
            ev = evaluate_actions(policy, mb["obs"], mb["actions"], mb["state"], mb["starts"], 8)
            ratio = ag.exp(ev.logprobs - mb["logprobs"])
            return -ag.mean(ratio * mb["advantages"])

        def clipped():
            ev = evaluate_actions(policy, mb["obs"], mb["actions"], mb["state"], mb["starts"], 8)
            ratio = ag.exp(ev.logprobs - mb["logprobs"])
            adv = mb["advantages"]
            return -ag.mean(ag.minimum(ratio * adv, ag.clip(ratio, 1 - cfg.clip, 1 + cfg.clip) * adv))

        g1, g2 = ag.backward(clipped(), params), ag.backward(unclipped(), params)
        for p in params:
            assert np.array_equal(g1[p], g2[p])

    def test_single_update_does_not_increase_surrogate(self):
        cfg, policy, buf, mb = minibatch()
        cfg.lr = 1e-4
        before, _ = ppo_loss(policy, mb, cfg)
        opt = Adam(policy.parameters(), cfg.lr, max_grad_norm=cfg.max_grad_norm)
        opt.step(ag.backward(before, opt.params))
        after, _ = ppo_loss(policy, mb, cfg)
        assert float(after.data) <= float(before.data)


class TestAdam:
    def test_zero_gradient(self, rng):
        p = ag.parameter(rng.normal(size=(3, 2)))
        start = p.data.copy()
        Adam([p], 1e-2).step([np.zeros((3, 2))])
        assert np.array_equal(p.data, start)

    def test_first_step_closed_form(self, rng):
        p = ag.parameter(rng.normal(size=5))
        start = p.data.copy()
        g = rng.normal(size=5)
        Adam([p], 1e-3).step([g])
        # bias-corrected moments after one step are exactly g and g**2
        np.testing.assert_allclose(p.data, start - 1e-3 * g / (np.abs(g) + 1e-8), rtol=0, atol=1e-15)

    def test_second_step(self, rng):
        p = ag.parameter(np.zeros(3))
        g1, g2 = rng.normal(size=3), rng.normal(size=3)
        opt = Adam([p], 0.1)
        opt.step([g1])
        opt.step([g2])
        m = (0.1 * 0.9 * g1 + 0.1 * g2) / (1 - 0.9 ** 2)
        v = (0.001 * 0.999 * g1 ** 2 + 0.001 * g2 ** 2) / (1 - 0.999 ** 2)
        first = -0.1 * g1 / (np.abs(g1) + 1e-8)
        np.testing.assert_allclose(p.data, first - 0.1 * m / (np.sqrt(v) + 1e-8), atol=1e-14)

    def test_clipping(self, rng):
        grads = [rng.normal(size=(4, 4)) * 10, rng.normal(size=3) * 10]
        clipped, norm = clip_by_global_norm(grads, 0.5)
        assert norm == pytest.approx(global_norm(grads))
        assert global_norm(clipped) == pytest.approx(0.5, rel=1e-12)
        small, _ = clip_by_global_norm([g * 1e-3 for g in grads], 100.0)
        assert all(np.array_equal(a, b * 1e-3) for a, b in zip(small, grads))

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            Adam([ag.parameter(np.zeros(3))]).step([np.zeros(4)])


class TestTrain:
    def test_deterministic_bytes(self, tmp_path):
        cfg = PpoConfig(**SMALL, seed=3)
        train(cfg, IAM_SPEC, ENV_SPEC, tmp_path / "a")
        train(cfg, IAM_SPEC, ENV_SPEC, tmp_path / "b")
        for name in ("metrics.jsonl", "ckpt_final.bin"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_seed_changes_run(self):
        a = train(PpoConfig(**SMALL, seed=0), IAM_SPEC, ENV_SPEC).metrics
        b = train(PpoConfig(**SMALL, seed=1), IAM_SPEC, ENV_SPEC).metrics
        assert a != b

    def test_zero_lr_keeps_untrained_policy(self):
        cfg = PpoConfig(**SMALL, lr=0.0, seed=4)
        res = train(cfg, IAM_SPEC, ENV_SPEC)
        streams = seed_streams(4, cfg.workers)
        fresh = build_policy(IAM_SPEC, TrafficEnv(rng=streams["envs"][0]), streams["init"])
        for k, v in fresh.state_dict().items():
            assert np.array_equal(res.policy.state_dict()[k], v)
        a = evaluate_policy(res.policy, ENV_SPEC, IAM_SPEC, episodes=8, seed=1)
        b = evaluate_policy(fresh, ENV_SPEC, IAM_SPEC, episodes=8, seed=1)
        assert np.array_equal(a, b)

    def test_metrics_stream(self, tmp_path):
        res = train(PpoConfig(**SMALL), {"variant": "fnn", "stack": 2, "fnn_widths": (8,)},
                    ENV_SPEC, tmp_path)
        lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 2 == len(res.metrics)
        rec = json.loads(lines[-1])
        for key in ("update", "env_steps", "mean_return", "std_return", "policy_loss",
                    "value_loss", "entropy", "grad_norm"):
            assert key in rec
        assert rec["env_steps"] == 64

    def test_nan_writes_diagnostic(self, tmp_path, monkeypatch):
        def boom(*args, **kwargs):
            raise NumericError("non-finite PPO loss")

        monkeypatch.setattr(ppo_mod, "ppo_update", boom)
        with pytest.raises(NumericError):
            train(PpoConfig(**SMALL), IAM_SPEC, ENV_SPEC, tmp_path)
        dump = json.loads((tmp_path / "diagnostic.json").read_text())
        assert dump["update"] == 1 and "param_norms" in dump

    def test_update_changes_parameters(self):
        cfg, streams, policy, runner = small_setup()
        before = policy.state_dict()
        buf = collect_rollout(policy, runner, 16, streams["act"], 8)
        opt = Adam(policy.parameters(), 1e-3, max_grad_norm=0.5)
        stats = ppo_update(policy, opt, buf, cfg, streams["shuffle"])
        assert opt.t == cfg.epochs * cfg.minibatches
        assert any(not np.array_equal(before[k], v) for k, v in policy.state_dict().items())
        assert np.isfinite(list(stats.values())).all()


def test_evaluate_policy_seeded():
    cfg, streams, policy, runner = small_setup()
    a = evaluate_policy(policy, ENV_SPEC, IAM_SPEC, episodes=5, seed=9)
    b = evaluate_policy(policy, ENV_SPEC, IAM_SPEC, episodes=5, seed=9)
    assert a.shape == (5,) and np.array_equal(a, b)
