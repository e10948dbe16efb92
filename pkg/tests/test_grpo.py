import numpy as np
import pytest

from unirecon.captioner import Captioner
from unirecon.decoder import FlowDecoder, SamplerConfig
from unirecon.errors import ConfigError, InputError
from unirecon.grpo import (
    CaptionerGRPO,
    DecoderGRPO,
    GrpoConfig,
    advantages,
    clipped_surrogate,
    kl_penalty,
    stage2_config,
    stage3_config,
)
from unirecon.numerics import SeededRng, Tensor, grad_check, no_grad
from unirecon.scene import build_dataset


def test_advantages_examples():
    np.testing.assert_allclose(advantages([1, 2, 3]), [-1.2247, 0, 1.2247], atol=5e-5)
    assert np.all(advantages([5, 5, 5, 5]) == 0)
    with pytest.raises(InputError):
        advantages([1.0, np.nan])
    with pytest.raises(InputError):
        advantages([1.0])


def test_advantages_moments():
    rng = SeededRng(0)
    for _ in range(1000):
        G = int(rng.integers(2, 16))
        r = rng.normal(G) * rng.uniform() * 10 + rng.normal(1)
        a = advantages(r)
        assert abs(a.mean()) < 1e-6
        if r.std() > 1e-8:
            assert abs(a.std() - 1) < 1e-6


def test_clipped_surrogate_examples():
    assert clipped_surrogate(1.0, 1.0, 0.2) == 1.0
    assert clipped_surrogate(2.0, 1.0, 0.2) == pytest.approx(1.2)
    assert clipped_surrogate(0.5, -1.0, 0.2) == pytest.approx(-0.8)
    with pytest.raises(InputError):
        clipped_surrogate(0.0, 1.0)


@pytest.mark.parametrize("r,A,expected", [(1.5, 1.0, 0.0), (0.5, -1.0, 0.0), (1.1, 1.0, 1.0), (0.9, -2.0, -2.0),
                                          (0.5, 1.0, 1.0), (1.5, -1.0, -1.0)])
def test_clipped_surrogate_gradient(r, A, expected):
    h = 1e-7
    fd = (clipped_surrogate(r + h, A) - clipped_surrogate(r - h, A)) / (2 * h)
    assert abs(fd - expected) < 1e-6
    t = Tensor(np.array([r]), requires_grad=True)
    clipped_surrogate(t, A).sum().backward()
    assert abs(t.grad[0] - expected) < 1e-6


def test_kl_penalty():
    lp = np.array([-1.0, -2.0, -0.5])
    assert kl_penalty(lp, lp) == 0.0
    assert kl_penalty(lp, lp + np.log(2)) == pytest.approx(1 - np.log(2), abs=1e-12)
    rng = SeededRng(1)
    for _ in range(100):
        assert kl_penalty(rng.normal(5) * 3, rng.normal(5) * 3) >= 0
    with pytest.raises(InputError):
        kl_penalty(lp, lp[:2])


def test_config_validation():
    with pytest.raises(ConfigError):
        GrpoConfig(group_size=1)
    with pytest.raises(ConfigError):
        GrpoConfig(clip_eps=0)
    assert stage2_config().group_size == 4 and stage2_config().beta == 0.0 and stage2_config().lr == 1e-6
    s3 = stage3_config()
    assert (s3.group_size, s3.beta, s3.sampler.steps, s3.sampler.mode) == (8, 0.01, 20, "sde")


@pytest.fixture(scope="module")
def world():
    ds = build_dataset(16, seed=4, n_eval=4)
    cap = Captioner(d_model=16, max_len=26, random_state=0).initialize()
    dec = FlowDecoder(hidden_dim=16, n_hidden=2, cond_dim=8, text_dim=16, random_state=0).initialize()
    return ds.images(), cap, dec


def _fresh(world):
    X, cap, dec = world
    c2 = Captioner(d_model=16, max_len=26, random_state=0).initialize()
    c2.params_.restore(cap.params_.snapshot())
    d2 = FlowDecoder(hidden_dim=16, n_hidden=2, cond_dim=8, text_dim=16, random_state=0).initialize()
    d2.params_.restore(dec.params_.snapshot())
    return X, c2, d2


def test_stage2_identity_ratio_and_zero_advantage(world):
    X, cap, dec = _fresh(world)
    cfg = stage2_config(lr=1e-3, sampler=SamplerConfig(steps=4, cfg_scale=5.0))
    tr = CaptionerGRPO(cap, dec, cfg, random_state=0).initialize()
    trajs, _, R = tr.rollout(X[0], 0)
    obj, diag = tr.objective(X[0], trajs, R)
    assert diag["clip_fraction"] == 0.0 and diag["kl"] == 0.0
    assert abs(obj.item()) < 1e-6  # ratios are 1, so the surrogate is the mean advantage
    # forced identical captions -> zero advantages -> no surrogate gradient
    same = [trajs[0]] * 4
    cap.params_.zero_grad()
    obj, _ = tr.objective(X[0], same, np.full(4, R[0]))
    obj.backward()
    assert all(not np.any(g) for g in cap.params_.grads().values())
    cap.params_.zero_grad()


def test_stage2_step_freezes_environment(world):
    X, cap, dec = _fresh(world)
    cfg = stage2_config(lr=1e-3, sampler=SamplerConfig(steps=4, cfg_scale=5.0), beta=1e-6)
    tr = CaptionerGRPO(cap, dec, cfg, random_state=1, log_timing=False)
    dec_before, patch_before, core_before = dec.params_.digest(), cap.params_.digest(["patch."]), cap.params_.digest()
    for _ in range(3):
        m = tr.partial_fit(X)
    assert set(m) == {"stage", "step", "mean_reward", "mean_caption_len", "kl", "clip_fraction", "grad_norm"}
    assert m["step"] == 3 and np.isfinite(m["kl"])
    assert dec.params_.digest() == dec_before
    assert cap.params_.digest(["patch."]) == patch_before
    assert cap.params_.digest() != core_before


def test_stage2_surrogate_gradcheck(world):
    X, cap, dec = _fresh(world)
    cfg = stage2_config(lr=1e-3, beta=0.1, sampler=SamplerConfig(steps=3, cfg_scale=2.0))
    tr = CaptionerGRPO(cap, dec, cfg, random_state=2).initialize()
    tr.partial_fit(X)  # move away from the snapshot so ratios differ from 1
    trajs, _, R = tr.rollout(X[1], 0)
    keys = ["head.w", "core.1.wv", "tok.emb"]
    err = grad_check(lambda: tr.objective(X[1], trajs, R)[0], cap.params_, keys=keys, max_per_key=10)
    assert err < 1e-4


def test_stage3_rules_and_identity(world):
    X, cap, dec = _fresh(world)
    with pytest.raises(ConfigError):
        DecoderGRPO(dec, stage3_config(sampler=SamplerConfig(steps=5, mode="sde", noise_level=0.0))).initialize()
    cfg = stage3_config(group_size=3, sampler=SamplerConfig(steps=4, cfg_scale=3.0, mode="sde", noise_level=0.7))
    tr = DecoderGRPO(dec, cfg, random_state=0).initialize()
    C = dec.conditions(cap.hidden_states([[0, 1]] * len(X)))
    traj, _, R = tr.rollout(X[0], C[0], 0)
    with no_grad():
        new = dec.trajectory_logprob(traj).data
        old = dec.trajectory_logprob(traj, params=tr.snapshot_.old).data
    assert np.all(np.abs(np.exp(new - old) - 1) <= 1e-5)
    obj, diag = tr.objective(traj, R)
    assert abs(obj.item()) < 1e-6 and diag["kl"] == 0.0


def test_stage3_step_and_gradcheck(world):
    X, cap, dec = _fresh(world)
    cfg = stage3_config(group_size=3, lr=1e-3, sampler=SamplerConfig(steps=4, cfg_scale=3.0, mode="sde"))
    tr = DecoderGRPO(dec, cfg, random_state=3, log_timing=False)
    C = dec.conditions(cap.hidden_states([[0, 1]] * len(X)))
    proj, cap_before = dec.params_.digest(["proj."]), cap.params_.digest()
    m = tr.partial_fit(X, C)
    assert m["stage"] == 3 and np.isfinite(m["kl"])
    assert dec.params_.digest(["proj."]) == proj and cap.params_.digest() == cap_before
    traj, _, R = tr.rollout(X[2], C[2], 0)
    keys = ["vel.out.b", "vel.h0.b", "vel.null"]
    assert grad_check(lambda: tr.objective(traj, R)[0], dec.params_, keys=keys, max_per_key=8) < 1e-4
    with pytest.raises(InputError):
        tr.partial_fit(X)


def test_trainer_resume_is_exact(world):
    X, cap, dec = _fresh(world)
    cfg = stage2_config(lr=1e-3, sampler=SamplerConfig(steps=3, cfg_scale=2.0), refresh_every=2)
    a = CaptionerGRPO(cap, dec, cfg, random_state=5, log_timing=False)
    a.fit(X, 2)
    state = a.state_arrays()
    a.fit(X, 2)

    X2, cap2, dec2 = _fresh(world)
    b = CaptionerGRPO(cap2, dec2, cfg, random_state=5, log_timing=False).load_state_arrays(state)
    b.fit(X2, 2)
    assert b.history_ == a.history_[2:]
    assert cap2.params_.digest() == cap.params_.digest()
