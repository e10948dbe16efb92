"""Group-relative policy optimization for both halves of the auto-encoder.

Both trainers share one recipe: sample ``G`` rollouts for a shared input
from a frozen snapshot of the policy, score them, normalize rewards within
the group, and ascend the clipped importance-ratio surrogate minus a KL
penalty to a reference snapshot taken at stage start.

* :class:`CaptionerGRPO` treats caption tokens as actions; the frozen
  decoder renders each caption and the reward compares it to the source.
* :class:`DecoderGRPO` treats SDE transitions as actions; captions are
  fixed and the decoder is the policy.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator

from .bench import reward
from .captioner import Captioner
from .decoder import PROJECTOR_PREFIX, FlowDecoder, SamplerConfig
from .errors import ConfigError, InputError, NumericError
from .numerics import Adam, ParameterStore, SeededRng, Tensor, gaussian_log_density, minimum, no_grad
from .validation import check_images


def advantages(rewards, std_floor: float = 1e-8) -> np.ndarray:
    """Group-normalized advantages: ``(R - mean) / max(std, std_floor)`` with population std."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise InputError("a group needs at least two rewards")
    if not np.all(np.isfinite(r)):
        raise InputError("rewards must be finite")
    if std_floor <= 0:
        raise InputError("std_floor must be positive")
    centered = r - r.mean()
    return centered / max(float(np.sqrt(np.mean(centered**2))), std_floor)


def clipped_surrogate(ratios, advantage, eps: float = 0.2):
    """Per-step ``min(r A, clip(r, 1-eps, 1+eps) A)``.

    Works on plain arrays or on differentiable tensors; ``advantage`` may be a
    scalar or broadcastable to ``ratios``.
    """
    if eps <= 0:
        raise InputError("clip eps must be positive")
    if isinstance(ratios, Tensor):
        if np.any(ratios.data <= 0):
            raise InputError("ratios must be positive")
        A = _f64(advantage)
        return minimum(ratios * A, ratios.clip(1 - eps, 1 + eps) * A)
    r = np.asarray(ratios, dtype=np.float64)
    if np.any(r <= 0):
        raise InputError("ratios must be positive")
    A = np.asarray(advantage, dtype=np.float64)
    return np.minimum(r * A, np.clip(r, 1 - eps, 1 + eps) * A)


def kl_penalty(logp_policy, logp_ref):
    """Mean k3 estimate ``exp(d) - d - 1`` with ``d = logp_ref - logp_policy``; always >= 0."""
    if isinstance(logp_policy, Tensor):
        d = _f64(logp_ref) - logp_policy
        return (d.exp() - d - 1.0).mean()
    p, q = np.asarray(logp_policy, dtype=np.float64), np.asarray(logp_ref, dtype=np.float64)
    if p.shape != q.shape:
        raise InputError("logp vectors differ in length")
    d = q - p
    return float(np.mean(np.expm1(d) - d)) if d.size else 0.0


def _k3(d: Tensor) -> Tensor:
    return d.exp() - d - 1.0


def _f64(a) -> Tensor:
    """Constant tensor kept in float64 (log-densities of 3072-dim Gaussians need the headroom)."""
    return Tensor(np.asarray(a, dtype=np.float64), dtype=np.float64)


@dataclass(frozen=True)
class GrpoConfig:
    group_size: int = 4
    clip_eps: float = 0.2
    beta: float = 0.0
    lr: float = 1e-6
    groups_per_update: int = 1
    std_floor: float = 1e-8
    refresh_every: int = 1
    temperature: float = 1.0
    max_len: int = 32
    reward_backbone: str = "overall"
    max_grad_norm: float | None = 1.0
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def __post_init__(self):
        if self.group_size < 2:
            raise ConfigError("group size must be >= 2")
        if self.clip_eps <= 0 or self.beta < 0 or self.std_floor <= 0 or self.lr <= 0:
            raise ConfigError("need clip_eps > 0, beta >= 0, std_floor > 0, lr > 0")
        if self.groups_per_update < 1 or self.refresh_every < 1:
            raise ConfigError("groups_per_update and refresh_every must be >= 1")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")


def stage2_config(**overrides) -> GrpoConfig:
    base = GrpoConfig(group_size=4, beta=0.0, lr=1e-6, sampler=SamplerConfig(steps=40, cfg_scale=1.0))
    return replace(base, **overrides)


def stage3_config(**overrides) -> GrpoConfig:
    base = GrpoConfig(group_size=8, beta=0.01, lr=1e-5,
                      sampler=SamplerConfig(steps=20, cfg_scale=1.0, mode="sde", noise_level=0.7))
    return replace(base, **overrides)


class PolicySnapshot:
    """Frozen copies of the policy: ``old`` (rollouts, refreshed) and ``ref`` (KL anchor, fixed)."""

    def __init__(self, store: ParameterStore):
        self.ref = self._frozen_copy(store)
        self.old = self._frozen_copy(store)
        self.refreshed_at = store.step

    @staticmethod
    def _frozen_copy(store: ParameterStore) -> ParameterStore:
        c = store.copy()
        c.freeze()
        return c

    def refresh(self, store: ParameterStore) -> None:
        self.old = self._frozen_copy(store)
        self.refreshed_at = store.step

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"ref.{k}": t.data for k, t in self.ref.items()}
        out.update({f"old.{k}": t.data for k, t in self.old.items()})
        out["old.refreshed_at"] = np.asarray(self.refreshed_at, dtype=np.float32)
        return out

    def load_state_arrays(self, arrays) -> None:
        self.ref.restore({k: arrays[f"ref.{k}"] for k in self.ref.keys()})
        self.old.restore({k: arrays[f"old.{k}"] for k in self.old.keys()})
        self.refreshed_at = int(np.asarray(arrays["old.refreshed_at"]).reshape(-1)[0])


class _GrpoBase(BaseEstimator):
    stage = 0

    def _setup(self, store: ParameterStore):
        self.snapshot_ = PolicySnapshot(store)
        self.optimizer_ = Adam(store, lr=self.config.lr, max_grad_norm=self.config.max_grad_norm)
        self.history_ = []
        self.step_ = 0

    def _pick_groups(self, n: int) -> np.ndarray:
        rng = SeededRng(self.random_state, (0x57, self.stage, self.step_))
        return rng.choice(n, min(self.config.groups_per_update, n), replace=False)

    def _apply(self, store: ParameterStore, objective: Tensor) -> float:
        loss = -objective
        if not np.isfinite(loss.item()):
            store.zero_grad()
            raise NumericError(f"non-finite stage-{self.stage} objective; update skipped")
        loss.backward()
        return self.optimizer_.step()

    def _finish(self, store: ParameterStore, metrics: dict, t0: float) -> dict:
        self.step_ += 1
        if self.step_ % self.config.refresh_every == 0:
            self.snapshot_.refresh(store)
        metrics = {"stage": self.stage, "step": self.step_, **metrics}
        if self.log_timing:
            metrics["wall_ms"] = round((time.perf_counter() - t0) * 1000.0, 3)
        self.history_.append(metrics)
        return metrics

    def fit(self, images, n_steps: int) -> "_GrpoBase":
        for _ in range(n_steps):
            self.partial_fit(images)
        return self

    def _trainer_state(self, store: ParameterStore) -> dict[str, np.ndarray]:
        out = {f"param.{k}": t.data for k, t in store.items()}
        out.update(self.optimizer_.state_arrays())
        out.update(self.snapshot_.state_arrays())
        out["store.step"] = np.asarray(store.step, dtype=np.float32)
        out["trainer.step"] = np.asarray(self.step_, dtype=np.float32)
        return out

    def _load_trainer_state(self, store: ParameterStore, arrays) -> None:
        store.restore({k: arrays[f"param.{k}"] for k in store.keys()})
        store.step = int(np.asarray(arrays["store.step"]).reshape(-1)[0])
        self.optimizer_.load_state_arrays(arrays)
        self.snapshot_.load_state_arrays(arrays)
        self.step_ = int(np.asarray(arrays["trainer.step"]).reshape(-1)[0])


class CaptionerGRPO(_GrpoBase):
    """Captioner as policy; frozen decoder turns captions into reconstructions.

    Parameters
    ----------
    captioner : fitted :class:`Captioner` (updated in place).
    decoder : fitted :class:`FlowDecoder` (never modified).
    config : :class:`GrpoConfig`; ``sampler`` is the reward-time ODE.
    random_state : int
    log_timing : bool
        Add ``wall_ms`` to each metrics record.
    """

    stage = 2

    def __init__(self, captioner: Captioner, decoder: FlowDecoder, config: GrpoConfig | None = None,
                 random_state: int = 0, log_timing: bool = True):
        self.captioner = captioner
        self.decoder = decoder
        self.config = config
        self.random_state = random_state
        self.log_timing = log_timing

    def initialize(self) -> "CaptionerGRPO":
        self.config = self.config or stage2_config()
        self.captioner.freeze_visual()
        self.decoder.params_.freeze()
        self._setup(self.captioner.params_)
        return self

    def rollout(self, image: np.ndarray, group: int) -> tuple[list, np.ndarray, np.ndarray]:
        """G captions from the rollout snapshot, their reconstructions and rewards."""
        cfg, G = self.config, self.config.group_size
        rngs = [SeededRng(self.random_state, (0x52, self.step_, group, i)) for i in range(G)]
        imgs = np.repeat(image[None], G, axis=0)
        trajs = self.captioner.sample_captions(imgs, cfg.temperature, rngs,
                                               max_len=min(cfg.max_len, self.captioner.max_len),
                                               params=self.snapshot_.old)
        cond = self.decoder.conditions(np.stack([t.hidden for t in trajs]))
        # one initial noise for the whole group: captions, not sampler luck, drive the advantage
        noise = SeededRng(self.random_state, (0x5E, self.step_, group)).normal((1, self.decoder.latent_dim))
        recon = self.decoder.ode_sample(cond, replace(cfg.sampler, mode="ode"), noise=noise)
        return trajs, recon, reward(imgs, recon, cfg.reward_backbone)

    def objective(self, image: np.ndarray, trajs, rewards) -> tuple[Tensor, dict]:
        """Clipped group objective (to maximize) and diagnostics for one group."""
        cfg = self.config
        G = len(trajs)
        A = advantages(rewards, cfg.std_floor)
        caps = [t.tokens for t in trajs]
        imgs = np.repeat(image[None], G, axis=0)
        new, mask = self.captioner.token_logprobs(imgs, caps, cfg.temperature)
        old = np.zeros(mask.shape)
        for i, t in enumerate(trajs):
            old[i, : len(t.logps)] = t.logps
        m = mask.astype(np.float64)
        inv_len = 1.0 / m.sum(axis=1, keepdims=True)
        ratio = ((new - _f64(old)) * _f64(m)).exp()
        surr = clipped_surrogate(ratio, A[:, None], cfg.clip_eps)
        objective = (surr * _f64(m * inv_len)).sum() * (1.0 / G)
        with no_grad():
            ref, _ = self.captioner.token_logprobs(imgs, caps, cfg.temperature, params=self.snapshot_.ref)
        kl = (_k3(_f64(ref.data * m) - new * _f64(m)) * _f64(m * inv_len)).sum() * (1.0 / G)
        if cfg.beta > 0:
            objective = objective - kl * cfg.beta
        r = ratio.data[mask]
        clipped = float(np.mean((r < 1 - cfg.clip_eps) | (r > 1 + cfg.clip_eps)))
        return objective, {"kl": kl.item(), "clip_fraction": clipped}

    def partial_fit(self, images) -> dict:
        """One GRPO update from freshly sampled groups; returns the metrics record."""
        if not hasattr(self, "snapshot_"):
            self.initialize()
        t0 = time.perf_counter()
        X = check_images(images)
        store = self.captioner.params_
        store.zero_grad()
        total, rewards, lens, kls, clips = None, [], [], [], []
        for g, idx in enumerate(self._pick_groups(len(X))):
            trajs, _, R = self.rollout(X[idx], g)
            obj, diag = self.objective(X[idx], trajs, R)
            total = obj if total is None else total + obj
            rewards.extend(R.tolist())
            lens.extend(len(t.tokens) for t in trajs)
            kls.append(diag["kl"])
            clips.append(diag["clip_fraction"])
        n_groups = len(kls)
        norm = self._apply(store, total * (1.0 / n_groups))
        return self._finish(store, {
            "mean_reward": float(np.mean(rewards)), "mean_caption_len": float(np.mean(lens)),
            "kl": float(np.mean(kls)), "clip_fraction": float(np.mean(clips)), "grad_norm": float(norm),
        }, t0)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return self._trainer_state(self.captioner.params_)

    def load_state_arrays(self, arrays) -> "CaptionerGRPO":
        if not hasattr(self, "snapshot_"):
            self.initialize()
        self._load_trainer_state(self.captioner.params_, arrays)
        return self


class DecoderGRPO(_GrpoBase):
    """Decoder as policy over SDE transitions; captions (conditions) are fixed.

    ``fit(images, n_steps, conditions=...)`` needs one precomputed condition
    per source image.
    """

    stage = 3

    def __init__(self, decoder: FlowDecoder, config: GrpoConfig | None = None, random_state: int = 0,
                 log_timing: bool = True):
        self.decoder = decoder
        self.config = config
        self.random_state = random_state
        self.log_timing = log_timing

    def initialize(self) -> "DecoderGRPO":
        self.config = self.config or stage3_config()
        s = self.config.sampler
        if s.mode != "sde" or s.noise_level <= 0:
            raise ConfigError("stage-3 rollouts need an SDE sampler with noise level > 0")
        self.decoder.params_.freeze([PROJECTOR_PREFIX])
        self._setup(self.decoder.params_)
        return self

    def rollout(self, image: np.ndarray, condition: np.ndarray, group: int):
        cfg, G = self.config, self.config.group_size
        c = np.repeat(np.asarray(condition, dtype=np.float64)[None], G, axis=0)
        rng = SeededRng(self.random_state, (0x53, self.step_, group))
        traj = self.decoder.sde_sample(c, cfg.sampler, rng=rng, params=self.snapshot_.old)
        recon = self.decoder.codec_.decode(traj.final)
        return traj, recon, reward(np.repeat(image[None], G, axis=0), recon, cfg.reward_backbone)

    def objective(self, traj, rewards) -> tuple[Tensor, dict]:
        cfg = self.config
        G, K = traj.states.shape[1], traj.n_stochastic
        A = advantages(rewards, cfg.std_floor)
        old = np.stack([
            gaussian_logps(traj.states[k + 1], traj.means[k], traj.variances[k]) for k in range(K)
        ], axis=1)
        new = self.decoder.trajectory_logprob(traj)
        ratio = (new - _f64(old)).exp()
        surr = clipped_surrogate(ratio, A[:, None], cfg.clip_eps)
        objective = surr.sum() * (1.0 / (G * K))
        with no_grad():
            ref = self.decoder.trajectory_logprob(traj, params=self.snapshot_.ref).data
        kl = _k3(_f64(ref) - new).sum() * (1.0 / (G * K))
        if cfg.beta > 0:
            objective = objective - kl * cfg.beta
        r = ratio.data
        clipped = float(np.mean((r < 1 - cfg.clip_eps) | (r > 1 + cfg.clip_eps)))
        return objective, {"kl": kl.item(), "clip_fraction": clipped}

    def partial_fit(self, images, conditions=None) -> dict:
        if not hasattr(self, "snapshot_"):
            self.initialize()
        if conditions is None:
            raise InputError("stage-3 needs one fixed condition per source image")
        t0 = time.perf_counter()
        X = check_images(images)
        C = np.asarray(conditions, dtype=np.float64)
        if len(C) != len(X):
            raise InputError("one condition per source image is required")
        store = self.decoder.params_
        store.zero_grad()
        total, rewards, kls, clips = None, [], [], []
        for g, idx in enumerate(self._pick_groups(len(X))):
            traj, _, R = self.rollout(X[idx], C[idx], g)
            obj, diag = self.objective(traj, R)
            total = obj if total is None else total + obj
            rewards.extend(R.tolist())
            kls.append(diag["kl"])
            clips.append(diag["clip_fraction"])
        norm = self._apply(store, total * (1.0 / len(kls)))
        return self._finish(store, {
            "mean_reward": float(np.mean(rewards)), "kl": float(np.mean(kls)),
            "clip_fraction": float(np.mean(clips)), "grad_norm": float(norm),
        }, t0)

    def fit(self, images, n_steps: int, conditions=None) -> "DecoderGRPO":
        for _ in range(n_steps):
            self.partial_fit(images, conditions)
        return self

    def state_arrays(self) -> dict[str, np.ndarray]:
        return self._trainer_state(self.decoder.params_)

    def load_state_arrays(self, arrays) -> "DecoderGRPO":
        if not hasattr(self, "snapshot_"):
            self.initialize()
        self._load_trainer_state(self.decoder.params_, arrays)
        return self


def gaussian_logps(x, mean, variance: float) -> np.ndarray:
    """Per-row isotropic Gaussian log-density of recorded transitions (float64)."""
    return gaussian_log_density(x, mean, variance, axis=-1).data
