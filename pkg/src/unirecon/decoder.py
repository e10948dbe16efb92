"""Condition-driven rectified-flow decoder: caption condition -> image.

Time runs from noise (t=0) to data (t=1): ``z_t = (1 - t) z_0 + t z_1``.
The velocity network is an MLP over ``[z_t, emb(t), c]``. By default the
MLP output ``D`` is read as a clean-image estimate and turned into a
velocity, ``v = (D - z_t) / max(1 - t, 0.05)``; a narrow MLP cannot carry
the full-rank ``z_t`` term itself. Sampling integrates on a uniform grid,
either deterministically (Euler) or with the score-corrected SDE whose
per-step Gaussian transitions are recorded for likelihood ratios.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
from sklearn.base import BaseEstimator

from .captioner import Projector
from .errors import DimensionError, DomainError, InputError, NumericError
from .numerics import (
    Adam,
    ParameterStore,
    SeededRng,
    Tensor,
    concat,
    gaussian_log_density,
    matmul,
    no_grad,
)
from .validation import IMAGE_SHAPE, check_images

T_EMBED_DIM = 16
DATA_HEAD_FLOOR = 0.05
SCORE_T_MAX = 1.0 - 1e-4
VELOCITY_PREFIX = "vel."
PROJECTOR_PREFIX = "proj."


class IdentityCodec:
    """Pixel space as the latent space: flatten on encode, reshape and clamp on decode."""

    latent_dim = int(np.prod(IMAGE_SHAPE))

    def encode(self, images) -> np.ndarray:
        x = check_images(images, allow_single=True)
        return x.reshape(x.shape[0], -1)

    def decode(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float32)
        return np.clip(z.reshape((-1,) + IMAGE_SHAPE), 0.0, 1.0)


def time_embedding(t: np.ndarray, dim: int = T_EMBED_DIM) -> np.ndarray:
    """Sinusoidal features of t in [0, 1], shape (B, dim)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    freqs = np.exp(np.linspace(0.0, np.log(1000.0), dim // 2))
    return np.concatenate([np.sin(t * freqs), np.cos(t * freqs)], axis=1)


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 40
    cfg_scale: float = 5.0
    mode: str = "ode"
    noise_level: float = 0.7
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise InputError("sampler steps must be >= 1")
        if self.mode not in ("ode", "sde"):
            raise InputError(f"unknown sampler mode {self.mode!r}")
        if self.noise_level < 0 or self.cfg_scale < 0:
            raise InputError("noise level and cfg scale must be non-negative")

    def sigma(self, t: float) -> float:
        return self.noise_level * (1.0 - t) if self.mode == "sde" else 0.0


@dataclass
class DenoiseTrajectory:
    """A batch of sampled chains on a shared grid.

    ``states[k]`` is x at ``times[k]``; ``means[k]`` and ``variances[k]`` give
    the Gaussian transition x_k -> x_{k+1} as sampled. Only the first
    ``steps - 1`` transitions are stochastic; the last one is deterministic
    and carries variance 0.
    """

    times: np.ndarray
    states: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    conditions: np.ndarray
    config: SamplerConfig

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    @property
    def n_stochastic(self) -> int:
        return len(self.times) - 2


VelocityFn = Callable[[Tensor, np.ndarray, Tensor], Tensor]


def rf_loss(velocity: VelocityFn, z1, conditions: Tensor, rng: SeededRng | None = None,
            p_drop: float = 0.0, null: Tensor | None = None, z0=None, t=None) -> Tensor:
    """Rectified-flow regression loss, mean over the batch of ``||v - (z1 - z0)||^2``.

    ``z0`` and ``t`` are drawn from ``rng`` unless given. With ``p_drop > 0``
    each condition is replaced by ``null`` with that probability.
    """
    z1 = np.asarray(z1, dtype=np.float64)
    if z1.ndim != 2:
        raise DimensionError("latents must be (batch, dim)")
    B, D = z1.shape
    conditions = conditions if isinstance(conditions, Tensor) else Tensor(conditions)
    if conditions.ndim != 2 or conditions.shape[0] != B:
        raise DimensionError(f"conditions {conditions.shape} do not match batch of {B}")
    if z0 is None:
        z0 = rng.normal((B, D))
    if t is None:
        t = rng.uniform(B)
    z0 = np.asarray(z0, dtype=np.float64).reshape(B, D)
    t = np.asarray(t, dtype=np.float64).reshape(B)
    if p_drop > 0:
        drop = (rng.uniform(B) < p_drop).astype(np.float64)[:, None]
        conditions = conditions * Tensor(1.0 - drop) + null * Tensor(drop)
    zt = (1.0 - t)[:, None] * z0 + t[:, None] * z1
    err = velocity(Tensor(zt), t, conditions) - Tensor(z1 - z0)
    return (err * err).sum() * (1.0 / B)


def cfg_velocity(velocity: VelocityFn, z: Tensor, t: np.ndarray, c: Tensor, null: Tensor,
                 cfg_scale: float) -> Tensor:
    """Classifier-free guidance: ``v_null + w (v_c - v_null)``.

    Conditional and null branches run as one stacked batch.
    """
    if cfg_scale < 0:
        raise InputError("cfg_scale must be >= 0")
    z = z if isinstance(z, Tensor) else Tensor(z)
    c = c if isinstance(c, Tensor) else Tensor(c)
    B = z.shape[0]
    if cfg_scale == 1.0:
        return velocity(z, t, c)
    nulls = null.reshape(1, -1) + Tensor(np.zeros((B, 1)))
    if cfg_scale == 0.0:
        return velocity(z, t, nulls)
    v = velocity(concat([z, z], axis=0), np.concatenate([t, t]), concat([c, nulls], axis=0))
    vc, vn = v[:B], v[B:]
    return vn + (vc - vn) * cfg_scale


def score_from_velocity(x, t: float, v):
    """Marginal score implied by the RF path with a Gaussian source: ``(t v - x) / (1 - t)``."""
    if t >= SCORE_T_MAX:
        raise DomainError(f"score undefined at t={t} (must be < {SCORE_T_MAX})")
    return (v * t - x) * (1.0 / (1.0 - t))


class FlowDecoder(BaseEstimator):
    """Velocity network plus projector, trained by rectified flow.

    ``fit(images, hidden)`` regresses velocities conditioned on
    ``projector(hidden)``, where ``hidden`` are the captioner's text-only
    final states for each image's caption. ``predict(hidden)`` samples images
    with the deterministic sampler.

    Parameters
    ----------
    hidden_dim, n_hidden : MLP width and number of hidden layers.
    cond_dim, text_dim : projector output / input sizes.
    p_drop : probability of training on the null condition.
    lr, n_steps, batch_size, grad_clip : stage-1 schedule.
    output : ``"data"`` (MLP estimates the clean image, converted to a
        velocity) or ``"velocity"`` (MLP output plus a learned ``s(t) z_t`` skip).
    """

    def __init__(self, hidden_dim: int = 256, n_hidden: int = 3, cond_dim: int = 64, text_dim: int = 64,
                 p_drop: float = 0.1, lr: float = 1e-3, n_steps: int = 5000, batch_size: int = 64,
                 grad_clip: float | None = 1.0, output: str = "data", input_scale: str = "t",
                 cond_skip: bool = True, t_power: float = 1.0, random_state: int = 0):
        self.hidden_dim = hidden_dim
        self.n_hidden = n_hidden
        self.cond_dim = cond_dim
        self.text_dim = text_dim
        self.p_drop = p_drop
        self.lr = lr
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.grad_clip = grad_clip
        self.output = output
        self.input_scale = input_scale
        self.cond_skip = cond_skip
        self.t_power = t_power
        self.random_state = random_state

    # -- construction ------------------------------------------------------
    def initialize(self) -> "FlowDecoder":
        if self.output not in ("data", "velocity"):
            raise InputError(f"unknown output head {self.output!r}")
        if self.input_scale not in ("t", "none"):
            raise InputError(f"unknown input scaling {self.input_scale!r}")
        self.codec_ = IdentityCodec()
        self.projector_ = Projector(self.text_dim, self.cond_dim, PROJECTOR_PREFIX)
        rng = SeededRng(self.random_state, (0xDE,))
        s = ParameterStore()
        self.projector_.init_params(s, rng.child(0))
        D, H = self.codec_.latent_dim, self.hidden_dim
        widths = [D + T_EMBED_DIM + self.cond_dim] + [H] * self.n_hidden
        for i in range(self.n_hidden):
            s.add(f"vel.h{i}.w", rng.normal((widths[i], widths[i + 1])) / np.sqrt(widths[i]))
            s.add(f"vel.h{i}.b", np.zeros(widths[i + 1]))
        s.add("vel.out.w", rng.normal((H, D)) / np.sqrt(H) * 0.1)
        s.add("vel.out.b", np.zeros(D))
        s.add("vel.null", rng.normal((self.cond_dim,)) * 0.1)
        if self.cond_skip:
            s.add("vel.cskip.w", np.zeros((self.cond_dim, D)))
        if self.output == "velocity":
            s.add("vel.skip.w", np.zeros((T_EMBED_DIM, 1)))
            # -1 is the exact z_t coefficient of the target velocity at t = 0
            s.add("vel.skip.b", -np.ones(1))
        self.params_ = s.seal()
        self.optimizer_ = Adam(s, lr=self.lr, max_grad_norm=self.grad_clip)
        self.loss_curve_ = []
        return self

    def _check_ready(self):
        if not hasattr(self, "params_"):
            raise InputError("FlowDecoder is not initialized; call initialize() or fit() first")

    @property
    def latent_dim(self) -> int:
        return self.codec_.latent_dim

    # -- network -----------------------------------------------------------
    def velocity_fn(self, params: ParameterStore | None = None) -> VelocityFn:
        P = params if params is not None else self.params_

        def v(z: Tensor, t: np.ndarray, c: Tensor) -> Tensor:
            temb = Tensor(time_embedding(t))
            zin = z * Tensor(np.asarray(t, dtype=np.float64)[:, None]) if self.input_scale == "t" else z
            h = concat([zin, temb, c], axis=1)
            for i in range(self.n_hidden):
                h = (matmul(h, P[f"vel.h{i}.w"]) + P[f"vel.h{i}.b"]).silu()
            out = matmul(h, P["vel.out.w"]) + P["vel.out.b"]
            if self.cond_skip:
                out = out + matmul(c, P["vel.cskip.w"])
            if self.output == "velocity":
                return out + (matmul(temb, P["vel.skip.w"]) + P["vel.skip.b"]) * z
            inv = 1.0 / np.maximum(1.0 - np.asarray(t, dtype=np.float64), DATA_HEAD_FLOOR)
            return (out - z) * Tensor(inv[:, None])

        return v

    def null_condition(self, params=None) -> Tensor:
        P = params if params is not None else self.params_
        return P["vel.null"]

    def condition(self, hidden, params=None) -> Tensor:
        """Projector output for captioner hidden states, (B, cond_dim)."""
        self._check_ready()
        P = params if params is not None else self.params_
        h = np.asarray(hidden, dtype=np.float64)
        if h.ndim == 1:
            h = h[None]
        if h.shape[1] != self.text_dim:
            raise DimensionError(f"hidden states must have width {self.text_dim}")
        return self.projector_(P, h)

    def conditions(self, hidden, params=None) -> np.ndarray:
        with no_grad():
            return self.condition(hidden, params).data.copy()

    def velocity(self, z, t, c, params=None) -> np.ndarray:
        """Unguided velocity as a plain array (no graph)."""
        self._check_ready()
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        c = np.atleast_2d(np.asarray(c, dtype=np.float64))
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (z.shape[0],))
        with no_grad():
            return self.velocity_fn(params)(Tensor(z), t, Tensor(c)).data

    # -- training ----------------------------------------------------------
    def loss(self, images, hidden, rng: SeededRng, params=None, p_drop=None) -> Tensor:
        self._check_ready()
        P = params if params is not None else self.params_
        z1 = self.codec_.encode(images)
        c = self.condition(hidden, P)
        if c.shape[0] != z1.shape[0]:
            raise DimensionError("images and conditions differ in batch size")
        p = self.p_drop if p_drop is None else p_drop
        t = None
        if self.t_power != 1.0:
            # density k (1 - t)^(k - 1): fewer near-clean samples, whose 1/(1-t)^2-scaled errors swamp the rest
            t = 1.0 - rng.uniform(z1.shape[0]) ** (1.0 / self.t_power)
        return rf_loss(self.velocity_fn(P), z1, c, rng, p, self.null_condition(P), t=t)

    def partial_fit_batch(self, images: np.ndarray, hidden: np.ndarray) -> float:
        """One optimizer step on a minibatch chosen from the step index."""
        self._check_ready()
        step = self.params_.step
        n = len(images)
        idx = SeededRng(self.random_state, (0xD1, step)).choice(n, min(self.batch_size, n), replace=False)
        self.params_.zero_grad()
        loss = self.loss(images[idx], hidden[idx], SeededRng(self.random_state, (0xD2, step)))
        if not np.isfinite(loss.item()):
            raise NumericError("non-finite rectified-flow loss")
        loss.backward()
        self.optimizer_.step()
        self.loss_curve_.append(loss.item())
        return loss.item()

    def fit(self, images, hidden, n_steps: int | None = None) -> "FlowDecoder":
        imgs = check_images(images)
        hidden = np.asarray(hidden, dtype=np.float32)
        if len(hidden) != len(imgs):
            raise DimensionError("one hidden state per image is required")
        if not hasattr(self, "params_"):
            self.initialize()
        for _ in range(self.n_steps if n_steps is None else n_steps):
            self.partial_fit_batch(imgs, hidden)
        return self

    # -- sampling ----------------------------------------------------------
    def _prepare(self, c, rng, noise):
        c = np.atleast_2d(np.asarray(c, dtype=np.float64))
        if c.shape[1] != self.cond_dim:
            raise DimensionError(f"condition width must be {self.cond_dim}")
        B = c.shape[0]
        if noise is None:
            noise = rng.normal((B, self.latent_dim))
        noise = np.broadcast_to(np.asarray(noise, dtype=np.float64), (B, self.latent_dim))
        return c, np.array(noise, dtype=np.float32)

    def _integrate(self, c, config: SamplerConfig, rng: SeededRng, params, noise, record: bool):
        P = params if params is not None else self.params_
        c, x = self._prepare(c, rng, noise)
        K = config.steps
        grid = np.linspace(0.0, 1.0, K + 1)
        v_fn, null, ct = self.velocity_fn(P), self.null_condition(P), Tensor(c)
        states, means, variances = [x], [], []
        with no_grad():
            for k in range(K):
                t, dt = float(grid[k]), float(grid[k + 1] - grid[k])
                tb = np.full(x.shape[0], t)
                xt = Tensor(x)
                u = cfg_velocity(v_fn, xt, tb, ct, null, config.cfg_scale)
                sigma = config.sigma(t) if k < K - 1 else 0.0
                if config.mode == "sde" and k < K - 1:
                    u = u + score_from_velocity(xt, t, u) * (0.5 * sigma * sigma)
                mean = (xt + u * dt).data
                if config.mode == "sde" and k < K - 1:
                    x = (mean + sigma * np.sqrt(dt) * rng.normal(x.shape)).astype(mean.dtype)
                else:
                    x = mean
                if not np.all(np.isfinite(x)):
                    raise NumericError(f"non-finite sampler state at step {k}")
                if record:
                    states.append(x)
                    means.append(mean)
                    variances.append(sigma * sigma * dt)
        if not record:
            return x
        return DenoiseTrajectory(grid, np.stack(states), np.stack(means), np.asarray(variances), c, config)

    def ode_sample(self, c, config: SamplerConfig | None = None, rng: SeededRng | None = None,
                   params=None, noise=None, decode: bool = True, trajectory: bool = False):
        """Deterministic Euler integration; returns clamped images (or raw latents).

        With ``trajectory`` the full state chain is returned instead.
        """
        self._check_ready()
        config = replace(config or SamplerConfig(), mode="ode")
        rng = rng or SeededRng(config.seed, (0x5DE,))
        out = self._integrate(c, config, rng, params, noise, record=trajectory)
        if trajectory:
            return out
        return self.codec_.decode(out) if decode else out

    def sde_sample(self, c, config: SamplerConfig, rng: SeededRng | None = None, params=None,
                   noise=None) -> DenoiseTrajectory:
        """Stochastic sampling that records each Gaussian transition."""
        self._check_ready()
        config = replace(config, mode="sde")
        rng = rng or SeededRng(config.seed, (0x5DE,))
        return self._integrate(c, config, rng, params, noise, record=True)

    def trajectory_logprob(self, traj: DenoiseTrajectory, params=None, config: SamplerConfig | None = None) -> Tensor:
        """Log-density of each recorded stochastic transition under ``params``, (B, steps-1)."""
        self._check_ready()
        if config is not None and config != traj.config:
            raise InputError("trajectory was sampled with a different sampler config")
        cfg = traj.config
        if cfg.mode != "sde":
            raise InputError("trajectory_logprob needs an SDE trajectory")
        P = params if params is not None else self.params_
        v_fn, null, ct = self.velocity_fn(P), self.null_condition(P), Tensor(traj.conditions)
        B = traj.states.shape[1]
        cols = []
        for k in range(traj.n_stochastic):
            t, dt = float(traj.times[k]), float(traj.times[k + 1] - traj.times[k])
            xt = Tensor(traj.states[k])
            u = cfg_velocity(v_fn, xt, np.full(B, t), ct, null, cfg.cfg_scale)
            sigma = cfg.sigma(t)
            u = u + score_from_velocity(xt, t, u) * (0.5 * sigma * sigma)
            mean = xt + u * dt
            cols.append(gaussian_log_density(traj.states[k + 1], mean, traj.variances[k], axis=-1).reshape(B, 1))
        if not cols:
            return Tensor(np.zeros((B, 0)))
        return concat(cols, axis=1)

    def predict(self, hidden, config: SamplerConfig | None = None) -> np.ndarray:
        return self.ode_sample(self.conditions(hidden), config)

    # -- persistence -------------------------------------------------------
    def state_arrays(self, with_optimizer: bool = True) -> dict[str, np.ndarray]:
        self._check_ready()
        out = {f"param.{k}": t.data for k, t in self.params_.items()}
        if with_optimizer:
            out.update(self.optimizer_.state_arrays())
        out["store.step"] = np.asarray(self.params_.step, dtype=np.float32)
        return out

    def load_state_arrays(self, arrays) -> "FlowDecoder":
        if not hasattr(self, "params_"):
            self.initialize()
        self.params_.restore({k: arrays[f"param.{k}"] for k in self.params_.keys()})
        self.params_.step = int(np.asarray(arrays.get("store.step", 0)).reshape(-1)[0])
        self.optimizer_.load_state_arrays(arrays)
        return self
