"""Autoregressive caption policy with a visual patch prefix.

:class:`Captioner` is the image-to-text half of the auto-encoder. It is a
small pre-LN transformer over ``[16 patch embeddings] + [caption tokens]``;
patches attend to each other, tokens attend to every patch and to earlier
tokens. Without an image it runs in text-only mode, and the final-layer
hidden state at the last caption position (``h_T``) is what the projector
turns into a decoder condition.

All network functions take the :class:`ParameterStore` explicitly so the
same code evaluates the live policy, the rollout snapshot and the
reference snapshot.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .errors import InputError, NumericError
from .numerics import (
    MASK_VALUE,
    Adam,
    ParameterStore,
    SeededRng,
    Tensor,
    concat,
    embedding,
    layer_norm,
    log_softmax,
    matmul,
    no_grad,
    softmax,
)
from .scene import BOS, CELL, COLORS, EOS, GRID, SHAPES, SIZES, VOCAB_SIZE, canonical_caption, parse_caption, sample_scene
from .validation import check_consistent_length, check_images, check_token_batch, check_tokens, pad_tokens

N_PATCHES = GRID * GRID
PATCH_DIM = CELL * CELL * 3
VISUAL_PREFIX = "patch."
SUMMARY_PREFIX = "sum."
# per cell: class 0 is "empty", then the attribute values
SUMMARY_GROUPS = (("shape", SHAPES), ("color", COLORS), ("size", SIZES))
SUMMARY_WIDTH = sum(len(v) + 1 for _, v in SUMMARY_GROUPS)


def patchify(images: np.ndarray) -> np.ndarray:
    """(B, 32, 32, 3) -> (B, 16, 192), row-major over 8x8 patches."""
    B = images.shape[0]
    x = images.reshape(B, GRID, CELL, GRID, CELL, 3).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, N_PATCHES, PATCH_DIM)


@dataclass
class CaptionTrajectory:
    """One sampled caption: tokens (with BOS), per-token log-probs, and h_T."""

    tokens: list[int]
    logps: np.ndarray
    hidden: np.ndarray
    truncated: bool = False

    def __len__(self):
        return len(self.tokens)

    @property
    def n_generated(self) -> int:
        return len(self.tokens) - 1


class Projector:
    """Two affine layers with a SiLU between: hidden state -> decoder condition.

    Parameters live under ``prefix`` in whichever store is passed in (the
    decoder's, since the projector trains with the decoder).
    """

    def __init__(self, d_in: int = 64, d_out: int = 64, prefix: str = "proj."):
        self.d_in = d_in
        self.d_out = d_out
        self.prefix = prefix

    def init_params(self, store: ParameterStore, rng: SeededRng) -> None:
        p = self.prefix
        store.add(p + "w1", rng.normal((self.d_in, self.d_out)) / np.sqrt(self.d_in))
        store.add(p + "b1", np.zeros(self.d_out))
        store.add(p + "w2", rng.normal((self.d_out, self.d_out)) / np.sqrt(self.d_out))
        store.add(p + "b2", np.zeros(self.d_out))

    def __call__(self, store: ParameterStore, h) -> Tensor:
        p = self.prefix
        h = h if isinstance(h, Tensor) else Tensor(h)
        z = (matmul(h, store[p + "w1"]) + store[p + "b1"]).silu()
        return matmul(z, store[p + "w2"]) + store[p + "b2"]


def summary_targets(captions) -> np.ndarray:
    """(B, cells, groups) class ids of each caption's parsed content; 0 marks an empty cell."""
    out = np.zeros((len(captions), GRID * GRID, len(SUMMARY_GROUPS)), dtype=np.int64)
    for i, c in enumerate(captions):
        for o in parse_caption(c).scene.objects:
            cell = o.cell[0] * GRID + o.cell[1]
            for g, (attr, values) in enumerate(SUMMARY_GROUPS):
                out[i, cell, g] = 1 + values.index(getattr(o, attr))
    return out


class Captioner(BaseEstimator):
    """Image captioning policy over the scene vocabulary.

    Parameters
    ----------
    d_model : int
        Width of embeddings and of the sequence core.
    n_layers : int
        Number of transformer blocks (single-head attention each).
    max_len : int
        Longest caption, BOS included.
    lr, n_steps, batch_size, grad_clip
        Supervised pretraining schedule used by :meth:`fit`.
    text_only_fraction : float
        Share of each pretraining batch trained without the image prefix.
    summary_weight : float
        Weight of the auxiliary pretraining loss that asks the text-only
        final state to predict the caption's parsed content (per cell:
        shape, colour, size or empty). A small language model has no other
        reason to summarize the caption in that state, and the decoder is
        conditioned on it. 0 disables the head's loss.
    summary_fresh : bool
        Train the summary head on captions of freshly sampled scenes
        instead of the minibatch captions.
    random_state : int
        Seed for initialization and minibatch order.
    """

    def __init__(self, d_model: int = 64, n_layers: int = 2, max_len: int = 32, lr: float = 3e-3,
                 n_steps: int = 2000, batch_size: int = 32, grad_clip: float | None = 1.0,
                 text_only_fraction: float = 0.0, summary_weight: float = 0.0,
                 summary_fresh: bool = True, random_state: int = 0):
        self.d_model = d_model
        self.n_layers = n_layers
        self.max_len = max_len
        self.lr = lr
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.grad_clip = grad_clip
        self.text_only_fraction = text_only_fraction
        self.summary_weight = summary_weight
        self.summary_fresh = summary_fresh
        self.random_state = random_state

    # -- construction ------------------------------------------------------
    def initialize(self) -> "Captioner":
        if self.max_len < 2:
            raise InputError("max_len must be at least 2")
        rng = SeededRng(self.random_state, (0xCA,))
        d, V = self.d_model, VOCAB_SIZE
        s = ParameterStore()
        s.add("patch.w", rng.normal((PATCH_DIM, d)) / np.sqrt(PATCH_DIM))
        s.add("patch.b", np.zeros(d))
        s.add("patch.pos", rng.normal((N_PATCHES, d)) * 0.1)
        s.add("tok.emb", rng.normal((V, d)) * 0.1)
        s.add("tok.pos", rng.normal((self.max_len, d)) * 0.1)
        for i in range(self.n_layers):
            b = f"core.{i}."
            for ln in ("ln1", "ln2"):
                s.add(b + ln + ".g", np.ones(d))
                s.add(b + ln + ".b", np.zeros(d))
            for w in ("wq", "wk", "wv"):
                s.add(b + w, rng.normal((d, d)) / np.sqrt(d))
            s.add(b + "wo", rng.normal((d, d)) / np.sqrt(d) / np.sqrt(2 * self.n_layers))
            s.add(b + "w1", rng.normal((d, 4 * d)) / np.sqrt(d))
            s.add(b + "b1", np.zeros(4 * d))
            s.add(b + "w2", rng.normal((4 * d, d)) / np.sqrt(4 * d) / np.sqrt(2 * self.n_layers))
            s.add(b + "b2", np.zeros(d))
        s.add("core.lnf.g", np.ones(d))
        s.add("core.lnf.b", np.zeros(d))
        s.add("head.w", rng.normal((d, V)) * 0.02)
        s.add("head.b", np.zeros(V))
        s.add(SUMMARY_PREFIX + "w", rng.normal((d, GRID * GRID * SUMMARY_WIDTH)) * 0.02)
        s.add(SUMMARY_PREFIX + "b", np.zeros(GRID * GRID * SUMMARY_WIDTH))
        self.params_ = s.seal()
        self.optimizer_ = Adam(s, lr=self.lr, max_grad_norm=self.grad_clip)
        self.loss_curve_ = []
        return self

    def _check_ready(self):
        if not hasattr(self, "params_"):
            raise InputError("Captioner is not initialized; call initialize() or fit() first")

    def freeze_visual(self) -> None:
        """Stop gradient updates to the patch embedder (RL stages)."""
        self._check_ready()
        self.params_.freeze([VISUAL_PREFIX])

    # -- network ------------------------------------------------------------
    @staticmethod
    def _mask(n_prefix: int, n_tok: int) -> np.ndarray:
        n = n_prefix + n_tok
        allowed = np.zeros((n, n), dtype=bool)
        allowed[:, :n_prefix] = True
        allowed[n_prefix:, n_prefix:] = np.tril(np.ones((n_tok, n_tok), dtype=bool))
        if n_prefix:
            allowed[:n_prefix, n_prefix:] = False
        return np.where(allowed, 0.0, MASK_VALUE)

    def _network(self, P: ParameterStore, images: np.ndarray | None, ids: np.ndarray):
        """Return (hidden, logits) over token positions, each (B, L, .)."""
        B, L = ids.shape
        if L > self.max_len:
            raise InputError(f"caption longer than max_len={self.max_len}")
        x = embedding(P["tok.emb"], ids) + P["tok.pos"][:L]
        n_prefix = 0
        if images is not None:
            v = matmul(Tensor(patchify(images)), P["patch.w"]) + P["patch.b"] + P["patch.pos"]
            x = concat([v, x], axis=1)
            n_prefix = N_PATCHES
        mask = Tensor(self._mask(n_prefix, L), dtype=x.dtype)
        scale = 1.0 / np.sqrt(self.d_model)
        for i in range(self.n_layers):
            b = f"core.{i}."
            h = layer_norm(x, P[b + "ln1.g"], P[b + "ln1.b"])
            q, k, v = matmul(h, P[b + "wq"]), matmul(h, P[b + "wk"]), matmul(h, P[b + "wv"])
            att = softmax(matmul(q, k.swapaxes(-1, -2)) * scale + mask)
            x = x + matmul(matmul(att, v), P[b + "wo"])
            h = layer_norm(x, P[b + "ln2.g"], P[b + "ln2.b"])
            x = x + matmul((matmul(h, P[b + "w1"]) + P[b + "b1"]).gelu(), P[b + "w2"]) + P[b + "b2"]
        x = layer_norm(x, P["core.lnf.g"], P["core.lnf.b"])
        if n_prefix:
            x = x[:, n_prefix:, :]
        logits = matmul(x, P["head.w"]) + P["head.b"]
        return x, logits

    def _prep(self, images, captions, require_image=False):
        caps = check_token_batch(captions)
        imgs = None
        if images is not None:
            imgs = check_images(images, allow_single=True)
            check_consistent_length(imgs, caps)
        elif require_image:
            raise InputError("an image is required in captioning mode")
        ids, lengths = pad_tokens(caps, EOS)
        return imgs, ids, lengths

    # -- public model API ---------------------------------------------------
    def forward_logits(self, image, prefix_tokens) -> np.ndarray:
        """Next-token logits (positions x vocab) for one prefix, with or without an image."""
        self._check_ready()
        toks = check_tokens(prefix_tokens)
        imgs = None if image is None else check_images(image, allow_single=True)
        with no_grad():
            _, logits = self._network(self.params_, imgs, np.asarray([toks]))
        return logits.data[0]

    def token_logprobs(self, images, captions, temperature: float = 1.0, params=None):
        """Teacher-forced log-probabilities of ``captions[:, 1:]``.

        Returns ``(logps, mask)``: a (B, L-1) Tensor (differentiable w.r.t.
        ``params``) and a boolean mask of real (non-padding) tokens.
        """
        self._check_ready()
        P = params if params is not None else self.params_
        imgs, ids, lengths = self._prep(images, captions)
        _, logits = self._network(P, imgs, ids[:, :-1])
        lp = log_softmax(logits, temperature=temperature)
        B, T = ids.shape[0], ids.shape[1] - 1
        bi, ti = np.meshgrid(np.arange(B), np.arange(T), indexing="ij")
        picked = lp[bi, ti, ids[:, 1:]]
        mask = ti < (lengths[:, None] - 1)
        return picked, mask

    def caption_logprob(self, image, tokens, temperature: float = 1.0) -> np.ndarray:
        with no_grad():
            lp, mask = self.token_logprobs(image, [tokens], temperature)
        return lp.data[0][mask[0]].astype(np.float64)

    def hidden_states(self, captions, params=None) -> np.ndarray:
        """Text-only final-layer state at the last position of each caption, (B, d)."""
        self._check_ready()
        P = params if params is not None else self.params_
        _, ids, lengths = self._prep(None, captions)
        with no_grad():
            hidden, _ = self._network(P, None, ids)
        return hidden.data[np.arange(len(lengths)), lengths - 1].copy()

    def condition_from_text(self, tokens, projector: Projector, decoder_params: ParameterStore) -> np.ndarray:
        h = self.hidden_states([check_tokens(tokens)])
        with no_grad():
            return projector(decoder_params, h).data[0].copy()

    def sample_captions(self, images, temperature: float = 1.0, rngs=None, max_len: int | None = None,
                        greedy: bool = False, params=None) -> list[CaptionTrajectory]:
        """Ancestral sampling, one independent rng stream per image.

        Sampling stops at EOS or ``max_len`` tokens (truncation is recorded).
        ``greedy`` takes the argmax instead and records its log-probs at
        temperature 1.
        """
        self._check_ready()
        P = params if params is not None else self.params_
        imgs = check_images(images, allow_single=True)
        B = imgs.shape[0]
        max_len = max_len or self.max_len
        if max_len < 2 or max_len > self.max_len:
            raise InputError(f"max_len must be in [2, {self.max_len}]")
        if not greedy:
            if temperature <= 0:
                raise InputError("temperature must be positive")
            if rngs is None or len(rngs) != B:
                raise InputError("sampling needs one rng per image")
        temp = 1.0 if greedy else float(temperature)
        ids = np.full((B, 1), BOS, dtype=np.int64)
        logps = [[] for _ in range(B)]
        done = np.zeros(B, dtype=bool)
        with no_grad():
            while ids.shape[1] < max_len and not done.all():
                _, logits = self._network(P, imgs, ids)
                last = log_softmax(logits[:, -1, :], temperature=temp).data.astype(np.float64)
                nxt = np.full(B, EOS, dtype=np.int64)
                for b in range(B):
                    if done[b]:
                        continue
                    if greedy:
                        tok = int(np.argmax(last[b]))
                    else:
                        cdf = np.cumsum(np.exp(last[b]))
                        u = float(rngs[b].uniform()) * cdf[-1]
                        tok = min(int(np.searchsorted(cdf, u, side="right")), VOCAB_SIZE - 1)
                    nxt[b] = tok
                    logps[b].append(last[b, tok])
                    if tok == EOS:
                        done[b] = True
                ids = np.concatenate([ids, nxt[:, None]], axis=1)
        captions = []
        for b in range(B):
            n = len(logps[b]) + 1
            captions.append(ids[b, :n].tolist())
        hidden = self.hidden_states(captions, params=P)
        return [CaptionTrajectory(c, np.asarray(lp, dtype=np.float64), hidden[i], truncated=c[-1] != EOS)
                for i, (c, lp) in enumerate(zip(captions, logps))]

    def sample_caption(self, image, temperature: float, max_len: int, rng: SeededRng) -> CaptionTrajectory:
        return self.sample_captions(image, temperature, [rng], max_len=max_len)[0]

    def predict(self, images) -> list[list[int]]:
        """Greedy captions for a batch of images."""
        return [t.tokens for t in self.sample_captions(images, greedy=True)]

    # -- supervised pretraining -----------------------------------------------
    def cross_entropy(self, images, captions, params=None) -> Tensor:
        """Mean next-token cross-entropy over real caption tokens."""
        lp, mask = self.token_logprobs(images, captions, params=params)
        return -(lp * Tensor(mask.astype(np.float32))).sum() * (1.0 / mask.sum())

    def summary_loss(self, captions, params=None) -> Tensor:
        """Per-cell cross-entropy of the summary head on the text-only final state."""
        self._check_ready()
        P = params if params is not None else self.params_
        _, ids, lengths = self._prep(None, captions)
        hidden, _ = self._network(P, None, ids)
        B = len(lengths)
        h = hidden[np.arange(B), lengths - 1]
        logits = (matmul(h, P[SUMMARY_PREFIX + "w"]) + P[SUMMARY_PREFIX + "b"]).reshape(B, GRID * GRID, SUMMARY_WIDTH)
        targets = summary_targets(captions)
        total, start = None, 0
        bi, ci = np.meshgrid(np.arange(B), np.arange(GRID * GRID), indexing="ij")
        for g, (_, values) in enumerate(SUMMARY_GROUPS):
            lp = log_softmax(logits[:, :, start:start + len(values) + 1])
            nll = -lp[bi, ci, targets[:, :, g]].sum() * (1.0 / (B * GRID * GRID))
            total = nll if total is None else total + nll
            start += len(values) + 1
        return total

    def pretrain_loss(self, images, captions, n_text: int = 0, summary_captions=None) -> Tensor:
        """Next-token loss with the first ``n_text`` examples text-only, plus the weighted summary loss.

        The summary loss uses ``summary_captions`` when given, else ``captions``.
        """
        n = len(captions)
        total = None
        if n_text < n:
            total = self.cross_entropy(images[n_text:], captions[n_text:]) * ((n - n_text) / n)
        if n_text:
            text = self.cross_entropy(None, captions[:n_text]) * (n_text / n)
            total = text if total is None else total + text
        if self.summary_weight > 0:
            sc = captions if summary_captions is None else summary_captions
            total = total + self.summary_loss(sc) * self.summary_weight
        return total

    def pretrain_step(self, images, captions, n_text: int = 0, summary_captions=None) -> float:
        self._check_ready()
        self.params_.zero_grad()
        loss = self.pretrain_loss(images, captions, n_text, summary_captions)
        if not np.isfinite(loss.item()):
            raise NumericError("non-finite pretraining loss")
        loss.backward()
        self.optimizer_.step()
        self.loss_curve_.append(loss.item())
        return loss.item()

    def fit(self, images, captions, n_steps: int | None = None) -> "Captioner":
        """Supervised next-token training on (image, caption) pairs.

        Continues from the current parameters when already initialized.
        """
        imgs = check_images(images)
        caps = check_token_batch(captions)
        check_consistent_length(imgs, caps)
        if not hasattr(self, "params_"):
            self.initialize()
        steps = self.n_steps if n_steps is None else n_steps
        for _ in range(steps):
            self.partial_fit_batch(imgs, caps)
        return self

    def partial_fit_batch(self, imgs: np.ndarray, caps: list[list[int]]) -> float:
        """One pretraining step on a minibatch drawn deterministically from the step index."""
        rng = SeededRng(self.random_state, (0xB7, self.params_.step))
        n = len(caps)
        idx = rng.choice(n, min(self.batch_size, n), replace=False)
        batch_caps = [caps[i] for i in idx]
        n_text = int(round(self.text_only_fraction * len(idx)))
        extra = None
        if self.summary_weight > 0 and self.summary_fresh:
            # caption text is free to produce; fresh scenes keep the head from memorizing the training set
            srng = SeededRng(self.random_state, (0xB8, self.params_.step))
            extra = [canonical_caption(sample_scene(srng)) for _ in range(len(idx))]
        return self.pretrain_step(imgs[idx], batch_caps, n_text, extra)

    # -- persistence ---------------------------------------------------------
    def state_arrays(self, with_optimizer: bool = True) -> dict[str, np.ndarray]:
        self._check_ready()
        out = {f"param.{k}": t.data for k, t in self.params_.items()}
        if with_optimizer:
            out.update(self.optimizer_.state_arrays())
        out["store.step"] = np.asarray(self.params_.step, dtype=np.float32)
        return out

    def load_state_arrays(self, arrays) -> "Captioner":
        if not hasattr(self, "params_"):
            self.initialize()
        self.params_.restore({k: arrays[f"param.{k}"] for k in self.params_.keys()})
        self.params_.step = int(np.asarray(arrays.get("store.step", 0)).reshape(-1)[0])
        self.optimizer_.load_state_arrays(arrays)
        return self


