"""Named parameter storage, Adam, and global-norm gradient clipping."""
from __future__ import annotations

import hashlib
from typing import Iterable, Iterator, Mapping

import numpy as np

from ..errors import ConfigError, InputError, NumericError
from .tensor import Tensor, global_norm


class ParameterStore:
    """Ordered ``name -> Tensor`` map whose key set is fixed once sealed.

    Keys carry a dotted component prefix (``patch.w``, ``vel.w0``) so whole
    sub-networks can be frozen by prefix.
    """

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}
        self._frozen: set[str] = set()
        self._sealed = False
        self.step = 0

    def add(self, key: str, value: np.ndarray) -> Tensor:
        if self._sealed:
            raise InputError(f"parameter store is sealed; cannot add {key!r}")
        if key in self._tensors:
            raise InputError(f"duplicate parameter key {key!r}")
        t = Tensor(np.array(value, dtype=np.float32, copy=True), requires_grad=True, dtype=np.float32)
        self._tensors[key] = t
        return t

    def seal(self) -> "ParameterStore":
        self._sealed = True
        return self

    def __getitem__(self, key: str) -> Tensor:
        return self._tensors[key]

    def __contains__(self, key: str) -> bool:
        return key in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def keys(self):
        return self._tensors.keys()

    def items(self):
        return self._tensors.items()

    def n_values(self) -> int:
        return sum(t.data.size for t in self._tensors.values())

    # -- freezing --------------------------------------------------------
    def freeze(self, prefixes: Iterable[str] = ("",)) -> None:
        """Mark every key starting with one of ``prefixes`` as non-trainable."""
        prefixes = tuple(prefixes)
        for k, t in self._tensors.items():
            if k.startswith(prefixes):
                self._frozen.add(k)
                t.requires_grad = False
                t.grad = None

    def unfreeze(self, prefixes: Iterable[str] = ("",)) -> None:
        prefixes = tuple(prefixes)
        for k, t in self._tensors.items():
            if k.startswith(prefixes):
                self._frozen.discard(k)
                t.requires_grad = True

    def trainable(self) -> list[str]:
        return [k for k in self._tensors if k not in self._frozen]

    @property
    def frozen(self) -> frozenset:
        return frozenset(self._frozen)

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        """Gradients of trainable keys; zeros where nothing flowed."""
        return {
            k: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for k, t in self._tensors.items()
            if k not in self._frozen
        }

    # -- snapshots -------------------------------------------------------
    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._tensors.items()}

    def restore(self, snap: Mapping[str, np.ndarray]) -> None:
        if set(snap) != set(self._tensors):
            raise InputError("snapshot key set does not match the store")
        for k, t in self._tensors.items():
            src = np.asarray(snap[k])
            if src.shape != t.data.shape:
                raise InputError(f"shape mismatch restoring {k!r}: {src.shape} vs {t.data.shape}")
            t.data = src.astype(np.float32, copy=True)

    def copy(self) -> "ParameterStore":
        out = ParameterStore()
        for k, t in self._tensors.items():
            out.add(k, t.data)
        out._frozen = set(self._frozen)
        for k in out._frozen:
            out._tensors[k].requires_grad = False
        out.step = self.step
        return out.seal() if self._sealed else out

    def digest(self, prefixes: Iterable[str] = ("",)) -> str:
        """sha256 over the raw bytes of keys matching ``prefixes``."""
        prefixes = tuple(prefixes)
        h = hashlib.sha256()
        for k in sorted(self._tensors):
            if k.startswith(prefixes):
                h.update(k.encode())
                h.update(np.ascontiguousarray(self._tensors[k].data, dtype="<f4").tobytes())
        return h.hexdigest()


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float | None) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``.

    Returns the pre-clipping norm.
    """
    norm = global_norm(grads.values())
    if not np.isfinite(norm):
        raise NumericError("non-finite gradient norm")
    if max_norm is not None and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = (grads[k] * scale).astype(grads[k].dtype)
    return norm


class Adam:
    """Adam with optional decoupled weight decay, state kept per key."""

    def __init__(self, store: ParameterStore, lr: float, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay: float = 0.0, max_grad_norm: float | None = 1.0):
        if lr <= 0:
            raise ConfigError("learning rate must be positive")
        self.store = store
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.max_grad_norm = max_grad_norm
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self) -> float:
        """Apply one update from the store's accumulated grads; returns the grad norm."""
        grads = self.store.grads()
        norm = clip_grad_norm(grads, self.max_grad_norm)
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        # float32 state, updated in place; the parameter array itself is replaced
        # so snapshots taken elsewhere never alias live weights
        for k, g in grads.items():
            p = self.store[k]
            g = g.astype(np.float32, copy=False)
            m = self.m.setdefault(k, np.zeros_like(p.data))
            v = self.v.setdefault(k, np.zeros_like(p.data))
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * (g * g)
            denom = np.sqrt(v)
            denom *= 1.0 / np.sqrt(c2)
            denom += self.eps
            upd = m / denom
            upd *= self.lr / c1
            if self.weight_decay:
                upd += (self.lr * self.weight_decay) * p.data
            p.data = p.data - upd
        self.store.step += 1
        self.store.zero_grad()
        return norm

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"optim.t": np.asarray(self.t, dtype=np.float32)}
        for k in self.m:
            out[f"optim.m.{k}"] = self.m[k].copy()
            out[f"optim.v.{k}"] = self.v[k].copy()
        return out

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        self.t = int(np.asarray(arrays.get("optim.t", 0)).reshape(-1)[0])
        self.m = {k[len("optim.m."):]: np.array(v, np.float32) for k, v in arrays.items() if k.startswith("optim.m.")}
        self.v = {k[len("optim.v."):]: np.array(v, np.float32) for k, v in arrays.items() if k.startswith("optim.v.")}
