"""Input validation helpers in the spirit of ``sklearn.utils.validation``."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import DimensionError, InputError
from .scene import BOS, IMAGE_SIZE, VOCAB_SIZE

IMAGE_SHAPE = (IMAGE_SIZE, IMAGE_SIZE, 3)


def check_images(X, allow_single: bool = False) -> np.ndarray:
    """Return ``X`` as a float32 (n, 32, 32, 3) array with values in [0, 1].

    With ``allow_single`` a lone (32, 32, 3) image is promoted to a batch of one.
    """
    X = np.asarray(X, dtype=np.float32)
    if allow_single and X.shape == IMAGE_SHAPE:
        X = X[None]
    if X.ndim != 4 or X.shape[1:] != IMAGE_SHAPE:
        raise DimensionError(f"expected images of shape (n, {IMAGE_SIZE}, {IMAGE_SIZE}, 3), got {X.shape}")
    if X.shape[0] == 0:
        raise InputError("empty image batch")
    if not np.all(np.isfinite(X)) or X.min() < 0.0 or X.max() > 1.0:
        raise InputError("image values must be finite and in [0, 1]")
    return X


def check_tokens(tokens: Sequence[int], require_bos: bool = True) -> list[int]:
    toks = [int(t) for t in tokens]
    if not toks:
        raise InputError("empty token sequence")
    if min(toks) < 0 or max(toks) >= VOCAB_SIZE:
        raise InputError(f"token id out of vocabulary range [0, {VOCAB_SIZE})")
    if require_bos and toks[0] != BOS:
        raise InputError("token sequence must start with <bos>")
    return toks


def check_token_batch(captions, require_bos: bool = True) -> list[list[int]]:
    if isinstance(captions, np.ndarray) and captions.ndim == 1 and captions.dtype != object:
        captions = [captions]
    out = [check_tokens(c, require_bos) for c in captions]
    if not out:
        raise InputError("empty caption batch")
    return out


def pad_tokens(captions: list[list[int]], pad: int) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad to a rectangle; returns ``(ids, lengths)``."""
    lengths = np.array([len(c) for c in captions], dtype=np.int64)
    ids = np.full((len(captions), int(lengths.max())), pad, dtype=np.int64)
    for i, c in enumerate(captions):
        ids[i, : len(c)] = c
    return ids, lengths


def check_consistent_length(*arrays) -> int:
    lengths = {len(a) for a in arrays if a is not None}
    if len(lengths) > 1:
        raise InputError(f"inconsistent batch sizes: {sorted(lengths)}")
    return lengths.pop() if lengths else 0
