"""Reverse-mode vs central finite differences."""
from __future__ import annotations

from typing import Callable

import numpy as np

from ..errors import GradCheckError
from .params import ParameterStore
from .rng import SeededRng
from .tensor import Tensor, no_grad, precision


def relative_errors(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: ParameterStore,
    epsilon: float = 1e-4,
    max_per_key: int | None = 24,
    seed: int = 0,
    keys=None,
    rel_floor: float = 1e-3,
) -> float:
    """Maximum relative error between autodiff and central differences.

    ``loss_fn`` is called with no arguments and must read its parameters from
    ``params``; it has to be deterministic (re-seed any randomness inside).
    The check runs in float64. Stores with many entries are subsampled: at
    most ``max_per_key`` seeded entries per key (``None`` checks everything).
    Entries whose gradients are tiny relative to the largest gradient are
    judged against ``rel_floor * max|grad|`` instead of their own magnitude.
    """
    keys = list(keys) if keys is not None else params.trainable()
    saved = params.snapshot()
    try:
        for k in params.keys():
            params[k].data = saved[k].astype(np.float64)
        with precision(np.float64):
            params.zero_grad()
            loss = loss_fn()
            again = loss_fn()
            if float(loss.data) != float(again.data):
                raise GradCheckError("loss_fn is not deterministic; gradient check is invalid")
            loss.backward()
            analytic = {k: (params[k].grad if params[k].grad is not None else np.zeros_like(params[k].data))
                        for k in keys}
            params.zero_grad()
            rng = SeededRng(seed)
            a_all, n_all = [], []
            with no_grad():
                for ki, k in enumerate(keys):
                    p = params[k]
                    flat = p.data.reshape(-1)
                    if max_per_key is None or flat.size <= max_per_key:
                        idx = np.arange(flat.size)
                    else:
                        idx = np.sort(rng.child(ki).choice(flat.size, max_per_key, replace=False))
                    for i in idx:
                        orig = flat[i]
                        flat[i] = orig + epsilon
                        up = float(loss_fn().data)
                        flat[i] = orig - epsilon
                        down = float(loss_fn().data)
                        flat[i] = orig
                        n_all.append((up - down) / (2 * epsilon))
                        a_all.append(analytic[k].reshape(-1)[i])
    finally:
        params.restore(saved)
        params.zero_grad()
    a = np.asarray(a_all, dtype=np.float64)
    n = np.asarray(n_all, dtype=np.float64)
    if a.size == 0:
        return 0.0
    floor = max(rel_floor * float(np.max(np.abs(a))), 1e-12)
    return float(np.max(relative_errors(a, n, floor)))
