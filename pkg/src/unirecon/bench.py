"""Reconstruction and caption-quality scoring.

Four fixed feature extractors stand in for learned vision backbones. Each
maps an image to a unit vector; the unified score of a (source,
reconstruction) pair is ``100 * cosine`` per backbone and their mean
overall. Caption quality is judged against the true scene by counting
recovered (object, attribute) tuples.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import DimensionError, InputError
from .scene import BACKGROUND, CELL, COLORS, GRID, RGB, Scene, parse_caption
from .validation import check_images

NORM_FLOOR = 1e-8
# Added to every raw feature so blank inputs (black image, no edges) still embed to a unit vector.
FEATURE_FLOOR = 1e-4
HUE_WIDTH = 0.1


def _cells(images: np.ndarray) -> np.ndarray:
    """(n, 32, 32, C) -> (n, 16, 64, C), cells in row-major order."""
    n, C = images.shape[0], images.shape[-1]
    x = images.reshape(n, GRID, CELL, GRID, CELL, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(n, GRID * GRID, CELL * CELL, C)


def _normalize(F: np.ndarray) -> np.ndarray:
    F = F.astype(np.float64) + FEATURE_FLOOR
    return F / np.maximum(np.linalg.norm(F, axis=1, keepdims=True), NORM_FLOOR)


class _Backbone(TransformerMixin, BaseEstimator):
    """Stateless feature map; ``fit`` only validates."""

    name = ""
    dim = 0

    def fit(self, X=None, y=None):
        return self

    def transform(self, X) -> np.ndarray:
        X = check_images(X, allow_single=True)
        return _normalize(self._features(X.astype(np.float64)))

    def _features(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class PixDown(_Backbone):
    """8x8 area-averaged RGB (192 dims)."""

    name, dim = "pix-down", 192

    def _features(self, X):
        n = X.shape[0]
        return X.reshape(n, 8, 4, 8, 4, 3).mean(axis=(2, 4)).reshape(n, -1)


class CellHist(_Backbone):
    """Per cell: soft proximity to each palette colour plus foreground coverage (112 dims)."""

    name, dim = "cell-hist", 112
    palette = np.array([RGB[c] for c in COLORS])

    def _features(self, X):
        cells = _cells(X)
        d2 = ((cells[..., None, :] - self.palette) ** 2).sum(-1)
        hist = np.exp(-d2 / HUE_WIDTH).mean(axis=2)
        bg = ((cells - BACKGROUND) ** 2).sum(-1)
        coverage = (1.0 - np.exp(-bg / HUE_WIDTH)).mean(axis=2, keepdims=True)
        return np.concatenate([hist, coverage], axis=2).reshape(X.shape[0], -1)


class EdgeOrient(_Backbone):
    """Per cell: gradient magnitude of luminance binned by orientation mod pi (64 dims)."""

    name, dim = "edge-orient", 64
    n_bins = 4

    def _features(self, X):
        lum = X.mean(axis=-1)
        gy, gx = np.gradient(lum, axis=(1, 2))
        mag = np.hypot(gx, gy)
        ang = np.mod(np.arctan2(gy, gx), np.pi)
        bins = np.minimum((ang / np.pi * self.n_bins).astype(int), self.n_bins - 1)
        onehot = (bins[..., None] == np.arange(self.n_bins)) * mag[..., None]
        return _cells(onehot).sum(axis=2).reshape(X.shape[0], -1)


class PatchMoments(_Backbone):
    """Per cell and channel: mean and variance (96 dims)."""

    name, dim = "patch-moments", 96

    def _features(self, X):
        cells = _cells(X)
        return np.concatenate([cells.mean(axis=2), cells.var(axis=2)], axis=2).reshape(X.shape[0], -1)


BACKBONES: dict[str, _Backbone] = {b.name: b for b in (PixDown(), CellHist(), EdgeOrient(), PatchMoments())}


def get_backbone(name: str) -> _Backbone:
    try:
        return BACKBONES[name]
    except KeyError:
        raise InputError(f"unknown backbone {name!r}; choose from {sorted(BACKBONES)}") from None


def embed(image, backbone: str) -> np.ndarray:
    return get_backbone(backbone).transform(image)[0]


@dataclass
class UnifiedScoreReport:
    scores: dict[str, float]

    @property
    def overall(self) -> float:
        return float(np.mean(list(self.scores.values())))

    def as_dict(self) -> dict:
        return {**self.scores, "overall": self.overall}


def unified_scores(sources, recons, backbones: Sequence[str] | None = None) -> dict[str, np.ndarray]:
    """Per-backbone ``100 * cos`` for paired batches, each an (n,) array."""
    S = check_images(sources, allow_single=True)
    R = check_images(recons, allow_single=True)
    if S.shape != R.shape:
        raise DimensionError(f"source {S.shape} and reconstruction {R.shape} differ")
    out = {}
    for name in backbones or BACKBONES:
        b = get_backbone(name)
        out[name] = 100.0 * np.clip(np.sum(b.transform(S) * b.transform(R), axis=1), -1.0, 1.0)
    return out


def unified_score(source, recon, backbones: Sequence[str] | None = None) -> UnifiedScoreReport:
    per = unified_scores(source, recon, backbones)
    return UnifiedScoreReport({k: float(v[0]) for k, v in per.items()})


def reward(sources, recons, backbone: str = "overall") -> np.ndarray:
    """RL reward in [-1, 1]: the overall unified score (or one backbone's) divided by 100."""
    names = None if backbone == "overall" else [backbone]
    per = unified_scores(sources, recons, names)
    return np.mean(np.stack(list(per.values())), axis=0) / 100.0


# -- caption judge -------------------------------------------------------------

@dataclass
class CaptionQualityReport:
    precision: float
    recall: float
    f1: float
    skipped: int
    correct: int = 0
    asserted: int = 0
    truth: int = 0


def judge_caption(caption: Sequence[int], truth: Scene) -> CaptionQualityReport:
    """Tuple-level precision/recall of a caption against the scene it describes.

    Each object contributes four tuples: its position, shape, colour and
    size. A recovered object is matched to the true object in the same cell.
    """
    rep = parse_caption(caption)
    by_cell = {o.cell: o for o in truth.objects}
    correct = 0
    for o in rep.scene.objects:
        t = by_cell.get(o.cell)
        if t is not None:
            correct += 1 + (o.shape == t.shape) + (o.color == t.color) + (o.size == t.size)
    asserted, n_truth = 4 * len(rep.scene), 4 * len(truth)
    p = correct / asserted if asserted else 0.0
    r = correct / n_truth if n_truth else 0.0
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    if not asserted and not n_truth:
        p = r = f1 = 1.0
    return CaptionQualityReport(p, r, f1, rep.n_skipped, correct, asserted, n_truth)


def _captions_of(model, images) -> list[list[int]]:
    if callable(getattr(model, "predict", None)):
        return model.predict(images)
    return list(model)


def pairwise_win_rate(model_a, model_b, scenes: Sequence[Scene], images=None) -> float:
    """Percentage of scenes where ``a``'s caption beats ``b``'s by F1 (ties count half).

    Models are anything with ``predict(images)`` or plain caption lists.
    """
    caps_a, caps_b = _captions_of(model_a, images), _captions_of(model_b, images)
    if not (len(caps_a) == len(caps_b) == len(scenes)) or not scenes:
        raise InputError("both models need one caption per eval scene")
    wins = 0.0
    for ca, cb, s in zip(caps_a, caps_b, scenes):
        fa, fb = judge_caption(ca, s).f1, judge_caption(cb, s).f1
        wins += 1.0 if fa > fb else 0.5 if fa == fb else 0.0
    return 100.0 * wins / len(scenes)


# -- protocol 1 ------------------------------------------------------------------

@dataclass
class Protocol1Report:
    scores: dict[str, float]
    per_scene: list[dict] = field(default_factory=list)

    @property
    def overall(self) -> float:
        return self.scores["overall"]

    def table(self) -> str:
        names = list(self.scores)
        head = "  ".join(f"{n:>13}" for n in names)
        vals = "  ".join(f"{self.scores[n]:13.2f}" for n in names)
        return f"{head}\n{vals}"


def protocol1_eval(caption_fn: Callable, reconstruct_fn: Callable, images, scenes: Sequence[Scene] | None = None,
                   backbones: Sequence[str] | None = None) -> Protocol1Report:
    """Caption each source, reconstruct from the caption, and score the pair.

    ``caption_fn(images) -> captions`` and ``reconstruct_fn(captions) ->
    images`` define the pipeline under test. Scenes, when given, add caption
    F1 to the per-scene records.
    """
    images = check_images(images)
    if len(images) == 0:
        raise InputError("empty eval set")
    captions = caption_fn(images)
    recons = reconstruct_fn(captions)
    per = unified_scores(images, recons, backbones)
    names = list(per)
    overall = np.mean(np.stack([per[n] for n in names]), axis=0)
    rows = []
    for i in range(len(images)):
        row = {"scene": i, **{n: float(per[n][i]) for n in names}, "overall": float(overall[i]),
               "caption_len": len(captions[i])}
        if scenes is not None:
            row["caption_f1"] = judge_caption(captions[i], scenes[i]).f1
        rows.append(row)
    means = {n: float(np.mean(per[n])) for n in names}
    means["overall"] = float(np.mean(overall))
    return Protocol1Report(means, rows)
