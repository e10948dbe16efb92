"""Synthetic scene world: shapes on a 4x4 grid, a rasterizer, and a caption grammar.

A scene is up to four attributed glyphs, one per grid cell. Its canonical
caption lists every object exhaustively (size, color, shape, row, column) in
row-major cell order, which is the desk-scale stand-in for a "long" caption.
:func:`parse_caption` maps any token sequence back to a scene and never
fails, so captions sampled by a half-trained policy can still be scored.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InputError
from .numerics.rng import SeededRng

SHAPES = ("circle", "square", "triangle", "cross")
COLORS = ("red", "green", "blue", "yellow", "magenta", "cyan")
SIZES = ("small", "large")
GRID = 4
CELL = 8
IMAGE_SIZE = GRID * CELL
BACKGROUND = 0.1
MAX_OBJECTS = 4

RGB = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "magenta": (1.0, 0.0, 1.0),
    "cyan": (0.0, 1.0, 1.0),
}
GLYPH_EXTENT = {"small": 4, "large": 7}

# Filler words the policy may emit; the parser ignores them inside clauses.
KEYWORDS = ("a", "at", "and", "the", "in", "row", "column", "with", "of", "near", "object")

TOKENS: tuple[str, ...] = (
    ("<bos>", "<eos>", "<sep>")
    + SHAPES
    + COLORS
    + SIZES
    + tuple(f"row{i}" for i in range(GRID))
    + tuple(f"col{i}" for i in range(GRID))
    + KEYWORDS
)
TOKEN_ID = {t: i for i, t in enumerate(TOKENS)}
VOCAB_SIZE = len(TOKENS)
BOS, EOS, SEP = TOKEN_ID["<bos>"], TOKEN_ID["<eos>"], TOKEN_ID["<sep>"]
MAX_CAPTION_LEN = 1 + 6 * MAX_OBJECTS

_SHAPE_IDS = {TOKEN_ID[s]: s for s in SHAPES}
_COLOR_IDS = {TOKEN_ID[c]: c for c in COLORS}
_SIZE_IDS = {TOKEN_ID[s]: s for s in SIZES}
_ROW_IDS = {TOKEN_ID[f"row{i}"]: i for i in range(GRID)}
_COL_IDS = {TOKEN_ID[f"col{i}"]: i for i in range(GRID)}
_KEYWORD_IDS = frozenset(TOKEN_ID[k] for k in KEYWORDS)


@dataclass(frozen=True, order=True)
class SceneObject:
    cell: tuple[int, int]
    shape: str
    color: str
    size: str

    def __post_init__(self):
        r, c = self.cell
        if not (0 <= r < GRID and 0 <= c < GRID):
            raise InputError(f"cell {self.cell} outside the {GRID}x{GRID} grid")
        if self.shape not in SHAPES or self.color not in COLORS or self.size not in SIZES:
            raise InputError(f"unknown attribute in {self}")

    def to_dict(self) -> dict:
        return {"row": self.cell[0], "col": self.cell[1], "shape": self.shape,
                "color": self.color, "size": self.size}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneObject":
        return cls((int(d["row"]), int(d["col"])), d["shape"], d["color"], d["size"])


@dataclass(frozen=True)
class Scene:
    """Objects in canonical (row-major cell) order; at most one per cell."""

    objects: tuple[SceneObject, ...] = ()

    def __post_init__(self):
        objs = tuple(sorted(self.objects, key=lambda o: o.cell))
        if len(objs) > MAX_OBJECTS:
            raise InputError(f"scene has {len(objs)} objects, max is {MAX_OBJECTS}")
        cells = [o.cell for o in objs]
        if len(set(cells)) != len(cells):
            raise InputError("two objects share a cell")
        object.__setattr__(self, "objects", objs)

    def __len__(self):
        return len(self.objects)

    def to_list(self) -> list[dict]:
        return [o.to_dict() for o in self.objects]

    @classmethod
    def from_list(cls, items: Iterable[dict]) -> "Scene":
        return cls(tuple(SceneObject.from_dict(d) for d in items))


# -- rendering ------------------------------------------------------------------

def glyph_mask(shape: str, size: str) -> np.ndarray:
    """Boolean mask of a glyph inside its ``extent x extent`` bounding box."""
    s = GLYPH_EXTENT[size]
    c = (s - 1) / 2.0
    y, x = np.mgrid[0:s, 0:s].astype(np.float64)
    if shape == "square":
        return np.ones((s, s), dtype=bool)
    if shape == "circle":
        return (x - c) ** 2 + (y - c) ** 2 <= (s / 2.0) ** 2
    if shape == "triangle":
        # apex at the top row, base spanning the bottom row
        return np.abs(x - c) <= (y + 1) / 2.0
    if shape == "cross":
        # diagonal cross; thicker bars for the large glyph
        return np.abs(np.abs(x - c) - np.abs(y - c)) <= (1.0 if size == "large" else 0.5)
    raise InputError(f"unknown shape {shape!r}")


_MASKS = {(sh, sz): glyph_mask(sh, sz) for sh in SHAPES for sz in SIZES}


def render(scene: Scene) -> np.ndarray:
    """Rasterize ``scene`` to a float32 (32, 32, 3) image in [0, 1]."""
    if not isinstance(scene, Scene):
        raise InputError("render expects a Scene")
    img = np.full((IMAGE_SIZE, IMAGE_SIZE, 3), BACKGROUND, dtype=np.float32)
    for obj in scene.objects:
        mask = _MASKS[obj.shape, obj.size]
        s = mask.shape[0]
        off = (CELL - s) // 2
        r0 = obj.cell[0] * CELL + off
        c0 = obj.cell[1] * CELL + off
        region = img[r0:r0 + s, c0:c0 + s]
        region[mask] = RGB[obj.color]
    return img


# -- captions ---------------------------------------------------------------------

def canonical_caption(scene: Scene) -> list[int]:
    toks = [BOS]
    for obj in scene.objects:
        toks += [TOKEN_ID[obj.size], TOKEN_ID[obj.color], TOKEN_ID[obj.shape],
                 TOKEN_ID[f"row{obj.cell[0]}"], TOKEN_ID[f"col{obj.cell[1]}"], SEP]
    if len(toks) > 1:
        toks[-1] = EOS
    else:
        toks.append(EOS)
    return toks


def decode_tokens(tokens: Sequence[int]) -> list[str]:
    return [TOKENS[int(t)] if 0 <= int(t) < VOCAB_SIZE else f"<unk:{int(t)}>" for t in tokens]


def encode_tokens(words: Iterable[str]) -> list[int]:
    try:
        return [TOKEN_ID[w] for w in words]
    except KeyError as e:
        raise InputError(f"unknown token {e.args[0]!r}") from None


@dataclass
class ParseReport:
    """Outcome of :func:`parse_caption`.

    ``skipped`` holds ``(start, end)`` token spans of malformed clauses;
    ``conflicts`` the cells that appeared twice (the later clause is dropped).
    """

    scene: Scene
    skipped: list[tuple[int, int]] = field(default_factory=list)
    conflicts: list[tuple[int, int]] = field(default_factory=list)
    filler: int = 0
    terminated: bool = False

    @property
    def n_skipped(self) -> int:
        return len(self.skipped)


def _clause_object(ids: list[int]) -> SceneObject | None:
    if len(ids) != 5:
        return None
    sz, co, sh, rw, cl = ids
    if sz in _SIZE_IDS and co in _COLOR_IDS and sh in _SHAPE_IDS and rw in _ROW_IDS and cl in _COL_IDS:
        return SceneObject((_ROW_IDS[rw], _COL_IDS[cl]), _SHAPE_IDS[sh], _COLOR_IDS[co], _SIZE_IDS[sz])
    return None


def parse_caption(tokens: Sequence[int]) -> ParseReport:
    """Recover a scene from an arbitrary token sequence.

    Clauses are delimited by SEP and terminated by the first EOS (or the end
    of the sequence). Leading BOS tokens and filler keywords are ignored.
    A clause becomes an object only if it is exactly (size, color, shape,
    row, col); anything else is skipped and its span recorded.
    """
    objects: dict[tuple[int, int], SceneObject] = {}
    report = ParseReport(scene=Scene())
    clause: list[int] = []
    start = None
    filler = 0

    def close(end: int):
        nonlocal clause, start
        if start is not None:
            obj = _clause_object(clause)
            if obj is None:
                report.skipped.append((start, end))
            elif obj.cell in objects or len(objects) >= MAX_OBJECTS:
                report.conflicts.append(obj.cell)
            else:
                objects[obj.cell] = obj
        clause, start = [], None

    for i, raw in enumerate(tokens):
        t = int(raw)
        if t == EOS:
            close(i)
            report.terminated = True
            break
        if t == SEP:
            if start is None:
                start = i
            close(i)
            continue
        if t == BOS and start is None:
            continue
        if start is None:
            start = i
        if t in _KEYWORD_IDS:
            filler += 1
            continue
        clause.append(t)
    else:
        close(len(tokens))
    report.filler = filler
    report.scene = Scene(tuple(objects.values()))
    return report


# -- sampling and datasets -----------------------------------------------------------

def sample_scene(rng: SeededRng, max_objects: int = MAX_OBJECTS) -> Scene:
    if not 1 <= max_objects <= MAX_OBJECTS:
        raise InputError(f"max_objects must be in 1..{MAX_OBJECTS}")
    n = int(rng.integers(1, max_objects + 1))
    cells = rng.choice(GRID * GRID, n, replace=False)
    objs = []
    for cell in cells:
        objs.append(SceneObject(
            (int(cell) // GRID, int(cell) % GRID),
            SHAPES[int(rng.integers(0, len(SHAPES)))],
            COLORS[int(rng.integers(0, len(COLORS)))],
            SIZES[int(rng.integers(0, len(SIZES)))],
        ))
    return Scene(tuple(objs))


@dataclass(frozen=True)
class Record:
    scene: Scene
    image: np.ndarray
    caption: list[int]


@dataclass
class SceneDataset:
    train: list[Record]
    eval: list[Record]
    seed: int
    max_objects: int

    def images(self, split: str = "train") -> np.ndarray:
        return np.stack([r.image for r in getattr(self, split)])

    def captions(self, split: str = "train") -> list[list[int]]:
        return [r.caption for r in getattr(self, split)]

    def scenes(self, split: str = "train") -> list[Scene]:
        return [r.scene for r in getattr(self, split)]

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for split in ("train", "eval"):
            h.update(split.encode())
            for r in getattr(self, split):
                h.update(json.dumps(r.scene.to_list(), sort_keys=True).encode())
                h.update(np.asarray(r.caption, dtype="<i4").tobytes())
                h.update(np.ascontiguousarray(r.image, dtype="<f4").tobytes())
        return h.hexdigest()


def _record(scene: Scene) -> Record:
    return Record(scene, render(scene), canonical_caption(scene))


def build_dataset(n: int, seed: int, max_objects: int = MAX_OBJECTS, n_eval: int = 100) -> SceneDataset:
    """``n`` training records plus a disjoint held-out split of ``n_eval`` scenes."""
    if n < 1:
        raise InputError("dataset size must be at least 1")
    root = SeededRng(seed)
    eval_rng, train_rng = root.child(0), root.child(1)
    eval_scenes: list[Scene] = []
    seen = set()
    while len(eval_scenes) < n_eval:
        s = sample_scene(eval_rng, max_objects)
        if s not in seen:
            seen.add(s)
            eval_scenes.append(s)
    held_out = set(eval_scenes)
    train_scenes = []
    while len(train_scenes) < n:
        s = sample_scene(train_rng, max_objects)
        if s not in held_out:
            train_scenes.append(s)
    return SceneDataset([_record(s) for s in train_scenes], [_record(s) for s in eval_scenes],
                        seed, max_objects)


# -- export ------------------------------------------------------------------

def to_ppm_bytes(image: np.ndarray) -> bytes:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise InputError("PPM export expects an (H, W, 3) image")
    raw = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w, _ = raw.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + raw.tobytes()


def write_ppm(path, image: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_ppm_bytes(image))
    return path


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = []
    pos = 0
    while len(parts) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        parts.append(data[pos:end])
        pos = end
    pos += 1
    if parts[0] != b"P6":
        raise InputError(f"{path}: not a binary PPM (P6)")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise InputError(f"{path}: only maxval 255 is supported")
    raw = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
    return (raw.reshape(h, w, 3).astype(np.float32) / 255.0)


def export_dataset(ds: SceneDataset, out_dir, force: bool = False) -> dict:
    """Write ``train.jsonl``/``eval.jsonl`` plus one PPM per record."""
    out = Path(out_dir)
    targets = [out / "train.jsonl", out / "eval.jsonl"]
    if not force and any(p.exists() for p in targets):
        raise FileExistsError(f"dataset files already exist in {out}; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    for split, path in zip(("train", "eval"), targets):
        lines = []
        for i, r in enumerate(getattr(ds, split)):
            rel = f"images/{split}_{i:05d}.ppm"
            write_ppm(out / rel, r.image)
            lines.append(json.dumps({"id": f"{split}-{i:05d}", "scene": r.scene.to_list(),
                                     "caption": r.caption, "image": rel}, sort_keys=True))
        path.write_text("\n".join(lines) + "\n")
    summary = {"train": len(ds.train), "eval": len(ds.eval), "seed": ds.seed,
               "max_objects": ds.max_objects, "content_hash": ds.content_hash()}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def load_dataset(data_dir) -> SceneDataset:
    """Reload an exported dataset; images are re-rendered from the scene records."""
    d = Path(data_dir)
    splits = {}
    for split in ("train", "eval"):
        path = d / f"{split}.jsonl"
        if not path.exists():
            from .errors import DependencyError

            raise DependencyError(f"missing dataset split {path}; run gen-data first")
        recs = []
        for line in path.read_text().splitlines():
            if line.strip():
                item = json.loads(line)
                recs.append(_record(Scene.from_list(item["scene"])))
        splits[split] = recs
    meta = json.loads((d / "summary.json").read_text()) if (d / "summary.json").exists() else {}
    return SceneDataset(splits["train"], splits["eval"], meta.get("seed", -1), meta.get("max_objects", MAX_OBJECTS))
