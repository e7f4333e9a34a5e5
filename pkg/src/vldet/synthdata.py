"""Deterministic colour x shape scenes with a base/novel class split."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numeric import load_tensor, save_tensor

PALETTE = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.65, 0.15),
    "blue": (0.15, 0.25, 0.90),
    "yellow": (0.95, 0.85, 0.10),
    "magenta": (0.85, 0.10, 0.80),
    "cyan": (0.10, 0.80, 0.85),
    "orange": (1.00, 0.55, 0.00),
    "white": (1.00, 1.00, 1.00),
    "black": (0.00, 0.00, 0.00),
}
SHAPES = ("circle", "square", "triangle", "diamond")
BACKGROUND_GRAY = 0.5
SPLITS = ("train", "eval")
MIN_SIDE, MAX_SIDE = 20, 30
MAX_OBJECTS = 4
PLACEMENT_ATTEMPTS = 100


class LayoutError(RuntimeError):
    pass


@dataclass
class Vocabulary:
    colors: list[str]
    shapes: list[str]
    base_ids: list[int]
    novel_ids: list[int]
    seed: int = 0

    @property
    def classes(self) -> list[str]:
        """Foreground names; class id ``i`` is ``classes[i - 1]``."""
        return [f"{c} {s}" for c in self.colors for s in self.shapes]

    @property
    def num_classes(self) -> int:
        return len(self.colors) * len(self.shapes)

    def name(self, class_id: int) -> str:
        return self.classes[class_id - 1]

    def color_of(self, class_id: int) -> str:
        return self.colors[(class_id - 1) // len(self.shapes)]

    def shape_of(self, class_id: int) -> str:
        return self.shapes[(class_id - 1) % len(self.shapes)]

    def ids_for(self, names) -> dict[str, int]:
        lookup = {n: i + 1 for i, n in enumerate(self.classes)}
        return {n: lookup[n] for n in names if n in lookup}

    def to_dict(self) -> dict:
        return {"colors": self.colors, "shapes": self.shapes, "classes": self.classes,
                "base_ids": self.base_ids, "novel_ids": self.novel_ids, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(list(d["colors"]), list(d["shapes"]), list(d["base_ids"]), list(d["novel_ids"]), d.get("seed", 0))


def _covers(vocab_colors, vocab_shapes, ids, n_shapes) -> bool:
    colors = {(i - 1) // n_shapes for i in ids}
    shapes = {(i - 1) % n_shapes for i in ids}
    return len(colors) == len(vocab_colors) and len(shapes) == len(vocab_shapes)


def build_vocabulary(n_colors: int = 4, n_shapes: int = 4, n_novel: int = 4, seed: int = 0) -> Vocabulary:
    """Hold out ``n_novel`` colour-shape combinations, keeping every primitive in some base class."""
    if not 1 <= n_colors <= len(PALETTE):
        raise ValueError(f"n_colors must be in 1..{len(PALETTE)}")
    if not 1 <= n_shapes <= len(SHAPES):
        raise ValueError(f"n_shapes must be in 1..{len(SHAPES)}")
    total = n_colors * n_shapes
    if not 0 <= n_novel < total:
        raise ValueError(f"n_novel={n_novel} leaves no base classes out of {total}")
    colors, shapes = list(PALETTE)[:n_colors], list(SHAPES[:n_shapes])
    rng = np.random.default_rng(seed)
    base = set(range(1, total + 1))
    novel = []
    for cid in (rng.permutation(total) + 1).tolist():
        if len(novel) == n_novel:
            break
        if _covers(colors, shapes, base - {cid}, n_shapes):
            base.discard(cid)
            novel.append(cid)
    if len(novel) < n_novel:
        raise ValueError(
            f"cannot hold out {n_novel} classes while every colour and shape stays in a base class"
        )
    return Vocabulary(colors, shapes, sorted(base), sorted(novel), seed)


@dataclass
class SceneRecord:
    scene_id: str
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    boxes: list[tuple[float, float, float, float]]
    class_ids: list[int]
    caption: str

    def annotation(self) -> dict:
        return {"scene_id": self.scene_id, "boxes": [list(b) for b in self.boxes],
                "class_ids": list(self.class_ids), "caption": self.caption}


def shape_mask(shape: str, x0: int, y0: int, side: int, height: int, width: int) -> np.ndarray:
    """Analytic rasterisation, sampled at pixel centres."""
    py, px = np.mgrid[0:height, 0:width].astype(np.float64) + 0.5
    r = side / 2.0
    cx, cy = x0 + r, y0 + r
    inside_box = (px >= x0) & (px < x0 + side) & (py >= y0) & (py < y0 + side)
    if shape == "square":
        return inside_box
    if shape == "circle":
        return (px - cx) ** 2 + (py - cy) ** 2 <= r * r
    if shape == "diamond":
        return np.abs(px - cx) + np.abs(py - cy) <= r
    if shape == "triangle":
        return inside_box & (np.abs(px - cx) <= (py - y0) / side * r)
    raise ValueError(f"unknown shape {shape!r}")


def caption_for(names: list[str]) -> str:
    return "a picture of " + ", ".join(f"a {n}" for n in names)


def _boxes_disjoint(a, b) -> bool:
    return a[2] <= b[0] or b[2] <= a[0] or a[3] <= b[1] or b[3] <= a[1]


def _layout(rng: np.random.Generator, k: int, height: int, width: int) -> list[tuple[int, int, int, int]]:
    """k pairwise-disjoint square frames; a layout that cannot fit the next object is rejected and redrawn."""
    for _ in range(PLACEMENT_ATTEMPTS):
        placed = []
        for _ in range(k):
            side = int(rng.integers(MIN_SIDE, min(MAX_SIDE, height, width) + 1))
            for _ in range(PLACEMENT_ATTEMPTS):
                x0 = int(rng.integers(0, width - side + 1))
                y0 = int(rng.integers(0, height - side + 1))
                frame = (x0, y0, x0 + side, y0 + side)
                if all(_boxes_disjoint(frame, other) for other in placed):
                    placed.append(frame)
                    break
            else:
                break
        if len(placed) == k:
            return placed
    raise LayoutError(f"no layout for {k} objects in {height}x{width} after {PLACEMENT_ATTEMPTS} attempts")


def render_scene(vocab: Vocabulary, allowed_ids, seed: int, index: int = 0,
                 image_size: tuple[int, int] = (64, 64), split: str = "train",
                 scene_id: str | None = None) -> SceneRecord:
    """Draw 1-4 shapes of distinct colours on gray; fully determined by (seed, split, index)."""
    allowed = sorted(set(allowed_ids))
    if not allowed:
        raise ValueError("allowed_ids is empty")
    height, width = image_size
    rng = np.random.default_rng([seed, SPLITS.index(split), index])
    k = int(rng.integers(1, MAX_OBJECTS + 1))
    chosen, used_colors = [], set()
    for cid in rng.permutation(allowed).tolist():
        if vocab.color_of(cid) not in used_colors:
            chosen.append(cid)
            used_colors.add(vocab.color_of(cid))
        if len(chosen) == k:
            break

    placed = _layout(rng, len(chosen), height, width)
    image = np.full((height, width, 3), BACKGROUND_GRAY, dtype=np.float32)
    boxes = []
    for cid, (x0, y0, x1, _) in zip(chosen, placed):
        mask = shape_mask(vocab.shape_of(cid), x0, y0, x1 - x0, height, width)
        image[mask] = PALETTE[vocab.color_of(cid)]
        ys, xs = np.nonzero(mask)
        boxes.append((float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1)))
    caption = caption_for([vocab.name(c) for c in chosen])
    return SceneRecord(scene_id or f"{split}_{index:05d}", image, boxes, chosen, caption)


def shift_flip(scene: SceneRecord, rng: np.random.Generator) -> SceneRecord:
    """Random translation keeping every object in frame, then a horizontal flip with probability 1/2.

    Valid because the background is uniform and every shape is left-right
    symmetric; the caption is unchanged.
    """
    h, w = scene.image.shape[:2]
    boxes = np.asarray(scene.boxes, dtype=np.float64).reshape(-1, 4)
    dx = int(rng.integers(-int(boxes[:, 0].min()), int(w - boxes[:, 2].max()) + 1))
    dy = int(rng.integers(-int(boxes[:, 1].min()), int(h - boxes[:, 3].max()) + 1))
    image = np.full_like(scene.image, BACKGROUND_GRAY)
    image[max(dy, 0):h + min(dy, 0), max(dx, 0):w + min(dx, 0)] = \
        scene.image[max(-dy, 0):h - max(dy, 0), max(-dx, 0):w - max(dx, 0)]
    boxes = boxes + np.array([dx, dy, dx, dy])
    if rng.random() < 0.5:
        image = image[:, ::-1].copy()
        boxes = np.stack([w - boxes[:, 2], boxes[:, 1], w - boxes[:, 0], boxes[:, 3]], 1)
    return SceneRecord(scene.scene_id, image, [tuple(map(float, b)) for b in boxes],
                       list(scene.class_ids), scene.caption)


def rescale(scene: SceneRecord, rng: np.random.Generator, low: float = 0.75, high: float = 1.35) -> SceneRecord:
    """Nearest-neighbour zoom by a random factor about the image centre; boxes follow.

    The factor is capped so every box stays inside the frame. Palette
    colours survive exactly because no pixels are blended.
    """
    h, w = scene.image.shape[:2]
    boxes = np.asarray(scene.boxes, dtype=np.float64).reshape(-1, 4)
    cx, cy = w / 2.0, h / 2.0
    # largest factor keeping every corner in frame
    reach = max(np.abs(boxes[:, [0, 2]] - cx).max() / cx, np.abs(boxes[:, [1, 3]] - cy).max() / cy)
    top = min(high, 1.0 / reach)
    s = float(rng.uniform(low, top)) if top > low else top
    src_x = np.floor((np.arange(w) + 0.5 - cx) / s + cx).astype(int)
    src_y = np.floor((np.arange(h) + 0.5 - cy) / s + cy).astype(int)
    valid = (src_y[:, None] >= 0) & (src_y[:, None] < h) & (src_x[None] >= 0) & (src_x[None] < w)
    image = np.full_like(scene.image, BACKGROUND_GRAY)
    image[valid] = scene.image[np.clip(src_y, 0, h - 1)[:, None].repeat(w, 1)[valid],
                               np.clip(src_x, 0, w - 1)[None].repeat(h, 0)[valid]]
    painted = (image != BACKGROUND_GRAY).any(-1)
    out = []
    for x1, y1, x2, y2 in boxes:
        # objects have distinct colours and disjoint boxes: painted pixels drawn from this box are its own
        inside = painted & ((src_y >= y1) & (src_y < y2))[:, None] & ((src_x >= x1) & (src_x < x2))[None]
        ys, xs = np.nonzero(inside)
        out.append((float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1)))
    return SceneRecord(scene.scene_id, image, out, list(scene.class_ids), scene.caption)


def cut_objects(scene: SceneRecord) -> list[tuple[int, np.ndarray, np.ndarray]]:
    """(class id, colour, boolean mask cropped to the box) for every object of a scene."""
    out = []
    for (x1, y1, x2, y2), cid in zip(scene.boxes, scene.class_ids):
        crop = scene.image[int(y1):int(y2), int(x1):int(x2)]
        painted = (crop != BACKGROUND_GRAY).any(-1)
        color = crop[painted][0]
        out.append((cid, color, np.all(crop == color, -1)))
    return out


def recompose(pool: list[SceneRecord], vocab: Vocabulary, rng: np.random.Generator) -> SceneRecord:
    """A fresh layout of 1-4 objects cut from random scenes of ``pool``.

    Objects keep their pixels (optionally mirrored) and get new positions
    under the generator's layout rules; the caption is rebuilt from the
    chosen classes. Breaks the co-occurrence a model could otherwise use to
    recognise whole training scenes.
    """
    h, w = pool[0].image.shape[:2]
    k = int(rng.integers(1, MAX_OBJECTS + 1))
    image = np.full((h, w, 3), BACKGROUND_GRAY, dtype=np.float32)
    boxes, ids, placed, used = [], [], [], set()
    for _ in range(8 * MAX_OBJECTS):
        if len(ids) == k:
            break
        scene = pool[int(rng.integers(len(pool)))]
        cid, color, mask = cut_objects(scene)[int(rng.integers(len(scene.class_ids)))]
        if vocab.color_of(cid) in used:
            continue
        if rng.random() < 0.5:
            mask = mask[:, ::-1]
        mh, mw = mask.shape
        for _ in range(PLACEMENT_ATTEMPTS):
            x0, y0 = int(rng.integers(0, w - mw + 1)), int(rng.integers(0, h - mh + 1))
            frame = (x0, y0, x0 + mw, y0 + mh)
            if all(_boxes_disjoint(frame, other) for other in placed):
                break
        else:
            continue
        image[y0:y0 + mh, x0:x0 + mw][mask] = color
        placed.append(frame)
        boxes.append(tuple(float(v) for v in frame))
        ids.append(cid)
        used.add(vocab.color_of(cid))
    return SceneRecord("recomposed", image, boxes, ids, caption_for([vocab.name(c) for c in ids]))


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def generate_dataset(vocab: Vocabulary, n_scenes: int, split: str, seed: int, out_dir,
                     image_size: tuple[int, int] = (64, 64)) -> dict:
    """Render one split into ``out_dir`` and merge it into the directory's manifest.

    train scenes draw from base classes only; eval scenes from every class.
    """
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}")
    out = Path(out_dir)
    (out / "scenes").mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise PermissionError(f"{out} is not writable")
    manifest_path = out / "manifest.json"
    manifest = {"format": "vldet-synth", "version": 1, "vocabulary": vocab.to_dict(),
                "image_size": list(image_size), "splits": {}}
    if manifest_path.exists():
        old = json.loads(manifest_path.read_text())
        if old.get("vocabulary") != vocab.to_dict() or old.get("image_size") != list(image_size):
            raise ValueError(f"{out} already holds a dataset with a different vocabulary or image size")
        manifest["splits"] = old.get("splits", {})

    allowed = vocab.base_ids if split == "train" else list(range(1, vocab.num_classes + 1))
    entries, records = [], []
    for i in range(n_scenes):
        rec = render_scene(vocab, allowed, seed, i, image_size, split)
        rel = f"scenes/{rec.scene_id}.vldt"
        save_tensor(out / rel, rec.image)
        entries.append({"scene_id": rec.scene_id, "file": rel, "sha256": _sha256(out / rel)})
        records.append(rec.annotation())
    manifest["splits"][split] = {"seed": seed, "scenes": entries}

    ann_path = out / "annotations.jsonl"
    kept = []
    if ann_path.exists():
        prefix = f"{split}_"
        kept = [line for line in ann_path.read_text().splitlines()
                if line and not json.loads(line)["scene_id"].startswith(prefix)]
    lines = kept + [json.dumps(r) for r in records]
    ann_path.write_text("".join(line + "\n" for line in lines))
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


@dataclass
class Dataset:
    root: Path
    vocab: Vocabulary
    split: str
    scenes: list[SceneRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.scenes)

    def __getitem__(self, i) -> SceneRecord:
        return self.scenes[i]


def load_dataset(root, split: str) -> Dataset:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json in {root}")
    manifest = json.loads(manifest_path.read_text())
    if split not in manifest["splits"]:
        raise KeyError(f"split {split!r} not in {root}")
    vocab = Vocabulary.from_dict(manifest["vocabulary"])
    ann = {}
    for line in (root / "annotations.jsonl").read_text().splitlines():
        if line:
            rec = json.loads(line)
            ann[rec["scene_id"]] = rec
    scenes = []
    for entry in manifest["splits"][split]["scenes"]:
        a = ann[entry["scene_id"]]
        image = load_tensor(root / entry["file"])
        scenes.append(SceneRecord(a["scene_id"], image, [tuple(b) for b in a["boxes"]],
                                  list(a["class_ids"]), a["caption"]))
    return Dataset(root, vocab, split, scenes)


def dataset_hash(root) -> str:
    """Content hash over the manifest, annotations and every scene tensor."""
    root = Path(root)
    h = hashlib.sha256()
    for rel in ["manifest.json", "annotations.jsonl"] + sorted(
        str(p.relative_to(root)) for p in (root / "scenes").glob("*.vldt")
    ):
        h.update(rel.encode())
        h.update((root / rel).read_bytes())
    return h.hexdigest()
