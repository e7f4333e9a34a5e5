"""AP50 evaluation with base / novel / all split aggregation."""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

RECALL_POINTS = np.linspace(0.0, 1.0, 101)


def iou(a, b) -> float:
    """IoU of two (x1, y1, x2, y2) boxes."""
    for box in (a, b):
        if box[2] <= box[0] or box[3] <= box[1]:
            raise ValueError(f"degenerate box {tuple(box)}")
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def match_detections(detections, gts, iou_threshold: float = 0.5) -> list[bool]:
    """Greedy matching in descending score order.

    detections: list of (image_id, score, box); gts: dict image_id -> list of
    boxes. Each gt is claimed at most once, by the highest-IoU unclaimed
    candidate. Returns a true-positive flag per detection in sorted order.
    """
    order = sorted(range(len(detections)), key=lambda i: -detections[i][1])
    taken = {img: [False] * len(boxes) for img, boxes in gts.items()}
    flags = []
    for i in order:
        img, _, box = detections[i]
        best, best_j = iou_threshold, -1
        for j, g in enumerate(gts.get(img, [])):
            if taken[img][j]:
                continue
            o = iou(box, g)
            if o >= best:
                best, best_j = o, j
        if best_j >= 0:
            taken[img][best_j] = True
        flags.append(best_j >= 0)
    return flags


def average_precision(detections, gts, iou_threshold: float = 0.5) -> float | None:
    """101-point interpolated AP for one class; ``None`` when the class has no gt."""
    n_gt = sum(len(v) for v in gts.values())
    if n_gt == 0:
        return None
    if not detections:
        return 0.0
    tp = np.array(match_detections(detections, gts, iou_threshold), dtype=np.float64)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(sampled.mean())


@dataclass
class EvalReport:
    ap50_base: float | None
    ap50_novel: float | None
    ap50_all: float | None
    per_class: dict = field(default_factory=dict)
    prompts: list = field(default_factory=list)
    num_scenes: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, **kw)


def _mean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def default_workers() -> int:
    env = os.environ.get("VLDET_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def evaluate(model, dataset, prompt_names: Sequence[str] | None = None, workers: int | None = None) -> EvalReport:
    """Run the detector over every scene and aggregate per-class AP50.

    ``model`` must provide ``bind_prompts(names)`` returning a callable
    ``scene -> list[Detection]`` whose ``class_id`` indexes ``names`` from 1.
    Only classes that are both prompted and present in the eval set are
    scored.
    """
    if len(dataset) == 0:
        raise ValueError("evaluate: empty dataset")
    vocab = dataset.vocab
    prompts = list(prompt_names) if prompt_names is not None else vocab.classes
    if not prompts:
        raise ValueError("evaluate: empty prompt set")
    name_to_id = vocab.ids_for(prompts)
    detector = model.bind_prompts(prompts)
    workers = workers or 1
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(detector, dataset.scenes))
    else:
        outputs = [detector(s) for s in dataset.scenes]

    gts = {}
    dets = {}
    for scene, found in zip(dataset.scenes, outputs):
        for box, cid in zip(scene.boxes, scene.class_ids):
            gts.setdefault(cid, {}).setdefault(scene.scene_id, []).append(tuple(box))
        for d in found:
            cid = name_to_id.get(prompts[d.class_id - 1])
            if cid is not None:
                dets.setdefault(cid, []).append((scene.scene_id, d.score, tuple(d.box)))

    per_class = {}
    for cid in sorted(set(name_to_id.values()) & set(gts)):
        ap = average_precision(dets.get(cid, []), gts[cid])
        per_class[vocab.name(cid)] = {
            "class_id": cid,
            "split": "base" if cid in vocab.base_ids else "novel",
            "ap50": ap,
            "num_gt": sum(len(v) for v in gts[cid].values()),
            "num_det": len(dets.get(cid, [])),
        }
    base = [v["ap50"] for v in per_class.values() if v["split"] == "base"]
    novel = [v["ap50"] for v in per_class.values() if v["split"] == "novel"]
    return EvalReport(_mean(base), _mean(novel), _mean(base + novel), per_class, prompts, len(dataset))
