import json

import numpy as np
import pytest

from vldet.numeric import encode_tensor
from vldet.synthdata import (BACKGROUND_GRAY, MAX_SIDE, MIN_SIDE, PALETTE, LayoutError, Vocabulary, recompose, rescale,
                             build_vocabulary, caption_for, dataset_hash, generate_dataset, load_dataset,
                             render_scene, shape_mask, shift_flip)


def iou(a, b):
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


class TestVocabulary:
    def test_seed0_split(self, vocab):
        assert vocab.num_classes == 16
        assert vocab.novel_ids == [3, 4, 11, 12]
        assert vocab.base_ids == [1, 2, 5, 6, 7, 8, 9, 10, 13, 14, 15, 16]
        assert vocab.name(3) == "red triangle"

    @pytest.mark.parametrize("seed", range(20))
    def test_coverage(self, seed):
        v = build_vocabulary(4, 4, 4, seed)
        assert len(v.novel_ids) == 4 and not set(v.novel_ids) & set(v.base_ids)
        assert {v.color_of(i) for i in v.base_ids} == set(v.colors)
        assert {v.shape_of(i) for i in v.base_ids} == set(v.shapes)

    @pytest.mark.parametrize("args", [(4, 4, 16), (4, 4, 13), (2, 2, 3), (10, 4, 1), (4, 5, 1)])
    def test_impossible_requests(self, args):
        with pytest.raises(ValueError):
            build_vocabulary(*args)

    def test_dict_round_trip(self, vocab):
        assert Vocabulary.from_dict(json.loads(json.dumps(vocab.to_dict()))) == vocab


class TestRender:
    def test_deterministic(self, vocab):
        a = render_scene(vocab, vocab.base_ids, 7, 3)
        b = render_scene(vocab, vocab.base_ids, 7, 3)
        assert np.array_equal(a.image, b.image) and a.boxes == b.boxes and a.caption == b.caption
        c = render_scene(vocab, vocab.base_ids, 7, 4)
        assert not np.array_equal(a.image, c.image)

    @pytest.mark.parametrize("index", range(40))
    def test_layout_invariants(self, vocab, index):
        s = render_scene(vocab, vocab.base_ids, 0, index)
        assert s.image.shape == (64, 64, 3) and s.image.dtype == np.float32
        assert 1 <= len(s.boxes) <= 4
        assert set(s.class_ids) <= set(vocab.base_ids)
        colors = [vocab.color_of(c) for c in s.class_ids]
        assert len(set(colors)) == len(colors)
        for i, a in enumerate(s.boxes):
            assert 0 <= a[0] < a[2] <= 64 and 0 <= a[1] < a[3] <= 64
            assert max(a[2] - a[0], a[3] - a[1]) <= MAX_SIDE
            for b in s.boxes[i + 1:]:
                assert iou(a, b) <= 0.3

    def test_boxes_are_tight(self, vocab):
        s = render_scene(vocab, vocab.base_ids, 0, 5)
        for box, cid in zip(s.boxes, s.class_ids):
            x1, y1, x2, y2 = map(int, box)
            mask = np.all(s.image == np.array(PALETTE[vocab.color_of(cid)], np.float32), axis=-1)
            inside = mask[y1:y2, x1:x2]
            assert inside[0].any() and inside[-1].any() and inside[:, 0].any() and inside[:, -1].any()

    @pytest.mark.parametrize("index", range(10))
    def test_center_colored_outside_gray(self, vocab, index):
        s = render_scene(vocab, vocab.base_ids, 0, index)
        inside = np.zeros((64, 64), bool)
        for (x1, y1, x2, y2), cid in zip(s.boxes, s.class_ids):
            cy, cx = int((y1 + y2) / 2), int((x1 + x2) / 2)
            assert np.array_equal(s.image[cy, cx], np.array(PALETTE[vocab.color_of(cid)], np.float32))
            inside[int(y1):int(y2), int(x1):int(x2)] = True
        assert np.all(s.image[~inside] == BACKGROUND_GRAY)

    def test_background(self, vocab):
        s = render_scene(vocab, vocab.base_ids, 0, 0)
        assert s.image[0, 0].tolist() == [BACKGROUND_GRAY] * 3 or any(b[0] == 0 and b[1] == 0 for b in s.boxes)

    def test_caption(self, vocab):
        s = render_scene(vocab, vocab.base_ids, 0, 1)
        assert s.caption == caption_for([vocab.name(c) for c in s.class_ids])
        assert caption_for(["red square", "blue circle"]) == "a picture of a red square, a blue circle"

    def test_layout_error_when_space_runs_out(self, vocab):
        with pytest.raises(LayoutError):
            for i in range(50):
                render_scene(vocab, vocab.base_ids, 0, i, image_size=(MAX_SIDE, MAX_SIDE))

    @pytest.mark.parametrize("shape", ["circle", "square", "triangle", "diamond"])
    def test_masks_fit_frame_and_are_mirror_symmetric(self, shape):
        m = shape_mask(shape, 5, 7, 17, 32, 32)
        ys, xs = np.nonzero(m)
        assert xs.min() >= 5 and xs.max() < 22 and ys.min() >= 7 and ys.max() < 24
        crop = m[7:24, 5:22]
        assert np.array_equal(crop, crop[:, ::-1])

    def test_unknown_shape(self):
        with pytest.raises(ValueError):
            shape_mask("hexagon", 0, 0, 10, 16, 16)


def test_shift_flip_keeps_objects_intact(vocab):
    s = render_scene(vocab, vocab.base_ids, 0, 3)
    rng = np.random.default_rng(0)
    for _ in range(50):
        t = shift_flip(s, rng)
        assert t.caption == s.caption and t.class_ids == s.class_ids
        for a, b in zip(s.boxes, t.boxes):
            assert (a[2] - a[0], a[3] - a[1]) == (b[2] - b[0], b[3] - b[1])
            assert 0 <= b[0] and b[2] <= 64 and 0 <= b[1] and b[3] <= 64
        for color in {tuple(s.image[y, x]) for y, x in zip(*np.nonzero((s.image != BACKGROUND_GRAY).any(-1)))}:
            assert (np.all(s.image == color, -1).sum() == np.all(t.image == color, -1).sum())


@pytest.mark.parametrize("index", range(30))
def test_rescale_keeps_boxes_tight_and_in_frame(vocab, index):
    s = render_scene(vocab, vocab.base_ids, 0, index)
    t = rescale(s, np.random.default_rng(index))
    assert t.caption == s.caption and t.class_ids == s.class_ids
    colors = {tuple(np.array(PALETTE[c], np.float32)) for c in PALETTE}
    assert {tuple(p) for p in t.image.reshape(-1, 3)} <= colors | {(BACKGROUND_GRAY,) * 3}
    for box, cid in zip(t.boxes, t.class_ids):
        ys, xs = np.nonzero(np.all(t.image == np.array(PALETTE[vocab.color_of(cid)], np.float32), -1))
        assert box == (xs.min(), ys.min(), xs.max() + 1, ys.max() + 1)
        assert 0 <= box[0] and box[2] <= 64 and 0 <= box[1] and box[3] <= 64


def test_rescale_factor_range(vocab):
    s = render_scene(vocab, vocab.base_ids, 0, 0)
    rng = np.random.default_rng(0)
    ratios = []
    for _ in range(40):
        t = rescale(s, rng, 0.75, 1.35)
        ratios.append((t.boxes[0][2] - t.boxes[0][0]) / (s.boxes[0][2] - s.boxes[0][0]))
    assert min(ratios) > 0.6 and max(ratios) < 1.5 and max(ratios) - min(ratios) > 0.2


def test_recompose_builds_valid_scenes(vocab):
    pool = [render_scene(vocab, vocab.base_ids, 0, i) for i in range(20)]
    rng = np.random.default_rng(0)
    seen = set()
    for _ in range(100):
        t = recompose(pool, vocab, rng)
        assert 1 <= len(t.boxes) <= 4 and set(t.class_ids) <= set(vocab.base_ids)
        colors = [vocab.color_of(c) for c in t.class_ids]
        assert len(set(colors)) == len(colors)
        assert t.caption == caption_for([vocab.name(c) for c in t.class_ids])
        for i, box in enumerate(t.boxes):
            ys, xs = np.nonzero(np.all(t.image == np.array(PALETTE[colors[i]], np.float32), -1))
            assert box == (xs.min(), ys.min(), xs.max() + 1, ys.max() + 1)
            for other in t.boxes[i + 1:]:
                assert iou(box, other) == 0.0
        seen.add(tuple(sorted(t.class_ids)))
    assert len(seen) > 20


def test_recompose_only_reuses_pool_pixels(vocab):
    pool = [render_scene(vocab, [vocab.base_ids[0]], 0, i) for i in range(5)]
    t = recompose(pool, vocab, np.random.default_rng(1))
    assert t.class_ids == [vocab.base_ids[0]]


class TestDataset:
    def test_layout_and_round_trip(self, small_data, vocab):
        manifest = json.loads((small_data / "manifest.json").read_text())
        assert manifest["vocabulary"]["classes"] == vocab.classes
        assert set(manifest["splits"]) == {"train", "eval"}
        ds = load_dataset(small_data, "train")
        assert len(ds) == 16
        for entry, scene in zip(manifest["splits"]["train"]["scenes"], ds.scenes):
            assert (small_data / entry["file"]).read_bytes() == encode_tensor(scene.image)
            assert set(scene.class_ids) <= set(vocab.base_ids)
        ev = load_dataset(small_data, "eval")
        assert len(ev) == 6 and ev.scenes[0].scene_id == "eval_00000"

    def test_same_flags_same_hash(self, tmp_path, vocab):
        for d in ("a", "b"):
            generate_dataset(vocab, 5, "train", 3, tmp_path / d)
            generate_dataset(vocab, 3, "eval", 3, tmp_path / d)
        assert dataset_hash(tmp_path / "a") == dataset_hash(tmp_path / "b")
        generate_dataset(vocab, 5, "train", 4, tmp_path / "c")
        generate_dataset(vocab, 3, "eval", 3, tmp_path / "c")
        assert dataset_hash(tmp_path / "a") != dataset_hash(tmp_path / "c")

    def test_regenerating_a_split_replaces_it(self, tmp_path, vocab):
        generate_dataset(vocab, 5, "train", 0, tmp_path)
        generate_dataset(vocab, 2, "train", 0, tmp_path)
        lines = (tmp_path / "annotations.jsonl").read_text().splitlines()
        assert len(lines) == 2
        assert len(load_dataset(tmp_path, "train")) == 2

    def test_mismatched_vocabulary_rejected(self, tmp_path, vocab):
        generate_dataset(vocab, 2, "train", 0, tmp_path)
        with pytest.raises(ValueError):
            generate_dataset(build_vocabulary(3, 4, 2, 0), 2, "eval", 0, tmp_path)

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path, "train")

    def test_bad_split(self, tmp_path, vocab):
        with pytest.raises(ValueError):
            generate_dataset(vocab, 1, "test", 0, tmp_path)
