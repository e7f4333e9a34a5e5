"""Acceptance suite: one test per headline criterion, each reporting a PASS/FAIL line.

The training criteria (7, 8) share trained models through a session fixture.
Set ``VLDET_ACCEPTANCE_CACHE=<dir>`` to keep those checkpoints between runs;
cached entries are keyed by config, dataset hash and step count, and carry
the wall clock measured when they were produced.
"""

import hashlib
import json
import math
import os
import statistics
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE_LINES
from test_boxes import brute_nms, random_boxes
from test_evaluation import exhaustive_ap, random_instance
from test_objective import infonce_oracle
from vldet.boxes import decode_deltas, encode_deltas, nms
from vldet.cli import main
from vldet.config import ConfigError, ModelConfig
from vldet.evaluation import average_precision, evaluate
from vldet.fusion import VLFuse, zero_fuse_
from vldet.gradcheck import CHECKS, battery_report, run_battery
from vldet.numeric import encode_tensor
from vldet.objective import loss_icl
from vldet.pyramid import pyramid_shapes
from vldet.rpn import objectness_score
from vldet.synthdata import build_vocabulary, dataset_hash, generate_dataset, load_dataset
from vldet.train import FreezePolicy, build_model, checkpoint_bytes, fit, load_checkpoint, save_checkpoint

pytestmark = pytest.mark.acceptance

TRAIN_SCENES, EVAL_SCENES, STEPS = 50, 30, 2000
NOVEL_SEEDS = (0, 1, 2)
WALL_CLOCK_LIMIT = 15 * 60
# never appear in the vocabulary; stand-ins for the novel prompts in the control
UNRELATED_NAMES = ["wooden ladder", "quiet harbor", "paper lantern", "silver kettle"]


def report(k: int, ok: bool, detail: str) -> None:
    line = f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[k] = line
    print(line)


# ---------------------------------------------------------------------------
# shared fixtures


@pytest.fixture(scope="session")
def bench(tmp_path_factory):
    """The 50 / 30 scene benchmark with the default 4x4 vocabulary."""
    root = tmp_path_factory.mktemp("bench")
    vocab = build_vocabulary(4, 4, 4, seed=0)
    generate_dataset(vocab, TRAIN_SCENES, "train", 0, root)
    generate_dataset(vocab, EVAL_SCENES, "eval", 0, root)
    return root


class Runs:
    """Trains (or reloads) one full-length model per seed on the benchmark."""

    def __init__(self, bench: Path, scratch: Path):
        self.bench = bench
        self.train = load_dataset(bench, "train")
        self.eval = load_dataset(bench, "eval")
        self.cache = Path(os.environ.get("VLDET_ACCEPTANCE_CACHE") or scratch)
        self.cache.mkdir(parents=True, exist_ok=True)
        self.data_hash = dataset_hash(bench)
        self._models = {}

    def _key(self, cfg: ModelConfig) -> str:
        doc = json.dumps({"config": cfg.to_dict(), "data": self.data_hash, "steps": STEPS}, sort_keys=True)
        return hashlib.sha256(doc.encode()).hexdigest()[:16]

    def get(self, seed: int):
        if seed in self._models:
            return self._models[seed]
        cfg = ModelConfig(seed=seed)
        ckpt = self.cache / f"run_{self._key(cfg)}.ckpt"
        meta_path = ckpt.with_suffix(".json")
        if ckpt.exists() and meta_path.exists():
            model, _ = load_checkpoint(ckpt, config=cfg)
            meta = json.loads(meta_path.read_text())
        else:
            model = build_model(cfg)
            start = time.perf_counter()
            result = fit(model, self.train, cfg, steps=STEPS)
            seconds = time.perf_counter() - start
            save_checkpoint(model, ckpt, step=result.step, rng_state=result.rng_state)
            meta = {"seconds": seconds, "first_loss": result.log[0]["total"],
                    "last_loss": result.log[-1]["total"], "steps": result.step}
            meta_path.write_text(json.dumps(meta, sort_keys=True))
        model.eval()
        self._models[seed] = (model, meta)
        return self._models[seed]


@pytest.fixture(scope="session")
def runs(bench, tmp_path_factory):
    return Runs(bench, tmp_path_factory.mktemp("runs"))


class ScrambledNovel:
    """Control detector: novel prompt rows swapped for a random permutation of unrelated-name embeddings."""

    def __init__(self, model, novel_names, seed):
        self.model = model
        self.novel = set(novel_names)
        self.seed = seed

    def bind_prompts(self, names):
        with torch.no_grad():
            l_cls = self.model.encode_prompts(names).clone()
            stand_in = self.model.encode_prompts(UNRELATED_NAMES)[1:]
        rows = [i + 1 for i, n in enumerate(names) if n in self.novel]
        perm = np.random.default_rng(self.seed).permutation(len(UNRELATED_NAMES))[:len(rows)]
        for row, j in zip(rows, perm):
            l_cls[row] = stand_in[j]

        def detector(scene):
            image = torch.from_numpy(np.ascontiguousarray(scene.image)).permute(2, 0, 1)
            return self.model.detect(image, l_cls)

        return detector


# ---------------------------------------------------------------------------
# criteria


def test_c01_gradient_battery():
    start = time.perf_counter()
    rep = battery_report(run_battery(seeds=range(5), eps=1e-5, tol=1e-4))
    seconds = time.perf_counter() - start
    worst = max(v["max_relative_error"] for v in rep["checks"].values())
    complete = set(rep["checks"]) == set(CHECKS) and all(v["seeds"] == 5 for v in rep["checks"].values())
    ok = rep["passed"] and complete and worst <= 1e-4 and seconds < 120
    report(1, ok, f"{len(CHECKS)} checks x 5 seeds, worst rel err {worst:.2e} (<= 1e-4), {seconds:.1f}s (< 120s)")
    assert ok, json.dumps(rep["checks"], indent=1)


def test_c02_contrastive_equivalences():
    g = torch.Generator().manual_seed(2)
    zero = True
    for _ in range(100):
        b = int(torch.randint(1, 9, (1,), generator=g))
        v = torch.randn(b, 16, generator=g, dtype=torch.float64)
        l = torch.randn(b, 16, generator=g, dtype=torch.float64)
        zero &= loss_icl(v, l, 1, 0.07).item() == 0.0
    worst = 0.0
    for b in (2, 4, 8):
        for _ in range(10):
            v = torch.randn(b, 16, generator=g, dtype=torch.float64)
            l = torch.randn(b, 16, generator=g, dtype=torch.float64)
            worst = max(worst, abs(loss_icl(v, l, b, 0.07).item() - infonce_oracle(v.numpy(), l.numpy(), 0.07)))
    ok = zero and worst <= 1e-9
    report(2, ok, f"M=1 exactly zero on 100 inputs: {zero}; M=B vs full-batch oracle max abs diff {worst:.1e} (<= 1e-9)")
    assert ok


def test_c03_objectness_properties():
    tau = 0.07
    g = torch.Generator().manual_seed(3)
    emb = torch.randn(10_000, 8, generator=g, dtype=torch.float64)
    text = torch.randn(10_000, 5, 8, generator=g, dtype=torch.float64)
    bound = objectness_score(emb.unsqueeze(1), text, tau).abs().max().item()

    emb = torch.randn(200, 8, generator=g, dtype=torch.float64)
    text = torch.randn(6, 8, generator=g, dtype=torch.float64)
    base = objectness_score(emb, text, tau)
    perm = torch.cat([torch.zeros(1, dtype=torch.long), 1 + torch.randperm(5, generator=g)])
    perm_err = (objectness_score(emb, text[perm], tau) - base).abs().max().item()
    scale = torch.rand(200, 1, generator=g, dtype=torch.float64) * 10 + 0.1
    tscale = torch.rand(6, 1, generator=g, dtype=torch.float64) * 10 + 0.1
    scale_err = (objectness_score(emb * scale, text * tscale, tau) - base).abs().max().item()

    def unit(c):
        return [c, math.sqrt(1 - c * c), 0.0]

    worked = objectness_score(torch.tensor([[1.0, 0.0, 0.0]], dtype=torch.float64),
                              torch.tensor([unit(0.1), unit(0.8), unit(0.6)], dtype=torch.float64), tau).item()
    ok = bound <= 2 / tau and perm_err <= 1e-9 and scale_err <= 1e-9 and abs(worked - 8.571428) <= 1e-6
    report(3, ok, f"max |s| {bound:.3f} <= {2 / tau:.3f}; permutation {perm_err:.1e}; rescale {scale_err:.1e}; "
                  f"worked value {worked:.6f}")
    assert ok


def test_c04_pyramid_shapes():
    def expected(h, w, p):
        gh, gw = h // p, w // p
        return [(4 * gh, 4 * gw), (2 * gh, 2 * gw), (gh, gw), (gh // 2, gw // 2), (gh // 4, gw // 4)]

    exact = all(pyramid_shapes(h, w, p) == expected(h, w, p) for h, w, p in [(64, 64, 16), (128, 128, 16),
                                                                             (256, 256, 32)])
    errors = 0
    for h, w, p in [(60, 64, 16), (64, 64, 12), (32, 32, 16), (64, 96, 16)]:
        try:
            pyramid_shapes(h, w, p)
        except (ValueError, ConfigError):
            errors += 1
    ok = exact and errors == 4
    report(4, ok, f"formula exact on 3 configs: {exact}; divisibility violations rejected {errors}/4")
    assert ok


def test_c05_geometry_oracles():
    rng = np.random.default_rng(5)
    boxes = torch.from_numpy(random_boxes(rng, 1000))
    anchors = torch.from_numpy(random_boxes(rng, 1000))
    rt = (decode_deltas(anchors, encode_deltas(boxes, anchors)) - boxes).abs().max().item()
    nms_ok = ap_ok = 0
    for seed in range(100):
        r = np.random.default_rng(seed)
        n = int(r.integers(1, 11))
        b, s = random_boxes(r, n), r.random(n)
        nms_ok += nms(torch.from_numpy(b), torch.from_numpy(s), 0.5).tolist() == brute_nms(b, s, 0.5)
        dets, gts = random_instance(seed, n_gt=int(r.integers(1, 6)), n_det=int(r.integers(0, 11)))
        ap_ok += average_precision(dets, gts) == exhaustive_ap(dets, gts)
    ok = rt <= 1e-6 and nms_ok == 100 and ap_ok == 100
    report(5, ok, f"delta round trip max err {rt:.1e} (<= 1e-6); NMS exact {nms_ok}/100; AP exact {ap_ok}/100")
    assert ok


def test_c06_residual_identity():
    fuse = zero_fuse_(VLFuse(64, 32, 4).double())
    v = torch.randn(2, 16, 64, dtype=torch.float64)
    l = torch.randn(2, 9, 32, dtype=torch.float64)
    v2, l2 = fuse(v, l)
    ok = torch.equal(v2, v) and torch.equal(l2, l)
    report(6, ok, "zeroed fusion returns both modalities bit-identically (float64)")
    assert ok


def test_c07_overfit_run(runs):
    model, meta = runs.get(0)
    rep = evaluate(model, runs.eval)
    ratio = meta["last_loss"] / meta["first_loss"]
    ap = rep.ap50_base or 0.0
    cores = os.cpu_count()
    ok = ap >= 0.80 and meta["seconds"] <= WALL_CLOCK_LIMIT and ratio <= 0.20
    report(7, ok, f"ap50_base {ap:.3f} (>= 0.80); train {meta['seconds']:.0f}s on {cores} core(s) (<= 900s); "
                  f"loss ratio {ratio:.3f} (<= 0.20)")
    assert ap >= 0.80, json.dumps(rep.per_class, indent=1)
    assert meta["seconds"] <= WALL_CLOCK_LIMIT
    assert ratio <= 0.20


def test_c08_novel_beats_scrambled_control(runs):
    vocab = runs.eval.vocab
    novel_names = [vocab.name(i) for i in vocab.novel_ids]
    real, control = [], []
    for seed in NOVEL_SEEDS:
        model, _ = runs.get(seed)
        real.append(evaluate(model, runs.eval).ap50_novel)
        control.append(evaluate(ScrambledNovel(model, novel_names, seed), runs.eval).ap50_novel)
    margin = statistics.median(real) - statistics.median(control)
    ok = margin >= 0.10
    report(8, ok, f"median ap50_novel {statistics.median(real):.3f} vs control {statistics.median(control):.3f}, "
                  f"margin {margin:+.3f} (>= 0.10); per seed {[round(x, 3) for x in real]} vs "
                  f"{[round(x, 3) for x in control]}")
    assert ok


def test_c09_freeze_policies(bench):
    train = load_dataset(bench, "train")
    cfg = ModelConfig()
    frozen_prefixes = tuple(p + "." for p in FreezePolicy.parse("v2l1,v2l2").prefixes())
    summary = {}
    for spec in ("v2l1,v2l2", None):
        model = build_model(cfg)
        before = {n: p.detach().clone() for n, p in model.named_parameters()}
        fit(model, train, cfg, steps=100, freeze=FreezePolicy.parse(spec))
        same = {n for n, p in model.named_parameters() if torch.equal(before[n], p)}
        expect = {n for n in before if n.startswith(frozen_prefixes)} if spec else set()
        summary[spec] = (same == expect, len(same), len(before))
    ok = all(v[0] for v in summary.values()) and summary["v2l1,v2l2"][1] > 0
    report(9, ok, f"freeze v2l1,v2l2: {summary['v2l1,v2l2'][1]} frozen tensors bit-identical, all others changed; "
                  f"no freeze: {summary[None][2] - summary[None][1]}/{summary[None][2]} changed")
    assert ok


def _sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def test_c10_determinism_and_persistence(bench, runs, tmp_path):
    hashes = []
    for tag in ("a", "b"):
        assert main(["train", "--data", str(bench), "--out", str(tmp_path / f"{tag}.ckpt"), "--steps", "20"]) == 0
        hashes.append((_sha(tmp_path / f"{tag}.ckpt.log.jsonl"), _sha(tmp_path / f"{tag}.ckpt")))
    logs_equal = hashes[0] == hashes[1]

    model, _ = runs.get(0)
    serial = evaluate(model, runs.eval, workers=1).to_json()
    parallel = evaluate(model, runs.eval, workers=4).to_json()
    eval_equal = serial == parallel

    blob = checkpoint_bytes(model)
    (tmp_path / "m.ckpt").write_bytes(blob)
    reloaded, _ = load_checkpoint(tmp_path / "m.ckpt")
    ckpt_equal = checkpoint_bytes(reloaded) == blob

    again = tmp_path / "regen"
    generate_dataset(runs.eval.vocab, TRAIN_SCENES, "train", 0, again)
    generate_dataset(runs.eval.vocab, EVAL_SCENES, "eval", 0, again)
    manifest = json.loads((bench / "manifest.json").read_text())
    reencoded = all((bench / e["file"]).read_bytes() == encode_tensor(s.image)
                    for split, ds in (("train", runs.train), ("eval", runs.eval))
                    for e, s in zip(manifest["splits"][split]["scenes"], ds.scenes))
    data_equal = dataset_hash(again) == dataset_hash(bench) and reencoded

    ok = logs_equal and eval_equal and ckpt_equal and data_equal
    report(10, ok, f"log+checkpoint hashes equal: {logs_equal}; serial == parallel eval: {eval_equal}; "
                   f"checkpoint round trip: {ckpt_equal}; dataset round trip: {data_equal}")
    assert ok


def test_c11_minibatch_sweep(bench, tmp_path, capsys):
    code = main(["sweep-minibatch", "--data", str(bench), "--values", "1,2,4,8", "--out", str(tmp_path / "sweep.json"),
                 "--steps", "20"])
    out = capsys.readouterr().out
    doc = json.loads(out) if code == 0 else {"runs": []}
    entries = [r for r in doc["runs"] if r["ap50_all"] is not None]
    m1 = [r for r in doc["runs"] if r["minibatch"] == 1]
    ok = code == 0 and len(entries) == 4 and [r["minibatch"] for r in doc["runs"]] == [1, 2, 4, 8] \
        and bool(m1) and m1[0]["icl_zero_every_step"]
    report(11, ok, f"exit {code}; AP entries {len(entries)}/4; M=1 icl zero every step: "
                   f"{bool(m1) and m1[0]['icl_zero_every_step']}")
    assert ok
