"""Double-precision gradient-check battery over every differentiable stage of the detector.

Each check wraps a stage as a scalar function of its tensor inputs *and*
its parameters (via ``torch.func.functional_call``). Stages with tensor
outputs are reduced with a fixed random weighting so every output element
contributes a distinct coefficient.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from typing import Callable

import torch
from torch import nn
from torch.func import functional_call

from .config import ModelConfig
from .fusion import TextRefine, VLFuse
from .numeric import grad_check
from .objective import loss_icl
from .pyramid import VLPUB, PyramidFeatures, pyramid_shapes, pyramid_strides
from .roi import ROIHead, loss_ral, multilevel_roi_align, roi_box_loss
from .rpn import SigRPN, loss_aal, rpn_box_loss

CHECKS = ("loss_icl", "loss_aal", "loss_ral", "rpn_box_loss", "roi_box_loss",
          "vl_fuse", "text_refine", "vl_pub", "sig_rpn", "roi_path")

# a deliberately small model: 32x32 images, 4x4 patch grid, width 8
TINY = dict(image_height=32, image_width=32, patch_size=8, c_v=8, c_pyr=8, c_l=8, heads=2,
            encoder_depth=1, roi_hidden=16, vocab_size=64, max_caption_tokens=8)


def tiny_config(**overrides) -> ModelConfig:
    return ModelConfig(**{**TINY, **overrides})


@dataclass
class CheckResult:
    name: str
    seed: int
    max_relative_error: float
    passed: bool
    checked: int
    seconds: float


def _weighted_sum(outputs, weights):
    return sum((o * w).sum() for o, w in zip(outputs, weights))


def _module_fn(module: nn.Module, n_inputs: int, forward: Callable):
    """Scalar fn(*inputs, *params) running ``forward(module_call, *inputs)``."""
    names = [n for n, _ in module.named_parameters()]

    def fn(*tensors):
        params = dict(zip(names, tensors[n_inputs:]))

        def call(*args):
            return functional_call(module, params, args)

        return forward(call, *tensors[:n_inputs])

    return fn, [p.detach() for _, p in module.named_parameters()]


def _build(name: str, seed: int):
    """(fn, inputs) for one check, fully determined by ``seed``."""
    g = torch.Generator().manual_seed(seed)
    dt = torch.float64

    def randn(*shape):
        return torch.randn(*shape, generator=g, dtype=dt)

    cfg = tiny_config(seed=seed)
    tau = cfg.tau_icl

    if name == "loss_icl":
        return (lambda v, l: loss_icl(v, l, 4, tau)), [randn(8, 8), randn(8, 8)]

    if name == "loss_aal":
        labels = torch.randint(-1, 2, (2, 40), generator=g)
        labels[:, 0] = 1
        labels[:, 1] = 0
        return (lambda e, t: loss_aal(e, t, labels, tau)), [randn(2, 40, 8), randn(2, 5, 8)]

    if name == "loss_ral":
        targets = torch.randint(0, 5, (12,), generator=g)
        return (lambda r, t: loss_ral(r, t, targets, tau)), [randn(12, 8), randn(5, 8)]

    if name in ("rpn_box_loss", "roi_box_loss"):
        if name == "rpn_box_loss":
            mask = torch.randint(-1, 2, (30,), generator=g)
            mask[0] = 1
            loss = rpn_box_loss
        else:
            mask = torch.rand(30, generator=g) < 0.4
            mask[0] = True
            loss = roi_box_loss
        # spread residuals over both the quadratic and the linear branch
        return (lambda p, t: loss(p, t, mask)), [randn(30, 4) * 0.3, randn(30, 4) * 0.3]

    torch.manual_seed(seed)
    if name == "vl_fuse":
        module = VLFuse(12, 8, 2).to(dt)
        v, l = randn(2, 10, 12), randn(2, 4, 8)
        w = [randn(2, 10, 12), randn(2, 4, 8)]
        fn, params = _module_fn(module, 2, lambda call, v, l: _weighted_sum(call(v, l), w))
        return fn, [v, l, *params]

    if name == "text_refine":
        module = TextRefine(8, 2).to(dt)
        w = randn(2, 5, 8)
        fn, params = _module_fn(module, 1, lambda call, l: (call(l) * w).sum())
        return fn, [randn(2, 5, 8), *params]

    grid = cfg.grid
    shapes = pyramid_shapes(cfg.image_height, cfg.image_width, cfg.patch_size)

    if name == "vl_pub":
        module = VLPUB(cfg).to(dt)
        w_levels = [randn(2, cfg.c_pyr, h, w_) for h, w_ in shapes]
        w_text = randn(2, 4, cfg.c_l)

        def forward(call, v0, l_cls, l_cap):
            pyr, l_pub = call(v0, l_cls, l_cap)
            return _weighted_sum(pyr.levels, w_levels) + (l_pub * w_text).sum()

        fn, params = _module_fn(module, 3, forward)
        return fn, [randn(2, grid[0] * grid[1], cfg.c_v), randn(4, cfg.c_l), randn(2, cfg.c_l), *params]

    if name == "sig_rpn":
        module = SigRPN(cfg).to(dt)
        k = sum(h * w_ for h, w_ in shapes) * cfg.anchors_per_location
        w_emb, w_delta, w_text = randn(2, k, cfg.c_l), randn(2, k, 4), randn(2, 4, cfg.c_l)
        strides = pyramid_strides(cfg.patch_size)

        def forward(call, l_pub, *levels):
            out = call(PyramidFeatures(list(levels), strides), l_pub)
            return _weighted_sum([out.embeddings, out.deltas, out.l_cls_rpn], [w_emb, w_delta, w_text])

        fn, params = _module_fn(module, 6, forward)
        levels = [randn(2, cfg.c_pyr, h, w_) for h, w_ in shapes]
        return fn, [randn(2, 4, cfg.c_l), *levels, *params]

    if name == "roi_path":
        module = ROIHead(cfg).to(dt)
        strides = pyramid_strides(cfg.patch_size)
        # boxes spanning several pyramid levels, sides 4..28 px, inside a 32x32 image
        n = 10
        side = 4 + 24 * torch.rand(n, 2, generator=g, dtype=dt)
        x0 = torch.rand(n, generator=g, dtype=dt) * (32 - side[:, 0])
        y0 = torch.rand(n, generator=g, dtype=dt) * (32 - side[:, 1])
        boxes = torch.stack([x0, y0, x0 + side[:, 0], y0 + side[:, 1]], 1)
        batch_index = torch.randint(0, 2, (n,), generator=g)
        w_emb, w_delta = randn(n, cfg.c_l), randn(n, 4)

        def forward(call, *levels):
            patches = multilevel_roi_align(PyramidFeatures(list(levels), strides), boxes, batch_index,
                                           cfg.patch_size)
            emb, deltas = call(patches)
            return _weighted_sum([emb, deltas], [w_emb, w_delta])

        fn, params = _module_fn(module, 5, forward)
        levels = [randn(2, cfg.c_pyr, h, w_) for h, w_ in shapes]
        return fn, [*levels, *params]

    raise KeyError(f"unknown check {name!r}")


def run_check(name: str, seed: int, eps: float = 1e-5, tol: float = 1e-4,
              max_per_input: int | None = 6) -> CheckResult:
    start = time.perf_counter()
    fn, inputs = _build(name, seed)
    report = grad_check(fn, inputs, eps=eps, tol=tol, max_per_input=max_per_input,
                        generator=torch.Generator().manual_seed(1000 + seed))
    return CheckResult(name, seed, report.max_relative_error, report.passed, report.checked,
                       time.perf_counter() - start)


def run_battery(seeds=range(5), eps: float = 1e-5, tol: float = 1e-4, checks=CHECKS,
                max_per_input: int | None = 6) -> list[CheckResult]:
    return [run_check(name, s, eps, tol, max_per_input) for name in checks for s in seeds]


def battery_report(results: list[CheckResult]) -> dict:
    """One entry per check with its worst error over seeds, plus every individual run."""
    summary = {}
    for r in results:
        entry = summary.setdefault(r.name, {"max_relative_error": 0.0, "passed": True, "seeds": 0})
        entry["max_relative_error"] = max(entry["max_relative_error"], r.max_relative_error)
        entry["passed"] = entry["passed"] and r.passed
        entry["seeds"] += 1
    return {
        "passed": all(r.passed for r in results),
        "checks": summary,
        "runs": [asdict(r) for r in results],
        "seconds": sum(r.seconds for r in results),
    }
