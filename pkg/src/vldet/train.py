"""Training loop, freeze policies, AdamW groups and the checkpoint container."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import ModelConfig
from .model import IMAGE_ENCODER, TEXT_ENCODER, V2L1, V2L2, VLDet, make_batch, registry_name
from .numeric import decode_tensor, encode_tensor
from .objective import LossBreakdown, total_loss
from .synthdata import recompose, rescale, shift_flip

log = logging.getLogger(__name__)

CKPT_MAGIC = b"VLDTCKPT"
CKPT_VERSION = 1


class NonFiniteLoss(FloatingPointError):
    def __init__(self, message: str, breakdown: dict, step: int | None = None):
        super().__init__(message)
        self.breakdown = breakdown
        self.step = step


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class FreezePolicy:
    freeze_el: bool = False
    freeze_v2l1: bool = False
    freeze_v2l2: bool = False
    freeze_ev: bool = False

    FLAGS = {"el": "freeze_el", "v2l1": "freeze_v2l1", "v2l2": "freeze_v2l2", "ev": "freeze_ev"}

    @classmethod
    def parse(cls, spec: str | None) -> "FreezePolicy":
        """``"v2l1,v2l2"`` -> policy. Unknown names raise ValueError."""
        kwargs = {}
        for part in (spec or "").split(","):
            part = part.strip().lower()
            if not part:
                continue
            if part not in cls.FLAGS:
                raise ValueError(f"unknown freeze target {part!r} (choose from {', '.join(cls.FLAGS)})")
            kwargs[cls.FLAGS[part]] = True
        return cls(**kwargs)

    def names(self) -> list[str]:
        return [k for k, attr in self.FLAGS.items() if getattr(self, attr)]

    def prefixes(self) -> list[str]:
        table = {"el": TEXT_ENCODER, "v2l1": V2L1, "v2l2": V2L2, "ev": IMAGE_ENCODER}
        return [table[n] for n in self.names()]

    def apply(self, model: VLDet) -> list[str]:
        """Mark matching parameters frozen; returns their registry names."""
        frozen = []
        prefixes = self.prefixes()
        for name, p in model.named_parameters():
            hit = any(name == pre or name.startswith(pre + ".") for pre in prefixes)
            p.requires_grad_(not hit)
            if hit:
                frozen.append(registry_name(name))
        return frozen


def build_model(cfg: ModelConfig, dtype=torch.float32) -> VLDet:
    """Seeded construction that leaves the global RNG untouched."""
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        model = VLDet(cfg)
    return model.to(dtype)


def build_optimizer(model: VLDet, cfg: ModelConfig) -> torch.optim.AdamW:
    """AdamW with a separate (lower) learning rate for the text encoder; frozen tensors excluded."""
    text, rest = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        (text if name.startswith(TEXT_ENCODER + ".") else rest).append(p)
    groups = [g for g in ({"params": rest, "lr": cfg.lr, "name": "rest"},
                          {"params": text, "lr": cfg.lr_text, "name": "text"}) if g["params"]]
    return torch.optim.AdamW(groups, lr=cfg.lr, weight_decay=cfg.weight_decay)


def optimizer_step(model: VLDet, optimizer: torch.optim.Optimizer, grad_clip: float | None) -> float:
    """Clip by global norm (when set) and apply one update. Returns the pre-clip norm."""
    params = [p for p in model.parameters() if p.requires_grad and p.grad is not None]
    norm = torch.nn.utils.clip_grad_norm_(params, grad_clip) if grad_clip else torch.zeros(())
    optimizer.step()
    return float(norm)


def lr_schedule(optimizer, cfg: ModelConfig, total_steps: int) -> torch.optim.lr_scheduler.LambdaLR:
    """Per-step multiplier on every group's base rate: 1 (constant) or a half-cosine to 0."""
    if cfg.lr_schedule == "cosine" and total_steps > 0:
        return torch.optim.lr_scheduler.LambdaLR(
            optimizer, lambda t: 0.5 * (1.0 + math.cos(math.pi * min(t, total_steps) / total_steps)))
    return torch.optim.lr_scheduler.LambdaLR(optimizer, lambda t: 1.0)


def train_step(model: VLDet, batch, optimizer, cfg: ModelConfig, class_names: Sequence[str],
               generator: torch.Generator | None = None, step: int | None = None) -> LossBreakdown:
    model.train()
    optimizer.zero_grad(set_to_none=True)
    losses = model.training_losses(batch, class_names, generator)
    try:
        total, breakdown = total_loss(losses, model.loss_weights())
    except FloatingPointError as exc:
        raw = {k: float(v.detach()) for k, v in losses.items()}
        raise NonFiniteLoss(str(exc), raw, step) from None
    total.backward()
    optimizer_step(model, optimizer, cfg.grad_clip)
    breakdown.step = step
    return breakdown


def class_prompts(vocab, ids: Sequence[int]) -> tuple[list[str], dict[int, int]]:
    """Prompt names for ``ids`` plus the dataset-id -> prompt-row map (row 0 is background)."""
    names = [vocab.name(i) for i in ids]
    return names, {cid: row + 1 for row, cid in enumerate(ids)}


@dataclass
class FitResult:
    model: VLDet
    log: list[dict]
    step: int
    rng_state: dict


def fit(model: VLDet, dataset, cfg: ModelConfig, epochs: int | None = None, steps: int | None = None,
        freeze: FreezePolicy | None = None, log_path=None, checkpoint_path=None, progress=None) -> FitResult:
    """Train on the base classes of ``dataset``.

    The run length is ``epochs`` full passes when given, else ``steps``
    (default ``cfg.steps``). Batches are drawn from a seeded per-epoch
    shuffle; a ragged tail shorter than ``batch_size`` is dropped. With
    ``cfg.augment`` each drawn scene is randomly shifted and mirrored;
    level 2 zooms it first, level 3 replaces it with a fresh layout of
    objects cut from random training scenes.
    """
    if len(dataset) < cfg.batch_size:
        raise ValueError(f"dataset has {len(dataset)} scenes, fewer than batch_size={cfg.batch_size}")
    freeze = freeze or FreezePolicy()
    frozen = freeze.apply(model)
    optimizer = build_optimizer(model, cfg)
    names, rows = class_prompts(dataset.vocab, dataset.vocab.base_ids)
    per_epoch = len(dataset) // cfg.batch_size
    total_steps = epochs * per_epoch if epochs is not None else (cfg.steps if steps is None else steps)
    schedule = lr_schedule(optimizer, cfg, total_steps)
    shuffle = np.random.default_rng(cfg.seed)
    jitter = np.random.default_rng([cfg.seed, 1])
    sampler = torch.Generator().manual_seed(cfg.seed)

    records = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        step = 0
        order = np.empty(0, dtype=np.int64)
        while step < total_steps:
            if step % per_epoch == 0:
                order = shuffle.permutation(len(dataset))
            k = step % per_epoch
            idx = order[k * cfg.batch_size:(k + 1) * cfg.batch_size]
            scenes = [dataset[int(i)] for i in idx]
            if cfg.augment >= 3:
                scenes = [recompose(dataset.scenes, dataset.vocab, jitter) for _ in scenes]
            if cfg.augment == 2:
                scenes = [rescale(sc, jitter) for sc in scenes]
            if cfg.augment >= 1:
                scenes = [shift_flip(sc, jitter) for sc in scenes]
            batch = make_batch(scenes, rows)
            breakdown = train_step(model, batch, optimizer, cfg, names, sampler, step)
            schedule.step()
            rec = {**breakdown.__dict__, "frozen": frozen}
            records.append(rec)
            if log_fh:
                log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
            if progress:
                progress(step, breakdown)
            step += 1
            if checkpoint_path and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                save_checkpoint(model, checkpoint_path, step=step, rng_state=_rng_state(shuffle, sampler, jitter))
    finally:
        if log_fh:
            log_fh.close()
    state = _rng_state(shuffle, sampler, jitter)
    if checkpoint_path:
        save_checkpoint(model, checkpoint_path, step=step, rng_state=state)
    return FitResult(model, records, step, state)


def _rng_state(shuffle: np.random.Generator, sampler: torch.Generator, jitter: np.random.Generator) -> dict:
    return {"shuffle": shuffle.bit_generator.state, "jitter": jitter.bit_generator.state,
            "sampler": sampler.get_state().numpy().tobytes().hex()}


# ---------------------------------------------------------------------------
# checkpoint container
#
#   "VLDTCKPT" | u32 version | u64 header length | header JSON
#   | u32 entry count | entries: u32 name length, name, u64 blob length, VLDT blob


def checkpoint_bytes(model: VLDet, step: int = 0, rng_state: dict | None = None) -> bytes:
    registry = model.registry()
    header = json.dumps({
        "config": model.cfg.to_dict(),
        "step": step,
        "rng": rng_state or {},
        "frozen": sorted(n for n, p in registry.items() if not p.requires_grad),
    }, sort_keys=True).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<IQ", CKPT_VERSION, len(header)), header, struct.pack("<I", len(registry))]
    for name, p in registry.items():
        raw = name.encode("utf-8")
        blob = encode_tensor(p.detach().cpu().contiguous())
        parts += [struct.pack("<I", len(raw)), raw, struct.pack("<Q", len(blob)), blob]
    return b"".join(parts)


def save_checkpoint(model: VLDet, path, step: int = 0, rng_state: dict | None = None) -> None:
    data = checkpoint_bytes(model, step, rng_state)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def _read(fmt: str, blob: bytes, pos: int):
    size = struct.calcsize(fmt)
    if len(blob) < pos + size:
        raise CheckpointError("truncated checkpoint")
    return struct.unpack_from(fmt, blob, pos), pos + size


def parse_checkpoint(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if blob[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CheckpointError("not a VLDT checkpoint")
    (version, hlen), pos = _read("<IQ", blob, len(CKPT_MAGIC))
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if len(blob) < pos + hlen:
        raise CheckpointError("truncated checkpoint")
    header = json.loads(blob[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    (count,), pos = _read("<I", blob, pos)
    tensors = {}
    for _ in range(count):
        (nlen,), pos = _read("<I", blob, pos)
        if len(blob) < pos + nlen:
            raise CheckpointError("truncated checkpoint")
        name = blob[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (blen,), pos = _read("<Q", blob, pos)
        if len(blob) < pos + blen:
            raise CheckpointError("truncated checkpoint")
        try:
            array, end = decode_tensor(blob[pos:pos + blen])
        except ValueError as exc:
            raise CheckpointError(f"{name}: {exc}") from None
        if end != blen:
            raise CheckpointError(f"{name}: blob length mismatch")
        tensors[name] = array
        pos += blen
    if pos != len(blob):
        raise CheckpointError("trailing bytes after checkpoint entries")
    return header, tensors


def load_checkpoint(path, model: VLDet | None = None, config: ModelConfig | None = None):
    """Rebuild (or fill) a model from ``path``; returns (model, header).

    Nothing is modified unless every name and shape matches.
    """
    header, tensors = parse_checkpoint(Path(path).read_bytes())
    cfg = ModelConfig.from_dict(header["config"])
    if config is not None and config.to_dict() != cfg.to_dict():
        diff = sorted(k for k, v in config.to_dict().items() if header["config"].get(k) != v)
        raise CheckpointError(f"config mismatch on keys: {', '.join(diff)}")
    if model is None:
        model = VLDet(cfg)
    registry = model.registry()
    missing = sorted(set(registry) - set(tensors))
    unexpected = sorted(set(tensors) - set(registry))
    bad_shape = sorted(n for n in set(registry) & set(tensors) if tuple(registry[n].shape) != tensors[n].shape)
    if missing or unexpected or bad_shape:
        raise CheckpointError(
            "checkpoint does not match model: "
            + "; ".join(f"{label}: {', '.join(v)}" for label, v in
                        (("missing", missing), ("unexpected", unexpected), ("shape", bad_shape)) if v)
        )
    dtypes = {a.dtype for a in tensors.values()}
    dtype = torch.float64 if np.dtype("float64") in dtypes else torch.float32
    model.to(dtype)
    with torch.no_grad():
        for name, p in registry.items():
            p.copy_(torch.from_numpy(tensors[name]))
    frozen = set(header.get("frozen", []))
    for name, p in registry.items():
        p.requires_grad_(name not in frozen)
    return model, header
