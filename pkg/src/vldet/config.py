"""Model and training hyperparameters plus the flat ``key = value`` config format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    # geometry
    image_height: int = 64
    image_width: int = 64
    patch_size: int = 16
    num_scales: int = 5
    anchors_per_location: int = 3
    # widths
    c_v: int = 64
    c_pyr: int = 64
    c_l: int = 32
    heads: int = 4
    encoder_depth: int = 2
    roi_hidden: int = 256
    vocab_size: int = 4096
    max_caption_tokens: int = 64
    # temperatures
    tau_icl: float = 0.07
    tau_aal: float = 0.07
    tau_ral: float = 0.07
    # loss weights
    w_icl: float = 1.0
    w_aal: float = 1.0
    w_ral: float = 1.0
    w_rpnbox: float = 1.0
    w_roibox: float = 1.0
    # rpn / roi sampling
    rpn_batch: int = 256
    rpn_pos_fraction: float = 0.5
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    rpn_pre_topk: int = 256
    rpn_post_topk_train: int = 64
    rpn_post_topk_test: int = 32
    rpn_nms_iou: float = 0.7
    roi_batch: int = 64
    roi_fg_fraction: float = 0.25
    roi_fg_iou: float = 0.5
    score_threshold: float = 0.05
    det_nms_iou: float = 0.5
    max_detections: int = 100
    # optimisation
    minibatch: int = 8
    batch_size: int = 16
    lr: float = 1e-3
    lr_text: float = 1e-4
    weight_decay: float = 1e-4
    grad_clip: float = 10.0
    lr_schedule: str = "constant"  # or "cosine": anneal both groups to zero over the run
    steps: int = 2000
    checkpoint_every: int = 0
    # training-scene augmentation: 0 off, 1 random shift + horizontal flip,
    # 2 adds a random zoom, 3 re-lays-out objects cut from random training scenes before 1
    augment: int = 3
    seed: int = 0

    def __post_init__(self):
        self.validate()

    @property
    def image_size(self) -> tuple[int, int]:
        return self.image_height, self.image_width

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_height // self.patch_size, self.image_width // self.patch_size

    def validate(self) -> None:
        p = self.patch_size
        for name, extent in (("image_height", self.image_height), ("image_width", self.image_width)):
            if extent % p or (extent // p) % 4:
                raise ConfigError(f"{name}={extent}: {name}/patch_size must be an integer divisible by 4")
        if self.num_scales != 5:
            raise ConfigError("num_scales must be 5")
        if min(self.tau_icl, self.tau_aal, self.tau_ral) <= 0:
            raise ConfigError("temperatures must be positive")
        if self.minibatch < 1 or self.batch_size % self.minibatch:
            raise ConfigError(f"minibatch={self.minibatch} must divide batch_size={self.batch_size}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        if self.c_v % self.heads or self.c_l % self.heads or self.c_pyr % self.heads:
            raise ConfigError("heads must divide c_v, c_pyr and c_l")

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)


def _coerce(kind, raw: str, key: str):
    try:
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw


def parse_config(text: str, base: ModelConfig | None = None) -> ModelConfig:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    types = {f.name: f.type for f in fields(ModelConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(types[key], raw, key)
    merged = (base or ModelConfig()).to_dict()
    merged.update(values)
    return ModelConfig(**merged)


def load_config(path) -> ModelConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def dump_config(cfg: ModelConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items())
