"""Dense-tensor substrate helpers.

Autograd comes from torch. This module adds the pieces the rest of the
package relies on: shape-checked wrappers for the differentiable op suite,
multi-head attention, cosine similarity with a zero-norm convention, a
central-difference gradient checker and the ``VLDT`` binary tensor codec.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

MAGIC = b"VLDT"
VERSION = 1
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_NORM_FLOOR = 1e-12


class ShapeError(ValueError):
    """Raised when an op receives incompatible operand shapes."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        desc = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {desc}")


# ---------------------------------------------------------------------------
# op suite


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return a @ b


def conv2d(x, weight, bias=None, stride=1, padding=0):
    if x.dim() != 4 or weight.dim() != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError("conv2d", x.shape, weight.shape)
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def deconv2d(x, weight, bias=None, stride=2):
    """Transposed convolution; with kernel == stride the output is exactly ``stride`` x larger."""
    if x.dim() != 4 or weight.dim() != 4 or x.shape[1] != weight.shape[0]:
        raise ShapeError("deconv2d", x.shape, weight.shape)
    return F.conv_transpose2d(x, weight, bias, stride=stride)


def maxpool2d(x, kernel=2, stride=2):
    if x.dim() != 4 or x.shape[-1] < kernel or x.shape[-2] < kernel:
        raise ShapeError("maxpool2d", x.shape, (kernel, kernel))
    return F.max_pool2d(x, kernel, stride)


def layer_norm(x, weight, bias, eps=1e-5):
    if weight.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError("layer_norm", x.shape, weight.shape)
    return F.layer_norm(x, x.shape[-1:], weight, bias, eps)


def softmax(x, dim=-1):
    return torch.softmax(x, dim=dim)


def sigmoid(x):
    return torch.sigmoid(x)


def gelu(x):
    return F.gelu(x)


def relu(x):
    return F.relu(x)


def mean(x, dim=None):
    return x.mean() if dim is None else x.mean(dim=dim)


def concat(tensors: Sequence[torch.Tensor], dim=0):
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.dim() != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != dim % len(ref)):
            raise ShapeError("concat", ref, t.shape)
    return torch.cat(list(tensors), dim=dim)


def multi_head_attention(q, k, v, heads: int, key_padding_mask=None):
    """Scaled dot-product attention split over ``heads``.

    q: (..., Tq, D), k and v: (..., Tk, D). ``key_padding_mask`` is True at
    padded key positions, shape (..., Tk).
    """
    if q.shape[-1] != k.shape[-1] or k.shape[:-1] != v.shape[:-1]:
        raise ShapeError("multi_head_attention", q.shape, k.shape, v.shape)
    dim = q.shape[-1]
    if dim % heads:
        raise ShapeError("multi_head_attention", q.shape, (heads,))
    d_head = dim // heads

    def split(t):
        return t.reshape(*t.shape[:-1], heads, d_head).transpose(-3, -2)

    qh, kh, vh = split(q), split(k), split(v)
    scores = qh @ kh.transpose(-1, -2) / math.sqrt(d_head)
    if key_padding_mask is not None:
        mask = key_padding_mask.unsqueeze(-2).unsqueeze(-2)
        scores = scores.masked_fill(mask, float("-inf"))
    weights = torch.softmax(scores, dim=-1)
    out = (weights @ vh).transpose(-3, -2)
    return out.reshape(*out.shape[:-2], dim)


def cosine_similarity(v: torch.Tensor, l: torch.Tensor) -> torch.Tensor:
    """Cosine similarity along the last axis, broadcasting leading axes.

    Vectors with norm below 1e-12 are treated as having zero similarity
    with everything, and receive zero gradient.
    """
    if v.shape[-1] != l.shape[-1]:
        raise ShapeError("cosine_similarity", v.shape, l.shape)
    return (normalize(v) * normalize(l)).sum(-1)


def normalize(x: torch.Tensor) -> torch.Tensor:
    norm = x.norm(dim=-1, keepdim=True)
    dead = norm < _NORM_FLOOR
    safe = torch.where(dead, torch.ones_like(norm), norm)
    return torch.where(dead, torch.zeros_like(x), x / safe)


def pairwise_cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """(..., n, d) x (..., m, d) -> (..., n, m) cosine similarities."""
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError("pairwise_cosine", a.shape, b.shape)
    return normalize(a) @ normalize(b).transpose(-1, -2)


# ---------------------------------------------------------------------------
# gradient checking


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class GradCheckReport:
    max_relative_error: float
    passed: bool
    checked: int = 0
    worst: tuple[int, int] | None = None  # (input index, flat element index)
    analytic: float = 0.0
    numeric: float = 0.0
    per_input: list[float] = field(default_factory=list)


def grad_check(
    fn: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
    max_per_input: int | None = None,
    generator: torch.Generator | None = None,
    analytic_fn: Callable[..., Sequence[torch.Tensor]] | None = None,
) -> GradCheckReport:
    """Compare autograd gradients of scalar ``fn`` with central differences.

    ``max_per_input`` caps how many scalars of each input are probed (chosen
    uniformly without replacement); ``None`` probes every scalar.
    ``analytic_fn`` overrides the gradient under test, which is how negative
    controls are built.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    leaves = [t.detach().clone().requires_grad_(True) for t in inputs]
    if analytic_fn is not None:
        grads = [g.detach().contiguous() for g in analytic_fn(*leaves)]
    else:
        out = fn(*leaves)
        if out.numel() != 1:
            raise ShapeError("grad_check", out.shape, ())
        if not torch.isfinite(out).all():
            raise NonFiniteError("fn output is not finite at the unperturbed inputs")
        grads = torch.autograd.grad(out, leaves, allow_unused=True)
        grads = [torch.zeros_like(x) if g is None else g.detach().contiguous() for g, x in zip(grads, leaves)]

    report = GradCheckReport(max_relative_error=0.0, passed=True)
    with torch.no_grad():
        work = [x.detach().clone(memory_format=torch.contiguous_format) for x in leaves]
        for i, x in enumerate(work):
            flat = x.view(-1)
            idx = range(flat.numel())
            if max_per_input is not None and flat.numel() > max_per_input:
                idx = torch.randperm(flat.numel(), generator=generator)[:max_per_input].tolist()
            worst_here = 0.0
            for j in idx:
                orig = flat[j].item()
                flat[j] = orig + eps
                plus = fn(*work)
                flat[j] = orig - eps
                minus = fn(*work)
                flat[j] = orig
                if not (torch.isfinite(plus).all() and torch.isfinite(minus).all()):
                    raise NonFiniteError(f"fn not finite when perturbing input {i} element {j}")
                num = (plus.item() - minus.item()) / (2 * eps)
                ana = grads[i].view(-1)[j].item()
                scale = max(abs(ana), abs(num))
                err = abs(ana - num) if scale < 1e-8 else abs(ana - num) / scale
                report.checked += 1
                worst_here = max(worst_here, err)
                if report.worst is None or err > report.max_relative_error:
                    report.max_relative_error = err
                    report.worst = (i, j)
                    report.analytic, report.numeric = ana, num
            report.per_input.append(worst_here)
    report.passed = report.max_relative_error <= tol
    return report


# ---------------------------------------------------------------------------
# VLDT tensor codec


def encode_tensor(array) -> bytes:
    if isinstance(array, torch.Tensor):
        array = array.detach().cpu().numpy()
    array = np.asarray(array)
    if array.dtype == np.float32:
        code = 0
    elif array.dtype == np.float64:
        code = 1
    else:
        raise TypeError(f"VLDT supports float32/float64 only, got {array.dtype}")
    if array.ndim > 255:
        raise ValueError("rank exceeds 255")
    header = MAGIC + struct.pack("<BBB", VERSION, code, array.ndim)
    header += struct.pack(f"<{array.ndim}Q", *array.shape)
    return header + np.ascontiguousarray(array, dtype=_DTYPE_CODES[code]).tobytes()


def decode_tensor(blob: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; returns (array, next offset)."""
    if blob[offset:offset + 4] != MAGIC:
        raise ValueError("bad VLDT magic")
    if len(blob) < offset + 7:
        raise ValueError("truncated VLDT header")
    version, code, rank = struct.unpack_from("<BBB", blob, offset + 4)
    if version != VERSION:
        raise ValueError(f"unsupported VLDT version {version}")
    if code not in _DTYPE_CODES:
        raise ValueError(f"unknown VLDT dtype code {code}")
    pos = offset + 7
    if len(blob) < pos + 8 * rank:
        raise ValueError("truncated VLDT extents")
    shape = struct.unpack_from(f"<{rank}Q", blob, pos)
    pos += 8 * rank
    dtype = _DTYPE_CODES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(blob) < pos + nbytes:
        raise ValueError("truncated VLDT payload")
    data = np.frombuffer(blob, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos)
    return data.reshape(shape).astype(dtype.newbyteorder("="), copy=True), pos + nbytes


def save_tensor(path, array) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_tensor(array))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    array, end = decode_tensor(blob)
    if end != len(blob):
        raise ValueError(f"{path}: trailing bytes after VLDT tensor")
    return array


__all__ = [
    "ShapeError", "NonFiniteError", "GradCheckReport", "grad_check",
    "matmul", "conv2d", "deconv2d", "maxpool2d", "layer_norm", "softmax",
    "sigmoid", "gelu", "relu", "mean", "concat", "multi_head_attention",
    "cosine_similarity", "pairwise_cosine", "normalize",
    "encode_tensor", "decode_tensor", "save_tensor", "load_tensor",
]
