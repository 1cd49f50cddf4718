"""Tiny resolution-preserving segmentation network and its checkpoint format."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics
from .numerics import Graph, ShapeError, Tensor

DEFAULT_CHANNELS = (16, 32, 32, 16)
CKPT_MAGIC = b"MIXSEGCK"
CKPT_VERSION = 1
ROLES = {"student": 0, "teacher": 1}


class CheckpointError(ValueError):
    pass


@dataclass
class Params:
    """Named conv weights/biases in a fixed order, plus the architecture they realise.

    Order matters: the EMA teacher pairs its tensors with the student's by position.
    """

    channels: tuple[int, ...]
    num_classes: int
    in_channels: int = 3
    tensors: list[tuple[str, Tensor]] = field(default_factory=list)

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def values(self) -> list[Tensor]:
        return [t for _, t in self.tensors]

    def names(self) -> list[str]:
        return [n for n, _ in self.tensors]

    def __getitem__(self, name: str) -> Tensor:
        for n, t in self.tensors:
            if n == name:
                return t
        raise KeyError(name)

    def num_parameters(self) -> int:
        return sum(t.data.size for _, t in self.tensors)

    def copy(self, requires_grad: bool | None = None) -> "Params":
        out = []
        for n, t in self.tensors:
            rg = t.requires_grad if requires_grad is None else requires_grad
            out.append((n, Tensor(t.data.copy(), requires_grad=rg, name=n)))
        return Params(self.channels, self.num_classes, self.in_channels, out)

    def zero_grad(self) -> None:
        for _, t in self.tensors:
            t.grad = None

    def layers(self):
        """Yield (weight, bias, is_head) per conv layer."""
        ts = self.values()
        for k in range(0, len(ts), 2):
            yield ts[k], ts[k + 1], k == len(ts) - 2

    def astype(self, dtype) -> "Params":
        out = [(n, Tensor(t.data.astype(dtype), requires_grad=t.requires_grad, name=n))
               for n, t in self.tensors]
        return Params(self.channels, self.num_classes, self.in_channels, out)


def init(seed: int, channels=DEFAULT_CHANNELS, num_classes: int = 5,
         in_channels: int = 3, dtype=np.float32) -> Params:
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    channels = tuple(int(c) for c in channels)
    if not channels or min(channels) < 1:
        raise ValueError(f"channels must be a non-empty list of positive widths, got {channels}")
    rng = np.random.default_rng(seed)
    widths = (in_channels,) + channels + (num_classes,)
    tensors = []
    for i in range(len(widths) - 1):
        cin, cout = widths[i], widths[i + 1]
        std = np.sqrt(2.0 / (cin * 9))
        w = (rng.standard_normal((cout, cin, 3, 3)) * std).astype(dtype)
        b = np.zeros(cout, dtype=dtype)
        prefix = "head" if i == len(widths) - 2 else f"conv{i}"
        tensors.append((f"{prefix}.weight", Tensor(w, requires_grad=True, name=f"{prefix}.weight")))
        tensors.append((f"{prefix}.bias", Tensor(b, requires_grad=True, name=f"{prefix}.bias")))
    return Params(channels, num_classes, in_channels, tensors)


def forward(params: Params, images, graph: Graph | None = None) -> Tensor:
    x = images if isinstance(images, Tensor) else Tensor(images)
    if x.data.ndim != 4 or x.shape[1] != params.in_channels:
        raise ShapeError(f"expected images [N,{params.in_channels},H,W], got {x.shape}")
    if x.shape[2] < 8 or x.shape[3] < 8:
        raise ShapeError(f"images must be at least 8x8, got {x.shape[2:]}")
    for w, b, is_head in params.layers():
        x = numerics.conv2d(x, w, b, graph)
        if not is_head:
            x = numerics.relu(x, graph)
    return x


def predict(params: Params, images) -> np.ndarray:
    """Per-pixel argmax class, [N,H,W] int64. Ties go to the lowest index."""
    probs = numerics.softmax_channel(forward(params, images)).data
    return probs.argmax(axis=1)


# --------------------------------------------------------------------------
# checkpoint: little-endian
#   magic(8) version(u32) role(u32) in_channels(u32) num_classes(u32)
#   n_widths(u32) widths(u32 * n) n_tensors(u32)
#   per tensor: name_len(u32) name(utf-8) rank(u32) dims(u32 * rank) float32 data

def save_checkpoint(params: Params, path, role: str = "student") -> None:
    if role not in ROLES:
        raise ValueError(f"unknown role {role!r}")
    parts = [CKPT_MAGIC, struct.pack("<5I", CKPT_VERSION, ROLES[role], params.in_channels,
                                     params.num_classes, len(params.channels))]
    parts.append(struct.pack(f"<{len(params.channels)}I", *params.channels))
    parts.append(struct.pack("<I", len(params)))
    for name, t in params:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{t.data.ndim}I", t.data.ndim, *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[Params, str]:
    path = Path(path)
    buf = path.read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    def u32(count: int = 1):
        vals = struct.unpack(f"<{count}I", take(4 * count))
        return vals if count != 1 else vals[0]

    if take(len(CKPT_MAGIC)) != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a mixseg checkpoint")
    version, role_code, in_ch, n_cls, n_w = u32(5)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    role = {v: k for k, v in ROLES.items()}.get(role_code)
    if role is None:
        raise CheckpointError(f"{path}: unknown role code {role_code}")
    widths = tuple(u32(n_w)) if n_w > 1 else ((u32(),) if n_w == 1 else ())
    n_t = u32()
    tensors = []
    for _ in range(n_t):
        name = take(u32()).decode("utf-8")
        rank = u32()
        dims = tuple(u32(rank)) if rank > 1 else ((u32(),) if rank == 1 else ())
        count = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(take(4 * count), dtype="<f4").astype(np.float32).reshape(dims)
        tensors.append((name, Tensor(data, requires_grad=True, name=name)))
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return Params(widths, n_cls, in_ch, tensors), role
