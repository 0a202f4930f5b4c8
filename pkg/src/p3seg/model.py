"""Small encoder-decoder segmentation network with hand-written backprop.

Every level of the encoder applies two 3x3 convolutions with ReLU.  Levels
are joined by 2x2 max-pooling.  The decoder upsamples by nearest neighbour,
concatenates the skip connection of the same level and applies two more
convolutions.  A 1x1 convolution maps the top level to class logits.

All parameters live in one flat float64 vector; layers are views into it.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .losses import softmax_probs

CKPT_MAGIC = b"P3SGCKPT"


class ContractError(RuntimeError):
    """Raised when a cache or parameter layout does not match its counterpart."""


@dataclass(frozen=True)
class NetworkSpec:
    input_channels: int = 1
    class_count: int = 4
    widths: tuple[int, ...] = (8, 16)

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.class_count < 2:
            raise ValueError("class_count must be >= 2")
        if not self.widths or min(self.widths) < 1:
            raise ValueError(f"widths must be positive, got {self.widths}")

    @property
    def levels(self) -> int:
        return len(self.widths)


@dataclass(frozen=True)
class LayerSlot:
    name: str
    kind: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def build_layout(spec: NetworkSpec) -> list[LayerSlot]:
    convs = []
    w = spec.widths
    cin = spec.input_channels
    for i, cout in enumerate(w):
        convs.append((f"enc{i}.conv0", cin, cout))
        convs.append((f"enc{i}.conv1", cout, cout))
        cin = cout
    for i in range(spec.levels - 2, -1, -1):
        convs.append((f"dec{i}.conv0", w[i + 1] + w[i], w[i]))
        convs.append((f"dec{i}.conv1", w[i], w[i]))

    layout, offset = [], 0
    for name, ci, co in convs:
        slot = LayerSlot(name + ".w", "conv3x3", (co, ci, 3, 3), offset)
        layout.append(slot)
        offset += slot.size
        layout.append(LayerSlot(name + ".b", "bias", (co,), offset))
        offset += co
    layout.append(LayerSlot("head.w", "conv1x1", (spec.class_count, w[0]), offset))
    offset += spec.class_count * w[0]
    layout.append(LayerSlot("head.b", "bias", (spec.class_count,), offset))
    return layout


class ModelParams:
    """Flat parameter vector plus its layer layout.

    ``version`` is bumped by every in-place update so that stale forward
    caches can be detected.
    """

    def __init__(self, spec: NetworkSpec, data: np.ndarray | None = None):
        self.spec = spec
        self.layout = build_layout(spec)
        self.slots = {s.name: s for s in self.layout}
        size = sum(s.size for s in self.layout)
        if data is None:
            data = np.zeros(size)
        data = np.ascontiguousarray(data, dtype=np.float64)
        if data.shape != (size,):
            raise ContractError(f"expected {size} parameters, got {data.shape}")
        self.data = data
        self.version = 0

    @classmethod
    def initialize(cls, spec: NetworkSpec, rng: np.random.Generator) -> "ModelParams":
        """He-style init: normal with std sqrt(2 / fan_in); biases zero."""
        p = cls(spec)
        for s in p.layout:
            if s.kind == "bias":
                continue
            fan_in = int(np.prod(s.shape[1:]))
            p.view(s.name)[...] = rng.standard_normal(s.shape) * np.sqrt(2.0 / fan_in)
        return p

    def __len__(self):
        return self.data.size

    def view(self, name: str) -> np.ndarray:
        s = self.slots[name]
        return self.data[s.offset:s.offset + s.size].reshape(s.shape)

    def copy(self) -> "ModelParams":
        return ModelParams(self.spec, self.data.copy())

    def assign(self, values: np.ndarray) -> None:
        self.data[...] = values
        self.touch()

    def touch(self) -> None:
        self.version += 1

    def same_layout(self, other: "ModelParams") -> bool:
        return self.spec == other.spec and self.data.shape == other.data.shape


# ---------------------------------------------------------------- primitives

def _im2col(x: np.ndarray) -> np.ndarray:
    """(C, H, W) -> (C*9, H*W) patches of the zero-padded input."""
    C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # C, H, W, 3, 3
    return win.transpose(0, 3, 4, 1, 2).reshape(C * 9, H * W)


def conv3x3_forward(x, w, b):
    C, H, W = x.shape
    cols = _im2col(x)
    out = w.reshape(w.shape[0], -1) @ cols + b[:, None]
    return out.reshape(-1, H, W), cols


def conv3x3_backward(dout, cols, w, need_dx=True):
    """Weight, bias and (optionally) input gradients of a same-padded 3x3 conv.

    The input gradient is itself a same-padded convolution of ``dout`` with
    the spatially flipped, channel-transposed kernel.
    """
    d2 = dout.reshape(dout.shape[0], -1)
    dw = (d2 @ cols.T).reshape(w.shape)
    db = d2.sum(axis=1)
    if not need_dx:
        return None, dw, db
    H, W = dout.shape[1:]
    w_flip = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(w.shape[1], -1)
    dx = (w_flip @ _im2col(dout)).reshape(-1, H, W)
    return dx, dw, db


def maxpool_forward(x):
    C, H, W = x.shape
    blocks = x.reshape(C, H // 2, 2, W // 2, 2).transpose(0, 1, 3, 2, 4).reshape(C, H // 2, W // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool_backward(dout, idx):
    C, h, w = dout.shape
    blocks = np.zeros((C, h, w, 4))
    np.put_along_axis(blocks, idx[..., None], dout[..., None], axis=-1)
    return blocks.reshape(C, h, w, 2, 2).transpose(0, 1, 3, 2, 4).reshape(C, 2 * h, 2 * w)


def upsample_forward(x):
    return x.repeat(2, axis=1).repeat(2, axis=2)


def upsample_backward(dout):
    C, H, W = dout.shape
    return dout.reshape(C, H // 2, 2, W // 2, 2).sum(axis=(2, 4))


# ---------------------------------------------------------------- network

@dataclass
class ForwardCache:
    params: ModelParams
    version: int
    input_shape: tuple[int, ...]
    records: dict = field(default_factory=dict)


def _check_input(spec: NetworkSpec, image: np.ndarray):
    if image.ndim != 3 or image.shape[0] != spec.input_channels:
        raise ValueError(f"expected ({spec.input_channels}, H, W) input, got {image.shape}")
    factor = 2 ** (spec.levels - 1)
    if image.shape[1] % factor or image.shape[2] % factor:
        raise ValueError(f"H and W must be divisible by {factor}, got {image.shape[1:]}")


def forward(params: ModelParams, image: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Logits ``(n, H, W)`` for one ``(C, H, W)`` image, plus the activation cache."""
    spec = params.spec
    _check_input(spec, image)
    cache = ForwardCache(params, params.version, image.shape)
    rec = cache.records

    def conv(name, x):
        z, cols = conv3x3_forward(x, params.view(name + ".w"), params.view(name + ".b"))
        a = np.maximum(z, 0.0)
        rec[name] = (cols, z > 0)
        return a

    x = np.asarray(image, dtype=np.float64)
    skips = []
    for i in range(spec.levels):
        if i > 0:
            x, idx = maxpool_forward(x)
            rec[f"pool{i}"] = idx
        x = conv(f"enc{i}.conv0", x)
        x = conv(f"enc{i}.conv1", x)
        skips.append(x)
    for i in range(spec.levels - 2, -1, -1):
        up = upsample_forward(x)
        x = np.concatenate([up, skips[i]], axis=0)
        rec[f"cat{i}"] = up.shape[0]
        x = conv(f"dec{i}.conv0", x)
        x = conv(f"dec{i}.conv1", x)
    C, H, W = x.shape
    rec["head"] = x
    hw = params.view("head.w")
    logits = (hw @ x.reshape(C, -1) + params.view("head.b")[:, None]).reshape(-1, H, W)
    return logits, cache


def backward(cache: ForwardCache, grad_logits: np.ndarray) -> np.ndarray:
    """Gradient of a scalar loss w.r.t. the flat parameter vector."""
    params = cache.params
    if cache.version != params.version:
        raise ContractError("forward cache is stale: parameters changed since forward")
    L = params.spec.levels
    rec = cache.records
    grad = np.zeros_like(params.data)

    def put(name, g):
        s = params.slots[name]
        grad[s.offset:s.offset + s.size] = g.ravel()

    def conv_back(name, dout):
        cols, active = rec[name]
        dx, dw, db = conv3x3_backward(dout * active, cols, params.view(name + ".w"),
                                      need_dx=name != "enc0.conv0")
        put(name + ".w", dw)
        put(name + ".b", db)
        return dx

    feat = rec["head"]
    C, H, W = feat.shape
    g2 = grad_logits.reshape(grad_logits.shape[0], -1)
    put("head.w", g2 @ feat.reshape(C, -1).T)
    put("head.b", g2.sum(axis=1))
    dx = (params.view("head.w").T @ g2).reshape(C, H, W)

    dskips = {}
    for i in range(L - 1):
        dx = conv_back(f"dec{i}.conv1", dx)
        dx = conv_back(f"dec{i}.conv0", dx)
        n_up = rec[f"cat{i}"]
        dskips[i] = dx[n_up:]
        dx = upsample_backward(dx[:n_up])

    for i in range(L - 1, -1, -1):
        if i in dskips:
            dx = dx + dskips[i]
        dx = conv_back(f"enc{i}.conv1", dx)
        dx = conv_back(f"enc{i}.conv0", dx)
        if i > 0:
            dx = maxpool_backward(dx, rec[f"pool{i}"])
    return grad


def predict_logits(params: ModelParams, images: np.ndarray) -> np.ndarray:
    """Forward a stack ``(B, C, H, W)`` one image at a time."""
    return np.stack([forward(params, x)[0] for x in images])


# ---------------------------------------------------------------- optimisation

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, size: int) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size))


def sgd_adam_step(params: ModelParams, grads: np.ndarray, state: AdamState, lr: float,
                  weight_decay: float = 1e-4) -> None:
    """One Adam step with decoupled weight decay, in place.

    ``lr`` is the effective rate: the caller applies any schedule factor.
    """
    if grads.shape != params.data.shape:
        raise ContractError(f"gradient shape {grads.shape} != params {params.data.shape}")
    state.t += 1
    state.m *= state.beta1
    state.m += (1 - state.beta1) * grads
    state.v *= state.beta2
    state.v += (1 - state.beta2) * grads * grads
    m_hat = state.m / (1 - state.beta1 ** state.t)
    v_hat = state.v / (1 - state.beta2 ** state.t)
    data = params.data
    if weight_decay:
        data *= 1.0 - lr * weight_decay
    data -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    params.touch()


def ema_update(teacher: ModelParams, student: ModelParams, delta: float) -> ModelParams:
    """``teacher <- delta * teacher + (1 - delta) * student``, in place; returns ``teacher``."""
    if not teacher.same_layout(student):
        raise ContractError("teacher and student layouts differ")
    if not 0.0 <= delta <= 1.0:
        raise ValueError(f"delta must be in [0, 1], got {delta}")
    teacher.data *= delta
    teacher.data += (1.0 - delta) * student.data
    teacher.touch()
    return teacher


def pseudo_label(teacher_logits: np.ndarray, class_count: int) -> np.ndarray:
    """Threshold p(fg) > 0.5 for two classes, argmax otherwise (ties go to the lower index)."""
    if teacher_logits.shape[0] != class_count:
        raise ValueError(f"expected {class_count} channels, got {teacher_logits.shape[0]}")
    if class_count == 2:
        return (softmax_probs(teacher_logits)[1] > 0.5).astype(np.int64)
    return teacher_logits.argmax(axis=0).astype(np.int64)


# ---------------------------------------------------------------- checkpoints

def _layout_descriptor(params: ModelParams) -> dict:
    return {
        "spec": {**asdict(params.spec), "widths": list(params.spec.widths)},
        "layers": [{"name": s.name, "kind": s.kind, "shape": list(s.shape), "offset": s.offset}
                   for s in params.layout],
        "size": len(params),
    }


def save_checkpoint(params: ModelParams, path, meta: dict | None = None) -> None:
    """Binary file: magic, header length, JSON layout, raw little-endian float64.

    A ``.json`` sidecar carries ``meta`` (seed, iteration, ...).
    """
    path = Path(path)
    header = json.dumps(_layout_descriptor(params), sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(params.data.astype("<f8").tobytes())
    sidecar = {"spec": _layout_descriptor(params)["spec"], **(meta or {})}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ContractError(f"{path}: not a checkpoint")
    (n,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + n])
    spec = NetworkSpec(**{**header["spec"], "widths": tuple(header["spec"]["widths"])})
    data = np.frombuffer(raw[12 + n:], dtype="<f8").astype(np.float64)
    params = ModelParams(spec, data)
    expected = [(s.name, list(s.shape), s.offset) for s in params.layout]
    stored = [(d["name"], d["shape"], d["offset"]) for d in header["layers"]]
    if expected != stored:
        raise ContractError(f"{path}: layout does not match network spec")
    return params
