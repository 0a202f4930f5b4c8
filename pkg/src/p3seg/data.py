"""Synthetic 2D segmentation corpus, PGM I/O and batch sampling.

Each sample imitates a short-axis cardiac slice: a bright blob (class 1)
wrapped in a darker ring (class 2) with a crescent beside it (class 3), on a
smoothly varying background with Gaussian texture noise.  With fewer classes
the crescent and then the ring are dropped.  Image and label come from the
same geometry, so labels are exact.
"""
from __future__ import annotations

import itertools
import json
import math
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np


class ConfigError(ValueError):
    pass


class FormatError(ValueError):
    pass


NOISE_SIGMA = 0.05
MARGIN = 2


@dataclass
class CorpusManifest:
    seed: int
    H: int
    W: int
    class_count: int
    N: int
    N_s: int
    labeled: list[str]
    unlabeled: list[str]
    test: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "CorpusManifest":
        return cls(**json.loads(text))


@dataclass
class Sample:
    id: str
    image: np.ndarray
    label: np.ndarray | None = None


# ---------------------------------------------------------------- geometry

def _ellipse(yy, xx, cy, cx, ry, rx, theta):
    c, s = math.cos(theta), math.sin(theta)
    dy, dx = yy - cy, xx - cx
    u = (dx * c + dy * s) / rx
    v = (-dx * s + dy * c) / ry
    return u * u + v * v <= 1.0


def _sample_geometry(rng, H, W, n_classes):
    """Label map for one sample, or None if the shapes touched the border."""
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    label = np.zeros((H, W), dtype=np.int64)
    scale = min(H, W) / 64.0

    if n_classes == 2:
        for _ in range(int(rng.integers(1, 4))):
            cy, cx = rng.uniform(0.2, 0.8) * H, rng.uniform(0.2, 0.8) * W
            ry, rx = rng.uniform(4, 11, size=2) * scale
            blob = _ellipse(yy, xx, cy, cx, ry, rx, rng.uniform(0, math.pi))
            if (label[blob] != 0).any():
                continue
            label[blob] = 1
    else:
        cy, cx = rng.uniform(0.35, 0.65) * H, rng.uniform(0.35, 0.65) * W
        ry, rx = rng.uniform(5, 10, size=2) * scale
        theta = rng.uniform(0, math.pi)
        thick = rng.uniform(2.5, 5.0) * scale
        outer = _ellipse(yy, xx, cy, cx, ry + thick, rx + thick, theta)
        inner = _ellipse(yy, xx, cy, cx, ry, rx, theta)
        label[outer] = 2
        label[inner] = 1
        if n_classes == 4:
            phi = rng.uniform(0, 2 * math.pi)
            dist = (max(ry, rx) + thick) * rng.uniform(0.7, 1.0)
            rcy, rcx = cy + dist * math.sin(phi), cx + dist * math.cos(phi)
            rry, rrx = rng.uniform(6, 11, size=2) * scale
            rv = _ellipse(yy, xx, rcy, rcx, rry, rrx, rng.uniform(0, math.pi))
            grown = _ellipse(yy, xx, cy, cx, ry + thick + 1, rx + thick + 1, theta)
            label[rv & ~grown] = 3

    if not (label > 0).any():
        return None
    fg = np.argwhere(label > 0)
    if fg.min() < MARGIN or fg[:, 0].max() >= H - MARGIN or fg[:, 1].max() >= W - MARGIN:
        return None
    return label


def _render(rng, label, n_classes):
    H, W = label.shape
    yy, xx = np.mgrid[0:H, 0:W]
    angle = rng.uniform(0, 2 * math.pi)
    background = rng.uniform(0.1, 0.3) + rng.uniform(0.0, 0.2) * (
        math.cos(angle) * xx + math.sin(angle) * yy) / max(H, W)
    # low-frequency texture and distractor blobs that belong to the background
    for _ in range(int(rng.integers(2, 5))):
        cy, cx = rng.uniform(0, H), rng.uniform(0, W)
        r = rng.uniform(4, 12) * min(H, W) / 64.0
        amp = rng.uniform(-0.1, 0.35)
        background = background + amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
    bands = {1: (0.65, 0.9), 2: (0.3, 0.5), 3: (0.55, 0.8)}
    image = background.copy()
    for c in range(1, n_classes):
        lo, hi = bands[c]
        image[label == c] = rng.uniform(lo, hi)
    gain, offset = rng.uniform(0.6, 1.3), rng.uniform(-0.1, 0.1)
    image = image * gain + offset + rng.normal(0.0, NOISE_SIGMA, size=(H, W))
    return np.clip(image, 0.0, 1.0)


def sample_rng(seed: int, sample_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(sample_id.encode())])


def generate_sample(seed: int, sample_id: str, H: int, W: int, n_classes: int) -> Sample:
    """Deterministic sample from ``(seed, sample_id)`` alone."""
    rng = sample_rng(seed, sample_id)
    while True:
        label = _sample_geometry(rng, H, W, n_classes)
        if label is not None:
            break
    image = quantize(_render(rng, label, n_classes))
    return Sample(sample_id, image[None], label)


def quantize(image: np.ndarray) -> np.ndarray:
    """Snap intensities to the 16-bit grid used on disk."""
    return np.round(np.clip(image, 0.0, 1.0) * 65535.0) / 65535.0


def generate_corpus(out_dir, seed: int = 0, N: int = 200, H: int = 64, W: int = 64,
                    n_classes: int = 4, labeled_fraction: float = 0.05,
                    test_count: int = 40) -> CorpusManifest:
    """Write ``manifest.json``, ``images/`` and ``labels/`` under ``out_dir``.

    Unlabeled training samples get no label file.  Test samples are drawn
    from the same distribution with ids disjoint from training.
    """
    if not 0.0 < labeled_fraction < 1.0:
        raise ConfigError(f"labeled_fraction must lie in (0, 1), got {labeled_fraction}")
    if n_classes not in (2, 3, 4):
        raise ConfigError(f"n_classes must be 2, 3 or 4, got {n_classes}")
    N_s = int(math.floor(N * labeled_fraction + 0.5))
    if not 1 <= N_s < N:
        raise ConfigError(f"labeled count {N_s} leaves an empty split for N={N}")

    ids = [f"s{i:04d}" for i in range(N)]
    order = np.random.default_rng([seed, 0x5EED]).permutation(N)
    labeled = sorted(ids[i] for i in order[:N_s])
    labeled_set = set(labeled)
    unlabeled = [i for i in ids if i not in labeled_set]
    test = [f"t{i:04d}" for i in range(test_count)]
    manifest = CorpusManifest(seed, H, W, n_classes, N, N_s, labeled, unlabeled, test)

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    for sid in ids + test:
        sample = generate_sample(seed, sid, H, W, n_classes)
        if sid not in labeled_set and sid not in test:
            sample.label = None
        save_sample(out, sample)
    (out / "manifest.json").write_text(manifest.to_json())
    return manifest


# ---------------------------------------------------------------- PGM I/O

def write_pgm(path, array: np.ndarray, maxval: int) -> None:
    H, W = array.shape
    dtype = ">u2" if maxval > 255 else "u1"
    header = f"P5\n{W} {H}\n{maxval}\n".encode()
    Path(path).write_bytes(header + np.ascontiguousarray(array).astype(dtype).tobytes())


def read_pgm(path) -> tuple[np.ndarray, int]:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace byte after maxval
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    try:
        W, H, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError(f"{path}: malformed header") from exc
    if W < 1 or H < 1 or not 0 < maxval < 65536:
        raise FormatError(f"{path}: bad dimensions or maxval")
    dtype = np.dtype(">u2" if maxval > 255 else "u1")
    body = raw[pos:]
    if len(body) != H * W * dtype.itemsize:
        raise FormatError(f"{path}: expected {H * W * dtype.itemsize} data bytes, got {len(body)}")
    return np.frombuffer(body, dtype=dtype).reshape(H, W), maxval


def save_sample(root, sample: Sample) -> None:
    root = Path(root)
    write_pgm(root / "images" / f"{sample.id}.pgm", np.round(sample.image[0] * 65535.0), 65535)
    if sample.label is not None:
        write_pgm(root / "labels" / f"{sample.id}.pgm", sample.label, 255)


def load_image(path) -> np.ndarray:
    data, maxval = read_pgm(path)
    return (data.astype(np.float64) / maxval)[None]


def load_label(path, class_count: int) -> np.ndarray:
    data, _ = read_pgm(path)
    label = data.astype(np.int64)
    if label.max(initial=0) >= class_count:
        raise FormatError(f"{path}: class index {label.max()} >= {class_count}")
    return label


def load_sample(root, sample_id: str, class_count: int) -> Sample:
    root = Path(root)
    image = load_image(root / "images" / f"{sample_id}.pgm")
    label_path = root / "labels" / f"{sample_id}.pgm"
    label = load_label(label_path, class_count) if label_path.exists() else None
    return Sample(sample_id, image, label)


class Corpus:
    """In-memory view of a corpus directory."""

    def __init__(self, root):
        self.root = Path(root)
        try:
            self.manifest = CorpusManifest.from_json((self.root / "manifest.json").read_text())
        except (OSError, TypeError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read manifest under {root}: {exc}") from exc
        m = self.manifest
        self.samples = {sid: load_sample(self.root, sid, m.class_count)
                        for sid in m.labeled + m.unlabeled + m.test}

    def images(self, ids) -> np.ndarray:
        return np.stack([self.samples[i].image for i in ids])

    def labels(self, ids) -> np.ndarray:
        return np.stack([self.samples[i].label for i in ids])


# ---------------------------------------------------------------- sampling

def batch_at(manifest: CorpusManifest, batch_size: int, seed: int, step: int):
    """Labeled and unlabeled ids for one step, drawn with replacement."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    if not manifest.labeled or not manifest.unlabeled:
        raise ConfigError("both labeled and unlabeled splits must be non-empty")
    rng = np.random.default_rng([seed, 0xBA7C, step])
    lab = rng.integers(0, len(manifest.labeled), size=batch_size)
    unl = rng.integers(0, len(manifest.unlabeled), size=batch_size)
    return [manifest.labeled[i] for i in lab], [manifest.unlabeled[i] for i in unl]


def batch_iterator(manifest: CorpusManifest, batch_size: int, seed: int, start: int = 0):
    """Endless stream of ``(labeled_ids, unlabeled_ids)``; step ``k`` depends only on ``(seed, k)``."""
    batch_at(manifest, batch_size, seed, start)  # validate eagerly
    return (batch_at(manifest, batch_size, seed, k) for k in itertools.count(start))
