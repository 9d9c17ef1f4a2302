"""Image datasets, readers, a procedural generator and the corruption suite."""

from __future__ import annotations

import enum
import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import FormatError, InputError, UsageError
from .rng import stream

SPLITS = ("train", "val", "test")
CIFAR_RECORD = 1 + 3 * 32 * 32
MAGIC = b"URDS"
FORMAT_VERSION = 1


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    source: str = "train"

    def to_dict(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std], "source": self.source}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64), d.get("source", "train"))


@dataclass
class ImageDataset:
    images: np.ndarray  # uint8 [n, C, H, W]
    labels: np.ndarray  # int64 [n]
    split: str = "train"
    num_classes: int = 10
    stats: NormStats | None = None
    tag: str = ""  # free-form provenance, e.g. "GaussianNoise/5"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.dtype != np.uint8 or self.images.ndim != 4:
            raise InputError(f"images must be uint8 [n,C,H,W], got {self.images.dtype} {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise InputError("labels must have one entry per image")
        if self.split not in SPLITS:
            raise InputError(f"unknown split tag {self.split!r}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise InputError(f"labels must lie in [0, {self.num_classes})")
        if self.stats is not None and self.stats.source != "train":
            raise InputError("normalization stats must come from the train split")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def with_stats(self, stats: NormStats) -> "ImageDataset":
        return ImageDataset(self.images, self.labels, self.split, self.num_classes, stats, self.tag, dict(self.meta))

    def normalized(self) -> np.ndarray:
        """float64 images standardized with the attached train-split stats."""
        if self.stats is None:
            raise InputError("dataset has no normalization stats attached")
        x = self.images.astype(np.float64) / 255.0
        return (x - self.stats.mean[None, :, None, None]) / self.stats.std[None, :, None, None]

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(str(self.images.shape).encode())
        h.update(np.ascontiguousarray(self.images).tobytes())
        h.update(self.labels.astype("<i8").tobytes())
        return h.hexdigest()


def compute_stats(ds: ImageDataset) -> NormStats:
    if ds.split != "train" or ds.tag:
        raise InputError(f"normalization stats may only be computed from clean train data (got split={ds.split!r} tag={ds.tag!r})")
    if len(ds) == 0:
        c = ds.images.shape[1]
        return NormStats(np.zeros(c), np.ones(c))
    x = ds.images.astype(np.float64) / 255.0
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    return NormStats(mean, np.where(std > 0, std, 1.0))


# ---- readers -------------------------------------------------------------

def load_cifar_binary(path, split: str = "train") -> ImageDataset:
    raw = Path(path).read_bytes()
    if len(raw) == 0 or len(raw) % CIFAR_RECORD:
        raise FormatError(f"{path}: size {len(raw)} is not a positive multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise FormatError(f"{path}: label byte {int(labels.max())} > 9")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).copy()
    return ImageDataset(images, labels, split, 10)


def write_cifar_binary(ds: ImageDataset, path) -> None:
    if ds.shape != (3, 32, 32):
        raise InputError("CIFAR binary records hold 3x32x32 images")
    rec = np.concatenate([ds.labels.astype(np.uint8)[:, None], ds.images.reshape(len(ds), -1)], axis=1)
    Path(path).write_bytes(rec.tobytes())


def _read_idx(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise FormatError(f"{path}: bad IDX magic")
    if raw[2] != 0x08:
        raise FormatError(f"{path}: only unsigned-byte IDX data is supported")
    ndim = raw[3]
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise FormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    if len(raw) - head != math.prod(dims):
        raise FormatError(f"{path}: payload size does not match dims {dims}")
    return np.frombuffer(raw, dtype=np.uint8, offset=head).reshape(dims)


def load_idx(images_path, labels_path, split: str = "train", num_classes: int = 10) -> ImageDataset:
    imgs = _read_idx(images_path)
    labels = _read_idx(labels_path).astype(np.int64)
    if imgs.ndim == 3:
        imgs = imgs[:, None]
    if imgs.ndim != 4 or labels.ndim != 1 or labels.shape[0] != imgs.shape[0]:
        raise FormatError("IDX images/labels shapes do not line up")
    if labels.size and labels.max() >= num_classes:
        raise FormatError(f"IDX label {int(labels.max())} >= {num_classes}")
    return ImageDataset(imgs.copy(), labels, split, num_classes)


def write_idx(arr: np.ndarray, path) -> None:
    arr = np.ascontiguousarray(arr, dtype=np.uint8)
    head = bytes([0, 0, 0x08, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(head + arr.tobytes())


def downscale2x(ds: ImageDataset) -> ImageDataset:
    """2x2 mean pooling, rounded half away from zero."""
    n, c, h, w = ds.images.shape
    if h % 2 or w % 2:
        raise InputError("downscale2x needs even spatial dims")
    x = ds.images.astype(np.float64).reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    return ImageDataset(round_half_away(x).astype(np.uint8), ds.labels, ds.split, ds.num_classes, ds.stats, ds.tag, dict(ds.meta))


# ---- internal format ------------------------------------------------------
# data.bin = MAGIC | u32 LE header length | JSON header | labels (u8) | pixels (u8, NCHW)

def dataset_to_bytes(ds: ImageDataset) -> bytes:
    header = {
        "version": FORMAT_VERSION,
        "shape": list(ds.images.shape),
        "split": ds.split,
        "num_classes": ds.num_classes,
        "stats": ds.stats.to_dict() if ds.stats is not None else None,
        "tag": ds.tag,
        "meta": ds.meta,
    }
    hb = json.dumps(header, sort_keys=True).encode()
    return MAGIC + struct.pack("<I", len(hb)) + hb + ds.labels.astype(np.uint8).tobytes() + np.ascontiguousarray(ds.images).tobytes()


def dataset_from_bytes(raw: bytes, where: str = "<bytes>") -> ImageDataset:
    if raw[:4] != MAGIC or len(raw) < 8:
        raise FormatError(f"{where}: not a dataset file")
    (hl,) = struct.unpack("<I", raw[4:8])
    try:
        header = json.loads(raw[8 : 8 + hl])
    except ValueError as exc:
        raise FormatError(f"{where}: corrupt header ({exc})") from None
    if header.get("version") != FORMAT_VERSION:
        raise FormatError(f"{where}: unsupported version {header.get('version')}")
    shape = tuple(header["shape"])
    n = shape[0]
    body = raw[8 + hl :]
    if len(body) != n + math.prod(shape):
        raise FormatError(f"{where}: payload size mismatch")
    labels = np.frombuffer(body[:n], dtype=np.uint8).astype(np.int64)
    images = np.frombuffer(body[n:], dtype=np.uint8).reshape(shape).copy()
    stats = NormStats.from_dict(header["stats"]) if header.get("stats") else None
    return ImageDataset(images, labels, header["split"], header["num_classes"], stats, header.get("tag", ""), header.get("meta", {}))


def save_dataset(ds: ImageDataset, path) -> str:
    """Write ``ds`` and return the sha256 of the file bytes."""
    raw = dataset_to_bytes(ds)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(raw)
    return hashlib.sha256(raw).hexdigest()


def load_dataset(path) -> ImageDataset:
    return dataset_from_bytes(Path(path).read_bytes(), str(path))


# ---- synthetic generator --------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    classes: int = 10
    n: int = 1000
    height: int = 16
    width: int = 16
    channels: int = 3
    noise: float = 8.0  # pixel noise std on the 0..255 scale
    jitter: float = 3.5  # positional jitter in pixels
    signal: float = 0.6  # pattern amplitude multiplier
    amp_low: float = 0.0  # lower end of the per-image amplitude range

    def __post_init__(self):
        if not 1 <= self.classes <= 10:
            raise InputError(f"synthetic generator supports 1..10 classes, got {self.classes}")
        if self.n < 0 or self.height < 4 or self.width < 4:
            raise InputError("bad synthetic dataset dims")


def _render(spec: SynthSpec, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    n, h, w = labels.size, spec.height, spec.width
    yy, xx = np.meshgrid(np.arange(h) / h - 0.5, np.arange(w) / w - 0.5, indexing="ij")
    c = labels.astype(np.float64)
    # grating: orientation from c mod 5, frequency doubles for the upper five classes
    ang = np.pi * (labels % 5) / 5.0
    freq = np.where(labels < 5, 2.0, 3.5)
    dx = rng.normal(0.0, spec.jitter / w, n)
    dy = rng.normal(0.0, spec.jitter / h, n)
    u = (xx[None] - dx[:, None, None]) * np.cos(ang)[:, None, None] + (yy[None] - dy[:, None, None]) * np.sin(ang)[:, None, None]
    phase = rng.uniform(0.0, 2 * np.pi, n)
    bars = np.cos(2 * np.pi * freq[:, None, None] * u + phase[:, None, None])
    # blob on a ring, class-specific angle
    phi = 2 * np.pi * c / 10.0
    bx = 0.25 * np.cos(phi) + dx
    by = 0.25 * np.sin(phi) + dy
    blob = np.exp(-((xx[None] - bx[:, None, None]) ** 2 + (yy[None] - by[:, None, None]) ** 2) / (2 * 0.12**2))
    amp = spec.signal * rng.uniform(spec.amp_low, 1.3, n)
    tint = _class_tints(spec.channels)[labels]  # [n, C, 2]
    img = 128.0 + amp[:, None, None, None] * (
        45.0 * tint[:, :, 0, None, None] * bars[:, None] + 90.0 * tint[:, :, 1, None, None] * blob[:, None]
    )
    img += rng.normal(0.0, spec.noise, img.shape)
    return np.clip(round_half_away(img), 0, 255).astype(np.uint8)


def _class_tints(channels: int) -> np.ndarray:
    # fixed table, independent of the dataset seed
    g = np.random.Generator(np.random.PCG64(20240601))
    return g.uniform(0.4, 1.0, (10, channels, 2)) * g.choice([-1.0, 1.0], (10, channels, 2))


def synth_dataset(spec: SynthSpec, seed: int, split: str = "train") -> ImageDataset:
    """Procedural images; a pure function of (spec, seed, split)."""
    rng = stream(seed, "synth", split)
    labels = rng.integers(0, spec.classes, spec.n)
    images = _render(spec, labels, rng) if spec.n else np.zeros((0, spec.channels, spec.height, spec.width), np.uint8)
    return ImageDataset(images, labels, split, spec.classes)


def synth_splits(seed: int, n_train: int = 5000, n_val: int = 1000, n_test: int = 1000, **kw) -> dict[str, ImageDataset]:
    sizes = {"train": n_train, "val": n_val, "test": n_test}
    out = {s: synth_dataset(SynthSpec(n=sizes[s], **kw), seed, s) for s in SPLITS}
    stats = compute_stats(out["train"])
    return {s: d.with_stats(stats) for s, d in out.items()}


def knn_accuracy(train: ImageDataset, test: ImageDataset, k: int = 3) -> float:
    """Raw-pixel k-NN with majority vote (ties -> nearest-ranked label)."""
    a = train.images.reshape(len(train), -1).astype(np.float64)
    b = test.images.reshape(len(test), -1).astype(np.float64)
    d = (b * b).sum(1)[:, None] - 2.0 * b @ a.T + (a * a).sum(1)[None, :]
    nn = np.argsort(d, axis=1, kind="stable")[:, :k]
    votes = train.labels[nn]
    pred = np.empty(len(test), dtype=np.int64)
    for i, v in enumerate(votes):
        counts = np.bincount(v, minlength=train.num_classes)
        best = np.flatnonzero(counts == counts.max())
        pred[i] = next(lbl for lbl in v if lbl in best)
    return float(np.mean(pred == test.labels))


# ---- corruptions ------------------------------------------------------------

class CorruptionKind(str, enum.Enum):
    GAUSSIAN_NOISE = "GaussianNoise"
    SHOT_NOISE = "ShotNoise"
    IMPULSE_NOISE = "ImpulseNoise"
    BOX_BLUR = "BoxBlur"
    BRIGHTNESS = "Brightness"
    CONTRAST = "Contrast"


# Versioned parameter table; changing any value changes every corrupted hash.
TABLE_VERSION = 1
SEVERITY_TABLE = {
    CorruptionKind.GAUSSIAN_NOISE: [0.04 * 255, 0.08 * 255, 0.12 * 255, 0.18 * 255, 0.26 * 255],
    CorruptionKind.SHOT_NOISE: [60, 25, 12, 5, 3],
    CorruptionKind.IMPULSE_NOISE: [0.01, 0.02, 0.05, 0.08, 0.12],
    CorruptionKind.BOX_BLUR: [(3, 1), (3, 2), (5, 1), (5, 2), (7, 2)],
    CorruptionKind.BRIGHTNESS: [0.1 * 255, 0.2 * 255, 0.3 * 255, 0.4 * 255, 0.5 * 255],
    CorruptionKind.CONTRAST: [0.75, 0.6, 0.45, 0.3, 0.2],
}


@dataclass(frozen=True)
class CorruptionSpec:
    kind: CorruptionKind
    severity: int
    param: object = None  # overrides the table value when given

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", CorruptionKind(self.kind))
        except ValueError:
            raise UsageError(f"unknown corruption kind {self.kind!r}") from None
        if self.param is None and self.severity not in range(1, 6):
            raise UsageError(f"severity must be 1..5, got {self.severity}")

    @property
    def value(self):
        return self.param if self.param is not None else SEVERITY_TABLE[self.kind][self.severity - 1]

    @property
    def name(self) -> str:
        return f"{self.kind.value}/{self.severity}"


def all_specs() -> list[CorruptionSpec]:
    return [CorruptionSpec(k, s) for k in CorruptionKind for s in range(1, 6)]


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.clip(round_half_away(x), 0, 255).astype(np.uint8)


def corrupt(img: np.ndarray, spec: CorruptionSpec, seed: int) -> np.ndarray:
    """Apply one corruption to a uint8 [C,H,W] (or [H,W]) image."""
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise InputError(f"corrupt expects uint8 images, got {img.dtype}")
    x = img.astype(np.float64)
    v = spec.value
    kind = spec.kind
    if kind is CorruptionKind.GAUSSIAN_NOISE:
        rng = stream(seed, "corrupt", kind.value)
        out = x + rng.normal(0.0, v, x.shape)
    elif kind is CorruptionKind.SHOT_NOISE:
        rng = stream(seed, "corrupt", kind.value)
        out = rng.poisson(x / 255.0 * v) / v * 255.0
    elif kind is CorruptionKind.IMPULSE_NOISE:
        rng = stream(seed, "corrupt", kind.value)
        flip = rng.random(x.shape) < v
        salt = rng.random(x.shape) < 0.5
        out = np.where(flip, np.where(salt, 255.0, 0.0), x)
    elif kind is CorruptionKind.BOX_BLUR:
        size, passes = v
        spatial = (1,) * (x.ndim - 2) + (size, size)
        out = x
        for _ in range(passes):
            out = ndimage.uniform_filter(out, size=spatial, mode="nearest")
    elif kind is CorruptionKind.BRIGHTNESS:
        out = x + v
    elif kind is CorruptionKind.CONTRAST:
        m = x.mean()
        out = m + v * (x - m)
    else:  # pragma: no cover
        raise UsageError(f"unknown corruption kind {kind!r}")
    return _to_u8(out)


def image_seed(seed: int, spec: CorruptionSpec, index: int) -> int:
    """Per-image seed for image ``index`` of a suite built with ``seed``."""
    return int(stream(seed, "suite", spec.kind.value, spec.severity, index).integers(0, 2**63 - 1))


def corrupt_dataset(ds: ImageDataset, spec: CorruptionSpec, seed: int) -> ImageDataset:
    out = np.empty_like(ds.images)
    for i in range(len(ds)):
        out[i] = corrupt(ds.images[i], spec, image_seed(seed, spec, i))
    meta = dict(ds.meta, corruption={"kind": spec.kind.value, "severity": spec.severity, "table_version": TABLE_VERSION})
    return ImageDataset(out, ds.labels.copy(), ds.split, ds.num_classes, ds.stats, spec.name, meta)


def build_corrupted_suite(ds: ImageDataset, seed: int) -> dict[tuple[str, int], ImageDataset]:
    if ds.split != "test" or ds.tag:
        raise InputError("corrupted suite must be built from the clean test split")
    return {(s.kind.value, s.severity): corrupt_dataset(ds, s, seed) for s in all_specs()}


def save_suite(suite: dict[tuple[str, int], ImageDataset], root) -> dict[str, str]:
    """Write ``<kind>/<severity>/data.bin`` files; returns name -> sha256."""
    root = Path(root)
    return {f"{k}/{s}": save_dataset(d, root / k / str(s) / "data.bin") for (k, s), d in sorted(suite.items())}


def load_suite(root) -> dict[tuple[str, int], ImageDataset]:
    root = Path(root)
    out = {}
    for s in all_specs():
        p = root / s.kind.value / str(s.severity) / "data.bin"
        if p.exists():
            out[(s.kind.value, s.severity)] = load_dataset(p)
    if not out:
        raise FormatError(f"{root}: no corrupted datasets found")
    return out
