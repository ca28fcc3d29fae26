"""Dataset readers/writers (IDX, CIFAR binary, raw_dir) and deterministic splits."""
from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigurationError, DatasetParseError

FORMATS = ("idx", "cifar_binary", "raw_dir")
SPLITS = ("train", "val", "holdout")

CIFAR_IMAGE_BYTES = 3 * 32 * 32
CIFAR_RECORD_BYTES = 1 + CIFAR_IMAGE_BYTES

_IDX_DTYPES = {
    0x08: np.dtype("u1"),
    0x09: np.dtype("i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


@dataclass
class DatasetSpec:
    format: str = "cifar_binary"
    path: str = ""
    labels_path: str | None = None
    split: tuple[float, ...] = (0.8, 0.2)
    mean: tuple[float, ...] = (0.5,)
    std: tuple[float, ...] = (0.25,)
    num_classes: int = 10
    split_seed: int = 0
    limit: int | None = None

    def validate(self) -> "DatasetSpec":
        if self.format not in FORMATS:
            raise ConfigurationError(f"unknown dataset format {self.format!r}")
        if not 2 <= len(self.split) <= 3 or any(f < 0 for f in self.split) or sum(self.split) > 1 + 1e-9:
            raise ConfigurationError(f"split fractions {self.split} must be 2-3 nonnegative values summing to <= 1")
        if len(self.mean) != len(self.std) or any(s <= 0 for s in self.std):
            raise ConfigurationError("mean/std must have equal length and positive std")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split"] = list(self.split)
        d["mean"] = list(self.mean)
        d["std"] = list(self.std)
        return d


# ----------------------------------------------------------------------
# IDX
# ----------------------------------------------------------------------
def read_idx(path: str | Path) -> np.ndarray:
    """Parse an IDX file (big-endian magic ``00 00 <dtype> <ndim>`` then dims)."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 4:
        raise DatasetParseError("file too short for IDX magic", path, 0)
    if raw[0] != 0 or raw[1] != 0:
        raise DatasetParseError(f"bad IDX magic {raw[:4].hex()}", path, 0)
    code, ndim = raw[2], raw[3]
    if code not in _IDX_DTYPES:
        raise DatasetParseError(f"unknown IDX dtype code 0x{code:02x}", path, 2)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DatasetParseError("truncated IDX dimension header", path, len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    dt = _IDX_DTYPES[code]
    need = header + int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    if len(raw) != need:
        raise DatasetParseError(f"IDX payload size mismatch: expected {need} bytes, found {len(raw)}", path,
                                min(len(raw), need))
    return np.frombuffer(raw, dtype=dt, offset=header).reshape(dims)


def write_idx(path: str | Path, array: np.ndarray) -> None:
    array = np.asarray(array)
    inv = {v.newbyteorder(">") if v.itemsize > 1 else v: k for k, v in _IDX_DTYPES.items()}
    dt = array.dtype.newbyteorder(">") if array.dtype.itemsize > 1 else array.dtype
    if dt not in inv:
        raise ValueError(f"dtype {array.dtype} not representable in IDX")
    header = bytes([0, 0, inv[dt], array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.astype(dt).tobytes())


# ----------------------------------------------------------------------
# CIFAR binary
# ----------------------------------------------------------------------
def read_cifar_binary(paths: str | Path | Sequence[str | Path]) -> tuple[np.ndarray, np.ndarray]:
    """Records of 1 label byte + 3072 pixel bytes (R, G, B planes of 32x32)."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    images, labels = [], []
    for p in paths:
        raw = Path(p).read_bytes()
        if len(raw) % CIFAR_RECORD_BYTES:
            whole = len(raw) // CIFAR_RECORD_BYTES * CIFAR_RECORD_BYTES
            raise DatasetParseError(f"trailing partial record ({len(raw) - whole} bytes)", p, whole)
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32))
    return np.concatenate(images), np.concatenate(labels)


def write_cifar_binary(path: str | Path, images: np.ndarray, labels: np.ndarray) -> None:
    """``images`` are uint8 [n, 3, 32, 32]."""
    images = np.asarray(images, dtype=np.uint8)
    if images.shape[1:] != (3, 32, 32):
        raise ValueError(f"CIFAR records need [n, 3, 32, 32] images, got {images.shape}")
    rec = np.empty((len(images), CIFAR_RECORD_BYTES), dtype=np.uint8)
    rec[:, 0] = np.asarray(labels, dtype=np.uint8)
    rec[:, 1:] = images.reshape(len(images), -1)
    Path(path).write_bytes(rec.tobytes())


# ----------------------------------------------------------------------
# raw_dir: <root>/manifest.txt + one subdirectory per class of *.rgb files
# ----------------------------------------------------------------------
def read_raw_dir(root: str | Path) -> tuple[np.ndarray, np.ndarray]:
    root = Path(root)
    manifest = root / "manifest.txt"
    if not manifest.exists():
        raise DatasetParseError("missing manifest.txt", root)
    meta = {}
    for lineno, line in enumerate(manifest.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DatasetParseError(f"manifest line {lineno} is not key=value", manifest)
        k, v = line.split("=", 1)
        meta[k.strip()] = v.strip()
    try:
        size = int(meta["size"])
        channels = int(meta.get("channels", "3"))
        classes = [c.strip() for c in meta["classes"].split(",") if c.strip()]
    except (KeyError, ValueError) as exc:
        raise DatasetParseError(f"manifest needs size, channels, classes ({exc})", manifest) from exc
    nbytes = size * size * channels
    images, labels = [], []
    for label, name in enumerate(classes):
        d = root / name
        if not d.is_dir():
            raise DatasetParseError(f"class directory {name!r} missing", root)
        for f in sorted(d.glob("*.rgb")):
            raw = f.read_bytes()
            if len(raw) != nbytes:
                raise DatasetParseError(f"expected {nbytes} bytes, found {len(raw)}", f, min(len(raw), nbytes))
            # files are height x width x channels (interleaved)
            images.append(np.frombuffer(raw, dtype=np.uint8).reshape(size, size, channels).transpose(2, 0, 1))
            labels.append(label)
    if not images:
        return np.zeros((0, channels, size, size), np.uint8), np.zeros(0, np.int64)
    return np.stack(images), np.asarray(labels, dtype=np.int64)


def write_raw_dir(root: str | Path, images: np.ndarray, labels: np.ndarray, class_names: Sequence[str]) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    images = np.asarray(images, dtype=np.uint8)
    _, ch, size, _ = images.shape
    (root / "manifest.txt").write_text(
        f"size={size}\nchannels={ch}\nclasses={','.join(class_names)}\n", encoding="utf-8")
    for name in class_names:
        (root / name).mkdir(exist_ok=True)
    for i, (img, y) in enumerate(zip(images, labels)):
        (root / class_names[y] / f"{i:06d}.rgb").write_bytes(img.transpose(1, 2, 0).tobytes())


# ----------------------------------------------------------------------
# splits
# ----------------------------------------------------------------------
def split_indices(n: int, fractions: Sequence[float], seed: int) -> list[np.ndarray]:
    """Disjoint index sets, deterministic in (n, fractions, seed)."""
    perm = np.random.default_rng(seed).permutation(n)
    counts = [int(round(f * n)) for f in fractions]
    out, start = [], 0
    for c in counts:
        c = min(c, n - start)
        out.append(np.sort(perm[start : start + c]))
        start += c
    return out


@dataclass
class Dataset:
    """Normalized float images [n, C, H, W] and integer labels, per split."""

    splits: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    num_classes: int = 10

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        if name not in self.splits:
            raise ConfigurationError(f"dataset has no {name!r} split (have {sorted(self.splits)})")
        return self.splits[name]

    def __iter__(self) -> Iterator[tuple[np.ndarray, int]]:
        x, y = self.split("train")
        for i in range(len(y)):
            yield x[i], int(y[i])

    @property
    def image_shape(self) -> tuple[int, ...]:
        return next(iter(self.splits.values()))[0].shape[1:]


def normalize(images: np.ndarray, mean: Sequence[float], std: Sequence[float]) -> np.ndarray:
    x = images.astype(np.float64) / 255.0
    m = np.asarray(mean, dtype=np.float64).reshape(1, -1, 1, 1)
    s = np.asarray(std, dtype=np.float64).reshape(1, -1, 1, 1)
    return (x - m) / s


def read_images(spec: DatasetSpec) -> tuple[np.ndarray, np.ndarray]:
    """Raw uint8 images [n, C, H, W] and labels for any supported format."""
    if spec.format == "idx":
        imgs = read_idx(spec.path)
        if imgs.ndim == 3:
            imgs = imgs[:, None]
        elif imgs.ndim != 4:
            raise DatasetParseError(f"IDX images must be 3-D or 4-D, got {imgs.ndim}-D", spec.path)
        if spec.labels_path is None:
            raise ConfigurationError("idx format needs labels_path")
        labels = read_idx(spec.labels_path).astype(np.int64).reshape(-1)
    elif spec.format == "cifar_binary":
        p = Path(spec.path)
        files = sorted(p.glob("*.bin")) if p.is_dir() else [p]
        if not files:
            raise DatasetParseError("no *.bin files", p)
        imgs, labels = read_cifar_binary(files)
    else:
        imgs, labels = read_raw_dir(spec.path)
    if len(imgs) != len(labels):
        raise DatasetParseError(f"{len(imgs)} images but {len(labels)} labels", spec.path)
    return imgs, labels


def load_dataset(spec: DatasetSpec) -> Dataset:
    spec.validate()
    imgs, labels = read_images(spec)
    if spec.limit is not None:
        imgs, labels = imgs[: spec.limit], labels[: spec.limit]
    bad = np.flatnonzero((labels < 0) | (labels >= spec.num_classes))
    if bad.size:
        raise DatasetParseError(f"label {labels[bad[0]]} at index {bad[0]} outside [0, {spec.num_classes})", spec.path)
    ch = imgs.shape[1]
    mean = spec.mean * ch if len(spec.mean) == 1 else spec.mean
    std = spec.std * ch if len(spec.std) == 1 else spec.std
    if len(mean) != ch:
        raise ConfigurationError(f"normalization has {len(mean)} channels, images have {ch}")
    x = normalize(imgs, mean, std)
    ds = Dataset(num_classes=spec.num_classes)
    for name, idx in zip(SPLITS, split_indices(len(labels), spec.split, spec.split_seed)):
        ds.splits[name] = (x[idx], labels[idx])
    return ds


# ----------------------------------------------------------------------
# synthetic shapes corpus
# ----------------------------------------------------------------------
SHAPE_CLASSES = ("square", "disk", "ring", "triangle", "plus", "cross", "hbars", "vbars", "ell", "frame_dot")


def _shape_mask(kind: str, s: int) -> np.ndarray:
    yy, xx = np.mgrid[0:s, 0:s]
    c = (s - 1) / 2.0
    r = np.hypot(yy - c, xx - c)
    t = max(1, s // 5)
    if kind == "square":
        return np.ones((s, s), bool)
    if kind == "disk":
        return r <= s / 2.0
    if kind == "ring":
        return (r <= s / 2.0) & (r >= s / 2.0 - t - 0.5)
    if kind == "triangle":
        return np.abs(xx - c) <= yy / 2.0 + 0.5
    if kind == "plus":
        return (np.abs(yy - c) < t / 2.0 + 0.5) | (np.abs(xx - c) < t / 2.0 + 0.5)
    if kind == "cross":
        return (np.abs(yy - xx) < t / 2.0 + 0.5) | (np.abs(yy + xx - (s - 1)) < t / 2.0 + 0.5)
    if kind == "hbars":
        return (yy < t) | (yy >= s - t)
    if kind == "vbars":
        return (xx < t) | (xx >= s - t)
    if kind == "ell":
        return (xx < t) | (yy >= s - t)
    if kind == "frame_dot":
        frame = (yy < t) | (yy >= s - t) | (xx < t) | (xx >= s - t)
        return frame | (r <= max(1.0, s / 6.0))
    raise ValueError(kind)


def make_shapes(n: int, seed: int = 0, size: int = 32, distractors: int = 2,
                scale: tuple[int, int] = (9, 15), noise: float = 18.0) -> tuple[np.ndarray, np.ndarray]:
    """Cluttered 10-class shape images as uint8 [n, 3, size, size].

    The class is the shape of the single large object; its color, size and
    position are random, and small colored blobs act as distractors.
    """
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, len(SHAPE_CLASSES), size=n)
    out = np.empty((n, 3, size, size), dtype=np.uint8)
    yy, xx = np.mgrid[0:size, 0:size] / size
    for i in range(n):
        base = rng.uniform(40, 140, size=3)
        grad = rng.uniform(-40, 40, size=(3, 2))
        img = base[:, None, None] + grad[:, 0, None, None] * yy + grad[:, 1, None, None] * xx
        for _ in range(distractors):
            h, w = rng.integers(2, 5, size=2)
            y0, x0 = rng.integers(0, size - h), rng.integers(0, size - w)
            img[:, y0 : y0 + h, x0 : x0 + w] = rng.uniform(0, 255, size=3)[:, None, None]
        s = int(rng.integers(scale[0], scale[1] + 1))
        mask = _shape_mask(SHAPE_CLASSES[labels[i]], s)
        if rng.random() < 0.5:
            mask = mask[:, ::-1]
        y0, x0 = rng.integers(0, size - s + 1, size=2)
        color = rng.uniform(0, 255, size=3)
        while np.abs(color - base).max() < 70:
            color = rng.uniform(0, 255, size=3)
        region = img[:, y0 : y0 + s, x0 : x0 + s]
        region[:, mask] = color[:, None]
        img += rng.normal(0, noise, size=img.shape)
        out[i] = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return out, labels.astype(np.int64)
