"""Datasets, IDX parsing, augmentation and per-image standardization."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
DATA_DIR_ENV = "SGRLAB_DATA_DIR"
VAR_FLOOR = 1e-8
PAD = 4


@dataclass
class Dataset:
    """Images in pixel scale, shape (N, H, W, C), or feature vectors (N, d)."""

    images: np.ndarray
    labels: np.ndarray
    name: str = "dataset"
    kind: str = "mnist"  # mnist | cifar | synthetic
    pixel_range: tuple[float, float] = (0.0, 1.0)
    num_classes: int = 10
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ContractError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ContractError(f"labels outside [0, {self.num_classes})")
        lo, hi = self.pixel_range
        if self.images.size and (self.images.min() < lo - 1e-12 or self.images.max() > hi + 1e-12):
            raise ContractError(f"pixel values outside declared range {self.pixel_range}")

    def __len__(self):
        return len(self.labels)

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return self.images.shape[1:]

    @property
    def geometry(self) -> tuple[int, int, int] | None:
        return tuple(self.sample_shape) if len(self.sample_shape) == 3 else None

    @property
    def is_image(self) -> bool:
        return self.geometry is not None

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.name, self.kind, self.pixel_range,
                       self.num_classes, dict(self.meta))

    def head(self, n: int | None) -> "Dataset":
        return self if n is None or n >= len(self) else self.take(np.arange(n))


# -- IDX ------------------------------------------------------------------

def _open(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_idx(path, expected_magic):
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: file too short for an IDX header", offset=len(raw))
    (magic,) = struct.unpack(">i", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", offset=0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated header", offset=len(raw))
    dims = struct.unpack(f">{ndim}i", raw[4:header])
    n = int(np.prod(dims))
    if len(raw) < header + n:
        raise FormatError(f"{path}: truncated payload, need {n} bytes", offset=len(raw))
    if len(raw) > header + n:
        raise FormatError(f"{path}: {len(raw) - header - n} trailing bytes", offset=header + n)
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=header).reshape(dims)


def write_idx(path, array) -> Path:
    """Write a uint8 array as IDX (gzip if the name ends in .gz)."""
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        raise ContractError("IDX writer supports uint8 only")
    magic = 0x0800 | arr.ndim
    payload = struct.pack(">i", magic) + struct.pack(f">{arr.ndim}i", *arr.shape) + arr.tobytes()
    path = Path(path)
    if path.suffix == ".gz":
        # empty name and zero mtime keep the bytes independent of path and clock
        with open(path, "wb") as raw, gzip.GzipFile(filename="", fileobj=raw, mode="wb", mtime=0) as fh:
            fh.write(payload)
    else:
        path.write_bytes(payload)
    return path


def load_idx(images_path, labels_path, name="mnist", num_classes=10) -> Dataset:
    """Parse an IDX image/label pair into a Dataset with pixels scaled to [0, 1]."""
    imgs = _read_idx(images_path, IMAGE_MAGIC)
    labels = _read_idx(labels_path, LABEL_MAGIC)
    if len(imgs) != len(labels):
        raise FormatError(f"{images_path}: {len(imgs)} images but {len(labels)} labels")
    images = imgs.astype(np.float64)[..., None] / 255.0
    return Dataset(images, labels.astype(np.int64), name=name, kind="mnist", num_classes=num_classes)


def data_dir(explicit=None) -> Path:
    if explicit:
        return Path(explicit)
    env = os.environ.get(DATA_DIR_ENV)
    if env:
        return Path(env)
    return Path(__file__).resolve().parents[2] / "data"


def _find(directory: Path, stem: str) -> Path:
    for cand in (directory / stem, directory / f"{stem}.gz"):
        if cand.exists():
            return cand
    raise FileNotFoundError(f"no {stem}[.gz] in {directory}")


def load_mnist(directory=None, split="train") -> Dataset:
    d = data_dir(directory)
    if (d / "mnist").is_dir():
        d = d / "mnist"
    prefix = "train" if split == "train" else "t10k"
    ds = load_idx(_find(d, f"{prefix}-images-idx3-ubyte"), _find(d, f"{prefix}-labels-idx1-ubyte"),
                  name=f"mnist-{split}")
    return ds


def stratified_head(ds: Dataset, n: int | None) -> Dataset:
    """First ``n`` samples in class-interleaved order, so every prefix is near-balanced."""
    if n is None or n >= len(ds):
        return ds
    order = np.argsort(ds.labels, kind="stable")
    rank = np.empty(len(ds), dtype=np.int64)
    for k in range(ds.num_classes):
        members = order[ds.labels[order] == k]
        rank[members] = np.arange(len(members))
    idx = np.lexsort((ds.labels, rank))[:n]
    return ds.take(np.sort(idx))


# -- synthetic ------------------------------------------------------------

def synthetic_blobs(K: int, d: int, n_per_class: int, separation: float, seed: int = 0) -> Dataset:
    """Gaussian blobs with centers drawn in [0.25, 0.75]^d.

    The within-class standard deviation is the smallest center distance
    divided by ``separation``; values are clipped into [0, 1].
    """
    if K < 2:
        raise ContractError("need at least two classes")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0.25, 0.75, size=(K, d))
    diff = centers[:, None, :] - centers[None, :, :]
    dist = np.sqrt((diff ** 2).sum(-1))
    dmin = dist[np.triu_indices(K, 1)].min()
    std = dmin / separation
    x = np.concatenate([c + std * rng.normal(size=(n_per_class, d)) for c in centers])
    y = np.repeat(np.arange(K), n_per_class)
    perm = rng.permutation(len(y))
    return Dataset(np.clip(x[perm], 0.0, 1.0), y[perm], name="blobs", kind="synthetic", num_classes=K,
                   meta={"centers": centers, "std": std})


# -- augmentation ---------------------------------------------------------

def augment(image, rng, kind: str = "mnist", offset=None, flip=None) -> np.ndarray:
    """Zero-pad 4 pixels per side, crop back to size at a random offset, maybe flip.

    Flips only apply to ``cifar`` data (digits are not mirror-symmetric).
    ``offset``/``flip`` override the random choices.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    padded = np.pad(img, ((PAD, PAD), (PAD, PAD)) + ((0, 0),) * (img.ndim - 2))
    if offset is None:
        offset = rng.integers(0, 2 * PAD + 1, size=2)
    oy, ox = int(offset[0]), int(offset[1])
    out = padded[oy:oy + h, ox:ox + w]
    if flip is None:
        flip = kind == "cifar" and rng.random() < 0.5
    if flip:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def augment_batch(images, rng, kind: str = "mnist") -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    n, h, w = images.shape[:3]
    offsets = rng.integers(0, 2 * PAD + 1, size=(n, 2))
    flips = (rng.random(n) < 0.5) if kind == "cifar" else np.zeros(n, dtype=bool)
    padded = np.pad(images, ((0, 0), (PAD, PAD), (PAD, PAD)) + ((0, 0),) * (images.ndim - 3))
    out = np.empty_like(images)
    for i in range(n):
        oy, ox = offsets[i]
        crop = padded[i, oy:oy + h, ox:ox + w]
        out[i] = crop[:, ::-1] if flips[i] else crop
    return out


# -- standardization ------------------------------------------------------

@dataclass
class InputSpace:
    """Per-sample affine map between pixel space and model-input space.

    model = (pixel - shift) / scale.  Attacks express budgets in pixel units
    and clip in pixel space through this map.
    """

    shift: np.ndarray
    scale: np.ndarray
    lo: float = 0.0
    hi: float = 1.0

    def _b(self, v, ndim):
        return np.asarray(v).reshape((-1,) + (1,) * (ndim - 1))

    def to_model(self, pixels):
        p = np.asarray(pixels, dtype=np.float64)
        return (p - self._b(self.shift, p.ndim)) / self._b(self.scale, p.ndim)

    def to_pixel(self, z):
        z = np.asarray(z, dtype=np.float64)
        return z * self._b(self.scale, z.ndim) + self._b(self.shift, z.ndim)

    def clip(self, z):
        return self.to_model(np.clip(self.to_pixel(z), self.lo, self.hi))

    def eps(self, eps_pixel, ndim):
        """Per-sample budget in model units, shaped to broadcast against a batch."""
        return eps_pixel / self._b(self.scale, ndim)

    def take(self, idx) -> "InputSpace":
        return InputSpace(self.shift[idx], self.scale[idx], self.lo, self.hi)

    def __len__(self):
        return len(self.shift)


def standardize(images, policy: str = "per_image", pixel_range=(0.0, 1.0), batched: bool = True):
    """Map pixels to model inputs; returns ``(z, InputSpace)``.

    ``per_image``: zero mean, unit variance for each sample, with variance
    floored at 1e-8.  ``none``: identity map.  Pass ``batched=False`` for a
    single image.
    """
    if policy not in ("per_image", "none"):
        raise ContractError(f"unknown standardization policy {policy!r}")
    x = np.asarray(images, dtype=np.float64)
    if not batched:
        x = x[None]
    n = x.shape[0]
    flat = x.reshape(n, -1)
    if policy == "none":
        shift, scale = np.zeros(n), np.ones(n)
    else:
        shift = flat.mean(axis=1)
        scale = np.sqrt(np.maximum(flat.var(axis=1), VAR_FLOOR))
    space = InputSpace(shift, scale, *pixel_range)
    z = space.to_model(x)
    return (z, space) if batched else (z[0], space)


def prepare(ds: Dataset, policy: str | None = None):
    """Standardize a whole dataset with the default policy for its kind."""
    if policy is None:
        policy = "none" if ds.kind == "synthetic" else "per_image"
    return standardize(ds.images, policy, ds.pixel_range)
