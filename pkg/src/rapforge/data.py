"""Datasets: IDX ingestion, optional PNG directories, and seeded synthetic domains.

Synthetic domains come in two flavours. Labeled ones (``digits``,
``glyphs``) are 10-class sets used to pretrain the victim classifiers.
Unlabeled texture ones (``stripes``, ``blobs``, ``checker``, ``perlin``)
serve as foreign training distributions for the generator. Every set is a
pure function of ``(name, seed, size, params)``.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class DataError(ValueError):
    pass


class CountMismatchError(DataError):
    pass


@dataclass(frozen=True)
class DatasetHandle:
    name: str
    images: np.ndarray
    labels: np.ndarray | None = None
    splits: dict = field(default_factory=dict)
    # which domain the images come from; used to tag threat models
    domain: str = ""

    def __post_init__(self):
        imgs = self.images
        if imgs.ndim != 4:
            raise DataError(f"images must be (n, c, h, w), got {imgs.shape}")
        if imgs.size and (imgs.min() < 0.0 or imgs.max() > 1.0):
            raise DataError("images must lie in [0, 1]")
        if self.labels is not None and len(self.labels) != len(imgs):
            raise CountMismatchError(f"{len(imgs)} images but {len(self.labels)} labels")
        if not self.domain:
            object.__setattr__(self, "domain", self.name)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def labeled(self) -> bool:
        return self.labels is not None

    def indices(self, tag: str) -> np.ndarray:
        if tag not in self.splits:
            raise DataError(f"dataset {self.name!r} has no {tag!r} split")
        return self.splits[tag]

    def subset(self, tag: str) -> "DatasetHandle":
        idx = self.indices(tag)
        labels = self.labels[idx] if self.labels is not None else None
        return DatasetHandle(f"{self.name}:{tag}", self.images[idx], labels, {}, self.domain)


@dataclass(frozen=True)
class DomainSpec:
    kind: str  # "idx_files" | "image_dir" | "synthetic"
    name: str = ""
    seed: int = 0
    size: int = 1000
    params: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# IDX


def _open(path):
    path = os.fspath(path)
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4 + 4 * ndim:
        raise DataError(f"{path}: truncated IDX header")
    (got,) = struct.unpack_from(">I", raw, 0)
    if got != magic:
        raise DataError(f"{path}: bad IDX magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    body = raw[4 + 4 * ndim:]
    need = int(np.prod(dims))
    if len(body) < need:
        raise DataError(f"{path}: truncated IDX payload ({len(body)} of {need} bytes)")
    return np.frombuffer(body, dtype=np.uint8, count=need).reshape(dims)


def load_idx(images_path, labels_path=None, name: str | None = None) -> DatasetHandle:
    """Read an IDX3 image file (and optional IDX1 label file); pixels scaled to [0, 1]."""
    imgs = _read_idx(images_path, IMAGE_MAGIC, 3)
    labels = None
    if labels_path is not None:
        labels = _read_idx(labels_path, LABEL_MAGIC, 1).astype(np.int64)
        if len(labels) != len(imgs):
            raise CountMismatchError(f"{len(imgs)} images but {len(labels)} labels")
    images = imgs[:, None].astype(np.float64) / 255.0
    return DatasetHandle(name or Path(images_path).name, images, labels)


def write_idx(images_path, images: np.ndarray, labels_path=None, labels=None) -> None:
    """Write (n, h, w) or (n, 1, h, w) images in [0, 1] as IDX3 (rounded to bytes)."""
    imgs = np.asarray(images)
    if imgs.ndim == 4:
        imgs = imgs[:, 0]
    raw = np.clip(np.rint(imgs * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGE_MAGIC, *raw.shape))
        fh.write(raw.tobytes())
    if labels_path is not None:
        lab = np.asarray(labels, dtype=np.uint8)
        with open(labels_path, "wb") as fh:
            fh.write(struct.pack(">II", LABEL_MAGIC, len(lab)))
            fh.write(lab.tobytes())


def load_image_dir(root, name: str | None = None) -> DatasetHandle:
    """Read ``<root>/<class>/<image>.png``; classes are the sorted subdirectory names."""
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover - Pillow is optional
        raise DataError("image_dir datasets need Pillow installed") from exc
    root = Path(root)
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    images, labels = [], []
    for k, cls in enumerate(classes):
        for f in sorted((root / cls).glob("*.png")):
            with Image.open(f) as im:
                images.append(np.asarray(im.convert("L"), dtype=np.float64) / 255.0)
            labels.append(k)
    if not images:
        raise DataError(f"no PNG images under {root}")
    return DatasetHandle(name or root.name, np.stack(images)[:, None], np.asarray(labels, dtype=np.int64))


# --------------------------------------------------------------------------
# synthetic domains

_HW = 28


def _grid(h=_HW, w=_HW):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return yy, xx


def _background(rng, h=_HW, w=_HW):
    """Smooth linear ramp with a random direction and mid-range level."""
    yy, xx = _grid(h, w)
    ang = rng.uniform(0, 2 * np.pi)
    ramp = (np.cos(ang) * (xx - w / 2) + np.sin(ang) * (yy - h / 2)) / max(h, w)
    base = rng.uniform(0.25, 0.5)
    amp = rng.uniform(0.0, 0.3)
    return np.clip(base + amp * ramp, 0.0, 1.0)


def _composite(mask, rng, h=_HW, w=_HW):
    bg = _background(rng, h, w)
    ink = rng.uniform(0.8, 1.0)
    return np.clip(bg * (1.0 - mask) + ink * mask, 0.0, 1.0)


def _affine_place(src: np.ndarray, rng, out=_HW, scale_range=(0.95, 1.1), rot=8.0, shift=1.5):
    """Scale, rotate and shift a small mask into an ``out`` x ``out`` canvas."""
    zoom = (out - 8) / src.shape[0] * rng.uniform(*scale_range)
    theta = np.deg2rad(rng.uniform(-rot, rot))
    c, s = np.cos(theta), np.sin(theta)
    mat = np.array([[c, -s], [s, c]]) / zoom
    centre_out = np.array([out / 2 - 0.5, out / 2 - 0.5]) + rng.uniform(-shift, shift, size=2)
    centre_src = np.array([src.shape[0] / 2 - 0.5, src.shape[1] / 2 - 0.5])
    offset = centre_src - mat @ centre_out
    return np.clip(ndimage.affine_transform(src, mat, offset=offset, output_shape=(out, out), order=1), 0.0, 1.0)


def _digits(rng, size, params):
    from sklearn.datasets import load_digits

    bank = load_digits()
    imgs, targets = bank.images / 16.0, bank.target
    subset = params.get("subset", "all")
    idx = np.arange(len(imgs))
    if subset == "train":
        idx = idx[idx % 5 != 0]
    elif subset == "test":
        idx = idx[idx % 5 == 0]
    elif subset != "all":
        raise DataError(f"unknown digits subset {subset!r}")
    pick = rng.choice(idx, size=size, replace=True)
    out = np.empty((size, 1, _HW, _HW))
    for i, j in enumerate(pick):
        out[i, 0] = _composite(_affine_place(imgs[j], rng), rng)
    return out, targets[pick].astype(np.int64)


def _glyph_mask(k: int, rng) -> np.ndarray:
    yy, xx = _grid()
    cy, cx = _HW / 2 - 0.5 + rng.uniform(-3, 3, size=2)
    r = rng.uniform(6.0, 10.0)
    t = rng.uniform(1.5, 3.0)
    ang = rng.uniform(-0.3, 0.3)
    u = np.cos(ang) * (xx - cx) + np.sin(ang) * (yy - cy)
    v = -np.sin(ang) * (xx - cx) + np.cos(ang) * (yy - cy)
    rad = np.hypot(u, v)
    box = np.maximum(np.abs(u), np.abs(v))
    dia = np.abs(u) + np.abs(v)
    if k == 0:  # disk
        m = rad <= r
    elif k == 1:  # ring
        m = np.abs(rad - r) <= t / 2 + 0.5
    elif k == 2:  # filled square
        m = box <= r * 0.8
    elif k == 3:  # square outline
        m = np.abs(box - r * 0.8) <= t / 2 + 0.5
    elif k == 4:  # triangle
        m = (v <= r * 0.6) & (v >= -r * 0.9 + 1.8 * np.abs(u))
    elif k == 5:  # plus
        m = ((np.abs(u) <= t) & (np.abs(v) <= r)) | ((np.abs(v) <= t) & (np.abs(u) <= r))
    elif k == 6:  # diagonal cross
        m = ((np.abs(u - v) <= t * 1.4) | (np.abs(u + v) <= t * 1.4)) & (box <= r * 0.8)
    elif k == 7:  # two horizontal bars
        m = (np.abs(np.abs(v) - r * 0.5) <= t) & (np.abs(u) <= r)
    elif k == 8:  # two vertical bars
        m = (np.abs(np.abs(u) - r * 0.5) <= t) & (np.abs(v) <= r)
    else:  # diamond outline
        m = np.abs(dia - r) <= t / 2 + 0.5
    return ndimage.gaussian_filter(m.astype(np.float64), 0.6)


def _glyphs(rng, size, params):
    labels = rng.integers(0, 10, size=size)
    out = np.empty((size, 1, _HW, _HW))
    for i, k in enumerate(labels):
        out[i, 0] = _composite(np.clip(_glyph_mask(int(k), rng) * 1.2, 0, 1), rng)
    return out, labels.astype(np.int64)


def _stripes(rng, size, params):
    yy, xx = _grid()
    out = np.empty((size, 1, _HW, _HW))
    for i in range(size):
        ang = rng.uniform(0, np.pi)
        freq = rng.uniform(0.15, 0.6)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.25, 0.5)
        out[i, 0] = 0.5 + amp * np.sin(freq * (np.cos(ang) * xx + np.sin(ang) * yy) + phase)
    return np.clip(out, 0, 1), None


def _blobs(rng, size, params):
    yy, xx = _grid()
    out = np.zeros((size, 1, _HW, _HW))
    for i in range(size):
        img = np.full((_HW, _HW), rng.uniform(0.0, 0.15))
        for _ in range(rng.integers(2, 6)):
            cy, cx = rng.uniform(0, _HW, size=2)
            s = rng.uniform(2.0, 5.0)
            img += rng.uniform(0.3, 0.8) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
        out[i, 0] = img
    return np.clip(out, 0, 1), None


def _checker(rng, size, params):
    yy, xx = _grid()
    out = np.empty((size, 1, _HW, _HW))
    for i in range(size):
        cell = rng.uniform(3.0, 8.0)
        ang = rng.uniform(0, np.pi / 2)
        u = np.cos(ang) * xx + np.sin(ang) * yy
        v = -np.sin(ang) * xx + np.cos(ang) * yy
        lo, hi = np.sort(rng.uniform(0.1, 0.95, size=2))
        out[i, 0] = np.where((np.floor(u / cell) + np.floor(v / cell)) % 2 == 0, lo, hi)
    return out, None


def _perlin(rng, size, params):
    out = np.empty((size, 1, _HW, _HW))
    for i in range(size):
        g = int(rng.integers(3, 8))
        coarse = rng.uniform(0, 1, size=(g, g))
        img = ndimage.zoom(coarse, _HW / g, order=3)[:_HW, :_HW]
        fine = ndimage.zoom(rng.uniform(0, 1, size=(14, 14)), 2, order=1)
        img = 0.8 * img + 0.2 * fine
        lo, hi = img.min(), img.max()
        out[i, 0] = (img - lo) / (hi - lo + 1e-12)
    return np.clip(out, 0, 1), None


SYNTHETIC = {
    "digits": _digits,
    "glyphs": _glyphs,
    "stripes": _stripes,
    "blobs": _blobs,
    "checker": _checker,
    "perlin": _perlin,
}
TEXTURES = ("stripes", "blobs", "checker", "perlin")


def synth_domain(spec: DomainSpec) -> DatasetHandle:
    """Materialize a synthetic domain deterministically from ``(name, seed, size, params)``."""
    if spec.name not in SYNTHETIC:
        raise DataError(f"unknown synthetic domain {spec.name!r}; registered: {sorted(SYNTHETIC)}")
    if spec.size < 1:
        raise DataError("size must be positive")
    rng = np.random.default_rng([spec.seed, sorted(SYNTHETIC).index(spec.name)])
    images, labels = SYNTHETIC[spec.name](rng, spec.size, dict(spec.params))
    tag = spec.params.get("subset")
    name = f"{spec.name}-{tag}" if tag else spec.name
    return DatasetHandle(f"{name}/s{spec.seed}/n{spec.size}", images, labels, {}, domain=spec.name)


def materialize(spec: DomainSpec) -> DatasetHandle:
    if spec.kind == "synthetic":
        return synth_domain(spec)
    if spec.kind == "idx_files":
        return load_idx(spec.params["images"], spec.params.get("labels"), name=spec.name or None)
    if spec.kind == "image_dir":
        return load_image_dir(spec.params["root"], name=spec.name or None)
    raise DataError(f"unknown domain kind {spec.kind!r}")


def split(handle: DatasetHandle, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> DatasetHandle:
    """Seeded disjoint train/val/test index split; rounding leftovers go to train."""
    fr = tuple(float(f) for f in fractions)
    if len(fr) != 3 or any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
        raise DataError(f"fractions must be three nonnegative numbers summing to 1, got {fractions}")
    n = len(handle)
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(round(fr[1] * n))
    n_test = int(round(fr[2] * n))
    n_val = min(n_val, n)
    n_test = min(n_test, n - n_val)
    n_train = n - n_val - n_test
    splits = {
        "train": np.sort(perm[:n_train]),
        "val": np.sort(perm[n_train:n_train + n_val]),
        "test": np.sort(perm[n_train + n_val:]),
    }
    return replace(handle, splits=splits)
