"""Classifier and generator networks, their registry, and the weight file format.

The classifier plays the fixed discriminator: its parameters are created
with ``requires_grad=False`` once frozen, so gradients flow through it to the
input image but are never materialized for its own weights.

Weight files are little-endian binary::

    b"RAPWTS01"
    u32  payload length
    payload:
        u32 entry count
        per entry:
            u16 name length, name (UTF-8)
            u8  dtype tag (1 = float64, 2 = uint8)
            u8  ndim, then ndim x u32 dims
            raw little-endian scalars
    u32  CRC-32 of payload
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

MAGIC = b"RAPWTS01"
_DTYPES = {1: np.dtype("<f8"), 2: np.dtype("u1")}
_TAGS = {np.dtype("<f8"): 1, np.dtype("u1"): 2}
META_KEY = "__meta__"


class UnknownArchitectureError(KeyError):
    pass


class WeightFileError(ValueError):
    pass


class ChecksumError(WeightFileError):
    pass


class MagicError(WeightFileError):
    pass


class WeightShapeError(WeightFileError):
    pass


# --------------------------------------------------------------------------
# layers


class Module:
    """Minimal container: parameters are Tensors found on attributes, in order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + name + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self.named_parameters())

    def load_state_dict(self, state) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise WeightShapeError(f"parameter names differ: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise WeightShapeError(f"{k}: file has shape {arr.shape}, network expects {p.shape}")
            p.data = np.array(arr, dtype=np.float64)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:  # pragma: no cover - abstract
        raise NotImplementedError


def _uniform(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> Tensor:
    bound = gain * np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Conv2d(Module):
    def __init__(self, cin, cout, k, rng, stride=1, padding=0, gain=1.0):
        self.weight = _uniform(rng, (cout, cin, k, k), cin * k * k, gain)
        self.bias = Tensor(np.zeros(cout), requires_grad=True)
        self.stride, self.padding = stride, padding

    def forward(self, x):
        return dc.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, cin, cout, k, rng, stride=2, padding=1, output_padding=1):
        # fan-in of a transposed conv output pixel is roughly cin * k * k / stride**2
        self.weight = _uniform(rng, (cin, cout, k, k), max(1, cin * k * k // (stride * stride)))
        self.bias = Tensor(np.zeros(cout), requires_grad=True)
        self.stride, self.padding, self.output_padding = stride, padding, output_padding

    def forward(self, x):
        return dc.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding, self.output_padding)


class Linear(Module):
    def __init__(self, fin, fout, rng, gain=1.0):
        self.weight = _uniform(rng, (fin, fout), fin, gain)
        self.bias = Tensor(np.zeros(fout), requires_grad=True)

    def forward(self, x):
        return dc.matmul(x, self.weight) + self.bias


class InstanceNorm2d(Module):
    def __init__(self, channels, eps=1e-5):
        self.weight = Tensor(np.ones(channels), requires_grad=True)
        self.bias = Tensor(np.zeros(channels), requires_grad=True)
        self.eps = eps

    def forward(self, x):
        return dc.instance_norm(x, self.weight, self.bias, self.eps)


class ReLU(Module):
    def forward(self, x):
        return dc.relu(x)


class MaxPool2d(Module):
    def __init__(self, size=2):
        self.size = size

    def forward(self, x):
        return dc.max_pool2d(x, self.size)


class Flatten(Module):
    def forward(self, x):
        return dc.reshape(x, (x.shape[0], -1))


class Sequential(Module):
    def __init__(self, *layers):
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class ResidualBlock(Module):
    """conv-norm-relu-conv-norm with an identity skip."""

    def __init__(self, channels, rng):
        self.conv1 = Conv2d(channels, channels, 3, rng, padding=1)
        self.norm1 = InstanceNorm2d(channels)
        self.conv2 = Conv2d(channels, channels, 3, rng, padding=1)
        self.norm2 = InstanceNorm2d(channels)

    def forward(self, x):
        h = dc.relu(self.norm1(self.conv1(x)))
        return x + self.norm2(self.conv2(h))


# --------------------------------------------------------------------------
# networks


class ClassifierNet(Module):
    """Convolutional classifier mapping (N, C, H, W) images to (N, num_classes) logits."""

    kind = "classifier"

    def __init__(self, arch: str, body: Sequential, input_shape, num_classes: int):
        self.arch = arch
        self.body = body
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.frozen = False

    def forward(self, x: Tensor) -> Tensor:
        if tuple(x.shape[1:]) != self.input_shape:
            raise dc.ShapeError(f"classifier expects (N, {self.input_shape}), got {x.shape}")
        return self.body(x)

    def freeze(self) -> "ClassifierNet":
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        self.frozen = True
        return self

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Argmax labels; ``np.argmax`` already breaks ties toward the lowest index."""
        return self.logits(x, batch_size).argmax(axis=1)

    def logits(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = []
        with dc.no_grad():
            for i in range(0, len(x), batch_size):
                out.append(self.forward(Tensor(x[i:i + batch_size])).data)
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.num_classes))

    def meta(self) -> dict:
        return {"kind": self.kind, "arch": self.arch, "input_shape": list(self.input_shape),
                "num_classes": self.num_classes}


class GeneratorNet(Module):
    """Residual encoder-decoder producing an unbounded adversarial image in [0, 1]."""

    kind = "generator"

    def __init__(self, arch, down_blocks, res_blocks, up_blocks, head, input_shape):
        self.arch = arch
        self.down_blocks = down_blocks
        self.res_blocks = res_blocks
        self.up_blocks = up_blocks
        self.output_head = head
        self.input_shape = tuple(input_shape)

    def forward(self, x: Tensor) -> Tensor:
        if tuple(x.shape[1:]) != self.input_shape:
            raise dc.ShapeError(f"generator expects (N, {self.input_shape}), got {x.shape}")
        h = x
        for block in self.down_blocks + self.res_blocks + self.up_blocks:
            h = block(h)
        h = dc.tanh(self.output_head(h))
        return (h + 1.0) * 0.5

    def generate(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = []
        with dc.no_grad():
            for i in range(0, len(x), batch_size):
                out.append(self.forward(Tensor(x[i:i + batch_size])).data)
        return np.concatenate(out, axis=0) if out else np.zeros((0,) + self.input_shape)

    def meta(self) -> dict:
        return {"kind": self.kind, "arch": self.arch, "input_shape": list(self.input_shape)}


def _convnet_s(rng, c, h, w, k):
    return Sequential(
        Conv2d(c, 16, 3, rng, padding=1), ReLU(), MaxPool2d(2),
        Conv2d(16, 32, 3, rng, padding=1), ReLU(), MaxPool2d(2),
        Flatten(),
        Linear(32 * (h // 4) * (w // 4), 64, rng), ReLU(),
        Linear(64, k, rng, gain=0.5),
    )


def _convnet_m(rng, c, h, w, k):
    return Sequential(
        Conv2d(c, 8, 5, rng, padding=2), ReLU(),
        Conv2d(8, 16, 3, rng, padding=1), ReLU(), MaxPool2d(2),
        Conv2d(16, 32, 3, rng, padding=1), ReLU(),
        Conv2d(32, 32, 3, rng, padding=1), ReLU(), MaxPool2d(2),
        Flatten(),
        Linear(32 * (h // 4) * (w // 4), 64, rng), ReLU(),
        Linear(64, k, rng, gain=0.5),
    )


CLASSIFIERS = {"convnet-s": _convnet_s, "convnet-m": _convnet_m}
GENERATORS = {"resgen-s": {"widths": (16, 32), "res_blocks": 3, "up_widths": (16, 8)}}


def _resolve(spec, registry):
    name = spec["arch"] if isinstance(spec, dict) else spec
    if name not in registry:
        raise UnknownArchitectureError(f"unknown architecture {name!r}; registered: {sorted(registry)}")
    return name


def build_classifier(spec="convnet-s", seed: int = 0, input_shape=(1, 28, 28), num_classes: int = 10) -> ClassifierNet:
    """Build a registered classifier with seeded fan-in uniform initialization.

    ``spec`` is an architecture name or a dict with ``arch`` and optionally
    ``input_shape`` / ``num_classes``.
    """
    name = _resolve(spec, CLASSIFIERS)
    if isinstance(spec, dict):
        input_shape = spec.get("input_shape", input_shape)
        num_classes = spec.get("num_classes", num_classes)
    c, h, w = input_shape
    if h % 4 or w % 4:
        raise dc.ShapeError(f"classifier input spatial size must be divisible by 4, got {(h, w)}")
    rng = np.random.default_rng(seed)
    return ClassifierNet(name, CLASSIFIERS[name](rng, c, h, w, num_classes), input_shape, num_classes)


def build_generator(spec="resgen-s", seed: int = 0, input_shape=(1, 28, 28)) -> GeneratorNet:
    """Build a registered generator: strided down blocks, residual blocks, transposed-conv up blocks."""
    name = _resolve(spec, GENERATORS)
    if isinstance(spec, dict):
        input_shape = spec.get("input_shape", input_shape)
    cfg = GENERATORS[name]
    c, h, w = input_shape
    if h % 4 or w % 4:
        raise dc.ShapeError(f"generator input spatial size must be divisible by 4, got {(h, w)}")
    rng = np.random.default_rng(seed)
    down, cin = [], c
    for width in cfg["widths"]:
        down.append(Sequential(Conv2d(cin, width, 3, rng, stride=2, padding=1), InstanceNorm2d(width), ReLU()))
        cin = width
    res = [ResidualBlock(cin, rng) for _ in range(cfg["res_blocks"])]
    up = []
    for width in cfg["up_widths"]:
        up.append(Sequential(ConvTranspose2d(cin, width, 3, rng), InstanceNorm2d(width), ReLU()))
        cin = width
    head = Conv2d(cin, c, 3, rng, padding=1)
    return GeneratorNet(name, down, res, up, head, input_shape)


def build_from_meta(meta: dict, seed: int = 0):
    if meta.get("kind") == "classifier":
        return build_classifier(meta["arch"], seed, tuple(meta["input_shape"]), meta["num_classes"])
    if meta.get("kind") == "generator":
        return build_generator(meta["arch"], seed, tuple(meta["input_shape"]))
    raise WeightFileError(f"unrecognized network kind in metadata: {meta.get('kind')!r}")


# --------------------------------------------------------------------------
# weight files


def encode_arrays(arrays: "OrderedDict[str, np.ndarray]") -> bytes:
    """Serialize named arrays to a complete weight-file byte string."""
    parts = [struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dt = np.dtype("u1") if arr.dtype == np.uint8 else np.dtype("<f8")
        arr = np.ascontiguousarray(arr, dtype=dt)
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BB", _TAGS[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    payload = b"".join(parts)
    return MAGIC + struct.pack("<I", len(payload)) + payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)


def decode_arrays(blob: bytes) -> "OrderedDict[str, np.ndarray]":
    if len(blob) < 16 or blob[:8] != MAGIC:
        raise MagicError(f"not a weight file (magic {blob[:8]!r})")
    (length,) = struct.unpack_from("<I", blob, 8)
    if len(blob) != 12 + length + 4:
        raise ChecksumError(f"weight file length mismatch: header says {length} payload bytes, file holds {len(blob) - 16}")
    payload = blob[12:12 + length]
    (crc,) = struct.unpack_from("<I", blob, 12 + length)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise ChecksumError("weight file checksum mismatch")
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    (count,) = struct.unpack_from("<I", payload, 0)
    off = 4
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", payload, off)
        off += 2
        name = payload[off:off + nlen].decode("utf-8")
        off += nlen
        tag, ndim = struct.unpack_from("<BB", payload, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", payload, off)
        off += 4 * ndim
        dt = _DTYPES[tag]
        n = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(payload, dtype=dt, count=n, offset=off).reshape(shape).copy()
        off += n * dt.itemsize
    return out


def _meta_array(meta: dict) -> np.ndarray:
    return np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)


def save_weights(net: Module, path, extra_meta: dict | None = None) -> None:
    """Write every parameter plus an architecture record to ``path``."""
    meta = dict(net.meta())
    if extra_meta:
        meta["extra"] = extra_meta
    arrays: OrderedDict[str, np.ndarray] = OrderedDict([(META_KEY, _meta_array(meta))])
    arrays.update(net.state_dict())
    blob = encode_arrays(arrays)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def read_weight_meta(path) -> dict:
    with open(path, "rb") as fh:
        arrays = decode_arrays(fh.read())
    return json.loads(arrays[META_KEY].tobytes().decode("utf-8")) if META_KEY in arrays else {}


def load_weights(path, into: Module | None = None):
    """Load a weight file, into ``into`` if given, else into a freshly built network.

    Raises :class:`MagicError`, :class:`ChecksumError` or
    :class:`WeightShapeError` for a malformed or mismatched file.
    """
    with open(path, "rb") as fh:
        arrays = decode_arrays(fh.read())
    meta = json.loads(arrays.pop(META_KEY).tobytes().decode("utf-8")) if META_KEY in arrays else {}
    net = into if into is not None else build_from_meta(meta)
    net.load_state_dict(arrays)
    return net
