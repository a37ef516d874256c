"""Feature extractor G, classifier C and domain discriminator D.

Two scales are provided: ``mlp`` for low-dimensional synthetic vectors and
``lenet_like`` (conv20/conv50/fc500 by default) for 28x28 digit images.
Parameters live in a flat name -> Tensor mapping such as ``"G.conv1.w"``.
"""

from __future__ import annotations

import hashlib
import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError, DimensionError, FormatError

KINDS = ("mlp", "lenet_like")
CHECKPOINT_MAGIC = b"DMRL"
CHECKPOINT_VERSION = 1
# Discriminator outputs are kept strictly inside (0, 1).
PROB_EPS = 1e-12


@dataclass(frozen=True)
class Architecture:
    """Layer widths for G, C and D.

    ``linear_head`` is a test-only switch: identity activations in G and no
    softmax in C, which makes ``classify(features(x))`` affine in ``x``.
    """

    kind: str = "mlp"
    input_shape: tuple[int, ...] = (2,)
    feature_dim: int = 16
    num_classes: int = 3
    hidden: tuple[int, ...] = (64, 64)
    disc_hidden: int = 64
    conv_channels: tuple[int, int] = (20, 50)
    kernel: int = 5
    linear_head: bool = False

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown architecture kind {self.kind!r}; expected one of {KINDS}")
        widths = [self.feature_dim, self.num_classes, self.disc_hidden, *self.hidden]
        if any(int(w) < 1 for w in widths):
            raise ConfigurationError(f"layer widths must be positive: {widths}")
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be at least 2")
        if self.kind == "mlp":
            if len(self.input_shape) != 1 or self.input_shape[0] < 1:
                raise ConfigurationError(f"mlp expects a vector input shape, got {self.input_shape}")
        else:
            if len(self.input_shape) != 3:
                raise ConfigurationError(f"lenet_like expects (C, H, W) input, got {self.input_shape}")
            if self.flat_conv_dim() < 1:
                raise ConfigurationError(
                    f"input {self.input_shape} is too small for two {self.kernel}x{self.kernel} conv + pool stages")

    def conv_output_hw(self) -> tuple[int, int]:
        _, h, w = self.input_shape
        for _ in range(2):
            h, w = (h - self.kernel + 1) // 2, (w - self.kernel + 1) // 2
        return h, w

    def flat_conv_dim(self) -> int:
        h, w = self.conv_output_hw()
        return self.conv_channels[1] * h * w if h > 0 and w > 0 else 0

    @classmethod
    def digits(cls, num_classes: int = 10, feature_dim: int = 500) -> "Architecture":
        return cls(kind="lenet_like", input_shape=(1, 28, 28), feature_dim=feature_dim,
                   num_classes=num_classes, disc_hidden=1024)


@dataclass
class ModelParams:
    """Named parameters of G, C and D plus the architecture that produced them."""

    arch: Architecture
    tensors: dict[str, Tensor] = field(default_factory=dict)
    init_seed: int = 0

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.tensors if n.startswith(prefix)]

    def group(self, prefix: str) -> dict[str, Tensor]:
        return {n: t for n, t in self.tensors.items() if n.startswith(prefix)}

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, {n: Tensor(t.data.copy(), requires_grad=True)
                                       for n, t in self.tensors.items()}, self.init_seed)

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def digest(self, prefix: str = "") -> str:
        """SHA-256 over the names and raw float64 bytes of the selected parameters."""
        h = hashlib.sha256()
        for name in self.names(prefix):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.tensors[name].data).tobytes())
        return h.hexdigest()


def _layer_shapes(arch: Architecture) -> list[tuple[str, tuple[int, ...], int]]:
    """(name, shape, fan_in) for every parameter in a fixed order."""
    shapes: list[tuple[str, tuple[int, ...], int]] = []

    def dense(name, n_in, n_out):
        shapes.append((f"{name}.w", (n_in, n_out), n_in))
        shapes.append((f"{name}.b", (n_out,), n_in))

    m, k = arch.feature_dim, arch.num_classes
    if arch.kind == "mlp":
        widths = [arch.input_shape[0], *arch.hidden]
        for i in range(len(arch.hidden)):
            dense(f"G.fc{i + 1}", widths[i], widths[i + 1])
        dense("G.out", widths[-1], m)
    else:
        c_in = arch.input_shape[0]
        c1, c2 = arch.conv_channels
        kk = arch.kernel
        shapes.append(("G.conv1.w", (c1, c_in, kk, kk), c_in * kk * kk))
        shapes.append(("G.conv1.b", (c1,), c_in * kk * kk))
        shapes.append(("G.conv2.w", (c2, c1, kk, kk), c1 * kk * kk))
        shapes.append(("G.conv2.b", (c2,), c1 * kk * kk))
        dense("G.fc", arch.flat_conv_dim(), m)
    dense("C.out", m, k)
    dense("D.fc1", m, arch.disc_hidden)
    dense("D.fc2", arch.disc_hidden, arch.disc_hidden)
    dense("D.out", arch.disc_hidden, 1)
    return shapes


def build(arch: Architecture, seed: int) -> ModelParams:
    """Initialize weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)) and zero biases."""
    arch.validate()
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape, fan_in in _layer_shapes(arch):
        if name.endswith(".b"):
            data = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        tensors[name] = Tensor(data, requires_grad=True)
    return ModelParams(arch, tensors, seed)


def _act(arch: Architecture, x: Tensor) -> Tensor:
    return x if arch.linear_head else ad.relu(x)


def features(params: ModelParams, x: Tensor) -> Tensor:
    """G: map a batch of inputs to N x feature_dim latent vectors."""
    arch = params.arch
    x = ad.as_tensor(x)
    if tuple(x.shape[1:]) != tuple(arch.input_shape):
        raise DimensionError(f"features: input batch {x.shape} does not match input shape {arch.input_shape}")
    p = params.tensors
    if arch.kind == "mlp":
        h = x
        for i in range(len(arch.hidden)):
            h = _act(arch, ad.linear(h, p[f"G.fc{i + 1}.w"], p[f"G.fc{i + 1}.b"]))
        return ad.linear(h, p["G.out.w"], p["G.out.b"])
    h = _act(arch, ad.maxpool2(ad.conv2d(x, p["G.conv1.w"], p["G.conv1.b"])))
    h = _act(arch, ad.maxpool2(ad.conv2d(h, p["G.conv2.w"], p["G.conv2.b"])))
    return _act(arch, ad.linear(ad.flatten(h), p["G.fc.w"], p["G.fc.b"]))


def logits(params: ModelParams, f: Tensor) -> Tensor:
    if f.data.ndim != 2 or f.shape[1] != params.arch.feature_dim:
        raise DimensionError(f"classifier expects N x {params.arch.feature_dim} features, got {f.shape}")
    return ad.linear(f, params["C.out.w"], params["C.out.b"])


def classify(params: ModelParams, f: Tensor) -> Tensor:
    """C: class probabilities (rows sum to one); raw scores under ``linear_head``."""
    z = logits(params, f)
    return z if params.arch.linear_head else ad.softmax(z)


def discriminate(params: ModelParams, f: Tensor) -> Tensor:
    """D: probability that each feature row came from the source domain."""
    if f.data.ndim != 2 or f.shape[1] != params.arch.feature_dim:
        raise DimensionError(f"discriminator expects N x {params.arch.feature_dim} features, got {f.shape}")
    p = params.tensors
    h = ad.relu(ad.linear(f, p["D.fc1.w"], p["D.fc1.b"]))
    h = ad.relu(ad.linear(h, p["D.fc2.w"], p["D.fc2.b"]))
    z = ad.linear(h, p["D.out.w"], p["D.out.b"])
    return ad.clamp(ad.sigmoid(z), PROB_EPS, 1.0 - PROB_EPS)


def predict(params: ModelParams, x, batch_size: int = 256) -> np.ndarray:
    """Argmax class predictions, evaluated in chunks without recording a tape."""
    x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    frozen = ModelParams(params.arch, {n: Tensor(t.data) for n, t in params.tensors.items()}, params.init_seed)
    out = []
    for start in range(0, len(x), batch_size):
        out.append(logits(frozen, features(frozen, Tensor(x[start:start + batch_size]))).data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


# ---------------------------------------------------------------------------
# checkpoints
#
# layout: b"DMRL", u32 version, then per parameter:
#   u32 name length, name bytes (utf-8), u32 rank, rank x u32 extents,
#   float64 payload (row-major).  All integers and floats little-endian.


def checkpoint_bytes(params: ModelParams) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    for name, t in params.tensors.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", t.data.ndim))
        buf.write(struct.pack(f"<{t.data.ndim}I", *t.shape))
        buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return buf.getvalue()


def save_checkpoint(params: ModelParams, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(params))


def _read(buf: io.BytesIO, n: int, what: str) -> bytes:
    raw = buf.read(n)
    if len(raw) != n:
        raise FormatError(f"checkpoint truncated while reading {what}")
    return raw


def read_checkpoint_tensors(data: bytes) -> dict[str, np.ndarray]:
    buf = io.BytesIO(data)
    magic = buf.read(4)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"not a checkpoint: magic bytes {magic!r}")
    (version,) = struct.unpack("<I", _read(buf, 4, "version"))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    while True:
        head = buf.read(4)
        if not head:
            return out
        if len(head) != 4:
            raise FormatError("checkpoint truncated in a name length")
        (n,) = struct.unpack("<I", head)
        name = _read(buf, n, "parameter name").decode("utf-8")
        (rank,) = struct.unpack("<I", _read(buf, 4, f"rank of {name}"))
        shape = struct.unpack(f"<{rank}I", _read(buf, 4 * rank, f"extents of {name}"))
        count = int(np.prod(shape)) if rank else 1
        payload = _read(buf, 8 * count, f"payload of {name}")
        out[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)


def infer_architecture(tensors: dict[str, np.ndarray], input_shape=None) -> Architecture:
    """Recover the architecture from parameter names and shapes.

    Pooling floors odd sizes, so several image sides share one parameter set;
    without ``input_shape`` the smallest exactly-halving side is assumed.
    """
    try:
        feature_dim, num_classes = tensors["C.out.w"].shape
        disc_hidden = tensors["D.fc1.w"].shape[1]
        if "G.conv1.w" in tensors:
            c1, c_in, kk, _ = tensors["G.conv1.w"].shape
            c2 = tensors["G.conv2.w"].shape[0]
            flat = tensors["G.fc.w"].shape[0]
            side = int(round(math.sqrt(flat / c2)))
            # invert the two conv+pool stages for a square input
            for _ in range(2):
                side = side * 2 + kk - 1
            shape = tuple(input_shape) if input_shape is not None else (c_in, side, side)
            arch = Architecture(kind="lenet_like", input_shape=shape, feature_dim=feature_dim,
                                num_classes=num_classes, disc_hidden=disc_hidden, conv_channels=(c1, c2),
                                kernel=kk)
        else:
            hidden = []
            i = 1
            while f"G.fc{i}.w" in tensors:
                hidden.append(tensors[f"G.fc{i}.w"].shape[1])
                i += 1
            arch = Architecture(kind="mlp", input_shape=(tensors["G.fc1.w"].shape[0],), feature_dim=feature_dim,
                                num_classes=num_classes, hidden=tuple(hidden), disc_hidden=disc_hidden)
    except (KeyError, ValueError) as exc:
        raise FormatError(f"checkpoint does not describe a known architecture: {exc}") from exc
    expected = {name: shape for name, shape, _ in _layer_shapes(arch)}
    actual = {name: t.shape for name, t in tensors.items()}
    if expected != actual:
        raise FormatError("checkpoint parameter set does not match the inferred architecture")
    return arch


def load_checkpoint(path, input_shape=None) -> ModelParams:
    tensors = read_checkpoint_tensors(Path(path).read_bytes())
    arch = infer_architecture(tensors, input_shape)
    return ModelParams(arch, {name: Tensor(tensors[name], requires_grad=True)
                              for name, _, _ in _layer_shapes(arch)})
