"""Embedding networks, the squeeze-excite weight generator, and prototypes.

Two embedding backbones are provided: the standard 4-block convolutional
few-shot backbone (64-filter 3x3 conv, batchnorm, relu, 2x2 maxpool per
block) and a small MLP for synthetic vector tasks. The squeeze-excite network
turns per-class prototypes into per-class, per-dimension metric weights in
(0, 1). Checkpoints are a versioned binary format with a bit-exact
round-trip guarantee.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor

__all__ = [
    "Dense",
    "MlpNet",
    "ConvNet4",
    "SqueezeExciteNet",
    "ModelPair",
    "PrototypeSet",
    "compute_prototypes",
    "generate_task_weights",
    "identity_mlp",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
]

CHECKPOINT_MAGIC = b"SALA"
CHECKPOINT_VERSION = 1


def _he_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Dense:
    """Fully connected layer y = x @ w + b."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, name: str):
        self.name = name
        self.w = Tensor(_he_uniform(rng, (in_dim, out_dim), in_dim), requires_grad=True,
                        name=f"{name}.w")
        self.b = Tensor(np.zeros(out_dim), requires_grad=True, name=f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add_rowvec(ad.matmul(x, self.w), self.b)

    def parameters(self):
        return [self.w, self.b]


class MlpNet:
    """Two-hidden-layer relu MLP over flat vectors; linear output head."""

    kind = "mlp"

    def __init__(self, in_dim: int, hidden: tuple[int, int], out_dim: int, seed: int = 0):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
        h1, h2 = hidden
        self.in_dim = in_dim
        self.hidden = (h1, h2)
        self.output_dim = out_dim
        self.fc1 = Dense(in_dim, h1, rng, "embed.fc1")
        self.fc2 = Dense(h1, h2, rng, "embed.fc2")
        self.fc3 = Dense(h2, out_dim, rng, "embed.fc3")

    def embed(self, batch: Tensor, train: bool = True) -> Tensor:
        if batch.data.ndim != 2 or batch.data.shape[1] != self.in_dim:
            raise ValueError(
                f"mlp expects batch of shape (B, {self.in_dim}), got {batch.data.shape}"
            )
        h = ad.relu(self.fc1(batch))
        h = ad.relu(self.fc2(h))
        return self.fc3(h)

    def parameters(self):
        return self.fc1.parameters() + self.fc2.parameters() + self.fc3.parameters()

    def buffers(self):
        return []

    def config(self) -> dict:
        return {"kind": "mlp", "in_dim": self.in_dim, "hidden": list(self.hidden),
                "out_dim": self.output_dim}


class ConvNet4:
    """4 blocks of (3x3 conv, batchnorm, relu, 2x2 maxpool), 64 filters each.

    Odd spatial dims are floor-pooled: the last row/column is dropped before
    each pool, so 28x28 inputs reduce 28 -> 14 -> 7 -> 3 -> 1.
    """

    kind = "convnet4"
    filters = 64

    def __init__(self, in_shape: tuple[int, int, int], seed: int = 0,
                 bn_eps: float = 1e-5, bn_momentum: float = 0.9):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
        c, h, w = in_shape
        self.in_shape = (c, h, w)
        self.bn_eps = bn_eps
        self.bn_momentum = bn_momentum
        self.conv_w: list[Tensor] = []
        self.conv_b: list[Tensor] = []
        self.bn_gamma: list[Tensor] = []
        self.bn_beta: list[Tensor] = []
        self.bn_state: list[BatchNormState] = []
        cin = c
        for i in range(4):
            fan_in = cin * 9
            self.conv_w.append(Tensor(_he_uniform(rng, (self.filters, cin, 3, 3), fan_in),
                                      requires_grad=True, name=f"embed.block{i}.conv.w"))
            self.conv_b.append(Tensor(np.zeros(self.filters), requires_grad=True,
                                      name=f"embed.block{i}.conv.b"))
            self.bn_gamma.append(Tensor(np.ones(self.filters), requires_grad=True,
                                        name=f"embed.block{i}.bn.gamma"))
            self.bn_beta.append(Tensor(np.zeros(self.filters), requires_grad=True,
                                       name=f"embed.block{i}.bn.beta"))
            self.bn_state.append(BatchNormState.create(self.filters))
            cin = self.filters
            h, w = h // 2, w // 2
        if h < 1 or w < 1:
            raise ValueError(f"input {in_shape} too small for four pooling stages")
        self.out_hw = (h, w)
        self.output_dim = self.filters * h * w

    def embed(self, batch: Tensor, train: bool = True) -> Tensor:
        if batch.data.ndim != 4 or batch.data.shape[1] != self.in_shape[0]:
            raise ValueError(
                f"convnet4 expects batch of shape (B, {self.in_shape[0]}, H, W), "
                f"got {batch.data.shape}"
            )
        mode = "train" if train else "eval"
        x = batch
        for i in range(4):
            x = ad.conv2d(x, self.conv_w[i], self.conv_b[i])
            x = ad.batchnorm2d(x, self.bn_gamma[i], self.bn_beta[i], self.bn_state[i],
                               mode=mode, eps=self.bn_eps, momentum=self.bn_momentum)
            x = ad.relu(x)
            h, w = x.data.shape[2], x.data.shape[3]
            if h % 2 or w % 2:
                x = ad.crop_hw(x, 2 * (h // 2), 2 * (w // 2))
            x = ad.maxpool2x2(x)
        return ad.reshape(x, (x.data.shape[0], self.output_dim))

    def parameters(self):
        out = []
        for i in range(4):
            out += [self.conv_w[i], self.conv_b[i], self.bn_gamma[i], self.bn_beta[i]]
        return out

    def buffers(self):
        out = []
        for i, st in enumerate(self.bn_state):
            out.append((f"embed.block{i}.bn.running_mean", st.running_mean))
            out.append((f"embed.block{i}.bn.running_var", st.running_var))
        return out

    def load_buffers(self, named: dict):
        for i, st in enumerate(self.bn_state):
            st.running_mean = named[f"embed.block{i}.bn.running_mean"].copy()
            st.running_var = named[f"embed.block{i}.bn.running_var"].copy()

    def config(self) -> dict:
        return {"kind": "convnet4", "in_shape": list(self.in_shape),
                "bn_eps": self.bn_eps, "bn_momentum": self.bn_momentum}


class SqueezeExciteNet:
    """Bottleneck d -> max(1, d//r) -> d with relu inside and sigmoid output.

    Applied row-wise with shared parameters, so each prototype is transformed
    independently and the result is permutation-equivariant over classes.
    Every emitted weight lies strictly in (0, 1).
    """

    def __init__(self, dim: int, reduction_ratio: int, seed: int = 0):
        if reduction_ratio < 1:
            raise ValueError(f"reduction_ratio must be positive, got {reduction_ratio}")
        rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
        self.dim = dim
        self.reduction_ratio = reduction_ratio
        hidden = max(1, dim // reduction_ratio)
        self.hidden = hidden
        self.reduce = Dense(dim, hidden, rng, "se.reduce")
        self.expand = Dense(hidden, dim, rng, "se.expand")

    def __call__(self, prototypes: Tensor) -> Tensor:
        if prototypes.data.ndim != 2 or prototypes.data.shape[1] != self.dim:
            raise ValueError(
                f"squeeze-excite expects (N, {self.dim}) prototypes, got {prototypes.data.shape}"
            )
        return ad.sigmoid(self.expand(ad.relu(self.reduce(prototypes))))

    def parameters(self):
        return self.reduce.parameters() + self.expand.parameters()

    def config(self) -> dict:
        return {"dim": self.dim, "reduction_ratio": self.reduction_ratio}


@dataclass
class PrototypeSet:
    """Per-class centers in embedding space with their effective sample mass."""

    centers: Tensor        # (N, d)
    counts: np.ndarray     # (N,) real-valued after refinement

    @property
    def n_classes(self) -> int:
        return self.centers.data.shape[0]


def compute_prototypes(embeddings: Tensor, labels, n_classes: int) -> PrototypeSet:
    """Mean embedding per class; every class must contribute at least one sample."""
    labels = np.asarray(labels, dtype=np.intp)
    if embeddings.data.ndim != 2 or len(labels) != embeddings.data.shape[0]:
        raise ValueError(
            f"embeddings {embeddings.data.shape} and labels ({len(labels)},) disagree"
        )
    counts = np.bincount(labels, minlength=n_classes).astype(np.float64)
    empty = np.nonzero(counts == 0)[0]
    if empty.size:
        raise ValueError(f"classes {empty.tolist()} have no labeled samples")
    # Indicator matrix with rows pre-divided by class counts: centers = Z @ E.
    z = np.zeros((n_classes, len(labels)))
    z[labels, np.arange(len(labels))] = 1.0 / counts[labels]
    centers = ad.matmul(Tensor(z), embeddings)
    return PrototypeSet(centers=centers, counts=counts)


def generate_task_weights(se: SqueezeExciteNet, prototypes: PrototypeSet) -> Tensor:
    """Per-class, per-dimension metric weights in (0, 1), one row per prototype."""
    return se(prototypes.centers)


def identity_mlp(dim: int) -> MlpNet:
    """An MLP wired to compute the exact identity map (relu(x) - relu(-x))."""
    net = MlpNet(dim, (2 * dim, 2 * dim), dim, seed=0)
    eye = np.eye(dim)
    net.fc1.w.data[...] = np.concatenate([eye, -eye], axis=1)
    net.fc1.b.data[...] = 0.0
    net.fc2.w.data[...] = np.eye(2 * dim)
    net.fc2.b.data[...] = 0.0
    net.fc3.w.data[...] = np.concatenate([eye, -eye], axis=0)
    net.fc3.b.data[...] = 0.0
    return net


class ModelPair:
    """Embedding network plus the squeeze-excite weight generator."""

    def __init__(self, embedding, se: SqueezeExciteNet):
        if se.dim != embedding.output_dim:
            raise ValueError(
                f"squeeze-excite dim {se.dim} != embedding output dim {embedding.output_dim}"
            )
        self.embedding = embedding
        self.se = se

    def embed(self, batch: Tensor, train: bool = True) -> Tensor:
        return self.embedding.embed(batch, train=train)

    def parameters(self) -> list[Tensor]:
        return self.embedding.parameters() + self.se.parameters()

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(p.name, p) for p in self.parameters()]

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        named = [(p.name, p.data) for p in self.parameters()]
        named += self.embedding.buffers()
        return named

    def load_state_arrays(self, named: dict):
        for p in self.parameters():
            if p.name not in named:
                raise ValueError(f"checkpoint is missing parameter {p.name!r}")
            if named[p.name].shape != p.data.shape:
                raise ValueError(
                    f"checkpoint shape {named[p.name].shape} != expected {p.data.shape} "
                    f"for {p.name!r}"
                )
            p.data[...] = named[p.name]
        if hasattr(self.embedding, "load_buffers") and self.embedding.buffers():
            self.embedding.load_buffers(named)

    def config(self) -> dict:
        return {"embedding": self.embedding.config(), "se": self.se.config()}

    def save(self, path, config_echo: dict | None = None):
        echo = {"model": self.config()}
        if config_echo:
            echo.update(config_echo)
        save_checkpoint(path, self.state_arrays(), echo)

    def serialize(self, config_echo: dict | None = None) -> bytes:
        echo = {"model": self.config()}
        if config_echo:
            echo.update(config_echo)
        return checkpoint_bytes(self.state_arrays(), echo)


# ---------------------------------------------------------------------------
# checkpoint format: magic, version, config echo, named f64 tensors
# ---------------------------------------------------------------------------

def checkpoint_bytes(named_arrays, config_echo: dict) -> bytes:
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<I", CHECKPOINT_VERSION)
    echo = json.dumps(config_echo, sort_keys=True).encode("utf-8")
    out += struct.pack("<I", len(echo))
    out += echo
    out += struct.pack("<I", len(named_arrays))
    for name, arr in named_arrays:
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        nb = name.encode("utf-8")
        out += struct.pack("<I", len(nb))
        out += nb
        out += struct.pack("<B", arr.ndim)
        for d in arr.shape:
            out += struct.pack("<I", d)
        out += arr.astype("<f8").tobytes()
    return bytes(out)


def save_checkpoint(path, named_arrays, config_echo: dict):
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(named_arrays, config_echo))


def load_checkpoint(path):
    """Read a checkpoint; returns (config_echo, ordered {name: array})."""
    with open(path, "rb") as f:
        blob = f.read()
    return parse_checkpoint(blob, str(path))


def parse_checkpoint(blob: bytes, origin: str = "<bytes>"):
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise ValueError(f"{origin}: truncated at offset {off}")
        piece = blob[off:off + n]
        off += n
        return piece

    if take(4) != CHECKPOINT_MAGIC:
        raise ValueError(f"{origin}: bad magic at offset 0")
    version = struct.unpack("<I", take(4))[0]
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{origin}: unsupported checkpoint version {version}")
    echo_len = struct.unpack("<I", take(4))[0]
    config_echo = json.loads(take(echo_len).decode("utf-8"))
    count = struct.unpack("<I", take(4))[0]
    named = {}
    for _ in range(count):
        name_len = struct.unpack("<I", take(4))[0]
        name = take(name_len).decode("utf-8")
        rank = struct.unpack("<B", take(1))[0]
        dims = tuple(struct.unpack("<I", take(4))[0] for _ in range(rank))
        n = int(np.prod(dims)) if dims else 1
        named[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(dims).copy()
    if off != len(blob):
        raise ValueError(f"{origin}: {len(blob) - off} trailing bytes at offset {off}")
    return config_echo, named
