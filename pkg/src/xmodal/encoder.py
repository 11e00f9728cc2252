"""Modality-specific spatial encoders producing 128-channel, 8x-downsampled
feature maps, plus the pooled-descriptor baseline head.

Stack: fixed Gaussian input smoothing (sigma 1 px, suppresses acquisition
noise before the first conv), then 7x7/2 conv (32) -> 3x3 (32) -> 3x3/2 (64)
-> 3x3 (64) -> 3x3/2 (128) -> 3x3 (128) -> 1x1 (128, linear). Each non-final
conv is followed by ReLU then BatchNorm. Stride-2 convs use same-padding (ceil halving), so the output
is cropped to (floor(H/8), floor(W/8)) to keep the shape law exact.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .tensorio import read_tensor, write_tensor

EMBED_DIM = 128
DOWNSAMPLE = 8
CHECKPOINT_VERSION = 1

# Ablation rows: which input channels each modality's encoder consumes.
CHANNEL_PRESETS = {
    "B+F": (("bone",), ("fat",)),
    "B+FW": (("bone",), ("fat", "water")),
    "T+FW": (("tissue",), ("fat", "water")),
    "BT+F": (("bone", "tissue"), ("fat",)),
    "BT+W": (("bone", "tissue"), ("water",)),
    "BT+FW": (("bone", "tissue"), ("fat", "water")),
}


@dataclass(frozen=True)
class EncoderConfig:
    channels_a: tuple = ("bone", "tissue")
    channels_b: tuple = ("fat", "water")
    embed_dim: int = EMBED_DIM
    widths: tuple = (32, 64, 128)  # one per stride-2 stage

    def __post_init__(self):
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be >= 1")
        if len(self.widths) != 3:
            raise ValueError("exactly three stride-2 stages are required")
        if not self.channels_a or not self.channels_b:
            raise ValueError("each modality needs at least one input channel")

    @classmethod
    def from_preset(cls, preset: str) -> "EncoderConfig":
        if preset not in CHANNEL_PRESETS:
            raise ValueError(f"unknown channel preset {preset!r}")
        a, b = CHANNEL_PRESETS[preset]
        return cls(channels_a=a, channels_b=b)


@dataclass
class FeatureMap:
    values: np.ndarray  # (C, h, w)
    modality: str
    source_shape: tuple  # (H, W) of the source image
    normalized: bool = False

    def normalize(self, eps: float = 1e-8) -> "FeatureMap":
        return FeatureMap(nn.l2_normalize_locations(self.values, eps), self.modality,
                          self.source_shape, normalized=True)


def _stack(c_in: int, widths, embed_dim: int, rng) -> list:
    w1, w2, w3 = widths
    layers = [nn.SmoothLayer(1.0)]

    def block(ci, co, k, s):
        layers.append(nn.ConvLayer(ci, co, k, stride=s, rng=rng))
        layers.append(nn.ReLULayer())
        layers.append(nn.BatchNormLayer(co))

    block(c_in, w1, 7, 2)
    block(w1, w1, 3, 1)
    block(w1, w2, 3, 2)
    block(w2, w2, 3, 1)
    block(w2, w3, 3, 2)
    block(w3, w3, 3, 1)
    layers.append(nn.ConvLayer(w3, embed_dim, 1, stride=1, rng=rng))
    return layers


class Encoder:
    """One modality's spatial encoder; holds its own parameters."""

    def __init__(self, n_channels: int, config: EncoderConfig, rng):
        self.config = config
        self.n_channels = n_channels
        self.net = nn.Sequential(_stack(n_channels, config.widths, config.embed_dim, rng))
        self._crop_from = None

    def forward(self, x: np.ndarray, mode: str = "train") -> np.ndarray:
        """Batched forward: (N, C, H, W) -> (N, embed, floor(H/8), floor(W/8))."""
        if x.shape[1] != self.n_channels:
            raise nn.ShapeError(f"expected {self.n_channels} channels, got {x.shape[1]}")
        h, w = x.shape[2], x.shape[3]
        out = self.net.forward(x, mode)
        self._crop_from = out.shape
        return np.ascontiguousarray(out[:, :, : h // DOWNSAMPLE, : w // DOWNSAMPLE])

    def backward(self, dy: np.ndarray) -> np.ndarray:
        full = np.zeros(self._crop_from, dtype=dy.dtype)
        full[:, :, : dy.shape[2], : dy.shape[3]] = dy
        return self.net.backward(full)

    # grad_check protocol
    def params(self):
        return self.net.params()

    def grads(self):
        return self.net.grads()

    def zero_grads(self):
        self.net.zero_grads()

    def cast(self, dtype):
        self.net.cast(dtype)

    @property
    def layers(self):
        return self.net.layers

    def state_tensors(self):
        out = []
        for i, layer in enumerate(self.net.layers):
            for n, a in layer.params():
                out.append((f"{i}.{n}", a))
            if isinstance(layer, nn.BatchNormLayer):
                for n, a in layer.stats():
                    out.append((f"{i}.{n}", a))
        return out


class ProjectionHead:
    """Max-pool + 2-layer MLP producing a unit-norm scan descriptor."""

    def __init__(self, embed_dim: int, hidden: int, rng):
        self.lin1 = nn.LinearLayer(embed_dim, hidden, rng=rng)
        self.relu = nn.ReLULayer()
        self.lin2 = nn.LinearLayer(hidden, embed_dim, rng=rng)

    def forward(self, fmap: np.ndarray, mode: str = "train") -> np.ndarray:
        """(N, C, h, w) feature maps -> (N, C) unit descriptors."""
        n, c, h, w = fmap.shape
        flat = fmap.reshape(n, c, h * w)
        self._argmax = flat.argmax(axis=2)
        pooled = np.take_along_axis(flat, self._argmax[:, :, None], axis=2)[:, :, 0]
        self._pool_shape = fmap.shape
        z = self.lin2.forward(self.relu.forward(self.lin1.forward(pooled, mode), mode), mode)
        self._z = z
        norms = np.sqrt((z.astype(np.float64) ** 2).sum(axis=1, keepdims=True))
        self._norms = np.maximum(norms, 1e-8)
        return (z / self._norms).astype(fmap.dtype)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        z = self._z.astype(np.float64)
        y = z / self._norms
        dz = (dy - y * (y * dy).sum(axis=1, keepdims=True)) / self._norms
        dpool = self.lin1.backward(self.relu.backward(self.lin2.backward(dz.astype(dy.dtype))))
        n, c, h, w = self._pool_shape
        dflat = np.zeros((n, c, h * w), dtype=dy.dtype)
        np.put_along_axis(dflat, self._argmax[:, :, None], dpool[:, :, None], axis=2)
        return dflat.reshape(self._pool_shape)

    def params(self):
        return [("lin1." + n, a) for n, a in self.lin1.params()] + \
               [("lin2." + n, a) for n, a in self.lin2.params()]

    def grads(self):
        return [("lin1." + n, a) for n, a in self.lin1.grads()] + \
               [("lin2." + n, a) for n, a in self.lin2.grads()]

    def zero_grads(self):
        self.lin1.zero_grads()
        self.lin2.zero_grads()

    def cast(self, dtype):
        self.lin1.cast(dtype)
        self.lin2.cast(dtype)

    def state_tensors(self):
        return self.params()


@dataclass
class DualEncoder:
    """The A- and B-modality encoders (no shared parameters) plus optional
    baseline projection heads."""

    config: EncoderConfig
    enc_a: Encoder
    enc_b: Encoder
    head_a: ProjectionHead | None = None
    head_b: ProjectionHead | None = None
    meta: dict = field(default_factory=dict)


def init_params(config: EncoderConfig, seed: int, baseline: bool = False,
                head_hidden: int = 256) -> DualEncoder:
    """He-initialized dual encoders, deterministic in ``seed``."""
    rng = np.random.default_rng(np.random.SeedSequence([0xE4C, int(seed)]))
    enc_a = Encoder(len(config.channels_a), config, rng)
    enc_b = Encoder(len(config.channels_b), config, rng)
    head_a = head_b = None
    if baseline:
        head_a = ProjectionHead(config.embed_dim, head_hidden, rng)
        head_b = ProjectionHead(config.embed_dim, head_hidden, rng)
    return DualEncoder(config=config, enc_a=enc_a, enc_b=enc_b,
                       head_a=head_a, head_b=head_b)


def select_channels(scan, wanted: tuple) -> np.ndarray:
    idx = [scan.channels.index(c) for c in wanted]
    return scan.image[idx]


def encode(scan, model: DualEncoder, mode: str = "eval") -> FeatureMap:
    """Spatial feature map for one scan (modality picked from the scan tag)."""
    enc = model.enc_a if scan.modality == "A" else model.enc_b
    wanted = model.config.channels_a if scan.modality == "A" else model.config.channels_b
    x = select_channels(scan, wanted)[None].astype(np.float32)
    out = enc.forward(x, mode)[0]
    return FeatureMap(out, scan.modality, (scan.image.shape[1], scan.image.shape[2]))


def encode_pooled(scan, model: DualEncoder, mode: str = "eval") -> np.ndarray:
    """Unit-norm 128-d descriptor via max pooling + projection head."""
    if model.head_a is None:
        raise ValueError("model has no projection heads (not a baseline checkpoint)")
    enc = model.enc_a if scan.modality == "A" else model.enc_b
    head = model.head_a if scan.modality == "A" else model.head_b
    wanted = model.config.channels_a if scan.modality == "A" else model.config.channels_b
    x = select_channels(scan, wanted)[None].astype(np.float32)
    return head.forward(enc.forward(x, mode), mode)[0]


# ---------------------------------------------------------------------------
# Checkpointing: a directory of PTNS tensors plus a layers.jsonl index.
# ---------------------------------------------------------------------------


def save_params(path: str, model: DualEncoder) -> None:
    os.makedirs(path, exist_ok=True)
    index = {
        "version": CHECKPOINT_VERSION,
        "channels_a": list(model.config.channels_a),
        "channels_b": list(model.config.channels_b),
        "embed_dim": model.config.embed_dim,
        "widths": list(model.config.widths),
        "baseline": model.head_a is not None,
        "meta": model.meta,
    }
    entries = []
    for prefix, part in _parts(model):
        for name, arr in part.state_tensors():
            fname = f"{prefix}.{name}.ptn"
            write_tensor(os.path.join(path, fname), arr)
            entries.append({"tensor": f"{prefix}.{name}", "file": fname,
                            "shape": list(arr.shape)})
    tmp = os.path.join(path, "layers.jsonl.tmp")
    with open(tmp, "w") as f:
        f.write(json.dumps(index, sort_keys=True) + "\n")
        for e in entries:
            f.write(json.dumps(e, sort_keys=True) + "\n")
    os.replace(tmp, os.path.join(path, "layers.jsonl"))


def _parts(model: DualEncoder):
    parts = [("enc_a", model.enc_a), ("enc_b", model.enc_b)]
    if model.head_a is not None:
        parts += [("head_a", model.head_a), ("head_b", model.head_b)]
    return parts


class CheckpointError(ValueError):
    pass


def load_params(path: str) -> DualEncoder:
    index_path = os.path.join(path, "layers.jsonl")
    if not os.path.exists(index_path):
        raise CheckpointError(f"no checkpoint at {path}")
    with open(index_path) as f:
        header = json.loads(f.readline())
        entries = [json.loads(line) for line in f]
    if header["version"] != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {header['version']} unsupported")
    config = EncoderConfig(channels_a=tuple(header["channels_a"]),
                           channels_b=tuple(header["channels_b"]),
                           embed_dim=header["embed_dim"],
                           widths=tuple(header["widths"]))
    model = init_params(config, seed=0, baseline=header["baseline"])
    model.meta = header.get("meta", {})
    tensors = {}
    for part_name, part in _parts(model):
        for name, arr in part.state_tensors():
            tensors[f"{part_name}.{name}"] = arr
    seen = set()
    for e in entries:
        key = e["tensor"]
        if key not in tensors:
            raise CheckpointError(f"unexpected tensor {key} in checkpoint")
        arr = read_tensor(os.path.join(path, e["file"]))
        if tuple(arr.shape) != tensors[key].shape:
            raise CheckpointError(
                f"shape mismatch for {key}: file {arr.shape}, config {tensors[key].shape}")
        tensors[key][...] = arr
        seen.add(key)
    missing = set(tensors) - seen
    if missing:
        raise CheckpointError(f"checkpoint missing tensors: {sorted(missing)}")
    return model
