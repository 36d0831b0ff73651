"""Convolutional encoder-decoder that predicts the per-pixel guidance map.

The network sees the concatenated visible luminance and infrared planes and
returns one sigmoid-squashed plane. In guided mode that plane is the weight
map for the pyramid kernel; in direct mode the same trunk's output is used as
the fused luminance itself.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

NORMS = ("none", "batch", "instance")
ACTIVATIONS = ("relu", "leaky")

PRESETS = {
    "large": 48,
    "medium": 8,
    "small": 3,
}


class ShapeError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class NetConfig:
    base_width: int = 48
    depth: int = 4
    growth: int = 2
    norm: str = "none"
    activation: str = "relu"
    in_channels: int = 2

    def __post_init__(self):
        if self.base_width < 1 or self.depth < 0 or self.growth < 1:
            raise ValueError(f"invalid network config {self}")
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")

    @classmethod
    def preset(cls, name: str, **overrides) -> "NetConfig":
        try:
            width = PRESETS[name]
        except KeyError:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
        return cls(base_width=width, **overrides)

    def widths(self) -> list[int]:
        return [self.base_width * self.growth**i for i in range(self.depth + 1)]

    @property
    def multiple(self) -> int:
        return 1 << self.depth


def _norm(kind: str, ch: int) -> nn.Module:
    if kind == "batch":
        return nn.BatchNorm2d(ch)
    if kind == "instance":
        return nn.InstanceNorm2d(ch, affine=True)
    return nn.Identity()


def _act(kind: str) -> nn.Module:
    return nn.LeakyReLU(0.1) if kind == "leaky" else nn.ReLU()


class DoubleConv(nn.Sequential):
    def __init__(self, cin: int, cout: int, cfg: NetConfig):
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=1),
            _norm(cfg.norm, cout),
            _act(cfg.activation),
            nn.Conv2d(cout, cout, 3, padding=1),
            _norm(cfg.norm, cout),
            _act(cfg.activation),
        )


class GuidanceNet(nn.Module):
    def __init__(self, config: NetConfig | None = None):
        super().__init__()
        self.config = cfg = config or NetConfig()
        w = cfg.widths()
        if cfg.depth == 0:
            self.enc = nn.ModuleList()
            self.up = nn.ModuleList()
            self.dec = nn.ModuleList()
            self.bottleneck = nn.Identity()
            self.head = nn.Conv2d(cfg.in_channels, 1, 3, padding=1, bias=False)
            return
        self.enc = nn.ModuleList(
            DoubleConv(cfg.in_channels if i == 0 else w[i - 1], w[i], cfg) for i in range(cfg.depth)
        )
        self.bottleneck = DoubleConv(w[cfg.depth - 1], w[cfg.depth], cfg)
        self.up = nn.ModuleList(nn.ConvTranspose2d(w[i + 1], w[i], 2, stride=2) for i in range(cfg.depth))
        self.dec = nn.ModuleList(DoubleConv(2 * w[i], w[i], cfg) for i in range(cfg.depth))
        self.head = nn.Conv2d(w[0], 1, 1)

    def stages(self) -> dict[str, nn.Module]:
        """Named sub-blocks, used to audit gradient flow per stage."""
        named = {f"enc{i}": m for i, m in enumerate(self.enc)}
        if self.config.depth:
            named["bottleneck"] = self.bottleneck
        named.update({f"dec{i}": nn.ModuleList([self.up[i], self.dec[i]]) for i in range(len(self.dec))})
        named["head"] = self.head
        return named

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        m = self.config.multiple
        if x.shape[-2] % m or x.shape[-1] % m:
            raise ShapeError(f"input {tuple(x.shape[-2:])} not divisible by 2^{self.config.depth}={m}")
        skips = []
        for block in self.enc:
            x = block(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottleneck(x)
        for i in reversed(range(len(self.dec))):
            x = self.dec[i](torch.cat([self.up[i](x), skips[i]], dim=1))
        return self.head(x)

    def forward(self, vis_y: torch.Tensor, ir: torch.Tensor) -> torch.Tensor:
        if vis_y.shape != ir.shape:
            raise ShapeError(f"source planes differ: {tuple(vis_y.shape)} vs {tuple(ir.shape)}")
        return torch.sigmoid(self.logits(torch.cat([vis_y, ir], dim=1)))


def _conv(cin: int, cout: int, k: int, bias: bool = True) -> int:
    return cin * cout * k * k + (cout if bias else 0)


def _norm_params(kind: str, ch: int) -> int:
    return 2 * ch if kind in ("batch", "instance") else 0


def param_count(config: NetConfig) -> int:
    """Trainable parameter total, computed from the layer layout."""
    if config.depth == 0:
        return _conv(config.in_channels, 1, 3, bias=False)
    w = config.widths()

    def double(cin, cout):
        return _conv(cin, cout, 3) + _conv(cout, cout, 3) + 2 * _norm_params(config.norm, cout)

    total = 0
    for i in range(config.depth):
        total += double(config.in_channels if i == 0 else w[i - 1], w[i])
        total += _conv(w[i + 1], w[i], 2)  # transposed up-conv
        total += double(2 * w[i], w[i])
    total += double(w[config.depth - 1], w[config.depth])
    total += _conv(w[0], 1, 1)
    return total


def init_weights(config: NetConfig, seed: int = 0) -> GuidanceNet:
    """A freshly initialised network; deterministic in ``seed``.

    Convolutions get He-normal (fan-in) weights and zero biases. The head is
    scaled down so the initial guidance map sits near 0.5.
    """
    gen = torch.Generator().manual_seed(seed)
    net = GuidanceNet(config)
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                if isinstance(m, nn.ConvTranspose2d):
                    fan_in = m.weight.shape[0]  # kernel == stride: one tap per input channel
                else:
                    fan_in = m.weight[0].numel()
                std = (2.0 / fan_in) ** 0.5
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * std)
                if m.bias is not None:
                    m.bias.zero_()
        net.head.weight.mul_(0.1)
    return net


# --------------------------------------------------------------------------
# checkpoint container
#
#   magic "GFCKPT" + NUL + format version (uint8)
#   header length (uint64, little-endian)
#   UTF-8 JSON header: config, loss weights, training meta, tensor table
#   tensor payloads, float32 little-endian, in table order

MAGIC = b"GFCKPT\x00"
FORMAT_VERSION = 1


@dataclass
class ModelCheckpoint:
    config: NetConfig
    weights: dict[str, np.ndarray]
    loss_weights: dict = field(default_factory=dict)
    training_meta: dict = field(default_factory=dict)

    @classmethod
    def from_net(cls, net: GuidanceNet, loss_weights: dict | None = None, **meta) -> "ModelCheckpoint":
        weights = {k: v.detach().cpu().numpy().astype(np.float32) for k, v in net.state_dict().items()}
        return cls(net.config, weights, dict(loss_weights or {}), dict(meta))

    def build(self) -> GuidanceNet:
        net = GuidanceNet(self.config)
        expected = net.state_dict()
        if set(expected) != set(self.weights):
            missing = sorted(set(expected) - set(self.weights))
            extra = sorted(set(self.weights) - set(expected))
            raise CheckpointError(f"tensor names do not match config: missing {missing}, unexpected {extra}")
        state = {}
        for name, ref in expected.items():
            arr = self.weights[name]
            if tuple(arr.shape) != tuple(ref.shape):
                raise CheckpointError(f"{name}: stored shape {arr.shape} vs expected {tuple(ref.shape)}")
            state[name] = torch.from_numpy(arr.copy()).to(ref.dtype)
        net.load_state_dict(state)
        net.eval()
        return net


def save_checkpoint(path: str | Path, ckpt: ModelCheckpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table = []
    offset = 0
    for name, arr in ckpt.weights.items():
        nbytes = int(np.prod(arr.shape, dtype=np.int64)) * 4
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    header = {
        "config": asdict(ckpt.config),
        "loss_weights": ckpt.loss_weights,
        "training_meta": ckpt.training_meta,
        "dtype": "float32-le",
        "tensors": table,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<B", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name, arr in ckpt.weights.items():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return path


def load_checkpoint(path: str | Path) -> ModelCheckpoint:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a guidance checkpoint")
    pos = len(MAGIC)
    (version,) = struct.unpack_from("<B", data, pos)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = struct.unpack_from("<Q", data, pos + 1)
    start = pos + 9
    header = json.loads(data[start : start + hlen].decode("utf-8"))
    payload = memoryview(data)[start + hlen :]
    weights = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        expected = int(np.prod(shape, dtype=np.int64)) * 4
        if entry["nbytes"] != expected or entry["offset"] + expected > len(payload):
            raise CheckpointError(f"{path}: tensor {entry['name']} is truncated or mis-sized")
        buf = payload[entry["offset"] : entry["offset"] + expected]
        weights[entry["name"]] = np.frombuffer(buf, dtype="<f4").reshape(shape).astype(np.float32)
    return ModelCheckpoint(
        config=NetConfig(**header["config"]),
        weights=weights,
        loss_weights=header.get("loss_weights", {}),
        training_meta=header.get("training_meta", {}),
    )
