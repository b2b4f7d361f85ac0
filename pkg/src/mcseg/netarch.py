"""
Shared-encoder / dual-decoder V-Net.

Decoder A upsamples with learned stride-2 transposed convolutions, decoder B
with parameter-free trilinear interpolation followed by a learned 3x3x3
convolution.  Everything else (conv stacks, normalization, skip additions,
sigmoid head) is built by the same code for both.
"""

import hashlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

DECODER_KINDS = ("transposed_conv", "trilinear")
NORM_KINDS = ("group", "batch", "none")


class NetworkConfigError(ValueError):
    pass


@dataclass
class NetworkConfig:
    levels: int = 5
    base_channels: int = 16
    channels: Optional[Tuple[int, ...]] = None
    convs_per_stage: int = 2
    dropout_rate: float = 0.5
    input_channels: int = 1
    output_channels: int = 1
    norm: str = "group"
    norm_groups: int = 4
    decoder_a: str = "transposed_conv"
    decoder_b: str = "trilinear"

    def __post_init__(self):
        if self.channels is None:
            self.channels = tuple(self.base_channels * 2**l for l in range(self.levels))
        self.channels = tuple(int(c) for c in self.channels)
        self.validate()

    def validate(self):
        if self.levels < 2:
            raise NetworkConfigError("need at least 2 resolution levels")
        if len(self.channels) != self.levels:
            raise NetworkConfigError(
                f"{len(self.channels)} channel entries for {self.levels} levels")
        if any(b <= a for a, b in zip(self.channels, self.channels[1:])):
            raise NetworkConfigError(f"channels must strictly increase: {self.channels}")
        if not 0 <= self.dropout_rate < 1:
            raise NetworkConfigError("dropout_rate must be in [0, 1)")
        if self.input_channels != 1:
            raise NetworkConfigError("only single-channel input volumes are supported")
        if self.norm not in NORM_KINDS:
            raise NetworkConfigError(f"norm must be one of {NORM_KINDS}")
        if self.norm == "group" and any(c % self.norm_groups for c in self.channels):
            raise NetworkConfigError(
                f"every channel count must be divisible by norm_groups={self.norm_groups}")
        for kind in (self.decoder_a, self.decoder_b):
            if kind not in DECODER_KINDS:
                raise NetworkConfigError(f"unknown decoder kind {kind!r}")

    @property
    def divisor(self) -> int:
        return 2 ** (self.levels - 1)

    def check_input_shape(self, spatial):
        bad = [s for s in spatial if s % self.divisor]
        if len(spatial) != 3 or bad:
            raise NetworkConfigError(
                f"spatial shape {tuple(spatial)} must be 3D and divisible by "
                f"{self.divisor} (2**(levels-1))")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


def _norm(kind, channels, groups):
    if kind == "group":
        return nn.GroupNorm(groups, channels)
    if kind == "batch":
        return nn.BatchNorm3d(channels)
    return nn.Identity()


class ConvUnit(nn.Module):
    """conv -> norm -> ReLU"""

    def __init__(self, cin, cout, cfg, kernel_size=3, stride=1):
        super().__init__()
        pad = (kernel_size - 1) // 2 if stride == 1 else 0
        self.conv = nn.Conv3d(cin, cout, kernel_size, stride=stride, padding=pad)
        self.norm = _norm(cfg.norm, cout, cfg.norm_groups)

    def forward(self, x):
        return F.relu(self.norm(self.conv(x)))


class Stage(nn.Module):
    """`convs_per_stage` ConvUnits registered as block0, block1, ..."""

    def __init__(self, cin, cout, cfg):
        super().__init__()
        self.n = cfg.convs_per_stage
        for j in range(self.n):
            self.add_module(f"block{j}", ConvUnit(cin if j == 0 else cout, cout, cfg))

    def forward(self, x):
        for j in range(self.n):
            x = getattr(self, f"block{j}")(x)
        return x


class TransposedUp(nn.Module):
    def __init__(self, cin, cout, cfg):
        super().__init__()
        self.conv = nn.ConvTranspose3d(cin, cout, kernel_size=2, stride=2)
        self.norm = _norm(cfg.norm, cout, cfg.norm_groups)

    def forward(self, x):
        return F.relu(self.norm(self.conv(x)))


class TrilinearUp(nn.Module):
    def __init__(self, cin, cout, cfg):
        super().__init__()
        self.conv = nn.Conv3d(cin, cout, kernel_size=3, padding=1)
        self.norm = _norm(cfg.norm, cout, cfg.norm_groups)

    def forward(self, x):
        x = F.interpolate(x, scale_factor=2, mode="trilinear", align_corners=False)
        return F.relu(self.norm(self.conv(x)))


UPSAMPLERS = {"transposed_conv": TransposedUp, "trilinear": TrilinearUp}


class Encoder(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.levels = cfg.levels
        ch = cfg.channels
        for k in range(cfg.levels):
            level = nn.Module()
            if k > 0:
                level.down = ConvUnit(ch[k - 1], ch[k], cfg, kernel_size=2, stride=2)
            cin = cfg.input_channels if k == 0 else ch[k]
            for j in range(cfg.convs_per_stage):
                level.add_module(f"block{j}", ConvUnit(cin if j == 0 else ch[k], ch[k], cfg))
            level.n = cfg.convs_per_stage
            self.add_module(f"level{k}", level)

    def forward(self, x):
        feats = []
        for k in range(self.levels):
            level = getattr(self, f"level{k}")
            if k > 0:
                x = level.down(x)
            for j in range(level.n):
                x = getattr(level, f"block{j}")(x)
            feats.append(x)
        return feats


class Decoder(nn.Module):
    def __init__(self, cfg: NetworkConfig, kind: str):
        super().__init__()
        if kind not in UPSAMPLERS:
            raise NetworkConfigError(f"unknown decoder kind {kind!r}")
        self.kind = kind
        self.levels = cfg.levels
        ch = cfg.channels
        for k in range(cfg.levels - 2, -1, -1):
            level = nn.Module()
            level.up = UPSAMPLERS[kind](ch[k + 1], ch[k], cfg)
            level.stage = Stage(ch[k], ch[k], cfg)
            self.add_module(f"level{k}", level)
        self.head = nn.Conv3d(ch[0], cfg.output_channels, kernel_size=1)

    def forward(self, feats):
        x = feats[-1]
        for k in range(self.levels - 2, -1, -1):
            level = getattr(self, f"level{k}")
            x = level.stage(level.up(x) + feats[k])
        return self.head(x)


def build_decoder(cfg: NetworkConfig, kind: str) -> Decoder:
    return Decoder(cfg, kind)


class DualDecoderNet(nn.Module):
    """One encoder, two decoders; ``forward`` returns ``(P_A, P_B)``."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.config = cfg
        self.encoder = Encoder(cfg)
        self.decoderA = build_decoder(cfg, cfg.decoder_a)
        self.decoderB = build_decoder(cfg, cfg.decoder_b)

    def activation(self, logits):
        if self.config.output_channels == 1:
            return torch.sigmoid(logits)
        return torch.softmax(logits, dim=1)

    def forward(self, x, dropout_generator: Optional[torch.Generator] = None,
                return_logits: bool = False):
        self.config.check_input_shape(x.shape[2:])
        feats = self.encoder(x)
        if dropout_generator is not None and self.config.dropout_rate > 0:
            feats[-1] = _seeded_dropout(feats[-1], self.config.dropout_rate, dropout_generator)
        za = self.decoderA(feats)
        zb = self.decoderB(feats)
        if return_logits:
            return za, zb
        return self.activation(za), self.activation(zb)


def _seeded_dropout(x, rate, gen):
    keep = torch.rand(x.shape, generator=gen, dtype=x.dtype, device=x.device) >= rate
    return x * keep / (1.0 - rate)


def build_network(cfg: NetworkConfig, seed: int = 0, dtype=torch.float32) -> DualDecoderNet:
    """Construct a network with weights drawn deterministically from `seed`."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = DualDecoderNet(cfg)
    return net.to(dtype)


def forward(net: DualDecoderNet, batch):
    """Standard (dropout-free) evaluation of both decoders."""
    return net(torch.as_tensor(batch))


def forward_with_dropout(net: DualDecoderNet, batch, seed: int):
    """Both decoder outputs with bottleneck dropout drawn from `seed`."""
    gen = torch.Generator().manual_seed(int(seed))
    return net(torch.as_tensor(batch), dropout_generator=gen)


def parameter_groups(net: DualDecoderNet):
    """Map of 'encoder' / 'decoderA' / 'decoderB' to lists of (name, tensor)."""
    groups = {"encoder": [], "decoderA": [], "decoderB": []}
    for name, p in net.named_parameters():
        groups[name.split(".", 1)[0]].append((name, p))
    return groups


def parameter_checksum(net_or_state) -> str:
    state = net_or_state.state_dict() if isinstance(net_or_state, nn.Module) else net_or_state
    h = hashlib.sha256()
    for name in sorted(state):
        h.update(name.encode())
        h.update(np.ascontiguousarray(state[name].detach().cpu().numpy()).tobytes())
    return h.hexdigest()


def save_checkpoint(net: DualDecoderNet, path, **extra):
    """Write config + named parameter arrays (+ any extra training state)."""
    payload = {
        "network_config": net.config.to_dict(),
        "params": {k: v.detach().cpu().clone() for k, v in net.state_dict().items()},
        "dtype": str(next(net.parameters()).dtype).replace("torch.", ""),
    }
    payload.update(extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path):
    """Returns ``(net, payload)``; the network is rebuilt from the stored config."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    cfg = NetworkConfig.from_dict(payload["network_config"])
    net = DualDecoderNet(cfg).to(getattr(torch, payload.get("dtype", "float32")))
    net.load_state_dict(payload["params"])
    net.eval()
    return net, payload
