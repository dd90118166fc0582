"""Residual U-Net restorer, its size variants, the Charbonnier loss and checkpoints."""
from __future__ import annotations

import hashlib
import io
import json
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_MAGIC = b"NADAPT1\n"
STAGE_MULT = (1, 2, 3, 4)
BOTTLENECK_MULT = 4


@dataclass(frozen=True)
class UnetVariant:
    name: str
    base_channels: int
    encoder_depths: tuple[int, ...] = (2, 2, 2, 2)
    target_params: float = 0.0


VARIANTS = {
    "T": UnetVariant("T", 32, target_params=2.14e6),
    "S": UnetVariant("S", 64, target_params=8.56e6),
    "B": UnetVariant("B", 76, target_params=12.07e6),
}


def get_variant(name) -> UnetVariant:
    if isinstance(name, UnetVariant):
        return name
    try:
        return VARIANTS[str(name).upper()]
    except KeyError:
        raise ValueError(f"unknown U-Net variant {name!r}; expected one of {sorted(VARIANTS)}") from None


class ConvBlock(nn.Module):
    """conv3x3 -> GroupNorm -> LeakyReLU(0.2), with an optional per-channel
    shift from a noise-level embedding added after normalisation."""

    def __init__(self, c_in, c_out, emb_dim=0):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.norm = nn.GroupNorm(math.gcd(c_out, 8), c_out)
        self.act = nn.LeakyReLU(0.2)
        self.emb = nn.Linear(emb_dim, c_out) if emb_dim else None

    def forward(self, x, emb=None):
        h = self.norm(self.conv(x))
        if self.emb is not None:
            h = h + self.emb(emb)[:, :, None, None]
        return self.act(h)


class Stage(nn.Module):
    def __init__(self, c_in, c_out, depth, emb_dim=0):
        super().__init__()
        self.blocks = nn.ModuleList(
            ConvBlock(c_in if i == 0 else c_out, c_out, emb_dim) for i in range(depth))

    def forward(self, x, emb=None):
        for b in self.blocks:
            x = b(x, emb)
        return x


class UNet(nn.Module):
    """Four-stage encoder/decoder with skip connections and stride-2 resampling.

    Stage widths are ``base * (1, 2, 3, 4)`` with a ``4 * base`` bottleneck; four
    downsamplings mean spatial sizes must be divisible by 16. The output conv is
    zero-initialised.
    """

    def __init__(self, in_channels, out_channels, base, depths=(2, 2, 2, 2), emb_dim=0):
        super().__init__()
        chs = [base * m for m in STAGE_MULT]
        self.inp = nn.Conv2d(in_channels, base, 3, padding=1)
        self.enc = nn.ModuleList()
        self.down = nn.ModuleList()
        prev = base
        for c, d in zip(chs, depths):
            self.enc.append(Stage(prev, c, d, emb_dim))
            self.down.append(nn.Conv2d(c, c, 4, stride=2, padding=1))
            prev = c
        mid = base * BOTTLENECK_MULT
        self.mid = Stage(prev, mid, 2, emb_dim)
        prev = mid
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for c, d in zip(reversed(chs), reversed(depths)):
            self.up.append(nn.ConvTranspose2d(prev, c, 2, stride=2))
            self.dec.append(Stage(2 * c, c, d, emb_dim))
            prev = c
        self.out = nn.Conv2d(prev, out_channels, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x, emb=None):
        h = self.inp(x)
        skips = []
        for enc, down in zip(self.enc, self.down):
            h = enc(h, emb)
            skips.append(h)
            h = down(h)
        h = self.mid(h, emb)
        for up, dec in zip(self.up, self.dec):
            h = dec(torch.cat([up(h), skips.pop()], 1), emb)
        return self.out(h)


class Restorer(nn.Module):
    """Predicts a residual map R; the restored image is ``x + R``."""

    def __init__(self, variant: UnetVariant, in_channels: int):
        super().__init__()
        self.variant = variant
        self.in_channels = in_channels
        self.net = UNet(in_channels, in_channels, variant.base_channels, variant.encoder_depths)

    def forward(self, x):
        return self.net(x)


@dataclass
class RestorerOutput:
    residual: torch.Tensor
    restored: torch.Tensor


def build_restorer(variant, in_channels: int = 3) -> Restorer:
    if in_channels not in (1, 3):
        raise ValueError(f"in_channels must be 1 or 3, got {in_channels}")
    return Restorer(get_variant(variant), in_channels)


def count_params(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def restore(net: Restorer, degraded: torch.Tensor) -> RestorerOutput:
    """Run the restorer; sizes not divisible by 16 are reflect-padded and cropped back."""
    if not torch.isfinite(degraded).all():
        raise ValueError("non-finite values in restorer input")
    h, w = degraded.shape[-2:]
    ph, pw = (-h) % 16, (-w) % 16
    x = degraded
    if ph or pw:
        mode = "reflect" if ph < h and pw < w else "replicate"
        x = F.pad(degraded, (0, pw, 0, ph), mode=mode)
    residual = net(x)[..., :h, :w]
    return RestorerOutput(residual, degraded + residual)


def charbonnier_loss(pred: torch.Tensor, target: torch.Tensor, eps_c: float = 1e-3) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    d = pred - target
    return torch.sqrt(d * d + eps_c * eps_c).mean()


# ---------------------------------------------------------------------------
# checkpoints


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def save_checkpoint(path, net: Restorer, cfg: dict | None = None, extra: dict | None = None) -> None:
    payload = {
        "variant": net.variant.name,
        "in_channels": net.in_channels,
        "config_hash": config_hash(cfg or {}),
        "state_dict": net.state_dict(),
    }
    if extra:
        payload.update(extra)
    buf = io.BytesIO()
    torch.save(payload, buf)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(buf.getvalue())


def read_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        head = fh.read(len(CHECKPOINT_MAGIC))
        if head != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not an NADAPT1 checkpoint")
        return torch.load(io.BytesIO(fh.read()), map_location="cpu", weights_only=True)


def load_checkpoint(path) -> Restorer:
    payload = read_checkpoint(path)
    net = build_restorer(payload["variant"], payload["in_channels"])
    net.load_state_dict(payload["state_dict"])
    net.eval()
    return net
