"""DDPM forward process, linear schedule, noise-level conditioned eps-net and EMA."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .restorer import UNet


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    def sqrt_alpha_bar(self, t) -> torch.Tensor:
        return torch.as_tensor(np.sqrt(self.alpha_bar[np.asarray(t)]), dtype=torch.float32)


def linear_schedule(T: int = 1000, beta_lo: float = 1e-6, beta_hi: float = 1e-2) -> NoiseSchedule:
    if T < 2:
        raise ValueError("T must be >= 2")
    if not 0 < beta_lo < beta_hi < 1:
        raise ValueError(f"need 0 < beta_lo < beta_hi < 1, got {beta_lo}, {beta_hi}")
    beta = beta_lo + np.arange(T, dtype=np.float64) * (beta_hi - beta_lo) / (T - 1)
    alpha = 1.0 - beta
    return NoiseSchedule(beta, alpha, np.cumprod(alpha))


@dataclass
class DiffusionBatch:
    noisy: torch.Tensor
    eps: torch.Tensor
    t: np.ndarray
    sqrt_alpha_bar: torch.Tensor


def forward_sample(clean: torch.Tensor, t, eps: torch.Tensor, sched: NoiseSchedule) -> DiffusionBatch:
    """Noise ``clean`` to level ``t`` (zero-based, one entry per sample)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.int64))
    if t.min() < 0 or t.max() >= sched.T:
        raise ValueError(f"t must lie in [0, {sched.T - 1}]")
    if t.shape[0] != clean.shape[0]:
        raise ValueError("one t per sample required")
    sab = torch.as_tensor(np.sqrt(sched.alpha_bar[t]), dtype=clean.dtype)
    s1 = torch.as_tensor(np.sqrt(1.0 - sched.alpha_bar[t]), dtype=clean.dtype)
    view = (-1,) + (1,) * (clean.dim() - 1)
    noisy = sab.view(view) * clean + s1.view(view) * eps
    return DiffusionBatch(noisy, eps, t, sab)


def noise_level_embedding(level: torch.Tensor, dim: int, scale: float = 5000.0) -> torch.Tensor:
    """Sinusoidal embedding of a continuous noise level in [0, 1]."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    arg = scale * level.float()[:, None] * freqs[None]
    return torch.cat([torch.sin(arg), torch.cos(arg)], dim=1)


class EpsNet(nn.Module):
    """Predicts eps from ``[noisy, condition]`` and the level sqrt(alpha_bar)."""

    def __init__(self, image_channels: int, cond_channels: int, base: int = 64, emb_dim: int = 128):
        super().__init__()
        if cond_channels <= 0 or cond_channels % image_channels:
            raise ValueError(f"cond_channels ({cond_channels}) must be a positive multiple of "
                             f"image_channels ({image_channels})")
        self.image_channels = image_channels
        self.cond_channels = cond_channels
        self.emb_dim = emb_dim
        self.emb_mlp = nn.Sequential(nn.Linear(emb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.unet = UNet(image_channels + cond_channels, image_channels, base, emb_dim=emb_dim)
        # eps-net starts from a non-degenerate output, unlike the restorer head
        nn.init.normal_(self.unet.out.weight, std=1e-3)

    def forward(self, noisy, cond, sqrt_alpha_bar):
        if noisy.shape[1] != self.image_channels or cond.shape[1] != self.cond_channels:
            raise ValueError(f"channel mismatch: noisy {noisy.shape[1]}, cond {cond.shape[1]}")
        emb = self.emb_mlp(noise_level_embedding(sqrt_alpha_bar.to(noisy.device), self.emb_dim))
        return self.unet(torch.cat([noisy, cond], 1), emb)


def build_eps_net(image_channels: int = 3, cond_channels: int = 6, base: int = 64) -> EpsNet:
    return EpsNet(image_channels, cond_channels, base)


class EmaState:
    """Shadow copy of a module's floating-point parameters and buffers."""

    def __init__(self, module: nn.Module, decay: float = 0.9999):
        if not 0.0 <= decay <= 1.0:
            raise ValueError("decay must lie in [0, 1]")
        self.decay = decay
        self.shadow = {k: v.detach().clone() for k, v in module.state_dict().items()}

    @torch.no_grad()
    def update(self, module: nn.Module) -> "EmaState":
        live = module.state_dict()
        if live.keys() != self.shadow.keys():
            raise ValueError("EMA shadow and live module have different parameter sets")
        for k, v in live.items():
            s = self.shadow[k]
            if s.shape != v.shape:
                raise ValueError(f"shape drift for {k}: {tuple(s.shape)} vs {tuple(v.shape)}")
            if s.is_floating_point():
                s.mul_(self.decay).add_(v.detach(), alpha=1.0 - self.decay)
            else:
                s.copy_(v)
        return self

    def copy_to(self, module: nn.Module) -> None:
        module.load_state_dict(self.shadow)


def ema_update(state: EmaState, module: nn.Module) -> EmaState:
    return state.update(module)
