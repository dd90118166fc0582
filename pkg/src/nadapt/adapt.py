"""Noise-space adaptation losses: channel shuffling, diffusion and contrastive
terms, residual swapping, the lambda ramp and the combined objective."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

NORMS = ("l2", "mse")


@dataclass
class ConditionPack:
    concat: torch.Tensor
    syn_first: np.ndarray  # bool per sample

    def with_conditions(self, syn_cond: torch.Tensor, real_cond: torch.Tensor) -> "ConditionPack":
        """Concatenate a new pair of conditions using this pack's ordering."""
        return ConditionPack(_concat(syn_cond, real_cond, self.syn_first), self.syn_first)


def _concat(syn_cond, real_cond, syn_first):
    mask = torch.as_tensor(syn_first, dtype=torch.bool).view(-1, 1, 1, 1)
    first = torch.where(mask, syn_cond, real_cond)
    second = torch.where(mask, real_cond, syn_cond)
    return torch.cat([first, second], 1)


def channel_shuffle(syn_cond: torch.Tensor, real_cond: torch.Tensor, rng: np.random.Generator | None = None,
                    order: np.ndarray | None = None) -> ConditionPack:
    """Concatenate the two conditions with a per-sample fair-coin order.

    Pass ``order`` (bool per sample, True = synthetic first) to force it; with
    neither ``rng`` nor ``order`` the synthetic condition always goes first.
    """
    if syn_cond.shape != real_cond.shape:
        raise ValueError(f"shape mismatch: {tuple(syn_cond.shape)} vs {tuple(real_cond.shape)}")
    n = syn_cond.shape[0]
    if order is None:
        order = rng.random(n) < 0.5 if rng is not None else np.ones(n, dtype=bool)
    order = np.asarray(order, dtype=bool)
    return ConditionPack(_concat(syn_cond, real_cond, order), order)


def sample_distance(a: torch.Tensor, b: torch.Tensor, norm: str = "l2") -> torch.Tensor:
    """Per-sample distance: the Euclidean norm, or the mean squared error."""
    if norm not in NORMS:
        raise ValueError(f"unknown norm {norm!r}")
    d = (a - b).flatten(1)
    if norm == "l2":
        return d.pow(2).sum(1).sqrt()
    return d.pow(2).mean(1)


def diffusion_loss(eps_net, noisy, pack: ConditionPack, sqrt_alpha_bar, eps_true, norm: str = "l2"):
    """Return ``(L_Dif, eps_pos)``; gradients reach both the net and the conditions."""
    eps_pos = eps_net(noisy, pack.concat, sqrt_alpha_bar)
    loss = sample_distance(eps_true, eps_pos, norm).mean()
    if not torch.isfinite(loss):
        raise FloatingPointError("non-finite diffusion loss")
    return loss, eps_pos


def residual_swap(x_s, x_r, r_s, r_r):
    """``(x_s + r_r, x_r + r_s)``: each input paired with the other domain's residual."""
    if not (x_s.shape == x_r.shape == r_s.shape == r_r.shape):
        raise ValueError("residual_swap needs identically shaped tensors")
    return x_s + r_r, x_r + r_s


def contrastive_loss(eps_true, eps_pos, eps_neg, delta: float, norm: str = "l2") -> torch.Tensor:
    """Hinge ``max(d(eps, pos) - d(eps, neg) + delta, 0)``, batch mean."""
    if delta < 0:
        raise ValueError("delta must be non-negative")
    if not (eps_true.shape == eps_pos.shape == eps_neg.shape):
        raise ValueError("contrastive_loss needs identically shaped tensors")
    d_pos = sample_distance(eps_true, eps_pos, norm)
    d_neg = sample_distance(eps_true, eps_neg, norm)
    return torch.clamp(d_pos - d_neg + delta, min=0.0).mean()


@dataclass
class ScheduleState:
    n: int
    N: int
    gamma: float = 5.0
    beta: float = 0.2

    @property
    def p(self) -> float:
        return min(self.n / self.N, 1.0)

    @property
    def lambda_dif(self) -> float:
        return lambda_schedule(self)


def lambda_schedule(state: ScheduleState) -> float:
    if state.N < 1:
        raise ValueError("N must be >= 1")
    if state.n < 0:
        raise ValueError("n must be >= 0")
    p = min(state.n / state.N, 1.0)
    return (2.0 / (1.0 + math.exp(-state.gamma * p)) - 1.0) * state.beta


def combined_loss(l_res, l_dif, l_con, lambda_dif):
    for v in (l_res, l_dif, l_con, lambda_dif):
        if not math.isfinite(float(v)):
            raise FloatingPointError("non-finite input to combined_loss")
    return l_res + lambda_dif * (l_dif + l_con) / 2


def pick_diffusion_target(mode: str, y_s, clean_pool=None, rng: np.random.Generator | None = None):
    """The clean image the diffusion input is built from: ``y_s`` or a pool draw."""
    if mode == "paired":
        return y_s
    if mode != "unpaired":
        raise ValueError(f"unknown mode {mode!r}")
    if clean_pool is None or len(clean_pool) == 0:
        raise ValueError("unpaired mode needs a non-empty clean pool")
    idx = rng.integers(0, len(clean_pool), size=y_s.shape[0])
    return clean_pool[torch.as_tensor(idx)]
