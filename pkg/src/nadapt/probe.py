"""Condition-sensitivity probe: how an eps-net conditioned on the clean image
degrades when that condition is corrupted with AWGN of increasing strength."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np
import torch

from .diffusion import EpsNet, NoiseSchedule, build_eps_net, forward_sample

log = logging.getLogger(__name__)


@dataclass
class SweepResult:
    sigma: np.ndarray
    mse: np.ndarray
    stderr: np.ndarray
    n_images: int

    def __post_init__(self):
        if not (len(self.sigma) == len(self.mse) == len(self.stderr)):
            raise ValueError("sweep arrays must share length")
        if np.any(np.diff(self.sigma) <= 0):
            raise ValueError("sigma must be strictly increasing")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["sigma", "mse", "stderr"])
            for s, m, e in zip(self.sigma, self.mse, self.stderr):
                wr.writerow([repr(float(s)), repr(float(m)), repr(float(e))])

    def spearman(self) -> float:
        from scipy.stats import spearmanr

        return float(spearmanr(self.sigma, self.mse).statistic)

    def plot(self, path) -> None:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(4, 3))
        ax.errorbar(self.sigma, self.mse, yerr=self.stderr, marker="o", capsize=2)
        ax.set_xlabel("condition noise level sigma")
        ax.set_ylabel("noise-prediction MSE")
        fig.tight_layout()
        fig.savefig(path, dpi=120)
        plt.close(fig)


def train_probe_model(clean: np.ndarray, sched: NoiseSchedule, steps: int, batch_size: int = 32,
                      lr: float = 1e-3, base: int = 16, seed: int = 0, patience: int = 10):
    """Train an eps-net whose single condition block is the clean image itself.

    Returns ``(model, losses)`` where ``losses`` holds the per-step MSE.
    """
    if len(clean) == 0:
        raise ValueError("empty clean set")
    data = torch.from_numpy(np.ascontiguousarray(clean, dtype=np.float32))
    c = data.shape[1]
    torch.manual_seed(seed)
    model = build_eps_net(c, c, base)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    losses = []
    bad = 0
    model.train()
    for step in range(steps):
        idx = rng.integers(0, len(data), size=batch_size)
        y = data[torch.from_numpy(idx)]
        t = rng.integers(0, sched.T, size=batch_size)
        eps = torch.randn(y.shape, generator=gen)
        db = forward_sample(y, t, eps, sched)
        loss = (model(db.noisy, y, db.sqrt_alpha_bar) - eps).pow(2).mean()
        if not torch.isfinite(loss):
            bad += 1
            if bad >= patience:
                from .trainer import DivergenceError
                raise DivergenceError(f"probe loss non-finite for {bad} consecutive steps")
            continue
        bad = 0
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if step % 500 == 0:
            log.info("probe step %d  loss %.4f", step, loss.item())
    model.eval()
    return model, np.array(losses)


@torch.no_grad()
def corruption_sweep(model: EpsNet, clean: np.ndarray, sigmas, sched: NoiseSchedule, draws: int = 10,
                     seed: int = 0, batch_size: int = 100) -> SweepResult:
    """Mean squared noise-prediction error per condition noise level.

    The (t, eps) draws and the unit corruption noise are shared across sigma
    values, so the curve differences are not dominated by sampling noise.
    """
    if len(clean) == 0:
        raise ValueError("empty test set")
    sigmas = np.asarray(sigmas, dtype=np.float64)
    if sigmas.min() < 0 or sigmas.max() > 80:
        raise ValueError("sigmas must lie within [0, 80]")
    data = torch.from_numpy(np.ascontiguousarray(clean, dtype=np.float32))
    n = len(data)
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    t_all = rng.integers(0, sched.T, size=(draws, n))
    eps_all = torch.randn((draws,) + tuple(data.shape), generator=gen)
    corr = torch.randn(tuple(data.shape), generator=gen)
    per_image = np.zeros((len(sigmas), n))
    for d in range(draws):
        for lo in range(0, n, batch_size):
            sl = slice(lo, lo + batch_size)
            db = forward_sample(data[sl], t_all[d, sl], eps_all[d, sl], sched)
            for k, s in enumerate(sigmas):
                cond = data[sl] + (s / 255.0) * corr[sl]
                err = (model(db.noisy, cond, db.sqrt_alpha_bar) - eps_all[d, sl]).pow(2).flatten(1).mean(1)
                per_image[k, sl] += err.double().numpy() / draws
    mse = per_image.mean(1)
    stderr = per_image.std(1, ddof=1) / np.sqrt(n) if n > 1 else np.zeros_like(mse)
    return SweepResult(sigmas, mse, stderr, n)
