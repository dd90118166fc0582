"""Joint optimisation of the restorer and the eps-net, validation and stage diagnostics."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .adapt import (channel_shuffle, contrastive_loss, diffusion_loss, lambda_schedule,
                    pick_diffusion_target, residual_swap, ScheduleState)
from .config import RunConfig
from .dataset import TrainData
from .degrade import DegradeSpec, make_patch_stream, stack_batch
from .diffusion import EmaState, build_eps_net, forward_sample, linear_schedule
from .imaging import MetricReport, psnr, ssim
from .restorer import (Restorer, build_restorer, charbonnier_loss, load_checkpoint, restore,
                       save_checkpoint)

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "l_res", "l_dif", "l_con", "lambda_dif", "syn_psnr", "real_psnr",
               "grad_syn", "grad_real")
STAGES = ("I", "II", "III")


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)

    def to_csv(self, path) -> None:
        cols = list(LOG_COLUMNS) + (["stage"] if self.rows and "stage" in self.rows[0] else [])
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(cols)
            for r in self.rows:
                wr.writerow([r[c] if c in ("epoch", "stage") else repr(float(r[c])) for c in cols])

    @classmethod
    def from_csv(cls, path) -> "TrainLog":
        rows = []
        with open(path, newline="") as fh:
            for raw in csv.DictReader(fh):
                row = {c: float(raw[c]) for c in LOG_COLUMNS}
                row["epoch"] = int(raw["epoch"])
                if "stage" in raw:
                    row["stage"] = raw["stage"]
                rows.append(row)
        return cls(rows)


@dataclass
class TrainResult:
    restorer: Restorer
    log: TrainLog
    eps_net: torch.nn.Module | None = None
    ema: EmaState | None = None


def _to_tensor(a: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32))


@torch.no_grad()
def restore_image(net: Restorer, degraded: np.ndarray) -> np.ndarray:
    net.eval()
    out = restore(net, _to_tensor(degraded)[None]).restored[0].numpy()
    return np.clip(out, 0.0, 1.0)


def mean_psnr(net: Restorer, pairs: list, y_channel: bool = False) -> float:
    if not pairs:
        return float("nan")
    from .imaging import to_luma

    vals = []
    for _, degraded, gt in pairs:
        out = restore_image(net, degraded)
        if y_channel:
            out, gt = to_luma(out), to_luma(gt)
        vals.append(psnr(out, gt))
    return float(np.mean(vals))


def _batches(stream, batch_size):
    while True:
        yield [next(stream) for _ in range(batch_size)]


def route_gradients(g_params: list, e_params: list, l_res, adapt_term, lam: float):
    """Gradients for both parameter sets from one joint iteration.

    The restorer gets ``dL_Res + lam * d(adapt_term)``; the adaptation part is
    skipped entirely when ``lam == 0`` or when nothing in ``adapt_term``
    depends on the restorer (detached conditions). The eps-net gets the
    unscaled ``d(adapt_term)`` and never sees ``L_Res``.
    """
    g_res = list(torch.autograd.grad(l_res, g_params, retain_graph=adapt_term is not None))
    if adapt_term is None:
        return g_res, []
    wants_g = lam > 0 and adapt_term.requires_grad
    targets = e_params + (g_params if wants_g else [])
    grads = torch.autograd.grad(adapt_term, targets, allow_unused=True)
    g_eps = [torch.zeros_like(p) if g is None else g for p, g in zip(e_params, grads)]
    for i, g in enumerate(grads[len(e_params):]):
        if g is not None:
            g_res[i] = g_res[i] + lam * g
    return g_res, g_eps


def train_joint(cfg: RunConfig, data: TrainData, out_dir=None, progress=None) -> TrainResult:
    """Train the restorer, jointly with an eps-net when adaptation is enabled.

    Per iteration both domains are restored, the restored pair becomes the
    (optionally shuffled) condition of the eps-net, and the restorer is
    updated on ``L_Res + lambda * (L_Dif + L_Con) / 2`` while the eps-net is
    updated on ``(L_Dif + L_Con) / 2``. Epoch ``n`` uses ``lambda(n / horizon)``.
    """
    raw = cfg.raw
    tr, ad = raw["train"], raw["adapt"]
    derain = cfg.task == "derain"
    seeds = np.random.SeedSequence(cfg.seed).spawn(5)
    rng_syn, rng_real, rng_pool, rng_adapt = (np.random.default_rng(s) for s in seeds[:4])
    eps_gen = torch.Generator().manual_seed(int(seeds[4].generate_state(1)[0]))

    torch.manual_seed(cfg.seed)
    channels = data.syn[0][1].shape[0]
    G = build_restorer(cfg.variant, channels)
    opt_g = torch.optim.Adam(G.parameters(), lr=cfg.lr)
    g_params = list(G.parameters())

    adapt = cfg.adapt_enabled
    unpaired = cfg.mode == "unpaired"
    use_rs = cfg.residual_swap and not unpaired
    E = ema = opt_e = None
    if adapt:
        torch.manual_seed(cfg.seed + 1)
        E = build_eps_net(channels, 2 * channels, int(raw["model"]["eps_base"]))
        opt_e = torch.optim.Adam(E.parameters(), lr=float(tr["lr_eps"] or cfg.lr))
        ema = EmaState(E, float(tr["ema_decay"]))
        e_params = list(E.parameters())
        sched = linear_schedule(ad["schedule"]["T"], ad["schedule"]["beta_lo"], ad["schedule"]["beta_hi"])
        if unpaired and not data.pool:
            raise ValueError("unpaired mode needs a clean pool")

    syn_spec = DegradeSpec.from_dict(raw["degrade"]["syn"])
    augment = bool(raw["data"]["augment"])
    syn_stream = _batches(make_patch_stream(data.syn, cfg.patch, syn_spec, augment, rng_syn), cfg.batch_size)
    real_stream = _batches(make_patch_stream(data.real, cfg.patch, None, augment, rng_real), cfg.batch_size)
    pool_stream = None
    if adapt and unpaired:
        pool_stream = _batches(make_patch_stream(data.pool, cfg.patch, None, augment, rng_pool), cfg.batch_size)

    iters = tr["iters_per_epoch"] or max(1, math.ceil(len(data.syn) / cfg.batch_size))
    horizon = cfg.lambda_horizon
    lam_cfg = raw["lambda"]
    patience = int(tr["divergence_patience"])
    detach = bool(tr["detach_conditions"])
    t_lo, t_hi = cfg.t_range
    log_ = TrainLog()
    bad_streak = 0

    for epoch in range(cfg.epochs):
        lam = lambda_schedule(ScheduleState(epoch, horizon, lam_cfg["gamma"], lam_cfg["beta"]))
        acc = {k: [] for k in ("l_res", "l_dif", "l_con", "grad_syn", "grad_real")}
        G.train()
        for _ in range(iters):
            syn_b = next(syn_stream)
            x_s = _to_tensor(stack_batch(syn_b, degraded=True))
            y_s = _to_tensor(stack_batch(syn_b))
            out_s = restore(G, x_s)
            l_res = charbonnier_loss(out_s.restored, y_s)
            l_dif = l_con = torch.zeros(())
            if adapt:
                x_r = _to_tensor(stack_batch(next(real_stream)))
                out_r = restore(G, x_r)
                pool = _to_tensor(stack_batch(next(pool_stream))) if pool_stream is not None else None
                target = pick_diffusion_target(cfg.mode, y_s, pool, rng_adapt)
                t = rng_adapt.integers(t_lo - 1, t_hi, size=x_s.shape[0])
                eps = torch.randn(x_s.shape, generator=eps_gen)
                db = forward_sample(target, t, eps, sched)
                cond_s, cond_r = out_s.restored, out_r.restored
                if detach:
                    cond_s, cond_r = cond_s.detach(), cond_r.detach()
                order = rng_adapt.random(x_s.shape[0]) < 0.5 if cfg.channel_shuffle else None
                pack = channel_shuffle(cond_s, cond_r, order=order)
                try:
                    l_dif, eps_pos = diffusion_loss(E, db.noisy, pack, db.sqrt_alpha_bar, eps, ad["norm"])
                except FloatingPointError:
                    l_dif = torch.tensor(float("nan"))
                if use_rs and torch.isfinite(l_dif):
                    r_s, r_r = out_s.residual, out_r.residual
                    if detach:
                        r_s, r_r = r_s.detach(), r_r.detach()
                    y_sr, y_rs = residual_swap(x_s, x_r, r_s, r_r)
                    eps_neg = E(db.noisy, pack.with_conditions(y_sr, y_rs).concat, db.sqrt_alpha_bar)
                    l_con = contrastive_loss(eps, eps_pos, eps_neg, float(ad["delta"]), ad["norm"])

            losses = torch.stack([l_res.detach(), l_dif.detach(), l_con.detach()])
            if not torch.isfinite(losses).all():
                bad_streak += 1
                log.warning("non-finite loss at epoch %d (streak %d)", epoch, bad_streak)
                if bad_streak >= patience:
                    raise DivergenceError(f"losses non-finite for {bad_streak} consecutive iterations "
                                          f"(epoch {epoch}): {losses.tolist()}")
                continue
            bad_streak = 0

            if adapt:
                adapt_term = (l_dif + l_con) / 2
                if not detach:
                    gs, gr = torch.autograd.grad(l_dif, [cond_s, cond_r], retain_graph=True)
                    acc["grad_syn"].append(gs.norm().item())
                    acc["grad_real"].append(gr.norm().item())
                g_res, g_eps = route_gradients(g_params, e_params, l_res, adapt_term, lam)
                for p, g in zip(e_params, g_eps):
                    p.grad = g
            else:
                g_res, _ = route_gradients(g_params, [], l_res, None, 0.0)
            for p, g in zip(g_params, g_res):
                p.grad = g
            opt_g.step()
            if adapt:
                opt_e.step()
                ema.update(E)
            acc["l_res"].append(l_res.item())
            acc["l_dif"].append(l_dif.item())
            acc["l_con"].append(l_con.item())

        def _m(k):
            return float(np.mean(acc[k])) if acc[k] else float("nan")

        row = {"epoch": epoch, "l_res": _m("l_res"), "l_dif": _m("l_dif") if adapt else float("nan"),
               "l_con": _m("l_con") if adapt else float("nan"), "lambda_dif": lam,
               "syn_psnr": mean_psnr(G, data.syn_val, derain), "real_psnr": mean_psnr(G, data.real_val, derain),
               "grad_syn": _m("grad_syn"), "grad_real": _m("grad_real")}
        log_.rows.append(row)
        if progress:
            progress(row)
        log.info("epoch %d  l_res %.4f  l_dif %.4f  l_con %.4f  lam %.4f  syn %.2f dB  real %.2f dB",
                 epoch, row["l_res"], row["l_dif"], row["l_con"], lam, row["syn_psnr"], row["real_psnr"])

    G.eval()
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out_dir / "restorer.ckpt", G, raw)
        log_.to_csv(out_dir / "train_log.csv")
        if adapt and tr["save_diffusion"]:
            torch.save({"eps_net": E.state_dict(), "ema": ema.shadow}, out_dir / "diffusion_debug.pt")
    return TrainResult(G, log_, E, ema)


# ---------------------------------------------------------------------------
# diagnostics


def detect_stage(log: TrainLog, gap_db: float = 3.0, k: int = 3, grad_ratio: float = 0.1) -> str:
    """Classify the latest epoch of ``log`` into shortcut stage I, II or III.

    III: real-val PSNR fell for ``k`` consecutive epochs while syn-val PSNR rose
    over the same window, and the real condition-gradient norm is below
    ``grad_ratio`` of the synthetic one. II: syn-val PSNR leads real-val by at
    least ``gap_db`` with comparable gradient norms. Otherwise I.
    """
    if len(log.rows) < 3:
        raise ValueError("detect_stage needs at least 3 epochs of history")
    syn = log.column("syn_psnr")
    real = log.column("real_psnr")
    g_syn = log.rows[-1]["grad_syn"]
    g_real = log.rows[-1]["grad_real"]
    if len(real) > k:
        falling = bool(np.all(np.diff(real[-(k + 1):]) < 0))
        rising = syn[-1] > syn[-(k + 1)]
        if falling and rising and g_real < grad_ratio * g_syn:
            return "III"
    lo, hi = min(g_syn, g_real), max(g_syn, g_real)
    comparable = hi > 0 and lo / hi >= grad_ratio
    if syn[-1] - real[-1] >= gap_db and comparable:
        return "II"
    return "I"


def annotate_stages(log: TrainLog, gap_db: float = 3.0, k: int = 3, grad_ratio: float = 0.1) -> TrainLog:
    """Add a ``stage`` column: the label of each epoch's history prefix ('' before epoch 2)."""
    for i, row in enumerate(log.rows):
        row["stage"] = detect_stage(TrainLog(log.rows[:i + 1]), gap_db, k, grad_ratio) if i >= 2 else ""
    return log


def evaluate(checkpoint, eval_set: list, task: str = "denoise") -> MetricReport:
    """PSNR/SSIM per image of ``(id, degraded, gt)`` triples; Y channel for deraining."""
    net = load_checkpoint(checkpoint) if isinstance(checkpoint, (str, Path)) else checkpoint
    if not eval_set:
        raise ValueError("empty evaluation set")
    y_mode = task == "derain"
    rep = MetricReport()
    for item in eval_set:
        if len(item) < 3 or item[2] is None:
            raise ValueError(f"missing ground truth for {item[0]!r}")
        image_id, degraded, gt = item[:3]
        out = restore_image(net, degraded)
        if y_mode:
            from .imaging import to_luma
            rep.add(image_id, psnr(to_luma(out), to_luma(gt)), ssim(out, gt, y_channel=True))
        else:
            rep.add(image_id, psnr(out, gt), ssim(out, gt))
    return rep
