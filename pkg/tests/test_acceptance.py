"""Acceptance suite: each criterion is one test that records a PASS/FAIL line.

The training criteria (2-4) share a session cache of toy runs built from the
bundled ``toy`` recipe: synthetic AWGN pairs against a Poisson-Gaussian
"real" domain, Unet-T, 60 epochs, seeds 0-2. Expect roughly half an hour on
one CPU core for the whole module.
"""
import functools
import math

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE
from nadapt.adapt import (ScheduleState, channel_shuffle, combined_loss, contrastive_loss, diffusion_loss,
                          lambda_schedule)
from nadapt.cli import main
from nadapt.config import RunConfig, layer, load_recipe, resolve
from nadapt.dataset import build_dataset, builtin_corpus, load_train_data
from nadapt.diffusion import build_eps_net, forward_sample, linear_schedule
from nadapt.probe import corruption_sweep, train_probe_model
from nadapt.restorer import build_restorer, charbonnier_loss, restore
from nadapt.trainer import annotate_stages, route_gradients, train_joint

SEEDS = (0, 1, 2)
RECIPES = {"a": "ablation_a", "b": "ablation_b", "d": "ablation_d", "e": "ablation_e", "f": "ablation_f"}


def record(k: int, ok: bool, msg: str) -> None:
    ACCEPTANCE[k] = (bool(ok), msg)
    assert ok, msg


@pytest.fixture(scope="module")
def toy_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    cfg = resolve(load_recipe("toy"))
    build_dataset(cfg, root)
    return load_train_data(root, cfg)


@pytest.fixture(scope="module")
def toy_run(toy_data):
    @functools.cache
    def run(row: str, seed: int):
        cfg = resolve(layer(load_recipe("toy"), load_recipe(RECIPES[row])), seed=seed)
        st = cfg["stage"]
        log = train_joint(RunConfig.from_dict(cfg), toy_data).log
        return annotate_stages(log, st["gap_db"], st["k"], st["grad_ratio"])

    return run


def final_real(log) -> float:
    return float(log.rows[-1]["real_psnr"])


# ---------------------------------------------------------------------------


def test_c01_probe_trend(tmp_path):
    sched = linear_schedule(1000)
    train = np.stack(builtin_corpus("syn", 800, 32, seed=0))
    test = np.stack(builtin_corpus("real", 200, 32, seed=0))
    model, losses = train_probe_model(train, sched, steps=3000, batch_size=32, lr=1e-3, base=16, seed=0)
    res = corruption_sweep(model, test, np.arange(0, 81, 10), sched, draws=10, seed=0)
    rho = res.spearman()
    mse = " ".join(f"{m:.4f}" for m in res.mse)
    record(1, rho >= 0.9, f"Spearman rho(sigma, mse) = {rho:.3f} (need >= 0.9); mse by sigma: {mse}")


def test_c02_adaptation_gain(toy_run):
    gains = [final_real(toy_run("f", s)) - final_real(toy_run("a", s)) for s in SEEDS]
    wins = sum(g >= 0.3 for g in gains)
    record(2, wins >= 2, f"full minus vanilla real-val PSNR per seed: {', '.join(f'{g:+.2f}' for g in gains)} dB "
                         f"({wins}/3 seeds >= +0.3 dB, need 2)")


def test_c03_shortcut(toy_run):
    parts, ok = [], False
    for s in SEEDS:
        log = toy_run("b", s)
        stages = [r["stage"] for r in log.rows]
        hit = "III" in stages
        below = final_real(log) < final_real(toy_run("a", s))
        ok |= hit and below
        ratio = log.rows[-1]["grad_real"] / log.rows[-1]["grad_syn"]
        parts.append(f"seed {s}: stage III {'yes' if hit else 'no'}, final {final_real(log):.2f} vs vanilla "
                     f"{final_real(toy_run('a', s)):.2f}, grad ratio {ratio:.3f}")
        if ok:  # one qualifying run is enough
            break
    record(3, ok, "; ".join(parts))


def test_c04_ablation_order(toy_run):
    d = [final_real(toy_run("d", s)) for s in SEEDS]
    e = [final_real(toy_run("e", s)) for s in SEEDS]
    f = [final_real(toy_run("f", s)) for s in SEEDS]
    wins = sum(fi >= di for fi, di in zip(f, d))
    mono = sum(di <= ei <= fi for di, ei, fi in zip(d, e, f))
    fmt = lambda v: "/".join(f"{x:.2f}" for x in v)  # noqa: E731
    record(4, wins >= 2, f"real-val PSNR d {fmt(d)}, e {fmt(e)}, f {fmt(f)}; f >= d in {wins}/3 (need 2); "
                         f"d <= e <= f in {mono}/3 (not gated)")


def test_c05_lambda_schedule():
    vals = [lambda_schedule(ScheduleState(n, 10)) for n in (0, 5, 10)]
    ok = vals[0] == 0.0 and abs(vals[2] - 0.197322) <= 1e-6 and abs(vals[1] - 0.169656) <= 1e-6
    record(5, ok, f"lambda(0, 0.5, 1) = {vals[0]:.8f}, {vals[1]:.8f}, {vals[2]:.8f}")


def test_c06_forward_moments():
    sched = linear_schedule(1000)
    rng = np.random.default_rng(6)
    gen = torch.Generator().manual_seed(6)
    ts = rng.choice(1000, size=3, replace=False)
    y = torch.from_numpy(rng.uniform(0.2, 1.0, (3, 8, 8)).astype(np.float64))
    draws, chunk = 100_000, 10_000
    worst = 0.0
    parts = []
    for t in ts:
        s1 = torch.zeros_like(y)
        s2 = torch.zeros_like(y)
        for _ in range(draws // chunk):
            eps = torch.randn((chunk,) + tuple(y.shape), generator=gen, dtype=torch.float64)
            noisy = forward_sample(y.expand(chunk, -1, -1, -1), np.full(chunk, t), eps, sched).noisy.double()
            s1 += noisy.sum(0)
            s2 += noisy.pow(2).sum(0)
        mean = s1 / draws
        var = s2 / draws - mean.pow(2)
        ab = float(sched.alpha_bar[t])
        # pooled over pixels: relative error of the mean map and of the average variance
        err_m = float((mean - math.sqrt(ab) * y).abs().sum() / (math.sqrt(ab) * y).abs().sum())
        err_v = abs(float(var.mean()) / (1 - ab) - 1)
        worst = max(worst, err_m, err_v)
        parts.append(f"t={t + 1}: mean {err_m:.2%} var {err_v:.2%}")
    exact = float(np.prod(1 - np.linspace(1e-6, 1e-2, 1000, dtype=np.float64)))
    err_ab = abs(float(sched.alpha_bar[-1]) / exact - 1)
    record(6, worst <= 0.02 and err_ab <= 0.05, "; ".join(parts) + f"; alpha_bar_1000 rel err {err_ab:.2e}")


def test_c07_loss_oracles():
    torch.set_default_dtype(torch.float64)
    try:
        rng = np.random.default_rng(7)
        p = rng.normal(size=(2, 3, 4, 4))
        q = rng.normal(size=(2, 3, 4, 4))
        pt = torch.tensor(p, requires_grad=True)
        char = charbonnier_loss(pt, torch.tensor(q))
        char_o = float(np.mean(np.sqrt((p - q) ** 2 + 1e-6)))
        errs = {"charbonnier": abs(char.item() / char_o - 1)}

        # a mix of active and inactive hinges: negatives at varying distances
        e = rng.normal(size=(4, 2, 4, 4))
        a = e + 0.5 * rng.normal(size=e.shape)
        b = e + np.array([0.3, 0.5, 0.6, 2.0])[:, None, None, None] * rng.normal(size=e.shape)
        con = contrastive_loss(*(torch.tensor(v) for v in (e, a, b)), delta=0.05)
        d = lambda u, v: np.sqrt(((u - v) ** 2).reshape(4, -1).sum(1))  # noqa: E731
        con_o = float(np.mean(np.maximum(d(e, a) - d(e, b) + 0.05, 0)))
        errs["contrastive"] = abs(con.item() / con_o - 1)
        comb = combined_loss(torch.tensor(0.3), torch.tensor(1.7), torch.tensor(0.2), 0.169656)
        errs["combined"] = abs(comb.item() / (0.3 + 0.169656 * (1.7 + 0.2) / 2) - 1)

        (g,) = torch.autograd.grad(char, pt)
        h = 1e-6
        fd = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            pp, pm = p.copy(), p.copy()
            pp[idx] += h
            pm[idx] -= h
            fd[idx] = (np.mean(np.sqrt((pp - q) ** 2 + 1e-6)) - np.mean(np.sqrt((pm - q) ** 2 + 1e-6))) / (2 * h)
        grad_err = float(np.max(np.abs(g.numpy() - fd)) / np.max(np.abs(fd)))
    finally:
        torch.set_default_dtype(torch.float32)
    ok = max(errs.values()) <= 1e-6 and grad_err <= 1e-4
    record(7, ok, ", ".join(f"{k} {v:.1e}" for k, v in errs.items()) + f"; charbonnier grad vs FD {grad_err:.1e}")


def _routing(lam, detach):
    torch.manual_seed(8)
    G = build_restorer("T", 3)
    E = build_eps_net(3, 6, 8)
    x_s, x_r, y_s = (torch.rand(2, 3, 16, 16) for _ in range(3))
    with torch.no_grad():  # non-identity restorer so both conditions carry a residual
        for prm in G.parameters():
            prm.add_(0.05 * torch.randn_like(prm))
    out_s, out_r = restore(G, x_s), restore(G, x_r)
    l_res = charbonnier_loss(out_s.restored, y_s)
    cs, cr = out_s.restored, out_r.restored
    if detach:
        cs, cr = cs.detach(), cr.detach()
    sched = linear_schedule(1000)
    eps = torch.randn(y_s.shape)
    db = forward_sample(y_s, np.array([10, 700]), eps, sched)
    l_dif, _ = diffusion_loss(E, db.noisy, channel_shuffle(cs, cr, order=np.array([True, False])),
                              db.sqrt_alpha_bar, eps)
    g_cond = None if detach else torch.autograd.grad(l_dif, [cs, cr], retain_graph=True)
    gp, ep = list(G.parameters()), list(E.parameters())
    g_res = torch.autograd.grad(l_res, gp, retain_graph=True)
    g_eps_from_res = torch.autograd.grad(l_res, ep, retain_graph=True, allow_unused=True)
    g_total, _ = route_gradients(gp, ep, l_res, l_dif / 2, lam)
    adapt_part = sum(float((a - b).abs().sum()) for a, b in zip(g_total, g_res))
    return g_cond, adapt_part, g_eps_from_res


def test_c08_gradient_routing():
    g_cond, on, g_eps = _routing(0.1, detach=False)
    n_syn, n_real = (float(g.norm()) for g in g_cond)
    _, det, _ = _routing(0.1, detach=True)
    _, off, _ = _routing(0.0, detach=False)
    eps_clean = all(g is None or not torch.any(g) for g in g_eps)
    ok = n_syn > 0 and n_real > 0 and on > 0 and det == 0.0 and off == 0.0 and eps_clean
    record(8, ok, f"|dL/d syn cond| {n_syn:.3g}, |dL/d real cond| {n_real:.3g}, adapt share at lambda 0.1 "
                  f"{on:.3g}, detached {det}, lambda 0 {off}; eps-net grads from L_res all zero: {eps_clean}")


def test_c09_shuffle_and_reduction(toy_data):
    rng = np.random.default_rng(9)
    a, b = torch.zeros(1, 1, 1, 1), torch.ones(1, 1, 1, 1)
    firsts = [channel_shuffle(a, b, rng).syn_first.item() for _ in range(10_000)]
    freq = float(np.mean(firsts))
    base = layer(load_recipe("toy"), {"train": {"epochs": 3}})
    off = resolve(layer(base, {"adapt": {"channel_shuffle": False, "residual_swap": False},
                               "lambda": {"beta": 0.0}}), seed=4)
    van = resolve(layer(base, {"adapt": {"enabled": False}}), seed=4)
    ga = train_joint(RunConfig.from_dict(off), toy_data).restorer
    gb = train_joint(RunConfig.from_dict(van), toy_data).restorer
    same = all(torch.equal(p, q) for p, q in zip(ga.parameters(), gb.parameters()))
    record(9, abs(freq - 0.5) <= 0.02 and same,
           f"syn-first frequency {freq:.4f} over 10k draws; joint run with lambda 0 and toggles off "
           f"bit-identical to restorer-only run: {same}")


def test_c10_rerun_determinism(tmp_path):
    tiny = ["degrade.source=builtin", "degrade.builtin.size=32", "degrade.builtin.syn=8", "degrade.builtin.real=8",
            "degrade.builtin.pool=4", "data.patch=32", "train.epochs=3", "train.batch_size=4", "model.eps_base=8",
            "probe.n_train=16", "probe.n_test=8", "probe.steps=20", "probe.draws=2", "probe.size=16",
            "probe.batch_size=4"]
    ds = tmp_path / "ds"
    checks = {}

    def twice(verb, files, first_args, out_a, out_b, extra=()):
        assert main([verb, "--out", str(out_a), *first_args]) == 0
        snap = (out_a / "resolved_config.json").read_bytes()
        cfg = tmp_path / f"{verb}_resolved.json"
        cfg.write_bytes(snap)
        assert main([verb, "--out", str(out_b), "--config", str(cfg), *extra]) == 0
        for f in files:
            checks[f"{verb}:{f}"] = (out_a / f).read_bytes() == (out_b / f).read_bytes()

    twice("degrade", ["degradations.jsonl", "real_degraded/000.png"], ["--seed", "5", "--override", *tiny,
          "degrade.log_degradations=true"], ds, tmp_path / "ds2")
    root = [f'data.root="{ds}"']
    twice("train", ["train_log.csv"], ["--override", *tiny, *root], tmp_path / "r1", tmp_path / "r2")
    twice("eval", ["metrics.csv"], ["--override", *tiny, *root], tmp_path / "r1", tmp_path / "r2")
    twice("diagnose", ["train_log.csv"], [], tmp_path / "r1", tmp_path / "r2")
    twice("probe", ["sweep.csv", "probe_loss.csv"], ["--override", *tiny], tmp_path / "p1", tmp_path / "p2")
    bad = [k for k, v in checks.items() if not v]
    record(10, not bad, f"{len(checks) - len(bad)}/{len(checks)} rerun outputs byte-identical"
                        + (f"; differing: {', '.join(bad)}" if bad else ""))
