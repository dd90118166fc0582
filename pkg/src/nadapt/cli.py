"""``nadapt`` command line: degrade, train, eval, probe, diagnose."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, RunConfig, layer, load_config, load_recipe, resolve

log = logging.getLogger("nadapt")

EXIT_OK, EXIT_DIVERGED, EXIT_CONFIG = 0, 2, 3
VERBS = ("degrade", "train", "eval", "probe", "diagnose")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nadapt", description=__doc__)
    sub = ap.add_subparsers(dest="verb", required=True)
    for verb in VERBS:
        p = sub.add_parser(verb)
        p.add_argument("--config", type=Path, help="JSON run config")
        p.add_argument("--recipe", action="append", default=[], metavar="NAME",
                       help="bundled partial config, layered over --config (repeatable)")
        p.add_argument("--override", nargs="*", default=[], metavar="K=V", help="dotted-key overrides")
        p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        p.add_argument("-v", "--verbose", action="store_true")
    return ap


def _data_root(cfg: dict) -> Path:
    root = cfg["data"]["root"] or os.environ.get("NADAPT_DATA_ROOT")
    if not root:
        raise ConfigError("no dataset root: set data.root or NADAPT_DATA_ROOT")
    return Path(root)


def _write_resolved(cfg: dict, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def cmd_degrade(cfg: dict, out: Path, force: bool) -> int:
    from .dataset import build_dataset

    cfg["data"]["root"] = str(out.resolve())
    counts = build_dataset(cfg, out, force=force)
    _write_resolved(cfg, out)
    for k, v in counts.items():
        print(f"{k}: {v}")
    return EXIT_OK


def cmd_train(cfg: dict, out: Path, force: bool) -> int:
    from .dataset import load_train_data
    from .trainer import DivergenceError, train_joint

    root = _data_root(cfg)
    cfg["data"]["root"] = str(root.resolve())
    if (out / "restorer.ckpt").exists() and not force:
        raise ConfigError(f"{out} already holds a checkpoint; pass --force to overwrite")
    _write_resolved(cfg, out)
    data = load_train_data(root, cfg)
    try:
        res = train_joint(RunConfig.from_dict(cfg), data, out_dir=out)
    except DivergenceError as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    last = res.log.rows[-1]
    print(f"final epoch {last['epoch']}: syn-val {last['syn_psnr']:.2f} dB, real-val {last['real_psnr']:.2f} dB")
    return EXIT_OK


def cmd_eval(cfg: dict, out: Path, force: bool) -> int:
    from .dataset import load_eval_set
    from .trainer import evaluate

    root = _data_root(cfg)
    cfg["data"]["root"] = str(root.resolve())
    ckpt = Path(cfg["eval"]["checkpoint"] or out / "restorer.ckpt")
    if not ckpt.exists():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    cfg["eval"]["checkpoint"] = str(ckpt.resolve())
    _write_resolved(cfg, out)
    rep = evaluate(ckpt, load_eval_set(root, cfg, cfg["eval"]["split"]), cfg["task"])
    rep.to_csv(out / "metrics.csv")
    summary = {"psnr_db": rep.psnr_db, "ssim": rep.ssim, "n_images": len(rep.per_image),
               "y_channel": cfg["task"] == "derain"}
    (out / "metrics_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"PSNR {rep.psnr_db:.3f} dB  SSIM {rep.ssim:.4f}  ({len(rep.per_image)} images)")
    return EXIT_OK


def _probe_images(cfg: dict, role: str, n: int) -> np.ndarray:
    from .dataset import builtin_corpus
    from .degrade import load_images

    p = cfg["probe"]
    size = int(p["size"])
    if p["source"] == "builtin":
        imgs = builtin_corpus(role, n, size, int(cfg["seed"]))
    else:
        sub = Path(p["source"]) / ("train" if role == "syn" else "test")
        imgs = [img[:, :size, :size] for _, img in load_images(sub, size)][:n]
    if int(cfg["model"]["channels"]) == 1:
        imgs = [(0.299 * i[0] + 0.587 * i[1] + 0.114 * i[2])[None] for i in imgs]
    return np.stack(imgs)


def cmd_probe(cfg: dict, out: Path, force: bool) -> int:
    from .diffusion import linear_schedule
    from .probe import corruption_sweep, train_probe_model
    from .trainer import DivergenceError

    p = cfg["probe"]
    _write_resolved(cfg, out)
    s = cfg["adapt"]["schedule"]
    sched = linear_schedule(s["T"], s["beta_lo"], s["beta_hi"])
    train = _probe_images(cfg, "syn", int(p["n_train"]))
    test = _probe_images(cfg, "real", int(p["n_test"]))
    try:
        model, losses = train_probe_model(train, sched, int(p["steps"]), int(p["batch_size"]), float(p["lr"]),
                                          int(p["eps_base"]), int(cfg["seed"]))
    except DivergenceError as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    np.savetxt(out / "probe_loss.csv", losses, fmt="%r", header="loss", comments="")
    res = corruption_sweep(model, test, p["sigmas"], sched, int(p["draws"]), int(cfg["seed"]))
    res.to_csv(out / "sweep.csv")
    if p["plot"]:
        res.plot(out / "sweep.png")
    print(f"spearman(sigma, mse) = {res.spearman():.3f}")
    return EXIT_OK


def cmd_diagnose(cfg: dict, out: Path, force: bool) -> int:
    from .trainer import TrainLog, annotate_stages

    path = out / "train_log.csv"
    if not path.exists():
        raise ConfigError(f"no train_log.csv in {out}")
    tlog = TrainLog.from_csv(path)
    if len(tlog.rows) < 3:
        raise ConfigError("diagnose needs at least 3 epochs of history")
    st = cfg["stage"]
    annotate_stages(tlog, float(st["gap_db"]), int(st["k"]), float(st["grad_ratio"]))
    tlog.to_csv(path)
    _write_resolved(cfg, out)
    stages = [r["stage"] for r in tlog.rows]
    print(f"final stage: {stages[-1]}; stage III reached: {'III' in stages}")
    return EXIT_OK


COMMANDS = {"degrade": cmd_degrade, "train": cmd_train, "eval": cmd_eval, "probe": cmd_probe,
            "diagnose": cmd_diagnose}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    torch.set_num_threads(int(os.environ.get("NADAPT_THREADS", "1")))
    try:
        file_cfg = layer(load_config(args.config) if args.config else {}, *map(load_recipe, args.recipe))
        cfg = resolve(file_cfg, args.override, args.seed)
        return COMMANDS[args.verb](cfg, args.out, args.force)
    except (ConfigError, FileExistsError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
