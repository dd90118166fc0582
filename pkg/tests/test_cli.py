import csv
import json

import numpy as np
import pytest

from nadapt.cli import EXIT_CONFIG, main
from nadapt.config import list_recipes, load_recipe, resolve
from nadapt.imaging import save_image

# a small corpus and a two-epoch run keep every CLI round trip to seconds
TINY = ["degrade.source=builtin", "degrade.builtin.size=32", "degrade.builtin.syn=10", "degrade.builtin.real=6", "degrade.builtin.pool=4",
        "data.patch=32", "train.epochs=2", "train.batch_size=4", "model.eps_base=8"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    assert main(["degrade", "--out", str(root), "--seed", "3", "--override", *TINY]) == 0
    return root


def test_degrade_layout(dataset):
    assert len(list((dataset / "syn_clean").glob("*.png"))) == 10
    assert len(list((dataset / "real_degraded").glob("*.png"))) == 6
    assert len(list((dataset / "real_gt_eval").glob("*.png"))) == 6
    assert (dataset / "resolved_config.json").exists()


def test_degrade_reproducible(dataset, tmp_path):
    assert main(["degrade", "--out", str(tmp_path), "--seed", "3", "--override", *TINY]) == 0
    for sub in ("syn_clean", "real_degraded", "clean_pool"):
        for a in sorted((dataset / sub).glob("*.png")):
            assert a.read_bytes() == (tmp_path / sub / a.name).read_bytes()


def test_degrade_refuses_to_overwrite(dataset):
    assert main(["degrade", "--out", str(dataset), "--override", *TINY]) == EXIT_CONFIG


def test_degrade_from_folder(tmp_path):
    src = tmp_path / "src"
    src.mkdir()
    rng = np.random.default_rng(0)
    for i in range(10):
        save_image(src / f"im{i}.png", rng.uniform(0, 1, (3, 40, 40)).astype(np.float32))
    out = tmp_path / "out"
    rc = main(["degrade", "--out", str(out), "--override", f'degrade.source="{src}"', "data.patch=32",
               "degrade.log_degradations=true"])
    assert rc == 0
    assert len(list((out / "syn_clean").glob("*.png"))) == 10
    assert len(list((out / "real_degraded").glob("*.png"))) == 10
    assert (out / "degradations.jsonl").exists()


def test_empty_source_is_config_error(tmp_path):
    (tmp_path / "empty").mkdir()
    rc = main(["degrade", "--out", str(tmp_path / "o"), "--override", f'degrade.source="{tmp_path / "empty"}"'])
    assert rc == EXIT_CONFIG


def test_bad_overrides(tmp_path, capsys):
    assert main(["degrade", "--out", str(tmp_path), "--override", "train.lr=1", "train.lr=2"]) == EXIT_CONFIG
    assert main(["degrade", "--out", str(tmp_path), "--override", "train.nope=1"]) == EXIT_CONFIG
    assert main(["train", "--out", str(tmp_path), "--override", "data.root=null"]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_train_eval_diagnose_and_rerun(dataset, tmp_path):
    run = tmp_path / "run"
    common = ["--override", f'data.root="{dataset}"', *TINY]
    assert main(["train", "--out", str(run), "--seed", "1", *common]) == 0
    log_rows = _rows(run / "train_log.csv")
    assert len(log_rows) == 2 and float(log_rows[0]["lambda_dif"]) == 0.0
    assert main(["train", "--out", str(run), *common]) == EXIT_CONFIG
    train_cfg = tmp_path / "train_config.json"
    train_cfg.write_bytes((run / "resolved_config.json").read_bytes())

    assert main(["eval", "--out", str(run), *common]) == 0
    metrics = _rows(run / "metrics.csv")
    # the real split is evaluated on its held-out quarter: 2 of 6 images
    assert len(metrics) == 2 and set(metrics[0]) == {"image_id", "psnr_db", "ssim"}
    summary = json.loads((run / "metrics_summary.json").read_text())
    assert summary["n_images"] == 2

    # rerun train from its own resolved config into a fresh directory
    again = tmp_path / "again"
    assert main(["train", "--out", str(again), "--config", str(train_cfg)]) == 0
    assert (run / "train_log.csv").read_bytes() == (again / "train_log.csv").read_bytes()
    assert main(["eval", "--out", str(again), "--config", str(run / "resolved_config.json")]) == 0
    assert (run / "metrics.csv").read_bytes() == (again / "metrics.csv").read_bytes()

    assert main(["diagnose", "--out", str(run)]) == EXIT_CONFIG  # two epochs is too short


def test_beta_zero_gives_zero_lambda(dataset, tmp_path):
    rc = main(["train", "--out", str(tmp_path), "--override", f'data.root="{dataset}"', 
               *[o for o in TINY if not o.startswith("train.epochs")], "train.epochs=3", "lambda.beta=0"])
    assert rc == 0
    assert all(float(r["lambda_dif"]) == 0.0 for r in _rows(tmp_path / "train_log.csv"))
    assert main(["diagnose", "--out", str(tmp_path)]) == 0
    assert [r["stage"] for r in _rows(tmp_path / "train_log.csv")][:2] == ["", ""]


def test_data_root_from_environment(dataset, tmp_path, monkeypatch):
    monkeypatch.setenv("NADAPT_DATA_ROOT", str(dataset))
    assert main(["train", "--out", str(tmp_path), "--recipe", "ablation_a", "--override", *TINY]) == 0
    cfg = json.loads((tmp_path / "resolved_config.json").read_text())
    assert cfg["adapt"]["enabled"] is False and cfg["data"]["root"] == str(dataset.resolve())


def test_probe_command(tmp_path):
    rc = main(["probe", "--out", str(tmp_path), "--override", "probe.n_train=16", "probe.n_test=8", "probe.steps=20",
               "probe.draws=1", "probe.size=16", "probe.batch_size=4"])
    assert rc == 0
    rows = _rows(tmp_path / "sweep.csv")
    assert [float(r["sigma"]) for r in rows] == list(range(0, 81, 10))
    assert (tmp_path / "sweep.png").exists() and (tmp_path / "probe_loss.csv").exists()
    first = (tmp_path / "sweep.csv").read_bytes()
    again = tmp_path / "again"
    assert main(["probe", "--out", str(again), "--config", str(tmp_path / "resolved_config.json")]) == 0
    assert (again / "sweep.csv").read_bytes() == first


def test_ablation_recipes():
    names = [f"ablation_{k}" for k in "abcdef"]
    assert set(names) <= set(list_recipes())
    cfgs = {n[-1]: resolve(load_recipe(n)) for n in names}
    assert cfgs["a"]["adapt"]["enabled"] is False
    assert cfgs["b"]["adapt"]["t_range"] == [1, 100]
    assert cfgs["c"]["adapt"]["t_range"] == [900, 1000]
    flags = {k: (c["adapt"]["channel_shuffle"], c["adapt"]["residual_swap"]) for k, c in cfgs.items() if k != "a"}
    assert flags == {"b": (False, False), "c": (False, False), "d": (False, False), "e": (True, False),
                     "f": (True, True)}
    assert all(c["adapt"]["t_range"] == [1, 1000] for k, c in cfgs.items() if k in "def")
