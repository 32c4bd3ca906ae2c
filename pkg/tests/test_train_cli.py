import csv
import json

import numpy as np
import pytest
import torch

from tqdm_mini import synthdata
from tqdm_mini.cli import main
from tqdm_mini.errors import ConfigError, TrainingDiverged
from tqdm_mini.train import (RunConfig, build_model, build_optimizer, file_sha256, load_checkpoint, lr_factor,
                             save_checkpoint, train)

TINY = dict(iterations=4, warmup_iters=2, batch_size=2, train_count=6, pixel_layers=1, decoder_layers=2,
            checkpoint_every=2)


def tiny(**kw):
    return RunConfig(**{**TINY, **kw})


def test_lr_schedule_piecewise_linear():
    f = [lr_factor(s, 150, 2000) for s in range(2001)]
    assert f[0] == 0 and f[150] == 1.0 and f[2000] == 0
    assert max(f) == f[150]
    d = np.diff(f)
    assert np.allclose(d[:150], 1 / 150) and np.allclose(d[150:], -1 / 1850)
    assert lr_factor(10, 0, 100) == 0.9


def test_optimizer_groups():
    cfg = tiny()
    model = build_model(cfg)
    opt = build_optimizer(model, cfg)
    assert opt.param_groups[0]["lr"] == pytest.approx(cfg.lr * 0.1)
    assert opt.param_groups[1]["lr"] == cfg.lr
    assert all(g["weight_decay"] == 0.05 for g in opt.param_groups)
    trainable = {id(p) for g in opt.param_groups for p in g["params"]}
    assert not any(id(p) in trainable for p in model.text.encoder.parameters())
    assert not any(id(p) in trainable for p in model.reference.parameters())


def test_config_validation():
    with pytest.raises(ConfigError):
        RunConfig(matching="greedy")
    with pytest.raises(ConfigError):
        RunConfig(iterations=10, warmup_iters=20)
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"nonsense": 1})


def test_training_is_deterministic_and_finite(tmp_path):
    cfg = tiny()
    a = train(cfg, tmp_path / "a")
    b = train(cfg, tmp_path / "b")
    assert np.isfinite(a.metrics[0]["total"])
    assert file_sha256(a.metrics_path) == file_sha256(b.metrics_path)
    assert (tmp_path / "a" / "ckpt_000002.pt").exists()
    rows = [json.loads(line) for line in a.metrics_path.read_text().splitlines()]
    assert len(rows) == 4 and {"step", "lr", "bce", "dice", "cls", "reg_L", "reg_VL", "reg_V", "total"} <= set(rows[0])


def test_checkpoint_round_trip(tmp_path):
    cfg = tiny(dtype="float64")
    res = train(cfg, tmp_path)
    model, cfg2, state = load_checkpoint(res.checkpoint)
    assert cfg2 == cfg and state["config_hash"] == cfg.config_hash()
    images = torch.rand(2, 3, 64, 64, dtype=torch.float64)
    with torch.no_grad():
        a, b = res.model(images), model(images)
    assert torch.equal(a.decoder.final_mask, b.decoder.final_mask)
    assert torch.equal(a.decoder.final_class, b.decoder.final_class)


def test_nonfinite_loss_aborts_with_dump(tmp_path):
    cfg = tiny()
    scenes = synthdata.generate_split("train", count=4)
    for s in scenes:
        s.image[:] = np.nan
    with pytest.raises(TrainingDiverged):
        train(cfg, tmp_path, scenes=scenes)
    dumps = list(tmp_path.glob("nonfinite_step*.npz"))
    assert len(dumps) == 1 and "images" in np.load(dumps[0])


def test_checkpoint_has_optimizer_state(tmp_path):
    cfg = tiny()
    model = build_model(cfg)
    opt = build_optimizer(model, cfg)
    p = save_checkpoint(tmp_path / "c.pt", model, cfg, 0, opt)
    state = torch.load(p, weights_only=False)
    assert state["optimizer"] is not None and state["step"] == 0


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_cli_end_to_end(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({**TINY, "train_count": 4}))
    data = tmp_path / "data"
    gen_cfg = tmp_path / "gen.json"
    gen_cfg.write_text(json.dumps({f"{s}_count": 3 for s in synthdata.SPLITS}))
    assert main(["gen-data", "--config", str(gen_cfg), "--out", str(data), "--seed", "1"]) == 0
    rows = synthdata.read_manifest(data / "manifest.jsonl")
    assert len(rows) == 15 and rows[0]["seed"] == 1_000_000
    assert main(["gen-data", "--config", str(gen_cfg), "--out", str(tmp_path / "data2"), "--seed", "1"]) == 0
    for r in rows:
        assert file_sha256(data / r["path_image"]) == file_sha256(tmp_path / "data2" / r["path_image"])

    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg_path), "--seed", "3", "--out", str(run),
                 "--set", f"data_dir={data}", "--set", "use_v_reg=false"]) == 0
    resolved = json.loads((run / "resolved_config.json").read_text())
    assert resolved["config"]["seed"] == 3 and resolved["config"]["use_v_reg"] is False

    ev = tmp_path / "eval"
    assert main(["eval", "--checkpoint", str(run / "final.pt"), "--out", str(ev)]) == 0
    first = (ev / "miou.csv").read_text()
    assert len(read_csv(ev / "miou.csv")) == 4
    assert len(read_csv(ev / "class_iou.csv")) == 4 * 5
    assert main(["eval", "--checkpoint", str(run / "final.pt"), "--out", str(ev)]) == 0
    assert (ev / "miou.csv").read_text() == first

    for kind in ("simmap", "coherence", "pr"):
        assert main(["analyze", "--checkpoint", str(run / "final.pt"), "--kind", kind,
                     "--count", "3", "--anchors", "4", "--out", str(tmp_path / kind)]) == 0
    pr = read_csv(tmp_path / "pr" / "pr_curves.csv")
    assert all(sum(r["class"] == str(k) for r in pr) == 101 for k in range(5))
    grid = np.loadtxt(tmp_path / "simmap" / "simmap_img0_class0.csv", delimiter=",")
    assert grid.min() >= 0 and grid.max() <= 1
    coh = read_csv(tmp_path / "coherence" / "coherence_summary.csv")
    assert all(abs(float(r["stageM_self"]) - 1) < 1e-5 for r in coh)

    ab = tmp_path / "ablate"
    assert main(["ablate", "--config", str(cfg_path), "--out", str(ab), "--variants", "random_queries",
                 "textual_queries", "--seeds", "0", "1", "2", "--count", "2",
                 "--set", "iterations=2", "--set", "warmup_iters=1"]) == 0
    table = read_csv(ab / "ablation.csv")
    assert len(table) == 6
    assert len({r["checkpoint_sha256"] for r in table}) == 6
    assert {r["variant"] for r in table} == {"random_queries", "textual_queries"}


def test_cli_reports_config_errors(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path), "--set", "matching=greedy"]) == 2
    assert "matching" in capsys.readouterr().err
