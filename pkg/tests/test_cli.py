import json
import os

import numpy as np
import pytest

from bcct.cli import dispatch
from bcct.checkpoint import load_checkpoint
from bcct.pnm import read_pgm, read_ppm

DATA_ARGS = None


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One tiny pipeline shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    data = str(root / "data")
    cfg = str(root / "cfg.json")
    with open(cfg, "w") as f:
        json.dump({"pretrain_epochs": 2, "bc_epochs": 2, "joint_epochs": 1,
                   "batch_size": 8}, f)
    assert dispatch(["gen-data", "--seed", "3", "--classes", "4", "--train", "24",
                     "--test", "8", "--background", "6", "--size", "32x32",
                     "--out", data]) == 0
    pre = str(root / "pre")
    assert dispatch(["pretrain", "--config", cfg, "--seed", "3", "--data", data,
                     "--out", pre]) == 0
    bc = str(root / "bc")
    assert dispatch(["train-bc", "--config", cfg, "--seed", "3", "--data", data,
                     "--out", bc, "--backbone", f"{pre}/backbone.ckpt"]) == 0
    ct = str(root / "ct")
    assert dispatch(["train", "--config", cfg, "--seed", "3", "--data", data,
                     "--out", ct, "--backbone", f"{pre}/backbone.ckpt",
                     "--bc", f"{bc}/bc.ckpt"]) == 0
    return {"root": root, "data": data, "cfg": cfg, "pre": pre, "bc": bc, "ct": ct}


def test_unknown_subcommand_exits_1(capsys):
    assert dispatch(["frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err


def test_missing_required_flag_named(capsys):
    assert dispatch(["eval", "--data", "x", "--out", "y"]) == 1
    err = capsys.readouterr().err
    assert "--checkpoint" in err


def test_no_subcommand_exits_1(capsys):
    assert dispatch([]) == 1


def test_bad_config_key_exits_1(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text('{"detla": 0.8}')
    assert dispatch(["pretrain", "--config", str(cfg), "--data", "x", "--out",
                     str(tmp_path / "o")]) == 1
    assert "detla" in capsys.readouterr().err


def test_missing_checkpoint_file_exits_2(pipeline, capsys):
    assert dispatch(["eval", "--data", pipeline["data"], "--out",
                     str(pipeline["root"] / "ev-missing"),
                     "--checkpoint", "/nonexistent.ckpt"]) == 2


def test_gen_data_layout(pipeline):
    data = pipeline["data"]
    for split in ("train", "test", "background"):
        assert os.path.exists(os.path.join(data, f"{split}.jsonl"))
        assert os.path.isdir(os.path.join(data, split))
    meta = json.load(open(os.path.join(data, "meta.json")))
    assert meta["n_classes"] == 4
    assert len(meta["channel_mean"]) == 3
    first = json.loads(open(os.path.join(data, "train.jsonl")).readline())
    assert set(first) == {"file", "label", "background", "box"}
    img = read_ppm(os.path.join(data, first["file"]))
    assert img.shape == (3, 32, 32)


def test_checkpoints_carry_canonical_names(pipeline):
    backbone = load_checkpoint(f"{pipeline['pre']}/backbone.ckpt")
    assert set(backbone) == {f"backbone.conv{i}.{k}" for i in range(1, 5)
                             for k in ("weight", "bias")}
    bc = load_checkpoint(f"{pipeline['bc']}/bc.ckpt")
    assert "bc.fc.weight" in bc and "bc.fc.bias" in bc
    ct = load_checkpoint(f"{pipeline['ct']}/ct.ckpt")
    for i in range(1, 4):
        assert f"head.conv{i}.weight" in ct and f"cam.conv{i}.weight" in ct


def test_run_manifests_written_and_not_overwritten(pipeline):
    man_path = os.path.join(pipeline["pre"], "run_manifest.json")
    man = json.load(open(man_path))
    assert man["command"] == "pretrain"
    assert man["seed"] == 3
    assert man["tool_version"]
    assert man["config"]["pretrain_epochs"] == 2
    assert "backbone.ckpt" in man["outputs"]
    assert len(man["input_hash"]) == 40

    # rerun into the same --out lands in a suffixed sibling
    rc = dispatch(["pretrain", "--config", pipeline["cfg"], "--seed", "3",
                   "--data", pipeline["data"], "--out", pipeline["pre"]])
    assert rc == 0
    assert os.path.exists(f"{pipeline['pre']}-2/run_manifest.json")
    assert json.load(open(man_path)) == man


def test_eval_writes_metrics_and_records(pipeline):
    out = str(pipeline["root"] / "ev")
    rc = dispatch(["eval", "--config", pipeline["cfg"], "--seed", "3",
                   "--data", pipeline["data"], "--out", out,
                   "--checkpoint", f"{pipeline['ct']}/ct.ckpt",
                   "--bc-checkpoint", f"{pipeline['bc']}/bc.ckpt"])
    assert rc == 0
    metrics = json.load(open(os.path.join(out, "metrics.json")))
    assert set(metrics) == {"top1_err", "top5_err", "bcstar_err", "n", "tau", "seed"}
    assert metrics["n"] == 8
    assert 0.0 <= metrics["top5_err"] <= metrics["top1_err"] <= 100.0
    assert metrics["tau"] == 0.8
    records = [json.loads(l) for l in open(os.path.join(out, "records.jsonl"))]
    assert len(records) == 8
    assert all(len(r["top5"]) == 4 for r in records)  # only 4 classes


def test_sweep_rows_and_rerun_identical(pipeline):
    out = str(pipeline["root"] / "sw")
    args = ["sweep", "--config", pipeline["cfg"], "--seed", "3",
            "--data", pipeline["data"], "--out", out,
            "--checkpoint", f"{pipeline['ct']}/ct.ckpt",
            "--deltas", "0.7,0.75,0.8,0.85,0.9"]
    assert dispatch(args) == 0
    rows = json.load(open(os.path.join(out, "sweep.json")))
    assert [r["delta"] for r in rows] == [0.7, 0.75, 0.8, 0.85, 0.9]
    assert all(0.0 <= r["top1_err"] <= 100.0 for r in rows)
    assert dispatch(args) == 0  # lands in out-2
    rows2 = json.load(open(os.path.join(f"{out}-2", "sweep.json")))
    assert rows == rows2


def test_render_writes_overlays_and_masks(pipeline):
    out = str(pipeline["root"] / "rn")
    rc = dispatch(["render", "--config", pipeline["cfg"], "--seed", "3",
                   "--data", pipeline["data"], "--out", out,
                   "--checkpoint", f"{pipeline['ct']}/ct.ckpt",
                   "--bc-checkpoint", f"{pipeline['bc']}/bc.ckpt",
                   "--count", "2"])
    assert rc == 0
    files = sorted(os.listdir(out))
    overlays = [f for f in files if f.endswith(".overlay.ppm")]
    masks = [f for f in files if f.endswith(".mask.pgm")]
    grads = [f for f in files if f.endswith(".gradmap.pgm")]
    assert len(overlays) == 2 and len(masks) == 2 and len(grads) == 2
    m = read_pgm(os.path.join(out, masks[0]))
    assert set(np.unique(m)) <= {0, 255}


def test_selftest_passes(capsys):
    assert dispatch(["selftest"]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "FAIL" not in out


def test_help_lists_flags_for_every_subcommand(capsys):
    for cmd in ("gen-data", "pretrain", "train-bc", "train", "eval", "sweep",
                "render", "selftest"):
        rc = dispatch([cmd, "--help"])
        assert rc == 0
        out = capsys.readouterr().out
        assert "--seed" in out
        if cmd not in ("selftest", "gen-data"):
            assert "--threads" in out and "default" in out
