import csv
import json

import numpy as np
import pytest
from PIL import Image

from smfd import cli
from smfd import degrade as dg
from smfd import metrics as MT
from smfd.maskops import one_hot
from smfd.nets import NetConfig, build_network, forward, init_weights, save_weights
from smfd.rng import derive_seed


def _png(path, arr, mode=None):
    Image.fromarray(np.asarray(arr, dtype=np.uint8), mode=mode).save(path)


@pytest.fixture
def folder(tmp_path):
    src = tmp_path / "in"
    src.mkdir()
    rng = np.random.default_rng(0)
    for i in range(4):
        _png(src / f"img{i:02d}.png", rng.integers(0, 256, (32, 40, 3)))
    return src


def test_degrade_matches_library_and_manifest(folder, tmp_path):
    out = tmp_path / "out"
    assert cli.main(["degrade", "--input", str(folder), "--output", str(out), "--seed", "5"]) == 0
    lines = (out / "manifest.jsonl").read_text().splitlines()
    assert len(lines) == 4
    for i, line in enumerate(lines):
        rec = json.loads(line)
        assert list(rec) == ["file", "seed", "layers", "scale", "noise_sigma"]
        plan = dg.sample_plan(derive_seed(5, i))
        assert rec["seed"] == plan.seed and rec["file"] == f"img{i:02d}.png"
        src = cli.read_rgb(folder / rec["file"])
        expect = np.clip(np.rint(dg.apply_plan(src, plan)), 0, 255)
        np.testing.assert_array_equal(cli.read_rgb(out / rec["file"]), expect)
        np.testing.assert_array_equal(np.rint(cli.replay_record(rec, src)), expect)


def test_degrade_byte_identical_and_worker_independent(folder, tmp_path):
    runs = []
    for name, workers in (("a", 1), ("b", 1), ("c", 2)):
        out = tmp_path / name
        args = ["degrade", "--input", str(folder), "--output", str(out), "--seed", "9",
                "--workers", str(workers)]
        assert cli.main(args) == 0
        runs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    assert runs[0] == runs[1] == runs[2]


def test_degrade_max_layers_and_kernel_set(folder, tmp_path):
    out = tmp_path / "o"
    man = tmp_path / "m.jsonl"
    assert cli.main(["degrade", "--input", str(folder), "--output", str(out), "--seed", "1",
                     "--max-layers", "1", "--kernel-set", "15,21", "--manifest", str(man)]) == 0
    for line in man.read_text().splitlines():
        rec = json.loads(line)
        assert len(rec["layers"]) == 1
        assert all(op["kernel_size"] in (15, 21) for op in rec["layers"][0]["ops"])


def test_degrade_skips_unreadable(folder, tmp_path, capsys):
    (folder / "broken.png").write_bytes(b"not a png")
    out = tmp_path / "o"
    assert cli.main(["degrade", "--input", str(folder), "--output", str(out), "--seed", "1"]) == 0
    assert "broken.png" in capsys.readouterr().err
    assert len((out / "manifest.jsonl").read_text().splitlines()) == 4


def test_degrade_all_fail(tmp_path):
    src = tmp_path / "bad"
    src.mkdir()
    (src / "x.png").write_bytes(b"nope")
    assert cli.main(["degrade", "--input", str(src), "--output", str(tmp_path / "o"),
                     "--seed", "1"]) == 2
    assert cli.main(["degrade", "--input", str(tmp_path / "missing"), "--output",
                     str(tmp_path / "o"), "--seed", "1"]) == 2
    assert cli.main(["degrade", "--input", str(src), "--output", str(tmp_path / "o"),
                     "--seed", "1", "--kernel-set", "4"]) == 2


def test_count_command(capsys):
    assert cli.main(["count", "--json"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["grand_total"]["exact"] == dg.count_plans()


# ---------------------------------------------------------------------------
# metrics


def test_metrics_identical(tmp_path, capsys):
    img = np.random.default_rng(1).integers(0, 256, (24, 24, 3))
    _png(tmp_path / "a.png", img)
    _png(tmp_path / "b.png", img)
    assert cli.main(["metrics", "--ref", str(tmp_path / "a.png"), "--test", str(tmp_path / "b.png")]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["mse"] == 0 and rep["psnr_db"] == "inf" and rep["ssim"] == pytest.approx(1)


def test_metrics_label_masks_match_library(tmp_path, capsys):
    rng = np.random.default_rng(2)
    a, b = rng.integers(0, 5, (16, 16)), rng.integers(0, 5, (16, 16))
    _png(tmp_path / "a.png", a, "L")
    _png(tmp_path / "b.png", b, "L")
    assert cli.main(["metrics", "--ref", str(tmp_path / "a.png"), "--test", str(tmp_path / "b.png"),
                     "--classes", "5"]) == 0
    rep = json.loads(capsys.readouterr().out)
    d, _, j = MT.dice_jaccard(one_hot(b, 5), one_hot(a, 5))
    assert rep["dice"] == d and rep["jaccard"] == j
    assert rep["mse"] == MT.mse(a, b)


def test_metrics_errors(tmp_path, capsys):
    _png(tmp_path / "a.png", np.zeros((16, 16, 3)))
    _png(tmp_path / "b.png", np.zeros((20, 16, 3)))
    args = ["metrics", "--ref", str(tmp_path / "a.png"), "--test", str(tmp_path / "b.png")]
    assert cli.main(args) == 2
    assert "extent mismatch" in capsys.readouterr().err
    assert cli.main(args + ["--resize"]) == 0
    assert cli.main(["metrics", "--ref", str(tmp_path / "a.png"), "--test", str(tmp_path / "zz.png")]) == 2
    assert "not found" in capsys.readouterr().err


def test_prepare(tmp_path):
    rng = np.random.default_rng(3)
    _png(tmp_path / "s.png", rng.integers(0, 256, (40, 40, 3)))
    _png(tmp_path / "b.png", rng.integers(0, 256, (40, 40, 3)))
    _png(tmp_path / "m.png", rng.integers(0, 19, (40, 40)), "L")
    out = tmp_path / "pair.npz"
    assert cli.main(["prepare", "--sharp", str(tmp_path / "s.png"), "--blurry", str(tmp_path / "b.png"),
                     "--mask", str(tmp_path / "m.png"), "--size", "32", "--out", str(out)]) == 0
    z = np.load(out)
    assert z["sharp"].shape == (32, 32, 3) and z["mask_onehot"].shape == (32, 32, 5)
    _png(tmp_path / "m.png", np.full((40, 40), 30), "L")
    assert cli.main(["prepare", "--sharp", str(tmp_path / "s.png"), "--blurry", str(tmp_path / "b.png"),
                     "--mask", str(tmp_path / "m.png"), "--out", str(out)]) == 2


# ---------------------------------------------------------------------------
# networks


def test_net_summary_default(capsys):
    assert cli.main(["net", "summary", "--kind", "mask_generator"]) == 0
    out = capsys.readouterr().out
    assert "5,416,159" in out and "trainable" in out and "bottleneck" in out


def test_net_summary_json_matches_param_count(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(NetConfig(base_channels=8, input_size=64).to_json())
    assert cli.main(["net", "summary", "--kind", "smfd_unet", "--config", str(cfg), "--json"]) == 0
    rep = json.loads(capsys.readouterr().out)
    from smfd.nets import param_count
    pc = param_count(build_network("smfd_unet", NetConfig.from_json(cfg)))
    assert (rep["total"], rep["trainable"], rep["non_trainable"]) == tuple(pc)
    assert rep["stages"]["output"] == [1, 64, 64, 3]


def test_net_forward_zero_weights(tmp_path):
    cfg = NetConfig(base_channels=4, input_size=32)
    (tmp_path / "c.json").write_text(cfg.to_json())
    common = ["--config", str(tmp_path / "c.json")]
    assert cli.main(["net", "init", "--kind", "smfd_unet", "--zeros", "--out",
                     str(tmp_path / "z.w")] + common) == 0
    _png(tmp_path / "img.png", np.random.default_rng(0).integers(0, 256, (48, 48, 3)))
    _png(tmp_path / "mask.png", np.random.default_rng(0).integers(0, 19, (48, 48)), "L")
    assert cli.main(["net", "forward", "--kind", "smfd_unet", "--weights", str(tmp_path / "z.w"),
                     "--image", str(tmp_path / "img.png"), "--mask", str(tmp_path / "mask.png"),
                     "--out", str(tmp_path / "o.png")] + common) == 0
    out = cli.read_rgb(tmp_path / "o.png")
    assert out.shape == (32, 32, 3) and np.all(out == round(0.1 * 255))


def test_net_forward_mask_generator_matches_library(tmp_path):
    cfg = NetConfig(base_channels=4, input_size=32)
    (tmp_path / "c.json").write_text(cfg.to_json())
    g = build_network("mask_generator", cfg)
    w = init_weights(g, 4)
    save_weights(w, tmp_path / "w")
    img = np.random.default_rng(1).integers(0, 256, (32, 32, 3))
    _png(tmp_path / "img.png", img)
    assert cli.main(["net", "forward", "--kind", "mask_generator", "--config", str(tmp_path / "c.json"),
                     "--weights", str(tmp_path / "w"), "--image", str(tmp_path / "img.png"),
                     "--out", str(tmp_path / "m.png")]) == 0
    gray = (img / 255.0) @ np.array([0.299, 0.587, 0.114])
    expect = forward(g, w, {"image": gray[None, ..., None]})[0].argmax(-1)
    np.testing.assert_array_equal(np.asarray(Image.open(tmp_path / "m.png")), expect)


def test_net_forward_incompatible_weights_exit_3(tmp_path, capsys):
    small = NetConfig(base_channels=4, input_size=32)
    (tmp_path / "c.json").write_text(small.to_json())
    wrong = init_weights(build_network("mask_generator", NetConfig(base_channels=8, input_size=32)), 0)
    save_weights(wrong, tmp_path / "w")
    _png(tmp_path / "img.png", np.zeros((32, 32, 3)))
    code = cli.main(["net", "forward", "--kind", "mask_generator", "--config", str(tmp_path / "c.json"),
                     "--weights", str(tmp_path / "w"), "--image", str(tmp_path / "img.png"),
                     "--out", str(tmp_path / "m.png")])
    assert code == 3
    assert "node enc0" in capsys.readouterr().err
    (tmp_path / "w").write_bytes(b"garbage")
    assert cli.main(["net", "forward", "--kind", "mask_generator", "--config", str(tmp_path / "c.json"),
                     "--weights", str(tmp_path / "w"), "--image", str(tmp_path / "img.png"),
                     "--out", str(tmp_path / "m.png")]) == 3


def test_net_bad_config_exit_2(tmp_path):
    (tmp_path / "c.json").write_text('{"base_channel": 4}')
    assert cli.main(["net", "summary", "--kind", "smfd_unet", "--config", str(tmp_path / "c.json")]) == 2
    assert cli.main(["net", "summary", "--kind", "smfd_unet", "--config", str(tmp_path / "nope.json")]) == 2


def test_net_train_smoke_deterministic(tmp_path):
    cfg = NetConfig(base_channels=4, input_size=16, stages=2)
    (tmp_path / "c.json").write_text(cfg.to_json())
    traces = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert cli.main(["net", "train-smoke", "--kind", "smfd_unet", "--config", str(tmp_path / "c.json"),
                         "--seed", "7", "--steps", "3", "--pairs", "2", "--size", "16",
                         "--out", str(out)]) == 0
        traces.append((out / "trace.csv").read_bytes())
        assert (out / "best.smfdw").exists()
    assert traces[0] == traces[1]
    rows = list(csv.reader(traces[0].decode().splitlines()))
    assert rows[0] == ["step", "loss", "metric"] and len(rows) == 4
