import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from q2l.cli import build_parser, main
from q2l.data import read_pgm, read_ppm
from q2l.model import ModelConfig, init_model, save_checkpoint

TINY_FLAGS = ["--patch-size", "4", "--d-backbone", "8", "--d-model", "8", "--heads", "2", "--d-ff", "16",
              "--layers", "1", "--convs", "1", "--stem-channels", "4", "--batch-size", "16", "--lr", "1e-3"]


def tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "data"
    assert main(["generate-data", "--out", str(root), "--seed", "7", "--n-train", "48", "--n-test", "24",
                 "--image-size", "16", "--small-area", "16", "--medium-area", "36", "--max-objects", "3"]) == 0
    return root


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--data", str(dataset), "--out", str(out), "--epochs", "2", *TINY_FLAGS]) == 0
    return out


def test_generate_is_deterministic(dataset, tmp_path):
    again = tmp_path / "again"
    main(["generate-data", "--out", str(again), "--seed", "7", "--n-train", "48", "--n-test", "24",
          "--image-size", "16", "--small-area", "16", "--medium-area", "36", "--max-objects", "3"])
    assert tree_bytes(again) == tree_bytes(dataset)


def test_generate_meta_classes(tmp_path):
    assert main(["generate-data", "--out", str(tmp_path), "--classes", "12", "--shapes", "3", "--colors", "4",
                 "--n-train", "200", "--n-test", "0"]) == 0
    assert json.loads((tmp_path / "train" / "meta.json").read_text())["K"] == 12


def test_generate_usage_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["generate-data", "--seed", "1"])
    assert exc.value.code == 2
    assert main(["generate-data", "--out", str(tmp_path), "--classes", "20"]) == 2


def test_help_lists_flags():
    parser = build_parser()
    sub = parser._subparsers._group_actions[0].choices
    assert set(sub) == {"generate-data", "train", "eval", "infer", "export-attn"}
    text = sub["export-attn"].format_help()
    for flag in ("--checkpoint", "--image", "--label", "--out", "--attn-scale", "--upsample"):
        assert flag in text


def test_unknown_flag_fails_fast(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--data", str(tmp_path), "--frobnicate", "1"])
    assert exc.value.code == 2


def test_train_outputs(trained):
    for name in ("best.ckpt", "best_ema.ckpt", "last.ckpt", "train_log.csv", "run_config.json"):
        assert (trained / name).exists()
    rows = list(csv.reader(open(trained / "train_log.csv")))
    assert rows[0] == ["epoch", "step", "lr", "train_loss", "val_mAP", "val_OF1", "val_CF1"]


def test_invalid_config_key(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"epochs": 1, "depth": 3}))
    assert main(["train", "--config", str(cfg), "--dump-config"]) == 2
    assert "depth" in capsys.readouterr().err


def test_invalid_config_value(dataset, tmp_path):
    assert main(["train", "--data", str(dataset), "--out", str(tmp_path), "--d-model", "10"]) == 2


def test_config_dump_round_trip(tmp_path, capsys):
    assert main(["train", "--dump-config", "--epochs", "3", "--gamma-neg", "2", "--stem-channels", ""]) == 0
    dumped = capsys.readouterr().out
    cfg = tmp_path / "c.json"
    cfg.write_text(dumped)
    assert main(["train", "--config", str(cfg), "--dump-config"]) == 0
    assert json.loads(capsys.readouterr().out) == json.loads(dumped)
    assert json.loads(dumped)["stem_channels"] == []


def test_flags_override_file(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"epochs": 3, "lr": 0.5}))
    main(["train", "--config", str(cfg), "--epochs", "9", "--dump-config"])
    merged = json.loads(capsys.readouterr().out)
    assert merged["epochs"] == 9 and merged["lr"] == 0.5


def test_gamma_zero_is_bce_training(dataset, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    main(["train", "--data", str(dataset), "--out", str(a), "--epochs", "1", "--gamma-pos", "0",
          "--gamma-neg", "0", *TINY_FLAGS])
    cfg = tmp_path / "bce.json"
    cfg.write_text(json.dumps({"gamma_pos": 0.0, "gamma_neg": 0.0}))
    main(["train", "--config", str(cfg), "--data", str(dataset), "--out", str(b), "--epochs", "1", *TINY_FLAGS])
    assert (a / "train_log.csv").read_text() == (b / "train_log.csv").read_text()
    assert (a / "last.ckpt").read_bytes() == (b / "last.ckpt").read_bytes()


def test_eval_perfect_oracle(dataset, tmp_path, capsys):
    meta_k = json.loads((dataset / "test" / "meta.json").read_text())["K"]
    lines = [json.loads(s) for s in (dataset / "test" / "labels.jsonl").read_text().splitlines()]
    pred = tmp_path / "p.csv"
    with open(pred, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id"] + [f"p_{k}" for k in range(meta_k)])
        for obj in lines:
            w.writerow([obj["id"]] + [1.0 if k in obj["labels"] else 0.0 for k in range(meta_k)])
    assert main(["eval", "--data", str(dataset / "test"), "--predictions", str(pred), "--out", str(tmp_path)]) == 0
    report = dict(line.split("=", 1) for line in (tmp_path / "report.txt").read_text().splitlines())
    assert float(report["mAP"]) == 1.0 and float(report["OF1"]) == 1.0
    assert (tmp_path / "per_category_ap.csv").exists()


def _report(text):
    return dict(line.split("=", 1) for line in text.splitlines() if "=" in line)


def test_eval_top_k_and_buckets(dataset, trained, capsys):
    assert main(["eval", "--data", str(dataset), "--checkpoint", str(trained / "best.ckpt"), "--top-k", "3",
                 "--by-size"]) == 0
    rep = _report(capsys.readouterr().out)
    assert rep["mode"] == "top_k" and rep["top_k"] == "3"
    for key in ("OP", "OR", "OF1", "CP", "CR", "CF1", "mAP_small", "mAP_medium", "mAP_large"):
        assert key in rep
    parts = sum(int(rep[f"pairs_{b}"]) for b in ("small", "medium", "large"))
    assert parts == int(rep["positive_pairs"])


def test_eval_rejects_bad_predictions(dataset, tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("id,p_0\n0,0.5\n")
    assert main(["eval", "--data", str(dataset), "--predictions", str(bad)]) == 2


def test_infer_matches_eval_predictions(dataset, trained, tmp_path):
    out = tmp_path / "p.csv"
    assert main(["infer", "--checkpoint", str(trained / "best.ckpt"), "--data", str(dataset / "test"),
                 "--out", str(out)]) == 0
    rows = list(csv.reader(open(out)))
    assert rows[0][0] == "id" and len(rows) == 25
    assert main(["eval", "--data", str(dataset), "--predictions", str(out)]) == 0
    img = dataset / "test" / "images" / "000000.ppm"
    single = tmp_path / "one.csv"
    main(["infer", "--checkpoint", str(trained / "best.ckpt"), "--images", str(img), "--out", str(single)])
    assert list(csv.reader(open(single)))[1][1:] == rows[1][1:]


def test_missing_checkpoint_is_runtime_error(dataset, tmp_path):
    assert main(["infer", "--checkpoint", str(tmp_path / "nope.ckpt"), "--data", str(dataset / "test")]) == 1


def _uniform_checkpoint(tmp_path, grid=6):
    cfg = ModelConfig(n_classes=3, image_size=48, patch_size=8, d_backbone=8, d_model=8, n_heads=2, d_ff=16,
                      n_layers=1, n_convs=0, stem_channels=())
    model = init_model(cfg, 0)
    # zero query/key projections → equal logits → uniform attention
    for layer in model.decoder_layers:
        layer.cross_attn.w_q.data[:] = 0
        layer.cross_attn.w_k.data[:] = 0
    path = tmp_path / "u.ckpt"
    save_checkpoint(path, model)
    img = tmp_path / "x.ppm"
    from q2l.data import write_ppm
    write_ppm(img, np.random.default_rng(0).integers(0, 256, size=(48, 48, 3), dtype=np.uint8))
    return path, img


def test_export_uniform_attention(tmp_path):
    ckpt, img = _uniform_checkpoint(tmp_path)
    out = tmp_path / "maps"
    assert main(["export-attn", "--checkpoint", str(ckpt), "--image", str(img), "--label", "1",
                 "--out", str(out)]) == 0
    for name in ("label01_head0.pgm", "label01_head1.pgm", "label01_mean.pgm"):
        m = read_pgm(out / name)
        assert m.shape == (48, 48)
        assert np.all(m == 118)


def test_export_all_labels_and_mean(tmp_path):
    ckpt, img = _uniform_checkpoint(tmp_path)
    out = tmp_path / "maps"
    assert main(["export-attn", "--checkpoint", str(ckpt), "--image", str(img), "--out", str(out),
                 "--upsample", "bilinear"]) == 0
    assert len(list(out.glob("*.pgm"))) == 3 * 3
    assert read_ppm(img).shape == (48, 48, 3)


def test_export_bad_label(tmp_path):
    ckpt, img = _uniform_checkpoint(tmp_path)
    assert main(["export-attn", "--checkpoint", str(ckpt), "--image", str(img), "--label", "3",
                 "--out", str(tmp_path)]) == 2


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "q2l.cli", "generate-data"], capture_output=True, text=True)
    assert res.returncode == 2 and "--out" in res.stderr
    res = subprocess.run([sys.executable, "-m", "q2l.cli", "eval", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "--top-k" in res.stdout and "--by-size" in res.stdout
