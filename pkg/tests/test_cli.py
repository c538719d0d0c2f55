import json

import numpy as np
import pytest
import torch
import yaml

from m2gan.cli import main
from m2gan.config import load_config, to_dict
from m2gan.data import load_image, procedural_scene, save_image
from m2gan.training import Trainer
from toys import tiny_cfg


@pytest.fixture
def clean_dir(tmp_path):
    d = tmp_path / "clean"
    d.mkdir()
    for i in range(10):
        save_image(d / f"img{i:02d}.png", procedural_scene(24, 32, i))
    return d


@pytest.fixture
def tiny_yaml(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(to_dict(tiny_cfg(epochs=2))))
    return path


def _tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file() and p.suffix == ".png"}


def _synth(tmp_path, clean_dir, name, *extra):
    out = tmp_path / name
    assert main(["synthesize", "--clean-dir", str(clean_dir), str(out), "--seed", "4",
                 "--set", "synthesis.drop_radius=[2,5]", *extra]) == 0
    return out


# -- synthesize -------------------------------------------------------------------------

def test_synthesize_counts_and_reproducible(tmp_path, clean_dir, capsys):
    a = _synth(tmp_path, clean_dir, "a")
    assert "wrote 10 pairs" in capsys.readouterr().out
    manifest = json.loads((a / "manifest.json").read_text())
    assert manifest["n_pairs"] == 10
    b = _synth(tmp_path, clean_dir, "b")
    assert _tree_bytes(a) == _tree_bytes(b)
    assert _tree_bytes(a / "rain") != _tree_bytes(a / "gt")


def test_synthesize_zero_drops_byte_identical(tmp_path, clean_dir):
    out = _synth(tmp_path, clean_dir, "z", "--set", "synthesis.drop_count=[0,0]")
    for p in sorted((out / "gt").iterdir()):
        assert (out / "rain" / p.name).read_bytes() == p.read_bytes()


def test_synthesize_unreadable_inputs(tmp_path):
    d = tmp_path / "bad"
    d.mkdir()
    (d / "broken.png").write_bytes(b"not an image")
    assert main(["synthesize", "--clean-dir", str(d), str(tmp_path / "out")]) == 1


def test_synthesize_procedural(tmp_path):
    assert main(["synthesize", "--procedural", "3", "--size", "32x40", str(tmp_path / "p")]) == 0
    assert load_image(tmp_path / "p" / "gt" / "scene_0000.png").shape == (32, 40, 3)


# -- train / derain ---------------------------------------------------------------------------

@pytest.fixture
def dataset(tmp_path):
    out = tmp_path / "data"
    assert main(["synthesize", "--procedural", "4", "--size", "16x16", str(out),
                 "--set", "synthesis.drop_radius=[2,4]"]) == 0
    return out


def test_train_one_epoch_one_checkpoint(tmp_path, dataset, tiny_yaml):
    run = tmp_path / "run"
    assert main(["train", str(dataset), str(run), "--config", str(tiny_yaml), "--set", "train.epochs=1",
                 "--ablation", "no-seg"]) == 0
    assert [p.name for p in run.glob("*.pt")] == ["checkpoint_e0001.pt"]
    resolved = yaml.safe_load((run / "config.yaml").read_text())
    assert resolved["train"]["ablation"] == "no-seg"
    header, *rows = (run / "loss_log.csv").read_text().splitlines()
    assert rows and all(r.split(",")[header.split(",").index("d_seg")] == "" for r in rows)


def test_train_resume_continues_lr_trace(tmp_path, dataset, tiny_yaml):
    full, split = tmp_path / "full", tmp_path / "split"
    assert main(["train", str(dataset), str(full), "--config", str(tiny_yaml)]) == 0
    # stop the split run after one of its two epochs by hand, then resume
    assert main(["train", str(dataset), str(split), "--config", str(tiny_yaml)]) == 0
    (split / "checkpoint_e0002.pt").unlink()
    lines = (split / "loss_log.csv").read_text().splitlines()
    (split / "loss_log.csv").write_text("\n".join(lines[:3]) + "\n")
    assert main(["train", str(dataset), str(split), "--resume"]) == 0
    assert (full / "loss_log.csv").read_text() == (split / "loss_log.csv").read_text()


@pytest.fixture
def identity_checkpoint(tmp_path, dataset, tiny_yaml):
    # a fresh model has a zero head, so a checkpoint saved before any step is the identity
    run = tmp_path / "idrun"
    run.mkdir()
    return Trainer(load_config(tiny_yaml)).save_checkpoint(run / "checkpoint_e0000.pt")


def test_derain_zero_residual_is_identity(tmp_path, dataset, identity_checkpoint):
    out = tmp_path / "derained"
    assert main(["derain", str(identity_checkpoint), str(dataset / "rain"), str(out)]) == 0
    for p in sorted((dataset / "rain").iterdir()):
        assert (out / p.name).read_bytes() == p.read_bytes()


def test_derain_stages_and_maps(tmp_path, dataset, identity_checkpoint):
    out = tmp_path / "maps"
    assert main(["derain", str(identity_checkpoint), str(dataset / "rain"), str(out),
                 "--stages", "1", "--dump-maps", "--all-stages"]) == 0
    names = sorted(p.name for p in out.iterdir())
    assert len([n for n in names if "_rainmap" in n]) == 4
    assert len([n for n in names if "_stage" in n]) == 4
    assert not any("_stage2" in n for n in names)
    out3 = tmp_path / "maps3"
    assert main(["derain", str(identity_checkpoint), str(dataset / "rain"), str(out3), "--stages", "2",
                 "--dump-maps"]) == 0
    assert len(list(out3.glob("*_rainmap*.png"))) == 8


def test_derain_bad_checkpoint_version(tmp_path, dataset, identity_checkpoint, capsys):
    blob = torch.load(identity_checkpoint, weights_only=False)
    blob["manifest"]["format_version"] = 99
    torch.save(blob, identity_checkpoint)
    assert main(["derain", str(identity_checkpoint), str(dataset / "rain"), str(tmp_path / "o")]) == 1
    assert "99" in capsys.readouterr().err


# -- evaluate ---------------------------------------------------------------------------------

def test_evaluate_identity_and_report(tmp_path, dataset, capsys):
    rep_dir = tmp_path / "rep"
    assert main(["evaluate", str(dataset / "gt"), str(dataset / "gt"), "--out", str(rep_dir)]) == 0
    assert "100" in capsys.readouterr().out
    doc = json.loads((rep_dir / "report.json").read_text())
    assert doc["mean_psnr"] == 100.0 and doc["mean_ssim"] == pytest.approx(1.0)
    assert doc["fid"] < 1e-6
    assert doc["mean_psnr"] == np.mean([r["psnr"] for r in doc["per_image"]])


def test_evaluate_missing_gt(tmp_path, dataset, capsys):
    gt = tmp_path / "gt_partial"
    gt.mkdir()
    files = sorted((dataset / "gt").iterdir())
    for p in files[1:]:
        (gt / p.name).write_bytes(p.read_bytes())
    assert main(["evaluate", str(dataset / "rain"), str(gt)]) == 1
    assert files[0].stem in capsys.readouterr().err


# -- config resolution ----------------------------------------------------------------------

def test_print_config_precedence(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("train:\n  epochs: 7\n  batch_size: 3\n")
    assert main(["train", "d", "r", "--config", str(cfg), "--set", "train.epochs=9", "--print-config"]) == 0
    resolved = yaml.safe_load(capsys.readouterr().out)
    assert resolved["train"]["epochs"] == 9          # override beats file
    assert resolved["train"]["batch_size"] == 3      # file beats default
    assert resolved["train"]["lr_start"] == 1e-3     # default
    assert main(["train", "d", "r", "--seed", "5", "--print-config"]) == 0
    assert yaml.safe_load(capsys.readouterr().out)["train"]["seed"] == 5


def test_bad_override_exits_nonzero(capsys):
    assert main(["train", "d", "r", "--set", "train.ablation=everything", "--print-config"]) == 1
    assert "ablation" in capsys.readouterr().err
