import json
import shutil

import numpy as np
import pytest
from PIL import Image

from maxdrop import config as config_mod
from maxdrop.cli import apply_variant, experiment_label, load_png, main, mask_image
from maxdrop.errors import ConfigError

from conftest import FIXTURES

SMOKE = FIXTURES / "smoke.json"


def smoke_config(tmp_path, **train):
    data = json.loads(SMOKE.read_text())
    data["train"].update(train)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(data))
    return path


def test_config_round_trip():
    cfg = config_mod.load(FIXTURES / "compare_synth.json")
    again = config_mod.loads(cfg.dumps())
    assert again.to_dict() == cfg.to_dict()
    assert again.fingerprint() == cfg.fingerprint()


def test_fingerprint_ignores_name_but_not_settings():
    cfg = config_mod.load(SMOKE)
    d = cfg.to_dict()
    d["name"] = "other"
    assert config_mod.from_dict(d).fingerprint() == cfg.fingerprint()
    d["drop"]["r"] = 0.1
    assert config_mod.from_dict(d).fingerprint() != cfg.fingerprint()


def test_model_slots_share_experiment_drop_settings():
    cfg = config_mod.load(SMOKE)
    assert cfg.model.drop_config is cfg.drop


@pytest.mark.parametrize("patch,field", [
    ({"train": {"lr": -1}}, "train.lr"),
    ({"train": {"learning_rate": 0.1}}, "train.learning_rate"),
    ({"colour": 1}, "colour"),
    ({"model": {"drop_config": {}}}, "model.drop_config"),
    ({"model": {"num_classes": 3}}, "model.num_classes"),
])
def test_config_errors_name_field(patch, field):
    data = json.loads(SMOKE.read_text())
    for k, v in patch.items():
        data[k] = {**data[k], **v} if isinstance(v, dict) and k in data else v
    with pytest.raises(ConfigError) as exc:
        config_mod.from_dict(data)
    assert exc.value.field == field


def test_invalid_json_is_config_error():
    with pytest.raises(ConfigError):
        config_mod.loads("{not json")


def test_train_unknown_key_exits_2(tmp_path, capsys):
    data = json.loads(SMOKE.read_text())
    data["train"]["warmup"] = 3
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(data))
    assert main(["train", "--config", str(path), "--out", str(tmp_path / "o")]) == 2
    assert "train.warmup" in capsys.readouterr().err


def test_train_negative_lr_exits_2(tmp_path, capsys):
    path = smoke_config(tmp_path, lr=-1)
    assert main(["train", "--config", str(path), "--out", str(tmp_path / "o")]) == 2
    assert "lr" in capsys.readouterr().err


def test_missing_config_exits_2(tmp_path):
    assert main(["train", "--config", str(tmp_path / "nope.json")]) == 2


def test_smoke_train_writes_files_deterministically(tmp_path, capsys):
    path = smoke_config(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["train", "--config", str(path), "--out", str(a)]) == 0
    assert main(["train", "--config", str(path), "--out", str(b)]) == 0
    files = sorted(p.name for p in a.iterdir())
    assert files == ["run_000.csv", "run_000.json", "run_001.csv", "run_001.json", "summary.json"]
    for name in ["run_000.csv", "run_001.csv", "summary.json"]:
        assert (a / name).read_bytes() == (b / name).read_bytes()
    assert (a / "run_000.csv").read_text().splitlines()[0] == "epoch,train_loss,test_error"
    summary = json.loads((a / "summary.json").read_text())
    assert summary["runs"] == 2 and summary["std_formula"] == "population"
    assert "resnet-mini + MaxDropout" in capsys.readouterr().out


def test_seed_override_changes_runs(tmp_path):
    path = smoke_config(tmp_path, runs=1)
    main(["train", "--config", str(path), "--out", str(tmp_path / "a")])
    main(["train", "--config", str(path), "--out", str(tmp_path / "b"), "--seed", "9"])
    assert (tmp_path / "a/run_000.csv").read_bytes() != (tmp_path / "b/run_000.csv").read_bytes()
    assert json.loads((tmp_path / "b/run_000.json").read_text())["seed"] == 9


def test_cifar_config_without_data_exits_2(tmp_path, monkeypatch):
    monkeypatch.delenv("MAXDROP_DATA_DIR", raising=False)
    data = json.loads(SMOKE.read_text())
    data["dataset"] = {"kind": "cifar10", "classes": 4}
    data["augment"] = {"pad": 4, "crop": 32}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(data))
    assert main(["train", "--config", str(path), "--out", str(tmp_path / "o")]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_divergence_exits_3(tmp_path, capsys):
    path = smoke_config(tmp_path, lr=1e30, runs=1, momentum=0.0)
    assert main(["train", "--config", str(path), "--out", str(tmp_path / "o")]) == 3
    assert "diverged" in capsys.readouterr().err


def test_variant_parsing():
    cfg = config_mod.load(SMOKE)
    v = apply_variant(cfg, "maxdropout+cutout")
    assert experiment_label(v) == "resnet-mini + MaxDropout + Cutout"
    v = apply_variant(cfg, "none+stage2.block1=dropout")
    assert experiment_label(v) == "resnet-mini + Dropout"
    assert experiment_label(apply_variant(cfg, "none")) == "resnet-mini"
    with pytest.raises(ConfigError):
        apply_variant(cfg, "gaussian")
    with pytest.raises(ConfigError, match="valid slots"):
        apply_variant(cfg, "stage7.block1=dropout")


def test_compare_duplicate_variants_give_identical_rows(tmp_path, capsys):
    path = smoke_config(tmp_path, epochs=1, runs=1)
    out = tmp_path / "cmp"
    assert main(["compare", "--config", str(path), "--variant", "maxdropout", "--variant", "maxdropout",
                 "--variant", "none", "--out", str(out)]) == 0
    rows = (out / "comparison.csv").read_text().splitlines()
    assert rows[0] == "variant,model,mean_error_pct,std_error_pct,cell"
    assert rows[1] == rows[2]
    assert sorted(p.name for p in out.iterdir()) == ["comparison.csv", "comparison.md", "maxdropout", "maxdropout_2", "none"]
    table = (out / "comparison.md").read_text()
    assert table.startswith("| Model | synthetic-4 |\n|---|---|\n| resnet-mini + MaxDropout |")


def test_compare_needs_two_variants(tmp_path):
    assert main(["compare", "--config", str(SMOKE), "--variant", "none", "--out", str(tmp_path)]) == 2


def gradient_png():
    return np.asarray(Image.open(FIXTURES / "gradient.png"))


def test_mask_sim_maxdropout_blacks_out_bright_half(tmp_path, capsys):
    out = tmp_path / "m.png"
    assert main(["mask-sim", str(FIXTURES / "gradient.png"), "--method", "maxdropout", "--rate", "0.5", "--out", str(out)]) == 0
    img = gradient_png().astype(np.int64)
    res = np.asarray(Image.open(out)).astype(np.int64)
    assert img.max() == 255
    bright = 2 * img >= 255
    assert np.all(res[bright] == 0)
    assert np.array_equal(res[~bright], img[~bright])
    assert "dropped fraction: 0.5000" in capsys.readouterr().out


def test_mask_sim_dropout_fraction(tmp_path):
    out = tmp_path / "d.png"
    assert main(["mask-sim", str(FIXTURES / "gradient.png"), "--method", "dropout", "--rate", "0.5", "--seed", "3", "--out", str(out)]) == 0
    _, keep = mask_image(gradient_png(), "dropout", 0.5, 3)
    assert abs((1 - keep.mean()) - 0.5) <= 0.015


def test_mask_sim_rate_zero_drops_only_maxima():
    img = gradient_png()
    _, keep = mask_image(img, "maxdropout", 0.0)
    np.testing.assert_array_equal(~keep, img == img.max())


def test_mask_sim_maxdropout_ignores_seed():
    img = gradient_png()
    assert np.array_equal(mask_image(img, "maxdropout", 0.3, 0)[0], mask_image(img, "maxdropout", 0.3, 99)[0])


def test_mask_sim_rgb(tmp_path):
    img = load_png(FIXTURES / "gradient_rgb.png")
    assert img.ndim == 3
    out = tmp_path / "rgb.png"
    assert main(["mask-sim", str(FIXTURES / "gradient_rgb.png"), "--out", str(out)]) == 0
    assert np.asarray(Image.open(out)).shape == img.shape


def test_mask_sim_rejects_unsupported_images(tmp_path):
    rgba = tmp_path / "a.png"
    Image.new("RGBA", (4, 4)).save(rgba)
    assert main(["mask-sim", str(rgba)]) == 2
    txt = tmp_path / "x.png"
    txt.write_text("not an image")
    assert main(["mask-sim", str(txt)]) == 2
    assert main(["mask-sim", str(FIXTURES / "gradient.png"), "--rate", "1.0", "--out", str(tmp_path / "o.png")]) == 2


@pytest.fixture(scope="module")
def two_experiments(tmp_path_factory):
    root = tmp_path_factory.mktemp("results")
    data = json.loads(SMOKE.read_text())
    data["train"].update(epochs=1, runs=1)
    cfg = root.parent / "r_cfg.json"
    cfg.write_text(json.dumps(data))
    for name in ["exp_a", "exp_b"]:
        assert main(["train", "--config", str(cfg), "--out", str(root / name)]) == 0
    return root


def test_report_lists_experiments(two_experiments, tmp_path, capsys):
    out = tmp_path / "report.md"
    assert main(["report", str(two_experiments), "--out", str(out)]) == 0
    rows = [l for l in out.read_text().splitlines() if l.startswith("| exp_")]
    assert len(rows) == 2


def test_report_skips_malformed_summary(two_experiments, tmp_path, capsys):
    root = tmp_path / "res"
    shutil.copytree(two_experiments, root)
    (root / "exp_b" / "summary.json").write_text("{broken")
    assert main(["report", str(root)]) == 0
    captured = capsys.readouterr()
    assert "skipping" in captured.err
    assert sum(l.startswith("| exp_") for l in captured.out.splitlines()) == 1


def test_report_empty_or_missing_dir(tmp_path):
    assert main(["report", str(tmp_path)]) == 2
    assert main(["report", str(tmp_path / "missing")]) == 2
