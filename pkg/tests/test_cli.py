import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from xenospec.cli import EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC, _fold_seed, main
from xenospec.model import PixelClassifier, TrainConfig

SPEC = {
    "seed": 5,
    "species": ["pig", "human"],
    "subjects_per_species": 3,
    "images_per_subject": 2,
    "malperfused_images_per_subject": 1,
    "height": 16,
    "width": 24,
}
TRAIN = {"epochs": 2, "images_per_epoch": 8, "batch_size": 4, "swa_epochs": 1, "pixels_per_image": 64, "hidden": [8]}
FOLDS = {"outer": 3, "inner": 1, "seed": 0}


def write(path: Path, obj) -> str:
    path.write_text(json.dumps(obj))
    return str(path)


def tree_digest(root: Path) -> dict[str, str]:
    # the run manifest records wall-clock time and absolute paths, so it is left out
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*"))
        if p.is_file() and not p.name.endswith("run_manifest.json")
    }


@pytest.fixture(scope="module")
def generated(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["generate", write(root / "spec.json", SPEC), "--out", str(root / "data")]) == 0
    return root


def test_generate_twice_gives_identical_trees(generated, tmp_path):
    assert main(["generate", str(generated / "spec.json"), "--out", str(tmp_path / "again")]) == 0
    assert tree_digest(generated / "data") == tree_digest(tmp_path / "again")
    manifest = json.loads((tmp_path / "again" / "run_manifest.json").read_text())
    first = json.loads((generated / "data" / "run_manifest.json").read_text())
    assert manifest["config_hash"] == first["config_hash"] and manifest["command"] == "generate"


def test_zero_epoch_checkpoint_equals_initialization(generated, tmp_path):
    cfg = {**TRAIN, "epochs": 0, "swa_epochs": 0}
    args = [
        "train",
        str(generated / "data" / "manifest.json"),
        write(tmp_path / "folds.json", FOLDS),
        write(tmp_path / "train.json", cfg),
        write(tmp_path / "augment.json", {}),
        "--seed",
        "4",
        "--out",
        str(tmp_path / "models"),
    ]
    assert main(args) == 0
    layers = TrainConfig.from_dict(cfg).layer_sizes
    for o in range(3):
        saved = PixelClassifier.load(tmp_path / "models" / f"fold{o}_0.pxc")
        init = PixelClassifier.init(layers, seed=_fold_seed(4, o, 0))
        for p, q in zip(init.parameters(), saved.parameters()):
            np.testing.assert_array_equal(p.astype(np.float32), q)


def error_report(capsys) -> dict:
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_malformed_config_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["generate", str(bad), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert error_report(capsys)["exit_code"] == EXIT_CONFIG
    assert main(["generate", write(tmp_path / "u.json", {"colour": 1}), "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_missing_file_exits_3(tmp_path, capsys):
    assert main(["learn", str(tmp_path / "nowhere.json"), "--out", str(tmp_path / "t.pxt.json")]) == EXIT_MISSING
    report = error_report(capsys)
    assert report["exit_code"] == EXIT_MISSING and "nowhere.json" in report["message"]


def test_numerical_failure_exits_4(tmp_path, capsys):
    # noiseless single-species data re-recorded without angle offsets: every kidney median is identical,
    # so variance proportions are undefined
    spec = {
        **SPEC,
        "species": ["pig"],
        "malperfused_images_per_subject": 0,
        "sigma_subject": 0,
        "sigma_image": 0,
        "sigma_pixel": 0,
        "perfusion_jitter": 0,
        "angles": {"repetitions": 2, "angle_scale": 0, "repetition_noise": 0},
    }
    assert main(["generate", write(tmp_path / "spec.json", spec), "--out", str(tmp_path / "data")]) == 0
    cfg = write(tmp_path / "var.json", {"organs": ["kidney"], "n_bootstrap": 0})
    args = ["analyze", str(tmp_path / "data" / "manifest.json"), "variance", "--config", cfg, "--out", str(tmp_path / "v")]
    assert main(args) == EXIT_NUMERIC
    assert error_report(capsys)["error"] == "UndefinedProportionError"


def run_pipeline(data: Path, root: Path) -> None:
    root.mkdir()
    manifest = str(data / "manifest.json")
    learn_cfg = write(root / "transform.json", {"steps": 10, "max_pixels": 100})
    assert main(["learn", manifest, "--n-pairs", "2", "--species", "pig", "--config", learn_cfg, "--out", str(root / "set.pxt.json")]) == 0
    folds = write(root / "folds.json", {**FOLDS, "train_filter": {"perfusion": "physiological"}})
    train_cfg, aug_cfg = write(root / "train.json", TRAIN), write(root / "augment.json", {"affine_p": 0.0})
    for name, extra in (("baseline", []), ("xeno", ["--transforms", str(root / "set.pxt.json")])):
        assert main(["train", manifest, folds, train_cfg, aug_cfg, *extra, "--out", str(root / name)]) == 0
        eval_cfg = write(root / "eval.json", {"n_bootstrap": 50})
        assert main(["eval", manifest, str(root / name), "--config", eval_cfg, "--out", str(root / f"{name}_eval")]) == 0
    for which in ("median-spectra", "pca", "nn-matrix"):
        assert main(["analyze", manifest, which, "--out", str(root / which)]) == 0


def test_end_to_end_smoke_and_rerun(generated, tmp_path):
    run_pipeline(generated / "data", tmp_path / "a")
    for name in ("baseline_eval", "xeno_eval"):
        for f in ("report.json", "report.csv", "perfusion_dsc.csv", "run_manifest.json"):
            assert (tmp_path / "a" / name / f).is_file()
    assert json.loads((tmp_path / "a" / "xeno_eval" / "report.json").read_text())["overall"]
    for f in ("median-spectra/median_spectra.csv", "pca/pca_scatter.csv", "pca/pca.json", "nn-matrix/nn_matrix.json"):
        assert (tmp_path / "a" / f).is_file()
    run_pipeline(generated / "data", tmp_path / "b")
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")


def test_variance_analysis(tmp_path):
    spec = {**SPEC, "species": ["pig", "rat"], "angles": {"repetitions": 3}}
    assert main(["generate", write(tmp_path / "spec.json", spec), "--out", str(tmp_path / "data")]) == 0
    cfg = write(tmp_path / "var.json", {"organs": ["kidney"], "n_bootstrap": 2})
    assert main(["analyze", str(tmp_path / "data" / "manifest.json"), "variance", "--config", cfg, "--out", str(tmp_path / "v")]) == 0
    rows = (tmp_path / "v" / "variance.csv").read_text().splitlines()
    assert rows[0] == "organ,wavelength,factor,proportion,ci_lo,ci_hi" and len(rows) == 1 + 100 * 5
