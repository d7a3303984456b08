"""Run the whole pipeline through the command line, the way a study would be scripted.

generate -> learn (pig transforms) -> train (baseline and xeno, 3 outer folds on
human subjects, physiological training images) -> eval -> analyze. Every step
leaves a run manifest next to its outputs.

    python3 demos/04_cli_pipeline.py [work_dir]
"""

import json
import subprocess
import sys
import tempfile
from pathlib import Path

work = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="xenospec_"))
work.mkdir(parents=True, exist_ok=True)


def config(name, obj):
    path = work / name
    path.write_text(json.dumps(obj, indent=2))
    return str(path)


def xenospec(*args):
    print("$ xenospec", " ".join(str(a) for a in args), flush=True)
    subprocess.run([sys.executable, "-m", "xenospec.cli", *map(str, args)], check=True)


spec = config("spec.json", {"seed": 4, "species": ["pig", "human"], "subjects_per_species": 6, "images_per_subject": 3, "malperfused_images_per_subject": 2, "height": 32, "width": 48})
folds = config("folds.json", {"outer": 3, "inner": 1, "seed": 0, "subset": {"species": "human"}, "train_filter": {"perfusion": "physiological"}})
train = config("train.json", {"epochs": 15, "images_per_epoch": 48, "swa_epochs": 3, "pixels_per_image": 256, "lr": 0.01})
augment = config("augment.json", {"affine_p": 0.0, "transplant_p": 0.5})
evaluate = config("eval.json", {"n_bootstrap": 200, "test_filter": {"perfusion": "malperfused"}})
manifest = work / "data" / "manifest.json"

xenospec("generate", spec, "--out", work / "data")
xenospec("learn", manifest, "--species", "pig", "--n-pairs", "8", "--config", config("transform.json", {"max_pixels": 300}), "--out", work / "pig.pxt.json")
for name, extra in (("baseline", []), ("xeno", ["--transforms", work / "pig.pxt.json"])):
    xenospec("train", manifest, folds, train, augment, *extra, "--seed", "1", "--out", work / name)
    xenospec("eval", manifest, work / name, "--config", evaluate, "--out", work / f"{name}_eval")
xenospec("analyze", manifest, "pca", "--out", work / "pca")

for name in ("baseline", "xeno"):
    report = json.loads((work / f"{name}_eval" / "report.json").read_text())
    kidney = report["classes"]["dsc"]["kidney"]
    lo, hi = report["ci"]["dsc"]["kidney"]
    print(f"{name:8s} kidney DSC on malperfused human test images {kidney:.3f} [{lo:.3f}, {hi:.3f}]")
print(f"outputs in {work}")
