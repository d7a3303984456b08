"""``xenospec`` command line: generate, learn, train, eval, analyze.

Every command writes a run manifest next to its outputs. Exit codes: 2 for
malformed configuration or input, 3 for missing files, 4 for numerical
failures; the error is reported as JSON on stderr.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .augment import AugmentationConfig
from .evalx import FoldPlan, NSDThresholds, hierarchical_aggregate, image_classes, nested_folds, score_image
from .hsicore import (
    CLASSES,
    Dataset,
    DegeneratePixelError,
    EmptyRegionError,
    class_id,
    perfusion_index,
    region_median_spectrum,
    region_summaries,
)
from .model import PixelClassifier, TrainConfig, TrainingDivergedError, ensemble_predict, train
from .specan import (
    BootstrapConvergenceError,
    UndefinedProportionError,
    decompose_spectra,
    decomposition_csv,
    lmm_observations,
    median_spectra_csv,
    nn_agreement,
    pca_scatter_csv,
    perfusion_shift_direction,
    species_median_spectra,
)
from .synthgen import GenerationConfig, generate_angle_replicates, generate_dataset, save_shifts
from .xfer import TransformConfig, TransformSet, UnsatisfiablePairingError, learn_transform_set

EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERIC = 4


class ConfigError(ValueError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("ascii")).hexdigest()


def atomic_write(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    inputs: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    tool_version: str = __version__
    wall_clock_seconds: float = 0.0

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "config_hash": config_hash(self.config),
            "config": self.config,
            "seed": self.seed,
            "inputs": self.inputs,
            "outputs": sorted(self.outputs),
            "tool_version": self.tool_version,
            "wall_clock_seconds": self.wall_clock_seconds,
        }

    def write(self, path: str | Path) -> None:
        atomic_write(path, json.dumps(self.to_dict(), indent=2) + "\n")


def read_json(path: str | Path, what: str):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{what} {path} is not valid JSON: {e}") from e


def parse_config(factory, d, what: str):
    try:
        return factory(d)
    except (TypeError, ValueError, KeyError) as e:
        raise ConfigError(f"invalid {what}: {e}") from e


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    try:
        return Dataset.from_manifest(path)
    except json.JSONDecodeError as e:
        raise ConfigError(f"manifest {path} is not valid JSON: {e}") from e
    except (TypeError, KeyError) as e:
        raise ConfigError(f"malformed manifest {path}: {e}") from e


def _fold_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=key).generate_state(1)[0])


def _csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


class _Run:
    """Collects outputs and writes the manifest at the end of a command."""

    def __init__(self, args, config: dict, out_dir: Path, manifest_name: str = "run_manifest.json"):
        self.started = time.perf_counter()
        self.manifest = RunManifest(args.command, config, args.seed)
        self.out_dir = out_dir
        self.manifest_path = out_dir / manifest_name

    def write(self, name: str, text: str) -> Path:
        path = self.out_dir / name
        atomic_write(path, text)
        self.manifest.outputs.append(str(path))
        return path

    def finish(self) -> None:
        self.manifest.wall_clock_seconds = round(time.perf_counter() - self.started, 3)
        self.manifest.write(self.manifest_path)
        print(f"wrote {len(self.manifest.outputs)} files and {self.manifest_path}")


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> None:
    spec = read_json(args.spec, "generation spec")
    if not isinstance(spec, dict):
        raise ConfigError("generation spec must be a JSON object")
    spec = dict(spec)
    if args.seed is not None:
        spec["seed"] = args.seed
    angles = spec.pop("angles", None)
    cfg = parse_config(GenerationConfig.from_dict, spec, "generation spec")
    out = Path(args.out)
    run = _Run(args, {"generation": cfg.to_dict(), "angles": angles}, out)
    run.manifest.seed = cfg.seed
    run.manifest.inputs.append(str(args.spec))
    print(f"generating {len(cfg.species)} species x {cfg.subjects_per_species} subjects")
    ds = generate_dataset(cfg)
    shifts = ds.shifts
    if angles is not None:
        if not isinstance(angles, dict):
            raise ConfigError("'angles' must be an object with angles/repetitions/angle_scale/repetition_noise")
        opts = dict(angles)
        if "angles" in opts:
            opts["angles"] = tuple(opts["angles"])
        opts.setdefault("seed", cfg.seed)
        try:
            ds = generate_angle_replicates(ds, **opts)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid angle replicate options: {e}") from e
        print(f"expanded to {len(ds.index)} angle/repetition replicates")
    ds.save(out)
    for e in ds.index:
        run.manifest.outputs += [str(out / e.cube_path), str(out / e.mask_path)]
    run.manifest.outputs.append(str(out / "manifest.json"))
    path = out / "shifts.json"
    save_shifts(path, shifts)
    run.manifest.outputs.append(str(path))
    run.write("generation.json", json.dumps(cfg.to_dict(), indent=2) + "\n")
    run.finish()


def cmd_learn(args) -> None:
    ds = load_dataset(args.manifest)
    tcfg = TransformConfig()
    cfg_dict = {}
    if args.config:
        cfg_dict = read_json(args.config, "transform config")
        tcfg = parse_config(TransformConfig.from_dict, cfg_dict, "transform config")
    seed = 0 if args.seed is None else args.seed
    out = Path(args.out)
    config = {
        "organ": args.organ,
        "n_pairs": args.n_pairs,
        "species": args.species,
        "transform": cfg_dict,
    }
    run = _Run(args, config, out.parent, f"{out.name}.run_manifest.json")
    run.manifest.seed = seed
    run.manifest.inputs.append(str(args.manifest))
    try:
        organ = class_id(args.organ)
    except (KeyError, ValueError) as e:
        raise ConfigError(f"unknown organ {args.organ!r}") from e
    print(f"learning {args.n_pairs} transforms for {CLASSES[organ]}")
    ts = learn_transform_set(ds, organ, args.n_pairs, seed, tcfg, args.species, n_jobs=args.threads)
    run.write(out.name, ts.to_json())
    run.finish()


def _load_folds(path, ds: Dataset, seed: int) -> tuple[FoldPlan, dict]:
    raw = read_json(path, "folds file")
    if not isinstance(raw, dict):
        raise ConfigError("folds file must be a JSON object")
    train_filter = raw.get("train_filter", {})
    test_filter = raw.get("test_filter", {})
    if isinstance(raw.get("outer"), list):
        plan = parse_config(FoldPlan.from_dict, raw, "fold plan")
    else:
        # a request: folds are computed here
        outer, inner = int(raw.get("outer", 3)), int(raw.get("inner", 5))
        fold_seed = int(raw.get("seed", seed))
        index = ds.index.filter(**raw["subset"]) if "subset" in raw else ds.index
        if outer < 1 or inner < 1:
            raise ConfigError("outer and inner fold counts must be >= 1")
        # inner = 1 trains one model per outer fold on all its training subjects
        plan = nested_folds(index, image_classes(ds.subset(index)), outer, inner, fold_seed)
    missing = set(plan.subjects) - set(ds.index.subjects)
    if missing:
        raise ConfigError(f"fold plan names subjects missing from the manifest: {sorted(missing)[:5]}")
    return plan, {"train_filter": train_filter, "test_filter": test_filter}


def _ids(ds: Dataset, subjects, criteria: dict) -> list[str]:
    subjects = set(subjects)
    index = ds.index.filter(**criteria) if criteria else ds.index
    return [e.image_id for e in index if e.subject_id in subjects]


def cmd_train(args) -> None:
    ds = load_dataset(args.manifest)
    seed = 0 if args.seed is None else args.seed
    plan, filters = _load_folds(args.folds, ds, seed)
    train_raw = read_json(args.train, "training config")
    aug_raw = read_json(args.augment, "augmentation config")
    if not isinstance(train_raw, dict) or not isinstance(aug_raw, dict):
        raise ConfigError("training and augmentation configs must be JSON objects")
    tcfg = parse_config(TrainConfig.from_dict, train_raw, "training config")
    acfg = parse_config(AugmentationConfig.from_dict, aug_raw, "augmentation config")
    transforms = None
    if args.transforms:
        if not Path(args.transforms).exists():
            raise FileNotFoundError(f"transform set not found: {args.transforms}")
        transforms = parse_config(TransformSet.load, args.transforms, "transform set")
    out = Path(args.out)
    config = {
        "train": tcfg.to_dict(),
        "augment": acfg.to_dict(),
        "folds": plan.to_dict(),
        **filters,
        "transforms": None if transforms is None else config_hash(json.loads(transforms.to_json())),
    }
    run = _Run(args, config, out)
    run.manifest.seed = seed
    run.manifest.inputs += [str(args.manifest), str(args.folds), str(args.train), str(args.augment)]
    if args.transforms:
        run.manifest.inputs.append(str(args.transforms))
    run.write("folds.json", json.dumps({**plan.to_dict(), **filters}, indent=2) + "\n")
    for o in range(len(plan.outer)):
        n_inner = len(plan.inner[o])
        for i in range(n_inner):
            if n_inner == 1:
                train_subjects, val_subjects = plan.train_subjects(o), []
            else:
                train_subjects, val_subjects = plan.train_subjects(o, i), plan.validation_subjects(o, i)
            train_ids = _ids(ds, train_subjects, filters["train_filter"])
            val_ids = _ids(ds, val_subjects, filters["train_filter"])
            if not train_ids:
                raise ConfigError(f"fold {o}/{i} has no training images after filtering")
            fold_seed = _fold_seed(seed, o, i)
            cfg = TrainConfig.from_dict({**tcfg.to_dict(), "seed": fold_seed})
            print(f"fold {o}/{i}: {len(train_ids)} training images, {len(val_ids)} validation images")
            init = PixelClassifier.init(cfg.layer_sizes, seed=fold_seed)
            model, history = train(init, ds, train_ids, cfg, acfg, transforms, val_ids)
            path = out / f"fold{o}_{i}.pxc"
            model.save(path)
            run.manifest.outputs.append(str(path))
            run.write(f"fold{o}_{i}.history.jsonl", history.to_jsonl())
    run.finish()


def _load_models(models_dir: Path) -> tuple[FoldPlan, dict, dict[int, list[PixelClassifier]]]:
    folds_path = models_dir / "folds.json"
    raw = read_json(folds_path, "fold plan")
    plan = parse_config(FoldPlan.from_dict, raw, "fold plan")
    filters = {"train_filter": raw.get("train_filter", {}), "test_filter": raw.get("test_filter", {})}
    models: dict[int, list[PixelClassifier]] = {}
    for o in range(len(plan.outer)):
        paths = sorted(models_dir.glob(f"fold{o}_*.pxc"))
        if not paths:
            raise FileNotFoundError(f"no checkpoints for outer fold {o} in {models_dir}")
        try:
            models[o] = [PixelClassifier.load(p) for p in paths]
        except ValueError as e:
            raise ConfigError(f"bad checkpoint in {models_dir}: {e}") from e
    return plan, filters, models


def cmd_eval(args) -> None:
    ds = load_dataset(args.manifest)
    models_dir = Path(args.models_dir)
    if not models_dir.is_dir():
        raise FileNotFoundError(f"models directory not found: {models_dir}")
    plan, filters, models = _load_models(models_dir)
    cfg = read_json(args.config, "evaluation config") if args.config else {}
    if not isinstance(cfg, dict):
        raise ConfigError("evaluation config must be a JSON object")
    known = {"test_filter", "nsd_thresholds", "n_bootstrap", "level", "mode", "organ", "nsd"}
    unknown = set(cfg) - known
    if unknown:
        raise ConfigError(f"unknown evaluation parameters: {sorted(unknown)}")
    test_filter = cfg.get("test_filter", filters["test_filter"])
    thresholds = parse_config(NSDThresholds.from_dict, cfg.get("nsd_thresholds", {}), "NSD thresholds") if cfg.get("nsd", True) else None
    n_boot = int(cfg.get("n_bootstrap", 1000))
    organ = parse_config(class_id, cfg.get("organ", "kidney"), "organ")
    seed = 0 if args.seed is None else args.seed
    out = Path(args.out)
    run = _Run(args, {"eval": cfg, "folds": plan.to_dict(), "test_filter": test_filter}, out)
    run.manifest.seed = seed
    run.manifest.inputs += [str(args.manifest), str(models_dir)]
    scores, pairs = [], []
    for o, fold_models in models.items():
        ids = _ids(ds, plan.test_subjects(o), test_filter)
        print(f"outer fold {o}: {len(ids)} test images, ensemble of {len(fold_models)}")
        for image_id in ids:
            entry = ds.index[image_id]
            pred, _ = ensemble_predict(fold_models, ds.cube(image_id))
            ref = ds.mask(image_id)
            scores += score_image(image_id, pred, ref, thresholds=thresholds, annotation=entry.annotation)
            if (ref.labels == organ).any():
                median = region_median_spectrum(ds.cube(image_id), ref, organ).median
                d = next(s.dsc for s in scores if s.image_id == image_id and s.class_id == organ)
                pairs.append((image_id, entry.subject_id, entry.species, entry.perfusion, repr(float(perfusion_index(median))), repr(d)))
    if not scores:
        raise ConfigError("no test images to evaluate")
    report = hierarchical_aggregate(scores, ds.index, cfg.get("mode", "mean"), n_boot, cfg.get("level", 0.95), seed, thresholds)
    run.write("report.json", report.to_json() + "\n")
    run.write("report.csv", report.to_csv())
    run.write(
        "perfusion_dsc.csv",
        _csv(pairs, ["image_id", "subject_id", "species", "perfusion", "perfusion_index", "dsc"]),
    )
    print(f"overall DSC {report.overall['dsc']:.4f}")
    run.finish()


ANALYSES = ("median-spectra", "pca", "nn-matrix", "variance")


def cmd_analyze(args) -> None:
    ds = load_dataset(args.manifest)
    cfg = read_json(args.config, "analysis config") if args.config else {}
    if not isinstance(cfg, dict):
        raise ConfigError("analysis config must be a JSON object")
    seed = 0 if args.seed is None else args.seed
    out = Path(args.out)
    run = _Run(args, {"which": args.which, "analysis": cfg}, out)
    run.manifest.seed = seed
    run.manifest.inputs.append(str(args.manifest))
    organs = [parse_config(class_id, o, "organ") for o in cfg.get("organs", [])] or None
    index = ds.index.filter(**cfg["filter"]) if "filter" in cfg else ds.index
    sub = ds.subset(index)

    if args.which == "median-spectra":
        table = species_median_spectra(region_summaries(sub, organs), index)
        run.write("median_spectra.csv", median_spectra_csv(table))
    elif args.which == "pca":
        organ = parse_config(class_id, cfg.get("organ", "kidney"), "organ")
        summaries = [s for s in region_summaries(sub, [organ])]
        if len(summaries) < 3:
            raise ConfigError(f"too few {CLASSES[organ]} regions for PCA")
        model, shifts = perfusion_shift_direction(summaries, index, organ, int(cfg.get("k", 2)))
        run.write("pca.json", json.dumps({**model.to_dict(), "pc1_shift": shifts}, indent=2) + "\n")
        run.write("pca_scatter.csv", pca_scatter_csv(model, summaries, index))
    elif args.which == "nn-matrix":
        summaries = region_summaries(sub, organs)
        species = sorted({e.species for e in index})
        pairs = cfg.get("pairs") or [[q, n] for q in species for n in species]
        results = {}
        for q, n in pairs:
            query = [s for s in summaries if index[s.image_id].species == q]
            neigh = [s for s in summaries if index[s.image_id].species == n]
            m = nn_agreement(query, neigh, q, n)
            run.write(f"nn_{q}_{n}.csv", m.to_csv())
            results[f"{q}->{n}"] = m.to_dict()
        run.write("nn_matrix.json", json.dumps(results, indent=2) + "\n")
    elif args.which == "variance":
        n_boot = int(cfg.get("n_bootstrap", 500))
        strict = bool(cfg.get("strict", False))
        present = sorted({c for i in index.image_ids for c in sub.mask(i).classes() if c != 0})
        decomps = []
        for organ in organs or present:
            Y, design = lmm_observations(sub, organ)
            print(f"variance decomposition for {CLASSES[organ]}: {design.n} observations")
            decomps.append(
                decompose_spectra(Y, design, organ, n_boot, float(cfg.get("level", 0.95)), seed, strict, args.threads)
            )
        run.write("variance.csv", decomposition_csv(decomps))
        run.write("variance.json", json.dumps([d.to_dict() for d in decomps], indent=2) + "\n")
    run.finish()


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="xenospec", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"xenospec {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help):
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", required=True, help=out_help)
        sp.add_argument("--threads", type=int, default=os.cpu_count() or 1)

    g = sub.add_parser("generate", help="generate a synthetic dataset")
    g.add_argument("spec", help="generation spec JSON")
    common(g, "output directory")

    lr = sub.add_parser("learn", help="learn a perfusion transform set")
    lr.add_argument("manifest")
    lr.add_argument("--organ", default="kidney")
    lr.add_argument("--n-pairs", type=int, default=10)
    lr.add_argument("--species", default=None, help="restrict pairs to one source species")
    lr.add_argument("--config", default=None, help="transform config JSON")
    common(lr, "output .pxt.json file")

    t = sub.add_parser("train", help="train one model per fold")
    t.add_argument("manifest")
    t.add_argument("folds", help="fold plan JSON, or a request {outer, inner, seed, subset, train_filter, test_filter}")
    t.add_argument("train", help="training config JSON")
    t.add_argument("augment", help="augmentation config JSON")
    t.add_argument("--transforms", default=None, help="transform set; baseline training without it")
    common(t, "output directory")

    e = sub.add_parser("eval", help="evaluate fold ensembles on their test subjects")
    e.add_argument("manifest")
    e.add_argument("models_dir")
    e.add_argument("--config", default=None, help="evaluation config JSON")
    common(e, "output directory")

    a = sub.add_parser("analyze", help="spectral analyses")
    a.add_argument("manifest")
    a.add_argument("which", choices=ANALYSES)
    a.add_argument("--config", default=None, help="analysis config JSON")
    common(a, "output directory")
    return p


COMMANDS = {
    "generate": cmd_generate,
    "learn": cmd_learn,
    "train": cmd_train,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
}

NUMERIC_ERRORS = (
    TrainingDivergedError,
    BootstrapConvergenceError,
    UndefinedProportionError,
    DegeneratePixelError,
    FloatingPointError,
    np.linalg.LinAlgError,
)


def _fail(code: int, exc: BaseException) -> int:
    report = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    print(json.dumps(report), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        return _fail(EXIT_CONFIG, ConfigError("--threads must be >= 1"))
    try:
        COMMANDS[args.command](args)
    except FileNotFoundError as e:
        return _fail(EXIT_MISSING, e)
    except NUMERIC_ERRORS as e:
        return _fail(EXIT_NUMERIC, e)
    except (ConfigError, UnsatisfiablePairingError, EmptyRegionError, ValueError, KeyError) as e:
        return _fail(EXIT_CONFIG, e)
    return 0


if __name__ == "__main__":
    sys.exit(main())
