"""Acceptance gate: one test per criterion, each reporting PASS/FAIL with its measured values."""

import json
import time
from pathlib import Path

import numpy as np
from lmm_sim import simulate
from test_cli import tree_digest
from test_evalx import dsc_oracle, nsd_oracle

from xenospec.augment import AugmentationConfig, perfusion_augment
from xenospec.cli import main
from xenospec.evalx import ClassScore, bootstrap_ci, dsc, hierarchical_aggregate, nsd, score_image
from xenospec.hsicore import KIDNEY, N_CHANNELS, N_CLASSES, DatasetEntry, DatasetIndex, SegmentationMask, SpectralCube, l1_normalize, region_summaries
from xenospec.model import PixelClassifier, TrainConfig, dice_ce_loss, ensemble_predict, train
from xenospec.specan import decompose_spectra, fit_lmm, lmm_observations, perfusion_shift_direction, variance_proportions
from xenospec.synthgen import GenerationConfig, generate_angle_replicates, generate_dataset
from xenospec.xfer import PerfusionTransform, TransformConfig, TransformSet, apply_transform, composite_loss, composite_loss_grad, learn_transform, learn_transform_set


def test_criterion_1_transform_recovery(criterion):
    reductions, errors, seconds = [], [], []
    for seed in range(3):
        ds = generate_dataset(GenerationConfig(seed=seed, species=("pig",), subjects_per_species=2))
        phys_id = ds.index.filter(perfusion="physiological").image_ids[0]
        cube, mask = ds.cube(phys_id), ds.mask(phys_id)
        sel = mask.labels == KIDNEY
        data = cube.data.copy()
        data[sel] = ds.shifts["pig"].apply(data[sel])  # malperfusion as an exact linear map
        start = time.perf_counter()
        t = learn_transform((cube, mask), (SpectralCube(data), mask), KIDNEY, TransformConfig(steps=100))
        seconds.append(time.perf_counter() - start)
        reductions.append(1 - t.final_loss / t.initial_loss)
        target = data[sel].mean(axis=0)
        errors.append(np.linalg.norm(apply_transform(t, cube.data[sel]).mean(axis=0) - target) / np.linalg.norm(target))
    ok = min(reductions) >= 0.9 and max(errors) <= 0.05 and max(seconds) <= 10
    criterion(1, ok, f"loss reduction min {min(reductions):.3f} (>=0.90), mean-spectrum error max {max(errors):.4f} (<=0.05), slowest pair {max(seconds):.2f} s (<=10)")


def _kidney_dsc(models, ds, ids):
    scores = []
    for i in ids:
        pred, _ = ensemble_predict(models, ds.cube(i))
        scores += [s for s in score_image(i, pred, ds.mask(i)) if s.class_id == KIDNEY]
    return hierarchical_aggregate(scores, ds.index).per_class["dsc"][KIDNEY]


def test_criterion_2_xeno_learning_benefit(criterion):
    start = time.perf_counter()
    gains, phys_drops = [], []
    for seed in range(3):
        cfg = GenerationConfig(seed=seed, species=("pig", "human"), subjects_per_species=6, images_per_subject=3, malperfused_images_per_subject=2, height=32, width=48)
        ds = generate_dataset(cfg)
        transforms = learn_transform_set(ds, KIDNEY, 8, seed=seed, config=TransformConfig(max_pixels=300), species="pig")
        target = ds.index.filter(species="human")
        train_subjects, test_subjects = target.subjects[:4], target.subjects[4:]
        train_ids = [e.image_id for e in target if e.subject_id in train_subjects and e.perfusion == "physiological"]
        test_mal = [e.image_id for e in target if e.subject_id in test_subjects and e.perfusion == "malperfused"]
        test_phys = [e.image_id for e in target if e.subject_id in test_subjects and e.perfusion == "physiological"]
        tc = TrainConfig(epochs=15, images_per_epoch=48, swa_epochs=3, pixels_per_image=256, lr=1e-2, seed=seed)
        aug = AugmentationConfig(affine_p=0.0, transplant_p=0.5)
        result = {}
        for name, ts in (("baseline", None), ("xeno", transforms)):
            model, _ = train(PixelClassifier.init(seed=seed), ds, train_ids, tc, aug, ts)
            result[name] = (_kidney_dsc([model], ds, test_mal), _kidney_dsc([model], ds, test_phys))
        gains.append(result["xeno"][0] - result["baseline"][0])
        phys_drops.append(result["baseline"][1] - result["xeno"][1])
    minutes = (time.perf_counter() - start) / 60
    gain, drop = float(np.mean(gains)), float(np.mean(phys_drops))
    ok = gain >= 0.05 and drop < 0.02 and minutes <= 10
    criterion(2, ok, f"malperfused kidney DSC gain {gain:.3f} (>=0.05), physiological drop {drop:.3f} (<0.02), {minutes:.1f} min (<=10)")


def test_criterion_3_cross_species_failure(criterion):
    drops = []
    for seed in range(3):
        ds = generate_dataset(GenerationConfig(seed=seed, species=("pig", "human"), subjects_per_species=6, images_per_subject=3, malperfused_images_per_subject=0, height=32, width=48))

        def ids(species, subjects):
            index = ds.index.filter(species=species)
            return [e.image_id for e in index if e.subject_id in index.subjects[subjects]]

        tc = TrainConfig(epochs=15, images_per_epoch=48, swa_epochs=3, pixels_per_image=256, lr=1e-2, seed=seed)
        model, _ = train(PixelClassifier.init(seed=seed), ds, ids("pig", slice(0, 4)), tc, AugmentationConfig(affine_p=0.0, transplant_p=0.5))

        def mean_dsc(image_ids):
            scores = []
            for i in image_ids:
                scores += score_image(i, ensemble_predict([model], ds.cube(i))[0], ds.mask(i))
            return hierarchical_aggregate(scores, ds.index).overall["dsc"]

        intra, cross = mean_dsc(ids("pig", slice(4, 6))), mean_dsc(ids("human", slice(4, 6)))
        drops.append(1 - cross / intra)
    drop = float(np.mean(drops))
    criterion(3, drop >= 0.2, f"relative mean-DSC drop pig->human {drop:.3f} (>=0.20), per seed {np.round(drops, 3).tolist()}")


def test_criterion_4_metric_oracles(criterion):
    r = np.random.default_rng(2024)
    mismatches = 0
    for _ in range(200):
        p, q = r.integers(0, 3, (8, 8)), r.integers(0, 3, (8, 8))
        c = int(r.integers(0, 3))
        tau = float(r.choice([0.0, 1.0, 1.5, 2.0, 3.0]))
        mismatches += dsc(p, q, c) != dsc_oracle(p, q, c)
        mismatches += nsd(p, q, c, tau) != nsd_oracle(p, q, c, tau)
    index = DatasetIndex(tuple(DatasetEntry(i, s, "pig") for i, s in (("a1", "A"), ("b1", "B"), ("b2", "B"), ("b3", "B"))))
    scores = [ClassScore("a1", 6, 0.8), ClassScore("b1", 6, 1.0), ClassScore("b2", 6, 1.0), ClassScore("b3", 6, 1.0)]
    value = hierarchical_aggregate(scores, index).per_class["dsc"][6]
    ok = mismatches == 0 and abs(value - 0.9) < 1e-12
    criterion(4, ok, f"{mismatches} oracle mismatches over 200 mask pairs, subject-weighted example {value:.6f} (0.9)")


def test_criterion_5_bootstrap(criterion):
    lo, hi = bootstrap_ci({1: {f"s{k}": 0.83 for k in range(12)}}, n=1000)[1]
    r = np.random.default_rng(11)
    hits = 0
    for trial in range(200):
        values = r.normal(0.75, 0.1, 30)
        a, b = bootstrap_ci({1: {f"s{k}": v for k, v in enumerate(values)}}, n=1000, seed=trial)[1]
        hits += a <= 0.75 <= b
    coverage = hits / 200
    ok = lo == hi == 0.83 and 0.92 <= coverage <= 0.98
    criterion(5, ok, f"constant-score CI width {hi - lo:g} (0), coverage {coverage:.3f} over 200 trials (in [0.92, 0.98])")


def test_criterion_6_lmm_recovery(criterion):
    comps = np.array([fit_lmm(*simulate(seed)).components for seed in range(20)])
    rel = np.abs(comps.mean(axis=0) - [4.0, 1.0, 0.25]) / [4.0, 1.0, 0.25]
    # proportions at every wavelength of a synthetic angle/repetition dataset
    ds = generate_dataset(GenerationConfig(seed=0, species=("pig", "rat"), subjects_per_species=4, images_per_subject=3, malperfused_images_per_subject=0, height=24, width=32))
    Y, design = lmm_observations(generate_angle_replicates(ds, repetitions=2, seed=0), KIDNEY)
    sums = decompose_spectra(Y, design, KIDNEY).proportions.sum(axis=1)
    worst_sum = float(np.abs(sums - 1).max())
    shares = []
    for seed in range(200):
        p = variance_proportions(*(lambda y, d: (fit_lmm(y, d), d))(*simulate(seed)))
        shares.append(p[0] + p[1])
    null_share, first20 = float(np.mean(shares)), float(np.mean(shares[:20]))
    ok = np.all(rel <= 0.25) and worst_sum <= 1e-6 and null_share <= 0.05
    criterion(
        6,
        ok,
        f"relative errors {np.round(rel, 3).tolist()} (<=0.25), worst |sum-1| {worst_sum:.1e} over {Y.shape[1]} wavelengths, "
        f"null species+angle share {null_share:.4f} over 200 seeds (<=0.05; seeds 0-19 alone {first20:.4f})",
    )


def test_criterion_7_gradient_checks(criterion):
    worst = 0.0
    h = 1e-5
    for seed in range(3):
        r = np.random.default_rng(seed)
        S, M = r.random((5, N_CHANNELS)) + 0.2, r.random((5, N_CHANNELS)) + 0.2
        S, M = S / S.sum(1, keepdims=True), M / M.sum(1, keepdims=True)
        W, b = np.eye(N_CHANNELS) + 0.05 * r.standard_normal((N_CHANNELS, N_CHANNELS)), 0.001 * r.standard_normal(N_CHANNELS)
        _, gW, gb = composite_loss_grad(W, b, S, M)
        z = np.abs(S @ W.T + b)

        def total(W_, b_):
            return composite_loss(M, np.maximum(S @ W_.T + b_, 0)).total

        # a central difference whose stencil crosses the clamp kink measures the kink, not the gradient
        pairs = zip(r.integers(0, N_CHANNELS, 60), r.integers(0, N_CHANNELS, 60))
        entries = [(i, j) for i, j in pairs if np.all(z[:, i] > h * S[:, j])][:40]
        smooth_b = np.flatnonzero(np.all(z > h, axis=0))
        num_W = []
        for i, j in entries:
            Wp, Wm = W.copy(), W.copy()
            Wp[i, j] += h
            Wm[i, j] -= h
            num_W.append((total(Wp, b) - total(Wm, b)) / (2 * h))
        num_b = np.array([(total(W, b + h * e) - total(W, b - h * e)) / (2 * h) for e in np.eye(N_CHANNELS)[smooth_b]])
        ana_W = np.array([gW[i, j] for i, j in entries])
        worst = max(worst, np.linalg.norm(ana_W - num_W) / np.linalg.norm(num_W), np.linalg.norm(gb[smooth_b] - num_b) / np.linalg.norm(num_b))

        model = PixelClassifier.init((N_CHANNELS, 6, 5, N_CLASSES), seed=seed)
        x, y = r.random((4, N_CHANNELS)) / 50, r.integers(0, N_CLASSES, 4)
        logits, cache = model.forward(x)
        grads = model.backward(cache, dice_ce_loss(logits, y, grad=True)[1])
        for p, g in zip(model.parameters(), grads):
            flat, numeric = p.reshape(-1), np.empty(p.size)
            for k in range(p.size):
                old = flat[k]
                flat[k] = old + h
                up = dice_ce_loss(model.logits(x), y)
                flat[k] = old - h
                numeric[k] = (up - dice_ce_loss(model.logits(x), y)) / (2 * h)
                flat[k] = old
            worst = max(worst, np.linalg.norm(g.ravel() - numeric) / max(np.linalg.norm(numeric), 1e-12))
    criterion(7, worst <= 1e-3, f"worst relative gradient error {worst:.2e} (<=1e-3) over composite and Dice+CE losses")


def test_criterion_8_interpolation_contract(criterion, small_dataset):
    r = np.random.default_rng(8)
    data = r.random((6, 8, N_CHANNELS)) + 0.1
    labels = np.zeros((6, 8), dtype=np.uint8)
    labels[1:4, 2:6] = KIDNEY
    cube, mask = l1_normalize(SpectralCube(data)), SegmentationMask(labels)
    ts = TransformSet(tuple(PerfusionTransform(np.eye(N_CHANNELS) + 0.1 * r.standard_normal((N_CHANNELS, N_CHANNELS)), 0.001 * r.random(N_CHANNELS)) for _ in range(3)))
    identity = TransformSet((PerfusionTransform.identity(),))
    lam0 = perfusion_augment(cube, mask, KIDNEY, ts, np.random.default_rng(0), p=1.0, lam=0.0).data.tobytes() == cube.data.tobytes()
    lam1 = perfusion_augment(cube, mask, KIDNEY, identity, np.random.default_rng(0), p=1.0, lam=1.0).data.tobytes() == cube.data.tobytes()
    other = labels != KIDNEY
    untouched = all(
        perfusion_augment(cube, mask, KIDNEY, ts, np.random.default_rng(s), p=0.8).data[other].tobytes() == cube.data[other].tobytes()
        for s in range(50)
    )
    ids = small_dataset.index.image_ids
    tc = TrainConfig(epochs=2, images_per_epoch=8, batch_size=4, swa_epochs=1, pixels_per_image=64, hidden=(8,), seed=3)
    init = PixelClassifier.init(tc.layer_sizes)
    base, _ = train(init, small_dataset, ids, tc, AugmentationConfig(perfusion_p=0.0))
    off, _ = train(init, small_dataset, ids, tc, AugmentationConfig(perfusion_p=0.0), ts)
    streams = all(np.array_equal(a, b) for a, b in zip(base.parameters(), off.parameters()))
    ok = lam0 and lam1 and untouched and streams
    criterion(8, ok, f"lambda=0 identical {lam0}, lambda=1 identity identical {lam1}, non-organ untouched {untouched}, p=0 training equals baseline {streams}")


def test_criterion_9_same_direction_shift(criterion):
    agree = []
    for seed in range(10):
        ds = generate_dataset(GenerationConfig(seed=seed))
        _, shift = perfusion_shift_direction(region_summaries(ds, [KIDNEY]), ds.index)
        signs = np.sign(list(shift.values()))
        agree.append(len(shift) == 3 and bool(np.all(signs == signs[0])))
    criterion(9, all(agree), f"PC-1 shift sign agrees across pig, rat and human for {sum(agree)}/10 generator seeds")


def _write(path: Path, obj) -> str:
    path.write_text(json.dumps(obj))
    return str(path)


def _full_pipeline(root: Path) -> None:
    root.mkdir()
    spec = {"seed": 2, "species": ["pig", "human"], "subjects_per_species": 4, "images_per_subject": 2, "malperfused_images_per_subject": 1, "height": 16, "width": 24, "angles": {"repetitions": 2}}
    data = root / "data"
    steps = [
        ["generate", _write(root / "spec.json", spec), "--out", str(data)],
        ["learn", str(data / "manifest.json"), "--species", "pig", "--n-pairs", "2", "--config", _write(root / "t.json", {"steps": 20, "max_pixels": 200}), "--out", str(root / "set.pxt.json")],
    ]
    train_cfg = _write(root / "train.json", {"epochs": 3, "images_per_epoch": 12, "batch_size": 4, "swa_epochs": 1, "pixels_per_image": 64, "hidden": [16]})
    folds = _write(root / "folds.json", {"outer": 2, "inner": 2, "seed": 1, "train_filter": {"perfusion": "physiological"}})
    aug = _write(root / "aug.json", {})
    for name, extra in (("baseline", []), ("xeno", ["--transforms", str(root / "set.pxt.json")])):
        steps.append(["train", str(data / "manifest.json"), folds, train_cfg, aug, *extra, "--seed", "3", "--out", str(root / name)])
        steps.append(["eval", str(data / "manifest.json"), str(root / name), "--config", _write(root / "e.json", {"n_bootstrap": 100}), "--out", str(root / f"{name}_eval")])
    for which in ("median-spectra", "pca", "nn-matrix"):
        steps.append(["analyze", str(data / "manifest.json"), which, "--out", str(root / which)])
    var_cfg = _write(root / "v.json", {"organs": ["kidney"], "n_bootstrap": 3})
    steps.append(["analyze", str(data / "manifest.json"), "variance", "--config", var_cfg, "--seed", "5", "--out", str(root / "variance")])
    for argv in steps:
        assert main(argv) == 0, argv


def test_criterion_10_determinism(criterion, tmp_path):
    _full_pipeline(tmp_path / "first")
    _full_pipeline(tmp_path / "second")
    a, b = tree_digest(tmp_path / "first"), tree_digest(tmp_path / "second")
    numeric = [k for k in a if k.endswith((".csv", ".json"))]
    differing = [k for k in numeric if a[k] != b.get(k)]
    ok = a.keys() == b.keys() and not differing
    criterion(10, ok, f"{len(numeric)} CSV/JSON outputs compared, {len(differing)} differ between reruns")
