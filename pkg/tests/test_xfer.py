import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from xenospec.hsicore import KIDNEY, N_CHANNELS, EmptyRegionError, SegmentationMask, SpectralCube
from xenospec.optim import Adam
from xenospec.synthgen import GenerationConfig, generate_dataset
from xenospec.xfer import (
    HistogramSpec,
    PerfusionTransform,
    TransformConfig,
    TransformSet,
    UnsatisfiablePairingError,
    apply_transform,
    composite_loss,
    composite_loss_grad,
    fit_transform,
    hard_histogram,
    learn_transform,
    learn_transform_set,
    soft_histogram,
)

# mean ||W - A||_F / ||A||_F over 25 transforms measured at build time was 0.0106
# (identity start: 0.0192); the frozen bound leaves headroom for platform noise
RECOVERY_BOUND = 0.015


def random_transform(rng, scale=0.05):
    return PerfusionTransform(np.eye(N_CHANNELS) + scale * rng.standard_normal((N_CHANNELS, N_CHANNELS)), 0.001 * rng.standard_normal(N_CHANNELS))


def spectra(rng, n):
    s = rng.random((n, N_CHANNELS)) + 0.2
    return s / s.sum(axis=1, keepdims=True)


def test_parameter_count_and_identity():
    t = PerfusionTransform.identity()
    assert t.n_parameters == 10100
    np.testing.assert_array_equal(t.W, np.eye(N_CHANNELS))
    assert not t.b.any()


def test_identity_transform_is_exact(rng):
    s = spectra(rng, 4)
    np.testing.assert_array_equal(apply_transform(PerfusionTransform.identity(), s), s)


def test_zero_matrix_returns_clamped_bias(rng):
    v = rng.standard_normal(N_CHANNELS)
    t = PerfusionTransform(np.zeros((N_CHANNELS, N_CHANNELS)), v)
    np.testing.assert_array_equal(apply_transform(t, spectra(rng, 1))[0], np.maximum(v, 0))


def test_matvec_oracle(rng):
    t = random_transform(rng, 1.0)
    s = rng.random(N_CHANNELS)
    expected = [max(sum(t.W[i, j] * s[j] for j in range(N_CHANNELS)) + t.b[i], 0.0) for i in range(N_CHANNELS)]
    np.testing.assert_allclose(apply_transform(t, s), expected, rtol=0, atol=1e-12)


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**32 - 1))
def test_unclamped_affinity(alpha, beta, seed):
    r = np.random.default_rng(seed)
    t = random_transform(r, 1.0)
    s1, s2 = r.random(N_CHANNELS), r.random(N_CHANNELS)
    lhs = apply_transform(t, alpha * s1 + beta * s2, clamp=False)
    rhs = alpha * apply_transform(t, s1, clamp=False) + beta * apply_transform(t, s2, clamp=False) - (alpha + beta - 1) * t.b
    np.testing.assert_allclose(lhs, rhs, rtol=1e-9, atol=1e-9)


def test_identical_sets_have_zero_loss(rng):
    s = spectra(rng, 6)
    report = composite_loss(s, s.copy())
    assert report.histogram == report.mean == report.std == report.total == 0.0
    # a permutation only changes the summation order
    assert composite_loss(s, s[::-1]).total < 1e-30


def test_single_spectrum_hand_computation(rng):
    s, t = spectra(rng, 2)
    assert composite_loss(s, s).total == 0.0
    report = composite_loss(s, t)
    assert report.mean == pytest.approx(sum((a - b) ** 2 for a, b in zip(s, t)) / N_CHANNELS, rel=1e-12)
    assert report.std == 0.0


def test_total_is_documented_weighted_sum(rng):
    report = composite_loss(spectra(rng, 5), spectra(rng, 5), weights=(1.0, 1.0, 1.0))
    assert report.total == pytest.approx(report.histogram + report.mean + report.std, rel=1e-15)
    assert min(report.histogram, report.mean, report.std) >= 0


def test_empty_set_is_rejected(rng):
    with pytest.raises(ValueError):
        composite_loss(np.zeros((0, N_CHANNELS)), spectra(rng, 2))


def test_soft_histogram_tends_to_hard_binning():
    spec = HistogramSpec()
    values = spec.centers[[0, 3, 3, 7, 12, 12, 12, 30, 49, 49]] + spec.bin_width * np.linspace(-0.3, 0.3, 10)
    counts = np.zeros(spec.n_bins)
    for v in values:
        counts[int(v // spec.bin_width)] += 1
    hard = counts / len(values)
    np.testing.assert_array_equal(hard_histogram(values, spec), hard)
    errors = [np.abs(soft_histogram(values, HistogramSpec(temperature=t)) - hard).max() for t in (1e-3, 3e-4, 1e-4)]
    assert errors[0] > errors[1] > errors[2] and errors[2] < 1e-9


def _relative_error(analytic, numeric):
    return np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric)


@pytest.mark.parametrize("weights", [(1.0, 1.0, 1.0), (1e-3, 1.0, 1.0), (1.0, 0.0, 0.0)])
def test_gradient_matches_finite_differences(weights):
    r = np.random.default_rng(7)
    S, M = spectra(r, 5), spectra(r, 5)
    t = random_transform(r)
    W, b = t.W.copy(), t.b.copy()
    _, gW, gb = composite_loss_grad(W, b, S, M, weights=weights)

    def total(W_, b_):
        return composite_loss(M, np.maximum(S @ W_.T + b_, 0), weights=weights).total

    h = 1e-5
    entries = [(i, j) for i, j in zip(r.integers(0, N_CHANNELS, 60), r.integers(0, N_CHANNELS, 60))]
    num_W = []
    for i, j in entries:
        Wp, Wm = W.copy(), W.copy()
        Wp[i, j] += h
        Wm[i, j] -= h
        num_W.append((total(Wp, b) - total(Wm, b)) / (2 * h))
    num_b = []
    for i in range(N_CHANNELS):
        bp, bm = b.copy(), b.copy()
        bp[i] += h
        bm[i] -= h
        num_b.append((total(W, bp) - total(W, bm)) / (2 * h))
    assert _relative_error(np.array([gW[i, j] for i, j in entries]), np.array(num_W)) < 1e-3
    assert _relative_error(gb, np.array(num_b)) < 1e-3


def test_adam_first_step_closed_form():
    x = np.array([1.0])
    opt = Adam([x], lr=1e-3)
    opt.step([2 * x])
    # bias-corrected moments are exactly g and g^2 after one step
    assert x[0] == pytest.approx(1.0 - 1e-3 * 2.0 / (2.0 + 1e-8), abs=1e-15)


def test_identity_start_equals_untransformed_loss(rng):
    S, M = spectra(rng, 8), spectra(rng, 8)
    W, b, initial, final = fit_transform(S, M, TransformConfig(steps=0))
    np.testing.assert_array_equal(W, np.eye(N_CHANNELS))
    assert initial.total == final.total == composite_loss(M, S).total


def _pair_from_shift(seed=0):
    ds = generate_dataset(GenerationConfig(seed=seed, species=("pig",), subjects_per_species=1, images_per_subject=1, malperfused_images_per_subject=0, height=24, width=32))
    i = ds.index.image_ids[0]
    cube, mask = ds.cube(i), ds.mask(i)
    sel = mask.labels == KIDNEY
    data = cube.data.copy()
    data[sel] = ds.shifts["pig"].apply(data[sel])
    return (cube, mask), (SpectralCube(data), mask)


def test_learn_transform_reduces_loss_on_exact_shift():
    phys, mal = _pair_from_shift()
    t = learn_transform(phys, mal, KIDNEY, TransformConfig(max_pixels=400))
    assert t.final_loss <= 0.1 * t.initial_loss and not t.loss_increased


def test_zero_steps_returns_identity():
    phys, mal = _pair_from_shift()
    t = learn_transform(phys, mal, KIDNEY, TransformConfig(steps=0))
    np.testing.assert_array_equal(t.W, np.eye(N_CHANNELS))
    assert t.final_loss == t.initial_loss


def test_missing_organ_is_an_empty_region():
    phys, mal = _pair_from_shift()
    empty = SegmentationMask(np.zeros_like(mal[1].labels))
    with pytest.raises(EmptyRegionError):
        learn_transform(phys, (mal[0], empty), KIDNEY, TransformConfig(steps=1))


@pytest.fixture(scope="module")
def pig_dataset():
    return generate_dataset(GenerationConfig(seed=0, species=("pig",), subjects_per_species=4, images_per_subject=2, malperfused_images_per_subject=2, height=24, width=32))


def test_single_pair_provenance():
    ds = generate_dataset(GenerationConfig(seed=1, species=("rat",), subjects_per_species=1, images_per_subject=1, malperfused_images_per_subject=1, height=16, width=24))
    ts = learn_transform_set(ds, KIDNEY, 1, seed=0, config=TransformConfig(steps=2))
    assert len(ts) == 1 and ts.source_species == "rat"
    assert ts[0].pair_ids == ("rat_S00_phys00", "rat_S00_mal01")


def test_transform_set_is_deterministic_and_round_trips(tmp_path, pig_dataset):
    cfg = TransformConfig(steps=5, max_pixels=100)
    a = learn_transform_set(pig_dataset, KIDNEY, 3, seed=9, config=cfg)
    b = learn_transform_set(pig_dataset, KIDNEY, 3, seed=9, config=cfg, n_jobs=2)
    assert a.to_json() == b.to_json()
    a.save(tmp_path / "set.pxt.json")
    back = TransformSet.load(tmp_path / "set.pxt.json")
    for x, y in zip(a, back):
        np.testing.assert_array_equal(x.W, y.W)
        assert x.pair_ids == y.pair_ids


def test_no_malperfused_images(pig_dataset):
    with pytest.raises(UnsatisfiablePairingError):
        learn_transform_set(pig_dataset.subset(pig_dataset.index.filter(perfusion="physiological")), KIDNEY, 1)


@pytest.mark.slow
def test_set_recovers_generator_map(pig_dataset):
    A = pig_dataset.shifts["pig"].A
    ts = learn_transform_set(pig_dataset, KIDNEY, 25, seed=0, config=TransformConfig(max_pixels=300))
    errors = [np.linalg.norm(t.W - A) / np.linalg.norm(A) for t in ts]
    assert np.mean(errors) < RECOVERY_BOUND
    assert np.mean(errors) < np.linalg.norm(np.eye(N_CHANNELS) - A) / np.linalg.norm(A)
