import numpy as np
import pytest

from xenospec.hsicore import BACKGROUND, KIDNEY, N_CHANNELS, perfusion_index, region_median_spectrum, region_summaries
from xenospec.specan import decompose_spectra, lmm_observations, nn_agreement
from xenospec.synthgen import (
    GenerationConfig,
    LayoutError,
    LayoutSpec,
    base_image_id,
    generate_angle_replicates,
    generate_dataset,
    ground_truth_shift,
    species_profile,
)


def tiny(**kw):
    base = dict(seed=5, species=("pig", "rat"), subjects_per_species=2, images_per_subject=2, height=16, width=24)
    base.update(kw)
    return GenerationConfig(**base)


def test_same_seed_is_byte_identical():
    a, b = generate_dataset(tiny()), generate_dataset(tiny())
    assert a.index == b.index
    for i in a.index.image_ids:
        assert a.cube(i).data.tobytes() == b.cube(i).data.tobytes()
        assert a.mask(i).labels.tobytes() == b.mask(i).labels.tobytes()


def test_different_seed_differs():
    a, b = generate_dataset(tiny()), generate_dataset(tiny(seed=6))
    i = a.index.image_ids[0]
    assert not np.array_equal(a.cube(i).data, b.cube(i).data)


def test_spectra_satisfy_invariants(small_dataset):
    for i in small_dataset.index.image_ids:
        d = small_dataset.cube(i).data
        assert d.shape[-1] == N_CHANNELS and np.all(np.isfinite(d)) and d.min() >= 0
        np.testing.assert_allclose(d.sum(axis=-1), 1.0, atol=1e-6)
        assert BACKGROUND in small_dataset.mask(i).classes()
    mal = small_dataset.index.filter(perfusion="malperfused")
    assert all(KIDNEY in small_dataset.mask(e.image_id).classes() for e in mal)


def test_zero_noise_subjects_share_spectra():
    ds = generate_dataset(tiny(sigma_subject=0, sigma_image=0, sigma_pixel=0, perfusion_jitter=0, malperfused_images_per_subject=0))
    for species in ("pig", "rat"):
        ids = [e.image_id for e in ds.index if e.species == species]
        ref = {}
        for i in ids:
            labels = ds.mask(i).labels
            for organ in ds.mask(i).classes():
                spectrum = ds.cube(i).data[labels == organ][0]
                if organ in ref:
                    np.testing.assert_allclose(spectrum, ref[organ], rtol=0, atol=1e-15)
                else:
                    ref[organ] = spectrum


def test_malperfused_kidney_has_lower_perfusion_index():
    ds = generate_dataset(GenerationConfig(seed=11, subjects_per_species=5, images_per_subject=2, malperfused_images_per_subject=2, height=16, width=24))
    values = {"physiological": [], "malperfused": []}
    for e in ds.index:
        med = region_median_spectrum(ds.cube(e.image_id), ds.mask(e.image_id), KIDNEY).median
        values[e.perfusion].append(perfusion_index(med))
    assert len(values["malperfused"]) >= 30
    assert np.mean(values["malperfused"]) < np.mean(values["physiological"])


def test_shift_adds_u_to_normalized_spectra():
    cfg = GenerationConfig()
    profile = species_profile(cfg, "pig")
    shift = ground_truth_shift(cfg, profile)
    s = profile.baselines[KIDNEY]
    u = (shift.A - np.eye(N_CHANNELS)) @ s / 0.8
    np.testing.assert_allclose(shift.A @ s + shift.c, s + u, atol=1e-15)
    assert abs(u.sum()) < 1e-12
    assert np.all(shift.apply(profile.baselines) >= 0)


def test_layout_error():
    with pytest.raises(LayoutError):
        generate_dataset(tiny(layout=LayoutSpec(grid=(1, 2), organs_per_image=3)))
    with pytest.raises(LayoutError):
        generate_dataset(tiny(height=2, width=2))


def test_config_validation():
    with pytest.raises(ValueError):
        GenerationConfig.from_dict({"species": ["dog"]})
    with pytest.raises(ValueError):
        GenerationConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        tiny(lookalike_organ="kidney").validate()
    assert GenerationConfig.from_dict(tiny().to_dict()) == tiny()


def test_replicate_counts_and_labels():
    ds = generate_dataset(tiny())
    rep = generate_angle_replicates(ds)
    assert len(rep.index) == 9 * len(ds.index)
    assert {e.angle for e in rep.index} == {"perpendicular", "25deg_side_a", "25deg_side_b"}
    assert {base_image_id(i) for i in rep.index.image_ids} == set(ds.index.image_ids)


def test_single_noiseless_replicate_equals_base():
    ds = generate_dataset(tiny())
    rep = generate_angle_replicates(ds, angles=("perpendicular",), repetitions=1, repetition_noise=0.0)
    for e in ds.index:
        np.testing.assert_array_equal(rep.cube(f"{e.image_id}_a0_r0").data, ds.cube(e.image_id).data)


@pytest.mark.slow
def test_zero_angle_effect_gets_no_variance():
    ds = generate_dataset(GenerationConfig(seed=2, species=("pig", "rat"), subjects_per_species=3, images_per_subject=2, malperfused_images_per_subject=0, height=12, width=18))
    rep = generate_angle_replicates(ds, angle_scale=0.0, seed=1)
    Y, design = lmm_observations(rep, KIDNEY)
    dec = decompose_spectra(Y[:, ::10], design, KIDNEY)
    assert np.all(dec.proportions[:, 1] < 0.02)


def test_offset_magnitude_lowers_nn_agreement():
    def diagonal(offset):
        ds = generate_dataset(GenerationConfig(seed=4, species=("pig", "human"), subjects_per_species=3, images_per_subject=3, malperfused_images_per_subject=0, height=16, width=24, offset_magnitude=offset))
        summ = region_summaries(ds)
        q = [s for s in summ if ds.index[s.image_id].species == "pig" and s.organ != BACKGROUND]
        n = [s for s in summ if ds.index[s.image_id].species == "human" and s.organ != BACKGROUND]
        return nn_agreement(q, n).diagonal_mass()

    assert diagonal(1.0) < diagonal(0.0)
