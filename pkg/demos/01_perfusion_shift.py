"""Learn a perfusion shift between physiological and malperfused kidney spectra.

A synthetic pig dataset is generated, one physiological/malperfused pair from
different subjects is matched, and a 100x100 linear map (plus bias) is fitted
to move the physiological spectra onto the malperfused distribution.

    python3 demos/01_perfusion_shift.py
"""

import numpy as np

from xenospec.hsicore import KIDNEY, WAVELENGTHS, perfusion_index, region_median_spectrum
from xenospec.synthgen import GenerationConfig, generate_dataset
from xenospec.xfer import TransformConfig, apply_transform, learn_transform, learn_transform_set

ds = generate_dataset(GenerationConfig(seed=0, species=("pig",), subjects_per_species=4))
print(f"{len(ds.index)} images from {len(ds.index.subjects)} pigs")

phys_id = ds.index.filter(perfusion="physiological").image_ids[0]
subject = ds.index[phys_id].subject_id
mal_id = next(e.image_id for e in ds.index if e.perfusion == "malperfused" and e.subject_id != subject)
phys = (ds.cube(phys_id), ds.mask(phys_id))
mal = (ds.cube(mal_id), ds.mask(mal_id))
print(f"pair: {phys_id} -> {mal_id}")

for name, (cube, mask) in (("physiological", phys), ("malperfused", mal)):
    median = region_median_spectrum(cube, mask, KIDNEY).median
    print(f"  {name:13s} kidney perfusion index {perfusion_index(median):.3f}")

t = learn_transform(phys, mal, KIDNEY, TransformConfig())
print(f"composite loss {t.initial_loss:.4g} -> {t.final_loss:.4g} after {TransformConfig().steps} Adam steps")

sel = phys[1].labels == KIDNEY
moved = apply_transform(t, phys[0].data[sel])
target = mal[0].data[mal[1].labels == KIDNEY].mean(axis=0)
before = np.linalg.norm(phys[0].data[sel].mean(axis=0) - target) / np.linalg.norm(target)
after = np.linalg.norm(moved.mean(axis=0) - target) / np.linalg.norm(target)
print(f"relative distance of the mean spectrum to the malperfused mean: {before:.3f} before, {after:.3f} after")
print(f"perfusion index of the transformed median: {perfusion_index(np.median(moved, axis=0)):.3f}")

# where does the map move reflectance? report the most changed bands
delta = moved.mean(axis=0) - phys[0].data[sel].mean(axis=0)
for k in np.argsort(-np.abs(delta))[:3]:
    print(f"  {WAVELENGTHS[k]:.0f} nm: {delta[k]:+.2e}")

# a set of transforms from randomly drawn pairs is what the augmentation samples from
ts = learn_transform_set(ds, KIDNEY, 4, seed=1, config=TransformConfig(max_pixels=300))
for tr in ts:
    print(f"  {tr.pair_ids[0]} -> {tr.pair_ids[1]}: loss {tr.initial_loss:.3g} -> {tr.final_loss:.3g}")
