"""Train a kidney segmenter on physiological human data with and without perfusion augmentation.

Transforms are learned on pig data, where both perfusion states exist. The
human training set holds physiological images only; its malperfused test
images are exactly the shift the baseline never saw.

    python3 demos/02_xeno_augmentation.py
"""

import numpy as np

from xenospec.augment import AugmentationConfig
from xenospec.evalx import hierarchical_aggregate, score_image
from xenospec.hsicore import KIDNEY, perfusion_index, region_median_spectrum
from xenospec.model import PixelClassifier, TrainConfig, ensemble_predict, train
from xenospec.synthgen import GenerationConfig, generate_dataset
from xenospec.xfer import TransformConfig, learn_transform_set

SEED = 1
cfg = GenerationConfig(seed=SEED, species=("pig", "human"), subjects_per_species=6, images_per_subject=3, malperfused_images_per_subject=2, height=32, width=48)
ds = generate_dataset(cfg)

transforms = learn_transform_set(ds, KIDNEY, 8, seed=SEED, config=TransformConfig(max_pixels=300), species="pig")
print(f"learned {len(transforms)} pig kidney transforms")

human = ds.index.filter(species="human")
train_subjects, test_subjects = human.subjects[:4], human.subjects[4:]
train_ids = [e.image_id for e in human if e.subject_id in train_subjects and e.perfusion == "physiological"]
test = {
    p: [e.image_id for e in human if e.subject_id in test_subjects and e.perfusion == p]
    for p in ("physiological", "malperfused")
}
for p, ids in test.items():
    index = np.mean([perfusion_index(region_median_spectrum(ds.cube(i), ds.mask(i), KIDNEY).median) for i in ids])
    print(f"human {p} test kidneys: {len(ids)} images, mean perfusion index {index:.3f}")


def kidney_dsc(model, ids):
    scores = []
    for i in ids:
        pred, _ = ensemble_predict([model], ds.cube(i))
        scores += [s for s in score_image(i, pred, ds.mask(i)) if s.class_id == KIDNEY]
    return hierarchical_aggregate(scores, ds.index).per_class["dsc"][KIDNEY]


tc = TrainConfig(epochs=15, images_per_epoch=48, swa_epochs=3, pixels_per_image=256, lr=1e-2, seed=SEED)
aug = AugmentationConfig(affine_p=0.0, transplant_p=0.5)
print(f"training on {len(train_ids)} physiological human images")
for name, ts in (("baseline", None), ("xeno-augmented", transforms)):
    model, history = train(PixelClassifier.init(seed=SEED), ds, train_ids, tc, aug, ts)
    phys, mal = kidney_dsc(model, test["physiological"]), kidney_dsc(model, test["malperfused"])
    print(f"  {name:15s} final loss {history.records[-1]['train_loss']:.3f}  kidney DSC physiological {phys:.3f}  malperfused {mal:.3f}")
