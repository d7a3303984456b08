"""Simulator for the nested random-intercept model used by the LMM tests."""

import numpy as np

from xenospec.specan import LmmDesign

ANGLE_LEVELS = ("perpendicular", "25deg_side_a", "25deg_side_b")


def simulate(seed, s2_subject=4.0, s2_image=1.0, s2_residual=0.25, n_subjects=24, n_images=10, n_reps=3,
             species_effect=0.0, angle_effect=0.0, n_first_species=11, two_species=True, angles=True):
    """Draw one response vector; returns ``(y, design)``.

    Subjects ``0..n_first_species-1`` are pigs, the rest rats. Repetition ``k``
    of an image is recorded under angle ``k mod 3``.
    """
    r = np.random.default_rng(seed)
    species, angle, subject, image, y = [], [], [], [], []
    for s in range(n_subjects):
        rat = two_species and s >= n_first_species
        d = r.normal(0.0, np.sqrt(s2_subject))
        for i in range(n_images):
            g = r.normal(0.0, np.sqrt(s2_image))
            for k in range(n_reps):
                a = k % 3 if angles else 0
                species.append("rat" if rat else "pig")
                angle.append(ANGLE_LEVELS[a])
                subject.append(f"s{s:02d}")
                image.append(f"i{i:02d}")
                y.append(1.0 + species_effect * rat + angle_effect * a + d + g + r.normal(0.0, np.sqrt(s2_residual)))
    return np.array(y), LmmDesign.from_labels(species, angle, subject, image)
