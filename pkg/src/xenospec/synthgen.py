"""Deterministic synthetic multi-species spectral image datasets.

Spectra follow a coarse two-chromophore absorption model on the 100-channel
grid. Each (species, organ) pair gets a baseline spectrum; subjects, images and
pixels add smooth or white perturbations; malperfused images apply a known
linear shift to the perfusion organ before pixel noise.

Random streams are derived with ``numpy.random.SeedSequence(seed,
spawn_key=key)`` where ``key`` is a tuple of small integers naming the stream
(e.g. ``(STREAM_IMAGE, species, subject, image)``). Any stream can therefore be
regenerated independently of all others.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .hsicore import (
    ANGLES,
    BACKGROUND,
    CLASSES,
    KIDNEY,
    N_CHANNELS,
    N_CLASSES,
    SPECIES,
    WAVELENGTHS,
    Dataset,
    DatasetEntry,
    DatasetIndex,
    SegmentationMask,
    SpectralCube,
    class_id,
)

STREAM_SPECIES = 1
STREAM_SUBJECT = 2
STREAM_IMAGE = 3
STREAM_ANGLE = 4
STREAM_REPLICATE = 5
STREAM_ORGAN = 6
STREAM_PERFUSION = 7

# mean channel value of an L1-normalized spectrum; noise scales are relative to it
_UNIT = 1.0 / N_CHANNELS


class LayoutError(ValueError):
    """Raised when the requested organs do not fit the layout grid."""


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key)))


def _gauss(center: float, width: float) -> np.ndarray:
    return np.exp(-0.5 * ((WAVELENGTHS - center) / width) ** 2)


# coarse absorption shapes (arbitrary units) on the fixed grid
EXTINCTION_OXY = 1.0 * _gauss(542, 10) + 1.05 * _gauss(577, 9) + 0.03 * _gauss(920, 80)
EXTINCTION_DEOXY = 1.4 * _gauss(565, 25) + 0.15 * _gauss(760, 12) + 0.02 * _gauss(900, 80)
EXTINCTION_WATER = _gauss(975, 25) + 0.3 * _gauss(840, 60)

# per class: blood content, oxygen fraction, scatter exponent, water weight
ORGAN_TABLE = np.array(
    [
        [0.05, 0.50, -0.2, 0.10],  # background
        [0.90, 0.75, 1.00, 0.30],  # stomach
        [1.10, 0.70, 1.20, 0.35],  # small bowel
        [0.80, 0.70, 0.90, 0.40],  # colon
        [2.00, 0.45, 0.65, 0.50],  # liver
        [0.70, 0.72, 1.30, 0.25],  # pancreas
        [2.00, 0.85, 0.65, 0.50],  # kidney
        [2.50, 0.60, 0.50, 0.55],  # spleen
        [0.40, 0.75, 1.50, 0.15],  # omentum
        [1.20, 0.85, 1.10, 0.30],  # lung
        [0.50, 0.65, 1.40, 0.20],  # skin
        [0.60, 0.70, 1.00, 0.30],  # peritoneum
    ]
)

_FINGERPRINT_SEED = 20240917


def smooth_vector(rng: np.random.Generator, sigma: float = 6.0) -> np.ndarray:
    """Smooth random vector over the channels with unit RMS."""
    v = gaussian_filter1d(rng.standard_normal(N_CHANNELS), sigma, mode="nearest")
    return v / np.sqrt(np.mean(v**2))


def _organ_fingerprints() -> np.ndarray:
    rng = _rng(_FINGERPRINT_SEED, STREAM_ORGAN)
    return np.stack([smooth_vector(rng, 4.0) for _ in range(N_CLASSES)])


ORGAN_FINGERPRINTS = _organ_fingerprints()
FINGERPRINT_SCALE = 0.15


def chromophore_spectrum(
    oxygen_fraction: float,
    blood: float = 1.6,
    scatter: float = 0.8,
    water: float = 0.45,
    fingerprint: np.ndarray | None = None,
) -> np.ndarray:
    """L1-normalized reflectance of a tissue with the given composition."""
    absorption = blood * (oxygen_fraction * EXTINCTION_OXY + (1 - oxygen_fraction) * EXTINCTION_DEOXY)
    absorption = absorption + water * EXTINCTION_WATER
    if fingerprint is not None:
        absorption = absorption + fingerprint
    reflectance = 0.6 * (WAVELENGTHS / 500.0) ** (-scatter) * np.exp(-absorption)
    return reflectance / reflectance.sum()


@dataclass(frozen=True)
class SpeciesProfile:
    species: str
    baselines: np.ndarray  # (n_classes, 100), L1-normalized
    oxygen_fraction: np.ndarray  # (n_classes,)
    sigma_subject: float
    sigma_image: float
    sigma_pixel: float


@dataclass(frozen=True)
class GroundTruthShift:
    """Known physiological -> malperfused map ``s -> max(A s + c, 0)``."""

    A: np.ndarray
    c: np.ndarray
    species: str = ""

    def apply(self, spectra: np.ndarray) -> np.ndarray:
        return np.maximum(spectra @ self.A.T + self.c, 0.0)

    def to_dict(self) -> dict:
        return {"species": self.species, "A": self.A.tolist(), "c": self.c.tolist()}


@dataclass
class LayoutSpec:
    grid: tuple[int, int] = (2, 3)
    organs: tuple[str, ...] = CLASSES[1:]
    organs_per_image: int = 5
    always: tuple[str, ...] = ("kidney",)
    fill: tuple[float, float] = (0.6, 0.9)


@dataclass
class GenerationConfig:
    """Parameters of a synthetic dataset; serializable as JSON."""

    seed: int = 0
    species: tuple[str, ...] = ("pig", "rat", "human")
    subjects_per_species: int = 4
    images_per_subject: int = 3
    malperfused_images_per_subject: int = 1
    height: int = 48
    width: int = 64
    layout: LayoutSpec = field(default_factory=LayoutSpec)
    sigma_subject: float = 0.03
    sigma_image: float = 0.02
    sigma_pixel: float = 0.03
    offset_magnitude: float = 0.15
    shift_strength: float = 1.2
    perfusion_organ: str = "kidney"
    # physiological images get a uniform fraction in [0, perfusion_jitter) of the shift
    perfusion_jitter: float = 0.3
    # organ whose baseline sits beyond the malperfused perfusion organ, so the
    # shift moves spectra towards it; None keeps all organs independent
    lookalike_organ: str | None = "liver"
    lookalike_overshoot: float = 1.5
    lookalike_offset: float = 0.1

    @classmethod
    def from_dict(cls, d: dict) -> "GenerationConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known - {"angles"}
        if unknown:
            raise ValueError(f"unknown generation parameters: {sorted(unknown)}")
        d.pop("angles", None)
        if "layout" in d:
            layout = dict(d["layout"])
            for key in ("grid", "organs", "always", "fill"):
                if key in layout:
                    layout[key] = tuple(layout[key])
            d["layout"] = LayoutSpec(**layout)
        if "species" in d:
            d["species"] = tuple(d["species"])
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def validate(self) -> None:
        for name in ("subjects_per_species", "images_per_subject", "height", "width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.malperfused_images_per_subject < 0:
            raise ValueError("malperfused_images_per_subject must be >= 0")
        for s in self.species:
            if s not in SPECIES:
                raise ValueError(f"unknown species {s!r}")
        if self.lookalike_organ is not None and class_id(self.lookalike_organ) == class_id(self.perfusion_organ):
            raise ValueError("lookalike_organ must differ from perfusion_organ")
        for name in (
            "sigma_subject", "sigma_image", "sigma_pixel", "offset_magnitude", "shift_strength",
            "lookalike_overshoot", "lookalike_offset", "perfusion_jitter",
        ):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


def species_profile(config: GenerationConfig, species: str) -> SpeciesProfile:
    """Baseline organ spectra of one species.

    Blood content and oxygenation vary slightly per species; on top, a species
    wide and a per-organ smooth offset (both scaled by ``offset_magnitude``)
    move the normalized spectra apart.
    """
    idx = SPECIES.index(species)
    rng = _rng(config.seed, STREAM_SPECIES, idx)
    blood_scale = np.exp(0.05 * rng.standard_normal(N_CLASSES))
    oxy = np.clip(ORGAN_TABLE[:, 1] + 0.03 * rng.standard_normal(N_CLASSES), 0.05, 0.95)
    global_offset = smooth_vector(rng, 10.0)
    baselines = np.empty((N_CLASSES, N_CHANNELS))
    for organ in range(N_CLASSES):
        blood, _, scatter, water = ORGAN_TABLE[organ]
        s = chromophore_spectrum(oxy[organ], blood * blood_scale[organ], scatter, water, FINGERPRINT_SCALE * ORGAN_FINGERPRINTS[organ])
        organ_offset = smooth_vector(rng, 5.0)
        # relative offset keeps channels proportional to their level
        s = np.maximum(s * (1.0 + config.offset_magnitude * (global_offset + organ_offset)), 0.0)
        baselines[organ] = s / s.sum()
    if config.lookalike_organ is not None:
        organ, look = class_id(config.perfusion_organ), class_id(config.lookalike_organ)
        u = _shift_vector(config, baselines[organ], oxy[organ])
        # keep part of the lookalike's own character so it stays separable
        s = baselines[organ] + config.lookalike_overshoot * u + config.lookalike_offset * (baselines[look] - baselines[organ])
        s = np.maximum(s, 0.0)
        baselines[look] = s / s.sum()
    return SpeciesProfile(species, baselines, oxy, config.sigma_subject, config.sigma_image, config.sigma_pixel)


def _shift_vector(config: GenerationConfig, s_ref: np.ndarray, oxy: float) -> np.ndarray:
    blood = ORGAN_TABLE[class_id(config.perfusion_organ), 0]
    # ratio of the deoxygenated to the reference absorption model
    drop = config.shift_strength * oxy
    shifted = s_ref * np.exp(-blood * drop * (EXTINCTION_DEOXY - EXTINCTION_OXY))
    return shifted / shifted.sum() - s_ref


def ground_truth_shift(config: GenerationConfig, profile: SpeciesProfile) -> GroundTruthShift:
    """Linear malperfusion map for a species, ``A = I + (1 - k) u 1^T`` and ``c = k u``.

    ``u`` is the change of the normalized perfusion-organ baseline when its
    oxygen fraction drops by ``shift_strength`` (relative). For normalized
    inputs the map adds exactly ``u``; ``u`` sums to zero so outputs stay
    normalized up to clamping.
    """
    organ = class_id(config.perfusion_organ)
    u = _shift_vector(config, profile.baselines[organ], profile.oxygen_fraction[organ])
    k = 0.2
    A = np.eye(N_CHANNELS) + (1 - k) * np.outer(u, np.ones(N_CHANNELS))
    return GroundTruthShift(A, k * u, profile.species)


def make_layout(layout: LayoutSpec, height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    """Rectangular organ regions on a background canvas."""
    rows, cols = layout.grid
    cells = rows * cols
    organs = [class_id(o) for o in layout.organs]
    always = [class_id(o) for o in layout.always]
    if layout.organs_per_image > cells or len(always) > layout.organs_per_image:
        raise LayoutError(
            f"{layout.organs_per_image} organs (with {len(always)} required) do not fit a {rows}x{cols} grid"
        )
    if layout.organs_per_image > len(set(organs) | set(always)):
        raise LayoutError("organs_per_image exceeds the number of available organs")
    if height < 2 * rows or width < 2 * cols:
        raise LayoutError(f"a {height}x{width} canvas is too small for a {rows}x{cols} grid")
    optional = [o for o in organs if o not in always]
    chosen = always + list(rng.choice(optional, layout.organs_per_image - len(always), replace=False))
    cell_ids = rng.permutation(cells)[: len(chosen)]
    labels = np.full((height, width), BACKGROUND, dtype=np.uint8)
    row_edges = np.linspace(0, height, rows + 1).astype(int)
    col_edges = np.linspace(0, width, cols + 1).astype(int)
    for organ, cell in zip(chosen, cell_ids):
        r, c = divmod(int(cell), cols)
        y0, y1 = row_edges[r], row_edges[r + 1]
        x0, x1 = col_edges[c], col_edges[c + 1]
        h = max(1, int(round((y1 - y0) * rng.uniform(*layout.fill))))
        w = max(1, int(round((x1 - x0) * rng.uniform(*layout.fill))))
        oy = y0 + int(rng.integers(0, y1 - y0 - h + 1))
        ox = x0 + int(rng.integers(0, x1 - x0 - w + 1))
        labels[oy : oy + h, ox : ox + w] = organ
    return labels


class SyntheticDataset(Dataset):
    """In-memory dataset plus the generator's ground truth."""

    def __init__(self, index, cubes, masks, profiles, shifts, config):
        super().__init__(index, cubes, masks)
        self.profiles: dict[str, SpeciesProfile] = profiles
        self.shifts: dict[str, GroundTruthShift] = shifts
        self.config: GenerationConfig = config


def _finish(spectra: np.ndarray) -> np.ndarray:
    spectra = np.maximum(spectra, 0.0)
    sums = spectra.sum(axis=-1, keepdims=True)
    # a fully clamped pixel falls back to a flat spectrum
    flat = sums[..., 0] <= 0
    if np.any(flat):
        spectra[flat] = 1.0
        sums[flat] = N_CHANNELS
    return spectra / sums


def render_image(
    profile: SpeciesProfile,
    labels: np.ndarray,
    subject_effect: np.ndarray,
    rng: np.random.Generator,
    shift: GroundTruthShift | None = None,
    shift_organ: int = KIDNEY,
    shift_fraction: float = 1.0,
) -> np.ndarray:
    """Pixel spectra for one labeled canvas; returns a normalized (H, W, 100) array.

    ``shift_fraction`` moves the shifted organ only part of the way to its
    malperfused spectrum.
    """
    image_effect = profile.sigma_image * _UNIT * smooth_vector(rng)
    region_spectra = profile.baselines + subject_effect + image_effect
    if shift is not None:
        region_spectra = region_spectra.copy()
        s = region_spectra[shift_organ]
        region_spectra[shift_organ] = s + shift_fraction * (shift.apply(s) - s)
    data = region_spectra[labels]
    data = data + profile.sigma_pixel * _UNIT * rng.standard_normal(data.shape)
    return _finish(data)


def generate_dataset(config: GenerationConfig | dict | None = None) -> SyntheticDataset:
    """Generate cubes, masks and manifest for every species/subject/image in ``config``."""
    if config is None:
        config = GenerationConfig()
    elif isinstance(config, dict):
        config = GenerationConfig.from_dict(config)
    config.validate()
    organ = class_id(config.perfusion_organ)
    entries, cubes, masks = [], {}, {}
    profiles, shifts = {}, {}
    for sp in config.species:
        sp_idx = SPECIES.index(sp)
        profile = species_profile(config, sp)
        shift = ground_truth_shift(config, profile)
        profiles[sp], shifts[sp] = profile, shift
        for subj in range(config.subjects_per_species):
            subject_id = f"{sp}_S{subj:02d}"
            subject_effect = profile.sigma_subject * _UNIT * smooth_vector(_rng(config.seed, STREAM_SUBJECT, sp_idx, subj))
            n_phys = config.images_per_subject
            for k in range(n_phys + config.malperfused_images_per_subject):
                malperfused = k >= n_phys
                rng = _rng(config.seed, STREAM_IMAGE, sp_idx, subj, k)
                labels = make_layout(config.layout, config.height, config.width, rng)
                if malperfused and organ not in labels:
                    labels[: config.height // 3, : config.width // 3] = organ
                if malperfused:
                    fraction = 1.0
                else:
                    # physiological oxygenation also varies a little between images
                    fraction = config.perfusion_jitter * _rng(config.seed, STREAM_PERFUSION, sp_idx, subj, k).random()
                data = render_image(profile, labels, subject_effect, rng, shift if fraction > 0 else None, organ, fraction)
                tag = "mal" if malperfused else "phys"
                image_id = f"{subject_id}_{tag}{k:02d}"
                entries.append(
                    DatasetEntry(image_id, subject_id, sp, "malperfused" if malperfused else "physiological")
                )
                cubes[image_id] = SpectralCube(data, l1_normalized=True)
                masks[image_id] = SegmentationMask(labels)
    return SyntheticDataset(DatasetIndex(tuple(entries)), cubes, masks, profiles, shifts, config)


def generate_angle_replicates(
    dataset: Dataset,
    angles: tuple[str, ...] = ANGLES,
    repetitions: int = 3,
    angle_scale: float = 0.02,
    repetition_noise: float = 0.01,
    seed: int = 0,
) -> Dataset:
    """Re-record every image under several camera angles and repetitions.

    Each angle adds a fixed smooth offset (the first angle in ``ANGLES`` is the
    reference with zero offset); each repetition adds white noise. Returns a
    dataset holding only the replicates, ``len(angles) * repetitions`` per base
    image, with angle labels in the manifest.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    effects = {}
    for a in angles:
        a_idx = ANGLES.index(a)
        effects[a] = np.zeros(N_CHANNELS) if a_idx == 0 else angle_scale * _UNIT * smooth_vector(_rng(seed, STREAM_ANGLE, a_idx))
    entries, cubes, masks = [], {}, {}
    for img_idx, e in enumerate(dataset.index):
        base = dataset.cube(e.image_id).data
        mask = dataset.mask(e.image_id)
        for a in angles:
            for r in range(repetitions):
                rng = _rng(seed, STREAM_REPLICATE, img_idx, ANGLES.index(a), r)
                if repetition_noise == 0 and not np.any(effects[a]):
                    data = base
                else:
                    data = _finish(base + effects[a] + repetition_noise * _UNIT * rng.standard_normal(base.shape))
                image_id = f"{e.image_id}_a{ANGLES.index(a)}_r{r}"
                entries.append(DatasetEntry(image_id, e.subject_id, e.species, e.perfusion, e.annotation, a))
                cubes[image_id] = SpectralCube(data, l1_normalized=True)
                masks[image_id] = mask
    return Dataset(DatasetIndex(tuple(entries)), cubes, masks)


def base_image_id(image_id: str) -> str:
    """Strip the angle/repetition suffix added by :func:`generate_angle_replicates`."""
    parts = image_id.rsplit("_", 2)
    if len(parts) == 3 and parts[1].startswith("a") and parts[2].startswith("r"):
        return parts[0]
    return image_id


def save_shifts(path: str | Path, shifts: dict[str, GroundTruthShift]) -> None:
    Path(path).write_text(json.dumps({sp: s.to_dict() for sp, s in shifts.items()}))
