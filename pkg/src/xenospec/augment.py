"""Training-time augmentation: affine warps, perfusion transforms, organ transplantation.

The training pipeline applies the steps in a fixed order (see
:func:`augment_image`): affine, then perfusion, then transplantation, then L1
renormalization of the whole image.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import affine_transform

from .hsicore import (
    CLASSES,
    IGNORE,
    EmptyRegionError,
    SegmentationMask,
    SpectralCube,
    check_pair,
    class_id,
    l1_normalize,
)
from .xfer import TransformSet, apply_transform


@dataclass
class AugmentationConfig:
    perfusion_p: float = 0.8
    perfusion_organ: str = "kidney"
    lambda_range: tuple[float, float] = (0.0, 1.0)
    affine_p: float = 1.0
    shift: float = 0.1  # fraction of the image size
    scale: tuple[float, float] = (0.9, 1.1)
    rotate: float = 15.0  # degrees, symmetric range
    flip: bool = True
    transplant_p: float = 0.5

    def __post_init__(self):
        self.lambda_range = tuple(self.lambda_range)
        self.scale = tuple(self.scale)
        for name in ("perfusion_p", "affine_p", "transplant_p"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be a probability, got {value}")
        lo, hi = self.lambda_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError(f"lambda_range must lie within [0, 1], got {self.lambda_range}")
        if self.scale[0] <= 0 or self.scale[1] < self.scale[0]:
            raise ValueError(f"scale range must be positive and ordered, got {self.scale}")
        if self.shift < 0 or self.rotate < 0:
            raise ValueError("shift and rotate ranges must be nonnegative")
        class_id(self.perfusion_organ)

    @classmethod
    def none(cls) -> "AugmentationConfig":
        """Configuration that leaves every image untouched (apart from renormalization)."""
        return cls(perfusion_p=0.0, affine_p=0.0, transplant_p=0.0)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown augmentation parameters: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "AugmentationConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def perfusion_augment(
    cube: SpectralCube,
    mask: SegmentationMask,
    organ: int | str,
    transforms: TransformSet,
    rng: np.random.Generator,
    p: float = 0.8,
    lam: float | None = None,
    lambda_range: tuple[float, float] = (0.0, 1.0),
) -> SpectralCube:
    """Blend the organ's spectra towards a randomly chosen learned transform.

    With probability ``p`` every organ pixel ``s`` becomes
    ``(1 - lam) * s + lam * t(s)`` for one transform ``t`` drawn uniformly from
    the set and one ``lam`` per image; otherwise the cube is returned as is.
    Passing ``lam`` fixes the blend weight. The result is not renormalized.
    """
    if len(transforms) == 0:
        raise ValueError("perfusion augmentation needs a nonempty transform set")
    check_pair(cube, mask)
    # fixed draw order keeps the stream aligned whatever the outcome
    apply = rng.random() < p
    j = int(rng.integers(len(transforms)))
    drawn = rng.uniform(*lambda_range)
    if not apply:
        return cube
    lam = drawn if lam is None else float(lam)
    sel = mask.labels == class_id(organ)
    if not sel.any():
        return cube
    data = cube.data.copy()
    s_p = data[sel]
    data[sel] = (1.0 - lam) * s_p + lam * apply_transform(transforms[j], s_p)
    return SpectralCube(data, l1_normalized=False)


@dataclass(frozen=True)
class AffineParams:
    shift: tuple[float, float] = (0.0, 0.0)  # pixels, (dy, dx)
    scale: float = 1.0
    rotate: float = 0.0  # degrees
    flip_h: bool = False
    flip_v: bool = False

    @property
    def is_identity(self) -> bool:
        return self.shift == (0.0, 0.0) and self.scale == 1.0 and self.rotate == 0.0 and not (self.flip_h or self.flip_v)


def sample_affine(config: AugmentationConfig, shape: tuple[int, int], rng: np.random.Generator) -> AffineParams:
    h, w = shape
    u = rng.random(7)
    if u[0] >= config.affine_p:
        return AffineParams()
    return AffineParams(
        shift=(float((2 * u[1] - 1) * config.shift * h), float((2 * u[2] - 1) * config.shift * w)),
        scale=float(config.scale[0] + u[3] * (config.scale[1] - config.scale[0])),
        rotate=float((2 * u[4] - 1) * config.rotate),
        flip_h=bool(config.flip and u[5] < 0.5),
        flip_v=bool(config.flip and u[6] < 0.5),
    )


def apply_affine(cube: SpectralCube, mask: SegmentationMask, params: AffineParams) -> tuple[SpectralCube, SegmentationMask]:
    """Warp cube (bilinear, per channel) and mask (nearest neighbor) with the same geometry.

    Rotation and scaling are about the image center. Mask pixels that map from
    outside the canvas become IGNORE; the cube repeats its edge there so every
    pixel keeps a valid spectrum.
    """
    check_pair(cube, mask)
    data, labels = cube.data, mask.labels
    if params.flip_h:
        data, labels = data[:, ::-1], labels[:, ::-1]
    if params.flip_v:
        data, labels = data[::-1], labels[::-1]
    if params.scale != 1.0 or params.rotate != 0.0 or params.shift != (0.0, 0.0):
        h, w = labels.shape
        theta = np.deg2rad(params.rotate)
        rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
        # output coordinate o maps to input coordinate matrix @ o + offset
        matrix = rot.T / params.scale
        center = np.array([(h - 1) / 2, (w - 1) / 2])
        offset = center - matrix @ (center + np.asarray(params.shift))
        labels = affine_transform(labels, matrix, offset, order=0, mode="constant", cval=IGNORE, prefilter=False)
        data = np.stack(
            [affine_transform(data[..., c], matrix, offset, order=1, mode="nearest", prefilter=False) for c in range(data.shape[2])],
            axis=-1,
        )
    return SpectralCube(data, cube.l1_normalized), SegmentationMask(labels)


def affine_augment(
    cube: SpectralCube, mask: SegmentationMask, config: AugmentationConfig, rng: np.random.Generator
) -> tuple[SpectralCube, SegmentationMask]:
    params = sample_affine(config, (cube.height, cube.width), rng)
    if params.is_identity:
        return cube, mask
    return apply_affine(cube, mask, params)


def organ_transplant(
    cube_a: SpectralCube,
    mask_a: SegmentationMask,
    cube_b: SpectralCube,
    mask_b: SegmentationMask,
    organ: int | str,
    rng: np.random.Generator,
    position: tuple[int, int] | None = None,
) -> tuple[SpectralCube, SegmentationMask]:
    """Paste the pixels of ``organ`` from image b into image a.

    The organ's bounding box keeps its shape and is placed at a random
    position fully inside canvas a (or at ``position``, the top-left corner).
    Only organ pixels are copied, spectra and labels together; the result is
    L1-renormalized.
    """
    check_pair(cube_a, mask_a)
    check_pair(cube_b, mask_b)
    organ = class_id(organ)
    ys, xs = np.nonzero(mask_b.labels == organ)
    if len(ys) == 0:
        raise EmptyRegionError(f"donor image does not contain {CLASSES[organ]!r}")
    y0, x0 = ys.min(), xs.min()
    bh, bw = ys.max() - y0 + 1, xs.max() - x0 + 1
    if bh > cube_a.height or bw > cube_a.width:
        raise ValueError(f"{CLASSES[organ]!r} region ({bh}x{bw}) is larger than the target canvas")
    if position is None:
        ty = int(rng.integers(0, cube_a.height - bh + 1))
        tx = int(rng.integers(0, cube_a.width - bw + 1))
    else:
        ty, tx = position
        if not (0 <= ty <= cube_a.height - bh and 0 <= tx <= cube_a.width - bw):
            raise ValueError(f"position {position} places the region outside the canvas")
    data = cube_a.data.copy()
    labels = mask_a.labels.copy()
    data[ys - y0 + ty, xs - x0 + tx] = cube_b.data[ys, xs]
    labels[ys - y0 + ty, xs - x0 + tx] = organ
    return l1_normalize(SpectralCube(data)), SegmentationMask(labels)


def augment_image(
    cube: SpectralCube,
    mask: SegmentationMask,
    config: AugmentationConfig,
    rng: np.random.Generator,
    perfusion_rng: np.random.Generator | None = None,
    transforms: TransformSet | None = None,
    donor: tuple[SpectralCube, SegmentationMask] | None = None,
) -> tuple[SpectralCube, SegmentationMask]:
    """Full training augmentation of one image.

    ``rng`` drives the affine and transplantation steps, ``perfusion_rng`` the
    perfusion step only, so training with and without a transform set sees the
    same spatial augmentation stream. The perfusion step runs only when a
    transform set is given.
    """
    cube, mask = affine_augment(cube, mask, config, rng)
    if transforms is not None and len(transforms):
        if perfusion_rng is None:
            raise ValueError("a perfusion rng is required when transforms are given")
        cube = perfusion_augment(
            cube, mask, config.perfusion_organ, transforms, perfusion_rng, config.perfusion_p, lambda_range=config.lambda_range
        )
    do_transplant = rng.random() < config.transplant_p
    if donor is not None:
        donor_classes = [c for c in donor[1].classes() if c != 0]
        pick = int(rng.integers(max(1, len(donor_classes))))
        if do_transplant and donor_classes:
            cube, mask = organ_transplant(cube, mask, donor[0], donor[1], donor_classes[pick], rng)
    return l1_normalize(cube), mask
