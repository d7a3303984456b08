"""Core data model for spectral images: spectra, cubes, masks and dataset manifests.

All spectral data lives on a fixed 100-channel grid covering 500-1000 nm in
5 nm steps. Cubes are stored as ``(height, width, 100)`` float64 arrays in
memory and as little-endian float32 on disk.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

N_CHANNELS = 100
WAVELENGTHS = 500.0 + 5.0 * np.arange(N_CHANNELS)

CLASSES = (
    "background",
    "stomach",
    "small_bowel",
    "colon",
    "liver",
    "pancreas",
    "kidney",
    "spleen",
    "omentum",
    "lung",
    "skin",
    "peritoneum",
)
N_CLASSES = len(CLASSES)
BACKGROUND = 0
KIDNEY = CLASSES.index("kidney")
IGNORE = 255

SPECIES = ("pig", "rat", "human")
PERFUSION_STATES = ("physiological", "malperfused")
ANNOTATION_KINDS = ("semantic", "polygon")
ANGLES = ("perpendicular", "25deg_side_a", "25deg_side_b")

# band limits used by the oxygenation proxy
_BAND_VISIBLE = (570.0, 590.0)
_BAND_NIR = (740.0, 780.0)


class DegeneratePixelError(ValueError):
    """Raised when a pixel spectrum cannot be L1-normalized."""

    def __init__(self, pixel: tuple[int, ...]):
        self.pixel = pixel
        super().__init__(f"pixel {pixel} has an all-zero spectrum and cannot be L1-normalized")


class EmptyRegionError(ValueError):
    """Raised when a requested class has no pixels in a mask."""


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.flags.writeable = False
    return array


def class_id(name_or_id: int | str) -> int:
    if isinstance(name_or_id, str):
        return CLASSES.index(name_or_id)
    return int(name_or_id)


@dataclass(frozen=True)
class Spectrum:
    """A single 100-channel reflectance spectrum."""

    values: np.ndarray
    l1_normalized: bool = False

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != (N_CHANNELS,):
            raise ValueError(f"a spectrum needs exactly {N_CHANNELS} channels, got shape {values.shape}")
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise ValueError("spectrum values must be finite and nonnegative")
        if self.l1_normalized and abs(values.sum() - 1.0) > 1e-6:
            raise ValueError("spectrum flagged as L1-normalized does not sum to 1")
        object.__setattr__(self, "values", _frozen(values))


@dataclass(frozen=True)
class SpectralCube:
    """Height x width raster of spectra.

    Args:
        data: Array of shape ``(height, width, 100)``.
        l1_normalized: Whether every pixel spectrum sums to one.
    """

    data: np.ndarray
    l1_normalized: bool = False

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or data.shape[2] != N_CHANNELS:
            raise ValueError(f"cube data must have shape (height, width, {N_CHANNELS}), got {data.shape}")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise ValueError("cube must be at least 1x1 pixels")
        object.__setattr__(self, "data", _frozen(data))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def spectra(self, selector: np.ndarray | None = None) -> np.ndarray:
        """Return the ``(n, 100)`` spectra of all pixels, or of those where ``selector`` is true."""
        if selector is None:
            return self.data.reshape(-1, N_CHANNELS)
        return self.data[selector]


@dataclass(frozen=True)
class SegmentationMask:
    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise ValueError(f"mask labels must be 2-D, got shape {labels.shape}")
        valid = (labels < N_CLASSES) | (labels == IGNORE)
        if np.any(labels < 0) or not np.all(valid):
            raise ValueError(f"mask labels must be in 0..{N_CLASSES - 1} or {IGNORE}")
        object.__setattr__(self, "labels", _frozen(labels.astype(np.uint8)))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def valid(self) -> np.ndarray:
        return self.labels != IGNORE

    def classes(self) -> list[int]:
        return [int(c) for c in np.unique(self.labels) if c != IGNORE]

    def pixel_counts(self) -> np.ndarray:
        return np.bincount(self.labels[self.valid].ravel(), minlength=N_CLASSES)[:N_CLASSES]


def check_pair(cube: SpectralCube, mask: SegmentationMask) -> None:
    if (cube.height, cube.width) != (mask.height, mask.width):
        raise ValueError(
            f"cube is {cube.height}x{cube.width} but mask is {mask.height}x{mask.width}"
        )


@dataclass(frozen=True)
class DatasetEntry:
    image_id: str
    subject_id: str
    species: str
    perfusion: str = "physiological"
    annotation: str = "semantic"
    angle: str | None = None
    cube_path: str = ""
    mask_path: str = ""

    def __post_init__(self):
        if self.species not in SPECIES:
            raise ValueError(f"unknown species {self.species!r}")
        if self.perfusion not in PERFUSION_STATES:
            raise ValueError(f"unknown perfusion state {self.perfusion!r}")
        if self.annotation not in ANNOTATION_KINDS:
            raise ValueError(f"unknown annotation kind {self.annotation!r}")
        if self.angle is not None and self.angle not in ANGLES:
            raise ValueError(f"unknown angle {self.angle!r}")

    def to_dict(self) -> dict:
        d = {
            "image_id": self.image_id,
            "subject_id": self.subject_id,
            "species": self.species,
            "perfusion": self.perfusion,
            "annotation": self.annotation,
        }
        if self.angle is not None:
            d["angle"] = self.angle
        d["cube_path"] = self.cube_path
        d["mask_path"] = self.mask_path
        return d


@dataclass(frozen=True)
class DatasetIndex:
    """Manifest of images with subject, species and perfusion metadata."""

    entries: tuple[DatasetEntry, ...]
    _by_id: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        entries = tuple(self.entries)
        by_id = {}
        species_of = {}
        for e in entries:
            if e.image_id in by_id:
                raise ValueError(f"duplicate image id {e.image_id!r}")
            by_id[e.image_id] = e
            if species_of.setdefault(e.subject_id, e.species) != e.species:
                raise ValueError(f"subject {e.subject_id!r} is assigned to more than one species")
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "_by_id", by_id)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._by_id

    def __getitem__(self, image_id: str) -> DatasetEntry:
        return self._by_id[image_id]

    @property
    def image_ids(self) -> list[str]:
        return [e.image_id for e in self.entries]

    @property
    def subjects(self) -> list[str]:
        return sorted({e.subject_id for e in self.entries})

    def subject_of(self, image_id: str) -> str:
        return self._by_id[image_id].subject_id

    def filter(self, **criteria) -> "DatasetIndex":
        """Keep entries whose attributes match; values may be a scalar or a collection."""

        def keep(e):
            for key, wanted in criteria.items():
                value = getattr(e, key)
                if isinstance(wanted, (list, tuple, set, frozenset)):
                    if value not in wanted:
                        return False
                elif value != wanted:
                    return False
            return True

        return DatasetIndex(tuple(e for e in self.entries if keep(e)))

    def to_json(self) -> str:
        return json.dumps([e.to_dict() for e in self.entries], indent=1)

    @classmethod
    def from_json(cls, text: str) -> "DatasetIndex":
        raw = json.loads(text)
        if not isinstance(raw, list):
            raise ValueError("manifest must be a JSON array of entries")
        return cls(tuple(DatasetEntry(**item) for item in raw))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "DatasetIndex":
        return cls.from_json(Path(path).read_text())


class Dataset:
    """Dataset index plus access to the cubes and masks it references.

    Images are either held in memory (``cubes``/``masks`` mappings) or loaded
    lazily from the paths in the manifest, relative to ``root``.
    """

    def __init__(
        self,
        index: DatasetIndex,
        cubes: Mapping[str, SpectralCube] | None = None,
        masks: Mapping[str, SegmentationMask] | None = None,
        root: str | Path | None = None,
    ):
        self.index = index
        self._cubes = dict(cubes or {})
        self._masks = dict(masks or {})
        self.root = Path(root) if root is not None else None

    @classmethod
    def from_manifest(cls, path: str | Path) -> "Dataset":
        path = Path(path)
        return cls(DatasetIndex.load(path), root=path.parent)

    def _resolve(self, p: str) -> Path:
        p = Path(p)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def cube(self, image_id: str) -> SpectralCube:
        if image_id not in self._cubes:
            self._cubes[image_id] = read_cube(self._resolve(self.index[image_id].cube_path))
        return self._cubes[image_id]

    def mask(self, image_id: str) -> SegmentationMask:
        if image_id not in self._masks:
            self._masks[image_id] = read_mask(self._resolve(self.index[image_id].mask_path))
        return self._masks[image_id]

    def subset(self, index: DatasetIndex) -> "Dataset":
        return Dataset(index, self._cubes, self._masks, self.root)

    def save(self, out_dir: str | Path) -> DatasetIndex:
        """Write every cube, mask and the manifest below ``out_dir``; returns the written index."""
        out_dir = Path(out_dir)
        (out_dir / "cubes").mkdir(parents=True, exist_ok=True)
        (out_dir / "masks").mkdir(parents=True, exist_ok=True)
        entries = []
        for e in self.index:
            cube_rel = f"cubes/{e.image_id}.hsc"
            mask_rel = f"masks/{e.image_id}.msk"
            write_cube(out_dir / cube_rel, self.cube(e.image_id))
            write_mask(out_dir / mask_rel, self.mask(e.image_id))
            entries.append(
                DatasetEntry(
                    e.image_id, e.subject_id, e.species, e.perfusion, e.annotation, e.angle, cube_rel, mask_rel
                )
            )
        index = DatasetIndex(tuple(entries))
        index.save(out_dir / "manifest.json")
        return index


@dataclass(frozen=True)
class RegionSummary:
    organ: int
    median: np.ndarray
    std: np.ndarray
    pixel_count: int
    subject_id: str = ""
    image_id: str = ""

    def __post_init__(self):
        if self.pixel_count < 1:
            raise ValueError("region summary needs at least one pixel")
        object.__setattr__(self, "median", _frozen(self.median))
        object.__setattr__(self, "std", _frozen(self.std))


def l1_normalize(cube: SpectralCube | np.ndarray) -> SpectralCube | np.ndarray:
    """Divide every pixel spectrum by its channel sum.

    Accepts a :class:`SpectralCube` (returns a flagged cube) or any array whose
    last axis is the spectral axis (returns an array).
    """
    data = cube.data if isinstance(cube, SpectralCube) else np.asarray(cube, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise ValueError("spectra contain non-finite values")
    sums = data.sum(axis=-1, keepdims=True)
    bad = np.argwhere(sums[..., 0] <= 0)
    if len(bad):
        raise DegeneratePixelError(tuple(int(i) for i in bad[0]))
    normalized = data / sums
    if isinstance(cube, SpectralCube):
        return SpectralCube(normalized, l1_normalized=True)
    return normalized


def region_median_spectrum(
    cube: SpectralCube,
    mask: SegmentationMask,
    organ: int | str,
    subject_id: str = "",
    image_id: str = "",
) -> RegionSummary:
    """Per-channel median and standard deviation over all pixels of one class.

    For an even pixel count the lower of the two middle values is used, so the
    median is always one of the observed values.
    """
    check_pair(cube, mask)
    organ = class_id(organ)
    selector = mask.labels == organ
    n = int(selector.sum())
    if n == 0:
        raise EmptyRegionError(f"class {CLASSES[organ]!r} does not occur in the mask")
    spectra = cube.data[selector]
    median = np.sort(spectra, axis=0)[(n - 1) // 2]
    return RegionSummary(organ, median, spectra.std(axis=0), n, subject_id, image_id)


def _band_mask(band: tuple[float, float]) -> np.ndarray:
    return (WAVELENGTHS >= band[0]) & (WAVELENGTHS <= band[1])


def perfusion_index(spectrum: np.ndarray | Spectrum) -> float | np.ndarray:
    """Band-ratio oxygenation proxy in [0, 1].

    ``r = mean(570-590 nm) / mean(740-780 nm)`` is squashed by ``r / (1 + r)``,
    so equal band means give 0.5 and a dark near-infrared band gives 1.0. This
    is a monotone stand-in for a camera StO2 value, not a calibrated
    saturation estimate. Works on the last axis of an array.
    """
    values = spectrum.values if isinstance(spectrum, Spectrum) else np.asarray(spectrum, dtype=np.float64)
    if values.shape[-1] != N_CHANNELS:
        raise ValueError(f"expected {N_CHANNELS} channels, got {values.shape[-1]}")
    if not np.all(np.isfinite(values)) or np.any(values < 0):
        raise ValueError("spectrum values must be finite and nonnegative")
    visible = values[..., _band_mask(_BAND_VISIBLE)].mean(axis=-1)
    nir = values[..., _band_mask(_BAND_NIR)].mean(axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        index = np.where(nir > 0, visible / (visible + nir), 1.0)
    # both bands dark: the ratio is undefined, report the symmetry point
    index = np.where((nir <= 0) & (visible <= 0), 0.5, index)
    return float(index) if index.ndim == 0 else index


# --- file formats -----------------------------------------------------------

_CUBE_MAGIC = b"HSC1"
_MASK_MAGIC = b"MSK1"


def write_cube(path: str | Path, cube: SpectralCube) -> None:
    header = _CUBE_MAGIC + struct.pack("<4I", cube.width, cube.height, N_CHANNELS, int(cube.l1_normalized))
    payload = np.ascontiguousarray(cube.data, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def read_cube(path: str | Path) -> SpectralCube:
    raw = Path(path).read_bytes()
    if raw[:4] != _CUBE_MAGIC:
        raise ValueError(f"{path}: not a cube file (bad magic)")
    width, height, channels, flags = struct.unpack("<4I", raw[4:20])
    if channels != N_CHANNELS:
        raise ValueError(f"{path}: expected {N_CHANNELS} channels, file has {channels}")
    data = np.frombuffer(raw, dtype="<f4", offset=20)
    if data.size != width * height * channels:
        raise ValueError(f"{path}: payload size does not match header")
    return SpectralCube(data.reshape(height, width, channels).astype(np.float64), l1_normalized=bool(flags & 1))


def write_mask(path: str | Path, mask: SegmentationMask) -> None:
    header = _MASK_MAGIC + struct.pack("<2I", mask.width, mask.height)
    Path(path).write_bytes(header + np.ascontiguousarray(mask.labels, dtype=np.uint8).tobytes())


def read_mask(path: str | Path) -> SegmentationMask:
    raw = Path(path).read_bytes()
    if raw[:4] != _MASK_MAGIC:
        raise ValueError(f"{path}: not a mask file (bad magic)")
    width, height = struct.unpack("<2I", raw[4:12])
    labels = np.frombuffer(raw, dtype=np.uint8, offset=12)
    if labels.size != width * height:
        raise ValueError(f"{path}: payload size does not match header")
    return SegmentationMask(labels.reshape(height, width))


def region_summaries(dataset: Dataset, organs: Iterable[int] | None = None) -> list[RegionSummary]:
    """Median spectrum of every (image, organ) region in the dataset, in manifest order."""
    wanted = None if organs is None else {class_id(o) for o in organs}
    out = []
    for e in dataset.index:
        cube, mask = dataset.cube(e.image_id), dataset.mask(e.image_id)
        for organ in mask.classes():
            if wanted is not None and organ not in wanted:
                continue
            out.append(region_median_spectrum(cube, mask, organ, e.subject_id, e.image_id))
    return out
