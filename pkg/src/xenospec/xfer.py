"""Learning linear perfusion transforms between physiological and malperfused spectra.

A transform maps a physiological spectrum ``s`` to ``max(W s + b, 0)``. Because
the spectra of two images cannot be matched pixel by pixel, ``W`` and ``b`` are
fitted by matching distributions: a 50-bin histogram of all reflectance values,
the mean spectrum and the per-channel standard deviation spectrum.
"""

from __future__ import annotations

import json
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .hsicore import (
    CLASSES,
    KIDNEY,
    N_CHANNELS,
    Dataset,
    EmptyRegionError,
    SegmentationMask,
    SpectralCube,
    check_pair,
    class_id,
)
from .optim import Adam

logger = logging.getLogger(__name__)

TRANSFORM_SET_SCHEMA = 1

# histogram, mean-spectrum and std-spectrum weights; the histogram MSE is about
# 50x larger than the spectrum terms and its kernel landscape is rugged at the
# Adam step size, so it is down-weighted
DEFAULT_WEIGHTS = (1e-3, 1.0, 1.0)


@dataclass(frozen=True)
class PerfusionTransform:
    W: np.ndarray
    b: np.ndarray
    source_species: str = ""
    pair_ids: tuple[str, str] = ("", "")
    final_loss: float = float("nan")
    initial_loss: float = float("nan")
    loss_increased: bool = False

    def __post_init__(self):
        W = np.array(self.W, dtype=np.float64)
        b = np.array(self.b, dtype=np.float64)
        if W.shape != (N_CHANNELS, N_CHANNELS) or b.shape != (N_CHANNELS,):
            raise ValueError(f"transform needs W of shape ({N_CHANNELS}, {N_CHANNELS}) and b of shape ({N_CHANNELS},)")
        W.flags.writeable = False
        b.flags.writeable = False
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "pair_ids", tuple(self.pair_ids))

    @classmethod
    def identity(cls, **kwargs) -> "PerfusionTransform":
        return cls(np.eye(N_CHANNELS), np.zeros(N_CHANNELS), **kwargs)

    @property
    def n_parameters(self) -> int:
        return self.W.size + self.b.size

    def __call__(self, spectra: np.ndarray) -> np.ndarray:
        return apply_transform(self, spectra)


@dataclass(frozen=True)
class TransformSet:
    transforms: tuple[PerfusionTransform, ...]
    source_species: str = ""

    def __post_init__(self):
        object.__setattr__(self, "transforms", tuple(self.transforms))

    def __len__(self) -> int:
        return len(self.transforms)

    def __getitem__(self, i: int) -> PerfusionTransform:
        return self.transforms[i]

    def __iter__(self):
        return iter(self.transforms)

    def to_json(self) -> str:
        def num(x):
            # repr of a float round-trips exactly; NaN is not valid JSON
            return None if not np.isfinite(x) else float(x)

        payload = {
            "schema_version": TRANSFORM_SET_SCHEMA,
            "source_species": self.source_species,
            "transforms": [
                {
                    "pair_ids": list(t.pair_ids),
                    "final_loss": num(t.final_loss),
                    "initial_loss": num(t.initial_loss),
                    "W": t.W.tolist(),
                    "b": t.b.tolist(),
                }
                for t in self.transforms
            ],
        }
        return json.dumps(payload)

    @classmethod
    def from_json(cls, text: str) -> "TransformSet":
        raw = json.loads(text)
        if raw.get("schema_version") != TRANSFORM_SET_SCHEMA:
            raise ValueError(f"unsupported transform set schema {raw.get('schema_version')!r}")
        species = raw.get("source_species", "")
        transforms = []
        for item in raw["transforms"]:
            final = item.get("final_loss")
            initial = item.get("initial_loss")
            transforms.append(
                PerfusionTransform(
                    np.array(item["W"], dtype=np.float64),
                    np.array(item["b"], dtype=np.float64),
                    species,
                    tuple(item.get("pair_ids", ("", ""))),
                    float("nan") if final is None else final,
                    float("nan") if initial is None else initial,
                )
            )
        return cls(tuple(transforms), species)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "TransformSet":
        return cls.from_json(Path(path).read_text())


def apply_transform(t: PerfusionTransform, spectra: np.ndarray, clamp: bool = True) -> np.ndarray:
    """``W s + b`` for every spectrum along the last axis, clamped at zero unless ``clamp=False``."""
    spectra = np.asarray(spectra, dtype=np.float64)
    if spectra.shape[-1] != N_CHANNELS:
        raise ValueError(f"expected {N_CHANNELS} channels, got {spectra.shape[-1]}")
    out = spectra @ t.W.T + t.b
    return np.maximum(out, 0.0) if clamp else out


@dataclass(frozen=True)
class CompositeLossReport:
    histogram: float
    mean: float
    std: float
    weights: tuple[float, float, float] = DEFAULT_WEIGHTS

    @property
    def total(self) -> float:
        w = self.weights
        return w[0] * self.histogram + w[1] * self.mean + w[2] * self.std


@dataclass
class HistogramSpec:
    n_bins: int = 50
    range: tuple[float, float] = (0.0, 0.1)
    temperature: float | None = None  # Gaussian kernel width; None means half a bin

    @property
    def bin_width(self) -> float:
        return (self.range[1] - self.range[0]) / self.n_bins

    @property
    def centers(self) -> np.ndarray:
        return self.range[0] + self.bin_width * (np.arange(self.n_bins) + 0.5)

    @property
    def sigma(self) -> float:
        return self.bin_width / 2 if self.temperature is None else self.temperature


def _soft_assign(x: np.ndarray, spec: HistogramSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Soft bin memberships of each value over a window of bins around it.

    Returns ``(bins, a, dz)`` of shape ``(len(x), window)``: bin indices, the
    memberships (rows sum to one) and the derivative of each kernel logit
    w.r.t. the value. Bins farther than 8 kernel widths carry no weight in
    float64 and are skipped.
    """
    sigma = spec.sigma
    k = spec.n_bins
    half = int(np.ceil(8 * sigma / spec.bin_width)) + 1
    if 2 * half + 1 >= k:
        bins = np.broadcast_to(np.arange(k), (x.size, k))
    else:
        nearest = np.clip(np.floor((x - spec.range[0]) / spec.bin_width), 0, k - 1).astype(np.int64)
        lo = np.clip(nearest - half, 0, k - 2 * half - 1)
        bins = lo[:, None] + np.arange(2 * half + 1)[None, :]
    diff = x[:, None] - spec.centers[bins]
    logits = -0.5 * (diff / sigma) ** 2
    logits -= logits.max(axis=1, keepdims=True)
    a = np.exp(logits)
    a /= a.sum(axis=1, keepdims=True)
    return bins, a, -diff / sigma**2


def soft_histogram(values: np.ndarray, spec: HistogramSpec | None = None) -> np.ndarray:
    """Fraction of values per bin using Gaussian soft binning; out-of-range mass goes to edge bins."""
    spec = spec or HistogramSpec()
    x = np.asarray(values, dtype=np.float64).ravel()
    hist = np.zeros(spec.n_bins)
    for chunk in np.array_split(x, max(1, x.size // 200_000 + 1)):
        if chunk.size:
            bins, a, _ = _soft_assign(chunk, spec)
            hist += np.bincount(bins.ravel(), weights=a.ravel(), minlength=spec.n_bins)
    return hist / x.size


def hard_histogram(values: np.ndarray, spec: HistogramSpec | None = None) -> np.ndarray:
    """Fraction of values per bin with ordinary binning; out-of-range values go to edge bins."""
    spec = spec or HistogramSpec()
    x = np.asarray(values, dtype=np.float64).ravel()
    idx = np.clip(np.floor((x - spec.range[0]) / spec.bin_width).astype(np.int64), 0, spec.n_bins - 1)
    return np.bincount(idx, minlength=spec.n_bins) / x.size


@dataclass
class _TargetStats:
    hist: np.ndarray
    mean: np.ndarray
    std: np.ndarray


def _target_stats(target: np.ndarray, spec: HistogramSpec, hard: bool = False) -> _TargetStats:
    hist = hard_histogram(target, spec) if hard else soft_histogram(target, spec)
    return _TargetStats(hist, target.mean(axis=0), target.std(axis=0))


def _check_set(spectra: np.ndarray, name: str) -> np.ndarray:
    spectra = np.asarray(spectra, dtype=np.float64)
    if spectra.ndim == 1:
        spectra = spectra[None]
    if spectra.ndim != 2 or spectra.shape[1] != N_CHANNELS:
        raise ValueError(f"{name} must have shape (n, {N_CHANNELS}), got {spectra.shape}")
    if spectra.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    return spectra


def composite_loss(
    target: np.ndarray,
    transformed: np.ndarray,
    histogram: HistogramSpec | None = None,
    weights: tuple[float, float, float] = DEFAULT_WEIGHTS,
    hard: bool = False,
) -> CompositeLossReport:
    """Distribution distance between malperfused spectra and transformed physiological spectra.

    Each term is a mean squared error: between the two value histograms,
    between the mean spectra and between the standard deviation spectra.
    ``hard=True`` uses ordinary binning instead of the differentiable soft
    histogram.
    """
    spec = histogram or HistogramSpec()
    target = _check_set(target, "target set")
    transformed = _check_set(transformed, "transformed set")
    tgt = _target_stats(target, spec, hard)
    h = hard_histogram(transformed, spec) if hard else soft_histogram(transformed, spec)
    return CompositeLossReport(
        float(np.mean((h - tgt.hist) ** 2)),
        float(np.mean((transformed.mean(axis=0) - tgt.mean) ** 2)),
        float(np.mean((transformed.std(axis=0) - tgt.std) ** 2)),
        tuple(weights),
    )


def _loss_and_grad_outputs(
    T: np.ndarray, tgt: _TargetStats, spec: HistogramSpec, weights
) -> tuple[CompositeLossReport, np.ndarray]:
    """Composite loss and its gradient w.r.t. the transformed spectra ``T``."""
    n, c = T.shape
    k = spec.n_bins
    x = T.ravel()
    # histogram term, chunked over values to bound memory
    hist = np.zeros(k)
    chunks = np.array_split(np.arange(x.size), max(1, x.size // 100_000 + 1))
    cache = []
    for idx in chunks:
        bins, a, dz = _soft_assign(x[idx], spec)
        hist += np.bincount(bins.ravel(), weights=a.ravel(), minlength=k)
        cache.append((idx, bins, a, dz))
    hist /= x.size
    dh = 2.0 * (hist - tgt.hist) / k
    grad_x = np.empty(x.size)
    for idx, bins, a, dz in cache:
        ga = a * dh[bins]
        grad_x[idx] = ((ga * dz).sum(axis=1) - ga.sum(axis=1) * (a * dz).sum(axis=1)) / x.size
    grad = weights[0] * grad_x.reshape(n, c)

    mean = T.mean(axis=0)
    d_mean = mean - tgt.mean
    grad += weights[1] * (2.0 * d_mean / c / n)[None, :]

    centered = T - mean
    std = np.sqrt(np.mean(centered**2, axis=0))
    d_std = std - tgt.std
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(std > 0, 2.0 * d_std / c / (n * std), 0.0)
    grad += weights[2] * centered * scale[None, :]

    report = CompositeLossReport(
        float(np.mean((hist - tgt.hist) ** 2)), float(np.mean(d_mean**2)), float(np.mean(d_std**2)), tuple(weights)
    )
    return report, grad


def composite_loss_grad(
    W: np.ndarray,
    b: np.ndarray,
    physiological: np.ndarray,
    target: np.ndarray,
    histogram: HistogramSpec | None = None,
    weights: tuple[float, float, float] = DEFAULT_WEIGHTS,
) -> tuple[CompositeLossReport, np.ndarray, np.ndarray]:
    """Composite loss of ``max(W s + b, 0)`` against ``target`` and its gradients w.r.t. ``W`` and ``b``."""
    spec = histogram or HistogramSpec()
    S = _check_set(physiological, "physiological set")
    tgt = _target_stats(_check_set(target, "target set"), spec)
    return _loss_grad_params(W, b, S, tgt, spec, weights)


def _loss_grad_params(W, b, S, tgt, spec, weights):
    Z = S @ W.T + b
    T = np.maximum(Z, 0.0)
    report, grad_T = _loss_and_grad_outputs(T, tgt, spec, weights)
    grad_Z = grad_T * (Z >= 0)
    return report, grad_Z.T @ S, grad_Z.sum(axis=0)


@dataclass
class TransformConfig:
    steps: int = 100
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    histogram: HistogramSpec = field(default_factory=HistogramSpec)
    weights: tuple[float, float, float] = DEFAULT_WEIGHTS
    max_pixels: int | None = None  # subsample large regions; None keeps all pixels

    @classmethod
    def from_dict(cls, d: dict) -> "TransformConfig":
        d = dict(d)
        if "histogram" in d:
            h = dict(d["histogram"])
            if "range" in h:
                h["range"] = tuple(h["range"])
            d["histogram"] = HistogramSpec(**h)
        if "weights" in d:
            d["weights"] = tuple(d["weights"])
        return cls(**d)


def _organ_spectra(cube: SpectralCube, mask: SegmentationMask, organ: int, image_id: str = "") -> np.ndarray:
    check_pair(cube, mask)
    sel = mask.labels == organ
    if not sel.any():
        where = f" in image {image_id!r}" if image_id else ""
        raise EmptyRegionError(f"class {CLASSES[organ]!r} does not occur{where}")
    return cube.data[sel]


def _subsample(spectra: np.ndarray, max_pixels: int | None, rng: np.random.Generator) -> np.ndarray:
    if max_pixels is None or len(spectra) <= max_pixels:
        return spectra
    return spectra[np.sort(rng.choice(len(spectra), max_pixels, replace=False))]


def fit_transform(
    physiological: np.ndarray,
    malperfused: np.ndarray,
    config: TransformConfig | None = None,
    history: list | None = None,
) -> tuple[np.ndarray, np.ndarray, CompositeLossReport, CompositeLossReport]:
    """Fit ``W, b`` on two spectra sets; returns ``(W, b, initial_report, final_report)``."""
    config = config or TransformConfig()
    S = _check_set(physiological, "physiological set")
    tgt = _target_stats(_check_set(malperfused, "malperfused set"), config.histogram)
    W = np.eye(N_CHANNELS)
    b = np.zeros(N_CHANNELS)
    opt = Adam([W, b], lr=config.lr, betas=(config.beta1, config.beta2), eps=config.eps)
    initial = None
    for _ in range(config.steps):
        report, gW, gb = _loss_grad_params(W, b, S, tgt, config.histogram, config.weights)
        if initial is None:
            initial = report
        if history is not None:
            history.append(report.total)
        opt.step([gW, gb])
    T = np.maximum(S @ W.T + b, 0.0)
    final, _ = _loss_and_grad_outputs(T, tgt, config.histogram, config.weights)
    if initial is None:
        initial = final
    if history is not None:
        history.append(final.total)
    return W, b, initial, final


def learn_transform(
    physiological: tuple[SpectralCube, SegmentationMask],
    malperfused: tuple[SpectralCube, SegmentationMask],
    organ: int | str = KIDNEY,
    config: TransformConfig | None = None,
    seed: int = 0,
    pair_ids: tuple[str, str] = ("", ""),
    source_species: str = "",
) -> PerfusionTransform:
    """Fit one transform on the organ pixels of a (physiological, malperfused) image pair.

    Runs exactly ``config.steps`` full-batch Adam iterations starting from the
    identity. If the final loss exceeds the initial one, the transform is
    still returned but flagged with ``loss_increased`` and a warning is issued.
    """
    config = config or TransformConfig()
    organ = class_id(organ)
    rng = np.random.default_rng(seed)
    S_p = _subsample(_organ_spectra(*physiological, organ, pair_ids[0]), config.max_pixels, rng)
    S_m = _subsample(_organ_spectra(*malperfused, organ, pair_ids[1]), config.max_pixels, rng)
    W, b, initial, final = fit_transform(S_p, S_m, config)
    increased = final.total > initial.total
    if increased:
        warnings.warn(
            f"transform for pair {pair_ids} ended with a higher loss ({final.total:.3g}) than it started ({initial.total:.3g})",
            RuntimeWarning,
            stacklevel=2,
        )
    return PerfusionTransform(W, b, source_species, pair_ids, final.total, initial.total, increased)


class UnsatisfiablePairingError(ValueError):
    """Raised when no (physiological, malperfused) pair can be formed."""


def learn_transform_set(
    dataset: Dataset,
    organ: int | str = KIDNEY,
    n_pairs: int = 10,
    seed: int = 0,
    config: TransformConfig | None = None,
    species: str | None = None,
    n_jobs: int = 1,
) -> TransformSet:
    """Learn ``n_pairs`` transforms from uniformly drawn image pairs.

    Physiological and malperfused images are drawn independently, so a pair
    may span two subjects. Pair ``i`` uses the sub-seed ``(seed, i)``; the result
    does not depend on ``n_jobs``.
    """
    organ = class_id(organ)
    index = dataset.index if species is None else dataset.index.filter(species=species)
    phys = [e.image_id for e in index if e.perfusion == "physiological" and organ in dataset.mask(e.image_id).classes()]
    mal = [e.image_id for e in index if e.perfusion == "malperfused" and organ in dataset.mask(e.image_id).classes()]
    if not mal:
        raise UnsatisfiablePairingError(f"no malperfused images showing {CLASSES[organ]!r}")
    if not phys:
        raise UnsatisfiablePairingError(f"no physiological images showing {CLASSES[organ]!r}")
    if species is None:
        found = {index[i].species for i in phys + mal}
        species = found.pop() if len(found) == 1 else "+".join(sorted(found))

    rng = np.random.default_rng(np.random.SeedSequence(seed))
    pairs = [(phys[rng.integers(len(phys))], mal[rng.integers(len(mal))]) for _ in range(n_pairs)]

    def fit(i):
        p, m = pairs[i]
        logger.info("learning transform %d/%d from %s -> %s", i + 1, n_pairs, p, m)
        return learn_transform(
            (dataset.cube(p), dataset.mask(p)),
            (dataset.cube(m), dataset.mask(m)),
            organ,
            config,
            seed=int(np.random.SeedSequence(seed, spawn_key=(i,)).generate_state(1)[0]),
            pair_ids=(p, m),
            source_species=species,
        )

    if n_jobs > 1:
        # load images up front so worker threads only read
        for p, m in pairs:
            dataset.cube(p), dataset.cube(m)
        with ThreadPoolExecutor(n_jobs) as pool:
            transforms = list(pool.map(fit, range(n_pairs)))
    else:
        transforms = [fit(i) for i in range(n_pairs)]
    return TransformSet(tuple(transforms), species)
