"""Per-pixel spectral segmentation network and its training protocol.

The network is a small fully connected model applied to every pixel spectrum
independently (100 -> 64 -> 64 -> 12 by default, tanh activations). Training
uses an equally weighted soft Dice + cross-entropy loss over valid pixels,
Adam with an exponentially decaying learning rate, class-balancing image
oversampling and stochastic weight averaging over the last epochs.
"""

from __future__ import annotations

import json
import logging
import struct
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .augment import AugmentationConfig, augment_image
from .hsicore import BACKGROUND, IGNORE, N_CHANNELS, N_CLASSES, Dataset, SpectralCube
from .optim import Adam
from .xfer import TransformSet

logger = logging.getLogger(__name__)

_CHECKPOINT_MAGIC = b"PXC1"

# stream ids for per-image random generators during training
_STREAM_SPATIAL = 1
_STREAM_PERFUSION = 2
_STREAM_PIXELS = 3
_STREAM_EPOCH = 4


class TrainingDivergedError(RuntimeError):
    pass


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class PixelClassifier:
    """Fully connected per-pixel classifier.

    Inputs are L1-normalized spectra; they are rescaled internally by the
    channel count (so a flat spectrum maps to all ones) and shifted to zero.
    """

    def __init__(self, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray]):
        if len(weights) != len(biases) or not weights:
            raise ValueError("need one bias per weight matrix")
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.biases = [np.array(b, dtype=np.float64) for b in biases]
        if self.weights[0].shape[0] != N_CHANNELS:
            raise ValueError(f"first layer must take {N_CHANNELS} inputs")
        for w, b in zip(self.weights, self.biases):
            if b.shape != (w.shape[1],):
                raise ValueError("bias size does not match layer width")
        for w1, w2 in zip(self.weights, self.weights[1:]):
            if w1.shape[1] != w2.shape[0]:
                raise ValueError("layer sizes do not chain")

    @classmethod
    def init(cls, layer_sizes: Sequence[int] = (N_CHANNELS, 64, 64, N_CLASSES), seed: int = 0) -> "PixelClassifier":
        rng = np.random.default_rng(seed)
        weights, biases = [], []
        for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]):
            weights.append(rng.normal(0.0, np.sqrt(1.0 / n_in), (n_in, n_out)))
            biases.append(np.zeros(n_out))
        return cls(weights, biases)

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def n_classes(self) -> int:
        return self.weights[-1].shape[1]

    def parameters(self) -> list[np.ndarray]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def copy(self) -> "PixelClassifier":
        return PixelClassifier([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def forward(self, spectra: np.ndarray) -> tuple[np.ndarray, list]:
        h = spectra * N_CHANNELS - 1.0
        cache = [h]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < len(self.weights) - 1:
                h = np.tanh(h)
            cache.append(h)
        return h, cache

    def backward(self, cache: list, grad_logits: np.ndarray) -> list[np.ndarray]:
        """Gradients in :meth:`parameters` order."""
        grads = []
        g = grad_logits
        for i in reversed(range(len(self.weights))):
            if i < len(self.weights) - 1:
                g = g * (1.0 - cache[i + 1] ** 2)
            grads.append(g.sum(axis=0))
            grads.append(cache[i].T @ g)
            if i > 0:
                g = g @ self.weights[i].T
        return grads[::-1]

    def logits(self, spectra: np.ndarray) -> np.ndarray:
        return self.forward(spectra)[0]

    def predict_proba(self, spectra: np.ndarray) -> np.ndarray:
        spectra = np.asarray(spectra, dtype=np.float64)
        flat = spectra.reshape(-1, N_CHANNELS)
        return softmax(self.logits(flat)).reshape(spectra.shape[:-1] + (self.n_classes,))

    def save(self, path: str | Path) -> None:
        dims = self.layer_sizes
        header = _CHECKPOINT_MAGIC + struct.pack(f"<I{len(dims)}I", len(dims), *dims)
        payload = b"".join(np.ascontiguousarray(p, dtype="<f4").tobytes() for p in self.parameters())
        Path(path).write_bytes(header + payload)

    @classmethod
    def load(cls, path: str | Path) -> "PixelClassifier":
        raw = Path(path).read_bytes()
        if raw[:4] != _CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a classifier checkpoint")
        (n_dims,) = struct.unpack("<I", raw[4:8])
        dims = struct.unpack(f"<{n_dims}I", raw[8 : 8 + 4 * n_dims])
        offset = 8 + 4 * n_dims
        params = np.frombuffer(raw, dtype="<f4", offset=offset).astype(np.float64)
        weights, biases, pos = [], [], 0
        for n_in, n_out in zip(dims[:-1], dims[1:]):
            weights.append(params[pos : pos + n_in * n_out].reshape(n_in, n_out))
            pos += n_in * n_out
            biases.append(params[pos : pos + n_out].copy())
            pos += n_out
        if pos != params.size:
            raise ValueError(f"{path}: parameter count does not match the layer sizes")
        return cls(weights, biases)


def dice_ce_loss(
    logits: np.ndarray, labels: np.ndarray, valid: np.ndarray | None = None, grad: bool = False
) -> float | tuple[float, np.ndarray]:
    """Equally weighted soft Dice loss and cross-entropy over valid pixels.

    The Dice term is averaged over the classes present among the valid
    reference labels. With ``grad=True`` also returns the gradient w.r.t. the
    logits (zero for invalid pixels).
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if valid is None:
        valid = labels != IGNORE
    valid = np.asarray(valid, dtype=bool) & (labels != IGNORE)
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("dice_ce_loss needs at least one valid pixel")
    z = logits[valid]
    y = labels[valid].astype(np.int64)
    n_classes = z.shape[1]
    p = softmax(z)
    onehot = np.zeros_like(p)
    onehot[np.arange(n_valid), y] = 1.0

    log_p = z - z.max(axis=1, keepdims=True)
    log_p = log_p - np.log(np.exp(log_p).sum(axis=1, keepdims=True))
    ce = -log_p[np.arange(n_valid), y].mean()

    present = np.bincount(y, minlength=n_classes) > 0
    inter = (p * onehot).sum(axis=0)
    denom = p.sum(axis=0) + onehot.sum(axis=0)
    dice = 2.0 * inter[present] / denom[present]
    dice_loss = 1.0 - dice.mean()
    loss = 0.5 * dice_loss + 0.5 * ce
    if not grad:
        return float(loss)

    k = present.sum()
    g_p = np.zeros_like(p)
    g_p[:, present] = -(2.0 * onehot[:, present] / denom[present] - 2.0 * inter[present] / denom[present] ** 2) / k
    g_z = p * (g_p - (g_p * p).sum(axis=1, keepdims=True))
    g_z = 0.5 * g_z + 0.5 * (p - onehot) / n_valid
    full = np.zeros_like(logits)
    full[valid] = g_z
    return float(loss), full


def dominant_class(counts: np.ndarray) -> int:
    """Most frequent non-background class, or background if nothing else is present."""
    organ_counts = np.array(counts, dtype=np.int64)
    organ_counts[BACKGROUND] = 0
    if organ_counts.max() <= 0:
        return BACKGROUND
    return int(np.argmax(organ_counts))


def sampling_weights(
    pixel_counts: Mapping[str, np.ndarray], expected_classes: Sequence[int] | None = None
) -> tuple[list[str], np.ndarray]:
    """Image sampling probabilities inversely proportional to the pixel frequency of each image's dominant class."""
    ids = list(pixel_counts)
    totals = np.sum([pixel_counts[i] for i in ids], axis=0)
    if expected_classes is not None:
        missing = [c for c in expected_classes if totals[c] == 0]
        if missing:
            warnings.warn(f"classes {missing} do not occur in the dataset and are not balanced", RuntimeWarning, stacklevel=2)
    dom = np.array([dominant_class(pixel_counts[i]) for i in ids])
    w = 1.0 / totals[dom].astype(np.float64)
    return ids, w / w.sum()


def oversample_epoch(
    pixel_counts: Mapping[str, np.ndarray],
    images_per_epoch: int,
    rng: np.random.Generator,
    expected_classes: Sequence[int] | None = None,
) -> list[str]:
    """Draw ``images_per_epoch`` image ids with replacement, favoring images of rare classes."""
    ids, p = sampling_weights(pixel_counts, expected_classes)
    picks = rng.choice(len(ids), size=images_per_epoch, replace=True, p=p)
    return [ids[i] for i in picks]


@dataclass
class TrainConfig:
    lr: float = 1e-3
    gamma: float = 0.99
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    epochs: int = 100
    images_per_epoch: int = 500
    swa_epochs: int = 10
    oversample: bool = True
    seed: int = 0
    hidden: tuple[int, ...] = (64, 64)
    pixels_per_image: int | None = None  # random valid pixels per image; None uses all

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        for name in ("lr", "gamma", "beta1", "beta2", "eps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("batch_size", "images_per_epoch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.epochs < 0 or self.swa_epochs < 0:
            raise ValueError("epochs and swa_epochs must be nonnegative")
        if self.swa_epochs > max(self.epochs, 0) and self.epochs > 0:
            raise ValueError("swa_epochs cannot exceed epochs")

    @property
    def layer_sizes(self) -> tuple[int, ...]:
        return (N_CHANNELS, *self.hidden, N_CLASSES)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown training parameters: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainHistory:
    records: list[dict] = field(default_factory=list)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.records)

    @property
    def lrs(self) -> list[float]:
        return [r["lr"] for r in self.records]


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def _pixels(cube: SpectralCube, labels: np.ndarray, n: int | None, rng: np.random.Generator):
    valid = np.flatnonzero(labels.ravel() != IGNORE)
    if n is not None and len(valid) > n:
        valid = np.sort(rng.choice(valid, n, replace=False))
    return cube.data.reshape(-1, N_CHANNELS)[valid], labels.ravel()[valid]


def _evaluate_loss(model: PixelClassifier, dataset: Dataset, ids: Sequence[str], config: TrainConfig) -> float:
    losses = []
    for k, image_id in enumerate(ids):
        x, y = _pixels(dataset.cube(image_id), dataset.mask(image_id).labels, config.pixels_per_image, _rng(config.seed, _STREAM_PIXELS, 10**6, k))
        if len(y):
            losses.append(dice_ce_loss(model.logits(x), y))
    return float(np.mean(losses)) if losses else float("nan")


def train(
    model: PixelClassifier,
    dataset: Dataset,
    train_ids: Sequence[str],
    config: TrainConfig | None = None,
    augmentation: AugmentationConfig | None = None,
    transforms: TransformSet | None = None,
    val_ids: Sequence[str] = (),
) -> tuple[PixelClassifier, TrainHistory]:
    """Train a copy of ``model``; returns the weight-averaged model and the per-epoch history.

    Every random decision uses a generator derived from ``(config.seed, stream,
    epoch, slot)``. The perfusion step has its own stream, so runs with and
    without ``transforms`` differ only in that step.
    """
    config = config or TrainConfig()
    augmentation = augmentation or AugmentationConfig()
    train_ids = list(train_ids)
    if not train_ids:
        raise ValueError("no training images")
    model = model.copy()
    params = model.parameters()
    opt = Adam(params, lr=config.lr, betas=(config.beta1, config.beta2), eps=config.eps)
    counts = {i: dataset.mask(i).pixel_counts() for i in train_ids}
    swa, n_swa = None, 0
    history = TrainHistory()
    n_batches = config.images_per_epoch // config.batch_size

    for epoch in range(config.epochs):
        lr = config.lr * config.gamma**epoch
        epoch_rng = _rng(config.seed, _STREAM_EPOCH, epoch)
        if config.oversample:
            ids = oversample_epoch(counts, config.images_per_epoch, epoch_rng)
        else:
            ids = [train_ids[i] for i in epoch_rng.integers(len(train_ids), size=config.images_per_epoch)]
        batch_losses = []
        for batch in range(n_batches):
            xs, ys = [], []
            for slot in range(batch * config.batch_size, (batch + 1) * config.batch_size):
                image_id = ids[slot]
                rng = _rng(config.seed, _STREAM_SPATIAL, epoch, slot)
                donor_id = train_ids[int(rng.integers(len(train_ids)))]
                cube, mask = augment_image(
                    dataset.cube(image_id),
                    dataset.mask(image_id),
                    augmentation,
                    rng,
                    _rng(config.seed, _STREAM_PERFUSION, epoch, slot),
                    transforms,
                    donor=(dataset.cube(donor_id), dataset.mask(donor_id)),
                )
                x, y = _pixels(cube, mask.labels, config.pixels_per_image, _rng(config.seed, _STREAM_PIXELS, epoch, slot))
                xs.append(x)
                ys.append(y)
            x, y = np.concatenate(xs), np.concatenate(ys)
            if len(y) == 0:
                continue
            logits, cache = model.forward(x)
            loss, g = dice_ce_loss(logits, y, grad=True)
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, batch {batch} (lr={lr:.3g})")
            opt.step(model.backward(cache, g), lr=lr)
            batch_losses.append(loss)
        if config.epochs - epoch <= config.swa_epochs:
            if swa is None:
                swa = [p.copy() for p in params]
            else:
                for avg, p in zip(swa, params):
                    avg += (p - avg) / (n_swa + 1)
            n_swa += 1
        record = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": float(np.mean(batch_losses)) if batch_losses else None,
            "val_loss": _evaluate_loss(model, dataset, val_ids, config) if val_ids else None,
        }
        history.records.append(record)
        logger.info("epoch %d lr %.3g train %.4f", epoch, lr, record["train_loss"] or float("nan"))

    if swa is not None:
        for p, avg in zip(params, swa):
            p[...] = avg
    return model, history


def ensemble_predict(models: Sequence[PixelClassifier], cube: SpectralCube | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean softmax over ``models`` and its per-pixel argmax (ties go to the lowest class id)."""
    if not models:
        raise ValueError("ensemble needs at least one model")
    data = cube.data if isinstance(cube, SpectralCube) else np.asarray(cube)
    probs = np.zeros(data.shape[:-1] + (models[0].n_classes,))
    for m in models:
        probs += m.predict_proba(data)
    probs /= len(models)
    return np.argmax(probs, axis=-1), probs
