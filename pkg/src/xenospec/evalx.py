"""Segmentation metrics, hierarchical aggregation, bootstrap CIs and subject-level folds.

Scores are aggregated bottom-up: images of one subject are averaged first, then
subjects per class, then classes. A subject with many images therefore weighs
as much as a subject with one.
"""

from __future__ import annotations

import csv
import io
import json
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import distance_transform_edt

from .hsicore import CLASSES, IGNORE, Dataset, DatasetIndex, SegmentationMask, class_id

DEFAULT_TAU = 2.0


class PolygonAnnotationError(ValueError):
    """NSD is refused for polygon annotations, whose outlines are not pixel accurate."""


def _labels(mask) -> np.ndarray:
    return mask.labels if isinstance(mask, SegmentationMask) else np.asarray(mask)


def _pair(pred, ref) -> tuple[np.ndarray, np.ndarray]:
    p, r = _labels(pred), _labels(ref)
    if p.shape != r.shape:
        raise ValueError(f"mask shapes differ: {p.shape} vs {r.shape}")
    return p, r


def dsc(pred, ref, cls: int | str) -> float:
    """Dice similarity of one class; 1.0 when the class is absent from both masks."""
    p, r = _pair(pred, ref)
    c = class_id(cls) if isinstance(cls, str) else int(cls)
    P, R = p == c, r == c
    total = int(P.sum()) + int(R.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((P & R).sum()) / total


def boundary(region: np.ndarray) -> np.ndarray:
    """Pixels of ``region`` with a 4-neighbor outside it or outside the canvas."""
    region = np.asarray(region, dtype=bool)
    padded = np.pad(region, 1, constant_values=False)
    interior = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return region & ~interior


def _distance_to(target: np.ndarray) -> np.ndarray:
    # Euclidean distance of every pixel to the nearest True pixel of target
    return distance_transform_edt(~target)


def nsd(pred, ref, cls: int | str, tau: float = DEFAULT_TAU, annotation: str = "semantic") -> float:
    """Normalized surface distance (surface Dice) at tolerance ``tau`` pixels.

    Counts the boundary pixels of either mask that lie within ``tau`` of the
    other mask's boundary, divided by the size of both boundaries. Empty in
    both masks gives 1.0, empty in one gives 0.0.
    """
    if annotation == "polygon":
        raise PolygonAnnotationError("NSD is not computed for polygon-annotated references")
    if tau < 0:
        raise ValueError(f"tau must be nonnegative, got {tau}")
    p, r = _pair(pred, ref)
    c = class_id(cls) if isinstance(cls, str) else int(cls)
    bp, br = boundary(p == c), boundary(r == c)
    n_p, n_r = int(bp.sum()), int(br.sum())
    if n_p == 0 and n_r == 0:
        return 1.0
    if n_p == 0 or n_r == 0:
        return 0.0
    close_p = int((_distance_to(br)[bp] <= tau).sum())
    close_r = int((_distance_to(bp)[br] <= tau).sum())
    return (close_p + close_r) / (n_p + n_r)


@dataclass
class NSDThresholds:
    """Per-class NSD tolerances in pixels; classes without an entry use ``default``."""

    default: float = DEFAULT_TAU
    per_class: dict[int, float] = field(default_factory=dict)

    def __call__(self, cls: int) -> float:
        return self.per_class.get(int(cls), self.default)

    @property
    def placeholder(self) -> bool:
        # no organ-specific values are known, so unedited defaults are flagged in reports
        return not self.per_class and self.default == DEFAULT_TAU

    @classmethod
    def from_dict(cls, d: Mapping) -> "NSDThresholds":
        d = dict(d)
        default = float(d.pop("default", DEFAULT_TAU))
        return cls(default, {class_id(k) if not str(k).isdigit() else int(k): float(v) for k, v in d.items()})

    @classmethod
    def load(cls, path: str | Path) -> "NSDThresholds":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {"default": self.default, **{CLASSES[c]: t for c, t in sorted(self.per_class.items())}}


@dataclass(frozen=True)
class ClassScore:
    image_id: str
    class_id: int
    dsc: float
    nsd: float | None = None


def score_image(
    image_id: str,
    pred,
    ref,
    classes: Iterable[int] | None = None,
    thresholds: NSDThresholds | None = None,
    annotation: str = "semantic",
) -> list[ClassScore]:
    """DSC (and NSD when ``thresholds`` is given) for one image.

    Pixels labeled IGNORE in the reference are excluded from both masks. By
    default the classes scored are those present in the reference or the
    prediction.
    """
    p, r = _pair(pred, ref)
    ignored = r == IGNORE
    p = np.where(ignored, IGNORE, p)
    if classes is None:
        classes = sorted(set(np.unique(r[~ignored]).tolist()) | set(np.unique(p[~ignored]).tolist()))
    with_nsd = thresholds is not None and annotation != "polygon"
    out = []
    for c in classes:
        c = int(c)
        value = nsd(p, r, c, thresholds(c)) if with_nsd else None
        out.append(ClassScore(image_id, c, dsc(p, r, c), value))
    return out


def _center(values, mode: str) -> float:
    if mode == "mean":
        return float(np.mean(values))
    if mode == "median":
        return float(np.median(values))
    raise ValueError(f"unknown aggregation mode {mode!r}")


def subject_scores(
    scores: Iterable[ClassScore], index: DatasetIndex, metric: str = "dsc", mode: str = "mean"
) -> dict[int, dict[str, float]]:
    """Image scores averaged per subject: ``{class: {subject: score}}``."""
    grouped: dict[int, dict[str, list[float]]] = {}
    for s in scores:
        if s.image_id not in index:
            raise KeyError(f"image {s.image_id!r} is not in the dataset index")
        value = getattr(s, metric)
        if value is None:
            continue
        grouped.setdefault(s.class_id, {}).setdefault(index.subject_of(s.image_id), []).append(value)
    return {c: {subj: _center(v, mode) for subj, v in sorted(per.items())} for c, per in sorted(grouped.items())}


def bootstrap_ci(
    per_class: Mapping[int, Mapping[str, float]],
    n: int = 1000,
    level: float = 0.95,
    seed: int = 0,
    mode: str = "mean",
) -> dict:
    """Percentile CIs from resampling subjects with replacement.

    Returns ``{class: (lo, hi)}`` plus an ``"overall"`` entry. For the overall
    score one subject resample is shared by all classes and each class averages
    over the drawn subjects that have it.
    """
    if not 0 < level < 1:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    q = 100 * np.array([(1 - level) / 2, (1 + level) / 2])
    out: dict = {}
    for c, subj in per_class.items():
        values = np.array(list(subj.values()), dtype=float)
        if len(values) == 0:
            continue
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1, int(c))))
        draws = rng.integers(len(values), size=(n, len(values)))
        stats = np.mean(values[draws], axis=1) if mode == "mean" else np.median(values[draws], axis=1)
        lo, hi = np.percentile(stats, q)
        out[c] = (float(lo), float(hi))
    subjects = sorted({s for subj in per_class.values() for s in subj})
    if subjects:
        table = np.full((len(per_class), len(subjects)), np.nan)
        pos = {s: i for i, s in enumerate(subjects)}
        for row, subj in enumerate(per_class.values()):
            for s, v in subj.items():
                table[row, pos[s]] = v
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2,)))
        draws = rng.integers(len(subjects), size=(n, len(subjects)))
        stats = np.empty(n)
        reduce = np.nanmean if mode == "mean" else np.nanmedian
        for i in range(n):
            sample = table[:, draws[i]]
            present = ~np.all(np.isnan(sample), axis=1)
            stats[i] = np.mean(reduce(sample[present], axis=1))
        lo, hi = np.percentile(stats, q)
        out["overall"] = (float(lo), float(hi))
    return out


@dataclass
class MetricReport:
    image_scores: list[ClassScore]
    subject: dict[str, dict[int, dict[str, float]]]  # metric -> class -> subject -> score
    per_class: dict[str, dict[int, float]]  # metric -> class -> score
    overall: dict[str, float]
    ci: dict[str, dict] = field(default_factory=dict)  # metric -> class | "overall" -> (lo, hi)
    mode: str = "mean"
    level: float = 0.95
    nsd_thresholds: NSDThresholds | None = None

    def to_dict(self) -> dict:
        def class_key(c):
            return c if c == "overall" else CLASSES[c]

        d = {
            "mode": self.mode,
            "level": self.level,
            "overall": self.overall,
            "classes": {m: {CLASSES[c]: v for c, v in per.items()} for m, per in self.per_class.items()},
            "subjects": {
                m: {CLASSES[c]: subj for c, subj in per.items()} for m, per in self.subject.items()
            },
            "ci": {m: {class_key(c): list(b) for c, b in per.items()} for m, per in self.ci.items()},
            "images": [
                {"image_id": s.image_id, "class": CLASSES[s.class_id], "dsc": s.dsc, "nsd": s.nsd}
                for s in self.image_scores
            ],
        }
        if self.nsd_thresholds is not None:
            d["nsd_thresholds"] = self.nsd_thresholds.to_dict()
            d["nsd_thresholds_placeholder"] = self.nsd_thresholds.placeholder
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        """One row per metric, aggregate level and class (subject rows carry the subject id)."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "level", "class", "subject_id", "value", "ci_low", "ci_high"])
        for m in self.per_class:
            for c, subj in self.subject[m].items():
                for s, v in subj.items():
                    w.writerow([m, "subject", CLASSES[c], s, repr(v), "", ""])
            for c, v in self.per_class[m].items():
                lo, hi = self.ci.get(m, {}).get(c, ("", ""))
                w.writerow([m, "class", CLASSES[c], "", repr(v), lo, hi])
            lo, hi = self.ci.get(m, {}).get("overall", ("", ""))
            w.writerow([m, "overall", "", "", repr(self.overall[m]), lo, hi])
        return buf.getvalue()

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.write_text(self.to_csv() if path.suffix == ".csv" else self.to_json())


def hierarchical_aggregate(
    scores: Iterable[ClassScore],
    index: DatasetIndex,
    mode: str = "mean",
    n_bootstrap: int = 0,
    level: float = 0.95,
    seed: int = 0,
    nsd_thresholds: NSDThresholds | None = None,
) -> MetricReport:
    """Image -> subject -> class -> overall aggregation, optionally with bootstrap CIs."""
    scores = sorted(scores, key=lambda s: (s.image_id, s.class_id))
    metrics = ["dsc"] + (["nsd"] if any(s.nsd is not None for s in scores) else [])
    subject, per_class, overall, ci = {}, {}, {}, {}
    for m in metrics:
        subject[m] = subject_scores(scores, index, m, mode)
        per_class[m] = {c: _center(list(subj.values()), mode) for c, subj in subject[m].items()}
        overall[m] = _center(list(per_class[m].values()), mode) if per_class[m] else float("nan")
        if n_bootstrap > 0:
            ci[m] = bootstrap_ci(subject[m], n_bootstrap, level, seed, mode)
    return MetricReport(scores, subject, per_class, overall, ci, mode, level, nsd_thresholds)


# ---------------------------------------------------------------------------
# folds


def image_classes(dataset: Dataset) -> dict[str, list[int]]:
    """Classes present in each image's mask."""
    return {i: [c for c in dataset.mask(i).classes()] for i in dataset.index.image_ids}


def _label_counts(index: DatasetIndex, classes: Mapping[str, Iterable[int]] | None) -> dict[str, dict[int, int]]:
    counts: dict[str, dict[int, int]] = {s: {} for s in index.subjects}
    if classes is None:
        return counts
    for e in index:
        for c in classes.get(e.image_id, ()):
            counts[e.subject_id][int(c)] = counts[e.subject_id].get(int(c), 0) + 1
    return counts


def iterative_stratification(
    labels: Mapping[str, Mapping[int, int]], k: int, rng: np.random.Generator
) -> list[list[str]]:
    """Split subjects into ``k`` folds balancing label multisets.

    The subject with the rarest remaining label goes to the fold that still
    needs most of that label; ties go to the fold with the most free room,
    then to a random fold.
    """
    subjects = list(labels)
    if len(subjects) < k:
        raise ValueError(f"cannot split {len(subjects)} subjects into {k} folds")
    order = list(rng.permutation(len(subjects)))
    remaining = [subjects[i] for i in order]
    all_labels = sorted({c for m in labels.values() for c in m})
    room = np.full(k, len(subjects) / k)
    demand = {c: np.full(k, sum(m.get(c, 0) for m in labels.values()) / k) for c in all_labels}
    folds: list[list[str]] = [[] for _ in range(k)]

    def pick(scores: list[np.ndarray]) -> int:
        candidates = np.arange(k)
        for s in scores:
            best = s[candidates].max()
            candidates = candidates[np.isclose(s[candidates], best, rtol=0, atol=1e-9)]
        return int(candidates[rng.integers(len(candidates))]) if len(candidates) > 1 else int(candidates[0])

    def assign(subj: str, fold: int) -> None:
        folds[fold].append(subj)
        room[fold] -= 1
        for c, n in labels[subj].items():
            demand[c][fold] -= n
        remaining.remove(subj)

    while remaining:
        carriers: dict[int, list[str]] = {}
        for s in remaining:
            for c in labels[s]:
                carriers.setdefault(c, []).append(s)
        if not carriers:
            for s in list(remaining):
                assign(s, pick([room]))
            break
        rarest = min(carriers, key=lambda c: (len(carriers[c]), c))
        for s in carriers[rarest]:
            assign(s, pick([demand[rarest], room]))
    return [sorted(f) for f in folds]


@dataclass
class FoldPlan:
    """Outer test folds and, per outer fold, inner validation folds of the training subjects."""

    outer: list[list[str]]
    inner: list[list[list[str]]]
    seed: int = 0
    label_summary: list[dict[str, int]] = field(default_factory=list)

    def __post_init__(self):
        everyone = [s for f in self.outer for s in f]
        if len(set(everyone)) != len(everyone):
            raise ValueError("outer folds overlap")
        for o, inner in enumerate(self.inner):
            train = set(everyone) - set(self.outer[o])
            flat = [s for f in inner for s in f]
            if len(set(flat)) != len(flat) or set(flat) != train:
                raise ValueError(f"inner folds of outer fold {o} do not partition its training subjects")

    @property
    def subjects(self) -> list[str]:
        return sorted(s for f in self.outer for s in f)

    def train_subjects(self, outer: int, inner: int | None = None) -> list[str]:
        if inner is None:
            return sorted(set(self.subjects) - set(self.outer[outer]))
        return sorted(s for j, f in enumerate(self.inner[outer]) if j != inner for s in f)

    def test_subjects(self, outer: int) -> list[str]:
        return list(self.outer[outer])

    def validation_subjects(self, outer: int, inner: int) -> list[str]:
        return list(self.inner[outer][inner])

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "outer": [
                {"test": self.outer[o], "inner": self.inner[o], "labels": self.label_summary[o] if self.label_summary else {}}
                for o in range(len(self.outer))
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "FoldPlan":
        outer = [list(f["test"]) for f in d["outer"]]
        inner = [[list(g) for g in f["inner"]] for f in d["outer"]]
        summary = [dict(f.get("labels", {})) for f in d["outer"]]
        return cls(outer, inner, int(d.get("seed", 0)), summary if any(summary) else [])

    @classmethod
    def from_json(cls, text: str) -> "FoldPlan":
        return cls.from_dict(json.loads(text))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "FoldPlan":
        return cls.from_json(Path(path).read_text())


def nested_folds(
    index: DatasetIndex,
    classes: Mapping[str, Iterable[int]] | None = None,
    outer: int = 3,
    inner: int = 5,
    seed: int = 0,
) -> FoldPlan:
    """Subject-level nested cross-validation folds.

    ``classes`` maps image ids to the classes present in their masks (see
    :func:`image_classes`); without it the folds are only balanced in size.
    """
    if len(index.subjects) < outer:
        raise ValueError(f"{len(index.subjects)} subjects cannot fill {outer} outer folds")
    labels = _label_counts(index, classes)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0,)))
    outer_folds = iterative_stratification(labels, outer, rng)
    inner_folds = []
    for o, test in enumerate(outer_folds):
        train = {s: labels[s] for s in labels if s not in test}
        if len(train) < inner:
            raise ValueError(f"outer fold {o} leaves {len(train)} training subjects for {inner} inner folds")
        sub_rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1, o)))
        inner_folds.append(iterative_stratification(train, inner, sub_rng))
    summary = []
    for test in outer_folds:
        counts: dict[str, int] = {}
        for s in test:
            for c, n in labels[s].items():
                counts[CLASSES[c]] = counts.get(CLASSES[c], 0) + n
        summary.append(dict(sorted(counts.items())))
    return FoldPlan(outer_folds, inner_folds, seed, summary)
