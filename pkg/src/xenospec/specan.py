"""Descriptive spectral analyses: median spectra, PCA, nearest-neighbor agreement and
mixed-model variance decomposition.

The mixed model per organ and wavelength is

    y = X beta + subject effect + image-within-subject effect + residual

with species and angle as fixed factors. Variance components are REML
estimates; the nested random structure gives the covariance a closed form
inverse, so each likelihood evaluation is linear in the number of images.
"""

from __future__ import annotations

import csv
import io
import json
import warnings
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize, minimize_scalar

from .hsicore import (
    CLASSES,
    N_CHANNELS,
    N_CLASSES,
    WAVELENGTHS,
    Dataset,
    DatasetIndex,
    EmptyRegionError,
    RegionSummary,
    class_id,
    region_median_spectrum,
)
from .synthgen import base_image_id

FACTORS = ("species", "angle", "subject", "image", "residual")


# ---------------------------------------------------------------------------
# median spectra


def species_median_spectra(summaries: Sequence[RegionSummary], index: DatasetIndex) -> dict[tuple[str, str, int], np.ndarray]:
    """Median over images of the region median spectra, keyed by (species, perfusion, organ)."""
    groups: dict[tuple[str, str, int], list[np.ndarray]] = {}
    for s in summaries:
        e = index[s.image_id]
        groups.setdefault((e.species, e.perfusion, s.organ), []).append(s.median)
    return {k: np.median(np.stack(v), axis=0) for k, v in sorted(groups.items())}


def median_spectra_csv(table: dict[tuple[str, str, int], np.ndarray]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["species", "perfusion", "organ", "wavelength", "reflectance"])
    for (species, perfusion, organ), spectrum in table.items():
        for wl, v in zip(WAVELENGTHS, spectrum):
            w.writerow([species, perfusion, CLASSES[organ], int(wl), repr(float(v))])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# PCA


class RankError(ValueError):
    """More components requested than the centered data supports."""


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # (k, channels), orthonormal rows
    explained_variance: np.ndarray
    explained_variance_ratio: np.ndarray

    @property
    def k(self) -> int:
        return self.components.shape[0]

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x) - self.mean) @ self.components.T

    def inverse_transform(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z) @ self.components + self.mean

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "components": self.components.tolist(),
            "explained_variance": self.explained_variance.tolist(),
            "explained_variance_ratio": self.explained_variance_ratio.tolist(),
        }


def fit_pca(spectra: np.ndarray, k: int = 2, rank_tol: float | None = None) -> PcaModel:
    """Top-``k`` eigenvectors of the sample covariance of ``spectra`` (rows).

    Each component is signed so that its largest-magnitude entry is positive.
    """
    x = np.asarray(spectra, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("spectra must be a 2-D array with one spectrum per row")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if x.shape[0] < k + 1:
        raise ValueError(f"{x.shape[0]} spectra are too few for {k} components")
    mean = x.mean(axis=0)
    centered = x - mean
    rank = np.linalg.matrix_rank(centered, tol=rank_tol)
    if k > rank:
        raise RankError(f"requested {k} components but the centered data has rank {rank}")
    cov = centered.T @ centered / (x.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    comps = evecs[:, :k].T.copy()
    for row in comps:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1
    total = evals.sum()
    ratios = evals[:k] / total if total > 0 else np.zeros(k)
    return PcaModel(mean, comps, evals[:k], ratios)


def pca_scatter_csv(model: PcaModel, summaries: Sequence[RegionSummary], index: DatasetIndex) -> str:
    """Rows of (image id, species, perfusion, organ, pc1, pc2) for external plotting."""
    z = model.transform(np.stack([s.median for s in summaries]))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["image_id", "species", "perfusion", "organ", "pc1", "pc2"])
    for s, row in zip(summaries, z):
        e = index[s.image_id]
        pc2 = repr(float(row[1])) if model.k > 1 else ""
        w.writerow([s.image_id, e.species, e.perfusion, CLASSES[s.organ], repr(float(row[0])), pc2])
    return buf.getvalue()


def perfusion_shift_direction(
    summaries: Sequence[RegionSummary], index: DatasetIndex, organ: int | str = "kidney", k: int = 2
) -> tuple[PcaModel, dict[str, float]]:
    """PC-1 displacement from the physiological to the malperfused cluster center, per species.

    The PCA is fitted on the organ's median spectra of all species together.
    """
    organ = class_id(organ)
    own = [s for s in summaries if s.organ == organ]
    model = fit_pca(np.stack([s.median for s in own]), k)
    z = model.transform(np.stack([s.median for s in own]))[:, 0]
    out = {}
    for species in sorted({index[s.image_id].species for s in own}):
        phys = [zi for s, zi in zip(own, z) if index[s.image_id].species == species and index[s.image_id].perfusion == "physiological"]
        mal = [zi for s, zi in zip(own, z) if index[s.image_id].species == species and index[s.image_id].perfusion == "malperfused"]
        if phys and mal:
            out[species] = float(np.mean(mal) - np.mean(phys))
    return model, out


# ---------------------------------------------------------------------------
# nearest-neighbor agreement


@dataclass(frozen=True)
class NnAgreementMatrix:
    matrix: np.ndarray  # (classes, classes), rows = query organ
    counts: np.ndarray
    query_species: str | None = None
    neighbor_species: str | None = None

    def diagonal_mass(self) -> float:
        """Mean diagonal entry over nonempty rows."""
        rows = self.counts.sum(axis=1) > 0
        return float(np.mean(np.diag(self.matrix)[rows])) if rows.any() else float("nan")

    def to_dict(self) -> dict:
        return {
            "query_species": self.query_species,
            "neighbor_species": self.neighbor_species,
            "classes": list(CLASSES),
            "matrix": self.matrix.tolist(),
            "counts": self.counts.tolist(),
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["query_organ", "neighbor_organ", "fraction", "count"])
        for a in range(N_CLASSES):
            for b in range(N_CLASSES):
                if self.counts[a, b]:
                    w.writerow([CLASSES[a], CLASSES[b], repr(float(self.matrix[a, b])), int(self.counts[a, b])])
        return buf.getvalue()


def nearest_neighbors(query: Sequence[RegionSummary], neighbors: Sequence[RegionSummary]) -> list[int]:
    """Index into ``neighbors`` of each query's nearest spectrum from another subject.

    Distances are Euclidean; ties go to the lowest image id, then lowest organ id.
    """
    if not neighbors:
        raise ValueError("neighbor set is empty")
    nb = np.stack([s.median for s in neighbors])
    nb_subjects = np.array([s.subject_id for s in neighbors])
    tie_order = sorted(range(len(neighbors)), key=lambda i: (neighbors[i].image_id, neighbors[i].organ))
    rank = np.empty(len(neighbors), dtype=np.int64)
    rank[tie_order] = np.arange(len(neighbors))
    out = []
    for q in query:
        eligible = nb_subjects != q.subject_id
        if not eligible.any():
            raise ValueError(
                f"query {q.image_id!r} ({CLASSES[q.organ]}) has no neighbor from a different subject"
            )
        d = np.sqrt(((nb - q.median) ** 2).sum(axis=1))
        d[~eligible] = np.inf
        best = np.flatnonzero(d == d.min())
        out.append(int(best[np.argmin(rank[best])]))
    return out


def nn_agreement(
    query: Sequence[RegionSummary],
    neighbors: Sequence[RegionSummary],
    query_species: str | None = None,
    neighbor_species: str | None = None,
) -> NnAgreementMatrix:
    """Row-normalized counts of (query organ, nearest neighbor organ) pairs."""
    counts = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    for q, j in zip(query, nearest_neighbors(query, neighbors)):
        counts[q.organ, neighbors[j].organ] += 1
    totals = counts.sum(axis=1, keepdims=True)
    matrix = np.divide(counts, totals, out=np.zeros(counts.shape), where=totals > 0)
    return NnAgreementMatrix(matrix, counts, query_species, neighbor_species)


# ---------------------------------------------------------------------------
# linear mixed model


class DegenerateDesignError(ValueError):
    """The observations cannot identify the nested variance components."""


class UndefinedProportionError(ValueError):
    """Total variance is zero, so proportions are undefined."""


class BootstrapConvergenceError(RuntimeError):
    pass


def _dummies(levels: Sequence[str], prefix: str) -> tuple[np.ndarray, list[str]]:
    values = sorted(set(levels))
    # first level is the reference
    cols = [np.array([lv == v for lv in levels], dtype=np.float64) for v in values[1:]]
    return (np.stack(cols, axis=1) if cols else np.zeros((len(levels), 0))), [f"{prefix}[{v}]" for v in values[1:]]


@dataclass
class LmmDesign:
    """Fixed-effect matrix and nested grouping of one set of observations."""

    X: np.ndarray
    columns: list[str]
    species_cols: np.ndarray
    angle_cols: np.ndarray
    subject: np.ndarray  # subject index per observation
    image: np.ndarray  # image index per observation, images numbered globally
    image_subject: np.ndarray  # subject index per image
    image_ids: list[str] = field(default_factory=list)
    subject_ids: list[str] = field(default_factory=list)

    @classmethod
    def from_labels(
        cls, species: Sequence[str], angle: Sequence[str], subject: Sequence[str], image: Sequence[str]
    ) -> "LmmDesign":
        n = len(species)
        if not (len(angle) == len(subject) == len(image) == n):
            raise ValueError("label sequences must have equal lengths")
        subject_ids = sorted(set(subject))
        if len(subject_ids) < 2:
            raise DegenerateDesignError("at least two subjects are needed")
        # image ids are only unique within a subject
        keys = sorted(set(zip(subject, image)))
        image_pos = {k: i for i, k in enumerate(keys)}
        subj_pos = {s: i for i, s in enumerate(subject_ids)}
        img = np.array([image_pos[k] for k in zip(subject, image)])
        subj = np.array([subj_pos[s] for s in subject])
        image_subject = np.array([subj_pos[s] for s, _ in keys])
        if np.bincount(image_subject).max() < 2:
            raise DegenerateDesignError("no subject has two or more images")
        if np.bincount(img).max() < 2:
            raise DegenerateDesignError("no image has two or more repetitions")
        for s in subject_ids:
            if len({sp for sp, su in zip(species, subject) if su == s}) > 1:
                raise DegenerateDesignError(f"subject {s!r} has observations from several species")
        sp, sp_names = _dummies(list(species), "species")
        an, an_names = _dummies(list(angle), "angle")
        X = np.column_stack([np.ones(n), sp, an])
        if np.linalg.matrix_rank(X) < X.shape[1]:
            raise DegenerateDesignError("fixed effects are collinear")
        k_sp = sp.shape[1]
        return cls(
            X,
            ["intercept", *sp_names, *an_names],
            np.arange(1, 1 + k_sp),
            np.arange(1 + k_sp, X.shape[1]),
            subj,
            img,
            image_subject,
            [f"{s}/{i}" for s, i in keys],
            subject_ids,
        )

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def n_subjects(self) -> int:
        return len(self.subject_ids)

    @property
    def n_images(self) -> int:
        return len(self.image_subject)


class _Reml:
    """REML criterion of one response, with the covariance scaled by the residual variance.

    ``H = I + psi_g * blockdiag(J_image) + psi_d * blockdiag(J_subject)``.
    """

    def __init__(self, design: LmmDesign, y: np.ndarray):
        self.d = design
        self._y = y
        M = np.column_stack([design.X, y])
        self.MtM = M.T @ M
        self.S = np.zeros((design.n_images, M.shape[1]))
        np.add.at(self.S, design.image, M)
        self.n_img = np.bincount(design.image, minlength=design.n_images).astype(np.float64)

    def parts(self, psi_d: float, psi_g: float):
        p = self.d.p
        a = 1.0 + psi_g * self.n_img  # per image
        Sa = self.S / a[:, None]
        g = self.d.image_subject
        T = np.stack([np.bincount(g, weights=col, minlength=self.d.n_subjects) for col in Sa.T], axis=1)
        b = 1.0 + psi_d * np.bincount(g, weights=self.n_img / a, minlength=self.d.n_subjects)
        G = self.MtM - psi_g * (self.S.T @ Sa) - (T.T * (psi_d / b)) @ T
        logdet = np.log(a).sum() + np.log(b).sum()
        L = np.linalg.cholesky(G[:p, :p])
        z = np.linalg.solve(L, G[:p, p])
        beta = np.linalg.solve(L.T, z)
        rss = max(G[p, p] - z @ z, 0.0)
        return rss, logdet, 2.0 * np.log(np.diag(L)).sum(), beta

    def neg_loglik(self, psi_d: float, psi_g: float) -> float:
        rss, logdet, logdet_x, _ = self.parts(psi_d, psi_g)
        m = self.d.n - self.d.p
        if rss <= 0:
            return -np.inf
        return 0.5 * (m * np.log(rss / m) + logdet + logdet_x + m)

    def _solve(self, V: np.ndarray, psi_d: float, psi_g: float) -> np.ndarray:
        # H^-1 V through the two nested Woodbury steps, linear in the number of rows
        d = self.d
        a = 1.0 + psi_g * self.n_img
        img_sum = np.zeros((d.n_images, V.shape[1]))
        np.add.at(img_sum, d.image, V)
        U = V - (psi_g / a)[d.image, None] * img_sum[d.image]
        c = np.bincount(d.image_subject, weights=self.n_img / a, minlength=d.n_subjects)
        sub_sum = np.zeros((d.n_subjects, V.shape[1]))
        np.add.at(sub_sum, d.subject, U)
        return U - (1.0 / a)[d.image, None] * (psi_d / (1.0 + psi_d * c))[d.subject, None] * sub_sum[d.subject]

    def gradient(self, psi_d: float, psi_g: float) -> np.ndarray:
        """Exact derivative of ``neg_loglik`` with respect to (psi_d, psi_g).

        With ``P = H^-1 - H^-1 X (X' H^-1 X)^-1 X' H^-1`` and group indicator
        ``Z`` the derivative is ``(tr(Z' P Z) - m |Z' P y|^2 / rss) / 2``.
        """
        d = self.d
        rss, _, _, beta = self.parts(psi_d, psi_g)
        m = d.n - d.p
        X = d.X
        y = self._y
        HX = self._solve(X, psi_d, psi_g)
        C = np.linalg.inv(X.T @ HX)
        Py = self._solve((y - X @ beta)[:, None], psi_d, psi_g)[:, 0]
        # diagonal of Z' H^-1 Z in closed form for both grouping levels
        a = 1.0 + psi_g * self.n_img
        c = np.bincount(d.image_subject, weights=self.n_img / a, minlength=d.n_subjects)
        shrink = psi_d / (1.0 + psi_d * c)
        diag_subject = c - c * c * shrink
        diag_image = self.n_img / a - (self.n_img / a) ** 2 * shrink[d.image_subject]
        out = np.empty(2)
        for k, groups, n_groups, diag in (
            (0, d.subject, d.n_subjects, diag_subject),
            (1, d.image, d.n_images, diag_image),
        ):
            # X' H^-1 Z is the per-group sum of the rows of H^-1 X
            W = np.zeros((n_groups, d.p))
            np.add.at(W, groups, HX)
            trace = diag.sum() - np.einsum("gi,ij,gj->", W, C, W)
            zpy = np.bincount(groups, weights=Py, minlength=n_groups)
            out[k] = 0.5 * (trace - m * (zpy @ zpy) / rss)
        return out


@dataclass
class LmmFit:
    sigma2_subject: float
    sigma2_image: float
    sigma2_residual: float
    beta: np.ndarray
    columns: list[str]
    reml_loglik: float
    converged: bool
    n_evaluations: int = 0
    history: list[float] = field(default_factory=list)  # best criterion after each iteration

    @property
    def components(self) -> np.ndarray:
        return np.array([self.sigma2_subject, self.sigma2_image, self.sigma2_residual])


def fit_lmm(y: np.ndarray, design: LmmDesign, tol: float = 1e-8, max_iter: int = 2000) -> LmmFit:
    """REML fit of the nested random-intercept model for one response vector.

    The residual variance is profiled out and the two variance ratios are
    searched with Nelder-Mead on their square roots (so they stay
    nonnegative); the edges where one or both ratios vanish are searched
    separately and the best candidate wins. The response is rescaled to unit
    mean square first, which makes the fit exactly scale equivariant.

    ``converged`` is True when the simplex values agree to ``tol * 1e-2``
    before ``max_iter`` iterations, when the Newton refinement reaches a
    stationary point, or when a boundary candidate is at least as good as
    the interior search.
    """
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (design.n,):
        raise ValueError(f"expected {design.n} observations, got shape {y.shape}")
    scale = float(np.sqrt(np.mean(y * y)))
    if np.all(y == y[0]):
        # a constant response is the intercept alone; solving would leave rounding-level fixed effects
        beta = np.zeros(design.p)
        beta[0] = y[0]
        return LmmFit(0.0, 0.0, 0.0, beta, design.columns, np.inf, True)
    reml = _Reml(design, y / scale)
    rss0, _, _, beta0 = reml.parts(0.0, 0.0)
    if rss0 <= 1e-12 * design.n:
        # fixed effects explain the data up to rounding; every variance component is zero
        return LmmFit(0.0, 0.0, 0.0, beta0 * scale, design.columns, np.inf, True)

    evals = 0
    best_seen = np.inf

    def f(theta):
        nonlocal evals, best_seen
        evals += 1
        value = reml.neg_loglik(theta[0] ** 2, theta[1] ** 2)
        best_seen = min(best_seen, value)
        return value

    history: list[float] = []
    res = minimize(
        f,
        np.sqrt(_moment_start(design, y / scale, beta0)),
        method="Nelder-Mead",
        callback=lambda xk: history.append(float(best_seen)),
        options={"xatol": 1e-7, "fatol": tol * 1e-2, "maxiter": max_iter, "maxfev": 4 * max_iter},
    )
    candidates = [_polish(reml, float(res.fun), res.x[0] ** 2, res.x[1] ** 2)]
    # boundary faces: psi_d = 0, psi_g = 0 and both
    for fixed in (0, 1):
        g = minimize_scalar(
            lambda t: reml.neg_loglik(*((0.0, t * t) if fixed == 0 else (t * t, 0.0))),
            bounds=(0.0, 1e3),
            method="bounded",
            options={"xatol": 1e-10},
        )
        evals += g.nfev
        psi = g.x * g.x
        start = (float(g.fun), 0.0, psi) if fixed == 0 else (float(g.fun), psi, 0.0)
        candidates.append(_polish(reml, *start))
    candidates.append((reml.neg_loglik(0.0, 0.0), 0.0, 0.0, True))
    best = min(c[0] for c in candidates)
    if not history or best < history[-1]:
        history.append(best)
    # prefer the candidate with more zero components when the criterion ties
    near = [c for c in candidates if c[0] <= best + tol * max(1.0, abs(best))] or [min(candidates)]
    fval, psi_d, psi_g, stationary = min(near, key=lambda c: (-int(c[1] == 0.0) - int(c[2] == 0.0), c[0]))
    rss, _, _, beta = reml.parts(psi_d, psi_g)
    sigma2 = rss / (design.n - design.p) * scale**2
    converged = bool(res.success) or stationary or psi_d == 0.0 or psi_g == 0.0
    return LmmFit(
        psi_d * sigma2,
        psi_g * sigma2,
        sigma2,
        beta * scale,
        design.columns,
        -fval - (design.n - design.p) * np.log(scale),
        converged,
        evals,
        history,
    )


def _polish(reml: _Reml, fval: float, psi_d: float, psi_g: float, max_iter: int = 30):
    """Newton refinement of a candidate on its face, in log coordinates.

    Nelder-Mead stops once criterion values agree, which leaves the ratios
    uncertain at roughly the square root of that tolerance. Newton steps on
    the exact gradient pin the stationary point down to rounding level, so
    fits of rescaled data agree far below the simplex tolerance. Steps that
    neither lower the criterion nor shrink the gradient are halved.
    """
    free = [k for k, v in enumerate((psi_d, psi_g)) if v > 0.0]
    if not free:
        return fval, psi_d, psi_g, True
    t = np.log(np.array([psi_d, psi_g])[free])

    def at(t_):
        psi = np.zeros(2)
        psi[free] = np.exp(t_)
        return psi

    def grad(t_):
        psi = at(t_)
        return reml.gradient(*psi)[free] * psi[free]

    best = (fval, psi_d, psi_g)
    stationary = False
    for _ in range(max_iter):
        g = grad(t)
        h = 1e-5
        H = np.empty((len(free), len(free)))
        for j in range(len(free)):
            e = np.zeros(len(free))
            e[j] = h
            H[:, j] = (grad(t + e) - grad(t - e)) / (2 * h)
        H = 0.5 * (H + H.T)
        if np.any(np.linalg.eigvalsh(H) <= 0):
            break
        step = -np.linalg.solve(H, g)
        if not np.abs(step).max() > 0:
            stationary = True
            break
        step *= min(1.0, 1.0 / np.abs(step).max())
        g_norm = np.linalg.norm(g)
        for _ in range(20):
            psi = at(t + step)
            value = reml.neg_loglik(*psi)
            # the criterion carries rounding noise from the residual sum of squares,
            # so a step that shrinks the exact gradient is accepted as well
            if value <= best[0] + 1e-12 * max(1.0, abs(best[0])) or np.linalg.norm(grad(t + step)) < g_norm:
                break
            step /= 2
        else:
            break
        t = t + step
        best = (value, psi[0], psi[1])
        if np.abs(step).max() < 1e-10:
            stationary = True
            break
    return (*best, stationary)


def _moment_start(design: LmmDesign, y: np.ndarray, beta: np.ndarray) -> np.ndarray:
    # crude method-of-moments guess of the two variance ratios
    r = y - design.X @ beta
    n_img = np.bincount(design.image, minlength=design.n_images)
    img_mean = np.bincount(design.image, weights=r, minlength=design.n_images) / n_img
    within = np.mean((r - img_mean[design.image]) ** 2) + 1e-300
    n_sub = np.bincount(design.image_subject, minlength=design.n_subjects)
    sub_mean = np.bincount(design.image_subject, weights=img_mean, minlength=design.n_subjects) / n_sub
    between_img = np.mean((img_mean - sub_mean[design.image_subject]) ** 2)
    between_sub = np.var(sub_mean)
    return np.array([max(between_sub / within, 0.1), max(between_img / within, 0.1)])


def variance_shares(fit: LmmFit, design: LmmDesign) -> np.ndarray:
    """Unnormalized shares in the order of FACTORS.

    Fixed factors contribute the population variance of their fitted part
    ``X_f beta_f`` over the observations; random factors their components.
    """
    species = design.X[:, design.species_cols] @ fit.beta[design.species_cols]
    angle = design.X[:, design.angle_cols] @ fit.beta[design.angle_cols]
    return np.array([np.var(species), np.var(angle), fit.sigma2_subject, fit.sigma2_image, fit.sigma2_residual])


def variance_proportions(fit: LmmFit, design: LmmDesign) -> np.ndarray:
    shares = variance_shares(fit, design)
    total = shares.sum()
    if not total > 0:
        raise UndefinedProportionError("total variance is zero")
    return shares / total


def simulate_lmm(fit: LmmFit, design: LmmDesign, rng: np.random.Generator) -> np.ndarray:
    """Draw one response vector from a fitted model."""
    subj = rng.standard_normal(design.n_subjects) * np.sqrt(fit.sigma2_subject)
    img = rng.standard_normal(design.n_images) * np.sqrt(fit.sigma2_image)
    eps = rng.standard_normal(design.n) * np.sqrt(fit.sigma2_residual)
    return design.X @ fit.beta + subj[design.subject] + img[design.image] + eps


@dataclass
class BootstrapResult:
    lower: np.ndarray
    upper: np.ndarray
    n_requested: int
    n_failed: int
    replicates: np.ndarray


def parametric_bootstrap_ci(
    fit: LmmFit,
    design: LmmDesign,
    n: int = 500,
    level: float = 0.95,
    seed: int = 0,
    strict: bool = False,
    max_failure: float = 0.2,
) -> BootstrapResult:
    """Percentile CIs of the variance proportions from refits of simulated data.

    Replicates whose refit does not converge are dropped and counted. More
    than ``max_failure`` of them dropped warns, or raises in strict mode.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    props, failed = [], 0
    for r in range(n):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(r,)))
        y = simulate_lmm(fit, design, rng)
        refit = fit_lmm(y, design)
        if not refit.converged:
            failed += 1
            continue
        props.append(variance_proportions(refit, design))
    if failed > max_failure * n:
        msg = f"{failed} of {n} bootstrap refits did not converge"
        if strict:
            raise BootstrapConvergenceError(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    if not props:
        raise BootstrapConvergenceError("no bootstrap refit converged")
    reps = np.stack(props)
    q = 100 * np.array([(1 - level) / 2, (1 + level) / 2])
    lo, hi = np.percentile(reps, q, axis=0)
    return BootstrapResult(lo, hi, n, failed, reps)


@dataclass
class VarianceDecomposition:
    organ: int
    proportions: np.ndarray  # (wavelengths, 5) in FACTORS order
    ci_lower: np.ndarray | None = None
    ci_upper: np.ndarray | None = None
    converged: np.ndarray | None = None
    bootstrap_failures: np.ndarray | None = None

    def rows(self):
        for w, wl in enumerate(WAVELENGTHS[: self.proportions.shape[0]]):
            for f, name in enumerate(FACTORS):
                lo = self.ci_lower[w, f] if self.ci_lower is not None else None
                hi = self.ci_upper[w, f] if self.ci_upper is not None else None
                yield CLASSES[self.organ], int(wl), name, float(self.proportions[w, f]), lo, hi

    def to_dict(self) -> dict:
        return {
            "organ": CLASSES[self.organ],
            "factors": list(FACTORS),
            "wavelengths": WAVELENGTHS[: self.proportions.shape[0]].tolist(),
            "proportions": self.proportions.tolist(),
            "ci_lower": None if self.ci_lower is None else self.ci_lower.tolist(),
            "ci_upper": None if self.ci_upper is None else self.ci_upper.tolist(),
            "converged": None if self.converged is None else self.converged.tolist(),
            "bootstrap_failures": None if self.bootstrap_failures is None else self.bootstrap_failures.tolist(),
        }


def decomposition_csv(decomps: Sequence[VarianceDecomposition]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["organ", "wavelength", "factor", "proportion", "ci_lo", "ci_hi"])
    for d in decomps:
        for organ, wl, factor, prop, lo, hi in d.rows():
            w.writerow([organ, wl, factor, repr(prop), "" if lo is None else repr(float(lo)), "" if hi is None else repr(float(hi))])
    return buf.getvalue()


def decompose_spectra(
    Y: np.ndarray,
    design: LmmDesign,
    organ: int,
    n_bootstrap: int = 0,
    level: float = 0.95,
    seed: int = 0,
    strict: bool = False,
    n_jobs: int = 1,
) -> VarianceDecomposition:
    """Per-wavelength fits and proportions for one organ; ``Y`` is (observations, wavelengths)."""
    Y = np.asarray(Y, dtype=np.float64)

    def one(w):
        fit = fit_lmm(Y[:, w], design)
        props = variance_proportions(fit, design)
        if n_bootstrap:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                b = parametric_bootstrap_ci(fit, design, n_bootstrap, level, seed * 1000 + w, strict)
            return fit.converged, props, b.lower, b.upper, b.n_failed
        return fit.converged, props, None, None, 0

    idx = range(Y.shape[1])
    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            results = list(pool.map(one, idx))
    else:
        results = [one(w) for w in idx]
    conv = np.array([r[0] for r in results])
    props = np.stack([r[1] for r in results])
    lo = np.stack([r[2] for r in results]) if n_bootstrap else None
    hi = np.stack([r[3] for r in results]) if n_bootstrap else None
    fails = np.array([r[4] for r in results])
    return VarianceDecomposition(organ, props, lo, hi, conv, fails if n_bootstrap else None)


def lmm_observations(dataset: Dataset, organ: int | str, image_ids: Sequence[str] | None = None) -> tuple[np.ndarray, LmmDesign]:
    """Region median spectra of ``organ`` with their design.

    Replicate captures (ids from :func:`generate_angle_replicates`) are
    grouped under their base image; images without the organ are skipped.
    """
    organ = class_id(organ)
    ids = dataset.index.image_ids if image_ids is None else list(image_ids)
    rows, species, angle, subject, image = [], [], [], [], []
    for i in ids:
        try:
            med = region_median_spectrum(dataset.cube(i), dataset.mask(i), organ).median
        except EmptyRegionError:
            continue
        e = dataset.index[i]
        rows.append(med)
        species.append(e.species)
        angle.append(e.angle)
        subject.append(e.subject_id)
        image.append(base_image_id(i))
    if not rows:
        raise EmptyRegionError(f"no image contains {CLASSES[organ]!r}")
    return np.stack(rows), LmmDesign.from_labels(species, angle, subject, image)


def save_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2))


__all__ = [
    "FACTORS",
    "N_CHANNELS",
    "BootstrapConvergenceError",
    "BootstrapResult",
    "DegenerateDesignError",
    "LmmDesign",
    "LmmFit",
    "NnAgreementMatrix",
    "PcaModel",
    "RankError",
    "UndefinedProportionError",
    "VarianceDecomposition",
    "decompose_spectra",
    "decomposition_csv",
    "fit_lmm",
    "fit_pca",
    "lmm_observations",
    "median_spectra_csv",
    "nearest_neighbors",
    "nn_agreement",
    "parametric_bootstrap_ci",
    "pca_scatter_csv",
    "perfusion_shift_direction",
    "simulate_lmm",
    "species_median_spectra",
    "variance_proportions",
    "variance_shares",
]
