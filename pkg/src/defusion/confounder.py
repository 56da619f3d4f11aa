"""Per-modality scene confounder dictionaries.

Pipeline: deterministic scene descriptors for every training image,
PCA to a compact space, K-Means++ seeding plus Lloyd iterations, and
finally one dictionary row per cluster, each row being the exact mean
of its members. The dictionaries are frozen inputs to the fusion
network, never trained.

The descriptor is a stand-in for a large pretrained backbone: a frozen
two-layer conv stack (weights drawn once from a fixed seed) pooled to a
channel vector, concatenated with an 8-bin intensity histogram and the
mean gradient magnitude. It is deliberately swappable: anything
callable image -> vector works as the ``extractor`` argument of
``build_dictionary``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .diffcore import conv2d_forward

EXTRACTOR_SEED = 0xC0FFEE
HIST_BINS = 8

DEFAULT_CLUSTERS = 25
DEFAULT_DIM = 16

LLOYD_TOL = 1e-10
LLOYD_MAX_ITER = 300


class DictionaryError(ValueError):
    pass


# ---------------------------------------------------------------------------
# scene descriptor


class SceneFeatureExtractor:
    """Frozen conv stack + histogram + gradient statistics descriptor."""

    def __init__(self, seed: int = EXTRACTOR_SEED, channels1: int = 6, channels2: int = 16):
        rng = np.random.default_rng(seed)
        self.k1 = rng.normal(0.0, 1.0 / 3.0, (channels1, 1, 3, 3))
        self.b1 = rng.normal(0.0, 0.1, channels1)
        self.k2 = rng.normal(0.0, 1.0 / np.sqrt(9 * channels1), (channels2, channels1, 3, 3))
        self.b2 = rng.normal(0.0, 0.1, channels2)
        self.dim = channels2 + HIST_BINS + 1

    def __call__(self, image: np.ndarray) -> np.ndarray:
        img = np.asarray(image, dtype=np.float64)
        if img.ndim != 2 or img.size == 0:
            raise DictionaryError(f"expected a non-empty 2-d image, got shape {img.shape}")
        h1 = np.tanh(conv2d_forward(img[None], self.k1, self.b1, padding=1))
        h2 = np.tanh(conv2d_forward(h1, self.k2, self.b2, padding=1))
        pooled = h2.mean(axis=(1, 2))

        hist, _ = np.histogram(img, bins=HIST_BINS, range=(0.0, 1.0))
        hist = hist / img.size
        gy, gx = np.gradient(img)
        grad_mag = np.sqrt(gx * gx + gy * gy).mean()
        return np.concatenate([pooled, hist, [grad_mag]])


_default_extractor = None


def extract_scene_feature(image: np.ndarray) -> np.ndarray:
    """Descriptor vector of the default frozen extractor (deterministic)."""
    global _default_extractor
    if _default_extractor is None:
        _default_extractor = SceneFeatureExtractor()
    return _default_extractor(image)


# ---------------------------------------------------------------------------
# PCA


@dataclass
class PcaModel:
    mean: np.ndarray          # (d_m,)
    components: np.ndarray    # (d, d_m), orthonormal rows
    eigenvalues: np.ndarray   # (d,), non-negative, non-increasing


def pca_fit(features: np.ndarray, d: int) -> PcaModel:
    """Top-d principal axes of mean-centered sample covariance.

    Sign convention: the largest-magnitude coordinate of every axis is
    made positive, so the fit is deterministic.
    """
    x = np.asarray(features, dtype=np.float64)
    n, dm = x.shape
    if n < 2:
        raise DictionaryError(f"PCA needs at least 2 samples, got {n}")
    if d > min(dm, n):
        raise DictionaryError(f"PCA target dimension {d} exceeds min(feature dim {dm}, samples {n})")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (n - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:d]
    eigvals = np.clip(eigvals[order], 0.0, None)
    axes = eigvecs[:, order].T
    for row in axes:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    return PcaModel(mean=mean, components=axes, eigenvalues=eigvals)


def pca_transform(model: PcaModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.mean.shape[0]:
        raise DictionaryError(f"feature dimension {x.shape[-1]} != PCA input dimension {model.mean.shape[0]}")
    return (x - model.mean) @ model.components.T


# ---------------------------------------------------------------------------
# clustering


@dataclass
class ClusterAssignment:
    labels: np.ndarray          # (N_m,) ints in [0, N)
    counts: np.ndarray          # (N,) positive ints
    inertia: float
    inertia_history: list       # recorded once per Lloyd iteration


def _sq_dists(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centers[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def kmeanspp_seed(points: np.ndarray, n_clusters: int, rng: np.random.Generator) -> np.ndarray:
    """K-Means++ seeding: next center drawn with probability proportional to D^2."""
    points = np.asarray(points, dtype=np.float64)
    n_points = points.shape[0]
    if n_clusters > n_points:
        raise DictionaryError(f"cannot seed {n_clusters} clusters from {n_points} points")
    centers = np.empty((n_clusters, points.shape[1]))
    chosen = np.zeros(n_points, dtype=bool)
    idx = int(rng.integers(n_points))
    centers[0] = points[idx]
    chosen[idx] = True
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for c in range(1, n_clusters):
        total = d2.sum()
        if total <= 0.0:
            # all remaining mass at chosen points; take the lowest unchosen index
            candidates = np.flatnonzero(~chosen)
            idx = int(candidates[0]) if candidates.size else int(rng.integers(n_points))
        else:
            idx = int(rng.choice(n_points, p=d2 / total))
        centers[c] = points[idx]
        chosen[idx] = True
        d2 = np.minimum(d2, np.sum((points - centers[c]) ** 2, axis=1))
    return centers


def lloyd(points: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, ClusterAssignment]:
    """Lloyd iterations until the inertia change drops below tolerance.

    Assignment ties break toward the lowest center index (argmin).
    Empty clusters are repaired by reseeding to the point currently
    farthest from its center, which keeps the recorded inertia sequence
    non-increasing. Returned centers are the exact means of the
    returned assignment.
    """
    points = np.asarray(points, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64).copy()
    n_clusters = centers.shape[0]
    history = []
    prev = np.inf
    labels = None
    for _ in range(LLOYD_MAX_ITER):
        d2 = _sq_dists(points, centers)
        labels = np.argmin(d2, axis=1)
        assigned = d2[np.arange(points.shape[0]), labels]

        # repair empty clusters: reseed to the farthest point whose own
        # cluster keeps at least one member, then reassign
        for _repair in range(n_clusters):
            counts = np.bincount(labels, minlength=n_clusters)
            empty = np.flatnonzero(counts == 0)
            if empty.size == 0:
                break
            movable = assigned.copy()
            movable[counts[labels] <= 1] = -np.inf
            far = int(np.argmax(movable))
            centers[empty[0]] = points[far]
            d2 = _sq_dists(points, centers)
            labels = np.argmin(d2, axis=1)
            assigned = d2[np.arange(points.shape[0]), labels]

        inertia = float(assigned.sum())
        history.append(inertia)
        means = np.vstack([points[labels == c].mean(axis=0) for c in range(n_clusters)])
        if prev - inertia < LLOYD_TOL:
            centers = means
            break
        centers = means
        prev = inertia

    counts = np.bincount(labels, minlength=n_clusters)
    assignment = ClusterAssignment(
        labels=labels,
        counts=counts,
        inertia=float(np.sum((points - centers[labels]) ** 2)),
        inertia_history=history,
    )
    return centers, assignment


# ---------------------------------------------------------------------------
# dictionary


@dataclass
class ConfounderDictionary:
    modality: str             # "infrared" or "visible"
    centers: np.ndarray       # (N, d), row i = scene cluster center z_i
    n_clusters: int
    seed: int
    pca: PcaModel

    @property
    def dim(self) -> int:
        return self.centers.shape[1]


def build_dictionary(images, modality: str, n_clusters: int = DEFAULT_CLUSTERS,
                     d: int = DEFAULT_DIM, seed: int = 0,
                     extractor=None) -> ConfounderDictionary:
    """Cluster scene descriptors of one modality into a dictionary.

    Fully deterministic given the seed; the two modalities are built
    from disjoint image sets and never share state.
    """
    if modality not in ("infrared", "visible"):
        raise DictionaryError(f"unknown modality '{modality}'")
    images = list(images)
    if len(images) < n_clusters:
        raise DictionaryError(f"corpus of {len(images)} images cannot support {n_clusters} clusters")
    extract = extractor if extractor is not None else extract_scene_feature
    features = np.vstack([extract(img) for img in images])
    d_eff = min(d, features.shape[1], features.shape[0])
    model = pca_fit(features, d_eff)
    reduced = pca_transform(model, features)
    rng = np.random.default_rng(seed)
    centers = kmeanspp_seed(reduced, n_clusters, rng)
    centers, _ = lloyd(reduced, centers)
    return ConfounderDictionary(
        modality=modality, centers=centers, n_clusters=n_clusters, seed=seed, pca=model
    )


def save_dictionary(dictionary: ConfounderDictionary, path):
    """Serialize to JSON; float64 decimal repr round-trips bit-exactly."""
    doc = {
        "format": "defusion-dictionary-v1",
        "modality": dictionary.modality,
        "N": dictionary.n_clusters,
        "d": dictionary.dim,
        "seed": dictionary.seed,
        "pca": {
            "mean": dictionary.pca.mean.tolist(),
            "components": dictionary.pca.components.tolist(),
            "eigenvalues": dictionary.pca.eigenvalues.tolist(),
        },
        "centers": dictionary.centers.tolist(),
    }
    tmp = f"{os.fspath(path)}.tmp-{os.getpid()}"
    with open(tmp, "w") as f:
        json.dump(doc, f, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)


def load_dictionary(path) -> ConfounderDictionary:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("format") != "defusion-dictionary-v1":
        raise DictionaryError(f"{path}: not a dictionary file")
    pca = PcaModel(
        mean=np.asarray(doc["pca"]["mean"], dtype=np.float64),
        components=np.asarray(doc["pca"]["components"], dtype=np.float64),
        eigenvalues=np.asarray(doc["pca"]["eigenvalues"], dtype=np.float64),
    )
    return ConfounderDictionary(
        modality=doc["modality"],
        centers=np.asarray(doc["centers"], dtype=np.float64),
        n_clusters=int(doc["N"]),
        seed=int(doc["seed"]),
        pca=pca,
    )
