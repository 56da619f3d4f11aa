"""Synthetic biased-scene corpus generator.

Produces aligned infrared/visible pairs for three procedural scene
categories (street, cloud, bush). A street-heavy bias profile mimics
the imbalanced training distributions that make fusion models latch
onto one scene type; a balanced held-out set then exposes the effect.

The two modalities of a pair share a layout seed (same geometry) but
carry complementary content: each contains structures the other lacks.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from . import pgm

CATEGORIES = ("street", "cloud", "bush")

MIN_SIZE = 16


class SceneGenError(ValueError):
    pass


@dataclass
class BiasProfile:
    """Category sampling distribution for a generated corpus."""

    probabilities: dict = field(default_factory=lambda: {"street": 0.8, "cloud": 0.1, "bush": 0.1})

    def __post_init__(self):
        unknown = set(self.probabilities) - set(CATEGORIES)
        if unknown:
            raise SceneGenError(f"unknown scene categories: {sorted(unknown)}")
        probs = [float(self.probabilities.get(c, 0.0)) for c in CATEGORIES]
        if any(p < 0 for p in probs):
            raise SceneGenError(f"negative category probability in {self.probabilities}")
        total = sum(probs)
        if abs(total - 1.0) > 1e-12:
            raise SceneGenError(f"category probabilities sum to {total!r}, expected 1.0")
        self.probabilities = dict(zip(CATEGORIES, probs))

    def as_vector(self) -> np.ndarray:
        return np.array([self.probabilities[c] for c in CATEGORIES])


@dataclass
class ImagePair:
    ir: np.ndarray
    vis: np.ndarray
    category: str
    id: str


def _rescale(a: np.ndarray, lo: float, hi: float) -> np.ndarray:
    span = a.max() - a.min()
    if span < 1e-12:
        return np.full_like(a, (lo + hi) / 2.0)
    return lo + (hi - lo) * (a - a.min()) / span


def _disc(canvas: np.ndarray, ci: float, cj: float, ri: float, rj: float, value: float):
    """Paint an ellipse onto the canvas (max-composited)."""
    h, w = canvas.shape
    ii, jj = np.mgrid[0:h, 0:w]
    r = ((ii - ci) / ri) ** 2 + ((jj - cj) / rj) ** 2
    np.maximum(canvas, np.where(r <= 1.0, value, 0.0), out=canvas)


def _street(size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    s = size
    road_top = rng.uniform(0.55, 0.7) * s
    road_h = rng.uniform(0.18, 0.28) * s

    # shared layout: building skyline, lamp posts, pedestrian positions
    n_buildings = int(rng.integers(3, 6))
    buildings = []
    j = 0.0
    for _ in range(n_buildings):
        bw = rng.uniform(0.12, 0.28) * s
        bh = rng.uniform(0.35, 0.9) * road_top
        buildings.append((road_top - bh, j, bh, bw))
        j += bw + rng.uniform(0.0, 0.08) * s
    lamps = [(road_top - rng.uniform(0.12, 0.2) * s, rng.uniform(0.1, 0.9) * s)
             for _ in range(int(rng.integers(2, 4)))]
    pedestrians = [(road_top + rng.uniform(0.2, 0.8) * road_h, rng.uniform(0.1, 0.9) * s)
                   for _ in range(int(rng.integers(1, 4)))]

    vis = np.full((s, s), 0.3)
    vis += 0.08 * np.linspace(1.0, 0.0, s)[:, None]  # sky brighter on top
    for top, left, bh, bw in buildings:
        i0, i1 = int(max(top, 0)), int(min(road_top, s))
        j0, j1 = int(max(left, 0)), int(min(left + bw, s))
        if i1 > i0 and j1 > j0:
            vis[i0:i1, j0:j1] = rng.uniform(0.1, 0.25)
    r0, r1 = int(road_top), int(min(road_top + road_h, s))
    vis[r0:r1] = 0.18
    if r1 - r0 > 2:
        vis[(r0 + r1) // 2] = 0.55  # lane marking
    for ci, cj in lamps:
        _disc(vis, ci, cj, 0.03 * s + 1, 0.03 * s + 1, 0.97)
    vis = gaussian_filter(vis, 0.6) + rng.normal(0.0, 0.012, (s, s))

    ir = np.full((s, s), 0.18)
    ir += 0.05 * np.linspace(0.0, 1.0, s)[:, None]  # ground warmer than sky
    for top, left, bh, bw in buildings:  # faint thermal mass
        i0, i1 = int(max(top, 0)), int(min(road_top, s))
        j0, j1 = int(max(left, 0)), int(min(left + bw, s))
        if i1 > i0 and j1 > j0:
            ir[i0:i1, j0:j1] += 0.07
    for ci, cj in pedestrians:  # hot targets absent from vis
        _disc(ir, ci, cj, 0.09 * s, 0.045 * s + 1, rng.uniform(0.85, 0.98))
    ir = gaussian_filter(ir, 0.8) + rng.normal(0.0, 0.01, (s, s))
    return ir, vis


def _cloud(size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    s = size
    base = rng.normal(0.0, 1.0, (s, s))
    blobs = gaussian_filter(base, max(s / 6.0, 2.0))  # shared low-frequency layout
    vis = _rescale(blobs, 0.35, 0.92)
    vis = vis + gaussian_filter(rng.normal(0.0, 0.02, (s, s)), 1.5)

    direction = rng.uniform(0.0, 2.0 * np.pi)
    ii, jj = np.mgrid[0:s, 0:s]
    ramp = (np.cos(direction) * ii + np.sin(direction) * jj) / s
    ir = 0.6 + 0.12 * (ramp - ramp.mean())
    ir = ir + 0.04 * (vis - vis.mean())  # faint imprint of the cloud layout
    ir = ir + rng.normal(0.0, 0.006, (s, s))
    return gaussian_filter(ir, 1.0), vis


def _bush(size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    s = size
    noise = rng.normal(0.0, 1.0, (s, s))
    texture = gaussian_filter(noise, 0.8) - gaussian_filter(noise, 2.5)  # band-limited
    vis = _rescale(texture, 0.12, 0.88)

    ir = np.full((s, s), 0.35)
    hot_spots = texture > np.quantile(texture, 0.97)  # speckle at texture peaks
    ir[hot_spots] = rng.uniform(0.5, 0.68, int(hot_spots.sum()))
    ir = gaussian_filter(ir, 0.6) + rng.normal(0.0, 0.008, (s, s))
    return ir, vis


_GENERATORS = {"street": _street, "cloud": _cloud, "bush": _bush}


def generate_pair(category: str, size: int, seed) -> ImagePair:
    """Deterministic procedural IR/visible pair for one scene category."""
    if category not in CATEGORIES:
        raise SceneGenError(f"unknown scene category '{category}'")
    if size < MIN_SIZE:
        raise SceneGenError(f"size {size} below the minimum of {MIN_SIZE}")
    rng = np.random.default_rng(seed)
    ir, vis = _GENERATORS[category](size, rng)
    tag = seed if isinstance(seed, int) else "-".join(str(int(x)) for x in seed)
    return ImagePair(
        ir=np.clip(ir, 0.0, 1.0),
        vis=np.clip(vis, 0.0, 1.0),
        category=category,
        id=f"{category}_{tag}",
    )


def generate_dataset(profile: BiasProfile, n: int, size: int, seed: int) -> list[ImagePair]:
    """Draw n pairs i.i.d. from the bias profile; per-item sub-seeds from (seed, index)."""
    if n < 1:
        raise SceneGenError(f"dataset size must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    choices = rng.choice(len(CATEGORIES), size=n, p=profile.as_vector())
    pairs = []
    for i, c in enumerate(choices):
        pair = generate_pair(CATEGORIES[int(c)], size, (seed, i))
        pair.id = f"{i:05d}"
        pairs.append(pair)
    return pairs


# ---------------------------------------------------------------------------
# corpus directory layout


def write_corpus(pairs: list[ImagePair], root, split: str = "train"):
    """Write pairs as <root>/<split>/<category>/<id>_{ir,vis}.pgm plus a manifest."""
    root = os.fspath(root)
    for pair in pairs:
        d = os.path.join(root, split, pair.category)
        os.makedirs(d, exist_ok=True)
        pgm.write_pgm(os.path.join(d, f"{pair.id}_ir.pgm"), pair.ir)
        pgm.write_pgm(os.path.join(d, f"{pair.id}_vis.pgm"), pair.vis)
    manifest = os.path.join(root, "manifest.csv")
    tmp = f"{manifest}.tmp-{os.getpid()}"
    with open(tmp, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["id", "category", "split"])
        for pair in pairs:
            writer.writerow([pair.id, pair.category, split])
    os.replace(tmp, manifest)


def _manifest_rows(root, split):
    manifest = os.path.join(root, "manifest.csv")
    if not os.path.exists(manifest):
        raise SceneGenError(f"no manifest.csv under {root}")
    with open(manifest, newline="") as f:
        for row in csv.DictReader(f):
            if split is None or row["split"] == split:
                yield row


def read_corpus(root, split: str | None = None) -> list[ImagePair]:
    """Load a corpus in manifest order, optionally restricted to one split."""
    root = os.fspath(root)
    pairs = []
    for row in _manifest_rows(root, split):
        d = os.path.join(root, row["split"], row["category"])
        pairs.append(
            ImagePair(
                ir=pgm.read_pgm(os.path.join(d, f"{row['id']}_ir.pgm")),
                vis=pgm.read_pgm(os.path.join(d, f"{row['id']}_vis.pgm")),
                category=row["category"],
                id=row["id"],
            )
        )
    return pairs


def read_corpus_images(root, modality: str, split: str | None = None) -> list[np.ndarray]:
    """Load only one modality's images (the other modality's files are not touched)."""
    if modality not in ("infrared", "visible"):
        raise SceneGenError(f"unknown modality '{modality}'")
    suffix = "ir" if modality == "infrared" else "vis"
    root = os.fspath(root)
    return [
        pgm.read_pgm(os.path.join(root, row["split"], row["category"], f"{row['id']}_{suffix}.pgm"))
        for row in _manifest_rows(root, split)
    ]
