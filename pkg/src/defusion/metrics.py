"""Fusion quality measures: MI, SSIM, Qabf, VIF.

All four operate on [0, 1] grayscale images. Aggregation over the two
source images follows the dominant conventions in the fusion
literature: mutual information is summed over sources, SSIM and VIF
are averaged, and Qabf is inherently a three-image measure. Numbers
are comparable across runs of this package, not across publications.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d


class MetricInputError(ValueError):
    pass


@dataclass
class MetricReport:
    image_id: str
    mi: float
    vif: float
    qabf: float
    ssim: float


def _check_pair(a, b, name):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricInputError(f"{name}: shapes {a.shape} and {b.shape} differ")
    return a, b


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax * ax) / (2.0 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


# ---------------------------------------------------------------------------
# mutual information


def mutual_information(a: np.ndarray, b: np.ndarray, bins: int = 256) -> float:
    """Histogram mutual information in bits over a joint bins x bins grid."""
    a, b = _check_pair(a, b, "mutual_information")
    joint, _, _ = np.histogram2d(a.ravel(), b.ravel(), bins=bins, range=[[0.0, 1.0], [0.0, 1.0]])
    p = joint / joint.sum()
    pa = p.sum(axis=1, keepdims=True)
    pb = p.sum(axis=0, keepdims=True)
    nz = p > 0
    return float(np.sum(p[nz] * np.log2(p[nz] / (pa * pb)[nz])))


# ---------------------------------------------------------------------------
# SSIM


SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean local SSIM, 11x11 Gaussian window, valid positions only."""
    a, b = _check_pair(a, b, "ssim")
    if min(a.shape) < SSIM_WINDOW:
        raise MetricInputError(f"ssim: image of shape {a.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    win = _gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2

    mu1 = convolve2d(a, win, mode="valid")
    mu2 = convolve2d(b, win, mode="valid")
    sigma1 = convolve2d(a * a, win, mode="valid") - mu1 * mu1
    sigma2 = convolve2d(b * b, win, mode="valid") - mu2 * mu2
    sigma12 = convolve2d(a * b, win, mode="valid") - mu1 * mu2

    num = (2 * mu1 * mu2 + c1) * (2 * sigma12 + c2)
    den = (mu1 * mu1 + mu2 * mu2 + c1) * (sigma1 + sigma2 + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# Qabf (gradient-preservation measure)


_QABF_GAMMA_G = 0.9994
_QABF_KAPPA_G = -15.0
_QABF_SIGMA_G = 0.5
_QABF_GAMMA_A = 0.9879
_QABF_KAPPA_A = -22.0
_QABF_SIGMA_A = 0.8

_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])


def _edge_strength_angle(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # symmetric boundary: flat images carry zero edge strength everywhere
    gx = convolve2d(img, _SOBEL_X[::-1, ::-1], mode="same", boundary="symm")
    gy = convolve2d(img, _SOBEL_X.T[::-1, ::-1], mode="same", boundary="symm")
    strength = np.sqrt(gx * gx + gy * gy)
    with np.errstate(divide="ignore", invalid="ignore"):
        angle = np.where(gx == 0.0, np.pi / 2.0, np.arctan(np.divide(gy, gx, where=gx != 0.0)))
    return strength, angle


def _edge_preservation(g_src, a_src, g_fus, a_fus):
    g_max = np.maximum(g_src, g_fus)
    g_min = np.minimum(g_src, g_fus)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(g_max > 0.0, g_min / np.where(g_max > 0.0, g_max, 1.0), 0.0)
    angle_sim = np.abs(np.abs(a_src - a_fus) - np.pi / 2.0) * 2.0 / np.pi
    q_g = _QABF_GAMMA_G / (1.0 + np.exp(_QABF_KAPPA_G * (ratio - _QABF_SIGMA_G)))
    q_a = _QABF_GAMMA_A / (1.0 + np.exp(_QABF_KAPPA_A * (angle_sim - _QABF_SIGMA_A)))
    return q_g * q_a


def qabf(ir: np.ndarray, vis: np.ndarray, fused: np.ndarray) -> float:
    """Source-strength-weighted gradient transfer from both sources to the fusion.

    Returns 0 for the degenerate case of zero total source edge strength.
    """
    ir, vis = _check_pair(ir, vis, "qabf")
    _, fused = _check_pair(ir, fused, "qabf")
    g_ir, a_ir = _edge_strength_angle(ir)
    g_vis, a_vis = _edge_strength_angle(vis)
    g_f, a_f = _edge_strength_angle(fused)
    weight = g_ir + g_vis
    total = weight.sum()
    # a single real edge pixel contributes >= ~8e-3; below this is rounding residue
    if total < 1e-8:
        return 0.0
    q_ir = _edge_preservation(g_ir, a_ir, g_f, a_f)
    q_vis = _edge_preservation(g_vis, a_vis, g_f, a_f)
    return float(np.sum(q_ir * g_ir + q_vis * g_vis) / total)


# ---------------------------------------------------------------------------
# VIF (pixel domain, multi-scale)


_VIF_EPS = 1e-10
_VIF_SIGMA_NSQ = 2.0 / 255.0**2  # classic noise variance rescaled to unit range
VIF_MIN_SIDE = 8


def vif(ref: np.ndarray, dist: np.ndarray) -> float:
    """Pixel-domain visual information fidelity over 4 pyramid scales.

    Window sizes follow the classic 2^(5-s)+1 schedule but are clamped
    to the current image side so images down to the documented minimum
    stay measurable; scales that cannot fit at all are skipped.
    """
    ref, dist = _check_pair(ref, dist, "vif")
    if min(ref.shape) < VIF_MIN_SIDE:
        raise MetricInputError(f"vif: image of shape {ref.shape} below the minimum side of {VIF_MIN_SIDE}")
    num = 0.0
    den = 0.0
    r, d = ref, dist
    for scale in range(1, 5):
        n = 2 ** (4 - scale + 1) + 1
        side = min(r.shape)
        if side < 3:
            break
        if n > side:
            n = side if side % 2 == 1 else side - 1
        win = _gaussian_kernel(n, n / 5.0)
        if scale > 1:
            r = convolve2d(r, win, mode="valid")[::2, ::2]
            d = convolve2d(d, win, mode="valid")[::2, ::2]
            if min(r.shape) < n:
                break
        mu1 = convolve2d(r, win, mode="valid")
        mu2 = convolve2d(d, win, mode="valid")
        sigma1 = np.clip(convolve2d(r * r, win, mode="valid") - mu1 * mu1, 0.0, None)
        sigma2 = np.clip(convolve2d(d * d, win, mode="valid") - mu2 * mu2, 0.0, None)
        sigma12 = convolve2d(r * d, win, mode="valid") - mu1 * mu2

        g = sigma12 / (sigma1 + _VIF_EPS)
        sv_sq = sigma2 - g * sigma12

        g = np.where(sigma1 < _VIF_EPS, 0.0, g)
        sv_sq = np.where(sigma1 < _VIF_EPS, sigma2, sv_sq)
        sv_sq = np.where(sigma2 < _VIF_EPS, 0.0, sv_sq)
        g = np.where(sigma2 < _VIF_EPS, 0.0, g)
        sv_sq = np.where(g < 0.0, sigma2, sv_sq)
        g = np.clip(g, 0.0, None)
        sv_sq = np.clip(sv_sq, _VIF_EPS, None)

        num += float(np.sum(np.log10(1.0 + g * g * sigma1 / (sv_sq + _VIF_SIGMA_NSQ))))
        den += float(np.sum(np.log10(1.0 + sigma1 / _VIF_SIGMA_NSQ)))
    if den == 0.0:
        return 1.0  # reference carries no information to lose
    return num / den


# ---------------------------------------------------------------------------
# whole-dataset evaluation


def evaluate(model, dataset) -> tuple[list[MetricReport], MetricReport | None]:
    """Fuse every pair and report all four aggregates plus the column means."""
    reports = []
    for pair in dataset:
        fused = model.fuse(pair.ir, pair.vis)
        reports.append(
            MetricReport(
                image_id=pair.id,
                mi=mutual_information(fused, pair.ir) + mutual_information(fused, pair.vis),
                vif=(vif(pair.ir, fused) + vif(pair.vis, fused)) / 2.0,
                qabf=qabf(pair.ir, pair.vis, fused),
                ssim=(ssim(fused, pair.ir) + ssim(fused, pair.vis)) / 2.0,
            )
        )
    if not reports:
        return [], None
    summary = MetricReport(
        image_id="MEAN",
        mi=float(np.mean([r.mi for r in reports])),
        vif=float(np.mean([r.vif for r in reports])),
        qabf=float(np.mean([r.qabf for r in reports])),
        ssim=float(np.mean([r.ssim for r in reports])),
    )
    return reports, summary


def write_report_csv(path, reports: list[MetricReport], summary: MetricReport | None):
    """CSV with 6-decimal fixed formatting and a final MEAN row."""
    tmp = f"{os.fspath(path)}.tmp-{os.getpid()}"
    with open(tmp, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["image_id", "MI", "VIF", "Qabf", "SSIM"])
        rows = list(reports) + ([summary] if summary is not None else [])
        for r in rows:
            writer.writerow([r.image_id, f"{r.mi:.6f}", f"{r.vif:.6f}", f"{r.qabf:.6f}", f"{r.ssim:.6f}"])
    os.replace(tmp, path)


def read_report_csv(path) -> tuple[list[MetricReport], MetricReport | None]:
    reports = []
    summary = None
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            rec = MetricReport(
                image_id=row["image_id"], mi=float(row["MI"]), vif=float(row["VIF"]),
                qabf=float(row["Qabf"]), ssim=float(row["SSIM"]),
            )
            if rec.image_id == "MEAN":
                summary = rec
            else:
                reports.append(rec)
    return reports, summary
