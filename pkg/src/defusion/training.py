"""Loss, augmentation and the Adam training loop.

The loss is the standard composite used across infrared/visible fusion
work: pull the fused image toward the elementwise max of the sources,
pull its Sobel gradients toward the stronger source gradient, and keep
structural similarity with both sources. All three terms run inside
the autodiff graph.

Determinism: every stochastic draw of an epoch (shuffle order and
augmentation windows/flips) comes from a generator seeded with
(seed, epoch), so resuming from an epoch-boundary checkpoint replays
the exact run.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .scenegen import ImagePair


class TrainingError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 6
    epochs: int = 30
    crop: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise TrainingError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class LossConfig:
    alpha: float = 1.0   # intensity weight
    beta: float = 1.0    # gradient weight
    gamma: float = 0.5   # structural weight

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise TrainingError("loss weights must be non-negative")
        if self.alpha == self.beta == self.gamma == 0:
            raise TrainingError("at least one loss weight must be positive")


SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()

_SSIM_K1 = 0.01
_SSIM_K2 = 0.03
_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax * ax) / (2.0 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def _ssim_mean(y: Tensor, target: np.ndarray) -> Tensor:
    """Differentiable mean local SSIM of y against a fixed target.

    Uses zero-padded same-size windows; clamps the window when the
    image is smaller than 11 so small training crops stay legal.
    """
    h, w = target.shape
    size = min(_SSIM_WINDOW, min(h, w) if min(h, w) % 2 == 1 else min(h, w) - 1)
    win = Tensor(_gaussian_window(size, _SSIM_SIGMA)[None, None])
    pad = (size - 1) // 2
    t = Tensor(target[None])
    c1 = _SSIM_K1 * _SSIM_K1
    c2 = _SSIM_K2 * _SSIM_K2

    mu_y = dc.conv2d(y, win, padding=pad)
    mu_t = dc.conv2d(t, win, padding=pad)
    var_y = dc.conv2d(dc.mul(y, y), win, padding=pad) - dc.mul(mu_y, mu_y)
    var_t = dc.conv2d(dc.mul(t, t), win, padding=pad) - dc.mul(mu_t, mu_t)
    cov = dc.conv2d(dc.mul(y, t), win, padding=pad) - dc.mul(mu_y, mu_t)

    num = (dc.mul(mu_y, mu_t) * 2.0 + c1) * (cov * 2.0 + c2)
    den = (dc.mul(mu_y, mu_y) + dc.mul(mu_t, mu_t) + c1) * (var_y + var_t + c2)
    return dc.tensor_mean(dc.div(num, den))


def fusion_loss(y: Tensor, ir: np.ndarray, vis: np.ndarray, cfg: LossConfig) -> Tensor:
    """Composite fusion loss; y is the (1, H, W) network output tensor."""
    ir = np.asarray(ir, dtype=np.float64)
    vis = np.asarray(vis, dtype=np.float64)
    if ir.shape != vis.shape or y.shape != (1,) + ir.shape:
        raise TrainingError(f"misaligned shapes: y {y.shape}, ir {ir.shape}, vis {vis.shape}")

    intensity = dc.tensor_mean(dc.abs_map(y - Tensor(np.maximum(ir, vis)[None])))

    grad_terms = []
    for kernel in (SOBEL_X, SOBEL_Y):
        k = Tensor(kernel[None, None])
        g_y = dc.conv2d(y, k, padding=1)
        g_ir = dc.conv2d_forward(ir[None], kernel[None, None], None, padding=1)
        g_vis = dc.conv2d_forward(vis[None], kernel[None, None], None, padding=1)
        # target: the source gradient with the larger magnitude, sign kept
        target = np.where(np.abs(g_ir) >= np.abs(g_vis), g_ir, g_vis)
        grad_terms.append(dc.tensor_mean(dc.abs_map(g_y - Tensor(target))))
    gradient = (grad_terms[0] + grad_terms[1]) * 0.5

    structural = 1.0 - (_ssim_mean(y, ir) + _ssim_mean(y, vis)) * 0.5

    return intensity * cfg.alpha + gradient * cfg.beta + structural * cfg.gamma


def augment(pair: ImagePair, crop: int, rng: np.random.Generator) -> ImagePair:
    """One shared crop window and one shared flip decision for both modalities."""
    h, w = pair.ir.shape
    if crop > min(h, w):
        raise TrainingError(f"crop {crop} exceeds image size {pair.ir.shape}")
    top = int(rng.integers(0, h - crop + 1))
    left = int(rng.integers(0, w - crop + 1))
    flip = bool(rng.random() < 0.5)
    ir = pair.ir[top : top + crop, left : left + crop]
    vis = pair.vis[top : top + crop, left : left + crop]
    if flip:
        ir = ir[:, ::-1]
        vis = vis[:, ::-1]
    return ImagePair(ir=ir.copy(), vis=vis.copy(), category=pair.category, id=pair.id)


def train(model, dataset: list[ImagePair], tcfg: TrainConfig, lcfg: LossConfig,
          start_epoch: int = 0, on_epoch=None) -> list[float]:
    """Shuffled mini-batch Adam loop; returns per-epoch mean losses.

    ``start_epoch`` continues a run whose optimizer state was restored
    from a checkpoint; epochs [start_epoch, epochs) are executed.
    """
    if not dataset:
        raise TrainingError("training dataset is empty")
    history = []
    for epoch in range(start_epoch, tcfg.epochs):
        rng = np.random.default_rng((tcfg.seed, epoch))
        order = rng.permutation(len(dataset))
        batch_losses = []
        for lo in range(0, len(order), tcfg.batch_size):
            batch = order[lo : lo + tcfg.batch_size]
            total = None
            for idx in batch:
                a = augment(dataset[int(idx)], tcfg.crop, rng)
                y = model.forward(a.ir, a.vis)
                loss = fusion_loss(y, a.ir, a.vis, lcfg)
                total = loss if total is None else dc.add(total, loss)
            batch_loss = dc.mul_scalar(total, 1.0 / len(batch))
            model.store.zero_grad()
            dc.backward(batch_loss)
            dc.adam_step(model.store, lr=tcfg.lr)
            batch_losses.append(batch_loss.item())
        history.append(float(np.mean(batch_losses)))
        if on_epoch is not None:
            on_epoch(epoch, history[-1])
    return history


def write_loss_log(path, history: list[float], start_epoch: int = 0):
    tmp = f"{os.fspath(path)}.tmp-{os.getpid()}"
    with open(tmp, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "mean_loss"])
        for i, loss in enumerate(history):
            writer.writerow([start_epoch + i, f"{loss:.12g}"])
    os.replace(tmp, path)
