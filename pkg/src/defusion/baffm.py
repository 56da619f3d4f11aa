"""Back-door Adjustment based Feature Fusion Module (BAFFM).

Given joint encoder features X and one frozen scene dictionary per
modality, the module computes scaled dot-product attention between a
pooled query of X and every dictionary entry, integrates the entries
under a uniform prior, and adds the result as a per-channel offset to
the content projection:

    out = W_h X + W_g_vis E_vis + W_g_ir E_ir
    E   = (1/N) * sum_i lambda_i z_i
    lambda = softmax((W_q pool(X))^T (W_k z_i) / sqrt(d_q))

The (1/N) uniform-prior factor is applied on top of the already
normalized attention weights, on purpose: both factors exist in the
integration rule this module realizes. Zeroing both W_g projections
collapses the module to the plain content path, which is exactly the
"without adjustment" ablation baseline.

Dictionary entries are constants in the graph: gradients reach the
four projection families but never the dictionaries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .confounder import ConfounderDictionary
from .diffcore import Tensor


@dataclass
class BaffmParams:
    """Learnable projections; tensors usually live in a ParamStore."""

    w_q: Tensor      # (d_q, C) query projection of pooled features
    w_k: Tensor      # (d_q, d) key projection of dictionary entries
    w_h: Tensor      # (C_out, C) content projection
    w_g_vis: Tensor  # (C_out, d) visible confounder projection
    w_g_ir: Tensor   # (C_out, d) infrared confounder projection

    @property
    def attention_dim(self) -> int:
        return self.w_q.shape[0]


def attention_weights(x: Tensor, dictionary: ConfounderDictionary, params: BaffmParams) -> Tensor:
    """Importance of each dictionary entry for the given feature map.

    The feature map is global-average-pooled to a channel vector, so
    attention is one weight per image per entry. Returns a positive
    (N,) tensor summing to 1.
    """
    x = dc._as_tensor(x)
    c = x.shape[0]
    if params.w_q.shape[1] != c:
        raise dc.DimensionError(
            f"feature channels {c} do not match query projection {params.w_q.shape}"
        )
    if params.w_k.shape[1] != dictionary.dim:
        raise dc.DimensionError(
            f"dictionary dimension {dictionary.dim} does not match key projection {params.w_k.shape}"
        )
    pooled = dc.reshape(dc.spatial_mean(x), (c, 1))
    query = dc.matmul(params.w_q, pooled)                      # (d_q, 1)
    keys = dc.matmul(params.w_k, Tensor(dictionary.centers.T))  # (d_q, N)
    logits = dc.matmul(dc.transpose2d(query), keys)             # (1, N)
    logits = dc.mul_scalar(logits, 1.0 / np.sqrt(params.attention_dim))
    return dc.softmax(dc.reshape(logits, (dictionary.n_clusters,)))


def expected_confounder(lam: Tensor, dictionary: ConfounderDictionary) -> Tensor:
    """Uniform-prior weighted integration (1/N) * sum_i lambda_i z_i -> (d,)."""
    lam = dc._as_tensor(lam)
    n = dictionary.n_clusters
    if lam.shape != (n,):
        raise dc.DimensionError(f"weights of shape {lam.shape} do not match {n} dictionary entries")
    weighted = dc.matmul(dc.reshape(lam, (1, n)), Tensor(dictionary.centers))  # (1, d)
    return dc.reshape(dc.mul_scalar(weighted, 1.0 / n), (dictionary.dim,))


def deconfounded_fuse(x: Tensor, dict_vis: ConfounderDictionary,
                      dict_ir: ConfounderDictionary, params: BaffmParams) -> Tensor:
    """Content projection plus per-modality confounder offsets.

    The confounder term is a per-channel constant broadcast over all
    spatial positions. Fully differentiable into every projection.
    """
    x = dc._as_tensor(x)
    if dict_vis.dim != dict_ir.dim:
        raise dc.DimensionError(
            f"dictionary dimensions differ: visible {dict_vis.dim} vs infrared {dict_ir.dim}"
        )
    if params.w_g_vis.shape[1] != dict_vis.dim:
        raise dc.DimensionError(
            f"dictionary dimension {dict_vis.dim} does not match confounder projection {params.w_g_vis.shape}"
        )
    c, h, w = x.shape
    c_out = params.w_h.shape[0]
    content = dc.reshape(dc.matmul(params.w_h, dc.reshape(x, (c, h * w))), (c_out, h, w))

    e_vis = expected_confounder(attention_weights(x, dict_vis, params), dict_vis)
    e_ir = expected_confounder(attention_weights(x, dict_ir, params), dict_ir)
    offset_vis = dc.matmul(params.w_g_vis, dc.reshape(e_vis, (dict_vis.dim, 1)))
    offset_ir = dc.matmul(params.w_g_ir, dc.reshape(e_ir, (dict_ir.dim, 1)))
    offset = dc.reshape(dc.add(offset_vis, offset_ir), (c_out,))
    return dc.add_channel(content, offset)
