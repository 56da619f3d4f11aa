"""End-to-end fusion network: joint encoder, BAFFM, reconstruction.

Two small per-modality conv stems feed a merge convolution producing
the joint feature map; BAFFM adds the scene-deconfounding offset; one
convolution plus an affine tanh maps back to a single-channel image in
(0, 1). Sizes default to the smallest configuration that trains in
minutes on one CPU core.

Checkpoints are JSON text documents carrying the model config, every
parameter with exact float64 values, the Adam state, and references to
the two dictionary files (relative path plus content hash) so a
checkpoint pins its confounders.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import diffcore as dc
from .baffm import BaffmParams, deconfounded_fuse
from .confounder import ConfounderDictionary, load_dictionary
from .diffcore import ParamStore, Tensor


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    stem_channels: int = 8
    feature_channels: int = 16
    attention_dim: int = 8
    kernel_size: int = 3
    baffm_enabled: bool = True


class FusionModel:
    def __init__(self, config: ModelConfig, dict_vis: ConfounderDictionary,
                 dict_ir: ConfounderDictionary, seed: int = 0):
        self.config = config
        self.dict_vis = dict_vis
        self.dict_ir = dict_ir
        self.seed = seed
        self.store = ParamStore()
        self._init_params(np.random.default_rng(seed))

    def _init_params(self, rng):
        cfg = self.config
        k, cs, c = cfg.kernel_size, cfg.stem_channels, cfg.feature_channels
        d = self.dict_vis.dim
        dq = cfg.attention_dim

        def conv_init(c_out, c_in):
            std = 1.0 / np.sqrt(c_in * k * k)
            return rng.normal(0.0, std, (c_out, c_in, k, k))

        def mat_init(rows, cols, gain=1.0):
            return rng.normal(0.0, gain / np.sqrt(cols), (rows, cols))

        # Dictionary entries are PCA-centered cluster means: they average to
        # ~0 and have small coordinates, and the uniform prior divides the
        # integrated entry by N again. The attention projections start with
        # enough gain to spread the logits at init (so different scenes route
        # to different entries from step one), and the confounder projections
        # start N-times larger so their additive term is comparable to the
        # content path instead of vanishing.
        attn_gain = 10.0
        offset_gain = 2.0 * self.dict_vis.n_clusters

        add = self.store.add
        add("encoder.ir_stem.kernel", conv_init(cs, 1))
        add("encoder.ir_stem.bias", np.zeros(cs))
        add("encoder.vis_stem.kernel", conv_init(cs, 1))
        add("encoder.vis_stem.bias", np.zeros(cs))
        add("encoder.merge.kernel", conv_init(c, 2 * cs))
        add("encoder.merge.bias", np.zeros(c))
        # draws happen regardless of baffm_enabled so the shared parameters
        # get identical inits in ablation comparisons; disabled projections
        # are then zeroed and frozen
        on = cfg.baffm_enabled
        add("baffm.w_q", mat_init(dq, c, attn_gain) * on, requires_grad=on)
        add("baffm.w_k", mat_init(dq, d, attn_gain) * on, requires_grad=on)
        add("baffm.w_h", mat_init(c, c))
        add("baffm.w_g_vis", mat_init(c, d, offset_gain) * on, requires_grad=on)
        add("baffm.w_g_ir", mat_init(c, d, offset_gain) * on, requires_grad=on)
        add("recon.kernel", conv_init(1, c))
        add("recon.bias", np.zeros(1))

    @property
    def baffm_params(self) -> BaffmParams:
        p = self.store
        return BaffmParams(
            w_q=p["baffm.w_q"], w_k=p["baffm.w_k"], w_h=p["baffm.w_h"],
            w_g_vis=p["baffm.w_g_vis"], w_g_ir=p["baffm.w_g_ir"],
        )

    # ------------------------------------------------------------------
    # forward passes

    def encode(self, ir: np.ndarray, vis: np.ndarray) -> Tensor:
        """Per-modality stems, channel concat, merge conv -> (C, H, W)."""
        ir = np.asarray(ir, dtype=np.float64)
        vis = np.asarray(vis, dtype=np.float64)
        if ir.shape != vis.shape:
            raise dc.DimensionError(f"modality sizes differ: ir {ir.shape} vs vis {vis.shape}")
        p = self.store
        f_ir = dc.tanh_map(dc.conv2d(Tensor(ir[None]), p["encoder.ir_stem.kernel"],
                                     p["encoder.ir_stem.bias"]))
        f_vis = dc.tanh_map(dc.conv2d(Tensor(vis[None]), p["encoder.vis_stem.kernel"],
                                      p["encoder.vis_stem.bias"]))
        merged = dc.concat_channels([f_ir, f_vis])
        return dc.conv2d(merged, p["encoder.merge.kernel"], p["encoder.merge.bias"])

    def reconstruct(self, features: Tensor) -> Tensor:
        """Conv + affine tanh head; output channel in (0, 1)."""
        p = self.store
        pre = dc.conv2d(features, p["recon.kernel"], p["recon.bias"])
        return dc.mul_scalar(dc.add_scalar(dc.tanh_map(pre), 1.0), 0.5)

    def forward(self, ir: np.ndarray, vis: np.ndarray) -> Tensor:
        """Full differentiable pass; returns the fused image as a (1, H, W) tensor."""
        x = self.encode(ir, vis)
        fused = deconfounded_fuse(x, self.dict_vis, self.dict_ir, self.baffm_params)
        return self.reconstruct(fused)

    def fuse(self, ir: np.ndarray, vis: np.ndarray) -> np.ndarray:
        """Inference: fused (H, W) image in (0, 1)."""
        return self.forward(ir, vis).values[0]

    # ------------------------------------------------------------------
    # checkpointing

    def save(self, path, dict_vis_ref: tuple | None = None,
             dict_ir_ref: tuple | None = None, epochs_trained: int = 0):
        """Write the checkpoint JSON; dictionary refs are (path, sha256) pairs."""
        doc = {
            "format": "defusion-checkpoint-v1",
            "config": asdict(self.config),
            "seed": self.seed,
            "epochs_trained": epochs_trained,
            "dictionaries": {
                "visible": _ref_doc(dict_vis_ref),
                "infrared": _ref_doc(dict_ir_ref),
            },
            "store": self.store.state_dict(),
        }
        tmp = f"{os.fspath(path)}.tmp-{os.getpid()}"
        with open(tmp, "w") as f:
            json.dump(doc, f, sort_keys=True)
            f.write("\n")
        os.replace(tmp, path)

    @classmethod
    def load(cls, path, dict_vis: ConfounderDictionary | None = None,
             dict_ir: ConfounderDictionary | None = None) -> tuple["FusionModel", int]:
        """Rebuild a model from a checkpoint; returns (model, epochs_trained).

        Dictionaries are resolved from the stored references (relative
        to the checkpoint directory) unless passed in explicitly; the
        content hash is verified either way a reference is used.
        """
        with open(path) as f:
            doc = json.load(f)
        if doc.get("format") != "defusion-checkpoint-v1":
            raise CheckpointError(f"{path}: not a checkpoint file")
        base = os.path.dirname(os.path.abspath(os.fspath(path)))
        if dict_vis is None:
            dict_vis = _resolve_dictionary(doc["dictionaries"]["visible"], base)
        if dict_ir is None:
            dict_ir = _resolve_dictionary(doc["dictionaries"]["infrared"], base)
        model = cls(ModelConfig(**doc["config"]), dict_vis, dict_ir, seed=doc["seed"])
        model.store.load_state_dict(doc["store"])
        return model, int(doc["epochs_trained"])


def _ref_doc(ref: tuple | None) -> dict | None:
    if ref is None:
        return None
    path, digest = ref
    return {"path": os.fspath(path), "sha256": digest}


def file_sha256(path) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def _resolve_dictionary(ref: dict | None, base: str) -> ConfounderDictionary:
    if ref is None:
        raise CheckpointError("checkpoint carries no dictionary reference; pass dictionaries explicitly")
    candidates = [os.path.join(base, ref["path"]), ref["path"]]
    for candidate in candidates:
        if os.path.exists(candidate):
            digest = file_sha256(candidate)
            if digest != ref["sha256"]:
                raise CheckpointError(
                    f"dictionary {candidate} hash {digest[:12]}... does not match checkpoint pin"
                )
            return load_dictionary(candidate)
    raise CheckpointError(f"dictionary file '{ref['path']}' not found near checkpoint")
