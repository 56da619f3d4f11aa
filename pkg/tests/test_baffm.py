"""Attention, uniform-prior integration, and the deconfounded output."""

import numpy as np
import pytest

from defusion import diffcore as dc
from defusion.baffm import (
    BaffmParams,
    attention_weights,
    deconfounded_fuse,
    expected_confounder,
)
from defusion.confounder import ConfounderDictionary, PcaModel
from defusion.diffcore import DimensionError, Tensor


def _dictionary(centers, modality="visible"):
    centers = np.asarray(centers, dtype=np.float64)
    d = centers.shape[1]
    return ConfounderDictionary(
        modality=modality,
        centers=centers,
        n_clusters=centers.shape[0],
        seed=0,
        pca=PcaModel(mean=np.zeros(d), components=np.eye(d), eigenvalues=np.ones(d)),
    )


def _params(c=3, d=2, dq=2, seed=0, c_out=None):
    rng = np.random.default_rng(seed)
    c_out = c if c_out is None else c_out
    return BaffmParams(
        w_q=Tensor(rng.normal(size=(dq, c)), requires_grad=True),
        w_k=Tensor(rng.normal(size=(dq, d)), requires_grad=True),
        w_h=Tensor(rng.normal(size=(c_out, c)), requires_grad=True),
        w_g_vis=Tensor(rng.normal(size=(c_out, d)), requires_grad=True),
        w_g_ir=Tensor(rng.normal(size=(c_out, d)), requires_grad=True),
    )


class TestAttentionWeights:
    def test_identical_rows_uniform(self):
        z = _dictionary(np.tile([0.3, -0.7], (5, 1)))
        x = Tensor(np.random.default_rng(1).normal(size=(3, 4, 4)))
        lam = attention_weights(x, z, _params())
        np.testing.assert_allclose(lam.values, np.full(5, 0.2), atol=1e-12)

    def test_single_entry(self):
        z = _dictionary([[1.0, 2.0]])
        x = Tensor(np.random.default_rng(2).normal(size=(3, 4, 4)))
        np.testing.assert_array_equal(attention_weights(x, z, _params()).values, [1.0])

    def test_hand_computed_two_entries(self):
        # projections chosen so the logits come out as exactly (1, 3)/sqrt(1)
        params = BaffmParams(
            w_q=Tensor(np.array([[1.0]])),
            w_k=Tensor(np.array([[1.0]])),
            w_h=Tensor(np.eye(1)),
            w_g_vis=Tensor(np.zeros((1, 1))),
            w_g_ir=Tensor(np.zeros((1, 1))),
        )
        z = _dictionary([[1.0], [3.0]])
        x = Tensor(np.ones((1, 2, 2)))  # pooled feature = 1.0
        lam = attention_weights(x, z, params)
        np.testing.assert_allclose(lam.values, [0.11920292, 0.88079708], atol=1e-4)

    def test_normalized_and_positive(self):
        rng = np.random.default_rng(3)
        for trial in range(20):
            z = _dictionary(rng.normal(size=(7, 2)) * 3)
            x = Tensor(rng.normal(size=(3, 5, 5)))
            lam = attention_weights(x, z, _params(seed=trial)).values
            assert abs(lam.sum() - 1.0) <= 1e-12
            assert np.all(lam > 0)

    def test_channel_mismatch_rejected(self):
        z = _dictionary([[0.0, 0.0]])
        x = Tensor(np.zeros((4, 3, 3)))  # 4 channels vs W_q expecting 3
        with pytest.raises(DimensionError):
            attention_weights(x, z, _params(c=3))


class TestExpectedConfounder:
    def test_identical_rows_collapse(self):
        c = np.array([2.0, -1.0])
        z = _dictionary(np.tile(c, (4, 1)))
        for lam in ([0.25, 0.25, 0.25, 0.25], [0.7, 0.1, 0.1, 0.1]):
            out = expected_confounder(Tensor(np.array(lam)), z)
            np.testing.assert_allclose(out.values, c / 4, rtol=1e-14)

    def test_single_entry_identity(self):
        z = _dictionary([[5.0, 7.0]])
        out = expected_confounder(Tensor(np.array([1.0])), z)
        np.testing.assert_allclose(out.values, [5.0, 7.0], rtol=1e-15)

    def test_hand_case(self):
        z = _dictionary([[1.0, 0.0], [0.0, 1.0]])
        out = expected_confounder(Tensor(np.array([0.25, 0.75])), z)
        np.testing.assert_allclose(out.values, [0.125, 0.375], rtol=1e-15)

    def test_linear_in_dictionary(self):
        rng = np.random.default_rng(4)
        centers = rng.normal(size=(6, 3))
        lam = rng.dirichlet(np.ones(6))
        base = expected_confounder(Tensor(lam), _dictionary(centers)).values
        for s in (2.0, 3.0, -0.5):
            scaled = expected_confounder(Tensor(lam), _dictionary(centers * s)).values
            np.testing.assert_allclose(scaled, base * s, rtol=1e-12)

    def test_length_mismatch_rejected(self):
        with pytest.raises(DimensionError):
            expected_confounder(Tensor(np.ones(3) / 3), _dictionary([[1.0, 0.0]]))


class TestDeconfoundedFuse:
    def test_zero_projections_reduce_to_content(self):
        rng = np.random.default_rng(5)
        params = _params(seed=6)
        params.w_g_vis = Tensor(np.zeros((3, 2)))
        params.w_g_ir = Tensor(np.zeros((3, 2)))
        z_vis = _dictionary(rng.normal(size=(4, 2)))
        z_ir = _dictionary(rng.normal(size=(4, 2)), modality="infrared")
        x = Tensor(rng.normal(size=(3, 5, 5)))
        out = deconfounded_fuse(x, z_vis, z_ir, params)
        content = params.w_h.values @ x.values.reshape(3, 25)
        assert np.array_equal(out.values, content.reshape(3, 5, 5))

    def test_zero_dictionaries_reduce_to_content(self):
        rng = np.random.default_rng(7)
        params = _params(seed=8)
        z_vis = _dictionary(np.zeros((4, 2)))
        z_ir = _dictionary(np.zeros((4, 2)), modality="infrared")
        x = Tensor(rng.normal(size=(3, 4, 4)))
        out = deconfounded_fuse(x, z_vis, z_ir, params)
        content = params.w_h.values @ x.values.reshape(3, 16)
        assert np.array_equal(out.values, content.reshape(3, 4, 4))

    def test_scalar_hand_case(self):
        params = BaffmParams(
            w_q=Tensor(np.array([[1.0]])),
            w_k=Tensor(np.array([[1.0]])),
            w_h=Tensor(np.array([[2.0]])),
            w_g_vis=Tensor(np.array([[3.0]])),
            w_g_ir=Tensor(np.array([[0.0]])),
        )
        z_vis = _dictionary([[0.5]])
        z_ir = _dictionary([[0.9]], modality="infrared")
        x = Tensor(np.ones((1, 1, 1)))
        out = deconfounded_fuse(x, z_vis, z_ir, params)
        np.testing.assert_allclose(out.values, [[[3.5]]], rtol=1e-15)

    def test_offset_constant_over_space(self):
        rng = np.random.default_rng(9)
        params = _params(seed=10)
        z_vis = _dictionary(rng.normal(size=(5, 2)))
        z_ir = _dictionary(rng.normal(size=(5, 2)), modality="infrared")
        x = Tensor(rng.normal(size=(3, 6, 6)))
        out = deconfounded_fuse(x, z_vis, z_ir, params).values
        content = (params.w_h.values @ x.values.reshape(3, 36)).reshape(3, 6, 6)
        offset = out - content
        for c in range(3):
            assert np.ptp(offset[c]) < 1e-12

    def test_gradients_reach_projections_not_dictionaries(self):
        rng = np.random.default_rng(11)
        params = _params(seed=12)
        z_vis = _dictionary(rng.normal(size=(5, 2)))
        z_ir = _dictionary(rng.normal(size=(5, 2)), modality="infrared")
        x = Tensor(rng.normal(size=(3, 4, 4)), requires_grad=True)
        out = deconfounded_fuse(x, z_vis, z_ir, params)
        dc.backward(dc.tensor_mean(dc.mul(out, out)))
        for name in ("w_q", "w_k", "w_h", "w_g_vis", "w_g_ir"):
            grad = getattr(params, name).grad
            assert grad is not None and np.any(grad != 0), name
        # dictionaries are frozen numpy inputs: nothing to accumulate into
        assert x.grad is not None

    def test_dictionary_dimension_mismatch(self):
        params = _params()
        z_vis = _dictionary(np.zeros((4, 2)))
        z_ir = _dictionary(np.zeros((4, 3)), modality="infrared")
        with pytest.raises(DimensionError):
            deconfounded_fuse(Tensor(np.zeros((3, 4, 4))), z_vis, z_ir, params)

    def test_gradcheck_through_module(self):
        rng = np.random.default_rng(13)
        params = _params(seed=14)
        z_vis = _dictionary(rng.normal(size=(4, 2)))
        z_ir = _dictionary(rng.normal(size=(4, 2)), modality="infrared")
        x_vals = rng.normal(size=(3, 3, 3))

        def build():
            x = Tensor(x_vals)
            out = deconfounded_fuse(x, z_vis, z_ir, params)
            return dc.tensor_mean(dc.mul(out, out))

        tensors = [params.w_q, params.w_k, params.w_h, params.w_g_vis, params.w_g_ir]
        loss = build()
        for t in tensors:
            t.zero_grad()
        dc.backward(loss)
        h = 1e-5
        for t in tensors:
            flat = t.values.ravel()
            for i in range(0, flat.size, 3):
                orig = flat[i]
                flat[i] = orig + h
                fp = build().item()
                flat[i] = orig - h
                fm = build().item()
                flat[i] = orig
                num = (fp - fm) / (2 * h)
                ana = t.grad.ravel()[i]
                assert abs(num - ana) / max(abs(num), abs(ana), 1e-3) < 1e-4
