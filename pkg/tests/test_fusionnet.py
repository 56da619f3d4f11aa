"""End-to-end network contracts: shapes, range, determinism, checkpoints."""

import numpy as np
import pytest

from defusion import scenegen
from defusion.confounder import build_dictionary
from defusion.diffcore import DimensionError, Tensor
from defusion.fusionnet import CheckpointError, FusionModel, ModelConfig


@pytest.fixture(scope="module")
def dictionaries():
    pairs = []
    for ci, cat in enumerate(scenegen.CATEGORIES):
        pairs.extend(scenegen.generate_pair(cat, 32, (40 + ci, i)) for i in range(5))
    dvis = build_dictionary([p.vis for p in pairs], "visible", n_clusters=4, d=6, seed=0)
    dir_ = build_dictionary([p.ir for p in pairs], "infrared", n_clusters=4, d=6, seed=0)
    return dvis, dir_


@pytest.fixture()
def model(dictionaries):
    return FusionModel(ModelConfig(), *dictionaries, seed=3)


class TestEncode:
    def test_output_shape(self, model):
        for h, w in ((8, 8), (12, 20), (33, 7)):
            rng = np.random.default_rng(h * w)
            x = model.encode(rng.uniform(size=(h, w)), rng.uniform(size=(h, w)))
            assert x.shape == (model.config.feature_channels, h, w)

    def test_zero_images_zero_biases_give_zero_features(self, model):
        x = model.encode(np.zeros((9, 9)), np.zeros((9, 9)))
        assert np.all(x.values == 0.0)  # biases init to zero, tanh(0) = 0

    def test_deterministic(self, model):
        rng = np.random.default_rng(50)
        ir, vis = rng.uniform(size=(10, 10)), rng.uniform(size=(10, 10))
        assert model.encode(ir, vis).values.tobytes() == model.encode(ir, vis).values.tobytes()

    def test_size_mismatch_rejected(self, model):
        with pytest.raises(DimensionError):
            model.encode(np.zeros((8, 8)), np.zeros((8, 9)))


class TestReconstruct:
    def test_zero_preactivation_gives_half(self, model):
        model.store["recon.kernel"].values[:] = 0.0
        model.store["recon.bias"].values[:] = 0.0
        out = model.reconstruct(Tensor(np.random.default_rng(0).normal(size=(16, 6, 6))))
        np.testing.assert_array_equal(out.values, np.full((1, 6, 6), 0.5))

    def test_output_strictly_inside_unit_interval(self, model):
        feats = Tensor(np.random.default_rng(1).normal(size=(16, 8, 8)) * 5)
        out = model.reconstruct(feats).values
        assert np.all(out > 0.0) and np.all(out < 1.0)

    def test_monotone_in_preactivation(self, model):
        # delta kernel on channel 0 makes the head read that channel directly
        model.store["recon.kernel"].values[:] = 0.0
        model.store["recon.kernel"].values[0, 0, 1, 1] = 1.0
        model.store["recon.bias"].values[:] = 0.0
        feats = np.zeros((16, 5, 5))
        outputs = []
        for v in (-2.0, -0.5, 0.0, 0.5, 2.0):
            feats[0, 2, 2] = v
            outputs.append(model.reconstruct(Tensor(feats)).values[0, 2, 2])
        assert np.all(np.diff(outputs) > 0)


class TestFuse:
    def test_shape_and_range(self, model):
        rng = np.random.default_rng(2)
        fused = model.fuse(rng.uniform(size=(14, 11)), rng.uniform(size=(14, 11)))
        assert fused.shape == (14, 11)
        assert np.all(fused > 0.0) and np.all(fused < 1.0)

    def test_bit_identical_given_checkpoint(self, model):
        pair = scenegen.generate_pair("street", 24, 77)
        a = model.fuse(pair.ir, pair.vis)
        b = model.fuse(pair.ir, pair.vis)
        assert a.tobytes() == b.tobytes()

    def test_ablation_paths_agree_bit_exactly(self, dictionaries):
        # no-baffm model vs full-code-path model with zeroed projections
        disabled = FusionModel(ModelConfig(baffm_enabled=False), *dictionaries, seed=9)
        zeroed = FusionModel(ModelConfig(baffm_enabled=True), *dictionaries, seed=9)
        for name, p in disabled.store.params.items():
            zeroed.store[name].values[:] = p.values
        pair = scenegen.generate_pair("cloud", 20, 5)
        a = disabled.fuse(pair.ir, pair.vis)
        b = zeroed.fuse(pair.ir, pair.vis)
        assert np.array_equal(a, b)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, dictionaries, tmp_path):
        from defusion.confounder import save_dictionary
        from defusion.fusionnet import file_sha256

        dvis, dir_ = dictionaries
        save_dictionary(dvis, tmp_path / "dv.json")
        save_dictionary(dir_, tmp_path / "di.json")
        model = FusionModel(ModelConfig(), dvis, dir_, seed=21)
        ckpt = tmp_path / "model.json"
        model.save(ckpt,
                   dict_vis_ref=("dv.json", file_sha256(tmp_path / "dv.json")),
                   dict_ir_ref=("di.json", file_sha256(tmp_path / "di.json")),
                   epochs_trained=4)
        loaded, epochs = FusionModel.load(ckpt)
        assert epochs == 4
        for name, p in model.store.params.items():
            assert loaded.store[name].values.tobytes() == p.values.tobytes()
            assert loaded.store[name].requires_grad == p.requires_grad
        pair = scenegen.generate_pair("bush", 20, 8)
        assert np.array_equal(model.fuse(pair.ir, pair.vis), loaded.fuse(pair.ir, pair.vis))

    def test_tampered_dictionary_detected(self, dictionaries, tmp_path):
        from defusion.confounder import save_dictionary
        from defusion.fusionnet import file_sha256

        dvis, dir_ = dictionaries
        save_dictionary(dvis, tmp_path / "dv.json")
        save_dictionary(dir_, tmp_path / "di.json")
        model = FusionModel(ModelConfig(), dvis, dir_, seed=1)
        ckpt = tmp_path / "model.json"
        model.save(ckpt,
                   dict_vis_ref=("dv.json", file_sha256(tmp_path / "dv.json")),
                   dict_ir_ref=("di.json", file_sha256(tmp_path / "di.json")))
        (tmp_path / "dv.json").write_text((tmp_path / "dv.json").read_text().replace("0.", "1.", 1))
        with pytest.raises(CheckpointError, match="hash"):
            FusionModel.load(ckpt)
