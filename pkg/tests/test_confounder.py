"""Dictionary pipeline tests: descriptors, PCA, K-Means++, Lloyd, build."""

import numpy as np
import pytest

from defusion import scenegen
from defusion.confounder import (
    HIST_BINS,
    DictionaryError,
    SceneFeatureExtractor,
    build_dictionary,
    extract_scene_feature,
    kmeanspp_seed,
    lloyd,
    load_dictionary,
    pca_fit,
    pca_transform,
    save_dictionary,
)


class TestSceneFeature:
    def test_deterministic(self):
        img = np.random.default_rng(0).uniform(size=(24, 24))
        np.testing.assert_array_equal(extract_scene_feature(img), extract_scene_feature(img))

    def test_constant_image_histogram_and_gradient(self):
        feat = extract_scene_feature(np.full((20, 20), 0.3))
        conv_dim = SceneFeatureExtractor().dim - HIST_BINS - 1
        hist = feat[conv_dim : conv_dim + HIST_BINS]
        assert hist.max() == 1.0 and hist.sum() == 1.0
        assert feat[-1] == 0.0  # mean gradient magnitude

    def test_empty_image_rejected(self):
        with pytest.raises(DictionaryError):
            extract_scene_feature(np.empty((0, 0)))

    def test_categories_separate(self):
        # between-category mean distance must exceed within-category
        feats = {}
        for cat in ("street", "cloud"):
            feats[cat] = np.vstack([
                extract_scene_feature(scenegen.generate_pair(cat, 48, (3, i)).vis)
                for i in range(25)
            ])
        within = []
        for cat in feats:
            f = feats[cat]
            for i in range(len(f)):
                for j in range(i + 1, len(f)):
                    within.append(np.linalg.norm(f[i] - f[j]))
        between = [
            np.linalg.norm(a - b) for a in feats["street"] for b in feats["cloud"]
        ]
        assert np.mean(between) > np.mean(within)


class TestPca:
    def test_rank_one_line(self):
        rng = np.random.default_rng(1)
        t = rng.normal(size=40)
        pts = np.column_stack([t, 2 * t])
        model = pca_fit(pts, 2)
        np.testing.assert_allclose(model.components[0], np.array([1.0, 2.0]) / np.sqrt(5), atol=1e-9)
        assert abs(model.eigenvalues[1]) < 1e-10

    def test_rows_orthonormal(self):
        x = np.random.default_rng(2).normal(size=(30, 7))
        model = pca_fit(x, 5)
        gram = model.components @ model.components.T
        assert np.max(np.abs(gram - np.eye(5))) < 1e-8

    def test_eigenvalues_sorted_nonnegative(self):
        x = np.random.default_rng(3).normal(size=(25, 6))
        model = pca_fit(x, 6)
        assert np.all(np.diff(model.eigenvalues) <= 0)
        assert np.all(model.eigenvalues >= 0)

    def test_full_rank_reconstruction(self):
        x = np.random.default_rng(4).normal(size=(50, 10))
        model = pca_fit(x, 10)
        proj = pca_transform(model, x)
        recon = proj @ model.components + model.mean
        assert np.max(np.linalg.norm(x - recon, axis=1)) < 1e-9

    def test_transform_of_mean_is_zero(self):
        x = np.random.default_rng(5).normal(size=(20, 4))
        model = pca_fit(x, 3)
        np.testing.assert_allclose(pca_transform(model, model.mean), 0.0, atol=1e-12)

    def test_affine_linearity(self):
        x = np.random.default_rng(6).normal(size=(20, 4))
        model = pca_fit(x, 4)
        a, b = x[0], x[1]
        lhs = pca_transform(model, a + b - model.mean)
        rhs = pca_transform(model, a) + pca_transform(model, b)
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)

    def test_norm_preserved_at_full_dimension(self):
        x = np.random.default_rng(7).normal(size=(30, 6))
        model = pca_fit(x, 6)
        for row in x[:5]:
            assert abs(np.linalg.norm(pca_transform(model, row)) - np.linalg.norm(row - model.mean)) < 1e-10

    def test_dimension_errors(self):
        x = np.random.default_rng(8).normal(size=(10, 4))
        with pytest.raises(DictionaryError):
            pca_fit(x, 5)
        model = pca_fit(x, 2)
        with pytest.raises(DictionaryError):
            pca_transform(model, np.zeros(7))


class TestKmeansppSeed:
    def test_all_points_when_n_equals_count(self):
        pts = np.random.default_rng(9).normal(size=(6, 2))
        centers = kmeanspp_seed(pts, 6, np.random.default_rng(0))
        got = {tuple(row) for row in centers}
        want = {tuple(row) for row in pts}
        assert got == want

    def test_single_center_is_a_point(self):
        pts = np.random.default_rng(10).normal(size=(5, 3))
        center = kmeanspp_seed(pts, 1, np.random.default_rng(1))[0]
        assert any(np.array_equal(center, p) for p in pts)

    def test_far_point_forced(self):
        pts = np.array([[0.0], [0.0], [0.0], [100.0]])
        for seed in range(10):
            rng = np.random.default_rng(seed)
            centers = kmeanspp_seed(pts, 2, rng)
            values = sorted(centers.ravel())
            assert values[0] == 0.0 and values[1] == 100.0

    def test_too_many_clusters_rejected(self):
        with pytest.raises(DictionaryError):
            kmeanspp_seed(np.zeros((3, 2)), 4, np.random.default_rng(0))


class TestLloyd:
    def test_fixed_point_single_iteration(self):
        pts = np.array([[0.0], [1.0], [10.0], [11.0]])
        centers = np.array([[0.5], [10.5]])  # already the means
        out_centers, assignment = lloyd(pts, centers)
        np.testing.assert_array_equal(out_centers, centers)
        assert len(assignment.inertia_history) <= 2

    def test_two_blobs_exact_means(self):
        pts = np.array([[0.0], [0.1], [0.2], [10.0], [10.1], [10.2]])
        centers = kmeanspp_seed(pts, 2, np.random.default_rng(3))
        out_centers, assignment = lloyd(pts, centers)
        got = sorted(out_centers.ravel())
        np.testing.assert_allclose(got, [0.1, 10.1], atol=1e-9)
        assert sorted(assignment.counts) == [3, 3]

    def test_inertia_non_increasing(self):
        rng = np.random.default_rng(11)
        pts = rng.normal(size=(60, 3))
        centers = kmeanspp_seed(pts, 5, rng)
        _, assignment = lloyd(pts, centers)
        hist = np.asarray(assignment.inertia_history)
        assert np.all(np.diff(hist) <= 1e-12)

    def test_counts_sum_and_nonempty(self):
        rng = np.random.default_rng(12)
        pts = rng.normal(size=(40, 2))
        centers = kmeanspp_seed(pts, 6, rng)
        _, assignment = lloyd(pts, centers)
        assert assignment.counts.sum() == 40
        assert np.all(assignment.counts > 0)


def _category_corpus(n_per_cat, size=32, seed=20):
    pairs = []
    for ci, cat in enumerate(scenegen.CATEGORIES):
        pairs.extend(scenegen.generate_pair(cat, size, (seed + ci, i)) for i in range(n_per_cat))
    return pairs


class TestBuildDictionary:
    def test_single_cluster_is_global_mean(self):
        images = [p.vis for p in _category_corpus(4)]
        d = build_dictionary(images, "visible", n_clusters=1, d=5, seed=0)
        feats = np.vstack([extract_scene_feature(img) for img in images])
        reduced = pca_transform(d.pca, feats)
        np.testing.assert_allclose(d.centers[0], reduced.mean(axis=0), atol=1e-9)

    def test_deterministic_by_seed(self):
        images = [p.ir for p in _category_corpus(4)]
        d1 = build_dictionary(images, "infrared", n_clusters=3, d=6, seed=7)
        d2 = build_dictionary(images, "infrared", n_clusters=3, d=6, seed=7)
        assert d1.centers.tobytes() == d2.centers.tobytes()
        assert d1.pca.components.tobytes() == d2.pca.components.tobytes()

    def test_cluster_mean_identity(self):
        images = [p.vis for p in _category_corpus(6)]
        d = build_dictionary(images, "visible", n_clusters=4, d=8, seed=1)
        feats = np.vstack([extract_scene_feature(img) for img in images])
        reduced = pca_transform(d.pca, feats)
        # recover the assignment: nearest center
        labels = np.argmin(
            ((reduced[:, None, :] - d.centers[None]) ** 2).sum(-1), axis=1
        )
        for c in range(4):
            members = reduced[labels == c]
            assert members.size > 0
            assert np.max(np.abs(d.centers[c] - members.mean(axis=0))) < 1e-9

    def test_three_category_purity(self):
        pairs = _category_corpus(10)
        images = [p.vis for p in pairs]
        cats = [p.category for p in pairs]
        d = build_dictionary(images, "visible", n_clusters=3, d=8, seed=2)
        feats = np.vstack([extract_scene_feature(img) for img in images])
        reduced = pca_transform(d.pca, feats)
        labels = np.argmin(((reduced[:, None, :] - d.centers[None]) ** 2).sum(-1), axis=1)
        for c in range(3):
            member_cats = [cats[i] for i in np.flatnonzero(labels == c)]
            counts = {cat: member_cats.count(cat) for cat in set(member_cats)}
            purity = max(counts.values()) / len(member_cats)
            assert purity >= 0.8, f"cluster {c} purity {purity}"

    def test_modality_independence(self):
        pairs = _category_corpus(4)
        vis_images = [p.vis for p in pairs]
        d1 = build_dictionary(vis_images, "visible", n_clusters=3, d=6, seed=3)
        # a completely different infrared corpus must not touch the visible build
        _ = build_dictionary([p.ir for p in _category_corpus(4, seed=99)], "infrared",
                             n_clusters=3, d=6, seed=3)
        d2 = build_dictionary(vis_images, "visible", n_clusters=3, d=6, seed=3)
        assert d1.centers.tobytes() == d2.centers.tobytes()

    def test_corpus_too_small(self):
        images = [p.vis for p in _category_corpus(1)]
        with pytest.raises(DictionaryError):
            build_dictionary(images, "visible", n_clusters=10, d=4, seed=0)

    def test_file_round_trip_bit_exact(self, tmp_path):
        images = [p.vis for p in _category_corpus(4)]
        d = build_dictionary(images, "visible", n_clusters=3, d=6, seed=5)
        path = tmp_path / "dict.json"
        save_dictionary(d, path)
        loaded = load_dictionary(path)
        assert loaded.centers.tobytes() == d.centers.tobytes()
        assert loaded.pca.mean.tobytes() == d.pca.mean.tobytes()
        assert loaded.pca.components.tobytes() == d.pca.components.tobytes()
        assert loaded.pca.eigenvalues.tobytes() == d.pca.eigenvalues.tobytes()
        assert (loaded.modality, loaded.n_clusters, loaded.seed) == ("visible", 3, 5)
        save_dictionary(loaded, tmp_path / "dict2.json")
        assert (tmp_path / "dict.json").read_bytes() == (tmp_path / "dict2.json").read_bytes()
