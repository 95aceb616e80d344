import itertools

import numpy as np
import pytest
import torch
from sklearn.metrics import adjusted_rand_score

from stlayout.clustering import (ClusterLayout, ClusteringError, cluster_frames, collect_features,
                                 kmeans, layout_from_clusters, match_clusters)
from stlayout.diffusion import DenoiserDims, ToyDenoiser, ddim_invert, embed_prompt, make_schedule
from stlayout.layout import RegionSpec
from stlayout.synth import synth_video, two_shape_scene


def blobs(seed=0, per=30, sigma=1.0, sep=10.0, d=4):
    rng = np.random.default_rng(seed)
    centres = np.zeros((3, d))
    centres[1, 0] = sep * sigma
    centres[2, 1] = sep * sigma
    x = np.concatenate([c + sigma * rng.standard_normal((per, d)) for c in centres])
    truth = np.repeat(np.arange(3), per)
    return x, truth


class TestKMeans:
    def test_k1_mean(self):
        x = np.random.default_rng(0).standard_normal((20, 3))
        res = kmeans(x, 1)
        assert (res.labels == 0).all()
        np.testing.assert_allclose(res.centroids[0], x.mean(axis=0))

    @pytest.mark.parametrize("seed", range(5))
    def test_planted_blobs(self, seed):
        x, truth = blobs(seed)
        res = kmeans(x, 3, seed=seed)
        assert adjusted_rand_score(truth, res.labels) == 1.0

    def test_identical_points(self):
        res = kmeans(np.ones((10, 3)), 2)
        assert res.inertia == 0.0
        counts = np.bincount(res.labels, minlength=2)
        assert sorted(counts.tolist()) == [0, 10]

    def test_k_too_large(self):
        with pytest.raises(ClusteringError):
            kmeans(np.zeros((3, 2)), 4)

    def test_inertia_monotone(self):
        x = np.random.default_rng(1).standard_normal((200, 5))
        res = kmeans(x, 6, seed=1)
        assert all(b <= a * (1 + 1e-12) for a, b in zip(res.history, res.history[1:]))

    def test_deterministic(self):
        x = np.random.default_rng(2).standard_normal((50, 3))
        a, b = kmeans(x, 4, seed=7), kmeans(x, 4, seed=7)
        assert np.array_equal(a.labels, b.labels) and np.array_equal(a.centroids, b.centroids)


class TestMatching:
    def _layout(self, seed=0):
        x, _ = blobs(seed, per=10)
        res = kmeans(x, 3, seed=0)
        return res

    def test_identical_frames_identity(self):
        res = self._layout()
        lay = ClusterLayout(np.stack([res.labels, res.labels]), np.stack([res.centroids] * 2), 3)
        out = match_clusters(lay)
        assert np.array_equal(out.labels, lay.labels)

    def test_known_permutation_recovered(self):
        res = self._layout()
        sigma = np.array([2, 0, 1])
        # frame 2: cluster j of frame 1 is called sigma[j]
        labels2 = sigma[res.labels]
        cents2 = np.empty_like(res.centroids)
        cents2[sigma] = res.centroids
        lay = ClusterLayout(np.stack([res.labels, labels2]), np.stack([res.centroids, cents2]), 3)
        out = match_clusters(lay)
        assert np.array_equal(out.labels[1], res.labels)
        assert np.array_equal(out.centroids[1], res.centroids)

    @pytest.mark.parametrize("k", [2, 3, 4, 5])
    def test_noisy_matches_bruteforce(self, k):
        rng = np.random.default_rng(k)
        cents = rng.standard_normal((k, 6))
        perm = rng.permutation(k)
        noisy = cents[perm] + 0.01 * rng.standard_normal((k, 6))
        labels0 = np.arange(k)
        lay = ClusterLayout(np.stack([labels0, labels0]), np.stack([cents, noisy]), k)
        out = match_clusters(lay)

        def cos(a, b):
            return a @ b / (np.linalg.norm(a) * np.linalg.norm(b))

        best = max(itertools.permutations(range(k)),
                   key=lambda p: sum(cos(cents[i], noisy[p[i]]) for i in range(k)))
        # frame-1 cluster best[i] should be relabelled i
        expected = np.empty(k, dtype=int)
        expected[list(best)] = np.arange(k)
        assert np.array_equal(out.labels[1], expected[labels0])


class TestLayoutFromClusters:
    def _clusters(self):
        labels = np.zeros((2, 16), dtype=np.int64)
        labels[:, 4:8] = 1
        labels[:, 8:14] = 2
        return ClusterLayout(labels, np.zeros((2, 3, 2)), 3)

    def test_bind_all(self):
        c = self._clusters()
        lay = layout_from_clusters(c, {0: RegionSpec(1, ("a",)), 1: RegionSpec(2, ("b",)),
                                       2: RegionSpec(3, ("c",))}, (4, 4))
        assert lay.masks.any(axis=1).all()

    def test_bind_none(self):
        lay = layout_from_clusters(self._clusters(), {}, (4, 4))
        assert lay.masks.shape[1] == 0

    def test_counts(self):
        lay = layout_from_clusters(self._clusters(), {1: RegionSpec(1, ("a",)), 2: RegionSpec(2, ("b",))},
                                   (4, 4))
        assert lay.masks[:, 0].reshape(2, -1).sum(1).tolist() == [4, 4]
        assert lay.masks[:, 1].reshape(2, -1).sum(1).tolist() == [6, 6]

    def test_missing_cluster(self):
        with pytest.raises(ClusteringError):
            layout_from_clusters(self._clusters(), {5: RegionSpec(1, ("a",))}, (4, 4))

    def test_many_to_one(self):
        lay = layout_from_clusters(self._clusters(), {1: RegionSpec(1, ("a",)), 2: RegionSpec(1, ("a",))},
                                   (4, 4))
        assert lay.masks.shape[1] == 1 and lay.masks[0, 0].sum() == 10


class TestFeatures:
    def _traj(self):
        p = make_schedule(sample_steps=30)
        model = ToyDenoiser(DenoiserDims(d_model=16, heads=2, blocks=1, mlp_mult=2), seed=0)
        z0 = torch.as_tensor(synth_video(two_shape_scene(frames=2))["frames"])
        return ddim_invert(z0, model, embed_prompt("red square"), p, record=[(0, 25)])

    def test_shape_and_errors(self):
        traj = self._traj()
        feats = collect_features(traj, 0, 25, 2)
        assert feats.shape == (2, 256, 16)
        with pytest.raises(ClusteringError, match="features not captured"):
            collect_features(traj, 0, 3, 2)

    def test_deterministic(self):
        a = collect_features(self._traj(), 0, 25, 2)
        b = collect_features(self._traj(), 0, 25, 2)
        assert np.array_equal(a, b)

    def test_cluster_frames_per_frame(self):
        x, _ = blobs(0, per=10)
        c = cluster_frames(np.stack([x, x]), 3, seed=0)
        assert c.labels.shape == (2, 30) and c.centroids.shape == (2, 3, 4)
