import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mvpartseg.core import ClassCatalog, SegmentationResult
from mvpartseg.errors import AllZeroWeights, SingleClassCatalog, UnknownRegion
from mvpartseg.fusion import (
    FusionConfig,
    ViewConfidence,
    bayes_update,
    dbscan_partition,
    dbscan_refine,
    fuse_observations,
    fuse_point,
    majority_vote,
    observation_likelihood,
    region_boundary_stats,
    select_labels,
    view_confidence,
)
from mvpartseg.projection import MaskSet, regions_from_label_image

from conftest import make_cloud


def catalog_of(n):
    return ClassCatalog(tuple((i, f"c{i}") for i in range(1, n + 1)))


class TestObservationLikelihood:
    def test_spread(self, catalog3):
        np.testing.assert_allclose(
            observation_likelihood(2, 0.9, catalog3), [0.05, 0.9, 0.05], atol=1e-15
        )

    def test_full_confidence_boundary(self):
        cat = catalog_of(6)
        np.testing.assert_array_equal(
            observation_likelihood(1, 1.0, cat), [1, 0, 0, 0, 0, 0]
        )

    def test_symmetric_two_class(self):
        cat = catalog_of(2)
        np.testing.assert_allclose(observation_likelihood(1, 0.5, cat), [0.5, 0.5])

    def test_single_class_rejected(self):
        with pytest.raises(SingleClassCatalog):
            observation_likelihood(1, 0.9, catalog_of(1))


def flood_fill_components(mask: np.ndarray) -> int:
    """Independent 4-connectivity component count via BFS."""
    seen = np.zeros_like(mask, dtype=bool)
    H, W = mask.shape
    count = 0
    for sy, sx in zip(*np.nonzero(mask)):
        if seen[sy, sx]:
            continue
        count += 1
        stack = [(sy, sx)]
        seen[sy, sx] = True
        while stack:
            y, x = stack.pop()
            for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                if 0 <= ny < H and 0 <= nx < W and mask[ny, nx] and not seen[ny, nx]:
                    seen[ny, nx] = True
                    stack.append((ny, nx))
    return count


def _mask_with(label):
    ids = sorted(int(v) for v in np.unique(label) if v)
    return MaskSet(0, label, regions_from_label_image(
        label, {i: (1, "one") for i in ids}, {i: 1.0 for i in ids}))


class TestViewConfidence:
    def test_large_compact_region(self):
        label = np.zeros((100, 100), dtype=np.int32)
        label[10:94, 10:94] = 1   # area fraction 0.7056, clipped to 0.5
        vc = view_confidence(_mask_with(label), 1, 150, FusionConfig(dbscan_eps=1.0))
        assert vc.area_score == 0.5
        assert vc.point_support == 1.0
        assert vc.boundary_score == 1.0
        assert vc.weight == pytest.approx(0.8333333333333334, abs=1e-12)

    def test_tiny_region_low_support(self):
        label = np.zeros((100, 100), dtype=np.int32)
        label[50, 50] = 1   # area fraction 1e-4, clipped up to 0.001
        vc = view_confidence(_mask_with(label), 1, 10, FusionConfig(dbscan_eps=1.0))
        assert vc.area_score == 0.001
        assert vc.point_support == 0.5
        assert vc.boundary_score == 1.0
        assert vc.weight == pytest.approx(0.5003333333333333, abs=1e-12)

    def test_fragmented_region(self):
        label = np.zeros((100, 100), dtype=np.int32)
        for k in range(5):   # five scattered 4x5 fragments, area fraction 0.01
            label[20 * k + 2:20 * k + 6, 40:45] = 1
        masks = _mask_with(label)
        assert flood_fill_components(label == 1) == 5
        vc = view_confidence(masks, 1, 150, FusionConfig(dbscan_eps=1.0))
        assert vc.boundary_score == 0.5
        assert vc.area_score == pytest.approx(0.01)
        assert vc.weight == pytest.approx(0.5033333333333333, abs=1e-12)

    def test_component_count_matches_flood_fill_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            label = (rng.random((40, 40)) < 0.3).astype(np.int32)
            if not label.any():
                continue
            n, _, _ = region_boundary_stats(label, 1)
            assert n == flood_fill_components(label == 1)

    def test_unknown_region(self):
        label = np.zeros((10, 10), dtype=np.int32)
        label[0, 0] = 1
        with pytest.raises(UnknownRegion):
            view_confidence(_mask_with(label), 9, 10, FusionConfig(dbscan_eps=1.0))

    def test_support_threshold_is_strict(self):
        label = np.zeros((100, 100), dtype=np.int32)
        label[40:60, 40:60] = 1
        cfg = FusionConfig(dbscan_eps=1.0)
        assert view_confidence(_mask_with(label), 1, 100, cfg).point_support == 0.5
        assert view_confidence(_mask_with(label), 1, 101, cfg).point_support == 1.0

    @given(st.floats(min_value=0.0, max_value=1.0), st.integers(0, 10_000),
           st.booleans())
    def test_weight_bounds(self, area_fraction, count, fragmented):
        vc = ViewConfidence(
            float(np.clip(area_fraction, 0.001, 0.5)),
            1.0 if count > 100 else 0.5,
            0.5 if fragmented else 1.0,
        )
        assert 0.3336 <= vc.weight <= 0.8334


class TestBayesUpdate:
    def test_full_weight_uniform_prior_returns_observation(self):
        post = bayes_update([0.5, 0.5], [0.9, 0.1], 1.0)
        np.testing.assert_allclose(post, [0.9, 0.1], atol=1e-12)

    def test_zero_weight_is_identity(self):
        prior = np.array([0.3, 0.7])
        np.testing.assert_allclose(bayes_update(prior, [1.0, 0.0], 0.0), prior, atol=1e-12)

    def test_repeated_observation_sharpens(self):
        post = bayes_update([0.9, 0.1], [0.9, 0.1], 1.0)
        np.testing.assert_allclose(
            post, [0.987804878048780, 0.012195121951219], atol=1e-12
        )

    def test_degenerate_raises(self):
        with pytest.raises(AllZeroWeights):
            bayes_update([1.0, 0.0], [0.0, 1.0], 1.0)


class TestFusePoint:
    def test_empty_is_uniform(self, catalog3):
        np.testing.assert_allclose(fuse_point([], catalog3), np.full(3, 1 / 3))

    def test_three_identical_observations(self, catalog3):
        obs = [(np.array([0.9, 0.05, 0.05]), 1.0)] * 3
        np.testing.assert_allclose(
            fuse_point(obs, catalog3),
            [0.999657182036476, 0.000171408981762, 0.000171408981762],
            atol=1e-12,
        )

    def test_contradiction_skips_second_update(self):
        cat = catalog_of(2)
        obs = [(np.array([1.0, 0.0]), 1.0), (np.array([0.0, 1.0]), 1.0)]
        np.testing.assert_allclose(fuse_point(obs, cat), [1.0, 0.0])

    def test_recursive_equals_batch_oracle(self):
        rng = np.random.default_rng(42)
        for _ in range(200):
            C = int(rng.integers(2, 9))
            cat = catalog_of(C)
            m = int(rng.integers(0, 12))
            obs = []
            product = np.full(C, 1.0 / C)
            for _ in range(m):
                q = rng.uniform(0.01, 0.99)
                cls = int(rng.integers(0, C))
                dist = np.full(C, (1 - q) / (C - 1))
                dist[cls] = q
                w = rng.uniform(0.0, 1.0)
                obs.append((dist, w))
                product = product * (w * dist + (1 - w) / C)
            recursive = fuse_point(obs, cat)
            batch = product / product.sum()
            np.testing.assert_allclose(recursive, batch, atol=1e-9)

    def test_order_invariance(self):
        rng = np.random.default_rng(1)
        cat = catalog_of(4)
        obs = []
        for _ in range(8):
            dist = rng.dirichlet(np.ones(4))
            obs.append((dist, rng.uniform(0, 1)))
        base = fuse_point(obs, cat)
        for _ in range(20):
            perm = rng.permutation(len(obs))
            shuffled = fuse_point([obs[i] for i in perm], cat)
            assert np.max(np.abs(shuffled - base)) < 1e-9

    def test_confidence_monotone_in_weight(self, catalog3):
        q = 0.8
        dist = observation_likelihood(2, q, catalog3)
        masses = [fuse_point([(dist, w)], catalog3)[1]
                  for w in np.linspace(0.0, 1.0, 21)]
        assert np.all(np.diff(masses) >= -1e-15)


class TestFuseObservationsBatch:
    def test_matches_sequential(self, catalog3):
        rng = np.random.default_rng(3)
        n = 50
        m = 400
        point_idx = rng.integers(0, n, m)
        class_idx = rng.integers(0, 3, m)
        q = rng.uniform(0.01, 0.99, m)
        w = rng.uniform(0.0, 1.0, m)
        order = np.argsort(point_idx, kind="stable")
        point_idx, class_idx, q, w = (a[order] for a in (point_idx, class_idx, q, w))
        batch = fuse_observations(point_idx, class_idx, q, w, n, catalog3)
        for p in range(n):
            sel = point_idx == p
            obs = [(observation_likelihood(catalog3.class_ids[c], qq, catalog3), ww)
                   for c, qq, ww in zip(class_idx[sel], q[sel], w[sel])]
            np.testing.assert_allclose(batch[p], fuse_point(obs, catalog3), atol=1e-9)

    def test_degenerate_fallback_matches_sequential(self, catalog3):
        # hard contradictory evidence at full weight exercises the skip rule
        point_idx = np.array([0, 0])
        class_idx = np.array([0, 1])
        q = np.array([1.0, 1.0])
        w = np.array([1.0, 1.0])
        batch = fuse_observations(point_idx, class_idx, q, w, 1, catalog3)
        np.testing.assert_allclose(batch[0], [1.0, 0.0, 0.0], atol=1e-12)

    def test_unobserved_points_uniform(self, catalog3):
        batch = fuse_observations(np.array([1]), np.array([0]), np.array([0.9]),
                                  np.array([1.0]), 3, catalog3)
        np.testing.assert_allclose(batch[0], np.full(3, 1 / 3), atol=1e-12)
        np.testing.assert_allclose(batch[2], np.full(3, 1 / 3), atol=1e-12)


class TestSelectLabels:
    def test_above_threshold(self, catalog3):
        cls, conf = select_labels(np.array([[0.7, 0.3, 0.0]]), 0.5, catalog3)
        assert cls[0] == 1
        assert conf[0] == pytest.approx(0.7)

    def test_below_threshold_unlabeled(self, catalog3):
        cls, conf = select_labels(np.array([[0.45, 0.55, 0.0]]), 0.6, catalog3)
        assert cls[0] == 0
        assert conf[0] == 0.0

    def test_uniform_six_below_half(self):
        cat = catalog_of(6)
        cls, _ = select_labels(np.full((1, 6), 1 / 6), 0.5, cat)
        assert cls[0] == 0

    def test_never_labels_at_or_below_threshold(self, catalog3):
        rng = np.random.default_rng(5)
        post = rng.dirichlet(np.ones(3), size=500)
        cls, conf = select_labels(post, 0.5, catalog3)
        assert np.all(conf[cls > 0] > 0.5)
        assert np.all(conf[cls == 0] == 0.0)


def brute_force_dbscan_partition(points, eps, min_pts):
    """O(n^2) oracle: 2 = core, 1 = border, 0 = noise."""
    n = len(points)
    d = np.linalg.norm(points[:, None, :] - points[None, :, :], axis=2)
    neighbors = d <= eps
    core = neighbors.sum(axis=1) >= min_pts
    out = np.zeros(n, dtype=np.int8)
    out[core] = 2
    border = ~core & (neighbors & core[None, :]).any(axis=1)
    out[border] = 1
    return out


class TestDbscan:
    def test_partition_matches_brute_force(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            pts = rng.uniform(0, 1, (200, 3))
            eps = rng.uniform(0.05, 0.2)
            min_pts = int(rng.integers(2, 12))
            np.testing.assert_array_equal(
                dbscan_partition(pts, eps, min_pts),
                brute_force_dbscan_partition(pts, eps, min_pts),
            )

    def test_isolated_point_relabeled(self):
        rng = np.random.default_rng(10)
        dense_a = rng.normal(0.0, 0.05, (120, 3))
        dense_b = rng.normal(0.0, 0.05, (120, 3)) + [5.0, 0, 0]
        lone = np.array([[2.5, 10.0, 0.0]])
        cloud = make_cloud(np.vstack([dense_a, dense_b, lone]))
        classes = np.full(241, 2, dtype=np.int64)
        result = SegmentationResult(np.ones(241, dtype=np.int64), classes)
        cfg = FusionConfig(dbscan_eps=0.3, dbscan_min_pts=5)
        refined = dbscan_refine(result, cloud, cfg)
        assert refined.class_id[-1] == 0
        assert np.all(refined.class_id[:-1] == 2)

    def test_all_dense_unchanged(self):
        rng = np.random.default_rng(11)
        cloud = make_cloud(rng.normal(0, 0.05, (200, 3)))
        result = SegmentationResult(np.ones(200, dtype=np.int64),
                                    np.full(200, 3, dtype=np.int64))
        refined = dbscan_refine(result, cloud, FusionConfig(dbscan_eps=0.5,
                                                            dbscan_min_pts=5))
        np.testing.assert_array_equal(refined.class_id, result.class_id)

    def test_refine_only_removes_labels(self):
        rng = np.random.default_rng(12)
        cloud = make_cloud(rng.uniform(0, 1, (300, 3)))
        classes = rng.integers(0, 4, 300)
        conf = np.where(classes > 0, 0.9, 0.0)
        result = SegmentationResult(np.ones(300, dtype=np.int64), classes, conf)
        refined = dbscan_refine(result, cloud, FusionConfig(dbscan_eps=0.08,
                                                            dbscan_min_pts=4))
        changed = refined.class_id != result.class_id
        assert np.all(refined.class_id[changed] == 0)
        np.testing.assert_array_equal(refined.instance_id, result.instance_id)


class TestMajorityVote:
    def test_ties_break_to_lowest_class(self, catalog3):
        cls, conf = majority_vote(np.array([0, 0]), np.array([1, 0]), 1, catalog3)
        assert cls[0] == 1
        assert conf[0] == pytest.approx(0.5)

    def test_unobserved_unlabeled(self, catalog3):
        cls, conf = majority_vote(np.array([0]), np.array([2]), 3, catalog3)
        assert list(cls) == [3, 0, 0]
        assert conf[0] == 1.0


class TestFusionConfig:
    @pytest.mark.parametrize("kwargs", [
        {"label_threshold": 0.0}, {"label_threshold": 1.0},
        {"min_support_points": 0}, {"dbscan_eps": 0.0}, {"dbscan_min_pts": 0},
    ])
    def test_invalid_rejected(self, kwargs):
        base = {"dbscan_eps": 1.0}
        base.update(kwargs)
        with pytest.raises(ValueError):
            FusionConfig(**base)
