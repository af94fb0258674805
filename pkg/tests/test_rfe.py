"""ROI feature encoder tests.

Both attention kernels are verified against explicit per-point loops,
and the end-to-end feature is checked for the symmetries it promises:
stability under rigid scene motion, invariance to point order.
"""

import numpy as np
import pytest

from voxrefine.errors import ConfigError, ContractError
from voxrefine.geometry import Roi, canonical_vertices
from voxrefine.roi_encoder import (
    AUGMENTED_DIM,
    BlockParams,
    RfeConfig,
    RfeParams,
    augmented_coords,
    candidate_indices,
    center_augmented,
    compute_roi_features,
    multihead_attention,
    pool,
    position_encoding,
    subsample,
    track_attention_allocation,
    vector_attention,
)
from voxrefine.tensor import Tensor
from voxrefine.voxels import InterpretedPoints


def small_cfg(**kw):
    base = dict(d_a=8, hidden=12, repeats=1, scale_order=(1,), budgets=(16,), enlargement=0.5)
    base.update(kw)
    return RfeConfig(**base)


def vector_attention_oracle(roi_feature, feats, zeta, block):
    """Scalar reference: loop over points and channels, softmax by hand."""
    q = roi_feature @ block.query_proj.weight.data.T + block.query_proj.bias.data
    n = feats.shape[0]
    d = q.shape[1]
    logits = np.zeros((n, d))
    values = np.zeros((n, d))
    for j in range(n):
        k_j = feats[j] @ block.key_proj.weight.data.T + block.key_proj.bias.data
        v_j = feats[j] @ block.value_proj.weight.data.T + block.value_proj.bias.data
        x = q[0] - k_j + zeta[j]
        for layer_index, layer in enumerate(block.weight_mlp.layers):
            x = x @ layer.weight.data.T + layer.bias.data
            if layer_index < len(block.weight_mlp.layers) - 1:
                x = np.maximum(x, 0.0)
        logits[j] = x
        values[j] = v_j + zeta[j]
    out = np.zeros(d)
    weights = np.zeros((n, d))
    for c in range(d):
        col = np.exp(logits[:, c] - logits[:, c].max())
        col /= col.sum()
        weights[:, c] = col
        for j in range(n):
            out[c] += col[j] * values[j, c]
    return out, weights


def multihead_attention_oracle(roi_feature, feats, zeta, block, heads):
    """Scalar reference for the dot-product kernel."""
    q = roi_feature @ block.query_proj.weight.data.T + block.query_proj.bias.data
    k = feats @ block.key_proj.weight.data.T + block.key_proj.bias.data + zeta
    v = feats @ block.value_proj.weight.data.T + block.value_proj.bias.data + zeta
    n, d = k.shape
    d_h = d // heads
    out = np.zeros(d)
    weights = np.zeros((n, heads))
    for h in range(heads):
        sl = slice(h * d_h, (h + 1) * d_h)
        logits = np.array([float(np.dot(k[j, sl], q[0, sl])) / np.sqrt(d_h) for j in range(n)])
        w = np.exp(logits - logits.max())
        w /= w.sum()
        weights[:, h] = w
        for j in range(n):
            out[sl] += w[j] * v[j, sl]
    return out, weights


class TestAttentionKernels:
    def make_inputs(self, rng, n, d_a):
        cfg = small_cfg(d_a=d_a, heads=4)
        block = BlockParams(in_channels=d_a, cfg=cfg, rng=rng)
        roi_feature = Tensor(rng.normal(size=(1, d_a)))
        feats = Tensor(rng.normal(size=(n, d_a)))
        zeta = Tensor(rng.normal(size=(n, d_a)))
        return block, roi_feature, feats, zeta

    def test_vector_matches_oracle_many_instances(self):
        rng = np.random.default_rng(100)
        for trial in range(100):
            n = int(rng.integers(1, 12))
            block, roi_feature, feats, zeta = self.make_inputs(rng, n, 8)
            out, weights = vector_attention(roi_feature, feats, zeta, block)
            ref_out, ref_w = vector_attention_oracle(
                roi_feature.data, feats.data, zeta.data, block
            )
            np.testing.assert_allclose(out.data[0], ref_out, atol=1e-12)
            np.testing.assert_allclose(weights.data, ref_w, atol=1e-12)

    def test_vector_weights_sum_to_one_per_channel(self):
        rng = np.random.default_rng(101)
        block, roi_feature, feats, zeta = self.make_inputs(rng, 9, 8)
        _, weights = vector_attention(roi_feature, feats, zeta, block)
        np.testing.assert_allclose(weights.data.sum(axis=0), np.ones(8), atol=1e-12)

    def test_vector_permutation_invariance(self):
        rng = np.random.default_rng(102)
        block, roi_feature, feats, zeta = self.make_inputs(rng, 11, 8)
        out, _ = vector_attention(roi_feature, feats, zeta, block)
        perm = rng.permutation(11)
        out_p, _ = vector_attention(
            roi_feature, Tensor(feats.data[perm]), Tensor(zeta.data[perm]), block
        )
        np.testing.assert_allclose(out.data, out_p.data, atol=1e-12)

    def test_multihead_matches_oracle(self):
        rng = np.random.default_rng(103)
        for _ in range(30):
            n = int(rng.integers(1, 10))
            block, roi_feature, feats, zeta = self.make_inputs(rng, n, 8)
            out, weights = multihead_attention(roi_feature, feats, zeta, block, heads=4)
            ref_out, ref_w = multihead_attention_oracle(
                roi_feature.data, feats.data, zeta.data, block, heads=4
            )
            np.testing.assert_allclose(out.data[0], ref_out, atol=1e-12)
            np.testing.assert_allclose(weights.data, ref_w, atol=1e-12)
            np.testing.assert_allclose(weights.data.sum(axis=0), np.ones(4), atol=1e-12)

    def test_multihead_indivisible_width_rejected(self):
        rng = np.random.default_rng(104)
        block, roi_feature, feats, zeta = self.make_inputs(rng, 4, 8)
        with pytest.raises(ConfigError):
            multihead_attention(roi_feature, feats, zeta, block, heads=3)

    def test_empty_set_rejected(self):
        rng = np.random.default_rng(105)
        block, roi_feature, _, _ = self.make_inputs(rng, 3, 8)
        empty = Tensor(np.zeros((0, 8)))
        with pytest.raises(ContractError):
            vector_attention(roi_feature, empty, empty, block)

    def test_single_point_gets_full_weight(self):
        rng = np.random.default_rng(106)
        block, roi_feature, feats, zeta = self.make_inputs(rng, 1, 8)
        _, weights = vector_attention(roi_feature, feats, zeta, block)
        np.testing.assert_allclose(weights.data, np.ones((1, 8)), atol=1e-15)


class TestAugmentedCoordinates:
    def test_layout_and_dimension(self):
        size = np.array([2.0, 4.0, 6.0])
        pts = np.array([[0.3, -0.7, 1.1]])
        aug = augmented_coords(pts, size)
        assert aug.shape == (1, AUGMENTED_DIM)
        np.testing.assert_allclose(aug[0, :3], pts[0])
        verts = canonical_vertices(size)
        for k in range(8):
            np.testing.assert_allclose(aug[0, 3 + 3 * k : 6 + 3 * k], pts[0] - verts[k])

    def test_center_minus_point_collapses_to_repeated_negation(self):
        size = np.array([3.0, 1.5, 2.0])
        pts = np.random.default_rng(0).normal(size=(6, 3))
        diff = center_augmented(size)[None, :] - augmented_coords(pts, size)
        expect = np.tile(-pts, (1, 9))
        np.testing.assert_allclose(diff, expect, atol=1e-12)

    def test_position_encoding_depends_only_on_position(self):
        # two boxes with different sizes but the same pooled canonical positions
        # produce the same code, because the corner terms cancel
        rng = np.random.default_rng(1)
        cfg = small_cfg()
        block = BlockParams(in_channels=4, cfg=cfg, rng=rng)
        positions = rng.normal(size=(5, 3))
        from voxrefine.roi_encoder import PooledSet

        a = PooledSet(0, 1, positions, Tensor(np.zeros((5, 4))))
        roi_a = Roi(np.zeros(3), np.array([2.0, 2.0, 2.0]), 0.0)
        roi_b = Roi(np.ones(3), np.array([5.0, 1.0, 3.0]), 1.2)
        za = position_encoding(a, roi_a, block)
        zb = position_encoding(a, roi_b, block)
        np.testing.assert_allclose(za.data, zb.data, atol=1e-12)


class TestPooling:
    def make_points(self, rng, n=200):
        positions = rng.uniform(-5, 5, size=(n, 3))
        feats = Tensor(rng.normal(size=(n, 6)))
        return InterpretedPoints(positions, feats, scale_index=1)

    def test_candidates_respect_enlargement(self):
        rng = np.random.default_rng(40)
        points = self.make_points(rng)
        roi = Roi(np.zeros(3), np.array([2.0, 2.0, 2.0]), 0.5)
        for enlargement in (0.0, 0.5, 1.5):
            idx = candidate_indices(points.positions, roi, enlargement)
            from voxrefine.geometry import contains

            np.testing.assert_array_equal(
                np.flatnonzero(contains(points.positions, roi, enlargement)), idx
            )

    def test_subsample_budget_and_determinism(self):
        rng = np.random.default_rng(41)
        idx = np.sort(rng.choice(1000, size=300, replace=False))
        a = subsample(idx, 50, seed=[7, 1, 2, 0])
        b = subsample(idx, 50, seed=[7, 1, 2, 0])
        c = subsample(idx, 50, seed=[8, 1, 2, 0])
        assert a.shape == (50,)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)
        assert np.all(np.isin(a, idx))
        assert np.all(np.diff(a) > 0)  # ascending, no repeats

    def test_subsample_keeps_all_under_budget(self):
        idx = np.array([3, 5, 9])
        np.testing.assert_array_equal(subsample(idx, 10, seed=0), idx)

    def test_pool_canonical_positions(self):
        rng = np.random.default_rng(42)
        points = self.make_points(rng)
        roi = Roi(np.array([1.0, -2.0, 0.5]), np.array([4.0, 3.0, 2.0]), 0.8)
        pooled = pool(points, roi, enlargement=0.0, budget=500, seed=0)
        from voxrefine.geometry import to_canonical

        idx = candidate_indices(points.positions, roi, 0.0)
        np.testing.assert_allclose(
            pooled.positions, to_canonical(points.positions[idx], roi), atol=1e-12
        )
        np.testing.assert_array_equal(pooled.features.data, points.features.data[idx])

    def test_pool_empty_is_valid(self):
        rng = np.random.default_rng(43)
        points = self.make_points(rng)
        far = Roi(np.array([100.0, 100.0, 100.0]), np.ones(3), 0.0)
        pooled = pool(points, far, enlargement=0.5, budget=8, seed=0)
        assert len(pooled) == 0


class TestComputeRoiFeatures:
    def build(self, rng, cfg=None, n_points=300):
        cfg = cfg or small_cfg()
        positions = rng.uniform(-6, 6, size=(n_points, 3))
        feats = rng.normal(size=(n_points, 5))
        points = {1: InterpretedPoints(positions, Tensor(feats), 1)}
        params = RfeParams(cfg, {1: 5}, rng)
        rois = [
            Roi(np.array([0.0, 0.0, 0.0]), np.array([4.0, 3.0, 2.0]), 0.3),
            Roi(np.array([2.0, -1.0, 0.0]), np.array([3.0, 3.0, 2.0]), -1.1),
        ]
        return points, rois, params

    def test_shapes_and_determinism(self):
        rng = np.random.default_rng(50)
        points, rois, params = self.build(rng)
        feats_a = compute_roi_features(points, rois, params, seed=5)
        feats_b = compute_roi_features(points, rois, params, seed=5)
        assert len(feats_a) == 2
        for fa, fb in zip(feats_a, feats_b):
            assert fa.shape == (1, params.cfg.d_a)
            np.testing.assert_array_equal(fa.data, fb.data)

    def test_roi_far_from_everything_keeps_initial_feature(self):
        rng = np.random.default_rng(51)
        points, rois, params = self.build(rng)
        lonely = Roi(np.array([500.0, 500.0, 500.0]), np.ones(3), 0.0)
        feats = compute_roi_features(points, rois + [lonely], params, seed=1)
        np.testing.assert_array_equal(feats[2].data, params.init_feature.data)

    def test_gradient_reaches_initial_feature(self):
        rng = np.random.default_rng(52)
        points, rois, params = self.build(rng)
        feats = compute_roi_features(points, rois, params, seed=2)
        from voxrefine.tensor import concat, mul, tsum

        # a weighted sum: a plain sum of layer-normalized rows is constant,
        # which would hide the path with an exactly-zero gradient
        w = Tensor(rng.normal(size=(2, params.cfg.d_a)))
        tsum(mul(concat(feats, axis=0), w)).backward()
        assert params.init_feature.grad is not None
        assert np.any(params.init_feature.grad != 0.0)

    def test_rigid_motion_stability(self):
        """Rotating and translating scene + boxes together leaves features unchanged.

        Holds because pooling, the canonical transform, and the position
        code all work in box-relative coordinates.
        """
        rng = np.random.default_rng(53)
        cfg = small_cfg(budgets=(500,))  # generous budget: avoid subsample index drift
        positions = rng.uniform(-6, 6, size=(250, 3))
        feats = rng.normal(size=(250, 5))
        rois = [
            Roi(np.array([0.5, 0.2, 0.1]), np.array([4.0, 3.0, 2.0]), 0.4),
            Roi(np.array([-2.0, 1.0, -0.3]), np.array([2.5, 2.0, 1.5]), -0.9),
        ]
        params = RfeParams(cfg, {1: 5}, rng)

        angle = 0.77
        rot = np.array(
            [
                [np.cos(angle), -np.sin(angle), 0.0],
                [np.sin(angle), np.cos(angle), 0.0],
                [0.0, 0.0, 1.0],
            ]
        )
        shift = np.array([3.0, -1.5, 0.25])
        moved_positions = positions @ rot.T + shift
        moved_rois = [
            Roi(rot @ r.center + shift, r.size, r.yaw + angle) for r in rois
        ]

        base = compute_roi_features(
            {1: InterpretedPoints(positions, Tensor(feats), 1)}, rois, params, seed=9
        )
        moved = compute_roi_features(
            {1: InterpretedPoints(moved_positions, Tensor(feats), 1)}, moved_rois, params, seed=9
        )
        for fa, fb in zip(base, moved):
            np.testing.assert_allclose(fa.data, fb.data, atol=1e-9)

    def test_allocation_meter_counts_weight_elements(self):
        rng = np.random.default_rng(54)
        cfg = small_cfg(budgets=(1000,))
        points, rois, params = self.build(rng, cfg=cfg)
        with track_attention_allocation() as meter:
            compute_roi_features(points, rois, params, seed=3)
        expected = 0
        for roi in rois:
            n_inside = candidate_indices(points[1].positions, roi, cfg.enlargement).size
            expected += n_inside * cfg.d_a
        assert meter.weight_elements == expected

    def test_batch_norm_variant_runs(self):
        rng = np.random.default_rng(55)
        points, rois, params = self.build(rng, cfg=small_cfg(norm="batch"))
        feats = compute_roi_features(points, rois, params, seed=4, training=True)
        assert all(np.all(np.isfinite(f.data)) for f in feats)

    def test_cached_candidates_match_fresh(self):
        rng = np.random.default_rng(56)
        points, rois, params = self.build(rng)
        cache = {
            (ri, 1): candidate_indices(points[1].positions, roi, params.cfg.enlargement)
            for ri, roi in enumerate(rois)
        }
        fresh = compute_roi_features(points, rois, params, seed=6)
        cached = compute_roi_features(points, rois, params, seed=6, candidates=cache)
        for fa, fb in zip(fresh, cached):
            np.testing.assert_array_equal(fa.data, fb.data)
