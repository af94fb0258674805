"""Tests for targets, loss terms, and the detection heads."""

import numpy as np
import pytest

from voxrefine.errors import ConfigError, ContractError
from voxrefine.geometry import Roi, iou_3d
from voxrefine.heads import (
    AuxHeads,
    DetectionHeads,
    RefineConfig,
    aux_loss,
    bce,
    decode_residue,
    encode_residue,
    focal_loss_sum,
    make_refine_targets,
    normalized_iou,
    refine_loss,
    smooth_l1,
    total_loss,
)
from voxrefine.tensor import Tensor, finite_difference_loss_grad, max_relative_error

CFG = RefineConfig()


class TestNormalizedIou:
    def test_anchor_values(self):
        assert normalized_iou(0.10, CFG) == pytest.approx(0.0, abs=1e-12)
        assert normalized_iou(0.50, CFG) == pytest.approx(0.5, abs=1e-12)
        assert normalized_iou(0.80, CFG) == pytest.approx(1.0, abs=1e-12)

    def test_ramp_endpoints(self):
        assert normalized_iou(CFG.chi_l, CFG) == 0.0
        assert normalized_iou(CFG.chi_h, CFG) == 1.0
        assert normalized_iou(0.0, CFG) == 0.0
        assert normalized_iou(1.0, CFG) == 1.0

    def test_linear_in_between(self):
        xs = np.linspace(CFG.chi_l, CFG.chi_h, 21)
        ys = normalized_iou(xs, CFG)
        np.testing.assert_allclose(ys, (xs - CFG.chi_l) / (CFG.chi_h - CFG.chi_l), atol=1e-12)

    def test_array_shape_preserved(self):
        out = normalized_iou(np.full((3, 2), 0.5), CFG)
        assert out.shape == (3, 2)

    def test_threshold_ordering_enforced(self):
        with pytest.raises(ConfigError):
            RefineConfig(chi_l=0.8, chi_h=0.3)
        with pytest.raises(ConfigError):
            RefineConfig(chi_reg=0.2)  # below chi_l


class TestResidueCodec:
    def roundtrip_case(self, rng):
        roi = Roi(
            rng.uniform(-20, 20, 3),
            rng.uniform(0.5, 5.0, 3),
            rng.uniform(-np.pi, np.pi),
        )
        gt = Roi(
            roi.center + rng.uniform(-2, 2, 3),
            rng.uniform(0.5, 5.0, 3),
            rng.uniform(-np.pi, np.pi),
        )
        return roi, gt

    def test_roundtrip_many(self):
        rng = np.random.default_rng(64)
        for _ in range(500):
            roi, gt = self.roundtrip_case(rng)
            delta = encode_residue(roi, gt, CFG)
            back = decode_residue(roi, delta, CFG)
            np.testing.assert_allclose(back.center, gt.center, atol=1e-9)
            np.testing.assert_allclose(back.size, gt.size, atol=1e-9)
            assert back.yaw == pytest.approx(gt.yaw, abs=1e-9)

    def test_zero_residue_is_identity(self):
        roi = Roi(np.array([3.0, 1.0, 0.5]), np.array([4.0, 2.0, 1.5]), 0.7)
        back = decode_residue(roi, np.zeros(7), CFG)
        np.testing.assert_allclose(back.center, roi.center, atol=1e-12)
        np.testing.assert_allclose(back.size, roi.size, atol=1e-12)
        assert back.yaw == pytest.approx(roi.yaw)

    def test_horizontal_normalizer_is_base_diagonal(self):
        roi = Roi(np.zeros(3), np.array([3.0, 4.0, 2.0]), 0.0)  # diagonal 5
        gt = Roi(np.array([1.0, 2.0, 0.5]), roi.size, 0.0)
        delta = encode_residue(roi, gt, CFG)
        assert delta[0] == pytest.approx(1.0 / 5.0, abs=1e-12)
        assert delta[1] == pytest.approx(2.0 / 5.0, abs=1e-12)
        assert delta[2] == pytest.approx(0.25, abs=1e-12)  # z scaled by roi height

    def test_center_normalizer_variant(self):
        cfg = RefineConfig(residue_diag="center")
        roi = Roi(np.array([3.0, 4.0, 0.0]), np.ones(3), 0.0)  # center radius 5
        gt = Roi(np.array([4.0, 4.0, 0.0]), np.ones(3), 0.0)
        delta = encode_residue(roi, gt, cfg)
        assert delta[0] == pytest.approx(1.0 / 5.0, abs=1e-12)
        # a candidate at the origin makes that normalizer degenerate
        origin = Roi(np.array([0.0, 0.0, 1.0]), np.ones(3), 0.0)
        with pytest.raises(ContractError):
            encode_residue(origin, gt, cfg)

    def test_size_log_ratio(self):
        roi = Roi(np.zeros(3), np.array([2.0, 2.0, 2.0]), 0.0)
        gt = Roi(np.zeros(3), np.array([4.0, 1.0, 2.0]), 0.0)
        delta = encode_residue(roi, gt, CFG)
        np.testing.assert_allclose(delta[3:6], [np.log(2.0), np.log(0.5), 0.0], atol=1e-12)

    def test_yaw_wrap_shortest_difference(self):
        roi = Roi(np.zeros(3), np.ones(3), 3.0)
        gt = Roi(np.zeros(3), np.ones(3), -3.0)
        delta = encode_residue(roi, gt, CFG)
        # going from 3.0 to -3.0 radians is a short step through pi
        assert delta[6] == pytest.approx(2.0 * np.pi - 6.0, abs=1e-12)

    def test_decode_preserves_identity_fields(self):
        roi = Roi(np.zeros(3), np.ones(3), 0.0, cls=1, confidence=0.77)
        out = decode_residue(roi, np.zeros(7), CFG)
        assert out.cls == 1
        assert out.confidence == pytest.approx(0.77)


class TestFocalLoss:
    def test_hard_target_value(self):
        # p = 0.5, t = 1: alpha * (1-p)^gamma * (-log p) = 0.25 * 0.25 * ln 2
        pred = Tensor(np.array([[0.5]]))
        value = focal_loss_sum(pred, np.array([[1.0]]), alpha=0.25, gamma=2.0)
        assert value.item() == pytest.approx(0.25 * 0.25 * np.log(2.0), abs=1e-12)
        assert value.item() == pytest.approx(0.0433216988, abs=1e-9)

    def test_negative_target_value(self):
        # p = 0.5, t = 0: (1-alpha) * p^gamma * (-log(1-p))
        pred = Tensor(np.array([[0.5]]))
        value = focal_loss_sum(pred, np.array([[0.0]]), alpha=0.25, gamma=2.0)
        assert value.item() == pytest.approx(0.75 * 0.25 * np.log(2.0), abs=1e-12)

    def test_soft_target_interpolates(self):
        pred = Tensor(np.array([[0.5]]))
        t = 0.3
        full_pos = focal_loss_sum(pred, np.array([[1.0]]), 0.25, 2.0).item()
        full_neg = focal_loss_sum(pred, np.array([[0.0]]), 0.25, 2.0).item()
        mixed = focal_loss_sum(pred, np.array([[t]]), 0.25, 2.0).item()
        assert mixed == pytest.approx(t * full_pos + (1 - t) * full_neg, abs=1e-12)

    def test_confident_correct_prediction_downweighted(self):
        sharp = focal_loss_sum(Tensor(np.array([[0.99]])), np.array([[1.0]]), 0.25, 2.0).item()
        blunt = focal_loss_sum(Tensor(np.array([[0.6]])), np.array([[1.0]]), 0.25, 2.0).item()
        assert sharp < blunt / 100.0

    def test_extreme_predictions_finite(self):
        preds = Tensor(np.array([[1.0], [0.0]]))
        value = focal_loss_sum(preds, np.array([[0.0], [1.0]]), 0.25, 2.0)
        assert np.isfinite(value.item())

    def test_gradient_vs_fd(self):
        rng = np.random.default_rng(3)
        logits = Tensor(rng.normal(size=(5, 1)), requires_grad=True)
        t = rng.uniform(0, 1, size=(5, 1))

        def loss_fn():
            from voxrefine.tensor import sigmoid

            return focal_loss_sum(sigmoid(logits), t, 0.25, 2.0)

        loss_fn().backward()
        num = finite_difference_loss_grad(loss_fn, logits)
        assert max_relative_error(logits.grad, num) < 1e-6

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ContractError):
            focal_loss_sum(Tensor(np.ones((2, 1))), np.ones(2), 0.25, 2.0)


class TestSmoothL1AndBce:
    def test_smooth_l1_quadratic_linear(self):
        pred = Tensor(np.array([0.5, 3.0]))
        value = smooth_l1(pred, np.zeros(2), delta=1.0)
        assert value.item() == pytest.approx((0.5 * 0.25 + (3.0 - 0.5)) / 2.0, abs=1e-12)

    def test_bce_known_value(self):
        value = bce(Tensor(np.array([0.5, 0.5])), np.array([1.0, 0.0]))
        assert value.item() == pytest.approx(np.log(2.0), abs=1e-9)


class TestRefineTargets:
    def make_pair(self):
        gt = Roi(np.array([5.0, 0.0, 0.0]), np.array([4.0, 2.0, 1.6]), 0.2)
        near = Roi(gt.center + np.array([0.2, 0.1, 0.0]), gt.size, gt.yaw + 0.05, confidence=0.9)
        far = Roi(np.array([20.0, 5.0, 0.0]), np.array([3.0, 2.0, 1.5]), 0.0, confidence=0.3)
        return [near, far], [gt]

    def test_matching_and_gating(self):
        rois, gts = self.make_pair()
        targets = make_refine_targets(rois, gts, CFG)
        assert targets.matched_gt[0] == 0
        assert targets.raw_iou[0] == pytest.approx(iou_3d(rois[0], gts[0]), abs=1e-12)
        assert targets.raw_iou[0] >= CFG.chi_reg and targets.reg_mask[0]
        assert targets.raw_iou[1] == 0.0 and not targets.reg_mask[1]
        np.testing.assert_allclose(targets.residues[0], encode_residue(rois[0], gts[0], CFG))
        np.testing.assert_allclose(targets.residues[1], 0.0)

    def test_conf_target_is_ramped_iou(self):
        rois, gts = self.make_pair()
        targets = make_refine_targets(rois, gts, CFG)
        np.testing.assert_allclose(
            targets.conf_target, normalized_iou(targets.raw_iou, CFG), atol=1e-12
        )

    def test_no_ground_truth(self):
        rois, _ = self.make_pair()
        targets = make_refine_targets(rois, [], CFG)
        assert (targets.matched_gt == -1).all()
        np.testing.assert_allclose(targets.conf_target, 0.0)
        assert not targets.reg_mask.any()

    def test_best_overlap_wins(self):
        gt_a = Roi(np.array([0.0, 0.0, 0.0]), np.array([4.0, 2.0, 1.6]), 0.0)
        gt_b = Roi(np.array([3.0, 0.0, 0.0]), np.array([4.0, 2.0, 1.6]), 0.0)
        roi = Roi(np.array([2.6, 0.0, 0.0]), gt_a.size, 0.0)
        targets = make_refine_targets([roi], [gt_a, gt_b], CFG)
        assert targets.matched_gt[0] == 1

    def test_normalized_gate_variant(self):
        cfg = RefineConfig(reg_gate="normalized")
        rois, gts = self.make_pair()
        targets = make_refine_targets(rois, gts, cfg)
        assert targets.reg_mask[0] == (normalized_iou(targets.raw_iou[0], cfg) >= cfg.chi_reg)


class TestRefineLoss:
    def test_hand_computed_value(self):
        rois, gts = (
            [
                Roi(np.array([5.2, 0.1, 0.0]), np.array([4.0, 2.0, 1.6]), 0.25, confidence=0.9),
                Roi(np.array([20.0, 5.0, 0.0]), np.array([3.0, 2.0, 1.5]), 0.0, confidence=0.3),
            ],
            [Roi(np.array([5.0, 0.0, 0.0]), np.array([4.0, 2.0, 1.6]), 0.2)],
        )
        targets = make_refine_targets(rois, gts, CFG)
        conf = Tensor(np.array([[0.7], [0.2]]))
        res = Tensor(np.zeros((2, 7)))
        loss = refine_loss(conf, res, targets, CFG)

        # independent recomputation with plain numpy
        def focal(p, t):
            return -(
                t * CFG.focal_alpha * (1 - p) ** 2 * np.log(p)
                + (1 - t) * (1 - CFG.focal_alpha) * p**2 * np.log(1 - p)
            )

        expect = focal(0.7, targets.conf_target[0]) + focal(0.2, targets.conf_target[1])
        diff = targets.residues[0]
        hub = np.where(np.abs(diff) <= 1.0, 0.5 * diff**2, np.abs(diff) - 0.5)
        expect += hub.mean()
        expect /= 2.0
        assert loss.item() == pytest.approx(float(expect), abs=1e-12)

    def test_empty_batch_rejected(self):
        targets = make_refine_targets([], [], CFG)
        with pytest.raises(ContractError):
            refine_loss(Tensor(np.zeros((0, 1))), Tensor(np.zeros((0, 7))), targets, CFG)

    def test_gate_closed_means_no_box_term(self):
        roi = Roi(np.array([50.0, 0.0, 0.0]), np.ones(3), 0.0)
        targets = make_refine_targets([roi], [], CFG)
        conf = Tensor(np.array([[0.4]]))
        loss_a = refine_loss(conf, Tensor(np.zeros((1, 7))), targets, CFG)
        loss_b = refine_loss(conf, Tensor(np.full((1, 7), 9.0)), targets, CFG)
        assert loss_a.item() == pytest.approx(loss_b.item(), abs=1e-15)


class TestAuxLoss:
    def test_zero_foreground_gives_zero(self):
        preds = Tensor(np.random.default_rng(0).uniform(0.1, 0.9, size=(6, 7)))
        value = aux_loss(preds, np.zeros(6, dtype=bool), np.zeros((6, 3)), np.zeros((6, 3)), CFG)
        assert value.item() == 0.0

    def test_hand_computed_single_foreground(self):
        fg = np.array([True, False])
        preds_data = np.array(
            [
                [0.8, 0.1, -0.2, 0.3, 0.6, 0.4, 0.5],
                [0.3, 9.0, 9.0, 9.0, 0.9, 0.9, 0.9],  # background: only the prob matters
            ]
        )
        offsets = np.array([[0.0, 0.1, -0.1], [0.0, 0.0, 0.0]])
        parts = np.array([[0.5, 0.25, 0.75], [0.0, 0.0, 0.0]])
        value = aux_loss(Tensor(preds_data), fg, offsets, parts, CFG)

        def focal(p, t):
            return -(
                t * 0.25 * (1 - p) ** 2 * np.log(p) + (1 - t) * 0.75 * p**2 * np.log(1 - p)
            )

        cls = focal(0.8, 1.0) + focal(0.3, 0.0)
        d = preds_data[0, 1:4] - offsets[0]
        off = np.where(np.abs(d) <= 1.0, 0.5 * d**2, np.abs(d) - 0.5).mean()
        pp = preds_data[0, 4:7]
        tt = parts[0]
        part = (-(tt * np.log(pp) + (1 - tt) * np.log(1 - pp))).mean()
        assert value.item() == pytest.approx(cls + off + part, abs=1e-12)

    def test_normalized_by_foreground_count(self):
        rng = np.random.default_rng(9)
        preds = Tensor(np.concatenate([rng.uniform(0.2, 0.8, (4, 1)), rng.normal(size=(4, 3)), rng.uniform(0.2, 0.8, (4, 3))], axis=1))
        offsets = rng.normal(size=(4, 3))
        parts = rng.uniform(0, 1, size=(4, 3))
        one = aux_loss(preds, np.array([True, False, False, False]), offsets, parts, CFG)
        # duplicating the same supervision over more foreground rows changes
        # the sum and the divisor together
        assert np.isfinite(one.item()) and one.item() > 0.0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ContractError):
            aux_loss(Tensor(np.ones((3, 6))), np.zeros(3, dtype=bool), np.zeros((3, 3)), np.zeros((3, 3)), CFG)


class TestTotalLoss:
    def test_sum_and_passthrough(self):
        a = Tensor(np.array(1.5))
        b = Tensor(np.array(0.25))
        assert total_loss(a, b).item() == pytest.approx(1.75)
        assert total_loss(a, None) is a


class TestHeadModules:
    def test_detection_heads_shapes_and_ranges(self):
        rng = np.random.default_rng(2)
        heads = DetectionHeads(d_in=16, hidden=32, rng=rng)
        x = Tensor(rng.normal(size=(5, 16)))
        conf, res = heads(x)
        assert conf.shape == (5, 1)
        assert res.shape == (5, 7)
        assert np.all((conf.data > 0.0) & (conf.data < 1.0))

    def test_aux_heads_probability_columns(self):
        rng = np.random.default_rng(4)
        heads = AuxHeads({3: 6, 4: 7}, hidden=12, rng=rng)
        x = Tensor(rng.normal(size=(9, 6)))
        out = heads(3, x)
        assert out.shape == (9, 7)
        assert np.all((out.data[:, 0] > 0) & (out.data[:, 0] < 1))
        assert np.all((out.data[:, 4:] > 0) & (out.data[:, 4:] < 1))
        # offset columns are unconstrained
        assert np.any(np.abs(out.data[:, 1:4]) > 0)

    def test_heads_parameter_names(self):
        rng = np.random.default_rng(5)
        heads = DetectionHeads(d_in=8, hidden=8, rng=rng)
        names = {n for n, _ in heads.named_parameters()}
        assert "heads.fc1.weight" in names
        assert "heads.conf.bias" in names
        aux = AuxHeads({3: 4, 4: 4}, hidden=8, rng=rng)
        aux_names = {n for n, _ in aux.named_parameters()}
        assert any(n.startswith("aux.s3.") for n in aux_names)
        assert any(n.startswith("aux.s4.") for n in aux_names)
