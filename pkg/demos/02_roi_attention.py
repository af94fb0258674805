"""
Pooling points into a box's canonical frame and attending over them
===================================================================

Shows the two halves of the ROI feature encoder: geometry (which cell
centers a candidate box pools, expressed in its own frame) and the
per-channel attention that turns them into one feature vector.
"""

import numpy as np

from voxrefine.geometry import Roi, box_vertices, to_canonical
from voxrefine.roi_encoder import (
    RfeConfig,
    RfeParams,
    augmented_coords,
    candidate_indices,
    compute_roi_features,
    pool,
    vector_attention,
)
from voxrefine.tensor import Tensor
from voxrefine.voxels import InterpretedPoints

rng = np.random.default_rng(7)
cfg = RfeConfig(d_a=16, hidden=24, repeats=2, scale_order=(1,), budgets=(32,), enlargement=0.5)

# a candidate box and a cloud of "cell centers" around it
roi = Roi(center=[4.0, -1.0, 0.5], size=[3.8, 1.7, 1.5], yaw=0.6)
positions = rng.uniform([0, -4, -1], [8, 2, 2], size=(300, 3))
features = rng.normal(size=(300, 6))
points = InterpretedPoints(positions, Tensor(features), 1)

inside = candidate_indices(positions, roi, cfg.enlargement)
print(f"{inside.size} of {len(positions)} cell centers fall in the enlarged box")

pooled = pool(points, roi, cfg.enlargement, budget=32, seed=[0, 0, 1, 0])
canon = pooled.positions  # box frame: x forward, y left, z up
print(f"pooled {canon.shape[0]} points; canonical extents "
      f"x [{canon[:, 0].min():+.2f}, {canon[:, 0].max():+.2f}] "
      f"y [{canon[:, 1].min():+.2f}, {canon[:, 1].max():+.2f}]")

# ------------------------------------------------------------------
# each pooled point carries its offsets to the 8 box vertices as well

aug = augmented_coords(canon, roi.size)
print(f"position code input is {aug.shape[1]}-dimensional "
      f"(point + 8 vertex offsets)")
verts = box_vertices(roi, frame="canonical")
np.testing.assert_allclose(aug[0, 3:6], canon[0] - verts[0], atol=1e-12)

# ------------------------------------------------------------------
# the attention kernel weights every pooled point per channel

params = RfeParams(cfg, {1: 6}, rng)
block = params.blocks[(0, 1)]
feats = block.feat_proj(pooled.features)
from voxrefine.roi_encoder import position_encoding

zeta = position_encoding(pooled, roi, block)
out, weights = vector_attention(params.init_feature, feats, zeta, block)
print(f"\nattention weights {weights.shape}: each channel's column sums to "
      f"{weights.data.sum(axis=0)[0]:.6f}")
top = np.argsort(weights.data.mean(axis=1))[::-1][:3]
print(f"three most-attended pooled points (mean over channels): rows {top.tolist()}")

# ------------------------------------------------------------------
# end to end: repeats x scales, residual blocks, one vector per ROI

feats_per_roi = compute_roi_features({1: points}, [roi], params, seed=5)
print(f"\nfinal ROI feature: shape {feats_per_roi[0].shape}, "
      f"norm {np.linalg.norm(feats_per_roi[0].data):.3f}")

# moving scene and box together leaves the feature untouched
angle, shift = 1.1, np.array([5.0, -2.0, 0.3])
c, s = np.cos(angle), np.sin(angle)
rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
moved = InterpretedPoints(positions @ rot.T + shift, Tensor(features), 1)
moved_roi = Roi(rot @ roi.center + shift, roi.size, roi.yaw + angle)
feats_moved = compute_roi_features({1: moved}, [moved_roi], params, seed=5)
drift = np.abs(feats_per_roi[0].data - feats_moved[0].data).max()
print(f"feature drift under a rigid scene motion: {drift:.2e}")
