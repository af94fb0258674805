"""
What the refinement heads are trained toward
============================================

Builds noisy candidate boxes around two ground-truth boxes, then walks
the supervision pipeline: overlap-ramped confidence targets, normalized
box residues, and the gated objective combining them.
"""

import numpy as np

from voxrefine.geometry import Roi, iou_3d
from voxrefine.heads import (
    RefineConfig,
    decode_residue,
    encode_residue,
    make_refine_targets,
    normalized_iou,
)

rng = np.random.default_rng(21)
cfg = RefineConfig()

gts = [
    Roi([6.0, 2.0, 0.8], [4.2, 1.8, 1.6], 0.4),
    Roi([14.0, -3.0, 0.8], [3.9, 1.7, 1.5], -1.2),
]
proposals = []
for gt in gts:
    for _ in range(3):
        proposals.append(
            Roi(
                gt.center + rng.normal(0, 0.4, 3),
                gt.size * np.exp(rng.normal(0, 0.1, 3)),
                gt.yaw + rng.normal(0, 0.15),
                confidence=float(rng.uniform(0.5, 1.0)),
            )
        )

# ------------------------------------------------------------------
# the confidence target is a clipped linear ramp of the 3D overlap

print("overlap -> ramped target (flat below 0.25, flat above 0.75):")
for x in (0.1, 0.25, 0.5, 0.75, 0.9):
    print(f"  iou {x:.2f} -> {float(normalized_iou(x, cfg)):.3f}")

targets = make_refine_targets(proposals, gts, cfg)
print("\nper-proposal supervision:")
for r in range(len(proposals)):
    print(
        f"  proposal {r}: matched gt {targets.matched_gt[r]}, "
        f"raw iou {targets.raw_iou[r]:.3f}, conf target {targets.conf_target[r]:.3f}, "
        f"regressed: {bool(targets.reg_mask[r])}"
    )

# ------------------------------------------------------------------
# residues are dimensionless: diagonal-relative shifts, log size ratios

p, g = proposals[0], gts[0]
delta = encode_residue(p, g, cfg)
print(f"\nresidue of proposal 0 vs its gt: {np.round(delta, 3)}")
back = decode_residue(p, delta, cfg)
print(f"decoding it recovers the gt center to {np.abs(back.center - g.center).max():.1e} m")
print(f"overlap before {iou_3d(p, g):.3f} -> after decoding {iou_3d(back, g):.3f}")
