"""Detection heads, regression targets, and the training objective.

The confidence head is supervised with an overlap-derived soft target:
raw box overlap with the best-matching ground truth is ramped into
[0, 1] between a background and a foreground threshold.  The box head
regresses a 7-component normalized residue (translation scaled by box
extent, sizes as log-ratios, wrapped yaw difference) and is trained only
on candidates whose raw overlap clears a regression threshold.

Auxiliary per-point heads on the two coarsest pyramid levels predict
foreground membership, the offset to the owning box center, and the
point's normalized position inside the box; their loss feeds gradients
directly into the voxel encoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .geometry import Roi, pairwise_iou, wrap_angle
from .tensor import (
    LinearLayer,
    Tensor,
    add,
    clamp,
    concat,
    gather_rows,
    huber,
    log,
    mul,
    pow_const,
    relu,
    sigmoid,
    slice_cols,
    sub,
    tmean,
    tsum,
)

__all__ = [
    "RefineConfig",
    "normalized_iou",
    "encode_residue",
    "decode_residue",
    "focal_loss_sum",
    "smooth_l1",
    "bce",
    "RefineTargets",
    "make_refine_targets",
    "refine_loss",
    "aux_loss",
    "total_loss",
    "DetectionHeads",
    "AuxHeads",
]

_EPS = 1e-7


@dataclass
class RefineConfig:
    """Thresholds and loss constants of the refinement objective.

    `residue_diag` picks the normalizer of the horizontal translation
    residues: "size" uses the box-base diagonal sqrt(dx^2+dy^2) (the
    default), "center" the literal center-coordinate radius
    sqrt(x^2+y^2).  `reg_gate` picks whether the regression indicator
    compares the raw overlap ("raw_iou", default) or the ramped
    confidence target ("normalized") against chi_reg.
    """

    chi_h: float = 0.75
    chi_l: float = 0.25
    chi_reg: float = 0.55
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    huber_delta: float = 1.0
    residue_diag: str = "size"
    reg_gate: str = "raw_iou"

    def __post_init__(self):
        if not (0.0 <= self.chi_l < self.chi_reg <= self.chi_h <= 1.0):
            raise ConfigError(
                f"thresholds must satisfy 0 <= chi_l < chi_reg <= chi_h <= 1, "
                f"got ({self.chi_l}, {self.chi_reg}, {self.chi_h})"
            )
        if self.huber_delta <= 0.0:
            raise ConfigError(f"huber delta must be positive, got {self.huber_delta}")
        if self.residue_diag not in ("size", "center"):
            raise ConfigError(f"loss.residue_diag must be 'size' or 'center', got {self.residue_diag!r}")
        if self.reg_gate not in ("raw_iou", "normalized"):
            raise ConfigError(f"loss.reg_gate must be 'raw_iou' or 'normalized', got {self.reg_gate!r}")


def normalized_iou(iou, cfg: RefineConfig):
    """Ramp raw overlap into a [0, 1] confidence target.

    1 above the foreground threshold, 0 below the background threshold,
    linear in between.  Accepts scalars or arrays.
    """
    x = np.asarray(iou, dtype=np.float64)
    ramp = (x - cfg.chi_l) / (cfg.chi_h - cfg.chi_l)
    out = np.clip(ramp, 0.0, 1.0)
    return float(out) if np.isscalar(iou) or x.ndim == 0 else out


def _diag_normalizer(roi: Roi, cfg: RefineConfig) -> float:
    if cfg.residue_diag == "size":
        d = float(np.hypot(roi.size[0], roi.size[1]))
    else:
        d = float(np.hypot(roi.center[0], roi.center[1]))
    if d <= 0.0:
        raise ContractError("degenerate horizontal normalizer for residue encoding")
    return d


def encode_residue(roi: Roi, gt: Roi, cfg: RefineConfig | None = None) -> np.ndarray:
    """7-vector normalized offset from a candidate box to its ground truth.

    Horizontal translation is scaled by the base diagonal, vertical by
    the candidate height; sizes are log-ratios; the yaw difference is
    wrapped to (-pi, pi].
    """
    cfg = cfg or RefineConfig()
    if not (gt.size > 0.0).all():
        raise ContractError(f"ground-truth sizes must be positive, got {gt.size}")
    d = _diag_normalizer(roi, cfg)
    out = np.empty(7)
    out[0] = (gt.center[0] - roi.center[0]) / d
    out[1] = (gt.center[1] - roi.center[1]) / d
    out[2] = (gt.center[2] - roi.center[2]) / roi.size[2]
    out[3:6] = np.log(gt.size / roi.size)
    out[6] = wrap_angle(gt.yaw - roi.yaw)
    return out


def decode_residue(roi: Roi, delta, cfg: RefineConfig | None = None) -> Roi:
    """Apply a predicted residue to a candidate box; inverse of `encode_residue`."""
    cfg = cfg or RefineConfig()
    delta = np.asarray(delta, dtype=np.float64).reshape(7)
    d = _diag_normalizer(roi, cfg)
    center = roi.center + np.array([delta[0] * d, delta[1] * d, delta[2] * roi.size[2]])
    size = roi.size * np.exp(delta[3:6])
    yaw = wrap_angle(roi.yaw + delta[6])
    return Roi(center, size, yaw, cls=roi.cls, confidence=roi.confidence)


# ---------------------------------------------------------------------------
# loss primitives


def focal_loss_sum(pred: Tensor, target, alpha: float, gamma: float) -> Tensor:
    """Sum over elements of the soft-target focal loss.

    Targets in [0, 1] weight the positive-class term; (1 - target) the
    negative one.  Predictions are clamped away from {0, 1}.
    """
    t = np.asarray(target, dtype=np.float64)
    if t.shape != tuple(pred.shape):
        raise ContractError(f"focal target shape {t.shape} != prediction shape {pred.shape}")
    p = clamp(pred, _EPS, 1.0 - _EPS)
    one_minus = sub(1.0, p)
    pos = mul(pow_const(one_minus, gamma), log(p))  # (1-p)^g log p, negative
    neg = mul(pow_const(p, gamma), log(one_minus))  # p^g log(1-p), negative
    elem = sub(0.0, add(mul(t * alpha, pos), mul((1.0 - t) * (1.0 - alpha), neg)))
    return tsum(elem)


def smooth_l1(pred: Tensor, target, delta: float = 1.0) -> Tensor:
    """Mean over elements of the quadratic-near-zero absolute-error loss."""
    t = np.asarray(target, dtype=np.float64)
    if t.shape != tuple(pred.shape):
        raise ContractError(f"smooth_l1 target shape {t.shape} != prediction shape {pred.shape}")
    return tmean(huber(sub(pred, t), delta))


def bce(pred: Tensor, target) -> Tensor:
    """Mean binary cross entropy with the same clamping as the focal loss."""
    t = np.asarray(target, dtype=np.float64)
    if t.shape != tuple(pred.shape):
        raise ContractError(f"bce target shape {t.shape} != prediction shape {pred.shape}")
    p = clamp(pred, _EPS, 1.0 - _EPS)
    elem = sub(0.0, add(mul(t, log(p)), mul(1.0 - t, log(sub(1.0, p)))))
    return tmean(elem)


# ---------------------------------------------------------------------------
# refinement targets and loss


@dataclass
class RefineTargets:
    """Per-candidate supervision derived from ground truth.

    `matched_gt` is -1 where no ground truth exists; `residues` rows are
    meaningful only where `reg_mask` is set.
    """

    raw_iou: np.ndarray  # [M]
    conf_target: np.ndarray  # [M] in [0, 1]
    reg_mask: np.ndarray  # [M] bool
    residues: np.ndarray  # [M, 7]
    matched_gt: np.ndarray  # [M] int


def make_refine_targets(rois: list[Roi], gts: list[Roi], cfg: RefineConfig) -> RefineTargets:
    """Match each candidate to its highest-overlap ground truth and build targets.

    Ties go to the lower ground-truth index.  With no ground truth at
    all, every candidate gets confidence target 0 and no regression.
    """
    m = len(rois)
    raw = np.zeros(m)
    matched = np.full(m, -1, dtype=np.intp)
    residues = np.zeros((m, 7))
    if gts:
        iou = pairwise_iou(rois, gts)  # [M, G]
        matched = np.argmax(iou, axis=1)
        raw = iou[np.arange(m), matched]
    conf = normalized_iou(raw, cfg) if m else np.zeros(0)
    gate_value = raw if cfg.reg_gate == "raw_iou" else conf
    reg_mask = gate_value >= cfg.chi_reg if m else np.zeros(0, dtype=bool)
    for r in range(m):
        if reg_mask[r]:
            residues[r] = encode_residue(rois[r], gts[matched[r]], cfg)
    return RefineTargets(raw, np.asarray(conf).reshape(m), reg_mask, residues, matched)


def refine_loss(
    confidences: Tensor, residues: Tensor, targets: RefineTargets, cfg: RefineConfig
) -> Tensor:
    """Mean per-candidate objective: confidence focal term plus gated box term.

    `confidences` is [M, 1] post-sigmoid, `residues` [M, 7].  The box
    term for a candidate is the mean over its 7 residue components and
    enters only where the regression gate is open.
    """
    m = confidences.shape[0]
    if m == 0:
        raise ContractError("refine_loss on an empty candidate batch")
    if residues.shape != (m, 7):
        raise ContractError(f"residues must be [{m}, 7], got {residues.shape}")
    cls_term = focal_loss_sum(
        confidences, targets.conf_target.reshape(m, 1), cfg.focal_alpha, cfg.focal_gamma
    )
    total = cls_term
    gated = np.flatnonzero(targets.reg_mask)
    if gated.size:
        pred = gather_rows(residues, gated)  # [K, 7]
        diff = sub(pred, targets.residues[gated])
        per_roi = tmean(huber(diff, cfg.huber_delta), axis=1)  # [K]
        total = add(total, tsum(per_roi))
    return mul(total, 1.0 / m)


# ---------------------------------------------------------------------------
# auxiliary supervision


def aux_loss(preds: Tensor, targets_fg, targets_offsets, targets_parts, cfg: RefineConfig) -> Tensor:
    """Per-point auxiliary objective over interpreted coarse-level points.

    `preds` is [N, 7]: foreground probability (post-sigmoid), 3 offset
    components, 3 part probabilities (post-sigmoid).  The foreground
    focal term runs over all points; offset and part terms over
    foreground points only.  Both sums are divided by the foreground
    count; zero foreground yields a zero loss.
    """
    fg = np.asarray(targets_fg, dtype=bool)
    n = fg.shape[0]
    if preds.shape != (n, 7):
        raise ContractError(f"aux predictions must be [{n}, 7], got {preds.shape}")
    p_plus = int(fg.sum())
    if p_plus == 0:
        return Tensor(0.0)
    fg_prob = slice_cols(preds, 0, 1)  # [N, 1]
    cls_term = focal_loss_sum(fg_prob, fg.astype(np.float64).reshape(n, 1), cfg.focal_alpha, cfg.focal_gamma)
    rows = np.flatnonzero(fg)
    offs = gather_rows(slice_cols(preds, 1, 4), rows)  # [P+, 3]
    parts = gather_rows(slice_cols(preds, 4, 7), rows)  # [P+, 3]
    off_term = tsum(tmean(huber(sub(offs, np.asarray(targets_offsets)[rows]), cfg.huber_delta), axis=1))
    part_t = np.asarray(targets_parts)[rows]
    pp = clamp(parts, _EPS, 1.0 - _EPS)
    bce_elem = sub(0.0, add(mul(part_t, log(pp)), mul(1.0 - part_t, log(sub(1.0, pp)))))
    part_term = tsum(tmean(bce_elem, axis=1))
    reg = add(off_term, part_term)
    return mul(add(cls_term, reg), 1.0 / p_plus)


def total_loss(refine: Tensor, aux: Tensor | None) -> Tensor:
    """Sum of the enabled objective terms."""
    if aux is None:
        return refine
    return add(refine, aux)


# ---------------------------------------------------------------------------
# head networks


class DetectionHeads:
    """Two-hidden-layer trunk with a confidence branch and a box branch."""

    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator):
        self.fc1 = LinearLayer(d_in, hidden, rng)
        self.fc2 = LinearLayer(hidden, hidden, rng)
        self.conf_head = LinearLayer(hidden, 1, rng)
        self.box_head = LinearLayer(hidden, 7, rng)

    def __call__(self, features: Tensor) -> tuple[Tensor, Tensor]:
        """(confidences [M, 1] in (0, 1), residues [M, 7]) for [M, d_in] features."""
        h = relu(self.fc2(relu(self.fc1(features))))
        return sigmoid(self.conf_head(h)), self.box_head(h)

    def named_parameters(self, prefix: str = "heads."):
        yield from self.fc1.named_parameters(prefix + "fc1.")
        yield from self.fc2.named_parameters(prefix + "fc2.")
        yield from self.conf_head.named_parameters(prefix + "conf.")
        yield from self.box_head.named_parameters(prefix + "box.")


class AuxHeads:
    """Per-point three-layer heads on the two coarsest pyramid levels.

    Each head maps a point feature to 7 values: foreground probability,
    center offset, and the three part probabilities.
    """

    def __init__(self, channels_by_scale: dict[int, int], hidden: int, rng: np.random.Generator):
        self.scales = sorted(channels_by_scale)
        self.layers: dict[int, tuple[LinearLayer, LinearLayer, LinearLayer]] = {}
        for scale in self.scales:
            c = channels_by_scale[scale]
            self.layers[scale] = (
                LinearLayer(c, hidden, rng),
                LinearLayer(hidden, hidden, rng),
                LinearLayer(hidden, 7, rng),
            )

    def __call__(self, scale: int, features: Tensor) -> Tensor:
        """[N, 7] predictions with probabilities already squashed."""
        l1, l2, l3 = self.layers[scale]
        raw = l3(relu(l2(relu(l1(features)))))  # [N, 7]
        fg = sigmoid(slice_cols(raw, 0, 1))
        offs = slice_cols(raw, 1, 4)
        parts = sigmoid(slice_cols(raw, 4, 7))
        return concat([fg, offs, parts], axis=1)

    def named_parameters(self, prefix: str = "aux."):
        for scale in self.scales:
            l1, l2, l3 = self.layers[scale]
            yield from l1.named_parameters(f"{prefix}s{scale}.fc1.")
            yield from l2.named_parameters(f"{prefix}s{scale}.fc2.")
            yield from l3.named_parameters(f"{prefix}s{scale}.out.")
