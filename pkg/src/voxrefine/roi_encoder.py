"""ROI feature computation: pooling, position encoding, and attention.

Each candidate box repeatedly queries the voxel pyramid: occupied cells
near the (slightly enlarged) box are pooled as canonical-frame points,
a learned position code is added, and an attention step folds them into
the box's running feature vector.  Two attention kernels are available:

  - "vector": one weight per pooled point *per channel* — the weight of
    point j is a whole vector, produced by an MLP on (query - key +
    position code) and normalized across points independently in every
    channel;
  - "multihead": conventional scaled dot-product attention with one
    scalar weight per point per head, kept as an ablation switch.

All geometric inputs to the attention step are canonical-frame
quantities, so the resulting ROI features are invariant under rigid
motions applied jointly to the scene and the boxes.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .geometry import Roi, canonical_vertices, contains, to_canonical
from .tensor import (
    LinearLayer,
    Mlp,
    NormLayer,
    Tensor,
    add,
    concat,
    gather_rows,
    matmul,
    mul,
    slice_cols,
    slice_rows,
    softmax,
    sub,
    transpose,
    tsum,
)
from .voxels import InterpretedPoints

__all__ = [
    "RfeConfig",
    "PooledSet",
    "BlockParams",
    "RfeParams",
    "AllocationMeter",
    "track_attention_allocation",
    "candidate_indices",
    "pool",
    "augmented_coords",
    "center_augmented",
    "position_encoding",
    "vector_attention",
    "multihead_attention",
    "rfe_block",
    "compute_roi_features",
]

AUGMENTED_DIM = 27  # canonical position plus displacement from each of 8 corners


@dataclass
class RfeConfig:
    """Architecture and pooling knobs for the ROI feature encoder."""

    d_a: int = 128
    hidden: int = 256
    repeats: int = 3
    scale_order: tuple = (4, 3, 1)
    budgets: tuple = (64, 128, 256)
    enlargement: float = 0.5
    attention: str = "vector"
    norm: str = "layer"
    heads: int = 4

    def __post_init__(self):
        self.scale_order = tuple(int(s) for s in self.scale_order)
        self.budgets = tuple(int(b) for b in self.budgets)
        if self.d_a < 1:
            raise ConfigError(f"rfe.d_a must be >= 1, got {self.d_a}")
        if self.repeats < 1:
            raise ConfigError(f"rfe.repeats must be >= 1, got {self.repeats}")
        if len(self.scale_order) != len(self.budgets):
            raise ConfigError("rfe.scale_order and rfe.budgets must have equal length")
        if any(not 1 <= s <= 4 for s in self.scale_order):
            raise ConfigError(f"rfe.scale_order entries must be in 1..4, got {self.scale_order}")
        if any(b < 1 for b in self.budgets):
            raise ConfigError(f"rfe.budgets must be positive, got {self.budgets}")
        if self.enlargement < 0.0:
            raise ConfigError(f"rfe.enlargement must be non-negative, got {self.enlargement}")
        if self.attention not in ("vector", "multihead"):
            raise ConfigError(f"rfe.attention must be 'vector' or 'multihead', got {self.attention!r}")
        if self.norm not in ("layer", "batch"):
            raise ConfigError(f"rfe.norm must be 'layer' or 'batch', got {self.norm!r}")
        if self.attention == "multihead" and self.d_a % self.heads != 0:
            raise ConfigError(f"rfe.d_a={self.d_a} not divisible by rfe.heads={self.heads}")

    def budget_for(self, scale_index: int) -> int:
        return self.budgets[self.scale_order.index(scale_index)]


@dataclass
class PooledSet:
    """Points pooled for one ROI from one pyramid level, in canonical frame."""

    roi_index: int
    scale_index: int
    positions: np.ndarray  # [N_r, 3] canonical meters
    features: Tensor  # [N_r, C]

    def __len__(self) -> int:
        return self.positions.shape[0]


class BlockParams:
    """Learned weights of one attention block (one repeat, one scale)."""

    def __init__(self, in_channels: int, cfg: RfeConfig, rng: np.random.Generator):
        d, h = cfg.d_a, cfg.hidden
        self.feat_proj = LinearLayer(in_channels, d, rng)
        self.query_proj = LinearLayer(d, d, rng)
        self.key_proj = LinearLayer(d, d, rng)
        self.value_proj = LinearLayer(d, d, rng)
        self.weight_mlp = Mlp([d, h, d], rng)
        self.pos_mlp = Mlp([AUGMENTED_DIM, h, d], rng)
        self.mlp = Mlp([d, h, d], rng)
        self.norm1 = NormLayer(d, kind=cfg.norm)
        self.norm2 = NormLayer(d, kind=cfg.norm)

    def named_parameters(self, prefix: str = ""):
        yield from self.feat_proj.named_parameters(prefix + "feat_proj.")
        yield from self.query_proj.named_parameters(prefix + "query_proj.")
        yield from self.key_proj.named_parameters(prefix + "key_proj.")
        yield from self.value_proj.named_parameters(prefix + "value_proj.")
        yield from self.weight_mlp.named_parameters(prefix + "weight_mlp.")
        yield from self.pos_mlp.named_parameters(prefix + "pos_mlp.")
        yield from self.mlp.named_parameters(prefix + "mlp.")
        yield from self.norm1.named_parameters(prefix + "norm1.")
        yield from self.norm2.named_parameters(prefix + "norm2.")

    def named_buffers(self, prefix: str = ""):
        yield from self.norm1.named_buffers(prefix + "norm1.")
        yield from self.norm2.named_buffers(prefix + "norm2.")


class RfeParams:
    """All encoder weights: a shared initial ROI feature plus one block per (repeat, scale)."""

    def __init__(self, cfg: RfeConfig, channels_by_scale: dict[int, int], rng: np.random.Generator):
        self.cfg = cfg
        self.init_feature = Tensor(
            rng.uniform(-1.0, 1.0, size=(1, cfg.d_a)) / np.sqrt(cfg.d_a), requires_grad=True
        )
        self.blocks: dict[tuple[int, int], BlockParams] = {}
        for n in range(cfg.repeats):
            for scale in cfg.scale_order:
                if scale not in channels_by_scale:
                    raise ConfigError(f"no channel count known for scale {scale}")
                self.blocks[(n, scale)] = BlockParams(channels_by_scale[scale], cfg, rng)

    def block(self, repeat: int, scale: int) -> BlockParams:
        return self.blocks[(repeat, scale)]

    def named_parameters(self, prefix: str = "rfe."):
        yield prefix + "init_feature", self.init_feature
        for (n, scale), block in sorted(self.blocks.items()):
            yield from block.named_parameters(f"{prefix}r{n}.s{scale}.")

    def named_buffers(self, prefix: str = "rfe."):
        for (n, scale), block in sorted(self.blocks.items()):
            yield from block.named_buffers(f"{prefix}r{n}.s{scale}.")


# ---------------------------------------------------------------------------
# attention-weight accounting (for the memory-scaling benchmark)


class AllocationMeter:
    """Counts elements of normalized attention-weight arrays as they are made."""

    def __init__(self):
        self.weight_elements = 0

    def add(self, n: int) -> None:
        self.weight_elements += int(n)


_METER: AllocationMeter | None = None


@contextmanager
def track_attention_allocation():
    """Within the context, every attention call reports its weight-array size."""
    global _METER
    meter = AllocationMeter()
    prev = _METER
    _METER = meter
    try:
        yield meter
    finally:
        _METER = prev


def _record_weights(w: Tensor) -> None:
    if _METER is not None:
        _METER.add(w.size)


# ---------------------------------------------------------------------------
# pooling


def candidate_indices(positions: np.ndarray, roi: Roi, enlargement: float) -> np.ndarray:
    """Row indices of `positions` inside the enlarged box, ascending."""
    mask = contains(positions, roi, enlargement)
    return np.flatnonzero(mask)


def subsample(indices: np.ndarray, budget: int, seed) -> np.ndarray:
    """At most `budget` of `indices`, uniform without replacement, ascending order."""
    if budget < 1:
        raise ContractError(f"pooling budget must be positive, got {budget}")
    if indices.size <= budget:
        return indices
    rng = np.random.default_rng(seed)
    pick = rng.choice(indices.size, size=budget, replace=False)
    return indices[np.sort(pick)]


def pool(
    points: InterpretedPoints,
    roi: Roi,
    enlargement: float,
    budget: int,
    seed,
    roi_index: int = 0,
    candidates: np.ndarray | None = None,
) -> PooledSet:
    """Gather interpreted points near a box as a canonical-frame set.

    Points failing the enlarged membership test are discarded; if more
    than `budget` remain, a seeded uniform subsample without replacement
    is taken.  An empty result is valid.
    """
    if candidates is None:
        candidates = candidate_indices(points.positions, roi, enlargement)
    idx = subsample(candidates, budget, seed)
    canon = to_canonical(points.positions[idx], roi) if idx.size else np.zeros((0, 3))
    feats = gather_rows(points.features, idx)
    return PooledSet(roi_index, points.scale_index, canon, feats)


# ---------------------------------------------------------------------------
# position encoding


def augmented_coords(points: np.ndarray, size) -> np.ndarray:
    """[N, 27] canonical coordinates: the point plus its offset from each corner.

    Layout: entries 0..2 are the point itself; entries 3k..3k+2 for
    k = 1..8 are (point - corner_{k-1}) using the documented corner order.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    verts = canonical_vertices(size)  # [8, 3]
    disp = pts[:, None, :] - verts[None, :, :]  # [N, 8, 3]
    return np.concatenate([pts, disp.reshape(-1, 24)], axis=1)


def center_augmented(size) -> np.ndarray:
    """[27] augmented coordinates of the box center (the canonical origin)."""
    return augmented_coords(np.zeros((1, 3)), size)[0]


def position_encoding(pooled: PooledSet, roi: Roi, block: BlockParams) -> Tensor:
    """Learned per-point position code from center-relative augmented coordinates.

    The raw input is (augmented center - augmented point); geometrically
    this collapses to the negated canonical position repeated nine
    times, but it is built from both augmented vectors on purpose so the
    construction and its algebra stay visible to the tests.
    """
    diff = center_augmented(roi.size)[None, :] - augmented_coords(pooled.positions, roi.size)
    return block.pos_mlp(Tensor(diff))


# ---------------------------------------------------------------------------
# attention kernels


def vector_attention(
    roi_feature: Tensor, feats: Tensor, zeta: Tensor, block: BlockParams
) -> tuple[Tensor, Tensor]:
    """Per-channel attention of one ROI feature over its pooled points.

    `feats` must already be projected to the attention width.  Returns
    the updated [1, d_a] feature and the [N, d_a] normalized weights
    (each channel's column sums to one).
    """
    n = feats.shape[0]
    if n == 0:
        raise ContractError("vector_attention on an empty pooled set")
    q = block.query_proj(roi_feature)  # [1, d_a]
    k = block.key_proj(feats)  # [N, d_a]
    v = block.value_proj(feats)  # [N, d_a]
    logits = block.weight_mlp(add(sub(q, k), zeta))  # [N, d_a]
    weights = softmax(logits, axis=0)  # normalized over points, per channel
    _record_weights(weights)
    out = tsum(mul(weights, add(v, zeta)), axis=0, keepdims=True)  # [1, d_a]
    return out, weights


def multihead_attention(
    roi_feature: Tensor, feats: Tensor, zeta: Tensor, block: BlockParams, heads: int
) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention with one scalar weight per point per head.

    The position code is added to keys and values, mirroring the vector
    kernel's use of it.  Returns the [1, d_a] feature and the [N, heads]
    weights.
    """
    n = feats.shape[0]
    if n == 0:
        raise ContractError("multihead_attention on an empty pooled set")
    d_a = roi_feature.shape[1]
    if d_a % heads != 0:
        raise ConfigError(f"feature width {d_a} not divisible by {heads} heads")
    d_h = d_a // heads
    q = block.query_proj(roi_feature)  # [1, d_a]
    k = add(block.key_proj(feats), zeta)  # [N, d_a]
    v = add(block.value_proj(feats), zeta)  # [N, d_a]
    outs = []
    weight_cols = []
    for h in range(heads):
        lo, hi = h * d_h, (h + 1) * d_h
        qh = slice_cols(q, lo, hi)  # [1, d_h]
        kh = slice_cols(k, lo, hi)  # [N, d_h]
        vh = slice_cols(v, lo, hi)  # [N, d_h]
        logits = mul(matmul(kh, transpose(qh)), 1.0 / np.sqrt(d_h))  # [N, 1]
        w = softmax(logits, axis=0)  # [N, 1]
        weight_cols.append(w)
        outs.append(tsum(mul(w, vh), axis=0, keepdims=True))  # [1, d_h]
    weights = concat(weight_cols, axis=1)  # [N, heads]
    _record_weights(weights)
    return concat(outs, axis=1), weights


def _attend(roi_feature: Tensor, pooled: PooledSet, roi: Roi, block: BlockParams, cfg: RfeConfig) -> Tensor:
    feats = block.feat_proj(pooled.features)  # [N, d_a]
    zeta = position_encoding(pooled, roi, block)  # [N, d_a]
    if cfg.attention == "vector":
        out, _ = vector_attention(roi_feature, feats, zeta, block)
    else:
        out, _ = multihead_attention(roi_feature, feats, zeta, block, cfg.heads)
    return out


def rfe_block(
    roi_feature: Tensor,
    pooled: PooledSet,
    roi: Roi,
    block: BlockParams,
    cfg: RfeConfig,
    training: bool = True,
) -> Tensor:
    """One residual update of an ROI feature from one pooled set.

    Empty pooled sets leave the feature untouched; otherwise the
    attention result is added residually and normalized, then an MLP
    residual path runs with its own normalization.
    """
    if len(pooled) == 0:
        return roi_feature
    attended = _attend(roi_feature, pooled, roi, block, cfg)
    x = block.norm1(add(roi_feature, attended), training=training)
    return block.norm2(add(x, block.mlp(x)), training=training)


def compute_roi_features(
    points_by_scale: dict[int, InterpretedPoints],
    rois: list[Roi],
    params: RfeParams,
    seed: int = 0,
    training: bool = True,
    candidates: dict[tuple[int, int], np.ndarray] | None = None,
) -> list[Tensor]:
    """Run the full multi-scale, multi-repeat encoder over a list of boxes.

    Every box starts from the shared learned initial feature.  For each
    repeat and each configured scale (finest-budget last), each box
    pools from that level and runs the (repeat, scale) block.  Boxes
    never interact except through "batch"-kind normalization, which is
    computed over the boxes active at the same (repeat, scale) step.

    `candidates` may carry precomputed membership indices keyed by
    (roi_index, scale); missing entries are computed on the fly.  The
    subsampling RNG for a (roi, scale, repeat) visit is derived from
    `seed` and those three indices only, so results do not depend on
    traversal order.
    """
    cfg = params.cfg
    features: list[Tensor] = [params.init_feature for _ in rois]
    if not rois:
        return features
    for n in range(cfg.repeats):
        for scale in cfg.scale_order:
            block = params.block(n, scale)
            points = points_by_scale[scale]
            budget = cfg.budget_for(scale)
            active: list[int] = []
            updated: list[Tensor] = []
            for ri, roi in enumerate(rois):
                cached = candidates.get((ri, scale)) if candidates is not None else None
                pooled = pool(
                    points,
                    roi,
                    cfg.enlargement,
                    budget,
                    seed=[seed, ri, scale, n],
                    roi_index=ri,
                    candidates=cached,
                )
                if len(pooled) == 0:
                    continue
                attended = _attend(features[ri], pooled, roi, block, cfg)
                active.append(ri)
                updated.append(add(features[ri], attended))
            if not active:
                continue
            stacked = concat(updated, axis=0) if len(updated) > 1 else updated[0]  # [A, d_a]
            x = block.norm1(stacked, training=training)
            x = block.norm2(add(x, block.mlp(x)), training=training)
            for j, ri in enumerate(active):
                features[ri] = slice_rows(x, j, j + 1)
    return features
