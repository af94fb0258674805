"""Voxelization, the multi-scale feature encoder, and voxel interpretation.

A point cloud is binned into a regular grid; occupied cells carry cheap
raw statistics.  A small learned encoder turns those statistics into a
pyramid of sparse feature maps at voxel sizes 1x, 2x, 4x, 8x the base
cell, merging each cell's occupied children by channelwise max, the way
an octree coarsens.  Each occupied cell can then be read back as a point
at its cell center with the cell's feature attached, which is the form
the pooling stage consumes.

Grid keys are (d, h, w) integer triples indexing (Z, Y, X); positions
are (x, y, z) in meters.  The two orders meet only here, so every
conversion in the library funnels through this module.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .geometry import Roi, contains, to_canonical
from .tensor import LinearLayer, Tensor, group_max, relu

__all__ = [
    "DEFAULT_CHANNELS",
    "GridSpec",
    "Voxelization",
    "SparseFeatureMap",
    "InterpretedPoints",
    "AuxTargets",
    "EncoderParams",
    "voxelize",
    "encode_multiscale",
    "interpret",
    "key_positions",
    "pyramid_keys",
    "make_aux_targets",
]

# Feature widths of the four pyramid levels, finest first.
DEFAULT_CHANNELS = (16, 32, 64, 64)

# Raw per-voxel statistics: mean offset from cell center (3) + occupancy (1).
RAW_STAT_CHANNELS = 4

# Points per voxel at which the occupancy statistic saturates.
_COUNT_SATURATION = 16.0

NUM_SCALES = 4


@dataclass
class GridSpec:
    """Axis-aligned grid over a sensor-frame range with a base cell size.

    The extent must divide evenly into base cells, and the base cell
    counts must divide by 2^(scales-1) so every coarser level also
    tiles the range exactly.
    """

    range_min: np.ndarray
    range_max: np.ndarray
    voxel_size: np.ndarray

    def __post_init__(self):
        self.range_min = np.asarray(self.range_min, dtype=np.float64).reshape(3)
        self.range_max = np.asarray(self.range_max, dtype=np.float64).reshape(3)
        self.voxel_size = np.asarray(self.voxel_size, dtype=np.float64).reshape(3)
        if not (self.range_max > self.range_min).all():
            raise ConfigError("grid range_max must exceed range_min componentwise")
        if not (self.voxel_size > 0.0).all():
            raise ConfigError("voxel sizes must be strictly positive")
        extent = self.range_max - self.range_min
        dims = extent / self.voxel_size
        rounded = np.rint(dims)
        if not np.allclose(dims, rounded, atol=1e-9):
            raise ConfigError(f"grid extent {extent} is not an integer number of voxels {self.voxel_size}")
        divisor = 2 ** (NUM_SCALES - 1)
        if not (rounded % divisor == 0).all():
            raise ConfigError(f"base grid dims {rounded.astype(int)} must divide by {divisor} for {NUM_SCALES} scales")
        self._dims = rounded.astype(np.intp)

    @property
    def dims(self) -> np.ndarray:
        """Cell counts (nx, ny, nz) at the base scale."""
        return self._dims

    def voxel_size_at(self, scale_index: int) -> np.ndarray:
        self._check_scale(scale_index)
        return self.voxel_size * (2.0 ** (scale_index - 1))

    def dims_at(self, scale_index: int) -> np.ndarray:
        self._check_scale(scale_index)
        return self._dims // (2 ** (scale_index - 1))

    @staticmethod
    def _check_scale(scale_index: int) -> None:
        if not 1 <= scale_index <= NUM_SCALES:
            raise ContractError(f"scale index {scale_index} outside 1..{NUM_SCALES}")


@dataclass
class Voxelization:
    """Occupied base-scale cells with raw statistics, keys sorted lexicographically."""

    keys: np.ndarray  # [N, 3] intp, (d, h, w)
    stats: np.ndarray  # [N, 4] float64
    num_points: int


@dataclass
class SparseFeatureMap:
    """Occupied cells of one pyramid level with learned features.

    `keys` holds (d, h, w) grid coordinates at this level's resolution;
    row j of `features` belongs to row j of `keys`.
    """

    scale_index: int
    voxel_size: np.ndarray  # [3] meters
    keys: np.ndarray  # [N, 3] intp, (d, h, w)
    features: Tensor  # [N, C]

    def __len__(self) -> int:
        return self.keys.shape[0]

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    def key_set(self) -> set:
        return {tuple(k) for k in self.keys}


@dataclass
class InterpretedPoints:
    """A feature map read back as sensor-frame points at cell centers."""

    positions: np.ndarray  # [N, 3] meters, (x, y, z)
    features: Tensor  # [N, C]
    scale_index: int

    def __len__(self) -> int:
        return self.positions.shape[0]


@dataclass
class AuxTargets:
    """Per-point supervision extracted from ground-truth boxes.

    Offsets and part coordinates are meaningful only where `foreground`
    is set; background rows hold zeros.
    """

    foreground: np.ndarray  # [N] bool
    offsets: np.ndarray  # [N, 3] meters, gt center minus point
    parts: np.ndarray  # [N, 3] in [0, 1], position within the box
    fg_count: int


def _in_range_mask(points: np.ndarray, spec: GridSpec) -> np.ndarray:
    return ((points >= spec.range_min) & (points < spec.range_max)).all(axis=1)


def voxelize(points, spec: GridSpec) -> Voxelization:
    """Bin a cloud into base cells and compute per-cell raw statistics.

    Points outside the range are dropped.  Each occupied cell yields a
    4-vector: mean offset of its points from the cell center, and the
    point count scaled by 1/16 and clamped at 1.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    pts = pts[_in_range_mask(pts, spec)]
    if pts.shape[0] == 0:
        return Voxelization(np.zeros((0, 3), dtype=np.intp), np.zeros((0, RAW_STAT_CHANNELS)), 0)

    cell_xyz = np.floor((pts - spec.range_min) / spec.voxel_size).astype(np.intp)
    # Float guard: a point numerically at the upper face would index one past the end.
    cell_xyz = np.minimum(cell_xyz, spec.dims - 1)
    keys = cell_xyz[:, ::-1]  # (x,y,z) indices -> (d,h,w)

    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    n = uniq.shape[0]
    counts = np.bincount(inverse, minlength=n).astype(np.float64)
    sums = np.zeros((n, 3))
    np.add.at(sums, inverse, pts)
    centers = (uniq[:, ::-1] + 0.5) * spec.voxel_size + spec.range_min
    mean_offset = sums / counts[:, None] - centers
    occ = np.minimum(counts / _COUNT_SATURATION, 1.0)
    stats = np.concatenate([mean_offset, occ[:, None]], axis=1)
    return Voxelization(uniq, stats, int(pts.shape[0]))


class EncoderParams:
    """Learned weights of the pyramid encoder: a stem plus one merge per level step."""

    def __init__(self, rng: np.random.Generator, channels=DEFAULT_CHANNELS):
        if len(channels) != NUM_SCALES:
            raise ConfigError(f"encoder needs {NUM_SCALES} channel counts, got {channels}")
        self.channels = tuple(int(c) for c in channels)
        self.stem = LinearLayer(RAW_STAT_CHANNELS, self.channels[0], rng)
        self.merges = [
            LinearLayer(self.channels[i], self.channels[i + 1], rng) for i in range(NUM_SCALES - 1)
        ]

    def named_parameters(self, prefix: str = "encoder."):
        yield from self.stem.named_parameters(prefix + "stem.")
        for i, layer in enumerate(self.merges):
            yield from layer.named_parameters(f"{prefix}merge{i}.")


def _group_children(keys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Group cell keys by their parent cell one level up.

    Returns the sorted unique parent keys [S, 3] and a padded child-row
    index [S, K] (-1 past the end of short groups), K <= 8 because a
    parent covers a 2x2x2 block of children.
    """
    parents = keys // 2
    uniq, inverse = np.unique(parents, axis=0, return_inverse=True)
    order = np.argsort(inverse, kind="stable")
    sorted_groups = inverse[order]
    counts = np.bincount(inverse, minlength=uniq.shape[0])
    k = int(counts.max())
    index = np.full((uniq.shape[0], k), -1, dtype=np.intp)
    slot = np.arange(keys.shape[0]) - np.concatenate([[0], np.cumsum(counts)[:-1]])[sorted_groups]
    index[sorted_groups, slot] = order
    return uniq, index


def encode_multiscale(vox: Voxelization, params: EncoderParams, spec: GridSpec) -> list[SparseFeatureMap]:
    """Run the encoder over an occupancy and return the 4-level pyramid.

    Level 1 is a linear+ReLU embedding of the raw statistics; each
    coarser level takes the channelwise max over the occupied children
    of each parent cell, then a linear+ReLU of its own.  The whole chain
    is recorded for backpropagation.
    """
    maps: list[SparseFeatureMap] = []
    feats = relu(params.stem(Tensor(vox.stats)))
    keys = vox.keys
    maps.append(SparseFeatureMap(1, spec.voxel_size_at(1), keys, feats))
    for i, merge in enumerate(params.merges):
        scale = i + 2
        if keys.shape[0] == 0:
            keys = np.zeros((0, 3), dtype=np.intp)
            feats = Tensor(np.zeros((0, params.channels[scale - 1])))
        else:
            keys, child_index = _group_children(keys)
            feats = relu(merge(group_max(feats, child_index)))
        maps.append(SparseFeatureMap(scale, spec.voxel_size_at(scale), keys, feats))
    return maps


def key_positions(keys: np.ndarray, spec: GridSpec, scale_index: int) -> np.ndarray:
    """Cell-center positions [N, 3] for (d, h, w) keys at a pyramid level.

    A key maps to ((w,h,d) + 0.5) * V plus the range origin,
    component-wise in (x, y, z), with V the level's cell size.
    """
    voxel = spec.voxel_size_at(scale_index)
    xyz_idx = keys[:, ::-1].astype(np.float64)  # (d,h,w) -> (x,y,z) index order
    return (xyz_idx + 0.5) * voxel + spec.range_min


def interpret(fmap: SparseFeatureMap, spec: GridSpec) -> InterpretedPoints:
    """Read a feature map as points: each cell becomes its center position."""
    positions = key_positions(fmap.keys, spec, fmap.scale_index)
    return InterpretedPoints(positions, fmap.features, fmap.scale_index)


def pyramid_keys(base_keys: np.ndarray) -> list[np.ndarray]:
    """Occupied-cell keys of every pyramid level, derived from the base level.

    Independent of any learned parameter, so callers can cache the
    result (and anything built from it) across training steps.
    """
    out = [np.asarray(base_keys, dtype=np.intp).reshape(-1, 3)]
    for _ in range(NUM_SCALES - 1):
        if out[-1].shape[0] == 0:
            out.append(np.zeros((0, 3), dtype=np.intp))
        else:
            parents, _ = _group_children(out[-1])
            out.append(parents)
    return out


def make_aux_targets(positions: np.ndarray, gt_boxes: list[Roi]) -> AuxTargets:
    """Label interpreted points against ground-truth boxes.

    A point is foreground if it falls inside any box (boundary
    inclusive, no enlargement); with several containing boxes the one
    with the nearest center wins.  Foreground rows get the vector to the
    box center and the point's position within the box scaled to
    [0, 1] per axis.
    """
    pts = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    n = pts.shape[0]
    fg = np.zeros(n, dtype=bool)
    offsets = np.zeros((n, 3))
    parts = np.zeros((n, 3))
    if gt_boxes:
        inside = np.stack([contains(pts, box) for box in gt_boxes], axis=1)  # [N, B]
        centers = np.stack([box.center for box in gt_boxes])  # [B, 3]
        dist2 = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)  # [N, B]
        dist2 = np.where(inside, dist2, np.inf)
        owner = np.argmin(dist2, axis=1)
        fg = inside.any(axis=1)
        for b, box in enumerate(gt_boxes):
            sel = fg & (owner == b)
            if not sel.any():
                continue
            offsets[sel] = box.center - pts[sel]
            canon = to_canonical(pts[sel], box)
            parts[sel] = np.clip(canon / box.size + 0.5, 0.0, 1.0)
    return AuxTargets(fg, offsets, parts, int(fg.sum()))
