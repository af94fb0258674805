"""Oriented-box algebra in the sensor frame.

Boxes live in a right-handed LiDAR frame (origin at the sensor, X
forward, Z up, Y = Z cross X) and carry a yaw about Z.  Each box also
defines a canonical frame: origin at the box center, X along the box
heading.  Pooling, position encoding, and regression targets all operate
in that canonical frame, so the transforms here are the foundation the
rest of the library leans on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError

__all__ = [
    "Roi",
    "wrap_angle",
    "rotation_z",
    "to_canonical",
    "from_canonical",
    "canonical_vertices",
    "box_vertices",
    "contains",
    "iou_3d",
    "iou_bev",
    "pairwise_iou",
    "nms",
]


def wrap_angle(theta):
    """Normalize an angle (or array of angles) to the interval (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(theta, dtype=np.float64), 2.0 * np.pi)


@dataclass(eq=False)
class Roi:
    """An oriented 3-D box candidate with a class id and a confidence score.

    `center` is the box midpoint in the sensor frame, `size` the full
    extents (dx, dy, dz) in meters, `yaw` the heading about +Z.  Sizes
    must be strictly positive; yaw is re-normalized to (-pi, pi] on
    construction.
    """

    center: np.ndarray
    size: np.ndarray
    yaw: float
    cls: int = 0
    confidence: float = 1.0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.size = np.asarray(self.size, dtype=np.float64).reshape(3)
        if not (self.size > 0.0).all():
            raise ContractError(f"box sizes must be strictly positive, got {self.size}")
        self.yaw = float(wrap_angle(self.yaw))
        self.cls = int(self.cls)
        self.confidence = float(self.confidence)

    def as_vector(self) -> np.ndarray:
        """[x, y, z, dx, dy, dz, yaw] as a 7-vector."""
        return np.concatenate([self.center, self.size, [self.yaw]])

    @classmethod
    def from_vector(cls, vec, cls_id: int = 0, confidence: float = 1.0) -> "Roi":
        vec = np.asarray(vec, dtype=np.float64).reshape(7)
        return cls(vec[:3], vec[3:6], vec[6], cls=cls_id, confidence=confidence)

    def volume(self) -> float:
        return float(np.prod(self.size))

    def with_confidence(self, confidence: float) -> "Roi":
        return Roi(self.center.copy(), self.size.copy(), self.yaw, cls=self.cls, confidence=confidence)


def rotation_z(yaw: float) -> np.ndarray:
    """World->canonical rotation matrix for a heading `yaw` about +Z.

    Applied to a column vector it rotates the world axes onto the box
    axes: a point on the heading ray maps onto +X of the box.
    """
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])


def to_canonical(points, roi: Roi) -> np.ndarray:
    """Express sensor-frame point(s) in the box's canonical frame.

    Rigid: translate by -center, then rotate by -yaw about Z.  Accepts a
    single point [3] or a batch [N, 3]; the shape is preserved.
    """
    p = np.asarray(points, dtype=np.float64)
    single = p.ndim == 1
    rot = rotation_z(roi.yaw)
    out = (p.reshape(-1, 3) - roi.center) @ rot.T  # row form of R @ (p - c)
    return out[0] if single else out


def from_canonical(points, roi: Roi) -> np.ndarray:
    """Inverse of `to_canonical`: canonical point(s) back to the sensor frame."""
    p = np.asarray(points, dtype=np.float64)
    single = p.ndim == 1
    rot = rotation_z(roi.yaw)
    out = p.reshape(-1, 3) @ rot + roi.center  # row form of R^T p + c
    return out[0] if single else out


# Sign patterns for the 8 box corners, indexed so the corner id reads as
# a 3-bit number: bit 2 = x sign, bit 1 = y sign, bit 0 = z sign, with
# 0 meaning minus and 1 meaning plus.  Index 0 is (-,-,-), index 7 (+,+,+).
_VERTEX_SIGNS = np.array(
    [[(k >> 2) & 1, (k >> 1) & 1, k & 1] for k in range(8)], dtype=np.float64
) * 2.0 - 1.0  # [8, 3] in {-1, +1}


def canonical_vertices(size) -> np.ndarray:
    """The 8 corners [8, 3] of a box in its own canonical frame."""
    half = np.asarray(size, dtype=np.float64).reshape(3) / 2.0
    return _VERTEX_SIGNS * half


def box_vertices(roi: Roi, frame: str = "canonical") -> np.ndarray:
    """Corners of `roi`, either in its canonical frame or in the sensor frame."""
    verts = canonical_vertices(roi.size)
    if frame == "canonical":
        return verts
    if frame == "lidar":
        return from_canonical(verts, roi)
    raise ContractError(f"unknown frame {frame!r}")


def contains(points, roi: Roi, enlargement=0.0) -> np.ndarray:
    """Boundary-inclusive membership of point(s) in the (enlarged) box.

    `enlargement` adds to each full extent, so a face moves out by half
    the corresponding entry.  Scalar enlargement applies to all three
    axes; negative values are rejected.
    """
    delta = np.broadcast_to(np.asarray(enlargement, dtype=np.float64), (3,))
    if (delta < 0.0).any():
        raise ContractError(f"enlargement must be non-negative, got {delta}")
    p = np.asarray(points, dtype=np.float64)
    single = p.ndim == 1
    canon = to_canonical(p.reshape(-1, 3), roi)
    half = (roi.size + delta) / 2.0
    inside = (np.abs(canon) <= half).all(axis=1)
    return bool(inside[0]) if single else inside


# ---------------------------------------------------------------------------
# rotated overlap


def _bev_corners(roi: Roi) -> np.ndarray:
    """Top-view rectangle corners [4, 2], counter-clockwise."""
    hx, hy = roi.size[0] / 2.0, roi.size[1] / 2.0
    canon = np.array([[hx, hy], [-hx, hy], [-hx, -hy], [hx, -hy]])
    c, s = np.cos(roi.yaw), np.sin(roi.yaw)
    rot_back = np.array([[c, s], [-s, c]])  # row form of the canonical->world rotation
    return canon @ rot_back + roi.center[:2]


def _cross2(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def _clip_polygon(subject: list, a, b) -> list:
    """Keep the part of `subject` on the left of the directed line a->b."""
    out = []
    n = len(subject)
    for i in range(n):
        cur = subject[i]
        prev = subject[i - 1]
        cur_in = _cross2(a, b, cur) >= 0.0
        prev_in = _cross2(a, b, prev) >= 0.0
        if cur_in != prev_in:
            # Segment crosses the clip line; solve for the crossing point.
            dx, dy = b[0] - a[0], b[1] - a[1]
            num = dx * (a[1] - prev[1]) - dy * (a[0] - prev[0])
            den = dx * (cur[1] - prev[1]) - dy * (cur[0] - prev[0])
            t = num / den
            out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
        if cur_in:
            out.append(cur)
    return out


def _polygon_area(poly: list) -> float:
    """Shoelace area of a simple polygon given counter-clockwise."""
    if len(poly) < 3:
        return 0.0
    area = 0.0
    n = len(poly)
    for i in range(n):
        x0, y0 = poly[i - 1]
        x1, y1 = poly[i]
        area += x0 * y1 - x1 * y0
    return 0.5 * area


def _bev_intersection_area(a: Roi, b: Roi) -> float:
    poly = [tuple(p) for p in _bev_corners(a)]
    clip = [tuple(p) for p in _bev_corners(b)]
    for i in range(4):
        poly = _clip_polygon(poly, clip[i - 1], clip[i])
        if not poly:
            return 0.0
    return max(_polygon_area(poly), 0.0)


def _check_not_degenerate(roi: Roi) -> None:
    if not (roi.size > 0.0).all() or roi.volume() <= 0.0:
        raise ContractError(f"degenerate box with sizes {roi.size}")


def iou_3d(a: Roi, b: Roi) -> float:
    """Overlap-over-union of two yawed boxes.

    Top-view intersection comes from convex polygon clipping of the two
    rotated rectangles; the vertical part is a 1-D interval overlap.
    """
    _check_not_degenerate(a)
    _check_not_degenerate(b)
    inter_bev = _bev_intersection_area(a, b)
    if inter_bev <= 0.0:
        return 0.0
    za0, za1 = a.center[2] - a.size[2] / 2.0, a.center[2] + a.size[2] / 2.0
    zb0, zb1 = b.center[2] - b.size[2] / 2.0, b.center[2] + b.size[2] / 2.0
    overlap_z = min(za1, zb1) - max(za0, zb0)
    if overlap_z <= 0.0:
        return 0.0
    inter = inter_bev * overlap_z
    union = a.volume() + b.volume() - inter
    if union <= 0.0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


def iou_bev(a: Roi, b: Roi) -> float:
    """Top-view-only overlap-over-union of the two yawed rectangles."""
    _check_not_degenerate(a)
    _check_not_degenerate(b)
    inter = _bev_intersection_area(a, b)
    if inter <= 0.0:
        return 0.0
    area_a = float(a.size[0] * a.size[1])
    area_b = float(b.size[0] * b.size[1])
    union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


def pairwise_iou(rois_a: list, rois_b: list, mode: str = "3d") -> np.ndarray:
    """Dense [len(a), len(b)] overlap matrix; `mode` is "3d" or "bev"."""
    fn = {"3d": iou_3d, "bev": iou_bev}.get(mode)
    if fn is None:
        raise ContractError(f"unknown overlap mode {mode!r}")
    out = np.zeros((len(rois_a), len(rois_b)))
    for i, a in enumerate(rois_a):
        for j, b in enumerate(rois_b):
            out[i, j] = fn(a, b)
    return out


def nms(rois: list, overlap_threshold: float, max_keep: int | None = None) -> list[int]:
    """Greedy suppression of overlapping lower-confidence boxes.

    Boxes are visited in descending confidence (ties broken by input
    index); each is kept unless it overlaps an already-kept box above
    `overlap_threshold` in full 3-D overlap.  Returns the kept input
    indices in visit order, at most `max_keep` of them.
    """
    if not (0.0 < overlap_threshold < 1.0):
        raise ContractError(f"overlap threshold must be in (0, 1), got {overlap_threshold}")
    order = sorted(range(len(rois)), key=lambda i: (-rois[i].confidence, i))
    kept: list[int] = []
    for i in order:
        if max_keep is not None and len(kept) >= max_keep:
            break
        if all(iou_3d(rois[i], rois[j]) <= overlap_threshold for j in kept):
            kept.append(i)
    return kept
