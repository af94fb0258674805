"""Synthetic scenes and jittered proposals.

Real datasets are out of scope; the harness instead generates scenes
with non-overlapping boxes resting on a flat ground plane at z = 0,
fills each box with uniform interior points, and sprinkles ground
points.  Proposals come from perturbing the ground truth — translation
and yaw noise, optional size noise, drops, and spurious boxes — which
stands in for a first-stage proposal network.

Scene files are JSON: {"points": [[x,y,z], ...], "boxes": [{"center":
[x,y,z], "size": [dx,dy,dz], "yaw": t, "cls": k}, ...]}, meters and
radians.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .config import Config
from .errors import ConfigError
from .geometry import Roi, from_canonical, iou_bev, wrap_angle

__all__ = [
    "CLASS_SIZES",
    "Scene",
    "gen_scenes",
    "jitter_proposals",
    "make_proposals",
    "save_scene",
    "load_scene",
    "load_scene_dir",
]

# Nominal full extents (dx, dy, dz) per class id.
CLASS_SIZES = {
    0: np.array([4.0, 1.8, 1.6]),  # car-like
    1: np.array([0.8, 0.8, 1.7]),  # pedestrian-like
}

# Log-space spread of sampled box sizes around the class nominal.
_SIZE_SPREAD = 0.08

_MAX_PLACEMENT_ATTEMPTS = 10_000


@dataclass
class Scene:
    """One synthetic frame: a point cloud plus its ground-truth boxes."""

    points: np.ndarray  # [P, 3]
    boxes: list  # list of Roi

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)


def _sample_box(rng: np.random.Generator, cfg: Config, existing: list) -> Roi:
    """Rejection-sample one box that does not overlap any existing box."""
    range_min = np.asarray(cfg["grid.range_min"])
    range_max = np.asarray(cfg["grid.range_max"])
    for _ in range(_MAX_PLACEMENT_ATTEMPTS):
        cls = 0 if rng.uniform() < cfg["scene.car_fraction"] else 1
        size = CLASS_SIZES[cls] * np.exp(rng.normal(0.0, _SIZE_SPREAD, size=3))
        yaw = rng.uniform(-np.pi, np.pi)
        margin = float(np.hypot(size[0], size[1]) / 2.0 + 0.25)
        lo = range_min[:2] + margin
        hi = range_max[:2] - margin
        if not (hi > lo).all():
            continue
        xy = rng.uniform(lo, hi)
        center = np.array([xy[0], xy[1], size[2] / 2.0])  # resting on the ground plane
        candidate = Roi(center, size, yaw, cls=cls)
        if all(iou_bev(candidate, other) == 0.0 for other in existing):
            return candidate
    raise ConfigError(
        f"could not place a non-overlapping box after {_MAX_PLACEMENT_ATTEMPTS} attempts; "
        "the configured grid range is too small for the scene parameters"
    )


def _box_points(rng: np.random.Generator, box: Roi, count: int, noise_sigma: float) -> np.ndarray:
    canon = rng.uniform(-box.size / 2.0, box.size / 2.0, size=(count, 3))
    pts = from_canonical(canon, box)
    if noise_sigma > 0.0:
        pts = pts + rng.normal(0.0, noise_sigma, size=pts.shape)
    return pts


def gen_scenes(cfg: Config, count: int, seed: int, out_dir=None) -> list[Scene]:
    """Generate `count` scenes, deterministic in (cfg, seed).

    Each scene gets an independent RNG stream derived from the seed and
    its index, so regenerating any prefix reproduces the same scenes.
    With `out_dir` set, scenes are also written as scene_NNNNN.json.
    """
    if count < 0:
        raise ConfigError(f"scene count must be non-negative, got {count}")
    lo, hi = cfg["scene.boxes_min"], cfg["scene.boxes_max"]
    if lo < 1 or hi < lo:
        raise ConfigError(f"bad scene box count range [{lo}, {hi}]")
    p_lo, p_hi = cfg["scene.points_min"], cfg["scene.points_max"]
    if p_lo < 1 or p_hi < p_lo:
        raise ConfigError(f"bad points-per-box range [{p_lo}, {p_hi}]")
    noise = cfg["scene.noise_sigma"]
    if noise < 0.0:
        raise ConfigError(f"scene.noise_sigma must be non-negative, got {noise}")

    scenes = []
    for index in range(count):
        rng = np.random.default_rng([seed, index])
        boxes: list = []
        for _ in range(int(rng.integers(lo, hi + 1))):
            boxes.append(_sample_box(rng, cfg, boxes))
        clouds = [_box_points(rng, box, int(rng.integers(p_lo, p_hi + 1)), noise) for box in boxes]
        n_bg = cfg["scene.background_points"]
        if n_bg > 0:
            range_min = np.asarray(cfg["grid.range_min"])
            range_max = np.asarray(cfg["grid.range_max"])
            xy = rng.uniform(range_min[:2], range_max[:2], size=(n_bg, 2))
            z = rng.normal(0.0, noise, size=(n_bg, 1)) if noise > 0.0 else np.zeros((n_bg, 1))
            clouds.append(np.concatenate([xy, z], axis=1))
        points = np.concatenate(clouds, axis=0) if clouds else np.zeros((0, 3))
        scene = Scene(points, boxes)
        scenes.append(scene)
        if out_dir is not None:
            save_scene(os.path.join(out_dir, f"scene_{index:05d}.json"), scene)
    return scenes


# ---------------------------------------------------------------------------
# proposals


def jitter_proposals(gts: list, cfg: Config, seed) -> list:
    """Perturb ground-truth boxes into proposal candidates.

    Per box: an independent drop decision, Gaussian translation noise
    per axis, log-space size noise, yaw noise, and a confidence drawn
    from U(0.5, 1).  Spurious boxes are added with a Binomial(len(gts),
    spurious_rate) count, placed loosely around the real boxes.
    Deterministic given the seed.
    """
    trans = cfg["jitter.trans_sigma"]
    size_sig = cfg["jitter.size_sigma"]
    yaw_sig = cfg["jitter.yaw_sigma"]
    drop = cfg["jitter.drop_rate"]
    spurious = cfg["jitter.spurious_rate"]
    for name, value in (("trans", trans), ("size", size_sig), ("yaw", yaw_sig)):
        if value < 0.0:
            raise ConfigError(f"jitter.{name}_sigma must be non-negative, got {value}")
    for name, value in (("drop_rate", drop), ("spurious_rate", spurious)):
        if not 0.0 <= value <= 1.0:
            raise ConfigError(f"jitter.{name} must be in [0, 1], got {value}")

    rng = np.random.default_rng(seed)
    proposals: list = []
    for gt in gts:
        if rng.uniform() < drop:
            continue
        center = gt.center + rng.normal(0.0, trans, size=3)
        size = gt.size * np.exp(rng.normal(0.0, size_sig, size=3))
        yaw = wrap_angle(gt.yaw + rng.normal(0.0, yaw_sig))
        proposals.append(Roi(center, size, yaw, cls=gt.cls, confidence=rng.uniform(0.5, 1.0)))
    if gts and spurious > 0.0:
        centers = np.stack([gt.center for gt in gts])
        lo = centers.min(axis=0) - 5.0
        hi = centers.max(axis=0) + 5.0
        for _ in range(int(rng.binomial(len(gts), spurious))):
            template = gts[int(rng.integers(len(gts)))]
            center = rng.uniform(lo, hi)
            size = template.size * np.exp(rng.normal(0.0, 0.1, size=3))
            yaw = rng.uniform(-np.pi, np.pi)
            proposals.append(Roi(center, size, yaw, cls=template.cls, confidence=rng.uniform(0.5, 1.0)))
    return proposals


def _as_seed_list(seed) -> list[int]:
    if isinstance(seed, (list, tuple)):
        return [int(s) for s in seed]
    return [int(seed)]


def make_proposals(gts: list, cfg: Config, seed, target_count: int | None = None) -> list:
    """Jittered proposals, padded by re-jittering until `target_count` is reached.

    Padding rounds derive fresh seeds from the base seed, so the result
    is deterministic.  Without a target, one jitter round is returned.
    """
    base = _as_seed_list(seed)
    proposals = jitter_proposals(gts, cfg, base + [0])
    if target_count is None:
        return proposals
    round_index = 1
    while len(proposals) < target_count and gts:
        extra = jitter_proposals(gts, cfg, base + [round_index])
        proposals.extend(extra)
        round_index += 1
        if round_index > 1000:
            break  # drop rate 1.0 never yields boxes; refuse to loop forever
    return proposals[:target_count]


# ---------------------------------------------------------------------------
# scene files


def save_scene(path, scene: Scene) -> None:
    doc = {
        "points": [[float(v) for v in row] for row in scene.points],
        "boxes": [
            {
                "center": [float(v) for v in box.center],
                "size": [float(v) for v in box.size],
                "yaw": float(box.yaw),
                "cls": int(box.cls),
            }
            for box in scene.boxes
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_scene(path) -> Scene:
    with open(path) as fh:
        doc = json.load(fh)
    points = np.asarray(doc.get("points", []), dtype=np.float64).reshape(-1, 3)
    boxes = [
        Roi(entry["center"], entry["size"], entry["yaw"], cls=entry.get("cls", 0))
        for entry in doc.get("boxes", [])
    ]
    return Scene(points, boxes)


def load_scene_dir(scene_dir) -> list[Scene]:
    """All scene_*.json files in a directory, sorted by name."""
    if not os.path.isdir(scene_dir):
        raise ConfigError(f"scene directory {scene_dir!r} does not exist")
    names = sorted(n for n in os.listdir(scene_dir) if n.startswith("scene_") and n.endswith(".json"))
    if not names:
        raise ConfigError(f"no scene_*.json files in {scene_dir}")
    return [load_scene(os.path.join(scene_dir, n)) for n in names]
