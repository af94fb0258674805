"""Throughput/allocation benchmarking and the gradient-check suite.

The benchmark drives the real multi-scale ROI feature path on a
synthetic workload where every ROI pools exactly the requested number
of points, so attention-weight allocation has a closed form to compare
against.  The gradient check runs central finite differences over every
parameter of a deliberately tiny end-to-end model and reports the worst
relative error per component.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from .config import Config
from .geometry import Roi
from .roi_encoder import RfeConfig, RfeParams, compute_roi_features, track_attention_allocation
from .tensor import (
    LinearLayer,
    Tensor,
    finite_difference_loss_grad,
    matmul,
    max_relative_error,
    relu,
    sigmoid,
    softmax,
    tmean,
    transpose,
    tsum,
)
from .voxels import InterpretedPoints

__all__ = [
    "GRADCHECK_OVERRIDES",
    "BenchRow",
    "attention_workload",
    "bench",
    "gradcheck_run",
    "GRADCHECK_TOLERANCE",
]

GRADCHECK_TOLERANCE = 1e-4

# Tiny but complete model for finite-difference verification: every
# component present, every width minimal.
GRADCHECK_OVERRIDES = {
    "grid.range_min": (0.0, -9.6, -1.6),
    "grid.range_max": (19.2, 9.6, 2.4),
    "grid.voxel_size": (0.6, 0.6, 0.5),
    "encoder.channels": (3, 4, 5, 6),
    "rfe.d_a": 8,
    "rfe.hidden": 12,
    "rfe.repeats": 1,
    "rfe.budgets": (4, 6, 8),
    "rfe.norm": "layer",
    "heads.hidden": 12,
    "aux.hidden": 8,
    "train.rois_per_scene": 2,
    "scene.boxes_min": 2,
    "scene.boxes_max": 2,
    "scene.car_fraction": 1.0,
    "scene.points_min": 40,
    "scene.points_max": 60,
    "scene.background_points": 32,
}


@dataclass
class BenchRow:
    attention: str
    m_rois: int
    n_points: int
    d_a: int
    seconds: float
    spread: float  # (max - min) / median over kept repetitions
    weight_elements: int
    expected_weight_elements: int
    finite: bool


def _workload_fixture(d_a: int, n_points: int, seed: int):
    """One box containing exactly `n_points` interpreted points."""
    rng = np.random.default_rng([seed, n_points])
    box = Roi(np.zeros(3), np.array([4.0, 4.0, 4.0]), 0.3)
    in_channels = 16
    positions = rng.uniform(-1.5, 1.5, size=(n_points, 3))
    features = rng.normal(0.0, 1.0, size=(n_points, in_channels))
    points = InterpretedPoints(positions, Tensor(features), 1)
    return box, points, in_channels


def attention_workload(
    d_a: int, n_points: int, m_rois: int, attention: str, seed: int = 0, heads: int = 4
) -> tuple[float, int, bool]:
    """Time one compute_roi_features pass where each ROI pools n_points points.

    Returns (seconds, counted weight elements, all-outputs-finite).
    """
    box, points, in_channels = _workload_fixture(d_a, n_points, seed)
    cfg = RfeConfig(
        d_a=d_a,
        hidden=2 * d_a,
        repeats=1,
        scale_order=(1,),
        budgets=(n_points,),
        enlargement=0.0,
        attention=attention,
        heads=heads,
    )
    rng = np.random.default_rng([seed, 7])
    params = RfeParams(cfg, {1: in_channels}, rng)
    rois = [box] * m_rois
    points_by_scale = {1: points}
    start = time.perf_counter()
    with track_attention_allocation() as meter:
        feats = compute_roi_features(points_by_scale, rois, params, seed=seed, training=True)
    elapsed = time.perf_counter() - start
    finite = all(np.isfinite(f.data).all() for f in feats)
    return elapsed, meter.weight_elements, finite


def bench(
    cfg: Config,
    out_csv=None,
    ms=(10, 100, 512),
    ns=(64, 256),
    attentions=("vector", "multihead"),
    reps: int = 5,
    seed: int = 0,
) -> list[BenchRow]:
    """Measure the attention workload grid; trimmed timing, exact allocation.

    Wall-clock per cell is the mean of the middle repetitions (the
    fastest and slowest of `reps` runs are discarded when reps >= 3).
    """
    d_a = cfg["rfe.d_a"]
    heads = cfg["rfe.heads"]
    rows = []
    for attention in attentions:
        for m in ms:
            for n in ns:
                times = []
                weights = expected = 0
                finite = True
                for _ in range(reps):
                    secs, weights, ok = attention_workload(d_a, n, m, attention, seed=seed, heads=heads)
                    times.append(secs)
                    finite = finite and ok
                kept = sorted(times)[1:-1] if len(times) >= 3 else times
                per_point = d_a if attention == "vector" else heads
                expected = m * n * per_point
                spread = (max(kept) - min(kept)) / max(np.median(kept), 1e-12)
                rows.append(
                    BenchRow(attention, m, n, d_a, float(np.mean(kept)), float(spread), weights, expected, finite)
                )
    if out_csv is not None:
        with open(out_csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["attention", "m_rois", "n_points", "d_a", "seconds", "spread",
                 "weight_elements", "expected_weight_elements", "finite"]
            )
            for row in rows:
                writer.writerow(
                    [row.attention, row.m_rois, row.n_points, row.d_a, repr(row.seconds),
                     repr(row.spread), row.weight_elements, row.expected_weight_elements, row.finite]
                )
    return rows


# ---------------------------------------------------------------------------
# gradient checking


def _core_param_group(seed: int):
    """A standalone exercise of the tensor core: mixed ops with own weights.

    Covers matmul/transpose, ReLU, sigmoid, softmax, reductions — the
    primitive gradients everything else is built from.
    """
    rng = np.random.default_rng([seed, 99])
    lin1 = LinearLayer(5, 6, rng)
    lin2 = LinearLayer(6, 4, rng)
    x = Tensor(rng.normal(0.0, 1.0, size=(7, 5)))

    def loss_fn() -> Tensor:
        h = relu(lin1(x))
        y = lin2(h)  # [7, 4]
        w = softmax(y, axis=0)
        z = sigmoid(matmul(transpose(y), w))  # [4, 4]
        return tsum(tmean(z, axis=1))

    params = list(lin1.named_parameters("core.l1.")) + list(lin2.named_parameters("core.l2."))
    return loss_fn, params


def gradcheck_run(cfg: Config | None = None, seed: int = 3) -> dict:
    """Finite-difference check of every parameter group on a tiny instance.

    Returns {"groups": {name: {"max_rel_err", "params"}}, "passed",
    "tolerance"}.  Groups with no parameters pass vacuously.
    """
    from .pipeline import RefinementModel
    from .scenes import gen_scenes
    from .train import prepare_scenes

    if cfg is None:
        cfg = Config(GRADCHECK_OVERRIDES)

    results: dict = {}

    def check_group(name: str, loss_fn, named_params) -> None:
        worst = 0.0
        count = 0
        # analytic gradients: zero this group, then one clean backward pass
        for _, t in named_params:
            t.zero_grad()
        loss = loss_fn()
        loss.backward()
        for pname, t in named_params:
            analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
            numeric = finite_difference_loss_grad(loss_fn, t)
            err = max_relative_error(analytic, numeric)
            worst = max(worst, err)
            count += t.size
        results[name] = {"max_rel_err": worst, "params": count}

    core_loss, core_params = _core_param_group(seed)
    check_group("core", core_loss, core_params)

    model = RefinementModel(cfg, seed=seed)
    scenes = gen_scenes(cfg, 1, seed)
    prepared = prepare_scenes(model, scenes, seed, training=True)
    batch = prepared[0]

    def model_loss() -> Tensor:
        out = model.forward(batch, training=True)
        total, _, _ = model.loss(batch, out)
        return total

    for group, named in sorted(model.parameter_groups().items()):
        check_group(group, model_loss, named)

    passed = all(entry["max_rel_err"] < GRADCHECK_TOLERANCE for entry in results.values())
    return {"groups": results, "passed": passed, "tolerance": GRADCHECK_TOLERANCE}
