"""Training loop, checkpointing, and the small-scale overfit study.

Training is deliberately free of hidden randomness: scenes and
proposals are fixed up front from seeds, pooling subsets are derived
from (seed, roi, scale, repeat) only, and the loop itself draws no
random numbers.  Interrupting after any step and resuming from the
written checkpoint therefore reproduces the uninterrupted loss trace
bit for bit.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .config import Config
from .errors import ConfigError, ContractError
from .geometry import iou_3d, nms
from .pipeline import RefinementModel
from .scenes import gen_scenes, jitter_proposals, make_proposals
from .tensor import AdamState, adam_step

__all__ = [
    "DESK_OVERFIT_OVERRIDES",
    "TrainResult",
    "build_proposals",
    "prepare_scenes",
    "learning_rate",
    "train",
    "refinement_report",
    "run_overfit",
]

# A grid and model sized for CPU minutes instead of GPU hours.  The
# attention architecture, loss, and thresholds are untouched; only
# widths, budgets, and the scene scale shrink.
DESK_OVERFIT_OVERRIDES = {
    "grid.range_min": (0.0, -9.6, -1.6),
    "grid.range_max": (19.2, 9.6, 2.4),
    "grid.voxel_size": (0.3, 0.3, 0.5),
    "encoder.channels": (8, 12, 16, 16),
    "rfe.d_a": 32,
    "rfe.hidden": 48,
    "rfe.repeats": 2,
    "rfe.budgets": (16, 24, 48),
    "heads.hidden": 48,
    "aux.hidden": 24,
    "train.rois_per_scene": 24,
    "train.lr": 2e-3,
    "train.steps": 2000,
    "scene.boxes_min": 2,
    "scene.boxes_max": 3,
    "scene.car_fraction": 1.0,
    "scene.points_min": 150,
    "scene.points_max": 200,
    "scene.background_points": 128,
    "jitter.trans_sigma": 0.3,
    "jitter.yaw_sigma": 0.1,
}


@dataclass
class TrainResult:
    checkpoint_path: str
    trace_path: str
    steps_run: int
    final_loss: float
    stopped_early: bool


def build_proposals(gts: list, cfg: Config, seed, training: bool = True) -> list:
    """Proposal set for one scene: jitter rounds, suppression, then the cap.

    Training keeps `train.rois_per_scene` boxes after suppression at the
    training threshold; evaluation applies the (stricter) evaluation
    threshold and cap to a single jitter round.
    """
    seed_list = [int(s) for s in np.atleast_1d(seed)]
    if training:
        target = cfg["train.rois_per_scene"]
        pool: list = []
        round_index = 0
        while len(pool) < 2 * target and round_index < 50:
            extra = jitter_proposals(gts, cfg, seed_list + [round_index])
            pool.extend(extra)
            round_index += 1
            if not extra and (not gts or round_index > 2):
                break  # nothing to jitter, or drop rate 1 keeps yielding nothing
        kept = nms(pool, cfg["train.nms_threshold"], cfg["train.nms_keep"]) if pool else []
        if len(kept) < target:
            chosen = set(kept)
            for i in range(len(pool)):
                if len(kept) >= target:
                    break
                if i not in chosen:
                    kept.append(i)
                    chosen.add(i)
        return [pool[i] for i in kept[:target]]
    proposals = make_proposals(gts, cfg, seed_list)
    kept = nms(proposals, cfg["eval.nms_threshold"], cfg["eval.nms_keep"]) if proposals else []
    return [proposals[i] for i in kept]


def prepare_scenes(model: RefinementModel, scenes: list, seed: int, training: bool = True) -> list:
    """PreparedScene per input scene, proposals seeded per scene index."""
    prepared = []
    for index, scene in enumerate(scenes):
        proposals = build_proposals(scene.boxes, model.cfg, [seed, index], training=training)
        if not proposals:
            continue
        prepared.append(model.prepare(scene.points, proposals, scene.boxes))
    if not prepared:
        raise ContractError("no scene produced any proposals; check jitter rates")
    return prepared


def learning_rate(cfg: Config, step: int, total_steps: int) -> float:
    """Constant by default; optional one-cycle ramp-up then cosine decay."""
    base = cfg["train.lr"]
    if not cfg["train.one_cycle"]:
        return base
    max_lr = cfg["train.max_lr"]
    warm = max(int(0.3 * total_steps), 1)
    if step < warm:
        frac = step / warm
        return max_lr / 25.0 + (max_lr - max_lr / 25.0) * frac
    frac = (step - warm) / max(total_steps - warm, 1)
    return max_lr / 100.0 + 0.5 * (max_lr - max_lr / 100.0) * (1.0 + np.cos(np.pi * frac))


def optim_path_for(checkpoint_path: str) -> str:
    root, ext = os.path.splitext(checkpoint_path)
    return root + ".optim" + (ext or ".json")


def _save_optim(path: str, state: AdamState) -> None:
    doc = {
        "t": state.t,
        "m": {k: {"shape": list(v.shape), "data": [float(x) for x in v.ravel()]} for k, v in state.m.items()},
        "v": {k: {"shape": list(v.shape), "data": [float(x) for x in v.ravel()]} for k, v in state.v.items()},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def _load_optim(path: str) -> AdamState:
    with open(path) as fh:
        doc = json.load(fh)
    state = AdamState()
    state.t = int(doc["t"])
    for field in ("m", "v"):
        target = getattr(state, field)
        for k, entry in doc[field].items():
            target[k] = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
    return state


def _dump_nan_diagnostics(out_dir: str, step: int, scene_index: int, model: RefinementModel,
                          refine_val: float, aux_val: float | None) -> str:
    stats = {}
    for name, t in model.named_parameters():
        data = t.data
        stats[name] = {
            "min": float(np.min(data)),
            "max": float(np.max(data)),
            "finite": bool(np.isfinite(data).all()),
        }
    path = os.path.join(out_dir, "nan_dump.json")
    with open(path, "w") as fh:
        json.dump(
            {
                "step": step,
                "scene_index": scene_index,
                "refine_loss": refine_val,
                "aux_loss": aux_val,
                "param_stats": stats,
            },
            fh,
            indent=2,
        )
    return path


def train(
    cfg: Config,
    scenes: list,
    out_dir: str,
    seed: int = 0,
    steps: int | None = None,
    resume: bool = False,
    callback=None,
) -> TrainResult:
    """Adam over the total objective, round-robin across scenes.

    Writes `trace.csv` (step, scene, lr, total, refine, aux — full-
    precision floats) and `checkpoint.json` + `checkpoint.optim.json`
    each epoch and at the end.  `resume=True` continues from the stored
    optimizer step.  `callback(step, model, prepared)` runs after each
    step; returning True stops training early.  A non-finite loss
    aborts with a diagnostic dump.
    """
    os.makedirs(out_dir, exist_ok=True)
    total_steps = cfg["train.steps"] if steps is None else int(steps)
    if total_steps < 0:
        raise ConfigError(f"train.steps must be non-negative, got {total_steps}")

    model = RefinementModel(cfg, seed=seed)
    prepared = prepare_scenes(model, scenes, seed, training=True)
    state = AdamState()
    ckpt_path = os.path.join(out_dir, "checkpoint.json")
    trace_path = os.path.join(out_dir, "trace.csv")

    start_step = 0
    if resume:
        model.load(ckpt_path)
        state = _load_optim(optim_path_for(ckpt_path))
        start_step = state.t
        trace_mode = "a"
    else:
        trace_mode = "w"

    epoch_len = len(prepared)
    every = cfg["train.checkpoint_every"]
    final_loss = float("nan")
    stopped = False

    with open(trace_path, trace_mode) as trace:
        if not resume:
            trace.write("step,scene,lr,total,refine,aux\n")
        step = start_step
        while step < total_steps:
            scene_index = step % epoch_len
            batch = prepared[scene_index]
            out = model.forward(batch, training=True)
            total, refine, aux = model.loss(batch, out)
            total_val = float(total.data)
            refine_val = float(refine.data)
            aux_val = float(aux.data) if aux is not None else None
            if not np.isfinite(total_val):
                dump = _dump_nan_diagnostics(out_dir, step, scene_index, model, refine_val, aux_val)
                raise ContractError(f"non-finite loss at step {step}; diagnostics written to {dump}")

            lr = learning_rate(cfg, step, total_steps)
            model.zero_grad()
            total.backward()
            adam_step(model.param_arrays(), model.grad_arrays(), state, lr)

            trace.write(
                f"{step},{scene_index},{lr!r},{total_val!r},{refine_val!r},"
                f"{'' if aux_val is None else repr(aux_val)}\n"
            )
            trace.flush()
            final_loss = total_val
            step += 1

            at_epoch_end = (step % epoch_len == 0) if every <= 0 else (step % every == 0)
            if at_epoch_end or step == total_steps:
                model.save(ckpt_path)
                _save_optim(optim_path_for(ckpt_path), state)
            if callback is not None and callback(step, model, prepared):
                stopped = True
                model.save(ckpt_path)
                _save_optim(optim_path_for(ckpt_path), state)
                break

    return TrainResult(ckpt_path, trace_path, step, final_loss, stopped)


# ---------------------------------------------------------------------------
# refinement quality measurement


def refinement_report(model: RefinementModel, prepared: list) -> dict:
    """Mean overlap with ground truth before and after refinement.

    Each proposal is scored against its matched ground-truth box; the
    refined box is scored against the same box.  Proposals without any
    ground truth in the scene are skipped.
    """
    before: list[float] = []
    after: list[float] = []
    for batch in prepared:
        if not batch.gts:
            continue
        out = model.forward(batch, training=False)
        detections = model.decode_detections(batch, out)
        for r in range(len(batch.proposals)):
            g = batch.targets.matched_gt[r]
            if g < 0:
                continue
            before.append(float(batch.targets.raw_iou[r]))
            after.append(iou_3d(detections[r], batch.gts[g]))
    if not before:
        raise ContractError("refinement report needs at least one matched proposal")
    return {
        "proposal_mean_iou": float(np.mean(before)),
        "refined_mean_iou": float(np.mean(after)),
        "gain": float(np.mean(after) - np.mean(before)),
        "count": len(before),
    }


def run_overfit(
    cfg: Config,
    out_dir: str,
    seed: int = 0,
    num_scenes: int = 5,
    max_steps: int | None = None,
    target_gain: float | None = None,
    check_every: int = 100,
) -> dict:
    """Train on a handful of fixed scenes and report the refinement gain.

    With `target_gain` set, training stops as soon as the gain reaches
    it (checked every `check_every` steps), bounding runtime.
    """
    scenes = gen_scenes(cfg, num_scenes, seed)
    steps = cfg["train.steps"] if max_steps is None else int(max_steps)

    progress: list[dict] = []

    def callback(step: int, model: RefinementModel, prepared: list) -> bool:
        if target_gain is None or step % check_every != 0:
            return False
        report = refinement_report(model, prepared)
        progress.append({"step": step, **report})
        return report["gain"] >= target_gain

    result = train(cfg, scenes, out_dir, seed=seed, steps=steps, callback=callback)
    model = RefinementModel(cfg, seed=seed)
    model.load(result.checkpoint_path)
    prepared = prepare_scenes(model, scenes, seed, training=True)
    report = refinement_report(model, prepared)
    report["steps_run"] = result.steps_run
    report["progress"] = progress
    return report
