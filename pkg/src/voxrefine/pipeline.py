"""End-to-end model assembly: encoder, ROI feature blocks, and heads.

`RefinementModel` owns every learnable tensor and wires one forward
pass: voxel statistics -> feature pyramid -> per-ROI attention features
-> confidence and box residues (plus the per-point auxiliary heads).

Scene-dependent but parameter-independent work — voxelization, pyramid
keys and cell-center positions, per-(ROI, scale) membership indices,
auxiliary labels, and regression targets — is computed once per scene
into a `PreparedScene` and reused every step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import Config
from .errors import ContractError
from .heads import (
    AuxHeads,
    DetectionHeads,
    RefineTargets,
    aux_loss,
    decode_residue,
    make_refine_targets,
    refine_loss,
    total_loss,
)
from .roi_encoder import RfeParams, candidate_indices, compute_roi_features
from .tensor import Tensor, concat, load_checkpoint, save_checkpoint
from .voxels import (
    EncoderParams,
    InterpretedPoints,
    Voxelization,
    encode_multiscale,
    key_positions,
    make_aux_targets,
    pyramid_keys,
    voxelize,
)

__all__ = ["PreparedScene", "ForwardOutput", "RefinementModel"]

AUX_SCALES = (3, 4)


@dataclass
class PreparedScene:
    """Geometry-only precomputation for one scene and its proposal set."""

    vox: Voxelization
    proposals: list
    gts: list
    targets: RefineTargets
    positions: dict  # scale -> [N_i, 3] cell centers
    candidates: dict  # (roi_index, scale) -> candidate row indices
    aux: dict  # scale -> AuxTargets


@dataclass
class ForwardOutput:
    """One forward pass over a prepared scene."""

    confidences: Tensor  # [M, 1]
    residues: Tensor  # [M, 7]
    aux_preds: dict  # scale -> [N_i, 7] Tensor (empty when aux disabled)
    roi_features: Tensor  # [M, d_a]


class RefinementModel:
    """All learnable state plus the forward pass over prepared scenes."""

    def __init__(self, cfg: Config, seed: int = 0):
        self.cfg = cfg
        self.seed = int(seed)
        self.grid = cfg.grid()
        self.rfe_cfg = cfg.rfe()
        self.refine_cfg = cfg.refine()
        channels = cfg.channels()
        self.channels_by_scale = {i + 1: channels[i] for i in range(4)}
        rng = np.random.default_rng([self.seed, 0xC0FFEE])
        self.encoder = EncoderParams(rng, channels)
        self.rfe = RfeParams(self.rfe_cfg, self.channels_by_scale, rng)
        self.heads = DetectionHeads(self.rfe_cfg.d_a, cfg["heads.hidden"], rng)
        self.aux_heads = (
            AuxHeads({s: self.channels_by_scale[s] for s in AUX_SCALES}, cfg["aux.hidden"], rng)
            if cfg["aux.enabled"]
            else None
        )

    # ------------------------------------------------------------------
    # parameter plumbing

    def named_parameters(self):
        yield from self.encoder.named_parameters()
        yield from self.rfe.named_parameters()
        yield from self.heads.named_parameters()
        if self.aux_heads is not None:
            yield from self.aux_heads.named_parameters()

    def named_buffers(self):
        yield from self.rfe.named_buffers()

    def parameter_groups(self) -> dict:
        """Parameters bucketed by top-level component name."""
        groups: dict = {}
        for name, tensor in self.named_parameters():
            groups.setdefault(name.split(".", 1)[0], []).append((name, tensor))
        return groups

    def zero_grad(self) -> None:
        for _, t in self.named_parameters():
            t.zero_grad()

    def param_arrays(self) -> dict:
        """Live parameter arrays by name; in-place updates hit the model."""
        return {name: t.data for name, t in self.named_parameters()}

    def grad_arrays(self) -> dict:
        return {
            name: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for name, t in self.named_parameters()
        }

    def state_arrays(self) -> dict:
        out = {name: t.data for name, t in self.named_parameters()}
        for name, arr in self.named_buffers():
            out[name] = arr
        return out

    def save(self, path) -> None:
        save_checkpoint(path, self.state_arrays())

    def load_state(self, arrays: dict) -> None:
        for name, t in self.named_parameters():
            if name not in arrays:
                raise ContractError(f"checkpoint missing parameter {name!r}")
            if arrays[name].shape != t.data.shape:
                raise ContractError(
                    f"checkpoint shape {arrays[name].shape} for {name!r} != model {t.data.shape}"
                )
            t.data[...] = arrays[name]
        for prefix, layer in self._norm_layers():
            for buf in ("running_mean", "running_var"):
                full = prefix + buf
                if full in arrays:
                    layer.load_buffer(buf, arrays[full])

    def load(self, path) -> None:
        self.load_state(load_checkpoint(path))

    def _norm_layers(self):
        for (n, scale), block in sorted(self.rfe.blocks.items()):
            yield f"rfe.r{n}.s{scale}.norm1.", block.norm1
            yield f"rfe.r{n}.s{scale}.norm2.", block.norm2

    # ------------------------------------------------------------------
    # scene preparation and forward

    def prepare(self, points, proposals: list, gts: list) -> PreparedScene:
        """Do all parameter-independent work for a scene once."""
        vox = voxelize(points, self.grid)
        keys = pyramid_keys(vox.keys)
        positions = {i: key_positions(keys[i - 1], self.grid, i) for i in range(1, 5)}
        candidates = {}
        for scale in self.rfe_cfg.scale_order:
            pos = positions[scale]
            for ri, roi in enumerate(proposals):
                candidates[(ri, scale)] = candidate_indices(pos, roi, self.rfe_cfg.enlargement)
        aux = {s: make_aux_targets(positions[s], gts) for s in AUX_SCALES}
        targets = make_refine_targets(proposals, gts, self.refine_cfg)
        return PreparedScene(vox, list(proposals), list(gts), targets, positions, candidates, aux)

    def forward(self, prepared: PreparedScene, training: bool = True) -> ForwardOutput:
        if not prepared.proposals:
            raise ContractError("forward needs at least one proposal")
        maps = encode_multiscale(prepared.vox, self.encoder, self.grid)
        points_by_scale = {}
        for fmap in maps:
            cached = prepared.positions[fmap.scale_index]
            if cached.shape[0] != len(fmap):
                raise ContractError("cached positions do not match the encoded pyramid")
            points_by_scale[fmap.scale_index] = InterpretedPoints(cached, fmap.features, fmap.scale_index)
        features = compute_roi_features(
            points_by_scale,
            prepared.proposals,
            self.rfe,
            seed=self.seed,
            training=training,
            candidates=prepared.candidates,
        )
        stacked = concat(features, axis=0) if len(features) > 1 else features[0]  # [M, d_a]
        confidences, residues = self.heads(stacked)
        aux_preds = {}
        if self.aux_heads is not None:
            for scale in AUX_SCALES:
                fmap = maps[scale - 1]
                if len(fmap):
                    aux_preds[scale] = self.aux_heads(scale, fmap.features)
        return ForwardOutput(confidences, residues, aux_preds, stacked)

    def loss(self, prepared: PreparedScene, out: ForwardOutput) -> tuple[Tensor, Tensor, Tensor | None]:
        """(total, refinement term, auxiliary term or None)."""
        refine = refine_loss(out.confidences, out.residues, prepared.targets, self.refine_cfg)
        aux = None
        if self.aux_heads is not None and out.aux_preds:
            preds = concat([out.aux_preds[s] for s in sorted(out.aux_preds)], axis=0)
            fg = np.concatenate([prepared.aux[s].foreground for s in sorted(out.aux_preds)])
            offsets = np.concatenate([prepared.aux[s].offsets for s in sorted(out.aux_preds)], axis=0)
            parts = np.concatenate([prepared.aux[s].parts for s in sorted(out.aux_preds)], axis=0)
            aux = aux_loss(preds, fg, offsets, parts, self.refine_cfg)
        return total_loss(refine, aux), refine, aux

    def decode_detections(self, prepared: PreparedScene, out: ForwardOutput) -> list:
        """Refined boxes with head confidences, one per proposal."""
        conf = out.confidences.data.reshape(-1)
        deltas = out.residues.data
        detections = []
        for r, roi in enumerate(prepared.proposals):
            refined = decode_residue(roi, deltas[r], self.refine_cfg)
            detections.append(refined.with_confidence(float(conf[r])))
        return detections
