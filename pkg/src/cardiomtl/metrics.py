"""Hard-mask evaluation metrics: Dice overlap, Hausdorff distance in
millimeters, and diagnostic error bookkeeping.

Hausdorff distances are computed between boundary voxels (a voxel is
boundary when any 6-neighbor, or the outside of the volume, differs) using
physical voxel-center coordinates. Structures absent from either mask get
an undefined Hausdorff (None) and are excluded from aggregates.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from scipy.spatial import cKDTree

from .data import (
    LV, MYO, NUM_CLASSES, PreprocConfig, PreprocessedStudy, RV,
    center_slab, preprocess_study,
)

STRUCTURE_LABELS = {"LV": LV, "RV": RV, "Myo": MYO}
PHASES = ("ED", "ES")


@dataclass
class StructureScore:
    dsc: float
    hausdorff_mm: Optional[float]


@dataclass
class SegEvalResult:
    """DSC and Hausdorff per (structure, phase) for one study."""

    scores: dict[tuple[str, str], StructureScore] = field(default_factory=dict)

    def rows(self):
        for (structure, phase), score in sorted(self.scores.items()):
            yield structure, phase, score.dsc, score.hausdorff_mm


@dataclass
class DiagEvalResult:
    accuracy: float
    error: float
    confusion: np.ndarray                       # (5, 5), rows = truth
    per_case: list[tuple[str, int, int, float]]  # (patient_id, true, pred, confidence)


def dsc_hard(pred: np.ndarray, gt: np.ndarray, label: int) -> float:
    """2|P∩G| / (|P|+|G|); 1.0 when both masks lack the label, 0.0 when
    exactly one does."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    p = pred == label
    g = gt == label
    p_count, g_count = int(p.sum()), int(g.sum())
    if p_count == 0 and g_count == 0:
        return 1.0
    if p_count == 0 or g_count == 0:
        return 0.0
    return 2.0 * int((p & g).sum()) / (p_count + g_count)


def boundary_voxels(mask: np.ndarray) -> np.ndarray:
    """Boolean map of voxels with any 6-neighbor outside the region
    (the volume border counts as outside)."""
    m = mask.astype(bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = m.copy()
    for axis in range(3):
        for shift in (1, -1):
            interior &= np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    return m & ~interior


def hausdorff_mm(pred: np.ndarray, gt: np.ndarray, label: int,
                 spacing: Sequence[float]) -> Optional[float]:
    """Symmetric Hausdorff distance between label boundaries, in mm.

    None (undefined) when either mask lacks the label.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    p = pred == label
    g = gt == label
    if not p.any() or not g.any():
        return None
    scale = np.asarray(spacing, dtype=np.float64)
    p_pts = np.argwhere(boundary_voxels(p)) * scale
    g_pts = np.argwhere(boundary_voxels(g)) * scale
    d_pg = cKDTree(g_pts).query(p_pts, k=1)[0].max()
    d_gp = cKDTree(p_pts).query(g_pts, k=1)[0].max()
    return float(max(d_pg, d_gp))


def diagnostic_error(
    predictions: Sequence[int],
    truths: Sequence[int],
    patient_ids: Optional[Sequence[str]] = None,
    confidences: Optional[Sequence[float]] = None,
) -> DiagEvalResult:
    """Error rate, confusion matrix and per-case rows for a prediction set."""
    if len(predictions) != len(truths):
        raise ValueError(
            f"{len(predictions)} predictions vs {len(truths)} ground truths"
        )
    if len(predictions) == 0:
        raise ValueError("empty prediction list")
    confusion = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    per_case = []
    for i, (pred, true) in enumerate(zip(predictions, truths)):
        confusion[true, pred] += 1
        per_case.append((
            patient_ids[i] if patient_ids else f"case{i:03d}",
            int(true), int(pred),
            float(confidences[i]) if confidences else float("nan"),
        ))
    accuracy = float(np.trace(confusion)) / len(predictions)
    return DiagEvalResult(
        accuracy=accuracy,
        error=1.0 - accuracy,
        confusion=confusion,
        per_case=per_case,
    )


def segmentation_scores(pred_mask: np.ndarray, slab_masks: dict[str, np.ndarray],
                        spacing) -> SegEvalResult:
    """Score one predicted label slab against per-phase ground-truth slabs."""
    result = SegEvalResult()
    for phase, gt in slab_masks.items():
        for structure, label in STRUCTURE_LABELS.items():
            result.scores[(structure, phase)] = StructureScore(
                dsc=dsc_hard(pred_mask, gt, label),
                hausdorff_mm=hausdorff_mm(pred_mask, gt, label, spacing),
            )
    return result


def evaluate_preprocessed(model, study: PreprocessedStudy, slab_depth: int
                          ) -> tuple[Optional[SegEvalResult], int, float]:
    """Center-slab inference on an already-preprocessed study.

    Returns (segmentation scores or None if the study has no masks,
    predicted class index, softmax confidence of that class).
    """
    sample = center_slab(study.channels, slab_depth, patient_id=study.patient_id)
    start = sample.provenance[1]

    model.eval()
    with torch.no_grad():
        x = torch.from_numpy(np.ascontiguousarray(sample.input)).unsqueeze(0).float()
        seg_logits, diag_logits = model(x)
        probs = torch.softmax(diag_logits[0], dim=0).numpy()
        pred_mask = seg_logits[0].argmax(dim=0).numpy().astype(np.uint8)

    pred_class = int(probs.argmax())
    confidence = float(probs[pred_class])

    seg_result = None
    if study.ed_mask is not None:
        sl = slice(start, start + slab_depth)
        slab_masks = {"ED": study.ed_mask[sl]}
        if study.es_mask is not None:
            slab_masks["ES"] = study.es_mask[sl]
        seg_result = segmentation_scores(pred_mask, slab_masks, study.spacing)
    return seg_result, pred_class, confidence


def evaluate_study(model, study, preproc: PreprocConfig
                   ) -> tuple[Optional[SegEvalResult], int, float]:
    """Preprocess a raw study and run center-slab evaluation."""
    prepared = preprocess_study(study, preproc)
    return evaluate_preprocessed(model, prepared, preproc.slab_depth)


def aggregate_segmentation(results: Sequence[SegEvalResult]) -> dict:
    """Mean DSC / mean defined Hausdorff per (structure, phase).

    Undefined Hausdorff values are excluded; their count is reported.
    """
    agg: dict[str, dict] = {}
    for structure in STRUCTURE_LABELS:
        for phase in PHASES:
            dscs, hds, undefined = [], [], 0
            for result in results:
                score = result.scores.get((structure, phase))
                if score is None:
                    continue
                dscs.append(score.dsc)
                if score.hausdorff_mm is None:
                    undefined += 1
                else:
                    hds.append(score.hausdorff_mm)
            if not dscs:
                continue
            agg[f"{structure}_{phase}"] = {
                "dsc_mean": float(np.mean(dscs)),
                "hausdorff_mean_mm": float(np.mean(hds)) if hds else None,
                "hausdorff_undefined": undefined,
                "cases": len(dscs),
            }
    return agg
