"""Multi-task loss: diagnosis cross-entropy, exponentiated soft-Dice
segmentation loss, and their convex combination.

All operations take torch tensors and are differentiable; the training loop
and the finite-difference gradient check drive the exact same code path.
Segmentation arrays are label-axis-first: (labels, slices, rows, cols).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .data import NUM_LABELS

DENOMINATOR_FORMS = ("linear", "squared")


@dataclass
class LossConfig:
    alpha: float = 0.05
    p: float = 0.3
    dice_smooth: float = 1e-5
    dice_clamp: float = 1.0 - 1e-4
    dice_denominator: str = "linear"

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.p <= 0:
            raise ValueError(f"p must be positive, got {self.p}")
        if self.dice_smooth <= 0:
            raise ValueError(f"dice_smooth must be positive, got {self.dice_smooth}")
        if not 0.0 < self.dice_clamp < 1.0:
            raise ValueError(f"dice_clamp must lie in (0, 1), got {self.dice_clamp}")
        if self.dice_denominator not in DENOMINATOR_FORMS:
            raise ValueError(
                f"dice_denominator must be one of {DENOMINATOR_FORMS}, "
                f"got {self.dice_denominator!r}"
            )


@dataclass
class LossBreakdown:
    """Scalar record of one loss evaluation."""

    total: float
    diagnosis: float
    segmentation: float
    per_class_dice: tuple[float, float, float, float]


def soft_dice(
    pred_probs: torch.Tensor,
    target_onehot: torch.Tensor,
    label_index: int,
    smooth: float = 1e-5,
    denominator: str = "linear",
) -> torch.Tensor:
    """Soft Dice coefficient of one label over all voxels.

    (2 sum(p*t) + smooth) / (sum(p) + sum(t) + smooth) with the linear
    denominator; the squared form replaces the denominator sums by
    sum(p^2) + sum(t^2).
    """
    if pred_probs.shape != target_onehot.shape:
        raise ValueError(
            f"prediction shape {tuple(pred_probs.shape)} != "
            f"target shape {tuple(target_onehot.shape)}"
        )
    p = pred_probs[label_index]
    t = target_onehot[label_index]
    intersection = (p * t).sum()
    if denominator == "squared":
        denom = (p * p).sum() + (t * t).sum()
    else:
        denom = p.sum() + t.sum()
    return (2.0 * intersection + smooth) / (denom + smooth)


def dice_loss_term(dice: torch.Tensor, config: LossConfig) -> torch.Tensor:
    """(1 - Dice)^p with the p<1 clamp that keeps the gradient bounded."""
    if config.p < 1.0:
        dice = torch.clamp(dice, max=config.dice_clamp)
    return (1.0 - dice) ** config.p


def segmentation_loss(
    pred_probs: torch.Tensor,
    target_onehot: torch.Tensor,
    config: LossConfig,
) -> torch.Tensor:
    """Mean over the four labels of (1 - Dice_n)^p."""
    if pred_probs.shape[0] != NUM_LABELS or target_onehot.shape[0] != NUM_LABELS:
        raise ValueError(
            f"expected {NUM_LABELS} labels on axis 0, got "
            f"{pred_probs.shape[0]} and {target_onehot.shape[0]}"
        )
    terms = []
    for label in range(NUM_LABELS):
        dice = soft_dice(pred_probs, target_onehot, label,
                         config.dice_smooth, config.dice_denominator)
        terms.append(dice_loss_term(dice, config))
    return torch.stack(terms).mean()


def per_class_soft_dice(pred_probs, target_onehot, config) -> list[torch.Tensor]:
    return [
        soft_dice(pred_probs, target_onehot, label,
                  config.dice_smooth, config.dice_denominator)
        for label in range(NUM_LABELS)
    ]


def diagnosis_loss(logits: torch.Tensor, target_class: int) -> torch.Tensor:
    """Cross-entropy of a single 5-way prediction, log-sum-exp stabilized."""
    logits = logits.reshape(-1)
    if not 0 <= int(target_class) < logits.shape[0]:
        raise ValueError(
            f"target class {target_class} out of range 0..{logits.shape[0] - 1}"
        )
    return torch.logsumexp(logits, dim=0) - logits[int(target_class)]


def combined_loss(diag, seg, alpha: float):
    """Convex combination alpha * diagnosis + (1 - alpha) * segmentation."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    return alpha * diag + (1.0 - alpha) * seg


def multitask_loss(
    seg_logits: torch.Tensor,
    diag_logits: torch.Tensor,
    seg_targets: Sequence[torch.Tensor],
    diag_targets: Sequence[int],
    config: LossConfig,
) -> tuple[torch.Tensor, LossBreakdown]:
    """Batched combined loss.

    seg_logits: (batch, labels, slices, rows, cols); seg_targets: one
    (batch, labels, ...) one-hot tensor per supervised phase (losses over
    phases are averaged); diag_logits: (batch, classes).

    Returns the differentiable total plus a detached breakdown.
    """
    batch = seg_logits.shape[0]
    probs = torch.softmax(seg_logits, dim=1)

    seg_terms = []
    dice_acc = torch.zeros(NUM_LABELS, dtype=probs.dtype, device=probs.device)
    for b in range(batch):
        for target in seg_targets:
            seg_terms.append(segmentation_loss(probs[b], target[b], config))
            with torch.no_grad():
                dice_acc += torch.stack(per_class_soft_dice(probs[b], target[b], config))
    seg = torch.stack(seg_terms).mean()
    dice_mean = dice_acc / (batch * len(seg_targets))

    diag = torch.stack(
        [diagnosis_loss(diag_logits[b], diag_targets[b]) for b in range(batch)]
    ).mean()

    total = combined_loss(diag, seg, config.alpha)
    breakdown = LossBreakdown(
        total=float(total.detach()),
        diagnosis=float(diag.detach()),
        segmentation=float(seg.detach()),
        per_class_dice=tuple(float(d) for d in dice_mean),
    )
    return total, breakdown


def loss_gradient_check(
    config: LossConfig,
    rng: np.random.Generator,
    step: float = 1e-3,
    shape: tuple[int, ...] = (2, NUM_LABELS, 4, 4, 4),
) -> dict:
    """Compare autograd gradients of the combined loss against central
    finite differences on random inputs.

    Both heads' logits are perturbed coordinate by coordinate in float64.
    Relative error per coordinate is |ga - gfd| / max(|ga|, |gfd|, 1e-8).
    Coordinates whose label Dice sits above the p<1 clamp threshold are
    reported separately (the clamp is non-differentiable there).

    Returns a report dict with max relative errors and finiteness flags.
    """
    batch, labels = shape[0], shape[1]
    seg_logits = torch.tensor(rng.normal(0, 1.0, size=shape), dtype=torch.float64)
    diag_logits = torch.tensor(rng.normal(0, 1.0, size=(batch, 5)), dtype=torch.float64)
    target_labels = rng.integers(0, labels, size=(batch,) + shape[2:])
    target = torch.zeros(shape, dtype=torch.float64)
    target.scatter_(1, torch.tensor(target_labels).unsqueeze(1), 1.0)
    diag_targets = [int(c) for c in rng.integers(0, 5, size=batch)]

    def total_loss(seg_l, diag_l):
        loss, _ = multitask_loss(seg_l, diag_l, [target], diag_targets, config)
        return loss

    seg_leaf = seg_logits.clone().requires_grad_(True)
    diag_leaf = diag_logits.clone().requires_grad_(True)
    total_loss(seg_leaf, diag_leaf).backward()
    analytic = {"seg": seg_leaf.grad.clone(), "diag": diag_leaf.grad.clone()}

    report = {"max_rel_error": 0.0, "max_rel_error_seg": 0.0, "max_rel_error_diag": 0.0,
              "all_finite": True, "clamped_labels": 0, "step": step}

    with torch.no_grad():
        probs = torch.softmax(seg_logits, dim=1)
        clamped = 0
        if config.p < 1.0:
            for b in range(batch):
                for label in range(labels):
                    d = soft_dice(probs[b], target[b], label,
                                  config.dice_smooth, config.dice_denominator)
                    if float(d) >= config.dice_clamp:
                        clamped += 1
        report["clamped_labels"] = clamped

    for name, base, grad in (("seg", seg_logits, analytic["seg"]),
                             ("diag", diag_logits, analytic["diag"])):
        if not torch.isfinite(grad).all():
            report["all_finite"] = False
            continue
        flat = base.reshape(-1)
        fd = torch.zeros_like(flat)
        with torch.no_grad():
            for i in range(flat.numel()):
                plus = flat.clone()
                plus[i] += step
                minus = flat.clone()
                minus[i] -= step
                if name == "seg":
                    lp = total_loss(plus.reshape(base.shape), diag_logits)
                    lm = total_loss(minus.reshape(base.shape), diag_logits)
                else:
                    lp = total_loss(seg_logits, plus.reshape(base.shape))
                    lm = total_loss(seg_logits, minus.reshape(base.shape))
                fd[i] = (lp - lm) / (2 * step)
        ga = grad.reshape(-1)
        denom = torch.maximum(torch.maximum(ga.abs(), fd.abs()),
                              torch.tensor(1e-8, dtype=torch.float64))
        rel = ((ga - fd).abs() / denom).max().item()
        report[f"max_rel_error_{name}"] = rel
        report["max_rel_error"] = max(report["max_rel_error"], rel)

    return report
