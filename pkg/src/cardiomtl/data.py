"""Study ingestion types and the preprocessing pipeline.

Volumes are numpy arrays indexed (slice, row, col). Segmentation masks use
the label coding BG=0, RV=1, Myo=2, LV=3; diagnosis classes are indexed in
the order NOR, DCM, HCM, MINF, ARV.

The pipeline is: resample in-plane to a target spacing, crop around the
heart bounding box, build the (ED, ED-ES, ES) channel stack, normalize each
channel slice by slice, then cut six-slice slabs for the network.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import DataError

# Segmentation label coding (ACDC convention).
BG, RV, MYO, LV = 0, 1, 2, 3
NUM_LABELS = 4
LABEL_NAMES = {BG: "BG", RV: "RV", MYO: "Myo", LV: "LV"}
STRUCTURES = (LV, RV, MYO)

# Diagnosis classes.
DIAGNOSES = ("NOR", "DCM", "HCM", "MINF", "ARV")
DIAGNOSIS_INDEX = {name: i for i, name in enumerate(DIAGNOSES)}
NUM_CLASSES = len(DIAGNOSES)

Bbox = tuple[int, int, int, int]  # (row_min, row_max, col_min, col_max), inclusive


@dataclass
class CineStudy:
    """One patient: ED/ES volumes, optional masks, spacing, diagnosis.

    spacing is (slice_mm, row_mm, col_mm). bbox, when present, is an
    in-plane box in the study's own voxel grid.
    """

    patient_id: str
    ed_volume: np.ndarray
    es_volume: np.ndarray
    spacing: tuple[float, float, float]
    diagnosis: str
    ed_mask: Optional[np.ndarray] = None
    es_mask: Optional[np.ndarray] = None
    bbox: Optional[Bbox] = None

    def __post_init__(self):
        if self.ed_volume.ndim != 3:
            raise DataError(f"{self.patient_id}: volumes must be 3D (slice, row, col)")
        if self.ed_volume.shape != self.es_volume.shape:
            raise DataError(
                f"{self.patient_id}: ED shape {self.ed_volume.shape} != "
                f"ES shape {self.es_volume.shape}"
            )
        if self.ed_volume.shape[0] < 1:
            raise DataError(f"{self.patient_id}: empty slice axis")
        for name, mask in (("ED", self.ed_mask), ("ES", self.es_mask)):
            if mask is None:
                continue
            if mask.shape != self.ed_volume.shape:
                raise DataError(
                    f"{self.patient_id}: {name} mask shape {mask.shape} does not "
                    f"match volume shape {self.ed_volume.shape}"
                )
            labels = np.unique(mask)
            if not np.isin(labels, [BG, RV, MYO, LV]).all():
                raise DataError(
                    f"{self.patient_id}: {name} mask has labels outside {{0,1,2,3}}: "
                    f"{labels.tolist()}"
                )
        if any(s <= 0 for s in self.spacing):
            raise DataError(f"{self.patient_id}: non-positive spacing {self.spacing}")
        if self.diagnosis not in DIAGNOSIS_INDEX:
            raise DataError(
                f"{self.patient_id}: unknown diagnosis group {self.diagnosis!r}; "
                f"expected one of {DIAGNOSES}"
            )

    @property
    def has_masks(self) -> bool:
        return self.ed_mask is not None and self.es_mask is not None

    @property
    def num_slices(self) -> int:
        return self.ed_volume.shape[0]


@dataclass
class PreprocConfig:
    """Knobs for the resample / crop / normalize / slab pipeline."""

    target_in_plane_spacing_mm: float = 1.0
    crop_size: tuple[int, int] = (128, 128)
    crop_margin_mm: float = 10.0
    slab_depth: int = 6
    normalization_epsilon: float = 1e-6
    # Per-slice normalization of the composed channels can be disabled to
    # inspect raw intensities (the ED - ES identity holds exactly then).
    normalize: bool = True
    # Supervise the segmentation head with the ES mask in addition to ED.
    supervise_es: bool = True

    def __post_init__(self):
        if self.target_in_plane_spacing_mm <= 0:
            raise ValueError("target_in_plane_spacing_mm must be positive")
        rows, cols = self.crop_size
        if rows <= 0 or cols <= 0 or rows % 2 or cols % 2:
            raise ValueError(f"crop_size must be even positive integers, got {self.crop_size}")
        if self.crop_margin_mm < 0:
            raise ValueError("crop_margin_mm must be nonnegative")
        if self.slab_depth < 1:
            raise ValueError("slab_depth must be positive")
        if self.normalization_epsilon <= 0:
            raise ValueError("normalization_epsilon must be positive")


@dataclass
class Sample:
    """One model-ready slab: 3-channel input plus aligned targets.

    input is (3, slab_depth, rows, cols) ordered (ED, ED-ES, ES);
    seg_target is the one-hot ED mask of the same slab, seg_target_es the
    ES counterpart when ES supervision is enabled.
    """

    input: np.ndarray
    seg_target: np.ndarray
    diag_target: int
    provenance: tuple[str, int]
    seg_target_es: Optional[np.ndarray] = None


@dataclass
class PreprocessedStudy:
    """A study after resampling, cropping and channel composition."""

    patient_id: str
    channels: np.ndarray                  # (3, slices, rows, cols) float32
    onehot_ed: Optional[np.ndarray]       # (4, slices, rows, cols) uint8, None if maskless
    diagnosis: str
    spacing: tuple[float, float, float]
    onehot_es: Optional[np.ndarray] = None
    ed_mask: Optional[np.ndarray] = None
    es_mask: Optional[np.ndarray] = None

    @property
    def diag_index(self) -> int:
        return DIAGNOSIS_INDEX[self.diagnosis]

    @property
    def num_slices(self) -> int:
        return self.channels.shape[1]


def resample_in_plane(
    volume: np.ndarray,
    spacing: Sequence[float],
    target_mm: float,
    is_mask: bool = False,
) -> tuple[np.ndarray, tuple[float, float, float]]:
    """Resample the in-plane axes of a (slice, row, col) volume.

    The slice axis is untouched. Output sizes are round(size * spacing /
    target); output pixel j samples the input at j * target / spacing
    (clipped to the grid). Intensities are interpolated linearly, masks with
    nearest neighbor.

    Returns the resampled volume and the new spacing
    (slice_mm, target_mm, target_mm).
    """
    if target_mm <= 0:
        raise ValueError(f"target spacing must be positive, got {target_mm}")
    slice_mm, row_mm, col_mm = (float(s) for s in spacing)
    if row_mm <= 0 or col_mm <= 0 or slice_mm <= 0:
        raise ValueError(f"spacing must be positive, got {spacing}")
    n_s, n_r, n_c = volume.shape
    out_r = max(1, int(round(n_r * row_mm / target_mm)))
    out_c = max(1, int(round(n_c * col_mm / target_mm)))
    new_spacing = (slice_mm, target_mm, target_mm)

    if out_r == n_r and out_c == n_c and row_mm == target_mm and col_mm == target_mm:
        return volume.copy(), new_spacing

    rows = np.clip(np.arange(out_r) * (target_mm / row_mm), 0, n_r - 1)
    cols = np.clip(np.arange(out_c) * (target_mm / col_mm), 0, n_c - 1)
    grid_r, grid_c = np.meshgrid(rows, cols, indexing="ij")
    coords = np.stack([grid_r, grid_c])

    out = np.empty((n_s, out_r, out_c), dtype=volume.dtype)
    for s in range(n_s):
        if is_mask:
            out[s] = ndimage.map_coordinates(volume[s], coords, order=0, mode="nearest")
        else:
            plane = volume[s].astype(np.float64, copy=False)
            out[s] = ndimage.map_coordinates(plane, coords, order=1, mode="nearest")
    return out, new_spacing


def bbox_from_mask(*masks: np.ndarray) -> Bbox:
    """Tightest in-plane box containing all nonzero voxels of the given masks.

    Several masks (e.g. the ED and ES phases) are combined by union.
    """
    if not masks:
        raise ValueError("at least one mask required")
    any_fg_r = np.zeros(masks[0].shape[1], dtype=bool)
    any_fg_c = np.zeros(masks[0].shape[2], dtype=bool)
    for mask in masks:
        fg = mask != 0
        any_fg_r |= fg.any(axis=(0, 2))
        any_fg_c |= fg.any(axis=(0, 1))
    if not any_fg_r.any():
        raise DataError("cannot derive a bounding box from an all-zero mask")
    rows = np.flatnonzero(any_fg_r)
    cols = np.flatnonzero(any_fg_c)
    return int(rows[0]), int(rows[-1]), int(cols[0]), int(cols[-1])


def crop_around_bbox(volume: np.ndarray, bbox: Optional[Bbox], config: PreprocConfig) -> np.ndarray:
    """Crop a fixed-size in-plane window centered on the bounding box.

    Regions outside the volume are zero-padded. The window start along each
    axis is (min + max + 1 - size) // 2, which centers the box up to the
    usual half-pixel integer ambiguity.
    """
    if bbox is None:
        raise DataError(
            "no bounding box available: studies without masks need a "
            "user-supplied heart bounding box"
        )
    rows, cols = config.crop_size
    r_min, r_max, c_min, c_max = bbox
    n_s, n_r, n_c = volume.shape
    start_r = (r_min + r_max + 1 - rows) // 2
    start_c = (c_min + c_max + 1 - cols) // 2

    out = np.zeros((n_s, rows, cols), dtype=volume.dtype)
    src_r0, src_r1 = max(start_r, 0), min(start_r + rows, n_r)
    src_c0, src_c1 = max(start_c, 0), min(start_c + cols, n_c)
    if src_r0 < src_r1 and src_c0 < src_c1:
        dst_r0 = src_r0 - start_r
        dst_c0 = src_c0 - start_c
        out[:, dst_r0:dst_r0 + (src_r1 - src_r0), dst_c0:dst_c0 + (src_c1 - src_c0)] = \
            volume[:, src_r0:src_r1, src_c0:src_c1]
    return out


def normalize_slices(volume: np.ndarray, epsilon: float = 1e-6) -> np.ndarray:
    """Standardize each 2D slice to zero mean, unit std.

    Slices whose std falls below epsilon (padded or constant slices) are
    only shifted to zero mean, never scaled.
    """
    v = volume.astype(np.float64, copy=False)
    mean = v.mean(axis=(1, 2), keepdims=True)
    std = v.std(axis=(1, 2), keepdims=True)
    scale = np.where(std < epsilon, 1.0, std)
    out = (v - mean) / scale
    return out.astype(np.float32)


def compose_channels(ed: np.ndarray, es: np.ndarray, config: PreprocConfig) -> np.ndarray:
    """Stack (ED, ED-ES, ES) channels, then normalize each per slice.

    The subtraction channel is computed on raw (resampled, cropped)
    intensities before any normalization, so it keeps its motion-magnitude
    meaning.
    """
    if ed.shape != es.shape:
        raise ValueError(f"ED shape {ed.shape} != ES shape {es.shape}")
    ed = ed.astype(np.float32, copy=False)
    es = es.astype(np.float32, copy=False)
    channels = np.stack([ed, ed - es, es])
    if config.normalize:
        channels = np.stack(
            [normalize_slices(ch, config.normalization_epsilon) for ch in channels]
        )
    return channels


def one_hot(mask: np.ndarray, num_labels: int = NUM_LABELS) -> np.ndarray:
    """Expand an integer label volume into a (labels, ...) one-hot array."""
    out = np.zeros((num_labels,) + mask.shape, dtype=np.uint8)
    for label in range(num_labels):
        out[label] = mask == label
    return out


def preprocess_study(study: CineStudy, config: PreprocConfig) -> PreprocessedStudy:
    """Run the full pipeline on one study.

    The bounding box comes from the study masks when present, otherwise from
    study.bbox (rescaled from the original grid to the target spacing).
    """
    target = config.target_in_plane_spacing_mm
    ed, new_spacing = resample_in_plane(study.ed_volume, study.spacing, target)
    es, _ = resample_in_plane(study.es_volume, study.spacing, target)

    ed_mask = es_mask = None
    if study.has_masks:
        ed_mask, _ = resample_in_plane(study.ed_mask, study.spacing, target, is_mask=True)
        es_mask, _ = resample_in_plane(study.es_mask, study.spacing, target, is_mask=True)
        bbox = bbox_from_mask(ed_mask, es_mask)
    elif study.bbox is not None:
        r_scale = study.spacing[1] / target
        c_scale = study.spacing[2] / target
        r_min, r_max, c_min, c_max = study.bbox
        bbox = (
            int(np.floor(r_min * r_scale)), int(np.ceil(r_max * r_scale)),
            int(np.floor(c_min * c_scale)), int(np.ceil(c_max * c_scale)),
        )
    else:
        raise DataError(
            f"{study.patient_id}: no masks and no bounding box; supply one to crop"
        )

    margin_px = int(np.ceil(config.crop_margin_mm / target))
    extent = (bbox[1] - bbox[0] + 1 + 2 * margin_px, bbox[3] - bbox[2] + 1 + 2 * margin_px)
    if extent[0] > config.crop_size[0] or extent[1] > config.crop_size[1]:
        raise DataError(
            f"{study.patient_id}: heart box plus margin {extent} exceeds crop size "
            f"{config.crop_size}; increase crop_size or reduce crop_margin_mm"
        )

    ed = crop_around_bbox(ed, bbox, config)
    es = crop_around_bbox(es, bbox, config)
    channels = compose_channels(ed, es, config)

    onehot_ed = onehot_es = None
    if ed_mask is not None:
        ed_mask = crop_around_bbox(ed_mask, bbox, config)
        es_mask = crop_around_bbox(es_mask, bbox, config)
        onehot_ed = one_hot(ed_mask)
        onehot_es = one_hot(es_mask) if config.supervise_es else None

    return PreprocessedStudy(
        patient_id=study.patient_id,
        channels=channels,
        onehot_ed=onehot_ed,
        onehot_es=onehot_es,
        diagnosis=study.diagnosis,
        spacing=new_spacing,
        ed_mask=ed_mask,
        es_mask=es_mask,
    )


def slab_start(num_slices: int, slab_depth: int, rng: np.random.Generator) -> int:
    """Uniformly random start index of a slab_depth window."""
    if num_slices < slab_depth:
        raise ValueError(f"volume has {num_slices} slices, need at least {slab_depth}")
    return int(rng.integers(0, num_slices - slab_depth + 1))


def sample_slab(
    study_channels: np.ndarray,
    targets: np.ndarray,
    slab_depth: int,
    rng: np.random.Generator,
    targets_es: Optional[np.ndarray] = None,
    diag_target: int = 0,
    patient_id: str = "",
) -> Sample:
    """Cut a random consecutive-slice slab out of a preprocessed study.

    The start index is uniform over all valid positions; input and targets
    are sliced identically.
    """
    start = slab_start(study_channels.shape[1], slab_depth, rng)
    return _cut_slab(study_channels, targets, targets_es, start, slab_depth,
                     diag_target, patient_id)


def center_slab(
    study_channels: np.ndarray,
    slab_depth: int,
    targets: Optional[np.ndarray] = None,
    targets_es: Optional[np.ndarray] = None,
    diag_target: int = 0,
    patient_id: str = "",
) -> Sample:
    """Deterministic central slab; for an odd leftover the lower start wins."""
    num_slices = study_channels.shape[1]
    if num_slices < slab_depth:
        raise ValueError(f"volume has {num_slices} slices, need at least {slab_depth}")
    start = (num_slices - slab_depth) // 2
    if targets is None:
        targets = np.zeros((NUM_LABELS,) + study_channels.shape[1:], dtype=np.uint8)
    return _cut_slab(study_channels, targets, targets_es, start, slab_depth,
                     diag_target, patient_id)


def _cut_slab(channels, targets, targets_es, start, depth, diag_target, patient_id):
    if channels.shape[1:] != targets.shape[1:]:
        raise ValueError(
            f"channels spatial shape {channels.shape[1:]} != targets {targets.shape[1:]}"
        )
    sl = slice(start, start + depth)
    return Sample(
        input=channels[:, sl],
        seg_target=targets[:, sl],
        seg_target_es=None if targets_es is None else targets_es[:, sl],
        diag_target=diag_target,
        provenance=(patient_id, start),
    )


def study_sample(study: PreprocessedStudy, config: PreprocConfig,
                 rng: Optional[np.random.Generator] = None) -> Sample:
    """Sample (or center-cut when rng is None) a slab from a study."""
    if rng is None:
        return center_slab(
            study.channels, config.slab_depth, study.onehot_ed, study.onehot_es,
            study.diag_index, study.patient_id,
        )
    if study.onehot_ed is None:
        raise DataError(f"{study.patient_id}: cannot draw training slabs without masks")
    return sample_slab(
        study.channels, study.onehot_ed, config.slab_depth, rng,
        study.onehot_es, study.diag_index, study.patient_id,
    )


def stratified_split(studies: list, ratio: tuple[float, float] = (0.75, 0.25),
                     seed: int = 0) -> tuple[list, list]:
    """Split studies 75:25 (by default) within each diagnosis class.

    Deterministic given the seed; every study lands in exactly one side.
    Raises when a class is too small to contribute to both sides.
    """
    if len(ratio) != 2 or min(ratio) <= 0:
        raise ValueError(f"ratio must be two positive numbers, got {ratio}")
    frac = ratio[0] / (ratio[0] + ratio[1])
    by_class: dict[str, list] = {}
    for study in studies:
        by_class.setdefault(study.diagnosis, []).append(study)

    min_members = int(np.ceil(1.0 / min(frac, 1 - frac)))
    rng = np.random.default_rng(seed)
    train, val = [], []
    for diagnosis in sorted(by_class):
        members = sorted(by_class[diagnosis], key=lambda s: s.patient_id)
        if len(members) < min_members:
            raise DataError(
                f"class {diagnosis} has only {len(members)} studies; need at least "
                f"{min_members} for a {ratio[0]}:{ratio[1]} split"
            )
        order = rng.permutation(len(members))
        n_train = int(np.floor(len(members) * frac + 0.5))
        n_train = min(max(n_train, 1), len(members) - 1)
        picked = [members[i] for i in order]
        train.extend(picked[:n_train])
        val.extend(picked[n_train:])
    return train, val
