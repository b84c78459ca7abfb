"""Synthetic cine-CMR phantom studies with exact ground truth.

Each phantom is a concentric-ellipsoid heart: an LV blood pool inside a
myocardial shell, with a crescent-shaped RV hugging the shell. The ES phase
is the ED phase after an in-plane contraction of the blood pools (the
epicardial border stays put, so the wall thickens in systole).

Class geometry encodes the clinical discriminators: DCM has an enlarged LV,
HCM a thickened myocardium, MINF a reduced ED->ES contraction, ARV an
enlarged (and poorly contracting) RV. Ranges are disjoint per feature, so
the five classes are linearly separable in (LV volume, Myo thickness,
RV volume, contraction fraction) by construction.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import BG, RV, MYO, LV, DIAGNOSES, CineStudy
from .errors import DataError

Range = tuple[float, float]

# Region intensity means; distinct so noiseless masks are recoverable by a
# nearest-mean classifier (blood pools bright, myocardium darker).
INTENSITY = {BG: 0.10, RV: 0.70, MYO: 0.40, LV: 0.95}


@dataclass
class ClassGeometry:
    """Parameter ranges (mm, fractions) for one diagnosis class."""

    lv_radius: Range
    myo_thickness: Range
    rv_size: Range
    lv_contraction: Range   # in-plane radius fraction lost from ED to ES
    rv_contraction: Range


def default_geometry() -> dict[str, ClassGeometry]:
    nor = ClassGeometry(
        lv_radius=(8.0, 9.6),
        myo_thickness=(4.4, 5.6),
        rv_size=(6.4, 8.0),
        lv_contraction=(0.28, 0.38),
        rv_contraction=(0.20, 0.30),
    )
    return {
        "NOR": nor,
        "DCM": ClassGeometry((12.8, 14.4), nor.myo_thickness, nor.rv_size,
                             nor.lv_contraction, nor.rv_contraction),
        "HCM": ClassGeometry((6.0, 7.2), (8.8, 10.8), nor.rv_size,
                             nor.lv_contraction, nor.rv_contraction),
        "MINF": ClassGeometry(nor.lv_radius, nor.myo_thickness, nor.rv_size,
                              (0.04, 0.10), nor.rv_contraction),
        "ARV": ClassGeometry(nor.lv_radius, nor.myo_thickness, (11.2, 13.2),
                             nor.lv_contraction, (0.05, 0.12)),
    }


@dataclass
class PhantomConfig:
    grid: tuple[int, int, int] = (10, 96, 96)           # (slices, rows, cols)
    spacing: tuple[float, float, float] = (8.0, 1.0, 1.0)
    geometry: dict[str, ClassGeometry] = field(default_factory=default_geometry)
    noise_std: float = 0.05
    center_jitter_mm: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")
        if any(g < 1 for g in self.grid):
            raise ValueError(f"grid must be positive, got {self.grid}")


def _z_factor(num_slices: int) -> np.ndarray:
    """Per-slice in-plane shrink factor; an ellipsoid taper, >= 0.8 everywhere."""
    z = np.arange(num_slices, dtype=np.float64)
    zc = (num_slices - 1) / 2.0
    zr = max(num_slices * 0.75, 1.0)
    return np.sqrt(np.clip(1.0 - ((z - zc) / zr) ** 2, 0.0, None))


def _rasterize(grid, spacing, lv_center, rv_angle, lv_r, epi_r, rv_s):
    """Voxelize one phase: label mask from in-plane analytic geometry (mm)."""
    num_slices, n_r, n_c = grid
    rows_mm = np.arange(n_r)[:, None] * spacing[1]
    cols_mm = np.arange(n_c)[None, :] * spacing[2]
    d_lv2 = (rows_mm - lv_center[0]) ** 2 + (cols_mm - lv_center[1]) ** 2
    factor = _z_factor(num_slices)

    mask = np.zeros(grid, dtype=np.uint8)
    for k in range(num_slices):
        f = factor[k]
        lv_rk, epi_rk, rv_sk = lv_r * f, epi_r * f, rv_s * f
        rv_dist = epi_rk + 0.25 * rv_sk
        rv_center = (lv_center[0] - rv_dist * np.cos(rv_angle),
                     lv_center[1] - rv_dist * np.sin(rv_angle))
        d_rv2 = (rows_mm - rv_center[0]) ** 2 + (cols_mm - rv_center[1]) ** 2

        plane = np.zeros((n_r, n_c), dtype=np.uint8)
        plane[(d_rv2 <= rv_sk ** 2) & (d_lv2 > epi_rk ** 2)] = RV
        plane[d_lv2 <= epi_rk ** 2] = MYO
        plane[d_lv2 <= lv_rk ** 2] = LV
        mask[k] = plane
    return mask


def _render(mask: np.ndarray, noise_std: float, rng: np.random.Generator) -> np.ndarray:
    img = np.empty(mask.shape, dtype=np.float32)
    for label, mean in INTENSITY.items():
        img[mask == label] = mean
    if noise_std > 0:
        img += rng.normal(0.0, noise_std, size=mask.shape).astype(np.float32)
    return img


def generate_phantom(class_label: str, config: PhantomConfig,
                     rng: np.random.Generator,
                     patient_id: Optional[str] = None) -> CineStudy:
    """Synthesize one phantom study of the given diagnosis class.

    Masks are exact by construction; intensities are region means plus
    Gaussian noise. ED and ES share the anatomy, related by the sampled
    contraction fractions.
    """
    if class_label not in config.geometry:
        raise ValueError(f"unknown class {class_label!r}; expected one of {DIAGNOSES}")
    geo = config.geometry[class_label]
    num_slices, n_r, n_c = config.grid

    lv_r = rng.uniform(*geo.lv_radius)
    myo_t = rng.uniform(*geo.myo_thickness)
    rv_s = rng.uniform(*geo.rv_size)
    lv_c = rng.uniform(*geo.lv_contraction)
    rv_c = rng.uniform(*geo.rv_contraction)
    epi_r = lv_r + myo_t

    jitter = config.center_jitter_mm
    center = ((n_r - 1) / 2.0 * config.spacing[1] + rng.uniform(-jitter, jitter),
              (n_c - 1) / 2.0 * config.spacing[2] + rng.uniform(-jitter, jitter))
    rv_angle = rng.uniform(np.pi / 3, 2 * np.pi / 3)

    reach = epi_r + 1.25 * rv_s  # crescent's farthest extent from the LV center
    half_extent = min((n_r - 1) / 2.0 * config.spacing[1],
                      (n_c - 1) / 2.0 * config.spacing[2])
    if reach + jitter > half_extent:
        raise DataError(
            f"grid {config.grid} too small for class {class_label}: geometry "
            f"reaches {reach + jitter:.1f} mm from center, half-extent is "
            f"{half_extent:.1f} mm"
        )

    ed_mask = _rasterize(config.grid, config.spacing, center, rv_angle,
                         lv_r, epi_r, rv_s)
    # Systole: blood pools shrink, epicardium stays, wall thickens.
    es_mask = _rasterize(config.grid, config.spacing, center, rv_angle,
                         lv_r * (1 - lv_c), epi_r, rv_s * (1 - rv_c))

    ed_volume = _render(ed_mask, config.noise_std, rng)
    es_volume = _render(es_mask, config.noise_std, rng)

    return CineStudy(
        patient_id=patient_id or f"phantom_{class_label}",
        ed_volume=ed_volume,
        es_volume=es_volume,
        ed_mask=ed_mask,
        es_mask=es_mask,
        spacing=config.spacing,
        diagnosis=class_label,
    )


def generate_phantom_dataset(count: int, config: PhantomConfig) -> list[CineStudy]:
    """Generate `count` phantoms with a balanced class distribution.

    Classes are assigned round-robin, so count=100 yields 20 per class.
    Deterministic given config.seed.
    """
    if count < 1:
        raise ValueError("count must be positive")
    rng = np.random.default_rng(config.seed)
    studies = []
    for i in range(count):
        label = DIAGNOSES[i % len(DIAGNOSES)]
        studies.append(
            generate_phantom(label, config, rng, patient_id=f"phantom{i + 1:03d}")
        )
    return studies
