"""ACDC-layout dataset IO.

A study directory looks like:

    patient001/
        Info.cfg                      # key: value lines, incl. ED, ES, Group
        patient001_frame01.nii.gz     # per-frame volumes (1-based indices)
        patient001_frame01_gt.nii.gz  # ground-truth masks, optional
        patient001_frame12.nii.gz
        patient001_frame12_gt.nii.gz
        patient001_4d.nii.gz          # fallback when per-frame files absent
        bbox.txt                      # optional manual heart box (maskless mode)

Phantom studies are exported in the same layout so the rest of the pipeline
is source-agnostic.
"""
from __future__ import annotations

from pathlib import Path
from typing import Optional

import numpy as np

from .data import Bbox, CineStudy, DIAGNOSIS_INDEX
from .errors import DataError
from .nifti import read_nifti, write_nifti

# ACDC ships the abnormal-RV group as plain "RV".
GROUP_ALIASES = {"RV": "ARV"}


def _parse_info_cfg(path: Path) -> dict[str, str]:
    if not path.exists():
        raise DataError(f"metadata missing: {path}")
    info = {}
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or ":" not in line:
            continue
        key, value = line.split(":", 1)
        info[key.strip()] = value.strip()
    return info


def _nifti_to_volume(data: np.ndarray, zooms) -> tuple[np.ndarray, tuple[float, float, float]]:
    """(rows, cols, slices) NIfTI axes -> our (slices, rows, cols)."""
    volume = np.ascontiguousarray(np.transpose(data, (2, 0, 1)))
    spacing = (float(zooms[2]), float(zooms[0]), float(zooms[1]))
    return volume, spacing


def _volume_to_nifti(volume: np.ndarray, spacing) -> tuple[np.ndarray, tuple[float, float, float]]:
    data = np.asfortranarray(np.transpose(volume, (1, 2, 0)))
    zooms = (float(spacing[1]), float(spacing[2]), float(spacing[0]))
    return data, zooms


def _find_frame(study_dir: Path, pid: str, frame: int, suffix: str = "") -> Optional[Path]:
    for ext in (".nii.gz", ".nii"):
        candidate = study_dir / f"{pid}_frame{frame:02d}{suffix}{ext}"
        if candidate.exists():
            return candidate
    return None


def _load_frame(study_dir: Path, pid: str, frame: int):
    path = _find_frame(study_dir, pid, frame)
    if path is not None:
        data, zooms = read_nifti(path)
        if data.ndim != 3:
            raise DataError(f"{path}: expected a 3D frame volume, got {data.ndim}D")
        return _nifti_to_volume(data.astype(np.float32), zooms)
    for ext in (".nii.gz", ".nii"):
        path4d = study_dir / f"{pid}_4d{ext}"
        if path4d.exists():
            data, zooms = read_nifti(path4d)
            if data.ndim != 4:
                raise DataError(f"{path4d}: expected a 4D cine volume")
            if not 1 <= frame <= data.shape[3]:
                raise DataError(
                    f"{pid}: frame {frame} out of range 1..{data.shape[3]}"
                )
            return _nifti_to_volume(data[..., frame - 1].astype(np.float32), zooms[:3])
    raise DataError(f"{pid}: no volume found for frame {frame} in {study_dir}")


def _load_mask(study_dir: Path, pid: str, frame: int) -> Optional[np.ndarray]:
    path = _find_frame(study_dir, pid, frame, suffix="_gt")
    if path is None:
        return None
    data, zooms = read_nifti(path)
    mask, _ = _nifti_to_volume(data, zooms)
    return np.rint(mask).astype(np.uint8)


def load_acdc_study(study_dir) -> CineStudy:
    """Load one ACDC-layout patient directory into a CineStudy.

    Masks are attached when the _gt files exist and left absent otherwise
    (test-set mode). An optional bbox.txt (four ints: row_min row_max
    col_min col_max) supplies the manual heart box for maskless studies.
    """
    study_dir = Path(study_dir)
    pid = study_dir.name
    info = _parse_info_cfg(study_dir / "Info.cfg")
    for key in ("ED", "ES", "Group"):
        if key not in info:
            raise DataError(f"{pid}: Info.cfg lacks required key {key!r}")
    try:
        ed_frame, es_frame = int(info["ED"]), int(info["ES"])
    except ValueError as exc:
        raise DataError(f"{pid}: non-integer ED/ES frame index") from exc

    group = GROUP_ALIASES.get(info["Group"], info["Group"])
    if group not in DIAGNOSIS_INDEX:
        raise DataError(f"{pid}: unknown diagnosis group {info['Group']!r}")

    ed_volume, spacing = _load_frame(study_dir, pid, ed_frame)
    es_volume, es_spacing = _load_frame(study_dir, pid, es_frame)
    if es_volume.shape != ed_volume.shape:
        raise DataError(
            f"{pid}: ED frame shape {ed_volume.shape} != ES frame shape {es_volume.shape}"
        )

    bbox = _read_bbox(study_dir / "bbox.txt")
    return CineStudy(
        patient_id=pid,
        ed_volume=ed_volume,
        es_volume=es_volume,
        ed_mask=_load_mask(study_dir, pid, ed_frame),
        es_mask=_load_mask(study_dir, pid, es_frame),
        spacing=spacing,
        diagnosis=group,
        bbox=bbox,
    )


def _read_bbox(path: Path) -> Optional[Bbox]:
    if not path.exists():
        return None
    parts = path.read_text().split()
    if len(parts) != 4:
        raise DataError(f"{path}: expected 4 integers (row_min row_max col_min col_max)")
    r0, r1, c0, c1 = (int(p) for p in parts)
    return (r0, r1, c0, c1)


def load_acdc_dataset(root) -> list[CineStudy]:
    """Load every patient*/ directory under root, sorted by name."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset directory not found: {root}")
    study_dirs = sorted(p for p in root.iterdir() if p.is_dir() and (p / "Info.cfg").exists())
    if not study_dirs:
        raise DataError(f"no study directories with Info.cfg under {root}")
    return [load_acdc_study(d) for d in study_dirs]


def export_study(study: CineStudy, root) -> Path:
    """Write a study to disk in the ACDC layout (ED as frame 1, ES as frame 2).

    Volumes are stored float32, masks uint8; spacing lands in the NIfTI
    header at float32 precision.
    """
    root = Path(root)
    study_dir = root / study.patient_id
    study_dir.mkdir(parents=True, exist_ok=True)
    pid = study.patient_id

    lines = ["ED: 1", "ES: 2", f"Group: {study.diagnosis}", "NbFrame: 2"]
    (study_dir / "Info.cfg").write_text("\n".join(lines) + "\n")

    for frame, volume, mask in ((1, study.ed_volume, study.ed_mask),
                                (2, study.es_volume, study.es_mask)):
        data, zooms = _volume_to_nifti(volume.astype(np.float32), study.spacing)
        write_nifti(study_dir / f"{pid}_frame{frame:02d}.nii.gz", data, zooms)
        if mask is not None:
            mdata, mzooms = _volume_to_nifti(mask.astype(np.uint8), study.spacing)
            write_nifti(study_dir / f"{pid}_frame{frame:02d}_gt.nii.gz", mdata, mzooms)

    if study.bbox is not None:
        (study_dir / "bbox.txt").write_text(" ".join(str(v) for v in study.bbox) + "\n")
    return study_dir
