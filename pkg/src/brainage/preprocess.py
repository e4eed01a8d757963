"""Conversion of 3D volumes into the ordered 2D axial slice stacks the models
consume.

A fixed extent is discarded from the top and bottom of the head (in
millimeters, floored to whole slices so no tissue beyond the stated extent is
ever removed), then a fixed-count window of contiguous slices is taken from
the center of the surviving band.  Slices are ordered top (cranial) to bottom.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np


class BandTooSmallError(ValueError):
    """The surviving axial band has fewer slices than requested."""

    def __init__(self, band: int, target: int):
        self.band = band
        self.target = target
        self.deficit = target - band
        super().__init__(
            f"axial band of {band} slices cannot supply {target} slices "
            f"(deficit {self.deficit})"
        )


@dataclass(frozen=True)
class BandRule:
    """Millimeter discards at each end plus the number of slices to keep."""

    top_discard_mm: float = 40.0
    bottom_discard_mm: float = 35.0
    target_slices: int = 40

    def __post_init__(self) -> None:
        if self.top_discard_mm < 0 or self.bottom_discard_mm < 0:
            raise ValueError("discard extents must be nonnegative")
        if self.target_slices < 1:
            raise ValueError("target_slices must be >= 1")


# "mni": adult head at 2 mm isotropic spacing in a common template space.
# "synth": small generated volumes where the mni extents would exceed the head.
BAND_PROFILES = {
    "mni": BandRule(top_discard_mm=40.0, bottom_discard_mm=35.0, target_slices=40),
    "synth": BandRule(top_discard_mm=10.0, bottom_discard_mm=10.0, target_slices=20),
}


def band_profile(name: str) -> BandRule:
    try:
        return BAND_PROFILES[name]
    except KeyError:
        valid = ", ".join(sorted(BAND_PROFILES))
        raise ValueError(f"unknown band profile {name!r} (expected one of {valid})") from None


@dataclass(frozen=True)
class VolumeImage:
    """A 3D scalar image with isotropic voxel spacing.

    Axes are (sagittal, coronal, axial); the axial index increases toward the
    top of the head.
    """

    voxels: np.ndarray
    spacing_mm: float

    def __post_init__(self) -> None:
        vox = np.asarray(self.voxels)
        object.__setattr__(self, "voxels", vox)
        if vox.ndim != 3:
            raise ValueError(f"volume must be 3D, got shape {vox.shape}")
        if not self.spacing_mm > 0:
            raise ValueError(f"spacing_mm must be positive, got {self.spacing_mm}")
        if not np.isfinite(vox).all():
            raise ValueError("volume contains non-finite values")


@dataclass(frozen=True)
class SliceStack:
    """Ordered axial slices from one volume, most cranial first.

    ``slices`` has shape (count, H, W), or (count, C, H, W) once channel
    planes have been added for model input.  ``axial_indices`` records which
    axial index of the source volume each slice came from.
    """

    slices: np.ndarray
    source_id: str = ""
    axial_indices: Tuple[int, ...] = ()

    def __post_init__(self) -> None:
        arr = np.asarray(self.slices)
        object.__setattr__(self, "slices", arr)
        object.__setattr__(self, "axial_indices", tuple(self.axial_indices))
        if arr.ndim not in (3, 4):
            raise ValueError(f"slices must be (count, H, W) or (count, C, H, W), got {arr.shape}")
        if arr.shape[0] < 1:
            raise ValueError("slice stack is empty")
        if not np.isfinite(arr).all():
            raise ValueError("slice stack contains non-finite values")
        if self.axial_indices and len(self.axial_indices) != arr.shape[0]:
            raise ValueError(
                f"axial_indices length {len(self.axial_indices)} != slice count {arr.shape[0]}"
            )

    @property
    def count(self) -> int:
        return int(self.slices.shape[0])

    @property
    def channels(self) -> int:
        return int(self.slices.shape[1]) if self.slices.ndim == 4 else 0

    @property
    def slice_hw(self) -> Tuple[int, int]:
        return (int(self.slices.shape[-2]), int(self.slices.shape[-1]))


def extract_band(volume: VolumeImage, rule: BandRule, source_id: str = "") -> SliceStack:
    """Apply the band rule: discard floor(mm/spacing) slices at each end, then
    keep ``target_slices`` contiguous slices centered in the surviving band
    (odd excess drops the extra slice at the bottom).  Output is ordered
    top to bottom.
    """
    n_axial = int(volume.voxels.shape[2])
    spacing = volume.spacing_mm
    drop_top = int(rule.top_discard_mm / spacing)
    drop_bottom = int(rule.bottom_discard_mm / spacing)
    band = n_axial - drop_top - drop_bottom
    if band < rule.target_slices:
        raise BandTooSmallError(band=band, target=rule.target_slices)
    excess = band - rule.target_slices
    extra_top = excess // 2
    extra_bottom = excess - extra_top
    lo = drop_bottom + extra_bottom
    hi = n_axial - drop_top - extra_top  # exclusive
    indices = tuple(range(hi - 1, lo - 1, -1))
    slices = np.ascontiguousarray(np.moveaxis(volume.voxels[:, :, lo:hi], 2, 0)[::-1])
    return SliceStack(slices=slices, source_id=source_id, axial_indices=indices)


def normalize_slice(slice_2d: np.ndarray) -> np.ndarray:
    """Min-max scale a slice to [0, 1]; a constant slice maps to all zeros."""
    arr = np.asarray(slice_2d, dtype=np.float64)
    if not np.isfinite(arr).all():
        raise ValueError("slice contains non-finite values")
    lo = arr.min()
    span = arr.max() - lo
    if span == 0.0:
        return np.zeros_like(arr)
    return (arr - lo) / span


def volume_to_model_input(
    volume: VolumeImage,
    rule: BandRule,
    channels: int = 1,
    source_id: str = "",
) -> SliceStack:
    """Band extraction followed by per-slice normalization, with the single
    intensity channel replicated when a 3-channel model input is required."""
    if channels not in (1, 3):
        raise ValueError(f"channels must be 1 or 3, got {channels}")
    band = extract_band(volume, rule, source_id=source_id)
    normalized = np.stack([normalize_slice(s) for s in band.slices])
    arr = normalized[:, None, :, :]
    if channels == 3:
        arr = np.repeat(arr, 3, axis=1)
    return SliceStack(slices=arr, source_id=source_id, axial_indices=band.axial_indices)
