"""Deterministic synthetic 3D "brain" generator.

Each generated head is an ellipsoid of tissue containing structures whose
geometry encodes age: a central ventricle sphere that grows with age and a
cortical shell that thins with age.  An off-center ellipsoidal lesion provides
a segmentation target that is geometrically independent of the age-encoding
structures (and disjoint from the ventricle), so segmentation pre-training
cannot leak the age signal through its labels.

Everything is a pure function of (config, subject index): regenerating a
cohort reproduces bit-identical volumes, masks, and ages.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

from .core import (
    DEFAULT_SPACING_MM,
    DatasetManifest,
    DiagnosisGroup,
    Split,
    SubjectRecord,
    as_group,
    as_split,
)
from .preprocess import VolumeImage

# Intensities (before additive noise); all in [0, 1].
BACKGROUND_INTENSITY = 0.0
TISSUE_INTENSITY = 0.55
SHELL_INTENSITY = 0.85
VENTRICLE_INTENSITY = 0.10
LESION_INTENSITY = 0.80

# Geometry constants, in voxels unless noted.
BRAIN_AXES_FRACTION = (0.42, 0.38, 0.40)  # semi-axes as a fraction of volume shape
VENTRICLE_BASE_RADIUS = 4.0
VENTRICLE_GROWTH_PER_YEAR = 0.15
SHELL_BASE_THICKNESS = 3.0
SHELL_THINNING_PER_YEAR = 0.04
SHELL_MIN_THICKNESS = 0.8
LESION_SEMIAXIS_RANGE = (3.0, 5.5)
LESION_RADIAL_FRACTION = (0.35, 0.85)
MAX_LESION_ATTEMPTS = 100

MIN_VOLUME_SIDE = 48


class GenerationError(RuntimeError):
    """Generation could not satisfy the geometric constraints (typically the
    volume is too small for the requested age range)."""


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of the synthetic cohort generator."""

    volume_shape: Tuple[int, int, int] = (64, 64, 64)
    spacing_mm: float = DEFAULT_SPACING_MM
    age_range: Tuple[float, float] = (55.0, 95.0)
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self) -> None:
        shape = tuple(int(s) for s in self.volume_shape)
        object.__setattr__(self, "volume_shape", shape)
        object.__setattr__(self, "age_range", tuple(float(a) for a in self.age_range))
        if len(shape) != 3 or any(s < MIN_VOLUME_SIDE for s in shape):
            raise ValueError(
                f"volume_shape must be 3 sides each >= {MIN_VOLUME_SIDE}, got {shape}"
            )
        if not self.spacing_mm > 0:
            raise ValueError("spacing_mm must be positive")
        a_min, a_max = self.age_range
        if not a_min < a_max:
            raise ValueError(f"age_range must satisfy a_min < a_max, got {self.age_range}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.seed < 0:
            raise ValueError("seed must be a nonnegative integer")


@dataclass(frozen=True)
class SynthSubject:
    """One generated head: intensity volume, lesion mask, recorded age."""

    volume: VolumeImage
    seg_mask: np.ndarray
    age_years: float


def ventricle_radius_voxels(cfg: SynthConfig, age_years: float) -> float:
    """Ventricle radius in voxels at a given (geometry) age."""
    return VENTRICLE_BASE_RADIUS + VENTRICLE_GROWTH_PER_YEAR * (age_years - cfg.age_range[0])


def shell_thickness_voxels(cfg: SynthConfig, age_years: float) -> float:
    """Cortical shell thickness in voxels at a given (geometry) age."""
    t = SHELL_BASE_THICKNESS - SHELL_THINNING_PER_YEAR * (age_years - cfg.age_range[0])
    return max(t, SHELL_MIN_THICKNESS)


def ventricle_voxel_count(volume: VolumeImage) -> int:
    """Number of ventricle voxels in a noise-free generated volume (identified
    by their exact intensity)."""
    return int(np.count_nonzero(volume.voxels == VENTRICLE_INTENSITY))


def _ellipsoid_mask(
    shape: Tuple[int, int, int],
    center: np.ndarray,
    semi_axes: np.ndarray,
) -> np.ndarray:
    ii, jj, kk = np.ogrid[0 : shape[0], 0 : shape[1], 0 : shape[2]]
    return (
        ((ii - center[0]) / semi_axes[0]) ** 2
        + ((jj - center[1]) / semi_axes[1]) ** 2
        + ((kk - center[2]) / semi_axes[2]) ** 2
    ) <= 1.0


def _render(
    cfg: SynthConfig, rng: np.random.Generator, geometry_age: float
) -> Tuple[np.ndarray, np.ndarray]:
    """Paint one head at the given geometry age.  Consumes the lesion-placement
    and noise draws from ``rng`` (in that order)."""
    shape = cfg.volume_shape
    center = (np.asarray(shape, dtype=np.float64) - 1.0) / 2.0
    brain_axes = np.asarray(BRAIN_AXES_FRACTION) * np.asarray(shape, dtype=np.float64)

    thickness = shell_thickness_voxels(cfg, geometry_age)
    inner_axes = brain_axes - thickness
    vent_radius = ventricle_radius_voxels(cfg, geometry_age)
    if vent_radius <= 0:
        raise GenerationError(f"ventricle radius {vent_radius:.2f} <= 0 at age {geometry_age:.1f}")
    if vent_radius + 2.0 > inner_axes.min():
        raise GenerationError(
            f"ventricle radius {vent_radius:.2f} does not fit inside the brain "
            f"(inner semi-axes {np.round(inner_axes, 2).tolist()}); "
            f"volume_shape {shape} is too small for age {geometry_age:.1f}"
        )

    brain = _ellipsoid_mask(shape, center, brain_axes)
    inner = _ellipsoid_mask(shape, center, inner_axes)
    ventricle = _ellipsoid_mask(shape, center, np.full(3, vent_radius))

    lesion = None
    for _ in range(MAX_LESION_ATTEMPTS):
        semi = rng.uniform(*LESION_SEMIAXIS_RANGE, size=3)
        direction = rng.normal(size=3)
        norm = np.linalg.norm(direction)
        frac = rng.uniform(*LESION_RADIAL_FRACTION)
        if norm < 1e-9:
            continue
        direction /= norm
        offset = direction * frac * (inner_axes - semi)
        candidate = _ellipsoid_mask(shape, center + offset, semi)
        if not candidate.any():
            continue
        if (candidate & ~inner).any():
            continue
        if (candidate & ventricle).any():
            continue
        lesion = candidate
        break
    if lesion is None:
        raise GenerationError(
            f"could not place a lesion disjoint from the ventricle after "
            f"{MAX_LESION_ATTEMPTS} attempts (volume_shape {shape} too small "
            f"for geometry age {geometry_age:.1f})"
        )

    volume = np.full(shape, BACKGROUND_INTENSITY, dtype=np.float64)
    volume[brain] = TISSUE_INTENSITY
    volume[brain & ~inner] = SHELL_INTENSITY
    volume[ventricle] = VENTRICLE_INTENSITY
    volume[lesion] = LESION_INTENSITY

    if cfg.noise_sigma > 0:
        volume = volume + rng.normal(0.0, cfg.noise_sigma, size=shape)
    return volume, lesion


def _subject_rng(cfg: SynthConfig, subject_index: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, subject_index])


def generate_subject(
    cfg: SynthConfig,
    subject_index: int,
    age_years: Optional[float] = None,
    geometry_offset_years: float = 0.0,
) -> SynthSubject:
    """Generate one subject deterministically from (cfg.seed, subject_index).

    When ``age_years`` is omitted it is drawn uniformly from cfg.age_range.
    ``geometry_offset_years`` renders structures that are older (or younger)
    than the recorded age, which is how diagnostic-group effects are emulated.
    """
    if subject_index < 0:
        raise ValueError("subject_index must be >= 0")
    if not np.isfinite(geometry_offset_years):
        raise ValueError("geometry_offset_years must be finite")
    rng = _subject_rng(cfg, subject_index)
    if age_years is None:
        age_years = float(rng.uniform(*cfg.age_range))
    volume, lesion = _render(cfg, rng, float(age_years) + float(geometry_offset_years))
    if not lesion.any():
        raise GenerationError("generated segmentation mask is empty")
    return SynthSubject(
        volume=VolumeImage(voxels=volume, spacing_mm=cfg.spacing_mm),
        seg_mask=lesion,
        age_years=float(age_years),
    )


def _normalize_counts(
    counts: Mapping,
) -> Dict[Split, Dict[DiagnosisGroup, int]]:
    """Accept {split: n} (implicitly CN) or {split: {group: n}}."""
    normalized: Dict[Split, Dict[DiagnosisGroup, int]] = {}
    for split_key, value in counts.items():
        split = as_split(split_key)
        if isinstance(value, Mapping):
            per_group = {as_group(g): int(n) for g, n in value.items()}
        else:
            per_group = {DiagnosisGroup.CN: int(value)}
        for group, n in per_group.items():
            if n < 0:
                raise ValueError(f"count for {split.value}/{group.value} must be >= 0")
        normalized[split] = per_group
    return normalized


def _normalize_offsets(group_offsets: Optional[Mapping]) -> Dict[DiagnosisGroup, float]:
    offsets = {g: 0.0 for g in DiagnosisGroup}
    if group_offsets:
        for g, years in group_offsets.items():
            offsets[as_group(g)] = float(years)
    for g, years in offsets.items():
        if not np.isfinite(years):
            raise ValueError(f"offset for group {g.value} must be finite")
    if offsets[DiagnosisGroup.CN] != 0.0:
        raise ValueError("CN geometry offset must be 0")
    return offsets


def _write_array(path: Path, arr: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.save(fh, arr)


def _write_sidecar(path: Path, subject: SynthSubject, group: DiagnosisGroup) -> None:
    meta = {
        "age_years": subject.age_years,
        "group": group.value,
        "shape": list(subject.volume.voxels.shape),
        "spacing_mm": subject.volume.spacing_mm,
    }
    path.write_text(json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8")


def generate_cohort(
    cfg: SynthConfig,
    counts: Mapping,
    group_offsets: Optional[Mapping] = None,
    out_dir: Union[str, Path] = ".",
    start_index: int = 0,
) -> Tuple[DatasetManifest, List[Path]]:
    """Generate a cohort and store it under ``out_dir``.

    ``counts`` maps split -> count (CN only) or split -> {group: count}.
    Group offsets make MCI/AD geometry correspond to ``age + offset`` years
    while the manifest records the chronological age.  Layout per subject:
    ``volumes/<id>.vol`` (array), ``volumes/<id>.seg`` (lesion mask),
    ``volumes/<id>.json`` (age, group, shape, spacing).

    Returns the manifest (image_refs relative to ``out_dir``) and the list of
    files written.  The whole cohort is a pure function of the arguments.
    """
    per_split = _normalize_counts(counts)
    offsets = _normalize_offsets(group_offsets)
    out_dir = Path(out_dir)

    records = []
    written: List[Path] = []
    index = int(start_index)
    for split in Split:
        for group in DiagnosisGroup:
            n = per_split.get(split, {}).get(group, 0)
            for _ in range(n):
                sid = f"s{index:04d}"
                subject = generate_subject(
                    cfg, index, geometry_offset_years=offsets[group]
                )
                vol_path = out_dir / "volumes" / f"{sid}.vol"
                _write_array(vol_path, subject.volume.voxels.astype(np.float32))
                _write_array(vol_path.with_suffix(".seg"), subject.seg_mask.astype(np.uint8))
                _write_sidecar(vol_path.with_suffix(".json"), subject, group)
                written.extend(
                    [vol_path, vol_path.with_suffix(".seg"), vol_path.with_suffix(".json")]
                )
                records.append(
                    SubjectRecord(
                        subject_id=sid,
                        image_ref=f"volumes/{sid}.vol",
                        age_years=subject.age_years,
                        group=group,
                        split=split,
                    )
                )
                index += 1
    manifest = DatasetManifest(tuple(records), spacing_mm=cfg.spacing_mm)
    return manifest, written


def _load_array(path: Path) -> np.ndarray:
    with open(path, "rb") as fh:
        loaded = np.load(fh, allow_pickle=False)
        if isinstance(loaded, np.lib.npyio.NpzFile):
            arr = loaded[loaded.files[0]]
            loaded.close()
            return arr
        return loaded


class VolumeSource:
    """Resolves manifest image references to volumes and segmentation masks.

    File references are resolved relative to ``base_dir`` (conventionally the
    manifest's directory); absolute references are honored as-is.  References
    of the form ``synth:<seed>`` generate the subject on the fly from the
    configured generator (subject_index 0, seed overridden).
    """

    def __init__(
        self,
        base_dir: Union[str, Path],
        spacing_mm: float = DEFAULT_SPACING_MM,
        synth_config: Optional[SynthConfig] = None,
    ):
        self.base_dir = Path(base_dir)
        self.spacing_mm = float(spacing_mm)
        self.synth_config = synth_config

    def _synth_subject(self, ref: str) -> SynthSubject:
        seed_text = ref.split(":", 1)[1]
        try:
            seed = int(seed_text)
        except ValueError:
            raise ValueError(f"bad synthetic reference {ref!r}: seed must be an integer") from None
        cfg = replace(self.synth_config or SynthConfig(), seed=seed)
        return generate_subject(cfg, 0)

    def volume(self, record: SubjectRecord) -> VolumeImage:
        ref = record.image_ref
        if ref.startswith("synth:"):
            return self._synth_subject(ref).volume
        path = self.base_dir / ref
        if not path.exists():
            raise FileNotFoundError(f"volume for subject {record.subject_id!r} not found: {path}")
        voxels = _load_array(path)
        spacing = self.spacing_mm
        sidecar = path.with_suffix(".json")
        if sidecar.exists():
            spacing = float(json.loads(sidecar.read_text(encoding="utf-8"))["spacing_mm"])
        return VolumeImage(voxels=voxels, spacing_mm=spacing)

    def mask(self, record: SubjectRecord) -> np.ndarray:
        ref = record.image_ref
        if ref.startswith("synth:"):
            return self._synth_subject(ref).seg_mask
        path = (self.base_dir / ref).with_suffix(".seg")
        if not path.exists():
            raise FileNotFoundError(
                f"segmentation mask for subject {record.subject_id!r} not found: {path}"
            )
        return _load_array(path).astype(bool)
