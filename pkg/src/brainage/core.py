"""Subject records, dataset manifests, and split handling.

Manifests are plain CSV files with the header
``subject_id,image_ref,age_years,group,split`` -- diff-friendly and easy to
edit by hand.  All types in this module are immutable after construction and
safe to share across concurrent readers.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Union

MANIFEST_COLUMNS = ("subject_id", "image_ref", "age_years", "group", "split")
DEFAULT_SPACING_MM = 2.0
MAX_AGE_YEARS = 130.0


class ManifestError(ValueError):
    """Malformed manifest: bad header, unparseable row, duplicate id."""


class DiagnosisGroup(enum.Enum):
    """Diagnostic group of a subject."""

    CN = "CN"
    MCI = "MCI"
    AD = "AD"

    @classmethod
    def parse(cls, text: str) -> "DiagnosisGroup":
        try:
            return cls(text)
        except ValueError:
            valid = ", ".join(g.value for g in cls)
            raise ManifestError(
                f"unknown group {text!r} (expected one of {valid})"
            ) from None

    def __str__(self) -> str:
        return self.value


class Split(enum.Enum):
    """Dataset split a record belongs to."""

    TRAIN = "train"
    VAL = "val"
    TEST = "test"

    @classmethod
    def parse(cls, text: str) -> "Split":
        try:
            return cls(text)
        except ValueError:
            valid = ", ".join(s.value for s in cls)
            raise ManifestError(
                f"unknown split {text!r} (expected one of {valid})"
            ) from None

    def __str__(self) -> str:
        return self.value


def as_group(value: Union[DiagnosisGroup, str]) -> DiagnosisGroup:
    return value if isinstance(value, DiagnosisGroup) else DiagnosisGroup.parse(value)


def as_split(value: Union[Split, str]) -> Split:
    return value if isinstance(value, Split) else Split.parse(value)


@dataclass(frozen=True)
class SubjectRecord:
    """One subject: identity, chronological age, group, split, image reference.

    ``image_ref`` is either a path (relative to the manifest's directory) or a
    ``synth:<seed>`` reference to a generated volume.
    """

    subject_id: str
    image_ref: str
    age_years: float
    group: DiagnosisGroup
    split: Split

    def __post_init__(self) -> None:
        if not self.subject_id:
            raise ManifestError("subject_id must be nonempty")
        if not self.image_ref:
            raise ManifestError(f"subject {self.subject_id!r}: image_ref must be nonempty")
        if not (0.0 < float(self.age_years) < MAX_AGE_YEARS):
            raise ManifestError(
                f"subject {self.subject_id!r}: age_years {self.age_years} "
                f"outside (0, {MAX_AGE_YEARS:g})"
            )


@dataclass(frozen=True)
class DatasetManifest:
    """An ordered collection of subject records plus the voxel spacing of the
    volumes they reference.

    Spacing is not part of the CSV schema; it is supplied when loading (and
    overridden by per-volume sidecar metadata where available).
    """

    records: tuple
    spacing_mm: float = DEFAULT_SPACING_MM

    def __post_init__(self) -> None:
        object.__setattr__(self, "records", tuple(self.records))
        if not self.spacing_mm > 0:
            raise ManifestError(f"spacing_mm must be positive, got {self.spacing_mm}")
        seen = {}
        for i, rec in enumerate(self.records):
            if rec.subject_id in seen:
                raise ManifestError(
                    f"duplicate subject_id {rec.subject_id!r} "
                    f"(records {seen[rec.subject_id]} and {i})"
                )
            seen[rec.subject_id] = i

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[SubjectRecord]:
        return iter(self.records)

    def __getitem__(self, i: int) -> SubjectRecord:
        return self.records[i]


def load_manifest(
    path: Union[str, Path], spacing_mm: float = DEFAULT_SPACING_MM
) -> DatasetManifest:
    """Load and validate a manifest CSV.

    Every parse failure is reported with the file line number (the header is
    line 1). Row order is preserved.
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    records = []
    seen: dict = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{path}: empty file (missing header)") from None
        if tuple(h.strip() for h in header) != MANIFEST_COLUMNS:
            raise ManifestError(
                f"{path}: bad header {','.join(header)!r}; "
                f"expected {','.join(MANIFEST_COLUMNS)!r}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_COLUMNS):
                raise ManifestError(
                    f"{path}: line {lineno}: expected {len(MANIFEST_COLUMNS)} "
                    f"fields, got {len(row)}"
                )
            sid, ref, age_text, group_text, split_text = (c.strip() for c in row)
            try:
                age = float(age_text)
            except ValueError:
                raise ManifestError(
                    f"{path}: line {lineno}: unparseable age_years {age_text!r}"
                ) from None
            if sid in seen:
                raise ManifestError(
                    f"{path}: duplicate subject_id {sid!r} at lines "
                    f"{seen[sid]} and {lineno}"
                )
            seen[sid] = lineno
            try:
                record = SubjectRecord(
                    subject_id=sid,
                    image_ref=ref,
                    age_years=age,
                    group=DiagnosisGroup.parse(group_text),
                    split=Split.parse(split_text),
                )
            except ManifestError as exc:
                raise ManifestError(f"{path}: line {lineno}: {exc}") from None
            records.append(record)
    return DatasetManifest(tuple(records), spacing_mm=spacing_mm)


def save_manifest(manifest: DatasetManifest, path: Union[str, Path]) -> Path:
    """Write a manifest CSV; floats use their shortest exact representation,
    so save/load round trips are field-identical."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for rec in manifest:
            writer.writerow(
                [
                    rec.subject_id,
                    rec.image_ref,
                    repr(float(rec.age_years)),
                    rec.group.value,
                    rec.split.value,
                ]
            )
    return path


def filter_split(
    manifest: DatasetManifest,
    split: Optional[Union[Split, str]] = None,
    group: Optional[Union[DiagnosisGroup, str]] = None,
) -> DatasetManifest:
    """Subset of the manifest matching the given split and/or group,
    preserving record order. An empty result is valid."""
    want_split = as_split(split) if split is not None else None
    want_group = as_group(group) if group is not None else None
    kept = tuple(
        rec
        for rec in manifest
        if (want_split is None or rec.split == want_split)
        and (want_group is None or rec.group == want_group)
    )
    return DatasetManifest(kept, spacing_mm=manifest.spacing_mm)


def concat_manifests(*manifests: DatasetManifest) -> DatasetManifest:
    """Concatenate manifests (e.g. train + val for final retraining).

    All inputs must share one spacing; duplicate subject ids are rejected.
    """
    if not manifests:
        raise ManifestError("no manifests to concatenate")
    spacing = manifests[0].spacing_mm
    for m in manifests[1:]:
        if m.spacing_mm != spacing:
            raise ManifestError(
                f"cannot concatenate manifests with different spacing "
                f"({spacing} vs {m.spacing_mm})"
            )
    records = tuple(rec for m in manifests for rec in m)
    return DatasetManifest(records, spacing_mm=spacing)
