"""Training stages: segmentation pre-training and slice-wise age regression
with moving-average early stopping and the fixed-budget retraining rule.

Age regression minimizes the per-slice squared error against the subject's
chronological age; validation is scored at volume level (slice predictions
averaged per subject) because that is the reported metric.  Training batches
draw slices, not volumes, uniformly at random without replacement per epoch.

Test-split records are rejected by every training entry point before any
weight update; datasets record which splits they consumed so the guarantee
is checkable from the outside.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F

from .core import DatasetManifest, DiagnosisGroup, Split
from .models import (
    ARCH_RESNET50,
    ARCH_UNET_ENCODER,
    AgeModel,
    LINEAGE_IMAGENET,
    LINEAGE_SEG_PRETRAIN,
    SegModel,
)
from .preprocess import BandRule, volume_to_model_input, normalize_slice
from .synthdata import VolumeSource

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

SEG_LOSS_DICE = "dice"
SEG_LOSS_DICE_PLUS_CE = "dice_plus_ce"
SEG_LOSSES = (SEG_LOSS_DICE, SEG_LOSS_DICE_PLUS_CE)


class TrainingDataError(ValueError):
    """Training input violates a data contract (wrong group, empty set, ...)."""


class LeakageError(TrainingDataError):
    """Test-split records were routed into a training stage."""


class TrainingAbort(RuntimeError):
    """Training stopped on a non-finite loss."""


@dataclass(frozen=True)
class AgeTrainConfig:
    """Age-regression hyperparameters.  The optimizer is fixed to Adam
    semantics (moment decays 0.9/0.999, epsilon 1e-8).  A learning rate of
    None resolves to the architecture/lineage default at train time."""

    batch_size: int = 64
    learning_rate: Optional[float] = None
    max_epochs: int = 50
    ma_window: int = 5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.ma_window < 1:
            raise ValueError("ma_window must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.learning_rate is not None and not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")


@dataclass(frozen=True)
class SegTrainConfig:
    """Segmentation pre-training hyperparameters (fixed epoch budget)."""

    epochs: int
    batch_size: int = 16
    learning_rate: float = 1e-3
    loss: str = SEG_LOSS_DICE_PLUS_CE
    seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.loss not in SEG_LOSSES:
            raise ValueError(f"loss must be one of {SEG_LOSSES}, got {self.loss!r}")


def default_seg_epochs(arch: str) -> int:
    """Fixed pre-training budgets: 30 epochs for the plain encoder, 50 for the
    residual trunk with decoder."""
    return 30 if arch == ARCH_UNET_ENCODER else 50


def default_learning_rate(arch: str, lineage: Sequence[str]) -> float:
    """Tuned defaults: 1e-3 for a fresh unet trunk, 1e-5 for a resnet that has
    both natural-image and segmentation pre-training, 1e-4 otherwise."""
    tokens = set(lineage)
    if arch == ARCH_UNET_ENCODER and LINEAGE_SEG_PRETRAIN not in tokens:
        return 1e-3
    if (
        arch == ARCH_RESNET50
        and LINEAGE_IMAGENET in tokens
        and LINEAGE_SEG_PRETRAIN in tokens
    ):
        return 1e-5
    return 1e-4


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_mse: float
    val_mae: Optional[float] = None
    val_slice_mae: Optional[float] = None


@dataclass(frozen=True)
class TrainHistory:
    """Per-epoch training record plus the selected stopping epoch."""

    epochs: Tuple[EpochRecord, ...]
    stopped_epoch: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "epochs", tuple(self.epochs))
        for i, rec in enumerate(self.epochs, start=1):
            if rec.epoch != i:
                raise ValueError(f"epochs must be contiguous from 1; record {i} has epoch {rec.epoch}")
        if not 1 <= self.stopped_epoch <= len(self.epochs):
            raise ValueError(
                f"stopped_epoch {self.stopped_epoch} outside 1..{len(self.epochs)}"
            )

    def val_maes(self) -> List[float]:
        return [r.val_mae for r in self.epochs if r.val_mae is not None]

    def to_jsonl(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = []
        for rec in self.epochs:
            lines.append(
                json.dumps(
                    {
                        "epoch": rec.epoch,
                        "train_mse": rec.train_mse,
                        "val_mae": rec.val_mae,
                        "val_slice_mae": rec.val_slice_mae,
                    },
                    sort_keys=True,
                )
            )
        lines.append(json.dumps({"stopped_epoch": self.stopped_epoch}))
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    @classmethod
    def from_jsonl(cls, path: Union[str, Path]) -> "TrainHistory":
        records = []
        stopped = None
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            obj = json.loads(line)
            if "stopped_epoch" in obj:
                stopped = int(obj["stopped_epoch"])
            else:
                records.append(
                    EpochRecord(
                        epoch=int(obj["epoch"]),
                        train_mse=float(obj["train_mse"]),
                        val_mae=None if obj.get("val_mae") is None else float(obj["val_mae"]),
                        val_slice_mae=(
                            None
                            if obj.get("val_slice_mae") is None
                            else float(obj["val_slice_mae"])
                        ),
                    )
                )
        if stopped is None:
            raise ValueError(f"{path}: missing stopped_epoch line")
        return cls(tuple(records), stopped)


def moving_average_best(val_maes: Sequence[float], window: int) -> int:
    """Epoch (1-based) minimizing the trailing moving average.

    The average at epoch e covers the last min(e, window) values including
    the current one; ties break to the earliest epoch.
    """
    if len(val_maes) == 0:
        raise ValueError("empty validation series")
    if window < 1:
        raise ValueError("window must be >= 1")
    best_epoch = 1
    best_ma = math.inf
    for e in range(1, len(val_maes) + 1):
        tail = val_maes[max(0, e - window) : e]
        ma = sum(tail) / len(tail)
        if ma < best_ma:
            best_ma = ma
            best_epoch = e
    return best_epoch


def retrain_budget(stop_epochs: Sequence[int]) -> int:
    """Fixed epoch budget for retraining: the mean of the early-stopping
    epochs, rounded half-up, never below 1."""
    if len(stop_epochs) == 0:
        raise ValueError("stop_epochs must be nonempty")
    if any(e < 1 for e in stop_epochs):
        raise ValueError("stop_epochs must be positive")
    mean = sum(stop_epochs) / len(stop_epochs)
    return max(1, math.floor(mean + 0.5))


# --------------------------------------------------------------------------
# Slice datasets
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class _SubjectSpan:
    subject_id: str
    group: DiagnosisGroup
    age_years: float
    start: int
    count: int


class SliceDataset:
    """All model-input slices of a manifest, with per-slice age targets.

    Slices are stored single-channel; channel replication happens at batch
    assembly.  ``splits_seen`` records every split that contributed data, so
    leakage guarantees can be audited from outside the training loop.
    """

    def __init__(
        self,
        slices: np.ndarray,
        targets: np.ndarray,
        subjects: Sequence[_SubjectSpan],
        splits_seen: frozenset,
    ):
        self.slices = slices
        self.targets = targets
        self.subjects = tuple(subjects)
        self.splits_seen = splits_seen

    @classmethod
    def from_manifest(
        cls,
        manifest: DatasetManifest,
        source: VolumeSource,
        rule: BandRule,
    ) -> "SliceDataset":
        all_slices = []
        targets = []
        subjects = []
        start = 0
        hw = None
        for rec in manifest:
            volume = source.volume(rec)
            stack = volume_to_model_input(volume, rule, channels=1, source_id=rec.subject_id)
            arr = np.asarray(stack.slices, dtype=np.float32)[:, 0]
            if hw is None:
                hw = arr.shape[1:]
            elif arr.shape[1:] != hw:
                raise TrainingDataError(
                    f"subject {rec.subject_id!r} has slice shape {arr.shape[1:]}, "
                    f"expected {hw}"
                )
            all_slices.append(arr)
            targets.append(np.full(arr.shape[0], rec.age_years, dtype=np.float64))
            subjects.append(
                _SubjectSpan(rec.subject_id, rec.group, rec.age_years, start, arr.shape[0])
            )
            start += arr.shape[0]
        if not all_slices:
            raise TrainingDataError("manifest contains no records")
        return cls(
            np.concatenate(all_slices),
            np.concatenate(targets),
            subjects,
            frozenset(rec.split for rec in manifest),
        )

    def __len__(self) -> int:
        return int(self.slices.shape[0])

    @property
    def slice_hw(self) -> Tuple[int, int]:
        return (int(self.slices.shape[1]), int(self.slices.shape[2]))

    def batch(self, idx: np.ndarray, channels: int) -> Tuple[torch.Tensor, torch.Tensor]:
        x = torch.from_numpy(self.slices[idx]).unsqueeze(1)
        if channels == 3:
            x = x.repeat(1, 3, 1, 1)
        y = torch.from_numpy(self.targets[idx].astype(np.float32))
        return x, y


def _forward_all(model: AgeModel, ds: SliceDataset, batch_size: int = 256) -> np.ndarray:
    """Per-slice predictions over a whole dataset, in dataset order."""
    channels = model.backbone.spec.in_channels
    was_training = model.training
    model.eval()
    preds = np.empty(len(ds), dtype=np.float64)
    try:
        with torch.no_grad():
            for start in range(0, len(ds), batch_size):
                idx = np.arange(start, min(start + batch_size, len(ds)))
                x, _ = ds.batch(idx, channels)
                preds[idx] = model(x).double().numpy()
    finally:
        model.train(was_training)
    return preds


def evaluate_slice_mse(model: AgeModel, ds: SliceDataset, batch_size: int = 256) -> float:
    """Mean squared per-slice error over a dataset on frozen weights."""
    preds = _forward_all(model, ds, batch_size)
    err = preds - ds.targets.astype(np.float64)
    return float(np.mean(err * err))


def evaluate_volume_mae(
    model: AgeModel, ds: SliceDataset, batch_size: int = 256
) -> Tuple[float, float]:
    """(volume-level MAE, slice-level MAE): volume predictions average the
    per-slice outputs of each subject."""
    preds = _forward_all(model, ds, batch_size)
    slice_mae = float(np.mean(np.abs(preds - ds.targets.astype(np.float64))))
    errors = [
        abs(preds[s.start : s.start + s.count].mean() - s.age_years) for s in ds.subjects
    ]
    return float(np.mean(errors)), slice_mae


def predict_dataset_volumes(
    model: AgeModel, ds: SliceDataset, batch_size: int = 256
) -> List[Tuple[str, DiagnosisGroup, float, float]]:
    """Per-subject (id, group, chronological age, predicted age)."""
    preds = _forward_all(model, ds, batch_size)
    return [
        (s.subject_id, s.group, s.age_years, float(preds[s.start : s.start + s.count].mean()))
        for s in ds.subjects
    ]


# --------------------------------------------------------------------------
# Guards
# --------------------------------------------------------------------------


def _reject_test_split(manifest: DatasetManifest, op: str) -> None:
    offenders = [r.subject_id for r in manifest if r.split == Split.TEST]
    if offenders:
        raise LeakageError(
            f"{op} received test-split records (no training stage may touch "
            f"the test split): {', '.join(offenders[:5])}"
            + ("..." if len(offenders) > 5 else "")
        )


def _require_cn_only(manifest: DatasetManifest, op: str) -> None:
    offenders = [r.subject_id for r in manifest if r.group != DiagnosisGroup.CN]
    if offenders:
        raise TrainingDataError(
            f"{op} trains on CN subjects only; non-CN records: "
            f"{', '.join(offenders[:5])}" + ("..." if len(offenders) > 5 else "")
        )


# --------------------------------------------------------------------------
# Age training
# --------------------------------------------------------------------------


def _fit_age(
    model: AgeModel,
    train_ds: SliceDataset,
    cfg: AgeTrainConfig,
    epochs: int,
    lr: float,
    val_ds: Optional[SliceDataset],
) -> Tuple[List[EpochRecord], int, Optional[dict]]:
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    optimizer = torch.optim.Adam(model.parameters(), lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)
    channels = model.backbone.spec.in_channels
    n = len(train_ds)

    records: List[EpochRecord] = []
    val_maes: List[float] = []
    best_ma = math.inf
    best_state: Optional[dict] = None
    best_epoch = epochs
    for epoch in range(1, epochs + 1):
        model.train()
        perm = rng.permutation(n)
        sq_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            x, y = train_ds.batch(idx, channels)
            pred = model(x)
            loss = F.mse_loss(pred, y)
            if not torch.isfinite(loss):
                raise TrainingAbort(
                    f"non-finite loss {loss.item()} at epoch {epoch}, "
                    f"batch starting {start} (lr={lr}, batch_size={cfg.batch_size})"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            sq_sum += float(loss.detach()) * len(idx)
        train_mse = sq_sum / n

        if val_ds is not None:
            val_mae, val_slice_mae = evaluate_volume_mae(model, val_ds)
            val_maes.append(val_mae)
            tail = val_maes[max(0, epoch - cfg.ma_window) : epoch]
            ma = sum(tail) / len(tail)
            if ma < best_ma:
                best_ma = ma
                best_epoch = epoch
                best_state = copy.deepcopy(model.state_dict())
            records.append(EpochRecord(epoch, train_mse, val_mae, val_slice_mae))
        else:
            records.append(EpochRecord(epoch, train_mse))
    if val_ds is not None:
        stopped = moving_average_best(val_maes, cfg.ma_window)
        assert stopped == best_epoch, "online snapshot disagrees with selection rule"
        return records, stopped, best_state
    return records, epochs, None


def train_age(
    model: AgeModel,
    train: DatasetManifest,
    val: DatasetManifest,
    cfg: AgeTrainConfig,
    source: VolumeSource,
    band_rule: BandRule,
    val_source: Optional[VolumeSource] = None,
) -> Tuple[AgeModel, TrainHistory]:
    """First-stage age training on CN subjects with moving-average early
    stopping on volume-level validation MAE.  Returns the model restored to
    its best epoch plus the full history."""
    _reject_test_split(train, "train_age")
    _reject_test_split(val, "train_age")
    _require_cn_only(train, "train_age")
    _require_cn_only(val, "train_age")
    if len(train) == 0:
        raise TrainingDataError("training manifest is empty")
    if len(val) == 0:
        raise TrainingDataError("validation manifest is empty (early stopping undefined)")

    lr = cfg.learning_rate
    if lr is None:
        lr = default_learning_rate(model.backbone.spec.arch, model.backbone.lineage)
    train_ds = SliceDataset.from_manifest(train, source, band_rule)
    val_ds = SliceDataset.from_manifest(val, val_source or source, band_rule)
    assert Split.TEST not in train_ds.splits_seen | val_ds.splits_seen
    records, stopped, best_state = _fit_age(
        model, train_ds, cfg, cfg.max_epochs, lr, val_ds
    )
    if best_state is not None:
        model.load_state_dict(best_state)
    return model, TrainHistory(tuple(records), stopped)


def train_final(
    model: AgeModel,
    train_plus_val: DatasetManifest,
    budget_epochs: int,
    cfg: AgeTrainConfig,
    source: VolumeSource,
    band_rule: BandRule,
) -> Tuple[AgeModel, TrainHistory]:
    """Second-stage training on the union of train and validation data for a
    fixed epoch budget; no early stopping, no validation, and never any
    test-split record."""
    if budget_epochs < 1:
        raise ValueError("budget_epochs must be >= 1")
    _reject_test_split(train_plus_val, "train_final")
    _require_cn_only(train_plus_val, "train_final")
    if len(train_plus_val) == 0:
        raise TrainingDataError("training manifest is empty")

    lr = cfg.learning_rate
    if lr is None:
        lr = default_learning_rate(model.backbone.spec.arch, model.backbone.lineage)
    train_ds = SliceDataset.from_manifest(train_plus_val, source, band_rule)
    assert Split.TEST not in train_ds.splits_seen
    records, _, _ = _fit_age(model, train_ds, cfg, budget_epochs, lr, None)
    return model, TrainHistory(tuple(records), budget_epochs)


# --------------------------------------------------------------------------
# Segmentation training
# --------------------------------------------------------------------------


class SegSliceDataset:
    """Every axial slice of every volume (no band discard), normalized, with
    the matching mask slice."""

    def __init__(
        self,
        images: np.ndarray,
        masks: np.ndarray,
        subjects: Sequence[Tuple[str, int, int]],
        splits_seen: frozenset,
    ):
        self.images = images
        self.masks = masks
        self.subjects = tuple(subjects)
        self.splits_seen = splits_seen

    @classmethod
    def from_manifest(
        cls, manifest: DatasetManifest, source: VolumeSource
    ) -> "SegSliceDataset":
        images = []
        masks = []
        subjects = []
        start = 0
        for rec in manifest:
            volume = source.volume(rec)
            mask = np.asarray(source.mask(rec))
            if mask.shape != volume.voxels.shape:
                raise TrainingDataError(
                    f"subject {rec.subject_id!r}: mask shape {mask.shape} != "
                    f"volume shape {volume.voxels.shape}"
                )
            if not np.isin(mask, (0, 1)).all():
                raise TrainingDataError(
                    f"subject {rec.subject_id!r}: mask is not binary"
                )
            n_axial = volume.voxels.shape[2]
            img_slices = np.stack(
                [
                    normalize_slice(volume.voxels[:, :, k]).astype(np.float32)
                    for k in range(n_axial)
                ]
            )
            mask_slices = np.moveaxis(mask.astype(np.float32), 2, 0)
            images.append(img_slices)
            masks.append(np.ascontiguousarray(mask_slices))
            subjects.append((rec.subject_id, start, n_axial))
            start += n_axial
        if not images:
            raise TrainingDataError("manifest contains no records")
        return cls(
            np.concatenate(images),
            np.concatenate(masks),
            subjects,
            frozenset(rec.split for rec in manifest),
        )

    def __len__(self) -> int:
        return int(self.images.shape[0])

    def batch(self, idx: np.ndarray, channels: int) -> Tuple[torch.Tensor, torch.Tensor]:
        x = torch.from_numpy(self.images[idx]).unsqueeze(1)
        if channels == 3:
            x = x.repeat(1, 3, 1, 1)
        y = torch.from_numpy(self.masks[idx]).unsqueeze(1)
        return x, y


def _soft_dice_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    # Smoothing keeps the loss defined (and near 0) on all-empty batches.
    probs = torch.sigmoid(logits)
    num = 2.0 * (probs * targets).sum() + 1.0
    den = probs.sum() + targets.sum() + 1.0
    return 1.0 - num / den


def _seg_loss(logits: torch.Tensor, targets: torch.Tensor, kind: str) -> torch.Tensor:
    loss = _soft_dice_loss(logits, targets)
    if kind == SEG_LOSS_DICE_PLUS_CE:
        loss = loss + F.binary_cross_entropy_with_logits(logits, targets)
    return loss


def evaluate_seg_dice(model: SegModel, ds: SegSliceDataset, batch_size: int = 32) -> float:
    """Mean volume-level overlap score at threshold 0.5 (both-empty counts
    as a perfect 1.0)."""
    channels = model.backbone.spec.in_channels
    was_training = model.training
    model.eval()
    inter = np.zeros(len(ds.subjects))
    pred_sum = np.zeros(len(ds.subjects))
    true_sum = np.zeros(len(ds.subjects))
    starts = np.array([s[1] for s in ds.subjects])
    try:
        with torch.no_grad():
            for start in range(0, len(ds), batch_size):
                idx = np.arange(start, min(start + batch_size, len(ds)))
                x, y = ds.batch(idx, channels)
                pred = (torch.sigmoid(model(x)) > 0.5).float()
                owners = np.searchsorted(starts, idx, side="right") - 1
                for row, si in enumerate(owners):
                    inter[si] += float((pred[row] * y[row]).sum())
                    pred_sum[si] += float(pred[row].sum())
                    true_sum[si] += float(y[row].sum())
    finally:
        model.train(was_training)
    scores = []
    for si in range(len(ds.subjects)):
        denom = pred_sum[si] + true_sum[si]
        scores.append(1.0 if denom == 0 else 2.0 * inter[si] / denom)
    return float(np.mean(scores))


def train_seg(
    model: SegModel,
    data: DatasetManifest,
    cfg: SegTrainConfig,
    source: VolumeSource,
    eval_data: Optional[DatasetManifest] = None,
    eval_source: Optional[VolumeSource] = None,
) -> Tuple[SegModel, List[Dict]]:
    """Segmentation training for exactly cfg.epochs (fixed budget).  History
    holds per-epoch train loss and, when an eval split is supplied, its mean
    volume-level overlap score."""
    if len(data) == 0:
        raise TrainingDataError("segmentation manifest is empty")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    ds = SegSliceDataset.from_manifest(data, source)
    eval_ds = (
        SegSliceDataset.from_manifest(eval_data, eval_source or source)
        if eval_data is not None
        else None
    )
    optimizer = torch.optim.Adam(
        model.parameters(), lr=cfg.learning_rate, betas=ADAM_BETAS, eps=ADAM_EPS
    )
    channels = model.backbone.spec.in_channels
    n = len(ds)
    history: List[Dict] = []
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        perm = rng.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            x, y = ds.batch(idx, channels)
            loss = _seg_loss(model(x), y, cfg.loss)
            if not torch.isfinite(loss):
                raise TrainingAbort(
                    f"non-finite segmentation loss {loss.item()} at epoch "
                    f"{epoch}, batch starting {start} (lr={cfg.learning_rate})"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            loss_sum += float(loss.detach()) * len(idx)
        entry: Dict = {"epoch": epoch, "train_loss": loss_sum / n}
        if eval_ds is not None:
            entry["eval_dice"] = evaluate_seg_dice(model, eval_ds)
        history.append(entry)
    return model, history
