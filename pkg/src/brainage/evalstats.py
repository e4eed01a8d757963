"""Evaluation mathematics: MAE, overlap (Dice) score, brain-age delta
records, one-sided Mann-Whitney U tests (exact and normal-approximate),
pairwise group tests, and multi-run aggregation/reporting.

The U statistic counts pairs where a sample-A value exceeds a sample-B value,
with ties counting one half.  For small samples the p-value is computed by
exact enumeration of every label assignment of the pooled values (ties are
handled inherently because the actual values are permuted); for larger
samples a normal approximation with continuity correction 1/2 and
tie-corrected variance is used.  Only the one-sided "A stochastically
greater" alternative is offered; the clinically worse group is always placed
on the A side, so two-sided use cannot happen silently.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .core import DiagnosisGroup, as_group

EXACT_THRESHOLD_DEFAULT = 8

METHOD_EXACT = "exact"
METHOD_NORMAL = "normal_approx"

ALTERNATIVE_A_GREATER = "a_greater"

GROUP_PAIRS = (
    (DiagnosisGroup.CN, DiagnosisGroup.MCI),
    (DiagnosisGroup.CN, DiagnosisGroup.AD),
    (DiagnosisGroup.MCI, DiagnosisGroup.AD),
)


class StatsError(ValueError):
    """Invalid statistical input."""


class GroupMissingError(StatsError):
    """A required diagnosis group has no records."""


def mae(pairs: Sequence[Tuple[float, float]]) -> float:
    """Mean absolute error over (predicted, target) pairs, in years."""
    if len(pairs) == 0:
        raise StatsError("mae of an empty list is undefined")
    return float(np.mean([abs(p - t) for p, t in pairs]))


def dice(pred_mask: np.ndarray, true_mask: np.ndarray) -> float:
    """Overlap score 2|A∩B| / (|A|+|B|) between binary masks.

    Both-empty returns 1.0 (correctly predicting absence); one-empty gives 0.
    """
    pred = np.asarray(pred_mask).astype(bool)
    true = np.asarray(true_mask).astype(bool)
    if pred.shape != true.shape:
        raise StatsError(f"mask shapes differ: {pred.shape} vs {true.shape}")
    size = int(pred.sum()) + int(true.sum())
    if size == 0:
        return 1.0
    return 2.0 * int((pred & true).sum()) / size


@dataclass(frozen=True)
class MwuResult:
    u_statistic: float
    p_value: float
    method: str
    n_a: int
    n_b: int
    tie_correction_applied: bool

    def __post_init__(self) -> None:
        if not 0.0 <= self.u_statistic <= self.n_a * self.n_b:
            raise StatsError(
                f"u_statistic {self.u_statistic} outside [0, {self.n_a * self.n_b}]"
            )
        if not 0.0 <= self.p_value <= 1.0:
            raise StatsError(f"p_value {self.p_value} outside [0, 1]")


def _u_statistic(a: np.ndarray, b: np.ndarray) -> float:
    gt = (a[:, None] > b[None, :]).sum()
    eq = (a[:, None] == b[None, :]).sum()
    return float(gt) + 0.5 * float(eq)


def _exact_p(pooled: np.ndarray, n_a: int, u_obs: float) -> float:
    """P(U >= u_obs) by full enumeration of label assignments of the pooled
    values.  U values are multiples of 1/2, so comparisons are exact."""
    n = len(pooled)
    wins = (pooled[:, None] > pooled[None, :]).astype(np.float64)
    wins += 0.5 * (pooled[:, None] == pooled[None, :])
    np.fill_diagonal(wins, 0.0)
    combos = np.array(list(itertools.combinations(range(n), n_a)), dtype=np.intp)
    member = np.zeros((combos.shape[0], n), dtype=bool)
    member[np.arange(combos.shape[0])[:, None], combos] = True
    scores = member.astype(np.float64) @ wins
    u_all = (scores * ~member).sum(axis=1)
    return float(np.count_nonzero(u_all >= u_obs) / u_all.shape[0])


def _normal_p(pooled: np.ndarray, n_a: int, n_b: int, u_obs: float) -> Tuple[float, bool]:
    """One-sided p via the normal approximation with continuity correction
    and tie-corrected variance.  Returns (p, ties_present)."""
    n = n_a + n_b
    _, counts = np.unique(pooled, return_counts=True)
    tie_sum = float(np.sum(counts.astype(np.float64) ** 3 - counts))
    ties_present = bool(tie_sum > 0)
    mu = n_a * n_b / 2.0
    var = (n_a * n_b / 12.0) * ((n + 1) - tie_sum / (n * (n - 1)))
    if var <= 0:
        # All pooled values identical: U is exactly its null mean; no evidence.
        return 1.0, ties_present
    z = (u_obs - mu - 0.5) / math.sqrt(var)
    p = 0.5 * math.erfc(z / math.sqrt(2.0))
    return min(max(p, 0.0), 1.0), ties_present


def mwu(
    sample_a: Sequence[float],
    sample_b: Sequence[float],
    alternative: str = ALTERNATIVE_A_GREATER,
    exact_threshold: int = EXACT_THRESHOLD_DEFAULT,
) -> MwuResult:
    """One-sided Mann-Whitney U test of whether sample A is stochastically
    greater than sample B.

    Exact enumeration is used when max(n_a, n_b) <= exact_threshold; the
    normal approximation otherwise.  ``tie_correction_applied`` reports
    whether ties altered the approximate variance (always False on the exact
    path, where ties need no correction).
    """
    if alternative != ALTERNATIVE_A_GREATER:
        raise StatsError(
            f"unsupported alternative {alternative!r}; only "
            f"{ALTERNATIVE_A_GREATER!r} is offered (two-sided tests are "
            f"deliberately unimplemented)"
        )
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise StatsError("both samples must be nonempty")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise StatsError("samples must be finite")
    n_a, n_b = int(a.size), int(b.size)
    u_obs = _u_statistic(a, b)
    pooled = np.concatenate([a, b])
    if max(n_a, n_b) <= exact_threshold:
        p = _exact_p(pooled, n_a, u_obs)
        return MwuResult(u_obs, p, METHOD_EXACT, n_a, n_b, False)
    p, ties = _normal_p(pooled, n_a, n_b, u_obs)
    return MwuResult(u_obs, p, METHOD_NORMAL, n_a, n_b, ties)


@dataclass(frozen=True)
class PredictionRecord:
    """Per-subject prediction: the unit of all downstream statistics.

    ``delta`` is the brain-age delta (predicted minus chronological age) and
    must equal that difference exactly as stored.
    """

    subject_id: str
    group: DiagnosisGroup
    chronological_age: float
    predicted_age: float
    delta: float

    def __post_init__(self) -> None:
        for name in ("chronological_age", "predicted_age", "delta"):
            if not math.isfinite(getattr(self, name)):
                raise StatsError(f"{name} must be finite")
        if self.delta != self.predicted_age - self.chronological_age:
            raise StatsError(
                f"subject {self.subject_id!r}: delta {self.delta!r} != "
                f"predicted - chronological "
                f"({self.predicted_age!r} - {self.chronological_age!r})"
            )

    @classmethod
    def from_ages(
        cls,
        subject_id: str,
        group: Union[DiagnosisGroup, str],
        chronological_age: float,
        predicted_age: float,
    ) -> "PredictionRecord":
        return cls(
            subject_id=subject_id,
            group=as_group(group),
            chronological_age=float(chronological_age),
            predicted_age=float(predicted_age),
            delta=float(predicted_age) - float(chronological_age),
        )


PREDICTIONS_COLUMNS = ("subject_id", "group", "chronological_age", "predicted_age", "delta")


def write_predictions_csv(
    path: Union[str, Path], records: Sequence[PredictionRecord]
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(PREDICTIONS_COLUMNS)
        for rec in records:
            writer.writerow(
                [
                    rec.subject_id,
                    rec.group.value,
                    repr(rec.chronological_age),
                    repr(rec.predicted_age),
                    repr(rec.delta),
                ]
            )
    return path


def read_predictions_csv(path: Union[str, Path]) -> Tuple[PredictionRecord, ...]:
    path = Path(path)
    if not path.exists():
        raise StatsError(f"predictions file not found: {path}")
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != PREDICTIONS_COLUMNS:
            raise StatsError(
                f"{path}: bad predictions header; expected "
                f"{','.join(PREDICTIONS_COLUMNS)!r}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(PREDICTIONS_COLUMNS):
                raise StatsError(f"{path}: line {lineno}: expected 5 fields")
            sid, group_text, chron, pred, delta = (c.strip() for c in row)
            try:
                records.append(
                    PredictionRecord(
                        subject_id=sid,
                        group=as_group(group_text),
                        chronological_age=float(chron),
                        predicted_age=float(pred),
                        delta=float(delta),
                    )
                )
            except (ValueError, StatsError) as exc:
                raise StatsError(f"{path}: line {lineno}: {exc}") from None
    return tuple(records)


def pairwise_group_tests(
    records: Sequence[PredictionRecord],
    exact_threshold: int = EXACT_THRESHOLD_DEFAULT,
) -> Dict[Tuple[DiagnosisGroup, DiagnosisGroup], MwuResult]:
    """One-sided tests per group pair, alternative: the clinically worse
    group's delta is stochastically greater (MCI>CN, AD>CN, AD>MCI)."""
    deltas: Dict[DiagnosisGroup, List[float]] = {g: [] for g in DiagnosisGroup}
    for rec in records:
        deltas[rec.group].append(rec.delta)
    for group in DiagnosisGroup:
        if not deltas[group]:
            raise GroupMissingError(f"group {group.value} absent")
    results = {}
    for reference, worse in GROUP_PAIRS:
        results[(reference, worse)] = mwu(
            deltas[worse], deltas[reference], exact_threshold=exact_threshold
        )
    return results


@dataclass(frozen=True)
class RunAggregate:
    """Mean / population std / max over one value per run."""

    values: Tuple[float, ...]
    mean: float
    std: float
    max: float


def aggregate_runs(values: Sequence[float]) -> RunAggregate:
    if len(values) == 0:
        raise StatsError("cannot aggregate zero runs")
    arr = np.asarray(values, dtype=np.float64)
    return RunAggregate(
        values=tuple(float(v) for v in arr),
        mean=float(arr.mean()),
        std=float(arr.std()),  # population std
        max=float(arr.max()),
    )


# --------------------------------------------------------------------------
# Multi-run report
# --------------------------------------------------------------------------

REPORT_COLUMNS = (
    "backbone",
    "pretraining",
    "split",
    "mae_mean",
    "mae_std",
    "p_cn_mci_mean",
    "p_cn_mci_max",
    "p_cn_ad_mean",
    "p_cn_ad_max",
    "p_mci_ad_mean",
    "p_mci_ad_max",
    "n_runs",
)

_PAIR_SLUGS = {
    (DiagnosisGroup.CN, DiagnosisGroup.MCI): "p_cn_mci",
    (DiagnosisGroup.CN, DiagnosisGroup.AD): "p_cn_ad",
    (DiagnosisGroup.MCI, DiagnosisGroup.AD): "p_mci_ad",
}


@dataclass(frozen=True)
class RunMetrics:
    """Metrics of one trained model on one split."""

    backbone: str
    pretraining: str
    split: str
    seed: int
    mae: float
    p_values: Mapping

    def key(self) -> Tuple[str, str, str]:
        return (self.backbone, self.pretraining, self.split)


@dataclass(frozen=True)
class ReportRow:
    backbone: str
    pretraining: str
    split: str
    mae: RunAggregate
    p_values: Mapping
    n_runs: int


@dataclass(frozen=True)
class Report:
    rows: Tuple[ReportRow, ...]

    def to_csv_text(self) -> str:
        lines = [",".join(REPORT_COLUMNS)]
        for row in self.rows:
            cells = [row.backbone, row.pretraining, row.split]
            cells += [repr(row.mae.mean), repr(row.mae.std)]
            for pair in GROUP_PAIRS:
                agg = row.p_values[pair]
                cells += [repr(agg.mean), repr(agg.max)]
            cells.append(str(row.n_runs))
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"

    def to_table_text(self) -> str:
        headers = [
            "backbone",
            "pretraining",
            "split",
            "mae",
            "p(CN,MCI)",
            "p(CN,AD)",
            "p(MCI,AD)",
            "runs",
        ]
        body = []
        for row in self.rows:
            cells = [row.backbone, row.pretraining, row.split]
            cells.append(f"{row.mae.mean:.3f} (σ={row.mae.std:.3f})")
            for pair in GROUP_PAIRS:
                agg = row.p_values[pair]
                cells.append(f"{agg.mean:.3f} ({agg.max:.3f})")
            cells.append(str(row.n_runs))
            body.append(cells)
        widths = [
            max(len(headers[c]), *(len(r[c]) for r in body)) if body else len(headers[c])
            for c in range(len(headers))
        ]
        lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths)).rstrip()]
        for cells in body:
            lines.append("  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip())
        lines.append("")
        lines.append(
            "σ is the population standard deviation across runs; "
            "p-value cells are mean (maximum)."
        )
        return "\n".join(lines) + "\n"

    def save(self, csv_path: Union[str, Path], table_path: Optional[Union[str, Path]] = None) -> None:
        csv_path = Path(csv_path)
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        csv_path.write_text(self.to_csv_text(), encoding="utf-8")
        if table_path is not None:
            Path(table_path).write_text(self.to_table_text(), encoding="utf-8")


def evaluation_report(runs: Sequence[RunMetrics]) -> Report:
    """Aggregate per-run metrics into one row per (backbone, pretraining,
    split) configuration, ordered stably by that key."""
    if len(runs) == 0:
        raise StatsError("no runs to report")
    grouped: Dict[Tuple[str, str, str], List[RunMetrics]] = {}
    for run in runs:
        if set(run.p_values.keys()) != set(GROUP_PAIRS):
            raise StatsError(
                f"run (backbone={run.backbone}, seed={run.seed}) is missing "
                f"group-pair p-values"
            )
        grouped.setdefault(run.key(), []).append(run)
    for key, members in grouped.items():
        seeds = [m.seed for m in members]
        if len(seeds) != len(set(seeds)):
            raise StatsError(
                f"inconsistent configuration {key}: duplicate run seeds {seeds}"
            )
    rows = []
    for key in sorted(grouped):
        members = grouped[key]
        mae_agg = aggregate_runs([m.mae for m in members])
        p_aggs = {
            pair: aggregate_runs([m.p_values[pair] for m in members])
            for pair in GROUP_PAIRS
        }
        rows.append(
            ReportRow(
                backbone=key[0],
                pretraining=key[1],
                split=key[2],
                mae=mae_agg,
                p_values=p_aggs,
                n_runs=len(members),
            )
        )
    return Report(tuple(rows))
