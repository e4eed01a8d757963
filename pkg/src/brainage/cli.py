"""Command-line protocol driver: synthesize data, pre-train, fine-tune,
predict, and report, from a single JSON experiment configuration.

Commands: ``synth``, ``pretrain``, ``train``, ``predict``, ``report``.
Relative paths in the configuration resolve against the configuration file's
directory; the ``BRAINAGE_OUT_DIR`` environment variable overrides the
configured output directory.  Exit codes: 0 success, 2 validation/config
error, 3 partial prediction failure, 4 training abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime
import hashlib
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from . import evalstats, models, training
from .core import (
    DEFAULT_SPACING_MM,
    DatasetManifest,
    ManifestError,
    Split,
    concat_manifests,
    filter_split,
    load_manifest,
    save_manifest,
)
from .evalstats import (
    GroupMissingError,
    PredictionRecord,
    RunMetrics,
    StatsError,
    evaluation_report,
    read_predictions_csv,
    write_predictions_csv,
)
from .models import (
    BackboneSpec,
    LINEAGE_AGE_FINAL,
    LINEAGE_AGE_TRAIN,
    LINEAGE_SEG_PRETRAIN,
    ModelSpecError,
    assemble_age_model,
    assemble_seg_model,
    build_backbone,
    load_age_model,
    load_backbone_weights,
    save_age_checkpoint,
    save_backbone_checkpoint,
    transplant_backbone,
)
from .preprocess import BandRule, band_profile, volume_to_model_input
from .synthdata import GenerationError, SynthConfig, VolumeSource, generate_cohort
from .training import (
    AgeTrainConfig,
    LeakageError,
    SegTrainConfig,
    TrainingAbort,
    TrainingDataError,
    default_seg_epochs,
    retrain_budget,
    train_age,
    train_final,
    train_seg,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PARTIAL_PREDICT = 3
EXIT_TRAINING_ABORT = 4

ENV_OUT_DIR = "BRAINAGE_OUT_DIR"

HEAD_BIAS_MEAN_AGE = "mean_age"
HEAD_BIAS_ZERO = "zero"


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass(frozen=True)
class PretrainSettings:
    enabled: bool
    data_manifest: Optional[Path] = None
    epochs: Optional[int] = None
    batch_size: int = 16
    learning_rate: float = 1e-3
    loss: str = training.SEG_LOSS_DICE_PLUS_CE


@dataclass(frozen=True)
class SynthSettings:
    config: SynthConfig
    counts: Dict
    group_offsets: Dict
    pretrain_subjects: int = 0


@dataclass(frozen=True)
class ExperimentPaths:
    train_manifest: Path
    val_manifest: Path
    test_manifest: Path
    output_dir: Path


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    backbone: BackboneSpec
    pretrain: PretrainSettings
    age_train: AgeTrainConfig
    head_bias: str
    band_rule_name: str
    seeds: Tuple[int, ...]
    paths: ExperimentPaths
    synth: Optional[SynthSettings]
    config_hash: str

    @property
    def band_rule(self) -> BandRule:
        return band_profile(self.band_rule_name)

    @property
    def spacing_mm(self) -> float:
        return self.synth.config.spacing_mm if self.synth else DEFAULT_SPACING_MM

    def pretraining_label(self) -> str:
        if self.backbone.init == models.INIT_IMAGENET:
            return "imagenet+seg" if self.pretrain.enabled else "imagenet"
        return "seg" if self.pretrain.enabled else "none"


def _require(mapping: dict, key: str, context: str):
    if key not in mapping:
        raise ConfigError(f"missing {context} field {key!r}")
    return mapping[key]


def _resolve(base: Path, value: str) -> Path:
    path = Path(value)
    return path if path.is_absolute() else (base / path)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    base = path.parent
    config_hash = hashlib.sha256(
        json.dumps(raw, sort_keys=True).encode("utf-8")
    ).hexdigest()

    name = str(_require(raw, "name", "config"))

    backbone_raw = _require(raw, "backbone", "config")
    try:
        backbone = BackboneSpec(
            arch=_require(backbone_raw, "arch", "backbone"),
            init=backbone_raw.get("init", models.INIT_RANDOM),
            stage_channel_plan=(
                tuple(backbone_raw["stage_channel_plan"])
                if backbone_raw.get("stage_channel_plan")
                else None
            ),
        )
    except ModelSpecError as exc:
        raise ConfigError(f"backbone: {exc}") from None

    pretrain_raw = raw.get("pretrain", {"enabled": False})
    enabled = bool(pretrain_raw.get("enabled", False))
    if not enabled:
        extra = set(pretrain_raw) - {"enabled"}
        if extra:
            raise ConfigError(
                f"pretrain.enabled is false, so no other pretrain fields are "
                f"allowed (got {sorted(extra)})"
            )
        pretrain = PretrainSettings(enabled=False)
    else:
        manifest_value = pretrain_raw.get("data_manifest")
        pretrain = PretrainSettings(
            enabled=True,
            data_manifest=_resolve(base, manifest_value) if manifest_value else None,
            epochs=int(pretrain_raw["epochs"]) if "epochs" in pretrain_raw else None,
            batch_size=int(pretrain_raw.get("batch_size", 16)),
            learning_rate=float(pretrain_raw.get("learning_rate", 1e-3)),
            loss=str(pretrain_raw.get("loss", training.SEG_LOSS_DICE_PLUS_CE)),
        )

    age_raw = dict(raw.get("age_train", {}))
    if "seed" in age_raw:
        raise ConfigError("age_train.seed is not allowed; seeds are set at the experiment level")
    head_bias = age_raw.pop("head_bias", HEAD_BIAS_MEAN_AGE)
    if head_bias not in (HEAD_BIAS_MEAN_AGE, HEAD_BIAS_ZERO):
        raise ConfigError(f"age_train.head_bias must be 'mean_age' or 'zero', got {head_bias!r}")
    try:
        age_train = AgeTrainConfig(
            batch_size=int(age_raw.get("batch_size", 64)),
            learning_rate=(
                float(age_raw["learning_rate"])
                if age_raw.get("learning_rate") is not None
                else None
            ),
            max_epochs=int(age_raw.get("max_epochs", 50)),
            ma_window=int(age_raw.get("ma_window", 5)),
        )
    except ValueError as exc:
        raise ConfigError(f"age_train: {exc}") from None

    band_rule_name = str(raw.get("band_rule", "mni"))
    try:
        band_profile(band_rule_name)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    seeds_raw = raw.get("seeds", [0, 1, 2, 3, 4])
    seeds = tuple(int(s) for s in seeds_raw)
    if not seeds:
        raise ConfigError("seeds must be nonempty")
    if len(set(seeds)) != len(seeds):
        raise ConfigError(f"seeds must be distinct, got {list(seeds)}")

    paths_raw = _require(raw, "paths", "config")
    output_dir = os.environ.get(ENV_OUT_DIR) or _require(paths_raw, "output_dir", "paths")
    paths = ExperimentPaths(
        train_manifest=_resolve(base, _require(paths_raw, "train_manifest", "paths")),
        val_manifest=_resolve(base, _require(paths_raw, "val_manifest", "paths")),
        test_manifest=_resolve(base, _require(paths_raw, "test_manifest", "paths")),
        output_dir=_resolve(base, str(output_dir)),
    )

    synth = None
    if "synth" in raw:
        synth_raw = raw["synth"]
        try:
            synth_config = SynthConfig(
                volume_shape=tuple(synth_raw.get("volume_shape", (64, 64, 64))),
                spacing_mm=float(synth_raw.get("spacing_mm", DEFAULT_SPACING_MM)),
                age_range=tuple(synth_raw.get("age_range", (55.0, 95.0))),
                noise_sigma=float(synth_raw.get("noise_sigma", 0.05)),
                seed=int(synth_raw.get("seed", 0)),
            )
        except ValueError as exc:
            raise ConfigError(f"synth: {exc}") from None
        synth = SynthSettings(
            config=synth_config,
            counts=dict(_require(synth_raw, "counts", "synth")),
            group_offsets=dict(synth_raw.get("group_offsets", {})),
            pretrain_subjects=int(synth_raw.get("pretrain_subjects", 0)),
        )

    return ExperimentConfig(
        name=name,
        backbone=backbone,
        pretrain=pretrain,
        age_train=age_train,
        head_bias=head_bias,
        band_rule_name=band_rule_name,
        seeds=seeds,
        paths=paths,
        synth=synth,
        config_hash=config_hash,
    )


def _append_run_record(
    config: ExperimentConfig,
    seed: Optional[int],
    stage: str,
    checkpoint: Optional[Path] = None,
    metrics: Optional[dict] = None,
) -> None:
    config.paths.output_dir.mkdir(parents=True, exist_ok=True)
    record = {
        "config_hash": config.config_hash,
        "seed": seed,
        "stage": stage,
        "checkpoint": str(checkpoint) if checkpoint else None,
        "metrics": metrics or {},
        "created_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    with open(config.paths.output_dir / "run_records.jsonl", "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def _rebase_refs(manifest: DatasetManifest, from_dir: Path, to_dir: Path) -> DatasetManifest:
    """Rewrite file refs so they stay valid from a manifest saved in to_dir."""
    records = []
    for rec in manifest:
        if rec.image_ref.startswith("synth:"):
            records.append(rec)
            continue
        target = (from_dir / rec.image_ref).resolve()
        rel = os.path.relpath(target, to_dir.resolve())
        records.append(dataclasses.replace(rec, image_ref=rel))
    return DatasetManifest(tuple(records), spacing_mm=manifest.spacing_mm)


def _absolute_refs(manifest: DatasetManifest, base_dir: Path) -> DatasetManifest:
    records = []
    for rec in manifest:
        if rec.image_ref.startswith("synth:"):
            records.append(rec)
            continue
        records.append(
            dataclasses.replace(rec, image_ref=str((base_dir / rec.image_ref).resolve()))
        )
    return DatasetManifest(tuple(records), spacing_mm=manifest.spacing_mm)


def _source_for(config: ExperimentConfig, manifest_path: Path) -> VolumeSource:
    return VolumeSource(
        base_dir=manifest_path.parent,
        spacing_mm=config.spacing_mm,
        synth_config=config.synth.config if config.synth else None,
    )


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_synth(config: ExperimentConfig, force: bool = False) -> int:
    if config.synth is None:
        raise ConfigError("config has no synth section")
    settings = config.synth
    total = 0
    for value in settings.counts.values():
        total += sum(value.values()) if isinstance(value, dict) else int(value)
    if total == 0:
        raise ConfigError("empty cohort: all counts are zero")

    out_dir = config.paths.output_dir
    volumes_dir = out_dir / "volumes"
    if volumes_dir.exists() and any(volumes_dir.iterdir()) and not force:
        raise ConfigError(
            f"output volumes directory {volumes_dir} is not empty; rerun with --force"
        )

    manifest, written = generate_cohort(
        settings.config,
        settings.counts,
        settings.group_offsets,
        out_dir=out_dir,
    )
    targets = {
        Split.TRAIN: config.paths.train_manifest,
        Split.VAL: config.paths.val_manifest,
        Split.TEST: config.paths.test_manifest,
    }
    for split, target in targets.items():
        subset = filter_split(manifest, split)
        save_manifest(_rebase_refs(subset, out_dir, target.parent), target)
        print(f"wrote {target} ({len(subset)} records)")

    if settings.pretrain_subjects > 0:
        if config.pretrain.data_manifest is None:
            raise ConfigError(
                "synth.pretrain_subjects > 0 requires pretrain.data_manifest"
            )
        pre_dir = out_dir / "pretrain"
        pre_manifest, pre_written = generate_cohort(
            settings.config,
            {"train": {"CN": settings.pretrain_subjects}},
            None,
            out_dir=pre_dir,
            start_index=len(manifest),
        )
        target = config.pretrain.data_manifest
        save_manifest(_rebase_refs(pre_manifest, pre_dir, target.parent), target)
        written.extend(pre_written)
        print(f"wrote {target} ({len(pre_manifest)} records)")

    _append_run_record(config, None, "synth", metrics={"files": len(written)})
    print(f"generated {total + settings.pretrain_subjects} subjects under {out_dir}")
    return EXIT_OK


def _pretrain_checkpoint_path(config: ExperimentConfig, seed: int) -> Path:
    return config.paths.output_dir / "checkpoints" / f"pretrain_seed{seed}.pt"


def cmd_pretrain(config: ExperimentConfig, seeds: Optional[Sequence[int]] = None) -> int:
    if not config.pretrain.enabled:
        raise ConfigError("pretraining not enabled in config")
    if config.pretrain.data_manifest is None:
        raise ConfigError("pretrain.data_manifest is required")
    manifest = load_manifest(config.pretrain.data_manifest, spacing_mm=config.spacing_mm)
    source = _source_for(config, config.pretrain.data_manifest)
    epochs = config.pretrain.epochs or default_seg_epochs(config.backbone.arch)

    for seed in seeds or config.seeds:
        backbone = build_backbone(config.backbone, seed=seed)
        seg = assemble_seg_model(backbone, out_channels=1)
        cfg = SegTrainConfig(
            epochs=epochs,
            batch_size=config.pretrain.batch_size,
            learning_rate=config.pretrain.learning_rate,
            loss=config.pretrain.loss,
            seed=seed,
        )
        seg, history = train_seg(seg, manifest, cfg, source)
        weights = transplant_backbone(seg)
        weights.lineage = weights.lineage + (LINEAGE_SEG_PRETRAIN,)
        path = _pretrain_checkpoint_path(config, seed)
        save_backbone_checkpoint(path, weights, trained_epochs=epochs, seed=seed)
        final_loss = history[-1]["train_loss"]
        _append_run_record(
            config, seed, "pretrain", path, {"train_loss": final_loss, "epochs": epochs}
        )
        print(f"seed {seed}: pretrained backbone -> {path} (final loss {final_loss:.4f})")
    return EXIT_OK


def _build_seed_backbone(config: ExperimentConfig, seed: int):
    if config.pretrain.enabled:
        ckpt = _pretrain_checkpoint_path(config, seed)
        if not ckpt.exists():
            raise ConfigError(
                f"missing pretrain checkpoint for seed {seed}: {ckpt} "
                f"(run the pretrain command first)"
            )
        # The checkpoint supplies every weight (and the lineage), so the
        # scaffold is built with plain random init even for imagenet configs.
        scaffold = dataclasses.replace(config.backbone, init=models.INIT_RANDOM)
        backbone = build_backbone(scaffold, seed=seed)
        weights = load_backbone_weights(ckpt)
        models.apply_backbone_weights(backbone, weights)
        return backbone
    return build_backbone(config.backbone, seed=seed)


def cmd_train(config: ExperimentConfig, seeds: Optional[Sequence[int]] = None) -> int:
    seeds = tuple(seeds or config.seeds)
    paths = config.paths
    test_resolved = paths.test_manifest.resolve()
    for label, manifest_path in (
        ("train", paths.train_manifest),
        ("val", paths.val_manifest),
    ):
        if manifest_path.resolve() == test_resolved:
            raise LeakageError(
                f"{label}_manifest points at the test manifest "
                f"({manifest_path}); the test split must never enter training"
            )

    train_manifest = load_manifest(paths.train_manifest, spacing_mm=config.spacing_mm)
    val_manifest = load_manifest(paths.val_manifest, spacing_mm=config.spacing_mm)
    train_source = _source_for(config, paths.train_manifest)
    val_source = _source_for(config, paths.val_manifest)
    rule = config.band_rule

    if len(train_manifest) == 0:
        raise TrainingDataError("training manifest is empty")
    probe = volume_to_model_input(
        train_source.volume(train_manifest[0]), rule, channels=1
    )
    input_hw = probe.slice_hw
    mean_age = (
        sum(r.age_years for r in train_manifest) / len(train_manifest)
        if config.head_bias == HEAD_BIAS_MEAN_AGE
        else None
    )

    ckpt_dir = paths.output_dir / "checkpoints"
    hist_dir = paths.output_dir / "histories"
    stopped_epochs: List[int] = []
    for seed in seeds:
        backbone = _build_seed_backbone(config, seed)
        model = assemble_age_model(backbone, input_hw, mean_age=mean_age)
        cfg = dataclasses.replace(config.age_train, seed=seed)
        model, history = train_age(
            model, train_manifest, val_manifest, cfg,
            source=train_source, band_rule=rule, val_source=val_source,
        )
        stopped_epochs.append(history.stopped_epoch)
        lineage = backbone.lineage + (LINEAGE_AGE_TRAIN,)
        ckpt = save_age_checkpoint(
            ckpt_dir / f"age_seed{seed}_early.pt",
            model,
            lineage=lineage,
            trained_epochs=history.stopped_epoch,
            seed=seed,
        )
        history.to_jsonl(hist_dir / f"age_seed{seed}.jsonl")
        best = history.epochs[history.stopped_epoch - 1]
        _append_run_record(
            config, seed, "train", ckpt,
            {"stopped_epoch": history.stopped_epoch, "val_mae": best.val_mae},
        )
        print(
            f"seed {seed}: early-stopped at epoch {history.stopped_epoch} "
            f"(val MAE {best.val_mae:.3f}) -> {ckpt}"
        )

    budget = retrain_budget(stopped_epochs)
    print(f"retrain budget: {budget} epochs (from stopped epochs {stopped_epochs})")
    union = concat_manifests(
        _absolute_refs(train_manifest, paths.train_manifest.parent),
        _absolute_refs(val_manifest, paths.val_manifest.parent),
    )
    union_source = VolumeSource(
        base_dir=Path("."),
        spacing_mm=config.spacing_mm,
        synth_config=config.synth.config if config.synth else None,
    )
    for seed in seeds:
        backbone = _build_seed_backbone(config, seed)
        model = assemble_age_model(backbone, input_hw, mean_age=mean_age)
        cfg = dataclasses.replace(config.age_train, seed=seed)
        model, history = train_final(
            model, union, budget, cfg, source=union_source, band_rule=rule
        )
        lineage = backbone.lineage + (LINEAGE_AGE_TRAIN, LINEAGE_AGE_FINAL)
        ckpt = save_age_checkpoint(
            ckpt_dir / f"age_seed{seed}_final.pt",
            model,
            lineage=lineage,
            trained_epochs=budget,
            seed=seed,
        )
        _append_run_record(config, seed, "final_train", ckpt, {"budget_epochs": budget})
        print(f"seed {seed}: final model ({budget} epochs) -> {ckpt}")
    return EXIT_OK


def cmd_predict(
    config: ExperimentConfig,
    checkpoint: Path,
    manifest_path: Path,
    out_csv: Path,
) -> int:
    model, meta = load_age_model(checkpoint)
    manifest = load_manifest(manifest_path, spacing_mm=config.spacing_mm)
    source = _source_for(config, manifest_path)
    rule = config.band_rule
    channels = model.backbone.spec.in_channels

    records: List[PredictionRecord] = []
    failures: List[dict] = []
    for rec in manifest:
        try:
            volume = source.volume(rec)
            stack = volume_to_model_input(volume, rule, channels=channels, source_id=rec.subject_id)
            if list(stack.slice_hw) != list(meta["input_hw"]):
                raise ModelSpecError(
                    f"checkpoint expects {meta['input_hw']} slices, "
                    f"volume yields {list(stack.slice_hw)}"
                )
            predicted = models.predict_volume_age(model, stack)
            records.append(
                PredictionRecord.from_ages(rec.subject_id, rec.group, rec.age_years, predicted)
            )
        except Exception as exc:  # per-subject failures must not kill the batch
            failures.append({"subject_id": rec.subject_id, "reason": str(exc)})
    write_predictions_csv(out_csv, records)
    sidecar = Path(str(out_csv) + ".failures.json")
    if failures:
        sidecar.write_text(json.dumps(failures, indent=2, sort_keys=True) + "\n", "utf-8")
    elif sidecar.exists():
        sidecar.unlink()
    _append_run_record(
        config, meta.get("seed"), "predict", Path(checkpoint),
        {"rows": len(records), "failures": len(failures)},
    )
    print(f"wrote {out_csv} ({len(records)} rows, {len(failures)} failures)")
    if failures:
        print(f"failures listed in {sidecar}", file=sys.stderr)
        return EXIT_PARTIAL_PREDICT
    return EXIT_OK


def cmd_report(
    config: ExperimentConfig,
    predictions: Sequence[Path],
    split: str = "test",
    out_csv: Optional[Path] = None,
) -> int:
    if not predictions:
        raise ConfigError("report needs at least one predictions CSV")
    runs = []
    for i, path in enumerate(sorted(Path(p) for p in predictions)):
        records = read_predictions_csv(path)
        cn = [r for r in records if r.group == evalstats.DiagnosisGroup.CN]
        if not cn:
            raise GroupMissingError(f"{path}: group CN absent")
        run_mae = evalstats.mae([(r.predicted_age, r.chronological_age) for r in cn])
        try:
            tests = evalstats.pairwise_group_tests(records)
        except GroupMissingError as exc:
            raise GroupMissingError(f"{path}: {exc}") from None
        runs.append(
            RunMetrics(
                backbone=config.backbone.arch,
                pretraining=config.pretraining_label(),
                split=split,
                seed=i,
                mae=run_mae,
                p_values={pair: res.p_value for pair, res in tests.items()},
            )
        )
    report = evaluation_report(runs)
    out_csv = out_csv or (config.paths.output_dir / "report.csv")
    out_table = Path(out_csv).with_suffix(".txt")
    report.save(out_csv, out_table)
    _append_run_record(config, None, "report", Path(out_csv), {"runs": len(runs)})
    print(report.to_table_text())
    print(f"wrote {out_csv} and {out_table}")
    return EXIT_OK


# --------------------------------------------------------------------------
# Argument parsing / entry point
# --------------------------------------------------------------------------


def _parse_seeds(text: Optional[str]) -> Optional[Tuple[int, ...]]:
    if text is None:
        return None
    try:
        seeds = tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError:
        raise ConfigError(f"bad --seeds value {text!r}; expected comma-separated integers")
    if not seeds:
        raise ConfigError("--seeds must name at least one seed")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="brainage",
        description="Brain-age experiment pipeline: synthesize, pretrain, train, predict, report.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic cohort and manifests")
    p.add_argument("--config", required=True)
    p.add_argument("--force", action="store_true", help="overwrite existing volumes")

    p = sub.add_parser("pretrain", help="segmentation pre-training, one backbone per seed")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", help="comma-separated seed override")

    p = sub.add_parser("train", help="age training with early stopping, then fixed-budget retraining")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", help="comma-separated seed override")

    p = sub.add_parser("predict", help="volume-level age predictions for a manifest")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", help="aggregate prediction CSVs into the results table")
    p.add_argument("--config", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", help="report CSV path (default <output_dir>/report.csv)")
    p.add_argument("predictions", nargs="+", help="prediction CSVs (one per run)")

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = load_config(args.config)
        if args.command == "synth":
            return cmd_synth(config, force=args.force)
        if args.command == "pretrain":
            return cmd_pretrain(config, seeds=_parse_seeds(args.seeds))
        if args.command == "train":
            return cmd_train(config, seeds=_parse_seeds(args.seeds))
        if args.command == "predict":
            return cmd_predict(
                config, Path(args.checkpoint), Path(args.manifest), Path(args.out)
            )
        if args.command == "report":
            return cmd_report(
                config,
                [Path(p) for p in args.predictions],
                split=args.split,
                out_csv=Path(args.out) if args.out else None,
            )
        raise ConfigError(f"unknown command {args.command!r}")
    except TrainingAbort as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_TRAINING_ABORT
    except (
        ConfigError,
        ManifestError,
        ModelSpecError,
        TrainingDataError,
        LeakageError,
        StatsError,
        GenerationError,
        FileNotFoundError,
        ValueError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
