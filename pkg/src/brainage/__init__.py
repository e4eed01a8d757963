"""Brain-age estimation pipeline.

Segmentation pre-training, backbone transplantation into a slice-wise age
regressor, volume-level prediction by slice averaging, and biomarker
evaluation via brain-age deltas and one-sided Mann-Whitney U tests --
runnable end to end on a built-in synthetic cohort.
"""

from .core import (
    DatasetManifest,
    DiagnosisGroup,
    ManifestError,
    Split,
    SubjectRecord,
    concat_manifests,
    filter_split,
    load_manifest,
    save_manifest,
)
from .evalstats import (
    MwuResult,
    PredictionRecord,
    RunAggregate,
    aggregate_runs,
    dice,
    evaluation_report,
    mae,
    mwu,
    pairwise_group_tests,
)
from .models import (
    AgeModel,
    BackboneSpec,
    SegModel,
    assemble_age_model,
    assemble_seg_model,
    build_backbone,
    predict_volume_age,
    transplant_backbone,
)
from .preprocess import (
    BandRule,
    BandTooSmallError,
    SliceStack,
    VolumeImage,
    band_profile,
    extract_band,
    normalize_slice,
    volume_to_model_input,
)
from .synthdata import (
    GenerationError,
    SynthConfig,
    SynthSubject,
    VolumeSource,
    generate_cohort,
    generate_subject,
)
from .training import (
    AgeTrainConfig,
    LeakageError,
    SegTrainConfig,
    TrainHistory,
    moving_average_best,
    retrain_budget,
    train_age,
    train_final,
    train_seg,
)

__version__ = "0.1.0"
