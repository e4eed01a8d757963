import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from brainage.core import filter_split
from brainage.synthdata import SynthConfig, VolumeSource, generate_cohort


@pytest.fixture(scope="session")
def small_cohort(tmp_path_factory):
    """A small on-disk cohort shared by training/CLI tests.

    6 CN train, 4 CN val, 4 CN + 3 MCI + 3 AD test, group offsets 4/8 years.
    """
    out_dir = tmp_path_factory.mktemp("cohort")
    cfg = SynthConfig(seed=4242, noise_sigma=0.05)
    manifest, _ = generate_cohort(
        cfg,
        {"train": {"CN": 6}, "val": {"CN": 4}, "test": {"CN": 4, "MCI": 3, "AD": 3}},
        {"CN": 0, "MCI": 4, "AD": 8},
        out_dir=out_dir,
    )
    return {
        "cfg": cfg,
        "dir": out_dir,
        "manifest": manifest,
        "train": filter_split(manifest, "train"),
        "val": filter_split(manifest, "val"),
        "test": filter_split(manifest, "test"),
        "source": VolumeSource(out_dir, cfg.spacing_mm),
    }


@pytest.fixture(scope="session")
def seg_cohort(tmp_path_factory):
    """A small cohort for segmentation training tests (masks included)."""
    out_dir = tmp_path_factory.mktemp("segdata")
    cfg = SynthConfig(seed=777, noise_sigma=0.05)
    manifest, _ = generate_cohort(cfg, {"train": {"CN": 4}}, None, out_dir=out_dir)
    return {
        "cfg": cfg,
        "dir": out_dir,
        "manifest": manifest,
        "source": VolumeSource(out_dir, cfg.spacing_mm),
    }
