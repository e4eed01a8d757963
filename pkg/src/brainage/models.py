"""Backbones, task heads, model assembly, and backbone transplantation.

Two feature-extraction trunks are supported:

* ``unet_encoder`` -- a medical-segmentation style 2D encoder (two 3x3
  convolutions per stage, instance normalization, leaky rectifier, strided
  convolution downsampling), single-channel input.
* ``resnet50`` -- the canonical torchvision ResNet-50 trunk, 3-channel input
  (grayscale slices are replicated so pretrained natural-image weights load
  unmodified).

The age head is a single linear unit fully connected to the flattened final
feature map, so the input spatial size is fixed per model and recorded in
checkpoint metadata.  The segmentation head is a U-Net style decoder with a
skip connection from every encoder stage.  Both tasks share the identical
encoder parameter set, which is what makes transplantation lossless.
"""

from __future__ import annotations

import datetime
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .preprocess import SliceStack

ARCH_UNET_ENCODER = "unet_encoder"
ARCH_RESNET50 = "resnet50"
ARCHS = (ARCH_UNET_ENCODER, ARCH_RESNET50)

INIT_RANDOM = "random"
INIT_IMAGENET = "imagenet"
INIT_CHECKPOINT = "checkpoint"
INITS = (INIT_RANDOM, INIT_IMAGENET, INIT_CHECKPOINT)

DEFAULT_UNET_PLAN = (32, 64, 128, 256, 512)
RESNET50_PLAN = (256, 512, 1024, 2048)
RESNET50_STEM_CHANNELS = 64

LEAKY_SLOPE = 0.01

# Lineage tokens recorded in checkpoint metadata.
LINEAGE_RANDOM = "random"
LINEAGE_IMAGENET = "imagenet"
LINEAGE_SEG_PRETRAIN = "seg-pretrain"
LINEAGE_AGE_TRAIN = "age-train"
LINEAGE_AGE_FINAL = "age-final"


class ModelSpecError(ValueError):
    """Invalid backbone/model specification."""


class ShapeError(ValueError):
    """Input tensor shape incompatible with a model's contract."""


class CheckpointMismatchError(RuntimeError):
    """Weights incompatible with the target model; lists offending tensors."""

    def __init__(self, message: str, mismatches: Sequence[str]):
        self.mismatches = list(mismatches)
        detail = "; ".join(self.mismatches)
        super().__init__(f"{message}: {detail}" if detail else message)


@dataclass(frozen=True)
class BackboneSpec:
    """Architecture identity and initialization of a feature extractor."""

    arch: str
    in_channels: Optional[int] = None
    init: str = INIT_RANDOM
    checkpoint_ref: Optional[str] = None
    stage_channel_plan: Optional[Tuple[int, ...]] = None

    def __post_init__(self) -> None:
        if self.arch not in ARCHS:
            raise ModelSpecError(f"unknown arch {self.arch!r} (expected one of {ARCHS})")
        if self.init not in INITS:
            raise ModelSpecError(f"unknown init {self.init!r} (expected one of {INITS})")
        default_channels = 1 if self.arch == ARCH_UNET_ENCODER else 3
        in_channels = default_channels if self.in_channels is None else int(self.in_channels)
        object.__setattr__(self, "in_channels", in_channels)
        if in_channels != default_channels:
            raise ModelSpecError(
                f"{self.arch} consumes {default_channels} channel(s), got {in_channels}"
            )
        if self.init == INIT_IMAGENET and self.arch != ARCH_RESNET50:
            raise ModelSpecError("imagenet initialization is only valid for resnet50")
        if (self.checkpoint_ref is not None) != (self.init == INIT_CHECKPOINT):
            raise ModelSpecError("checkpoint_ref must be present iff init == 'checkpoint'")
        if self.arch == ARCH_UNET_ENCODER:
            plan = self.stage_channel_plan or DEFAULT_UNET_PLAN
            plan = tuple(int(c) for c in plan)
            if len(plan) < 2 or any(c < 1 for c in plan):
                raise ModelSpecError(f"stage_channel_plan must be >= 2 positive widths, got {plan}")
        else:
            if self.stage_channel_plan not in (None, RESNET50_PLAN, tuple(RESNET50_PLAN)):
                raise ModelSpecError(
                    f"resnet50 uses its canonical stage plan {RESNET50_PLAN}; "
                    f"got {self.stage_channel_plan}"
                )
            plan = RESNET50_PLAN
        object.__setattr__(self, "stage_channel_plan", plan)


class ConvBlock(nn.Module):
    """Two 3x3 convolutions with instance normalization and leaky rectifier;
    the first convolution carries the stride."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=stride, padding=1),
            nn.InstanceNorm2d(out_ch, affine=True),
            nn.LeakyReLU(LEAKY_SLOPE, inplace=True),
            nn.Conv2d(out_ch, out_ch, kernel_size=3, padding=1),
            nn.InstanceNorm2d(out_ch, affine=True),
            nn.LeakyReLU(LEAKY_SLOPE, inplace=True),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)


class Backbone(nn.Module):
    """Feature-extraction trunk shared by the age and segmentation models."""

    def __init__(self, spec: BackboneSpec, lineage: Sequence[str]):
        super().__init__()
        self.spec = spec
        self.lineage: Tuple[str, ...] = tuple(lineage)

    @property
    def feature_channels(self) -> int:
        raise NotImplementedError

    @property
    def reduction(self) -> int:
        """Spatial downscaling factor of the final feature map."""
        raise NotImplementedError

    @property
    def skip_channels(self) -> Tuple[int, ...]:
        """Channel widths of forward_stages outputs, shallow to deep."""
        raise NotImplementedError

    def forward_stages(self, x: torch.Tensor) -> List[torch.Tensor]:
        raise NotImplementedError


class UNetEncoder(Backbone):
    """Encoder-with-bottleneck trunk; stage i runs at 1/2^i resolution."""

    def __init__(self, spec: BackboneSpec, lineage: Sequence[str] = (LINEAGE_RANDOM,)):
        super().__init__(spec, lineage)
        plan = spec.stage_channel_plan
        blocks = [ConvBlock(spec.in_channels, plan[0], stride=1)]
        blocks += [ConvBlock(a, b, stride=2) for a, b in zip(plan, plan[1:])]
        self.stages = nn.ModuleList(blocks)

    @property
    def feature_channels(self) -> int:
        return self.spec.stage_channel_plan[-1]

    @property
    def reduction(self) -> int:
        return 2 ** (len(self.spec.stage_channel_plan) - 1)

    @property
    def skip_channels(self) -> Tuple[int, ...]:
        return self.spec.stage_channel_plan

    def forward_stages(self, x: torch.Tensor) -> List[torch.Tensor]:
        outputs = []
        h = x
        for stage in self.stages:
            h = stage(h)
            outputs.append(h)
        return outputs

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for stage in self.stages:
            x = stage(x)
        return x


class ResNet50Backbone(Backbone):
    """torchvision ResNet-50 trunk (classification head dropped)."""

    def __init__(self, spec: BackboneSpec, lineage: Sequence[str] = (LINEAGE_RANDOM,)):
        super().__init__(spec, lineage)
        import torchvision.models as tv_models

        weights = None
        if spec.init == INIT_IMAGENET:
            try:
                weights = tv_models.ResNet50_Weights.DEFAULT
                net = tv_models.resnet50(weights=weights)
            except Exception as exc:
                raise ModelSpecError(
                    f"imagenet weights unavailable ({exc}); requires a local "
                    f"torchvision weight cache or network access"
                ) from exc
        else:
            net = tv_models.resnet50(weights=None)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu)
        self.pool = net.maxpool
        self.layer1 = net.layer1
        self.layer2 = net.layer2
        self.layer3 = net.layer3
        self.layer4 = net.layer4

    @property
    def feature_channels(self) -> int:
        return RESNET50_PLAN[-1]

    @property
    def reduction(self) -> int:
        return 32

    @property
    def skip_channels(self) -> Tuple[int, ...]:
        return (RESNET50_STEM_CHANNELS,) + RESNET50_PLAN

    def forward_stages(self, x: torch.Tensor) -> List[torch.Tensor]:
        x0 = self.stem(x)
        x1 = self.layer1(self.pool(x0))
        x2 = self.layer2(x1)
        x3 = self.layer3(x2)
        x4 = self.layer4(x3)
        return [x0, x1, x2, x3, x4]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward_stages(x)[-1]


@dataclass
class BackboneWeights:
    """Encoder weights detached from whatever model they were trained in."""

    arch: str
    in_channels: int
    stage_channel_plan: Tuple[int, ...]
    lineage: Tuple[str, ...]
    state_dict: Dict[str, torch.Tensor]


def build_backbone(spec: BackboneSpec, seed: Optional[int] = None) -> Backbone:
    """Construct a feature extractor.  With a seed, initialization is
    reproducible bit-for-bit on one machine."""
    if seed is not None:
        torch.manual_seed(seed)
    if spec.arch == ARCH_UNET_ENCODER:
        backbone: Backbone = UNetEncoder(spec)
    else:
        backbone = ResNet50Backbone(spec)
        if spec.init == INIT_IMAGENET:
            backbone.lineage = (LINEAGE_IMAGENET,)
    if spec.init == INIT_CHECKPOINT:
        weights = load_backbone_weights(spec.checkpoint_ref)
        apply_backbone_weights(backbone, weights)
    return backbone


def transplant_backbone(source: nn.Module) -> BackboneWeights:
    """Extract the encoder weights from a backbone, age model, or segmentation
    model; the task head / decoder is discarded."""
    backbone = source if isinstance(source, Backbone) else getattr(source, "backbone", None)
    if not isinstance(backbone, Backbone):
        raise ModelSpecError(f"cannot extract a backbone from {type(source).__name__}")
    state = {k: v.detach().clone() for k, v in backbone.state_dict().items()}
    return BackboneWeights(
        arch=backbone.spec.arch,
        in_channels=backbone.spec.in_channels,
        stage_channel_plan=backbone.spec.stage_channel_plan,
        lineage=backbone.lineage,
        state_dict=state,
    )


def apply_backbone_weights(backbone: Backbone, weights: BackboneWeights) -> Backbone:
    """Load transplanted weights into a freshly built backbone of identical
    spec; forward features afterwards are bit-identical to the source."""
    mismatches = []
    if backbone.spec.arch != weights.arch:
        mismatches.append(f"arch {weights.arch!r} != {backbone.spec.arch!r}")
    if backbone.spec.in_channels != weights.in_channels:
        mismatches.append(
            f"in_channels {weights.in_channels} != {backbone.spec.in_channels}"
        )
    if tuple(backbone.spec.stage_channel_plan) != tuple(weights.stage_channel_plan):
        mismatches.append(
            f"stage_channel_plan {tuple(weights.stage_channel_plan)} != "
            f"{tuple(backbone.spec.stage_channel_plan)}"
        )
    if mismatches:
        raise CheckpointMismatchError("backbone spec mismatch", mismatches)

    own = backbone.state_dict()
    for name in own.keys() - weights.state_dict.keys():
        mismatches.append(f"missing tensor {name}")
    for name in weights.state_dict.keys() - own.keys():
        mismatches.append(f"unexpected tensor {name}")
    for name in own.keys() & weights.state_dict.keys():
        if tuple(own[name].shape) != tuple(weights.state_dict[name].shape):
            mismatches.append(
                f"{name}: shape {tuple(weights.state_dict[name].shape)} != "
                f"{tuple(own[name].shape)}"
            )
    if mismatches:
        raise CheckpointMismatchError("backbone weight mismatch", sorted(mismatches))
    backbone.load_state_dict(weights.state_dict)
    backbone.lineage = tuple(weights.lineage)
    return backbone


class AgeModel(nn.Module):
    """Slice-wise age regressor: backbone plus a single linear output unit
    (no output nonlinearity) over the flattened final feature map."""

    def __init__(
        self,
        backbone: Backbone,
        input_hw: Tuple[int, int],
        mean_age: Optional[float] = None,
    ):
        super().__init__()
        h, w = (int(input_hw[0]), int(input_hw[1]))
        red = backbone.reduction
        if h % red or w % red:
            raise ModelSpecError(
                f"input size {h}x{w} must be a multiple of the backbone "
                f"reduction {red}"
            )
        self.backbone = backbone
        self.input_hw = (h, w)
        flat = backbone.feature_channels * (h // red) * (w // red)
        self.head = nn.Linear(flat, 1)
        with torch.no_grad():
            self.head.bias.fill_(float(mean_age) if mean_age is not None else 0.0)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4:
            raise ShapeError(f"expected (N, C, H, W) input, got shape {tuple(x.shape)}")
        if x.shape[1] != self.backbone.spec.in_channels:
            raise ShapeError(
                f"expected {self.backbone.spec.in_channels} channel(s), got {x.shape[1]}"
            )
        if tuple(x.shape[-2:]) != self.input_hw:
            raise ShapeError(
                f"expected {self.input_hw[0]}x{self.input_hw[1]} slices, "
                f"got {x.shape[-2]}x{x.shape[-1]}"
            )
        features = self.backbone(x)
        return self.head(features.flatten(1)).squeeze(-1)


def assemble_age_model(
    backbone: Backbone,
    input_hw: Tuple[int, int],
    mean_age: Optional[float] = None,
    seed: Optional[int] = None,
) -> AgeModel:
    """Attach the linear age head.  Head weights use the framework's default
    zero-mean fan-in-scaled initialization; the bias starts at the training-set
    mean age when provided (zero otherwise)."""
    if seed is not None:
        torch.manual_seed(seed)
    return AgeModel(backbone, input_hw, mean_age=mean_age)


class _DecoderStage(nn.Module):
    def __init__(self, in_ch: int, skip_ch: int, out_ch: int):
        super().__init__()
        self.block = ConvBlock(in_ch + skip_ch, out_ch)

    def forward(self, x: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        x = F.interpolate(x, size=skip.shape[-2:], mode="nearest")
        return self.block(torch.cat([x, skip], dim=1))


class SegModel(nn.Module):
    """Segmentation network: backbone encoder plus a U-Net style decoder whose
    stages upsample to each encoder stage's spatial size before concatenating
    the skip connection.  Output logits match the input spatial shape."""

    def __init__(self, backbone: Backbone, out_channels: int):
        super().__init__()
        if out_channels < 1:
            raise ModelSpecError(f"out_channels must be >= 1, got {out_channels}")
        skips = backbone.skip_channels
        if len(skips) < 2:
            raise ModelSpecError(
                "backbone exposes no intermediate feature maps to attach skip "
                "connections to"
            )
        self.backbone = backbone
        self.out_channels = int(out_channels)
        width = skips[-1]
        stages = []
        for skip_ch in reversed(skips[:-1]):
            stages.append(_DecoderStage(width, skip_ch, skip_ch))
            width = skip_ch
        self.decoder = nn.ModuleList(stages)
        # Stages needed below the shallowest skip (e.g. a stem running at half
        # resolution) to climb back to the input resolution.
        n_extra = int(round(math.log2(backbone.reduction))) - (len(skips) - 1)
        extra = []
        for _ in range(n_extra):
            extra.append(ConvBlock(width, max(width // 2, 8)))
            width = max(width // 2, 8)
        self.extra = nn.ModuleList(extra)
        self.out_conv = nn.Conv2d(width, self.out_channels, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        stages = self.backbone.forward_stages(x)
        h = stages[-1]
        for stage, skip in zip(self.decoder, reversed(stages[:-1])):
            h = stage(h, skip)
        n_extra = len(self.extra)
        for i, block in enumerate(self.extra):
            remaining = n_extra - 1 - i
            target = (
                -(-x.shape[-2] // (2 ** remaining)),
                -(-x.shape[-1] // (2 ** remaining)),
            )
            h = F.interpolate(h, size=target, mode="nearest")
            h = block(h)
        return self.out_conv(h)


def assemble_seg_model(
    backbone: Backbone, out_channels: int = 1, seed: Optional[int] = None
) -> SegModel:
    """Attach a decoder with skip connections at every encoder stage."""
    if seed is not None:
        torch.manual_seed(seed)
    return SegModel(backbone, out_channels)


def predict_volume_age(model: AgeModel, stack: SliceStack) -> float:
    """Volume-level prediction: arithmetic mean of the per-slice outputs."""
    if stack.count < 1:
        raise ValueError("slice stack is empty")
    x = torch.as_tensor(np.asarray(stack.slices), dtype=torch.float32)
    if x.ndim == 3:
        x = x[:, None, :, :]
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            outputs = model(x)
    finally:
        model.train(was_training)
    return float(outputs.double().mean())


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# --------------------------------------------------------------------------
# Checkpoints: weights blob (<stem>.pt) + sidecar metadata (<stem>.meta.json)
# --------------------------------------------------------------------------

KIND_BACKBONE = "backbone"
KIND_AGE = "age_model"


def _meta_path(path: Path) -> Path:
    return path.with_suffix(".meta.json")


def _write_meta(path: Path, meta: dict) -> None:
    _meta_path(path).write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n", "utf-8")


def _read_meta(path: Path) -> dict:
    meta_path = _meta_path(path)
    if not meta_path.exists():
        raise FileNotFoundError(f"checkpoint metadata not found: {meta_path}")
    return json.loads(meta_path.read_text(encoding="utf-8"))


def _base_meta(
    kind: str,
    arch: str,
    in_channels: int,
    plan: Tuple[int, ...],
    input_hw: Optional[Tuple[int, int]],
    lineage: Tuple[str, ...],
    trained_epochs: int,
    seed: Optional[int],
) -> dict:
    return {
        "kind": kind,
        "arch": arch,
        "in_channels": in_channels,
        "stage_channel_plan": list(plan),
        "input_hw": list(input_hw) if input_hw is not None else None,
        "init_lineage": list(lineage),
        "trained_epochs": int(trained_epochs),
        "seed": seed,
        "created_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }


def save_backbone_checkpoint(
    path: Union[str, Path],
    weights: BackboneWeights,
    trained_epochs: int = 0,
    seed: Optional[int] = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(weights.state_dict, path)
    meta = _base_meta(
        KIND_BACKBONE,
        weights.arch,
        weights.in_channels,
        weights.stage_channel_plan,
        None,
        weights.lineage,
        trained_epochs,
        seed,
    )
    _write_meta(path, meta)
    return path


def load_backbone_weights(path: Union[str, Path]) -> BackboneWeights:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    meta = _read_meta(path)
    if meta.get("kind") != KIND_BACKBONE:
        raise CheckpointMismatchError(
            f"checkpoint {path} is not a backbone checkpoint",
            [f"kind {meta.get('kind')!r}"],
        )
    state = torch.load(path, map_location="cpu", weights_only=True)
    return BackboneWeights(
        arch=meta["arch"],
        in_channels=int(meta["in_channels"]),
        stage_channel_plan=tuple(meta["stage_channel_plan"]),
        lineage=tuple(meta["init_lineage"]),
        state_dict=state,
    )


def save_age_checkpoint(
    path: Union[str, Path],
    model: AgeModel,
    lineage: Tuple[str, ...],
    trained_epochs: int,
    seed: Optional[int] = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path)
    spec = model.backbone.spec
    meta = _base_meta(
        KIND_AGE,
        spec.arch,
        spec.in_channels,
        spec.stage_channel_plan,
        model.input_hw,
        lineage,
        trained_epochs,
        seed,
    )
    _write_meta(path, meta)
    return path


def load_age_model(path: Union[str, Path]) -> Tuple[AgeModel, dict]:
    """Rebuild an age model from a checkpoint; returns (model, metadata)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    meta = _read_meta(path)
    if meta.get("kind") != KIND_AGE:
        raise CheckpointMismatchError(
            f"checkpoint {path} is not an age-model checkpoint",
            [f"kind {meta.get('kind')!r}"],
        )
    spec = BackboneSpec(
        arch=meta["arch"],
        in_channels=int(meta["in_channels"]),
        stage_channel_plan=tuple(meta["stage_channel_plan"]),
    )
    backbone = build_backbone(spec)
    backbone.lineage = tuple(meta["init_lineage"])
    model = AgeModel(backbone, tuple(meta["input_hw"]))
    state = torch.load(path, map_location="cpu", weights_only=True)
    own = model.state_dict()
    mismatches = [f"missing tensor {k}" for k in own.keys() - state.keys()]
    mismatches += [f"unexpected tensor {k}" for k in state.keys() - own.keys()]
    mismatches += [
        f"{k}: shape {tuple(state[k].shape)} != {tuple(own[k].shape)}"
        for k in own.keys() & state.keys()
        if tuple(own[k].shape) != tuple(state[k].shape)
    ]
    if mismatches:
        raise CheckpointMismatchError(f"cannot load {path}", sorted(mismatches))
    model.load_state_dict(state)
    return model, meta
