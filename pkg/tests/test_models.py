import numpy as np
import pytest
import torch
import torch.nn as nn

from brainage.models import (
    BackboneSpec,
    Backbone,
    CheckpointMismatchError,
    ModelSpecError,
    RESNET50_PLAN,
    ShapeError,
    apply_backbone_weights,
    assemble_age_model,
    assemble_seg_model,
    build_backbone,
    load_age_model,
    load_backbone_weights,
    parameter_count,
    predict_volume_age,
    save_age_checkpoint,
    save_backbone_checkpoint,
    transplant_backbone,
)
from brainage.preprocess import SliceStack

UNET = BackboneSpec(arch="unet_encoder")
TINY = BackboneSpec(arch="unet_encoder", stage_channel_plan=(4, 8))
RESNET = BackboneSpec(arch="resnet50")


class TestSpecValidation:
    def test_imagenet_on_unet_rejected(self):
        with pytest.raises(ModelSpecError, match="imagenet"):
            BackboneSpec(arch="unet_encoder", init="imagenet")

    def test_checkpoint_ref_requires_checkpoint_init(self):
        with pytest.raises(ModelSpecError, match="checkpoint_ref"):
            BackboneSpec(arch="unet_encoder", checkpoint_ref="x.pt")
        with pytest.raises(ModelSpecError, match="checkpoint_ref"):
            BackboneSpec(arch="unet_encoder", init="checkpoint")

    def test_default_plans(self):
        assert UNET.stage_channel_plan == (32, 64, 128, 256, 512)
        assert RESNET.stage_channel_plan == RESNET50_PLAN

    def test_resnet_plan_is_fixed(self):
        with pytest.raises(ModelSpecError, match="canonical"):
            BackboneSpec(arch="resnet50", stage_channel_plan=(8, 16))

    def test_channel_conventions_enforced(self):
        with pytest.raises(ModelSpecError):
            BackboneSpec(arch="unet_encoder", in_channels=3)
        with pytest.raises(ModelSpecError):
            BackboneSpec(arch="resnet50", in_channels=1)
        assert UNET.in_channels == 1 and RESNET.in_channels == 3

    def test_unknown_arch(self):
        with pytest.raises(ModelSpecError, match="arch"):
            BackboneSpec(arch="vgg")


class TestBackboneShapes:
    def test_unet_final_feature_map(self):
        bb = build_backbone(UNET, seed=0)
        out = bb(torch.randn(2, 1, 64, 64))
        assert tuple(out.shape) == (2, 512, 4, 4)

    def test_resnet_final_feature_map(self):
        bb = build_backbone(RESNET, seed=0)
        out = bb(torch.randn(2, 3, 64, 64))
        assert tuple(out.shape) == (2, 2048, 2, 2)

    def test_unet_stage_resolutions(self):
        bb = build_backbone(UNET, seed=0)
        stages = bb.forward_stages(torch.randn(1, 1, 64, 64))
        assert [tuple(s.shape[1:]) for s in stages] == [
            (32, 64, 64),
            (64, 32, 32),
            (128, 16, 16),
            (256, 8, 8),
            (512, 4, 4),
        ]

    def test_parameter_count_stable(self):
        a = build_backbone(UNET, seed=1)
        b = build_backbone(UNET, seed=2)
        assert parameter_count(a) == parameter_count(b)
        sa = {k: tuple(v.shape) for k, v in a.state_dict().items()}
        sb = {k: tuple(v.shape) for k, v in b.state_dict().items()}
        assert sa == sb

    def test_seeded_init_is_reproducible(self):
        a = build_backbone(UNET, seed=7)
        b = build_backbone(UNET, seed=7)
        assert all(
            torch.equal(x, y)
            for x, y in zip(a.state_dict().values(), b.state_dict().values())
        )


class TestAgeModel:
    def test_head_dimensions(self):
        bb = build_backbone(UNET, seed=0)
        model = assemble_age_model(bb, (64, 64))
        assert model.head.in_features == 512 * 4 * 4 == 8192
        assert model.head.out_features == 1

    def test_zeroed_head_outputs_bias(self):
        bb = build_backbone(TINY, seed=0)
        model = assemble_age_model(bb, (16, 16), mean_age=72.5)
        with torch.no_grad():
            model.head.weight.zero_()
        out = model(torch.randn(5, 1, 16, 16))
        assert torch.allclose(out, torch.full((5,), 72.5))

    def test_batch_of_40_slices_gives_40_scalars(self):
        bb = build_backbone(TINY, seed=0)
        model = assemble_age_model(bb, (16, 16))
        assert tuple(model(torch.randn(40, 1, 16, 16)).shape) == (40,)

    def test_zero_bias_available(self):
        bb = build_backbone(TINY, seed=0)
        model = assemble_age_model(bb, (16, 16), mean_age=None)
        assert float(model.head.bias.detach()) == 0.0

    def test_input_size_must_match(self):
        bb = build_backbone(TINY, seed=0)
        model = assemble_age_model(bb, (16, 16))
        with pytest.raises(ShapeError, match="16x16"):
            model(torch.randn(2, 1, 32, 32))

    def test_channels_must_match(self):
        bb = build_backbone(TINY, seed=0)
        model = assemble_age_model(bb, (16, 16))
        with pytest.raises(ShapeError, match="channel"):
            model(torch.randn(2, 3, 16, 16))

    def test_input_hw_must_be_multiple_of_reduction(self):
        bb = build_backbone(UNET, seed=0)
        with pytest.raises(ModelSpecError, match="multiple"):
            assemble_age_model(bb, (50, 50))


class TestSegModel:
    def test_unet_logits_match_input_shape(self):
        seg = assemble_seg_model(build_backbone(UNET, seed=0), out_channels=1)
        out = seg(torch.randn(2, 1, 64, 64))
        assert tuple(out.shape) == (2, 1, 64, 64)

    def test_resnet_logits_match_input_shape(self):
        seg = assemble_seg_model(build_backbone(RESNET, seed=0), out_channels=1)
        out = seg(torch.randn(2, 3, 64, 64))
        assert tuple(out.shape) == (2, 1, 64, 64)

    def test_multiclass_channels(self):
        seg = assemble_seg_model(build_backbone(TINY, seed=0), out_channels=3)
        assert tuple(seg(torch.randn(1, 1, 16, 16)).shape) == (1, 3, 16, 16)

    def test_zero_out_channels_rejected(self):
        with pytest.raises(ModelSpecError, match="out_channels"):
            assemble_seg_model(build_backbone(TINY, seed=0), out_channels=0)

    def test_backbone_without_stages_rejected(self):
        class Flat(Backbone):
            def __init__(self):
                super().__init__(TINY, ("random",))
                self.conv = nn.Conv2d(1, 4, 3, padding=1)

            @property
            def feature_channels(self):
                return 4

            @property
            def reduction(self):
                return 1

            @property
            def skip_channels(self):
                return (4,)

            def forward_stages(self, x):
                return [self.conv(x)]

        with pytest.raises(ModelSpecError, match="intermediate"):
            assemble_seg_model(Flat(), out_channels=1)

    def test_age_and_seg_share_encoder_parameters(self):
        bb = build_backbone(TINY, seed=0)
        age = assemble_age_model(bb, (16, 16))
        seg = assemble_seg_model(bb, out_channels=1)
        age_params = dict(age.backbone.named_parameters())
        seg_params = dict(seg.backbone.named_parameters())
        assert age_params.keys() == seg_params.keys()
        assert all(age_params[k] is seg_params[k] for k in age_params)


class TestTransplant:
    @pytest.mark.parametrize("spec,channels", [(TINY, 1), (RESNET, 3)])
    def test_round_trip_features_bit_identical(self, spec, channels):
        bb = build_backbone(spec, seed=0)
        seg = assemble_seg_model(bb, out_channels=1)
        weights = transplant_backbone(seg)
        fresh = build_backbone(spec, seed=123)
        apply_backbone_weights(fresh, weights)
        hw = 16 if spec is TINY else 64
        for i in range(3):
            x = torch.randn(2, channels, hw, hw, generator=torch.Generator().manual_seed(i))
            with torch.no_grad():
                assert torch.equal(bb(x), fresh(x))

    def test_untrained_source_equals_own_encoder(self):
        bb = build_backbone(TINY, seed=5)
        seg = assemble_seg_model(bb, out_channels=1)
        weights = transplant_backbone(seg)
        rebuilt = build_backbone(TINY, seed=99)
        apply_backbone_weights(rebuilt, weights)
        x = torch.randn(1, 1, 16, 16)
        with torch.no_grad():
            assert torch.equal(seg.backbone(x), rebuilt(x))

    def test_cross_arch_transplant_rejected(self):
        weights = transplant_backbone(build_backbone(TINY, seed=0))
        with pytest.raises(CheckpointMismatchError, match="arch"):
            apply_backbone_weights(build_backbone(RESNET, seed=0), weights)

    def test_cross_plan_transplant_lists_mismatch(self):
        weights = transplant_backbone(build_backbone(TINY, seed=0))
        other = build_backbone(
            BackboneSpec(arch="unet_encoder", stage_channel_plan=(4, 16)), seed=0
        )
        with pytest.raises(CheckpointMismatchError, match="stage_channel_plan"):
            apply_backbone_weights(other, weights)

    def test_transplant_from_age_model(self):
        bb = build_backbone(TINY, seed=0)
        model = assemble_age_model(bb, (16, 16))
        weights = transplant_backbone(model)
        assert weights.arch == "unet_encoder"
        assert not any(k.startswith("head") for k in weights.state_dict)

    def test_transplanted_weights_are_detached_copies(self):
        bb = build_backbone(TINY, seed=0)
        weights = transplant_backbone(bb)
        name, param = next(iter(bb.named_parameters()))
        with torch.no_grad():
            param.add_(1.0)
        assert not torch.equal(weights.state_dict[name], param)


class TestPredictVolumeAge:
    def test_constant_model_returns_constant(self):
        bb = build_backbone(TINY, seed=0)
        model = assemble_age_model(bb, (16, 16), mean_age=66.0)
        with torch.no_grad():
            model.head.weight.zero_()
        stack = SliceStack(slices=np.random.default_rng(0).random((7, 1, 16, 16)))
        assert predict_volume_age(model, stack) == pytest.approx(66.0)

    def test_two_point_mean(self):
        class Stub(nn.Module):
            def forward(self, x):
                return torch.tensor([60.0, 80.0])

        stack = SliceStack(slices=np.zeros((2, 1, 4, 4)))
        assert predict_volume_age(Stub(), stack) == pytest.approx(70.0)

    def test_matches_per_slice_oracle(self):
        bb = build_backbone(TINY, seed=0)
        model = assemble_age_model(bb, (16, 16), mean_age=70.0)
        rng = np.random.default_rng(1)
        stack = SliceStack(slices=rng.random((40, 1, 16, 16)))
        model.eval()
        with torch.no_grad():
            singles = [
                float(model(torch.as_tensor(stack.slices[i : i + 1], dtype=torch.float32)))
                for i in range(stack.count)
            ]
        assert predict_volume_age(model, stack) == pytest.approx(
            float(np.mean(singles)), abs=1e-9
        )

    def test_restores_training_mode(self):
        bb = build_backbone(TINY, seed=0)
        model = assemble_age_model(bb, (16, 16))
        model.train()
        predict_volume_age(model, SliceStack(slices=np.zeros((1, 1, 16, 16))))
        assert model.training


class TestGradientCheck:
    def test_analytic_gradients_match_finite_differences(self):
        # Central differences are only meaningful where the network is
        # differentiable: every leaky-rectifier preactivation must sit
        # further than the step size from 0.  The fixed seed satisfies that;
        # the guard assertion below fails loudly if numerics ever drift.
        seed, h = 1, 1e-6
        bb = build_backbone(TINY, seed=seed)
        model = assemble_age_model(bb, (16, 16), mean_age=70.0).double()
        gen = torch.Generator().manual_seed(seed + 1000)
        x = torch.randn(4, 1, 16, 16, dtype=torch.float64, generator=gen)
        y = torch.tensor([68.0, 71.0, 74.0, 77.0], dtype=torch.float64)

        def loss_value():
            return torch.mean((model(x) - y) ** 2)

        preact_mins = []
        hooks = [
            m.register_forward_hook(
                lambda mod, inp, out: preact_mins.append(float(inp[0].detach().abs().min()))
            )
            for m in model.modules()
            if isinstance(m, nn.LeakyReLU)
        ]
        loss_value()
        for hk in hooks:
            hk.remove()
        assert min(preact_mins) > 2 * h, "evaluation point too close to a rectifier kink"

        model.zero_grad()
        loss_value().backward()

        n_checked = 0
        for param in model.parameters():
            flat = param.data.view(-1)
            grad_flat = param.grad.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss_value().item()
                flat[i] = orig - h
                down = loss_value().item()
                flat[i] = orig
                fd = (up - down) / (2 * h)
                analytic = grad_flat[i].item()
                if abs(fd - analytic) > 1e-8:
                    rel = abs(fd - analytic) / max(abs(fd), abs(analytic), 1e-10)
                    assert rel < 1e-4, f"param grad mismatch: {analytic} vs {fd}"
                n_checked += 1
        assert n_checked == sum(p.numel() for p in model.parameters())


class TestCheckpoints:
    def test_age_checkpoint_round_trip(self, tmp_path):
        bb = build_backbone(TINY, seed=0)
        model = assemble_age_model(bb, (16, 16), mean_age=70.0)
        path = save_age_checkpoint(
            tmp_path / "age.pt", model, lineage=("random", "age-train"),
            trained_epochs=4, seed=0,
        )
        assert path.with_suffix(".meta.json").exists()
        loaded, meta = load_age_model(path)
        assert meta["trained_epochs"] == 4
        assert meta["init_lineage"] == ["random", "age-train"]
        assert meta["input_hw"] == [16, 16]
        x = torch.randn(3, 1, 16, 16)
        loaded.eval(), model.eval()
        with torch.no_grad():
            assert torch.equal(model(x), loaded(x))

    def test_backbone_checkpoint_round_trip(self, tmp_path):
        bb = build_backbone(TINY, seed=3)
        weights = transplant_backbone(bb)
        weights.lineage = ("random", "seg-pretrain")
        path = save_backbone_checkpoint(tmp_path / "bb.pt", weights, trained_epochs=6, seed=3)
        loaded = load_backbone_weights(path)
        assert loaded.lineage == ("random", "seg-pretrain")
        fresh = build_backbone(TINY, seed=11)
        apply_backbone_weights(fresh, loaded)
        x = torch.randn(1, 1, 16, 16)
        with torch.no_grad():
            assert torch.equal(bb(x), fresh(x))

    def test_checkpoint_init_via_spec(self, tmp_path):
        bb = build_backbone(TINY, seed=3)
        path = save_backbone_checkpoint(tmp_path / "bb.pt", transplant_backbone(bb))
        spec = BackboneSpec(
            arch="unet_encoder", stage_channel_plan=(4, 8),
            init="checkpoint", checkpoint_ref=str(path),
        )
        rebuilt = build_backbone(spec, seed=50)
        x = torch.randn(1, 1, 16, 16)
        with torch.no_grad():
            assert torch.equal(bb(x), rebuilt(x))

    def test_wrong_kind_rejected(self, tmp_path):
        bb = build_backbone(TINY, seed=0)
        model = assemble_age_model(bb, (16, 16))
        path = save_age_checkpoint(tmp_path / "age.pt", model, ("random",), 1)
        with pytest.raises(CheckpointMismatchError, match="kind"):
            load_backbone_weights(path)

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_backbone_weights(tmp_path / "nope.pt")
