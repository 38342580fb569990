"""Encoder tower construction, pyramid geometry, and parameter naming."""

import pytest
import torch

from stars.backbone import (
    BasicBlock,
    Bottleneck,
    DualEncoderBackbone,
    Encoder,
    EncoderConfig,
    FeaturePyramid,
    ModalityStem,
    canonical_parameter_names,
    parameter_count,
)
from stars.errors import ConfigurationError


class TestEncoderConfig:
    def test_tiny_preset(self):
        cfg = EncoderConfig.tiny(in_channels_m1=2, in_channels_m2=5)
        assert cfg.stage_channels == (16, 32, 64, 128)
        assert cfg.stage_blocks == (1, 1, 1, 1)
        assert cfg.block == "basic"
        assert cfg.in_channels_m1 == 2
        assert cfg.in_channels_m2 == 5
        cfg.validate()

    def test_resnet50like_preset(self):
        cfg = EncoderConfig.resnet50like()
        assert cfg.stage_channels == (256, 512, 1024, 2048)
        assert cfg.stage_blocks == (3, 4, 6, 3)
        assert cfg.block == "bottleneck"
        cfg.validate()

    def test_from_name(self):
        assert EncoderConfig.from_name("tiny").variant == "tiny"
        assert EncoderConfig.from_name("resnet50like").variant == "resnet50like"
        with pytest.raises(ConfigurationError):
            EncoderConfig.from_name("resnet18")

    @pytest.mark.parametrize(
        "patch",
        [
            {"stage_channels": (16, 32, 64)},
            {"stage_blocks": (1, 1, 1)},
            {"stage_channels": (16, 32, 32, 64)},
            {"stage_channels": (32, 16, 64, 128)},
            {"stage_channels": (16, 32, 64, -1)},
            {"stage_blocks": (1, 0, 1, 1)},
            {"block": "dense"},
            {"stem_channels": 0},
            {"in_channels_m1": 0},
            {"in_channels_m2": -3},
        ],
    )
    def test_validate_rejects(self, patch):
        cfg = EncoderConfig.tiny()
        for key, value in patch.items():
            setattr(cfg, key, value)
        with pytest.raises(ConfigurationError):
            cfg.validate()


class TestBlocks:
    def test_basic_block_shape_and_downsample(self):
        torch.manual_seed(0)
        block = BasicBlock(8, 16, stride=2)
        out = block(torch.randn(2, 8, 16, 16))
        assert out.shape == (2, 16, 8, 8)
        assert block.down is not None
        same = BasicBlock(8, 8)
        assert same.down is None

    def test_bottleneck_shape(self):
        torch.manual_seed(0)
        block = Bottleneck(32, 64, stride=2)
        out = block(torch.randn(2, 32, 16, 16))
        assert out.shape == (2, 64, 8, 8)
        assert block.conv2.weight.shape[0] == 64 // Bottleneck.expansion

    def test_identity_shortcut_is_additive(self):
        # Zeroing the residual path must reduce the block to relu(identity).
        torch.manual_seed(0)
        block = BasicBlock(4, 4)
        with torch.no_grad():
            block.conv2.weight.zero_()
            block.bn2.weight.zero_()
            block.bn2.bias.zero_()
        block.eval()
        x = torch.randn(1, 4, 8, 8)
        assert torch.equal(block(x), torch.relu(x))


class TestStem:
    def test_stride_four(self):
        stem = ModalityStem(3, 16)
        out = stem(torch.randn(2, 3, 64, 96))
        assert out.shape == (2, 16, 16, 24)

    def test_rejects_indivisible_input(self):
        stem = ModalityStem(1, 16)
        with pytest.raises(ConfigurationError):
            stem(torch.randn(1, 1, 60, 64))
        with pytest.raises(ConfigurationError):
            stem(torch.randn(1, 1, 64, 33))

    def test_rejects_bad_channels(self):
        with pytest.raises(ConfigurationError):
            ModalityStem(0, 16)


class TestPyramid:
    def test_stage_indexing_is_one_based(self):
        maps = [torch.zeros(1, 1, 8 // 2**i, 8 // 2**i) for i in range(4)]
        pyr = FeaturePyramid(*maps)
        assert pyr.stage(1) is maps[0]
        assert pyr.stage(4) is maps[3]
        with pytest.raises(ConfigurationError):
            pyr.stage(0)
        with pytest.raises(ConfigurationError):
            pyr.stage(5)

    def test_validate_checks_halving(self):
        good = FeaturePyramid(
            torch.zeros(1, 1, 16, 16),
            torch.zeros(1, 1, 8, 8),
            torch.zeros(1, 1, 4, 4),
            torch.zeros(1, 1, 2, 2),
        )
        good.validate()
        bad = FeaturePyramid(
            torch.zeros(1, 1, 16, 16),
            torch.zeros(1, 1, 8, 8),
            torch.zeros(1, 1, 8, 8),
            torch.zeros(1, 1, 4, 4),
        )
        with pytest.raises(ConfigurationError):
            bad.validate()


class TestEncoder:
    def test_pyramid_strides(self):
        torch.manual_seed(0)
        cfg = EncoderConfig.tiny()
        enc = Encoder(cfg)
        enc.eval()
        out = enc(torch.randn(1, cfg.stem_channels, 16, 16))
        assert [f.shape for f in out.stages] == [
            (1, 16, 16, 16),
            (1, 32, 8, 8),
            (1, 64, 4, 4),
            (1, 128, 2, 2),
        ]
        out.validate()

    def test_out_channels(self):
        enc = Encoder(EncoderConfig.tiny())
        assert enc.out_channels == (16, 32, 64, 128)


class TestDualEncoderBackbone:
    def test_shared_weights_are_same_tensors(self):
        torch.manual_seed(0)
        net = DualEncoderBackbone(EncoderConfig.tiny())
        net.eval()
        x1 = torch.randn(1, 1, 64, 64)
        x2 = torch.randn(1, 3, 64, 64)
        dual = net.forward_dual(x1, x2)
        dual.validate()
        # Same stem input through the shared tower must give the same map
        # that forward_modality reports for the shared side.
        h1 = net.stem_forward(x1, "m1")
        assert torch.equal(net.encode(h1, "shared").stage4, dual.shared_m1.stage4)

    def test_specific_towers_are_independent(self):
        torch.manual_seed(0)
        net = DualEncoderBackbone(EncoderConfig.tiny())
        p1 = {id(p) for p in net.spec_m1.parameters()}
        p2 = {id(p) for p in net.spec_m2.parameters()}
        shared = {id(p) for p in net.shared.parameters()}
        assert not p1 & p2
        assert not p1 & shared
        assert not p2 & shared

    def test_forward_modality_routes_to_correct_stem(self):
        torch.manual_seed(0)
        net = DualEncoderBackbone(EncoderConfig.tiny())
        net.eval()
        x2 = torch.randn(1, 3, 64, 64)
        shared, spec = net.forward_modality(x2, "m2")
        assert shared.stage1.shape == (1, 16, 16, 16)
        assert spec.stage4.shape == (1, 128, 2, 2)
        with pytest.raises(ConfigurationError):
            net.forward_modality(x2, "m3")

    def test_forward_dual_rejects_size_mismatch(self):
        net = DualEncoderBackbone(EncoderConfig.tiny())
        with pytest.raises(ConfigurationError):
            net.forward_dual(torch.randn(1, 1, 64, 64), torch.randn(1, 3, 32, 32))

    def test_encode_rejects_unknown_tower(self):
        net = DualEncoderBackbone(EncoderConfig.tiny())
        with pytest.raises(ConfigurationError):
            net.encode(torch.randn(1, 16, 16, 16), "spec_m3")


class TestParameterNaming:
    def test_counts_and_kinds(self):
        net = DualEncoderBackbone(EncoderConfig.tiny())
        assert parameter_count(net) == sum(p.numel() for p in net.parameters())
        names = canonical_parameter_names(net)
        assert set(names) == {n for n, _ in net.named_parameters()}
        # BatchNorm affine parameters are relabeled, conv weights are not.
        assert names["stem_m1.bn.weight"].endswith("/bn_gamma")
        assert names["stem_m1.bn.bias"].endswith("/bn_beta")
        assert names["stem_m1.conv.weight"].endswith("/weight")
