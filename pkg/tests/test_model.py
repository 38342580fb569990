"""Full model wiring: branch outputs, single-modality paths, descriptions."""

import json

import pytest
import torch

from stars.alignment import AlignmentConfig
from stars.backbone import EncoderConfig
from stars.errors import ConfigurationError
from stars.model import BaselineModel, Stars, build_from_description, default_lateral_width


def _tiny_stars(**kwargs):
    torch.manual_seed(0)
    return Stars(EncoderConfig.tiny(), num_classes=4, lateral_width=32, **kwargs)


class TestStarsForward:
    def test_three_branches_at_input_resolution(self):
        model = _tiny_stars()
        model.eval()
        with torch.no_grad():
            s1, s2, sf = model(torch.randn(2, 1, 64, 64), torch.randn(2, 3, 64, 64))
        for s in (s1, s2, sf):
            assert s.shape == (2, 4, 64, 64)

    def test_branch_decoders_have_disjoint_parameters(self):
        model = _tiny_stars()
        ids = [
            {id(p) for p in dec.parameters()}
            for dec in (model.decoder_m1, model.decoder_m2, model.decoder_fuse)
        ]
        assert not ids[0] & ids[1]
        assert not ids[0] & ids[2]
        assert not ids[1] & ids[2]

    def test_translators_follow_alignment_stages(self):
        model = _tiny_stars(align_cfg=AlignmentConfig(stages=(4,)))
        assert sorted(model.translators.keys()) == ["stage4"]
        no_trans = _tiny_stars(use_trans=False)
        assert no_trans.translators is None

    def test_rejects_bad_num_classes(self):
        with pytest.raises(ConfigurationError):
            Stars(EncoderConfig.tiny(), num_classes=0)


class TestForwardSingle:
    def test_fused_branch_from_one_modality(self):
        model = _tiny_stars()
        model.eval()
        with torch.no_grad():
            out = model.forward_single(torch.randn(1, 1, 64, 64), "m1")
        assert out.shape == (1, 4, 64, 64)

    def test_single_path_matches_training_branch(self):
        # With both modalities in hand, decoding m1 through its own branch
        # must agree with the m1 third of the dual forward pass.
        model = _tiny_stars()
        model.eval()
        x1 = torch.randn(1, 1, 64, 64)
        x2 = torch.randn(1, 3, 64, 64)
        with torch.no_grad():
            s1, _, _ = model(x1, x2)
            single = model.forward_single(x1, "m1", branch="m1")
        assert torch.equal(single, s1)

    def test_m2_own_branch(self):
        model = _tiny_stars()
        model.eval()
        with torch.no_grad():
            out = model.forward_single(torch.randn(1, 3, 64, 64), "m2", branch="m2")
        assert out.shape == (1, 4, 64, 64)

    def test_rejects_cross_modality_branch(self):
        model = _tiny_stars()
        with pytest.raises(ConfigurationError):
            model.forward_single(torch.randn(1, 1, 64, 64), "m1", branch="m2")
        with pytest.raises(ConfigurationError):
            model.forward_single(torch.randn(1, 3, 64, 64), "m2", branch="m1")

    def test_rejects_unknown_names(self):
        model = _tiny_stars()
        with pytest.raises(ConfigurationError):
            model.forward_single(torch.randn(1, 1, 64, 64), "m3")
        with pytest.raises(ConfigurationError):
            model.forward_single(torch.randn(1, 1, 64, 64), "m1", branch="mean")


class TestBaseline:
    def test_forward_shape(self):
        torch.manual_seed(0)
        model = BaselineModel(EncoderConfig.tiny(), num_classes=4, modality="m2", lateral_width=32)
        model.eval()
        with torch.no_grad():
            out = model(torch.randn(2, 3, 64, 64))
        assert out.shape == (2, 4, 64, 64)

    def test_stem_width_follows_modality(self):
        cfg = EncoderConfig.tiny(in_channels_m1=1, in_channels_m2=3)
        assert BaselineModel(cfg, modality="m1").stem.conv.in_channels == 1
        assert BaselineModel(cfg, modality="m2").stem.conv.in_channels == 3

    def test_rejects_bad_arguments(self):
        with pytest.raises(ConfigurationError):
            BaselineModel(modality="m3")
        with pytest.raises(ConfigurationError):
            BaselineModel(num_classes=0)


class TestDescribe:
    def test_stars_description_fields(self):
        model = _tiny_stars()
        desc = json.loads(model.describe())
        assert desc["model"] == "stars"
        assert desc["num_classes"] == 4
        assert desc["lateral_width"] == 32
        assert desc["align"]["stages"] == [3, 4]
        assert desc["use_trans"] is True

    def test_description_is_sorted_and_stable(self):
        a = _tiny_stars().describe()
        b = _tiny_stars().describe()
        assert a == b
        assert a == json.dumps(json.loads(a), sort_keys=True)

    def test_default_lateral_width(self):
        assert default_lateral_width(EncoderConfig.tiny()) == 128
        assert default_lateral_width(EncoderConfig.resnet50like()) == 256


class TestBuildFromDescription:
    def test_stars_roundtrip(self):
        model = _tiny_stars(
            align_cfg=AlignmentConfig(alpha=0.7, stages=(4,)), translate_first_kernel=3
        )
        rebuilt = build_from_description(json.loads(model.describe()))
        assert isinstance(rebuilt, Stars)
        assert rebuilt.describe() == model.describe()
        # Shapes line up, so the original weights load cleanly.
        rebuilt.load_state_dict(model.state_dict())

    def test_baseline_roundtrip(self):
        model = BaselineModel(EncoderConfig.tiny(), num_classes=3, modality="m2")
        rebuilt = build_from_description(json.loads(model.describe()))
        assert isinstance(rebuilt, BaselineModel)
        assert rebuilt.describe() == model.describe()
        rebuilt.load_state_dict(model.state_dict())

    def test_unknown_kind_raises(self):
        with pytest.raises(ConfigurationError):
            build_from_description({"model": "segformer", "encoder": {}})
