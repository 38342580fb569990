"""Translation modules, balanced sampling, and the two alignment losses."""

import math

import numpy as np
import pytest
import torch

from stars.alignment import (
    AlignmentBatch,
    AlignmentConfig,
    TranslationModule,
    alignment_losses,
    build_translators,
    gather_features,
    ncs_loss,
    normalize_rows,
    psc_loss,
    sample_balanced_pixels,
)
from stars.backbone import DualEncoderBackbone, EncoderConfig
from stars.data import IGNORE
from stars.errors import ConfigurationError


def _dual_features(seed=0, size=64):
    torch.manual_seed(seed)
    net = DualEncoderBackbone(EncoderConfig.tiny())
    net.eval()
    with torch.no_grad():
        return net.forward_dual(torch.randn(2, 1, size, size), torch.randn(2, 3, size, size))


class TestTranslationModule:
    def test_preserves_shape(self):
        torch.manual_seed(0)
        mod = TranslationModule(8)
        out = mod(torch.randn(2, 8, 5, 7))
        assert out.shape == (2, 8, 5, 7)

    def test_first_kernel_three(self):
        torch.manual_seed(0)
        mod = TranslationModule(8, first_kernel=3)
        assert mod.conv_in.kernel_size == (3, 3)
        assert mod(torch.randn(1, 8, 4, 4)).shape == (1, 8, 4, 4)

    def test_rejects_bad_arguments(self):
        with pytest.raises(ConfigurationError):
            TranslationModule(8, first_kernel=5)
        with pytest.raises(ConfigurationError):
            TranslationModule(8, direction="m1_to_m3")
        mod = TranslationModule(8)
        with pytest.raises(ConfigurationError):
            mod(torch.randn(1, 4, 4, 4))

    def test_constant_input_collapses_to_bias(self):
        # InstanceNorm maps a spatially constant map to zeros, so the
        # output is the final conv's bias everywhere (up to conv backend
        # jitter amplified by the norm's 1/sqrt(eps) factor).
        torch.manual_seed(0)
        mod = TranslationModule(6)
        out = mod(torch.full((1, 6, 8, 8), 3.7))
        expected = mod.conv_out(mod.act(torch.zeros(1, 6, 8, 8)))
        assert torch.allclose(out, expected, atol=1e-4)


class TestBuildTranslators:
    def test_keys_and_widths(self):
        table = build_translators((16, 32, 64, 128), stages=(4, 3))
        assert sorted(table.keys()) == ["stage3", "stage4"]
        assert sorted(table["stage3"].keys()) == ["m1_to_m2", "m2_to_m1"]
        assert table["stage3"]["m1_to_m2"].in_channels == 64
        assert table["stage4"]["m2_to_m1"].in_channels == 128

    def test_first_kernel_forwarded(self):
        table = build_translators((16, 32, 64, 128), stages=(3,), first_kernel=3)
        assert table["stage3"]["m1_to_m2"].conv_in.kernel_size == (3, 3)


class TestAlignmentConfig:
    def test_defaults_are_valid(self):
        AlignmentConfig().validate()

    @pytest.mark.parametrize(
        "patch",
        [
            {"tau": 0.0},
            {"tau": -1.0},
            {"samples_per_class": 0},
            {"alpha": -0.1},
            {"beta": -0.1},
            {"stages": ()},
            {"stages": (2, 3)},
            {"stages": (5,)},
        ],
    )
    def test_validate_rejects(self, patch):
        cfg = AlignmentConfig()
        for key, value in patch.items():
            setattr(cfg, key, value)
        with pytest.raises(ConfigurationError):
            cfg.validate()


class TestNcsLoss:
    def test_identical_inputs_give_minus_one(self):
        torch.manual_seed(0)
        f = torch.randn(2, 8, 4, 4)
        loss = ncs_loss(f, f, f, f)
        assert abs(loss.item() + 1.0) < 1e-6

    def test_orthogonal_inputs_give_zero(self):
        a = torch.zeros(1, 2, 3, 3)
        b = torch.zeros(1, 2, 3, 3)
        a[:, 0] = 1.0
        b[:, 1] = 1.0
        assert abs(ncs_loss(a, b, a, b).item()) < 1e-7

    def test_detach_blocks_anchor_gradient(self):
        torch.manual_seed(0)
        p = torch.randn(1, 4, 2, 2, requires_grad=True)
        f = torch.randn(1, 4, 2, 2, requires_grad=True)
        ncs_loss(p, f, p.detach(), f.detach(), detach=True).backward()
        assert f.grad is None or f.grad.abs().max().item() == 0.0
        assert p.grad is not None and p.grad.abs().max().item() > 0

    def test_no_detach_reaches_anchors(self):
        torch.manual_seed(0)
        p = torch.randn(1, 4, 2, 2, requires_grad=True)
        f = torch.randn(1, 4, 2, 2, requires_grad=True)
        ncs_loss(p, f, p.detach(), f.detach(), detach=False).backward()
        assert f.grad is not None and f.grad.abs().max().item() > 0


class TestBalancedSampler:
    def test_exact_count_per_present_class(self):
        rng = np.random.default_rng(3)
        label = torch.from_numpy(rng.integers(0, 4, size=(2, 16, 16)))
        indices, labels = sample_balanced_pixels(label, 5, rng_seed=[1, 2])
        counts = torch.bincount(labels, minlength=4)
        assert (counts == 5).all()
        assert indices.shape == (20, 3)
        picked = label[indices[:, 0], indices[:, 1], indices[:, 2]]
        assert torch.equal(picked, labels)

    def test_cyclic_repetition_when_scarce(self):
        label = torch.zeros(1, 4, 4, dtype=torch.int64)
        label[0, 0, 0] = 1
        label[0, 0, 1] = 1
        indices, labels = sample_balanced_pixels(label, 6, rng_seed=[0])
        ones = indices[labels == 1]
        # Two distinct coordinates tiled to six samples: three of each.
        uniq, counts = torch.unique(ones, dim=0, return_counts=True)
        assert uniq.shape[0] == 2
        assert sorted(counts.tolist()) == [3, 3]

    def test_ignore_never_drawn(self):
        label = torch.full((1, 8, 8), IGNORE, dtype=torch.int64)
        label[0, :2, :] = 2
        indices, labels = sample_balanced_pixels(label, 4, rng_seed=[7])
        assert (labels == 2).all()
        assert indices.shape[0] == 4

    def test_all_ignore_returns_empty(self):
        label = torch.full((1, 8, 8), IGNORE, dtype=torch.int64)
        indices, labels = sample_balanced_pixels(label, 4, rng_seed=[7])
        assert indices.shape == (0, 3)
        assert labels.shape == (0,)

    def test_deterministic_for_seed(self):
        rng = np.random.default_rng(9)
        label = torch.from_numpy(rng.integers(0, 3, size=(1, 12, 12)))
        a = sample_balanced_pixels(label, 8, rng_seed=[5, 5])
        b = sample_balanced_pixels(label, 8, rng_seed=[5, 5])
        c = sample_balanced_pixels(label, 8, rng_seed=[5, 6])
        assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])
        assert not torch.equal(a[0], c[0])

    def test_rejects_bad_rank_and_count(self):
        with pytest.raises(ConfigurationError):
            sample_balanced_pixels(torch.zeros(4, 4, dtype=torch.int64), 2, rng_seed=[0])
        with pytest.raises(ConfigurationError):
            sample_balanced_pixels(torch.zeros(1, 4, 4, dtype=torch.int64), 0, rng_seed=[0])


class TestGatherFeatures:
    def test_stride_mapping_and_normalization(self):
        # Feature cell (b, y, x) holds the value b*100 + y*10 + x in
        # channel 0 and a constant 1 in channel 1, so the gathered row
        # identifies the cell and the normalization is checkable.
        feat = torch.zeros(2, 2, 4, 4)
        for b in range(2):
            for y in range(4):
                for x in range(4):
                    feat[b, 0, y, x] = b * 100 + y * 10 + x
                    feat[b, 1, y, x] = 1.0
        indices = torch.tensor([[0, 0, 0], [0, 7, 5], [1, 3, 3], [1, 6, 1]])
        rows = gather_features(feat, indices, label_shape=(8, 8))
        expected_cells = torch.tensor([[0.0, 1.0], [32.0, 1.0], [111.0, 1.0], [130.0, 1.0]])
        assert torch.allclose(rows, normalize_rows(expected_cells), atol=1e-6)

    def test_out_of_bounds_raises(self):
        feat = torch.randn(1, 4, 4, 4)
        with pytest.raises(IndexError):
            gather_features(feat, torch.tensor([[0, 8, 0]]), label_shape=(8, 8))

    def test_empty_indices(self):
        feat = torch.randn(1, 4, 4, 4)
        rows = gather_features(feat, torch.empty(0, 3, dtype=torch.int64), label_shape=(8, 8))
        assert rows.shape == (0, 4)


class TestPscLoss:
    def _batch(self, feats1, feats2, labels):
        return AlignmentBatch(
            indices=torch.zeros(len(labels), 3, dtype=torch.int64),
            labels=torch.as_tensor(labels, dtype=torch.int64),
            feats_m1=torch.as_tensor(feats1, dtype=torch.float32),
            feats_m2=torch.as_tensor(feats2, dtype=torch.float32),
        )

    def test_single_class_is_zero(self):
        torch.manual_seed(0)
        f1 = normalize_rows(torch.randn(6, 8))
        f2 = normalize_rows(torch.randn(6, 8))
        loss, skipped = psc_loss(self._batch(f1, f2, [2] * 6), tau=0.1)
        assert not skipped
        assert abs(loss.item()) < 1e-7

    def test_two_class_one_hot_closed_form(self):
        # Orthogonal one-hot rows, one sample per class, tau=1: for every
        # anchor the positive similarity is 1 and the negative 0, so the
        # loss is log(1 + e^-1).
        f = torch.eye(2)
        loss, _ = psc_loss(self._batch(f, f, [0, 1]), tau=1.0)
        assert abs(loss.item() - math.log(1 + math.exp(-1.0))) < 1e-6

    def test_swapping_modalities_is_symmetric(self):
        torch.manual_seed(1)
        f1 = normalize_rows(torch.randn(8, 4))
        f2 = normalize_rows(torch.randn(8, 4))
        labels = [0, 0, 1, 1, 2, 2, 3, 3]
        a, _ = psc_loss(self._batch(f1, f2, labels), tau=0.2)
        b, _ = psc_loss(self._batch(f2, f1, labels), tau=0.2)
        assert abs(a.item() - b.item()) < 1e-6

    def test_empty_batch_skips(self):
        batch = AlignmentBatch(
            indices=torch.empty(0, 3, dtype=torch.int64),
            labels=torch.empty(0, dtype=torch.int64),
            feats_m1=torch.empty(0, 4),
            feats_m2=torch.empty(0, 4),
        )
        loss, skipped = psc_loss(batch, tau=0.1)
        assert skipped
        assert loss.item() == 0.0

    def test_rejects_bad_tau(self):
        f = torch.eye(2)
        with pytest.raises(ConfigurationError):
            psc_loss(self._batch(f, f, [0, 1]), tau=0.0)


class TestAlignmentBatchValidate:
    def test_catches_unnormalized_rows(self):
        batch = AlignmentBatch(
            indices=torch.zeros(2, 3, dtype=torch.int64),
            labels=torch.tensor([0, 1]),
            feats_m1=torch.eye(2) * 3.0,
            feats_m2=torch.eye(2),
        )
        with pytest.raises(ConfigurationError):
            batch.validate()

    def test_catches_wrong_per_class_count(self):
        batch = AlignmentBatch(
            indices=torch.zeros(3, 3, dtype=torch.int64),
            labels=torch.tensor([0, 0, 1]),
            feats_m1=normalize_rows(torch.randn(3, 4)),
            feats_m2=normalize_rows(torch.randn(3, 4)),
        )
        with pytest.raises(ConfigurationError):
            batch.validate(samples_per_class=2)
        batch.validate()  # count check only applies when requested


class TestAlignmentLosses:
    def _label(self, size=64):
        rng = np.random.default_rng(0)
        return torch.from_numpy(rng.integers(0, 4, size=(2, size, size)))

    def test_translated_path_and_stage_averaging(self):
        dual = _dual_features()
        torch.manual_seed(0)
        translators = build_translators((16, 32, 64, 128), stages=(3, 4))
        cfg = AlignmentConfig()
        out = alignment_losses(dual, self._label(), cfg, translators, rng_seed=[0, 1])
        assert not out.psc_skipped
        assert out.lncs.shape == ()
        assert out.lpsc.item() > 0
        assert -1.0 <= out.lncs.item() <= 1.0

    def test_identity_path_without_translators(self):
        dual = _dual_features()
        cfg = AlignmentConfig(stages=(4,))
        out = alignment_losses(dual, self._label(), cfg, None, rng_seed=[0, 1])
        # Comparing each shared pyramid against the other directly.
        direct = ncs_loss(
            dual.shared_m1.stage4, dual.shared_m2.stage4,
            dual.shared_m2.stage4, dual.shared_m1.stage4,
        )
        assert abs(out.lncs.item() - direct.item()) < 1e-6

    def test_want_flags_disable_terms(self):
        dual = _dual_features()
        cfg = AlignmentConfig()
        out = alignment_losses(
            dual, self._label(), cfg, None, rng_seed=[0], want_ncs=False, want_psc=False
        )
        assert out.lncs.item() == 0.0
        assert out.lpsc.item() == 0.0
        assert out.psc_skipped

    def test_all_ignore_label_skips_psc(self):
        dual = _dual_features()
        label = torch.full((2, 64, 64), IGNORE, dtype=torch.int64)
        out = alignment_losses(dual, label, AlignmentConfig(), None, rng_seed=[0])
        assert out.psc_skipped
        assert out.lpsc.item() == 0.0
        assert out.lncs.item() != 0.0

    def test_missing_stage_translator_raises(self):
        dual = _dual_features()
        translators = build_translators((16, 32, 64, 128), stages=(4,))
        cfg = AlignmentConfig(stages=(3, 4))
        with pytest.raises(ConfigurationError):
            alignment_losses(dual, self._label(), cfg, translators, rng_seed=[0])

    def test_sampling_is_seed_deterministic(self):
        dual = _dual_features()
        cfg = AlignmentConfig()
        a = alignment_losses(dual, self._label(), cfg, None, rng_seed=[3, 4])
        b = alignment_losses(dual, self._label(), cfg, None, rng_seed=[3, 4])
        assert a.lpsc.item() == b.lpsc.item()
        assert a.lncs.item() == b.lncs.item()
