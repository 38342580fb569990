"""Attention-gated fusion of specific and shared features, plus FPN decoding.

A fusion module per pyramid stage recalibrates both feature streams
with SCSE attention, mixes them down to one width, re-attends, adds the
specific stream back as a residual, and finally concatenates the
untouched shared stream, doubling the channel count. Three structurally
identical FPN decoders with disjoint parameters turn fused pyramids
into full-resolution class logits.
"""

from typing import List, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import DualBranchFeatures, FeaturePyramid
from .errors import ConfigurationError


class SCSEBlock(nn.Module):
    """Concurrent channel and spatial squeeze-excitation, summed.

    The channel path gates each channel by a sigmoid of a bottleneck
    MLP over the global-average descriptor; the spatial path gates each
    position by a sigmoid of a 1x1 conv. The two gated copies are added.
    """

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        if channels < 1:
            raise ConfigurationError("SCSE needs at least one channel")
        hidden = max(channels // reduction, 1)
        self.channel_mlp = nn.Sequential(
            nn.Linear(channels, hidden),
            nn.ReLU(inplace=True),
            nn.Linear(hidden, channels),
        )
        self.spatial_conv = nn.Conv2d(channels, 1, 1)

    def forward(self, u: torch.Tensor) -> torch.Tensor:
        b, c, _, _ = u.shape
        desc = u.mean(dim=(2, 3))
        channel_gate = torch.sigmoid(self.channel_mlp(desc)).view(b, c, 1, 1)
        spatial_gate = torch.sigmoid(self.spatial_conv(u))
        return u * channel_gate + u * spatial_gate


class FusionModule(nn.Module):
    """Combines specific and shared features of one stage into 2C channels.

    Pipeline: SCSE on each input, concatenate, conv-norm-activation back
    to C, SCSE again, add the raw specific features, then concatenate
    the raw shared features. The trailing C output channels are the
    shared input passed through untouched.
    """

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        self.scse_spec = SCSEBlock(channels, reduction)
        self.scse_shared = SCSEBlock(channels, reduction)
        self.mix = nn.Sequential(
            nn.Conv2d(2 * channels, channels, 3, padding=1, bias=False),
            nn.BatchNorm2d(channels),
            nn.ReLU(inplace=True),
        )
        self.scse_post = SCSEBlock(channels, reduction)

    def forward(self, f_spec: torch.Tensor, f_shared: torch.Tensor) -> torch.Tensor:
        if f_spec.shape != f_shared.shape:
            raise ConfigurationError(
                f"fusion inputs must match, got {tuple(f_spec.shape)} vs {tuple(f_shared.shape)}"
            )
        mixed = self.mix(torch.cat([self.scse_spec(f_spec), self.scse_shared(f_shared)], dim=1))
        refined = self.scse_post(mixed) + f_spec
        return torch.cat([refined, f_shared], dim=1)


class StageFusion(nn.Module):
    """One stage's fusion module plus the cross-modality input combiner.

    ``reduce`` squeezes the concatenated specific features of both
    modalities back to C before fusing; the shared features of the two
    modalities are simply averaged.
    """

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        self.fuse = FusionModule(channels, reduction)
        self.reduce = nn.Conv2d(2 * channels, channels, 1, bias=False)
        # Start the reduction as the sum of the two streams rather than a
        # random projection. A sum keeps the cross-modality mixture on the
        # channel basis of either specific pyramid alone, and when one
        # modality degrades toward a constant the mixture degrades toward
        # the surviving stream plus an offset, which is the regime the
        # fused decoder must handle when a modality is missing at test.
        with torch.no_grad():
            eye = torch.eye(channels)
            self.reduce.weight.zero_()
            self.reduce.weight[:, :channels, 0, 0].copy_(eye)
            self.reduce.weight[:, channels:, 0, 0].copy_(eye)

    def forward(self, f_spec: torch.Tensor, f_shared: torch.Tensor) -> torch.Tensor:
        return self.fuse(f_spec, f_shared)

    def forward_cross(
        self,
        spec_m1: torch.Tensor,
        spec_m2: torch.Tensor,
        shared_m1: torch.Tensor,
        shared_m2: torch.Tensor,
    ) -> torch.Tensor:
        spec = self.reduce(torch.cat([spec_m1, spec_m2], dim=1))
        shared = 0.5 * (shared_m1 + shared_m2)
        return self.fuse(spec, shared)


class FusionStack(nn.Module):
    """Per-stage fusion shared by all three decoding branches."""

    def __init__(self, stage_channels: Sequence[int], reduction: int = 16):
        super().__init__()
        if len(stage_channels) != 4:
            raise ConfigurationError("fusion stack needs exactly four stage widths")
        self.stage1 = StageFusion(stage_channels[0], reduction)
        self.stage2 = StageFusion(stage_channels[1], reduction)
        self.stage3 = StageFusion(stage_channels[2], reduction)
        self.stage4 = StageFusion(stage_channels[3], reduction)

    @property
    def stages(self) -> List[StageFusion]:
        return [self.stage1, self.stage2, self.stage3, self.stage4]

    def fuse_modality(self, shared: FeaturePyramid, specific: FeaturePyramid) -> List[torch.Tensor]:
        return [
            stage(sp, sh)
            for stage, sp, sh in zip(self.stages, specific.stages, shared.stages)
        ]

    def fuse_cross(self, dual: DualBranchFeatures) -> List[torch.Tensor]:
        return [
            stage.forward_cross(sp1, sp2, sh1, sh2)
            for stage, sp1, sp2, sh1, sh2 in zip(
                self.stages,
                dual.spec_m1.stages,
                dual.spec_m2.stages,
                dual.shared_m1.stages,
                dual.shared_m2.stages,
            )
        ]


class FPNDecoder(nn.Module):
    """Top-down feature pyramid decoder ending in full-resolution logits.

    Laterals project every stage to one width, the coarsest map is
    repeatedly upsampled (nearest) and added to the next lateral, each
    merged map is smoothed by a 3x3 conv, all levels are brought to
    stride 4 and summed, and a classifier head is upsampled bilinearly
    by 4 to the network input size.
    """

    def __init__(self, in_channels: Sequence[int], num_classes: int, lateral_width: int = 128):
        super().__init__()
        if len(in_channels) != 4:
            raise ConfigurationError("decoder expects a four-stage pyramid")
        if num_classes < 1:
            raise ConfigurationError("num_classes must be >= 1")
        self.lateral = nn.ModuleList(
            [nn.Conv2d(c, lateral_width, 1) for c in in_channels]
        )
        self.smooth = nn.ModuleList(
            [nn.Conv2d(lateral_width, lateral_width, 3, padding=1) for _ in in_channels]
        )
        self.classifier = nn.Conv2d(lateral_width, num_classes, 1)

    def forward(self, pyramid: Sequence[torch.Tensor]) -> torch.Tensor:
        if len(pyramid) != 4:
            raise ConfigurationError("decoder expects a four-stage pyramid")
        laterals = [lat(f) for lat, f in zip(self.lateral, pyramid)]
        merged = [laterals[3]]
        for lvl in (2, 1, 0):
            up = F.interpolate(merged[0], size=laterals[lvl].shape[-2:], mode="nearest")
            merged.insert(0, laterals[lvl] + up)
        smoothed = [conv(m) for conv, m in zip(self.smooth, merged)]
        base_size = smoothed[0].shape[-2:]
        total = smoothed[0]
        for m in smoothed[1:]:
            total = total + F.interpolate(m, size=base_size, mode="nearest")
        logits = self.classifier(total)
        return F.interpolate(logits, scale_factor=4, mode="bilinear", align_corners=False)
