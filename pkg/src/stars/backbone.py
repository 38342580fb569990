"""Shared/specific encoder backbone with per-modality stems.

Each modality is mapped by its own stem to a common channel width at
stride 4, then pushed through two residual encoders: one whose weights
are shared by both modalities and one private to each modality. Every
encoder exposes a four-stage feature pyramid (strides 4, 8, 16, 32).
"""

from dataclasses import dataclass
from typing import Dict, List, Tuple

import torch
import torch.nn as nn

from .errors import ConfigurationError


def conv3x3(cin: int, cout: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)


def conv1x1(cin: int, cout: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 1, stride=stride, bias=False)


class BasicBlock(nn.Module):
    """Two 3x3 convs with identity shortcut."""

    expansion = 1

    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = conv3x3(cin, cout, stride)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = conv3x3(cout, cout)
        self.bn2 = nn.BatchNorm2d(cout)
        self.relu = nn.ReLU(inplace=True)
        if stride != 1 or cin != cout:
            self.down = nn.Sequential(conv1x1(cin, cout, stride), nn.BatchNorm2d(cout))
        else:
            self.down = None

    def forward(self, x):
        identity = x if self.down is None else self.down(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + identity)


class Bottleneck(nn.Module):
    """1x1 reduce, 3x3, 1x1 expand (x4) with identity shortcut."""

    expansion = 4

    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        width = cout // self.expansion
        self.conv1 = conv1x1(cin, width)
        self.bn1 = nn.BatchNorm2d(width)
        self.conv2 = conv3x3(width, width, stride)
        self.bn2 = nn.BatchNorm2d(width)
        self.conv3 = conv1x1(width, cout)
        self.bn3 = nn.BatchNorm2d(cout)
        self.relu = nn.ReLU(inplace=True)
        if stride != 1 or cin != cout:
            self.down = nn.Sequential(conv1x1(cin, cout, stride), nn.BatchNorm2d(cout))
        else:
            self.down = None

    def forward(self, x):
        identity = x if self.down is None else self.down(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        return self.relu(out + identity)


@dataclass
class EncoderConfig:
    """Architecture hyper-parameters for the encoder towers."""

    variant: str = "tiny"
    stem_channels: int = 16
    stage_channels: Tuple[int, int, int, int] = (16, 32, 64, 128)
    stage_blocks: Tuple[int, int, int, int] = (1, 1, 1, 1)
    block: str = "basic"
    in_channels_m1: int = 1
    in_channels_m2: int = 3

    @staticmethod
    def tiny(in_channels_m1: int = 1, in_channels_m2: int = 3) -> "EncoderConfig":
        return EncoderConfig(
            variant="tiny",
            stem_channels=16,
            stage_channels=(16, 32, 64, 128),
            stage_blocks=(1, 1, 1, 1),
            block="basic",
            in_channels_m1=in_channels_m1,
            in_channels_m2=in_channels_m2,
        )

    @staticmethod
    def resnet50like(in_channels_m1: int = 1, in_channels_m2: int = 3) -> "EncoderConfig":
        return EncoderConfig(
            variant="resnet50like",
            stem_channels=64,
            stage_channels=(256, 512, 1024, 2048),
            stage_blocks=(3, 4, 6, 3),
            block="bottleneck",
            in_channels_m1=in_channels_m1,
            in_channels_m2=in_channels_m2,
        )

    @staticmethod
    def from_name(name: str, in_channels_m1: int = 1, in_channels_m2: int = 3) -> "EncoderConfig":
        presets = {"tiny": EncoderConfig.tiny, "resnet50like": EncoderConfig.resnet50like}
        if name not in presets:
            raise ConfigurationError(
                f"unknown encoder variant {name!r}; expected one of {sorted(presets)}"
            )
        return presets[name](in_channels_m1, in_channels_m2)

    def validate(self) -> None:
        if len(self.stage_channels) != 4 or len(self.stage_blocks) != 4:
            raise ConfigurationError("encoder needs exactly four stages")
        if any(c <= 0 for c in self.stage_channels) or any(b <= 0 for b in self.stage_blocks):
            raise ConfigurationError("stage channels and block counts must be positive")
        if list(self.stage_channels) != sorted(set(self.stage_channels)):
            raise ConfigurationError("stage_channels must be strictly increasing")
        if self.block not in ("basic", "bottleneck"):
            raise ConfigurationError(f"unknown block type {self.block!r}")
        if self.stem_channels <= 0:
            raise ConfigurationError("stem_channels must be positive")
        if self.in_channels_m1 <= 0 or self.in_channels_m2 <= 0:
            raise ConfigurationError("modality channel counts must be positive")


@dataclass
class FeaturePyramid:
    """Four feature maps at strides 4, 8, 16, 32."""

    stage1: torch.Tensor
    stage2: torch.Tensor
    stage3: torch.Tensor
    stage4: torch.Tensor

    @property
    def stages(self) -> List[torch.Tensor]:
        return [self.stage1, self.stage2, self.stage3, self.stage4]

    def stage(self, n: int) -> torch.Tensor:
        if n not in (1, 2, 3, 4):
            raise ConfigurationError(f"stage index must be 1..4, got {n}")
        return self.stages[n - 1]

    def validate(self) -> None:
        for lower, upper in zip(self.stages, self.stages[1:]):
            lh, lw = lower.shape[-2:]
            uh, uw = upper.shape[-2:]
            if (lh + 1) // 2 != uh or (lw + 1) // 2 != uw:
                raise ConfigurationError(
                    f"pyramid stages must halve spatially, got {lower.shape} -> {upper.shape}"
                )


@dataclass
class DualBranchFeatures:
    """All four pyramids produced by a dual-modality forward pass."""

    shared_m1: FeaturePyramid
    shared_m2: FeaturePyramid
    spec_m1: FeaturePyramid
    spec_m2: FeaturePyramid

    def validate(self) -> None:
        for pyr in (self.shared_m1, self.shared_m2, self.spec_m1, self.spec_m2):
            pyr.validate()
        for a, b in zip(self.shared_m1.stages, self.shared_m2.stages):
            if a.shape != b.shape:
                raise ConfigurationError("shared pyramids of both modalities must match in shape")


class ModalityStem(nn.Module):
    """Maps a raw modality to the encoder's input width at stride 4."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        if in_channels <= 0:
            raise ConfigurationError("stem in_channels must be positive")
        self.conv = nn.Conv2d(in_channels, out_channels, 7, stride=4, padding=3, bias=False)
        self.bn = nn.BatchNorm2d(out_channels)
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x):
        h, w = x.shape[-2:]
        if h % 32 or w % 32:
            raise ConfigurationError(f"input spatial size must be divisible by 32, got {h}x{w}")
        return self.relu(self.bn(self.conv(x)))


class Encoder(nn.Module):
    """Four-stage residual encoder operating on stem output.

    Stage 1 keeps the stem stride (overall /4); stages 2-4 halve the
    resolution, giving the /4, /8, /16, /32 ladder.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        block = BasicBlock if cfg.block == "basic" else Bottleneck
        cin = cfg.stem_channels
        stages: List[nn.Sequential] = []
        for i, (cout, depth) in enumerate(zip(cfg.stage_channels, cfg.stage_blocks)):
            stride = 1 if i == 0 else 2
            layers = [block(cin, cout, stride)]
            layers.extend(block(cout, cout) for _ in range(depth - 1))
            stages.append(nn.Sequential(*layers))
            cin = cout
        self.stage1, self.stage2, self.stage3, self.stage4 = stages

    @property
    def out_channels(self) -> Tuple[int, int, int, int]:
        return self.cfg.stage_channels

    def forward(self, x) -> FeaturePyramid:
        c1 = self.stage1(x)
        c2 = self.stage2(c1)
        c3 = self.stage3(c2)
        c4 = self.stage4(c3)
        return FeaturePyramid(c1, c2, c3, c4)


class DualEncoderBackbone(nn.Module):
    """Per-modality stems feeding one shared and two specific encoders.

    The shared encoder is a single module invoked for both modalities,
    so its parameters are literally the same tensors on either path.
    """

    def __init__(self, cfg: EncoderConfig = None):
        super().__init__()
        cfg = cfg or EncoderConfig.tiny()
        cfg.validate()
        self.cfg = cfg
        self.stem_m1 = ModalityStem(cfg.in_channels_m1, cfg.stem_channels)
        self.stem_m2 = ModalityStem(cfg.in_channels_m2, cfg.stem_channels)
        self.shared = Encoder(cfg)
        self.spec_m1 = Encoder(cfg)
        self.spec_m2 = Encoder(cfg)

    @property
    def out_channels(self) -> Tuple[int, int, int, int]:
        return self.cfg.stage_channels

    def stem_forward(self, x: torch.Tensor, which: str) -> torch.Tensor:
        if which == "m1":
            return self.stem_m1(x)
        if which == "m2":
            return self.stem_m2(x)
        raise ConfigurationError(f"unknown modality {which!r}")

    def encode(self, stem_out: torch.Tensor, encoder: str) -> FeaturePyramid:
        towers = {"shared": self.shared, "spec_m1": self.spec_m1, "spec_m2": self.spec_m2}
        if encoder not in towers:
            raise ConfigurationError(f"unknown encoder {encoder!r}")
        return towers[encoder](stem_out)

    def forward_modality(self, x: torch.Tensor, which: str) -> Tuple[FeaturePyramid, FeaturePyramid]:
        """Returns (shared, specific) pyramids for one modality."""

        h = self.stem_forward(x, which)
        spec = "spec_m1" if which == "m1" else "spec_m2"
        return self.encode(h, "shared"), self.encode(h, spec)

    def forward_dual(self, x1: torch.Tensor, x2: torch.Tensor) -> DualBranchFeatures:
        if x1.shape[-2:] != x2.shape[-2:]:
            raise ConfigurationError(
                f"modalities must share spatial size, got {x1.shape[-2:]} vs {x2.shape[-2:]}"
            )
        shared_m1, spec_m1 = self.forward_modality(x1, "m1")
        shared_m2, spec_m2 = self.forward_modality(x2, "m2")
        return DualBranchFeatures(
            shared_m1=shared_m1, shared_m2=shared_m2, spec_m1=spec_m1, spec_m2=spec_m2
        )

    forward = forward_dual


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def canonical_parameter_names(model: nn.Module) -> Dict[str, str]:
    """Maps each parameter's dotted path to a stable slash-separated name.

    The scheme is ``tower/stage/layer/kind`` where kind is one of
    weight, bias, bn_gamma, bn_beta. Normalization affine parameters are
    renamed so scale/shift are distinguishable from conv weights when
    grouping distributions by kind.
    """

    names: Dict[str, str] = {}
    norm_params = set()
    for mod_name, mod in model.named_modules():
        if isinstance(mod, (nn.BatchNorm2d, nn.BatchNorm1d, nn.InstanceNorm2d, nn.GroupNorm)):
            for p_name, _ in mod.named_parameters(recurse=False):
                norm_params.add(f"{mod_name}.{p_name}" if mod_name else p_name)
    for name, _ in model.named_parameters():
        parts = name.split(".")
        kind = parts[-1]
        if name in norm_params:
            kind = "bn_gamma" if kind == "weight" else "bn_beta"
        names[name] = "/".join(parts[:-1] + [kind])
    return names
