"""Full segmentation models.

``Stars`` wires the dual-encoder backbone, per-stage fusion, three FPN
decoders, and the cross-modal translators into one trainable module.
``BaselineModel`` is the single-modality reference point trained under
the same budget: one stem, one encoder, one decoder, no alignment.
"""

import json
from dataclasses import asdict
from typing import List, Optional, Tuple

import torch
import torch.nn as nn

from .alignment import AlignmentConfig, build_translators
from .backbone import (
    DualBranchFeatures,
    DualEncoderBackbone,
    Encoder,
    EncoderConfig,
    FeaturePyramid,
    ModalityStem,
)
from .errors import ConfigurationError
from .fusion import FPNDecoder, FusionStack

BRANCHES = ("m1", "m2", "fused")


def default_lateral_width(cfg: EncoderConfig) -> int:
    return 256 if cfg.variant == "resnet50like" else 128


class Stars(DualEncoderBackbone):
    """Dual-modality segmentation network with shared/specific encoders.

    Training mode consumes both modalities and yields three logit maps
    (per-modality branches and a cross-modality fused branch); at
    inference any single modality can be decoded on its own, by default
    through the fused decoder.
    """

    def __init__(
        self,
        encoder_cfg: Optional[EncoderConfig] = None,
        num_classes: int = 4,
        align_cfg: Optional[AlignmentConfig] = None,
        use_trans: bool = True,
        translate_first_kernel: int = 1,
        lateral_width: Optional[int] = None,
    ):
        encoder_cfg = encoder_cfg or EncoderConfig.tiny()
        super().__init__(encoder_cfg)
        if num_classes < 1:
            raise ConfigurationError("num_classes must be >= 1")
        align_cfg = align_cfg or AlignmentConfig()
        align_cfg.validate()
        self.num_classes = num_classes
        self.align_cfg = align_cfg
        self.use_trans = use_trans
        self.translate_first_kernel = translate_first_kernel
        width = lateral_width or default_lateral_width(encoder_cfg)
        self.lateral_width = width
        dec_channels = [2 * c for c in encoder_cfg.stage_channels]
        self.fusion = FusionStack(encoder_cfg.stage_channels)
        self.decoder_m1 = FPNDecoder(dec_channels, num_classes, width)
        self.decoder_m2 = FPNDecoder(dec_channels, num_classes, width)
        self.decoder_fuse = FPNDecoder(dec_channels, num_classes, width)
        if use_trans:
            self.translators = build_translators(
                encoder_cfg.stage_channels, align_cfg.stages, translate_first_kernel
            )
        else:
            self.translators = None

    def forward_branches(
        self, dual: DualBranchFeatures
    ) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        s_m1 = self.decoder_m1(self.fusion.fuse_modality(dual.shared_m1, dual.spec_m1))
        s_m2 = self.decoder_m2(self.fusion.fuse_modality(dual.shared_m2, dual.spec_m2))
        s_fuse = self.decoder_fuse(self.fusion.fuse_cross(dual))
        return s_m1, s_m2, s_fuse

    def forward(self, x1: torch.Tensor, x2: torch.Tensor):
        return self.forward_branches(self.forward_dual(x1, x2))

    def forward_single(
        self, x: torch.Tensor, modality: str, branch: str = "fused"
    ) -> torch.Tensor:
        """Decodes one modality alone.

        The available modality's specific and shared features are fused
        exactly as in its training branch; ``branch`` picks the decoder
        (the cross-modality decoder by default, or the modality's own).
        """

        if modality not in ("m1", "m2"):
            raise ConfigurationError(f"unknown modality {modality!r}")
        if branch not in BRANCHES:
            raise ConfigurationError(f"unknown branch {branch!r}")
        if branch != "fused" and branch != modality:
            raise ConfigurationError(
                f"branch {branch!r} cannot be decoded from modality {modality!r} alone"
            )
        shared, spec = self.forward_modality(x, modality)
        pyramid = self.fusion.fuse_modality(shared, spec)
        if branch == "fused":
            return self.decoder_fuse(pyramid)
        return (self.decoder_m1 if branch == "m1" else self.decoder_m2)(pyramid)

    def describe(self) -> str:
        """Stable architecture fingerprint string used for checkpoint hashing."""

        payload = {
            "model": "stars",
            "encoder": asdict(self.cfg),
            "num_classes": self.num_classes,
            "align": asdict(self.align_cfg),
            "use_trans": self.use_trans,
            "translate_first_kernel": self.translate_first_kernel,
            "lateral_width": self.lateral_width,
        }
        return json.dumps(payload, sort_keys=True)


class BaselineModel(nn.Module):
    """Single-modality encoder-decoder trained under the same budget."""

    def __init__(
        self,
        encoder_cfg: Optional[EncoderConfig] = None,
        num_classes: int = 4,
        modality: str = "m1",
        lateral_width: Optional[int] = None,
    ):
        super().__init__()
        encoder_cfg = encoder_cfg or EncoderConfig.tiny()
        encoder_cfg.validate()
        if modality not in ("m1", "m2"):
            raise ConfigurationError(f"unknown modality {modality!r}")
        if num_classes < 1:
            raise ConfigurationError("num_classes must be >= 1")
        self.cfg = encoder_cfg
        self.num_classes = num_classes
        self.modality = modality
        in_channels = (
            encoder_cfg.in_channels_m1 if modality == "m1" else encoder_cfg.in_channels_m2
        )
        width = lateral_width or default_lateral_width(encoder_cfg)
        self.lateral_width = width
        self.stem = ModalityStem(in_channels, encoder_cfg.stem_channels)
        self.encoder = Encoder(encoder_cfg)
        self.decoder = FPNDecoder(encoder_cfg.stage_channels, num_classes, width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        pyramid: FeaturePyramid = self.encoder(self.stem(x))
        return self.decoder(pyramid.stages)

    def describe(self) -> str:
        payload = {
            "model": "baseline",
            "encoder": asdict(self.cfg),
            "num_classes": self.num_classes,
            "modality": self.modality,
            "lateral_width": self.lateral_width,
        }
        return json.dumps(payload, sort_keys=True)


def build_from_description(desc: dict) -> nn.Module:
    """Reconstructs a model from the description stored in a checkpoint."""

    kind = desc.get("model")
    if kind not in ("stars", "baseline"):
        raise ConfigurationError(f"unknown model kind in checkpoint: {kind!r}")
    enc = dict(desc["encoder"])
    enc["stage_channels"] = tuple(enc["stage_channels"])
    enc["stage_blocks"] = tuple(enc["stage_blocks"])
    encoder_cfg = EncoderConfig(**enc)
    if kind == "stars":
        align = dict(desc["align"])
        align["stages"] = tuple(align["stages"])
        return Stars(
            encoder_cfg,
            num_classes=desc["num_classes"],
            align_cfg=AlignmentConfig(**align),
            use_trans=desc["use_trans"],
            translate_first_kernel=desc["translate_first_kernel"],
            lateral_width=desc["lateral_width"],
        )
    return BaselineModel(
        encoder_cfg,
        num_classes=desc["num_classes"],
        modality=desc["modality"],
        lateral_width=desc["lateral_width"],
    )
