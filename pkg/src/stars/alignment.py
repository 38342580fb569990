"""Cross-modal feature alignment.

Two mechanisms act on the shared-encoder pyramids of the two modalities
at the deep stages (3 and 4 by default):

* a pair of lightweight translation modules per stage predicts each
  modality's shared features from the other's, and a negative cosine
  loss pulls the prediction toward a stop-gradient anchor, and
* a class-balanced pixel sampler picks N coordinates per class from the
  label map, gathers L2-normalized feature rows from both modalities at
  those coordinates, and a cross-modal supervised contrastive loss
  tightens same-class rows across modalities.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from .backbone import DualBranchFeatures
from .data import IGNORE
from .errors import ConfigurationError

EPS = 1e-8


class TranslationModule(nn.Module):
    """Conv1x1 -> InstanceNorm -> SiLU -> Conv1x1, resolution preserving.

    ``first_kernel`` may be 3 to give the first conv a small spatial
    receptive field; the default 1 keeps the whole module pointwise.
    A constant-over-space input normalizes to zeros, so the output
    collapses to the second conv's bias.
    """

    def __init__(self, channels: int, direction: str = "m1_to_m2", first_kernel: int = 1):
        super().__init__()
        if first_kernel not in (1, 3):
            raise ConfigurationError(f"first_kernel must be 1 or 3, got {first_kernel}")
        if direction not in ("m1_to_m2", "m2_to_m1"):
            raise ConfigurationError(f"unknown direction {direction!r}")
        self.direction = direction
        self.in_channels = channels
        self.out_channels = channels
        self.conv_in = nn.Conv2d(
            channels, channels, first_kernel, padding=first_kernel // 2, bias=True
        )
        self.norm = nn.InstanceNorm2d(channels, affine=False)
        self.act = nn.SiLU()
        self.conv_out = nn.Conv2d(channels, channels, 1, bias=True)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        if f.shape[1] != self.in_channels:
            raise ConfigurationError(
                f"translation expects {self.in_channels} channels, got {f.shape[1]}"
            )
        return self.conv_out(self.act(self.norm(self.conv_in(f))))


def build_translators(
    stage_channels: Sequence[int], stages: Iterable[int], first_kernel: int = 1
) -> nn.ModuleDict:
    """One translator per stage and direction, keyed stage{N}/{direction}."""

    table = nn.ModuleDict()
    for s in sorted(stages):
        ch = stage_channels[s - 1]
        table[f"stage{s}"] = nn.ModuleDict(
            {
                "m1_to_m2": TranslationModule(ch, "m1_to_m2", first_kernel),
                "m2_to_m1": TranslationModule(ch, "m2_to_m1", first_kernel),
            }
        )
    return table


@dataclass
class AlignmentConfig:
    alpha: float = 0.5
    beta: float = 0.2
    tau: float = 0.1
    samples_per_class: int = 32
    stages: Tuple[int, ...] = (3, 4)
    detach: bool = True

    def validate(self) -> None:
        if self.tau <= 0:
            raise ConfigurationError(f"tau must be positive, got {self.tau}")
        if self.samples_per_class < 1:
            raise ConfigurationError("samples_per_class must be >= 1")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigurationError("alpha and beta must be non-negative")
        if not self.stages or any(s not in (3, 4) for s in self.stages):
            raise ConfigurationError(
                f"alignment stages must be a nonempty subset of (3, 4), got {self.stages}"
            )


@dataclass
class AlignmentBatch:
    """Balanced pixel sample with per-modality normalized feature rows."""

    indices: torch.Tensor  # (M, 3) int64 rows of (batch_idx, y, x)
    labels: torch.Tensor  # (M,) int64
    feats_m1: torch.Tensor  # (M, C), unit rows
    feats_m2: torch.Tensor  # (M, C), unit rows

    @property
    def empty(self) -> bool:
        return self.labels.numel() == 0

    def validate(self, samples_per_class: Optional[int] = None) -> None:
        if self.empty:
            return
        if (self.labels == IGNORE).any():
            raise ConfigurationError("alignment batch contains ignore-valued samples")
        for feats in (self.feats_m1, self.feats_m2):
            norms = feats.norm(dim=1)
            if not torch.allclose(norms, torch.ones_like(norms), atol=1e-5):
                raise ConfigurationError("alignment feature rows must be unit-normalized")
        if samples_per_class is not None:
            counts = torch.bincount(self.labels)
            present = counts[counts > 0]
            if not bool((present == samples_per_class).all()):
                raise ConfigurationError(
                    f"each sampled class must contribute exactly {samples_per_class} rows"
                )


def normalize_rows(x: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    return x / (x.norm(dim=-1, keepdim=True) + eps)


def _normalize_channels(x: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    return x / (x.norm(dim=1, keepdim=True) + eps)


def ncs_loss(
    p1: torch.Tensor,
    f_m2: torch.Tensor,
    p2: torch.Tensor,
    f_m1: torch.Tensor,
    detach: bool = True,
) -> torch.Tensor:
    """Negative symmetric cosine similarity against (optionally) fixed anchors.

    Cosine is taken per spatial position over channels, then averaged
    over batch and space. With ``detach`` the anchors are treated as
    constants, so gradient reaches the encoders only through p1/p2.
    """

    anchor2 = f_m2.detach() if detach else f_m2
    anchor1 = f_m1.detach() if detach else f_m1
    s1 = (_normalize_channels(p1) * _normalize_channels(anchor2)).sum(dim=1).mean()
    s2 = (_normalize_channels(p2) * _normalize_channels(anchor1)).sum(dim=1).mean()
    return -0.5 * (s1 + s2)


def sample_balanced_pixels(
    label: torch.Tensor, samples_per_class: int, rng_seed
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Draws exactly N coordinates per class present in the batch.

    Coordinates for each class are shuffled once; classes with fewer
    than N pixels are walked cyclically so repeats are spread evenly.
    Ignore-valued pixels are never drawn. Returns empty tensors when no
    valid class exists, which callers treat as "skip this step".
    """

    if samples_per_class < 1:
        raise ConfigurationError("samples_per_class must be >= 1")
    lab = label.detach().cpu().numpy()
    if lab.ndim != 3:
        raise ConfigurationError(f"label must be (B, H, W), got shape {tuple(lab.shape)}")
    rng = np.random.default_rng(np.random.SeedSequence(rng_seed))
    classes = np.unique(lab)
    classes = classes[classes != IGNORE]
    picked: List[np.ndarray] = []
    picked_labels: List[np.ndarray] = []
    for c in classes.tolist():
        coords = np.argwhere(lab == c)  # (n, 3) rows of (b, y, x)
        order = rng.permutation(coords.shape[0])
        reps = -(-samples_per_class // coords.shape[0])  # ceil
        cyclic = np.tile(order, reps)[:samples_per_class]
        picked.append(coords[cyclic])
        picked_labels.append(np.full(samples_per_class, c, dtype=np.int64))
    if not picked:
        return (
            torch.empty(0, 3, dtype=torch.int64),
            torch.empty(0, dtype=torch.int64),
        )
    indices = torch.from_numpy(np.concatenate(picked).astype(np.int64))
    labels = torch.from_numpy(np.concatenate(picked_labels))
    return indices, labels


def gather_features(
    stage: torch.Tensor, indices: torch.Tensor, label_shape: Tuple[int, int]
) -> torch.Tensor:
    """Pulls unit-normalized feature rows at label coordinates.

    Label coordinates map to feature cells by integer division by the
    resolution ratio, so one call works at any pyramid stride.
    """

    if indices.numel() == 0:
        return stage.new_zeros((0, stage.shape[1]))
    label_h, label_w = label_shape
    _, _, feat_h, feat_w = stage.shape
    ratio_y = label_h // feat_h
    ratio_x = label_w // feat_w
    ys = torch.div(indices[:, 1], ratio_y, rounding_mode="floor")
    xs = torch.div(indices[:, 2], ratio_x, rounding_mode="floor")
    if bool((indices[:, 1] >= label_h).any()) or bool((indices[:, 2] >= label_w).any()):
        raise IndexError("pixel index outside the label map")
    rows = stage[indices[:, 0], :, ys, xs]
    return normalize_rows(rows)


def psc_loss(batch: AlignmentBatch, tau: float) -> Tuple[torch.Tensor, bool]:
    """Cross-modal supervised contrastive loss over sampled pixels.

    For each anchor row in one modality the candidate set is every row
    of the other modality; positives are the same-class subset. The
    positive mass sits inside the log (a single log of a ratio of
    exponential sums), anchors are averaged, and the two anchor
    directions are averaged as well. Returns (loss, skipped).
    """

    if tau <= 0:
        raise ConfigurationError(f"tau must be positive, got {tau}")
    if batch.empty:
        return torch.zeros(()), True

    def directed(anchors, anchor_labels, candidates, candidate_labels):
        sim = anchors @ candidates.t() / tau
        pos = anchor_labels[:, None] == candidate_labels[None, :]
        full = torch.logsumexp(sim, dim=1)
        pos_sim = sim.masked_fill(~pos, float("-inf"))
        positive = torch.logsumexp(pos_sim, dim=1)
        return (full - positive).mean()

    d1 = directed(batch.feats_m1, batch.labels, batch.feats_m2, batch.labels)
    d2 = directed(batch.feats_m2, batch.labels, batch.feats_m1, batch.labels)
    return 0.5 * (d1 + d2), False


class AlignmentOutcome(NamedTuple):
    lncs: torch.Tensor
    lpsc: torch.Tensor
    psc_skipped: bool


def alignment_losses(
    dual: DualBranchFeatures,
    label: torch.Tensor,
    cfg: AlignmentConfig,
    translators: Optional[nn.ModuleDict],
    rng_seed,
    want_ncs: bool = True,
    want_psc: bool = True,
) -> AlignmentOutcome:
    """Evaluates both alignment losses on the shared pyramids.

    Pixel coordinates are sampled once at label resolution and reused
    at every configured stage; per-stage losses are averaged. With
    ``translators=None`` the cosine loss compares the shared features
    directly (the no-translation ablation). ``want_ncs``/``want_psc``
    disable a term entirely (it comes back as a constant zero).
    """

    cfg.validate()
    if want_psc:
        indices, labels = sample_balanced_pixels(label, cfg.samples_per_class, rng_seed)
    else:
        indices = labels = torch.empty(0, dtype=torch.int64)
    label_shape = (label.shape[-2], label.shape[-1])
    ncs_terms: List[torch.Tensor] = []
    psc_terms: List[torch.Tensor] = []
    for s in sorted(cfg.stages):
        f1 = dual.shared_m1.stage(s)
        f2 = dual.shared_m2.stage(s)
        if want_ncs:
            if translators is None:
                p1, p2 = f1, f2
            else:
                stage_key = f"stage{s}"
                if stage_key not in translators:
                    raise ConfigurationError(f"no translators registered for stage {s}")
                p1 = translators[stage_key]["m1_to_m2"](f1)
                p2 = translators[stage_key]["m2_to_m1"](f2)
            ncs_terms.append(ncs_loss(p1, f2, p2, f1, cfg.detach))
        if indices.numel():
            batch = AlignmentBatch(
                indices=indices,
                labels=labels,
                feats_m1=gather_features(f1, indices, label_shape),
                feats_m2=gather_features(f2, indices, label_shape),
            )
            loss, _ = psc_loss(batch, cfg.tau)
            psc_terms.append(loss)
    lncs = torch.stack(ncs_terms).mean() if ncs_terms else torch.zeros(())
    if psc_terms:
        lpsc = torch.stack(psc_terms).mean()
        skipped = False
    else:
        lpsc = torch.zeros(())
        skipped = True
    return AlignmentOutcome(lncs=lncs, lpsc=lpsc, psc_skipped=skipped)
