"""Analysis instruments for trained models.

Four read-only probes: a cross-modality class-similarity matrix over
shared features, a feature-collapse monitor, per-encoder parameter
distribution export, and Grad-CAM heatmaps per encoder branch.
"""

import csv
import os
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .alignment import gather_features, sample_balanced_pixels
from .data import DatasetManifest, iterate_batches, read_raster
from .errors import ConfigurationError, DatasetError

EPS = 1e-8


@dataclass
class SimilarityMatrix:
    """Cosine similarities between per-class mean shared features."""

    step: int
    matrix: np.ndarray  # K x K, rows modality 1, cols modality 2; nan where absent
    support: np.ndarray  # per-class sampled pixel counts

    def diagonal_margin(self) -> float:
        """Mean diagonal minus mean off-diagonal, ignoring absent classes."""

        k = self.matrix.shape[0]
        diag = np.diag(self.matrix)
        off_mask = ~np.eye(k, dtype=bool)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return float(np.nanmean(diag) - np.nanmean(self.matrix[off_mask]))

    def save_csv(self, path: str) -> None:
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", self.step])
            writer.writerow(["support"] + [int(s) for s in self.support])
            for row in self.matrix:
                writer.writerow([f"{v:.6f}" if np.isfinite(v) else "nan" for v in row])


def _default_crop(manifest: DatasetManifest) -> int:
    label = read_raster(manifest.label_path(manifest.ids[0]))
    side = min(label.shape[0], label.shape[1])
    crop = (side // 32) * 32
    if crop == 0:
        raise DatasetError("records too small for a stride-32 network")
    return crop


def class_similarity(
    model,
    manifest: DatasetManifest,
    stage: int = 4,
    max_batches: int = 8,
    batch_size: int = 4,
    samples_per_class: int = 32,
    seed: int = 0,
    step: int = 0,
) -> SimilarityMatrix:
    """Cross-modality cosine similarity between class-mean shared features.

    Pixels are drawn with the class-balanced sampler over a capped
    number of batches, features are gathered from the chosen shared
    stage of each modality and averaged per class, and the matrix holds
    cosines between every modality-1 class mean (rows) and modality-2
    class mean (columns).
    """

    if stage not in (3, 4):
        raise ConfigurationError(f"similarity stage must be 3 or 4, got {stage}")
    k = manifest.num_classes
    sums1 = torch.zeros(k, 0)
    sums2 = torch.zeros(k, 0)
    support = np.zeros(k, dtype=np.int64)
    crop = _default_crop(manifest)
    model.eval()
    initialized = False
    with torch.no_grad():
        for i, (x1, x2, y_t) in enumerate(
            iterate_batches(manifest, batch_size, crop, shuffle_seed=seed, num_steps=max_batches)
        ):
            shared1, _ = model.forward_modality(x1, "m1")
            shared2, _ = model.forward_modality(x2, "m2")
            f1, f2 = shared1.stage(stage), shared2.stage(stage)
            if not initialized:
                sums1 = torch.zeros(k, f1.shape[1], dtype=torch.float64)
                sums2 = torch.zeros(k, f2.shape[1], dtype=torch.float64)
                initialized = True
            indices, labels = sample_balanced_pixels(
                y_t, samples_per_class, rng_seed=[seed, 11, i]
            )
            if indices.numel() == 0:
                continue
            rows1 = gather_features(f1, indices, (y_t.shape[-2], y_t.shape[-1]))
            rows2 = gather_features(f2, indices, (y_t.shape[-2], y_t.shape[-1]))
            for c in labels.unique().tolist():
                mask = labels == c
                sums1[c] += rows1[mask].double().sum(dim=0)
                sums2[c] += rows2[mask].double().sum(dim=0)
                support[c] += int(mask.sum())
    if support.sum() == 0:
        raise DatasetError("no labeled pixels found; similarity matrix is empty")
    matrix = similarity_from_sums(sums1.numpy(), sums2.numpy(), support)
    return SimilarityMatrix(step=step, matrix=matrix, support=support)


def similarity_from_sums(
    sums1: np.ndarray, sums2: np.ndarray, support: np.ndarray
) -> np.ndarray:
    """Cosine matrix between per-class mean vectors; absent classes give nan."""

    k = sums1.shape[0]
    matrix = np.full((k, k), np.nan)
    present = support > 0
    for i in range(k):
        if not present[i]:
            continue
        mi = sums1[i] / support[i]
        mi = mi / (np.linalg.norm(mi) + EPS)
        for j in range(k):
            if not present[j]:
                continue
            mj = sums2[j] / support[j]
            mj = mj / (np.linalg.norm(mj) + EPS)
            matrix[i, j] = float(mi @ mj)
    return matrix


def collapse_monitor(features: torch.Tensor) -> float:
    """Spread of L2-normalized per-position feature vectors.

    Zero means every position carries the same direction (full
    collapse); isotropic random unit vectors in C dimensions give about
    sqrt(1/C) per coordinate.
    """

    if features.numel() == 0:
        raise ConfigurationError("collapse monitor needs a nonempty feature map")
    with torch.no_grad():
        b, c = features.shape[0], features.shape[1]
        flat = features.reshape(b, c, -1)
        unit = flat / (flat.norm(dim=1, keepdim=True) + EPS)
        vectors = unit.permute(0, 2, 1).reshape(-1, c)
        return float(vectors.std(dim=0, correction=0).mean())


@dataclass
class ParamDistribution:
    encoder: str
    layer: str
    kind: str  # conv_weight | bn_gamma | bn_beta
    bin_edges: np.ndarray
    counts: np.ndarray
    mean: float
    std: float
    numel: int


@dataclass
class ParamReport:
    distributions: List[ParamDistribution] = field(default_factory=list)
    absent: List[str] = field(default_factory=list)

    def for_encoder(self, encoder: str) -> List[ParamDistribution]:
        return [d for d in self.distributions if d.encoder == encoder]


def _classify_param(name: str, tensor: torch.Tensor) -> Optional[str]:
    if tensor.ndim == 4 and name.endswith("weight"):
        return "conv_weight"
    if tensor.ndim == 1 and name.endswith("weight"):
        return "bn_gamma"
    if tensor.ndim == 1 and name.endswith("bias"):
        return "bn_beta"
    return None


def export_param_distributions(
    source,
    encoders: Sequence[str] = ("shared", "spec_m1", "spec_m2"),
    bins: int = 64,
    out_dir: Optional[str] = None,
) -> ParamReport:
    """Histograms and moments of encoder parameters, grouped by kind.

    ``source`` is a model or a state dict (e.g. loaded from a
    checkpoint). Encoders with no matching parameters are listed as
    absent rather than failing.
    """

    if hasattr(source, "state_dict"):
        state = source.state_dict()
    else:
        state = source
    report = ParamReport()
    for encoder in encoders:
        prefix = encoder + "."
        found = False
        for name, tensor in state.items():
            if not name.startswith(prefix) or not isinstance(tensor, torch.Tensor):
                continue
            kind = _classify_param(name, tensor)
            if kind is None:
                continue
            found = True
            values = tensor.detach().float().reshape(-1).numpy()
            counts, edges = np.histogram(values, bins=bins)
            report.distributions.append(
                ParamDistribution(
                    encoder=encoder,
                    layer=name,
                    kind=kind,
                    bin_edges=edges,
                    counts=counts,
                    mean=float(values.mean()),
                    std=float(values.std()),
                    numel=int(values.size),
                )
            )
        if not found:
            report.absent.append(encoder)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        for encoder in encoders:
            path = os.path.join(out_dir, f"params_{encoder}.csv")
            with open(path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["layer", "kind", "numel", "mean", "std", "bin_lo", "bin_hi", "count"])
                dists = report.for_encoder(encoder)
                if not dists:
                    writer.writerow(["absent", "", 0, "", "", "", "", ""])
                    continue
                for d in dists:
                    for lo, hi, c in zip(d.bin_edges[:-1], d.bin_edges[1:], d.counts):
                        writer.writerow(
                            [d.layer, d.kind, d.numel, f"{d.mean:.6e}", f"{d.std:.6e}",
                             f"{lo:.6e}", f"{hi:.6e}", int(c)]
                        )
    return report


def grad_cam(
    model,
    x1: torch.Tensor,
    x2: torch.Tensor,
    target_class: int,
    branch: str = "shared",
    stage: int = 4,
    modality: str = "m1",
) -> np.ndarray:
    """Class-activation heatmap for one encoder branch.

    The scalar target is the summed logit of the target class over the
    fused decoder output; its gradient at the chosen encoder stage is
    channel-averaged into weights, the weighted feature sum is
    rectified, normalized to [0, 1], and upsampled to input resolution.
    A gradient that vanishes everywhere yields a flat zero map and a
    warning rather than an error.
    """

    if branch not in ("shared", "spec_m1", "spec_m2"):
        raise ConfigurationError(f"unknown encoder branch {branch!r}")
    if stage not in (1, 2, 3, 4):
        raise ConfigurationError(f"stage must be 1..4, got {stage}")
    if not 0 <= target_class < model.num_classes:
        raise ConfigurationError(
            f"target class {target_class} outside 0..{model.num_classes - 1}"
        )
    if branch == "spec_m1":
        encoder = model.spec_m1
        pick = 0
    elif branch == "spec_m2":
        encoder = model.spec_m2
        pick = 0
    else:
        encoder = model.shared
        pick = 0 if modality == "m1" else 1  # shared tower runs once per modality

    stage_module = getattr(encoder, f"stage{stage}")
    captured: List[torch.Tensor] = []

    def hook(_module, _inputs, output):
        output.retain_grad()
        captured.append(output)

    handle = stage_module.register_forward_hook(hook)
    model.eval()
    try:
        with torch.enable_grad():
            dual = model.forward_dual(x1, x2)
            _, _, s_fuse = model.forward_branches(dual)
            target = s_fuse[:, target_class].sum()
            model.zero_grad(set_to_none=True)
            target.backward()
    finally:
        handle.remove()
    if pick >= len(captured):
        raise ConfigurationError("encoder stage was not reached during the forward pass")
    feat = captured[pick]
    heat = cam_from_gradients(feat, feat.grad, (x1.shape[-2], x1.shape[-1]))
    model.zero_grad(set_to_none=True)
    return heat


def cam_from_gradients(
    feat: torch.Tensor, grad: Optional[torch.Tensor], out_size: Tuple[int, int]
) -> np.ndarray:
    """Weights features by channel-averaged gradients; rectify, scale, upsample."""

    h, w = out_size
    if grad is None or float(grad.abs().max()) == 0.0:
        warnings.warn("gradient vanished everywhere; returning a flat heatmap")
        return np.zeros((h, w), dtype=np.float32)
    feat = feat.detach()
    grad = grad.detach()
    weights = grad.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * feat).sum(dim=1, keepdim=True))[:1]
    lo, hi = float(cam.min()), float(cam.max())
    if hi - lo <= 1e-12:
        warnings.warn("activation map is constant; returning a flat heatmap")
        return np.zeros((h, w), dtype=np.float32)
    cam = (cam - lo) / (hi - lo)
    cam = F.interpolate(cam, size=(h, w), mode="bilinear", align_corners=False)
    return cam[0, 0].numpy()


def save_heatmap_png(heatmap: np.ndarray, path: str) -> None:
    from PIL import Image

    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    img = (np.clip(heatmap, 0.0, 1.0) * 255).astype(np.uint8)
    Image.fromarray(img, mode="L").save(path)
