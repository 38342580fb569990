"""Paired two-modality datasets: synthetic generation, raster I/O and batch iteration.

On-disk layout is one directory per split holding a ``manifest.txt`` plus a
triplet of flat binary rasters per record (``<id>_m1.srs``, ``<id>_m2.srs``,
``<id>_label.srs``).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch

from .errors import ConfigurationError, DatasetError

IGNORE = 255

_MAGIC = b"SRS1"
_HEADER = struct.Struct("<4sBIII")  # magic, dtype code, H, W, C
_DTYPE_CODES = {0: np.float32, 1: np.uint8}
_CODE_FOR_DTYPE = {np.dtype(np.float32): 0, np.dtype(np.uint8): 1}


def write_raster(path: str | Path, array: np.ndarray) -> None:
    """Write an H x W x C raster (float32 or uint8) with the SRS1 header."""
    arr = np.ascontiguousarray(array)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"raster must be HxW or HxWxC, got shape {array.shape}")
    code = _CODE_FOR_DTYPE.get(arr.dtype)
    if code is None:
        raise ValueError(f"unsupported raster dtype {arr.dtype}")
    h, w, c = arr.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(_MAGIC, code, h, w, c))
        f.write(arr.tobytes())


def read_raster(path: str | Path) -> np.ndarray:
    """Read an SRS1 raster back as an H x W x C array."""
    with open(path, "rb") as f:
        header = f.read(_HEADER.size)
        if len(header) != _HEADER.size:
            raise DatasetError(f"truncated raster header in {path}")
        magic, code, h, w, c = _HEADER.unpack(header)
        if magic != _MAGIC:
            raise DatasetError(f"bad raster magic in {path}")
        dtype = _DTYPE_CODES.get(code)
        if dtype is None:
            raise DatasetError(f"unknown raster dtype code {code} in {path}")
        data = np.frombuffer(f.read(), dtype=dtype)
    if data.size != h * w * c:
        raise DatasetError(f"raster payload size mismatch in {path}")
    return data.reshape(h, w, c).copy()


@dataclass
class SampleRecord:
    """One aligned pair of modality rasters plus the per-pixel label map."""

    modality1: np.ndarray  # H x W x C1 float32 in [0, 1]
    modality2: np.ndarray  # H x W x C2 float32 in [0, 1]
    label: np.ndarray      # H x W uint8, values in {0..K-1} or IGNORE
    id: str

    def validate(self, num_classes: int, ignore_value: int = IGNORE) -> None:
        if not (self.modality1.shape[:2] == self.modality2.shape[:2] == self.label.shape[:2]):
            raise ValueError(f"record {self.id}: modalities and label disagree on H, W")
        lab = self.label
        scored = lab[lab != ignore_value]
        if scored.size and int(scored.max()) >= num_classes:
            raise ValueError(f"record {self.id}: label value outside 0..{num_classes - 1}")


@dataclass
class SyntheticSceneConfig:
    num_classes: int = 4
    class_weights: Sequence[float] = (0.7, 0.2, 0.07, 0.03)
    image_size: int = 64
    modality1_channels: int = 1
    modality2_channels: int = 3
    noise_level2: float = 0.3
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")
        w = np.asarray(self.class_weights, dtype=np.float64)
        if w.shape != (self.num_classes,):
            raise ConfigurationError("class_weights length must equal num_classes")
        if abs(float(w.sum()) - 1.0) > 1e-6 or (w <= 0).any():
            raise ConfigurationError("class_weights must be positive and sum to 1")
        if self.image_size < 16:
            raise ConfigurationError("image_size must be >= 16")
        if self.modality1_channels < 1 or self.modality2_channels < 1:
            raise ConfigurationError("modality channel counts must be >= 1")
        if self.noise_level2 < 0:
            raise ConfigurationError("noise_level2 must be nonnegative")


@dataclass
class DatasetManifest:
    """Locators for one dataset split."""

    root: Path
    ids: list[str] = field(default_factory=list)
    num_classes: int = 2
    ignore_value: int = IGNORE

    def m1_path(self, rec_id: str) -> Path:
        return self.root / f"{rec_id}_m1.srs"

    def m2_path(self, rec_id: str) -> Path:
        return self.root / f"{rec_id}_m2.srs"

    def label_path(self, rec_id: str) -> Path:
        return self.root / f"{rec_id}_label.srs"

    def save(self) -> None:
        lines = [f"K={self.num_classes} IGNORE={self.ignore_value}"]
        lines.extend(self.ids)
        (self.root / "manifest.txt").write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, root: str | Path) -> "DatasetManifest":
        root = Path(root)
        manifest_file = root / "manifest.txt"
        if not manifest_file.exists():
            raise DatasetError(f"no manifest.txt under {root}")
        lines = [ln.strip() for ln in manifest_file.read_text().splitlines() if ln.strip()]
        head = dict(part.split("=") for part in lines[0].split())
        return cls(
            root=root,
            ids=lines[1:],
            num_classes=int(head["K"]),
            ignore_value=int(head["IGNORE"]),
        )


# --- synthetic scene generation -------------------------------------------------

def modality1_table(num_classes: int, channels: int) -> np.ndarray:
    """Per-class base intensities for modality 1, shape (K, C1).

    The two rarest classes get nearly identical base intensity so that
    modality 1 alone separates them only through texture amplitude.
    """
    k = num_classes
    base = 0.2 + 0.6 * np.arange(k) / max(k - 1, 1)
    if k >= 3:
        base[k - 1] = base[k - 2] + 0.04
    table = base[:, None] + 0.05 * np.arange(channels)[None, :]
    return np.clip(table, 0.02, 0.98).astype(np.float32)


def modality1_texture_amp(num_classes: int) -> np.ndarray:
    """Per-class texture amplitude; alternates so adjacent classes differ."""
    amp = 0.04 + 0.07 * (np.arange(num_classes) % 2)
    return amp.astype(np.float32)


def modality2_table(num_classes: int, channels: int) -> np.ndarray:
    """Per-class intensities for modality 2: well-separated color coding."""
    c = np.arange(num_classes)[:, None]
    ch = np.arange(channels)[None, :]
    table = 0.5 + 0.42 * np.cos(2 * math.pi * c / num_classes + 2.1 * ch)
    return np.clip(table, 0.03, 0.97).astype(np.float32)


def _smooth_noise(rng: np.random.Generator, size: int, cell: int = 8) -> np.ndarray:
    """Band-limited noise field: bilinear upsampling of a coarse normal grid."""
    n = size // cell + 2
    coarse = rng.standard_normal((n, n)).astype(np.float32)
    pos = np.arange(size, dtype=np.float32) / cell
    i0 = pos.astype(np.int64)
    frac = pos - i0
    top = coarse[i0][:, i0] * (1 - frac)[None, :] + coarse[i0][:, i0 + 1] * frac[None, :]
    bot = coarse[i0 + 1][:, i0] * (1 - frac)[None, :] + coarse[i0 + 1][:, i0 + 1] * frac[None, :]
    return top * (1 - frac)[:, None] + bot * frac[:, None]


def _ellipse_mask(yy, xx, cy, cx, area, rng) -> np.ndarray:
    r = math.sqrt(area / math.pi)
    ratio = rng.uniform(0.5, 2.0)
    a, b = r * math.sqrt(ratio), r / math.sqrt(ratio)
    theta = rng.uniform(0, math.pi)
    dy, dx = yy - cy, xx - cx
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _polygon_mask(yy, xx, cy, cx, area, rng) -> np.ndarray:
    nv = int(rng.integers(3, 8))
    angles = np.sort(rng.uniform(0, 2 * math.pi, nv))
    circumradius = math.sqrt(2 * area / (nv * math.sin(2 * math.pi / nv)))
    radii = circumradius * rng.uniform(0.75, 1.0, nv)
    vy = cy + radii * np.sin(angles)
    vx = cx + radii * np.cos(angles)
    # intersection of the edge half-planes (the polygon's convex kernel)
    mask = np.ones(yy.shape, dtype=bool)
    for i in range(nv):
        j = (i + 1) % nv
        ey, ex = vy[j] - vy[i], vx[j] - vx[i]
        mask &= ex * (yy - vy[i]) - ey * (xx - vx[i]) >= 0
    return mask


def _paint_scene(rng: np.random.Generator, num_classes: int, weights: np.ndarray, size: int) -> np.ndarray:
    """Compose a label map from randomly placed elliptical/polygonal regions.

    The most frequent class is the canvas fill; the others are painted in
    descending-weight order against per-image pixel budgets, with a second
    sweep topping up classes eroded by later paint. Low-weight classes are
    imbalanced by occurrence rather than by blob size: such a class skips
    most images entirely but covers a sizeable patch when it does appear,
    so its regions stay visible in coarse feature maps. The expected
    coverage still converges to the requested weights.
    """
    order = np.argsort(weights)[::-1]
    label = np.full((size, size), order[0], dtype=np.uint8)
    targets = np.zeros(num_classes, dtype=np.float64)
    for c in order[1:]:
        coverage = max(float(weights[c]), 0.10)
        if rng.random() < weights[c] / coverage:
            targets[c] = coverage * rng.uniform(0.75, 1.25) * size * size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    min_area = max(24.0, 0.004 * size * size)
    for _ in range(2):
        for c in order[1:]:
            if targets[c] <= 0.0:
                continue
            for _ in range(48):
                deficit = targets[c] - float((label == c).sum())
                if deficit < min_area:
                    break
                area = float(np.clip(deficit * rng.uniform(0.5, 1.0), min_area, size * size / 4))
                cy, cx = rng.uniform(0, size), rng.uniform(0, size)
                if rng.random() < 0.5:
                    mask = _ellipse_mask(yy, xx, cy, cx, area, rng)
                else:
                    mask = _polygon_mask(yy, xx, cy, cx, area, rng)
                label[mask] = c
    return label


def render_record(cfg: SyntheticSceneConfig, rng: np.random.Generator, rec_id: str) -> SampleRecord:
    """Paint one scene and render both modalities from its label geometry."""
    w = np.asarray(cfg.class_weights, dtype=np.float64)
    label = _paint_scene(rng, cfg.num_classes, w, cfg.image_size)

    t1 = modality1_table(cfg.num_classes, cfg.modality1_channels)
    amp = modality1_texture_amp(cfg.num_classes)
    texture = 0.75 * _smooth_noise(rng, cfg.image_size) \
        + 0.5 * rng.standard_normal((cfg.image_size, cfg.image_size)).astype(np.float32)
    m1 = t1[label] + (amp[label] * texture)[:, :, None]
    m1 = np.clip(m1, 0.0, 1.0).astype(np.float32)

    t2 = modality2_table(cfg.num_classes, cfg.modality2_channels)
    m2 = t2[label].astype(np.float32)
    if cfg.noise_level2 > 0:
        # The multiplicative field has a white component everywhere; on top
        # of that, close to half the scenes lose part or all of modality 2
        # to saturation, the way haze or an outage blots out an optical
        # sensor while leaving the other modality untouched. Those scenes
        # are what teach the fused decoder to keep working when modality 2
        # carries nothing.
        field = rng.standard_normal((cfg.image_size, cfg.image_size, 1)).astype(np.float32)
        if rng.random() < 0.45:
            if rng.random() < 0.60:
                field = field + 120.0
            else:
                lumps = _smooth_noise(rng, cfg.image_size, cell=16).astype(np.float32)
                field = field + 40.0 * np.maximum(lumps - 0.35, 0.0)[:, :, None]
        m2 = np.clip(m2 * (1.0 + cfg.noise_level2 * field), 0.0, 1.0)
    return SampleRecord(modality1=m1, modality2=m2, label=label, id=rec_id)


def generate_synthetic_dataset(cfg: SyntheticSceneConfig, count: int, out_dir: str | Path) -> DatasetManifest:
    """Write ``count`` synthetic records plus a manifest under ``out_dir``."""
    cfg.validate()
    if count < 1:
        raise ConfigurationError("count must be >= 1")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc

    manifest = DatasetManifest(root=out, num_classes=cfg.num_classes, ignore_value=IGNORE)
    children = np.random.SeedSequence(cfg.seed).spawn(count)
    for i, child in enumerate(children):
        rec_id = f"rec{i:05d}"
        record = render_record(cfg, np.random.Generator(np.random.PCG64(child)), rec_id)
        write_raster(manifest.m1_path(rec_id), record.modality1)
        write_raster(manifest.m2_path(rec_id), record.modality2)
        write_raster(manifest.label_path(rec_id), record.label)
        manifest.ids.append(rec_id)
    manifest.save()
    return manifest


# --- batching -------------------------------------------------------------------

def _crop_window(rng: np.random.Generator, h: int, w: int, crop: int) -> tuple[int, int]:
    y0 = int(rng.integers(0, h - crop + 1))
    x0 = int(rng.integers(0, w - crop + 1))
    return y0, x0


def load_batch(
    manifest: DatasetManifest,
    batch: int,
    crop: int,
    shuffle_seed: int,
    step: int,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Random-access batch for a global step; identical crop window across parts.

    The schedule is a pure function of (shuffle_seed, step): each epoch uses its
    own record permutation, and crop offsets are drawn from a per-step stream.
    """
    n = len(manifest.ids)
    if n == 0:
        raise DatasetError("empty manifest")
    if batch < 1:
        raise ValueError("batch must be >= 1")
    per_epoch = n // batch
    if per_epoch == 0:
        raise DatasetError(f"batch size {batch} exceeds dataset size {n}")
    epoch, slot = divmod(step, per_epoch)
    perm_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([shuffle_seed, epoch])))
    perm = perm_rng.permutation(n)
    chosen = perm[slot * batch:(slot + 1) * batch]
    crop_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([shuffle_seed, epoch, slot])))

    m1s, m2s, labels = [], [], []
    for idx in chosen:
        rec_id = manifest.ids[int(idx)]
        m1 = read_raster(manifest.m1_path(rec_id))
        m2 = read_raster(manifest.m2_path(rec_id))
        label = read_raster(manifest.label_path(rec_id))[:, :, 0]
        h, w = label.shape
        if crop > min(h, w):
            raise DatasetError(f"crop {crop} exceeds image size {h}x{w}")
        y0, x0 = _crop_window(crop_rng, h, w, crop)
        m1s.append(m1[y0:y0 + crop, x0:x0 + crop])
        m2s.append(m2[y0:y0 + crop, x0:x0 + crop])
        labels.append(label[y0:y0 + crop, x0:x0 + crop])

    x1 = torch.from_numpy(np.stack(m1s)).permute(0, 3, 1, 2).contiguous()
    x2 = torch.from_numpy(np.stack(m2s)).permute(0, 3, 1, 2).contiguous()
    y = torch.from_numpy(np.stack(labels).astype(np.int64))
    return x1, x2, y


def iterate_batches(
    manifest: DatasetManifest,
    batch: int,
    crop: int,
    shuffle_seed: int,
    num_steps: int | None = None,
) -> Iterator[tuple[torch.Tensor, torch.Tensor, torch.Tensor]]:
    """Deterministic batch stream; one epoch by default, ``num_steps`` to cycle."""
    n = len(manifest.ids)
    if n == 0:
        raise DatasetError("empty manifest")
    if num_steps is None:
        num_steps = n // batch
    for step in range(num_steps):
        yield load_batch(manifest, batch, crop, shuffle_seed, step)


def class_histogram(manifest: DatasetManifest) -> np.ndarray:
    """Pixel counts per class over the whole split, IGNORE excluded."""
    if not manifest.ids:
        raise DatasetError("empty manifest")
    counts = np.zeros(manifest.num_classes, dtype=np.int64)
    for rec_id in manifest.ids:
        label = read_raster(manifest.label_path(rec_id))[:, :, 0]
        scored = label[label != manifest.ignore_value]
        counts += np.bincount(scored.astype(np.int64), minlength=manifest.num_classes)[:manifest.num_classes]
    return counts
