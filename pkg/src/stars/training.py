"""Joint training loop: losses, schedule, checkpoints, metrics log.

The total objective is the mean cross-entropy of the three decoding
branches plus weighted alignment terms. The learning rate ramps
linearly from a small init value to its peak over the warmup steps and
then follows a cosine decay to the floor. Checkpoints are single binary
containers with per-section checksums, written atomically.
"""

import hashlib
import io
import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import torch
import torch.nn.functional as F

from .alignment import AlignmentConfig, alignment_losses
from .data import IGNORE, DatasetManifest, load_batch
from .errors import (
    CheckpointConfigMismatch,
    CheckpointIntegrityError,
    ConfigurationError,
    NumericalDivergenceError,
)
from .model import BaselineModel, Stars

_CKPT_MAGIC = b"STCK"
_CKPT_VERSION = 1


@dataclass
class TrainConfig:
    total_steps: int = 80000
    warmup_steps: int = 1000
    lr_init: float = 1e-6
    lr_peak: float = 1e-4
    lr_floor: float = 0.0
    weight_decay: float = 1e-4
    clip_norm: float = 5.0
    batch: int = 8
    crop: int = 512
    seed: int = 0
    checkpoint_every: int = 0
    align: AlignmentConfig = field(default_factory=AlignmentConfig)
    use_trans: bool = True
    use_ncs: bool = True
    use_psc: bool = True

    @staticmethod
    def tiny(**overrides) -> "TrainConfig":
        cfg = TrainConfig(
            total_steps=2000, warmup_steps=100, batch=4, crop=64, checkpoint_every=1000
        )
        return replace(cfg, **overrides)

    def validate(self) -> None:
        if self.warmup_steps >= self.total_steps:
            raise ConfigurationError("warmup_steps must be smaller than total_steps")
        if self.warmup_steps < 0 or self.total_steps <= 0:
            raise ConfigurationError("step counts must be positive")
        if min(self.lr_init, self.lr_peak) <= 0 or self.lr_floor < 0:
            raise ConfigurationError("learning rates must be positive (floor may be 0)")
        if self.clip_norm <= 0 or self.weight_decay < 0:
            raise ConfigurationError("clip_norm must be positive, weight_decay non-negative")
        if self.batch < 1 or self.crop < 32:
            raise ConfigurationError("batch must be >= 1 and crop >= 32")
        self.align.validate()


def seg_loss(
    s_m1: torch.Tensor, s_m2: torch.Tensor, s_fuse: torch.Tensor, y: torch.Tensor
) -> Tuple[torch.Tensor, bool]:
    """Mean of the three branch cross-entropies over non-ignored pixels.

    Returns (loss, skipped); a batch with every pixel ignored yields a
    zero loss and the skip flag instead of an error.
    """

    if (y != IGNORE).sum() == 0:
        return torch.zeros(()), True
    terms = [
        F.cross_entropy(s, y, ignore_index=IGNORE) for s in (s_m1, s_m2, s_fuse)
    ]
    return torch.stack(terms).mean(), False


def total_loss(
    l_seg: torch.Tensor, l_psc: torch.Tensor, l_ncs: torch.Tensor, alpha: float, beta: float
) -> torch.Tensor:
    """Weighted sum of the three terms, accumulated in float64.

    The wide accumulation makes the recorded total reproducible from
    the recorded summands exactly; gradients still reach the original
    tensors through the casts.
    """

    for name, value in (("l_seg", l_seg), ("l_psc", l_psc), ("l_ncs", l_ncs)):
        if not torch.isfinite(torch.as_tensor(value)).all():
            raise NumericalDivergenceError(f"{name} is not finite: {value}")
    terms = [torch.as_tensor(t).double() for t in (l_seg, l_psc, l_ncs)]
    return terms[0] + alpha * terms[1] + beta * terms[2]


def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to the peak, then cosine decay to the floor."""

    if step < 0 or step > cfg.total_steps:
        raise ConfigurationError(f"step {step} outside [0, {cfg.total_steps}]")
    if step <= cfg.warmup_steps:
        if cfg.warmup_steps == 0:
            return cfg.lr_peak
        frac = step / cfg.warmup_steps
        return cfg.lr_init + (cfg.lr_peak - cfg.lr_init) * frac
    span = cfg.total_steps - cfg.warmup_steps
    frac = (step - cfg.warmup_steps) / span
    return cfg.lr_floor + (cfg.lr_peak - cfg.lr_floor) * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class StepReport:
    step: int
    lseg: float
    lpsc: float
    lncs: float
    ltotal: float
    lr: float
    gnorm: float

    def format_line(self) -> str:
        return (
            f"step={self.step} lseg={self.lseg:.6f} lpsc={self.lpsc:.6f} "
            f"lncs={self.lncs:.6f} ltotal={self.ltotal:.6f} "
            f"lr={self.lr:.6e} gnorm={self.gnorm:.6f}"
        )


def config_fingerprint(describe: str, cfg: TrainConfig) -> str:
    """Hash of everything a checkpoint must agree on to be loadable."""

    payload = describe + "|" + json.dumps(asdict(cfg), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def _write_sections(path: str, sections: Dict[str, bytes]) -> None:
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<II", _CKPT_VERSION, len(sections)))
        for name, payload in sections.items():
            name_b = name.encode()
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(hashlib.sha256(payload).digest())
            fh.write(payload)
    os.replace(tmp, path)


def _read_sections(path: str) -> Dict[str, bytes]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _CKPT_MAGIC:
            raise CheckpointIntegrityError(f"{path}: not a checkpoint container")
        version, count = struct.unpack("<II", fh.read(8))
        if version != _CKPT_VERSION:
            raise CheckpointIntegrityError(f"{path}: unsupported container version {version}")
        sections: Dict[str, bytes] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode()
            (size,) = struct.unpack("<Q", fh.read(8))
            digest = fh.read(32)
            payload = fh.read(size)
            if len(payload) != size:
                raise CheckpointIntegrityError(f"{path}: truncated section {name!r}")
            if hashlib.sha256(payload).digest() != digest:
                raise CheckpointIntegrityError(f"{path}: checksum mismatch in section {name!r}")
            sections[name] = payload
    return sections


def _tensor_blob(obj) -> bytes:
    buf = io.BytesIO()
    torch.save(obj, buf)
    return buf.getvalue()


def _from_blob(blob: bytes):
    return torch.load(io.BytesIO(blob), weights_only=False)


@dataclass
class Checkpoint:
    step: int
    config_hash: str
    config: dict
    model_state: dict
    optimizer_state: dict
    rng_state: dict


def save_checkpoint(
    path: str,
    model,
    optimizer: torch.optim.Optimizer,
    step: int,
    train_cfg: TrainConfig,
) -> None:
    meta = {
        "step": step,
        "config_hash": config_fingerprint(model.describe(), train_cfg),
        "config": {"train": asdict(train_cfg), "model": json.loads(model.describe())},
    }
    sections = {
        "meta": json.dumps(meta, sort_keys=True).encode(),
        "params": _tensor_blob(model.state_dict()),
        "optimizer": _tensor_blob(optimizer.state_dict()),
        "rng": _tensor_blob({"torch": torch.get_rng_state()}),
    }
    _write_sections(path, sections)


def load_checkpoint(path: str, expected_hash: Optional[str] = None) -> Checkpoint:
    sections = _read_sections(path)
    for required in ("meta", "params", "optimizer", "rng"):
        if required not in sections:
            raise CheckpointIntegrityError(f"{path}: missing section {required!r}")
    meta = json.loads(sections["meta"].decode())
    if expected_hash is not None and meta["config_hash"] != expected_hash:
        raise CheckpointConfigMismatch(
            f"{path}: checkpoint was produced under a different configuration "
            f"(stored {meta['config_hash'][:12]}..., expected {expected_hash[:12]}...)"
        )
    return Checkpoint(
        step=meta["step"],
        config_hash=meta["config_hash"],
        config=meta["config"],
        model_state=_from_blob(sections["params"]),
        optimizer_state=_from_blob(sections["optimizer"]),
        rng_state=_from_blob(sections["rng"]),
    )


def restore_model(path: str, model, optimizer=None, train_cfg: Optional[TrainConfig] = None):
    """Loads a checkpoint into a model (and optimizer), verifying config."""

    expected = (
        config_fingerprint(model.describe(), train_cfg) if train_cfg is not None else None
    )
    ckpt = load_checkpoint(path, expected_hash=expected)
    model.load_state_dict(ckpt.model_state)
    if optimizer is not None:
        optimizer.load_state_dict(ckpt.optimizer_state)
    torch.set_rng_state(ckpt.rng_state["torch"])
    return ckpt


class Trainer:
    """Owns one model, one optimizer, and the step loop.

    Batch contents are a pure function of (shuffle seed, step), so a
    resumed run replays exactly the batches the interrupted run would
    have seen.
    """

    def __init__(
        self,
        model,
        manifest: DatasetManifest,
        cfg: TrainConfig,
        out_dir: Optional[str] = None,
    ):
        cfg.validate()
        self.model = model
        self.manifest = manifest
        self.cfg = cfg
        self.out_dir = out_dir
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
        self.step = 0
        self.last_checkpoint: Optional[str] = None
        self.optimizer = torch.optim.AdamW(
            model.parameters(), lr=cfg.lr_peak, weight_decay=cfg.weight_decay
        )
        self.metrics_path = os.path.join(out_dir, "metrics.log") if out_dir else None
        self._metrics_fh = None
        self.is_baseline = isinstance(model, BaselineModel)

    def _log(self, line: str) -> None:
        if self.metrics_path is None:
            return
        if self._metrics_fh is None:
            os.makedirs(os.path.dirname(self.metrics_path) or ".", exist_ok=True)
            self._metrics_fh = open(self.metrics_path, "a", buffering=1)
        self._metrics_fh.write(line + "\n")

    def close(self) -> None:
        if self._metrics_fh is not None:
            self._metrics_fh.close()
            self._metrics_fh = None

    def _losses(self, x1, x2, y):
        cfg = self.cfg
        if self.is_baseline:
            x = x1 if self.model.modality == "m1" else x2
            logits = self.model(x)
            valid = (y != IGNORE).sum()
            if valid == 0:
                l_seg = torch.zeros(())
            else:
                l_seg = F.cross_entropy(logits, y, ignore_index=IGNORE)
            zero = torch.zeros(())
            return l_seg, zero, zero
        dual = self.model.forward_dual(x1, x2)
        s_m1, s_m2, s_fuse = self.model.forward_branches(dual)
        l_seg, _ = seg_loss(s_m1, s_m2, s_fuse, y)
        zero = torch.zeros(())
        if not (cfg.use_ncs or cfg.use_psc):
            return l_seg, zero, zero
        translators = self.model.translators if cfg.use_trans else None
        outcome = alignment_losses(
            dual,
            y,
            cfg.align,
            translators,
            rng_seed=[cfg.seed, 7, self.step],
            want_ncs=cfg.use_ncs,
            want_psc=cfg.use_psc,
        )
        return l_seg, outcome.lpsc, outcome.lncs

    def train_step(self, batch) -> StepReport:
        cfg = self.cfg
        x1, x2, y = batch
        self.model.train()
        lr = lr_schedule(self.step, cfg)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        l_seg, l_psc, l_ncs = self._losses(x1, x2, y)
        try:
            l_total = total_loss(l_seg, l_psc, l_ncs, cfg.align.alpha, cfg.align.beta)
        except NumericalDivergenceError:
            self._abort(
                StepReport(
                    self.step,
                    float(l_seg.detach()),
                    float(l_psc.detach()),
                    float(l_ncs.detach()),
                    float("nan"),
                    lr,
                    float("nan"),
                )
            )
        self.optimizer.zero_grad(set_to_none=True)
        l_total.backward()
        pre_norm = float(
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), cfg.clip_norm)
        )
        # scaling by clip/(norm+eps) leaves the post-clip norm at min(norm, clip)
        gnorm = min(pre_norm, cfg.clip_norm)
        self.optimizer.step()
        report = StepReport(
            step=self.step,
            lseg=float(l_seg.detach()),
            lpsc=float(l_psc.detach()),
            lncs=float(l_ncs.detach()),
            ltotal=float(l_total.detach()),
            lr=lr,
            gnorm=gnorm,
        )
        if not math.isfinite(report.ltotal):
            self._abort(report)
        self._log(report.format_line())
        self.step += 1
        return report

    def _abort(self, report: StepReport) -> None:
        where = self.last_checkpoint or "no checkpoint written yet"
        raise NumericalDivergenceError(
            f"non-finite loss at step {report.step} "
            f"(lseg={report.lseg} lpsc={report.lpsc} lncs={report.lncs}); "
            f"last good checkpoint: {where}"
        )

    def _maybe_checkpoint(self, force: bool = False) -> None:
        if self.out_dir is None:
            return
        every = self.cfg.checkpoint_every
        due = force or (every > 0 and self.step % every == 0)
        if not due:
            return
        path = os.path.join(self.out_dir, f"ckpt_{self.step:06d}.bin")
        save_checkpoint(path, self.model, self.optimizer, self.step, self.cfg)
        self.last_checkpoint = path

    def fit(self) -> List[StepReport]:
        cfg = self.cfg
        reports: List[StepReport] = []
        self._maybe_checkpoint()  # step-0 snapshot when periodic saving is on
        while self.step < cfg.total_steps:
            batch = load_batch(
                self.manifest, cfg.batch, cfg.crop, shuffle_seed=cfg.seed, step=self.step
            )
            reports.append(self.train_step(batch))
            self._maybe_checkpoint()
        if self.out_dir is not None:
            final = os.path.join(self.out_dir, "ckpt_final.bin")
            save_checkpoint(final, self.model, self.optimizer, self.step, cfg)
            self.last_checkpoint = final
        self.close()
        return reports

    def resume(self, path: str) -> None:
        ckpt = restore_model(path, self.model, self.optimizer, self.cfg)
        self.step = ckpt.step
        self.last_checkpoint = path
