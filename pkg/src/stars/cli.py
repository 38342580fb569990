"""Command-line entry point.

Subcommands: ``synth`` generates a synthetic two-modality dataset,
``train`` fits a model, ``eval`` scores a checkpoint under the chosen
modality regime, ``diag`` runs analysis instruments on a checkpoint.
Exit codes: 0 success, 2 usage/configuration problems, 3 numerical
failure during training.
"""

import argparse
import glob
import os
import sys
from dataclasses import replace

import numpy as np
import torch

from .alignment import AlignmentConfig
from .config import ENV_DATA_DIR, ENV_OUT_DIR, RunConfig, load_run_config
from .data import (
    DatasetManifest,
    SyntheticSceneConfig,
    generate_synthetic_dataset,
    iterate_batches,
    read_raster,
)
from .diagnostics import (
    class_similarity,
    collapse_monitor,
    export_param_distributions,
    grad_cam,
    save_heatmap_png,
)
from .errors import (
    CheckpointConfigMismatch,
    CheckpointIntegrityError,
    ConfigurationError,
    DatasetError,
    NumericalDivergenceError,
)
from .evaluation import evaluate
from .model import BaselineModel, Stars, build_from_description
from .training import TrainConfig, Trainer, load_checkpoint


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stars", description="dual-modality segmentation with missing-modality inference"
    )
    parser.add_argument("--config", help="INI-style run configuration file")
    parser.add_argument("--data-dir", help=f"dataset directory (default ${ENV_DATA_DIR} or ./data)")
    parser.add_argument("--out-dir", help=f"output directory (default ${ENV_OUT_DIR} or ./runs)")
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic two-modality dataset")
    p_synth.add_argument("--count", type=int, default=200, help="number of records")
    p_synth.add_argument("--seed", type=int, help="generator seed")
    p_synth.add_argument("--out", help="dataset directory (overrides --data-dir)")

    p_train = sub.add_parser("train", help="train a model")
    p_train.add_argument("--preset", choices=["tiny"], help="bundled desk-scale recipe")
    p_train.add_argument("--model", choices=["stars", "baseline"], help="model kind")
    p_train.add_argument("--modality", choices=["m1", "m2"], help="baseline input modality")
    p_train.add_argument("--variant", choices=["tiny", "resnet50like"], help="encoder size")
    p_train.add_argument("--steps", type=int, help="total optimization steps")
    p_train.add_argument("--warmup", type=int, help="warmup steps")
    p_train.add_argument("--batch", type=int, help="batch size")
    p_train.add_argument("--crop", type=int, help="square crop size")
    p_train.add_argument("--seed", type=int, help="training seed")
    p_train.add_argument("--checkpoint-every", type=int, help="periodic snapshot interval")
    p_train.add_argument("--resume", help="checkpoint to resume from")
    p_train.add_argument("--no-trans", action="store_true", help="drop the translation modules")
    p_train.add_argument("--no-ncs", action="store_true", help="drop the cosine alignment loss")
    p_train.add_argument("--no-psc", action="store_true", help="drop the contrastive alignment loss")
    p_train.add_argument("--no-detach", action="store_true", help="let gradient reach the anchors")
    p_train.add_argument("--alpha", type=float, help="contrastive loss weight")
    p_train.add_argument("--beta", type=float, help="cosine loss weight")
    p_train.add_argument("--tau", type=float, help="contrastive temperature")
    p_train.add_argument("--samples-per-class", type=int, help="pixels sampled per class")

    p_eval = sub.add_parser("eval", help="score a checkpoint")
    p_eval.add_argument("--checkpoint", required=True, help="checkpoint file")
    p_eval.add_argument("--mode", choices=["both", "m1_only", "m2_only"], help="input regime")
    p_eval.add_argument("--branch", choices=["fused", "m1", "m2"], help="decoder branch")
    p_eval.add_argument("--max-records", type=int, help="cap on evaluated records")
    p_eval.add_argument("--out", help="report path (default <out-dir>/eval_<mode>_<branch>.txt)")

    p_diag = sub.add_parser("diag", help="run analysis instruments")
    p_diag.add_argument("--checkpoint", required=True, help="checkpoint file or run directory")
    p_diag.add_argument(
        "--instrument", required=True, choices=["sim", "collapse", "params", "cam"]
    )
    p_diag.add_argument("--stage", type=int, default=4, help="pyramid stage to probe")
    p_diag.add_argument("--class", dest="class_id", type=int, default=0, help="CAM target class")
    p_diag.add_argument(
        "--branch", choices=["shared", "spec_m1", "spec_m2"], default="shared",
        help="encoder branch for CAM",
    )
    p_diag.add_argument("--modality", choices=["m1", "m2"], default="m1",
                        help="modality path for shared-branch CAM")
    return parser


def _run_config(args) -> RunConfig:
    cfg = load_run_config(args.config)
    if args.data_dir:
        cfg.data_dir = args.data_dir
    if args.out_dir:
        cfg.out_dir = args.out_dir
    return cfg


def cmd_synth(args) -> int:
    cfg = _run_config(args)
    scene = cfg.scene
    if args.seed is not None:
        scene = replace(scene, seed=args.seed)
    out = args.out or cfg.data_dir
    scene.validate()
    manifest = generate_synthetic_dataset(scene, args.count, out)
    print(f"wrote {len(manifest.ids)} records to {out}")
    return 0


def _apply_train_flags(cfg: RunConfig, args) -> RunConfig:
    if args.preset == "tiny":
        cfg.train = TrainConfig.tiny(align=cfg.train.align)
        cfg.encoder = type(cfg.encoder).tiny(
            cfg.encoder.in_channels_m1, cfg.encoder.in_channels_m2
        )
    if args.variant:
        from .backbone import EncoderConfig

        cfg.encoder = EncoderConfig.from_name(
            args.variant, cfg.encoder.in_channels_m1, cfg.encoder.in_channels_m2
        )
    if args.model:
        cfg.model_kind = args.model
    if args.modality:
        cfg.baseline_modality = args.modality
    train = cfg.train
    if args.steps is not None:
        train.total_steps = args.steps
    if args.warmup is not None:
        train.warmup_steps = args.warmup
    if args.batch is not None:
        train.batch = args.batch
    if args.crop is not None:
        train.crop = args.crop
    if args.seed is not None:
        train.seed = args.seed
    if args.checkpoint_every is not None:
        train.checkpoint_every = args.checkpoint_every
    if args.no_trans:
        train.use_trans = False
    if args.no_ncs:
        train.use_ncs = False
    if args.no_psc:
        train.use_psc = False
    if args.no_detach:
        train.align.detach = False
    if args.alpha is not None:
        train.align.alpha = args.alpha
    if args.beta is not None:
        train.align.beta = args.beta
    if args.tau is not None:
        train.align.tau = args.tau
    if args.samples_per_class is not None:
        train.align.samples_per_class = args.samples_per_class
    return cfg


def build_model(cfg: RunConfig, num_classes: int):
    torch.manual_seed(cfg.train.seed)
    if cfg.model_kind == "baseline":
        return BaselineModel(
            cfg.encoder, num_classes, cfg.baseline_modality, cfg.lateral_width
        )
    return Stars(
        cfg.encoder,
        num_classes,
        align_cfg=cfg.train.align,
        use_trans=cfg.train.use_trans,
        translate_first_kernel=cfg.translate_first_kernel,
        lateral_width=cfg.lateral_width,
    )


def cmd_train(args) -> int:
    cfg = _apply_train_flags(_run_config(args), args)
    cfg.validate()
    torch.set_num_threads(max(1, torch.get_num_threads()))
    manifest = DatasetManifest.load(cfg.data_dir)
    model = build_model(cfg, manifest.num_classes)
    os.makedirs(cfg.out_dir, exist_ok=True)
    trainer = Trainer(model, manifest, cfg.train, out_dir=cfg.out_dir)
    if args.resume:
        trainer.resume(args.resume)
    try:
        trainer.fit()
    except NumericalDivergenceError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 3
    print(f"finished {cfg.train.total_steps} steps; artifacts in {cfg.out_dir}")
    return 0


def _load_model_from_checkpoint(path: str):
    ckpt = load_checkpoint(path)
    model = build_from_description(ckpt.config["model"])
    model.load_state_dict(ckpt.model_state)
    model.eval()
    return model, ckpt


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    if not os.path.exists(args.checkpoint):
        raise ConfigurationError(f"checkpoint not found: {args.checkpoint}")
    mode = args.mode or cfg.eval_mode
    branch = args.branch or cfg.eval_branch
    model, _ = _load_model_from_checkpoint(args.checkpoint)
    manifest = DatasetManifest.load(cfg.data_dir)
    report = evaluate(model, manifest, mode=mode, branch=branch, max_records=args.max_records)
    out = args.out or os.path.join(cfg.out_dir, f"eval_{mode}_{report.branch}.txt")
    report.save(out)
    print(report.to_text())
    print(f"report written to {out}")
    return 0


def _checkpoints_for(path: str):
    if os.path.isdir(path):
        found = sorted(glob.glob(os.path.join(path, "ckpt_*.bin")))
        if not found:
            raise ConfigurationError(f"no checkpoints under {path}")
        return found
    if not os.path.exists(path):
        raise ConfigurationError(f"checkpoint not found: {path}")
    return [path]


def cmd_diag(args) -> int:
    cfg = _run_config(args)
    diag_dir = os.path.join(cfg.out_dir, "diag")
    os.makedirs(diag_dir, exist_ok=True)
    if args.instrument == "params":
        model, ckpt = _load_model_from_checkpoint(_checkpoints_for(args.checkpoint)[-1])
        report = export_param_distributions(model, out_dir=diag_dir)
        print(f"wrote parameter histograms for {len(report.distributions)} layers to {diag_dir}")
        if report.absent:
            print(f"absent encoders: {', '.join(report.absent)}")
        return 0

    manifest = DatasetManifest.load(cfg.data_dir)
    if args.instrument == "sim":
        for path in _checkpoints_for(args.checkpoint):
            model, ckpt = _load_model_from_checkpoint(path)
            sim = class_similarity(model, manifest, stage=args.stage, step=ckpt.step)
            out = os.path.join(diag_dir, f"sim_step{ckpt.step:06d}.csv")
            sim.save_csv(out)
            print(f"step {ckpt.step}: diagonal margin {sim.diagonal_margin():+.4f} -> {out}")
        return 0

    model, ckpt = _load_model_from_checkpoint(_checkpoints_for(args.checkpoint)[-1])
    if args.instrument == "collapse":
        values = {"m1": [], "m2": []}
        crop = None
        first = read_raster(manifest.label_path(manifest.ids[0]))
        crop = (min(first.shape[0], first.shape[1]) // 32) * 32
        with torch.no_grad():
            for x1, x2, _ in iterate_batches(manifest, 4, crop, shuffle_seed=0, num_steps=4):
                sh1, _ = model.forward_modality(x1, "m1")
                sh2, _ = model.forward_modality(x2, "m2")
                values["m1"].append(collapse_monitor(sh1.stage(args.stage)))
                values["m2"].append(collapse_monitor(sh2.stage(args.stage)))
        out = os.path.join(diag_dir, f"collapse_stage{args.stage}.txt")
        with open(out, "w") as fh:
            for key, vals in values.items():
                fh.write(f"{key}_stage{args.stage}={np.mean(vals):.6f}\n")
        print(f"collapse monitor written to {out}")
        return 0

    # cam
    rec = manifest.ids[0]
    x1 = read_raster(manifest.m1_path(rec)).transpose(2, 0, 1)[None]
    x2 = read_raster(manifest.m2_path(rec)).transpose(2, 0, 1)[None]
    heat = grad_cam(
        model,
        torch.from_numpy(np.ascontiguousarray(x1)),
        torch.from_numpy(np.ascontiguousarray(x2)),
        target_class=args.class_id,
        branch=args.branch,
        stage=args.stage,
        modality=args.modality,
    )
    out = os.path.join(
        diag_dir, f"cam_{args.branch}_stage{args.stage}_class{args.class_id}.png"
    )
    save_heatmap_png(heat, out)
    print(f"heatmap written to {out}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "diag": cmd_diag}
    try:
        return handlers[args.command](args)
    except (ConfigurationError, DatasetError, CheckpointIntegrityError,
            CheckpointConfigMismatch, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalDivergenceError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
