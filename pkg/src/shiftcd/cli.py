"""Command-line entry point: train, translate, detect, evaluate, pipeline, synth."""

from __future__ import annotations

import argparse
import logging
import os
import pickle
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import plotting
from .change import BINARY_PALETTE, TRINARY_PALETTE
from .config import PipelineConfig, config_from_dict, dump_config, load_config
from .encoder import VGGEncoder, build_encoder
from .errors import ConfigError, DataIOError, ShiftCDError
from .imagery import Raster, load_raster, save_float_map, save_label_png, save_raster
from .metrics import compute_metrics, confusion, format_table
from .pipeline import detect, translate_scene
from .training import TrainingDiverged, format_loss_log, train
from .translator import load_checkpoint, save_checkpoint, write_container

logger = logging.getLogger("shiftcd")


@dataclass
class RunContext:
    cfg: PipelineConfig
    workdir: Path
    checkpoint: Path
    _encoder: VGGEncoder | None = field(default=None, repr=False)

    @property
    def stamp(self) -> dict[str, str]:
        """Metadata embedded in every artifact of the run."""
        return {"config_digest": self.cfg.digest(), "seed": str(self.cfg.seed)}

    @property
    def encoder(self) -> VGGEncoder:
        if self._encoder is None:
            enc = self.cfg.encoder
            self._encoder = build_encoder(enc.weights, surrogate_seed=enc.surrogate_seed)
        return self._encoder

    def path(self, name: str) -> Path:
        return self.workdir / name


def _require(cfg: PipelineConfig, *names: str) -> list[Raster]:
    out = []
    for name in names:
        value = getattr(cfg.paths, name)
        if not value:
            raise ConfigError(f"paths.{name} is required")
        if not Path(value).is_file():
            raise ConfigError(f"paths.{name}: {value} does not exist")
        out.append(load_raster(value))
    return out


def _pair(cfg: PipelineConfig) -> tuple[Raster, Raster]:
    I1, I2 = _require(cfg, "pre_image", "post_image")
    if I1.shape != I2.shape:
        raise ConfigError(f"paths.post_image: shape {I2.shape} differs from pre_image {I1.shape}")
    return I1, I2


def _load_model(ctx: RunContext):
    if not ctx.checkpoint.is_file():
        raise DataIOError(f"checkpoint {ctx.checkpoint} does not exist (run 'train' first)")
    model, _ = load_checkpoint(ctx.checkpoint, expect_digest=ctx.cfg.model_digest())
    return model


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_train_translate(ctx: RunContext) -> Path:
    cfg = ctx.cfg
    I1, I2 = _pair(cfg)
    encoder = ctx.encoder
    tcfg = cfg.train_config()
    meta = {**ctx.stamp, "model_digest": cfg.model_digest(), "encoder": encoder.source}
    header = {**meta, "epochs": tcfg.epochs, "step_size": tcfg.step_size}

    def on_epoch(row):
        if row["epoch"] == 1 or row["epoch"] % max(1, tcfg.epochs // 10) == 0:
            logger.info("epoch %d  total %.5g  style %.5g  content %.5g", row["epoch"], row["total"], row["wt_loss"], row["content_loss"])

    log_path = ctx.path("loss_log.csv")
    try:
        result = train(I1, I2, tcfg, encoder, cfg.attention_config(encoder.out_channels), on_epoch)
    except TrainingDiverged as exc:
        save_checkpoint(ctx.checkpoint, exc.model, {**meta, "diverged": True})
        log_path.write_text(format_loss_log(exc.log, {**header, "diverged": True}))
        raise
    save_checkpoint(ctx.checkpoint, result.model, meta)
    log_path.write_text(format_loss_log(result.log, header))
    save_float_map(ctx.path("alpha.tif"), result.affinity.alpha, ctx.stamp)
    save_raster(ctx.path("weighted_style.png"), result.weighted, meta=ctx.stamp)
    plotting.plot_loss(result.log, ctx.path("figures/loss.png"))
    plotting.plot_map(result.affinity.alpha, ctx.path("figures/alpha.png"), "affinity weight", vmin=0, vmax=1)
    logger.info("checkpoint written to %s", ctx.checkpoint)
    return ctx.checkpoint


def cmd_translate(ctx: RunContext) -> Path:
    cfg = ctx.cfg
    I1, I2 = _pair(cfg)
    model = _load_model(ctx)
    out = translate_scene(I1, I2, model, ctx.encoder, cfg.tiling.tile_size, cfg.tiling.overlap)
    path = save_raster(ctx.path("translated.png"), out, meta=ctx.stamp)
    plotting.plot_panels({"pre": I1.data, "translated": out.data, "post": I2.data}, ctx.path("figures/translation.png"))
    return path


def cmd_detect(ctx: RunContext) -> Path:
    cfg = ctx.cfg
    I1, I2 = _pair(cfg)
    identity = cfg.detect.translation == "identity"
    model = None if identity else _load_model(ctx)
    det = detect(
        I1,
        I2,
        ctx.encoder,
        model,
        seed=cfg.seed,
        tile_size=cfg.tiling.tile_size,
        overlap=cfg.tiling.overlap,
        fcm_cfg=cfg.fcm_config(),
        threshold_cfg=cfg.threshold_config(),
        forest_cfg=cfg.forest_config(),
    )
    stamp = {**ctx.stamp, "translation": cfg.detect.translation}
    res = det.change
    if model is not None:
        save_raster(ctx.path("translated.png"), det.translated, meta=stamp)
    save_float_map(ctx.path("difference.tif"), det.difference, stamp)
    save_label_png(ctx.path("threshold_map.png"), res.threshold_map, TRINARY_PALETTE, stamp)
    if res.fused is not None:
        save_label_png(ctx.path("trinary.png"), res.fused, TRINARY_PALETTE, stamp)
    path = save_label_png(ctx.path("change_map.png"), res.change_map, BINARY_PALETTE, stamp)
    manifest = {"kind": "detector", "model_digest": cfg.model_digest(), "fallback": res.fallback, **stamp}
    arrays = {}
    if res.fcm is not None:
        manifest["fcm"] = {"centers": res.fcm.centers.tolist(), "iterations": res.fcm.iterations, "converged": res.fcm.converged}
    if res.forest is not None:
        arrays["forest"] = np.frombuffer(pickle.dumps(res.forest), dtype=np.uint8)
    write_container(ctx.path("detection.npz"), arrays, manifest)
    if res.fallback:
        logger.warning("change map fell back to thresholding: %s", res.fallback)
    plotting.plot_map(det.difference, ctx.path("figures/difference.png"), "feature difference")
    plotting.plot_trinary(res.fused if res.fused is not None else res.threshold_map, ctx.path("figures/trinary.png"))
    plotting.plot_panels({"pre": I1.data, "post": I2.data, "change map": res.change_map}, ctx.path("figures/change_map.png"))
    return path


def _read_binary(path: str | os.PathLike) -> np.ndarray:
    raster = load_raster(path)
    return (raster.data.max(axis=2) > 0).astype(np.uint8)


def cmd_evaluate(pred_path, ref_path, out_dir: Path, stamp: dict | None = None, name: str = "run") -> dict:
    pred, ref = _read_binary(pred_path), _read_binary(ref_path)
    report = compute_metrics(confusion(pred, ref))
    table = format_table({name: report})
    print(table)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "metrics.txt").write_text(table + "\n")
    (out_dir / "metrics.json").write_text(report.to_json(**(stamp or {}), prediction=str(pred_path), reference=str(ref_path)) + "\n")
    return report.to_dict()


def cmd_pipeline(ctx: RunContext, skip_train: bool = False) -> None:
    cfg = ctx.cfg
    identity = cfg.detect.translation == "identity"
    if identity:
        logger.info("identity translation: training skipped")
    elif skip_train:
        if not ctx.checkpoint.is_file():
            raise ConfigError(f"--skip-train needs an existing checkpoint at {ctx.checkpoint}")
        logger.info("reusing checkpoint %s", ctx.checkpoint)
    else:
        cmd_train_translate(ctx)
    change_path = cmd_detect(ctx)
    if cfg.paths.reference:
        cmd_evaluate(change_path, cfg.paths.reference, ctx.workdir, ctx.stamp, cfg.detect.translation)


def cmd_synth(out: Path, size: int, square: int, seed: int, epochs: int | None) -> None:
    from .synthetic import make_pair

    pair = make_pair(size=size, square=square, seed=seed)
    out.mkdir(parents=True, exist_ok=True)
    save_raster(out / "pre.png", pair.pre)
    save_raster(out / "post.png", pair.post)
    save_label_png(out / "reference.png", pair.reference, BINARY_PALETTE)
    text = resources.files("shiftcd.data").joinpath("synthetic.yaml").read_text()
    if epochs is not None:
        text = text.replace("epochs: 200", f"epochs: {epochs}")
    (out / "config.yaml").write_text(text)
    print(f"wrote synthetic pair (change square at row {pair.square[0]}, col {pair.square[1]}) to {out}")


# ---------------------------------------------------------------------------
# Argument handling
# ---------------------------------------------------------------------------


def _context(args) -> RunContext:
    cfg = load_config(args.config) if args.config else config_from_dict({})
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "identity_translation", False):
        cfg.detect.translation = "identity"
    if args.workdir:
        cfg.paths.workdir = args.workdir
    workdir = Path(cfg.paths.workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    checkpoint = Path(args.checkpoint) if args.checkpoint else workdir / "checkpoint.npz"
    (workdir / "config.resolved.yaml").write_text(dump_config(cfg))
    return RunContext(cfg, workdir, checkpoint)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shiftcd", description="Unsupervised change detection with style-transfer translation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def run_opts(p, translation=False):
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--checkpoint", help="translator checkpoint (default: WORKDIR/checkpoint.npz)")
        p.add_argument("--seed", type=int, help="master seed, overrides the config")
        p.add_argument("--workdir", help="output directory, overrides the config")
        if translation:
            p.add_argument(
                "--no-translation",
                "--identity-translation",
                dest="identity_translation",
                action="store_true",
                help="compare the pre image to the post image directly",
            )
        return p

    run_opts(sub.add_parser("train", help="train the translator"))
    run_opts(sub.add_parser("translate", help="translate the pre image with a trained checkpoint"))
    run_opts(sub.add_parser("detect", help="difference map, reliable samples and change map"), translation=True)
    p = run_opts(sub.add_parser("pipeline", help="train, detect and evaluate"), translation=True)
    p.add_argument("--skip-train", action="store_true", help="reuse the existing checkpoint")

    p = sub.add_parser("evaluate", help="score a change map against a reference")
    p.add_argument("pred", help="predicted change map (PNG/TIFF, nonzero = changed)")
    p.add_argument("ref", help="reference change map")
    p.add_argument("--out", default=".", help="directory for metrics.json and metrics.txt")
    p.add_argument("--name", default="prediction", help="row label in the table")

    p = sub.add_parser("synth", help="write the synthetic test pair and a matching config")
    p.add_argument("out", help="output directory")
    p.add_argument("--size", type=int, default=512)
    p.add_argument("--square", type=int, default=64, help="side of the planted change square")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--epochs", type=int, help="override the training epochs in the written config")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "evaluate":
            cmd_evaluate(args.pred, args.ref, Path(args.out), name=args.name)
        elif args.command == "synth":
            cmd_synth(Path(args.out), args.size, args.square, args.seed, args.epochs)
        else:
            ctx = _context(args)
            if args.command == "train":
                cmd_train_translate(ctx)
            elif args.command == "translate":
                cmd_translate(ctx)
            elif args.command == "detect":
                cmd_detect(ctx)
            else:
                cmd_pipeline(ctx, args.skip_train)
    except ShiftCDError as exc:
        logger.error("%s", exc)
        return exc.exit_code
    except OSError as exc:
        logger.error("%s", exc)
        return DataIOError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
