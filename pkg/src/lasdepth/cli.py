"""Command line entry point: ``lasdepth <command> ...``.

Exit codes: 0 ok, 2 configuration error, 3 I/O error, 4 numeric abort.
"""
from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from pathlib import Path

from . import autodiff as ad
from . import io
from .config import RunConfig, parse_overrides
from .dataset import load_sample, load_split
from .data import DepthMap
from .errors import ConfigurationError
from .evaluation import (compare_obstacle_sources, table_scene, upscale_nearest, write_bands_csv,
                         write_metrics_csv)
from .network import DepthNet
from .pipeline import evaluate, predict
from .refmap import build_reference
from .scene_sim import generate_dataset, read_scene
from .training import TrainingAborted, to_training_sample, train

log = logging.getLogger("lasdepth")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
CONFIG_NAME = "config.txt"
CHECKPOINT_NAME = "model.ldck"
LOSS_LOG_NAME = "loss_log.csv"


def _threads(n):
    if n is None:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def _load_config(args) -> RunConfig:
    return RunConfig.load(args.config, parse_overrides(args.set))


def _run_config_for_checkpoint(checkpoint) -> RunConfig:
    path = Path(checkpoint).with_name(CONFIG_NAME)
    if not path.exists():
        raise FileNotFoundError(f"no {CONFIG_NAME} next to {checkpoint}")
    return RunConfig.load(path)


def load_model(checkpoint) -> tuple[DepthNet, RunConfig]:
    cfg = _run_config_for_checkpoint(checkpoint)
    net = DepthNet(cfg.net)
    net.load_state_dict(ad.load_checkpoint(checkpoint))
    return net, cfg


# ------------------------------------------------------------------ commands

def cmd_gen_data(cfg: RunConfig, out_dir) -> Path:
    out = Path(out_dir)
    generate_dataset(out, cfg.data.n_scenes, cfg.data.split_ratio, cfg.scene, cfg.data.seed)
    cfg.save(out / CONFIG_NAME)
    return out / "manifest.csv"


def apply_ablation(cfg: RunConfig, ablate: list[str], loss: str | None) -> RunConfig:
    items = {}
    for a in ablate or []:
        if a == "reference=off":
            items.update({"net.use_reference": "false", "net.global_skip": "false"})
        elif a == "skip=off":
            items["net.global_skip"] = "false"
        else:
            raise ConfigurationError(f"unknown ablation {a!r}")
    if loss == "cls":
        items["train.alpha"] = "0.0"
    elif loss not in (None, "cls+reg"):
        raise ConfigurationError(f"unknown loss {loss!r}")
    return RunConfig.from_flat(items, cfg) if items else cfg


def cmd_train(cfg: RunConfig, dataset_dir, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / CONFIG_NAME)
    samples = [to_training_sample(s) for s in load_split(dataset_dir, "train", cfg.eval.reference_window)]
    if not samples:
        raise FileNotFoundError(f"{dataset_dir}: no training samples")
    every = max(cfg.train.iterations // 10, 1)

    def progress(it, values):
        if it % every == 0:
            log.info("iter %d loss %.4f (cls %.4f, reg %.4f)", it, *values)

    train(samples, cfg.net, cfg.train, out / CHECKPOINT_NAME, out / LOSS_LOG_NAME, progress)
    return out / CHECKPOINT_NAME


def cmd_eval(checkpoint, dataset_dir, out_dir, use_gt: bool = False, split: str = "test") -> dict:
    """Global and per-height metrics, unrefined and median-refined."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if use_gt:
        cfg = RunConfig()
        samples = load_split(dataset_dir, split, cfg.eval.reference_window)
        preds = [DepthMap(s.depth.values.copy(), s.depth.valid.copy()) for s in samples]
    else:
        net, cfg = load_model(checkpoint)
        samples = load_split(dataset_dir, split, cfg.eval.reference_window)
        preds = predict(net, samples)
    if not samples:
        raise FileNotFoundError(f"{dataset_dir}: no {split} samples")
    results = {"": evaluate(preds, samples),
               "_refined": evaluate(preds, samples, refine_window=cfg.eval.refine_window)}
    for suffix, res in results.items():
        write_metrics_csv(out / f"metrics{suffix}.csv", res.metrics)
        write_bands_csv(out / f"bands{suffix}.csv", res.bands)
    return results


def cmd_infer(checkpoint, sample_dir, out_path) -> Path:
    net, cfg = load_model(checkpoint)
    sample = load_sample(sample_dir, cfg.eval.reference_window)
    pred = predict(net, [sample])[0]
    io.write_pfm(out_path, pred)
    return Path(out_path)


def cmd_render_ref(scan_path, camera_path, out_path, window: int = 5) -> Path:
    k, gf = io.read_camera_meta(camera_path)
    ref = build_reference(io.read_scan_csv(scan_path), gf, k, window)
    io.write_pfm(out_path, ref)
    io.write_pgm(Path(out_path).with_name(Path(out_path).stem + "_extrapolated.pgm"), ref.extrapolated)
    return Path(out_path)


def _full_resolution_model(net: DepthNet):
    def model(image, reference):
        d = net.forward(image[None], reference.values[None]).depth.data[0, 0]
        return upscale_nearest(DepthMap.dense(d), image.shape)
    return model


def cmd_obstacle(out_dir, sample_dir=None, checkpoint=None, cfg: RunConfig | None = None) -> Path:
    """Obstacle maps from planar lasers, predicted depth and ground truth.

    Without ``sample_dir`` the built-in table scene is used.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = None
    if checkpoint is not None:
        net, cfg = load_model(checkpoint)
        model = _full_resolution_model(net)
    cfg = cfg or RunConfig()
    if sample_dir is not None:
        scene, pose = read_scene(Path(sample_dir) / "scene.json")
        k, _ = io.read_camera_meta(Path(sample_dir) / "camera.txt")
    else:
        scene, pose = table_scene()
        k = cfg.scene.intrinsics()
    e = cfg.eval
    report = compare_obstacle_sources(scene, pose, k, e.obstacle_heights, model,
                                      e.obstacle_max_height, e.obstacle_bearings, e.obstacle_min_height,
                                      cfg.scene.laser_mount_height)
    report.write_csv(out / "obstacles.csv")
    report.write_summary(out / "missed.csv")
    return out / "obstacles.csv"


# ---------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lasdepth", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None,
                   help="limit BLAS threads (1 gives bit-reproducible runs)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", type=Path, help="flat key=value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        sp.add_argument("--seed", type=int)

    sp = sub.add_parser("gen-data", help="generate a synthetic dataset")
    with_config(sp)
    sp.add_argument("--out", type=Path, required=True)

    sp = sub.add_parser("train", help="train a network on a dataset")
    with_config(sp)
    sp.add_argument("--dataset", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--ablate", action="append", choices=["reference=off", "skip=off"])
    sp.add_argument("--loss", choices=["cls", "cls+reg"], default="cls+reg")

    sp = sub.add_parser("eval", help="metrics on the test split")
    sp.add_argument("--checkpoint", type=Path)
    sp.add_argument("--dataset", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--use-gt", action="store_true", help="evaluate ground truth against itself")

    sp = sub.add_parser("infer", help="predict depth for one sample")
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--sample", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)

    sp = sub.add_parser("render-ref", help="render a reference depth map from a scan")
    sp.add_argument("--scan", type=Path, required=True)
    sp.add_argument("--camera", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--window", type=int, default=5)

    sp = sub.add_parser("obstacle", help="compare obstacle maps from lasers and dense depth")
    sp.add_argument("--sample", type=Path, help="sample directory (default: built-in table scene)")
    sp.add_argument("--checkpoint", type=Path)
    sp.add_argument("--out", type=Path, required=True)
    return p


def run(args) -> None:
    if args.command == "gen-data":
        cfg = _load_config(args)
        if args.seed is not None:
            cfg = RunConfig.from_flat({"data.seed": str(args.seed)}, cfg)
        cmd_gen_data(cfg, args.out)
    elif args.command == "train":
        cfg = apply_ablation(_load_config(args), args.ablate, args.loss)
        extra = {}
        if args.seed is not None:
            extra["train.rng_seed"] = str(args.seed)
        if args.iterations is not None:
            extra["train.iterations"] = str(args.iterations)
        if extra:
            cfg = RunConfig.from_flat(extra, cfg)
        cmd_train(cfg, args.dataset, args.out)
    elif args.command == "eval":
        if args.checkpoint is None and not args.use_gt:
            raise ConfigurationError("eval needs --checkpoint or --use-gt")
        cmd_eval(args.checkpoint, args.dataset, args.out, args.use_gt, args.split)
    elif args.command == "infer":
        cmd_infer(args.checkpoint, args.sample, args.out)
    elif args.command == "render-ref":
        cmd_render_ref(args.scan, args.camera, args.out, args.window)
    elif args.command == "obstacle":
        cmd_obstacle(args.out, args.sample, args.checkpoint)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        with _threads(args.threads):
            run(args)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAborted as exc:
        print(f"training aborted at iteration {exc.iteration}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
