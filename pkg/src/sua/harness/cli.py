"""Command line entry point: ``sua <subcommand> [--config JSON] [--seed N] [--out DIR]``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch

from ..core import (Dataset, FormatError, ParameterError, RunConfig, ShapeError, StageError,
                    load_image, save_image, save_raw, seed_everything)
from ..render import RendererParams, target_structures, train_renderer, write_loss_log
from ..spatx import register, warp
from ..structex import edge_sketch, potts_cluster, structure_mask
from .evaluate import evaluate
from .pipeline import extract_structure, load_run, run_pipeline
from .segmenter import SegmenterParams, train_segmenter
from .synth import synth_generate

log = logging.getLogger("sua")

RENDERER_FILE = "renderer.suaa"
SEGMENTER_FILE = "segmenter.suaa"


def load_config(path, seed=None, out=None):
    cfg = RunConfig.from_json(Path(path).read_text()) if path else RunConfig()
    if seed is not None:
        cfg = with_seed(cfg, seed)
    if out is not None:
        cfg.out = str(out)
    return cfg


def with_seed(cfg, seed):
    """Copy of ``cfg`` with ``seed`` propagated to every seeded stage."""
    return dataclasses.replace(
        cfg, seed=seed,
        render=dataclasses.replace(cfg.render, seed=seed),
        segmenter=dataclasses.replace(cfg.segmenter, seed=seed),
        synth=dataclasses.replace(cfg.synth, seed=seed))


def _data_dir(args, cfg):
    return Path(args.data) if getattr(args, "data", None) else Path(cfg.out) / "data"


def _load_pair(data):
    return Dataset.load(data, "source"), Dataset.load(data, "target")


def cmd_synth(args, cfg):
    src, tgt, oracle = synth_generate(cfg.synth)
    data = Path(cfg.out) / "data"
    src.save(data, "source")
    tgt.save(data, "target")
    for i, psi in enumerate(oracle.warps):
        save_raw(psi, data / f"true_warp_{i}.suat")
    log.info("wrote %d source and %d target images to %s", len(src), len(tgt), data)


def cmd_potts(args, cfg):
    img = load_image(args.image)
    gamma = cfg.potts_gamma if args.gamma is None else args.gamma
    cm = potts_cluster(img, gamma)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    save_raw(cm.labels, out / "potts_labels.suat")
    save_image(cm.reconstruction(), out / "potts_reconstruction.png")
    save_image(edge_sketch(cm).astype(np.float64), out / "potts_edges.png")
    save_image(structure_mask(cm).astype(np.float64), out / "potts_mask.png")
    print(json.dumps({"regions": cm.n_regions, "energy": cm.energy, "gamma": gamma}))


def cmd_register(args, cfg):
    src = load_image(args.src)
    tgt = load_image(args.tgt)
    if args.structures:
        src_in = extract_structure(src, cfg.potts_gamma, cfg.soften_sigma).composed
        tgt_in = extract_structure(tgt, cfg.potts_gamma, cfg.soften_sigma).composed
    else:
        src_in, tgt_in = src, tgt
    pair = register(src_in, tgt_in, cfg.admm)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    i = args.index
    pair.save(out / f"phi_{i}.suat", out / f"phi_inv_{i}.suat", out / f"phi_{i}.json")
    save_image(warp(src, pair.forward), out / f"warped_{i}.png")
    print(json.dumps({"steps": pair.steps}))


def cmd_train_render(args, cfg):
    _, tgt = _load_pair(_data_dir(args, cfg))
    structures = target_structures(tgt.images, cfg.potts_gamma)
    params = train_renderer(tgt, cfg.render, structures=structures)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    params.save(out / RENDERER_FILE)
    write_loss_log(params.log, out / "render_loss.csv")
    return params


def cmd_train_seg(args, cfg):
    _, tgt = _load_pair(_data_dir(args, cfg))
    params = train_segmenter(tgt, cfg.segmenter)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    params.save(out / SEGMENTER_FILE)
    (out / "segmenter.json").write_text(json.dumps({"train_dice": params.train_dice}, indent=2) + "\n")
    log.info("segmenter training Dice %.4f", params.train_dice)
    return params


def _models(args, cfg):
    out = Path(cfg.out)
    renderer = RendererParams.load(getattr(args, "renderer", None) or out / RENDERER_FILE)
    segmenter = SegmenterParams.load(getattr(args, "segmenter", None) or out / SEGMENTER_FILE)
    return renderer, segmenter


def cmd_translate(args, cfg):
    src, tgt = _load_pair(_data_dir(args, cfg))
    renderer, segmenter = _models(args, cfg)
    return run_pipeline(src, tgt, renderer, segmenter, cfg, out=cfg.out)


def cmd_eval(args, cfg):
    src, tgt = _load_pair(_data_dir(args, cfg))
    if not src.labelled:
        raise ParameterError("evaluation needs source ground-truth masks")
    segmenter = SegmenterParams.load(getattr(args, "segmenter", None) or Path(cfg.out) / SEGMENTER_FILE)
    run = load_run(cfg.out, src, segmenter.n_classes, cfg.pairing)
    report, _ = evaluate(run, src.masks, tgt, out=cfg.out, bins=cfg.histogram_bins)
    print(report.to_json())


def cmd_pipeline(args, cfg):
    out = Path(cfg.out)
    if not (out / "data" / "source_meta.json").exists() or args.fresh:
        _run_stage("synth", cmd_synth, args, cfg)
    _run_stage("train-render", cmd_train_render, args, cfg)
    _run_stage("train-seg", cmd_train_seg, args, cfg)
    _run_stage("translate", cmd_translate, args, cfg)
    _run_stage("eval", cmd_eval, args, cfg)


COMMANDS = {
    "synth": cmd_synth,
    "potts": cmd_potts,
    "register": cmd_register,
    "train-render": cmd_train_render,
    "train-seg": cmd_train_seg,
    "translate": cmd_translate,
    "pipeline": cmd_pipeline,
    "eval": cmd_eval,
}


def _run_stage(name, fn, args, cfg):
    start = time.perf_counter()
    try:
        result = fn(args, cfg)
    except StageError:
        raise
    except (FormatError, ShapeError, ParameterError, OSError, KeyError, ValueError) as exc:
        raise StageError(name, None, exc) from exc
    log.info("%s done in %.1fs", name, time.perf_counter() - start)
    return result


def _global_flags(default):
    flags = argparse.ArgumentParser(add_help=False)
    flags.add_argument("--config", default=default, help="run configuration JSON")
    flags.add_argument("--seed", type=int, default=default, help="master seed, propagated to every stage")
    flags.add_argument("--out", default=default, help="output directory")
    flags.add_argument("-v", "--verbose", action="store_true", default=default or False)
    return flags


def build_parser():
    # global flags may come before or after the subcommand; the subcommand
    # copies suppress their defaults so they do not reset earlier values
    common = _global_flags(argparse.SUPPRESS)
    parser = argparse.ArgumentParser(prog="sua", parents=[_global_flags(None)],
                                     description="Structure-aligned translation for cross-domain segmentation.")
    parser.add_argument("--dump-config", action="store_true",
                        help="print the effective configuration with all defaults and exit")
    sub = parser.add_subparsers(dest="command")

    sub.add_parser("synth", parents=[common], help="generate the synthetic two-domain benchmark")

    p = sub.add_parser("potts", parents=[common], help="Potts clustering of one image")
    p.add_argument("--image", required=True)
    p.add_argument("--gamma", type=float)

    p = sub.add_parser("register", parents=[common], help="register two images")
    p.add_argument("--src", required=True)
    p.add_argument("--tgt", required=True)
    p.add_argument("--index", type=int, default=0, help="suffix of the written fields")
    p.add_argument("--structures", action="store_true",
                   help="register composed structure images instead of raw intensities")

    for name, helptext in (("train-render", "train the rendering network on the target domain"),
                           ("train-seg", "train the segmentation model on the target domain")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--data", help="dataset directory (default OUT/data)")

    for name, helptext in (("translate", "translate, segment and warp back every source image"),
                           ("eval", "score a translated run against source ground truth")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--data", help="dataset directory (default OUT/data)")
        p.add_argument("--renderer", help="renderer archive (default OUT/renderer.suaa)")
        p.add_argument("--segmenter", help="segmenter archive (default OUT/segmenter.suaa)")

    p = sub.add_parser("pipeline", parents=[common], help="synth, train, translate and evaluate")
    p.add_argument("--data", help="dataset directory (default OUT/data)")
    p.add_argument("--fresh", action="store_true", help="regenerate the synthetic data")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.seed, args.out)
    except (OSError, ValueError, TypeError) as exc:
        print(f"error [config] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    if args.dump_config:
        print(cfg.to_json())
        return 0
    if args.command is None:
        parser.print_help()
        return 2
    seed_everything(cfg.seed)
    torch.set_num_threads(1)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json() + "\n")
    try:
        _run_stage(args.command, COMMANDS[args.command], args, cfg)
    except StageError as exc:
        print(f"error {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
