"""End-to-end translation pipeline and its ablation baselines.

For every source image: Potts clustering, structure mask, composed
structure, best-SSIM target, registration, warped structure edges,
rendering, segmentation and warp-back of the prediction by the inverse
deformation. The same deformations also drive two baselines: direct
segmentation of the source (no translation) and segmentation of the warped
source image (registration only).
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..core import RunConfig, StageError, load_raw, save_image, save_raw
from ..render import render
from ..spatx import DiffeoPair, register, warp, warp_mask, warp_mask_to_edges
from ..structex import (best_target, compose_structure, normalize_structure, potts_cluster,
                        select_pair, structure_mask)
from .segmenter import predict

log = logging.getLogger(__name__)

BASELINES = ("no-translation", "registration-only")


@dataclass
class StructureInfo:
    mask: np.ndarray
    composed: np.ndarray
    n_regions: int


@dataclass
class ImageRecord:
    index: int
    source: np.ndarray
    target_index: int
    pair: DiffeoPair
    source_mask: np.ndarray
    warped_structure: np.ndarray
    rendered: np.ndarray
    predicted: np.ndarray
    warped_back: np.ndarray
    baselines: dict = field(default_factory=dict)


@dataclass
class PipelineRun:
    records: list
    pairing: str
    n_classes: int
    report: object = None


def _stage(name, index, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, index, exc) from exc


def extract_structure(img, gamma, sigma):
    """Potts mask and intensity-normalised composed structure of one image."""
    cm = potts_cluster(img, gamma)
    mask = structure_mask(cm)
    cs = normalize_structure(compose_structure(mask, img, sigma), mask)
    return StructureInfo(mask, cs.image, cm.n_regions)


def _target_infos(tgt, cfg):
    return [_stage("structex-target", j, extract_structure, img, cfg.potts_gamma, cfg.soften_sigma)
            for j, img in enumerate(tgt.images)]


def translate_one(index, img, info, tgt_info, j, renderer, segmenter, cfg, baselines=True):
    """Run registration, rendering, segmentation and warp-back for one source image."""
    pair = _stage("register", index, register, info.composed, tgt_info[j].composed, cfg.admm)
    edges = _stage("warp-structure", index, warp_mask_to_edges, info.mask, pair.forward)
    structure = edges.astype(np.float64)
    rendered = _stage("render", index, render, renderer, structure)
    pred = _stage("segment", index, predict, segmenter, rendered)
    back = _stage("warp-back", index, warp_mask, pred, pair.inverse, segmenter.n_classes)
    extra = {}
    if baselines:
        extra[BASELINES[0]] = _stage("baseline", index, predict, segmenter, img)
        moved = warp(img, pair.forward)
        extra[BASELINES[1]] = _stage(
            "baseline", index, warp_mask, predict(segmenter, moved), pair.inverse, segmenter.n_classes)
    return ImageRecord(index, img, j, pair, info.mask, structure, rendered, pred, back, extra)


def run_pipeline(src, tgt, renderer, segmenter, cfg=None, out=None, baselines=True):
    """Translate, segment and warp back every source image.

    ``cfg.pairing`` selects per-image targets ("per-image") or the single
    best global pair's target for every image ("global"). With ``out`` set,
    intermediates are written there.
    """
    cfg = cfg or RunConfig()
    tgt_info = _target_infos(tgt, cfg)
    src_info = [_stage("structex", i, extract_structure, img, cfg.potts_gamma, cfg.soften_sigma)
                for i, img in enumerate(src.images)]
    if cfg.pairing == "global":
        _, j_global = _stage("pairing", None, select_pair, [s.composed for s in src_info],
                             [t.composed for t in tgt_info])
    records = []
    for i, (img, info) in enumerate(zip(src.images, src_info)):
        if cfg.pairing == "global":
            j = j_global
        else:
            j = _stage("pairing", i, best_target, info.composed, [t.composed for t in tgt_info])
        rec = translate_one(i, img, info, tgt_info, j, renderer, segmenter, cfg, baselines)
        records.append(rec)
        log.info("image %d -> target %d, %d steps", i, j, rec.pair.steps)
        if out is not None:
            _stage("persist", i, save_record, rec, out)
    return PipelineRun(records, cfg.pairing, segmenter.n_classes)


def save_record(rec, out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    i = rec.index
    rec.pair.save(out / f"phi_{i}.suat", out / f"phi_inv_{i}.suat", out / f"phi_{i}.json",
                  extra={"target_index": int(rec.target_index)})
    save_image(rec.rendered, out / f"rendered_{i}.png")
    save_image(rec.warped_structure, out / f"structure_{i}.png")
    save_raw(rec.rendered, out / f"rendered_{i}.suat")
    save_raw(rec.warped_structure, out / f"structure_{i}.suat")
    save_raw(rec.source_mask.astype(np.int64), out / f"source_mask_{i}.suat")
    save_raw(rec.predicted, out / f"pred_{i}.suat")
    save_raw(rec.warped_back, out / f"warped_back_{i}.suat")
    for name, mask in rec.baselines.items():
        save_raw(mask, out / f"baseline_{name}_{i}.suat")


def load_run(out, src, n_classes, pairing="per-image"):
    """Rebuild a :class:`PipelineRun` from the intermediates written by :func:`save_record`."""
    out = Path(out)
    records = []
    for i, img in enumerate(src.images):
        meta = out / f"phi_{i}.json"
        pair = DiffeoPair.load(out / f"phi_{i}.suat", out / f"phi_inv_{i}.suat", meta)
        target = json.loads(meta.read_text()).get("target_index", -1)
        baselines = {}
        for name in BASELINES:
            path = out / f"baseline_{name}_{i}.suat"
            if path.exists():
                baselines[name] = load_raw(path)
        records.append(ImageRecord(
            i, img, target, pair,
            load_raw(out / f"source_mask_{i}.suat").astype(bool),
            load_raw(out / f"structure_{i}.suat"),
            load_raw(out / f"rendered_{i}.suat"),
            load_raw(out / f"pred_{i}.suat"),
            load_raw(out / f"warped_back_{i}.suat"),
            baselines))
    return PipelineRun(records, pairing, n_classes)
