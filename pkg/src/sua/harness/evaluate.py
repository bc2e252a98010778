"""Evaluation of a pipeline run: metric report, detail file and plots."""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from ..core import ParameterError
from ..metrics import (TABLE_KEYS, MetricReport, distribution_metrics, histogram, mean_histogram,
                       segmentation_metrics)
from ..spatx import jacobian_determinant

SEG_KEYS = ("Acc", "Dice", "mIoU", "Sen", "Spe", "FDR")


def _mean_report(preds, gts, n_classes):
    per_image = [segmentation_metrics(p, g, n_classes) for p, g in zip(preds, gts)]
    report = MetricReport()
    for key in SEG_KEYS:
        vals = np.array([getattr(r, key) for r in per_image], dtype=np.float64)
        vals = vals[~np.isnan(vals)]
        setattr(report, key, float(vals.mean()) if vals.size else math.nan)
    return report, per_image


def _std(per_image, key):
    vals = np.array([getattr(r, key) for r in per_image], dtype=np.float64)
    vals = vals[~np.isnan(vals)]
    return float(vals.std()) if vals.size else None


def evaluate(run, gt_masks, tgt, out=None, bins=256, plots=True):
    """Score warped-back masks against source ground truth.

    Distribution metrics compare each rendered image's histogram with the
    mean target histogram. With ``out`` set, writes ``report.json`` (exactly
    the table columns), ``report_detail.json`` (baselines, spreads and
    per-image rows) and the diagnostic plots. Returns ``(report, detail)``.
    """
    gt_masks = list(gt_masks)
    if len(gt_masks) != len(run.records):
        raise ParameterError(f"{len(gt_masks)} ground-truth masks for {len(run.records)} records")
    for rec, gt in zip(run.records, gt_masks):
        if np.shape(gt) != rec.warped_back.shape:
            raise ParameterError(f"ground truth {np.shape(gt)} misaligned with image {rec.index}")
    report, per_image = _mean_report([r.warped_back for r in run.records], gt_masks, run.n_classes)
    ref = mean_histogram(tgt.images, bins)
    report.D_Bhat, report.Corr = distribution_metrics([r.rendered for r in run.records], ref, bins)

    detail = {"SUA": report.table(),
              "std": {k: _std(per_image, k) for k in SEG_KEYS},
              "pairing": run.pairing,
              "per_image": [{"index": r.index, "target": int(r.target_index), "steps": int(r.pair.steps),
                             **m.table()} for r, m in zip(run.records, per_image)]}
    names = sorted({k for r in run.records for k in r.baselines})
    for name in names:
        base, _ = _mean_report([r.baselines[name] for r in run.records], gt_masks, run.n_classes)
        # both baselines feed source intensities to the segmenter
        base.D_Bhat, base.Corr = distribution_metrics([r.source for r in run.records], ref, bins)
        detail[name] = base.table()

    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report.to_json() + "\n")
        (out / "report_detail.json").write_text(json.dumps(detail, indent=2, sort_keys=True) + "\n")
        if plots:
            write_plots(run, tgt, out, bins)
    return report, detail


def write_plots(run, tgt, out, bins=256):
    """Histogram overlay, deformation grid and Jacobian heat map (first record)."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out)
    centers = (np.arange(bins) + 0.5) / bins
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(centers, mean_histogram(tgt.images, bins), label="target")
    ax.plot(centers, np.mean([histogram(r.source, bins) for r in run.records], axis=0), label="source")
    ax.plot(centers, np.mean([histogram(r.rendered, bins) for r in run.records], axis=0), label="rendered")
    ax.set_xlabel("intensity")
    ax.set_ylabel("fraction of pixels")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "histograms.png", dpi=100)
    plt.close(fig)

    if not run.records:
        return
    rec = run.records[0]
    fld = rec.pair.forward
    h, w = fld.shape[1:]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    gx, gy = xx + fld[0], yy + fld[1]
    stride = max(1, min(h, w) // 16)
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.imshow(rec.source, cmap="gray", vmin=0, vmax=1)
    for r in range(0, h, stride):
        ax.plot(gx[r], gy[r], color="tab:orange", lw=0.6)
    for c in range(0, w, stride):
        ax.plot(gx[:, c], gy[:, c], color="tab:orange", lw=0.6)
    ax.set_title(f"deformation, image {rec.index}")
    ax.axis("off")
    fig.tight_layout()
    fig.savefig(out / "deformation_grid.png", dpi=100)
    plt.close(fig)

    det = jacobian_determinant(fld)
    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(det, cmap="coolwarm", vmin=min(0.0, det.min()), vmax=max(2.0, det.max()))
    fig.colorbar(im, ax=ax, label="det J")
    ax.set_title(f"Jacobian determinant, image {rec.index}")
    ax.axis("off")
    fig.tight_layout()
    fig.savefig(out / "jacobian.png", dpi=100)
    plt.close(fig)


__all__ = ["evaluate", "write_plots", "TABLE_KEYS"]
