"""Synthetic two-domain benchmark with a ground-truth oracle.

The target domain holds canonical shapes rendered with the target
intensity profile. Source image ``i`` is target image ``i``'s geometry
pulled through a known smooth diffeomorphism, passed through a monotone
intensity lookup and corrupted with Gaussian noise; its mask is warped the
same way.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..core import Dataset, SynthSpec, rng
from ..spatx import jacobian_determinant, warp, warp_mask


@dataclass
class SynthOracle:
    warps: list
    remap_in: tuple
    remap_out: tuple

    def remap(self, img):
        return np.interp(img, self.remap_in, self.remap_out)


def _ellipse(shape, cx, cy, a, b, theta):
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)
    c, s = np.cos(theta), np.sin(theta)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _shape_mask(spec, gen):
    n = spec.size
    mask = np.zeros((n, n), dtype=bool)
    if spec.shape_family == "ellipse":
        for k in range(spec.objects):
            scale = 1.0 if k == 0 else 0.5
            a = gen.uniform(0.19, 0.28) * n * scale
            b = gen.uniform(0.14, 0.22) * n * scale
            jitter = 0.1 * n if k == 0 else 0.25 * n
            cx = n / 2 + gen.uniform(-jitter, jitter)
            cy = n / 2 + gen.uniform(-jitter, jitter)
            mask |= _ellipse((n, n), cx, cy, a, b, gen.uniform(0, np.pi))
    else:
        xx = np.arange(n, dtype=np.float64)
        top = n * gen.uniform(0.3, 0.4) + 0.05 * n * np.sin(2 * np.pi * xx / n + gen.uniform(0, 2 * np.pi))
        thick = n * gen.uniform(0.2, 0.3) + 0.04 * n * np.sin(2 * np.pi * xx / n + gen.uniform(0, 2 * np.pi))
        yy = np.arange(n, dtype=np.float64)[:, None]
        mask = (yy >= top[None, :]) & (yy < (top + thick)[None, :])
    return mask


def _target_image(mask, spec, gen):
    n = spec.size
    soft = ndimage.gaussian_filter(mask.astype(np.float64), 0.7)
    img = spec.background + (spec.foreground - spec.background) * soft
    if spec.texture > 0:
        shade = ndimage.gaussian_filter(gen.standard_normal((n, n)), n / 8, mode="wrap")
        shade /= max(np.abs(shade).max(), 1e-12)
        img = img + spec.texture * shade
    return np.clip(img, 0.0, 1.0)


def smooth_warp(shape, amplitude, gen, components=2):
    """Random low-frequency sinusoidal displacement with peak magnitude ``amplitude``.

    Rescaled if needed so the Jacobian determinant stays above 0.2.
    """
    if amplitude <= 0:
        return np.zeros((2,) + tuple(shape))
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    fld = np.zeros((2, h, w))
    for _ in range(components):
        wavelength = gen.uniform(1.0, 1.6) * max(h, w)
        ang = gen.uniform(0, 2 * np.pi)
        kx, ky = np.cos(ang), np.sin(ang)
        phase = gen.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * (kx * xx + ky * yy) / wavelength + phase)
        direction = gen.uniform(0, 2 * np.pi)
        fld[0] += np.cos(direction) * wave
        fld[1] += np.sin(direction) * wave
    fld *= amplitude / np.sqrt(fld[0] ** 2 + fld[1] ** 2).max()
    while jacobian_determinant(fld).min() <= 0.2:
        fld *= 0.8
    return fld


def synth_generate(spec=None):
    """Return ``(source, target, oracle)`` for a :class:`SynthSpec`."""
    spec = spec or SynthSpec()
    src_imgs, src_masks, tgt_imgs, tgt_masks, warps = [], [], [], [], []
    for i in range(spec.count):
        gen = rng(spec.seed, i)
        mask = _shape_mask(spec, gen)
        tgt = _target_image(mask, spec, gen)
        psi = smooth_warp(mask.shape, spec.warp_amplitude, gen)
        src = warp(tgt, psi)
        if spec.remap_in != spec.remap_out:
            src = np.interp(src, spec.remap_in, spec.remap_out)
        if spec.noise > 0:
            src = src + spec.noise * gen.standard_normal(src.shape)
        src_imgs.append(np.clip(src, 0.0, 1.0))
        src_masks.append(warp_mask(mask.astype(np.int64), psi, n_classes=2))
        tgt_imgs.append(tgt)
        tgt_masks.append(mask.astype(np.int64))
        warps.append(psi)
    source = Dataset(src_imgs, src_masks, role="source", n_classes=2)
    target = Dataset(tgt_imgs, tgt_masks, role="target", n_classes=2)
    return source, target, SynthOracle(warps, spec.remap_in, spec.remap_out)
