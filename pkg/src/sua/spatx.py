"""Spatial transformation block.

Velocity fields are estimated with ADMM on the linearised model

    min_v  1/2 ||<grad I_s, v> + I_s - I_t||^2 + lambda/2 ||grad^n v||^2

and composed into matched forward / inverse deformations out of many small
steps. Fields are (2, H, W) displacement arrays, ``field[0]`` along x
(columns) and ``field[1]`` along y (rows); a deformation maps output pixel
coordinates to source sampling coordinates, so ``warp(img, phi)(p) =
img(p + phi(p))``.

Discrete conventions shared by the solver and any oracle built against it:

* ``grad I_s`` is ``numpy.gradient`` of the source image;
* the field lives on the image grid padded by ``cfg.padding`` pixels on each
  side; the data term covers only the original pixels, the padding band is
  governed by the regulariser alone;
* ``grad^n`` stacks periodic forward differences ``Dx^k1 Dy^k2`` (k1+k2=n)
  on the padded grid, each weighted by the square root of its multinomial
  coefficient, so the squared norm is ``||(-Delta)^(n/2) v||^2`` with the
  periodic 5-point Laplacian.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from math import factorial, sqrt
from pathlib import Path

import numpy as np
from scipy import fft as sfft
from scipy import ndimage

from . import kernels
from .core import (AdmmConfig, ParameterError, ShapeError, check_field, load_raw, save_raw,
                   same_shape)
from .structex import edge_sketch, ssim

log = logging.getLogger(__name__)

INTERIOR_MARGIN = 4


def interior(arr, margin=INTERIOR_MARGIN):
    """Crop the last two axes by ``margin`` pixels."""
    return arr[..., margin:arr.shape[-2] - margin, margin:arr.shape[-1] - margin]


# ---------------------------------------------------------------- derivatives

def multinomial_orders(n):
    """(k1, k2, weight) for every mixed partial of total order n."""
    return [(k1, n - k1, sqrt(factorial(n) / (factorial(k1) * factorial(n - k1))))
            for k1 in range(n, -1, -1)]


def nth_gradient(arr, n, weighted=True):
    """All n-th order forward-difference partials of an image or field.

    The last two axes are reflect-padded by ``n`` pixels before differencing
    and cropped afterwards. Output has a leading axis over the ``n + 1``
    orders ``(k1, k2) = (n, 0), (n-1, 1), ..., (0, n)`` (k1 along x); with
    ``weighted`` each is scaled by ``sqrt(n! / (k1! k2!))`` so that the sum
    of squares equals the squared n-th gradient norm.
    """
    if n < 1:
        raise ParameterError("order n must be >= 1")
    arr = np.asarray(arr, dtype=np.float64)
    if min(arr.shape[-2:]) < n + 1:
        raise ShapeError(f"need at least {n + 1} pixels per axis for order {n}")
    pad = [(0, 0)] * (arr.ndim - 2) + [(n, n), (n, n)]
    p = np.pad(arr, pad, mode="reflect")
    out = []
    for k1, k2, w in multinomial_orders(n):
        d = p
        for _ in range(k1):
            d = np.diff(d, axis=-1, append=d[..., -1:])
        for _ in range(k2):
            d = np.diff(d, axis=-2, append=d[..., -1:, :])
        out.append(interior(d, n) * (w if weighted else 1.0))
    return np.stack(out)


def laplacian_symbol(shape, real=False):
    """Eigenvalues of the periodic negative 5-point Laplacian on ``shape``.

    With ``real`` the columns follow the half-spectrum layout of ``rfft2``.
    """
    wy = 2.0 * np.pi * np.fft.fftfreq(shape[0])
    wx = 2.0 * np.pi * (np.fft.rfftfreq(shape[1]) if real else np.fft.fftfreq(shape[1]))
    return (4.0 * np.sin(wy / 2.0) ** 2)[:, None] + (4.0 * np.sin(wx / 2.0) ** 2)[None, :]


def periodic_regulariser(v_pad, n):
    """``||grad^n v||^2`` on the padded periodic grid, summed over both components."""
    sym = laplacian_symbol(v_pad.shape[-2:]) ** n
    spec = np.fft.fft2(v_pad, axes=(-2, -1))
    return float(np.sum(sym * np.abs(spec) ** 2) / (v_pad.shape[-2] * v_pad.shape[-1]))


# ---------------------------------------------------------------- velocity model

def data_terms(src, tgt, padding):
    """Padded per-pixel gradient ``g`` (2, H', W'), residual ``r`` and data mask."""
    src = np.asarray(src, dtype=np.float64)
    tgt = np.asarray(tgt, dtype=np.float64)
    gy, gx = np.gradient(src)
    pad = ((padding, padding), (padding, padding))
    g = np.stack([np.pad(gx, pad), np.pad(gy, pad)])
    r = np.pad(src - tgt, pad)
    mask = np.pad(np.ones(src.shape, dtype=bool), pad)
    return g, r, mask


def velocity_objective(v_pad, src, tgt, cfg):
    """The discrete model objective for a padded field ``v_pad``."""
    g, r, mask = data_terms(src, tgt, cfg.padding)
    rho = np.where(mask, g[0] * v_pad[0] + g[1] * v_pad[1] + r, 0.0)
    return 0.5 * float(np.sum(rho * rho)) + 0.5 * cfg.smoothness * periodic_regulariser(v_pad, cfg.order)


def admm_penalty(src, cfg):
    """Absolute ADMM penalty: ``cfg.penalty`` times the mean squared source gradient."""
    gy, gx = np.gradient(np.asarray(src, dtype=np.float64))
    return cfg.penalty * max(float(np.mean(gx * gx + gy * gy)), 1e-8)


@dataclass
class VelocitySolve:
    field: np.ndarray
    padded: np.ndarray
    iterations: int
    residual: float


def solve_velocity_full(src, tgt, cfg=None):
    """ADMM on the split v = w; returns the padded solution and diagnostics.

    v-step: per-pixel ``(g g^T + rho I) v = rho (w - u) - g r`` (Sherman-Morrison);
    w-step: ``(lambda L^n + rho I) w = rho (v + u)`` diagonal in Fourier space;
    u: scaled dual. Stops when ``||v - w|| / max(||v||, ||w||)`` drops below
    ``cfg.tolerance`` (after at least two iterations) or at ``cfg.max_iterations``.
    """
    cfg = cfg or AdmmConfig()
    same_shape(src, tgt, "source and target")
    if np.ndim(src) != 2:
        raise ShapeError("velocity solve expects 2D images")
    g, r, _ = data_terms(src, tgt, cfg.padding)
    shape = r.shape
    g2 = g[0] ** 2 + g[1] ** 2
    rho = admm_penalty(src, cfg)
    gain = rho / (cfg.smoothness * laplacian_symbol(shape, real=True) ** cfg.order + rho)

    v = np.zeros((2,) + shape)
    w = np.zeros_like(v)
    u = np.zeros_like(v)
    resid = np.inf
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        b = rho * (w - u) - g * r
        gb = g[0] * b[0] + g[1] * b[1]
        v = b / rho - g * (gb / (rho * (rho + g2)))
        w = sfft.irfft2(gain * sfft.rfft2(v + u, axes=(-2, -1)), s=shape, axes=(-2, -1))
        u = u + v - w
        scale = max(np.linalg.norm(v), np.linalg.norm(w))
        resid = np.linalg.norm(v - w) / scale if scale > 0 else 0.0
        if it >= 2 and resid < cfg.tolerance:
            break
    p = cfg.padding
    crop = w[:, p:shape[0] - p, p:shape[1] - p] if p else w
    return VelocitySolve(crop.copy(), w, it, float(resid))


def solve_velocity(src, tgt, cfg=None):
    """Velocity field v with ``src(p + v(p)) ~ tgt(p)``, cropped to the image grid."""
    return solve_velocity_full(src, tgt, cfg).field


# ---------------------------------------------------------------- warping and composition

def _grid(shape):
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)
    return xx, yy


def sample(stack, fld):
    """Sample ``stack`` (C, H, W) or (H, W) at ``p + fld(p)`` bilinearly, clamped."""
    stack = np.asarray(stack, dtype=np.float64)
    squeeze = stack.ndim == 2
    if squeeze:
        stack = stack[None]
    xx, yy = _grid(fld.shape[1:])
    out = kernels.bilinear_sample(stack, xx + fld[0], yy + fld[1])
    return out[0] if squeeze else out


def warp(img, fld):
    """``img(p + fld(p))`` with bilinear interpolation and border clamping."""
    img = np.asarray(img, dtype=np.float64)
    fld = check_field(fld)
    if img.shape != fld.shape[1:]:
        raise ShapeError(f"image {img.shape} and field {fld.shape[1:]} dims differ")
    return sample(img, fld)


def compose(outer, inner):
    """Displacement of ``outer o inner``: ``inner(p) + outer(p + inner(p))``."""
    outer = check_field(outer)
    inner = check_field(inner, outer.shape[1:])
    return inner + sample(outer, inner)


def warp_mask(mask, fld, n_classes=None):
    """Warp a label mask: bilinear per-class indicators, then argmax (ties to lower class)."""
    mask = np.asarray(mask)
    fld = check_field(fld)
    if mask.shape != fld.shape[1:]:
        raise ShapeError(f"mask {mask.shape} and field {fld.shape[1:]} dims differ")
    is_bool = mask.dtype == bool
    labels = mask.astype(np.int64)
    c = int(n_classes if n_classes is not None else labels.max() + 1)
    c = max(c, 2)
    onehot = (labels[None] == np.arange(c)[:, None, None]).astype(np.float64)
    out = np.argmax(sample(onehot, fld), axis=0)
    return out.astype(bool) if is_bool else out


def warp_mask_to_edges(mask, fld):
    """Warp a binary mask and extract its label-transition edges."""
    warped = warp_mask(np.asarray(mask, dtype=bool), fld)
    return edge_sketch(warped.astype(np.int64))


def jacobian_determinant(fld):
    """det of the central-difference Jacobian of ``Id + fld`` at every pixel."""
    fld = check_field(fld)
    dxdy, dxdx = np.gradient(fld[0])
    dydy, dydx = np.gradient(fld[1])
    return (1.0 + dxdx) * (1.0 + dydy) - dxdy * dydx


# ---------------------------------------------------------------- deformations

@dataclass
class DiffeoPair:
    forward: np.ndarray
    inverse: np.ndarray
    velocities: list
    steps: int
    rescale: list = field(default_factory=list)

    def save(self, forward_path, inverse_path, meta_path=None, extra=None):
        save_raw(self.forward, forward_path)
        save_raw(self.inverse, inverse_path)
        if meta_path is not None:
            meta = {"N": self.steps, "rescale": [float(s) for s in self.rescale]}
            if extra:
                meta.update(extra)
            Path(meta_path).write_text(json.dumps(meta, indent=2, sort_keys=True))

    @classmethod
    def load(cls, forward_path, inverse_path, meta_path=None):
        fwd = load_raw(forward_path)
        inv = load_raw(inverse_path)
        steps, rescale = 0, []
        if meta_path is not None and Path(meta_path).exists():
            meta = json.loads(Path(meta_path).read_text())
            steps, rescale = meta["N"], meta["rescale"]
        return cls(fwd, inv, [], steps, rescale)


def _compose_steps(steps, shape):
    """Forward and inverse deformation from small steps s_0 (oldest) .. s_{N-1}.

    forward  = (Id + s_0) o (Id + s_1) o ... o (Id + s_{N-1})
    inverse  = (Id - s_{N-1}) o ... o (Id - s_0)
    Each composition samples the small step at displaced points.
    """
    fwd = np.zeros((2,) + tuple(shape))
    inv = np.zeros((2,) + tuple(shape))
    for s in reversed(steps):
        fwd = fwd + sample(s, fwd)
    for s in steps:
        inv = inv - sample(s, inv)
    return fwd, inv


def integrate(velocities, n_steps=None, step_cap=0.4):
    """Compose ``(Id + v_{N-1}/N) o ... o (Id + v_0/N)`` and its reverse-order inverse.

    Steps whose largest displacement ``|v_i| / N`` exceeds ``step_cap`` are
    scaled down to the cap; the factors are kept in ``rescale``.
    """
    if not velocities:
        raise ParameterError("velocity list is empty")
    n = len(velocities) if n_steps is None else int(n_steps)
    if n != len(velocities):
        raise ParameterError(f"N={n} does not match {len(velocities)} velocities")
    shape = np.shape(velocities[0])[1:]
    steps, rescale = [], []
    for v in velocities:
        s = check_field(v, shape) / n
        peak = float(np.sqrt(s[0] ** 2 + s[1] ** 2).max())
        factor = min(1.0, step_cap / peak) if peak > 0 else 1.0
        steps.append(s * factor)
        rescale.append(factor)
    # velocity v_0 is the innermost factor of the forward map
    fwd, inv = _compose_steps(steps[::-1], shape)
    return DiffeoPair(fwd, inv, [np.asarray(v, dtype=np.float64) for v in velocities], n, rescale)


def inverse_consistency(pair, margin=INTERIOR_MARGIN):
    """(mean, max) of ``|(phi o phi^-1)(p) - p|`` over interior pixels."""
    err = compose(pair.forward, pair.inverse)
    mag = np.sqrt(err[0] ** 2 + err[1] ** 2)
    mag = interior(mag, margin)
    return float(mag.mean()), float(mag.max())


# ---------------------------------------------------------------- registration

def _downsample(img, factor):
    if factor == 1:
        return np.asarray(img, dtype=np.float64)
    h, w = img.shape
    out_shape = (max(1, int(round(h / factor))), max(1, int(round(w / factor))))
    blurred = ndimage.gaussian_filter(img, 0.5 * factor, mode="nearest")
    return ndimage.zoom(blurred, (out_shape[0] / h, out_shape[1] / w), order=1,
                        mode="nearest", grid_mode=True)


def _upsample_field(fld, shape, factor):
    if fld.shape[1:] == tuple(shape):
        return fld
    zoom = (shape[0] / fld.shape[1], shape[1] / fld.shape[2])
    return np.stack([ndimage.zoom(c, zoom, order=1, mode="nearest", grid_mode=True) for c in fld]) * factor


@dataclass
class RegistrationInfo:
    accepted: int = 0
    per_scale: list = field(default_factory=list)
    ssim_start: float = 0.0
    ssim_end: float = 0.0
    energy_start: float = 0.0
    energy_end: float = 0.0


def register(src, tgt, cfg=None, return_info=False):
    """Coarse-to-fine greedy diffeomorphic registration of ``src`` onto ``tgt``.

    At every pyramid level the current warp of ``src`` is compared with
    ``tgt``; the velocity solve yields a step capped at ``cfg.step_cap`` px
    (at full resolution). A step is kept only if it lowers the squared error
    and does not lower SSIM; a level ends when the relative error decrease
    falls below ``cfg.tolerance`` or a step is rejected.
    """
    cfg = cfg or AdmmConfig()
    src = np.asarray(src, dtype=np.float64)
    tgt = np.asarray(tgt, dtype=np.float64)
    same_shape(src, tgt, "source and target")
    shape = src.shape

    steps = []
    fwd = np.zeros((2,) + shape)
    warped = src.copy()
    energy = float(np.sum((warped - tgt) ** 2))
    score = ssim(warped, tgt)
    info = RegistrationInfo(ssim_start=score, energy_start=energy)

    for level in reversed(range(cfg.scales)):
        factor = 2 ** level
        if min(shape) / factor < 8:
            continue
        tgt_l = _downsample(tgt, factor)
        kept = 0
        for _ in range(cfg.max_steps_per_scale):
            src_l = _downsample(warped, factor)
            vel = solve_velocity(src_l, tgt_l, cfg)
            vel = _upsample_field(vel, shape, factor)
            peak = float(np.sqrt(vel[0] ** 2 + vel[1] ** 2).max())
            if peak <= 1e-12:
                break
            step = vel * min(1.0, cfg.step_cap / peak)
            # phi o (Id + step); integrate() recomposes exactly at the end
            cand_fwd = step + sample(fwd, step)
            cand = sample(src, cand_fwd)
            cand_energy = float(np.sum((cand - tgt) ** 2))
            cand_score = ssim(cand, tgt)
            if cand_energy >= energy or cand_score < score:
                break
            decrease = (energy - cand_energy) / energy if energy > 0 else 0.0
            steps.append(step)
            fwd, warped, energy, score = cand_fwd, cand, cand_energy, cand_score
            kept += 1
            if decrease < cfg.tolerance:
                break
        info.per_scale.append(kept)
        log.debug("level %d: %d steps, energy %.6g, ssim %.4f", level, kept, energy, score)

    if not steps:
        steps = [np.zeros((2,) + shape)]
    n = len(steps)
    # integrate() takes the innermost factor first
    velocities = [s * n for s in reversed(steps)]
    pair = integrate(velocities, n, step_cap=max(cfg.step_cap, 1e-12) * (1 + 1e-9))
    info.accepted = n if np.any(steps[0]) else 0
    info.ssim_end = ssim(warp(src, pair.forward), tgt)
    info.energy_end = float(np.sum((warp(src, pair.forward) - tgt) ** 2))
    return (pair, info) if return_info else pair
