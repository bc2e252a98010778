"""Independent reference computations shared by the tests."""
import math
from math import comb

import numpy as np
import scipy.sparse as sp

from sua import spatx


def _cyclic_forward_difference(n):
    shift = sp.csr_matrix(np.roll(np.eye(n), 1, axis=1))
    return shift - sp.eye(n)


def dense_velocity(src, tgt, cfg):
    """Solve the discrete velocity model by one dense linear solve.

    The regulariser is assembled from explicit periodic forward-difference
    matrices, sum_k C(n, k) (Dx^k Dy^(n-k))^T (Dx^k Dy^(n-k)), independent of
    the Fourier diagonalisation used by the solver.
    """
    g, r, _ = spatx.data_terms(src, tgt, cfg.padding)
    h, w = r.shape
    npx = h * w
    dx = sp.kron(sp.eye(h), _cyclic_forward_difference(w))
    dy = sp.kron(_cyclic_forward_difference(h), sp.eye(w))
    reg = sp.csr_matrix((npx, npx))
    for k in range(cfg.order + 1):
        d = sp.eye(npx)
        for _ in range(k):
            d = dx @ d
        for _ in range(cfg.order - k):
            d = dy @ d
        reg = reg + comb(cfg.order, k) * (d.T @ d)
    reg = cfg.smoothness * reg.toarray()
    gx, gy, rr = g[0].ravel(), g[1].ravel(), r.ravel()
    a = np.zeros((2 * npx, 2 * npx))
    a[:npx, :npx] = reg + np.diag(gx * gx)
    a[npx:, npx:] = reg + np.diag(gy * gy)
    a[:npx, npx:] = np.diag(gx * gy)
    a[npx:, :npx] = np.diag(gx * gy)
    b = -np.concatenate([gx * rr, gy * rr])
    return np.linalg.solve(a, b).reshape(2, h, w)


def smooth_random_image(gen, n, sigma=1.5):
    from scipy import ndimage
    img = ndimage.gaussian_filter(gen.random((n, n)), sigma)
    return (img - img.min()) / (img.max() - img.min())


def sinusoid_warp(gen, n, amplitude=3.0):
    """Displacement with one sinusoid per component, peak ``amplitude`` px."""
    yy, xx = np.mgrid[0:n, 0:n].astype(float)
    l1, l2 = gen.uniform(48, 96, 2)
    a, b = gen.uniform(0, 2 * np.pi, 2)
    return np.stack([amplitude * np.sin(2 * np.pi * yy / l1 + a),
                     amplitude * np.sin(2 * np.pi * xx / l2 + b)])


def gradient_check(params, loss_fn, gen, steps=(1e-5, 1e-6, 1e-7), n_coords=6):
    """Worst relative error between autograd and central finite differences.

    Checks the directional derivative along one random unit direction over
    all parameters, plus ``n_coords`` single coordinates of the parameters
    with the largest gradients. Each check keeps the best of the central
    differences over ``steps``: piecewise-linear activations make any single
    step liable to straddle a kink, while a wrong gradient matches at none.
    """
    import torch

    plist = [p for m in (params.generator, params.discriminator) for p in m.parameters()]
    for p in plist:
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, plist, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(plist, grads)]

    def at(offsets):
        with torch.no_grad():
            for p, o in zip(plist, offsets):
                p.add_(o)
            val = float(loss_fn())
            for p, o in zip(plist, offsets):
                p.sub_(o)
        return val

    def best(analytic, offsets):
        errs = []
        for eps in steps:
            fd = (at([eps * o for o in offsets]) - at([-eps * o for o in offsets])) / (2 * eps)
            errs.append(_rel(analytic, fd))
        return min(errs)

    errors = []
    direction = [torch.from_numpy(gen.standard_normal(tuple(p.shape))).to(p.dtype) for p in plist]
    norm = float(torch.sqrt(sum((d * d).sum() for d in direction)))
    direction = [d / norm for d in direction]
    errors.append(best(float(sum((g * d).sum() for g, d in zip(grads, direction))), direction))

    flat = torch.cat([g.reshape(-1).abs() for g in grads])
    sizes = np.cumsum([0] + [p.numel() for p in plist])
    for idx in torch.topk(flat, min(n_coords, flat.numel())).indices.tolist():
        k = int(np.searchsorted(sizes, idx, side="right") - 1)
        local = idx - sizes[k]
        unit = [torch.zeros_like(p) for p in plist]
        unit[k].view(-1)[local] = 1.0
        errors.append(best(float(grads[k].reshape(-1)[local]), unit))
    return max(errors)


def _rel(a, b):
    scale = max(abs(a), abs(b))
    return 0.0 if scale < 1e-10 else abs(a - b) / scale


def loop_bhattacharyya(h1, h2):
    n = len(h1)
    m1 = sum(h1) / n
    m2 = sum(h2) / n
    s = 0.0
    for a, b in zip(h1, h2):
        s += math.sqrt(a * b)
    return math.sqrt(max(0.0, 1.0 - s / math.sqrt(m1 * m2 * n * n)))


def loop_correlation(h1, h2):
    n = len(h1)
    m1 = sum(h1) / n
    m2 = sum(h2) / n
    num = sum((a - m1) * (b - m2) for a, b in zip(h1, h2))
    d1 = sum((a - m1) ** 2 for a in h1)
    d2 = sum((b - m2) ** 2 for b in h2)
    return num / math.sqrt(d1 * d2)


def loop_segmentation(pred, gt, n_classes):
    """Per-pixel counting, then the mean over foreground classes present."""
    rows = []
    for c in range(1, n_classes):
        tp = fp = fn = tn = 0
        for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
            if p == c and g == c:
                tp += 1
            elif p == c:
                fp += 1
            elif g == c:
                fn += 1
            else:
                tn += 1
        if tp + fp + fn == 0:
            continue
        rows.append({
            "Acc": (tp + tn) / (tp + tn + fp + fn),
            "Dice": 2 * tp / (2 * tp + fp + fn),
            "mIoU": tp / (tp + fp + fn),
            "Sen": tp / (tp + fn) if tp + fn else 1.0,
            "Spe": tn / (tn + fp) if tn + fp else 1.0,
            "FDR": fp / (tp + fp) if tp + fp else 0.0,
        })
    return {k: sum(r[k] for r in rows) / len(rows) for k in rows[0]} if rows else None
