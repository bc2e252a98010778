"""Dominant-structure extraction.

Potts clustering map, its edge sketch, binary structure masks, the
Gaussian-softened composed structure images used for registration, and
SSIM-based pairing of source and target structures.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from . import kernels
from .core import ParameterError, ShapeError, check_image, same_shape

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class ClusterMap:
    labels: np.ndarray
    values: np.ndarray
    energy: float
    gamma: float
    history: list = field(default_factory=list)

    @property
    def n_regions(self):
        return len(self.values)

    def reconstruction(self):
        return self.values[self.labels]


# ---------------------------------------------------------------- Potts

def count_transitions(labels):
    """Number of 4-neighbour pixel pairs carrying different labels."""
    labels = np.asarray(labels)
    return int(np.count_nonzero(labels[:, 1:] != labels[:, :-1])
               + np.count_nonzero(labels[1:, :] != labels[:-1, :]))


def potts_energy(img, labels, values, gamma):
    """``||u - img||^2 + gamma * #transitions`` for u = values[labels]."""
    resid = np.asarray(values)[labels] - img
    return float(np.sum(resid * resid) + gamma * count_transitions(labels))


def _region_stats(img, labels):
    n = int(labels.max()) + 1
    counts = np.bincount(labels.ravel(), minlength=n).astype(np.float64)
    sums = np.bincount(labels.ravel(), weights=img.ravel(), minlength=n)
    return counts, sums / counts


def _components(h_join, v_join, shape):
    """Label connected components of the grid graph with the given joins.

    ``h_join[i, j]`` links (i, j)-(i, j+1); ``v_join[i, j]`` links (i, j)-(i+1, j).
    Components are numbered in raster order of their first pixel.
    """
    hgt, wid = shape
    idx = np.arange(hgt * wid).reshape(shape)
    rows = np.concatenate([idx[:, :-1][h_join], idx[:-1, :][v_join]])
    cols = np.concatenate([idx[:, 1:][h_join], idx[1:, :][v_join]])
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(hgt * wid, hgt * wid))
    _, comp = connected_components(graph, directed=False)
    # renumber in raster order so labels are canonical
    _, first = np.unique(comp, return_index=True)
    order = np.argsort(first)
    remap = np.empty_like(order)
    remap[order] = np.arange(len(order))
    return remap[comp].reshape(shape)


def _merge_regions(img, labels, gamma):
    """Greedily merge adjacent regions while that lowers the Potts energy."""
    while True:
        counts, means = _region_stats(img, labels)
        a = np.concatenate([labels[:, :-1].ravel(), labels[:-1, :].ravel()])
        b = np.concatenate([labels[:, 1:].ravel(), labels[1:, :].ravel()])
        diff = a != b
        if not diff.any():
            return labels
        lo = np.minimum(a[diff], b[diff])
        hi = np.maximum(a[diff], b[diff])
        n = len(counts)
        pair, shared = np.unique(lo * n + hi, return_counts=True)
        pa, pb = pair // n, pair % n
        ca, cb = counts[pa], counts[pb]
        delta = ca * cb / (ca + cb) * (means[pa] - means[pb]) ** 2 - gamma * shared
        good = np.flatnonzero(delta < -1e-12)
        if good.size == 0:
            return labels
        good = good[np.argsort(delta[good], kind="stable")]
        target = np.arange(n)
        used = np.zeros(n, dtype=bool)
        for k in good:
            i, j = pa[k], pb[k]
            if used[i] or used[j]:
                continue
            used[i] = used[j] = True
            target[j] = i
        merged = target[labels]
        _, labels = np.unique(merged, return_inverse=True)
        labels = labels.reshape(img.shape)
        # canonical raster-order numbering
        labels = _components(labels[:, :-1] == labels[:, 1:], labels[:-1, :] == labels[1:, :], img.shape)


def _finalize(img, labels, gamma):
    labels = _merge_regions(img, labels, gamma)
    _, means = _region_stats(img, labels)
    return labels, means, potts_energy(img, labels, means, gamma)


def potts_cluster(img, gamma, max_iter=20, tol=1e-6, mu0=None, mu_growth=2.0):
    """Piecewise-constant approximation minimising ``||u - img||^2 + gamma * J(u)``.

    ``J`` counts 4-neighbour label transitions. The solver splits the energy
    into a row part and a column part coupled quadratically (u = v); each
    half is an exact 1D Potts problem solved by dynamic programming on every
    row / column. After each outer iteration the joint partition is read off
    the two iterates, regions are refit to their means and greedily merged,
    and the result replaces the current one only if its energy is lower, so
    ``history`` is non-increasing. Iteration stops once the candidate energy
    changes by less than ``tol`` or after ``max_iter`` rounds.
    """
    if gamma < 0:
        raise ParameterError("gamma must be >= 0")
    f = check_image(img, min_side=1)
    shape = f.shape

    # seeds: one region, and pure row / column 1D solutions
    best_labels = np.zeros(shape, dtype=np.int64)
    best_vals = np.array([f.mean()])
    best_e = potts_energy(f, best_labels, best_vals, gamma)
    if gamma == 0.0:
        labels = np.arange(f.size).reshape(shape)
        return ClusterMap(labels, f.ravel().copy(), 0.0, gamma, [0.0])

    row_lab, _ = kernels.potts_rows(f, gamma)
    col_lab, _ = kernels.potts_rows(f.T.copy(), gamma)
    col_lab = col_lab.T
    no_h = np.zeros((shape[0], shape[1] - 1), dtype=bool)
    no_v = np.zeros((shape[0] - 1, shape[1]), dtype=bool)
    for h_join, v_join in ((row_lab[:, :-1] == row_lab[:, 1:], no_v),
                           (no_h, col_lab[:-1, :] == col_lab[1:, :])):
        lab, vals, e = _finalize(f, _components(h_join, v_join, shape), gamma)
        if e < best_e:
            best_labels, best_vals, best_e = lab, vals, e
    history = [best_e]

    if mu0 is None:
        mu0 = 0.05
    mu = mu0
    u = f.copy()
    v = f.copy()
    lam = np.zeros_like(f)
    prev_cand = None
    for _ in range(max_iter):
        zu = (f + mu * v - lam) / (1.0 + mu)
        u_lab, u = kernels.potts_rows(zu, 2.0 * gamma / (1.0 + mu))
        zv = (f + mu * u + lam) / (1.0 + mu)
        v_labT, vT = kernels.potts_rows(zv.T.copy(), 2.0 * gamma / (1.0 + mu))
        v, v_lab = vT.T, v_labT.T
        lam = lam + mu * (u - v)
        mu *= mu_growth

        joint = _components(u_lab[:, :-1] == u_lab[:, 1:], v_lab[:-1, :] == v_lab[1:, :], shape)
        lab, vals, e = _finalize(f, joint, gamma)
        if e < best_e:
            best_labels, best_vals, best_e = lab, vals, e
        history.append(best_e)
        if prev_cand is not None and abs(prev_cand - e) < tol:
            break
        prev_cand = e

    return ClusterMap(best_labels, best_vals, best_e, gamma, history)


# ---------------------------------------------------------------- edges and masks

def edge_sketch(cm_or_labels):
    """Binary map of pixels whose right or bottom neighbour has another label."""
    labels = cm_or_labels.labels if isinstance(cm_or_labels, ClusterMap) else np.asarray(cm_or_labels)
    edges = np.zeros(labels.shape, dtype=bool)
    edges[:, :-1] |= labels[:, :-1] != labels[:, 1:]
    edges[:-1, :] |= labels[:-1, :] != labels[1:, :]
    return edges


def otsu_split(values, weights):
    """Threshold index over sorted distinct values maximising between-class variance.

    Returns ``t`` such that values ``> sorted_values[t]`` form the upper class.
    Ties go to the lowest threshold.
    """
    values = np.asarray(values, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    uniq, inv = np.unique(values, return_inverse=True)
    w = np.bincount(inv, weights=weights)
    wm = np.bincount(inv, weights=weights * values)
    total, total_m = w.sum(), wm.sum()
    w0 = np.cumsum(w)[:-1]
    m0 = np.cumsum(wm)[:-1]
    w1 = total - w0
    mu0 = m0 / w0
    mu1 = (total_m - m0) / w1
    between = w0 * w1 * (mu0 - mu1) ** 2 / (total * total)
    top = between.max()
    return uniq, int(np.flatnonzero(between >= top - 1e-12 * max(top, 1e-300))[0])


def structure_mask(cm):
    """Foreground = regions whose mean exceeds Otsu's threshold over region means.

    Region means are weighted by region area. A single-region map gives an
    all-foreground mask.
    """
    counts = np.bincount(cm.labels.ravel(), minlength=cm.n_regions)
    if len(np.unique(cm.values)) < 2:
        return np.ones(cm.labels.shape, dtype=bool)
    uniq, t = otsu_split(cm.values, counts)
    return (cm.values > uniq[t])[cm.labels]


def soften_mask(mask, sigma):
    soft = np.asarray(mask, dtype=np.float64)
    if sigma > 0:
        soft = ndimage.gaussian_filter(soft, sigma, mode="reflect")
    peak = soft.max()
    return soft / peak if peak > 0 else np.zeros_like(soft)


@dataclass
class ComposedStructure:
    image: np.ndarray
    soft_mask: np.ndarray


def compose_structure(mask, img, sigma=2.0):
    """Multiply ``img`` by the mask after Gaussian softening (peak renormalised to 1)."""
    if sigma < 0:
        raise ParameterError("sigma must be >= 0")
    same_shape(mask, img, "mask and image")
    img = np.asarray(img, dtype=np.float64)
    soft = soften_mask(mask, sigma)
    return ComposedStructure(soft * img, soft)


# ---------------------------------------------------------------- SSIM and pairing

def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def ssim_map(a, b, data_range=1.0):
    """Per-pixel SSIM with a Gaussian window, symmetric-reflected at the borders."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim inputs differ in shape: {a.shape} vs {b.shape}")
    win = gaussian_window()

    def filt(x):
        x = ndimage.correlate1d(x, win, axis=0, mode="reflect")
        return ndimage.correlate1d(x, win, axis=1, mode="reflect")

    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, data_range=1.0):
    """Mean SSIM (11x11 Gaussian window, sigma 1.5, K1=0.01, K2=0.03)."""
    return float(ssim_map(a, b, data_range).mean())


def _as_image(item):
    return item.image if isinstance(item, ComposedStructure) else np.asarray(item, dtype=np.float64)


def pair_scores(src_structures, tgt_structures):
    scores = np.empty((len(src_structures), len(tgt_structures)))
    for i, s in enumerate(src_structures):
        for j, t in enumerate(tgt_structures):
            scores[i, j] = ssim(_as_image(s), _as_image(t))
    return scores


def select_pair(src_structures, tgt_structures):
    """Index pair (i, j) with maximal SSIM; ties go to the smallest (i, j)."""
    if not src_structures or not tgt_structures:
        raise ParameterError("structure lists must be non-empty")
    scores = pair_scores(src_structures, tgt_structures)
    flat = int(np.argmax(scores))
    return divmod(flat, scores.shape[1])


def best_target(src_structure, tgt_structures):
    """Best-SSIM target index for one source structure."""
    return select_pair([src_structure], tgt_structures)[1]


def normalize_structure(cs, mask, level=0.7):
    """Rescale a composed structure so its mean over ``mask`` equals ``level``.

    Removes the domain's intensity scale before pairing and registration.
    """
    mask = np.asarray(mask, dtype=bool)
    ref = cs.image[mask].mean() if mask.any() else cs.image.mean()
    scale = level / ref if ref > 0 else 0.0
    return ComposedStructure(np.clip(cs.image * scale, 0.0, 1.0), cs.soft_mask)
