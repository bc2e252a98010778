"""Structure-conditioned intensity rendering network.

Generator: 15 residual blocks, 8 stride-2 encoder blocks and 7 decoder
blocks with U-Net skips (decoder block k receives encoder block 8-k),
followed by an output transposed convolution and a sigmoid. Inputs are
mirror-padded to a multiple of 256 and the output is cropped back.

Discriminator: the image and its structure as two channels, 4 stride-2
conv blocks (instance norm, LeakyReLU 0.2) and a fully connected head with
a sigmoid. Blocks 1-3 double as the feature taps for the Gram style loss.

Instance norm is skipped on 1x1 maps, where it would zero the activations.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import (ParameterError, RenderTrainConfig, ShapeError, load_archive, rng,
                   save_archive)
from .structex import edge_sketch, potts_cluster

log = logging.getLogger(__name__)

G_MULTIPLE = 256
D_MULTIPLE = 16
LOG_FLOOR = 1e-8
# dropout sits in the innermost decoder blocks only
DROPOUT_BLOCKS = 3
LOSS_COLUMNS = ("epoch", "lr", "L_adv_D", "L_adv_G", "L_1", "L_s", "total_G")


def _norm(x):
    if x.shape[-1] * x.shape[-2] <= 1:
        return x
    return F.instance_norm(x, eps=1e-5)


def _dropout(x, rate, gen):
    if gen is None or rate <= 0:
        return x
    keep = torch.rand(x.shape, generator=gen, dtype=x.dtype, device=x.device) >= rate
    return x * keep / (1.0 - rate)


class DownBlock(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 4, stride=2, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1)

    def forward(self, x, rate=0.0, gen=None):
        y = _dropout(_norm(F.relu(self.conv(x))), rate, gen)
        return y + self.skip(F.avg_pool2d(x, 2))


class UpBlock(nn.Module):
    def __init__(self, cin, cout):
        super().__init__()
        self.conv = nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1)

    def forward(self, x, rate=0.0, gen=None):
        y = _dropout(_norm(F.relu(self.conv(x))), rate, gen)
        return y + self.skip(F.interpolate(x, scale_factor=2, mode="nearest"))


def encoder_widths(width):
    return [width, 2 * width, 4 * width] + [8 * width] * 5


class Generator(nn.Module):
    def __init__(self, width=16):
        super().__init__()
        ch = encoder_widths(width)
        self.encoder = nn.ModuleList()
        cin = 1
        for c in ch:
            self.encoder.append(DownBlock(cin, c))
            cin = c
        self.decoder = nn.ModuleList()
        for k in range(7):
            out = ch[6 - k]
            self.decoder.append(UpBlock(cin, out))
            cin = out + ch[6 - k]
        self.head = nn.ConvTranspose2d(cin, 1, 4, stride=2, padding=1)

    def forward(self, x, rate=0.0, gen=None):
        h, w = x.shape[-2:]
        ph = -h % G_MULTIPLE
        pw = -w % G_MULTIPLE
        y = _mirror_pad(x, ph, pw)
        skips = []
        for block in self.encoder:
            y = block(y)
            skips.append(y)
        for k, block in enumerate(self.decoder):
            drop = rate if k < DROPOUT_BLOCKS else 0.0
            y = torch.cat([block(y, drop, gen), skips[6 - k]], dim=1)
        return torch.sigmoid(self.head(y))[..., :h, :w]


class Discriminator(nn.Module):
    def __init__(self, width=16, image_shape=(64, 64)):
        super().__init__()
        self.blocks = nn.ModuleList()
        cin = 2
        for c in (width, 2 * width, 4 * width, 8 * width):
            self.blocks.append(nn.Conv2d(cin, c, 4, stride=2, padding=1))
            cin = c
        ph, pw = (_round_up(s, D_MULTIPLE) for s in image_shape)
        self.image_shape = tuple(image_shape)
        self.fc = nn.Linear(cin * (ph // 16) * (pw // 16), 1)

    def forward(self, img, structure):
        if img.shape != structure.shape:
            raise ShapeError("image and structure differ in shape")
        if tuple(img.shape[-2:]) != self.image_shape:
            raise ShapeError(f"discriminator built for {self.image_shape}, got {tuple(img.shape[-2:])}")
        h, w = img.shape[-2:]
        y = torch.cat([img, structure], dim=1)
        y = _mirror_pad(y, -h % D_MULTIPLE, -w % D_MULTIPLE)
        feats = []
        for block in self.blocks:
            y = F.leaky_relu(_norm(block(y)), 0.2)
            feats.append(y)
        score = torch.sigmoid(self.fc(y.flatten(1)))
        return score.squeeze(1), feats[:3]


def init_weights(module, std=0.02):
    """N(0, std) conv / linear weights and zero biases (the usual pix2pix init).

    Keeps the sigmoid head out of saturation at the start of training.
    """
    if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
        nn.init.normal_(module.weight, 0.0, std)
        if module.bias is not None:
            nn.init.zeros_(module.bias)


def _mirror_index(n, extra, device):
    i = torch.arange(n + extra, device=device) % (2 * n)
    return torch.where(i < n, i, 2 * n - 1 - i)


def _mirror_pad(x, ph, pw):
    """Pad bottom and right by repeated mirroring (any amount, unlike reflect).

    Zero padding would fill most of a small image's feature maps with one
    constant per channel, which dominates the instance-norm statistics.
    """
    if ph:
        x = x.index_select(-2, _mirror_index(x.shape[-2], ph, x.device))
    if pw:
        x = x.index_select(-1, _mirror_index(x.shape[-1], pw, x.device))
    return x


def _round_up(n, m):
    return max(m, -(-n // m) * m)


@dataclass
class RendererParams:
    generator: Generator
    discriminator: Discriminator
    width: int
    image_shape: tuple
    log: list = field(default_factory=list)

    @classmethod
    def create(cls, width=16, image_shape=(64, 64), seed=0, dtype=torch.float32):
        torch.manual_seed(seed)
        g = Generator(width).to(dtype)
        d = Discriminator(width, image_shape).to(dtype)
        g.apply(init_weights)
        d.apply(init_weights)
        return cls(g, d, width, tuple(image_shape))

    @property
    def dtype(self):
        return next(self.generator.parameters()).dtype

    def n_parameters(self):
        return sum(p.numel() for m in (self.generator, self.discriminator) for p in m.parameters())

    def named_tensors(self):
        out = [("meta.width", np.array([self.width], dtype=np.float32)),
               ("meta.shape", np.array(self.image_shape, dtype=np.float32))]
        for prefix, mod in (("G.", self.generator), ("D.", self.discriminator)):
            for name, t in mod.state_dict().items():
                out.append((prefix + name, t.detach().cpu().numpy()))
        return out

    def save(self, path):
        save_archive(self.named_tensors(), path)

    @classmethod
    def load(cls, path):
        records = dict(load_archive(path))
        width = int(records["meta.width"][0])
        shape = tuple(int(s) for s in records["meta.shape"])
        params = cls.create(width, shape)
        for prefix, mod in (("G.", params.generator), ("D.", params.discriminator)):
            state = {k[len(prefix):]: torch.from_numpy(np.asarray(v, dtype=np.float32))
                     for k, v in records.items() if k.startswith(prefix)}
            mod.load_state_dict(state)
        return params


def _as_batch(x, dtype):
    t = torch.as_tensor(np.asarray(x, dtype=np.float64) if not torch.is_tensor(x) else x, dtype=dtype)
    if t.ndim == 2:
        t = t[None, None]
    elif t.ndim == 3:
        t = t[:, None]
    return t


def _generator(seed):
    gen = torch.Generator()
    gen.manual_seed(int(seed))
    return gen


def generator_forward(params, structure, training=False, seed=0, rate=0.5):
    """G(structure). Training mode applies dropout drawn from ``seed``."""
    x = _as_batch(structure, params.dtype)
    if min(x.shape[-2:]) < 1:
        raise ShapeError("structure image is empty")
    gen = _generator(seed) if training else None
    return params.generator(x, rate if training else 0.0, gen)


def discriminator_forward(params, img, structure):
    """(score in (0, 1), [features of blocks 1-3])."""
    a = _as_batch(img, params.dtype)
    b = _as_batch(structure, params.dtype)
    if a.shape != b.shape:
        raise ShapeError(f"image {tuple(a.shape)} and structure {tuple(b.shape)} differ")
    return params.discriminator(a, b)


def gram(features, normalize=True):
    """Channel Gram matrices of (B, C, H, W) or (C, H, W) features."""
    squeeze = features.ndim == 3
    if squeeze:
        features = features[None]
    b, c, h, w = features.shape
    flat = features.reshape(b, c, h * w)
    g = flat @ flat.transpose(1, 2)
    if normalize:
        g = g / (c * h * w)
    return g[0] if squeeze else g


def _safe_log(x):
    return torch.log(torch.clamp(x, min=LOG_FLOOR))


def losses(params, x_t, u_t, cfg=None, training=False, seed=0, fake=None):
    """Adversarial, L1, style and total generator losses for one batch.

    L_adv   = E[log(1 - D(G(u), u))] + E[log D(x, u)]   (D ascends it)
    L_adv_D = -L_adv, the quantity the discriminator minimises
    L_adv_G = E[log(1 - D(G(u), u))]
    L_1     = E|G(u) - x|
    L_s     = sum_{l=1..3} ||Gram_l(G(u)) - Gram_l(x)||_F, features of D(., u)
    total_G = L_adv_G + lambda1 L_1 + lambda2 L_s
    """
    cfg = cfg or RenderTrainConfig()
    x = _as_batch(x_t, params.dtype)
    u = _as_batch(u_t, params.dtype)
    if x.shape != u.shape:
        raise ShapeError(f"x_T {tuple(x.shape)} and u_T {tuple(u.shape)} differ")
    if fake is None:
        fake = generator_forward(params, u, training, seed, cfg.dropout)
    d_real, f_real = params.discriminator(x, u)
    d_fake, f_fake = params.discriminator(fake, u)
    adv_g = _safe_log(1.0 - d_fake).mean()
    adv = adv_g + _safe_log(d_real).mean()
    l1 = (fake - x).abs().mean()
    style = sum(torch.linalg.matrix_norm(gram(a) - gram(b), ord="fro").mean()
                for a, b in zip(f_fake, f_real))
    total = adv_g + cfg.lambda_l1 * l1 + cfg.lambda_style * style
    return {"L_adv_D": -adv, "L_adv_G": adv_g, "L_1": l1, "L_s": style, "total_G": total,
            "L_adv": adv}


def scheduled_lr(epoch, cfg):
    """Learning rate for 1-based ``epoch``: flat, then linear to 0 at the last epoch."""
    if epoch <= cfg.decay_start or cfg.epochs == cfg.decay_start:
        return cfg.lr
    return cfg.lr * (cfg.epochs - epoch) / (cfg.epochs - cfg.decay_start)


def target_structures(images, gamma=0.35):
    """Edge sketches u_T of target images from their Potts clustering maps."""
    return [edge_sketch(potts_cluster(img, gamma)).astype(np.float64) for img in images]


def train_renderer(tgt, cfg=None, gamma=0.35, structures=None, callback=None):
    """Alternating D / G Adam updates on (target image, target structure) pairs.

    ``tgt`` is a Dataset or a list of images. Structures are extracted with
    the Potts model at ``gamma`` unless given. Returns the trained
    :class:`RendererParams`; its ``log`` holds one row per epoch with the
    batch-averaged losses.
    """
    cfg = cfg or RenderTrainConfig()
    images = list(getattr(tgt, "images", tgt))
    if len(images) == 0:
        raise ParameterError("target dataset is empty")
    if structures is None:
        structures = target_structures(images, gamma)
    if len(images) != len(structures):
        raise ParameterError("need one structure per target image")
    torch.manual_seed(cfg.seed)
    shape = np.shape(images[0])
    params = RendererParams.create(cfg.width, shape, seed=cfg.seed)
    xs = torch.as_tensor(np.stack(images)[:, None], dtype=torch.float32)
    us = torch.as_tensor(np.stack(structures).astype(np.float64)[:, None], dtype=torch.float32)
    opt_d = torch.optim.Adam(params.discriminator.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    opt_g = torch.optim.Adam(params.generator.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))
    order_rng = rng(cfg.seed, 7)
    gen = _generator(cfg.seed)
    params.generator.train()
    params.discriminator.train()
    for epoch in range(1, cfg.epochs + 1):
        lr = scheduled_lr(epoch, cfg)
        for opt in (opt_d, opt_g):
            for group in opt.param_groups:
                group["lr"] = lr
        order = order_rng.permutation(len(images))
        sums = dict.fromkeys(LOSS_COLUMNS[2:], 0.0)
        batches = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = torch.as_tensor(order[start:start + cfg.batch_size])
            x, u = xs[idx], us[idx]
            fake = params.generator(u, cfg.dropout, gen)

            opt_d.zero_grad()
            d_loss = losses(params, x, u, cfg, fake=fake.detach())["L_adv_D"]
            d_loss.backward()
            opt_d.step()

            opt_g.zero_grad()
            terms = losses(params, x, u, cfg, fake=fake)
            terms["total_G"].backward()
            opt_g.step()

            terms["L_adv_D"] = d_loss
            for key in sums:
                sums[key] += float(terms[key].detach())
            batches += 1
        row = {"epoch": epoch, "lr": lr, **{k: v / batches for k, v in sums.items()}}
        params.log.append(row)
        log.info("epoch %d lr %.2e L1 %.4f Ls %.4f", epoch, lr, row["L_1"], row["L_s"])
        if callback is not None:
            callback(row)
    params.generator.eval()
    params.discriminator.eval()
    return params


def render(params, structure):
    """Evaluation-mode rendering of one structure image to an image in [0, 1]."""
    with torch.no_grad():
        out = generator_forward(params, structure, training=False)
    return out[0, 0].double().numpy()


def write_loss_log(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOSS_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(float(row[k])) if k != "epoch" else row[k]) for k in LOSS_COLUMNS})


def read_loss_log(path):
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


def is_finite(terms):
    return all(math.isfinite(float(v)) for v in terms.values())
