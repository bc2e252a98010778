"""Small encoder-decoder segmentation model trained on the target domain."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..core import ParameterError, SegmenterConfig, check_image, load_archive, rng, save_archive
from ..metrics import segmentation_metrics

log = logging.getLogger(__name__)


def _double_conv(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU(),
        nn.Conv2d(cout, cout, 3, padding=1), nn.ReLU(),
    )


class SegNet(nn.Module):
    """Two-level U-Net with ``width`` base channels."""

    def __init__(self, width=16, n_classes=2):
        super().__init__()
        self.enc1 = _double_conv(1, width)
        self.enc2 = _double_conv(width, 2 * width)
        self.mid = _double_conv(2 * width, 4 * width)
        self.up2 = nn.ConvTranspose2d(4 * width, 2 * width, 2, stride=2)
        self.dec2 = _double_conv(4 * width, 2 * width)
        self.up1 = nn.ConvTranspose2d(2 * width, width, 2, stride=2)
        self.dec1 = _double_conv(2 * width, width)
        self.out = nn.Conv2d(width, n_classes, 1)

    def forward(self, x):
        h, w = x.shape[-2:]
        x = F.pad(x, (0, -w % 4, 0, -h % 4), mode="replicate")
        e1 = self.enc1(x)
        e2 = self.enc2(F.max_pool2d(e1, 2))
        m = self.mid(F.max_pool2d(e2, 2))
        d2 = self.dec2(torch.cat([self.up2(m), e2], dim=1))
        d1 = self.dec1(torch.cat([self.up1(d2), e1], dim=1))
        return self.out(d1)[..., :h, :w]


@dataclass
class SegmenterParams:
    net: SegNet
    width: int
    n_classes: int
    train_dice: float = float("nan")
    log: list = field(default_factory=list)

    def save(self, path):
        records = [("meta.width", np.array([self.width], dtype=np.float32)),
                   ("meta.n_classes", np.array([self.n_classes], dtype=np.float32)),
                   ("meta.train_dice", np.array([self.train_dice], dtype=np.float32))]
        records += [(k, v.detach().numpy()) for k, v in self.net.state_dict().items()]
        save_archive(records, path)

    @classmethod
    def load(cls, path):
        records = dict(load_archive(path))
        width = int(records.pop("meta.width")[0])
        n_classes = int(records.pop("meta.n_classes")[0])
        dice = float(records.pop("meta.train_dice")[0])
        net = SegNet(width, n_classes)
        net.load_state_dict({k: torch.from_numpy(np.asarray(v, dtype=np.float32)) for k, v in records.items()})
        net.eval()
        return cls(net, width, n_classes, dice)


def predict(params, img):
    """Per-pixel argmax labels for one image, same dims as the input."""
    img = check_image(img, min_side=1)
    with torch.no_grad():
        logits = params.net(torch.as_tensor(img, dtype=torch.float32)[None, None])
    return logits[0].argmax(0).numpy().astype(np.int64)


def train_segmenter(tgt, cfg=None):
    """Train on a labelled Dataset with per-pixel cross-entropy.

    The mean foreground Dice on the training set is stored in ``train_dice``.
    """
    cfg = cfg or SegmenterConfig()
    if tgt.masks is None or len(tgt.masks) != len(tgt.images):
        raise ParameterError("segmenter training needs one mask per image")
    if len(tgt.images) == 0:
        raise ParameterError("target dataset is empty")
    n_classes = max(int(tgt.n_classes), int(max(m.max() for m in tgt.masks)) + 1, 2)
    torch.manual_seed(cfg.seed)
    net = SegNet(cfg.width, n_classes)
    xs = torch.as_tensor(np.stack(tgt.images)[:, None], dtype=torch.float32)
    ys = torch.as_tensor(np.stack(tgt.masks), dtype=torch.int64)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    order_rng = rng(cfg.seed, 11)
    params = SegmenterParams(net, cfg.width, n_classes)
    net.train()
    for epoch in range(1, cfg.epochs + 1):
        order = order_rng.permutation(len(xs))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = torch.as_tensor(order[start:start + cfg.batch_size])
            loss = F.cross_entropy(net(xs[idx]), ys[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
        params.log.append({"epoch": epoch, "loss": total / len(xs)})
        log.info("segmenter epoch %d loss %.4f", epoch, total / len(xs))
    net.eval()
    dice = [segmentation_metrics(predict(params, x), y, n_classes).Dice
            for x, y in zip(tgt.images, tgt.masks)]
    params.train_dice = float(np.mean(dice))
    return params
