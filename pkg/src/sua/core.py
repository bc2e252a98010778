"""Shared data conventions, configuration, seeding and file interchange.

Conventions used throughout the package:

* an *image* is a 2D float array (H, W) with intensities in [0, 1];
* a *vector field* is a float array (2, H, W) holding per-pixel
  displacements ``(dx, dy)`` in pixel units (x along columns);
* a *mask* is an integer array (H, W) of class indices in ``0..C-1``.

Raw tensor files (``.suat``) start with the magic ``b"SUAT"``, a
little-endian u32 rank and one u32 per dimension, followed by a row-major
payload of little-endian float32 (images, fields) or uint16 (masks). The
payload type is recovered from its byte length.
"""
from __future__ import annotations

import dataclasses
import json
import random
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

MAGIC = b"SUAT"
ARCHIVE_MAGIC = b"SUAA"
MIN_SIDE = 8


class FormatError(ValueError):
    """File is unreadable or not in a recognised layout."""


class UnsupportedFormatError(FormatError):
    """File is readable but holds data this package does not handle."""


class ShapeError(ValueError):
    """Array dimensions do not agree."""


class ParameterError(ValueError):
    """An argument lies outside its documented domain."""


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name and image index."""

    def __init__(self, stage, index, cause):
        self.stage = stage
        self.index = index
        self.cause = cause
        where = f" (image {index})" if index is not None else ""
        super().__init__(f"[{stage}]{where} {type(cause).__name__}: {cause}")


# ---------------------------------------------------------------- validation

def check_image(img, name="image", min_side=MIN_SIDE):
    """Return ``img`` as float64, checking it is a finite 2D grid in [0, 1]."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2D, got shape {arr.shape}")
    if min(arr.shape) < min_side:
        raise ShapeError(f"{name} must be at least {min_side}x{min_side}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ParameterError(f"{name} has non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ParameterError(f"{name} intensities must lie in [0, 1]")
    return arr


def check_field(fld, shape=None, name="field"):
    arr = np.asarray(fld, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 2:
        raise ShapeError(f"{name} must have shape (2, H, W), got {arr.shape}")
    if shape is not None and arr.shape[1:] != tuple(shape):
        raise ShapeError(f"{name} dims {arr.shape[1:]} do not match {tuple(shape)}")
    if not np.all(np.isfinite(arr)):
        raise ParameterError(f"{name} has non-finite values")
    return arr


def check_mask(mask, n_classes=None, name="mask"):
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2D, got shape {arr.shape}")
    if arr.dtype.kind == "b":
        arr = arr.astype(np.int64)
    if arr.dtype.kind not in "iu":
        raise ParameterError(f"{name} must hold integer labels")
    if arr.size and arr.min() < 0:
        raise ParameterError(f"{name} has negative labels")
    if n_classes is not None and arr.size and arr.max() >= n_classes:
        raise ParameterError(f"{name} label {arr.max()} out of range for {n_classes} classes")
    return arr.astype(np.int64)


def same_shape(a, b, what="inputs"):
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"{what} differ in shape: {np.shape(a)} vs {np.shape(b)}")


def identity_field(shape):
    return np.zeros((2,) + tuple(shape))


# ---------------------------------------------------------------- datasets

@dataclass
class Dataset:
    """Ordered images (and optional masks) from one domain."""

    images: list
    masks: list | None = None
    role: str = "source"
    n_classes: int = 2

    def __post_init__(self):
        if not self.images:
            raise ParameterError("dataset is empty")
        shape = np.shape(self.images[0])
        for img in self.images:
            if np.shape(img) != shape:
                raise ShapeError("dataset images must share dimensions")
        if self.masks is not None and len(self.masks) != len(self.images):
            raise ParameterError("mask count does not match image count")

    def __len__(self):
        return len(self.images)

    @property
    def shape(self):
        return np.shape(self.images[0])

    @property
    def labelled(self):
        return self.masks is not None

    def save(self, directory, prefix):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for i, img in enumerate(self.images):
            save_raw(img, directory / f"{prefix}_img_{i}.suat")
            if self.masks is not None:
                save_raw(self.masks[i].astype(np.uint16), directory / f"{prefix}_mask_{i}.suat")
        meta = {"role": self.role, "count": len(self), "n_classes": self.n_classes,
                "labelled": self.labelled}
        (directory / f"{prefix}_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory, prefix):
        directory = Path(directory)
        meta_path = directory / f"{prefix}_meta.json"
        if not meta_path.exists():
            raise FormatError(f"no dataset metadata at {meta_path}")
        meta = json.loads(meta_path.read_text())
        images = [load_raw(directory / f"{prefix}_img_{i}.suat") for i in range(meta["count"])]
        masks = None
        if meta["labelled"]:
            masks = [load_raw(directory / f"{prefix}_mask_{i}.suat").astype(np.int64)
                     for i in range(meta["count"])]
        return cls(images, masks, role=meta["role"], n_classes=meta["n_classes"])


# ---------------------------------------------------------------- raw tensors

def _encode_raw(arr):
    arr = np.asarray(arr)
    if arr.dtype.kind in "iub":
        if arr.size and (arr.min() < 0 or arr.max() > 0xFFFF):
            raise ParameterError("integer tensors must fit in uint16")
        payload = arr.astype("<u2").tobytes(order="C")
    else:
        payload = arr.astype("<f4").tobytes(order="C")
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + payload


def _decode_raw(buf, origin="buffer"):
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise FormatError(f"{origin}: missing SUAT magic")
    (rank,) = struct.unpack_from("<I", buf, 4)
    off = 8 + 4 * rank
    if len(buf) < off:
        raise FormatError(f"{origin}: truncated header")
    shape = struct.unpack_from(f"<{rank}I", buf, 8)
    count = int(np.prod(shape, dtype=np.int64))
    size = len(buf) - off
    if size == 4 * count:
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=off).astype(np.float64)
    elif size == 2 * count:
        arr = np.frombuffer(buf, dtype="<u2", count=count, offset=off).astype(np.int64)
    else:
        raise FormatError(f"{origin}: payload of {size} bytes does not fit shape {shape}")
    return arr.reshape(shape)


def save_raw(arr, path):
    """Write an array as a raw tensor: float data as float32, integer data as uint16."""
    Path(path).write_bytes(_encode_raw(arr))


def load_raw(path):
    """Read a raw tensor. Float payloads come back as float64, u16 as int64."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    return _decode_raw(buf, str(path))


def save_archive(named, path):
    """Write an ordered list of ``(name, array)`` records to one file."""
    parts = [ARCHIVE_MAGIC, struct.pack("<I", len(named))]
    for name, arr in named:
        key = name.encode("utf-8")
        blob = _encode_raw(arr)
        parts += [struct.pack("<I", len(key)), key, struct.pack("<Q", len(blob)), blob]
    Path(path).write_bytes(b"".join(parts))


def load_archive(path):
    """Read the ``(name, array)`` records written by :func:`save_archive`."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    if buf[:4] != ARCHIVE_MAGIC:
        raise FormatError(f"{path}: missing SUAA magic")
    (count,) = struct.unpack_from("<I", buf, 4)
    off = 8
    out = []
    for _ in range(count):
        (klen,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + klen].decode("utf-8")
        off += klen
        (blen,) = struct.unpack_from("<Q", buf, off)
        off += 8
        if off + blen > len(buf):
            raise FormatError(f"{path}: record {name!r} is truncated")
        out.append((name, _decode_raw(buf[off:off + blen], f"{path}:{name}")))
        off += blen
    return out


# ---------------------------------------------------------------- images

def load_image(path):
    """Load an 8-bit grayscale PNG or a raw tensor as a float image in [0, 1]."""
    path = Path(path)
    try:
        head = path.read_bytes()[:4]
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    if head == MAGIC:
        arr = load_raw(path)
        if arr.ndim != 2:
            raise UnsupportedFormatError(f"{path}: raw tensor of rank {arr.ndim} is not an image")
        return check_image(arr, str(path), min_side=1)
    try:
        with PILImage.open(path) as im:
            im.load()
            mode = im.mode
            data = np.array(im)
    except Exception as exc:  # PIL raises a zoo of types for bad files
        raise FormatError(f"cannot decode {path}: {exc}") from exc
    if mode != "L":
        raise UnsupportedFormatError(f"{path}: only 8-bit grayscale PNG is supported, got mode {mode}")
    return data.astype(np.float64) / 255.0


def save_image(img, path, format="png"):
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"image must be 2D, got {arr.shape}")
    if format == "raw":
        save_raw(arr, path)
    elif format == "png":
        q = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
        PILImage.fromarray(q, mode="L").save(path, format="PNG")
    else:
        raise ParameterError(f"unknown image format {format!r}")


def to_uint8(img):
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------- seeding

def seed_everything(seed):
    """Seed python, numpy and torch global generators."""
    random.seed(seed)
    np.random.seed(seed % (2**32))
    try:
        import torch
    except ImportError:
        return
    torch.manual_seed(seed)


def rng(seed, *stream):
    """Independent numpy generator for a (seed, stream...) key."""
    return np.random.default_rng([seed, *stream])


# ---------------------------------------------------------------- configuration

@dataclass
class AdmmConfig:
    order: int = 3
    smoothness: float = 5000.0
    # relative to the mean squared source gradient (see spatx.admm_penalty)
    penalty: float = 0.4
    max_iterations: int = 50
    tolerance: float = 1e-3
    padding: int = 8
    scales: int = 3
    step_cap: float = 0.4
    max_steps_per_scale: int = 30

    def __post_init__(self):
        if self.order < 1:
            raise ParameterError("order must be >= 1")
        for name in ("smoothness", "penalty", "tolerance", "step_cap"):
            if getattr(self, name) <= 0:
                raise ParameterError(f"{name} must be positive")
        for name in ("max_iterations", "scales", "max_steps_per_scale"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1")
        if self.padding < 0:
            raise ParameterError("padding must be >= 0")


@dataclass
class RenderTrainConfig:
    width: int = 16
    lambda_l1: float = 1.0
    lambda_style: float = 100.0
    lr: float = 2e-4
    epochs: int = 200
    decay_start: int = 100
    batch_size: int = 1
    seed: int = 0
    dropout: float = 0.5
    beta1: float = 0.5
    beta2: float = 0.999

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.width < 1:
            raise ParameterError("epochs, batch_size and width must be >= 1")
        if not 0 <= self.decay_start <= self.epochs:
            raise ParameterError("decay_start must lie in [0, epochs]")
        if not 0.0 <= self.dropout < 1.0:
            raise ParameterError("dropout must lie in [0, 1)")


def desk_render_config(**overrides):
    """Renderer settings for 64x64 desk-scale runs: the default loss weights
    with a shorter schedule of 60 epochs, decaying from epoch 30."""
    base = dict(epochs=60, decay_start=30)
    base.update(overrides)
    return RenderTrainConfig(**base)


@dataclass
class SegmenterConfig:
    width: int = 16
    epochs: int = 40
    lr: float = 2e-3
    batch_size: int = 8
    seed: int = 0


@dataclass
class SynthSpec:
    seed: int = 0
    size: int = 64
    count: int = 40
    shape_family: str = "ellipse"
    objects: int = 1
    warp_amplitude: float = 3.0
    # monotone lookup: source = interp(target, remap_in, remap_out)
    remap_in: tuple = (0.0, 0.3, 0.8, 1.0)
    remap_out: tuple = (0.0, 0.1, 0.42, 0.55)
    noise: float = 0.02
    background: float = 0.3
    foreground: float = 0.8
    texture: float = 0.03

    def __post_init__(self):
        if self.size < MIN_SIDE or self.count < 1 or self.objects < 1:
            raise ParameterError("degenerate synthetic spec")
        if self.shape_family not in ("ellipse", "bands"):
            raise ParameterError(f"unknown shape family {self.shape_family!r}")
        if len(self.remap_in) != len(self.remap_out) or len(self.remap_in) < 2:
            raise ParameterError("remap tables must have equal length >= 2")
        if np.any(np.diff(self.remap_in) <= 0) or np.any(np.diff(self.remap_out) < 0):
            raise ParameterError("intensity remap must be monotone")
        self.remap_in = tuple(float(v) for v in self.remap_in)
        self.remap_out = tuple(float(v) for v in self.remap_out)


@dataclass
class RunConfig:
    """Every knob of a pipeline run, with defaults. Round-trips through JSON."""

    seed: int = 0
    potts_gamma: float = 0.35
    soften_sigma: float = 2.0
    histogram_bins: int = 256
    pairing: str = "per-image"
    admm: AdmmConfig = field(default_factory=AdmmConfig)
    render: RenderTrainConfig = field(default_factory=lambda: desk_render_config())
    segmenter: SegmenterConfig = field(default_factory=SegmenterConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)
    out: str = "sua_out"

    def __post_init__(self):
        if self.potts_gamma < 0:
            raise ParameterError("potts_gamma must be >= 0")
        if self.pairing not in ("per-image", "global"):
            raise ParameterError("pairing must be 'per-image' or 'global'")

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        nested = {"admm": AdmmConfig, "render": RenderTrainConfig,
                  "segmenter": SegmenterConfig, "synth": SynthSpec}
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ParameterError(f"unknown config keys: {sorted(unknown)}")
        for key, typ in nested.items():
            if key in d and isinstance(d[key], dict):
                sub_known = {f.name for f in dataclasses.fields(typ)}
                bad = set(d[key]) - sub_known
                if bad:
                    raise ParameterError(f"unknown {key} keys: {sorted(bad)}")
                d[key] = typ(**d[key])
        return cls(**d)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))
