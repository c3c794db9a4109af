"""Segmentation models mapping images to logit fields, with exact backward passes.

Two kinds share one interface:

* ``logit-field``: a free (K, H, W) logit grid per training image, updated
  directly by the optimizer. The image content is ignored; backward is the
  identity. This isolates the loss landscape from model capacity.
* ``conv-ed``: a fixed two-level convolutional encoder-decoder,
  conv3x3 + ReLU -> conv3x3 + ReLU -> maxpool2x2 -> conv3x3 + ReLU ->
  nearest-neighbor upsample x2 -> channel concat with the pre-pool
  activation -> conv3x3 + ReLU -> conv1x1 to K logits. All 3x3 convolutions
  use zero padding, so the output is exactly (K, H, W).

Checkpoints are a flat binary format: the magic string ``PSCV1``, then for
each entry a little-endian u32 name length, the UTF-8 name, a u32 rank,
rank u32 dims, and the raw float64 little-endian values. Parameters come
first in sorted name order, then momentum buffers under ``momentum:<name>``.
Writes go to a temp file in the same directory and are renamed into place.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import IngestError, InvalidConfigError, InvalidInputError
from .grids import Image, LogitField
from .seeding import keyed_rng

CHECKPOINT_MAGIC = b"PSCV1"
MOMENTUM_PREFIX = "momentum:"
DEFAULT_CHANNELS = (16, 16, 32, 16)

KINDS = ("logit-field", "conv-ed")


@dataclass(frozen=True)
class ModelSpec:
    """Shape-level description of a model; enough to allocate its parameters."""

    kind: str
    num_classes: int
    height: int
    width: int
    channels: tuple = DEFAULT_CHANNELS  # conv-ed widths (c1, c2, c3, c4)
    image_ids: tuple = ()               # logit-field owners

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidConfigError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.num_classes < 2:
            raise InvalidConfigError(f"need at least 2 classes, got {self.num_classes}")
        if self.height < 1 or self.width < 1:
            raise InvalidConfigError(f"bad spatial shape {self.height}x{self.width}")
        if self.kind == "conv-ed":
            if self.height % 2 or self.width % 2:
                raise InvalidConfigError(
                    f"conv-ed needs even height and width, got {self.height}x{self.width}"
                )
            ch = tuple(int(c) for c in self.channels)
            if len(ch) != 4 or any(c < 1 for c in ch):
                raise InvalidConfigError(f"conv-ed needs 4 positive channel widths, got {self.channels}")
            object.__setattr__(self, "channels", ch)
        else:
            ids = tuple(str(i) for i in self.image_ids)
            if not ids or len(set(ids)) != len(ids):
                raise InvalidConfigError("logit-field needs a non-empty set of unique image ids")
            object.__setattr__(self, "image_ids", ids)


@dataclass
class ModelParams:
    """Named parameter arrays plus same-shaped optimizer momentum buffers."""

    spec: ModelSpec
    values: dict
    momentum: dict

    def __post_init__(self):
        if sorted(self.values) != sorted(self.momentum):
            raise InvalidInputError("parameter and momentum names disagree")
        for name, v in self.values.items():
            if self.momentum[name].shape != v.shape:
                raise InvalidInputError(f"momentum shape mismatch for {name!r}")


def _conv_shapes(spec: ModelSpec) -> dict:
    c1, c2, c3, c4 = spec.channels
    K = spec.num_classes
    return {
        "enc1.w": (c1, 1, 3, 3), "enc1.b": (c1,),
        "enc2.w": (c2, c1, 3, 3), "enc2.b": (c2,),
        "enc3.w": (c3, c2, 3, 3), "enc3.b": (c3,),
        "dec1.w": (c4, c2 + c3, 3, 3), "dec1.b": (c4,),
        "head.w": (K, c4, 1, 1), "head.b": (K,),
    }


def init_params(spec: ModelSpec, seed: int) -> ModelParams:
    """Fresh parameters: kernels uniform(-b, b) with b = sqrt(6 / fan_in),
    biases zero, logit fields zero (so softmax starts uniform)."""
    values = {}
    if spec.kind == "logit-field":
        for image_id in spec.image_ids:
            values[f"field.{image_id}"] = np.zeros(
                (spec.num_classes, spec.height, spec.width)
            )
    else:
        for name, shape in _conv_shapes(spec).items():
            if name.endswith(".w"):
                fan_in = int(np.prod(shape[1:]))
                bound = np.sqrt(6.0 / fan_in)
                rng = keyed_rng(seed, "init", name)
                values[name] = rng.uniform(-bound, bound, size=shape)
            else:
                values[name] = np.zeros(shape)
    momentum = {name: np.zeros_like(v) for name, v in values.items()}
    return ModelParams(spec, values, momentum)


def _conv2d(x, w, b):
    """Zero-padded 2-d convolution, x (Cin, H, W) -> (Cout, H, W)."""
    _, _, kh, kw = w.shape
    H, W = x.shape[1:]
    ph, pw = kh // 2, kw // 2
    if ph or pw:
        xp = np.zeros((x.shape[0], H + 2 * ph, W + 2 * pw))
        xp[:, ph : ph + H, pw : pw + W] = x
    else:
        xp = x
    out = np.broadcast_to(b[:, None, None], (w.shape[0], H, W)).copy()
    for i in range(kh):
        for j in range(kw):
            out += np.tensordot(w[:, :, i, j], xp[:, i : i + H, j : j + W], axes=(1, 0))
    return out


def _conv2d_backward(x, w, grad_out):
    """Gradients of a zero-padded convolution w.r.t. input, kernel and bias."""
    _, _, kh, kw = w.shape
    H, W = x.shape[1:]
    ph, pw = kh // 2, kw // 2
    xp = np.zeros((x.shape[0], H + 2 * ph, W + 2 * pw))
    xp[:, ph : ph + H, pw : pw + W] = x
    grad_xp = np.zeros_like(xp)
    grad_w = np.zeros_like(w)
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, i : i + H, j : j + W]
            grad_w[:, :, i, j] = np.tensordot(grad_out, patch, axes=((1, 2), (1, 2)))
            grad_xp[:, i : i + H, j : j + W] += np.tensordot(
                w[:, :, i, j], grad_out, axes=(0, 0)
            )
    grad_b = grad_out.sum(axis=(1, 2))
    return grad_xp[:, ph : ph + H, pw : pw + W], grad_w, grad_b


def _maxpool2(x):
    """2x2 max pooling; ties go to the first position in row-major window order."""
    C, H, W = x.shape
    windows = (
        x.reshape(C, H // 2, 2, W // 2, 2).transpose(0, 1, 3, 2, 4).reshape(C, H // 2, W // 2, 4)
    )
    idx = windows.argmax(axis=3)
    out = np.take_along_axis(windows, idx[..., None], axis=3)[..., 0]
    return out, idx


def _maxpool2_backward(idx, grad_out, shape):
    C, H, W = shape
    grad_windows = np.zeros((C, H // 2, W // 2, 4))
    np.put_along_axis(grad_windows, idx[..., None], grad_out[..., None], axis=3)
    return grad_windows.reshape(C, H // 2, W // 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(C, H, W)


def _upsample2(x):
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def _upsample2_backward(grad_out):
    C, H2, W2 = grad_out.shape
    return grad_out.reshape(C, H2 // 2, 2, W2 // 2, 2).sum(axis=(2, 4))


def forward(params: ModelParams, spec: ModelSpec, image: Image, image_id=None):
    """Predict logits for one image; returns (LogitField, cache for backward)."""
    if image.intensities.shape != (spec.height, spec.width):
        raise InvalidInputError(
            f"image shape {image.intensities.shape} does not match spec "
            f"{spec.height}x{spec.width}"
        )
    if spec.kind == "logit-field":
        name = f"field.{image_id}"
        if name not in params.values:
            raise InvalidInputError(f"no logit field for image id {image_id!r}")
        return LogitField(params.values[name].copy()), {"kind": spec.kind, "name": name}

    v = params.values
    x0 = image.intensities[None, :, :]
    a1 = np.maximum(_conv2d(x0, v["enc1.w"], v["enc1.b"]), 0.0)
    a2 = np.maximum(_conv2d(a1, v["enc2.w"], v["enc2.b"]), 0.0)
    pooled, idx = _maxpool2(a2)
    a3 = np.maximum(_conv2d(pooled, v["enc3.w"], v["enc3.b"]), 0.0)
    cat = np.concatenate([a2, _upsample2(a3)], axis=0)
    a4 = np.maximum(_conv2d(cat, v["dec1.w"], v["dec1.b"]), 0.0)
    logits = _conv2d(a4, v["head.w"], v["head.b"])
    cache = {
        "kind": spec.kind,
        "x0": x0, "a1": a1, "a2": a2, "pooled": pooled, "idx": idx,
        "a3": a3, "cat": cat, "a4": a4,
    }
    return LogitField(logits), cache


def backward(params: ModelParams, spec: ModelSpec, cache: dict, grad_wrt_logits: np.ndarray) -> dict:
    """Pull a logit gradient back to parameter gradients for one image."""
    if not isinstance(cache, dict) or cache.get("kind") != spec.kind:
        raise InvalidInputError("cache does not come from a matching forward pass")
    g = np.asarray(grad_wrt_logits, dtype=np.float64)
    if g.shape != (spec.num_classes, spec.height, spec.width):
        raise InvalidInputError(f"logit gradient shape {g.shape} does not match spec")

    if spec.kind == "logit-field":
        return {cache["name"]: g.copy()}

    v = params.values
    c2 = spec.channels[1]
    grad_a4, g_head_w, g_head_b = _conv2d_backward(cache["a4"], v["head.w"], g)
    grad_z4 = grad_a4 * (cache["a4"] > 0)
    grad_cat, g_dec1_w, g_dec1_b = _conv2d_backward(cache["cat"], v["dec1.w"], grad_z4)
    grad_a3 = _upsample2_backward(grad_cat[c2:]) * (cache["a3"] > 0)
    grad_pooled, g_enc3_w, g_enc3_b = _conv2d_backward(cache["pooled"], v["enc3.w"], grad_a3)
    grad_a2 = grad_cat[:c2] + _maxpool2_backward(cache["idx"], grad_pooled, cache["a2"].shape)
    grad_z2 = grad_a2 * (cache["a2"] > 0)
    grad_a1, g_enc2_w, g_enc2_b = _conv2d_backward(cache["a1"], v["enc2.w"], grad_z2)
    grad_z1 = grad_a1 * (cache["a1"] > 0)
    _, g_enc1_w, g_enc1_b = _conv2d_backward(cache["x0"], v["enc1.w"], grad_z1)
    return {
        "enc1.w": g_enc1_w, "enc1.b": g_enc1_b,
        "enc2.w": g_enc2_w, "enc2.b": g_enc2_b,
        "enc3.w": g_enc3_w, "enc3.b": g_enc3_b,
        "dec1.w": g_dec1_w, "dec1.b": g_dec1_b,
        "head.w": g_head_w, "head.b": g_head_b,
    }


def save_checkpoint(path, params: ModelParams) -> None:
    """Serialize parameters then momentum to the PSCV1 flat binary, atomically."""
    buf = bytearray(CHECKPOINT_MAGIC)
    entries = [(name, params.values[name]) for name in sorted(params.values)]
    entries += [
        (MOMENTUM_PREFIX + name, params.momentum[name]) for name in sorted(params.momentum)
    ]
    for name, arr in entries:
        encoded = name.encode("utf-8")
        buf += struct.pack("<I", len(encoded))
        buf += encoded
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf)
    os.replace(tmp, path)


def _read_entries(path):
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IngestError(f"{path}: {exc.strerror or exc}") from exc
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise IngestError(f"{path}: not a PSCV1 checkpoint")
    offset = len(CHECKPOINT_MAGIC)
    entries = {}
    try:
        while offset < len(blob):
            (name_len,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            name = blob[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            dims = struct.unpack_from(f"<{rank}I", blob, offset)
            offset += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
            offset += 8 * count
            entries[name] = arr.reshape(dims).astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise IngestError(f"{path}: truncated or corrupt checkpoint ({exc})") from exc
    if offset != len(blob):
        raise IngestError(f"{path}: trailing bytes after last checkpoint entry")
    return entries


def load_checkpoint(path, height=None, width=None) -> ModelParams:
    """Rebuild ModelParams from a PSCV1 file.

    The model kind, class count and channel widths are recovered from the
    entry names and shapes. conv-ed checkpoints do not record the image size,
    so callers supply height and width (from the dataset they evaluate on).
    """
    entries = _read_entries(path)
    values = {n: a for n, a in entries.items() if not n.startswith(MOMENTUM_PREFIX)}
    momentum = {
        n[len(MOMENTUM_PREFIX):]: a for n, a in entries.items() if n.startswith(MOMENTUM_PREFIX)
    }
    if not values:
        raise IngestError(f"{path}: checkpoint holds no parameters")
    if sorted(values) != sorted(momentum):
        raise IngestError(f"{path}: parameter and momentum entries disagree")

    field_names = sorted(n for n in values if n.startswith("field."))
    if field_names:
        if len(field_names) != len(values):
            raise IngestError(f"{path}: mixes logit fields with other parameters")
        K, H, W = values[field_names[0]].shape
        ids = tuple(n[len("field."):] for n in field_names)
        spec = ModelSpec("logit-field", K, H, W, image_ids=ids)
    else:
        try:
            channels = (
                values["enc1.w"].shape[0],
                values["enc2.w"].shape[0],
                values["enc3.w"].shape[0],
                values["dec1.w"].shape[0],
            )
            K = values["head.w"].shape[0]
        except KeyError as exc:
            raise IngestError(f"{path}: missing conv-ed parameter {exc}") from exc
        if height is None or width is None:
            raise InvalidInputError(
                f"{path}: conv-ed checkpoint needs an image size to load against")
        spec = ModelSpec("conv-ed", K, height, width, channels=channels)
        expected = _conv_shapes(spec)
        for name, shape in expected.items():
            if name not in values or values[name].shape != shape:
                raise IngestError(f"{path}: parameter {name!r} missing or mis-shaped")
    return ModelParams(spec, values, momentum)
