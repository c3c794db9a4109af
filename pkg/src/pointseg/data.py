"""Dataset plumbing: NetPBM P5 files, point annotations, augmentation, synthesis.

Disk layout of a dataset root:

    root/images/<id>.pgm        grayscale image, maxval 255
    root/masks/<id>.pgm         dense label mask, pixel value = class id
    root/annotations.json       {id: [{"row": r, "col": c, "class": k}, ...]}
    root/manifest.json          {"K": ..., "H": ..., "W": ..., "train": [...], "test": [...]}

Images normalize to [0, 1] by dividing by the PGM maxval. The synthetic
generator quantizes intensities to k/255 before returning them, so a
generated sample and its written-then-reloaded copy are bit-identical.

The generator's spatial prior: each foreground class is one filled ellipse
whose center sits at a class-specific anchor plus a small per-image jitter.
Ellipse axes are drawn once per class for the whole dataset, so with zero
jitter and zero noise every image of a split is identical.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace

import numpy as np

from .errors import IngestError, InvalidConfigError, InvalidInputError
from .grids import Image
from .losses import PointAnnotation
from .seeding import keyed_rng


@dataclass(frozen=True)
class LabelMask:
    """Dense per-pixel class ids in [0, num_classes)."""

    classes: np.ndarray  # (H, W) integer
    num_classes: int

    def __post_init__(self):
        arr = np.asarray(self.classes)
        if arr.ndim != 2 or not np.issubdtype(arr.dtype, np.integer):
            raise InvalidInputError("mask must be a 2-d integer grid")
        if arr.size and (arr.min() < 0 or arr.max() >= self.num_classes):
            raise InvalidInputError(
                f"mask ids must lie in [0, {self.num_classes}), found "
                f"[{arr.min()}, {arr.max()}]"
            )
        object.__setattr__(self, "classes", arr.astype(np.int64))


@dataclass(frozen=True)
class Sample:
    """One dataset item: image plus optional dense mask and point annotation."""

    id: str
    image: Image
    mask: LabelMask = None
    annotation: PointAnnotation = None

    def __post_init__(self):
        H, W = self.image.intensities.shape
        if self.mask is not None and self.mask.classes.shape != (H, W):
            raise InvalidInputError(f"sample {self.id}: mask shape differs from image")
        if self.annotation is not None:
            for r, c, k in self.annotation.points:
                if not (0 <= r < H and 0 <= c < W):
                    raise InvalidInputError(
                        f"sample {self.id}: annotated pixel ({r}, {c}) outside {H}x{W}"
                    )
                if self.mask is not None and int(self.mask.classes[r, c]) != k:
                    raise InvalidInputError(
                        f"sample {self.id}: point ({r}, {c}) labeled {k} but mask says "
                        f"{int(self.mask.classes[r, c])}"
                    )


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for the synthetic ellipse dataset (class 0 is background)."""

    num_classes: int = 3
    height: int = 64
    width: int = 64
    anchors: tuple = ((0.35, 0.35), (0.65, 0.65))  # fractional (row, col) per class >= 1
    jitter: float = 0.08          # center offset bound, fraction of min(H, W)
    radius_range: tuple = (0.12, 0.22)  # ellipse axes, fraction of min(H, W)
    intensity_means: tuple = (0.2, 0.5, 0.8)
    noise_sigma: float = 0.05
    train_count: int = 40
    test_count: int = 10
    seed: int = 0

    def __post_init__(self):
        K = self.num_classes
        if K < 2:
            raise InvalidConfigError("need background plus at least one foreground class")
        if self.height < 4 or self.width < 4:
            raise InvalidConfigError(f"grid {self.height}x{self.width} too small")
        if len(self.anchors) != K - 1:
            raise InvalidConfigError(f"need {K - 1} anchors for {K} classes, got {len(self.anchors)}")
        if len(self.intensity_means) != K:
            raise InvalidConfigError(f"need {K} intensity means, got {len(self.intensity_means)}")
        means = self.intensity_means
        if any(not 0.0 <= m <= 1.0 for m in means):
            raise InvalidConfigError("intensity means must lie in [0, 1]")
        for i in range(K):
            for j in range(i + 1, K):
                if abs(means[i] - means[j]) < 2 * self.noise_sigma:
                    raise InvalidConfigError(
                        f"intensity means {means[i]} and {means[j]} closer than 2 sigma"
                    )
        lo, hi = self.radius_range
        if not 0 < lo <= hi < 0.5:
            raise InvalidConfigError(f"radius range {self.radius_range} must satisfy 0 < lo <= hi < 0.5")
        if not 0.0 <= self.jitter < 0.5:
            raise InvalidConfigError(f"jitter {self.jitter} must lie in [0, 0.5)")
        if self.noise_sigma < 0:
            raise InvalidConfigError("noise sigma must be nonnegative")
        if self.train_count < 0 or self.test_count < 0:
            raise InvalidConfigError("split counts must be nonnegative")


# NetPBM P5 reading and writing, from scratch for bit-exact round trips.

def write_pgm(path, values: np.ndarray, maxval: int = 255) -> None:
    """Write a 2-d integer grid as binary PGM."""
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise InvalidInputError("PGM payload must be 2-d")
    if not 1 <= maxval <= 255:
        raise InvalidInputError(f"unsupported maxval {maxval}")
    if arr.min() < 0 or arr.max() > maxval:
        raise InvalidInputError(f"pixel values exceed [0, {maxval}]")
    H, W = arr.shape
    header = f"P5\n{W} {H}\n{maxval}\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header + arr.astype(np.uint8).tobytes())


def read_pgm(path):
    """Read a binary PGM; returns (values as int array, maxval)."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IngestError(f"{path}: cannot read ({exc})") from exc

    pos = 0

    def token():
        nonlocal pos
        while pos < len(blob):
            ch = blob[pos : pos + 1]
            if ch == b"#":
                while pos < len(blob) and blob[pos : pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            elif ch.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise IngestError(f"{path}: truncated PGM header")
        return blob[start:pos]

    if token() != b"P5":
        raise IngestError(f"{path}: not a binary PGM (missing P5 magic)")
    try:
        width, height, maxval = (int(token()) for _ in range(3))
    except ValueError as exc:
        raise IngestError(f"{path}: malformed PGM header") from exc
    if width < 1 or height < 1 or not 1 <= maxval <= 65535:
        raise IngestError(f"{path}: invalid PGM dimensions or maxval")
    pos += 1  # the single whitespace byte after maxval
    bytes_per = 1 if maxval < 256 else 2
    expected = width * height * bytes_per
    data = blob[pos : pos + expected]
    if len(data) != expected:
        raise IngestError(f"{path}: PGM payload truncated")
    if pos + expected != len(blob):
        raise IngestError(f"{path}: trailing bytes after PGM payload")
    dtype = np.uint8 if bytes_per == 1 else ">u2"
    values = np.frombuffer(data, dtype=dtype).reshape(height, width).astype(np.int64)
    return values, maxval


def _annotation_points_json(ann: PointAnnotation):
    return [{"row": r, "col": c, "class": k} for r, c, k in ann.points]


def write_annotations(root, samples) -> None:
    """Write annotations.json covering every annotated sample."""
    annotations = {
        s.id: _annotation_points_json(s.annotation)
        for s in samples if s.annotation is not None
    }
    with open(os.path.join(root, "annotations.json"), "w", encoding="utf-8") as fh:
        json.dump(annotations, fh, indent=2, sort_keys=True)
        fh.write("\n")


def save_dataset(root, train, test, num_classes: int) -> None:
    """Write samples and metadata in the documented layout."""
    samples = list(train) + list(test)
    if not samples:
        raise InvalidInputError("nothing to save")
    H, W = samples[0].image.intensities.shape
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    os.makedirs(os.path.join(root, "masks"), exist_ok=True)
    for s in samples:
        quantized = np.rint(np.clip(s.image.intensities, 0.0, 1.0) * 255).astype(np.uint8)
        write_pgm(os.path.join(root, "images", f"{s.id}.pgm"), quantized)
        if s.mask is not None:
            write_pgm(os.path.join(root, "masks", f"{s.id}.pgm"), s.mask.classes)
    if any(s.annotation is not None for s in samples):
        write_annotations(root, samples)
    manifest = {
        "K": num_classes, "H": H, "W": W,
        "train": [s.id for s in train], "test": [s.id for s in test],
    }
    with open(os.path.join(root, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_manifest(root) -> dict:
    path = os.path.join(root, "manifest.json")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise IngestError(f"{path}: cannot read ({exc})") from exc
    except json.JSONDecodeError as exc:
        raise IngestError(f"{path}: invalid JSON ({exc})") from exc
    for key in ("K", "H", "W", "train", "test"):
        if key not in manifest:
            raise IngestError(f"{path}: manifest missing key {key!r}")
    return manifest


def _load_sample(root, sample_id, manifest, annotations):
    K, H, W = manifest["K"], manifest["H"], manifest["W"]
    image_path = os.path.join(root, "images", f"{sample_id}.pgm")
    values, maxval = read_pgm(image_path)
    if values.shape != (H, W):
        raise IngestError(f"{image_path}: shape {values.shape} does not match manifest {H}x{W}")
    image = Image(values.astype(np.float64) / maxval)

    mask = None
    mask_path = os.path.join(root, "masks", f"{sample_id}.pgm")
    if os.path.exists(mask_path):
        mask_values, _ = read_pgm(mask_path)
        if mask_values.shape != (H, W):
            raise IngestError(f"{mask_path}: shape differs from image shape")
        if mask_values.size and mask_values.max() >= K:
            raise IngestError(f"{mask_path}: mask id {int(mask_values.max())} >= K={K}")
        mask = LabelMask(mask_values, K)

    annotation = None
    if sample_id in annotations:
        points = tuple(
            (int(p["row"]), int(p["col"]), int(p["class"])) for p in annotations[sample_id]
        )
        annotation = PointAnnotation(points, K)
    try:
        return Sample(sample_id, image, mask, annotation)
    except InvalidInputError as exc:
        raise IngestError(f"{root}: sample {sample_id!r} inconsistent ({exc})") from exc


def _load_annotations(root) -> dict:
    path = os.path.join(root, "annotations.json")
    if not os.path.exists(path):
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise IngestError(f"{path}: cannot parse ({exc})") from exc


def load_split(root, split: str) -> list:
    """Load one manifest split ("train" or "test") in manifest order."""
    manifest = load_manifest(root)
    if split not in ("train", "test"):
        raise InvalidInputError(f"unknown split {split!r}")
    annotations = _load_annotations(root)
    return [_load_sample(root, sid, manifest, annotations) for sid in manifest[split]]


def load_dataset(root) -> list:
    """Load every sample in the dataset, train split then test split.

    A directory without any dataset files yields an empty list; a partially
    populated one raises an ingest error naming the offending file.
    """
    if not os.path.exists(os.path.join(root, "manifest.json")):
        if os.path.isdir(os.path.join(root, "images")):
            raise IngestError(f"{os.path.join(root, 'manifest.json')}: missing manifest")
        return []
    return load_split(root, "train") + load_split(root, "test")


def generate_annotations(samples, seed: int) -> list:
    """One uniformly drawn pixel per class present in each sample's mask.

    The draw stream is keyed by (seed, sample id), so adding or reordering
    samples cannot change any other sample's points.
    """
    annotated = []
    for s in samples:
        if s.mask is None:
            raise InvalidInputError(f"sample {s.id}: cannot annotate without a mask")
        rng = keyed_rng(seed, "annotate", s.id)
        points = []
        for k in sorted(int(v) for v in np.unique(s.mask.classes)):
            region = np.argwhere(s.mask.classes == k)
            row, col = region[int(rng.integers(len(region)))]
            points.append((int(row), int(col), k))
        ann = PointAnnotation(tuple(points), s.mask.num_classes)
        annotated.append(replace(s, annotation=ann))
    return annotated


def augment(sample: Sample, seed: int, iteration: int) -> Sample:
    """Random horizontal flip (p = 0.5) then r quarter-turn rotations.

    Image, mask, and annotation transform together, keyed by
    (seed, sample id, iteration). Odd quarter turns swap height and width, so
    they are only drawn for square grids; non-square grids use r in {0, 2}.
    """
    if sample.annotation is None:
        raise InvalidInputError(f"sample {sample.id}: augment needs an annotation")
    rng = keyed_rng(seed, "augment", sample.id, iteration)
    flip = bool(rng.random() < 0.5)
    H, W = sample.image.intensities.shape
    turns = (0, 1, 2, 3) if H == W else (0, 2)
    r = int(turns[int(rng.integers(len(turns)))])

    img = sample.image.intensities
    mask = None if sample.mask is None else sample.mask.classes
    points = list(sample.annotation.points)
    if flip:
        img = img[:, ::-1]
        mask = None if mask is None else mask[:, ::-1]
        points = [(pr, W - 1 - pc, k) for pr, pc, k in points]
    for _ in range(r):
        width_now = img.shape[1]
        img = np.rot90(img)  # counter-clockwise: (row, col) -> (W-1-col, row)
        mask = None if mask is None else np.rot90(mask)
        points = [(width_now - 1 - pc, pr, k) for pr, pc, k in points]

    return Sample(
        sample.id,
        Image(np.ascontiguousarray(img)),
        None if mask is None else LabelMask(np.ascontiguousarray(mask), sample.mask.num_classes),
        PointAnnotation(tuple(points), sample.annotation.num_classes),
    )


def _nearest_index(length_out: int, length_in: int) -> np.ndarray:
    centers = (np.arange(length_out) + 0.5) * length_in / length_out - 0.5
    return np.clip(np.round(centers).astype(int), 0, length_in - 1)


def resize_sample(sample: Sample, height: int, width: int) -> Sample:
    """Resize a sample: bilinear for the image, nearest-neighbor for the mask.

    Annotated points map to the pixel covering their location; if rounding
    lands a point on a different class, the nearest pixel of its class in
    the resized mask is used instead.
    """
    if height < 1 or width < 1:
        raise InvalidInputError(f"bad resize target {height}x{width}")
    src = sample.image.intensities
    H, W = src.shape
    ys = np.clip((np.arange(height) + 0.5) * H / height - 0.5, 0, H - 1)
    xs = np.clip((np.arange(width) + 0.5) * W / width - 0.5, 0, W - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    img = (
        src[np.ix_(y0, x0)] * (1 - wy) * (1 - wx)
        + src[np.ix_(y1, x0)] * wy * (1 - wx)
        + src[np.ix_(y0, x1)] * (1 - wy) * wx
        + src[np.ix_(y1, x1)] * wy * wx
    )

    mask = None
    if sample.mask is not None:
        rows = _nearest_index(height, H)
        cols = _nearest_index(width, W)
        mask = LabelMask(sample.mask.classes[np.ix_(rows, cols)], sample.mask.num_classes)

    annotation = None
    if sample.annotation is not None:
        points = []
        for r, c, k in sample.annotation.points:
            rr = int(np.clip(round((r + 0.5) * height / H - 0.5), 0, height - 1))
            cc = int(np.clip(round((c + 0.5) * width / W - 0.5), 0, width - 1))
            if mask is not None and int(mask.classes[rr, cc]) != k:
                region = np.argwhere(mask.classes == k)
                if len(region) == 0:
                    raise InvalidInputError(
                        f"sample {sample.id}: class {k} vanished in resize"
                    )
                nearest = region[np.argmin(((region - (rr, cc)) ** 2).sum(axis=1))]
                rr, cc = int(nearest[0]), int(nearest[1])
            points.append((rr, cc, k))
        annotation = PointAnnotation(tuple(points), sample.annotation.num_classes)

    return Sample(sample.id, Image(img), mask, annotation)


def synth_generate(spec: SynthSpec):
    """Build the synthetic dataset; returns (train samples, test samples, manifest).

    Background is painted at the class-0 mean; each foreground class adds one
    filled axis-aligned ellipse at its anchor plus per-image jitter, later
    classes overwriting earlier ones. Gaussian noise is added, clipped to
    [0, 1], and quantized to 255 levels so files round-trip exactly.
    """
    K, H, W = spec.num_classes, spec.height, spec.width
    scale = min(H, W)
    radius_rng = keyed_rng(spec.seed, "synth", "radii")
    axes = {
        k: radius_rng.uniform(spec.radius_range[0], spec.radius_range[1], size=2) * scale
        for k in range(1, K)
    }
    rows = np.arange(H)[:, None]
    cols = np.arange(W)[None, :]

    def build(split: str, index: int) -> Sample:
        rng = keyed_rng(spec.seed, "synth", split, index)
        img = np.full((H, W), float(spec.intensity_means[0]))
        mask = np.zeros((H, W), dtype=np.int64)
        for k in range(1, K):
            ar, ac = spec.anchors[k - 1]
            jr, jc = rng.uniform(-spec.jitter, spec.jitter, size=2) * scale
            cy, cx = ar * (H - 1) + jr, ac * (W - 1) + jc
            ay, ax = axes[k]
            inside = ((rows - cy) / ay) ** 2 + ((cols - cx) / ax) ** 2 <= 1.0
            img[inside] = spec.intensity_means[k]
            mask[inside] = k
        if spec.noise_sigma > 0:
            img = img + rng.normal(0.0, spec.noise_sigma, size=(H, W))
        img = np.rint(np.clip(img, 0.0, 1.0) * 255) / 255.0
        return Sample(f"{split}{index:03d}", Image(img), LabelMask(mask, K))

    train = [build("train", i) for i in range(spec.train_count)]
    test = [build("test", i) for i in range(spec.test_count)]
    manifest = {
        "K": K, "H": H, "W": W,
        "train": [s.id for s in train], "test": [s.id for s in test],
    }
    return train, test, manifest
