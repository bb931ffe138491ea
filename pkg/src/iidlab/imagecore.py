"""Raster containers, segment maps, and bit-exact file I/O.

Conventions: rasters are float32 numpy arrays in row-major order, RGB
images shaped (H, W, 3) and gray rasters (H, W), nominal value range
[0, 1]. Lossy 8-bit PNG is used for images, lossless PFM for float
ground truths, 16-bit PNG plus a JSON sidecar for segment labels.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import (
    DecodeFailure,
    HeaderMismatch,
    IoFailure,
    LabelOverflow,
    MalformedSidecar,
    MissingFile,
    TruncatedPayload,
    UnsupportedBitDepth,
)

# Rec.601 luma weights, used for edge detection and WHDR point luminance.
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


class SegClass(Enum):
    WALL = "wall"
    CEILING = "ceiling"
    OTHER = "other"


def _validate_raster(data: np.ndarray, channels: int | None, what: str) -> np.ndarray:
    data = np.asarray(data, dtype=np.float32)
    expect_ndim = 2 if channels is None else 3
    if data.ndim != expect_ndim:
        raise ValueError(f"{what}: expected {expect_ndim}-d array, got shape {data.shape}")
    if channels is not None and data.shape[2] != channels:
        raise ValueError(f"{what}: expected {channels} channels, got {data.shape[2]}")
    if data.shape[0] < 1 or data.shape[1] < 1:
        raise ValueError(f"{what}: degenerate size {data.shape}")
    if not np.all(np.isfinite(data)):
        raise ValueError(f"{what}: contains NaN/Inf")
    return data


@dataclass
class ImageRGB:
    """Dense RGB raster, (H, W, 3) float32, nominal range [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        self.data = _validate_raster(self.data, 3, "ImageRGB")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass
class GrayImage:
    """Single-channel raster, (H, W) float32, non-negative."""

    data: np.ndarray

    def __post_init__(self):
        self.data = _validate_raster(self.data, None, "GrayImage")
        if np.any(self.data < 0):
            raise ValueError("GrayImage: negative values")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass
class SegmentMap:
    """Per-pixel integer labels plus a label -> semantic class table.

    Labels are contiguous 0..K-1 and every label has a class entry;
    constructors relabel/raise to keep that true.
    """

    labels: np.ndarray
    classes: dict[int, SegClass]

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise ValueError(f"SegmentMap: labels must be 2-d, got {labels.shape}")
        if labels.size == 0:
            raise ValueError("SegmentMap: empty label raster")
        if np.any(labels < 0):
            raise ValueError("SegmentMap: negative label")
        self.labels = labels.astype(np.int32)
        present = np.unique(self.labels)
        k = len(present)
        if present[0] != 0 or present[-1] != k - 1:
            raise ValueError("SegmentMap: labels are not contiguous 0..K-1")
        missing = [int(l) for l in present if int(l) not in self.classes]
        if missing:
            raise ValueError(f"SegmentMap: labels without class entry: {missing}")

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def n_segments(self) -> int:
        return int(self.labels.max()) + 1

    def class_mask(self, *wanted: SegClass) -> np.ndarray:
        """Boolean (H, W) mask of pixels whose segment class is in `wanted`."""
        lut = np.zeros(self.n_segments, dtype=bool)
        for label, cls in self.classes.items():
            if cls in wanted and label < self.n_segments:
                lut[label] = True
        return lut[self.labels]


@dataclass
class IntrinsicSample:
    """One scene: image, dense reflectance/shading ground truth, segments."""

    image: ImageRGB
    reflectance: ImageRGB
    shading: GrayImage
    segments: SegmentMap

    def __post_init__(self):
        shapes = {
            (self.image.height, self.image.width),
            (self.reflectance.height, self.reflectance.width),
            (self.shading.height, self.shading.width),
            (self.segments.height, self.segments.width),
        }
        if len(shapes) != 1:
            raise ValueError(f"IntrinsicSample: rasters disagree on size: {shapes}")


def luminance(rgb: np.ndarray) -> np.ndarray:
    """Rec.601 luminance of an (H, W, 3) array, same dtype rules as numpy."""
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    return LUMA_WEIGHTS[0] * r + LUMA_WEIGHTS[1] * g + LUMA_WEIGHTS[2] * b


# ---------------------------------------------------------------------------
# PNG


def load_png(path) -> ImageRGB:
    """Load an 8-bit RGB/RGBA PNG, mapping bytes v -> v/255. Alpha is dropped."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"no such file: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("I", "I;16", "I;16B", "I;16L"):
                raise UnsupportedBitDepth(f"{path}: 16-bit PNG where 8-bit RGB expected")
            if mode not in ("RGB", "RGBA"):
                raise UnsupportedBitDepth(f"{path}: mode {mode}, expected RGB or RGBA")
            arr = np.asarray(im, dtype=np.uint8)
    except UnidentifiedImageError as exc:
        raise DecodeFailure(f"{path}: not a decodable image") from exc
    except OSError as exc:
        raise DecodeFailure(f"{path}: {exc}") from exc
    rgb = arr[..., :3].astype(np.float32) / np.float32(255.0)
    return ImageRGB(rgb)


def save_png(img, path) -> None:
    """Write an 8-bit PNG; values are clamped to [0,1] and rounded half-up."""
    path = Path(path)
    data = img.data if isinstance(img, (ImageRGB, GrayImage)) else np.asarray(img)
    if not np.all(np.isfinite(data)):
        raise ValueError("save_png: non-finite values")
    clamped = np.clip(data.astype(np.float64), 0.0, 1.0)
    quantized = np.floor(clamped * 255.0 + 0.5).astype(np.uint8)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(quantized).save(path, format="PNG")  # uint8 -> L / RGB
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# PFM (lossless float storage; header "PF" color / "Pf" gray, negative scale
# means little-endian payload, scanlines stored bottom-up)


def save_pfm(img, path) -> None:
    path = Path(path)
    data = img.data if isinstance(img, (ImageRGB, GrayImage)) else np.asarray(img)
    data = np.asarray(data, dtype=np.float32)
    if data.ndim not in (2, 3) or (data.ndim == 3 and data.shape[2] != 3):
        raise ValueError(f"save_pfm: unsupported shape {data.shape}")
    magic = b"Pf" if data.ndim == 2 else b"PF"
    h, w = data.shape[0], data.shape[1]
    payload = np.ascontiguousarray(data[::-1], dtype="<f4").tobytes()
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(magic + b"\n")
            fh.write(f"{w} {h}\n".encode("ascii"))
            fh.write(b"-1.0\n")
            fh.write(payload)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def _read_pfm_token(fh) -> bytes:
    token = b""
    while True:
        ch = fh.read(1)
        if ch == b"":
            raise TruncatedPayload("PFM: header ended early")
        if ch.isspace():
            if token:
                return token
            continue
        token += ch


def load_pfm(path):
    """Load a PFM file; returns ImageRGB for "PF" and GrayImage for "Pf"."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"no such file: {path}")
    with open(path, "rb") as fh:
        magic = _read_pfm_token(fh)
        if magic not in (b"PF", b"Pf"):
            raise HeaderMismatch(f"{path}: bad PFM magic {magic!r}")
        try:
            w = int(_read_pfm_token(fh))
            h = int(_read_pfm_token(fh))
            scale = float(_read_pfm_token(fh))
        except ValueError as exc:
            raise HeaderMismatch(f"{path}: malformed PFM header") from exc
        if w < 1 or h < 1:
            raise HeaderMismatch(f"{path}: bad PFM dimensions {w}x{h}")
        channels = 3 if magic == b"PF" else 1
        count = w * h * channels
        raw = fh.read(count * 4)
    if len(raw) != count * 4:
        raise TruncatedPayload(f"{path}: expected {count * 4} payload bytes, got {len(raw)}")
    # the scale's sign encodes endianness; its magnitude is ignored
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(raw, dtype=dtype).astype(np.float32)
    if channels == 3:
        data = data.reshape(h, w, 3)[::-1].copy()
        return ImageRGB(data)
    data = data.reshape(h, w)[::-1].copy()
    return GrayImage(data)


# ---------------------------------------------------------------------------
# Segment maps: 16-bit grayscale PNG + JSON sidecar {label: class-name}


def segment_sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def save_segments(segmap: SegmentMap, path) -> None:
    path = Path(path)
    if segmap.n_segments > 65536:
        raise LabelOverflow(f"{segmap.n_segments} labels exceed 16-bit storage")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        arr = segmap.labels.astype("<u2")
        Image.fromarray(arr).save(path, format="PNG")  # uint16 -> mode I;16
        sidecar = {str(k): v.value for k, v in sorted(segmap.classes.items())}
        with open(segment_sidecar_path(path), "w", encoding="ascii") as fh:
            json.dump(sidecar, fh, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_segments(path) -> SegmentMap:
    """Load labels + sidecar; relabels to 0..K-1 in first-seen scan order.

    Labels absent from the sidecar default to OTHER.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"no such file: {path}")
    sidecar = segment_sidecar_path(path)
    if not sidecar.is_file():
        raise MissingFile(f"no sidecar JSON: {sidecar}")
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode not in ("I", "I;16", "I;16B", "I;16L", "L", "P"):
                raise DecodeFailure(f"{path}: mode {im.mode} is not a label raster")
            raw = np.asarray(im).astype(np.int64)
    except UnidentifiedImageError as exc:
        raise DecodeFailure(f"{path}: not a decodable image") from exc
    try:
        with open(sidecar, "r", encoding="utf-8") as fh:
            table = json.load(fh)
        if not isinstance(table, dict):
            raise MalformedSidecar(f"{sidecar}: expected a JSON object")
        class_by_old: dict[int, SegClass] = {}
        for key, name in table.items():
            old = int(key)
            class_by_old[old] = SegClass(str(name).lower())
    except (ValueError, KeyError) as exc:
        raise MalformedSidecar(f"{sidecar}: {exc}") from exc

    flat = raw.ravel()
    uniq, first_pos = np.unique(flat, return_index=True)
    order = uniq[np.argsort(first_pos)]  # first-seen order
    remap = np.zeros(int(flat.max()) + 1, dtype=np.int32)
    classes: dict[int, SegClass] = {}
    for new, old in enumerate(order):
        remap[int(old)] = new
        classes[new] = class_by_old.get(int(old), SegClass.OTHER)
    labels = remap[raw]
    return SegmentMap(labels=labels, classes=classes)
