"""Physics- and statistics-based priors computed from an image and segments.

Four signals feed the network: cross colour ratio maps (illumination
invariant reflectance-transition detectors), a per-segment mean reflectance
estimate, the shading estimate obtained by inverting the Lambertian model
against that reflectance, and normalized RGB chromaticity. A Canny edge
pyramid of the ground-truth reflectance provides the edge supervision
targets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DegenerateImage, ShapeMismatch
from .imagecore import GrayImage, ImageRGB, SegmentMap, luminance

DEFAULT_EPS = 1e-4


@dataclass
class CcrMaps:
    """Cross colour ratios per pixel and neighbor direction.

    Each map is (H, W, 2); slice 0 compares a pixel with its right
    neighbor, slice 1 with the one below. Border pixels replicate their
    edge neighbor, so the last column/row of each direction is 1.
    """

    m_rg: np.ndarray
    m_rb: np.ndarray
    m_gb: np.ndarray
    strength: GrayImage


@dataclass
class PriorBundle:
    """All per-image priors; edge_pyramid is present only on the GT side."""

    ccr: CcrMaps
    r_est: ImageRGB
    s_est: GrayImage
    nrgb: ImageRGB
    edge_pyramid: tuple[GrayImage, GrayImage, GrayImage] | None = None


def ccr_maps(img: ImageRGB, eps: float = DEFAULT_EPS) -> CcrMaps:
    """Cross colour ratios for right/down neighbors.

    For neighboring pixels p1, p2 the ratios are
        m_rg = R1*G2 / (R2*G1),  m_rb = R1*B2 / (R2*B1),  m_gb = G1*B2 / (G2*B1)
    with every channel clamped below at eps. A per-pixel uniform scaling of
    either pixel cancels, which is what makes the maps illumination free.
    """
    if eps <= 0:
        raise ValueError("ccr_maps: eps must be > 0")
    # float64 internally so the invariance property is limited only by the
    # float32 storage of the returned maps
    data = img.data.astype(np.float64)
    c = np.maximum(data, eps)
    right = np.concatenate([c[:, 1:], c[:, -1:]], axis=1)
    down = np.concatenate([c[1:], c[-1:]], axis=0)

    maps = {}
    for name, (a, b) in {"rg": (0, 1), "rb": (0, 2), "gb": (1, 2)}.items():
        ratios = np.empty(c.shape[:2] + (2,), dtype=np.float64)
        for d, neigh in enumerate((right, down)):
            ratios[:, :, d] = (c[:, :, a] * neigh[:, :, b]) / (neigh[:, :, a] * c[:, :, b])
        maps[name] = ratios
    strength = sum(np.abs(np.log(m)).sum(axis=2) for m in maps.values())
    return CcrMaps(
        m_rg=maps["rg"].astype(np.float32),
        m_rb=maps["rb"].astype(np.float32),
        m_gb=maps["gb"].astype(np.float32),
        strength=GrayImage(strength.astype(np.float32)),
    )


def mean_reflectance_estimate(img: ImageRGB, seg: SegmentMap) -> ImageRGB:
    """Spread each segment's channel mean over the segment."""
    if (seg.height, seg.width) != (img.height, img.width):
        raise ShapeMismatch("mean_reflectance_estimate: segment map does not cover image")
    labels = seg.labels.ravel()
    counts = np.bincount(labels, minlength=seg.n_segments).astype(np.float64)
    out = np.empty_like(img.data)
    for ch in range(3):
        sums = np.bincount(labels, weights=img.data[:, :, ch].ravel().astype(np.float64),
                           minlength=seg.n_segments)
        means = (sums / counts).astype(np.float32)
        out[:, :, ch] = means[seg.labels]
    return ImageRGB(out)


def inverse_shading_estimate(img: ImageRGB, r_est: ImageRGB, eps: float = DEFAULT_EPS) -> GrayImage:
    """Invert I = R*S against the mean-reflectance estimate, clamped to [0, 10]."""
    if eps <= 0:
        raise ValueError("inverse_shading_estimate: eps must be > 0")
    if img.data.shape != r_est.data.shape:
        raise ShapeMismatch("inverse_shading_estimate: shape mismatch")
    ratio = img.data / np.maximum(r_est.data, np.float32(eps))
    s = np.clip(ratio.mean(axis=2, dtype=np.float64), 0.0, 10.0)
    return GrayImage(s.astype(np.float32))


def normalized_rgb(img: ImageRGB, eps: float = DEFAULT_EPS) -> ImageRGB:
    """Per-pixel chromaticity c / max(R+G+B, eps)."""
    if eps <= 0:
        raise ValueError("normalized_rgb: eps must be > 0")
    total = np.maximum(img.data.sum(axis=2, keepdims=True), np.float32(eps))
    return ImageRGB(img.data / total)


def area_downsample2x(arr: np.ndarray) -> np.ndarray:
    """Average 2x2 blocks; trailing odd row/column is dropped."""
    h, w = arr.shape[0] // 2, arr.shape[1] // 2
    view = arr[: 2 * h, : 2 * w].reshape(h, 2, w, 2)
    return view.mean(axis=(1, 3), dtype=np.float64).astype(arr.dtype)


_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
_SOBEL_Y = np.array([[-1, -2, -1], [0, 0, 0], [1, 2, 1]], dtype=np.float64)


def _non_maximum_suppression(mag: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Keep pixels that are >= both neighbors along the gradient direction."""
    h, w = mag.shape
    padded = np.zeros((h + 2, w + 2), dtype=mag.dtype)
    padded[1:-1, 1:-1] = mag

    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    # sector 0: horizontal gradient (compare left/right), 1: diagonal /,
    # 2: vertical, 3: diagonal \
    sector = np.zeros(mag.shape, dtype=np.int8)
    sector[(angle >= 22.5) & (angle < 67.5)] = 1
    sector[(angle >= 67.5) & (angle < 112.5)] = 2
    sector[(angle >= 112.5) & (angle < 157.5)] = 3

    offsets = {0: ((0, 1), (0, -1)), 1: ((-1, 1), (1, -1)),
               2: ((1, 0), (-1, 0)), 3: ((1, 1), (-1, -1))}
    keep = np.zeros(mag.shape, dtype=bool)
    for s, ((dy1, dx1), (dy2, dx2)) in offsets.items():
        n1 = padded[1 + dy1: 1 + dy1 + h, 1 + dx1: 1 + dx1 + w]
        n2 = padded[1 + dy2: 1 + dy2 + h, 1 + dx2: 1 + dx2 + w]
        sel = sector == s
        keep[sel] = (mag[sel] >= n1[sel]) & (mag[sel] >= n2[sel])
    return np.where(keep & (mag > 0), mag, 0.0)


def canny_edges(img: ImageRGB, sigma: float = 1.4, lo: float = 0.1, hi: float = 0.2) -> GrayImage:
    """Binary Canny edge map of the image's luminance."""
    if sigma <= 0:
        raise ValueError("canny: sigma must be > 0")
    if not (0 <= lo < hi <= 1):
        raise ValueError("canny: need 0 <= lo < hi <= 1")
    if min(img.height, img.width) < 16:
        raise DegenerateImage(f"canny: image {img.height}x{img.width} below 16px minimum")

    lum = luminance(img.data.astype(np.float64))
    smooth = ndimage.gaussian_filter(lum, sigma=sigma, mode="nearest")
    gx = ndimage.convolve(smooth, _SOBEL_X, mode="nearest")
    gy = ndimage.convolve(smooth, _SOBEL_Y, mode="nearest")
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak <= 1e-12:  # constant input up to float residue
        return GrayImage(np.zeros(lum.shape, dtype=np.float32))
    norm = _non_maximum_suppression(mag, gx, gy) / peak

    strong = norm >= hi
    candidate = norm >= lo
    labels, _ = ndimage.label(candidate, structure=np.ones((3, 3), dtype=int))
    strong_labels = np.unique(labels[strong])
    strong_labels = strong_labels[strong_labels > 0]
    edges = np.isin(labels, strong_labels) & candidate
    return GrayImage(edges.astype(np.float32))


def canny_edge_pyramid(reflectance: ImageRGB, sigma: float = 1.4,
                       lo: float = 0.1, hi: float = 0.2):
    """Binary edge maps at full, 1/2 and 1/4 resolution.

    The downsampled levels are area-averaged and re-binarized at 0.25, so a
    single edge pixel inside a block keeps the block marked.
    """
    full = canny_edges(reflectance, sigma=sigma, lo=lo, hi=hi)
    half = (area_downsample2x(full.data) >= 0.25).astype(np.float32)
    quarter = (area_downsample2x(half) >= 0.25).astype(np.float32)
    return full, GrayImage(half), GrayImage(quarter)


def compute_bundle(img: ImageRGB, seg: SegmentMap, gt_reflectance: ImageRGB | None = None,
                   eps: float = DEFAULT_EPS) -> PriorBundle:
    """All priors for one image; the edge pyramid needs the GT reflectance."""
    r_est = mean_reflectance_estimate(img, seg)
    bundle = PriorBundle(
        ccr=ccr_maps(img, eps=eps),
        r_est=r_est,
        s_est=inverse_shading_estimate(img, r_est, eps=eps),
        nrgb=normalized_rgb(img, eps=eps),
        edge_pyramid=None if gt_reflectance is None else canny_edge_pyramid(gt_reflectance),
    )
    return bundle
