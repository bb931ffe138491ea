"""Training objectives over the network's forward outputs.

All terms are built from autodiff ops, so one backward() through the
combined total reaches every parameter. The perceptual term is recorded in
the weights for report compatibility but fixed to zero (no pretrained
feature extractor in this artifact).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeMismatch
from .imagecore import SegClass, SegmentMap

DEFAULT_EPS = 1e-4


@dataclass
class LossWeights:
    lambda_e: float = 0.4
    lambda_i: float = 0.5
    lambda_p: float = 0.05  # recorded only; perceptual term is fixed to zero
    lambda_dssim: float = 0.4

    def __post_init__(self):
        for name in ("lambda_e", "lambda_i", "lambda_p", "lambda_dssim"):
            if getattr(self, name) < 0:
                raise ValueError(f"LossWeights: {name} must be >= 0")


@dataclass
class LossReport:
    l_e: float
    l_i: float
    l_f: float
    l_norm: float
    l_tv: float
    l_dssim: float
    total: float
    tensor: Tensor | None = field(default=None, repr=False, compare=False)


def _const_like(arr, ref: Tensor) -> Tensor:
    return ad.as_tensor(arr, dtype=ref.dtype)


# ---------------------------------------------------------------------------
# plain MSE groups


def edge_loss(edge_outputs: Sequence[Tensor], gt_pyramid: Sequence[np.ndarray]) -> Tensor:
    """Sum of per-scale MSEs between predicted and GT edge maps."""
    if len(edge_outputs) != len(gt_pyramid):
        raise ShapeMismatch("edge_loss: prediction/target count mismatch")
    total = None
    for pred, gt in zip(edge_outputs, gt_pyramid):
        term = ad.mse(pred, _const_like(gt, pred))
        total = term if total is None else ad.add(total, term)
    return total


def initial_loss(r_initial: Tensor, s_initial: Tensor, gt_r, gt_s) -> Tensor:
    return ad.add(ad.mse(r_initial, _const_like(gt_r, r_initial)),
                  ad.mse(s_initial, _const_like(gt_s, s_initial)))


def final_loss(r_final: Tensor, s_final: Tensor, gt_r, gt_s, image) -> Tensor:
    """Final-output MSEs plus the reconstruction term MSE(r*s, image)."""
    recon = ad.mse(ad.mul(r_final, s_final), _const_like(image, r_final))
    return ad.add(ad.add(ad.mse(r_final, _const_like(gt_r, r_final)),
                         ad.mse(s_final, _const_like(gt_s, s_final))),
                  recon)


# ---------------------------------------------------------------------------
# segment-based constraint losses


def _segment_stack(segmaps: Sequence[SegmentMap]):
    labels = np.stack([s.labels for s in segmaps])
    wallceil = np.stack([s.class_mask(SegClass.WALL, SegClass.CEILING) for s in segmaps])
    return labels, wallceil


def _norm_weight_map(labels: np.ndarray) -> np.ndarray:
    """Per-pixel weight 1/(N*3*|segment|); summing weighted squared diffs
    then gives sum-over-segments of per-segment MSE, averaged over batch."""
    n = labels.shape[0]
    weights = np.zeros(labels.shape, dtype=np.float64)
    for i in range(n):
        counts = np.bincount(labels[i].ravel())
        inv = np.zeros_like(counts, dtype=np.float64)
        nz = counts > 0
        inv[nz] = 1.0 / (n * 3.0 * counts[nz])
        weights[i] = inv[labels[i]]
    return weights[:, None, :, :]


def _nrgb_array(arr: np.ndarray, eps: float) -> np.ndarray:
    den = np.maximum(arr.sum(axis=1, keepdims=True), eps)
    return arr / den


def norm_invariance_loss(r_final: Tensor, image: np.ndarray,
                         segmaps: Sequence[SegmentMap], eps: float = DEFAULT_EPS) -> Tensor:
    """Chromaticity consistency: per segment, MSE between normalized RGB of
    the predicted reflectance and of the image, summed over segments."""
    if r_final.values.shape != image.shape:
        raise ShapeMismatch("norm_invariance_loss: prediction/image shape mismatch")
    labels, _ = _segment_stack(segmaps)
    if labels.shape[0] != r_final.values.shape[0]:
        raise ShapeMismatch("norm_invariance_loss: batch size mismatch")

    den = ad.clamp_min(ad.channel_sum(r_final), eps)
    nr_pred = ad.div(r_final, den)
    nr_image = _nrgb_array(np.asarray(image, dtype=np.float64), eps)
    diff = ad.sub(nr_pred, _const_like(nr_image, r_final))
    weights = _const_like(_norm_weight_map(labels), r_final)
    return ad.sum_all(ad.mul(ad.mul(diff, diff), weights))


def _tv_map(x: Tensor, mask_x: Tensor, mask_y: Tensor) -> Tensor:
    """Anisotropic per-pixel variation |dx| + |dy|, masked to same-class pairs."""
    dx = ad.mul(ad.abs_t(ad.forward_diff(x, "w")), mask_x)
    dy = ad.mul(ad.abs_t(ad.forward_diff(x, "h")), mask_y)
    return ad.add(dx, dy)


def _tv_map_array(arr: np.ndarray, mask_x: np.ndarray, mask_y: np.ndarray) -> np.ndarray:
    dx = np.zeros_like(arr)
    dx[:, :, :, :-1] = arr[:, :, :, 1:] - arr[:, :, :, :-1]
    dy = np.zeros_like(arr)
    dy[:, :, :-1, :] = arr[:, :, 1:, :] - arr[:, :, :-1, :]
    return np.abs(dx) * mask_x + np.abs(dy) * mask_y


def tv_loss(r_final: Tensor, gt_r: np.ndarray, segmaps: Sequence[SegmentMap]) -> Tensor:
    """MSE between the total variation of prediction and ground truth,
    restricted to wall/ceiling pixels. Zero when no such pixels exist."""
    if r_final.values.shape != np.asarray(gt_r).shape:
        raise ShapeMismatch("tv_loss: prediction/GT shape mismatch")
    _, wallceil = _segment_stack(segmaps)
    n = wallceil.shape[0]

    mask = wallceil.astype(np.float64)
    mask_x = np.zeros_like(mask)
    mask_x[:, :, :-1] = mask[:, :, :-1] * mask[:, :, 1:]
    mask_y = np.zeros_like(mask)
    mask_y[:, :-1, :] = mask[:, :-1, :] * mask[:, 1:, :]

    mx = _const_like(mask_x[:, None], r_final)
    my = _const_like(mask_y[:, None], r_final)
    tv_pred = _tv_map(r_final, mx, my)
    tv_gt = _tv_map_array(np.asarray(gt_r, dtype=np.float64), mask_x[:, None], mask_y[:, None])
    diff = ad.sub(tv_pred, _const_like(tv_gt, r_final))

    weights = np.zeros(mask.shape, dtype=np.float64)
    for i in range(n):
        total = mask[i].sum()
        if total > 0:
            weights[i] = mask[i] / (n * 3.0 * total)
    wmap = _const_like(weights[:, None], r_final)
    return ad.sum_all(ad.mul(ad.mul(diff, diff), wmap))


# ---------------------------------------------------------------------------
# structural dissimilarity


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    offsets = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(offsets ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _window_weight(channels: int, size: int, sigma: float, dtype) -> np.ndarray:
    """Depthwise window as a block-diagonal dense conv weight."""
    w = np.zeros((channels, channels, size, size), dtype=dtype)
    win = _gaussian_window(size, sigma).astype(dtype)
    for c in range(channels):
        w[c, c] = win
    return w


def ssim(x: Tensor, y: Tensor, window: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03, dynamic_range: float = 1.0) -> Tensor:
    """Mean SSIM over valid window positions, per channel then averaged."""
    if x.values.shape != y.values.shape:
        raise ShapeMismatch("ssim: shape mismatch")
    return _ssim_terms(x, y, window, sigma, k1, k2, dynamic_range, mean_ssim=True)


def dssim_loss(x: Tensor, y: Tensor, window: int = 11, sigma: float = 1.5,
               k1: float = 0.01, k2: float = 0.03, dynamic_range: float = 1.0) -> Tensor:
    """(1 - SSIM)/2, differentiable; exactly zero for identical inputs."""
    if x.values.shape != y.values.shape:
        raise ShapeMismatch("dssim_loss: shape mismatch")
    return _ssim_terms(x, y, window, sigma, k1, k2, dynamic_range, mean_ssim=False)


def _ssim_terms(x: Tensor, y: Tensor, window: int, sigma: float,
                k1: float, k2: float, dynamic_range: float, mean_ssim: bool) -> Tensor:
    n, c, h, w = x.values.shape
    if h < window or w < window:
        raise ShapeMismatch(f"ssim: image {h}x{w} smaller than {window}px window")
    weight = ad.as_tensor(_window_weight(c, window, sigma, x.values.dtype), dtype=x.values.dtype)
    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2

    mu_x = ad.conv2d(x, weight)
    mu_y = ad.conv2d(y, weight)
    mu_xy = ad.mul(mu_x, mu_y)
    mu_xx = ad.mul(mu_x, mu_x)
    mu_yy = ad.mul(mu_y, mu_y)
    sig_xy = ad.sub(ad.conv2d(ad.mul(x, y), weight), mu_xy)
    sig_xx = ad.sub(ad.conv2d(ad.mul(x, x), weight), mu_xx)
    sig_yy = ad.sub(ad.conv2d(ad.mul(y, y), weight), mu_yy)

    num = ad.mul(ad.add_scalar(ad.mul_scalar(mu_xy, 2.0), c1),
                 ad.add_scalar(ad.mul_scalar(sig_xy, 2.0), c2))
    den = ad.mul(ad.add_scalar(ad.add(mu_xx, mu_yy), c1),
                 ad.add_scalar(ad.add(sig_xx, sig_yy), c2))
    ssim_map = ad.div(num, den)
    size = ssim_map.values.size
    if mean_ssim:
        return ad.mul_scalar(ad.sum_all(ssim_map), 1.0 / size)
    # (1 - map) summed then scaled keeps the x == y case an exact zero
    one_minus = ad.add_scalar(ad.mul_scalar(ssim_map, -1.0), 1.0)
    return ad.mul_scalar(ad.sum_all(one_minus), 0.5 / size)


# ---------------------------------------------------------------------------
# combination


def total_loss(l_e, l_i, l_f, l_norm, l_tv, l_dssim,
               weights: LossWeights | None = None) -> LossReport:
    """Weighted combination; components may be Tensors or plain floats.

    total = lambda_e*l_e + lambda_i*l_i + l_f + l_norm + l_tv
            + lambda_dssim*l_dssim   (perceptual term fixed to zero)
    """
    w = weights or LossWeights()
    terms = [(l_e, w.lambda_e), (l_i, w.lambda_i), (l_f, 1.0),
             (l_norm, 1.0), (l_tv, 1.0), (l_dssim, w.lambda_dssim)]
    tensor = None
    const = 0.0
    for term, lam in terms:
        if isinstance(term, Tensor):
            scaled = ad.mul_scalar(term, lam)
            tensor = scaled if tensor is None else ad.add(tensor, scaled)
        else:
            const += lam * float(term)
    if tensor is not None and const != 0.0:
        tensor = ad.add_scalar(tensor, const)
    total = float(tensor.values) if tensor is not None else const

    def _val(t):
        return float(t.values) if isinstance(t, Tensor) else float(t)

    return LossReport(
        l_e=_val(l_e), l_i=_val(l_i), l_f=_val(l_f), l_norm=_val(l_norm),
        l_tv=_val(l_tv), l_dssim=_val(l_dssim), total=total, tensor=tensor,
    )
