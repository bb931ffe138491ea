"""Evaluation metrics: MSE, scale-invariant MSE, LMSE, DSSIM, WHDR.

All arithmetic here is plain float64 numpy, independent of the autodiff
path (the DSSIM twin must agree with the differentiable loss but shares no
code with it). Raster arguments are channels-last (H, W, 3) or (H, W).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    EmptyJudgments,
    ManifestEmpty,
    MissingFile,
    ShapeMismatch,
    WindowLargerThanImage,
    ZeroTotalWeight,
)
from .imagecore import ImageRGB, luminance


def _as_array(x) -> np.ndarray:
    if isinstance(x, ImageRGB):
        return x.data.astype(np.float64)
    data = getattr(x, "data", x)
    return np.asarray(data, dtype=np.float64)


def mse(pred, gt) -> float:
    p, g = _as_array(pred), _as_array(gt)
    if p.shape != g.shape:
        raise ShapeMismatch(f"mse: shapes {p.shape} vs {g.shape}")
    return float(((p - g) ** 2).mean())


def si_mse(pred, gt) -> float:
    """Scale-invariant MSE: min over alpha of mean((alpha*pred - gt)^2),
    with alpha = <pred,gt>/<pred,pred> and alpha = 0 for an all-zero pred."""
    p, g = _as_array(pred), _as_array(gt)
    if p.shape != g.shape:
        raise ShapeMismatch(f"si_mse: shapes {p.shape} vs {g.shape}")
    pp = float((p * p).sum())
    alpha = float((p * g).sum()) / pp if pp > 0 else 0.0
    return float(((alpha * p - g) ** 2).mean())


def _ssq_min_alpha(pred: np.ndarray, gt: np.ndarray) -> float:
    """min over alpha of ||alpha*pred - gt||^2 (sum, not mean)."""
    pp = float((pred * pred).sum())
    alpha = float((pred * gt).sum()) / pp if pp > 0 else 0.0
    return float(((alpha * pred - gt) ** 2).sum())


def lmse(pred, gt, window: int | None = None, stride: int | None = None) -> float:
    """Local scale-invariant MSE over half-overlapping square windows,
    normalized by the ground truth energy; channels scored independently
    and averaged."""
    p, g = _as_array(pred), _as_array(gt)
    if p.shape != g.shape:
        raise ShapeMismatch(f"lmse: shapes {p.shape} vs {g.shape}")
    if p.ndim == 2:
        p = p[:, :, None]
        g = g[:, :, None]
    h, w = p.shape[:2]
    k = window if window is not None else max(8, min(h, w) // 4)
    s = stride if stride is not None else max(1, k // 2)
    if k > min(h, w):
        raise WindowLargerThanImage(f"lmse: window {k} exceeds image {h}x{w}")

    scores = []
    for ch in range(p.shape[2]):
        num = 0.0
        den = 0.0
        for i in range(0, h - k + 1, s):
            for j in range(0, w - k + 1, s):
                pw = p[i:i + k, j:j + k, ch]
                gw = g[i:i + k, j:j + k, ch]
                num += _ssq_min_alpha(pw, gw)
                den += float((gw * gw).sum())
        scores.append(num / den if den > 0 else 0.0)
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# DSSIM (evaluation twin of losses.dssim_loss)

_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03


def _ssim_window() -> np.ndarray:
    offsets = np.arange(_SSIM_WINDOW, dtype=np.float64) - (_SSIM_WINDOW - 1) / 2.0
    g = np.exp(-(offsets ** 2) / (2.0 * _SSIM_SIGMA ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _windowed_mean(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    patches = sliding_window_view(img, win.shape)
    return np.einsum("hwij,ij->hw", patches, win, optimize=True)


def dssim_metric(pred, gt, dynamic_range: float = 1.0) -> float:
    """(1 - SSIM)/2 with an 11x11 Gaussian window over valid positions."""
    p, g = _as_array(pred), _as_array(gt)
    if p.shape != g.shape:
        raise ShapeMismatch(f"dssim: shapes {p.shape} vs {g.shape}")
    if p.ndim == 2:
        p = p[:, :, None]
        g = g[:, :, None]
    h, w = p.shape[:2]
    if h < _SSIM_WINDOW or w < _SSIM_WINDOW:
        raise ShapeMismatch(f"dssim: image {h}x{w} smaller than window")
    win = _ssim_window()
    c1 = (_SSIM_K1 * dynamic_range) ** 2
    c2 = (_SSIM_K2 * dynamic_range) ** 2

    acc = 0.0
    count = 0
    for ch in range(p.shape[2]):
        x = p[:, :, ch]
        y = g[:, :, ch]
        mu_x = _windowed_mean(x, win)
        mu_y = _windowed_mean(y, win)
        mu_xy = mu_x * mu_y
        mu_xx = mu_x * mu_x
        mu_yy = mu_y * mu_y
        sig_xy = _windowed_mean(x * y, win) - mu_xy
        sig_xx = _windowed_mean(x * x, win) - mu_xx
        sig_yy = _windowed_mean(y * y, win) - mu_yy
        num = (2.0 * mu_xy + c1) * (2.0 * sig_xy + c2)
        den = (mu_xx + mu_yy + c1) * (sig_xx + sig_yy + c2)
        ssim_map = num / den
        acc += float((1.0 - ssim_map).sum())
        count += ssim_map.size
    return 0.5 * acc / count


# ---------------------------------------------------------------------------
# WHDR


class Darker(Enum):
    POINT1 = "1"
    POINT2 = "2"
    EQUAL = "E"


@dataclass
class Judgment:
    point1: int  # flat pixel index (row-major)
    point2: int
    label: Darker
    weight: float


@dataclass
class JudgmentSet:
    judgments: list

    def __post_init__(self):
        for j in self.judgments:
            if not np.isfinite(j.weight) or j.weight < 0:
                raise ValueError(f"JudgmentSet: bad weight {j.weight}")


def load_judgments(path, width: int, height: int) -> JudgmentSet:
    """Read the IIW-style judgments JSON, converting (x, y) to flat indices."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"no such judgments file: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    out = []
    for item in doc.get("judgments", []):
        x1, y1, x2, y2 = (int(item[k]) for k in ("x1", "y1", "x2", "y2"))
        for name, (x, y) in (("1", (x1, y1)), ("2", (x2, y2))):
            if not (0 <= x < width and 0 <= y < height):
                raise ShapeMismatch(f"judgment point {name} ({x},{y}) out of bounds")
        out.append(Judgment(point1=y1 * width + x1, point2=y2 * width + x2,
                            label=Darker(str(item["darker"])),
                            weight=float(item["weight"])))
    return JudgmentSet(out)


def _patch_luminance(lum: np.ndarray, flat_index: int) -> float:
    h, w = lum.shape
    y, x = divmod(int(flat_index), w)
    if not (0 <= y < h and 0 <= x < w):
        raise ShapeMismatch(f"judgment index {flat_index} out of bounds for {h}x{w}")
    patch = lum[max(0, y - 1):min(h, y + 2), max(0, x - 1):min(w, x + 2)]
    return float(patch.mean())


def whdr(pred_reflectance, judgments: JudgmentSet, delta: float = 0.1) -> float:
    """Weighted fraction of pairwise darker/equal judgments the predicted
    reflectance contradicts. Point luminance is a 3x3 mean patch of the
    Rec.601 luminance; the relation comes from the luminance ratio against
    the 1+delta band."""
    if not judgments.judgments:
        raise EmptyJudgments("whdr: no judgments")
    lum = luminance(_as_array(pred_reflectance))
    if lum.ndim != 2:
        raise ShapeMismatch("whdr: reflectance must be (H, W, 3)")

    wrong = 0.0
    total = 0.0
    for j in judgments.judgments:
        l1 = _patch_luminance(lum, j.point1)
        l2 = _patch_luminance(lum, j.point2)
        ratio = l1 / max(l2, 1e-6)
        if ratio > 1.0 + delta:
            predicted = Darker.POINT2
        elif ratio < 1.0 / (1.0 + delta):
            predicted = Darker.POINT1
        else:
            predicted = Darker.EQUAL
        if predicted != j.label:
            wrong += j.weight
        total += j.weight
    if total <= 0:
        raise ZeroTotalWeight("whdr: judgment weights sum to zero")
    return wrong / total


# ---------------------------------------------------------------------------
# per-image reports and split evaluation


@dataclass
class MetricReport:
    mse_r: float
    si_mse_r: float
    lmse_r: float
    dssim_r: float
    mse_s: float
    si_mse_s: float
    lmse_s: float
    dssim_s: float
    whdr: float | None = field(default=None)

    def to_dict(self) -> dict:
        doc = {
            "mse_r": self.mse_r, "si_mse_r": self.si_mse_r,
            "lmse_r": self.lmse_r, "dssim_r": self.dssim_r,
            "mse_s": self.mse_s, "si_mse_s": self.si_mse_s,
            "lmse_s": self.lmse_s, "dssim_s": self.dssim_s,
        }
        if self.whdr is not None:
            doc["whdr"] = self.whdr
        return doc


_AGGREGATE_FIELDS = ("mse_r", "si_mse_r", "lmse_r", "dssim_r",
                     "mse_s", "si_mse_s", "lmse_s", "dssim_s")


def score_pair(pred_r: np.ndarray, pred_s: np.ndarray,
               gt_r: np.ndarray, gt_s: np.ndarray) -> MetricReport:
    """Full metric row for one image; inputs channels-last / 2-d gray."""
    return MetricReport(
        mse_r=mse(pred_r, gt_r), si_mse_r=si_mse(pred_r, gt_r),
        lmse_r=lmse(pred_r, gt_r), dssim_r=dssim_metric(pred_r, gt_r),
        mse_s=mse(pred_s, gt_s), si_mse_s=si_mse(pred_s, gt_s),
        lmse_s=lmse(pred_s, gt_s), dssim_s=dssim_metric(pred_s, gt_s),
    )


def evaluate(manifest_path, checkpoint_path=None, split: str = "test",
             bypass_gt: bool = False, out_path=None) -> dict:
    """Run eval-mode inference over a manifest split and aggregate metrics.

    With bypass_gt the ground truth itself is scored as the prediction
    (an oracle pass: all metrics must be zero). Returns the report dict;
    optionally writes it as JSON.
    """
    from . import signet
    from .imagecore import load_pfm, load_png, load_segments
    from .synthgen import load_manifest

    manifest, base = load_manifest(manifest_path)
    rows = [s for s in manifest["samples"] if split in ("all", s["split"])]
    if not rows:
        raise ManifestEmpty(f"no samples in split {split!r}")

    net = None
    if not bypass_gt:
        if checkpoint_path is None:
            raise ManifestEmpty("evaluate: need a checkpoint unless bypass_gt is set")
        net, _ = signet.net_from_checkpoint(checkpoint_path)

    per_image = []
    for row in rows:
        gt_r = load_pfm(base / row["reflectance"]).data.astype(np.float64)
        gt_s = load_pfm(base / row["shading"]).data.astype(np.float64)
        if bypass_gt:
            pred_r, pred_s = gt_r, gt_s
        else:
            image = load_png(base / row["image"])
            segments = load_segments(base / row["segments"])
            outputs = signet.predict(net, image, segments)
            pred_r = outputs.r_final.values[0].transpose(1, 2, 0).astype(np.float64)
            pred_s = outputs.s_final.values[0, 0].astype(np.float64)
        report = score_pair(pred_r, pred_s, gt_r, gt_s)
        per_image.append({"image": row["image"], **report.to_dict()})

    aggregate = {name: float(np.mean([r[name] for r in per_image]))
                 for name in _AGGREGATE_FIELDS}
    doc = {"split": split, "count": len(per_image),
           "aggregate": aggregate, "images": per_image}
    if out_path is not None:
        out_path = Path(out_path)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        with open(out_path, "w", encoding="ascii") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return doc
