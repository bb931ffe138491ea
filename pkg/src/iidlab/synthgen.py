"""Procedural Lambertian scene generator with dense ground truth.

Scenes are Voronoi partitions with constant per-region reflectance, lit by
a smooth positive shading field that may be crossed by a multiplicative
cast-shadow band. Everything is a pure function of (seed, index), so
datasets regenerate byte-identically.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import IoFailure
from .imagecore import (
    GrayImage,
    ImageRGB,
    IntrinsicSample,
    SegClass,
    SegmentMap,
    save_pfm,
    save_png,
    save_segments,
)

MANIFEST_NAME = "manifest.json"


@dataclass
class SynthConfig:
    size: int = 64
    n_regions: int = 8
    shading_smoothness: float = 12.0
    shadow_prob: float = 0.5
    shadow_attenuation: float = 0.4
    wall_ceiling_prob: float = 0.3
    seed: int = 0
    flat_shading: bool = False  # force S == 1 (smoothness -> infinity limit)

    def __post_init__(self):
        if self.size < 32:
            raise ValueError("SynthConfig: size must be >= 32")
        if self.n_regions < 2:
            raise ValueError("SynthConfig: n_regions must be >= 2")
        for name in ("shadow_prob", "wall_ceiling_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"SynthConfig: {name} must be in [0, 1]")
        if not 0.0 < self.shadow_attenuation <= 1.0:
            raise ValueError("SynthConfig: shadow_attenuation must be in (0, 1]")
        if self.shading_smoothness <= 0:
            raise ValueError("SynthConfig: shading_smoothness must be > 0")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("SynthConfig: seed must fit in 64 bits")


def _voronoi_labels(rng: np.random.Generator, size: int, n_regions: int) -> np.ndarray:
    sites = rng.uniform(0.0, size, size=(n_regions, 2))
    ys, xs = np.mgrid[0:size, 0:size]
    d2 = (ys[..., None] - sites[:, 0]) ** 2 + (xs[..., None] - sites[:, 1]) ** 2
    return np.argmin(d2, axis=2)


def _relabel_first_seen(labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Contiguous labels in scan order; returns (new_labels, old_for_new)."""
    flat = labels.ravel()
    uniq, first_pos = np.unique(flat, return_index=True)
    order = uniq[np.argsort(first_pos)]
    remap = np.zeros(int(flat.max()) + 1, dtype=np.int64)
    remap[order] = np.arange(len(order))
    return remap[labels].astype(np.int32), order


def _shading_field(rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    noise = rng.standard_normal((cfg.size, cfg.size))
    smooth = ndimage.gaussian_filter(noise, sigma=cfg.shading_smoothness, mode="reflect")
    lo, hi = smooth.min(), smooth.max()
    if hi - lo < 1e-12:
        return np.full((cfg.size, cfg.size), 0.6, dtype=np.float64)
    return 0.2 + 0.8 * (smooth - lo) / (hi - lo)


def _shadow_band(rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    """Half-plane attenuation with a 2-pixel linear penumbra."""
    theta = rng.uniform(0.0, 2.0 * np.pi)
    center = rng.uniform(0.25 * cfg.size, 0.75 * cfg.size, size=2)
    ys, xs = np.mgrid[0:cfg.size, 0:cfg.size]
    signed = (xs - center[1]) * np.cos(theta) + (ys - center[0]) * np.sin(theta)
    t = np.clip(signed / 2.0 + 0.5, 0.0, 1.0)
    return cfg.shadow_attenuation + (1.0 - cfg.shadow_attenuation) * t


def sample_scene(cfg: SynthConfig, index: int) -> IntrinsicSample:
    """Deterministic sample for (cfg.seed, index); image == R*S exactly."""
    rng = np.random.default_rng([cfg.seed, int(index)])

    raw_labels = _voronoi_labels(rng, cfg.size, cfg.n_regions)
    colors = rng.uniform(0.1, 0.9, size=(cfg.n_regions, 3))
    class_roll = rng.random(cfg.n_regions)
    wall_or_ceiling = rng.integers(0, 2, size=cfg.n_regions)

    labels, old_for_new = _relabel_first_seen(raw_labels)
    classes: dict[int, SegClass] = {}
    for new, old in enumerate(old_for_new):
        if class_roll[old] < cfg.wall_ceiling_prob:
            classes[new] = SegClass.WALL if wall_or_ceiling[old] == 0 else SegClass.CEILING
        else:
            classes[new] = SegClass.OTHER

    reflectance = colors[old_for_new][labels].astype(np.float32)

    if cfg.flat_shading:
        shading = np.ones((cfg.size, cfg.size), dtype=np.float32)
    else:
        field = _shading_field(rng, cfg)
        if rng.random() < cfg.shadow_prob:
            field = field * _shadow_band(rng, cfg)
        shading = field.astype(np.float32)

    image = np.clip(reflectance * shading[:, :, None], 0.0, 1.0).astype(np.float32)
    return IntrinsicSample(
        image=ImageRGB(image),
        reflectance=ImageRGB(reflectance),
        shading=GrayImage(shading),
        segments=SegmentMap(labels=labels, classes=classes),
    )


def split_for_index(index: int, count: int) -> str:
    """80/10/10 split by index, floor-based: first floor(.8n) train, next floor(.1n) val."""
    n_train = int(np.floor(0.8 * count))
    n_val = int(np.floor(0.1 * count))
    if index < n_train:
        return "train"
    if index < n_train + n_val:
        return "val"
    return "test"


def generate_dataset(cfg: SynthConfig, count: int, out_dir) -> dict:
    """Write `count` samples plus a manifest; returns the manifest dict.

    Per sample: 8-bit image PNG, float PFM reflectance and shading, 16-bit
    segment PNG with its JSON sidecar. Paths in the manifest are relative
    to `out_dir`.
    """
    if count < 0:
        raise ValueError("generate_dataset: count must be >= 0")
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {out_dir}: {exc}") from exc

    samples = []
    for index in range(count):
        sample = sample_scene(cfg, index)
        stem = f"sample_{index:05d}"
        rel = {
            "image": f"images/{stem}.png",
            "reflectance": f"gt/{stem}.refl.pfm",
            "shading": f"gt/{stem}.shad.pfm",
            "segments": f"segments/{stem}.png",
        }
        save_png(sample.image, out_dir / rel["image"])
        save_pfm(sample.reflectance, out_dir / rel["reflectance"])
        save_pfm(sample.shading, out_dir / rel["shading"])
        save_segments(sample.segments, out_dir / rel["segments"])
        samples.append({**rel, "split": split_for_index(index, count)})

    manifest = {"config": asdict(cfg), "samples": samples}
    try:
        with open(out_dir / MANIFEST_NAME, "w", encoding="ascii") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise IoFailure(f"cannot write manifest: {exc}") from exc
    return manifest


def load_manifest(path) -> tuple[dict, Path]:
    """Read a manifest and return (manifest, base_dir for relative paths)."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.is_file():
        from .errors import MissingFile

        raise MissingFile(f"no such manifest: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    return manifest, path.parent
