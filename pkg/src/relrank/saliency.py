"""Saliency of the pairwise posterior with respect to both input images.

The raw map is the channel-wise max (or sum) of |dp_ij/dpixel|, which is then
smoothed with a normalized, truncated Gaussian and can be overlaid on the
image as a warm heatmap.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .nn import RankModel, rank_score
from .ranking import posterior

__all__ = [
    "SmoothingConfig",
    "SaliencyMap",
    "gaussian_kernel",
    "gaussian_smooth",
    "raw_saliency",
    "saliency_pair",
    "heatmap_rgb",
    "export_heatmap",
    "write_map_csv",
    "mass_fraction",
]


@dataclass(frozen=True)
class SmoothingConfig:
    sigma: float = 2.0
    radius: int | None = None  # default ceil(3 * sigma)

    def __post_init__(self):
        if not self.sigma > 0:
            raise ContractError(f"sigma must be > 0, got {self.sigma}")
        if self.radius is not None and self.radius < 0:
            raise ContractError(f"radius must be >= 0, got {self.radius}")

    @property
    def truncation(self) -> int:
        return math.ceil(3 * self.sigma) if self.radius is None else self.radius


@dataclass
class SaliencyMap:
    values: np.ndarray  # (H, W), smoothed, >= 0
    raw: np.ndarray  # (H, W) before smoothing
    posterior: float


def gaussian_kernel(cfg: SmoothingConfig) -> np.ndarray:
    """1-D weights on [-radius, radius], normalized to sum to one."""
    r = cfg.truncation
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / cfg.sigma) ** 2)
    return k / k.sum()


def gaussian_smooth(m: np.ndarray, cfg: SmoothingConfig = SmoothingConfig()) -> np.ndarray:
    """Separable Gaussian blur of a 2-D map with mirror padding (edge pixel not repeated).

    When the radius exceeds the map, padding falls back to the edge-repeating
    mirror so any size works.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ContractError(f"expected a 2-D map, got shape {m.shape}")
    k = gaussian_kernel(cfg)
    r = len(k) // 2
    mode = "reflect" if r < min(m.shape) else "symmetric"
    p = np.pad(m, r, mode=mode) if r else m
    # rows then columns; each pass is a valid 1-D correlation (kernel is symmetric)
    tmp = sum(k[i] * p[:, i:i + m.shape[1]] for i in range(len(k)))
    return sum(k[i] * tmp[i:i + m.shape[0], :] for i in range(len(k)))


def _reduce(g: np.ndarray, channels: str) -> np.ndarray:
    a = np.abs(g)
    if channels == "max":
        return a.max(axis=0)
    if channels == "sum":
        return a.sum(axis=0)
    raise ContractError(f"channel reduction must be 'max' or 'sum', got {channels!r}")


def raw_saliency(model: RankModel, image_i, image_j) -> tuple[np.ndarray, np.ndarray, float]:
    """dp_ij/d(image) for both images, each (C, H, W), plus p_ij."""
    xi = Tensor(np.asarray(image_i, dtype=np.float64).copy(), requires_grad=True)
    xj = Tensor(np.asarray(image_j, dtype=np.float64).copy(), requires_grad=True)
    params = model.parameters()
    saved = [(p.requires_grad, p.grad) for p in params]
    for p in params:
        p.requires_grad = False  # only pixel gradients are needed
    try:
        p_ij = posterior(rank_score(model, xi), rank_score(model, xj))
        ad.backward(p_ij)
    finally:
        for p, (flag, grad) in zip(params, saved):
            p.requires_grad, p.grad = flag, grad
    gi = xi.grad if xi.grad is not None else np.zeros_like(xi.data)
    gj = xj.grad if xj.grad is not None else np.zeros_like(xj.data)
    return gi, gj, p_ij.item()


def saliency_pair(model: RankModel, image_i, image_j, smoothing: SmoothingConfig = SmoothingConfig(),
                  channels: str = "max") -> tuple[SaliencyMap, SaliencyMap]:
    gi, gj, p = raw_saliency(model, image_i, image_j)
    out = []
    for g in (gi, gj):
        raw = _reduce(g, channels)
        out.append(SaliencyMap(np.maximum(gaussian_smooth(raw, smoothing), 0.0), raw, p))
    return out[0], out[1]


def _warm(m: np.ndarray) -> np.ndarray:
    # black -> red -> yellow -> white
    return np.stack([np.clip(3 * m, 0, 1), np.clip(3 * m - 1, 0, 1), np.clip(3 * m - 2, 0, 1)], axis=-1)


def heatmap_rgb(m: np.ndarray, base: np.ndarray, alpha: float = 0.6) -> np.ndarray:
    """(H, W, 3) overlay in [0, 1]; the per-pixel blend weight is alpha * m / max(m)."""
    m = np.asarray(m, dtype=np.float64)
    base = np.asarray(base, dtype=np.float64)
    if base.ndim == 3:
        base = np.repeat(base[0][..., None], 3, axis=-1) if base.shape[0] == 1 else base.transpose(1, 2, 0)
    else:
        base = np.repeat(base[..., None], 3, axis=-1)
    if base.shape[:2] != m.shape:
        raise ContractError(f"map {m.shape} and base image {base.shape[:2]} differ in size")
    top = m.max() if m.size else 0.0
    norm = m / top if top > 0 else np.zeros_like(m)
    a = (alpha * norm)[..., None]
    return (1.0 - a) * base + a * _warm(norm)


def export_heatmap(m: np.ndarray, base: np.ndarray, path, alpha: float = 0.6, upscale: int = 1) -> None:
    rgb = heatmap_rgb(m, base, alpha)
    if upscale > 1:
        rgb = rgb.repeat(upscale, axis=0).repeat(upscale, axis=1)
    q = np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8)
    try:
        Image.fromarray(q, mode="RGB").save(Path(path), format="PNG")
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot write heatmap {path}: {exc}") from exc


def write_map_csv(m: np.ndarray, path) -> None:
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in np.asarray(m):
            w.writerow([repr(float(v)) for v in row])


def mass_fraction(m: np.ndarray, box: tuple[int, int, int, int]) -> float:
    """Share of the map's total mass inside (row0, row1, col0, col1), end-exclusive."""
    total = float(m.sum())
    if total <= 0:
        return 0.0
    r0, r1, c0, c1 = box
    return float(m[r0:r1, c0:c1].sum()) / total
