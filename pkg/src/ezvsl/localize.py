"""Audio-visual, object-guided and fused localization maps."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .tensor import NORM_EPS

SOURCES = ("AVL", "OGL_CLS", "OGL_L1", "FUSED")
DEFAULT_ALPHA = 0.4


@dataclass(frozen=True)
class LocalizationMap:
    grid: np.ndarray  # (H, W)
    source: str
    normalized: bool = False
    degenerate: bool = False

    @property
    def shape(self):
        return self.grid.shape


def _data(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def avl_map(a_hat, V_hat) -> LocalizationMap:
    """Cosine similarity between the audio vector (d,) and every cell of (d, H, W)."""
    a, v = _data(a_hat), _data(V_hat)
    an = a / max(np.sqrt(a @ a), NORM_EPS)
    vn = v / np.maximum(np.sqrt((v * v).sum(axis=0, keepdims=True)), NORM_EPS)
    return LocalizationMap(np.tensordot(an, vn, axes=(0, 0)), "AVL")


def ogl_cls_map(posteriors) -> LocalizationMap:
    """Max class posterior per cell; input (K, H, W)."""
    return LocalizationMap(_data(posteriors).max(axis=0), "OGL_CLS")


def ogl_l1_map(features) -> LocalizationMap:
    """L1 norm of the objectness features per cell; input (C, H, W)."""
    return LocalizationMap(np.abs(_data(features)).sum(axis=0), "OGL_L1")


def normalize_map(m: LocalizationMap) -> LocalizationMap:
    """Min-max rescale to [0, 1]. A constant map becomes all zeros and is flagged degenerate."""
    g = m.grid
    lo, hi = g.min(), g.max()
    if hi == lo:
        return replace(m, grid=np.zeros_like(g), normalized=True, degenerate=True)
    return replace(m, grid=(g - lo) / (hi - lo), normalized=True, degenerate=False)


def fuse(avl: LocalizationMap, obj: LocalizationMap, alpha: float = DEFAULT_ALPHA) -> LocalizationMap:
    """``alpha * avl + (1 - alpha) * obj`` on normalized maps; the result is not re-normalized."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    if avl.shape != obj.shape:
        raise ValueError(f"map shapes differ: {avl.shape} vs {obj.shape}")
    if not (avl.normalized and obj.normalized):
        raise ValueError("fuse expects normalized maps")
    grid = alpha * avl.grid + (1.0 - alpha) * obj.grid
    return LocalizationMap(grid, "FUSED", normalized=True, degenerate=avl.degenerate and obj.degenerate)


def _bilinear_weights(n_in: int, n_out: int):
    """Source indices and weights for align_corners=False resampling.

    Output pixel i samples source coordinate (i + 0.5) * n_in / n_out - 0.5,
    clamped to [0, n_in - 1].
    """
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def upsample_map(m: LocalizationMap, target_h: int, target_w: int) -> LocalizationMap:
    h, w = m.shape
    if target_h < h or target_w < w:
        raise ValueError(f"target {target_h}x{target_w} smaller than grid {h}x{w}")
    y0, y1, fy = _bilinear_weights(h, target_h)
    x0, x1, fx = _bilinear_weights(w, target_w)
    g = m.grid
    rows = g[y0] * (1.0 - fy)[:, None] + g[y1] * fy[:, None]
    out = rows[:, x0] * (1.0 - fx)[None, :] + rows[:, x1] * fx[None, :]
    return replace(m, grid=out)


def to_pgm(m: LocalizationMap) -> bytes:
    """8-bit binary PGM (P5) of a map, min-max scaled for display."""
    g = m.grid
    lo, hi = g.min(), g.max()
    scaled = np.zeros_like(g) if hi == lo else (g - lo) / (hi - lo)
    px = np.round(scaled * 255).astype(np.uint8)
    h, w = px.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + px.tobytes()
