"""Per-sample inference and evaluation: encode -> maps -> fuse -> upsample -> IoU."""

from __future__ import annotations

from typing import Dict, List, Optional

import numpy as np

from . import localize as L
from .metrics import MetricsReport, binarize, build_consensus, iou
from .models import AVModel, ObjectnessModel, encode_audio, encode_visual, objectness_forward
from .tensor import Tensor

MAP_SOURCES = ("avl", "ogl-l1", "ogl-cls", "fused", "fused-cls")


def sample_maps(
    model: Optional[AVModel], obj: Optional[ObjectnessModel], images: np.ndarray, specs: np.ndarray
) -> Dict[str, List[L.LocalizationMap]]:
    """Raw (un-normalized) AVL, OGL_L1 and OGL_CLS maps for a batch."""
    out: Dict[str, List[L.LocalizationMap]] = {"AVL": [], "OGL_L1": [], "OGL_CLS": []}
    if model is not None:
        V = encode_visual(model.visual, model.heads, Tensor(images)).data
        A = encode_audio(model.audio, model.heads, Tensor(specs)).data
        out["AVL"] = [L.avl_map(a, v) for a, v in zip(A, V)]
    if obj is not None:
        feats, post = objectness_forward(obj, Tensor(images))
        out["OGL_L1"] = [L.ogl_l1_map(f) for f in feats.data]
        out["OGL_CLS"] = [L.ogl_cls_map(p) for p in post.data]
    return out


def combine(maps: Dict[str, L.LocalizationMap], source: str, alpha: float) -> L.LocalizationMap:
    if source == "avl":
        return L.normalize_map(maps["AVL"])
    if source == "ogl-l1":
        return L.normalize_map(maps["OGL_L1"])
    if source == "ogl-cls":
        return L.normalize_map(maps["OGL_CLS"])
    if source in ("fused", "fused-cls"):
        obj = maps["OGL_L1" if source == "fused" else "OGL_CLS"]
        return L.fuse(L.normalize_map(maps["AVL"]), L.normalize_map(obj), alpha)
    raise ValueError(f"unknown map source {source!r}; expected one of {MAP_SOURCES}")


def ious_for_maps(final_maps, annotations, img_size: int, theta: float) -> List[float]:
    out = []
    for m, anns in zip(final_maps, annotations):
        up = L.upsample_map(m, img_size, img_size)
        out.append(iou(binarize(up, theta), build_consensus(anns, img_size)))
    return out


def evaluate_many(
    data,
    model: Optional[AVModel],
    obj: Optional[ObjectnessModel],
    settings,
    theta: float = 0.5,
    batch_size: int = 64,
) -> List[MetricsReport]:
    """Evaluate several (source, alpha) settings sharing one forward pass per batch."""
    img_size = data.images.shape[-1]
    ious = [[] for _ in settings]
    for s in range(0, len(data), batch_size):
        sl = slice(s, s + batch_size)
        raw = sample_maps(model, obj, data.images[sl], data.specs[sl])
        n = len(data.images[sl])
        per = [{k: v[i] for k, v in raw.items() if v} for i in range(n)]
        for j, (source, alpha) in enumerate(settings):
            final = [combine(p, source, alpha) for p in per]
            ious[j] += ious_for_maps(final, data.annotations[sl], img_size, theta)
    return [
        MetricsReport(list(data.ids), v, {"map_source": src, "alpha": a, "theta": theta})
        for v, (src, a) in zip(ious, settings)
    ]


def evaluate(data, model, obj, alpha: float = L.DEFAULT_ALPHA, source: str = "fused", theta: float = 0.5):
    return evaluate_many(data, model, obj, [(source, alpha)], theta)[0]


def random_map_baseline(data, grid: int, reps: int = 100, seed: int = 0, theta: float = 0.5):
    """CIoU@0.5 of uniform-random grid maps, repeated ``reps`` times. Returns (mean, sd, values)."""
    img_size = data.images.shape[-1]
    consensus = [build_consensus(a, img_size) for a in data.annotations]
    vals = []
    for r in range(reps):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 505, r]))
        ious = []
        for gt in consensus:
            m = L.normalize_map(L.LocalizationMap(rng.random((grid, grid)), "AVL"))
            up = L.upsample_map(m, img_size, img_size)
            ious.append(iou(binarize(up, theta), gt))
        vals.append(sum(v >= 0.5 for v in ious) / len(ious))
    vals = np.array(vals)
    return float(vals.mean()), float(vals.std(ddof=1)), vals


def oracle_ious(data, theta: float = 0.5) -> List[float]:
    """IoUs of a predictor whose map is exactly the consensus mask."""
    img_size = data.images.shape[-1]
    out = []
    for anns in data.annotations:
        gt = build_consensus(anns, img_size)
        m = L.LocalizationMap(gt.astype(np.float64), "AVL", normalized=True)
        out.append(iou(binarize(m, theta), gt))
    return out
