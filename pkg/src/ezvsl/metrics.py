"""CIoU / AUC evaluation against box annotations."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .localize import LocalizationMap

AUC_THRESHOLDS = tuple(round(0.05 * i, 2) for i in range(1, 20))


class EmptyConsensusError(ValueError):
    pass


def binarize(m, theta: float = 0.5) -> np.ndarray:
    """Pixel-positive mask where the normalized map is >= ``theta``."""
    if not 0.0 < theta < 1.0:
        raise ValueError(f"theta must be in (0, 1), got {theta}")
    grid = m.grid if isinstance(m, LocalizationMap) else np.asarray(m)
    if isinstance(m, LocalizationMap) and m.degenerate:
        return np.zeros(grid.shape, dtype=bool)
    return grid >= theta


def box_mask(box, h: int, w: int) -> np.ndarray:
    x, y, bw, bh = (int(v) for v in box)
    m = np.zeros((h, w), dtype=bool)
    m[max(y, 0) : min(y + bh, h), max(x, 0) : min(x + bw, w)] = True
    return m


def build_consensus(boxes: Sequence, img_size) -> np.ndarray:
    """Majority-vote mask: positive where at least ceil(n/2) boxes cover the pixel."""
    if len(boxes) == 0:
        raise EmptyConsensusError("build_consensus needs at least one box")
    h, w = (img_size, img_size) if isinstance(img_size, int) else img_size
    votes = np.zeros((h, w), dtype=np.int64)
    for b in boxes:
        votes += box_mask(b, h, w)
    mask = votes >= math.ceil(len(boxes) / 2)
    if not mask.any():
        raise EmptyConsensusError("consensus mask is empty")
    return mask


def iou(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    if not gt.any():
        raise EmptyConsensusError("empty consensus mask")
    inter = int(np.count_nonzero(pred & gt))
    union = int(np.count_nonzero(pred | gt))
    return inter / union


def ciou_at(ious: Sequence[float], delta: float = 0.5) -> float:
    """Fraction of samples whose IoU is at least ``delta``."""
    if len(ious) == 0:
        raise ValueError("no samples")
    hits = sum(1 for v in ious if v >= delta)
    return hits / len(ious)


def auc(ious: Sequence[float]) -> float:
    """Mean success rate over the 19 thresholds 0.05, 0.10, ..., 0.95."""
    if len(ious) == 0:
        raise ValueError("no samples")
    return sum(ciou_at(ious, t) for t in AUC_THRESHOLDS) / len(AUC_THRESHOLDS)


@dataclass
class MetricsReport:
    ids: List[str]
    ious: List[float]
    config: Dict[str, object] = field(default_factory=dict)
    errors: List[Tuple[str, str]] = field(default_factory=list)
    config_hash: str = ""

    @property
    def n(self) -> int:
        return len(self.ious)

    @property
    def ciou(self) -> float:
        return ciou_at(self.ious, 0.5)

    @property
    def auc(self) -> float:
        return auc(self.ious)

    def to_csv(self) -> str:
        lines = ["sample_id,iou\n"]
        lines += [f"{i},{v:.10g}\n" for i, v in zip(self.ids, self.ious)]
        lines.append(f"ciou_0.5,{self.ciou:.10g}\n")
        lines.append(f"auc,{self.auc:.10g}\n")
        lines.append(f"n,{self.n}\n")
        lines.append(f"skipped,{len(self.errors)}\n")
        lines.append(f"config_hash,{self.config_hash}\n")
        return "".join(lines)

    def to_table(self) -> str:
        rows = [(k, str(v)) for k, v in self.config.items()]
        rows += [
            ("samples", str(self.n)),
            ("skipped", str(len(self.errors))),
            ("CIoU@0.5 (%)", f"{100 * self.ciou:.2f}"),
            ("AUC (%)", f"{100 * self.auc:.2f}"),
        ]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows) + "\n"
