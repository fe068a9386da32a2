"""Multiple-instance contrastive objective and the audio-visual training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import tensor as T
from .models import AVModel, encode_audio, encode_visual
from .optim import Adam
from .tensor import Tensor

logger = logging.getLogger(__name__)

STRATEGIES = ("max_of_sim", "avg_of_sim", "sim_of_maxpool")


class NumericError(RuntimeError):
    """Non-finite loss or score; carries the last finite parameters when available."""

    def __init__(self, msg, last_good=None, curve=None):
        super().__init__(msg)
        self.last_good = last_good
        self.curve = curve


def _check_strategy(strategy: str) -> None:
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown matching strategy {strategy!r}; expected one of {STRATEGIES}")


def match_score(a_hat: Tensor, V: Tensor, strategy: str = "max_of_sim") -> Tensor:
    """Score one audio vector (d,) against one bag (d, H, W)."""
    _check_strategy(strategy)
    if V.ndim != 3 or a_hat.shape != (V.shape[0],):
        raise T.DimensionError(f"match_score: a_hat {a_hat.shape} vs bag {V.shape}")
    d, h, w = V.shape
    if strategy == "sim_of_maxpool":
        pooled, _ = T.spatial_max(V)
        return T.cosine_sim(a_hat, pooled)
    locs = T.transpose(T.reshape(V, (d, h * w)), (1, 0))  # (HW, d)
    sims = T.cosine_sim(locs, a_hat)
    if strategy == "max_of_sim":
        return T.amax(sims, axis=0)[0]
    return T.mean(sims)


def score_matrix(A: Tensor, V: Tensor, strategy: str = "max_of_sim") -> Tensor:
    """All-pairs scores ``s[i, k] = match_score(A[i], V[k])``.

    A is (B, d) audio, V is (B, d, H, W) bags.
    """
    _check_strategy(strategy)
    b, d = A.shape
    if V.ndim != 4 or V.shape[:2] != (b, d):
        raise T.DimensionError(f"score_matrix: audio {A.shape} vs bags {V.shape}")
    an = T.normalize(A, axis=1)
    if strategy == "sim_of_maxpool":
        pooled, _ = T.amax(T.reshape(V, (b, d, -1)), axis=2)
        return T.matmul(an, T.transpose(T.normalize(pooled, axis=1), (1, 0)))
    hw = V.shape[2] * V.shape[3]
    vn = T.normalize(T.reshape(V, (b, d, hw)), axis=1)
    flat = T.reshape(T.transpose(vn, (1, 0, 2)), (d, b * hw))
    sims = T.reshape(T.matmul(an, flat), (b, b, hw))
    if strategy == "max_of_sim":
        return T.amax(sims, axis=2)[0]
    return T.mean(sims, axis=2)


def _check_finite(s: Tensor) -> None:
    bad = ~np.isfinite(s.data)
    if bad.any():
        rows = sorted(set(np.nonzero(bad)[0].tolist()))
        raise NumericError(f"non-finite match scores at batch index {rows}")


def _nce_rows(s: Tensor, tau: float) -> Tensor:
    """Mean over rows of -log softmax(s[i] / tau)[i]."""
    logp = T.log_softmax(T.mul(s, 1.0 / tau), axis=1)
    b = s.shape[0]
    return T.mul(T.tsum(logp[np.arange(b), np.arange(b)]), -1.0 / b)


def micl_loss_a2v(A: Tensor, V: Tensor, tau: float = 0.07, strategy: str = "max_of_sim") -> Tensor:
    """Audio anchors, bags contrasted: row i of the score matrix."""
    if tau <= 0:
        raise ValueError("tau must be > 0")
    s = score_matrix(A, V, strategy)
    _check_finite(s)
    return _nce_rows(s, tau)


def micl_loss_v2a(A: Tensor, V: Tensor, tau: float = 0.07, strategy: str = "max_of_sim") -> Tensor:
    """Bag anchors, audios contrasted: ``s'[i, k] = match_score(A[k], V[i])``."""
    if tau <= 0:
        raise ValueError("tau must be > 0")
    s = score_matrix(A, V, strategy)
    _check_finite(s)
    return _nce_rows(T.transpose(s, (1, 0)), tau)


def micl_losses(A: Tensor, V: Tensor, tau: float = 0.07, strategy: str = "max_of_sim"):
    """(a2v, v2a, total) sharing one score matrix."""
    if tau <= 0:
        raise ValueError("tau must be > 0")
    s = score_matrix(A, V, strategy)
    _check_finite(s)
    a2v = _nce_rows(s, tau)
    v2a = _nce_rows(T.transpose(s, (1, 0)), tau)
    return a2v, v2a, T.add(a2v, v2a)


def micl_loss(A: Tensor, V: Tensor, tau: float = 0.07, strategy: str = "max_of_sim") -> Tensor:
    return micl_losses(A, V, tau, strategy)[2]


# -- training -----------------------------------------------------------------------------


@dataclass
class TrainConfig:
    tau: float = 0.07
    batch_size: int = 32
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epochs: int = 30
    matching_strategy: str = "max_of_sim"
    seed: int = 0
    permute_pairs: bool = False

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        _check_strategy(self.matching_strategy)
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


@dataclass
class EpochStats:
    epoch: int
    a2v: float
    v2a: float
    total: float


@dataclass
class TrainResult:
    model: AVModel
    curve: List[EpochStats] = field(default_factory=list)


def batch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([int(seed), 202, int(epoch)])).permutation(n)


def pair_permutation(seed: int, n: int) -> np.ndarray:
    """Fixed random shuffle of audio indices for the shuffled-pairs control."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), 303])).permutation(n)


def forward_batch(model: AVModel, images: np.ndarray, specs: np.ndarray):
    V = encode_visual(model.visual, model.heads, Tensor(images))
    A = encode_audio(model.audio, model.heads, Tensor(specs))
    return A, V


def train(config: TrainConfig, data, model: AVModel, log_every: int = 0) -> TrainResult:
    """Adam on the symmetric MICL loss; deterministic given ``config.seed``.

    ``data`` is an :class:`~ezvsl.data.ArrayDataset`. With
    ``config.permute_pairs`` the audio of sample i is replaced by that of a
    fixed random other sample (the shuffled-pairs control).
    """
    n = len(data)
    if n == 0:
        raise ValueError("empty training set")
    audio_idx = pair_permutation(config.seed, n) if config.permute_pairs else np.arange(n)
    opt = Adam(model.parameters(), config.lr, config.beta1, config.beta2)
    result = TrainResult(model)
    last_good = model.state_dict()
    for epoch in range(config.epochs):
        order = batch_order(config.seed, epoch, n)
        sums = np.zeros(3)
        count = 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            A, V = forward_batch(model, data.images[idx], data.specs[audio_idx[idx]])
            try:
                a2v, v2a, loss = micl_losses(A, V, config.tau, config.matching_strategy)
            except NumericError as e:
                raise NumericError(str(e), last_good, result.curve) from e
            if not math.isfinite(loss.item()):
                raise NumericError(f"loss diverged at epoch {epoch}", last_good, result.curve)
            opt.zero_grad()
            loss.backward()
            opt.step()
            k = len(idx)
            sums += k * np.array([a2v.item(), v2a.item(), loss.item()])
            count += k
        stats = EpochStats(epoch, *(sums / count))
        result.curve.append(stats)
        last_good = model.state_dict()
        if log_every and (epoch % log_every == 0 or epoch == config.epochs - 1):
            logger.info("epoch %d loss %.4f (a2v %.4f v2a %.4f)", epoch, stats.total, stats.a2v, stats.v2a)
    return result


def curve_csv(curve: List[EpochStats]) -> str:
    lines = ["epoch,mean_loss_a2v,mean_loss_v2a,mean_total\n"]
    for s in curve:
        lines.append(f"{s.epoch},{s.a2v:.10g},{s.v2a:.10g},{s.total:.10g}\n")
    return "".join(lines)


def mean_true_rank(model: AVModel, data, batch_size: int = 32, strategy: str = "max_of_sim") -> float:
    """Mean in-batch rank (0 = best) of each image's own audio among the batch's audios."""
    ranks = []
    for start in range(0, len(data), batch_size):
        idx = np.arange(start, min(start + batch_size, len(data)))
        if len(idx) < 2:
            continue
        A, V = forward_batch(model, data.images[idx], data.specs[idx])
        s = score_matrix(A, V, strategy).data  # s[k, i]: audio k vs bag i
        for i in range(len(idx)):
            col = s[:, i]
            ranks.append(int(np.sum(col > col[i])))
    return float(np.mean(ranks))
