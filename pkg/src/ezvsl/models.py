"""Visual/audio encoders, shared-space projections and the objectness network."""

from __future__ import annotations

import logging
from collections import OrderedDict
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .optim import Adam
from .tensor import Tensor

logger = logging.getLogger(__name__)


class Module:
    """Holds named parameter tensors; subclasses register them in ``_params``."""

    def __init__(self):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()

    def param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True)
        self._params[name] = t
        return t

    def named_parameters(self, prefix: str = "") -> "OrderedDict[str, Tensor]":
        return OrderedDict((prefix + k, v) for k, v in self._params.items())

    def parameters(self) -> List[Tensor]:
        return list(self._params.values())

    def state_dict(self, prefix: str = "") -> Dict[str, np.ndarray]:
        return OrderedDict((prefix + k, v.data.copy()) for k, v in self._params.items())

    def load_state_dict(self, state, prefix: str = "") -> None:
        for k, t in self._params.items():
            arr = np.asarray(state[prefix + k], dtype=np.float64)
            if arr.shape != t.shape:
                raise T.DimensionError(f"{prefix + k}: expected {t.shape}, got {arr.shape}")
            t.data = arr.copy()

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None


def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class ConvStack(Module):
    """conv -> relu blocks, 3x3 kernels unless ``kernel`` says otherwise.

    No pooling: the output keeps its spatial grid.
    """

    def __init__(
        self,
        channels: Sequence[int],
        strides: Sequence,
        rng,
        kernel=(3, 3),
        padding=(1, 1),
    ):
        super().__init__()
        if len(strides) != len(channels) - 1:
            raise ValueError("need one stride per conv layer")
        self.strides = [T._pair(s) for s in strides]
        self.padding = T._pair(padding)
        kh, kw = T._pair(kernel)
        self.n_layers = len(strides)
        for i, (cin, cout) in enumerate(zip(channels[:-1], channels[1:]), start=1):
            self.param(f"conv{i}.weight", _he(rng, (cout, cin, kh, kw), cin * kh * kw))
            self.param(f"conv{i}.bias", np.zeros(cout))
        self.out_channels = channels[-1]

    def __call__(self, x: Tensor) -> Tensor:
        for i in range(1, self.n_layers + 1):
            x = T.conv2d(
                x,
                self._params[f"conv{i}.weight"],
                self._params[f"conv{i}.bias"],
                stride=self.strides[i - 1],
                padding=self.padding,
            )
            x = T.relu(x)
        return x


VISUAL_CHANNELS = (3, 16, 32, 64, 64)
VISUAL_STRIDES = (2, 2, 2, 1)


class VisualEncoder(ConvStack):
    """Image (N, 3, H, W) -> localized features (N, C_v, H/8, W/8)."""

    def __init__(self, rng, channels=VISUAL_CHANNELS, strides=VISUAL_STRIDES):
        super().__init__(channels, strides, rng)
        self.stride = int(np.prod([s[0] for s in self.strides]))


class AudioEncoder(Module):
    """Log-spectrogram (N, F, T) -> global feature (N, D_a).

    Frequency bands are the input channels of 1x3 temporal convolutions, so
    absolute frequency is preserved; global average pooling runs over time.
    """

    def __init__(self, rng, n_freq: int, channels=(64, 64, 64), strides=(2, 2, 2)):
        super().__init__()
        self.stack = ConvStack(
            (n_freq, *channels), [(1, s) for s in strides], rng, kernel=(1, 3), padding=(0, 1)
        )
        self._params = self.stack._params
        self.n_freq = n_freq
        self.out_dim = channels[-1]

    def feature_map(self, spec: Tensor) -> Tensor:
        if spec.ndim == 2:
            spec = T.reshape(spec, (1, *spec.shape))
        if spec.shape[1] != self.n_freq:
            raise T.DimensionError(f"spectrogram has {spec.shape[1]} bands, expected {self.n_freq}")
        n, f, t = spec.shape
        return self.stack(T.reshape(spec, (n, f, 1, t)))

    def __call__(self, spec: Tensor) -> Tensor:
        return T.spatial_avg(self.feature_map(spec))


class ProjectionHeads(Module):
    def __init__(self, rng, c_v: int, d_a: int, dim: int = 64):
        super().__init__()
        self.dim = dim
        self.U_v = self.param("U_v", rng.normal(0, 1 / np.sqrt(c_v), (dim, c_v)))
        self.b_v = self.param("b_v", np.zeros(dim))
        self.U_a = self.param("U_a", rng.normal(0, 1 / np.sqrt(d_a), (dim, d_a)))
        self.b_a = self.param("b_a", np.zeros(dim))

    def project_visual(self, feats: Tensor) -> Tensor:
        """(N, C, H, W) -> (N, d, H, W), the same affine map at every location."""
        x = T.transpose(feats, (0, 2, 3, 1))
        return T.transpose(T.linear(x, self.U_v, self.b_v), (0, 3, 1, 2))

    def project_audio(self, feats: Tensor) -> Tensor:
        return T.linear(feats, self.U_a, self.b_a)


class ObjectnessModel(Module):
    """Trunk with the visual-encoder architecture plus a per-location K-way classifier."""

    def __init__(self, rng, n_classes: int, channels=VISUAL_CHANNELS, strides=VISUAL_STRIDES):
        super().__init__()
        self.trunk = VisualEncoder(rng, channels, strides)
        self.n_classes = n_classes
        for k, v in self.trunk._params.items():
            self._params[k] = v
        c = channels[-1]
        self.param("head.weight", _he(rng, (n_classes, c, 1, 1), c) * 0.5)
        self.param("head.bias", np.zeros(n_classes))

    def logits(self, feats: Tensor) -> Tensor:
        return T.conv2d(feats, self._params["head.weight"], self._params["head.bias"])

    def __call__(self, images: Tensor) -> Tuple[Tensor, Tensor]:
        feats = self.trunk(images)
        return feats, T.softmax(self.logits(feats), axis=1)


class AVModel:
    """Bundle of the three trainable pieces of the audio-visual branch."""

    def __init__(self, visual: VisualEncoder, audio: AudioEncoder, heads: ProjectionHeads):
        self.visual = visual
        self.audio = audio
        self.heads = heads

    @classmethod
    def build(cls, seed: int, n_freq: int, dim: int = 64) -> "AVModel":
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 101]))
        visual = VisualEncoder(rng)
        audio = AudioEncoder(rng, n_freq)
        heads = ProjectionHeads(rng, visual.out_channels, audio.out_dim, dim)
        return cls(visual, audio, heads)

    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        out = OrderedDict()
        out.update(self.visual.named_parameters("visual."))
        out.update(self.audio.named_parameters("audio."))
        out.update(self.heads.named_parameters("proj."))
        return out

    def parameters(self) -> List[Tensor]:
        return list(self.named_parameters().values())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return OrderedDict((k, v.data.copy()) for k, v in self.named_parameters().items())

    def load_state_dict(self, state) -> None:
        self.visual.load_state_dict(state, "visual.")
        self.audio.load_state_dict(state, "audio.")
        self.heads.load_state_dict(state, "proj.")

    def init_visual_from(self, obj: ObjectnessModel) -> None:
        """Copy the objectness trunk into the visual encoder (values only, no sharing)."""
        self.visual.load_state_dict(obj.trunk.state_dict())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _as_batch(x, ndim: int) -> Tuple[Tensor, bool]:
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.ndim == ndim - 1:
        return T.reshape(t, (1, *t.shape)), True
    return t, False


def encode_visual(enc: VisualEncoder, heads: ProjectionHeads, image, img_size: Optional[int] = None):
    """Projected localized features: (3, H, W) -> (d, h, w), or batched (N, ...)."""
    x, single = _as_batch(image, 4)
    if x.shape[1] != 3 or (img_size is not None and x.shape[2:] != (img_size, img_size)):
        raise T.DimensionError(f"image shape {x.shape[1:]} does not match (3, {img_size}, {img_size})")
    out = heads.project_visual(enc(x))
    return T.reshape(out, out.shape[1:]) if single else out


def encode_audio(enc: AudioEncoder, heads: ProjectionHeads, spec):
    """Projected global audio vector: (F, T) -> (d,), or batched (N, F, T) -> (N, d)."""
    bins = spec.bins if hasattr(spec, "bins") else spec
    x, single = _as_batch(bins, 3)
    out = heads.project_audio(enc(x))
    return T.reshape(out, out.shape[1:]) if single else out


def objectness_forward(m: ObjectnessModel, image) -> Tuple[Tensor, Tensor]:
    """Trunk features (C, h, w) and per-location class posteriors (K, h, w)."""
    x, single = _as_batch(image, 4)
    feats, post = m(x)
    if single:
        return T.reshape(feats, feats.shape[1:]), T.reshape(post, post.shape[1:])
    return feats, post


def normalize_spectrogram(bins: np.ndarray) -> np.ndarray:
    """Per-clip standardisation of log magnitudes; the fixed input transform of f_a."""
    b = np.asarray(bins, dtype=np.float64)
    return (b - b.mean()) / (b.std() + 1e-8)


def cell_targets(labels: np.ndarray, n_classes: int, cell: int) -> np.ndarray:
    """Soft per-cell class targets from a pixel label map.

    Each cell's target mixes the class coverage fractions with a uniform
    share for the uncovered (background) fraction. Returns (K, h, w).
    """
    h, w = labels.shape[0] // cell, labels.shape[1] // cell
    blocks = labels[: h * cell, : w * cell].reshape(h, cell, w, cell).transpose(0, 2, 1, 3)
    blocks = blocks.reshape(h, w, cell * cell)
    frac = np.stack([(blocks == k).mean(axis=-1) for k in range(n_classes)])
    bg = 1.0 - frac.sum(axis=0)
    return frac + bg / n_classes


def covered_cells(labels: np.ndarray, cell: int, min_cover: float = 0.5):
    """(h, w) array of the dominant class per cell, -1 where no class covers ``min_cover``."""
    h, w = labels.shape[0] // cell, labels.shape[1] // cell
    blocks = labels[: h * cell, : w * cell].reshape(h, cell, w, cell).transpose(0, 2, 1, 3)
    blocks = blocks.reshape(h, w, cell * cell)
    out = np.full((h, w), -1, dtype=np.int64)
    for y in range(h):
        for x in range(w):
            vals, counts = np.unique(blocks[y, x][blocks[y, x] >= 0], return_counts=True)
            if len(vals) and counts.max() >= min_cover * cell * cell:
                out[y, x] = vals[np.argmax(counts)]
    return out


def _objectness_loss(m: ObjectnessModel, images: np.ndarray, targets: np.ndarray) -> Tensor:
    feats = m.trunk(Tensor(images))
    logp = T.log_softmax(m.logits(feats), axis=1)
    n, _, h, w = logp.shape
    return T.mul(T.tsum(T.mul(logp, Tensor(targets))), -1.0 / (n * h * w))


def location_accuracy(m: ObjectnessModel, images: np.ndarray, labels: np.ndarray, batch: int = 64):
    """Fraction of object-covered cells whose argmax posterior is the covering class."""
    hits = total = 0
    cell = m.trunk.stride
    for s in range(0, len(images), batch):
        _, post = m(Tensor(images[s : s + batch]))
        pred = post.data.argmax(axis=1)
        for p, lab in zip(pred, labels[s : s + batch]):
            cov = covered_cells(lab, cell)
            mask = cov >= 0
            hits += int((p[mask] == cov[mask]).sum())
            total += int(mask.sum())
    return hits / max(total, 1)


def pretrain_objectness(
    m: ObjectnessModel,
    data,
    epochs: int = 6,
    lr: float = 2e-3,
    batch_size: int = 32,
    seed: int = 0,
    heldout=None,
    shuffle_labels: bool = False,
) -> dict:
    """Per-location soft cross-entropy on shape classes; never sees audio.

    ``data`` needs ``images`` (N, 3, H, W) and ``labels`` (N, H, W). With
    ``shuffle_labels`` each image's class ids go through a random
    permutation (the chance-level control). Returns a small report dict.
    """
    n = len(data.images)
    if n == 0:
        raise ValueError("empty manifest")
    k, cell = m.n_classes, m.trunk.stride
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 404]))
    labels = data.labels
    if shuffle_labels:
        labels = labels.copy()
        for i in range(n):
            perm = rng.permutation(k)
            fg = labels[i] >= 0
            labels[i][fg] = perm[labels[i][fg]]
    targets = np.stack([cell_targets(lab, k, cell) for lab in labels])
    opt = Adam(m.parameters(), lr)
    probe = np.arange(min(n, 256))
    with_loss = lambda: _objectness_loss(m, data.images[probe], targets[probe]).item()  # noqa: E731
    report = {"initial_loss": with_loss(), "epoch_loss": []}
    for epoch in range(epochs):
        order = np.random.default_rng(np.random.SeedSequence([int(seed), 405, epoch])).permutation(n)
        tot = 0.0
        for s in range(0, n, batch_size):
            idx = order[s : s + batch_size]
            loss = _objectness_loss(m, data.images[idx], targets[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            tot += loss.item() * len(idx)
        report["epoch_loss"].append(tot / n)
        logger.info("objectness epoch %d loss %.4f", epoch, tot / n)
    report["final_loss"] = with_loss()
    if heldout is not None:
        report["heldout_accuracy"] = location_accuracy(m, heldout.images, heldout.labels)
    return report
