"""The shape-tone world: images of coloured glyphs where one glyph emits a tone.

Every class is a (glyph, colour, tone) triple. A sample renders one to three
non-overlapping shapes on a faintly textured background; one of them is the
sounding shape and the paired waveform is a sine at that class's tone.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .audio import Waveform, bin_frequency, tone

logger = logging.getLogger(__name__)

GLYPHS = ("circle", "square", "triangle", "cross", "diamond", "ring")

PALETTE = (
    (0.95, 0.20, 0.15),
    (0.15, 0.75, 0.20),
    (0.20, 0.35, 0.95),
    (0.95, 0.85, 0.10),
    (0.85, 0.20, 0.85),
    (0.10, 0.85, 0.85),
    (0.98, 0.55, 0.05),
    (0.95, 0.95, 0.95),
    (0.55, 0.30, 0.10),
    (0.50, 0.10, 0.60),
    (0.55, 0.80, 0.55),
    (0.60, 0.60, 0.20),
)

MAX_OVERLAP = 0.3
MAX_PLACEMENT_ATTEMPTS = 100
BACKGROUND_LEVEL = 0.12
BACKGROUND_TEXTURE = 0.06


@dataclass(frozen=True)
class ShapeClass:
    id: int
    glyph: str
    color: Tuple[float, float, float]
    tone_bin: int
    tone_frequency: float


def make_classes(k: int = 8, sample_rate: int = 8000, n_fft: int = 128) -> List[ShapeClass]:
    """``k`` classes with distinct glyph/colour pairs and bin-centre tones.

    Tones are spread evenly between bin 4 and bin ``n_fft // 2 - 4``.
    """
    if k < 1 or k > len(PALETTE):
        raise ValueError(f"k must be in [1, {len(PALETTE)}], got {k}")
    lo, hi = 4, n_fft // 2 - 4
    if k > 1 and (hi - lo) < (k - 1):
        raise ValueError(f"n_fft={n_fft} too small for {k} distinct tone bins")
    bins = [lo + round(i * (hi - lo) / max(k - 1, 1)) for i in range(k)]
    return [
        ShapeClass(i, GLYPHS[i % len(GLYPHS)], PALETTE[i], b, bin_frequency(b, sample_rate, n_fft))
        for i, b in enumerate(bins)
    ]


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) in [0, 1]
    audio: Waveform
    sounding_class: int
    gt_box: Tuple[int, int, int, int]  # x, y, w, h in pixels
    distractor_boxes: List[Tuple[int, int, int, int]] = field(default_factory=list)
    distractor_classes: List[int] = field(default_factory=list)
    labels: Optional[np.ndarray] = None  # (H, W) class id per pixel, -1 background
    sounding_mask: Optional[np.ndarray] = None  # (H, W) bool, unoccluded render
    annotations: List[Tuple[int, int, int, int]] = field(default_factory=list)


def glyph_mask(glyph: str, size: int) -> np.ndarray:
    """Boolean ``size x size`` stencil for one glyph."""
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - c, xx - c
    r = size / 2.0
    if glyph == "circle":
        m = dx**2 + dy**2 <= r**2
    elif glyph == "square":
        m = np.ones((size, size), dtype=bool)
    elif glyph == "triangle":
        # apex at top centre, base along the bottom row
        frac = (yy + 0.5) / size
        m = np.abs(dx) <= frac * r
    elif glyph == "cross":
        t = max(size / 6.0, 1.0)
        m = (np.abs(dx) <= t) | (np.abs(dy) <= t)
    elif glyph == "diamond":
        m = np.abs(dx) + np.abs(dy) <= r
    elif glyph == "ring":
        d2 = dx**2 + dy**2
        m = (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    else:
        raise ValueError(f"unknown glyph {glyph!r}")
    return m


def _overlap(a, b) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = max(0, min(ax + aw, bx + bw) - max(ax, bx))
    ih = max(0, min(ay + ah, by + bh) - max(ay, by))
    return (iw * ih) / min(aw * ah, bw * bh)


def _mask_box(mask: np.ndarray) -> Tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    return int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1)


def _place(rng, n: int, img_size: int, size_range) -> Optional[list]:
    boxes = []
    for _ in range(n):
        for _attempt in range(MAX_PLACEMENT_ATTEMPTS):
            s = int(rng.integers(size_range[0], size_range[1] + 1))
            x = int(rng.integers(0, img_size - s + 1))
            y = int(rng.integers(0, img_size - s + 1))
            box = (x, y, s, s)
            if all(_overlap(box, b) <= MAX_OVERLAP for b in boxes):
                boxes.append(box)
                break
        else:
            return None
    return boxes


def jitter_annotations(rng, box, img_size: int, n: int = 3, px: int = 2):
    """``n`` annotator replicas of ``box`` with integer edge jitter in [-px, px]."""
    out = []
    x, y, w, h = box
    for _ in range(n):
        d = rng.integers(-px, px + 1, size=4)
        x0 = int(np.clip(x + d[0], 0, img_size - 1))
        y0 = int(np.clip(y + d[1], 0, img_size - 1))
        x1 = int(np.clip(x + w + d[2], x0 + 1, img_size))
        y1 = int(np.clip(y + h + d[3], y0 + 1, img_size))
        out.append((x0, y0, x1 - x0, y1 - y0))
    return out


def generate_sample(
    rng_seed,
    classes: Sequence[ShapeClass],
    n_shapes: int = 1,
    img_size: int = 64,
    noise_level: float = 0.05,
    *,
    distractor_classes: Optional[Sequence[ShapeClass]] = None,
    sample_rate: int = 8000,
    seconds: float = 1.0,
    size_range: Tuple[int, int] = (14, 22),
    annotators: int = 1,
) -> Sample:
    """Render one sample; fully determined by ``rng_seed``.

    ``classes`` are the candidates for the sounding shape; distractors are
    drawn from ``distractor_classes`` (defaults to ``classes``) minus the
    sounding class.
    """
    if n_shapes < 1:
        raise ValueError("n_shapes must be >= 1")
    rng = np.random.default_rng(rng_seed)
    pool = list(distractor_classes if distractor_classes is not None else classes)
    sounding = classes[int(rng.integers(len(classes)))]
    others = [c for c in pool if c.id != sounding.id]
    n = min(n_shapes, len(others) + 1)

    boxes = _place(rng, n, img_size, size_range)
    while boxes is None:
        logger.warning("placement of %d shapes failed; retrying with %d", n, n - 1)
        n -= 1
        boxes = _place(rng, n, img_size, size_range)

    picks = rng.permutation(len(others))[: n - 1] if n > 1 else []
    shape_classes = [sounding] + [others[int(i)] for i in picks]
    order = rng.permutation(n)

    img = BACKGROUND_LEVEL + BACKGROUND_TEXTURE * rng.random((3, img_size, img_size))
    labels = np.full((img_size, img_size), -1, dtype=np.int64)
    sounding_mask = np.zeros((img_size, img_size), dtype=bool)
    for j in order:
        cls, (x, y, s, _) = shape_classes[j], boxes[j]
        stencil = glyph_mask(cls.glyph, s)
        full = np.zeros((img_size, img_size), dtype=bool)
        full[y : y + s, x : x + s] = stencil
        shade = 0.9 + 0.1 * rng.random()
        for ch in range(3):
            img[ch][full] = cls.color[ch] * shade
        labels[full] = cls.id
        if j == 0:
            sounding_mask = full
    img = np.clip(img, 0.0, 1.0)

    gt_box = _mask_box(sounding_mask)
    distractor_boxes = []
    for j in range(1, n):
        x, y, s, _ = boxes[j]
        m = np.zeros((img_size, img_size), dtype=bool)
        m[y : y + s, x : x + s] = glyph_mask(shape_classes[j].glyph, s)
        distractor_boxes.append(_mask_box(m))

    phase = float(rng.uniform(0, 2 * np.pi))
    wave_ = tone(sounding.tone_frequency, seconds, sample_rate, 0.5, phase)
    if noise_level > 0:
        wave_ = wave_ + rng.normal(0.0, noise_level, size=wave_.shape)
    annotations = [gt_box] if annotators <= 1 else jitter_annotations(rng, gt_box, img_size, annotators)

    return Sample(
        image=img,
        audio=Waveform(wave_, sample_rate),
        sounding_class=sounding.id,
        gt_box=gt_box,
        distractor_boxes=distractor_boxes,
        distractor_classes=[c.id for c in shape_classes[1:]],
        labels=labels,
        sounding_mask=sounding_mask,
        annotations=annotations,
    )


@dataclass
class ManifestEntry:
    id: str
    image_path: str
    wav_path: str
    sounding_class: int
    box: Tuple[int, int, int, int]


@dataclass
class DatasetManifest:
    split: str
    seed: int
    classes: List[int]
    entries: List[ManifestEntry] = field(default_factory=list)
    samples: List[Sample] = field(default_factory=list, repr=False)

    @property
    def n(self) -> int:
        return len(self.entries) if self.entries else len(self.samples)

    def class_histogram(self) -> dict:
        labels = [e.sounding_class for e in self.entries] or [s.sounding_class for s in self.samples]
        hist = {c: 0 for c in self.classes}
        for c in labels:
            hist[c] = hist.get(c, 0) + 1
        return hist


SPLIT_INDEX = {"train": 0, "test": 1, "test_heard": 2, "test_unheard": 3}


def sample_seed(seed: int, split: str, i: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), SPLIT_INDEX.get(split, 9), int(i)])


def generate_dataset(
    seed: int,
    n: int,
    classes: Sequence[ShapeClass],
    split: str = "train",
    *,
    world: Optional[Sequence[ShapeClass]] = None,
    max_shapes: int = 3,
    **kwargs,
) -> DatasetManifest:
    """``n`` in-memory samples whose sounding classes come from ``classes``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    samples = []
    for i in range(n):
        ss = sample_seed(seed, split, i)
        shapes = 1 + int(np.random.default_rng([*ss.entropy, 1]).integers(max_shapes))
        samples.append(
            generate_sample(ss, list(classes), shapes, distractor_classes=world, **kwargs)
        )
    return DatasetManifest(split, int(seed), sorted(c.id for c in classes), samples=samples)


def split_classes(seed: int, classes: Sequence[ShapeClass], heard_fraction: float):
    if not 0.0 < heard_fraction < 1.0:
        raise ValueError(f"heard_fraction must be in (0, 1), got {heard_fraction}")
    n_heard = int(round(len(classes) * heard_fraction))
    if n_heard < 2 or len(classes) - n_heard < 2:
        raise ValueError(
            f"{len(classes)} classes at heard_fraction={heard_fraction} leaves fewer than 2 per split"
        )
    perm = np.random.default_rng(np.random.SeedSequence([int(seed), 77])).permutation(len(classes))
    heard = sorted((classes[int(i)] for i in perm[:n_heard]), key=lambda c: c.id)
    unheard = sorted((classes[int(i)] for i in perm[n_heard:]), key=lambda c: c.id)
    return heard, unheard


def generate_split(
    seed: int,
    n: int,
    classes: Sequence[ShapeClass],
    heard_fraction: float,
    n_test: Optional[int] = None,
    **kwargs,
) -> Tuple[DatasetManifest, DatasetManifest, DatasetManifest]:
    """Open-set split: train and test_heard on heard classes, test_unheard on the rest.

    Distractor shapes may come from any class in the world, so unheard
    objects do appear in training images, but never as the sound source.
    """
    heard, unheard = split_classes(seed, classes, heard_fraction)
    n_test = n if n_test is None else n_test
    world = list(classes)
    train = generate_dataset(seed, n, heard, "train", world=world, **kwargs)
    test_heard = generate_dataset(seed, n_test, heard, "test_heard", world=world, **kwargs)
    test_unheard = generate_dataset(seed, n_test, unheard, "test_unheard", world=world, **kwargs)
    return train, test_heard, test_unheard
