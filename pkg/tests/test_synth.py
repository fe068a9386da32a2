import math

import numpy as np
import pytest

from ezvsl import synth
from ezvsl.audio import stft_log_magnitude
from ezvsl.metrics import box_mask


@pytest.fixture(scope="module")
def classes():
    return synth.make_classes(8)


def test_classes_distinct(classes):
    assert len({(c.glyph, c.color) for c in classes}) == 8
    assert len({c.tone_frequency for c in classes}) == 8
    for c in classes:
        assert c.tone_frequency == c.tone_bin * 8000 / 128
        assert 0 < c.tone_bin < 64


def test_single_shape_noise_free(classes):
    s = synth.generate_sample(11, classes, n_shapes=1, noise_level=0.0)
    assert s.distractor_boxes == []
    ys, xs = np.nonzero(s.labels >= 0)
    assert s.gt_box == (xs.min(), ys.min(), xs.max() - xs.min() + 1, ys.max() - ys.min() + 1)
    cls = classes[s.sounding_class]
    spec = np.abs(np.fft.rfft(s.audio.samples))
    assert spec.argmax() == round(cls.tone_frequency * len(s.audio.samples) / 8000)
    t = np.arange(len(s.audio.samples)) / 8000
    # a pure tone: projection onto the sine/cosine pair recovers amplitude 0.5 exactly
    c = 2 * np.mean(s.audio.samples * np.cos(2 * np.pi * cls.tone_frequency * t))
    d = 2 * np.mean(s.audio.samples * np.sin(2 * np.pi * cls.tone_frequency * t))
    assert math.hypot(c, d) == pytest.approx(0.5, abs=1e-9)


def test_seed_determinism(classes):
    a = synth.generate_sample(np.random.SeedSequence([5, 1]), classes, 3)
    b = synth.generate_sample(np.random.SeedSequence([5, 1]), classes, 3)
    assert a.image.tobytes() == b.image.tobytes()
    assert a.audio.samples.tobytes() == b.audio.samples.tobytes()


def test_sample_invariants(classes):
    m = synth.generate_dataset(3, 200, classes)
    for s in m.samples:
        x, y, w, h = s.gt_box
        assert x >= 0 and y >= 0 and x + w <= 64 and y + h <= 64
        inside = (s.sounding_mask & box_mask(s.gt_box, 64, 64)).sum()
        assert inside >= 0.8 * s.sounding_mask.sum()
        assert s.sounding_class not in s.distractor_classes
        assert len(set(s.distractor_classes)) == len(s.distractor_classes)
        assert 0.0 <= s.image.min() and s.image.max() <= 1.0
        assert 1 + len(s.distractor_boxes) <= 3


def test_placement_overlap_bound(classes):
    m = synth.generate_dataset(4, 100, classes)
    for s in m.samples:
        boxes = [s.gt_box] + s.distractor_boxes
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                a = box_mask(boxes[i], 64, 64)
                b = box_mask(boxes[j], 64, 64)
                assert (a & b).sum() <= 0.3 * min(a.sum(), b.sum()) + 1e-9


def test_sounding_class_uniform():
    classes = synth.make_classes(8)
    m = synth.generate_dataset(9, 1000, classes)
    counts = np.bincount([s.sounding_class for s in m.samples], minlength=8)
    expect, sd = 1000 / 8, math.sqrt(1000 * (1 / 8) * (7 / 8))
    assert np.all(np.abs(counts - expect) <= 3 * sd)


def test_audio_label_leakage(classes):
    m = synth.generate_dataset(6, 60, classes)
    peak = {}
    for s in m.samples:
        b = int(np.bincount(stft_log_magnitude(s.audio).bins.argmax(axis=0)).argmax())
        peak.setdefault(s.sounding_class, set()).add(b)
    assert all(len(v) == 1 for v in peak.values())
    flat = [next(iter(v)) for v in peak.values()]
    assert len(set(flat)) == len(flat)


def test_split_disjoint(classes):
    train, heard, unheard = synth.generate_split(1, 80, classes, 0.5, n_test=40)
    assert len(train.classes) == 4 and len(unheard.classes) == 4
    assert not set(train.classes) & set(unheard.classes)
    assert set(heard.classes) == set(train.classes)
    for m in (train, heard, unheard):
        hist = m.class_histogram()
        counted = {c: 0 for c in m.classes}
        for s in m.samples:
            counted[s.sounding_class] += 1
        assert hist == counted
        assert sum(hist.values()) == m.n


def test_split_too_few_classes():
    with pytest.raises(ValueError, match="fewer than 2"):
        synth.generate_split(0, 10, synth.make_classes(3), 0.5)
    with pytest.raises(ValueError):
        synth.generate_split(0, 10, synth.make_classes(8), 1.0)


def test_placement_fallback(classes, caplog):
    s = synth.generate_sample(0, classes, n_shapes=3, img_size=24, size_range=(20, 22))
    assert len(s.distractor_boxes) < 2
    assert "retrying" in caplog.text


def test_jittered_annotations(classes):
    s = synth.generate_sample(2, classes, 2, annotators=3)
    assert len(s.annotations) == 3
    for (x, y, w, h), g in zip(s.annotations, [s.gt_box] * 3):
        assert abs(x - g[0]) <= 2 and abs(y - g[1]) <= 2
