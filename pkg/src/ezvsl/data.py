"""Dataset materialisation: manifests on disk and dense arrays in memory."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .audio import read_wav, stft_log_magnitude, write_wav
from .models import normalize_spectrogram
from .synth import DatasetManifest, ManifestEntry, Sample
from .tensorio import load_tensors, save_tensors

logger = logging.getLogger(__name__)


@dataclass
class ArrayDataset:
    """Everything training and evaluation need, stacked into arrays."""

    ids: List[str]
    images: np.ndarray  # (N, 3, H, W) float32
    specs: np.ndarray  # (N, F, T) float32, standardised log magnitudes
    classes: np.ndarray  # (N,) sounding class
    labels: np.ndarray  # (N, H, W) pixel class map, -1 background
    annotations: List[List[Tuple[int, int, int, int]]]

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def boxes(self) -> List[Tuple[int, int, int, int]]:
        return [a[0] for a in self.annotations]

    def subset(self, idx) -> "ArrayDataset":
        idx = list(idx)
        return ArrayDataset(
            [self.ids[i] for i in idx],
            self.images[idx],
            self.specs[idx],
            self.classes[idx],
            self.labels[idx],
            [self.annotations[i] for i in idx],
        )


def spectrogram_input(wave, n_fft: int, hop: int) -> np.ndarray:
    return normalize_spectrogram(stft_log_magnitude(wave, n_fft, hop).bins).astype(np.float32)


def from_samples(samples: Sequence[Sample], n_fft: int = 128, hop: int = 64, prefix="s") -> ArrayDataset:
    return ArrayDataset(
        ids=[f"{prefix}{i:05d}" for i in range(len(samples))],
        images=np.stack([s.image for s in samples]).astype(np.float32),
        specs=np.stack([spectrogram_input(s.audio, n_fft, hop) for s in samples]),
        classes=np.array([s.sounding_class for s in samples], dtype=np.int64),
        labels=np.stack([s.labels for s in samples]),
        annotations=[list(s.annotations or [s.gt_box]) for s in samples],
    )


def _box_str(b) -> str:
    return ",".join(str(int(v)) for v in b)


def write_manifest(root, manifest: DatasetManifest, meta_text: str = "") -> Path:
    """Write media files and ``<split>.tsv`` (one line per sample) under ``root``.

    Image files carry three entries: ``image`` (3, H, W), ``labels`` (H, W) with
    class id + 1 per pixel (0 = background) and ``annotations`` (n, 4) boxes.
    """
    root = Path(root)
    media = root / manifest.split
    media.mkdir(parents=True, exist_ok=True)
    lines = []
    entries = []
    for i, s in enumerate(manifest.samples):
        sid = f"{manifest.split}_{i:05d}"
        img_rel = f"{manifest.split}/{sid}.ezvl"
        wav_rel = f"{manifest.split}/{sid}.wav"
        ann = np.array(s.annotations or [s.gt_box], dtype=np.float32)
        save_tensors(
            root / img_rel,
            {"image": s.image, "labels": (s.labels + 1).astype(np.float32), "annotations": ann},
        )
        write_wav(root / wav_rel, s.audio)
        entries.append(ManifestEntry(sid, img_rel, wav_rel, s.sounding_class, tuple(s.gt_box)))
        lines.append(f"{sid}\t{img_rel}\t{wav_rel}\t{s.sounding_class}\t{_box_str(s.gt_box)}\n")
    manifest.entries = entries
    path = root / f"{manifest.split}.tsv"
    path.write_text("".join(lines))
    meta = [
        f"split = {manifest.split}\n",
        f"n = {len(entries)}\n",
        f"seed = {manifest.seed}\n",
        f"classes = {','.join(str(c) for c in manifest.classes)}\n",
    ]
    (root / f"{manifest.split}.meta").write_text("".join(meta) + meta_text)
    return path


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    meta = {}
    meta_path = path.with_suffix(".meta")
    if meta_path.exists():
        for line in meta_path.read_text().splitlines():
            if "=" in line and not line.lstrip().startswith("#"):
                k, v = line.split("=", 1)
                meta[k.strip()] = v.strip()
    entries = []
    for ln, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise ValueError(f"{path}:{ln}: expected 5 tab-separated fields, got {len(parts)}")
        sid, img, wav, cls, box = parts
        entries.append(ManifestEntry(sid, img, wav, int(cls), tuple(int(v) for v in box.split(","))))
    classes = [int(c) for c in meta.get("classes", "").split(",") if c != ""]
    if not classes:
        classes = sorted({e.sounding_class for e in entries})
    return DatasetManifest(meta.get("split", path.stem), int(meta.get("seed", 0)), classes, entries)


def load_arrays(
    manifest_path, n_fft: int = 128, hop: int = 64, errors: Optional[list] = None
) -> ArrayDataset:
    """Decode every manifest entry; unreadable entries are skipped and listed in ``errors``."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    m = read_manifest(manifest_path)
    ids, images, specs, classes, labels, anns = [], [], [], [], [], []
    for e in m.entries:
        try:
            t = load_tensors(root / e.image_path)
            wave = read_wav(root / e.wav_path)
            spec = spectrogram_input(wave, n_fft, hop)
        except (OSError, ValueError) as exc:
            if errors is None:
                raise
            errors.append((e.id, str(exc)))
            logger.warning("skipping %s: %s", e.id, exc)
            continue
        ids.append(e.id)
        images.append(t["image"])
        specs.append(spec)
        classes.append(e.sounding_class)
        labels.append(t["labels"].astype(np.int64) - 1)
        if "annotations" in t:
            anns.append([tuple(int(v) for v in row) for row in t["annotations"]])
        else:
            anns.append([e.box])
    if not ids:
        raise ValueError(f"{manifest_path}: no loadable samples")
    return ArrayDataset(
        ids,
        np.stack(images).astype(np.float32),
        np.stack(specs),
        np.array(classes, dtype=np.int64),
        np.stack(labels),
        anns,
    )
