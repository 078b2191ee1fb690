"""Digit data handling: IDX ingestion, a synthetic digit renderer, the
concept-drift transform for non-IID clients, backdoor trigger stamping,
and the partitioner that builds per-client datasets.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import CapacityError, IdxParseError, RejectedInputError
from .seeding import STREAM_CLIENT_DATA, substream

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class Provenance(Enum):
    CLEAN = "clean"
    NONIID = "noniid"
    BACKDOORED = "backdoored"


class ClientKind(Enum):
    IID = "iid"
    NON_IID = "noniid"
    MALICIOUS = "malicious"


@dataclass
class Sample:
    """One labeled image: (1, H, W) float64 pixels in [0, 1]."""

    image: np.ndarray
    label: int
    provenance: Provenance = Provenance.CLEAN


@dataclass(frozen=True)
class TriggerConfig:
    """Grey plus-sign stamp: ``bar_length`` pixels per bar, set to
    ``intensity``, placed so the whole cross stays inside the image."""

    bar_length: int = 5
    thickness: int = 1
    intensity: float = 0.5
    source_label: int = 1
    target_label: int = 3


@dataclass
class ClientProfile:
    id: int
    kind: ClientKind
    non_iid_rate: float
    malicious_data_rate: float
    dataset: list[Sample] = field(default_factory=list)


# ---------------------------------------------------------------------------
# IDX files


def _read_u32(f, field_name: str, path) -> int:
    raw = f.read(4)
    if len(raw) < 4:
        raise IdxParseError(f"{path}: truncated while reading {field_name}")
    return struct.unpack(">I", raw)[0]


def load_idx(images_path, labels_path) -> list[Sample]:
    """Parse an MNIST-style IDX image/label file pair into samples.

    Pixels are normalized to [0, 1] by dividing by 255.
    """
    with open(images_path, "rb") as f:
        magic = _read_u32(f, "image magic", images_path)
        if magic != IDX_IMAGE_MAGIC:
            raise IdxParseError(
                f"{images_path}: image magic: expected {IDX_IMAGE_MAGIC}, got {magic}")
        n_images = _read_u32(f, "image count", images_path)
        rows = _read_u32(f, "row count", images_path)
        cols = _read_u32(f, "column count", images_path)
        pixel_bytes = f.read(n_images * rows * cols)
        if len(pixel_bytes) < n_images * rows * cols:
            raise IdxParseError(
                f"{images_path}: pixel data: expected {n_images * rows * cols} bytes, "
                f"got {len(pixel_bytes)}")

    with open(labels_path, "rb") as f:
        magic = _read_u32(f, "label magic", labels_path)
        if magic != IDX_LABEL_MAGIC:
            raise IdxParseError(
                f"{labels_path}: label magic: expected {IDX_LABEL_MAGIC}, got {magic}")
        n_labels = _read_u32(f, "label count", labels_path)
        label_bytes = f.read(n_labels)
        if len(label_bytes) < n_labels:
            raise IdxParseError(
                f"{labels_path}: label data: expected {n_labels} bytes, got {len(label_bytes)}")

    if n_images != n_labels:
        raise IdxParseError(
            f"count mismatch: {n_images} images ({images_path}) vs "
            f"{n_labels} labels ({labels_path})")

    images = np.frombuffer(pixel_bytes, dtype=np.uint8).reshape(n_images, rows, cols)
    labels = np.frombuffer(label_bytes, dtype=np.uint8)
    return [
        Sample(images[i].astype(np.float64)[None, :, :] / 255.0, int(labels[i]))
        for i in range(n_images)
    ]


def filter_digits(samples: list[Sample], max_label: int = 5) -> list[Sample]:
    """Keep only samples with label <= max_label, preserving order."""
    return [s for s in samples if s.label <= max_label]


# ---------------------------------------------------------------------------
# backdoor trigger


def cross_mask(height: int, width: int, center: tuple[int, int],
               trigger: TriggerConfig) -> np.ndarray:
    """Boolean footprint of the plus sign centered at ``center``."""
    r, c = center
    half = trigger.bar_length // 2
    t_half = trigger.thickness // 2
    mask = np.zeros((height, width), dtype=bool)
    mask[r - t_half:r + t_half + 1, c - half:c + half + 1] = True
    mask[r - half:r + half + 1, c - t_half:c + t_half + 1] = True
    return mask


def inject_backdoor(sample: Sample, rng: np.random.Generator,
                    trigger: TriggerConfig = TriggerConfig()) -> Sample:
    """Stamp the grey cross at a random in-bounds location and relabel."""
    if sample.label != trigger.source_label:
        raise RejectedInputError(
            f"backdoor source must have label {trigger.source_label}, got {sample.label}")
    _, h, w = sample.image.shape
    half = max(trigger.bar_length // 2, trigger.thickness // 2)
    if h < 2 * half + 1 or w < 2 * half + 1:
        raise RejectedInputError(f"image {h}x{w} too small for a {trigger.bar_length}px cross")
    r = int(rng.integers(half, h - half))
    c = int(rng.integers(half, w - half))
    image = sample.image.copy()
    image[0][cross_mask(h, w, (r, c), trigger)] = trigger.intensity
    return Sample(image, trigger.target_label, Provenance.BACKDOORED)


# ---------------------------------------------------------------------------
# non-IID concept drift


class NonIIDSource:
    """Directory of raw 784-byte 8-bit grayscale files named ``<label>_<n>``
    (an optional ``.raw`` suffix is allowed).  Images are served verbatim."""

    _NAME = re.compile(r"^(\d+)_(\d+)$")

    def __init__(self, directory, image_size: int = 28):
        self.by_label: dict[int, list[np.ndarray]] = {}
        n_pixels = image_size * image_size
        for path in sorted(Path(directory).iterdir()):
            m = self._NAME.match(path.name.removesuffix(".raw"))
            if not m:
                continue
            raw = path.read_bytes()
            if len(raw) != n_pixels:
                raise RejectedInputError(
                    f"{path}: expected {n_pixels} bytes of raw pixels, got {len(raw)}")
            image = np.frombuffer(raw, dtype=np.uint8).astype(np.float64)
            image = image.reshape(1, image_size, image_size) / 255.0
            self.by_label.setdefault(int(m.group(1)), []).append(image)

    def draw(self, label: int, rng: np.random.Generator) -> np.ndarray:
        images = self.by_label.get(label)
        if not images:
            raise RejectedInputError(f"non-IID source has no images for label {label}")
        return images[int(rng.integers(len(images)))].copy()


def make_noniid(sample: Sample, rng: np.random.Generator,
                source: NonIIDSource | None = None,
                rotation_deg: float = 15.0) -> Sample:
    """Concept-drift variant of a sample: same label, different features.

    Default transform is a fixed 15-degree rotation plus intensity
    inversion.  With ``source`` set, a same-label image is drawn verbatim
    from the external directory instead.
    """
    if source is not None:
        return Sample(source.draw(sample.label, rng), sample.label, Provenance.NONIID)
    rotated = ndimage.rotate(sample.image[0], rotation_deg, reshape=False,
                             order=1, mode="constant", cval=0.0)
    image = 1.0 - np.clip(rotated, 0.0, 1.0)
    return Sample(image[None, :, :], sample.label, Provenance.NONIID)


# ---------------------------------------------------------------------------
# synthetic digit source

# Segment endpoints on a unit glyph box (x right, y down), seven-segment style.
_SEG = {
    "a": ((0.0, 0.0), (1.0, 0.0)),
    "b": ((1.0, 0.0), (1.0, 0.5)),
    "c": ((1.0, 0.5), (1.0, 1.0)),
    "d": ((0.0, 1.0), (1.0, 1.0)),
    "e": ((0.0, 0.5), (0.0, 1.0)),
    "f": ((0.0, 0.0), (0.0, 0.5)),
    "g": ((0.0, 0.5), (1.0, 0.5)),
}
_DIGIT_SEGMENTS = {0: "abcdef", 1: "bc", 2: "abged", 3: "abgcd", 4: "fgbc", 5: "afgcd"}


def render_digit(label: int, rng: np.random.Generator, image_size: int = 28) -> np.ndarray:
    """Rasterize a jittered glyph for one of the digits 0-5."""
    if label not in _DIGIT_SEGMENTS:
        raise RejectedInputError(f"synthetic renderer covers digits 0-5, got {label}")
    s = image_size
    x0, x1 = 0.34 * s, 0.66 * s
    y0, y1 = 0.20 * s, 0.80 * s
    angle = rng.uniform(-10.0, 10.0) * np.pi / 180.0
    shift = rng.uniform(-0.07 * s, 0.07 * s, size=2)
    cx, cy = (x0 + x1) / 2 + shift[0], (y0 + y1) / 2 + shift[1]
    cos_a, sin_a = np.cos(angle), np.sin(angle)

    def place(pt):
        px = x0 + pt[0] * (x1 - x0) - (x0 + x1) / 2
        py = y0 + pt[1] * (y1 - y0) - (y0 + y1) / 2
        return (cx + cos_a * px - sin_a * py, cy + sin_a * px + cos_a * py)

    ys, xs = np.mgrid[0:s, 0:s].astype(np.float64)
    ink = np.zeros((s, s))
    for seg in _DIGIT_SEGMENTS[label]:
        (ax, ay), (bx, by) = (place(p) for p in _SEG[seg])
        dx, dy = bx - ax, by - ay
        length_sq = dx * dx + dy * dy
        t = np.clip(((xs - ax) * dx + (ys - ay) * dy) / length_sq, 0.0, 1.0)
        dist = np.hypot(xs - (ax + t * dx), ys - (ay + t * dy))
        ink = np.maximum(ink, np.clip(1.6 - dist, 0.0, 1.0))

    image = ink * rng.uniform(0.75, 1.0)
    image = image + rng.normal(0.0, 0.03, size=image.shape)
    return np.clip(image, 0.0, 1.0)[None, :, :]


def make_synthetic_digits(n: int, rng: np.random.Generator, image_size: int = 28,
                          labels: np.ndarray | None = None) -> list[Sample]:
    """``n`` clean synthetic digit samples with the given or random labels."""
    if labels is None:
        labels = rng.integers(0, 6, size=n)
    return [Sample(render_digit(int(l), rng, image_size), int(l)) for l in labels]


def make_backdoor_test_set(test_samples: list[Sample], size: int,
                           trigger: TriggerConfig, rng: np.random.Generator) -> list[Sample]:
    """Trigger-stamped test set drawn from held-out source-label images."""
    sources = [s for s in test_samples if s.label == trigger.source_label]
    if len(sources) < size:
        raise CapacityError(
            f"backdoor test set: required {size} digit-{trigger.source_label} "
            f"images, available {len(sources)}")
    chosen = rng.choice(len(sources), size=size, replace=False)
    return [inject_backdoor(sources[i], rng, trigger) for i in chosen]


# ---------------------------------------------------------------------------
# partitioning


def partition(config, clean_pool: list[Sample], rng: np.random.Generator) -> list[ClientProfile]:
    """Assign disjoint clean-pool samples to clients and specialize them.

    IID clients keep their draw untouched.  Non-IID clients get a
    ``non_iid_rate`` fraction transformed by :func:`make_noniid`.
    Malicious clients get a ``malicious_data_rate`` fraction of
    trigger-stamped samples sourced from a reserved digit-1 pool, mixed
    into an otherwise clean draw.

    Per-client randomness comes from streams derived from ``config.seed``,
    so the result is a pure function of (config, seed).
    """
    trigger = config.trigger_config()
    spc = config.samples_per_client
    n_clients = config.n_iid + config.n_noniid + config.n_malicious
    n_bad_per = round(config.malicious_data_rate * spc)
    total_bad = config.n_malicious * n_bad_per

    order = rng.permutation(len(clean_pool))
    ones = [i for i in order if clean_pool[i].label == trigger.source_label]
    if len(ones) < total_bad:
        raise CapacityError(
            f"digit-{trigger.source_label} pool: required {total_bad}, available {len(ones)}")
    reserved = ones[:total_bad]
    reserved_set = set(reserved)
    general = [i for i in order if i not in reserved_set]
    general_need = n_clients * spc - total_bad
    if len(general) < general_need:
        raise CapacityError(f"clean pool: required {general_need}, available {len(general)}")

    source = None
    if getattr(config, "noniid_source_dir", None):
        source = NonIIDSource(config.noniid_source_dir, config.image_size)

    kinds = ([ClientKind.IID] * config.n_iid
             + [ClientKind.NON_IID] * config.n_noniid
             + [ClientKind.MALICIOUS] * config.n_malicious)
    profiles = []
    g_ptr = 0
    bad_ptr = 0
    for cid, kind in enumerate(kinds):
        crng = substream(config.seed, STREAM_CLIENT_DATA, cid)
        if kind is ClientKind.MALICIOUS:
            n_clean = spc - n_bad_per
            dataset = [clean_pool[i] for i in general[g_ptr:g_ptr + n_clean]]
            g_ptr += n_clean
            for i in reserved[bad_ptr:bad_ptr + n_bad_per]:
                dataset.append(inject_backdoor(clean_pool[i], crng, trigger))
            bad_ptr += n_bad_per
            perm = crng.permutation(spc)
            dataset = [dataset[i] for i in perm]
            profile = ClientProfile(cid, kind, 0.0, config.malicious_data_rate, dataset)
        else:
            dataset = [clean_pool[i] for i in general[g_ptr:g_ptr + spc]]
            g_ptr += spc
            rate = config.non_iid_rate if kind is ClientKind.NON_IID else 0.0
            n_drift = round(rate * spc)
            if n_drift:
                chosen = crng.choice(spc, size=n_drift, replace=False)
                for i in chosen:
                    dataset[i] = make_noniid(dataset[i], crng, source)
            profile = ClientProfile(cid, kind, rate, 0.0, dataset)
        profiles.append(profile)
    return profiles
