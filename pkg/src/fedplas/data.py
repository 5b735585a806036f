"""Dataset loading, synthesis, and non-IID partitioning.

Two sources are supported: the big-endian IDX binary format (images + labels
in separate files) and a synthetic cluster-image generator used for
desk-scale experiments. Datasets are immutable after construction; their
arrays are marked read-only so every downstream transform must copy.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .rng import rng_for

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Malformed IDX file; the message states which check failed."""


@dataclass
class Dataset:
    """Images in (N, C, H, W) float64 layout with values in [0, 1].

    ``edge_members`` lists the indices of an injected rare subpopulation
    (rotated copies of one class), empty for ordinary datasets.
    """

    images: np.ndarray
    labels: np.ndarray
    name: str
    num_classes: int
    edge_members: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        self.edge_members = np.ascontiguousarray(self.edge_members, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, C, H, W), got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        if len(self.labels) and (
            self.labels.min() < 0 or self.labels.max() >= self.num_classes
        ):
            raise ValueError(
                f"labels must lie in [0, {self.num_classes}), got "
                f"[{self.labels.min()}, {self.labels.max()}]"
            )
        for arr in (self.images, self.labels, self.edge_members):
            arr.setflags(write=False)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.images.shape[1:]


def subset(ds: Dataset, indices, name: str | None = None) -> Dataset:
    """New dataset containing ``indices`` (in the given order)."""
    idx = np.asarray(indices, dtype=np.int64)
    pos = {int(i): p for p, i in enumerate(idx)}
    edge = np.array(
        sorted(pos[int(i)] for i in ds.edge_members if int(i) in pos), dtype=np.int64
    )
    return Dataset(
        ds.images[idx].copy(),
        ds.labels[idx].copy(),
        name if name is not None else ds.name,
        ds.num_classes,
        edge_members=edge,
    )


# ---------------------------------------------------------------------------
# IDX binary format
# ---------------------------------------------------------------------------


def _read_exact(f, n: int, path, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise IdxFormatError(f"{path}: truncated file while reading {what}")
    return buf


def load_idx(images_path, labels_path, name: str = "idx", num_classes: int = 10) -> Dataset:
    """Parse an IDX image/label file pair; pixels are scaled to [0, 1]."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    with open(images_path, "rb") as f:
        magic, n, h, w = struct.unpack(">IIII", _read_exact(f, 16, images_path, "header"))
        if magic != IDX_IMAGE_MAGIC:
            raise IdxFormatError(
                f"{images_path}: wrong magic 0x{magic:08x}, expected image magic "
                f"0x{IDX_IMAGE_MAGIC:08x}"
            )
        raw = _read_exact(f, n * h * w, images_path, f"{n} images of {h}x{w} pixels")
    with open(labels_path, "rb") as f:
        magic, ln = struct.unpack(">II", _read_exact(f, 8, labels_path, "header"))
        if magic != IDX_LABEL_MAGIC:
            raise IdxFormatError(
                f"{labels_path}: wrong magic 0x{magic:08x}, expected label magic "
                f"0x{IDX_LABEL_MAGIC:08x}"
            )
        lab = _read_exact(f, ln, labels_path, f"{ln} labels")
    if n != ln:
        raise IdxFormatError(
            f"count mismatch: {images_path} has {n} images but {labels_path} has "
            f"{ln} labels"
        )
    images = np.frombuffer(raw, dtype=np.uint8).reshape(n, 1, h, w) / 255.0
    labels = np.frombuffer(lab, dtype=np.uint8).astype(np.int64)
    return Dataset(images, labels, name, num_classes)


def write_idx(ds: Dataset, images_path, labels_path) -> None:
    """Inverse of :func:`load_idx` at 1/255 quantization (single channel only)."""
    n, c, h, w = ds.images.shape
    if c != 1:
        raise ValueError(f"IDX stores single-channel images, got {c} channels")
    pixels = np.round(ds.images * 255.0).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, h, w))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABEL_MAGIC, n))
        f.write(ds.labels.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# Synthetic cluster images
# ---------------------------------------------------------------------------


def synth_generate(
    num_classes: int,
    samples_per_class: int,
    image_side: int,
    seed: int,
    noise: float = 0.15,
    name: str = "synth",
) -> Dataset:
    """Oriented-grating class images with a quiet top-right quadrant.

    Class c is a sinusoidal grating at orientation pi*c/num_classes under a
    Gaussian envelope, jittered per sample and buried in pixel noise. The
    top-right quadrant (where trigger patches are stamped by convention) is
    masked to exactly zero, so clean samples carry no energy there, the way
    centered handwritten digits keep their margins dark. Classes come out
    exactly balanced and the sample order is shuffled deterministically.
    """
    if min(num_classes, samples_per_class, image_side) < 1:
        raise ValueError("num_classes, samples_per_class, image_side must be positive")
    rng = rng_for(seed, "synth", num_classes, samples_per_class, image_side)
    n = num_classes * samples_per_class
    side = image_side
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    # the quiet block must cover the trigger cell's receptive field on
    # pool-twice architectures; tiny images only need room for the patch
    block = int(round(side * 16.0 / 28.0)) if side >= 16 else max(2, round(side * 0.3))
    mask = np.ones((side, side))
    mask[:block, side - block :] = 0.0
    cy0, cx0 = 0.68 * side, 0.34 * side
    env_sigma = 0.30 * side
    wavelength = max(0.22 * side, 3.0)  # stay above Nyquist on small images
    images = np.empty((n, 1, side, side))
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    for i, c in enumerate(labels):
        angle = np.pi * c / num_classes
        cy = cy0 + rng.normal(0, side / 20.0)
        cx = cx0 + rng.normal(0, side / 20.0)
        env = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * env_sigma**2))
        phase = (xx - cx) * np.cos(angle) + (yy - cy) * np.sin(angle)
        grating = 0.5 + 0.5 * np.cos(2.0 * np.pi * phase / wavelength)
        amp = rng.uniform(0.7, 1.0)
        images[i, 0] = (amp * env * grating + rng.normal(0, noise, size=(side, side))) * mask
    np.clip(images, 0.0, 1.0, out=images)
    order = rng.permutation(n)
    return Dataset(images[order], labels[order], name, num_classes)


# ---------------------------------------------------------------------------
# Dirichlet non-IID partitioning
# ---------------------------------------------------------------------------


@dataclass
class PartitionSpec:
    num_clients: int
    dirichlet_alpha: float
    seed: int

    def __post_init__(self):
        if self.num_clients < 1:
            raise ValueError(f"num_clients must be >= 1, got {self.num_clients}")
        if self.dirichlet_alpha <= 0:
            raise ValueError(f"dirichlet_alpha must be > 0, got {self.dirichlet_alpha}")


@dataclass
class Partition:
    assignments: list[np.ndarray]

    def __post_init__(self):
        self.assignments = [np.asarray(a, dtype=np.int64) for a in self.assignments]


def dirichlet_partition(ds: Dataset, spec: PartitionSpec, max_attempts: int = 100) -> Partition:
    """Split sample indices across clients, class by class.

    For each class a proportion vector p ~ Dir(alpha * 1_M) is drawn and the
    class's indices are assigned to clients by categorical draws from p. The
    whole partition is redrawn (bounded attempts) if any client ends up empty.
    """
    if len(ds) == 0:
        raise ValueError("cannot partition an empty dataset")
    m = spec.num_clients
    for attempt in range(max_attempts):
        rng = rng_for(spec.seed, "dirichlet", spec.dirichlet_alpha, m, attempt)
        buckets: list[list[int]] = [[] for _ in range(m)]
        for c in range(ds.num_classes):
            idx = np.flatnonzero(ds.labels == c)
            if len(idx) == 0:
                continue
            p = rng.dirichlet(np.full(m, spec.dirichlet_alpha))
            owners = rng.choice(m, size=len(idx), p=p)
            for i, owner in zip(idx, owners):
                buckets[owner].append(int(i))
        if all(buckets):
            return Partition([np.sort(np.array(b, dtype=np.int64)) for b in buckets])
    raise RuntimeError(
        f"could not draw a partition with no empty client in {max_attempts} attempts "
        f"(num_clients={m}, alpha={spec.dirichlet_alpha}, n={len(ds)})"
    )


def class_histogram(ds: Dataset, indices) -> np.ndarray:
    counts = np.zeros(ds.num_classes, dtype=np.int64)
    for c in ds.labels[np.asarray(indices, dtype=np.int64)]:
        counts[c] += 1
    return counts
