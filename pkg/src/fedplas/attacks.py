"""Data-poisoning transforms for malicious clients.

Three attacks are supported:

* trigger: stamp a small high-intensity patch onto the image and relabel it
  to the attacker's target class;
* semantic: flip labels of one source class to the target, pixels untouched;
* edgecase: relabel a rare injected subpopulation (rotated copies of one
  class) to the target.

All transforms are pure; poisoned copies of datasets are returned and the
originals are never modified.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .data import Dataset
from .rng import rng_for

log = logging.getLogger(__name__)

ATTACK_KINDS = ("trigger", "semantic", "edgecase", "none")
TRIGGER_CORNERS = ("top-right", "top-left", "bottom-right", "bottom-left")
TRIGGER_SHAPES = ("box", "plus")


@dataclass(frozen=True)
class TriggerGeometry:
    corner: str = "top-right"
    height: int = 2
    width: int = 2
    intensity: float = 1.0
    shape: str = "box"  # "plus" marks only the center row/column of the patch

    def __post_init__(self):
        if self.corner not in TRIGGER_CORNERS:
            raise ValueError(f"corner must be one of {TRIGGER_CORNERS}, got {self.corner!r}")
        if self.shape not in TRIGGER_SHAPES:
            raise ValueError(f"shape must be one of {TRIGGER_SHAPES}, got {self.shape!r}")
        if self.height < 1 or self.width < 1:
            raise ValueError("trigger patch must be at least 1x1")


@dataclass(frozen=True)
class EdgeSelector:
    base_label: int = 7
    rotation_degrees: float = 45.0


@dataclass(frozen=True)
class AttackSpec:
    kind: str = "none"
    target_label: int = 0
    poison_fraction: float = 0.3
    trigger: TriggerGeometry = field(default_factory=TriggerGeometry)
    source_label: int = 5
    edge: EdgeSelector = field(default_factory=EdgeSelector)
    edge_fraction: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"kind must be one of {ATTACK_KINDS}, got {self.kind!r}")
        if not 0.0 <= self.poison_fraction <= 1.0:
            raise ValueError(
                f"poison_fraction must be in [0, 1], got {self.poison_fraction}"
            )
        if self.target_label < 0:
            raise ValueError(f"target_label must be a class index, got {self.target_label}")
        if self.kind == "semantic" and self.source_label == self.target_label:
            raise ValueError("semantic attack needs source_label != target_label")
        if not 0.0 < self.edge_fraction <= 0.05:
            raise ValueError(
                f"edge_fraction must be in (0, 0.05], got {self.edge_fraction}"
            )


def apply_trigger(image: np.ndarray, geometry: TriggerGeometry) -> np.ndarray:
    """Copy of ``image`` (C, H, W) with the trigger pixels set to intensity."""
    if image.ndim != 3:
        raise ValueError(f"expected a (C, H, W) image, got shape {image.shape}")
    _, h, w = image.shape
    if geometry.height > h or geometry.width > w:
        raise ValueError(
            f"trigger {geometry.height}x{geometry.width} does not fit in "
            f"{h}x{w} image"
        )
    rows = (
        np.arange(geometry.height)
        if geometry.corner.startswith("top")
        else np.arange(h - geometry.height, h)
    )
    cols = (
        np.arange(geometry.width)
        if geometry.corner.endswith("left")
        else np.arange(w - geometry.width, w)
    )
    out = image.copy()
    if geometry.shape == "box":
        out[:, rows[:, None], cols[None, :]] = geometry.intensity
    else:
        mid_r = rows[len(rows) // 2]
        mid_c = cols[len(cols) // 2]
        out[:, mid_r, cols] = geometry.intensity
        out[:, rows, mid_c] = geometry.intensity
    return out


def trigger_pixel_mask(image_shape, geometry: TriggerGeometry) -> np.ndarray:
    """Boolean (H, W) mask of exactly the pixels the trigger writes."""
    c, h, w = image_shape
    probe = np.full((c, h, w), -1.0)
    marked = apply_trigger(probe, geometry)
    return (marked != probe).any(axis=0)


def select_edgecase(ds: Dataset, selector: EdgeSelector) -> np.ndarray:
    """Indices of the injected rare subpopulation (empty if none was built)."""
    if len(ds.edge_members) == 0:
        return np.zeros(0, dtype=np.int64)
    if np.any(ds.labels[ds.edge_members] != selector.base_label):
        raise ValueError(
            f"dataset edge members carry labels other than base_label="
            f"{selector.base_label}; was it injected with a different selector?"
        )
    return ds.edge_members.copy()


def inject_edgecase(ds: Dataset, selector: EdgeSelector, count: int, seed: int) -> Dataset:
    """Replace ``count`` samples of the base class with rotated copies.

    The rotated samples keep their true label (a rotated digit is still that
    digit); they are merely rare, which is what the attack exploits. Their
    indices are recorded in ``edge_members``.
    """
    pool = np.flatnonzero(ds.labels == selector.base_label)
    if len(pool) == 0:
        raise ValueError(f"no samples of base_label {selector.base_label} to rotate")
    if count < 1 or count > len(pool):
        raise ValueError(f"count must be in [1, {len(pool)}], got {count}")
    rng = rng_for(seed, "edgecase", selector.base_label, selector.rotation_degrees)
    chosen = np.sort(rng.choice(pool, size=count, replace=False))
    images = ds.images.copy()
    for i in chosen:
        rotated = ndimage.rotate(
            images[i],
            selector.rotation_degrees,
            axes=(1, 2),
            reshape=False,
            order=1,
            mode="constant",
        )
        images[i] = np.clip(rotated, 0.0, 1.0)
    return Dataset(images, ds.labels.copy(), ds.name, ds.num_classes, edge_members=chosen)


def _eligible_indices(ds: Dataset, spec: AttackSpec) -> np.ndarray:
    if spec.kind == "trigger":
        return np.flatnonzero(ds.labels != spec.target_label)
    if spec.kind == "semantic":
        return np.flatnonzero(ds.labels == spec.source_label)
    if spec.kind == "edgecase":
        return select_edgecase(ds, spec.edge)
    raise ValueError(f"no eligibility rule for attack kind {spec.kind!r}")


def poison_partition(local: Dataset, spec: AttackSpec, salt: int = 0) -> Dataset:
    """Poisoned copy of a client's local dataset.

    floor(poison_fraction * eligible) samples are replaced in place by their
    backdoored versions; everything else is bit-identical to the input. The
    returned dataset always has the same size as the input.
    """
    if spec.kind == "none":
        raise ValueError("poison_partition requires an active attack kind")
    eligible = _eligible_indices(local, spec)
    if len(eligible) == 0 and spec.kind in ("semantic", "edgecase"):
        log.warning(
            "%s attack found no eligible samples in partition %r (salt=%d); "
            "returning it unpoisoned",
            spec.kind,
            local.name,
            salt,
        )
        return local
    count = math.floor(spec.poison_fraction * len(eligible))
    if count == 0:
        return local
    rng = rng_for(spec.seed, "poison", spec.kind, salt)
    chosen = np.sort(rng.choice(eligible, size=count, replace=False))
    images = local.images.copy()
    labels = local.labels.copy()
    if spec.kind == "trigger":
        for i in chosen:
            images[i] = apply_trigger(images[i], spec.trigger)
    labels[chosen] = spec.target_label
    return Dataset(
        images, labels, local.name, local.num_classes, edge_members=local.edge_members
    )


def make_backdoor_testset(clean_test: Dataset, attack: AttackSpec) -> Dataset:
    """Backdoor evaluation set: every eligible test sample gets the attack's
    input transform and the target label.

    Samples whose true label already equals the target are excluded, so the
    backdoor rate measures induced misclassification only.
    """
    if attack.kind == "none":
        raise ValueError("cannot build a backdoor test set for attack kind 'none'")
    eligible = _eligible_indices(clean_test, attack)
    eligible = eligible[clean_test.labels[eligible] != attack.target_label]
    images = clean_test.images[eligible].copy()
    if attack.kind == "trigger":
        for j in range(len(images)):
            images[j] = apply_trigger(images[j], attack.trigger)
    labels = np.full(len(eligible), attack.target_label, dtype=np.int64)
    return Dataset(
        images,
        labels,
        f"{clean_test.name}-backdoor-{attack.kind}",
        clean_test.num_classes,
    )
