"""Post-processing: semantic scores + complementary distance map -> panoptic map.

Per thing class, pixels whose complementary distance exceeds a threshold
form a boundary band. Removing the band from the predicted class mask
leaves instance interiors, whose 4-connected components receive fresh ids;
the band is then re-assigned by growing all interiors outward simultaneously
(4-neighborhood rounds, ties to the smaller id), so every class-mask pixel
ends up with exactly one id. Band blobs that touch no interior become their
own instances, preserving the partition property.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .representations import THING_CHANNEL_OFFSET
from .tensorio import read_label_png, write_label_png

# 4-connectivity; 8-connectivity would fuse diagonal neighbors across the
# one-pixel boundary band
_CROSS = ndimage.generate_binary_structure(2, 1)

_SHIFTS = ((1, 0), (-1, 0), (0, 1), (0, -1))


@dataclass
class PanopticMap:
    """Per-pixel semantic class plus per-pixel instance id (0 on stuff)."""

    class_of_pixel: np.ndarray
    id_of_pixel: np.ndarray

    def __post_init__(self):
        self.class_of_pixel = np.asarray(self.class_of_pixel, dtype=np.int32)
        self.id_of_pixel = np.asarray(self.id_of_pixel, dtype=np.int32)
        if self.class_of_pixel.shape != self.id_of_pixel.shape:
            raise ValueError(
                f"shape mismatch: {self.class_of_pixel.shape} vs {self.id_of_pixel.shape}"
            )
        if ((self.id_of_pixel > 0) & (self.class_of_pixel < THING_CHANNEL_OFFSET)).any():
            raise ValueError("instance ids present on stuff pixels")

    def ids_by_class(self):
        out = {}
        for cls in np.unique(self.class_of_pixel):
            sel = self.id_of_pixel[self.class_of_pixel == cls]
            out[int(cls)] = [int(i) for i in np.unique(sel[sel > 0])]
        return out


def extract_boundaries(delta_minus, tau=0.9):
    """Binary boundary mask per thing class: delta_minus >= tau."""
    delta_minus = np.asarray(delta_minus)
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    if delta_minus.min() < 0 or delta_minus.max() > 1:
        raise ValueError("delta_minus values outside [0, 1]")
    return delta_minus >= tau


def _grow_into_band(region, band):
    """Assign every reachable zero pixel of ``band`` the minimum positive
    4-neighbor id, in synchronous rounds until a fixed point."""
    region = region.astype(np.int64, copy=True)
    h, w = region.shape
    sentinel = np.iinfo(np.int64).max
    while True:
        todo = band & (region == 0)
        if not todo.any():
            break
        padded = np.pad(region, 1)
        best = np.full(region.shape, sentinel, dtype=np.int64)
        for dr, dc in _SHIFTS:
            neighbor = padded[1 + dr:1 + dr + h, 1 + dc:1 + dc + w]
            best = np.where(todo & (neighbor > 0), np.minimum(best, neighbor), best)
        newly = todo & (best < sentinel)
        if not newly.any():
            break
        region[newly] = best[newly]
    return region


def panoptic_segment(pred_y, delta_minus, tau=0.9) -> PanopticMap:
    """Split each predicted thing-class mask into instances along the
    thresholded complementary distance map."""
    pred_y = np.asarray(pred_y)
    delta_minus = np.asarray(delta_minus)
    if pred_y.shape[:2] != delta_minus.shape[:2]:
        raise ValueError(f"shape mismatch: {pred_y.shape} vs {delta_minus.shape}")
    n_thing = delta_minus.shape[2]
    if pred_y.shape[2] < THING_CHANNEL_OFFSET + n_thing:
        raise ValueError(
            f"semantic map has {pred_y.shape[2]} channels, need at least "
            f"{THING_CHANNEL_OFFSET + n_thing}"
        )

    class_of_pixel = np.argmax(pred_y, axis=2).astype(np.int32)
    boundary = extract_boundaries(delta_minus, tau)
    id_of_pixel = np.zeros(class_of_pixel.shape, dtype=np.int32)
    next_id = 1
    for t in range(n_thing):
        mask = class_of_pixel == THING_CHANNEL_OFFSET + t
        if not mask.any():
            continue
        band = mask & boundary[:, :, t]
        interior = mask & ~band
        components, n_components = ndimage.label(interior, structure=_CROSS)
        region = np.where(components > 0, components + (next_id - 1), 0)
        region = _grow_into_band(region, band)
        orphan = band & (region == 0)
        orphan_components, n_orphans = ndimage.label(orphan, structure=_CROSS)
        region[orphan] = orphan_components[orphan] + (next_id + n_components - 1)
        next_id += n_components + n_orphans
        id_of_pixel[mask] = region[mask]
    return PanopticMap(class_of_pixel, id_of_pixel)


def connected_component_segment(pred_y) -> PanopticMap:
    """Instance fallback for segmentation-only predictions: 4-connected
    components of each thing-class mask become the instances."""
    pred_y = np.asarray(pred_y)
    class_of_pixel = np.argmax(pred_y, axis=2).astype(np.int32)
    id_of_pixel = np.zeros(class_of_pixel.shape, dtype=np.int32)
    next_id = 1
    for cls in range(THING_CHANNEL_OFFSET, pred_y.shape[2]):
        mask = class_of_pixel == cls
        if not mask.any():
            continue
        components, n_components = ndimage.label(mask, structure=_CROSS)
        id_of_pixel[mask] = components[mask] + (next_id - 1)
        next_id += n_components
    return PanopticMap(class_of_pixel, id_of_pixel)


def save_panoptic(stem, pmap: PanopticMap, meta=None):
    """Persist as {stem}.class.png, {stem}.id.png, {stem}.panoptic.json."""
    stem = str(stem)
    write_label_png(Path(stem + ".class.png"), pmap.class_of_pixel)
    write_label_png(Path(stem + ".id.png"), pmap.id_of_pixel)
    sidecar = {"ids_by_class": {str(k): v for k, v in pmap.ids_by_class().items()}}
    if meta:
        sidecar.update(meta)
    with open(stem + ".panoptic.json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_panoptic(stem):
    stem = str(stem)
    class_of_pixel = read_label_png(Path(stem + ".class.png"))
    id_of_pixel = read_label_png(Path(stem + ".id.png"))
    with open(stem + ".panoptic.json", encoding="utf-8") as fh:
        sidecar = json.load(fh)
    return PanopticMap(class_of_pixel, id_of_pixel), sidecar
