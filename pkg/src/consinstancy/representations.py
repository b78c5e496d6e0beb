"""Reference instance representations derived from an instance label map.

For every instance the signed distance value of a pixel is its Euclidean
distance to the closest pixel *not belonging to that instance* (suspension
or another instance alike), normalized by the largest such distance within
the instance, so values lie in (0, 1] on instances and are 0 elsewhere. The
complementary map holds 1 minus that value on instances; by construction
the two maps sum exactly to the binary thing mask. The orientation map is a
three-dimensional unit-vector field: the normalized in-plane gradient of
the unnormalized distance field on instance pixels, and the out-of-plane
vector [0, 0, 1] on stuff pixels.

All maps are channel-last float32 arrays; distance maps carry one channel
per thing class. Everything here is pure and safe to call concurrently.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

OUT_OF_PLANE = np.array([0.0, 0.0, 1.0], dtype=np.float32)

# semantic channel layout: channel 0 is the primary stuff class, thing
# class t maps to channel 1 + t, further channels are extra stuff classes
THING_CHANNEL_OFFSET = 1


def thing_channels(n_thing_classes: int) -> slice:
    """Slice of semantic channels holding the thing classes."""
    return slice(THING_CHANNEL_OFFSET, THING_CHANNEL_OFFSET + n_thing_classes)


@dataclass
class InstanceLabelMap:
    """Per-pixel instance ids (0 = stuff) plus an id -> thing-class mapping.

    ``class_of_instance`` may be omitted, in which case every instance
    belongs to thing class 0 (the single-thing-class mode).
    """

    ids: np.ndarray
    class_of_instance: dict = field(default=None)

    def __post_init__(self):
        self.ids = np.asarray(self.ids)
        if self.ids.ndim != 2:
            raise ValueError(f"ids must be 2D, got shape {self.ids.shape}")

    def present_ids(self):
        values = np.unique(self.ids)
        return [int(v) for v in values if v > 0]

    def thing_class_of(self, instance_id: int) -> int:
        if self.class_of_instance is None:
            return 0
        try:
            return self.class_of_instance[instance_id]
        except KeyError:
            raise KeyError(f"instance id {instance_id} has no class assignment")

    def n_thing_classes(self) -> int:
        if self.class_of_instance is None:
            return 1
        if not self.class_of_instance:
            return 1
        return max(self.class_of_instance.values()) + 1


def class_index_from_labels(labels: InstanceLabelMap, n_classes=None) -> np.ndarray:
    """Per-pixel semantic class index (H, W) int64: stuff -> 0, instances
    -> the channel of their thing class."""
    ids = labels.ids
    class_idx = np.zeros(ids.shape, dtype=np.int64)
    for oid in labels.present_ids():
        cls = THING_CHANNEL_OFFSET + labels.thing_class_of(oid)
        if n_classes is not None and cls >= n_classes:
            raise ValueError(
                f"instance {oid} maps to semantic class {cls} >= n_classes {n_classes}"
            )
        class_idx[ids == oid] = cls
    return class_idx


def semantic_from_labels(labels: InstanceLabelMap, n_classes: int) -> np.ndarray:
    """One-hot semantic map (H, W, n_classes) built from the class index."""
    class_idx = class_index_from_labels(labels, n_classes)
    onehot = np.zeros(class_idx.shape + (n_classes,), dtype=np.float32)
    np.put_along_axis(onehot, class_idx[:, :, None], np.float32(1.0), axis=2)
    return onehot


def thing_mask_from_labels(labels: InstanceLabelMap, n_thing_classes=None) -> np.ndarray:
    """Binary per-thing-class mask (H, W, n_thing) as float32."""
    if n_thing_classes is None:
        n_thing_classes = labels.n_thing_classes()
    h, w = labels.ids.shape
    mask = np.zeros((h, w, n_thing_classes), dtype=np.float32)
    for oid in labels.present_ids():
        mask[labels.ids == oid, labels.thing_class_of(oid)] = 1.0
    return mask


def _instance_regions(ids):
    """Yield (instance_id, row_slice, col_slice, mask_crop, dist_crop) with
    the unnormalized distance-to-complement field on the cropped window.

    The crop is the instance bounding box padded by one pixel (clipped to
    the frame), which always contains the nearest non-instance pixel of
    every instance pixel; pixels outside the frame never count as
    complement. An instance covering the whole frame has no complement and
    gets a constant field of 1.
    """
    present = np.unique(ids)
    for oid in present:
        if oid <= 0:
            continue
        mask = ids == oid
        rows = np.any(mask, axis=1).nonzero()[0]
        cols = np.any(mask, axis=0).nonzero()[0]
        r0 = max(int(rows[0]) - 1, 0)
        r1 = min(int(rows[-1]) + 2, ids.shape[0])
        c0 = max(int(cols[0]) - 1, 0)
        c1 = min(int(cols[-1]) + 2, ids.shape[1])
        rsl, csl = slice(r0, r1), slice(c0, c1)
        crop = mask[rsl, csl]
        if crop.all() and crop.size == ids.size:
            dist = np.ones(crop.shape, dtype=np.float64)
        else:
            dist = ndimage.distance_transform_edt(crop)
        yield int(oid), rsl, csl, crop, dist


def instance_sdt(labels: InstanceLabelMap, n_thing_classes=None) -> np.ndarray:
    """Instance-aware normalized distance map (H, W, n_thing), float32.

    Each instance pixel holds min-distance-to-complement divided by the
    per-instance maximum of those min distances; the maximum is exactly 1.
    Stuff pixels are 0. A pixel of a one-pixel instance is 1.
    """
    if n_thing_classes is None:
        n_thing_classes = labels.n_thing_classes()
    h, w = labels.ids.shape
    out = np.zeros((h, w, n_thing_classes), dtype=np.float32)
    for oid, rsl, csl, crop, dist in _instance_regions(labels.ids):
        channel = labels.thing_class_of(oid)
        dmax = dist[crop].max()
        out[rsl, csl, channel][crop] = (dist[crop] / dmax).astype(np.float32)
    return out


def complement_sdt(delta_plus: np.ndarray, thing_mask: np.ndarray) -> np.ndarray:
    """Complementary map: ``thing_mask - delta_plus``.

    Computed in float32 so that ``delta_plus + complement == thing_mask``
    holds bitwise (1 - x followed by + x round-trips exactly for float32
    x in [0, 1]).
    """
    delta_plus = np.asarray(delta_plus, dtype=np.float32)
    thing_mask = np.asarray(thing_mask, dtype=np.float32)
    if delta_plus.shape != thing_mask.shape:
        raise ValueError(f"shape mismatch: {delta_plus.shape} vs {thing_mask.shape}")
    if delta_plus.min() < 0 or delta_plus.max() > 1:
        raise ValueError("delta_plus values outside [0, 1]")
    if not np.isin(thing_mask, (np.float32(0), np.float32(1))).all():
        raise ValueError("thing_mask must be binary")
    if ((thing_mask == 0) & (delta_plus != 0)).any():
        raise ValueError("delta_plus nonzero outside the thing mask")
    return thing_mask - delta_plus


def orientation_from_labels(labels: InstanceLabelMap) -> np.ndarray:
    """Orientation field (H, W, 3), float32, unit-norm per pixel.

    Instance pixels carry [gx, gy, 0]: the unit-normalized discrete
    gradient (x = columns, y = rows) of the unnormalized per-instance
    distance field, central differences where both neighbours stay inside
    the instance and one-sided at instance borders. The gradient points
    along increasing distance, i.e. inward. Pixels with a vanishing
    discrete gradient fall back to the in-plane direction toward the
    instance centroid, and to [1, 0, 0] if that is zero too. Stuff pixels
    are exactly [0, 0, 1].
    """
    h, w = labels.ids.shape
    theta = np.zeros((h, w, 3), dtype=np.float32)
    theta[:, :, 2] = 1.0

    for _, rsl, csl, crop, dist in _instance_regions(labels.ids):
        gx = _masked_gradient(dist, crop, axis=1)
        gy = _masked_gradient(dist, crop, axis=0)
        norm = np.sqrt(gx ** 2 + gy ** 2)

        ys, xs = np.nonzero(crop)
        cy, cx = ys.mean(), xs.mean()
        vals = np.zeros((len(ys), 3), dtype=np.float64)
        for i, (r, c) in enumerate(zip(ys, xs)):
            n = norm[r, c]
            if n > 0:
                vals[i, 0] = gx[r, c] / n
                vals[i, 1] = gy[r, c] / n
            else:
                vx, vy = cx - c, cy - r
                m = np.hypot(vx, vy)
                if m > 0:
                    vals[i, 0] = vx / m
                    vals[i, 1] = vy / m
                else:
                    vals[i, 0] = 1.0
        view = theta[rsl, csl]
        view[ys, xs] = vals.astype(np.float32)
    return theta


def _masked_gradient(dist, mask, axis):
    """Finite differences of ``dist`` along ``axis``, restricted to ``mask``:
    central where both neighbours are inside, one-sided at borders, 0 when
    neither neighbour is inside."""
    dpad = np.pad(dist, 1, mode="constant")
    mpad = np.pad(mask, 1, mode="constant", constant_values=False)
    if axis == 1:
        before, after = (slice(1, -1), slice(0, -2)), (slice(1, -1), slice(2, None))
    else:
        before, after = (slice(0, -2), slice(1, -1)), (slice(2, None), slice(1, -1))
    m_lo, m_hi = mpad[before], mpad[after]
    d_lo, d_hi = dpad[before], dpad[after]
    grad = np.zeros_like(dist)
    both = m_lo & m_hi & mask
    lo_only = m_lo & ~m_hi & mask
    hi_only = m_hi & ~m_lo & mask
    grad[both] = (d_hi[both] - d_lo[both]) / 2.0
    grad[lo_only] = dist[lo_only] - d_lo[lo_only]
    grad[hi_only] = d_hi[hi_only] - dist[hi_only]
    return grad


def consistency_residual(y_thing: np.ndarray, delta_plus: np.ndarray,
                         delta_minus: np.ndarray):
    """Residual of the thing-mask identity: ``y_thing - (delta+ + delta-)``.

    Returns ``(scalar, residual_map)`` where the scalar sums the per-channel
    mean squared residuals. Exactly 0 on reference maps of the same labels.
    """
    y_thing = np.asarray(y_thing)
    delta_plus = np.asarray(delta_plus)
    delta_minus = np.asarray(delta_minus)
    if not (y_thing.shape == delta_plus.shape == delta_minus.shape):
        raise ValueError(
            f"shape mismatch: {y_thing.shape}, {delta_plus.shape}, {delta_minus.shape}"
        )
    residual = y_thing - (delta_plus + delta_minus)
    per_channel = np.mean(
        np.square(residual.astype(np.float64)), axis=tuple(range(residual.ndim - 1))
    )
    return float(per_channel.sum()), residual


def reference_maps(labels: InstanceLabelMap, n_classes: int):
    """All reference representations for one label map.

    Returns ``(semantic, orientation, delta_plus, delta_minus)``; the
    distance maps carry one channel per thing class implied by the semantic
    layout (``n_classes - 1`` channels).
    """
    n_thing = n_classes - THING_CHANNEL_OFFSET
    semantic = semantic_from_labels(labels, n_classes)
    delta_plus = instance_sdt(labels, n_thing_classes=n_thing)
    mask = thing_mask_from_labels(labels, n_thing_classes=n_thing)
    delta_minus = complement_sdt(delta_plus, mask)
    orientation = orientation_from_labels(labels)
    return semantic, orientation, delta_plus, delta_minus
