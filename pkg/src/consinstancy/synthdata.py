"""Deterministic synthetic particle-scene generator.

Scenes mimic grayscale images of convex particles dispersed in a lighter
suspension: non-overlapping rasterized ellipses that may optionally share
boundaries with neighbours. Two rendering regimes are supported via
``boundary_softness``: 0 gives crisp particle outlines, positive values blur
and fade a random subset of each particle's outline so that parts of it
become indistinct. Everything is a pure function of (spec, seed).
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import tensorio

_FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)
_EIGHT_CONN = np.ones((3, 3), dtype=bool)

_MAX_ATTEMPTS_PER_PARTICLE = 60
_BACKGROUND_LEVEL = 0.62


class SceneTooDenseError(RuntimeError):
    """Raised when a particle cannot be placed within the attempt budget."""


@dataclass(frozen=True)
class SceneSpec:
    """Parameters of one scene family.

    ``adjacency_prob`` is the probability that a new particle is placed
    touching an already placed one (sharing an 8-neighbour boundary);
    otherwise particles keep at least a one-pixel gap. ``boundary_softness``
    is the Gaussian blur sigma applied to the faded parts of particle
    outlines (0 disables fading). ``texture_scale`` is the amplitude of the
    smooth background texture. ``seed`` is the base seed used for dataset
    item derivation.
    """

    height: int = 64
    width: int = 64
    particle_count_range: tuple[int, int] = (3, 8)
    radius_range: tuple[float, float] = (4.0, 9.0)
    adjacency_prob: float = 0.0
    boundary_softness: float = 0.0
    noise_std: float = 0.02
    texture_scale: float = 0.03
    seed: int = 0

    def validate(self):
        cmin, cmax = self.particle_count_range
        rmin, rmax = self.radius_range
        if self.height < 4 or self.width < 4:
            raise ValueError(f"frame too small: {self.height}x{self.width}")
        if not (0 <= cmin <= cmax):
            raise ValueError(f"bad particle_count_range {self.particle_count_range}")
        if not (0 < rmin <= rmax):
            raise ValueError(f"bad radius_range {self.radius_range}")
        if rmax * 2 >= min(self.height, self.width):
            raise ValueError(
                f"max radius {rmax} too large for {self.height}x{self.width} frame"
            )
        if not 0.0 <= self.adjacency_prob <= 1.0:
            raise ValueError(f"adjacency_prob {self.adjacency_prob} outside [0, 1]")
        if not 0.0 <= self.noise_std <= 1.0:
            raise ValueError(f"noise_std {self.noise_std} outside [0, 1]")
        if self.boundary_softness < 0:
            raise ValueError("boundary_softness must be >= 0")
        return self

    def to_dict(self):
        d = asdict(self)
        d["particle_count_range"] = list(self.particle_count_range)
        d["radius_range"] = list(self.radius_range)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["particle_count_range"] = tuple(d["particle_count_range"])
        d["radius_range"] = tuple(d["radius_range"])
        return cls(**d)


def _ellipse_mask(height, width, cy, cx, a, b, phi):
    """Rasterize an ellipse by pixel-center inclusion; None if it leaves the frame."""
    ext_x = np.sqrt((a * np.cos(phi)) ** 2 + (b * np.sin(phi)) ** 2)
    ext_y = np.sqrt((a * np.sin(phi)) ** 2 + (b * np.cos(phi)) ** 2)
    if cx - ext_x < 0 or cx + ext_x > width - 1 or cy - ext_y < 0 or cy + ext_y > height - 1:
        return None
    rows = np.arange(height, dtype=np.float64)[:, None]
    cols = np.arange(width, dtype=np.float64)[None, :]
    dx = cols - cx
    dy = rows - cy
    u = dx * np.cos(phi) + dy * np.sin(phi)
    v = -dx * np.sin(phi) + dy * np.cos(phi)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _is_single_4component(mask):
    _, n = ndimage.label(mask, structure=_FOUR_CONN)
    return n == 1


def generate_scene(spec: SceneSpec, seed: int):
    """Generate one scene.

    Returns ``(image, ids)`` where ``image`` is float32 (H, W) in [0, 1] and
    ``ids`` is int32 (H, W) with 0 for suspension and 1..K for particles.
    Identical ``(spec, seed)`` yields bit-identical arrays.

    Raises :class:`SceneTooDenseError` when the sampled particle count
    cannot be placed within the attempt budget.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    h, w = spec.height, spec.width
    cmin, cmax = spec.particle_count_range
    rmin, rmax = spec.radius_range

    count = int(rng.integers(cmin, cmax + 1))
    ids = np.zeros((h, w), dtype=np.int32)
    occupied = np.zeros((h, w), dtype=bool)
    centers = []

    for k in range(count):
        placed = False
        for _ in range(_MAX_ATTEMPTS_PER_PARTICLE):
            a = rng.uniform(rmin, rmax)
            b = rng.uniform(rmin, rmax)
            phi = rng.uniform(0.0, np.pi)
            touch = len(centers) > 0 and rng.random() < spec.adjacency_prob
            if touch:
                mask = _place_touching(rng, spec, occupied, centers, a, b, phi)
            else:
                cy = rng.uniform(rmax, h - 1 - rmax)
                cx = rng.uniform(rmax, w - 1 - rmax)
                mask = _ellipse_mask(h, w, cy, cx, a, b, phi)
                if mask is not None:
                    # keep a clear gap so chance adjacency cannot occur
                    blocked = ndimage.binary_dilation(occupied, structure=_EIGHT_CONN)
                    if (mask & blocked).any():
                        mask = None
            if mask is None or not mask.any() or not _is_single_4component(mask):
                continue
            ids[mask] = k + 1
            occupied |= mask
            ys, xs = np.nonzero(mask)
            centers.append((float(ys.mean()), float(xs.mean())))
            placed = True
            break
        if not placed:
            raise SceneTooDenseError(
                f"could not place particle {k + 1}/{count} after "
                f"{_MAX_ATTEMPTS_PER_PARTICLE} attempts; spec too dense"
            )

    image = _render(rng, spec, ids, count)
    return image, ids


def _place_touching(rng, spec, occupied, centers, a, b, phi):
    """March a candidate ellipse away from an existing particle until the
    masks stop overlapping; accept only if it ends up 8-adjacent."""
    h, w = occupied.shape
    anchor = centers[int(rng.integers(len(centers)))]
    direction = rng.uniform(0.0, 2.0 * np.pi)
    dy, dx = np.sin(direction), np.cos(direction)
    for step in range(1, h + w):
        cy = anchor[0] + dy * step
        cx = anchor[1] + dx * step
        mask = _ellipse_mask(h, w, cy, cx, a, b, phi)
        if mask is None:
            return None
        if not (mask & occupied).any():
            ring = ndimage.binary_dilation(mask, structure=_EIGHT_CONN) & ~mask
            if (ring & occupied).any():
                return mask
            return None
    return None


def _render(rng, spec, ids, count):
    """Render the intensity image; label-independent appearance only."""
    h, w = ids.shape
    background = np.full((h, w), _BACKGROUND_LEVEL, dtype=np.float64)
    if spec.texture_scale > 0:
        tex = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=6.0)
        peak = np.abs(tex).max()
        if peak > 0:
            background += spec.texture_scale * tex / peak

    image = background.copy()
    for k in range(1, count + 1):
        mask = ids == k
        shade = rng.uniform(0.10, 0.42)
        image[mask] = shade

    if spec.boundary_softness > 0 and count > 0:
        image = _soften_boundaries(rng, spec, ids, image, count)

    if spec.noise_std > 0:
        image = image + rng.normal(0.0, spec.noise_std, size=(h, w))

    return np.clip(image, 0.0, 1.0).astype(np.float32)


def _soften_boundaries(rng, spec, ids, image, count):
    """Fade a random angular arc of each particle outline toward the blur."""
    h, w = ids.shape
    fade = np.zeros((h, w), dtype=bool)
    for k in range(1, count + 1):
        mask = ids == k
        if not mask.any():
            continue
        shell = mask & ~ndimage.binary_erosion(mask, structure=_EIGHT_CONN)
        ys, xs = np.nonzero(shell)
        if len(ys) == 0:
            continue
        cy, cx = ys.mean(), xs.mean()
        angles = np.arctan2(ys - cy, xs - cx)
        start = rng.uniform(-np.pi, np.pi)
        frac = rng.uniform(0.3, 0.8)
        rel = np.mod(angles - start, 2.0 * np.pi)
        picked = rel <= frac * 2.0 * np.pi
        fade[ys[picked], xs[picked]] = True

    fade = ndimage.binary_dilation(fade, structure=_EIGHT_CONN, iterations=2)
    alpha = ndimage.gaussian_filter(fade.astype(np.float64), sigma=1.5)
    peak = alpha.max()
    if peak > 0:
        alpha = np.clip(alpha / peak, 0.0, 1.0)
    blurred = ndimage.gaussian_filter(image, sigma=spec.boundary_softness)
    soft = 0.55 * blurred + 0.45 * _BACKGROUND_LEVEL
    return (1.0 - alpha) * image + alpha * soft


@dataclass
class DatasetManifest:
    """Index of a generated split: labeled (image, label) pairs plus
    unlabeled images, with paths relative to ``root``."""

    root: Path
    split_name: str
    spec: SceneSpec
    labeled_items: list = field(default_factory=list)
    unlabeled_items: list = field(default_factory=list)

    def labeled_paths(self):
        return [(self.root / img, self.root / lbl) for img, lbl in self.labeled_items]

    def unlabeled_paths(self):
        return [self.root / p for p in self.unlabeled_items]

    def validate(self, check_files=True):
        flat = [p for pair in self.labeled_items for p in pair] + list(self.unlabeled_items)
        if len(set(flat)) != len(flat):
            raise ValueError("manifest paths are not disjoint")
        if check_files:
            for rel in flat:
                if not (self.root / rel).exists():
                    raise FileNotFoundError(f"manifest entry missing: {self.root / rel}")

    def save(self, path):
        path = Path(path)
        payload = {
            "split_name": self.split_name,
            "spec": self.spec.to_dict(),
            "labeled_items": [list(pair) for pair in self.labeled_items],
            "unlabeled_items": list(self.unlabeled_items),
        }
        path.write_text(json.dumps(payload, indent=1, sort_keys=True))
        return path

    @classmethod
    def load(cls, path):
        path = Path(path)
        payload = json.loads(path.read_text())
        return cls(
            root=path.parent,
            split_name=payload["split_name"],
            spec=SceneSpec.from_dict(payload["spec"]),
            labeled_items=[tuple(pair) for pair in payload["labeled_items"]],
            unlabeled_items=list(payload["unlabeled_items"]),
        )


def generate_dataset(spec: SceneSpec, n_labeled: int, n_unlabeled: int, out_dir,
                     split_name: str = "train") -> DatasetManifest:
    """Write a dataset split to disk and return its manifest.

    Item ``i`` of the split is generated with seed ``spec.seed + i``
    (labeled items first), so splits are reproducible item by item. Images
    are 8-bit PNG, label maps 16-bit PNG; the manifest JSON is written next
    to them as ``<split_name>_manifest.json``.
    """
    if n_labeled < 0 or n_unlabeled < 0:
        raise ValueError("item counts must be >= 0")
    spec.validate()
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "labels").mkdir(parents=True, exist_ok=True)

    manifest = DatasetManifest(root=out_dir, split_name=split_name, spec=spec)
    for i in range(n_labeled):
        image, ids = generate_scene(spec, spec.seed + i)
        img_rel = f"images/{split_name}_labeled_{i:04d}.png"
        lbl_rel = f"labels/{split_name}_labeled_{i:04d}.png"
        tensorio.write_image_png(out_dir / img_rel, image)
        tensorio.write_label_png(out_dir / lbl_rel, ids)
        manifest.labeled_items.append((img_rel, lbl_rel))
    for j in range(n_unlabeled):
        image, _ = generate_scene(spec, spec.seed + n_labeled + j)
        img_rel = f"images/{split_name}_unlabeled_{j:04d}.png"
        tensorio.write_image_png(out_dir / img_rel, image)
        manifest.unlabeled_items.append(img_rel)

    manifest.validate(check_files=True)
    manifest.save(out_dir / f"{split_name}_manifest.json")
    return manifest
