"""Multi-annotator edge datasets: label combination, granularity
normalization, synthetic corpus generation and training batches."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from .errors import (
    DegenerateAnnotationError,
    DegenerateGranularityError,
    ValidationError,
)


@dataclass
class AnnotatedImage:
    """RGB image in [0, 1] with K binary annotator edge maps."""

    image: np.ndarray                 # (H, W, 3)
    annotations: list[np.ndarray]     # K maps, (H, W), values {0, 1}
    id: str

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValidationError(f"image must be (H, W, 3), got {self.image.shape}")
        if len(self.annotations) < 1:
            raise ValidationError("need at least one annotation")
        shape = self.image.shape[:2]
        maps = []
        for k, ann in enumerate(self.annotations):
            arr = np.asarray(ann)
            if arr.shape != shape:
                raise ValidationError(
                    f"annotation {k} shape {arr.shape} != image shape {shape}"
                )
            if not np.isin(arr, (0, 1)).all():
                raise ValidationError(f"annotation {k} is not binary")
            maps.append(arr.astype(np.uint8))
        self.annotations = maps


@dataclass
class GranularitySample:
    """One combined edge map with its granularity; granularity None means
    conditioning is disabled (single annotator / equal counts)."""

    edge_map: np.ndarray
    granularity: float | None
    subset: frozenset[int]

    def __post_init__(self):
        if not self.subset:
            raise ValidationError("subset must be nonempty")
        if self.granularity is not None and not 0.0 <= self.granularity <= 1.0:
            raise ValidationError(f"granularity {self.granularity} outside [0, 1]")


@dataclass
class ManifestEntry:
    id: str
    image: str
    annotations: list[str]


@dataclass
class DatasetManifest:
    split: str
    granularity_bounds: tuple[int, int]
    entries: list[ManifestEntry]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        lo, hi = self.granularity_bounds
        if lo < 0 or hi < lo:
            raise ValidationError(f"bad granularity bounds ({lo}, {hi})")

    def image_path(self, entry: ManifestEntry) -> Path:
        return self.root / entry.image

    def annotation_paths(self, entry: ManifestEntry) -> list[Path]:
        return [self.root / a for a in entry.annotations]


@dataclass(frozen=True)
class AugmentConfig:
    crop_size: tuple[int, int] = (320, 320)
    enable_scale: bool = False
    enable_flip: bool = True
    enable_crop: bool = True

    scale_choices: tuple[float, ...] = (0.75, 1.0, 1.25)


def enumerate_label_subsets(k: int) -> list[tuple[int, ...]]:
    """All subsets of {1..K} with size >= 2, in lexicographic order."""
    if k < 2:
        raise DegenerateAnnotationError(
            f"K={k}: need at least 2 annotators to combine labels"
        )
    subsets = []
    for n in range(2, k + 1):
        subsets.extend(itertools.combinations(range(1, k + 1), n))
    subsets.sort()
    return subsets


def combine_labels(annotations, subset) -> np.ndarray:
    """Pixel-wise OR of the selected (1-based) annotator maps."""
    if not subset:
        raise ValidationError("subset must be nonempty")
    picked = []
    shape = None
    for idx in sorted(subset):
        if not 1 <= idx <= len(annotations):
            raise ValidationError(f"annotator index {idx} out of range")
        arr = np.asarray(annotations[idx - 1])
        if shape is None:
            shape = arr.shape
        elif arr.shape != shape:
            raise ValidationError(f"shape mismatch {arr.shape} vs {shape}")
        picked.append(arr)
    out = picked[0].astype(bool)
    for arr in picked[1:]:
        out |= arr.astype(bool)
    return out.astype(np.uint8)


def compute_granularities(combined_maps) -> list[float]:
    """Min-max normalize edge-pixel counts over the list to [0, 1]."""
    if len(combined_maps) < 2:
        raise DegenerateGranularityError("need at least two maps to normalize")
    counts = [int(np.asarray(m).sum()) for m in combined_maps]
    lo, hi = min(counts), max(counts)
    if lo == hi:
        raise DegenerateGranularityError(f"all edge-pixel counts equal ({lo})")
    return [(c - lo) / (hi - lo) for c in counts]


def build_label_pool(sample: AnnotatedImage) -> list[GranularitySample]:
    """Combined-label pool with granularities; falls back to disabled
    conditioning for single-annotator or equal-count inputs."""
    k = len(sample.annotations)
    if k == 1:
        return [GranularitySample(sample.annotations[0], None, frozenset({1}))]
    subsets = enumerate_label_subsets(k)
    maps = [combine_labels(sample.annotations, s) for s in subsets]
    try:
        grans = compute_granularities(maps)
    except DegenerateGranularityError:
        grans = [None] * len(maps)
    return [
        GranularitySample(m, g, frozenset(s))
        for m, g, s in zip(maps, grans, subsets)
    ]


def _resize_image(image, size):
    import torch
    from torch.nn import functional as F

    t = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=size, mode="bilinear", align_corners=False)
    return out[0].permute(1, 2, 0).numpy()


def _resize_map(edge_map, size):
    import torch
    from torch.nn import functional as F

    t = torch.from_numpy(np.ascontiguousarray(edge_map, dtype=np.float32))
    out = F.interpolate(t[None, None], size=size, mode="nearest")
    return out[0, 0].numpy().astype(np.uint8)


def train_batch(sample: AnnotatedImage, rng, config: AugmentConfig, pool=None):
    """One augmented image crop plus 4 identically-cropped granularity
    samples drawn from the combined-label pool.

    Granularities come from the full-image pool and are not recomputed for
    the crop.
    """
    if pool is None:
        pool = build_label_pool(sample)

    image = sample.image
    maps = [s.edge_map for s in pool]

    if config.enable_scale:
        factor = float(rng.choice(config.scale_choices))
        if factor != 1.0:
            h = int(round(image.shape[0] * factor))
            w = int(round(image.shape[1] * factor))
            image = _resize_image(image, (h, w))
            maps = [_resize_map(m, (h, w)) for m in maps]

    if config.enable_crop:
        ch, cw = config.crop_size
        h, w = image.shape[:2]
        if h < ch or w < cw:
            raise ValidationError(
                f"image {h}x{w} smaller than crop {ch}x{cw} after scaling"
            )
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        image = image[top:top + ch, left:left + cw]
        maps = [m[top:top + ch, left:left + cw] for m in maps]

    if config.enable_flip and rng.random() < 0.5:
        image = image[:, ::-1]
        maps = [m[:, ::-1] for m in maps]

    n = len(pool)
    idx = rng.choice(n, size=4, replace=n < 4)
    samples = [
        GranularitySample(
            np.ascontiguousarray(maps[i]), pool[i].granularity, pool[i].subset
        )
        for i in idx
    ]
    return np.ascontiguousarray(image), samples


# --- manifest I/O ------------------------------------------------------------


def save_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    doc = {
        "split": manifest.split,
        "granularity_bounds": list(manifest.granularity_bounds),
        "entries": [
            {"id": e.id, "image": e.image, "annotations": list(e.annotations)}
            for e in manifest.entries
        ],
    }
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return path


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"manifest not found: {path}")
    doc = json.loads(path.read_text(encoding="utf-8"))
    try:
        entries = [
            ManifestEntry(e["id"], e["image"], list(e["annotations"]))
            for e in doc["entries"]
        ]
        manifest = DatasetManifest(
            split=doc["split"],
            granularity_bounds=tuple(doc["granularity_bounds"]),
            entries=entries,
            root=path.parent,
        )
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed manifest {path}: {exc}") from exc
    for entry in manifest.entries:
        missing = [
            p for p in [manifest.image_path(entry), *manifest.annotation_paths(entry)]
            if not p.is_file()
        ]
        if missing:
            raise ValidationError(f"missing files for entry {entry.id}: {missing}")
    return manifest


def load_annotated_image(manifest: DatasetManifest, entry: ManifestEntry):
    image = np.asarray(Image.open(manifest.image_path(entry)).convert("RGB"))
    anns = [
        (np.asarray(Image.open(p).convert("L")) > 127).astype(np.uint8)
        for p in manifest.annotation_paths(entry)
    ]
    return AnnotatedImage(image / 255.0, anns, entry.id)


# --- synthetic corpus ---------------------------------------------------------


def _draw_shape_mask(rng, size):
    h, w = size
    img = Image.new("L", (w, h), 0)
    draw = ImageDraw.Draw(img)
    if rng.random() < 0.5:
        cx = rng.uniform(0.2 * w, 0.8 * w)
        cy = rng.uniform(0.2 * h, 0.8 * h)
        ax = rng.uniform(0.08 * w, 0.24 * w)
        ay = rng.uniform(0.08 * h, 0.24 * h)
        draw.ellipse([cx - ax, cy - ay, cx + ax, cy + ay], fill=255)
    else:
        n_pts = int(rng.integers(5, 9))
        cx = rng.uniform(0.25 * w, 0.75 * w)
        cy = rng.uniform(0.25 * h, 0.75 * h)
        radii = rng.uniform(0.08, 0.26, n_pts) * min(h, w)
        angles = np.sort(rng.uniform(0, 2 * np.pi, n_pts))
        pts = [
            (cx + r * np.cos(a), cy + r * np.sin(a))
            for r, a in zip(radii, angles)
        ]
        draw.polygon(pts, fill=255)
    return np.asarray(img) > 0


def _label_boundaries(labels):
    """1px-thin boundary marks where the label changes to the right or below."""
    edges = np.zeros(labels.shape, dtype=bool)
    edges[:, :-1] |= labels[:, :-1] != labels[:, 1:]
    edges[:-1, :] |= labels[:-1, :] != labels[1:, :]
    return edges


def _draw_lines_mask(rng, size, segments):
    h, w = size
    img = Image.new("L", (w, h), 0)
    draw = ImageDraw.Draw(img)
    for pts in segments:
        draw.line([(float(x), float(y)) for y, x in pts], fill=255, width=1)
    return np.asarray(img) > 0


def _random_polyline(rng, size, n_pts, max_step):
    h, w = size
    y = rng.uniform(4, h - 4)
    x = rng.uniform(4, w - 4)
    pts = [(y, x)]
    for _ in range(n_pts - 1):
        y = float(np.clip(y + rng.uniform(-max_step, max_step), 2, h - 2))
        x = float(np.clip(x + rng.uniform(-max_step, max_step), 2, w - 2))
        pts.append((y, x))
    return pts


def _grow_tier(rng, size, base, region, image, darken, make_segments):
    """Add drawn detail until the edge count strictly increases."""
    tier = base.copy()
    for _ in range(64):
        mask = _draw_lines_mask(rng, size, make_segments()) & region
        tier |= mask
        image[mask] *= darken
        if tier.sum() > base.sum():
            return tier
    raise RuntimeError("failed to grow annotation tier")


def _make_synthetic_image(rng, size):
    h, w = size
    coarse = rng.normal(0.0, 0.06, (5, 5, 3))
    field = ndimage.zoom(coarse, (h / 5, w / 5, 1), order=1)[:h, :w]
    base = rng.uniform(0.35, 0.75, 3)
    image = np.clip(base + field, 0.02, 0.98)

    labels = np.zeros((h, w), dtype=np.int32)
    n_shapes = int(rng.integers(2, 5))
    for s in range(n_shapes):
        mask = _draw_shape_mask(rng, size)
        color = rng.uniform(0.05, 0.95, 3)
        image[mask] = color
        labels[mask] = s + 1

    tier1 = _label_boundaries(labels)

    def chords():
        segs = []
        for s in range(1, n_shapes + 1):
            ys, xs = np.nonzero(labels == s)
            if len(ys) < 32:
                continue
            for _ in range(int(rng.integers(1, 3))):
                a, b = rng.integers(0, len(ys), 2)
                segs.append([(ys[a], xs[a]), (ys[b], xs[b])])
        if not segs:
            segs.append([_random_polyline(rng, size, 2, 40)[0],
                         _random_polyline(rng, size, 2, 40)[1]])
        return segs

    interior = ndimage.binary_erosion(labels > 0, iterations=2)
    if not interior.any():
        interior = np.ones((h, w), dtype=bool)
    tier2 = _grow_tier(rng, size, tier1, interior, image, 0.55, chords)

    def bg_lines():
        return [
            _random_polyline(rng, size, int(rng.integers(3, 6)), 50)
            for _ in range(int(rng.integers(2, 5)))
        ]

    tier3 = _grow_tier(rng, size, tier2, labels == 0, image, 0.7, bg_lines)

    def speckle():
        return [
            _random_polyline(rng, size, 2, 12)
            for _ in range(int(rng.integers(8, 15)))
        ]

    everywhere = np.ones((h, w), dtype=bool)
    tier4 = _grow_tier(rng, size, tier3, everywhere, image, 0.85, speckle)

    image = np.clip(image + rng.normal(0.0, 0.01, image.shape), 0.0, 1.0)
    tiers = [tier1, tier2, tier3, tier4]
    counts = [int(t.sum()) for t in tiers]
    assert all(b > a for a, b in zip(counts, counts[1:])), counts
    return image, tiers


def generate_synthetic_corpus(
    n_images, seed, out_dir, image_size=(192, 192), split="train"
) -> DatasetManifest:
    """Deterministic corpus of shapes on textured backgrounds with 4 nested
    annotation tiers of strictly increasing edge-pixel count."""
    if n_images < 1:
        raise ValidationError("n_images must be >= 1")
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "annotations").mkdir(parents=True, exist_ok=True)

    entries = []
    all_counts = []
    for i in range(n_images):
        rng = np.random.default_rng([seed, i])
        image, tiers = _make_synthetic_image(rng, image_size)
        image_id = f"synth_{i:04d}"
        img_rel = f"images/{image_id}.png"
        Image.fromarray((image * 255).round().astype(np.uint8)).save(
            out_dir / img_rel
        )
        ann_rels = []
        for k, tier in enumerate(tiers, start=1):
            rel = f"annotations/{image_id}_a{k}.png"
            Image.fromarray((tier * 255).astype(np.uint8)).save(out_dir / rel)
            ann_rels.append(rel)
        entries.append(ManifestEntry(image_id, img_rel, ann_rels))

        k = len(tiers)
        anns = [t.astype(np.uint8) for t in tiers]
        for subset in enumerate_label_subsets(k):
            all_counts.append(int(combine_labels(anns, subset).sum()))

    manifest = DatasetManifest(
        split=split,
        granularity_bounds=(min(all_counts), max(all_counts)),
        entries=entries,
        root=out_dir,
    )
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest
