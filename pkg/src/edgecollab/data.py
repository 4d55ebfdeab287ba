"""Dataset ingestion and the synthetic noisy-edge generator.

On-disk layout (versioned as layout "v1", see README):

    <root>/<split>/images/<id>.png             8-bit RGB
    <root>/<split>/annotations/<id>/<k>.png    8-bit grayscale, 0 or 255,
                                               one file per annotator

Images are stored quantized to the 8-bit grid, so save -> load round-trips
reproduce arrays exactly. Loaders are read-only and reentrant.

The synthetic generator renders anti-aliased random shapes and rasterizes
their true occlusion boundaries as clean labels; a corrupted twin drops edge
pixels, jitters boundary locations, and sprinkles spurious edge labels inside
textured regions, mimicking the failure modes of human boundary annotation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy.ndimage import binary_dilation, gaussian_filter, uniform_filter

from .core import AnnotationStack, Image, Sample, make_sample

DATASET_KINDS = ("bsds", "nyud", "synth")
SPLITS = ("train", "val", "test")


class DatasetError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# image / annotation file IO


def load_image_array(path) -> np.ndarray:
    arr = np.asarray(PILImage.open(path).convert("RGB"), dtype=np.float64)
    return (arr / 255.0).astype(np.float32)


def save_image_array(arr: np.ndarray, path) -> None:
    data = np.round(np.asarray(arr, dtype=np.float64) * 255.0).astype(np.uint8)
    PILImage.fromarray(data, mode="RGB").save(path)


def quantize_image(arr: np.ndarray) -> np.ndarray:
    """Snap float pixels to the 8-bit grid (what save + load would produce)."""
    return (np.round(np.asarray(arr, dtype=np.float64) * 255.0) / 255.0).astype(
        np.float32
    )


def load_annotation(path) -> np.ndarray:
    arr = np.asarray(PILImage.open(path).convert("L"))
    return (arr >= 128).astype(np.uint8)


def save_annotation(binary: np.ndarray, path) -> None:
    data = (np.asarray(binary) != 0).astype(np.uint8) * 255
    PILImage.fromarray(data, mode="L").save(path)


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class DatasetManifest:
    root: str
    kind: str
    split: str
    entries: tuple  # ((identifier, image_path, (annotation_paths, ...)), ...)

    def __len__(self) -> int:
        return len(self.entries)


def load_manifest(root, kind: str, split: str) -> DatasetManifest:
    """Scan a dataset root; deterministic lexicographic order by identifier."""
    if kind not in DATASET_KINDS:
        raise DatasetError(f"unknown dataset kind {kind!r}; expected {DATASET_KINDS}")
    if split not in SPLITS:
        raise DatasetError(f"unknown split {split!r}; expected {SPLITS}")
    base = Path(root) / split
    img_dir = base / "images"
    ann_dir = base / "annotations"
    if not img_dir.is_dir():
        raise DatasetError(f"missing image directory: {img_dir}")
    entries = []
    for img_path in sorted(img_dir.glob("*.png")):
        ident = img_path.stem
        ann_sub = ann_dir / ident
        ann_paths = sorted(ann_sub.glob("*.png")) if ann_sub.is_dir() else []
        if not ann_paths:
            raise DatasetError(f"no annotations for '{ident}' under {ann_sub}")
        entries.append((ident, str(img_path), tuple(str(p) for p in ann_paths)))
    if not entries:
        raise DatasetError(f"no images found under {img_dir}")
    return DatasetManifest(str(root), kind, split, tuple(entries))


def load_sample(entry, gt_threshold: float = 0.2) -> Sample:
    ident, img_path, ann_paths = entry
    image = load_image_array(img_path)
    layers = np.stack([load_annotation(p) for p in ann_paths], axis=2)
    return make_sample(image, layers, ident, gt_threshold)


class ManifestDataset:
    """Lazy Sample access over a manifest."""

    def __init__(self, manifest: DatasetManifest, gt_threshold: float = 0.2):
        self.manifest = manifest
        self.gt_threshold = gt_threshold

    def __len__(self) -> int:
        return len(self.manifest)

    def __getitem__(self, index: int) -> Sample:
        return load_sample(self.manifest.entries[index], self.gt_threshold)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]


def save_dataset(samples, root, split: str) -> None:
    base = Path(root) / split
    (base / "images").mkdir(parents=True, exist_ok=True)
    for sample in samples:
        ident = sample.identifier
        save_image_array(sample.image.pixels, base / "images" / f"{ident}.png")
        ann_dir = base / "annotations" / ident
        ann_dir.mkdir(parents=True, exist_ok=True)
        layers = sample.annotations.layers
        for a in range(layers.shape[2]):
            save_annotation(layers[:, :, a], ann_dir / f"{a:02d}.png")


# ---------------------------------------------------------------------------
# synthetic noisy-edge data


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 64
    n_images: int = 20
    shapes_per_image: int = 3
    noise_rate: float = 0.2
    noise_kinds: tuple = ("drop", "spurious", "jitter")
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 16:
            raise ValueError("image_size must be >= 16")
        if not 0.0 <= self.noise_rate < 1.0:
            raise ValueError("noise_rate must be in [0, 1)")
        kinds = tuple(self.noise_kinds)
        unknown = set(kinds) - {"drop", "spurious", "jitter"}
        if unknown:
            raise ValueError(f"unknown noise kinds: {sorted(unknown)}")
        object.__setattr__(self, "noise_kinds", kinds)


_SUPERSAMPLE = 4


def _render_shapes(size: int, n_shapes: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Render shapes at supersampled resolution; return (image, region id map)."""
    q = _SUPERSAMPLE
    hi = size * q
    yy, xx = np.mgrid[0:hi, 0:hi].astype(np.float64) / q

    ids = np.zeros((hi, hi), dtype=np.int32)
    colors = [None]  # index 0 = background, filled below
    for k in range(1, n_shapes + 1):
        cx, cy = rng.uniform(0.2 * size, 0.8 * size, size=2)
        if rng.random() < 0.5:
            a, b = rng.uniform(0.10 * size, 0.35 * size, size=2)
            theta = rng.uniform(0.0, np.pi)
            u = (xx - cx) * math.cos(theta) + (yy - cy) * math.sin(theta)
            v = -(xx - cx) * math.sin(theta) + (yy - cy) * math.cos(theta)
            mask = (u / a) ** 2 + (v / b) ** 2 <= 1.0
        else:
            n_vert = rng.integers(3, 7)
            angles = np.sort(rng.uniform(0.0, 2.0 * np.pi, size=n_vert))
            radii = rng.uniform(0.12 * size, 0.35 * size, size=n_vert)
            vx = cx + radii * np.cos(angles)
            vy = cy + radii * np.sin(angles)
            mask = np.ones((hi, hi), dtype=bool)
            for i in range(n_vert):  # convex hull of sorted-angle vertices
                x0, y0 = vx[i], vy[i]
                x1, y1 = vx[(i + 1) % n_vert], vy[(i + 1) % n_vert]
                cross = (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0)
                mask &= cross >= 0.0
        ids[mask] = k
        colors.append(rng.uniform(0.05, 0.95, size=3))

    # smooth colored background with a mild fine-grain texture
    base = gaussian_filter(rng.random((size, size, 3)), sigma=(8, 8, 0), mode="nearest")
    base = 0.25 + 0.5 * (base - base.min()) / max(base.ptp(), 1e-9)
    texture = rng.normal(0.0, 0.05, size=(size, size, 1))
    colors[0] = np.clip(base + texture, 0.0, 1.0)

    # anti-aliased composition from per-shape coverage fractions
    image = np.zeros((size, size, 3), dtype=np.float64)
    for k in range(n_shapes + 1):
        cover = (ids == k).astype(np.float64)
        cover = cover.reshape(size, q, size, q).mean(axis=(1, 3))
        layer = colors[k] if k else colors[0]
        image += cover[:, :, None] * layer
    return np.clip(image, 0.0, 1.0), ids


def _boundaries_from_ids(ids: np.ndarray, size: int) -> np.ndarray:
    """Roughly one-pixel-wide occlusion boundaries from the region id map."""
    q = _SUPERSAMPLE
    centers = ids[q // 2 :: q, q // 2 :: q]
    edges = np.zeros((size, size), dtype=np.uint8)
    edges[:, :-1] |= centers[:, :-1] != centers[:, 1:]
    edges[:-1, :] |= centers[:-1, :] != centers[1:, :]
    return edges


def _texture_scores(image: np.ndarray) -> np.ndarray:
    """Local grayscale variability, used to place spurious edge labels."""
    gray = image @ np.array([0.299, 0.587, 0.114])
    mean = uniform_filter(gray, size=3, mode="nearest")
    sq = uniform_filter(gray * gray, size=3, mode="nearest")
    return np.sqrt(np.maximum(sq - mean * mean, 0.0))


def _corrupt(clean: np.ndarray, image: np.ndarray, cfg: SynthConfig, rng) -> np.ndarray:
    rho = cfg.noise_rate
    noisy = clean.copy()
    edge_idx = np.argwhere(clean != 0)
    n_edge = len(edge_idx)
    if rho == 0.0 or n_edge == 0:
        return noisy

    if "drop" in cfg.noise_kinds:
        dropped = rng.random(n_edge) < rho
        noisy[edge_idx[dropped, 0], edge_idx[dropped, 1]] = 0

    if "jitter" in cfg.noise_kinds:
        survivors = np.argwhere(noisy != 0)
        n_jit = int(round(len(survivors) * rho / 2.0))
        if n_jit:
            chosen = survivors[rng.choice(len(survivors), size=n_jit, replace=False)]
            offsets = np.array(
                [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]
            )
            moves = offsets[rng.integers(0, 8, size=n_jit)]
            targets = np.clip(chosen + moves, 0, np.array(clean.shape) - 1)
            noisy[chosen[:, 0], chosen[:, 1]] = 0
            noisy[targets[:, 0], targets[:, 1]] = 1

    if "spurious" in cfg.noise_kinds:
        n_spur = int(round(n_edge * rho * 0.5))
        if n_spur:
            near_edge = binary_dilation(clean != 0, iterations=2)
            scores = _texture_scores(image)
            scores[near_edge] = 0.0
            scores[noisy != 0] = 0.0
            flat = scores.ravel()
            if flat.sum() > 0:
                probs = flat / flat.sum()
                picks = rng.choice(flat.size, size=n_spur, replace=False, p=probs)
                noisy.ravel()[picks] = 1
    return noisy


def synthesize(cfg: SynthConfig) -> tuple[list, list]:
    """Generate paired clean / noisy datasets sharing images and identifiers."""
    clean_samples = []
    noisy_samples = []
    for idx in range(cfg.n_images):
        rng = np.random.default_rng([cfg.seed, idx])
        image, ids = _render_shapes(cfg.image_size, cfg.shapes_per_image, rng)
        image = quantize_image(image)
        clean = _boundaries_from_ids(ids, cfg.image_size)
        noisy = _corrupt(clean, image, cfg, rng)
        ident = f"synth_{idx:04d}"
        clean_samples.append(
            Sample(Image(image), AnnotationStack(clean[:, :, None]), clean, ident)
        )
        noisy_samples.append(
            Sample(Image(image), AnnotationStack(noisy[:, :, None]), noisy, ident)
        )
    return clean_samples, noisy_samples


# ---------------------------------------------------------------------------
# BSDS .mat conversion (one-shot; scipy is only needed here at call time)


def _largest_rotated_rect(w: int, h: int, angle: float) -> tuple[float, float]:
    """Largest axis-aligned rectangle inside a w x h rect rotated by angle."""
    if w <= 0 or h <= 0:
        return 0.0, 0.0
    width_is_longer = w >= h
    side_long, side_short = (w, h) if width_is_longer else (h, w)
    sin_a, cos_a = abs(math.sin(angle)), abs(math.cos(angle))
    if side_short <= 2.0 * sin_a * cos_a * side_long or abs(sin_a - cos_a) < 1e-10:
        x = 0.5 * side_short
        wr, hr = (x / sin_a, x / cos_a) if width_is_longer else (x / cos_a, x / sin_a)
    else:
        cos_2a = cos_a * cos_a - sin_a * sin_a
        wr = (w * cos_a - h * sin_a) / cos_2a
        hr = (h * cos_a - w * sin_a) / cos_2a
    return wr, hr


def _center_crop(arr: np.ndarray, ch: int, cw: int) -> np.ndarray:
    h, w = arr.shape[:2]
    r0 = (h - ch) // 2
    c0 = (w - cw) // 2
    return arr[r0 : r0 + ch, c0 : c0 + cw]


def _rotated_variants(image: np.ndarray, layers: np.ndarray, n_angles: int):
    """Rotation (+ crop to the largest inscribed rect) and flip variants."""
    from scipy.ndimage import rotate

    h, w = image.shape[:2]
    for i in range(n_angles):
        deg = 360.0 * i / n_angles
        if i == 0:
            img_r, lay_r = image, layers
        else:
            img_r = np.clip(rotate(image, deg, reshape=True, order=1), 0.0, 1.0)
            lay_r = rotate(layers, deg, reshape=True, order=0)
        wr, hr = _largest_rotated_rect(w, h, math.radians(deg))
        ch, cw = max(16, int(hr)), max(16, int(wr))
        ch, cw = min(ch, img_r.shape[0]), min(cw, img_r.shape[1])
        img_c = _center_crop(img_r, ch, cw)
        lay_c = _center_crop(lay_r, ch, cw)
        for flip in (False, True):
            tag = f"r{i:02d}{'f' if flip else ''}"
            if flip:
                yield tag, img_c[:, ::-1].copy(), lay_c[:, ::-1].copy()
            else:
                yield tag, img_c, lay_c


def convert_bsds(mat_root, image_root, out_root, splits=SPLITS, n_angles: int = 0) -> int:
    """Convert .mat multi-annotator ground truth into the v1 PNG layout.

    Each .mat file is expected to hold a 1 x A cell array named 'groundTruth'
    whose cells contain a struct with a 'Boundaries' field. With n_angles > 0
    every sample is additionally expanded into n_angles rotations x 2 flips
    (the usual offline augmentation; documented as an assumption in README).
    Returns the number of samples written.
    """
    from scipy.io import loadmat

    written = 0
    for split in splits:
        mat_dir = Path(mat_root) / split
        img_dir = Path(image_root) / split
        if not mat_dir.is_dir():
            continue
        for mat_path in sorted(mat_dir.glob("*.mat")):
            ident = mat_path.stem
            image_path = None
            for ext in (".jpg", ".png"):
                cand = img_dir / f"{ident}{ext}"
                if cand.exists():
                    image_path = cand
                    break
            if image_path is None:
                raise DatasetError(f"no image found for ground truth {mat_path}")
            image = load_image_array(image_path)
            cells = loadmat(mat_path)["groundTruth"]
            maps = []
            for a in range(cells.shape[1]):
                boundaries = cells[0, a]["Boundaries"][0, 0]
                maps.append((np.asarray(boundaries) != 0).astype(np.uint8))
            layers = np.stack(maps, axis=2)

            variants = (
                _rotated_variants(image, layers, n_angles)
                if n_angles > 0
                else [("", image, layers)]
            )
            out_samples = []
            for tag, img_v, lay_v in variants:
                name = f"{ident}_{tag}" if tag else ident
                out_samples.append(
                    Sample(
                        Image(quantize_image(img_v)),
                        AnnotationStack(lay_v if lay_v.ndim == 3 else lay_v[:, :, None]),
                        (lay_v.mean(axis=2) >= 0.2).astype(np.uint8)
                        if lay_v.ndim == 3
                        else (lay_v != 0).astype(np.uint8),
                        name,
                    )
                )
            save_dataset(out_samples, out_root, split)
            written += len(out_samples)
    if written == 0:
        raise DatasetError(f"no .mat ground truth found under {mat_root}")
    return written
