"""Domain types and ground-truth preparation.

Array conventions used across the package:

* images are ``H x W x 3`` float arrays with values in ``[0, 1]``
* annotation stacks are ``H x W x A`` arrays with entries in ``{0, 1}``
  (``A`` = number of annotators)
* consensus maps and probability maps are ``H x W`` float arrays in ``[0, 1]``
* binary edge maps are ``H x W`` arrays with entries in ``{0, 1}``

Probability maps ("ProbMap") are the universal currency between the models,
the fusion/soft-target machinery, the loss and the evaluator; every producer
clamps or validates its output into ``[0, 1]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MIN_SIDE = 16  # images must survive four 2x poolings


class ValidationError(ValueError):
    """Raised when a domain object violates one of its invariants."""


def validate_prob_map(values: np.ndarray, name: str = "prob map") -> np.ndarray:
    """Check an H x W probability map: finite, within [0, 1]."""
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValidationError(
            f"{name} out of range [0, 1]: min={arr.min()}, max={arr.max()}"
        )
    return arr


def validate_binary_map(values: np.ndarray, name: str = "binary map") -> np.ndarray:
    """Check an H x W strictly binary map."""
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.isin(arr, (0, 1)).all():
        raise ValidationError(f"{name} has entries outside {{0, 1}}")
    return arr


@dataclass(frozen=True)
class Image:
    """An RGB input image, values in [0, 1], at least 16 px on each side."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValidationError(f"image must be H x W x 3, got shape {px.shape}")
        if px.shape[0] < MIN_SIDE or px.shape[1] < MIN_SIDE:
            raise ValidationError(
                f"image sides must be >= {MIN_SIDE}, got {px.shape[:2]}"
            )
        if not np.all(np.isfinite(px)):
            raise ValidationError("image contains non-finite values")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValidationError("image values out of range [0, 1]")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class AnnotationStack:
    """Per-annotator binary edge labels stacked along the last axis (H x W x A)."""

    layers: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.layers)
        if arr.ndim != 3 or arr.shape[2] < 1:
            raise ValidationError(
                f"annotations must be H x W x A with A >= 1, got shape {arr.shape}"
            )
        if not np.isin(arr, (0, 1)).all():
            raise ValidationError("annotation entries must be 0 or 1")
        object.__setattr__(self, "layers", arr.astype(np.uint8))

    @property
    def n_annotators(self) -> int:
        return self.layers.shape[2]


@dataclass(frozen=True)
class Sample:
    """One training/evaluation unit: image + annotations + derived binary GT."""

    image: Image
    annotations: AnnotationStack
    gt_binary: np.ndarray
    identifier: str = ""

    def __post_init__(self):
        gt = validate_binary_map(self.gt_binary, "gt_binary")
        hw = self.image.pixels.shape[:2]
        if self.annotations.layers.shape[:2] != hw or gt.shape != hw:
            raise ValidationError(
                f"sample '{self.identifier}': image {hw}, annotations "
                f"{self.annotations.layers.shape[:2]}, gt {gt.shape} disagree"
            )
        object.__setattr__(self, "gt_binary", gt.astype(np.uint8))


def consensus(annotations: AnnotationStack) -> np.ndarray:
    """Per-pixel fraction of annotators that marked the pixel as edge."""
    return annotations.layers.mean(axis=2, dtype=np.float64)


def binarize_ground_truth(consensus_map: np.ndarray, threshold: float = 0.2) -> np.ndarray:
    """Threshold a consensus map into a hard binary edge map.

    A pixel becomes positive iff its consensus value is >= threshold, so for
    singly-annotated data any threshold in (0, 1] reproduces the single layer.
    """
    if not 0.0 < threshold <= 1.0:
        raise ValidationError(f"threshold must be in (0, 1], got {threshold}")
    cons = np.asarray(consensus_map)
    return (cons >= threshold).astype(np.uint8)


def make_sample(
    image: np.ndarray,
    layers: np.ndarray,
    identifier: str = "",
    gt_threshold: float = 0.2,
) -> Sample:
    """Bundle raw arrays into a Sample, deriving the binary GT from consensus."""
    stack = AnnotationStack(layers)
    gt = binarize_ground_truth(consensus(stack), gt_threshold)
    return Sample(Image(image), stack, gt, identifier)
