"""Boundary-detection evaluation: thinning, matching, PR sweep, ODS/OIS.

The pipeline per image is: (optionally) sharpen the probability map with the
test-time activation, thin it by non-maximum suppression along the local
edge-normal direction, then for every threshold match the surviving pixels
one-to-one against ground-truth edge pixels within a distance tolerance.
Matching maximizes the number of matched pairs (Hopcroft-Karp on the
admissible-pair graph), so results are invariant to pixel enumeration order.

Multi-annotator ground truth follows the usual benchmark semantics: recall
counts matched ground-truth pixels per annotator, precision counts predicted
pixels matched to at least one annotator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching
from scipy.spatial import cKDTree


def default_thresholds(n: int = 99) -> tuple:
    """n thresholds evenly spaced strictly inside (0, 1)."""
    return tuple(np.arange(1, n + 1, dtype=np.float64) / (n + 1))


@dataclass(frozen=True)
class EvalConfig:
    max_dist: float = 0.0075            # fraction of the image diagonal
    thresholds: tuple = field(default_factory=default_thresholds)
    apply_test_activation: bool = True
    apply_nms: bool = True
    nms_smooth_sigma: float = 2.0
    nms_radius: int = 1
    nms_tolerance: float = 1.01

    def __post_init__(self):
        if not 0.0 < self.max_dist < 1.0:
            raise ValueError("max_dist must be a fraction of the diagonal in (0, 1)")
        th = tuple(float(t) for t in self.thresholds)
        if not th or any(not 0.0 < t < 1.0 for t in th):
            raise ValueError("thresholds must lie strictly inside (0, 1)")
        if any(b <= a for a, b in zip(th, th[1:])):
            raise ValueError("thresholds must be strictly increasing")
        object.__setattr__(self, "thresholds", th)


def test_activation(logits) -> np.ndarray:
    """Sharpened test-time activation; algebraically sigmoid(2x - 1).

    Compared to the plain sigmoid it shifts the decision point to 0.5 and
    doubles the slope, pushing confident logits further toward {0, 1}.
    """
    x = np.asarray(logits, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(x - 0.5))


def reactivate(prob, eps: float = 1e-7) -> np.ndarray:
    """Re-map sigmoid probabilities through the test-time activation."""
    p = np.clip(np.asarray(prob, dtype=np.float64), eps, 1.0 - eps)
    return test_activation(np.log(p / (1.0 - p)))


def nms_thin(
    prob,
    smooth_sigma: float = 2.0,
    radius: int = 1,
    tolerance: float = 1.01,
) -> np.ndarray:
    """Thin a probability map by suppression along the edge-normal direction.

    The normal orientation is estimated from second derivatives of the
    smoothed map; each pixel is compared against bilinearly interpolated
    neighbours up to ``radius`` steps along that direction (coordinates
    clamped at the borders) and zeroed when any neighbour is stronger, with a
    small tolerance favouring retention. Surviving pixels keep their value,
    so the output is pixel-wise <= the input.
    """
    e = np.asarray(prob, dtype=np.float64)
    if e.ndim != 2:
        raise ValueError("expected a 2-D probability map")
    if e.max() <= 0.0:
        return e.copy()

    s = gaussian_filter(e, smooth_sigma, mode="nearest")
    gx = np.gradient(s, axis=1)
    gy = np.gradient(s, axis=0)
    gxx = np.gradient(gx, axis=1)
    gxy = np.gradient(gx, axis=0)
    gyy = np.gradient(gy, axis=0)
    orient = np.mod(np.arctan(gyy * np.sign(-gxy) / (gxx + 1e-5)), np.pi)

    rows, cols = np.indices(e.shape)
    cos_o = np.cos(orient)
    sin_o = np.sin(orient)
    keep = np.ones(e.shape, dtype=bool)
    for step in range(1, radius + 1):
        for sign in (-1.0, 1.0):
            rr = rows + sign * step * sin_o
            cc = cols + sign * step * cos_o
            neighbour = map_coordinates(e, [rr, cc], order=1, mode="nearest")
            keep &= e * tolerance >= neighbour
    return np.where(keep, e, 0.0)


def match_edges(pred, gt, max_dist_px: float) -> tuple[int, int, int]:
    """One-to-one matching of predicted vs GT edge pixels within a tolerance.

    Returns (TP, FP, FN) where TP is the size of a maximum-cardinality
    matching over all pixel pairs within Euclidean distance ``max_dist_px``.
    """
    tp, pred_matched, n_pred, n_gt = _match_counts(
        np.argwhere(np.asarray(pred) != 0), np.argwhere(np.asarray(gt) != 0), max_dist_px
    )
    return tp, n_pred - tp, n_gt - tp


def _match_counts(pred_pts, gt_pts, max_dist_px):
    """Core matcher on point lists: (n_matched, matched-pred mask, n_pred, n_gt)."""
    n_pred, n_gt = len(pred_pts), len(gt_pts)
    matched_mask = np.zeros(n_pred, dtype=bool)
    if n_pred == 0 or n_gt == 0:
        return 0, matched_mask, n_pred, n_gt
    tree = cKDTree(gt_pts)
    neighbours = tree.query_ball_point(pred_pts, r=max_dist_px)
    rows = [i for i, nb in enumerate(neighbours) for _ in nb]
    cols = [j for nb in neighbours for j in nb]
    if not rows:
        return 0, matched_mask, n_pred, n_gt
    graph = csr_matrix(
        (np.ones(len(rows), dtype=np.int8), (rows, cols)), shape=(n_pred, n_gt)
    )
    assignment = maximum_bipartite_matching(graph, perm_type="column")
    matched_mask = assignment != -1
    return int(matched_mask.sum()), matched_mask, n_pred, n_gt


@dataclass
class ThresholdCounts:
    """Match counts for one threshold; addable across images."""

    threshold: float
    tp_pred: int = 0    # predicted pixels matched to >= 1 annotator
    n_pred: int = 0
    tp_gt: int = 0      # GT pixels matched, summed over annotators
    n_gt: int = 0

    @property
    def fp(self) -> int:
        return self.n_pred - self.tp_pred

    @property
    def fn(self) -> int:
        return self.n_gt - self.tp_gt

    @property
    def precision(self) -> float:
        return self.tp_pred / self.n_pred if self.n_pred else 0.0

    @property
    def recall(self) -> float:
        return self.tp_gt / self.n_gt if self.n_gt else 0.0

    @property
    def f(self) -> float:
        return fscore(self.precision, self.recall)

    def merged(self, other: "ThresholdCounts") -> "ThresholdCounts":
        if self.threshold != other.threshold:
            raise ValueError("cannot merge counts at different thresholds")
        return ThresholdCounts(
            self.threshold,
            self.tp_pred + other.tp_pred,
            self.n_pred + other.n_pred,
            self.tp_gt + other.tp_gt,
            self.n_gt + other.n_gt,
        )


def fscore(precision: float, recall: float) -> float:
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


@dataclass
class EvalResult:
    per_threshold: list            # dataset-aggregated ThresholdCounts
    ods_f: float
    ods_threshold: float
    ois_f: float
    n_images: int


def _gt_layers(gt) -> list:
    """Normalize GT input: binary map, H x W x A stack, or AnnotationStack."""
    layers = getattr(gt, "layers", gt)
    arr = np.asarray(layers)
    if arr.ndim == 2:
        return [arr != 0]
    if arr.ndim == 3:
        return [arr[:, :, a] != 0 for a in range(arr.shape[2])]
    raise ValueError(f"unsupported ground-truth shape {arr.shape}")


def evaluate_image(pred_prob, gt, cfg: EvalConfig) -> list:
    """Per-threshold counts for one image against (possibly multiple) annotations."""
    prob = np.asarray(pred_prob, dtype=np.float64)
    layers = _gt_layers(gt)
    if any(layer.shape != prob.shape for layer in layers):
        raise ValueError("prediction and ground truth shapes disagree")
    if cfg.apply_test_activation:
        prob = reactivate(prob)
    if cfg.apply_nms:
        prob = nms_thin(
            prob, cfg.nms_smooth_sigma, cfg.nms_radius, cfg.nms_tolerance
        )
    h, w = prob.shape
    max_dist_px = cfg.max_dist * math.hypot(h, w)

    gt_pts = [np.argwhere(layer) for layer in layers]
    counts = []
    for threshold in cfg.thresholds:
        pred_pts = np.argwhere(prob >= threshold)
        n_pred = len(pred_pts)
        union_matched = np.zeros(n_pred, dtype=bool)
        tp_gt = 0
        n_gt = 0
        for pts in gt_pts:
            matched, mask, _, n_g = _match_counts(pred_pts, pts, max_dist_px)
            union_matched |= mask
            tp_gt += matched
            n_gt += n_g
        counts.append(
            ThresholdCounts(threshold, int(union_matched.sum()), n_pred, tp_gt, n_gt)
        )
    return counts


def merge_image_counts(per_image: list) -> list:
    """Associative, commutative accumulation of per-image count lists."""
    if not per_image:
        raise ValueError("nothing to merge")
    merged = list(per_image[0])
    for counts in per_image[1:]:
        merged = [a.merged(b) for a, b in zip(merged, counts)]
    return merged


def summarize(per_image: list, thresholds) -> EvalResult:
    merged = merge_image_counts(per_image)
    fs = [c.f for c in merged]
    best = int(np.argmax(fs))
    ois = float(np.mean([max(c.f for c in counts) for counts in per_image]))
    return EvalResult(
        per_threshold=merged,
        ods_f=float(fs[best]),
        ods_threshold=float(thresholds[best]),
        ois_f=ois,
        n_images=len(per_image),
    )


def evaluate(preds: list, gts: list, cfg: EvalConfig | None = None) -> EvalResult:
    """Dataset-level ODS/OIS from aligned prediction and ground-truth lists.

    ODS picks the single threshold maximizing the F-score of the aggregated
    counts; OIS averages each image's own best F-score.
    """
    cfg = cfg or EvalConfig()
    if not preds:
        raise ValueError("empty dataset")
    if len(preds) != len(gts):
        raise ValueError("prediction / ground-truth lists differ in length")
    per_image = [evaluate_image(p, g, cfg) for p, g in zip(preds, gts)]
    return summarize(per_image, cfg.thresholds)


def write_pr_curve(result: EvalResult, path) -> None:
    """Plain text PR data: one `threshold precision recall f` line per threshold."""
    with open(path, "w") as fh:
        fh.write("# threshold precision recall f\n")
        for c in result.per_threshold:
            fh.write(f"{c.threshold:.6f} {c.precision:.6f} {c.recall:.6f} {c.f:.6f}\n")
