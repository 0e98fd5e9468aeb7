"""Analysis suite: deletion-robustness curves, emergent-sparsity statistics,
and mask-versus-ground-truth alignment.

Deletion curves classify every image after hard-zeroing the first k tokens
of a ranking, for k = 0..N-1, with pooled features rescaled by N / (N - k).
The energy policy ranks tokens by unary score (highest first); the random
baseline draws one fresh permutation per image per seed and averages over
seeds. Both policies share the exact same suppress-and-rescale classifier.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import energy_mask as em
from . import tensor as T
from .model import Model
from ._fileio import atomic_write_text, fmt_float

__all__ = [
    "RobustnessCurve",
    "SparsityReport",
    "AlignmentReport",
    "OBJECT_OVERLAP_THRESHOLD",
    "energy_ranking",
    "deletion_curve",
    "mean_accuracy_gap",
    "sparsity_report",
    "alignment_report",
    "object_token_mask",
    "write_curves_csv",
    "write_sparsity_csv",
    "write_alignment_csv",
]

POLICIES = ("energy", "random")

# a token counts as "object" when at least this share of its receptive
# pixels lies inside the planted region
OBJECT_OVERLAP_THRESHOLD = 0.25


@dataclass
class RobustnessCurve:
    policy: str
    ks: np.ndarray
    accuracy: np.ndarray
    stderr: np.ndarray
    seeds: tuple
    n_tokens: int


@dataclass
class SparsityReport:
    mean_mask: float
    histogram: tuple
    per_image_mean: np.ndarray


@dataclass
class AlignmentReport:
    overlaps: np.ndarray
    baseline_overlaps: np.ndarray
    mean_overlap: float
    baseline_mean: float
    keep_fraction: float
    n_tokens: int


# ---------------------------------------------------------------------------
# rankings and curves


def _ranking_from_scores(z: np.ndarray) -> np.ndarray:
    # primary key: z descending (highest energy removed first);
    # ties broken by token index ascending
    return np.lexsort((np.arange(z.size), -z))


def energy_ranking(model: Model, x) -> np.ndarray:
    """Token permutation ordered by unary energy score, highest first."""
    return _ranking_from_scores(model.token_scores(x))


def _feature_scores(model: Model, feature) -> np.ndarray:
    _, p_hat, _ = em.tokenize(feature, model.params.mask.d)
    return em.unary_scores(p_hat, model.params.mask)


def deletion_curve(model: Model, dataset, policy: str, seeds=(0, 1, 2, 3, 4)) -> RobustnessCurve:
    """Accuracy after deleting the first k ranked tokens, k = 0..N-1."""
    if policy not in POLICIES:
        raise ValueError(f"policy must be one of {POLICIES}, got {policy!r}")
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    n_tokens = model.config.token_geometry().n_tokens
    features = [model.feature_map(s.image) for s in dataset]
    labels = [s.label for s in dataset]
    if policy == "energy":
        passes = [[_ranking_from_scores(_feature_scores(model, f)) for f in features]]
        seeds_used = ()
    else:
        if not len(seeds):
            raise ValueError("random policy needs at least one seed")
        passes = []
        for seed in seeds:
            rng = np.random.default_rng(int(seed))
            passes.append([rng.permutation(n_tokens) for _ in features])
        seeds_used = tuple(int(s) for s in seeds)
    acc = np.zeros((len(passes), n_tokens))
    for p_i, orders in enumerate(passes):
        for feature, label, order in zip(features, labels, orders):
            for k in range(n_tokens):
                logits = model.classify_feature_deleted(feature, order[:k])
                if int(np.argmax(logits)) == label:
                    acc[p_i, k] += 1
    acc /= len(dataset)
    if acc.shape[0] > 1:
        stderr = acc.std(axis=0, ddof=1) / math.sqrt(acc.shape[0])
    else:
        stderr = np.zeros(n_tokens)
    return RobustnessCurve(
        policy=policy,
        ks=np.arange(n_tokens),
        accuracy=acc.mean(axis=0),
        stderr=stderr,
        seeds=seeds_used,
        n_tokens=n_tokens,
    )


def mean_accuracy_gap(energy: RobustnessCurve, random: RobustnessCurve) -> float:
    """Mean accuracy advantage of the energy policy over k in [1, N/2]."""
    if energy.n_tokens != random.n_tokens:
        raise ValueError("curves cover different token counts")
    lo, hi = 1, energy.n_tokens // 2
    sel = slice(lo, hi + 1)
    return float(np.mean(energy.accuracy[sel] - random.accuracy[sel]))


# ---------------------------------------------------------------------------
# sparsity


def sparsity_report(model: Model, dataset) -> SparsityReport:
    """Exact mask statistics over every token of every image."""
    if not model.config.masked:
        raise ValueError("sparsity report needs a masked model variant")
    total = 0.0
    count = 0
    hist = np.zeros(10, dtype=np.int64)
    per_image = np.zeros(len(dataset))
    for i, s in enumerate(dataset):
        _, diag = model.predict(s.image, mode="infer")
        per_image[i] = float(diag.m.mean())
        total += float(diag.m.sum())
        count += diag.m.size
        hist += np.histogram(diag.m, bins=10, range=(0.0, 1.0))[0]
    return SparsityReport(
        mean_mask=total / count,
        histogram=tuple(float(c) / count for c in hist),
        per_image_mean=per_image,
    )


# ---------------------------------------------------------------------------
# alignment with ground truth


def object_token_mask(truth_mask, geometry: em.TokenGeometry, input_hw) -> np.ndarray:
    """Boolean token set whose receptive block overlaps the planted region.

    Token (i, j) owns the input block of size (H_in/G_h, W_in/G_w) at that
    grid position; it counts as object when the planted fraction of the
    block reaches OBJECT_OVERLAP_THRESHOLD.
    """
    h_in, w_in = input_hw
    gh, gw = geometry.grid_h, geometry.grid_w
    if h_in % gh or w_in % gw:
        raise T.ShapeError(f"input {h_in}x{w_in} not divisible by token grid {gh}x{gw}")
    bh, bw = h_in // gh, w_in // gw
    frac = np.asarray(truth_mask, dtype=np.float64).reshape(gh, bh, gw, bw).mean(axis=(1, 3))
    return (frac >= OBJECT_OVERLAP_THRESHOLD).reshape(-1)


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def alignment_report(model: Model, dataset, keep_fraction: float,
                     n_baseline: int = 100, baseline_seed: int = 0) -> AlignmentReport:
    """Overlap between the retained (lowest-energy) token set and the
    ground-truth object token set, against equal-size random sets.

    The retained set holds the ceil(keep_fraction * N) tokens with the
    lowest unary scores (ties by token index). Overlap is intersection over
    union; the baseline averages ``n_baseline`` seeded random sets per
    image.
    """
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    geom = model.config.token_geometry()
    n = geom.n_tokens
    n_keep = math.ceil(keep_fraction * n)
    input_hw = model.config.input_shape[1:]
    rng = np.random.default_rng(baseline_seed)
    overlaps = np.zeros(len(dataset))
    baseline = np.zeros(len(dataset))
    for i, s in enumerate(dataset):
        z = model.token_scores(s.image)
        keep_idx = np.argsort(z, kind="stable")[:n_keep]
        kept = np.zeros(n, dtype=bool)
        kept[keep_idx] = True
        obj = object_token_mask(s.truth_mask, geom, input_hw)
        overlaps[i] = _iou(kept, obj)
        draws = 0.0
        for _ in range(n_baseline):
            rand_set = np.zeros(n, dtype=bool)
            rand_set[rng.choice(n, n_keep, replace=False)] = True
            draws += _iou(rand_set, obj)
        baseline[i] = draws / n_baseline
    return AlignmentReport(
        overlaps=overlaps,
        baseline_overlaps=baseline,
        mean_overlap=float(overlaps.mean()),
        baseline_mean=float(baseline.mean()),
        keep_fraction=keep_fraction,
        n_tokens=n,
    )


# ---------------------------------------------------------------------------
# CSV emission


def write_curves_csv(curves, path) -> None:
    lines = ["policy,k,accuracy,stderr"]
    for curve in curves:
        for k, a, se in zip(curve.ks, curve.accuracy, curve.stderr):
            lines.append(f"{curve.policy},{int(k)},{fmt_float(a)},{fmt_float(se)}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_sparsity_csv(report: SparsityReport, path) -> None:
    lines = ["image,mean_mask"]
    for i, v in enumerate(report.per_image_mean):
        lines.append(f"{i},{fmt_float(v)}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def write_alignment_csv(report: AlignmentReport, path) -> None:
    lines = ["image,overlap,baseline_mean"]
    for i, (o, b) in enumerate(zip(report.overlaps, report.baseline_overlaps)):
        lines.append(f"{i},{fmt_float(o)},{fmt_float(b)}")
    atomic_write_text(path, "\n".join(lines) + "\n")
