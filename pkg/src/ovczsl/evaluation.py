"""Inference scoring and the seen/unseen calibration protocol.

The bias sweep adds a scalar to every unseen-composition score before
ranking, tracing out the seen-vs-unseen accuracy trade-off. The harmonic mean
is reported at its best point along the curve and the AUC is the trapezoidal
area under the curve. The default bias grid is the exact set of per-sample
decision gaps plus sentinels, so the curve is exact rather than
grid-approximate.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import encoder as enc_mod
from .encoder import FrozenEncoder
from .adapt import ExtendedPromptState
from .vocab import CompositionSpace, Sample, Split, label_positions

SENTINEL_BIAS = 10.0


@dataclass(frozen=True)
class ScoreMatrix:
    """Samples x compositions cosine scores, candidate order = space order."""

    space: CompositionSpace
    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[1] != len(self.space):
            raise ValueError("score matrix must be samples x |space|")
        if values.size and (values.min() < -1.0 - 1e-9 or values.max() > 1.0 + 1e-9):
            raise ValueError("cosine scores must lie in [-1, 1]")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)


def score(
    samples: Sequence[Sample],
    space: CompositionSpace,
    enc: FrozenEncoder,
    state: ExtendedPromptState,
) -> ScoreMatrix:
    """Cosine of every sample visual against every composition prompt."""
    for name in space.attrs.names:
        if name not in state.attr_names:
            raise ValueError(f"attribute {name!r} has no prompt row")
    for name in space.objs.names:
        if name not in state.obj_names:
            raise ValueError(f"object {name!r} has no prompt row")
    attr_pos = {name: i for i, name in enumerate(state.attr_names)}
    obj_pos = {name: i for i, name in enumerate(state.obj_names)}
    attr_idx = np.array([attr_pos[label.attribute] for label in space.labels], dtype=np.int64)
    obj_idx = np.array([obj_pos[label.object] for label in space.labels], dtype=np.int64)
    texts = enc_mod.encode_compositions(enc, state, attr_idx, obj_idx)
    visuals = np.stack([s.visual for s in samples])
    visuals = visuals / np.linalg.norm(visuals, axis=1, keepdims=True)
    return ScoreMatrix(space, np.clip(visuals @ texts.T, -1.0, 1.0))


def _topk_correct(values: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """Whether each sample's true label ranks in the top k.

    Score ties break toward the lower composition index, so a candidate tied
    with the true label and sitting at a smaller index outranks it.
    """
    n, n_cols = values.shape
    cols = np.arange(n_cols)
    true_scores = values[np.arange(n), labels]
    better = (values > true_scores[:, None]).sum(axis=1)
    equal_before = ((values == true_scores[:, None]) & (cols[None, :] < labels[:, None])).sum(axis=1)
    return (better + equal_before) < k


def _biased(scores: ScoreMatrix, bias: float) -> np.ndarray:
    unseen_cols = ~scores.space.seen_mask()
    return scores.values + bias * unseen_cols[None, :]


def split_accuracy(
    scores: ScoreMatrix, labels: np.ndarray, k: int = 1, bias: float = 0.0
) -> dict[Split, float]:
    """Top-k accuracy per populated split; empty splits are absent, not zero."""
    if k < 1:
        raise ValueError("k must be >= 1")
    labels = np.asarray(labels, dtype=np.int64)
    correct = _topk_correct(_biased(scores, bias), labels, k)
    sample_splits = [scores.space.labels[p].split for p in labels]
    out: dict[Split, float] = {}
    for split in Split:
        mask = np.array([s is split for s in sample_splits], dtype=bool)
        if mask.any():
            out[split] = float(correct[mask].mean())
    return out


@dataclass(frozen=True)
class BiasCurve:
    """(bias, seen accuracy, unseen accuracy) points, bias strictly increasing."""

    points: tuple[tuple[float, float, float], ...]
    k: int = 1

    def __post_init__(self) -> None:
        if not self.points:
            raise ValueError("bias curve needs at least one point")
        biases = [p[0] for p in self.points]
        if any(b2 <= b1 for b1, b2 in zip(biases, biases[1:])):
            raise ValueError("bias values must be strictly increasing")
        seen = [p[1] for p in self.points]
        unseen = [p[2] for p in self.points]
        if any(s2 > s1 + 1e-12 for s1, s2 in zip(seen, seen[1:])):
            raise ValueError("seen accuracy must be non-increasing along the sweep")
        if any(u2 < u1 - 1e-12 for u1, u2 in zip(unseen, unseen[1:])):
            raise ValueError("unseen accuracy must be non-decreasing along the sweep")


def default_bias_grid(scores: ScoreMatrix) -> list[float]:
    """Per-sample best-seen minus best-unseen gaps plus sentinels."""
    seen_cols = scores.space.seen_mask()
    if not seen_cols.any() or seen_cols.all():
        return [-SENTINEL_BIAS, 0.0, SENTINEL_BIAS]
    best_seen = scores.values[:, seen_cols].max(axis=1)
    best_unseen = scores.values[:, ~seen_cols].max(axis=1)
    gaps = np.unique(best_seen - best_unseen)
    grid = sorted(set([-SENTINEL_BIAS, SENTINEL_BIAS]) | set(float(g) for g in gaps))
    return grid


def bias_sweep(
    scores: ScoreMatrix,
    labels: np.ndarray,
    grid: Sequence[float] | None = None,
    k: int = 1,
) -> BiasCurve:
    """Seen/unseen accuracies at every bias in the (ascending) grid."""
    labels = np.asarray(labels, dtype=np.int64)
    if grid is None:
        grid = default_bias_grid(scores)
    grid = list(grid)
    if not grid:
        raise ValueError("bias grid is empty")
    if any(b2 <= b1 for b1, b2 in zip(grid, grid[1:])):
        raise ValueError("bias grid must be sorted ascending without duplicates")
    seen_samples = np.array(
        [scores.space.labels[p].split is Split.AO for p in labels], dtype=bool
    )
    unseen_samples = ~seen_samples
    points = []
    for bias in grid:
        correct = _topk_correct(_biased(scores, bias), labels, k)
        seen_acc = float(correct[seen_samples].mean()) if seen_samples.any() else 0.0
        unseen_acc = float(correct[unseen_samples].mean()) if unseen_samples.any() else 0.0
        points.append((float(bias), seen_acc, unseen_acc))
    return BiasCurve(tuple(points), k=k)


@dataclass(frozen=True)
class HMPoint:
    bias: float
    seen: float
    unseen: float
    value: float


def harmonic_mean(seen: float, unseen: float) -> float:
    if seen + unseen == 0.0:
        return 0.0
    return 2.0 * seen * unseen / (seen + unseen)


def hm_and_auc(curve: BiasCurve) -> tuple[HMPoint, float]:
    """Best harmonic-mean point on the curve and the trapezoidal area."""
    best = None
    for bias, seen, unseen in curve.points:
        value = harmonic_mean(seen, unseen)
        if best is None or value > best.value:
            best = HMPoint(bias=bias, seen=seen, unseen=unseen, value=value)
    pts = sorted(
        (min(max(s, 0.0), 1.0), min(max(u, 0.0), 1.0)) for _, s, u in curve.points
    )
    auc = 0.0
    for (s1, u1), (s2, u2) in zip(pts, pts[1:]):
        auc += (s2 - s1) * (u1 + u2) / 2.0
    return best, float(auc)


@dataclass(frozen=True)
class MetricsReport:
    """Principal evaluation artifact: split accuracies, bias curve, HM, AUC."""

    k: int
    splits: dict[str, float]
    splits_at_best_hm: dict[str, float]
    hm: HMPoint
    auc: float
    curve: BiasCurve

    def to_json(self) -> str:
        payload = {
            "k": self.k,
            "splits": self.splits,
            "splits_at_best_hm": self.splits_at_best_hm,
            "hm": {
                "bias": self.hm.bias,
                "seen": self.hm.seen,
                "unseen": self.hm.unseen,
                "value": self.hm.value,
            },
            "auc": self.auc,
            "curve": [[b, s, u] for b, s, u in self.curve.points],
        }
        return json.dumps(payload, indent=2) + "\n"


def evaluate(
    samples: Sequence[Sample],
    space: CompositionSpace,
    enc: FrozenEncoder,
    state: ExtendedPromptState,
    k: int = 1,
    grid: Sequence[float] | None = None,
) -> MetricsReport:
    """Score the test samples and assemble the full metrics report.

    Split accuracies are reported at bias zero and, separately, at the bias
    that maximizes the harmonic mean.
    """
    scores = score(samples, space, enc, state)
    labels = label_positions(samples, space)
    curve = bias_sweep(scores, labels, grid=grid, k=k)
    hm, auc = hm_and_auc(curve)
    splits0 = {s.value: v for s, v in split_accuracy(scores, labels, k=k, bias=0.0).items()}
    splits_hm = {s.value: v for s, v in split_accuracy(scores, labels, k=k, bias=hm.bias).items()}
    return MetricsReport(
        k=k, splits=splits0, splits_at_best_hm=splits_hm, hm=hm, auc=auc, curve=curve
    )
