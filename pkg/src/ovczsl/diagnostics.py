"""Embedding-space diagnostics: semantic-visual alignment statistics with
mean-centering, the neighbor-consistency ratio, and semantic-isolation
partitioning of unseen concepts."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import stdtr

from .seeds import DOMAIN_DIAGNOSTICS, seeded_rng
from .structure import SimilarityMatrix, cosine_matrix, topk_neighbors
from .vocab import CompositionSpace, EmbeddingTable, Sample, Split

NEAR = "Near"
MODERATE = "Moderate"
ISOLATED = "Isolated"


def mean_center(table: EmbeddingTable) -> EmbeddingTable:
    """Subtract the column-wise mean from every row (idempotent)."""
    if len(table) < 2:
        raise ValueError("mean centering needs at least 2 rows")
    return EmbeddingTable(table.names, table.rows - table.rows.mean(axis=0, keepdims=True))


@dataclass(frozen=True)
class AlignmentStats:
    pearson: float
    spearman: float
    p_value: float
    n: int

    def __post_init__(self) -> None:
        if abs(self.pearson) > 1 + 1e-9 or abs(self.spearman) > 1 + 1e-9:
            raise ValueError("correlations must lie in [-1, 1]")


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    xc = x - x.mean()
    yc = y - y.mean()
    sx = np.sqrt((xc * xc).sum())
    sy = np.sqrt((yc * yc).sum())
    if sx == 0.0 or sy == 0.0:
        raise ValueError("correlation undefined: zero variance input")
    return float(np.clip((xc * yc).sum() / (sx * sy), -1.0, 1.0))


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """Ranks starting at 1, ties averaged."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def correlation(
    x: Sequence[float],
    y: Sequence[float],
    permutations: int | None = None,
    seed: int = 0,
) -> AlignmentStats:
    """Pearson and Spearman correlation with a two-sided p-value.

    The p-value defaults to the t approximation with n-2 degrees of freedom
    on the Pearson coefficient; pass ``permutations`` to replace it with an
    exact-style permutation p-value for small samples.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("inputs must be equal-length vectors")
    n = len(x)
    if n < 3:
        raise ValueError("correlation needs at least 3 points")
    pearson = _pearson(x, y)
    spearman = _pearson(_average_ranks(x), _average_ranks(y))
    if permutations is not None:
        rng = seeded_rng(seed, DOMAIN_DIAGNOSTICS)
        hits = 0
        for _ in range(permutations):
            if abs(_pearson(x, y[rng.permutation(n)])) >= abs(pearson):
                hits += 1
        p_value = (hits + 1) / (permutations + 1)
    elif abs(pearson) >= 1.0:
        p_value = 0.0
    else:
        t = abs(pearson) * np.sqrt((n - 2) / (1.0 - pearson * pearson))
        p_value = float(2.0 * stdtr(n - 2, -t))
    return AlignmentStats(pearson=pearson, spearman=spearman, p_value=p_value, n=n)


def pairwise_upper_values(table: EmbeddingTable) -> np.ndarray:
    """Cosine similarities of all unordered row pairs (i < j)."""
    sims = cosine_matrix(table, table).values
    iu = np.triu_indices(len(table), k=1)
    return sims[iu]


@dataclass(frozen=True)
class ConsistencyStats:
    random_neighbor_similarity: float
    topk_semantic_neighbor_similarity: float
    ratio: float


def neighbor_consistency(
    semantic: EmbeddingTable,
    visual_prototypes: EmbeddingTable,
    k: int,
    trials: int = 100,
    seed: int = 0,
) -> ConsistencyStats:
    """Average visual similarity of semantic Top-K neighbors vs random ones.

    Both tables are mean-centered first. The random baseline redraws k
    distinct non-self neighbors per row, ``trials`` times, with a seeded
    generator.
    """
    if semantic.names != visual_prototypes.names:
        raise ValueError("semantic and visual tables must share row names")
    n = len(semantic)
    if k >= n:
        raise ValueError(f"K={k} must be smaller than the row count {n}")
    semantic = mean_center(semantic)
    visual_prototypes = mean_center(visual_prototypes)
    sem_sims = cosine_matrix(semantic, semantic)
    vis_sims = cosine_matrix(visual_prototypes, visual_prototypes).values
    neighbors = topk_neighbors(sem_sims, k, exclude_self=True)
    topk_stat = float(np.take_along_axis(vis_sims, neighbors.indices, axis=1).mean())

    rng = seeded_rng(seed, DOMAIN_DIAGNOSTICS)
    draws = []
    for _ in range(trials):
        for i in range(n):
            others = np.concatenate([np.arange(i), np.arange(i + 1, n)])
            picks = rng.choice(others, size=k, replace=False)
            draws.append(vis_sims[i, picks].mean())
    random_stat = float(np.mean(draws))
    ratio = topk_stat / random_stat if random_stat != 0.0 else float("nan")
    return ConsistencyStats(
        random_neighbor_similarity=random_stat,
        topk_semantic_neighbor_similarity=topk_stat,
        ratio=ratio,
    )


@dataclass(frozen=True)
class IsolationPartition:
    """Near/Moderate/Isolated tags with per-group occupancy and mean similarity."""

    names: tuple[str, ...]
    scores: np.ndarray
    tags: tuple[str, ...]
    quantiles: tuple[float, float]

    def __post_init__(self) -> None:
        scores = np.array(self.scores, dtype=np.float64)
        scores.setflags(write=False)
        object.__setattr__(self, "scores", scores)
        if not (len(self.names) == len(self.tags) == len(scores)):
            raise ValueError("names, scores, and tags must align")

    def group_stats(self) -> list[dict]:
        n = len(self.names)
        out = []
        for tag in (NEAR, MODERATE, ISOLATED):
            mask = np.array([t == tag for t in self.tags])
            if mask.any():
                out.append(
                    {
                        "group": tag,
                        "count": int(mask.sum()),
                        "ratio": float(mask.sum() / n),
                        "avg_sim": float(self.scores[mask].mean()),
                    }
                )
            else:
                out.append({"group": tag, "count": 0, "ratio": 0.0, "avg_sim": None})
        return out


def partition_scores(
    names: Sequence[str], scores: np.ndarray, quantiles: tuple[float, float] = (0.5, 0.1)
) -> IsolationPartition:
    """Split items into Near/Moderate/Isolated by descending similarity.

    ``quantiles`` are the (Near, Isolated) occupancy fractions; the remainder
    is Moderate. Boundary ties resolve toward the nearer group.
    """
    q_near, q_iso = quantiles
    if not (0.0 < q_near <= 1.0) or not (0.0 <= q_iso < 1.0) or q_near + q_iso > 1.0:
        raise ValueError(f"degenerate quantiles {quantiles}")
    scores = np.asarray(scores, dtype=np.float64)
    n = len(scores)
    if n == 0:
        raise ValueError("nothing to partition")
    n_near = int(np.floor(q_near * n + 0.5))
    n_near = max(n_near, 1)
    n_iso = min(int(np.floor(q_iso * n + 0.5)), n - n_near)
    order = np.argsort(-scores, kind="stable")
    ranks = np.empty(n, dtype=np.int64)
    ranks[order] = np.arange(n)

    near_value = scores[order[n_near - 1]]
    tags = []
    for i in range(n):
        if scores[i] >= near_value:
            tags.append(NEAR)
        elif n_iso and ranks[i] >= n - n_iso:
            tags.append(ISOLATED)
        else:
            tags.append(MODERATE)
    # isolated items tied with the moderate boundary move up to Moderate
    if n_iso:
        moderate_floor = scores[order[n - n_iso - 1]]
        tags = [
            MODERATE if t == ISOLATED and scores[i] >= moderate_floor else t
            for i, t in enumerate(tags)
        ]
    return IsolationPartition(tuple(names), scores, tuple(tags), (q_near, q_iso))


def isolation_partition(
    u2s: SimilarityMatrix, quantiles: tuple[float, float] = (0.5, 0.1)
) -> IsolationPartition:
    """Partition unseen rows by their best seen-neighbor similarity."""
    if u2s.values.shape[1] == 0:
        raise ValueError("no seen columns to compare against")
    scores = u2s.values.max(axis=1)
    return partition_scores(u2s.row_names, scores, quantiles)


def composition_isolation_scores(
    space: CompositionSpace,
    attr_u2s: SimilarityMatrix | None,
    obj_u2s: SimilarityMatrix | None,
    positions: Sequence[int] | None = None,
) -> tuple[tuple[str, ...], np.ndarray]:
    """Per-composition isolation score over unseen-split labels.

    A composition scores the mean of its primitives' best seen-neighbor
    similarities, where a seen primitive contributes exactly 1.
    """
    if positions is None:
        positions = [
            pos for pos, label in enumerate(space.labels) if label.split is not Split.AO
        ]
    attr_best = {}
    if attr_u2s is not None:
        for name, row in zip(attr_u2s.row_names, attr_u2s.values):
            attr_best[name] = float(row.max())
    obj_best = {}
    if obj_u2s is not None:
        for name, row in zip(obj_u2s.row_names, obj_u2s.values):
            obj_best[name] = float(row.max())
    names = []
    scores = []
    for pos in positions:
        label = space.labels[pos]
        a_score = 1.0 if space.attrs.is_seen(label.attribute) else attr_best[label.attribute]
        o_score = 1.0 if space.objs.is_seen(label.object) else obj_best[label.object]
        names.append(f"{label.attribute}|{label.object}")
        scores.append((a_score + o_score) / 2.0)
    return tuple(names), np.array(scores, dtype=np.float64)


def visual_prototype_table(samples: Sequence[Sample], kind: str) -> EmbeddingTable:
    """Normalized mean visual per primitive, over the samples containing it.

    Primitives that never occur in ``samples`` are absent from the result.
    """
    if kind not in ("attribute", "object"):
        raise ValueError(f"unknown primitive kind {kind!r}")
    sums: dict[str, np.ndarray] = {}
    counts: dict[str, int] = {}
    for sample in samples:
        name = sample.label.attribute if kind == "attribute" else sample.label.object
        if name not in sums:
            sums[name] = np.zeros_like(sample.visual)
            counts[name] = 0
        sums[name] = sums[name] + sample.visual
        counts[name] += 1
    names = tuple(sorted(sums))
    rows = np.stack([sums[name] / counts[name] for name in names]) if names else np.zeros((0, 0))
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return EmbeddingTable(names, rows / norms)
