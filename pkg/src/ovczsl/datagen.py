"""Seeded synthetic benchmark generator with known ground truth.

Hidden unit prototypes define the world: each unseen primitive's prototype is
planted at a controlled cosine similarity to a randomly chosen seen anchor,
every composition's visual prototype is the normalized sum of its primitives'
prototypes, and samples are noisy normalized copies. Observable primitive
embeddings (the initial token rows for training and adaptation) are noisy
views of the hidden prototypes seen through a fixed random rotation, the
semantic-visual gap: semantic neighborhoods mirror visual ones by
construction (rotations preserve cosines), but the semantic space is
systematically misaligned with the visual one, so initial prompts are
imperfect zero-shot classifiers and training has a shared, locally smooth
correction to learn, the kind of correction that neighbor transfer can carry
to unseen primitives.

All randomness comes from numpy's Philox counter-based bit generator keyed by
``(seed, benchmark domain)``. Draws happen in a fixed documented order (seen
attribute prototypes, unseen attribute anchors and noise, seen object
prototypes, unseen object anchors and noise, the gap rotation, observable
attribute noise, observable object noise, seen-pair coverage permutations and
fill, held-out pairs, train samples in space order, test samples in space
order), so a config reproduces its benchmark byte for byte.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy.linalg import expm

from .seeds import DOMAIN_BENCHMARK, seeded_rng
from .diagnostics import ISOLATED, MODERATE, NEAR
from .vocab import (
    CompositionSpace,
    Dataset,
    EmbeddingTable,
    Sample,
    Split,
    Vocabulary,
    build_composition_space,
    load_pairs,
    load_samples,
    load_table,
    load_vocabularies,
    save_pairs,
    save_samples,
    save_table,
    save_vocabularies,
)

GENERATOR_VERSION = "1"

GROUP_ORDER = (NEAR, MODERATE, ISOLATED)


@dataclass(frozen=True)
class GenConfig:
    d: int = 32
    attrs_seen: int = 12
    attrs_unseen: int = 4
    objs_seen: int = 9
    objs_unseen: int = 3
    seen_pairs: int = 49
    heldout_pairs: int = 9
    train_per_comp: int = 20
    test_per_comp: int = 5
    sigma_primitive: float = 0.05
    sigma_visual: float = 0.30
    semantic_visual_gap: float = 1.5
    isolation_fractions: tuple[float, float, float] = (0.5, 0.4, 0.1)
    isolation_sims: tuple[float, float, float] = (0.78, 0.66, 0.41)
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "isolation_fractions", tuple(self.isolation_fractions))
        object.__setattr__(self, "isolation_sims", tuple(self.isolation_sims))
        if self.d < 2:
            raise ValueError("d must be >= 2")
        if min(self.attrs_seen, self.objs_seen) < 1:
            raise ValueError("need at least one seen attribute and object")
        if min(self.attrs_unseen, self.objs_unseen) < 0:
            raise ValueError("unseen counts must be >= 0")
        max_pairs = self.attrs_seen * self.objs_seen
        if not 1 <= self.seen_pairs <= max_pairs:
            raise ValueError(f"seen_pairs must lie in [1, {max_pairs}]")
        if not 0 <= self.heldout_pairs <= max_pairs - self.seen_pairs:
            raise ValueError(f"heldout_pairs must lie in [0, {max_pairs - self.seen_pairs}]")
        if self.train_per_comp < 1 or self.test_per_comp < 0:
            raise ValueError("invalid samples-per-composition counts")
        if self.sigma_primitive < 0 or self.sigma_visual < 0:
            raise ValueError("noise scales must be >= 0")
        if self.semantic_visual_gap < 0:
            raise ValueError("semantic_visual_gap must be >= 0")
        if len(self.isolation_fractions) != 3 or len(self.isolation_sims) != 3:
            raise ValueError("isolation mix needs exactly three groups")
        if abs(sum(self.isolation_fractions) - 1.0) > 1e-9:
            raise ValueError("isolation fractions must sum to 1")
        if any(f < 0 for f in self.isolation_fractions):
            raise ValueError("isolation fractions must be >= 0")
        s = self.isolation_sims
        if not (0.0 < s[2] < s[1] < s[0] <= 1.0):
            raise ValueError("isolation target similarities must satisfy 0 < Isolated < Moderate < Near <= 1")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["isolation_fractions"] = list(self.isolation_fractions)
        out["isolation_sims"] = list(self.isolation_sims)
        return out

    @classmethod
    def from_dict(cls, payload: dict) -> "GenConfig":
        kwargs = dict(payload)
        for key in ("isolation_fractions", "isolation_sims"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        unknown = set(kwargs) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown generator config keys {sorted(unknown)}")
        return cls(**kwargs)


def preset(name: str) -> GenConfig:
    """Benchmark configs whose vocabulary and pair counts copy real dataset shapes."""
    if name == "zappos_shape":
        return GenConfig(
            attrs_seen=12, attrs_unseen=4, objs_seen=9, objs_unseen=3,
            seen_pairs=49, heldout_pairs=9, train_per_comp=20, test_per_comp=12,
        )
    if name == "mitstates_shape":
        return GenConfig(
            attrs_seen=84, attrs_unseen=31, objs_seen=182, objs_unseen=63,
            seen_pairs=955, heldout_pairs=130, train_per_comp=4, test_per_comp=1,
        )
    raise ValueError(f"unknown preset {name!r}, expected zappos_shape or mitstates_shape")


@dataclass(frozen=True)
class HiddenTables:
    """Oracle-only ground truth. Never feed these into training, adaptation,
    or evaluation; they exist to compute reference ceilings and to audit the
    construction."""

    attr: EmbeddingTable
    obj: EmbeddingTable
    comp: EmbeddingTable
    attr_groups: tuple[str, ...]
    obj_groups: tuple[str, ...]
    attr_anchors: tuple[str, ...]
    obj_anchors: tuple[str, ...]
    gap_rotation: np.ndarray

    def __post_init__(self) -> None:
        gap = np.array(self.gap_rotation, dtype=np.float64)
        gap.setflags(write=False)
        object.__setattr__(self, "gap_rotation", gap)


@dataclass(frozen=True)
class GeneratedBenchmark:
    config: GenConfig
    attrs: Vocabulary
    objs: Vocabulary
    space: CompositionSpace
    dataset: Dataset
    observable_attr: EmbeddingTable
    observable_obj: EmbeddingTable
    hidden: HiddenTables


def _apportion(fractions: tuple[float, float, float], total: int) -> list[int]:
    """Largest-remainder apportionment; remainders tie toward earlier groups."""
    raw = [f * total for f in fractions]
    counts = [int(np.floor(r)) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


def _unit_rows(rows: np.ndarray) -> np.ndarray:
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def _gap_rotation(rng: np.random.Generator, d: int, strength: float) -> np.ndarray:
    """Orthogonal semantic-visual misalignment, exp of a random skew matrix.

    ``strength`` 0 is the identity; around 1.5 a typical unit vector is
    rotated by roughly 60 degrees.
    """
    gaussian = rng.standard_normal((d, d))
    skew = (gaussian - gaussian.T) / (2.0 * np.sqrt(d))
    return expm(strength * skew)


def _planted_prototypes(
    rng: np.random.Generator,
    seen_protos: np.ndarray,
    n_unseen: int,
    config: GenConfig,
) -> tuple[np.ndarray, list[str], list[int]]:
    """Unseen prototypes at the configured cosine to a random seen anchor."""
    groups: list[str] = []
    counts = _apportion(config.isolation_fractions, n_unseen)
    for tag, count in zip(GROUP_ORDER, counts):
        groups.extend([tag] * count)
    target = dict(zip(GROUP_ORDER, config.isolation_sims))
    protos = np.empty((n_unseen, seen_protos.shape[1]))
    anchors: list[int] = []
    for i in range(n_unseen):
        anchor = int(rng.integers(seen_protos.shape[0]))
        noise = rng.standard_normal(seen_protos.shape[1])
        base = seen_protos[anchor]
        noise = noise - (noise @ base) * base
        norm = np.linalg.norm(noise)
        if norm < 1e-12:
            raise RuntimeError("degenerate orthogonal noise draw")
        s = target[groups[i]]
        protos[i] = s * base + np.sqrt(max(0.0, 1.0 - s * s)) * (noise / norm)
        anchors.append(anchor)
    return protos, groups, anchors


def generate(config: GenConfig) -> GeneratedBenchmark:
    """Produce the full benchmark for ``config``; see the module docstring for
    the draw-order contract."""
    rng = seeded_rng(config.seed, DOMAIN_BENCHMARK)

    attr_names = [f"attr{i:03d}" for i in range(config.attrs_seen + config.attrs_unseen)]
    obj_names = [f"obj{i:03d}" for i in range(config.objs_seen + config.objs_unseen)]
    attrs = Vocabulary("attribute", tuple(attr_names[: config.attrs_seen]), tuple(attr_names[config.attrs_seen :]))
    objs = Vocabulary("object", tuple(obj_names[: config.objs_seen]), tuple(obj_names[config.objs_seen :]))

    attr_seen_protos = _unit_rows(rng.standard_normal((config.attrs_seen, config.d)))
    attr_unseen_protos, attr_groups, attr_anchor_idx = _planted_prototypes(
        rng, attr_seen_protos, config.attrs_unseen, config
    )
    obj_seen_protos = _unit_rows(rng.standard_normal((config.objs_seen, config.d)))
    obj_unseen_protos, obj_groups, obj_anchor_idx = _planted_prototypes(
        rng, obj_seen_protos, config.objs_unseen, config
    )
    attr_protos = np.vstack([attr_seen_protos, attr_unseen_protos.reshape(-1, config.d)])
    obj_protos = np.vstack([obj_seen_protos, obj_unseen_protos.reshape(-1, config.d)])

    gap = _gap_rotation(rng, config.d, config.semantic_visual_gap)
    observable_attr = _unit_rows(
        attr_protos @ gap.T + config.sigma_primitive * rng.standard_normal(attr_protos.shape)
    )
    observable_obj = _unit_rows(
        obj_protos @ gap.T + config.sigma_primitive * rng.standard_normal(obj_protos.shape)
    )

    # seen pairs: a coverage pass touches every seen primitive at least once
    # (when the budget allows), then a uniform fill without replacement
    attr_perm = rng.permutation(config.attrs_seen)
    obj_perm = rng.permutation(config.objs_seen)
    coverage = [
        (int(attr_perm[t % config.attrs_seen]), int(obj_perm[t % config.objs_seen]))
        for t in range(max(config.attrs_seen, config.objs_seen))
    ]
    coverage = coverage[: config.seen_pairs]
    chosen = set(coverage)
    pool = [
        (i, j)
        for i in range(config.attrs_seen)
        for j in range(config.objs_seen)
        if (i, j) not in chosen
    ]
    fill_count = config.seen_pairs - len(coverage)
    if fill_count:
        picks = rng.choice(len(pool), size=fill_count, replace=False)
        coverage.extend(pool[int(p)] for p in picks)
        chosen.update(pool[int(p)] for p in picks)
    seen_pairs = [(attrs.seen[i], objs.seen[j]) for i, j in coverage]

    remaining = [
        (i, j)
        for i in range(config.attrs_seen)
        for j in range(config.objs_seen)
        if (i, j) not in chosen
    ]
    heldout_pairs = []
    if config.heldout_pairs:
        picks = rng.choice(len(remaining), size=config.heldout_pairs, replace=False)
        heldout_pairs = [(attrs.seen[remaining[int(p)][0]], objs.seen[remaining[int(p)][1]]) for p in picks]

    space = build_composition_space(attrs, objs, seen_pairs, heldout_pairs)

    comp_names = []
    comp_protos = np.empty((len(space), config.d))
    for pos, label in enumerate(space.labels):
        proto = attr_protos[attrs.index(label.attribute)] + obj_protos[objs.index(label.object)]
        comp_protos[pos] = proto / np.linalg.norm(proto)
        comp_names.append(f"{label.attribute}|{label.object}")

    def draw_samples(positions: np.ndarray, per_comp: int) -> list[Sample]:
        out = []
        for pos in positions:
            label = space.labels[int(pos)]
            for _ in range(per_comp):
                visual = comp_protos[int(pos)] + config.sigma_visual * rng.standard_normal(config.d)
                out.append(Sample(visual / np.linalg.norm(visual), label))
        return out

    train = draw_samples(space.positions_of_split(Split.AO), config.train_per_comp)
    test = draw_samples(np.arange(len(space)), config.test_per_comp)
    dataset = Dataset(tuple(train), tuple(test), config.d)

    hidden = HiddenTables(
        attr=EmbeddingTable(attrs.names, attr_protos),
        obj=EmbeddingTable(objs.names, obj_protos),
        comp=EmbeddingTable(tuple(comp_names), comp_protos),
        attr_groups=tuple(attr_groups),
        obj_groups=tuple(obj_groups),
        attr_anchors=tuple(attrs.seen[i] for i in attr_anchor_idx),
        obj_anchors=tuple(objs.seen[i] for i in obj_anchor_idx),
        gap_rotation=gap,
    )
    return GeneratedBenchmark(
        config=config,
        attrs=attrs,
        objs=objs,
        space=space,
        dataset=dataset,
        observable_attr=EmbeddingTable(attrs.names, observable_attr),
        observable_obj=EmbeddingTable(objs.names, observable_obj),
        hidden=hidden,
    )


def oracle_best_accuracy(benchmark: GeneratedBenchmark, k: int = 1) -> dict[Split, float]:
    """Per-split accuracy of scoring visuals against the hidden composition
    prototypes; a ceiling reference for trained models."""
    from .evaluation import ScoreMatrix, split_accuracy
    from .vocab import label_positions, visuals_matrix

    samples = benchmark.dataset.test
    visuals = visuals_matrix(samples)
    visuals = visuals / np.linalg.norm(visuals, axis=1, keepdims=True)
    values = np.clip(visuals @ benchmark.hidden.comp.rows.T, -1.0, 1.0)
    scores = ScoreMatrix(benchmark.space, values)
    return split_accuracy(scores, label_positions(samples, benchmark.space), k=k)


BENCHMARK_FILES = (
    "vocab.json",
    "space.json",
    "train.tsv",
    "test.tsv",
    "observable_attr.tsv",
    "observable_obj.tsv",
    "oracle/hidden_attr.tsv",
    "oracle/hidden_obj.tsv",
    "oracle/hidden_comp.tsv",
)


def file_checksum(path: str | Path) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()


def write_benchmark(benchmark: GeneratedBenchmark, directory: str | Path) -> list[Path]:
    """Write the benchmark directory layout and its checksum manifest."""
    directory = Path(directory)
    (directory / "oracle").mkdir(parents=True, exist_ok=True)
    save_vocabularies(benchmark.attrs, benchmark.objs, directory / "vocab.json")
    seen = [label.pair for label in benchmark.space.labels if label.split is Split.AO]
    heldout = [label.pair for label in benchmark.space.labels if label.split is Split.AO_STAR]
    save_pairs(seen, heldout, directory / "space.json")
    save_samples(benchmark.dataset.train, directory / "train.tsv")
    save_samples(benchmark.dataset.test, directory / "test.tsv")
    save_table(benchmark.observable_attr, directory / "observable_attr.tsv")
    save_table(benchmark.observable_obj, directory / "observable_obj.tsv")
    save_table(benchmark.hidden.attr, directory / "oracle/hidden_attr.tsv")
    save_table(benchmark.hidden.obj, directory / "oracle/hidden_obj.tsv")
    save_table(benchmark.hidden.comp, directory / "oracle/hidden_comp.tsv")
    manifest = {
        "config": benchmark.config.to_dict(),
        "generator_version": GENERATOR_VERSION,
        "checksums": {name: file_checksum(directory / name) for name in BENCHMARK_FILES},
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return [directory / name for name in BENCHMARK_FILES] + [directory / "manifest.json"]


@dataclass(frozen=True)
class LoadedBenchmark:
    """Observable side of a benchmark directory; hidden tables stay on disk."""

    attrs: Vocabulary
    objs: Vocabulary
    space: CompositionSpace
    dataset: Dataset
    observable_attr: EmbeddingTable
    observable_obj: EmbeddingTable
    manifest: dict = field(compare=False)

    @property
    def d(self) -> int:
        return self.dataset.d


def load_benchmark(directory: str | Path) -> LoadedBenchmark:
    directory = Path(directory)
    attrs, objs = load_vocabularies(directory / "vocab.json")
    seen, heldout = load_pairs(directory / "space.json")
    space = build_composition_space(attrs, objs, seen, heldout)
    observable_attr = load_table(directory / "observable_attr.tsv")
    observable_obj = load_table(directory / "observable_obj.tsv")
    train = load_samples(directory / "train.tsv", space)
    test = load_samples(directory / "test.tsv", space)
    manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    dataset = Dataset(tuple(train), tuple(test), observable_attr.dim)
    return LoadedBenchmark(
        attrs=attrs,
        objs=objs,
        space=space,
        dataset=dataset,
        observable_attr=observable_attr,
        observable_obj=observable_obj,
        manifest=manifest,
    )
