"""Vocabularies, composition space, datasets, and portable serialization.

Primitive names are single opaque tokens. Declaration order is the canonical
row order for every matrix downstream, so all containers here are immutable
after construction.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

VISUAL_NORM_TOL = 1e-6


class TableFormatError(ValueError):
    """Raised when an embedding-table or sample file violates the format."""


class Split(str, enum.Enum):
    """Composition split tags.

    ``AO`` pairs are the only ones seen in training. The other four tags cover
    held-out pairs of seen primitives and the three open-vocabulary cases.
    """

    AO = "AO"
    AO_STAR = "AO_star"
    ASTAR_O = "AstarO"
    A_OSTAR = "AOstar"
    ASTAR_OSTAR = "AstarOstar"


UNSEEN_SPLITS = (Split.AO_STAR, Split.ASTAR_O, Split.A_OSTAR, Split.ASTAR_OSTAR)


def _check_names(names: Iterable[str], what: str) -> None:
    seen: set[str] = set()
    for name in names:
        if not name:
            raise ValueError(f"empty primitive name in {what}")
        if name in seen:
            raise ValueError(f"duplicate primitive {name!r} in {what}")
        seen.add(name)


@dataclass(frozen=True)
class Vocabulary:
    """Ordered seen/unseen primitive names of one kind."""

    kind: str  # "attribute" or "object"
    seen: tuple[str, ...]
    unseen: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in ("attribute", "object"):
            raise ValueError(f"unknown vocabulary kind {self.kind!r}")
        object.__setattr__(self, "seen", tuple(self.seen))
        object.__setattr__(self, "unseen", tuple(self.unseen))
        if not self.seen:
            raise ValueError(f"{self.kind} vocabulary has no seen primitives")
        _check_names(self.seen + self.unseen, f"{self.kind} vocabulary")

    @property
    def names(self) -> tuple[str, ...]:
        """All names, seen first then unseen; defines the extended row order."""
        return self.seen + self.unseen

    @property
    def n_seen(self) -> int:
        return len(self.seen)

    @property
    def n_unseen(self) -> int:
        return len(self.unseen)

    def index(self, name: str) -> int:
        """Position of ``name`` in the extended order."""
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown {self.kind} {name!r}") from None

    def is_seen(self, name: str) -> bool:
        return name in self.seen


@dataclass(frozen=True)
class CompositionLabel:
    attribute: str
    object: str
    split: Split

    @property
    def pair(self) -> tuple[str, str]:
        return (self.attribute, self.object)


@dataclass(frozen=True)
class CompositionSpace:
    """Every evaluated (attribute, object) pair with its split tag.

    Label order is canonical: seen pairs as declared, held-out pairs as
    declared, then the three open-vocabulary blocks in attribute-major order.
    """

    attrs: Vocabulary
    objs: Vocabulary
    labels: tuple[CompositionLabel, ...]
    _index: dict[tuple[str, str], int] = field(repr=False, compare=False, default_factory=dict)

    def __post_init__(self) -> None:
        index: dict[tuple[str, str], int] = {}
        for pos, label in enumerate(self.labels):
            if label.pair in index:
                raise ValueError(f"duplicate composition {label.pair}")
            index[label.pair] = pos
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.labels)

    def position(self, attribute: str, obj: str) -> int:
        try:
            return self._index[(attribute, obj)]
        except KeyError:
            raise KeyError(f"unknown composition ({attribute!r}, {obj!r})") from None

    def splits(self) -> np.ndarray:
        """Split tag of every label, as an object array of Split values."""
        return np.array([label.split for label in self.labels], dtype=object)

    def split_counts(self) -> dict[Split, int]:
        counts = {split: 0 for split in Split}
        for label in self.labels:
            counts[label.split] += 1
        return counts

    def seen_mask(self) -> np.ndarray:
        return np.array([label.split is Split.AO for label in self.labels], dtype=bool)

    def attr_indices(self) -> np.ndarray:
        """Per-label attribute row index in the extended vocabulary order."""
        return np.array([self.attrs.index(label.attribute) for label in self.labels], dtype=np.int64)

    def obj_indices(self) -> np.ndarray:
        return np.array([self.objs.index(label.object) for label in self.labels], dtype=np.int64)

    def positions_of_split(self, split: Split) -> np.ndarray:
        return np.array(
            [pos for pos, label in enumerate(self.labels) if label.split is split], dtype=np.int64
        )


def build_composition_space(
    attrs: Vocabulary,
    objs: Vocabulary,
    seen_pairs: Sequence[tuple[str, str]],
    heldout_pairs: Sequence[tuple[str, str]],
) -> CompositionSpace:
    """Assemble the five-way tagged composition space.

    ``seen_pairs`` become AO, ``heldout_pairs`` become AO_star, and the full
    cross products involving unseen primitives are enumerated exhaustively
    (AstarO, AOstar, AstarOstar). Dataset membership, not this space, decides
    which pairs actually occur as test samples.
    """
    seen_set = set()
    for a, o in seen_pairs:
        if not attrs.is_seen(a):
            raise ValueError(f"seen pair references non-seen attribute {a!r}")
        if not objs.is_seen(o):
            raise ValueError(f"seen pair references non-seen object {o!r}")
        if (a, o) in seen_set:
            raise ValueError(f"duplicate seen pair {(a, o)}")
        seen_set.add((a, o))
    heldout_set = set()
    for a, o in heldout_pairs:
        if not attrs.is_seen(a):
            raise ValueError(f"held-out pair references non-seen attribute {a!r}")
        if not objs.is_seen(o):
            raise ValueError(f"held-out pair references non-seen object {o!r}")
        if (a, o) in seen_set:
            raise ValueError(f"pair {(a, o)} is both seen and held out")
        if (a, o) in heldout_set:
            raise ValueError(f"duplicate held-out pair {(a, o)}")
        heldout_set.add((a, o))

    labels = [CompositionLabel(a, o, Split.AO) for a, o in seen_pairs]
    labels += [CompositionLabel(a, o, Split.AO_STAR) for a, o in heldout_pairs]
    labels += [
        CompositionLabel(a, o, Split.ASTAR_O) for a in attrs.unseen for o in objs.seen
    ]
    labels += [
        CompositionLabel(a, o, Split.A_OSTAR) for a in attrs.seen for o in objs.unseen
    ]
    labels += [
        CompositionLabel(a, o, Split.ASTAR_OSTAR) for a in attrs.unseen for o in objs.unseen
    ]
    return CompositionSpace(attrs, objs, tuple(labels))


@dataclass(frozen=True)
class Sample:
    """One pre-encoded visual with its composition label."""

    visual: np.ndarray
    label: CompositionLabel

    def __post_init__(self) -> None:
        visual = np.array(self.visual, dtype=np.float64)
        if visual.ndim != 1:
            raise ValueError("sample visual must be a vector")
        norm = float(np.linalg.norm(visual))
        if abs(norm - 1.0) > VISUAL_NORM_TOL:
            raise ValueError(f"sample visual norm {norm} departs from 1 beyond tolerance")
        visual.setflags(write=False)
        object.__setattr__(self, "visual", visual)


@dataclass(frozen=True)
class Dataset:
    """Train/test sample lists sharing one embedding dimension."""

    train: tuple[Sample, ...]
    test: tuple[Sample, ...]
    d: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "train", tuple(self.train))
        object.__setattr__(self, "test", tuple(self.test))
        for sample in self.train:
            if sample.label.split is not Split.AO:
                raise ValueError(
                    f"training sample labeled {sample.label.pair} has split "
                    f"{sample.label.split.value}, expected AO"
                )
        for sample in self.train + self.test:
            if sample.visual.shape != (self.d,):
                raise ValueError("sample dimension does not match dataset dimension")


def visuals_matrix(samples: Sequence[Sample]) -> np.ndarray:
    if not samples:
        return np.zeros((0, 0))
    return np.stack([sample.visual for sample in samples])


def label_positions(samples: Sequence[Sample], space: CompositionSpace) -> np.ndarray:
    return np.array(
        [space.position(sample.label.attribute, sample.label.object) for sample in samples],
        dtype=np.int64,
    )


@dataclass(frozen=True)
class EmbeddingTable:
    """Named rows of fixed-dimension real vectors."""

    names: tuple[str, ...]
    rows: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "names", tuple(self.names))
        rows = np.array(self.rows, dtype=np.float64)
        if rows.ndim != 2:
            raise ValueError("embedding rows must form a 2-d matrix")
        if rows.shape[0] != len(self.names):
            raise ValueError(
                f"row count {rows.shape[0]} does not match name count {len(self.names)}"
            )
        _check_names(self.names, "embedding table")
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def __len__(self) -> int:
        return len(self.names)

    def row(self, name: str) -> np.ndarray:
        try:
            return self.rows[self.names.index(name)]
        except ValueError:
            raise KeyError(f"unknown primitive {name!r}") from None

    def take(self, names: Sequence[str]) -> "EmbeddingTable":
        """Sub-table with the given names, in the given order."""
        idx = [self.names.index(n) for n in names]
        return EmbeddingTable(tuple(names), self.rows[idx])


def _format_value(value: float) -> str:
    # exactly 9 significant digits; parsing this back and re-rendering is a
    # fixed point, which makes save/load idempotent at the byte level
    return f"{value:.8e}"


def save_table(table: EmbeddingTable, destination: str | Path) -> None:
    """Write ``table`` as the tab-separated text format.

    Line 1 is ``name`` followed by ``d0``..``d{d-1}``; every following line is
    a primitive name and its row rendered with 9 significant digits.
    """
    destination = Path(destination)
    header = "name\t" + "\t".join(f"d{j}" for j in range(table.dim))
    lines = [header]
    for name, row in zip(table.names, table.rows):
        lines.append(name + "\t" + "\t".join(_format_value(v) for v in row))
    try:
        destination.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise TableFormatError(f"cannot write table to {destination}: {exc}") from exc


def load_table(source: str | Path) -> EmbeddingTable:
    """Parse an embedding table written by :func:`save_table`."""
    source = Path(source)
    try:
        text = source.read_text(encoding="utf-8")
    except OSError as exc:
        raise TableFormatError(f"cannot read table from {source}: {exc}") from exc
    lines = text.splitlines()
    if not lines:
        raise TableFormatError(f"{source}: empty file")
    header = lines[0].split("\t")
    if header[0] != "name" or len(header) < 2:
        raise TableFormatError(f"{source}: malformed header at line 1")
    dim = len(header) - 1
    expected = ["name"] + [f"d{j}" for j in range(dim)]
    if header != expected:
        raise TableFormatError(f"{source}: malformed header at line 1")
    names: list[str] = []
    rows: list[list[float]] = []
    seen: set[str] = set()
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split("\t")
        name = fields[0]
        if not name:
            raise TableFormatError(f"{source}: empty primitive name at line {lineno}")
        if name in seen:
            raise TableFormatError(f"{source}: duplicate primitive {name!r} at line {lineno}")
        seen.add(name)
        if len(fields) != dim + 1:
            raise TableFormatError(f"{source}: ragged row at line {lineno}")
        try:
            rows.append([float(v) for v in fields[1:]])
        except ValueError as exc:
            raise TableFormatError(f"{source}: unparsable value at line {lineno}") from exc
        names.append(name)
    return EmbeddingTable(tuple(names), np.array(rows, dtype=np.float64).reshape(len(names), dim))


def save_vocabularies(attrs: Vocabulary, objs: Vocabulary, destination: str | Path) -> None:
    payload = {
        "attributes": {"seen": list(attrs.seen), "unseen": list(attrs.unseen)},
        "objects": {"seen": list(objs.seen), "unseen": list(objs.unseen)},
    }
    Path(destination).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def load_vocabularies(source: str | Path) -> tuple[Vocabulary, Vocabulary]:
    payload = json.loads(Path(source).read_text(encoding="utf-8"))
    attrs = Vocabulary("attribute", tuple(payload["attributes"]["seen"]), tuple(payload["attributes"]["unseen"]))
    objs = Vocabulary("object", tuple(payload["objects"]["seen"]), tuple(payload["objects"]["unseen"]))
    return attrs, objs


def save_pairs(
    seen_pairs: Sequence[tuple[str, str]],
    heldout_pairs: Sequence[tuple[str, str]],
    destination: str | Path,
) -> None:
    payload = {
        "seen_pairs": [list(p) for p in seen_pairs],
        "heldout_pairs": [list(p) for p in heldout_pairs],
    }
    Path(destination).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def load_pairs(source: str | Path) -> tuple[list[tuple[str, str]], list[tuple[str, str]]]:
    payload = json.loads(Path(source).read_text(encoding="utf-8"))
    seen = [(a, o) for a, o in payload["seen_pairs"]]
    heldout = [(a, o) for a, o in payload["heldout_pairs"]]
    return seen, heldout


def save_samples(samples: Sequence[Sample], destination: str | Path) -> None:
    """Write samples as TSV: id, attribute, object, then the visual floats."""
    if samples:
        dim = samples[0].visual.shape[0]
    else:
        dim = 0
    header = "id\tattribute\tobject\t" + "\t".join(f"d{j}" for j in range(dim))
    lines = [header]
    for i, sample in enumerate(samples):
        lines.append(
            "\t".join(
                [str(i), sample.label.attribute, sample.label.object]
                + [_format_value(v) for v in sample.visual]
            )
        )
    Path(destination).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_samples(source: str | Path, space: CompositionSpace) -> list[Sample]:
    source = Path(source)
    lines = source.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise TableFormatError(f"{source}: empty file")
    samples: list[Sample] = []
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split("\t")
        if len(fields) < 4:
            raise TableFormatError(f"{source}: ragged row at line {lineno}")
        attribute, obj = fields[1], fields[2]
        label = space.labels[space.position(attribute, obj)]
        visual = np.array([float(v) for v in fields[3:]], dtype=np.float64)
        samples.append(Sample(visual, label))
    return samples
