"""Frozen toy text encoder and the learnable prompt-parameter state.

The encoder maps a prompt (fixed context tokens plus one learnable token per
primitive, or two for a composition) to a unit vector in three steps:

    mean-pool the token rows -> multiply by a fixed orthogonal projection
    -> L2 normalize.

It is the simplest frozen map that is differentiable in the learnable tokens,
approximately preserves cosine geometry, and leaves the structural
regularizer with real work to do. Only the per-primitive token matrices are
trainable; context, projection, and the initial token snapshots are frozen
and guarded by checksums.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .seeds import DOMAIN_CONTEXT, DOMAIN_ENCODER, seeded_rng
from .vocab import EmbeddingTable, _format_value, load_table, save_table

ORTHOGONALITY_TOL = 1e-6

ATTR = "attr"
OBJ = "obj"


def random_orthogonal(seed: int, d: int) -> np.ndarray:
    """Deterministic random orthogonal d x d matrix (QR with sign correction)."""
    rng = seeded_rng(seed, DOMAIN_ENCODER)
    gaussian = rng.standard_normal((d, d))
    q, r = np.linalg.qr(gaussian)
    # fixing the sign of R's diagonal makes the factorization unique
    q = q * np.sign(np.diag(r))[None, :]
    return q


@dataclass(frozen=True)
class FrozenEncoder:
    """Fixed orthogonal projection applied after mean pooling."""

    projection: np.ndarray
    d: int

    def __post_init__(self) -> None:
        projection = np.array(self.projection, dtype=np.float64)
        if projection.shape != (self.d, self.d):
            raise ValueError("projection must be d x d")
        err = np.abs(projection.T @ projection - np.eye(self.d)).max()
        if err > ORTHOGONALITY_TOL:
            raise ValueError(f"projection is not orthogonal (deviation {err:.3e})")
        projection.setflags(write=False)
        object.__setattr__(self, "projection", projection)

    @classmethod
    def from_seed(cls, seed: int, d: int) -> "FrozenEncoder":
        return cls(random_orthogonal(seed, d), d)


def context_tokens(seed: int, m: int, d: int) -> np.ndarray:
    """Seeded fixed context rows at unit expected norm per token.

    Raw N(0, 1) rows would have norm sqrt(d) and drown the primitive tokens
    in the pooled mean.
    """
    return seeded_rng(seed, DOMAIN_CONTEXT).standard_normal((m, d)) / np.sqrt(d)


def aligned_initial_tokens(
    enc: FrozenEncoder, context: np.ndarray, table: EmbeddingTable, scale: float = 1.0
) -> EmbeddingTable:
    """Initial token rows whose primitive prompts encode to the table rows.

    Solving mean-pool -> projection for the token gives
    ``scale * (m + 1) * projection^T row - context_sum``; with these tokens the
    initial primitive prompt reproduces its embedding exactly, the toy
    counterpart of pretrained token embeddings that already align with the
    visual space. Composition prompts inherit a small common offset from the
    context, an anisotropy that training learns to counteract.
    """
    if scale <= 0:
        raise ValueError("scale must be positive")
    m = context.shape[0]
    rows = scale * (m + 1) * (table.rows @ enc.projection) - context.sum(axis=0)[None, :]
    return EmbeddingTable(table.names, rows)


def _frozen_digest(m: int, d: int, arrays: list[np.ndarray]) -> str:
    """Checksum over the canonical 9-significant-digit rendering.

    Rendering before hashing makes the digest invariant under a save/load
    round trip of the underlying tables.
    """
    h = hashlib.sha256()
    h.update(f"{m}:{d}".encode())
    for arr in arrays:
        for v in np.asarray(arr, dtype=np.float64).ravel():
            h.update(_format_value(v).encode())
            h.update(b"\t")
    return h.hexdigest()


@dataclass
class PromptState:
    """Fixed context tokens plus learnable per-primitive token rows.

    ``theta_attr`` and ``theta_obj`` are the only trainable parameters in the
    system. The ``*_init`` snapshots and the context never change after
    construction; ``verify_frozen`` re-derives their checksum and raises on
    any drift.
    """

    seed: int
    m: int
    context: np.ndarray
    theta_attr: np.ndarray
    theta_obj: np.ndarray
    theta_attr_init: np.ndarray
    theta_obj_init: np.ndarray
    attr_names: tuple[str, ...]
    obj_names: tuple[str, ...]
    checksum: str = field(default="", compare=False)

    def __post_init__(self) -> None:
        self.context = np.array(self.context, dtype=np.float64)
        self.theta_attr = np.array(self.theta_attr, dtype=np.float64)
        self.theta_obj = np.array(self.theta_obj, dtype=np.float64)
        self.theta_attr_init = np.array(self.theta_attr_init, dtype=np.float64)
        self.theta_obj_init = np.array(self.theta_obj_init, dtype=np.float64)
        d = self.context.shape[1] if self.context.size else self.theta_attr.shape[1]
        if self.context.shape != (self.m, d):
            raise ValueError("context must be an m x d matrix")
        for theta, init, names, kind in (
            (self.theta_attr, self.theta_attr_init, self.attr_names, ATTR),
            (self.theta_obj, self.theta_obj_init, self.obj_names, OBJ),
        ):
            if theta.shape != (len(names), d) or init.shape != theta.shape:
                raise ValueError(f"{kind} token matrices must be |names| x d")
        for frozen in (self.context, self.theta_attr_init, self.theta_obj_init):
            frozen.setflags(write=False)
        self.checksum = self.frozen_checksum()

    @property
    def d(self) -> int:
        return self.theta_attr.shape[1]

    @classmethod
    def create(
        cls,
        seed: int,
        m: int,
        attr_init: EmbeddingTable,
        obj_init: EmbeddingTable,
    ) -> "PromptState":
        """Fresh state: seeded context, token rows copied from the given tables."""
        if attr_init.dim != obj_init.dim:
            raise ValueError("attribute and object tables disagree on dimension")
        d = attr_init.dim
        context = context_tokens(seed, m, d)
        return cls(
            seed=seed,
            m=m,
            context=context,
            theta_attr=attr_init.rows.copy(),
            theta_obj=obj_init.rows.copy(),
            theta_attr_init=attr_init.rows.copy(),
            theta_obj_init=obj_init.rows.copy(),
            attr_names=attr_init.names,
            obj_names=obj_init.names,
        )

    def frozen_checksum(self) -> str:
        return _frozen_digest(
            self.m, self.d, [self.context, self.theta_attr_init, self.theta_obj_init]
        )

    def verify_frozen(self) -> None:
        if self.frozen_checksum() != self.checksum:
            raise RuntimeError("frozen prompt components were mutated")

    def theta(self, kind: str, use_init: bool = False) -> np.ndarray:
        if kind == ATTR:
            return self.theta_attr_init if use_init else self.theta_attr
        if kind == OBJ:
            return self.theta_obj_init if use_init else self.theta_obj
        raise ValueError(f"unknown primitive kind {kind!r}")

    def names(self, kind: str) -> tuple[str, ...]:
        if kind == ATTR:
            return self.attr_names
        if kind == OBJ:
            return self.obj_names
        raise ValueError(f"unknown primitive kind {kind!r}")

    def copy(self) -> "PromptState":
        return PromptState(
            seed=self.seed,
            m=self.m,
            context=self.context,
            theta_attr=self.theta_attr.copy(),
            theta_obj=self.theta_obj.copy(),
            theta_attr_init=self.theta_attr_init,
            theta_obj_init=self.theta_obj_init,
            attr_names=self.attr_names,
            obj_names=self.obj_names,
        )


def _project_normalize(enc: FrozenEncoder, pooled: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Forward pass from pooled token means to unit outputs; returns (T, norms)."""
    z = pooled @ enc.projection.T
    norms = np.linalg.norm(z, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("zero vector cannot be normalized")
    return z / norms[:, None], norms


def _pullback(
    enc: FrozenEncoder, outputs: np.ndarray, norms: np.ndarray, grad_outputs: np.ndarray
) -> np.ndarray:
    """Gradient of the pooled means given gradients of the unit outputs."""
    radial = np.sum(grad_outputs * outputs, axis=1, keepdims=True)
    dz = (grad_outputs - radial * outputs) / norms[:, None]
    return dz @ enc.projection


def encode_primitives(
    enc: FrozenEncoder, state: PromptState, kind: str, use_init: bool = False
) -> np.ndarray:
    """Encode every primitive of one kind; rows follow the state's name order."""
    theta = state.theta(kind, use_init)
    pooled = (state.context.sum(axis=0)[None, :] + theta) / (state.m + 1)
    outputs, _ = _project_normalize(enc, pooled)
    return outputs


def encode_primitive(
    enc: FrozenEncoder, state: PromptState, kind: str, index: int, use_init: bool = False
) -> np.ndarray:
    theta = state.theta(kind, use_init)
    if not 0 <= index < theta.shape[0]:
        raise IndexError(f"{kind} index {index} out of range [0, {theta.shape[0]})")
    pooled = (state.context.sum(axis=0) + theta[index]) / (state.m + 1)
    outputs, _ = _project_normalize(enc, pooled[None, :])
    return outputs[0]


def encode_gradient(
    enc: FrozenEncoder,
    state: PromptState,
    kind: str,
    index: int,
    grad_output: np.ndarray,
    use_init: bool = False,
) -> np.ndarray:
    """Gradient of a scalar loss w.r.t. one token row, given the loss gradient
    at the encoded unit vector."""
    theta = state.theta(kind, use_init)
    if not 0 <= index < theta.shape[0]:
        raise IndexError(f"{kind} index {index} out of range [0, {theta.shape[0]})")
    pooled = (state.context.sum(axis=0) + theta[index]) / (state.m + 1)
    outputs, norms = _project_normalize(enc, pooled[None, :])
    dpooled = _pullback(enc, outputs, norms, np.asarray(grad_output, dtype=np.float64)[None, :])
    return dpooled[0] / (state.m + 1)


def primitive_batch_gradients(
    enc: FrozenEncoder, state: PromptState, kind: str, grad_outputs: np.ndarray
) -> np.ndarray:
    """Token-matrix gradient when every primitive of a kind was encoded once."""
    theta = state.theta(kind)
    pooled = (state.context.sum(axis=0)[None, :] + theta) / (state.m + 1)
    outputs, norms = _project_normalize(enc, pooled)
    return _pullback(enc, outputs, norms, grad_outputs) / (state.m + 1)


def encode_compositions(enc: FrozenEncoder, state, attr_idx: np.ndarray, obj_idx: np.ndarray) -> np.ndarray:
    """Encode (attribute, object) prompts given index arrays into the token rows.

    ``state`` may be a PromptState or an extended read-only state; it only
    needs ``context``, ``theta_attr``, ``theta_obj`` and ``m``.
    """
    attr_idx = np.asarray(attr_idx, dtype=np.int64)
    obj_idx = np.asarray(obj_idx, dtype=np.int64)
    if attr_idx.size and (attr_idx.min() < 0 or attr_idx.max() >= state.theta_attr.shape[0]):
        raise IndexError("attribute index out of range")
    if obj_idx.size and (obj_idx.min() < 0 or obj_idx.max() >= state.theta_obj.shape[0]):
        raise IndexError("object index out of range")
    pooled = (
        state.context.sum(axis=0)[None, :] + state.theta_attr[attr_idx] + state.theta_obj[obj_idx]
    ) / (state.m + 2)
    outputs, _ = _project_normalize(enc, pooled)
    return outputs


def encode_composition(enc: FrozenEncoder, state, a: int, o: int) -> np.ndarray:
    return encode_compositions(enc, state, np.array([a]), np.array([o]))[0]


def composition_batch_gradients(
    enc: FrozenEncoder,
    state: PromptState,
    attr_idx: np.ndarray,
    obj_idx: np.ndarray,
    grad_outputs: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Accumulate composition-output gradients into the two token matrices.

    Scatter summation runs in fixed index order, keeping results deterministic.
    """
    attr_idx = np.asarray(attr_idx, dtype=np.int64)
    obj_idx = np.asarray(obj_idx, dtype=np.int64)
    pooled = (
        state.context.sum(axis=0)[None, :] + state.theta_attr[attr_idx] + state.theta_obj[obj_idx]
    ) / (state.m + 2)
    outputs, norms = _project_normalize(enc, pooled)
    dpooled = _pullback(enc, outputs, norms, grad_outputs) / (state.m + 2)
    d_attr = np.zeros_like(state.theta_attr)
    d_obj = np.zeros_like(state.theta_obj)
    np.add.at(d_attr, attr_idx, dpooled)
    np.add.at(d_obj, obj_idx, dpooled)
    return d_attr, d_obj


def encode_composition_gradient(
    enc: FrozenEncoder, state: PromptState, a: int, o: int, grad_output: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Per-row gradients for a single composition prompt."""
    d_attr, d_obj = composition_batch_gradients(
        enc,
        state,
        np.array([a]),
        np.array([o]),
        np.asarray(grad_output, dtype=np.float64)[None, :],
    )
    return d_attr[a], d_obj[o]


STATE_FILES = {
    "attr": "prompts_attr.tsv",
    "attr_init": "prompts_attr_init.tsv",
    "obj": "prompts_obj.tsv",
    "obj_init": "prompts_obj_init.tsv",
    "sidecar": "state.json",
}


def save_prompt_state(state: PromptState, directory: str | Path) -> list[Path]:
    """Persist current and initial token tables plus the seed sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for key, names, rows in (
        ("attr", state.attr_names, state.theta_attr),
        ("attr_init", state.attr_names, state.theta_attr_init),
        ("obj", state.obj_names, state.theta_obj),
        ("obj_init", state.obj_names, state.theta_obj_init),
    ):
        path = directory / STATE_FILES[key]
        save_table(EmbeddingTable(names, rows), path)
        written.append(path)
    sidecar = directory / STATE_FILES["sidecar"]
    sidecar.write_text(
        json.dumps(
            {"seed": state.seed, "m": state.m, "d": state.d, "checksum": state.checksum},
            indent=2,
        )
        + "\n",
        encoding="utf-8",
    )
    written.append(sidecar)
    return written


def load_prompt_state(directory: str | Path) -> tuple[FrozenEncoder, PromptState]:
    """Rebuild encoder and state; context is regenerated from the stored seed."""
    directory = Path(directory)
    meta = json.loads((directory / STATE_FILES["sidecar"]).read_text(encoding="utf-8"))
    seed, m, d = int(meta["seed"]), int(meta["m"]), int(meta["d"])
    attr = load_table(directory / STATE_FILES["attr"])
    attr_init = load_table(directory / STATE_FILES["attr_init"])
    obj = load_table(directory / STATE_FILES["obj"])
    obj_init = load_table(directory / STATE_FILES["obj_init"])
    context = context_tokens(seed, m, d)
    state = PromptState(
        seed=seed,
        m=m,
        context=context,
        theta_attr=attr.rows.copy(),
        theta_obj=obj.rows.copy(),
        theta_attr_init=attr_init.rows,
        theta_obj_init=obj_init.rows,
        attr_names=attr.names,
        obj_names=obj.names,
    )
    if state.checksum != meta["checksum"]:
        raise RuntimeError(f"prompt state in {directory} fails its frozen checksum")
    return FrozenEncoder.from_seed(seed, d), state
