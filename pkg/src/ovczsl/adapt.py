"""Inference-time calibration of unseen primitives.

Each unseen primitive inherits a convex combination of the training deltas of
its Top-K most similar seen primitives, with weights from a temperature
softmax over initial-embedding similarities. Seen parameters are never
touched; the result is a read-only extended prompt state covering the full
vocabularies.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import encoder as enc_mod
from .encoder import ATTR, OBJ, FrozenEncoder, PromptState
from .structure import SimilarityMatrix, softmax_rows, topk_neighbors
from .vocab import EmbeddingTable


@dataclass(frozen=True)
class DeltaTable:
    """Per-primitive parameter shifts caused by training."""

    kind: str
    names: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.float64)
        if values.shape[0] != len(self.names):
            raise ValueError("delta rows must match primitive names")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "names", tuple(self.names))


def compute_deltas(state: PromptState) -> tuple[DeltaTable, DeltaTable]:
    """Exact elementwise difference between current and initial token rows."""
    for theta, init in ((state.theta_attr, state.theta_attr_init), (state.theta_obj, state.theta_obj_init)):
        if theta.shape != init.shape:
            raise ValueError("current and initial token shapes disagree")
    return (
        DeltaTable(ATTR, state.attr_names, state.theta_attr - state.theta_attr_init),
        DeltaTable(OBJ, state.obj_names, state.theta_obj - state.theta_obj_init),
    )


def u2s_similarity(
    enc: FrozenEncoder,
    state: PromptState,
    unseen_table: EmbeddingTable,
    kind: str,
) -> SimilarityMatrix:
    """Cosine between encoded initial prompts of unseen and seen primitives.

    Both sides go through the frozen encoder with initial parameters; the
    unseen rows of ``unseen_table`` serve as their (never trained) tokens.
    """
    if unseen_table.dim != state.d:
        raise ValueError(f"unseen table dimension {unseen_table.dim} != state dimension {state.d}")
    seen = enc_mod.encode_primitives(enc, state, kind, use_init=True)
    pooled = (state.context.sum(axis=0)[None, :] + unseen_table.rows) / (state.m + 1)
    z = pooled @ enc.projection.T
    norms = np.linalg.norm(z, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("unseen prompt encodes to the zero vector")
    unseen = z / norms[:, None]
    values = np.clip(unseen @ seen.T, -1.0, 1.0)
    return SimilarityMatrix(unseen_table.names, state.names(kind), values)


def adapt_unseen(
    deltas: DeltaTable,
    u2s: SimilarityMatrix,
    k: int,
    tau: float,
    theta_unseen_init: np.ndarray,
) -> tuple[np.ndarray, tuple[tuple[tuple[int, float], ...], ...]]:
    """Neighbor-weighted delta transfer for one primitive kind.

    Returns the calibrated token rows (initial row plus the weighted delta
    sum) and, per row, the (seen index, weight) provenance of its K neighbors.
    """
    if u2s.col_names != deltas.names:
        raise ValueError("similarity columns do not match delta rows")
    theta_unseen_init = np.asarray(theta_unseen_init, dtype=np.float64)
    if theta_unseen_init.shape != (len(u2s.row_names), deltas.values.shape[1]):
        raise ValueError("unseen initial rows have the wrong shape")
    neighborhood = topk_neighbors(u2s, k, exclude_self=False)
    scores = np.take_along_axis(u2s.values, neighborhood.indices, axis=1)
    weights = softmax_rows(scores, tau).probs
    shifts = np.einsum("nk,nkd->nd", weights, deltas.values[neighborhood.indices])
    calibrated = theta_unseen_init + shifts
    provenance = tuple(
        tuple((int(j), float(w)) for j, w in zip(idx_row, w_row))
        for idx_row, w_row in zip(neighborhood.indices, weights)
    )
    return calibrated, provenance


@dataclass(frozen=True)
class CalibratedPrompts:
    """Calibrated token rows for every unseen primitive, with provenance."""

    attr_names: tuple[str, ...]
    obj_names: tuple[str, ...]
    theta_unseen_attr: np.ndarray
    theta_unseen_obj: np.ndarray
    provenance_attr: tuple[tuple[tuple[int, float], ...], ...]
    provenance_obj: tuple[tuple[tuple[int, float], ...], ...]

    def __post_init__(self) -> None:
        for arr_name in ("theta_unseen_attr", "theta_unseen_obj"):
            arr = np.array(getattr(self, arr_name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, arr_name, arr)
        for prov in self.provenance_attr + self.provenance_obj:
            weight_sum = sum(w for _, w in prov)
            if abs(weight_sum - 1.0) > 1e-9:
                raise ValueError(f"provenance weights sum to {weight_sum}, expected 1")

    def provenance_json(self, state: PromptState) -> dict:
        out: dict[str, list[dict]] = {}
        for names, prov, kind in (
            (self.attr_names, self.provenance_attr, ATTR),
            (self.obj_names, self.provenance_obj, OBJ),
        ):
            seen_names = state.names(kind)
            for name, row in zip(names, prov):
                out[name] = [
                    {"seen_name": seen_names[j], "weight": w} for j, w in row
                ]
        return out


def calibrate(
    enc: FrozenEncoder,
    state: PromptState,
    unseen_attr: EmbeddingTable,
    unseen_obj: EmbeddingTable,
    k: int,
    tau: float,
) -> CalibratedPrompts:
    """Full adaptation pass over both kinds."""
    delta_attr, delta_obj = compute_deltas(state)
    parts = {}
    for kind, table, deltas in ((ATTR, unseen_attr, delta_attr), (OBJ, unseen_obj, delta_obj)):
        if len(table) == 0:
            parts[kind] = (np.zeros((0, state.d)), ())
            continue
        sims = u2s_similarity(enc, state, table, kind)
        parts[kind] = adapt_unseen(deltas, sims, k, tau, table.rows)
    return CalibratedPrompts(
        attr_names=unseen_attr.names,
        obj_names=unseen_obj.names,
        theta_unseen_attr=parts[ATTR][0],
        theta_unseen_obj=parts[OBJ][0],
        provenance_attr=parts[ATTR][1],
        provenance_obj=parts[OBJ][1],
    )


@dataclass(frozen=True)
class ExtendedPromptState:
    """Read-only prompt state over seen plus unseen primitives."""

    m: int
    context: np.ndarray
    theta_attr: np.ndarray
    theta_obj: np.ndarray
    attr_names: tuple[str, ...]
    obj_names: tuple[str, ...]

    def __post_init__(self) -> None:
        for arr_name in ("context", "theta_attr", "theta_obj"):
            arr = np.array(getattr(self, arr_name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, arr_name, arr)

    @property
    def d(self) -> int:
        return self.theta_attr.shape[1]


def materialize_full_prompt_state(
    state: PromptState,
    unseen_attr_names: tuple[str, ...],
    unseen_attr_rows: np.ndarray,
    unseen_obj_names: tuple[str, ...],
    unseen_obj_rows: np.ndarray,
) -> ExtendedPromptState:
    """Append unseen token rows after the untouched seen rows."""
    unseen_attr_rows = np.asarray(unseen_attr_rows, dtype=np.float64).reshape(
        len(unseen_attr_names), state.d
    )
    unseen_obj_rows = np.asarray(unseen_obj_rows, dtype=np.float64).reshape(
        len(unseen_obj_names), state.d
    )
    return ExtendedPromptState(
        m=state.m,
        context=state.context,
        theta_attr=np.vstack([state.theta_attr, unseen_attr_rows]),
        theta_obj=np.vstack([state.theta_obj, unseen_obj_rows]),
        attr_names=state.attr_names + tuple(unseen_attr_names),
        obj_names=state.obj_names + tuple(unseen_obj_names),
    )


def materialize_calibrated(state: PromptState, calibrated: CalibratedPrompts) -> ExtendedPromptState:
    return materialize_full_prompt_state(
        state,
        calibrated.attr_names,
        calibrated.theta_unseen_attr,
        calibrated.obj_names,
        calibrated.theta_unseen_obj,
    )


def materialize_unadapted(
    state: PromptState, unseen_attr: EmbeddingTable, unseen_obj: EmbeddingTable
) -> ExtendedPromptState:
    """Extended state that leaves unseen primitives at their initial rows."""
    return materialize_full_prompt_state(
        state, unseen_attr.names, unseen_attr.rows, unseen_obj.names, unseen_obj.rows
    )


def save_calibrated(calibrated: CalibratedPrompts, state: PromptState, directory: str | Path) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    from .vocab import save_table

    attr_path = directory / "calibrated_attr.tsv"
    obj_path = directory / "calibrated_obj.tsv"
    save_table(EmbeddingTable(calibrated.attr_names, calibrated.theta_unseen_attr), attr_path)
    save_table(EmbeddingTable(calibrated.obj_names, calibrated.theta_unseen_obj), obj_path)
    prov_path = directory / "provenance.json"
    prov_path.write_text(
        json.dumps(calibrated.provenance_json(state), indent=2) + "\n", encoding="utf-8"
    )
    return [attr_path, obj_path, prov_path]
