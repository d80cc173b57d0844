"""Training: composition cross-entropy, the structural-consistency regularizer,
the combined objective, a from-scratch AdamW, and the epoch loop.

The regularizer (``scl``) keeps each primitive's softmax distribution over its
frozen Top-K initial neighbors unchanged while the classification loss pulls
the learnable tokens toward the visual data. Neighborhoods are computed once
from the initial encodings and must stay frozen for the whole run.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from . import encoder as enc_mod
from .encoder import ATTR, OBJ, FrozenEncoder, PromptState
from .seeds import DOMAIN_BATCHES, seeded_rng
from .structure import (
    NeighborhoodIndex,
    SimilarityMatrix,
    gather_matrix,
    kl_rows,
    softmax_rows,
    topk_neighbors,
)
from .vocab import CompositionSpace, Sample, Split

DIVERGENCE_LIMIT = 1e6


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters; JSON keys follow the documented config schema."""

    seed: int = 0
    d: int = 32
    m: int = 3
    epochs: int = 20
    batch_size: int = 64
    lr: float = 0.01
    weight_decay: float = 1e-6
    scl_weight: float = 1.0  # JSON key "lambda"
    tau_scl: float = 0.10
    tau_cls: float = 0.01
    k: int = 5  # JSON key "K"

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.scl_weight < 0:
            raise ValueError("lambda must be >= 0")
        if self.tau_scl <= 0 or self.tau_cls <= 0:
            raise ValueError("temperatures must be positive")
        if self.k < 1:
            raise ValueError("K must be >= 1")
        if self.m < 0 or self.d < 1:
            raise ValueError("invalid prompt dimensions")

    _JSON_KEYS = {"scl_weight": "lambda", "k": "K"}

    def to_dict(self) -> dict:
        out = {}
        for name, value in asdict(self).items():
            out[self._JSON_KEYS.get(name, name)] = value
        return out

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainConfig":
        reverse = {v: k for k, v in cls._JSON_KEYS.items()}
        kwargs = {}
        for key, value in payload.items():
            name = reverse.get(key, key)
            if name not in cls.__dataclass_fields__:
                raise ValueError(f"unknown config key {key!r}")
            kwargs[name] = value
        return cls(**kwargs)


@dataclass(frozen=True)
class LossBreakdown:
    ce: float
    scl: float
    scl_weight: float
    total: float


def total_loss(ce: float, scl: float, scl_weight: float) -> LossBreakdown:
    """Combined objective: classification loss plus weighted regularizer."""
    if scl_weight < 0:
        raise ValueError("lambda must be >= 0")
    return LossBreakdown(ce=ce, scl=scl, scl_weight=scl_weight, total=ce + scl_weight * scl)


def ce_loss(
    batch: Sequence[Sample],
    space: CompositionSpace,
    enc: FrozenEncoder,
    state: PromptState,
    tau_cls: float,
) -> tuple[float, dict[str, np.ndarray]]:
    """Cross-entropy over the seen candidate set, with token gradients.

    Scores are cosine similarities between sample visuals and the encoded
    candidate prompts, scaled by ``1 / tau_cls`` before the softmax.
    """
    if tau_cls <= 0:
        raise ValueError("tau_cls must be positive")
    if not batch:
        raise ValueError("empty batch")
    seen_positions = space.positions_of_split(Split.AO)
    position_to_column = {int(p): c for c, p in enumerate(seen_positions)}
    targets = np.empty(len(batch), dtype=np.int64)
    for i, sample in enumerate(batch):
        if sample.label.split is not Split.AO:
            raise ValueError(
                f"batch sample {sample.label.pair} has unseen split {sample.label.split.value}"
            )
        targets[i] = position_to_column[space.position(*sample.label.pair)]

    attr_idx = space.attr_indices()[seen_positions]
    obj_idx = space.obj_indices()[seen_positions]
    texts = enc_mod.encode_compositions(enc, state, attr_idx, obj_idx)

    visuals = np.stack([s.visual for s in batch])
    visuals = visuals / np.linalg.norm(visuals, axis=1, keepdims=True)
    logits = (visuals @ texts.T) / tau_cls

    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    n = len(batch)
    loss = -float(log_probs[np.arange(n), targets].mean())

    d_logits = np.exp(log_probs)
    d_logits[np.arange(n), targets] -= 1.0
    d_logits /= n
    d_texts = (d_logits.T @ visuals) / tau_cls
    d_attr, d_obj = enc_mod.composition_batch_gradients(enc, state, attr_idx, obj_idx, d_texts)
    return loss, {"theta_attr": d_attr, "theta_obj": d_obj}


def _scl_one_kind(
    enc: FrozenEncoder,
    state: PromptState,
    kind: str,
    idx: NeighborhoodIndex,
    tau: float,
) -> tuple[float, np.ndarray]:
    initial = enc_mod.encode_primitives(enc, state, kind, use_init=True)
    current = enc_mod.encode_primitives(enc, state, kind)
    sims_initial = initial @ initial.T
    sims_current = current @ current.T
    p = softmax_rows(np.take_along_axis(sims_initial, idx.indices, axis=1), tau)
    q = softmax_rows(np.take_along_axis(sims_current, idx.indices, axis=1), tau)
    per_row = kl_rows(p, q)
    n = per_row.shape[0]
    loss = float(per_row.mean())

    # d(loss)/d(neighbor scores) of the current branch is (q - p) / (tau * n);
    # the initial branch is a constant target and receives no gradient
    d_scores = (q.probs - p.probs) / (tau * n)
    d_sims = np.zeros_like(sims_current)
    rows = np.repeat(np.arange(n), idx.k)
    np.add.at(d_sims, (rows, idx.indices.ravel()), d_scores.ravel())
    d_current = (d_sims + d_sims.T) @ current
    d_theta = enc_mod.primitive_batch_gradients(enc, state, kind, d_current)
    return loss, d_theta


def scl_loss(
    enc: FrozenEncoder,
    state: PromptState,
    idx_attr: NeighborhoodIndex,
    idx_obj: NeighborhoodIndex,
    tau: float,
) -> tuple[float, dict[str, np.ndarray]]:
    """KL between each primitive's initial and current neighbor distributions,
    averaged per kind and summed over kinds. Gradients flow only through the
    current branch."""
    if not (idx_attr.frozen and idx_obj.frozen):
        raise ValueError("SCL requires frozen neighborhoods")
    loss_attr, d_attr = _scl_one_kind(enc, state, ATTR, idx_attr, tau)
    loss_obj, d_obj = _scl_one_kind(enc, state, OBJ, idx_obj, tau)
    return loss_attr + loss_obj, {"theta_attr": d_attr, "theta_obj": d_obj}


def build_neighborhoods(
    enc: FrozenEncoder, state: PromptState, k: int
) -> tuple[NeighborhoodIndex, NeighborhoodIndex]:
    """Frozen Top-K neighborhoods from the initial primitive encodings."""
    out = []
    for kind in (ATTR, OBJ):
        initial = enc_mod.encode_primitives(enc, state, kind, use_init=True)
        names = state.names(kind)
        sims = SimilarityMatrix(names, names, np.clip(initial @ initial.T, -1.0, 1.0))
        out.append(topk_neighbors(sims, k, exclude_self=True, frozen=True))
    return out[0], out[1]


def neighborhood_digest(idx_attr: NeighborhoodIndex, idx_obj: NeighborhoodIndex) -> str:
    import hashlib

    h = hashlib.sha256()
    h.update(idx_attr.digest().encode())
    h.update(idx_obj.digest().encode())
    return h.hexdigest()


class AdamW:
    """Adaptive-moment optimizer with bias correction and decoupled weight decay.

    The decay is multiplicative on the parameters only; gradients are never
    modified by it.
    """

    def __init__(
        self,
        lr: float,
        weight_decay: float = 0.0,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> None:
        if lr <= 0:
            raise ValueError("lr must be positive")
        if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.moment1: dict[str, np.ndarray] = {}
        self.moment2: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """In-place update of every parameter array."""
        self.step_count += 1
        t = self.step_count
        for key in sorted(params):
            grad = grads[key]
            if not np.all(np.isfinite(grad)):
                raise FloatingPointError(f"non-finite gradient for {key!r} at step {t}")
            if key not in self.moment1:
                self.moment1[key] = np.zeros_like(params[key])
                self.moment2[key] = np.zeros_like(params[key])
            m = self.moment1[key]
            v = self.moment2[key]
            m *= self.beta1
            m += (1 - self.beta1) * grad
            v *= self.beta2
            v += (1 - self.beta2) * grad * grad
            m_hat = m / (1 - self.beta1**t)
            v_hat = v / (1 - self.beta2**t)
            params[key] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            if self.weight_decay:
                params[key] *= 1.0 - self.lr * self.weight_decay


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    ce: float
    scl: float
    total: float
    neighborhood_hash: str
    elapsed: float

    def to_row(self) -> dict:
        # elapsed stays out of persisted rows so reruns are byte identical
        return {
            "epoch": self.epoch,
            "ce": self.ce,
            "scl": self.scl,
            "total": self.total,
            "neighborhood_hash": self.neighborhood_hash,
        }


@dataclass(frozen=True)
class TrainReport:
    config: TrainConfig
    records: tuple[EpochRecord, ...]

    def to_jsonl(self) -> str:
        return "\n".join(json.dumps(r.to_row()) for r in self.records) + "\n"


def _batches(n: int, batch_size: int, order: np.ndarray):
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _measure(
    samples: Sequence[Sample],
    space: CompositionSpace,
    enc: FrozenEncoder,
    state: PromptState,
    config: TrainConfig,
    idx_attr: NeighborhoodIndex,
    idx_obj: NeighborhoodIndex,
) -> tuple[float, float]:
    """Dataset-level ce and scl at the current parameters (no updates)."""
    total_ce = 0.0
    order = np.arange(len(samples))
    for batch_idx in _batches(len(samples), config.batch_size, order):
        batch = [samples[i] for i in batch_idx]
        loss, _ = ce_loss(batch, space, enc, state, config.tau_cls)
        total_ce += loss * len(batch)
    scl, _ = scl_loss(enc, state, idx_attr, idx_obj, config.tau_scl)
    return total_ce / len(samples), scl


def train(
    config: TrainConfig,
    dataset,
    space: CompositionSpace,
    enc: FrozenEncoder,
    state: PromptState,
) -> TrainReport:
    """Run the training phase; mutates ``state`` in place.

    Record 0 captures the untouched initial state; records 1..epochs hold the
    per-epoch loss means (weighted by batch size) observed during updates.
    """
    if enc.d != state.d or config.m != state.m or config.d != state.d:
        raise ValueError("config, encoder, and prompt state disagree on dimensions")
    samples = list(dataset.train)
    if not samples:
        raise ValueError("training set is empty")
    idx_attr, idx_obj = build_neighborhoods(enc, state, config.k)
    digest0 = neighborhood_digest(idx_attr, idx_obj)
    optimizer = AdamW(lr=config.lr, weight_decay=config.weight_decay)
    rng = seeded_rng(config.seed, DOMAIN_BATCHES)

    records = []
    start = time.perf_counter()
    ce0, scl0 = _measure(samples, space, enc, state, config, idx_attr, idx_obj)
    records.append(
        EpochRecord(
            epoch=0,
            ce=ce0,
            scl=scl0,
            total=total_loss(ce0, scl0, config.scl_weight).total,
            neighborhood_hash=digest0,
            elapsed=time.perf_counter() - start,
        )
    )

    params = {"theta_attr": state.theta_attr, "theta_obj": state.theta_obj}
    for epoch in range(1, config.epochs + 1):
        epoch_start = time.perf_counter()
        order = rng.permutation(len(samples))
        sum_ce = sum_scl = sum_total = 0.0
        for batch_idx in _batches(len(samples), config.batch_size, order):
            batch = [samples[i] for i in batch_idx]
            ce, ce_grads = ce_loss(batch, space, enc, state, config.tau_cls)
            scl, scl_grads = scl_loss(enc, state, idx_attr, idx_obj, config.tau_scl)
            breakdown = total_loss(ce, scl, config.scl_weight)
            if not np.isfinite(breakdown.total) or breakdown.total > DIVERGENCE_LIMIT:
                raise RuntimeError(
                    f"training diverged at epoch {epoch}: total loss {breakdown.total}"
                )
            grads = {
                key: ce_grads[key] + config.scl_weight * scl_grads[key]
                for key in ("theta_attr", "theta_obj")
            }
            optimizer.step(params, grads)
            sum_ce += ce * len(batch)
            sum_scl += scl * len(batch)
            sum_total += breakdown.total * len(batch)

        state.verify_frozen()
        digest = neighborhood_digest(idx_attr, idx_obj)
        if digest != digest0:
            raise RuntimeError("neighborhood index changed during training")
        n = len(samples)
        records.append(
            EpochRecord(
                epoch=epoch,
                ce=sum_ce / n,
                scl=sum_scl / n,
                total=sum_total / n,
                neighborhood_hash=digest,
                elapsed=time.perf_counter() - epoch_start,
            )
        )
    return TrainReport(config=config, records=tuple(records))
