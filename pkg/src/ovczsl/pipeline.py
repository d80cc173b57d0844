"""End-to-end run helpers shared by the command-line driver and the tests.

A run starts from a benchmark (in memory or loaded from a directory): build
the frozen encoder, derive aligned initial token rows from the observable
primitive embeddings, train the seen tokens, optionally calibrate the unseen
ones by neighbor delta transfer, and evaluate over the full composition
space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import adapt as adapt_mod
from . import encoder as enc_mod
from .adapt import CalibratedPrompts, ExtendedPromptState
from .encoder import FrozenEncoder, PromptState
from .evaluation import MetricsReport, evaluate
from .training import TrainConfig, TrainReport, train
from .vocab import EmbeddingTable

# norm of the pre-normalization primitive encoding at initialization; the one
# free scale of the aligned-token construction
TOKEN_SCALE = 1.0


@dataclass(frozen=True)
class RunState:
    enc: FrozenEncoder
    state: PromptState
    unseen_attr_init: EmbeddingTable
    unseen_obj_init: EmbeddingTable


def _unseen_init(enc, context, table, names, d) -> EmbeddingTable:
    if not names:
        return EmbeddingTable((), np.zeros((0, d)))
    return enc_mod.aligned_initial_tokens(enc, context, table.take(names), TOKEN_SCALE)


def init_run(benchmark, config: TrainConfig) -> RunState:
    """Encoder plus prompt state with aligned initial tokens for a benchmark.

    ``benchmark`` needs attrs/objs vocabularies and observable embedding
    tables; both generated and loaded benchmarks qualify.
    """
    d = benchmark.observable_attr.dim
    if config.d != d:
        raise ValueError(f"config d={config.d} does not match benchmark d={d}")
    enc = FrozenEncoder.from_seed(config.seed, d)
    context = enc_mod.context_tokens(config.seed, config.m, d)
    attr_init = enc_mod.aligned_initial_tokens(
        enc, context, benchmark.observable_attr.take(benchmark.attrs.seen), TOKEN_SCALE
    )
    obj_init = enc_mod.aligned_initial_tokens(
        enc, context, benchmark.observable_obj.take(benchmark.objs.seen), TOKEN_SCALE
    )
    state = PromptState.create(config.seed, config.m, attr_init, obj_init)
    return RunState(
        enc=enc,
        state=state,
        unseen_attr_init=_unseen_init(enc, context, benchmark.observable_attr, benchmark.attrs.unseen, d),
        unseen_obj_init=_unseen_init(enc, context, benchmark.observable_obj, benchmark.objs.unseen, d),
    )


def run_training(benchmark, config: TrainConfig) -> tuple[RunState, TrainReport]:
    run = init_run(benchmark, config)
    report = train(config, benchmark.dataset, benchmark.space, run.enc, run.state)
    return run, report


def calibrated_prompts(run: RunState, k: int, tau: float) -> CalibratedPrompts:
    return adapt_mod.calibrate(
        run.enc, run.state, run.unseen_attr_init, run.unseen_obj_init, k, tau
    )


def extended_state(run: RunState, use_adaptation: bool, k: int, tau: float) -> ExtendedPromptState:
    """Full-vocabulary prompt state, adapted or left at the initial rows."""
    if use_adaptation:
        return adapt_mod.materialize_calibrated(run.state, calibrated_prompts(run, k, tau))
    return adapt_mod.materialize_unadapted(run.state, run.unseen_attr_init, run.unseen_obj_init)


def run_experiment(
    benchmark,
    config: TrainConfig,
    use_adaptation: bool = True,
    k: int | None = None,
    tau: float | None = None,
    eval_k: int = 1,
) -> tuple[RunState, TrainReport, MetricsReport]:
    """Train, adapt (unless disabled), and evaluate on the test samples."""
    run, report = run_training(benchmark, config)
    ext = extended_state(
        run, use_adaptation, k if k is not None else config.k, tau if tau is not None else config.tau_scl
    )
    metrics = evaluate(benchmark.dataset.test, benchmark.space, run.enc, ext, k=eval_k)
    return run, report, metrics
