"""Desk-scale open-vocabulary compositional zero-shot learning testbed.

Core pieces: a seeded synthetic benchmark with planted semantic structure, a
frozen toy prompt encoder with analytic gradients, structure-preserving
training of the learnable primitive tokens, inference-time neighbor transfer
for unseen primitives, and the CZSL bias-sweep evaluation protocol.
"""

__version__ = "0.1.0"

from .vocab import (
    CompositionLabel,
    CompositionSpace,
    Dataset,
    EmbeddingTable,
    Sample,
    Split,
    Vocabulary,
    build_composition_space,
    load_table,
    save_table,
)
from .encoder import FrozenEncoder, PromptState, encode_composition, encode_primitive
from .structure import (
    NeighborDistribution,
    NeighborhoodIndex,
    SimilarityMatrix,
    cosine_matrix,
    gather_rows,
    kl_rows,
    softmax_rows,
    topk_neighbors,
)
from .training import AdamW, LossBreakdown, TrainConfig, TrainReport, ce_loss, scl_loss, total_loss, train
from .adapt import (
    CalibratedPrompts,
    DeltaTable,
    adapt_unseen,
    calibrate,
    compute_deltas,
    materialize_full_prompt_state,
    u2s_similarity,
)
from .evaluation import BiasCurve, MetricsReport, ScoreMatrix, bias_sweep, evaluate, hm_and_auc, score, split_accuracy
from .diagnostics import (
    AlignmentStats,
    ConsistencyStats,
    IsolationPartition,
    correlation,
    isolation_partition,
    mean_center,
    neighbor_consistency,
)
from .datagen import GenConfig, GeneratedBenchmark, generate, load_benchmark, oracle_best_accuracy, preset, write_benchmark
