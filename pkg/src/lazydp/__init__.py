"""Differentially private training of sparse embedding tables with lazy noise updates."""

from .core import (
    EmbeddingTable,
    HistoryTable,
    HyperParams,
    InputQueue,
    MiniBatch,
    SparseGrad,
    TrainingTrace,
    history_overhead_bytes,
    max_rel_diff,
    new_table,
    dlrm_default_params,
    queue_overhead_bytes,
)
from .instrument import Metrics, report
from .noise import NoiseKey, ans_noise, gaussian, noise_vector, summed_noise
from .tracegen import SkewSpec, generate
from .trainers import finalize, train

__version__ = "0.1.0"
