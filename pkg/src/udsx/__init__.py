"""Desk-scale dual-stream semantic expansion training framework."""

from .backbone import BackboneModel, ForwardTrace, StageSpec, StaleTraceError
from .csr import (
    CsrConfig,
    StreamBatch,
    batch_hard_triplet,
    center_loss,
    cross_extractor_triplet,
    csc_loss,
    csp_loss,
    csr_loss,
    cst_loss,
)
from .dex import (
    CorruptStatisticsError,
    DexConfig,
    LossValueWithGrads,
    cross_entropy,
    dex_loss,
    gamma_terms,
    max_interclass_weight_distance,
    monte_carlo_l_infinity,
)
from .evaluation import RetrievalResult, cmc_map, evaluate_held_out
from .pste import (
    PsteConfig,
    PsteDecision,
    apply_expansion,
    candidate_layers,
    expand_feature,
    select_layer,
    stratify_channels,
)
from .stats import (
    DomainStats,
    RunningChannelVariance,
    RunningCovariance,
    UnknownDomainError,
    UnknownLayerError,
    load_stats,
    quadratic_form,
    save_stats,
)
from .synthdata import Dataset, DataFormatError, SynthSpec, generate
from .train import (
    Batch,
    LossReport,
    TrainConfig,
    Trainer,
    TrainingAborted,
    duplicate_batch,
    lr_schedule,
    run_training,
)

__version__ = "0.1.0"
