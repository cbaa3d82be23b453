"""Multi-granular, multi-label contrastive objectives at desk scale."""

__version__ = "0.1.0"

from .annotations import (
    AlignmentWeights,
    CooccurrenceTable,
    GranularitySchema,
    Manifest,
    SampleAnnotation,
    SyntheticSpec,
    alignment_weights,
    corpus_cooccurrence,
    generate_synthetic,
    ingest_manifest,
    write_manifest,
)
from .gradients import (
    GradCheckReport,
    cosine_backward,
    finite_difference_check,
    loss_grad,
    pointwise_grad_logits,
)
from .losses import (
    AlignmentBatch,
    LevelData,
    LossConfig,
    LossResult,
    build_batch,
    clip_loss,
    granularity_distributions,
    mgll_loss,
    pointwise_loss,
    smooth_kl_divergence,
    smooth_kl_loss,
    soft_clip_loss,
)
from .metrics import MetricsReport, ScoredLabels, average_precision, evaluate, roc_auc
from .trainer import (
    AblationVariant,
    DescentConfig,
    Trajectory,
    ablation_run,
    alignment_objective_residual,
    descend,
    kl_consistency_probe,
    maximize_alignment,
)
