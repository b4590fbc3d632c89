"""cubevit: 3D cube-token vision transformers for volumetric imaging.

Built from a small reverse-mode tensor engine with a memory-ledgered
streaming attention kernel; provides masked-autoencoder pretraining,
cross-modal contrastive alignment, downstream heads and baselines,
retrieval metrics, preprocessing, gradient saliency, and randomized-trial
covariate-adjustment statistics.
"""

from .align import AlignConfig, Temperature, align_train, symmetric_infonce, trimodal_infonce
from .attention import (
    AttentionInputs,
    MemoryLedger,
    attention_naive,
    attention_streaming,
    multi_head_attention,
)
from .data import (
    EnFaceImage,
    SyntheticCohortSpec,
    Volume,
    clip_intensities,
    otsu_threshold,
    preprocess,
    read_enface,
    read_volume,
    resample_volume,
    synth_cohort,
    write_enface,
    write_volume,
)
from .errors import (
    CubevitError,
    DegenerateInputError,
    FormatError,
    NumericError,
    UsageError,
)
from .finetune import FinetuneRecipe, ensemble_predict, finetune, kfold_finetune
from .heads import (
    aggregate_slice_predictions,
    combined_regression_loss,
    multi_instance_embed,
    pool_tokens,
    smoothed_ce_loss,
)
from .mae import MAEConfig, MaskPlan, mae_forward, pretrain, sample_mask
from .metrics import (
    SimilarityMatrix,
    auprc,
    auroc,
    balanced_accuracy,
    laterality_accuracy,
    pearson_r2,
    retrieval_metrics,
    slice_similarity,
)
from .optim import AdamW, AdamWConfig, ScheduleConfig, layerwise_lr_plan, lr_schedule
from .saliency import SaliencyMap, gradcam_saliency
from .tensor import Tensor, check_gradients, cosine_similarity, gradient_of
from .towers import TowerConfig
from .trial import (
    ArmCorrelations,
    TrialArm,
    adjusted_treatment_effect,
    effective_n,
    essi,
    recruitment_diff,
    simulate_trials,
)
from .vit3d import CubeSpec, ViTConfig, cube_embed, positional_encode, sequence_length

__version__ = "0.1.0"
