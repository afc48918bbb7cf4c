"""Localized visual concept learning and masked concept transfer."""

__version__ = "0.1.0"

from .augment import AugmentationConfig, augment
from .backend import (
    Backend,
    BackendDescriptor,
    ConceptToken,
    CrossAttentionRecord,
    DiffusionSchedule,
    LatentImage,
    NoiseSample,
    TextEmbedding,
    ToyBackend,
    TrainableSelector,
    add_noise,
    denoise_step,
    derive_seed,
    make_noise,
    make_schedule,
    make_toy_backend,
)
from .learning import (
    ConceptCheckpoint,
    SourceSample,
    TrainingConfig,
    apply_checkpoint,
    build_prompt,
    build_roi_prompt,
    load_checkpoint,
    restore_backend,
    save_checkpoint,
    train_concept,
)
from .losses import attention_loss, context_loss, diffusion_loss, roi_loss, total_loss
from .masking import (
    BinaryMask,
    SoftMask,
    apply_mask,
    binarize_map,
    load_mask,
    resize_to,
    save_mask,
    soften,
)
from .roi_matching import (
    MatchResult,
    RegionToken,
    extract_source_mask,
    extract_target_mask,
    learn_common_concept_token,
    learn_target_matcher,
)
from .transfer import (
    EditConfig,
    EditState,
    EditTrace,
    GenerationConfig,
    blend_step,
    edit_image,
    generate_with_concept,
    guidance_step,
    noise_to_tstart,
)
