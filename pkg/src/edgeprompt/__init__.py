"""Decentralized multi-source few-shot domain adaptation with prompt tuning
on a frozen dual encoder: edge models train small per-domain prompt stacks,
upload them, and a central integrator averages their logits."""

from .encoder import (
    BranchTrace,
    ClassTokenTable,
    DualEncoder,
    EncoderConfig,
    build_class_table,
    contrastive_warmup,
    encoder_checksum,
    forward_text_led,
    init_dual_encoder,
    load_encoder,
    save_encoder,
)
from .errors import (
    ConfigurationError,
    ContractError,
    DeserializationError,
    EdgePromptError,
    NumericError,
    SamplingError,
    ShapeError,
    SplitError,
    TrainingAbort,
)
from .integration import (
    EnsembleModel,
    ensemble_predict,
    evaluate_accuracy,
    export_features,
    load_uploads,
    write_feature_csv,
    zero_shot_predict,
)
from .losses import (
    ClassProbabilities,
    KernelSpec,
    PseudoLabelBatch,
    class_probabilities,
    csa_annotated,
    csa_loss,
    csa_target,
    dda_loss,
    gaussian_kernel,
    generate_pseudo_labels,
    lambda_schedule,
    median_heuristic_bandwidth,
    mmd_squared,
    one_hot,
    tcc_loss,
    total_loss,
    tsd_loss,
)
from .prompts import (
    PromptStack,
    TEXT_TO_VISION,
    VISION_TO_TEXT,
    deserialize,
    init_prompt_stack,
    load_stack,
    save_stack,
    serialize,
    stack_checksum,
)
from .seeds import derive_seed
from .synth import (
    DomainDataset,
    DomainFewShotSplit,
    DomainShift,
    DomainSpec,
    SampledBatch,
    base_glyphs,
    export_dataset_dir,
    generate_domain,
    load_dataset_dir,
    make_few_shot_split,
    sample_batch,
)
from .training import (
    ALL_STACKS,
    CHOSEN_EDGE_ONLY,
    EdgeState,
    TrainConfig,
    TrainLog,
    build_edges,
    cache_pseudo_labels,
    sgd_update,
    train,
    train_step,
)

__version__ = "0.1.0"
