"""opcse: multimodal contrastive sentence embedding training with
object-phrase level alignment.

Three contrastive objectives (dropout-view text, caption-image, and
within-record object-phrase) over a validated object-phrase corpus, plus a
deterministic desk-scale encoder, synthetic data generation, Spearman-based
similarity evaluation, and a reproducible training loop.
"""

__version__ = "0.1.0"

from .corpus import (  # noqa: F401
    FEATURE_DIM,
    SCHEMA_VERSION,
    CorpusError,
    CorpusStats,
    CorpusValidationError,
    MultimodalBatch,
    ObjectPhraseRecord,
    PhraseSpan,
    TextBatch,
    TextExample,
    filter_single_pair,
    load_corpus,
    load_text_corpus,
    make_batches,
    mark_truncated_phrases,
    write_corpus,
    write_text_corpus,
)
from .encoders import (  # noqa: F401
    SHARED_DIM,
    EmbeddingModel,
    EncoderError,
    EncoderOutput,
    ProjectionHead,
    SpanAlignmentError,
    ToyEncoderConfig,
    ToyTextEncoder,
    align_spans,
    project,
    register_encoder,
    tokenize_with_offsets,
    toy_text_encoder,
)
from .evaluation import (  # noqa: F401
    EvalReport,
    EvaluationError,
    StsExample,
    emit_report,
    evaluate_task,
    load_sts_tsv,
    spearman,
    write_sts_tsv,
)
from .losses import (  # noqa: F401
    DegenerateEmbeddingError,
    LossBreakdown,
    LossConfig,
    LossCounts,
    LossError,
    combined_loss,
    cosine_sim,
    image_caption_contrastive_loss,
    object_phrase_contrastive_loss,
    text_contrastive_loss,
)
from .pooling import PhraseEmbeddingSet, PoolingError, build_phrase_set, pool_phrase  # noqa: F401
from .util import NonFiniteValueError, derive_seed  # noqa: F401
from .synth import SynthSpec, generate_multimodal, generate_sts, generate_text  # noqa: F401
from .trainer import (  # noqa: F401
    CheckpointError,
    EmptyCorpusError,
    NonFiniteLossError,
    TrainConfig,
    Trainer,
    TrainerError,
    TrainState,
    evaluate_dev,
    restore_checkpoint,
    save_checkpoint,
    train,
)
