"""reqaug: single-token synthetic augmentation for sparse API request corpora
and a calibrated anomaly detector trained on the extended data."""

from .augment import (
    AugmentedDatastore,
    CandidateSample,
    Discriminator,
    DiscriminatorConfig,
    MaskedRequest,
    SampleTopK,
    Top1Novel,
    build_datastore,
    cosine_similarity,
    find_outlier_token,
    generate_candidate,
    generate_candidates,
    mask_at,
    train_discriminator,
    uncertainty,
    validate_candidate,
)
from .config import PipelineConfig, desk_profile, load_config, paper_profile
from .detect import (
    DetectorModel,
    FeatureVector,
    ForestConfig,
    RandomForest,
    Verdict,
    calibrate_threshold,
    classify,
    extract_features,
    forest_probability,
    train_detector,
    train_forest,
)
from .ingest import (
    ABNORMAL,
    NORMAL,
    CorpusSplit,
    EntityToken,
    RawRequestRecord,
    RequestCorpus,
    load_corpus,
    normalize_request,
    split_corpus,
    tokenize_entities,
)
from .lexicon import (
    ReservedTokenSet,
    TokenFrequencyTable,
    build_frequency_table,
    build_reserved,
    frequency_threshold,
    reserved_tokens,
    z_from_confidence,
)
from .lm import (
    BbpeTokenizer,
    LanguageModel,
    LmConfig,
    fill_mask,
    paper_lm_config,
    sentence_embedding,
    token_nll,
    train_bbpe,
    train_mlm,
    word_embeddings,
)
from .metrics import (
    ConfusionMatrix,
    SimilarityReport,
    bert_score,
    bleu,
    compute_idf,
    confusion,
    corpus_bleu,
    emd,
    f1,
    mcc,
    mover_score,
    precision,
    recall,
)

__version__ = "0.1.0"
