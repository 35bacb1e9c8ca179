//! Data-side machinery for diversity-aware preference dataset curation.
//!
//! * [`corpus`]: preference samples, JSONL ingestion, tokenization and N-gram bags.
//! * [`diversity`]: the prompt-diversity metric `d = r_unique * m^p`, least-squares
//!   fitting of scores against `d`, and the decay-index grid search.
//! * [`curation`]: annotation budget plans, nested subsets, reward re-ranking and
//!   Jaccard-filtered greedy augmentation.
//! * [`losses`]: SFT and PRO loss kernels with analytic gradients.
//! * [`scorer`]: reward scorer abstraction with a deterministic mock and an HTTP client.

pub mod corpus;
pub mod curation;
pub mod diversity;
pub mod losses;
pub mod scorer;

pub use corpus::{
    extract_ngrams, load_jsonl, prompt_bag, tokenize, unique_rate, CorpusError, Gram, NGramBag,
    PreferenceSample, TokenSequence, Tokenizer, WordTokenizer,
};
pub use curation::{
    augment_dataset, build_nested_subsets, jaccard_index, plan_budget, rerank_sample,
    rerank_with_scores, AugmentationConfig, AugmentationOutcome, BudgetPlan, CurationError,
    SubsetSpec,
};
pub use diversity::{
    diversity_score, linear_fit, search_decay_index, CorpusSummary, DiversityError,
    DiversityScore, FitResult, GridSearchConfig, GridSearchResult,
};
pub use losses::{
    pro_loss, pro_ranking_loss, pro_temperatures, sft_loss, LossError, RankingLogProbs,
    TemperatureMatrix,
};
pub use scorer::{
    score_batch, MockScorer, RemoteScorer, RetryPolicy, ScoreError, ScoreRequest, ScoreResponse,
    Scorer,
};

/// Default N-gram order for diversity statistics.
pub const DEFAULT_NGRAM: usize = 2;
/// Default decay index when it is not searched.
pub const DEFAULT_DECAY: f64 = 0.5;
