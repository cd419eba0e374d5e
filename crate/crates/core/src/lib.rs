//! Cohort construction, propensity matching, persona-conditioned conversation
//! simulation, delusion-language scoring and trajectory statistics.

pub mod analysis;
pub mod corpus;
pub mod features;
pub mod matching;
pub mod net;
pub mod scorer;
pub mod simulate;
pub mod synth;
pub mod text;
pub mod themes;

pub use analysis::{AnalysisError, EffectReport, GroupKey, GroupSummary, Trajectory};
pub use corpus::{Cohort, CohortSpec, Cohorts, CorpusError, Post, UserRecord};
pub use features::{CovariateVector, Embedder, EmbeddingProviderConfig, FeatureError, Lexicon};
pub use matching::{BalanceReport, MatchError, PropensityModel, Stratification};
pub use scorer::{Label, LabeledPost, ScorerError, ScorerModel};
pub use simulate::{ChatMessage, Condition, InterventionConfig, LlmEndpoint, Persona, SimulateError, Speaker, Transcript, TranscriptStatus};
pub use themes::{CoherenceReport, ThemeError, ThemeModel, ThemeTrend};
