//! Epidemic intelligence over short social-media messages.
//!
//! The crate covers two stages of the workflow:
//!
//! * **Early detection.** Daily keyword counts are scored by five aberration
//!   detectors (EARS C1, C2, C3, an F-statistic and an EWMA chart) over a
//!   sliding baseline with a guard buffer. See [`detect`].
//! * **Outbreak analysis.** A user context (time interval, medical conditions,
//!   locations) is expanded with LDA topic terms and co-occurring hashtags into
//!   a set of conjunctive queries; retrieved messages are described by five
//!   binary features and ranked by a linear model trained with stochastic
//!   pairwise descent. See [`topics`], [`context`] and [`rank`], with the
//!   evaluation harness in [`eval`].
//!
//! [`pipeline`] wires the stages together behind a TOML configuration file and
//! writes reproducible artifacts plus a checksummed manifest.

pub mod context;
pub mod corpus;
pub mod detect;
pub mod eval;
pub mod index;
pub mod pipeline;
pub mod rank;
pub mod topics;

pub use context::{Query, UserContext};
pub use corpus::{EntityClass, Gazetteer, GazetteerSet, SyntheticSpec, Tweet};
pub use detect::{AlarmReport, DailySeries, DetectorParams, Method};
pub use eval::{Judgment, RankedList};
pub use index::{InvertedIndex, TokenizedTweet};
pub use rank::{Feature, FeatureMask, FeatureVector, LabeledExample, RankingModel};
pub use topics::{LdaParams, TopicModel};

// The guide's code snippets run as doctests so the book cannot drift from the API.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub struct Introduction;
    #[doc = include_str!("../../../book/src/corpus.md")]
    pub struct Corpus;
    #[doc = include_str!("../../../book/src/detection.md")]
    pub struct Detection;
    #[doc = include_str!("../../../book/src/topics.md")]
    pub struct Topics;
    #[doc = include_str!("../../../book/src/context.md")]
    pub struct Context;
    #[doc = include_str!("../../../book/src/ranking.md")]
    pub struct Ranking;
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub struct Evaluation;
    #[doc = include_str!("../../../book/src/pipeline.md")]
    pub struct Pipeline;
}
