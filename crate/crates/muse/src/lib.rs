//! Answer ranking for product-related questions.
//!
//! Given a question thread (one question, several community answers) and the
//! product's reviews, the model ranks answers by how likely they are to
//! actually address the question. Review snippets retrieved with BM25 serve
//! as side evidence; a recurrent encoder with attention produces textual
//! features, and a three-relation graph convolution over the question,
//! answers, and snippets produces interaction features. Both feed a small
//! MLP that scores each answer.
//!
//! The crate covers the full pipeline: corpus loading and labeling
//! ([`corpus`]), snippet retrieval and the BM25 baseline ([`retrieval`]),
//! encoding ([`encoder`]), the graph ([`graph`]), training ([`train`]) with
//! pointwise/listwise/joint objectives ([`loss`]), checkpoints
//! ([`checkpoint`]), and ranking metrics with a paired significance test
//! ([`eval`]). Everything is deterministic for a fixed seed.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod graph;
pub mod loss;
pub mod model;
pub mod retrieval;
pub mod tape;
pub mod text;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{FeatureToggles, LossMode, Regularizer, RelationToggles, TrainingConfig};
pub use corpus::{
    chunk_review, derive_label, load_qa_corpus, load_reviews, read_threads, split_corpus,
    write_threads, Answer, LoadedCorpus, QuestionThread, Review, Snippet,
};
pub use error::{Error, Result};
pub use eval::{evaluate_ranking, significance_test, MetricReport};
pub use model::{MuseModel, PredictionSet};
pub use retrieval::{attach_snippets, bm25_rank_answers, bm25_score_answers, retrieve_snippets};
pub use train::{loss_and_gradients, train, EpochRecord, TrainOutcome};
