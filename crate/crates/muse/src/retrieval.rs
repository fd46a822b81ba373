//! BM25 scoring, top-n snippet retrieval, and the BM25 answer-ranking
//! baseline.
//!
//! Corpus statistics are computed per product: a question is only ever
//! matched against snippets chunked from its own product's reviews, and the
//! baseline treats a thread's answer set as its own tiny corpus.

use std::collections::{HashMap, HashSet};

use crate::corpus::{chunk_review, QuestionThread, Review, Snippet};
use crate::text::tokenize;

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;

/// Document-collection statistics needed by the BM25 formula.
#[derive(Debug, Clone)]
pub struct CorpusStats {
    pub doc_count: usize,
    pub doc_freq: HashMap<String, usize>,
    pub avg_doc_len: f64,
}

impl CorpusStats {
    /// Gather counts over a tokenized document collection.
    pub fn build(docs: &[Vec<String>]) -> Self {
        let mut doc_freq: HashMap<String, usize> = HashMap::new();
        let mut total_len = 0usize;
        for doc in docs {
            total_len += doc.len();
            let distinct: HashSet<&String> = doc.iter().collect();
            for token in distinct {
                *doc_freq.entry(token.clone()).or_insert(0) += 1;
            }
        }
        let avg_doc_len = if docs.is_empty() {
            0.0
        } else {
            total_len as f64 / docs.len() as f64
        };
        CorpusStats {
            doc_count: docs.len(),
            doc_freq,
            avg_doc_len,
        }
    }

    /// Smoothed inverse document frequency; non-negative for df in [0, N].
    fn idf(&self, token: &str) -> f64 {
        let df = self.doc_freq.get(token).copied().unwrap_or(0) as f64;
        let n = self.doc_count as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }
}

/// Okapi BM25 score of `doc_tokens` against `query_tokens`. Query terms are
/// summed with multiplicity; terms absent from the document contribute 0.
pub fn bm25_score(
    query_tokens: &[String],
    doc_tokens: &[String],
    stats: &CorpusStats,
    k1: f64,
    b: f64,
) -> f64 {
    if query_tokens.is_empty() || doc_tokens.is_empty() || stats.avg_doc_len == 0.0 {
        return 0.0;
    }
    let mut tf: HashMap<&str, f64> = HashMap::new();
    for token in doc_tokens {
        *tf.entry(token.as_str()).or_insert(0.0) += 1.0;
    }
    let len_norm = k1 * (1.0 - b + b * doc_tokens.len() as f64 / stats.avg_doc_len);
    query_tokens
        .iter()
        .map(|term| {
            let f = tf.get(term.as_str()).copied().unwrap_or(0.0);
            if f == 0.0 {
                0.0
            } else {
                stats.idf(term) * f * (k1 + 1.0) / (f + len_norm)
            }
        })
        .sum()
}

/// Score a product's snippets against the question and keep the top `n`,
/// highest score first, ties broken by original snippet order. The returned
/// snippets carry their scores in `bm25_score`.
pub fn retrieve_snippets(question: &str, product_snippets: &[Snippet], n: usize) -> Vec<Snippet> {
    retrieve_snippets_with(question, product_snippets, n, DEFAULT_K1, DEFAULT_B)
}

pub fn retrieve_snippets_with(
    question: &str,
    product_snippets: &[Snippet],
    n: usize,
    k1: f64,
    b: f64,
) -> Vec<Snippet> {
    let query = tokenize(question);
    let docs: Vec<Vec<String>> = product_snippets.iter().map(|s| tokenize(&s.text)).collect();
    let stats = CorpusStats::build(&docs);
    let mut scored: Vec<Snippet> = product_snippets
        .iter()
        .zip(&docs)
        .map(|(snippet, doc)| Snippet {
            text: snippet.text.clone(),
            source_review_id: snippet.source_review_id.clone(),
            bm25_score: bm25_score(&query, doc, &stats, k1, b),
        })
        .collect();
    // Stable sort keeps earlier snippets first on ties.
    scored.sort_by(|a, b| {
        b.bm25_score
            .partial_cmp(&a.bm25_score)
            .expect("finite scores")
    });
    scored.truncate(n);
    scored
}

/// BM25 baseline: order a thread's answer indices by descending score of the
/// question against each answer, the thread's own answers serving as the
/// corpus. Ties keep input order.
pub fn bm25_rank_answers(thread: &QuestionThread) -> Vec<usize> {
    bm25_rank_answers_with(thread, DEFAULT_K1, DEFAULT_B)
}

pub fn bm25_rank_answers_with(thread: &QuestionThread, k1: f64, b: f64) -> Vec<usize> {
    let scores = bm25_score_answers_with(thread, k1, b);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].partial_cmp(&scores[i]).expect("finite scores"));
    order
}

/// Per-answer BM25 scores of the question against each answer.
pub fn bm25_score_answers(thread: &QuestionThread) -> Vec<f64> {
    bm25_score_answers_with(thread, DEFAULT_K1, DEFAULT_B)
}

pub fn bm25_score_answers_with(thread: &QuestionThread, k1: f64, b: f64) -> Vec<f64> {
    let query = tokenize(&thread.question);
    let docs: Vec<Vec<String>> = thread.answers.iter().map(|a| tokenize(&a.text)).collect();
    let stats = CorpusStats::build(&docs);
    docs.iter()
        .map(|doc| bm25_score(&query, doc, &stats, k1, b))
        .collect()
}

/// Chunk every review and attach the top-n snippets to each thread, matching
/// questions only against reviews of the same product. Threads whose product
/// has no reviews end up with an empty snippet list.
pub fn attach_snippets(threads: &mut [QuestionThread], reviews: &[Review], n: usize) {
    let mut by_product: HashMap<&str, Vec<Snippet>> = HashMap::new();
    for review in reviews {
        let pool = by_product.entry(review.product_id.as_str()).or_default();
        for chunk in chunk_review(&review.text) {
            pool.push(Snippet {
                text: chunk,
                source_review_id: review.review_id.clone(),
                bm25_score: 0.0,
            });
        }
    }
    for thread in threads {
        thread.snippets = match by_product.get(thread.product_id.as_str()) {
            Some(pool) => retrieve_snippets(&thread.question, pool, n),
            None => Vec::new(),
        };
    }
}
