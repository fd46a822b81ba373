//! Raw corpus ingestion: QA and review parsing, vote-derived answer labels,
//! sentence-level review chunking, and the train/val/test split.
//!
//! File formats are JSON lines. The QA file carries one question per line
//! with its candidate answers and vote counts; the review file carries one
//! review per line keyed by product id. Prepared threads (labels attached,
//! snippets retrieved) round-trip through the same `QuestionThread` type.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::tokenize;

/// One candidate answer with its community votes and the derived label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Answer {
    pub text: String,
    pub pos_votes: u32,
    pub neg_votes: u32,
    pub label: u8,
}

/// A sentence-level review chunk attached to a question by retrieval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snippet {
    pub text: String,
    pub source_review_id: String,
    pub bm25_score: f64,
}

/// One question with its candidate answers and retrieved review snippets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionThread {
    pub question_id: String,
    pub product_id: String,
    pub question: String,
    pub answers: Vec<Answer>,
    #[serde(default)]
    pub snippets: Vec<Snippet>,
}

impl QuestionThread {
    /// Binary relevance labels in answer order.
    pub fn labels(&self) -> Vec<u8> {
        self.answers.iter().map(|a| a.label).collect()
    }

    pub fn has_positive(&self) -> bool {
        self.answers.iter().any(|a| a.label == 1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Review {
    pub review_id: String,
    pub product_id: String,
    pub text: String,
}

/// Result of [`load_qa_corpus`]: threads have labels but no snippets yet.
#[derive(Debug)]
pub struct LoadedCorpus {
    pub threads: Vec<QuestionThread>,
    pub reviews: Vec<Review>,
    /// Questions dropped because they carried no answers.
    pub skipped_questions: usize,
}

/// An answer is relevant iff it drew strictly more positive than negative
/// votes; ties (including 0/0) count as negative.
pub fn derive_label(pos_votes: i64, neg_votes: i64) -> Result<u8> {
    if pos_votes < 0 || neg_votes < 0 {
        return Err(Error::Argument(format!(
            "vote counts must be non-negative (got {pos_votes}, {neg_votes})"
        )));
    }
    Ok(u8::from(pos_votes > neg_votes))
}

fn is_terminator(c: char) -> bool {
    matches!(c, '.' | '!' | '?' | ';')
}

/// Split a review into sentence-level chunks.
///
/// A chunk ends at `.`, `!`, `?`, or `;` when followed by whitespace or the
/// end of the text. Chunks are trimmed, and chunks of fewer than two tokens
/// are dropped.
pub fn chunk_review(review_text: &str) -> Vec<String> {
    let chars: Vec<char> = review_text.chars().collect();
    let mut chunks = Vec::new();
    let mut current = String::new();
    for (i, &c) in chars.iter().enumerate() {
        current.push(c);
        let at_boundary =
            is_terminator(c) && chars.get(i + 1).is_none_or(|next| next.is_whitespace());
        if at_boundary {
            push_chunk(&mut chunks, &mut current);
        }
    }
    push_chunk(&mut chunks, &mut current);
    chunks
}

fn push_chunk(chunks: &mut Vec<String>, current: &mut String) {
    let trimmed = current.trim();
    if !trimmed.is_empty() && tokenize(trimmed).len() >= 2 {
        chunks.push(trimmed.to_string());
    }
    current.clear();
}

/// Parse the QA and review files. Questions without answers are skipped and
/// counted; any malformed record aborts with its line number.
pub fn load_qa_corpus(qa_path: &Path, review_path: &Path) -> Result<LoadedCorpus> {
    #[derive(Deserialize)]
    struct RawAnswer {
        text: String,
        pos_votes: u32,
        neg_votes: u32,
    }
    #[derive(Deserialize)]
    struct RawQuestion {
        question_id: String,
        product_id: String,
        question: String,
        answers: Vec<RawAnswer>,
    }

    let mut threads = Vec::new();
    let mut skipped_questions = 0usize;
    for_each_record(qa_path, |line_no, line| {
        let raw: RawQuestion = serde_json::from_str(line)
            .map_err(|e| Error::record(qa_path, line_no, e.to_string()))?;
        if raw.question.trim().is_empty() {
            return Err(Error::record(qa_path, line_no, "empty question text"));
        }
        if raw.answers.is_empty() {
            skipped_questions += 1;
            return Ok(());
        }
        let mut answers = Vec::with_capacity(raw.answers.len());
        for a in raw.answers {
            if a.text.trim().is_empty() {
                return Err(Error::record(qa_path, line_no, "empty answer text"));
            }
            let label = derive_label(i64::from(a.pos_votes), i64::from(a.neg_votes))
                .expect("u32 votes are non-negative");
            answers.push(Answer {
                text: a.text,
                pos_votes: a.pos_votes,
                neg_votes: a.neg_votes,
                label,
            });
        }
        threads.push(QuestionThread {
            question_id: raw.question_id,
            product_id: raw.product_id,
            question: raw.question,
            answers,
            snippets: Vec::new(),
        });
        Ok(())
    })?;

    let reviews = load_reviews(review_path)?;
    Ok(LoadedCorpus {
        threads,
        reviews,
        skipped_questions,
    })
}

pub fn load_reviews(path: &Path) -> Result<Vec<Review>> {
    let mut reviews = Vec::new();
    for_each_record(path, |line_no, line| {
        let review: Review =
            serde_json::from_str(line).map_err(|e| Error::record(path, line_no, e.to_string()))?;
        reviews.push(review);
        Ok(())
    })?;
    Ok(reviews)
}

/// Shuffle threads with the given seed and carve off the test and validation
/// fractions (rounded to the nearest thread); the remainder is training data.
pub fn split_corpus(
    threads: Vec<QuestionThread>,
    test_fraction: f64,
    val_fraction: f64,
    seed: u64,
) -> Result<(
    Vec<QuestionThread>,
    Vec<QuestionThread>,
    Vec<QuestionThread>,
)> {
    if threads.is_empty() {
        return Err(Error::Argument("cannot split an empty corpus".into()));
    }
    for (name, f) in [
        ("test_fraction", test_fraction),
        ("val_fraction", val_fraction),
    ] {
        if !(0.0 < f && f < 1.0) {
            return Err(Error::Argument(format!(
                "{name} must lie in (0, 1), got {f}"
            )));
        }
    }
    if test_fraction + val_fraction >= 1.0 {
        return Err(Error::Argument(format!(
            "test + val fractions must sum below 1, got {}",
            test_fraction + val_fraction
        )));
    }

    let n = threads.len();
    let n_test = (n as f64 * test_fraction).round() as usize;
    let n_val = (n as f64 * val_fraction).round() as usize;

    let mut shuffled = threads;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);

    let train = shuffled.split_off(n_test + n_val);
    let val = shuffled.split_off(n_test);
    let test = shuffled;
    Ok((train, val, test))
}

/// Write prepared threads as JSON lines.
pub fn write_threads(path: &Path, threads: &[QuestionThread]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for thread in threads {
        let line =
            serde_json::to_string(thread).map_err(|e| Error::record(path, 0, e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Read prepared threads back from JSON lines.
pub fn read_threads(path: &Path) -> Result<Vec<QuestionThread>> {
    let mut threads = Vec::new();
    for_each_record(path, |line_no, line| {
        let thread: QuestionThread =
            serde_json::from_str(line).map_err(|e| Error::record(path, line_no, e.to_string()))?;
        threads.push(thread);
        Ok(())
    })?;
    Ok(threads)
}

/// Apply `f` to every non-blank line with its 1-based line number.
fn for_each_record<F>(path: &Path, mut f: F) -> Result<()>
where
    F: FnMut(usize, &str) -> Result<()>,
{
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        f(idx + 1, &line)?;
    }
    Ok(())
}

/// Collect the distinct product ids appearing in `threads`, sorted.
pub fn product_ids(threads: &[QuestionThread]) -> Vec<String> {
    let set: BTreeSet<&str> = threads.iter().map(|t| t.product_id.as_str()).collect();
    set.into_iter().map(str::to_string).collect()
}
