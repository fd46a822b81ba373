//! Tokenization, vocabulary, and word-embedding initialization.
//!
//! Tokens are lowercase: runs of alphanumeric characters form words and any
//! other non-whitespace character stands alone. Ids 0 and 1 are reserved for
//! padding and unknown words; the padding embedding row is all zeros and is
//! never updated during training.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

/// Lowercase word/punctuation tokenizer. Alphanumeric runs become single
/// tokens; every other non-whitespace character becomes its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for c in text.chars() {
        if c.is_alphanumeric() {
            word.extend(c.to_lowercase());
        } else {
            if !word.is_empty() {
                tokens.push(std::mem::take(&mut word));
            }
            if !c.is_whitespace() {
                tokens.push(c.to_string());
            }
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    tokens
}

/// Token table with dense ids; 0 is padding, 1 is the unknown word.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Build from raw texts. Tokens are numbered in first-occurrence order
    /// after the two reserved entries, so construction is deterministic.
    pub fn build<'a, I>(texts: I) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut vocab = Vocabulary {
            tokens: vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()],
            index: HashMap::new(),
        };
        vocab.index.insert(PAD_TOKEN.to_string(), PAD_ID);
        vocab.index.insert(UNK_TOKEN.to_string(), UNK_ID);
        for text in texts {
            for token in tokenize(text) {
                if !vocab.index.contains_key(&token) {
                    vocab.index.insert(token.clone(), vocab.tokens.len());
                    vocab.tokens.push(token);
                }
            }
        }
        vocab
    }

    /// Rebuild from a stored token list (checkpoint loading).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[PAD_ID] != PAD_TOKEN || tokens[UNK_ID] != UNK_TOKEN {
            return Err(Error::Checkpoint(
                "vocabulary must start with the reserved padding and unknown tokens".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, token) in tokens.iter().enumerate() {
            if index.insert(token.clone(), id).is_some() {
                return Err(Error::Checkpoint(format!(
                    "duplicate vocabulary token `{token}`"
                )));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved entries are always present
    }

    /// Id for a token; unknown tokens map to [`UNK_ID`].
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Tokenize and map to ids in one step.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }
}

/// Build the initial `|V| x dim` embedding table: row 0 (padding) is zero,
/// every other row is sampled uniform(-0.05, 0.05) from the seeded stream,
/// and rows whose token appears in the pretrained file are overwritten with
/// the stored vector.
pub fn init_embeddings(
    vocab: &Vocabulary,
    dim: usize,
    pretrained: Option<&Path>,
    seed: u64,
) -> Result<Array2<f64>> {
    if dim == 0 {
        return Err(Error::Argument(
            "embedding dimension must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut table = Array2::from_shape_fn((vocab.len(), dim), |_| rng.random_range(-0.05..0.05));
    table.row_mut(PAD_ID).fill(0.0);

    if let Some(path) = pretrained {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let reader = BufReader::new(file);
        for (idx, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let token = parts
                .next()
                .ok_or_else(|| Error::record(path, idx + 1, "missing token"))?;
            let Some(&id) = vocab.index.get(token) else {
                continue; // word not in this corpus
            };
            if id == PAD_ID {
                continue; // padding stays zero no matter what the file says
            }
            let values: Vec<f64> = parts
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::record(path, idx + 1, format!("bad float: {e}")))?;
            if values.len() != dim {
                return Err(Error::record(
                    path,
                    idx + 1,
                    format!("expected {dim} components, found {}", values.len()),
                ));
            }
            for (j, v) in values.into_iter().enumerate() {
                table[[id, j]] = v;
            }
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;
    use tempfile::NamedTempFile;

    #[test]
    fn tokenize_separates_punctuation() {
        assert_eq!(
            tokenize("Will these work with Android?"),
            vec!["will", "these", "work", "with", "android", "?"]
        );
        assert_eq!(tokenize(""), Vec::<String>::new());
        assert_eq!(
            tokenize("it's 4K-ready!"),
            vec!["it", "'", "s", "4k", "-", "ready", "!"]
        );
    }

    proptest! {
        #[test]
        fn tokenize_is_idempotent(text in "\\PC{0,40}") {
            let once = tokenize(&text);
            let again = tokenize(&once.join(" "));
            prop_assert_eq!(once, again);
        }

        #[test]
        fn tokens_are_lowercase_and_nonempty(text in "\\PC{0,40}") {
            for t in tokenize(&text) {
                prop_assert!(!t.is_empty());
                // Lowercasing is idempotent (some uppercase characters have
                // no lowercase form and simply stay put).
                prop_assert_eq!(t.clone(), t.to_lowercase());
                prop_assert!(!t.chars().any(|c| c.is_whitespace()));
            }
        }
    }

    #[test]
    fn vocabulary_assigns_dense_ids() {
        let vocab = Vocabulary::build(["the cat", "the hat"]);
        assert_eq!(vocab.token(PAD_ID), Some(PAD_TOKEN));
        assert_eq!(vocab.token(UNK_ID), Some(UNK_TOKEN));
        assert_eq!(vocab.id("the"), 2);
        assert_eq!(vocab.id("cat"), 3);
        assert_eq!(vocab.id("hat"), 4);
        assert_eq!(vocab.len(), 5);
        assert_eq!(vocab.id("dog"), UNK_ID);
        assert_eq!(vocab.encode("The DOG"), vec![2, UNK_ID]);
    }

    #[test]
    fn vocabulary_round_trips_through_token_list() {
        let vocab = Vocabulary::build(["alpha beta"]);
        let rebuilt = Vocabulary::from_tokens(vocab.tokens().to_vec()).unwrap();
        assert_eq!(rebuilt.id("beta"), vocab.id("beta"));
        assert!(Vocabulary::from_tokens(vec!["x".into(), "<unk>".into()]).is_err());
    }

    #[test]
    fn init_embeddings_uses_pretrained_rows() {
        let vocab = Vocabulary::build(["red green"]);
        let mut file = NamedTempFile::new().unwrap();
        writeln!(file, "green 0.25 -0.5 1.0").unwrap();
        writeln!(file, "elsewhere 9 9 9").unwrap();
        let table = init_embeddings(&vocab, 3, Some(file.path()), 11).unwrap();
        assert_eq!(table.nrows(), vocab.len());
        let green = vocab.id("green");
        assert_eq!(table.row(green).to_vec(), vec![0.25, -0.5, 1.0]);
        // Padding row pinned to zero; OOV rows land in the init range.
        assert!(table.row(PAD_ID).iter().all(|&v| v == 0.0));
        assert!(table.row(vocab.id("red")).iter().all(|&v| v.abs() < 0.05));
    }

    #[test]
    fn init_embeddings_is_seed_deterministic() {
        let vocab = Vocabulary::build(["a b c"]);
        let t1 = init_embeddings(&vocab, 4, None, 5).unwrap();
        let t2 = init_embeddings(&vocab, 4, None, 5).unwrap();
        let t3 = init_embeddings(&vocab, 4, None, 6).unwrap();
        assert_eq!(t1, t2);
        assert_ne!(t1, t3);
    }

    #[test]
    fn init_embeddings_rejects_bad_vector_width() {
        let vocab = Vocabulary::build(["red"]);
        let mut file = NamedTempFile::new().unwrap();
        writeln!(file, "red 0.1 0.2").unwrap();
        let err = init_embeddings(&vocab, 3, Some(file.path()), 1).unwrap_err();
        assert!(err.to_string().contains("expected 3 components"));
    }
}
