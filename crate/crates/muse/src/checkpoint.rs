//! Model checkpoints: config, vocabulary, and every parameter array in one
//! JSON file. Arrays are stored row-major under their visit names, so a
//! checkpoint written from a given state is byte-identical across runs.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::TrainingConfig;
use crate::error::{Error, Result};
use crate::model::{ModelParams, MuseModel};
use crate::text::Vocabulary;

#[derive(Serialize, Deserialize)]
struct StoredArray {
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct StoredCheckpoint {
    config: TrainingConfig,
    vocab: Vec<String>,
    params: BTreeMap<String, StoredArray>,
}

pub fn save_checkpoint(model: &MuseModel, path: &Path) -> Result<()> {
    let mut params = BTreeMap::new();
    model.params.visit(&mut |name, a| {
        params.insert(
            name,
            StoredArray {
                shape: [a.nrows(), a.ncols()],
                data: a.iter().copied().collect(),
            },
        );
    });
    let stored = StoredCheckpoint {
        config: model.config.clone(),
        vocab: model.vocab.tokens().to_vec(),
        params,
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    serde_json::to_writer(&mut writer, &stored)
        .map_err(|e| Error::Checkpoint(format!("could not write {}: {e}", path.display())))?;
    writer.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<MuseModel> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let stored: StoredCheckpoint = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::Checkpoint(format!("could not parse {}: {e}", path.display())))?;
    stored.config.validate()?;
    let vocab = Vocabulary::from_tokens(stored.vocab)?;

    let mut remaining = stored.params;
    let mut params = ModelParams::zeros(&stored.config, vocab.len());
    let mut first_error: Option<Error> = None;
    params.visit_mut(&mut |name, a| {
        if first_error.is_some() {
            return;
        }
        let Some(stored) = remaining.remove(&name) else {
            first_error = Some(Error::Checkpoint(format!("missing parameter {name}")));
            return;
        };
        let expected = [a.nrows(), a.ncols()];
        if stored.shape != expected {
            first_error = Some(Error::Checkpoint(format!(
                "parameter {name}: expected shape {expected:?}, found {:?}",
                stored.shape
            )));
            return;
        }
        if stored.data.len() != expected[0] * expected[1] {
            first_error = Some(Error::Checkpoint(format!(
                "parameter {name}: {} values for shape {expected:?}",
                stored.data.len()
            )));
            return;
        }
        *a = Array2::from_shape_vec((expected[0], expected[1]), stored.data)
            .expect("length checked above");
    });
    if let Some(e) = first_error {
        return Err(e);
    }
    if let Some(extra) = remaining.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected parameter {extra}")));
    }
    MuseModel::new(stored.config, vocab, params)
}
