//! Flat key=value configuration files.
//!
//! Merge order everywhere: built-in defaults, then config-file values, then
//! command-line flags. `attn_dim` is derived as twice `hidden_dim` unless a
//! file or flag pins it explicitly.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use muse::TrainingConfig;

/// Apply `key = value` lines to a config in place. Blank lines and lines
/// starting with `#` are ignored; unknown keys are rejected. Returns whether
/// the file set `attn_dim` explicitly.
pub fn apply_config_file(path: &Path, config: &mut TrainingConfig) -> Result<bool> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("could not read config file {}", path.display()))?;
    let mut attn_set = false;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!(
                "{}:{line_no}: expected key=value, got `{line}`",
                path.display()
            );
        };
        set_key(config, key.trim(), value.trim(), &mut attn_set)
            .with_context(|| format!("{}:{line_no}", path.display()))?;
    }
    Ok(attn_set)
}

fn set_key(config: &mut TrainingConfig, key: &str, value: &str, attn_set: &mut bool) -> Result<()> {
    fn parse<T>(key: &str, value: &str) -> Result<T>
    where
        T: std::str::FromStr,
        T::Err: std::fmt::Display,
    {
        value
            .parse()
            .map_err(|e| anyhow!("invalid value `{value}` for {key}: {e}"))
    }

    match key {
        "loss_mode" => config.loss_mode = parse(key, value)?,
        "lambda" => config.lambda = parse(key, value)?,
        "eta" => config.eta = parse(key, value)?,
        "norm_order" => config.norm_order = parse(key, value)?,
        "label_smoothing" => config.label_smoothing = parse(key, value)?,
        "regularizer" => config.regularizer = parse(key, value)?,
        "learning_rate" => config.learning_rate = parse(key, value)?,
        "batch_size" => config.batch_size = parse(key, value)?,
        "epochs" => config.epochs = parse(key, value)?,
        "patience" => config.patience = parse(key, value)?,
        "seed" => config.seed = parse(key, value)?,
        "dropout" => config.dropout = parse(key, value)?,
        "embed_dim" => config.embed_dim = parse(key, value)?,
        "hidden_dim" => config.hidden_dim = parse(key, value)?,
        "attn_dim" => {
            config.attn_dim = parse(key, value)?;
            *attn_set = true;
        }
        "gcn_dims" => config.gcn_dims = parse_dims(value)?,
        "mlp_hidden" => config.mlp_hidden = parse(key, value)?,
        "num_snippets" => config.num_snippets = parse(key, value)?,
        "clip_k" => config.clip_k = parse(key, value)?,
        "relevance" => config.relations.relevance = parse(key, value)?,
        "similarity" => config.relations.similarity = parse(key, value)?,
        "entailment" => config.relations.entailment = parse(key, value)?,
        "textual" => config.features.textual = parse(key, value)?,
        "interaction" => config.features.interaction = parse(key, value)?,
        other => bail!("unknown key `{other}`"),
    }
    Ok(())
}

/// Parse a comma-separated list of layer widths.
pub fn parse_dims(value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|part| {
            let part = part.trim();
            part.parse::<usize>()
                .map_err(|e| anyhow!("invalid layer width `{part}`: {e}"))
        })
        .collect()
}
