//! Command-line surface for the answer ranker: corpus preparation, training,
//! evaluation, and ranking.

mod settings;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use muse::config::sub_seed;
use muse::corpus::product_ids;
use muse::eval::MetricReport;
use muse::model::ForwardDetails;
use muse::{MuseModel, QuestionThread, TrainingConfig};

#[derive(Parser)]
#[command(
    name = "muse",
    version,
    about = "Rank community answers to product questions using review evidence"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)] // one short-lived instance per process
enum Command {
    /// Label a raw QA corpus, attach review snippets, and write splits.
    Prepare(PrepareArgs),
    /// Train a model on a prepared corpus.
    Train(TrainArgs),
    /// Score a prepared split with a trained model or the BM25 baseline.
    Evaluate(EvaluateArgs),
    /// Write per-question answer rankings.
    Rank(RankArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Raw QA corpus (JSON lines).
    #[arg(long)]
    qa: PathBuf,
    /// Raw reviews (JSON lines).
    #[arg(long)]
    reviews: PathBuf,
    /// Directory for train.jsonl, val.jsonl, and test.jsonl.
    #[arg(long)]
    out_dir: PathBuf,
    /// Review snippets to retrieve per question.
    #[arg(long, default_value_t = 5)]
    num_snippets: usize,
    #[arg(long, default_value_t = 0.1)]
    test_fraction: f64,
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

/// Training-configuration flags; every field falls back to the config file
/// and then to the built-in defaults.
#[derive(Args, Default)]
struct ConfigOverrides {
    /// Loss mode: pointwise, listwise, or joint.
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    norm_order: Option<f64>,
    #[arg(long)]
    label_smoothing: Option<f64>,
    /// Regularizer: squared or norm.
    #[arg(long)]
    regularizer: Option<String>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    /// Defaults to twice the hidden dimension.
    #[arg(long)]
    attn_dim: Option<usize>,
    /// Comma-separated graph layer widths, e.g. 150,100.
    #[arg(long)]
    gcn_dims: Option<String>,
    #[arg(long)]
    mlp_hidden: Option<usize>,
    #[arg(long)]
    num_snippets: Option<usize>,
    #[arg(long)]
    clip_k: Option<usize>,
    /// Drop question-to-node relevance edges from the graph.
    #[arg(long)]
    no_relevance: bool,
    /// Drop answer-answer and snippet-snippet similarity edges.
    #[arg(long)]
    no_similarity: bool,
    /// Drop answer-snippet entailment edges.
    #[arg(long)]
    no_entailment: bool,
    /// Disable the attention-based textual feature.
    #[arg(long)]
    no_textual_feature: bool,
    /// Disable the graph interaction feature.
    #[arg(long)]
    no_interaction_feature: bool,
}

impl ConfigOverrides {
    /// Final config: defaults, then the config file, then these flags.
    fn build(&self, file: Option<&Path>) -> Result<TrainingConfig> {
        let mut config = TrainingConfig::default();
        let mut attn_set = match file {
            Some(path) => settings::apply_config_file(path, &mut config)?,
            None => false,
        };

        if let Some(v) = &self.loss {
            config.loss_mode = v.parse()?;
        }
        if let Some(v) = &self.regularizer {
            config.regularizer = v.parse()?;
        }
        if let Some(v) = &self.gcn_dims {
            config.gcn_dims = settings::parse_dims(v)?;
        }
        macro_rules! copy {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field {
                    config.$field = v;
                })*
            };
        }
        copy!(
            lambda,
            eta,
            norm_order,
            label_smoothing,
            learning_rate,
            batch_size,
            epochs,
            patience,
            seed,
            dropout,
            embed_dim,
            hidden_dim,
            mlp_hidden,
            num_snippets,
            clip_k
        );
        if let Some(v) = self.attn_dim {
            config.attn_dim = v;
            attn_set = true;
        }
        if !attn_set {
            config.attn_dim = 2 * config.hidden_dim;
        }
        if self.no_relevance {
            config.relations.relevance = false;
        }
        if self.no_similarity {
            config.relations.similarity = false;
        }
        if self.no_entailment {
            config.relations.entailment = false;
        }
        if self.no_textual_feature {
            config.features.textual = false;
        }
        if self.no_interaction_feature {
            config.features.interaction = false;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Prepared training split (JSON lines).
    #[arg(long)]
    train: PathBuf,
    /// Prepared validation split (JSON lines).
    #[arg(long)]
    val: PathBuf,
    /// Where to write the trained model.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Training log (JSON lines); defaults to the checkpoint path + .log.jsonl.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Optional pretrained embeddings, one `token v1 .. vd` line each.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: ConfigOverrides,
}

/// Relation ablations that are safe to apply to an already-trained model
/// (they only remove graph edges; feature toggles would change layer shapes).
#[derive(Args, Default)]
struct RelationFlags {
    #[arg(long)]
    no_relevance: bool,
    #[arg(long)]
    no_similarity: bool,
    #[arg(long)]
    no_entailment: bool,
}

impl RelationFlags {
    fn apply(&self, config: &mut TrainingConfig) {
        if self.no_relevance {
            config.relations.relevance = false;
        }
        if self.no_similarity {
            config.relations.similarity = false;
        }
        if self.no_entailment {
            config.relations.entailment = false;
        }
    }
}

#[derive(Args)]
struct EvaluateArgs {
    /// Prepared split to evaluate (JSON lines).
    #[arg(long)]
    data: PathBuf,
    /// Trained model; required unless --ranker bm25.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Ranker to evaluate: muse or bm25.
    #[arg(long, default_value = "muse")]
    ranker: String,
    /// Write the full metric report as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Precision cutoffs.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1, 3])]
    cutoffs: Vec<usize>,
    /// Ranking file of a second system (output of `muse rank`); runs a
    /// paired randomization test against it.
    #[arg(long)]
    compare: Option<PathBuf>,
    /// Resamples for the randomization test.
    #[arg(long, default_value_t = 10_000)]
    iterations: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Override the number of snippets fed to the model.
    #[arg(long)]
    num_snippets: Option<usize>,
    #[command(flatten)]
    relations: RelationFlags,
}

#[derive(Args)]
struct RankArgs {
    /// Prepared split to rank (JSON lines).
    #[arg(long)]
    data: PathBuf,
    /// Trained model; required unless --ranker bm25.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Ranker to use: muse or bm25.
    #[arg(long, default_value = "muse")]
    ranker: String,
    /// Output file; stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Override the number of snippets fed to the model.
    #[arg(long)]
    num_snippets: Option<usize>,
    /// Dump each question's three adjacency matrices as 0/1 grids.
    #[arg(long)]
    dump_adjacency: Option<PathBuf>,
    #[command(flatten)]
    relations: RelationFlags,
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Prepare(args) => cmd_prepare(args),
        Command::Train(args) => cmd_train(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Rank(args) => cmd_rank(args),
    }
}

fn cmd_prepare(args: PrepareArgs) -> Result<()> {
    let loaded = muse::load_qa_corpus(&args.qa, &args.reviews)?;
    let mut threads = loaded.threads;
    muse::attach_snippets(&mut threads, &loaded.reviews, args.num_snippets);
    let (train, val, test) = muse::split_corpus(
        threads,
        args.test_fraction,
        args.val_fraction,
        sub_seed(args.seed, "split"),
    )?;

    std::fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("could not create {}", args.out_dir.display()))?;
    let splits = [("train", &train), ("val", &val), ("test", &test)];
    for (name, threads) in &splits {
        muse::write_threads(&args.out_dir.join(format!("{name}.jsonl")), threads)?;
    }

    if loaded.skipped_questions > 0 {
        eprintln!(
            "skipped {} questions without answers",
            loaded.skipped_questions
        );
    }
    println!(
        "{:<6} {:>9} {:>10} {:>8} {:>9}",
        "split", "products", "questions", "answers", "positives"
    );
    for (name, threads) in &splits {
        let answers: usize = threads.iter().map(|t| t.answers.len()).sum();
        let positives: usize = threads
            .iter()
            .map(|t| t.answers.iter().filter(|a| a.label == 1).count())
            .sum();
        println!(
            "{:<6} {:>9} {:>10} {:>8} {:>9}",
            name,
            product_ids(threads).len(),
            threads.len(),
            answers,
            positives
        );
    }
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let config = args.overrides.build(args.config.as_deref())?;
    if let Some(path) = &args.embeddings {
        if !path.exists() {
            bail!("embeddings file {} not found", path.display());
        }
    }
    let train_threads = muse::read_threads(&args.train)?;
    let val_threads = muse::read_threads(&args.val)?;

    let outcome = muse::train(
        &config,
        &train_threads,
        &val_threads,
        args.embeddings.as_deref(),
    )?;
    muse::save_checkpoint(&outcome.model, &args.checkpoint)?;

    let log_path = args.log.clone().unwrap_or_else(|| {
        let mut p = args.checkpoint.as_os_str().to_owned();
        p.push(".log.jsonl");
        PathBuf::from(p)
    });
    let file = File::create(&log_path)
        .with_context(|| format!("could not create {}", log_path.display()))?;
    let mut out = BufWriter::new(file);
    for record in &outcome.history {
        serde_json::to_writer(&mut out, record)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;

    println!(
        "trained {} epochs; kept epoch {} (val MAP {:.4}); checkpoint {}",
        outcome.history.len(),
        outcome.best_epoch,
        outcome.best_val_map,
        args.checkpoint.display()
    );
    Ok(())
}

/// A model configured for inference, or the BM25 baseline.
enum Ranker {
    Model(Box<MuseModel>),
    Bm25,
}

impl Ranker {
    fn from_flags(
        name: &str,
        checkpoint: Option<&Path>,
        num_snippets: Option<usize>,
        relations: &RelationFlags,
    ) -> Result<Ranker> {
        match name {
            "bm25" => Ok(Ranker::Bm25),
            "muse" => {
                let path = checkpoint
                    .ok_or_else(|| anyhow!("--checkpoint is required with --ranker muse"))?;
                let mut model = muse::load_checkpoint(path)?;
                if let Some(n) = num_snippets {
                    if n == 0 {
                        bail!("--num-snippets must be positive");
                    }
                    model.config.num_snippets = n;
                }
                relations.apply(&mut model.config);
                Ok(Ranker::Model(Box::new(model)))
            }
            other => bail!("unknown ranker `{other}` (expected muse or bm25)"),
        }
    }

    /// Answer indices with scores, best first.
    fn rank(&self, thread: &QuestionThread) -> Result<Vec<(usize, f64)>> {
        match self {
            Ranker::Model(model) => Ok(model.rank_answers(thread)?),
            Ranker::Bm25 => {
                let scores = muse::bm25_score_answers(thread);
                let mut ranked: Vec<(usize, f64)> = scores.into_iter().enumerate().collect();
                ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite scores"));
                Ok(ranked)
            }
        }
    }
}

/// Ranked label lists for every thread, in corpus order.
fn ranked_labels(ranker: &Ranker, threads: &[QuestionThread]) -> Result<Vec<(String, Vec<u8>)>> {
    threads
        .iter()
        .map(|t| {
            let order = ranker.rank(t)?;
            let labels = order.iter().map(|&(i, _)| t.answers[i].label).collect();
            Ok((t.question_id.clone(), labels))
        })
        .collect()
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let threads = muse::read_threads(&args.data)?;
    if threads.is_empty() {
        bail!("{} contains no threads", args.data.display());
    }
    let ranker = Ranker::from_flags(
        &args.ranker,
        args.checkpoint.as_deref(),
        args.num_snippets,
        &args.relations,
    )?;
    let ranked = ranked_labels(&ranker, &threads)?;
    let report = muse::evaluate_ranking(&ranked, &args.cutoffs)?;

    let mut significance = None;
    if let Some(path) = &args.compare {
        let other = rankings_from_file(path, &threads)?;
        let other_report = muse::evaluate_ranking(&other, &args.cutoffs)?;
        let ap_a: Vec<f64> = report.per_question.iter().map(|q| q.ap).collect();
        let ap_b: Vec<f64> = other_report.per_question.iter().map(|q| q.ap).collect();
        let rr_a: Vec<f64> = report.per_question.iter().map(|q| q.rr).collect();
        let rr_b: Vec<f64> = other_report.per_question.iter().map(|q| q.rr).collect();
        let map_p = muse::significance_test(
            &ap_a,
            &ap_b,
            args.iterations,
            sub_seed(args.seed, "sig-map"),
        )?;
        let mrr_p = muse::significance_test(
            &rr_a,
            &rr_b,
            args.iterations,
            sub_seed(args.seed, "sig-mrr"),
        )?;
        println!(
            "paired randomization vs {}: MAP {:.4} vs {:.4} (p = {:.4}), MRR {:.4} vs {:.4} (p = {:.4})",
            path.display(),
            report.map,
            other_report.map,
            map_p,
            report.mrr,
            other_report.mrr,
            mrr_p
        );
        significance = Some((map_p, mrr_p));
    }

    print_metrics(&report);
    if let Some(path) = &args.report {
        write_report(path, &report, significance)?;
    }
    Ok(())
}

fn print_metrics(report: &MetricReport) {
    let p_at: Vec<String> = report
        .p_at
        .iter()
        .map(|(n, v)| format!("P@{n} {v:.4}"))
        .collect();
    println!(
        "MAP {:.4}  MRR {:.4}  {}  questions {} (skipped {})",
        report.map,
        report.mrr,
        p_at.join("  "),
        report.n_evaluated,
        report.n_skipped
    );
}

fn write_report(
    path: &Path,
    report: &MetricReport,
    significance: Option<(f64, f64)>,
) -> Result<()> {
    let mut value = serde_json::to_value(report)?;
    if let Some((map_p, mrr_p)) = significance {
        value["significance"] = serde_json::json!({ "map_p": map_p, "mrr_p": mrr_p });
    }
    let text = serde_json::to_string_pretty(&value)?;
    std::fs::write(path, text + "\n")
        .with_context(|| format!("could not write {}", path.display()))?;
    Ok(())
}

/// Read a `question_id<TAB>answer_index<TAB>score` file and turn it into
/// ranked label lists aligned with the given threads.
fn rankings_from_file(path: &Path, threads: &[QuestionThread]) -> Result<Vec<(String, Vec<u8>)>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("could not read ranking file {}", path.display()))?;
    let mut by_question: BTreeMap<&str, Vec<(usize, f64)>> = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        let (Some(qid), Some(index), Some(score)) = (parts.next(), parts.next(), parts.next())
        else {
            bail!(
                "{}:{line_no}: expected question_id<TAB>answer_index<TAB>score",
                path.display()
            );
        };
        let index: usize = index
            .parse()
            .map_err(|e| anyhow!("{}:{line_no}: bad answer index: {e}", path.display()))?;
        let score: f64 = score
            .parse()
            .map_err(|e| anyhow!("{}:{line_no}: bad score: {e}", path.display()))?;
        by_question.entry(qid).or_default().push((index, score));
    }

    let mut ranked = Vec::with_capacity(threads.len());
    for thread in threads {
        let Some(entries) = by_question.remove(thread.question_id.as_str()) else {
            bail!(
                "{} has no ranking for question {}",
                path.display(),
                thread.question_id
            );
        };
        let mut seen: Vec<usize> = entries.iter().map(|&(i, _)| i).collect();
        seen.sort_unstable();
        let expected: Vec<usize> = (0..thread.answers.len()).collect();
        if seen != expected {
            bail!(
                "{}: question {} does not rank each answer exactly once",
                path.display(),
                thread.question_id
            );
        }
        let labels = entries
            .iter()
            .map(|&(i, _)| thread.answers[i].label)
            .collect();
        ranked.push((thread.question_id.clone(), labels));
    }
    if let Some(extra) = by_question.keys().next() {
        bail!("{} ranks unknown question {extra}", path.display());
    }
    Ok(ranked)
}

fn cmd_rank(args: RankArgs) -> Result<()> {
    let threads = muse::read_threads(&args.data)?;
    let ranker = Ranker::from_flags(
        &args.ranker,
        args.checkpoint.as_deref(),
        args.num_snippets,
        &args.relations,
    )?;
    if args.dump_adjacency.is_some() && matches!(ranker, Ranker::Bm25) {
        bail!("--dump-adjacency needs --ranker muse (bm25 builds no graph)");
    }

    let mut lines = String::new();
    for thread in &threads {
        for (index, score) in ranker.rank(thread)? {
            lines.push_str(&format!("{}\t{index}\t{score}\n", thread.question_id));
        }
    }
    match &args.output {
        Some(path) => std::fs::write(path, &lines)
            .with_context(|| format!("could not write {}", path.display()))?,
        None => print!("{lines}"),
    }

    if let Some(path) = &args.dump_adjacency {
        let Ranker::Model(model) = &ranker else {
            unreachable!("checked above");
        };
        let mut out = String::new();
        for thread in &threads {
            let details = model.forward_details(thread)?;
            dump_adjacency(&mut out, &thread.question_id, &details);
        }
        std::fs::write(path, out).with_context(|| format!("could not write {}", path.display()))?;
    }
    Ok(())
}

fn dump_adjacency(out: &mut String, question_id: &str, details: &ForwardDetails) {
    let graph = &details.graph;
    out.push_str(&format!(
        "question {question_id} (1 question + {} answers + {} snippets)\n",
        graph.n_answers, graph.n_snippets
    ));
    for (name, a) in [
        ("relevance", &graph.a_rel),
        ("similarity", &graph.a_sim),
        ("entailment", &graph.a_ent),
    ] {
        out.push_str(name);
        out.push('\n');
        for row in a.rows() {
            let cells: Vec<String> = row.iter().map(|&v| format!("{}", v as u8)).collect();
            out.push_str(&cells.join(" "));
            out.push('\n');
        }
    }
    out.push('\n');
}
