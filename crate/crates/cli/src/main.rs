//! `convodyn`: promoter prediction pipeline driver.
//!
//! Exit status: 0 on success, 1 on validation errors, 2 on I/O or scorer
//! transport errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use convodyn::corpus::{load_corpus, preprocess, save_corpus, Corpus};
use convodyn::dynamics::{curve_csv, curve_rows, continuous_curve};
use convodyn::eval::{evaluate, scorecard_csv};
use convodyn::experiment::{train, Seeds, TrainConfig};
use convodyn::explain::{attributions_csv, explain_matrix, shap_summary, summary_csv};
use convodyn::features::{assemble_matrix, matrix_from_csv, matrix_to_csv, ExperimentKind, FeatureConfig, FeatureMatrix};
use convodyn::io::{read_to_string, write_atomic_str};
use convodyn::model::{load_model, save_model, TreeEnsemble};
use convodyn::sentiment::{
    message_wise_series, score_corpus, serialize_score_records, PrecomputedScores, RemoteScorer, ScorerBackend,
    DEFAULT_MAX_CHARS,
};
use convodyn::synth::{generate, SynthConfig};
use convodyn::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
enum ScorerKind {
    Lexicon,
    Precomputed,
    Remote,
}

/// Contents of the `--config` JSON file. Command-line flags win.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    out: PathBuf,
    corpus: Option<PathBuf>,
    scores: Option<PathBuf>,
    features: Option<PathBuf>,
    model: Option<PathBuf>,
    test: Option<PathBuf>,
    scorer: ScorerKind,
    endpoint: Option<String>,
    timeout_secs: u64,
    experiment: ExperimentKind,
    alpha: f64,
    max_chars: usize,
    seeds: Seeds,
    train: TrainConfig,
    synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out: PathBuf::from("out"),
            corpus: None,
            scores: None,
            features: None,
            model: None,
            test: None,
            scorer: ScorerKind::Lexicon,
            endpoint: None,
            timeout_secs: 60,
            experiment: ExperimentKind::BaselineLinewise,
            alpha: convodyn::dynamics::DEFAULT_ALPHA,
            max_chars: DEFAULT_MAX_CHARS,
            seeds: Seeds::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

#[derive(Parser)]
#[command(name = "convodyn", version, about = "Promoter prediction from chat sentiment dynamics")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// JSON run configuration
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_parser = parse_experiment)]
    experiment: Option<ExperimentKind>,
    #[arg(long, global = true, value_enum)]
    scorer: Option<ScorerKind>,
    /// Base URL of the scoring service
    #[arg(long, global = true, env = "CONVODYN_ENDPOINT")]
    endpoint: Option<String>,
    /// Sets every seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Args, Default)]
struct CorpusArgs {
    /// Conversation JSONL
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Precomputed score JSONL (precomputed scorer)
    #[arg(long)]
    scores: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus and matching precomputed scores
    Synth {
        #[arg(long)]
        users: Option<usize>,
        #[arg(long)]
        signal: Option<f64>,
    },
    /// Parse and clean a corpus
    Ingest {
        #[command(flatten)]
        input: CorpusArgs,
    },
    /// Score every customer message and conversation
    Score {
        #[command(flatten)]
        input: CorpusArgs,
    },
    /// Build the feature matrix for an experiment
    Featurize {
        #[command(flatten)]
        input: CorpusArgs,
    },
    /// Split, undersample, tune and fit
    Train {
        /// Feature CSV from `featurize`
        #[arg(long)]
        features: Option<PathBuf>,
    },
    /// Metrics and scorecard on the held-out matrix
    Evaluate {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
    },
    /// SHAP attributions on the held-out matrix
    Explain {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
    },
    /// Export one conversation's sentiment curve
    Curve {
        #[command(flatten)]
        input: CorpusArgs,
        #[arg(long)]
        conversation: String,
    },
    /// Every stage in order; synthesizes a corpus when none is given
    Pipeline {
        #[command(flatten)]
        input: CorpusArgs,
    },
}

fn parse_experiment(s: &str) -> std::result::Result<ExperimentKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn fail(message: impl Into<String>) -> Error {
    Error::Validation(message.into())
}

fn load_config(global: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = match &global.config {
        Some(path) => {
            let text = read_to_string(path)?;
            serde_json::from_str(&text).map_err(|e| fail(format!("config {}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(e) = global.experiment {
        cfg.experiment = e;
    }
    if let Some(s) = global.scorer {
        cfg.scorer = s;
    }
    if let Some(e) = &global.endpoint {
        cfg.endpoint = Some(e.clone());
    }
    if let Some(s) = global.seed {
        cfg.seeds = Seeds::all(s);
    }
    cfg.synth.seed = cfg.seeds.synth_seed;
    if let Some(o) = &global.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

impl RunConfig {
    fn apply(&mut self, input: &CorpusArgs) {
        if let Some(c) = &input.corpus {
            self.corpus = Some(c.clone());
        }
        if let Some(s) = &input.scores {
            self.scores = Some(s.clone());
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn feature_config(&self) -> FeatureConfig {
        FeatureConfig {
            alpha: self.alpha,
            max_chars: self.max_chars,
        }
    }

    fn corpus_path(&self) -> Result<&Path> {
        self.corpus
            .as_deref()
            .ok_or_else(|| fail("no corpus given (--corpus or \"corpus\" in config)"))
    }

    fn backend(&self) -> Result<ScorerBackend> {
        match self.scorer {
            ScorerKind::Lexicon => Ok(ScorerBackend::Lexicon),
            ScorerKind::Precomputed => {
                let path = self
                    .scores
                    .as_deref()
                    .ok_or_else(|| fail("precomputed scorer needs --scores"))?;
                Ok(ScorerBackend::Precomputed(PrecomputedScores::load(path)?))
            }
            ScorerKind::Remote => {
                let endpoint = self
                    .endpoint
                    .as_deref()
                    .filter(|e| !e.trim().is_empty())
                    .ok_or_else(|| Error::Transport("remote scorer needs --endpoint or CONVODYN_ENDPOINT".into()))?;
                let remote = RemoteScorer::new(endpoint, Duration::from_secs(self.timeout_secs));
                remote.health()?;
                Ok(ScorerBackend::Remote(remote))
            }
        }
    }

    fn ensure_out(&self) -> Result<()> {
        fs::create_dir_all(&self.out).map_err(|e| Error::Io {
            path: self.out.clone(),
            source: e,
        })
    }
}

fn load_clean_corpus(cfg: &RunConfig) -> Result<Corpus> {
    Ok(preprocess(load_corpus(cfg.corpus_path()?)?))
}

fn read_matrix(path: &Path, experiment: ExperimentKind) -> Result<FeatureMatrix> {
    matrix_from_csv(&read_to_string(path)?, experiment)
}

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable") + "\n"
}

fn run_synth(cfg: &RunConfig) -> Result<()> {
    let (corpus, scores) = generate(&cfg.synth)?;
    save_corpus(&corpus, &cfg.path("corpus.jsonl"))?;
    write_atomic_str(&cfg.path("scores.jsonl"), &serialize_score_records(&scores))?;
    eprintln!(
        "synth: {} users, {} conversations",
        corpus.users.len(),
        corpus.conversation_count()
    );
    Ok(())
}

fn run_ingest(cfg: &RunConfig) -> Result<()> {
    let corpus = load_clean_corpus(cfg)?;
    save_corpus(&corpus, &cfg.path("corpus.clean.jsonl"))?;
    let counts: serde_json::Map<String, serde_json::Value> = corpus
        .class_counts()
        .into_iter()
        .map(|(k, v)| (k.as_str().to_string(), v.into()))
        .collect();
    let summary = serde_json::json!({
        "users": corpus.users.len(),
        "conversations": corpus.conversation_count(),
        "classes": counts,
    });
    write_atomic_str(&cfg.path("ingest_summary.json"), &json(&summary))
}

fn run_score(cfg: &RunConfig) -> Result<()> {
    let corpus = load_clean_corpus(cfg)?;
    let records = score_corpus(&cfg.backend()?, &corpus, cfg.max_chars)?;
    write_atomic_str(&cfg.path("scores.jsonl"), &serialize_score_records(&records))
}

fn features_file(experiment: ExperimentKind) -> String {
    format!("features_{}.csv", experiment.as_str())
}

fn run_featurize(cfg: &RunConfig, corpus: &Corpus, backend: &ScorerBackend) -> Result<PathBuf> {
    let matrix = assemble_matrix(corpus, cfg.experiment, backend, &cfg.feature_config())?;
    let path = cfg.path(&features_file(cfg.experiment));
    write_atomic_str(&path, &matrix_to_csv(&matrix))?;
    Ok(path)
}

fn run_train(cfg: &RunConfig, features: &Path) -> Result<()> {
    let matrix = read_matrix(features, cfg.experiment)?;
    let outcome = train(&matrix, &cfg.train, &cfg.seeds)?;
    write_atomic_str(&cfg.path("train.csv"), &matrix_to_csv(&outcome.train))?;
    write_atomic_str(&cfg.path("test.csv"), &matrix_to_csv(&outcome.test))?;
    save_model(&outcome.model, &cfg.path("model.json"))?;
    write_atomic_str(&cfg.path("cv_report.json"), &json(&outcome.cv))?;
    eprintln!(
        "train: {} rows after undersampling, best CV AUC {:.4}",
        outcome.balanced_train.len(),
        outcome.cv.best().mean_auc
    );
    Ok(())
}

fn model_and_test(cfg: &RunConfig, model: Option<PathBuf>, test: Option<PathBuf>) -> Result<(TreeEnsemble, FeatureMatrix)> {
    let model_path = model.or_else(|| cfg.model.clone()).unwrap_or_else(|| cfg.path("model.json"));
    let test_path = test.or_else(|| cfg.test.clone()).unwrap_or_else(|| cfg.path("test.csv"));
    let ensemble = load_model(&model_path)?;
    let matrix = read_matrix(&test_path, cfg.experiment)?;
    Ok((ensemble, matrix))
}

fn run_evaluate(cfg: &RunConfig, model: &TreeEnsemble, test: &FeatureMatrix) -> Result<()> {
    let (report, bins) = evaluate(model, test)?;
    write_atomic_str(&cfg.path("report.json"), &(report.to_json() + "\n"))?;
    write_atomic_str(&cfg.path("scorecard.csv"), &scorecard_csv(&bins))?;
    println!(
        "{}: AUC {:.4}  KS {:.4}  macro F1 {:.4}  specificity {:.4}  (n={})",
        report.experiment, report.auc, report.ks, report.macro_f1, report.specificity, report.n_test
    );
    Ok(())
}

fn run_explain(cfg: &RunConfig, model: &TreeEnsemble, test: &FeatureMatrix) -> Result<()> {
    let attributions = explain_matrix(model, test)?;
    let summary = shap_summary(test, &attributions)?;
    write_atomic_str(&cfg.path("shap.csv"), &attributions_csv(&test.schema, &attributions))?;
    write_atomic_str(&cfg.path("shap_summary.csv"), &summary_csv(&summary))
}

fn run_curve(cfg: &RunConfig, conversation: &str) -> Result<()> {
    let corpus = load_clean_corpus(cfg)?;
    let conv = corpus
        .find_conversation(conversation)
        .ok_or_else(|| fail(format!("conversation {conversation:?} not in corpus")))?;
    let series = continuous_curve(&message_wise_series(&cfg.backend()?, conv)?)?;
    let rows = curve_rows(&series, cfg.alpha)?;
    let safe: String = conversation
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    write_atomic_str(&cfg.path(&format!("curve_{safe}.csv")), &curve_csv(&rows))
}

fn run_pipeline(mut cfg: RunConfig) -> Result<()> {
    if cfg.corpus.is_none() {
        run_synth(&cfg)?;
        cfg.corpus = Some(cfg.path("corpus.jsonl"));
        if cfg.scorer == ScorerKind::Precomputed && cfg.scores.is_none() {
            cfg.scores = Some(cfg.path("scores.jsonl"));
        }
    }
    let backend = cfg.backend()?;
    let corpus = load_clean_corpus(&cfg)?;
    let features = run_featurize(&cfg, &corpus, &backend)?;
    run_train(&cfg, &features)?;
    let (model, test) = model_and_test(&cfg, None, None)?;
    run_evaluate(&cfg, &model, &test)?;
    run_explain(&cfg, &model, &test)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.global)?;
    cfg.ensure_out()?;
    match cli.command {
        Command::Synth { users, signal } => {
            if let Some(u) = users {
                cfg.synth.n_users = u;
            }
            if let Some(s) = signal {
                cfg.synth.signal_strength = s;
            }
            run_synth(&cfg)
        }
        Command::Ingest { input } => {
            cfg.apply(&input);
            run_ingest(&cfg)
        }
        Command::Score { input } => {
            cfg.apply(&input);
            run_score(&cfg)
        }
        Command::Featurize { input } => {
            cfg.apply(&input);
            let backend = cfg.backend()?;
            let corpus = load_clean_corpus(&cfg)?;
            run_featurize(&cfg, &corpus, &backend).map(|_| ())
        }
        Command::Train { features } => {
            let path = features
                .or_else(|| cfg.features.clone())
                .unwrap_or_else(|| cfg.path(&features_file(cfg.experiment)));
            run_train(&cfg, &path)
        }
        Command::Evaluate { model, test } => {
            let (m, t) = model_and_test(&cfg, model, test)?;
            run_evaluate(&cfg, &m, &t)
        }
        Command::Explain { model, test } => {
            let (m, t) = model_and_test(&cfg, model, test)?;
            run_explain(&cfg, &m, &t)
        }
        Command::Curve { input, conversation } => {
            cfg.apply(&input);
            run_curve(&cfg, &conversation)
        }
        Command::Pipeline { input } => {
            cfg.apply(&input);
            run_pipeline(cfg)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_environmental() { 2 } else { 1 })
        }
    }
}
