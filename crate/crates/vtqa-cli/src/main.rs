//! Single-binary CLI: validate, score, train, predict, gradcheck, gen-synth.
//!
//! Exit codes: 0 success, 1 validation/contract failure, 2 I/O or format
//! failure. Primary outputs (files, stdout reports) are byte-identical
//! across reruns with the same --seed; progress goes to stderr.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vtqa_core::checks::{run_layer_checks, SuiteOptions};
use vtqa_core::data::synth::{gen_synthetic, oracle_accuracy, OracleMode, SynthSpec};
use vtqa_core::data::{build_vocabularies, load_dataset, serialize_dataset, FeatureContainer};
use vtqa_core::error::{Error, Result};
use vtqa_core::metrics::{score_predictions, PredictionSet, YnDictionary};
use vtqa_core::model::{
    load_checkpoint_path, predict_class, prepare_examples, save_checkpoint_path, train,
    KecmrnModel, ModelConfig, PreparedExample,
};

#[derive(Parser)]
#[command(
    name = "vtqa",
    version,
    about = "Cross-media QA toolkit: dataset checks, scoring, and a trainable key-entity attention baseline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a dataset JSON file against the record schema.
    Validate {
        dataset: PathBuf,
    },
    /// Score a prediction file against gold answers.
    Score {
        /// Prediction JSON (object mapping qid to answer).
        #[arg(long)]
        pred: PathBuf,
        /// Gold dataset JSON.
        #[arg(long)]
        gold: PathBuf,
        /// Extra yes/no dictionary entries (phrase<TAB>yes|no per line).
        #[arg(long)]
        dict: Option<PathBuf>,
        /// Write the report as JSON here as well.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model; writes one checkpoint per epoch plus final.kcpt.
    Train {
        /// Training dataset JSON.
        #[arg(long)]
        data: PathBuf,
        /// Feature container for the dataset's images.
        #[arg(long)]
        features: PathBuf,
        /// Output directory for checkpoints and the training log.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: ConfigOverrides,
    },
    /// Predict answers for a dataset with a trained checkpoint.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        features: PathBuf,
        /// Output prediction JSON path.
        #[arg(long)]
        out: PathBuf,
        /// Worker threads for evaluation (answers are identical either way).
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Evaluate at 64-bit precision.
        #[arg(long = "f64")]
        use_f64: bool,
    },
    /// Finite-difference gradient checks for every layer and the full model.
    Gradcheck {
        /// Latent width of the checked instances.
        #[arg(long, default_value_t = 8)]
        dims: usize,
        #[arg(long, default_value_t = 2)]
        heads: usize,
        /// Number of random seeds per layer, starting at --seed.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 1)]
        modules: usize,
        #[arg(long, default_value_t = 1)]
        cmr: usize,
        #[arg(long, default_value_t = 2)]
        k: usize,
    },
    /// Generate a synthetic dataset plus feature container.
    GenSynth {
        /// Output directory (data.json, features.vtf).
        #[arg(long)]
        out: PathBuf,
        /// Yes/no question count.
        #[arg(long, default_value_t = 4)]
        yn: usize,
        /// Extracted-answer question count.
        #[arg(long, default_value_t = 4)]
        e: usize,
        /// Generated-answer question count.
        #[arg(long, default_value_t = 4)]
        g: usize,
        #[arg(long, default_value_t = 2)]
        min_entities: usize,
        #[arg(long, default_value_t = 4)]
        max_entities: usize,
        /// Region feature width.
        #[arg(long = "d-i", default_value_t = 16)]
        d_i: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Model/training overrides: defaults, then --config file, then flags.
#[derive(Args)]
struct ConfigOverrides {
    /// Key-value config file (key = value per line, # comments).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Latent width d; also sets d_q = d_t = d, d_z = 2d, d_ff = 4d,
    /// embed_dim = d and derives head_dim.
    #[arg(long)]
    dims: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    modules: Option<usize>,
    #[arg(long)]
    cmr: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Input image feature width d_i.
    #[arg(long)]
    d_image: Option<usize>,
    /// Train at 64-bit precision (checkpoints stay 32-bit).
    #[arg(long = "f64")]
    use_f64: bool,
}

fn parse_config_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::format(format!("config key `{key}`: cannot parse `{value}`")))
}

/// Apply `key = value` lines onto a config; unknown keys are rejected.
fn apply_config_file(config: &mut ModelConfig, path: &Path) -> Result<()> {
    let content = std::fs::read_to_string(path)?;
    for (lineno, raw) in content.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::format(format!("config line {}: expected key = value", lineno + 1))
        })?;
        let key = key.trim();
        match key {
            "d_image_in" => config.d_image_in = parse_config_value(key, value)?,
            "d_question" => config.d_question = parse_config_value(key, value)?,
            "d_text" => config.d_text = parse_config_value(key, value)?,
            "d_latent" => config.d_latent = parse_config_value(key, value)?,
            "d_fused" => config.d_fused = parse_config_value(key, value)?,
            "heads" => config.heads = parse_config_value(key, value)?,
            "head_dim" => config.head_dim = parse_config_value(key, value)?,
            "modules" => config.modules = parse_config_value(key, value)?,
            "cmr_per_module" => config.cmr_per_module = parse_config_value(key, value)?,
            "top_k" => config.top_k = parse_config_value(key, value)?,
            "embed_dim" => config.embed_dim = parse_config_value(key, value)?,
            "d_ff" => config.d_ff = parse_config_value(key, value)?,
            "dropout" => config.dropout = parse_config_value(key, value)?,
            "epochs" => config.epochs = parse_config_value(key, value)?,
            "batch_size" => config.batch_size = parse_config_value(key, value)?,
            "learning_rate" => config.learning_rate = parse_config_value(key, value)?,
            "lr_halve_epoch" => config.lr_halve_epoch = parse_config_value(key, value)?,
            "adam_beta1" => config.adam_beta1 = parse_config_value(key, value)?,
            "adam_beta2" => config.adam_beta2 = parse_config_value(key, value)?,
            "adam_eps" => config.adam_eps = parse_config_value(key, value)?,
            "seed" => config.seed = parse_config_value(key, value)?,
            "max_text_tokens" => config.max_text_tokens = parse_config_value(key, value)?,
            "max_question_tokens" => config.max_question_tokens = parse_config_value(key, value)?,
            "min_token_freq" => config.min_token_freq = parse_config_value(key, value)?,
            "layer_norm_eps" => config.layer_norm_eps = parse_config_value(key, value)?,
            "positional_encoding" => config.positional_encoding = parse_config_value(key, value)?,
            other => return Err(Error::format(format!("unknown config key `{other}`"))),
        }
    }
    Ok(())
}

impl ConfigOverrides {
    fn resolve(&self) -> Result<ModelConfig> {
        let mut config = ModelConfig::default();
        if let Some(path) = &self.config {
            apply_config_file(&mut config, path)?;
        }
        if let Some(d) = self.dims {
            let heads = self.heads.unwrap_or(config.heads);
            config.d_latent = d;
            config.d_question = d;
            config.d_text = d;
            config.d_fused = 2 * d;
            config.d_ff = 4 * d;
            config.embed_dim = d;
            if heads == 0 || d % heads != 0 {
                return Err(Error::contract(format!("--dims {d} not divisible by {heads} heads")));
            }
            config.heads = heads;
            config.head_dim = d / heads;
        } else if let Some(h) = self.heads {
            if h == 0 || config.d_latent % h != 0 {
                return Err(Error::contract(format!(
                    "--heads {h} does not divide latent width {}",
                    config.d_latent
                )));
            }
            config.heads = h;
            config.head_dim = config.d_latent / h;
        }
        if let Some(m) = self.modules {
            config.modules = m;
        }
        if let Some(c) = self.cmr {
            config.cmr_per_module = c;
        }
        if let Some(k) = self.k {
            config.top_k = k;
        }
        if let Some(e) = self.epochs {
            config.epochs = e;
        }
        if let Some(b) = self.batch {
            config.batch_size = b;
        }
        if let Some(lr) = self.lr {
            config.learning_rate = lr;
        }
        if let Some(di) = self.d_image {
            config.d_image_in = di;
        }
        if let Some(s) = self.seed {
            config.seed = s;
        }
        config.validate()?;
        Ok(config)
    }
}

fn cmd_validate(dataset: &Path) -> Result<()> {
    let loaded = load_dataset(dataset)?;
    for warning in &loaded.warnings {
        eprintln!("warning: {warning}");
    }
    println!("ok: {} record(s)", loaded.examples.len());
    Ok(())
}

fn cmd_score(pred: &Path, gold: &Path, dict: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let pred_file = std::fs::File::open(pred)?;
    let preds: PredictionSet = serde_json::from_reader(std::io::BufReader::new(pred_file))?;
    let gold_set = load_dataset(gold)?;
    if gold_set.examples.is_empty() {
        return Err(Error::contract("score: gold dataset is empty"));
    }
    let dict = YnDictionary::load(dict)?;
    let report = score_predictions(&preds, &gold_set.examples, &dict)?;
    if report.missing_predictions > 0 {
        eprintln!(
            "warning: {} gold qid(s) had no prediction (scored as wrong)",
            report.missing_predictions
        );
    }
    if report.extra_predictions > 0 {
        eprintln!(
            "warning: {} prediction(s) had no gold record (ignored)",
            report.extra_predictions
        );
    }
    println!("{report}");
    if let Some(path) = out {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), &report)?;
    }
    Ok(())
}

fn run_training<T: vtqa_core::Real>(
    config: &ModelConfig,
    data: &Path,
    features: &Path,
    out: &Path,
    narrow: impl Fn(&KecmrnModel<T>) -> KecmrnModel<f32>,
) -> Result<()> {
    let loaded = load_dataset(data)?;
    for warning in &loaded.warnings {
        eprintln!("warning: {warning}");
    }
    if loaded.examples.is_empty() {
        return Err(Error::contract("train: dataset is empty"));
    }
    let container = FeatureContainer::read_path(features)?;
    let vocab = build_vocabularies(&loaded.examples, config.min_token_freq)?;
    let prepared: Vec<PreparedExample<T>> =
        prepare_examples(&loaded.examples, &vocab, &container, config)?;
    let mut model: KecmrnModel<T> = KecmrnModel::new(config.clone(), vocab)?;

    std::fs::create_dir_all(out)?;
    let log_path = out.join("train_log.jsonl");
    let mut log_file = std::io::BufWriter::new(std::fs::File::create(&log_path)?);

    let epochs = config.epochs;
    train(&mut model, &prepared, |m, log, rng_state| {
        eprintln!(
            "epoch {:>3}/{epochs}  loss {:.4}  train-acc {:.3}  lr {:.2e}",
            log.epoch, log.mean_loss, log.train_accuracy, log.learning_rate
        );
        serde_json::to_writer(&mut log_file, log)?;
        log_file.write_all(b"\n")?;
        let ckpt = out.join(format!("epoch_{:03}.kcpt", log.epoch));
        save_checkpoint_path(&narrow(m), log.epoch, rng_state, &ckpt)?;
        if log.epoch == epochs {
            save_checkpoint_path(&narrow(m), log.epoch, rng_state, &out.join("final.kcpt"))?;
        }
        Ok(())
    })?;
    log_file.flush()?;
    println!("trained {} epoch(s); checkpoints in {}", epochs, out.display());
    Ok(())
}

fn cmd_train(overrides: &ConfigOverrides, data: &Path, features: &Path, out: &Path) -> Result<()> {
    let config = overrides.resolve()?;
    if overrides.use_f64 {
        run_training::<f64>(&config, data, features, out, |m| m.convert())
    } else {
        run_training::<f32>(&config, data, features, out, |m| m.clone())
    }
}

fn load_prepared<T: vtqa_core::Real>(
    data: &Path,
    features: &Path,
    config: &ModelConfig,
    vocab: &vtqa_core::model::Vocabularies,
) -> Result<Vec<PreparedExample<T>>> {
    let loaded = load_dataset(data)?;
    for warning in &loaded.warnings {
        eprintln!("warning: {warning}");
    }
    let container = FeatureContainer::read_path(features)?;
    prepare_examples(&loaded.examples, vocab, &container, config)
}

fn predictions_from<T: vtqa_core::Real>(
    model: &KecmrnModel<T>,
    prepared: &[PreparedExample<T>],
    workers: usize,
) -> Result<PredictionSet> {
    let classes: Vec<Result<usize>> = if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::contract(format!("worker pool: {e}")))?;
        pool.install(|| {
            use rayon::prelude::*;
            prepared.par_iter().map(|ex| predict_class(model, &ex.input)).collect()
        })
    } else {
        prepared.iter().map(|ex| predict_class(model, &ex.input)).collect()
    };
    let mut preds = PredictionSet::new();
    for (ex, class) in prepared.iter().zip(classes) {
        preds.insert(&ex.qid, model.vocab.answers.decode(class?))?;
    }
    Ok(preds)
}

fn cmd_predict(
    ckpt: &Path,
    data: &Path,
    features: &Path,
    out: &Path,
    workers: usize,
    use_f64: bool,
) -> Result<()> {
    let (model, _epoch, _rng) = load_checkpoint_path(ckpt)?;
    let preds = if use_f64 {
        let model64: KecmrnModel<f64> = model.convert();
        let prepared = load_prepared::<f64>(data, features, &model64.config, &model64.vocab)?;
        predictions_from(&model64, &prepared, workers)?
    } else {
        let prepared = load_prepared::<f32>(data, features, &model.config, &model.vocab)?;
        predictions_from(&model, &prepared, workers)?
    };
    let file = std::fs::File::create(out)?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), &preds)?;
    println!("wrote {} prediction(s) to {}", preds.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_gradcheck(
    dims: usize,
    heads: usize,
    seeds: u64,
    seed: u64,
    eps: f64,
    tol: f64,
    modules: usize,
    cmr: usize,
    k: usize,
) -> Result<()> {
    let opts = SuiteOptions {
        dims,
        heads,
        seeds: (seed..seed + seeds).collect(),
        eps,
        tol,
        modules,
        cmr_per_module: cmr,
        top_k: k,
    };
    let checks = run_layer_checks(&opts)?;
    let mut all_pass = true;
    for layer in vtqa_core::checks::LAYERS {
        let worst = checks
            .iter()
            .filter(|c| c.layer == layer)
            .map(|c| c.report.max_rel_err)
            .fold(0.0, f64::max);
        let pass = checks.iter().filter(|c| c.layer == layer).all(|c| c.report.pass);
        all_pass &= pass;
        println!(
            "{layer:<18} max rel err {worst:9.3e}  {}",
            if pass { "pass" } else { "FAIL" }
        );
    }
    if !all_pass {
        return Err(Error::contract(format!("gradient check failed (tol {tol:.1e})")));
    }
    println!("all layers pass at eps {eps:.1e}, tol {tol:.1e} over {seeds} seed(s)");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_gen_synth(
    out: &Path,
    yn: usize,
    e: usize,
    g: usize,
    min_entities: usize,
    max_entities: usize,
    d_i: usize,
    seed: u64,
) -> Result<()> {
    let spec = SynthSpec {
        yn,
        e,
        g,
        min_entities,
        max_entities,
        feature_width: d_i,
        seed,
    };
    let generated = gen_synthetic(&spec)?;
    let full = oracle_accuracy(&generated.examples, &generated.features, OracleMode::Full)?;
    if full < 1.0 {
        return Err(Error::contract(format!(
            "generated dataset is not fully answerable (oracle accuracy {full})"
        )));
    }
    std::fs::create_dir_all(out)?;
    let data_path = out.join("data.json");
    let file = std::fs::File::create(&data_path)?;
    serialize_dataset(&generated.examples, std::io::BufWriter::new(file))?;
    generated.features.write_path(&out.join("features.vtf"))?;
    println!(
        "wrote {} example(s) over {} image(s) to {}",
        generated.examples.len(),
        generated.features.len(),
        out.display()
    );
    Ok(())
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Validate { dataset } => cmd_validate(&dataset),
        Command::Score { pred, gold, dict, out } => {
            cmd_score(&pred, &gold, dict.as_deref(), out.as_deref())
        }
        Command::Train { data, features, out, overrides } => {
            cmd_train(&overrides, &data, &features, &out)
        }
        Command::Predict { ckpt, data, features, out, workers, use_f64 } => {
            cmd_predict(&ckpt, &data, &features, &out, workers, use_f64)
        }
        Command::Gradcheck { dims, heads, seeds, seed, eps, tol, modules, cmr, k } => {
            cmd_gradcheck(dims, heads, seeds, seed, eps, tol, modules, cmr, k)
        }
        Command::GenSynth { out, yn, e, g, min_entities, max_entities, d_i, seed } => {
            cmd_gen_synth(&out, yn, e, g, min_entities, max_entities, d_i, seed)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            if let Error::Validation(issues) = &err {
                // Machine-readable issue list for tooling.
                if let Ok(json) = serde_json::to_string(issues) {
                    eprintln!("{json}");
                }
            }
            eprintln!("error: {err}");
            ExitCode::from(if err.is_validation() { 1 } else { 2 })
        }
    }
}
