//! The `amalgam` command-line driver. Each invocation runs one pipeline stage.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use crate::attack::{dlg_reconstruct, idlg_label, sample_grads, AttackConfig, AttackTarget};
use crate::augment::{audit_isolation, augment_model, plan_subnets_with, DEFAULT_CROSS_LINKS, DEFAULT_SUBNETS};
use crate::data::{augment, Dataset, NoiseConfig, NoiseKind, PositionSecret};
use crate::error::Error;
use crate::extract::{apply_pretrained, extract};
use crate::fixtures;
use crate::ir::archive::Archive;
use crate::ir::{deserialize_model, init_params, read_structure, serialize_model, InputSpec, Network};
use crate::privacy::{alpha_grid, curve_csv, report, DataShape, ModelFigures};
use crate::secret::SecretBundle;
use crate::tensor::Array;
use crate::train::{evaluate, train, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "amalgam", version, about = "Obfuscated training: augment, train, extract, analyze, attack")]
pub struct Cli {
    /// Also write a machine-readable JSON summary here.
    #[arg(long, global = true, value_name = "PATH")]
    pub json_out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Insert synthetic rows/columns or tokens into a dataset.
    AugmentData(AugmentDataArgs),
    /// Hide a model among decoy sub-networks.
    AugmentModel(AugmentModelArgs),
    /// Train every head of a model with minibatch SGD.
    Train(TrainArgs),
    /// Recover the original model from a trained augmented one.
    Extract(ExtractArgs),
    /// Loss and accuracy of one head.
    Evaluate(EvaluateArgs),
    /// Privacy loss, overhead and search spaces for an augmentation amount.
    Report(ReportArgs),
    /// Gradient-leakage attack on one training sample.
    Attack(AttackArgs),
    /// Write a built-in model or synthetic dataset.
    Fixture(FixtureArgs),
}

#[derive(Debug, Clone, Args)]
pub struct NoiseArgs {
    #[arg(long, default_value = "uniform")]
    pub noise: NoiseKind,
    /// σ (gaussian) or scale (laplace).
    #[arg(long)]
    pub noise_param: Option<f64>,
    /// Value source for `--noise file`.
    #[arg(long)]
    pub noise_file: Option<PathBuf>,
}

impl NoiseArgs {
    fn config(&self, seed: u64) -> NoiseConfig {
        NoiseConfig {
            kind: self.noise,
            param: self.noise_param,
            file: self.noise_file.clone(),
            seed,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct OutputArgs {
    /// Directory for cloud-bound artifacts.
    #[arg(long)]
    pub cloud_dir: Option<PathBuf>,
    /// Explicit output path (overrides the cloud-dir default name).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AugmentDataArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, allow_negative_numbers = true)]
    pub alpha: f64,
    #[command(flatten)]
    pub noise: NoiseArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Local-only secret bundle to create.
    #[arg(long)]
    pub secret: PathBuf,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct AugmentModelArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Defaults to the α recorded in the secret.
    #[arg(long, allow_negative_numbers = true)]
    pub alpha: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_SUBNETS)]
    pub subnets: usize,
    #[arg(long, default_value_t = DEFAULT_CROSS_LINKS)]
    pub cross_links: usize,
    /// Decoy initialization law.
    #[command(flatten)]
    pub noise: NoiseArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Secret from augment-data; updated in place. Created for vector models.
    #[arg(long)]
    pub secret: PathBuf,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value_t = 128)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Sequential kernels.
    #[arg(long)]
    pub deterministic: bool,
    /// Model whose weights replace those of `--pretrained-layers` first.
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub pretrained_layers: Vec<String>,
    /// Per-step metrics CSV.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// Trained augmented model.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub secret: PathBuf,
    /// Structure file of the original model.
    #[arg(long)]
    pub original: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, conflicts_with = "secret")]
    pub head: Option<usize>,
    /// Evaluate the head recorded as original in this secret.
    #[arg(long)]
    pub secret: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long, allow_negative_numbers = true)]
    pub alpha: f64,
    /// `HxWxC` for images, `L` for text.
    #[arg(long)]
    pub shape: DataShape,
    /// Adds P and A_m for this model.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_SUBNETS)]
    pub subnets: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV of ε, ρ and search spaces over α ∈ [0, --curve-max].
    #[arg(long)]
    pub curve: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub curve_max: f64,
    #[arg(long, default_value_t = 100)]
    pub curve_steps: usize,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long, default_value_t = 200)]
    pub iterations: usize,
    #[arg(long, default_value_t = 1.0)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub fd_step: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0)]
    pub head: usize,
    /// Scores only the original cells of an augmented sample.
    #[arg(long)]
    pub secret: Option<PathBuf>,
    /// Reconstruction (AMLG).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Objective history CSV.
    #[arg(long)]
    pub history: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FixtureKind {
    /// LeNet-style CNN over 28×28 grayscale.
    LenetMini,
    /// Embedding + mean + linear, vocab 1000, length 20, 4 classes.
    TextClassifier,
    /// One conv and one linear layer over 14×14.
    TinyCnn,
    /// Synthetic 28×28 digit-like images.
    Images,
    /// Synthetic 14×14 digit-like images.
    TinyImages,
    /// Synthetic token sequences.
    Text,
}

#[derive(Debug, Args)]
pub struct FixtureArgs {
    #[arg(long)]
    pub kind: FixtureKind,
    /// Sample count for datasets.
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Failure of one invocation.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn check_alpha(alpha: f64) -> CliResult<()> {
    if alpha >= 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(usage(format!("--alpha must be >= 0, got {alpha}")))
    }
}

fn require_file(path: &Path, flag: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{flag} {} does not exist", path.display())))
    }
}

fn absolute(path: &Path) -> PathBuf {
    let abs = std::path::absolute(path).unwrap_or_else(|_| path.to_path_buf());
    // resolve symlinks on the longest existing prefix
    let mut existing = abs.clone();
    let mut rest = Vec::new();
    while !existing.exists() {
        match (existing.file_name().map(|n| n.to_os_string()), existing.parent()) {
            (Some(name), Some(parent)) => {
                rest.push(name);
                existing = parent.to_path_buf();
            }
            _ => return abs,
        }
    }
    let mut out = existing.canonicalize().unwrap_or(existing);
    out.extend(rest.iter().rev());
    out
}

/// Output path, creating the cloud dir, and refusing secrets inside it.
fn output_path(out: &OutputArgs, default_name: &str, secret: Option<&Path>) -> CliResult<PathBuf> {
    let path = match (&out.out, &out.cloud_dir) {
        (Some(p), _) => p.clone(),
        (None, Some(dir)) => dir.join(default_name),
        (None, None) => return Err(usage("one of --out or --cloud-dir is required")),
    };
    if let Some(dir) = &out.cloud_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        if let Some(s) = secret {
            if absolute(s).starts_with(absolute(dir)) {
                return Err(usage(format!(
                    "--secret {} lies inside --cloud-dir {}; secrets must stay local",
                    s.display(),
                    dir.display()
                )));
            }
        }
    }
    if let Some(s) = secret {
        if absolute(s) == absolute(&path) {
            return Err(usage("--secret and the output path must differ"));
        }
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    Ok(path)
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

fn augment_data(a: &AugmentDataArgs) -> CliResult<Value> {
    check_alpha(a.alpha)?;
    require_file(&a.data, "--data")?;
    let out = output_path(&a.output, "data.amlg", Some(&a.secret))?;
    let data = Dataset::read(&a.data)?;
    let (aug, positions) = augment(&data, a.alpha, &a.noise.config(a.seed), a.seed)?;
    aug.write(&out)?;
    let mut bundle = SecretBundle::from_positions(positions);
    bundle.seeds.insert("data".into(), a.seed);
    bundle.write(&a.secret)?;
    println!(
        "augmented {} samples {:?} -> {:?}; data -> {}; secret -> {}",
        aug.len(),
        data.sample_shape(),
        aug.sample_shape(),
        out.display(),
        a.secret.display()
    );
    Ok(json!({
        "samples": aug.len(),
        "original_shape": data.sample_shape(),
        "augmented_shape": aug.sample_shape(),
        "output": out,
    }))
}

fn augment_model_cmd(a: &AugmentModelArgs) -> CliResult<Value> {
    require_file(&a.model, "--model")?;
    let out = output_path(&a.output, "model.json", Some(&a.secret))?;
    let (graph, params) = deserialize_model(&a.model)?;
    let existing = if a.secret.is_file() {
        Some(SecretBundle::read(&a.secret)?)
    } else {
        None
    };
    let positions = existing.as_ref().and_then(|b| b.positions.clone());
    if positions.is_none() && !matches!(graph.input_spec, InputSpec::Vector { .. }) {
        return Err(usage(format!(
            "--secret {} holds no data positions; run augment-data first",
            a.secret.display()
        )));
    }
    let alpha = match (a.alpha, &positions) {
        (Some(x), _) => x,
        (None, Some(p)) => p.alpha(),
        (None, None) => return Err(usage("--alpha is required without a data secret")),
    };
    check_alpha(alpha)?;
    let plan = plan_subnets_with(&graph, alpha, a.subnets, a.seed, a.cross_links, a.noise.config(a.seed))?;
    let aug = augment_model(&graph, &params, &plan, positions.as_ref())?;
    let audit = audit_isolation(&aug.graph, &aug.bundle)?;
    serialize_model(&aug.graph, &aug.params, &out)?;
    let mut bundle = aug.bundle;
    if let Some(old) = existing {
        for (k, v) in old.seeds {
            bundle.seeds.entry(k).or_insert(v);
        }
    }
    bundle.write(&a.secret)?;
    let (p, pa) = (graph.param_count(), aug.graph.param_count());
    println!(
        "augmented model: {p} -> {pa} parameters ({:.4}x), {} heads, {} grad-stop edges; model -> {}",
        pa as f64 / p as f64,
        aug.graph.heads.len(),
        audit.grad_stop_edges,
        out.display()
    );
    Ok(json!({
        "params_original": p,
        "params_augmented": pa,
        "ratio": pa as f64 / p as f64,
        "heads": aug.graph.heads.len(),
        "grad_stop_edges": audit.grad_stop_edges,
        "output": out,
    }))
}

fn train_cmd(a: &TrainArgs) -> CliResult<Value> {
    require_file(&a.model, "--model")?;
    require_file(&a.data, "--data")?;
    let out = output_path(&a.output, "model.json", None)?;
    let (graph, mut params) = deserialize_model(&a.model)?;
    if let Some(pre) = &a.pretrained {
        require_file(pre, "--pretrained")?;
        let (_, pp) = deserialize_model(pre)?;
        params = apply_pretrained(&graph, &params, &pp, &a.pretrained_layers)?;
    } else if !a.pretrained_layers.is_empty() {
        return Err(usage("--pretrained-layers needs --pretrained"));
    }
    let data = Dataset::read(&a.data)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        batch_size: a.batch,
        seed: a.seed,
        deterministic: a.deterministic,
    };
    let start = Instant::now();
    let (trained, log) = train(&graph, &params, &data, &cfg)?;
    let elapsed = start.elapsed().as_secs_f64();
    serialize_model(&graph, &trained, &out)?;
    if let Some(m) = &a.metrics {
        write_text(m, &log.to_csv())?;
    }
    let losses = log.epoch_losses();
    println!(
        "trained {} epochs in {elapsed:.2}s; final mean loss {:.6}; model -> {}",
        a.epochs,
        losses.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(json!({ "epochs": a.epochs, "epoch_losses": losses, "seconds": elapsed, "output": out }))
}

fn extract_cmd(a: &ExtractArgs) -> CliResult<Value> {
    require_file(&a.model, "--model")?;
    require_file(&a.secret, "--secret")?;
    require_file(&a.original, "--original")?;
    let (aug, aug_params) = deserialize_model(&a.model)?;
    let bundle = SecretBundle::read(&a.secret)?;
    let original = read_structure(&a.original)?;
    let (params, rep) = extract(&aug, &aug_params, &bundle, &original)?;
    serialize_model(&original, &params, &a.out)?;
    println!(
        "extracted {} layers, {} parameters in {:.3} ms (architecture match: {}); model -> {}",
        rep.layers_copied,
        rep.param_count,
        rep.elapsed_ms,
        rep.architecture_match,
        a.out.display()
    );
    Ok(serde_json::to_value(rep).map_err(Error::from)?)
}

fn evaluate_cmd(a: &EvaluateArgs) -> CliResult<Value> {
    require_file(&a.model, "--model")?;
    require_file(&a.data, "--data")?;
    let head = match &a.secret {
        Some(s) => SecretBundle::read(s)?
            .original_head_index
            .ok_or_else(|| usage("secret records no original head"))?,
        None => a.head.unwrap_or(0),
    };
    let (graph, params) = deserialize_model(&a.model)?;
    let data = Dataset::read(&a.data)?;
    let (loss, acc) = evaluate(&graph, &params, &data, head)?;
    println!("head {head}: loss {loss:.6}, accuracy {acc:.4} over {} samples", data.len());
    Ok(json!({ "head": head, "loss": loss, "accuracy": acc, "samples": data.len() }))
}

fn report_cmd(a: &ReportArgs) -> CliResult<Value> {
    check_alpha(a.alpha)?;
    let figures = match &a.model {
        None => None,
        Some(m) => {
            require_file(m, "--model")?;
            let graph = read_structure(m)?;
            let added = if a.alpha == 0.0 {
                0
            } else {
                crate::augment::plan_subnets(&graph, a.alpha, a.subnets, a.seed)?.added_params()
            };
            Some(ModelFigures {
                params: graph.param_count(),
                added_params: added,
                subnets: a.subnets,
            })
        }
    };
    let r = report(a.shape, a.alpha, figures)?;
    print!("{}", r.to_text());
    if let Some(path) = &a.curve {
        check_alpha(a.curve_max)?;
        if a.curve_steps == 0 {
            return Err(usage("--curve-steps must be >= 1"));
        }
        write_text(path, &curve_csv(a.shape, &alpha_grid(0.0, a.curve_max, a.curve_steps))?)?;
    }
    Ok(serde_json::to_value(&r).map_err(Error::from)?)
}

fn attack_cmd(a: &AttackArgs) -> CliResult<Value> {
    require_file(&a.model, "--model")?;
    require_file(&a.data, "--data")?;
    let (graph, params) = deserialize_model(&a.model)?;
    let data = Dataset::read(&a.data)?;
    if a.index >= data.len() {
        return Err(usage(format!("--index {} outside 0..{}", a.index, data.len())));
    }
    let region: Option<PositionSecret> = match &a.secret {
        Some(s) => SecretBundle::read(s)?.positions,
        None => None,
    };
    let one = data.subset(&[a.index])?;
    let shape = data.sample_shape().to_vec();
    let x = Array::<f64>::new(shape, Array::<f64>::from_tensor(one.samples())?.data)?;
    let net = Network::new(graph.clone())?;
    let true_label = one.labels()[0];
    let victim = sample_grads(&net, &params, &x, true_label)?;
    let label = idlg_label(&victim, &graph, a.head)?;
    let cfg = AttackConfig {
        iterations: a.iterations,
        step: a.step,
        seed: a.seed,
        target_index: a.index,
        fd_step: a.fd_step,
    };
    let truth = x.to_tensor();
    let target = AttackTarget {
        region: region.as_ref(),
        ..AttackTarget::new(&truth)
    };
    let r = dlg_reconstruct(&graph, &params, &victim, label, &cfg, target)?;
    if let Some(out) = &a.out {
        let mut ar = Archive::new();
        ar.push("reconstruction", r.reconstruction.clone())?;
        ar.write(out)?;
    }
    if let Some(h) = &a.history {
        write_text(h, &r.history_csv())?;
    }
    let first = r.history.first().copied().unwrap_or(f64::NAN);
    let last = r.history.last().copied().unwrap_or(f64::NAN);
    println!(
        "iDLG label {label} (true {true_label}); DLG objective {first:.4e} -> {last:.4e} over {} iterations; MSE {:.6}",
        r.iterations, r.mse
    );
    Ok(json!({
        "inferred_label": label,
        "true_label": true_label,
        "objective_initial": first,
        "objective_final": last,
        "iterations": r.iterations,
        "mse": r.mse,
    }))
}

fn fixture_cmd(a: &FixtureArgs) -> CliResult<Value> {
    let model = |g: crate::ir::ModelGraph| -> CliResult<Value> {
        let p = init_params(&g, a.seed)?;
        serialize_model(&g, &p, &a.out)?;
        println!("model with {} parameters -> {}", g.param_count(), a.out.display());
        Ok(json!({ "params": g.param_count(), "output": a.out }))
    };
    let dataset = |d: Dataset| -> CliResult<Value> {
        d.write(&a.out)?;
        println!("{} samples {:?} -> {}", d.len(), d.sample_shape(), a.out.display());
        Ok(json!({ "samples": d.len(), "output": a.out }))
    };
    match a.kind {
        FixtureKind::LenetMini => model(fixtures::lenet_mini()),
        FixtureKind::TextClassifier => model(fixtures::text_classifier(1000, 20, 32, 4)),
        FixtureKind::TinyCnn => model(fixtures::tiny_cnn()),
        FixtureKind::Images => dataset(fixtures::synthetic_images(a.n, 28, 10, a.seed)?),
        FixtureKind::TinyImages => dataset(fixtures::synthetic_images(a.n, 14, 10, a.seed)?),
        FixtureKind::Text => dataset(fixtures::synthetic_text(a.n, 20, 1000, 4, a.seed)?),
    }
}

/// Executes a parsed command.
pub fn execute(cli: &Cli) -> CliResult<()> {
    let summary = match &cli.command {
        Command::AugmentData(a) => augment_data(a)?,
        Command::AugmentModel(a) => augment_model_cmd(a)?,
        Command::Train(a) => train_cmd(a)?,
        Command::Extract(a) => extract_cmd(a)?,
        Command::Evaluate(a) => evaluate_cmd(a)?,
        Command::Report(a) => report_cmd(a)?,
        Command::Attack(a) => attack_cmd(a)?,
        Command::Fixture(a) => fixture_cmd(a)?,
    };
    if let Some(path) = &cli.json_out {
        let text = serde_json::to_string_pretty(&summary).map_err(Error::from)?;
        write_text(path, &(text + "\n"))?;
    }
    Ok(())
}

/// Parses `argv` and runs it. Returns 0 on success, 1 on usage errors and
/// 2 on runtime errors.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(CliError::Usage(m)) => {
            eprintln!("usage error: {m}");
            1
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(run(["amalgam", "--help"]), 0);
        assert_eq!(run(["amalgam", "report", "--bogus"]), 1);
        assert_eq!(run(["amalgam", "report", "--alpha", "-1", "--shape", "28x28x1"]), 1);
        assert_eq!(run(["amalgam", "report", "--alpha", "0.5", "--shape", "28x28x1"]), 0);
        assert_eq!(run(["amalgam", "evaluate", "--model", "/nonexistent.json", "--data", "/x"]), 1);
    }

    #[test]
    fn secret_must_stay_outside_cloud_dir() {
        let dir = tempfile::tempdir().unwrap();
        let cloud = dir.path().join("cloud");
        let out = OutputArgs {
            cloud_dir: Some(cloud.clone()),
            out: None,
        };
        assert!(matches!(
            output_path(&out, "data.amlg", Some(&cloud.join("s.amlg"))),
            Err(CliError::Usage(_))
        ));
        let nested = cloud.join("sub").join("..").join("s.amlg");
        assert!(output_path(&out, "data.amlg", Some(&nested)).is_err());
        assert_eq!(
            output_path(&out, "data.amlg", Some(&dir.path().join("s.amlg"))).unwrap(),
            cloud.join("data.amlg")
        );
    }
}
