//! The `vizgen` command line.
//!
//! Exit codes: 0 on success, 1 on a usage error, 2 on a runtime error.
//! `VIZGEN_THREADS` caps the worker pool used for evaluation.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand};
use log::info;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::adversarial::{self, perturb_unit, VisualizationBank};
use crate::discriminator::{Classifier, ClassifierConfig, ClassifierTrainConfig};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::io::{self, LabeledDataset, SourceRange, Split};
use crate::tensor::AdamConfig;
use crate::trainer::{self, TrainConfig};
use crate::verify;

pub const THREADS_VAR: &str = "VIZGEN_THREADS";

#[derive(Debug, Parser, Serialize)]
#[command(name = "vizgen", version, about = "Class visualizations of a frozen classifier, used as adversarial perturbations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "subcommand", rename_all = "kebab-case")]
pub enum Command {
    /// Train the classifier on IDX data and freeze it.
    TrainClassifier(TrainClassifierArgs),
    /// Train a generator against a frozen classifier.
    TrainGenerator(TrainGeneratorArgs),
    /// Write one image per generator label.
    Visualize(VisualizeArgs),
    /// Perturb one image with one class visualization.
    Attack(AttackArgs),
    /// Fooling rates over a list of coefficients.
    Sweep(SweepArgs),
    /// Finite-difference check of every differentiable op.
    GradCheck(GradCheckArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct TrainClassifierArgs {
    /// Directory holding the four IDX files.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f32,
    /// Stop once held-out accuracy reaches this value.
    #[arg(long)]
    pub target_accuracy: Option<f32>,
    /// Use only the first N training images.
    #[arg(long)]
    pub train_limit: Option<usize>,
    /// Use only the first N test images.
    #[arg(long)]
    pub test_limit: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainGeneratorArgs {
    /// Classifier checkpoint; its config is read from the `.json` sidecar.
    #[arg(long)]
    pub classifier: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f32,
    /// Train one label per channel of this feature layer instead of classes.
    #[arg(long)]
    pub layer: Option<usize>,
    #[arg(long)]
    pub early_stop: Option<f32>,
    #[arg(long, default_value_t = 500)]
    pub log_interval: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct VisualizeArgs {
    #[arg(long)]
    pub generator: PathBuf,
    /// Name outputs by channel of this layer; requires --classifier.
    #[arg(long, requires = "classifier")]
    pub layer: Option<usize>,
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct AttackArgs {
    #[arg(long)]
    pub classifier: PathBuf,
    #[arg(long)]
    pub generator: PathBuf,
    /// A P5 image in the classifier's input shape.
    #[arg(long, conflicts_with_all = ["data", "index"])]
    pub image: Option<PathBuf>,
    /// IDX directory; the image is taken from the test split.
    #[arg(long, requires = "index")]
    pub data: Option<PathBuf>,
    #[arg(long, requires = "data")]
    pub index: Option<usize>,
    /// Class whose visualization is added.
    #[arg(long)]
    pub class: usize,
    /// Coefficient in 8-bit pixel units.
    #[arg(long)]
    pub coeff: f32,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub classifier: PathBuf,
    #[arg(long)]
    pub generator: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated, strictly increasing, in 8-bit pixel units.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,4,8,16,32")]
    pub coeffs: Vec<f32>,
    /// Evaluate only the first N test images.
    #[arg(long, default_value_t = 1000)]
    pub limit: usize,
    /// Also write every per-image outcome.
    #[arg(long)]
    pub log: bool,
    /// Also sweep a uniform-noise bank drawn from this seed.
    #[arg(long)]
    pub noise_control: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 20)]
    pub instances: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    pub tolerance: f32,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `argv`, runs the subcommand and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprintln!("{e}");
            if !matches!(e.kind(), ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                eprintln!("{}", Cli::command().render_help());
            }
            return 1;
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .try_init();
    match configure_threads().and_then(|()| execute(&cli)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_VAR} must be a positive integer, got `{raw}`")))?;
    // a pool already built by an earlier call in this process is kept
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::TrainClassifier(a) => train_classifier(cli, a),
        Command::TrainGenerator(a) => train_generator(cli, a),
        Command::Visualize(a) => visualize(a),
        Command::Attack(a) => attack(cli, a),
        Command::Sweep(a) => sweep(cli, a),
        Command::GradCheck(a) => grad_check(a),
    }
}

/// Path of the JSON config stored next to a checkpoint.
pub fn sidecar(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("json")
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|source| Error::Write {
        path: path.to_path_buf(),
        source,
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Format(format!("cannot serialise {}: {e}", path.display())))?;
    write(path, text + "\n")
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| {
        Error::Config(format!("cannot read {}: {e}", path.display()))
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(Error::Config(format!("{} is not a file", path.display())));
    }
    Ok(())
}

fn prepare_out(cli: &Cli, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|source| Error::Write {
        path: out.to_path_buf(),
        source,
    })?;
    write_json(&out.join("run_config.json"), cli)
}

pub fn load_classifier(path: &Path) -> Result<Classifier> {
    require_file(path)?;
    let config: ClassifierConfig = read_json(&sidecar(path))?;
    Ok(Classifier::load(config, path)?.frozen())
}

pub fn load_generator(path: &Path) -> Result<Generator> {
    require_file(path)?;
    let config: GeneratorConfig = read_json(&sidecar(path))?;
    Generator::load(config, path)
}

fn load_split(dir: &Path, split: Split, limit: Option<usize>) -> Result<LabeledDataset> {
    let data = LabeledDataset::load_idx(dir, split, 10)?;
    Ok(match limit {
        Some(n) => data.take(n),
        None => data,
    })
}

fn train_classifier(cli: &Cli, a: &TrainClassifierArgs) -> Result<()> {
    let train = load_split(&a.data, Split::Train, a.train_limit)?;
    let test = load_split(&a.data, Split::Test, a.test_limit)?;
    let cfg = ClassifierTrainConfig {
        epochs: a.epochs,
        seed: a.seed,
        batch_size: a.batch_size,
        adam: AdamConfig::with_learning_rate(a.learning_rate),
        target_accuracy: a.target_accuracy,
    };
    cfg.adam.validate()?;
    let shape = train
        .images()
        .first()
        .ok_or(Error::EmptyEvaluation)?
        .shape()
        .to_vec();
    let config = ClassifierConfig::desk([shape[0], shape[1], shape[2]], 10);
    let mut d = Classifier::build(config.clone(), a.seed)?;
    prepare_out(cli, &a.out)?;

    let report = d.train(&train, &test, &cfg)?;
    let d = d.frozen();
    let ckpt = a.out.join("classifier.ckpt");
    d.save(&ckpt)?;
    write_json(&sidecar(&ckpt), &config)?;
    write(&a.out.join("metrics.csv"), report.to_csv())?;
    if let Some(last) = report.epochs.last() {
        println!("held-out accuracy {:.4}", last.held_out_accuracy);
    }
    println!("classifier sha256 {}", d.checksum());
    Ok(())
}

fn train_generator(cli: &Cli, a: &TrainGeneratorArgs) -> Result<()> {
    let d = load_classifier(&a.classifier)?;
    let (classes, kind) = match a.layer {
        Some(layer) => (d.channel_head(layer)?.channels(), "channel"),
        None => (d.classes(), "class"),
    };
    let config = GeneratorConfig::desk(classes, d.input_shape());
    let mut g = Generator::build(config.clone(), a.seed)?;
    let cfg = TrainConfig {
        steps: a.steps,
        seed: a.seed,
        learning_rate: a.learning_rate,
        early_stop: a.early_stop,
        log_interval: a.log_interval,
    };
    cfg.validate()?;
    prepare_out(cli, &a.out)?;

    let before = d.checksum();
    let trace = match a.layer {
        Some(layer) => trainer::train_channel_generator(&mut g, &d, layer, &cfg)?,
        None => trainer::train_generator(&mut g, &d, &cfg)?,
    };
    let after = d.checksum();
    if before != after {
        return Err(Error::Config("classifier changed during generator training".into()));
    }
    let ckpt = a.out.join("generator.ckpt");
    g.save(&ckpt)?;
    write_json(&sidecar(&ckpt), &config)?;
    write(&a.out.join("loss.csv"), trace.to_csv())?;
    info!("trained {classes} {kind} labels for {} steps", trace.len());
    println!(
        "loss first 10% {:.4}, last 10% {:.4}",
        trace.head_mean(),
        trace.tail_mean()
    );
    println!("classifier sha256 {after} (unchanged)");
    Ok(())
}

fn visualize(a: &VisualizeArgs) -> Result<()> {
    let g = load_generator(&a.generator)?;
    let prefix = match (a.layer, &a.classifier) {
        (Some(layer), Some(path)) => {
            let d = load_classifier(path)?;
            let channels = d.channel_head(layer)?.channels();
            if channels != g.classes() {
                return Err(Error::Config(format!(
                    "layer {layer} has {channels} channels, generator has {} labels",
                    g.classes()
                )));
            }
            "channel"
        }
        (None, Some(path)) => {
            g.check_compatible(&load_classifier(path)?)?;
            "class"
        }
        _ => "class",
    };
    let images = (0..g.classes())
        .map(|c| g.generate(c))
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(&a.out).map_err(|source| Error::Write {
        path: a.out.clone(),
        source,
    })?;
    for (c, img) in images.iter().enumerate() {
        io::write_image(img, a.out.join(format!("{prefix}_{c}.pgm")), SourceRange::Signed)?;
    }
    let columns = (g.classes() as f64).sqrt().ceil() as usize;
    let grid = io::tile(&images, columns, 2, -1.0)?;
    io::write_image(&grid, a.out.join("grid.pgm"), SourceRange::Signed)?;
    println!("wrote {} images to {}", images.len(), a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct AttackOutcome {
    class: usize,
    coefficient: f32,
    label_clean: usize,
    label_perturbed: usize,
    fooled: bool,
    targeted: bool,
}

fn attack(cli: &Cli, a: &AttackArgs) -> Result<()> {
    let d = load_classifier(&a.classifier)?;
    let g = load_generator(&a.generator)?;
    g.check_compatible(&d)?;
    let image = match (&a.image, &a.data, a.index) {
        (Some(path), _, _) => io::read_image(path)?,
        (None, Some(dir), Some(index)) => {
            let test = LabeledDataset::load_idx(dir, Split::Test, d.classes())?;
            test.get(index)
                .ok_or_else(|| {
                    Error::Config(format!("index {index} out of range ({} images)", test.len()))
                })?
                .0
                .clone()
        }
        _ => return Err(Error::Config("give --image or --data with --index".into())),
    };
    let v = g.generate(a.class)?;
    let perturbed = perturb_unit(&image, &v, a.coeff)?;
    let label_clean = d.predict_label(&image)?;
    let label_perturbed = d.predict_label(&perturbed)?;
    prepare_out(cli, &a.out)?;

    io::write_image(&image, a.out.join("clean.pgm"), SourceRange::Unit)?;
    io::write_image(&perturbed, a.out.join("perturbed.pgm"), SourceRange::Unit)?;
    let outcome = AttackOutcome {
        class: a.class,
        coefficient: a.coeff,
        label_clean,
        label_perturbed,
        fooled: label_clean != label_perturbed,
        targeted: label_perturbed == a.class,
    };
    write_json(&a.out.join("attack.json"), &outcome)?;
    println!("label_clean {label_clean} label_perturbed {label_perturbed}");
    Ok(())
}

fn per_class_csv(result: &adversarial::SweepResult) -> String {
    let mut out = String::from("coefficient,class_i,evaluated,fooled,targeted\n");
    for r in &result.per_class {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.coefficient, r.class, r.evaluated, r.fooled, r.targeted
        ));
    }
    out
}

fn sweep(cli: &Cli, a: &SweepArgs) -> Result<()> {
    let d = load_classifier(&a.classifier)?;
    let g = load_generator(&a.generator)?;
    g.check_compatible(&d)?;
    let test = load_split(&a.data, Split::Test, Some(a.limit))?;
    let bank = VisualizationBank::from_generator(&g)?;
    let noise = a
        .noise_control
        .map(|seed| VisualizationBank::random_noise(d.classes(), &d.input_shape(), seed))
        .transpose()?;
    if a.coeffs.is_empty() {
        return Err(Error::Config("--coeffs is empty".into()));
    }
    prepare_out(cli, &a.out)?;

    let (result, log) = adversarial::sweep_logged(&d, &test, &bank, &a.coeffs, a.log)?;
    adversarial::emit_sweep_csv(&result, a.out.join("sweep.csv"))?;
    write(&a.out.join("sweep_per_class.csv"), per_class_csv(&result))?;
    if let Some(log) = log {
        write(&a.out.join("fooling_log.csv"), log.to_csv())?;
    }
    if let Some(noise) = noise {
        let control = adversarial::sweep(&d, &test, &noise, &a.coeffs)?;
        adversarial::emit_sweep_csv(&control, a.out.join("noise_sweep.csv"))?;
    }
    print!("{}", result.to_csv());
    Ok(())
}

fn grad_check(a: &GradCheckArgs) -> Result<()> {
    if a.instances == 0 {
        return Err(Error::Config("--instances must be positive".into()));
    }
    let checks = verify::verification_suite(a.instances, a.seed)?;
    let mut csv = String::from("op,instances,max_error,pass\n");
    let mut failed = Vec::new();
    for c in &checks {
        let pass = c.max_error < a.tolerance;
        println!(
            "{:<24} {:>3} instances  max error {:.3e}  {}",
            c.op,
            c.instances,
            c.max_error,
            if pass { "ok" } else { "FAIL" }
        );
        csv.push_str(&format!("{},{},{:e},{}\n", c.op, c.instances, c.max_error, pass));
        if !pass {
            failed.push(c.op);
        }
    }
    if let Some(out) = &a.out {
        fs::create_dir_all(out).map_err(|source| Error::Write {
            path: out.clone(),
            source,
        })?;
        write(&out.join("grad_check.csv"), csv)?;
    }
    if !failed.is_empty() {
        return Err(Error::CheckFailed(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )));
    }
    Ok(())
}
