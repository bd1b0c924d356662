//! Command-line pipeline: `gen-data` → `train-clf` / `train-ae` → `fit-stats`
//! → `calibrate` → `score` / `evaluate`.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::calibration::search_epsilon;
use crate::error::{Error, Result};
use crate::evaluation::{histogram_plot_data, report_from_scores, score_set, ScoreVariant};
use crate::io::benchmark::generate_benchmark;
use crate::io::checkpoint;
use crate::io::config::RunConfig;
use crate::io::tensor_file;
use crate::models::{AutoencoderModel, ClassifierModel};
use crate::scoring::{Detector, ScoreBreakdown};
use crate::tensor::{AnyTensor, Tensor};
use crate::training::{train_autoencoder, train_classifier};

pub const CLASSIFIER_CKPT: &str = "classifier.rck";
pub const AUTOENCODER_CKPT: &str = "autoencoder.rck";
pub const DETECTOR_CKPT: &str = "detector.rck";
pub const CALIBRATION_JSON: &str = "calibration.json";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_JSON: &str = "report.json";
pub const HISTOGRAM_DAT: &str = "score_histogram.dat";
const HISTOGRAM_BINS: usize = 40;

/// Independent RNG streams derived from the config seed.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub enum Stream {
    ClassifierInit = 10,
    ClassifierTrain = 11,
    AutoencoderInit = 20,
    AutoencoderTrain = 21,
    Calibration = 30,
}

pub fn rng_for(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

pub fn init_seed(seed: u64, stream: Stream) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stream as u64)
}

#[derive(Debug, Parser)]
#[command(name = "readood", version, about = "Reconstruction-error aggregated OOD detection")]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Override a config key, e.g. `--set classifier.train.epochs=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic shape benchmark into `paths.data_dir`.
    GenData(ConfigArgs),
    /// Train the classifier on the ID training split.
    TrainClf(ConfigArgs),
    /// Train the autoencoder on the ID training split.
    TrainAe(ConfigArgs),
    /// Fit class statistics and the complexity band; writes the detector checkpoint.
    FitStats(ConfigArgs),
    /// Select ε and τ on ID validation data and synthetic OOD.
    Calibrate(ConfigArgs),
    /// Score images and emit one CSV row per sample.
    Score {
        #[command(flatten)]
        config: ConfigArgs,
        /// Images as an RTN1 tensor file, `[N, C, H, W]`.
        #[arg(long)]
        input: PathBuf,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Evaluate the ablation variants on the ID test split and every `ood_*.rtn` set.
    Evaluate(ConfigArgs),
    /// Print checkpoint metadata.
    InspectCkpt {
        path: PathBuf,
        /// Print JSON instead of text.
        #[arg(long)]
        json: bool,
    },
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(&load(&a)?),
        Command::TrainClf(a) => train_clf(&load(&a)?),
        Command::TrainAe(a) => train_ae(&load(&a)?),
        Command::FitStats(a) => fit_stats(&load(&a)?),
        Command::Calibrate(a) => calibrate(&load(&a)?),
        Command::Score { config, input, output } => score(&load(&config)?, &input, output.as_deref()),
        Command::Evaluate(a) => evaluate(&load(&a)?),
        Command::InspectCkpt { path, json } => inspect(&path, json),
    }
}

fn load(a: &ConfigArgs) -> Result<RunConfig> {
    RunConfig::load(&a.config, &a.overrides)
}

fn require(path: PathBuf, stage: &'static str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact { path, stage })
    }
}

fn data_file(cfg: &RunConfig, name: &str) -> Result<PathBuf> {
    require(cfg.paths.data_dir.join(format!("{name}.rtn")), "gen-data")
}

fn work_dir(cfg: &RunConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.paths.work_dir)?;
    Ok(&cfg.paths.work_dir)
}

fn gen_data(cfg: &RunConfig) -> Result<()> {
    let b = generate_benchmark(cfg.seed, &cfg.data)?;
    let dir = &cfg.paths.data_dir;
    fs::create_dir_all(dir)?;
    let labels = |y: &[usize]| AnyTensor::U8(Tensor::new(vec![y.len()], y.iter().map(|&v| v as u8).collect()).expect("rank 1"));
    let files: [(&str, AnyTensor); 9] = [
        ("train_x", b.train_x.into()),
        ("train_y", labels(&b.train_y)),
        ("val_x", b.val_x.into()),
        ("val_y", labels(&b.val_y)),
        ("test_x", b.test_x.into()),
        ("test_y", labels(&b.test_y)),
        ("ood_easy", b.ood_easy.into()),
        ("ood_medium", b.ood_medium.into()),
        ("ood_hard", b.ood_hard.into()),
    ];
    for (name, t) in &files {
        tensor_file::write(&dir.join(format!("{name}.rtn")), t)?;
    }
    println!("wrote {} tensor files to {}", files.len(), dir.display());
    Ok(())
}

fn train_set(cfg: &RunConfig) -> Result<(Tensor<f32>, Vec<usize>)> {
    let x = tensor_file::read_images(&data_file(cfg, "train_x")?)?;
    let y = tensor_file::read_labels(&data_file(cfg, "train_y")?)?;
    if y.len() != x.batch() {
        return Err(Error::Data(format!("{} training images but {} labels", x.batch(), y.len())));
    }
    Ok((x, y))
}

fn train_clf(cfg: &RunConfig) -> Result<()> {
    let (x, y) = train_set(cfg)?;
    let s = x.shape();
    let k = y.iter().max().map_or(0, |m| m + 1);
    let arch = cfg.classifier_arch(s[1], s[2], k);
    let mut model = ClassifierModel::new(arch, init_seed(cfg.seed, Stream::ClassifierInit))?;
    let report = train_classifier(
        &mut model,
        &x,
        &y,
        &cfg.classifier_train(),
        &mut rng_for(cfg.seed, Stream::ClassifierTrain),
    )?;
    let path = work_dir(cfg)?.join(CLASSIFIER_CKPT);
    checkpoint::save_classifier(&path, &model, Some(cfg.to_json()))?;
    let last = report.losses.last().copied().unwrap_or(f64::NAN);
    print!("classifier: final loss {last:.5}");
    if let (Ok(vx), Ok(vy)) = (data_file(cfg, "val_x"), data_file(cfg, "val_y")) {
        let acc = model.accuracy(&tensor_file::read_images(&vx)?, &tensor_file::read_labels(&vy)?, 256)?;
        print!(", validation accuracy {:.4}", acc);
    }
    println!("; saved {}", path.display());
    Ok(())
}

fn train_ae(cfg: &RunConfig) -> Result<()> {
    let (x, _) = train_set(cfg)?;
    let s = x.shape();
    let arch = cfg.autoencoder_arch(s[1], s[2]);
    let mut model = AutoencoderModel::new(arch, init_seed(cfg.seed, Stream::AutoencoderInit))?;
    let report = train_autoencoder(
        &mut model,
        &x,
        &cfg.autoencoder_train(),
        &mut rng_for(cfg.seed, Stream::AutoencoderTrain),
    )?;
    let path = work_dir(cfg)?.join(AUTOENCODER_CKPT);
    checkpoint::save_autoencoder(&path, &model, Some(cfg.to_json()))?;
    let last = report.losses.last().copied().unwrap_or(f64::NAN);
    println!("autoencoder: final loss {last:.5}; saved {}", path.display());
    Ok(())
}

fn fit_stats(cfg: &RunConfig) -> Result<()> {
    let work = work_dir(cfg)?;
    let clf = checkpoint::load_classifier(&require(work.join(CLASSIFIER_CKPT), "train-clf")?)?;
    let ae = checkpoint::load_autoencoder(&require(work.join(AUTOENCODER_CKPT), "train-ae")?)?;
    if clf.head_kind() != cfg.variant.head() {
        return Err(Error::Config(format!(
            "variant {} needs a {:?} classifier head but {CLASSIFIER_CKPT} has {:?}; rerun `train-clf`",
            cfg.variant.as_str(),
            cfg.variant.head(),
            clf.head_kind()
        )));
    }
    let mut det = Detector::new(cfg.variant, clf, ae, cfg.scoring_options())?;
    let (x, y) = train_set(cfg)?;
    det.fit(&x, &y, cfg.scoring.regularization, cfg.scoring.trim)?;
    let path = work.join(DETECTOR_CKPT);
    checkpoint::save_detector(&path, &det, Some(cfg.to_json()))?;
    let b = det.bounds().expect("fitted");
    println!(
        "complexity band [{:.4}, {:.4}]{}; saved {}",
        b.lower,
        b.upper,
        det.stats().map_or(String::new(), |s| format!(", covariance regularization {:e}", s.reg)),
        path.display()
    );
    Ok(())
}

fn load_detector(cfg: &RunConfig) -> Result<Detector> {
    let mut det = checkpoint::load_detector(&require(cfg.paths.work_dir.join(DETECTOR_CKPT), "fit-stats")?)?;
    if det.variant() != cfg.variant {
        return Err(Error::Config(format!(
            "config variant {} differs from the detector's {}; rerun `fit-stats`",
            cfg.variant.as_str(),
            det.variant().as_str()
        )));
    }
    det.set_options(cfg.scoring_options());
    Ok(det)
}

fn calibrate(cfg: &RunConfig) -> Result<()> {
    let mut det = load_detector(cfg)?;
    let val = tensor_file::read_images(&data_file(cfg, "val_x")?)?;
    let result = search_epsilon(&det, &val, &cfg.calibration, &mut rng_for(cfg.seed, Stream::Calibration))?;
    let work = work_dir(cfg)?;
    fs::write(
        work.join(CALIBRATION_JSON),
        serde_json::to_string_pretty(&result).map_err(|e| Error::Data(e.to_string()))?,
    )?;
    println!(
        "epsilon {} tau {} (validation TPR {:.4}, mean synthetic FPR {:.4})",
        result.epsilon,
        result.tau,
        result.validation_tpr.unwrap_or(f64::NAN),
        result.mean_fpr_at(result.epsilon).unwrap_or(f64::NAN)
    );
    det.set_calibration(Some(result));
    checkpoint::save_detector(&work.join(DETECTOR_CKPT), &det, Some(cfg.to_json()))?;
    Ok(())
}

fn check_input_shape(det: &Detector, x: &Tensor<f32>) -> Result<()> {
    let expected = det.classifier().arch().input_shape();
    if x.shape()[1..] != expected {
        return Err(Error::Data(format!(
            "input images have shape {:?}, the detector expects [N, {}, {}, {}]",
            x.shape(),
            expected[0],
            expected[1],
            expected[2]
        )));
    }
    Ok(())
}

pub fn breakdown_csv(rows: &[ScoreBreakdown]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    w.write_record([
        "sample_id",
        "score_cla",
        "score_rec_raw",
        "complexity",
        "lambda",
        "final_score",
        "verdict",
        "predicted_class",
    ])
    .map_err(csv_err)?;
    for (i, r) in rows.iter().enumerate() {
        w.write_record([
            i.to_string(),
            r.score_cla.to_string(),
            r.score_rec_raw.to_string(),
            r.complexity.to_string(),
            r.lambda.to_string(),
            r.final_score.to_string(),
            r.verdict.as_str().to_string(),
            r.predicted_class.to_string(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn score(cfg: &RunConfig, input: &Path, output: Option<&Path>) -> Result<()> {
    let det = load_detector(cfg)?;
    if det.calibration().is_none() {
        return Err(Error::MissingArtifact {
            path: cfg.paths.work_dir.join(CALIBRATION_JSON),
            stage: "calibrate",
        });
    }
    let x = tensor_file::read_images(input)?;
    check_input_shape(&det, &x)?;
    let csv = breakdown_csv(&det.detect(&x)?)?;
    match output {
        Some(p) => fs::write(p, csv)?,
        None => std::io::stdout().write_all(csv.as_bytes())?,
    }
    Ok(())
}

/// `ood_*.rtn` files in the data directory, sorted by name.
fn ood_sets(cfg: &RunConfig) -> Result<Vec<(String, PathBuf)>> {
    let mut sets = Vec::new();
    for entry in fs::read_dir(&cfg.paths.data_dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if let Some(stem) = name.strip_prefix("ood_").and_then(|n| n.strip_suffix(".rtn")) {
            sets.push((stem.to_string(), path.clone()));
        }
    }
    sets.sort();
    if sets.is_empty() {
        return Err(Error::Data(format!("no ood_*.rtn files in {}", cfg.paths.data_dir.display())));
    }
    Ok(sets)
}

fn evaluate(cfg: &RunConfig) -> Result<()> {
    let det = load_detector(cfg)?;
    if det.calibration().is_none() {
        return Err(Error::MissingArtifact {
            path: cfg.paths.work_dir.join(CALIBRATION_JSON),
            stage: "calibrate",
        });
    }
    let test = tensor_file::read_images(&data_file(cfg, "test_x")?)?;
    check_input_shape(&det, &test)?;
    let id = score_set(&det, "test", &test, true)?;
    let mut oods = Vec::new();
    for (name, path) in ood_sets(cfg)? {
        let x = tensor_file::read_images(&path)?;
        check_input_shape(&det, &x)?;
        oods.push(score_set(&det, &name, &x, true)?);
    }
    let report = report_from_scores(det.variant().as_str(), &id, &oods, &ScoreVariant::ALL)?;
    let work = work_dir(cfg)?;
    fs::write(work.join(REPORT_CSV), report.to_csv()?)?;
    fs::write(work.join(REPORT_JSON), report.to_json()?)?;
    let full = ScoreVariant::AggregatedAdjustPerturb;
    let mut sets = vec![(id.name.clone(), id.variant_scores(full)?)];
    for o in &oods {
        sets.push((o.name.clone(), o.variant_scores(full)?));
    }
    let named: Vec<(&str, &[f64])> = sets.iter().map(|(n, s)| (n.as_str(), s.as_slice())).collect();
    fs::write(work.join(HISTOGRAM_DAT), histogram_plot_data(&named, HISTOGRAM_BINS)?)?;
    println!("{:<28} {:>8} {:>12}", "variant", "AUROC", "FPR@95TPR");
    for r in &report.aggregates {
        println!("{:<28} {:>8.4} {:>12.4}", r.variant.as_str(), r.auroc, r.fpr_at_95_tpr);
    }
    println!("wrote {}", work.join(REPORT_CSV).display());
    Ok(())
}

fn inspect(path: &Path, json: bool) -> Result<()> {
    let info = checkpoint::inspect(path)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&info).map_err(|e| Error::Data(e.to_string()))?);
        return Ok(());
    }
    let opt = |v: Option<f64>| v.map_or("(uncalibrated)".to_string(), |v| v.to_string());
    println!("format version: {}", info.version);
    println!("kind: {}", info.kind.as_str());
    println!("variant: {}", info.variant.map_or("-", |v| v.as_str()));
    println!("parameters: {}", info.parameter_count);
    println!("class statistics: {}", if info.has_stats { "yes" } else { "no" });
    match info.bounds {
        Some((lo, hi)) => println!("complexity band: [{lo}, {hi}]"),
        None => println!("complexity band: -"),
    }
    println!("epsilon: {}", opt(info.epsilon));
    println!("tau: {}", opt(info.tau));
    Ok(())
}
