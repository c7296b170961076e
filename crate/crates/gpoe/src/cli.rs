//! Subcommands of the `gpoe` binary.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use gpoe_core::data::NoiseSpec;
use gpoe_core::train::{evaluate, train_with};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::dataset::{generate_pair, load_dataset, save_dataset, split_seeds, Manifest};
use crate::error::{Error, Result};
use crate::fs::{append_lines, atomic_write};
use crate::fusedemo::{fuse_demo, DemoConfig};
use crate::report::{eval_row, log_csv, report_json, RunKey, EVAL_HEADER};
use crate::settings::{read_lines, Settings};
use crate::sweep::{run_sweep, threads_from_env, write_sweep, SweepConfig, LONG_FILE, SUMMARY_FILE};

pub const TRAIN_FILE: &str = "train.gpd";
pub const TEST_FILE: &str = "test.gpd";

#[derive(Debug, Parser)]
#[command(name = "gpoe", version, about = "Multimodal VAE fusion experiments on a synthetic keypoint task")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write train and test datasets with manifests.
    Generate(GenerateArgs),
    /// Train one model and write a checkpoint and loss log.
    Train(TrainCmd),
    /// Score a checkpoint on a corrupted test set.
    Eval(EvalArgs),
    /// Train every mechanism and seed, then score each on a noise grid.
    Sweep(SweepArgs),
    /// Density curves of two 1-D experts and their fusions.
    FuseDemo(FuseDemoArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 5000)]
    pub n_train: usize,
    #[arg(long, default_value_t = 1000)]
    pub n_test: usize,
    /// Keypoints per scene.
    #[arg(long, default_value_t = 5)]
    pub keypoints: usize,
    /// Side length of the occupancy grid.
    #[arg(long, default_value_t = 16)]
    pub grid: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for `train.gpd` and `test.gpd`.
    #[arg(long)]
    pub out: PathBuf,
}

/// Training settings; each flag overrides the key of the same name in
/// `--config`.
#[derive(Debug, Args, Default)]
pub struct TrainFlags {
    /// Flat key=value file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// poe, gpoe or moe.
    #[arg(long)]
    pub mechanism: Option<String>,
    #[arg(long)]
    pub beta: Option<String>,
    #[arg(long)]
    pub learning_rate: Option<String>,
    #[arg(long)]
    pub batch_size: Option<String>,
    #[arg(long)]
    pub epochs: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long)]
    pub train_pixel_fraction: Option<String>,
    #[arg(long)]
    pub train_sigma: Option<String>,
    #[arg(long)]
    pub train_data_fraction: Option<String>,
    #[arg(long)]
    pub latent_dim: Option<String>,
    /// Comma-separated hidden widths of encoders and decoders.
    #[arg(long)]
    pub hidden: Option<String>,
    /// Comma-separated hidden widths of the weighting network.
    #[arg(long)]
    pub alpha_hidden: Option<String>,
    /// features or raw.
    #[arg(long)]
    pub alpha_input: Option<String>,
    /// Positive number, or `none`.
    #[arg(long)]
    pub variance_floor: Option<String>,
}

impl TrainFlags {
    fn overrides(&self) -> Vec<(String, String)> {
        let fields = [
            ("mechanism", &self.mechanism),
            ("beta", &self.beta),
            ("learning_rate", &self.learning_rate),
            ("batch_size", &self.batch_size),
            ("epochs", &self.epochs),
            ("seed", &self.seed),
            ("train_pixel_fraction", &self.train_pixel_fraction),
            ("train_sigma", &self.train_sigma),
            ("train_data_fraction", &self.train_data_fraction),
            ("latent_dim", &self.latent_dim),
            ("hidden", &self.hidden),
            ("alpha_hidden", &self.alpha_hidden),
            ("alpha_input", &self.alpha_input),
            ("variance_floor", &self.variance_floor),
        ];
        fields
            .into_iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone())))
            .collect()
    }

    fn file_pairs(&self) -> Result<Vec<(String, String)>> {
        match &self.config {
            Some(p) => {
                require_file(p, "config")?;
                read_lines(p)
            }
            None => Ok(Vec::new()),
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainCmd {
    /// Training set in GPD1 format.
    #[arg(long)]
    pub train: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Loss log CSV; defaults to the checkpoint path with `.log.csv` appended.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Test set in GPD1 format.
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    pub pixel_fraction: f64,
    #[arg(long, default_value_t = 0.0)]
    pub sigma: f64,
    /// Fraction of test scenes to corrupt.
    #[arg(long, default_value_t = 1.0)]
    pub data_fraction: f64,
    /// Seed of the test-time corruption.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON report path.
    #[arg(long)]
    pub report: PathBuf,
    /// CSV file that receives one appended row.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    /// Output directory for the long-form and summary CSVs.
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated list, default poe,gpoe,moe.
    #[arg(long)]
    pub mechanisms: Option<String>,
    /// Comma-separated list, default 0,1,2.
    #[arg(long)]
    pub seeds: Option<String>,
    /// Test pixel fractions, default 0,0.25,0.5.
    #[arg(long)]
    pub test_pixel_fractions: Option<String>,
    /// Test Gaussian sigmas, default 0.
    #[arg(long)]
    pub test_sigmas: Option<String>,
    /// Test data fractions, default 1.
    #[arg(long)]
    pub test_data_fractions: Option<String>,
    #[arg(long)]
    pub eval_seed: Option<String>,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Debug, Args)]
pub struct FuseDemoArgs {
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub mean1: f64,
    #[arg(long, default_value_t = 1.0)]
    pub var1: f64,
    #[arg(long, default_value_t = 3.0, allow_negative_numbers = true)]
    pub mean2: f64,
    #[arg(long, default_value_t = 2.0)]
    pub var2: f64,
    /// Weight pair `a1,a2`; repeatable. Defaults to 0.75,0.25 0.5,0.5 0.25,0.75.
    #[arg(long = "alpha", value_parser = parse_pair)]
    pub alphas: Vec<(f64, f64)>,
    #[arg(long, default_value_t = -4.0, allow_negative_numbers = true)]
    pub x_min: f64,
    #[arg(long, default_value_t = 7.0, allow_negative_numbers = true)]
    pub x_max: f64,
    #[arg(long, default_value_t = 1101)]
    pub points: usize,
    /// CSV path; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_pair(s: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| format!("expected a1,a2, got {s:?}"))?;
    let p = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}"));
    Ok((p(a)?, p(b)?))
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Usage(format!("{what} {} does not exist", path.display())))
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => generate(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Eval(a) => eval(&a),
        Command::Sweep(a) => sweep(&a),
        Command::FuseDemo(a) => fusedemo(&a),
    }
}

fn generate(a: &GenerateArgs) -> Result<()> {
    if a.n_train == 0 || a.n_test == 0 {
        return Err(Error::Usage("--n-train and --n-test must be at least 1".into()));
    }
    if a.keypoints == 0 || a.grid < 4 {
        return Err(Error::Usage("--keypoints must be >= 1 and --grid >= 4".into()));
    }
    let (train, test) = generate_pair(a.n_train, a.n_test, a.keypoints, a.grid, a.seed)?;
    let (train_seed, test_seed) = split_seeds(a.seed);
    for (name, d, role, seed) in [
        (TRAIN_FILE, &train, "train", train_seed),
        (TEST_FILE, &test, "test", test_seed),
    ] {
        let m = Manifest { role: role.into(), seed, noise: NoiseSpec::CLEAN };
        save_dataset(&a.out.join(name), d, &m)?;
    }
    println!(
        "wrote {} train and {} test scenes ({} keypoints, {}x{} grid) to {}",
        train.len(),
        test.len(),
        a.keypoints,
        a.grid,
        a.grid,
        a.out.display()
    );
    Ok(())
}

fn log_path(a: &TrainCmd) -> PathBuf {
    a.log.clone().unwrap_or_else(|| {
        let mut s = a.out.as_os_str().to_owned();
        s.push(".log.csv");
        PathBuf::from(s)
    })
}

fn train_cmd(a: &TrainCmd) -> Result<()> {
    require_file(&a.train, "training set")?;
    let mut settings = Settings::default();
    settings.apply(&a.flags.file_pairs()?)?;
    settings.apply(&a.flags.overrides())?;
    let config = settings.into_config()?;
    let data = load_dataset(&a.train)?;
    let trained = train_with(&data, &config, |e| {
        eprintln!("epoch {:>4}  loss {:.6}", e.epoch, e.loss.total);
    })?;
    let ck = Checkpoint {
        config,
        modalities: trained.model.config().clone(),
        params: trained.params,
    };
    save_checkpoint(&a.out, &ck)?;
    let log = log_path(a);
    atomic_write(&log, log_csv(&trained.log).as_bytes())?;
    let last = trained.log.last().map_or(f64::NAN, |e| e.loss.total);
    println!(
        "trained {} for {} epochs, final loss {last}; wrote {} and {}",
        ck.config.mechanism.as_str(),
        ck.config.epochs,
        a.out.display(),
        log.display()
    );
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    require_file(&a.test, "test set")?;
    let test_noise = NoiseSpec::new(a.pixel_fraction, a.sigma, a.data_fraction)
        .map_err(|e| Error::Usage(format!("test noise: {e}")))?;
    let data = load_dataset(&a.test)?;
    let model = ck.model()?;
    let expected = (model.config().input.dim, model.config().target.dim);
    if (data.input_dim(), data.target_dim()) != expected {
        return Err(Error::Usage(format!(
            "test set has input/target dims ({}, {}), checkpoint expects {expected:?}",
            data.input_dim(),
            data.target_dim()
        )));
    }
    let report = evaluate(&model, &ck.params, &data, &test_noise, a.seed)?;
    let key = RunKey {
        mechanism: ck.config.mechanism,
        seed: ck.config.seed,
        train_noise: ck.config.train_noise,
        test_noise,
    };
    atomic_write(&a.report, report_json(&key, a.seed, &report, None).as_bytes())?;
    if let Some(csv) = &a.csv {
        append_lines(csv, EVAL_HEADER, &[eval_row(&key, &report)])?;
    }
    println!(
        "mean_epe {} auc {} iou {} f1 {} over {} scenes",
        report.all.mean_epe, report.all.auc, report.all.iou, report.all.f1, report.all.samples
    );
    Ok(())
}

fn sweep(a: &SweepArgs) -> Result<()> {
    require_file(&a.train, "training set")?;
    require_file(&a.test, "test set")?;
    let mut settings = Settings::default();
    let mut config = SweepConfig::default();
    let grid_flags = [
        ("mechanisms", &a.mechanisms),
        ("seeds", &a.seeds),
        ("test_pixel_fractions", &a.test_pixel_fractions),
        ("test_sigmas", &a.test_sigmas),
        ("test_data_fractions", &a.test_data_fractions),
        ("eval_seed", &a.eval_seed),
    ];
    let flags = a.flags.overrides().into_iter().chain(
        grid_flags
            .into_iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone()))),
    );
    for (k, v) in a.flags.file_pairs()?.into_iter().chain(flags) {
        config.set(&mut settings, &k, &v)?;
    }
    config.base = settings.into_config()?;
    config.validate()?;
    let threads = threads_from_env()?;
    let train_set = load_dataset(&a.train)?;
    let test_set = load_dataset(&a.test)?;
    let result = run_sweep(&train_set, &test_set, &config, threads)?;
    let written = write_sweep(&a.out, &result);
    println!(
        "{} cells, {} failed, {} rows; wrote {} and {} in {}",
        result.cells,
        result.failed_cells,
        result.rows.len(),
        LONG_FILE,
        SUMMARY_FILE,
        a.out.display()
    );
    written
}

fn fusedemo(a: &FuseDemoArgs) -> Result<()> {
    let defaults = DemoConfig::default();
    let c = DemoConfig {
        first: (a.mean1, a.var1),
        second: (a.mean2, a.var2),
        alphas: if a.alphas.is_empty() { defaults.alphas } else { a.alphas.clone() },
        x_min: a.x_min,
        x_max: a.x_max,
        points: a.points,
    };
    let csv = fuse_demo(&c)?.to_csv();
    match &a.out {
        Some(p) => atomic_write(p, csv.as_bytes()),
        None => std::io::stdout()
            .write_all(csv.as_bytes())
            .map_err(|e| Error::io("<stdout>", e)),
    }
}
