//! Subcommands of the `dcf` tool. Each writes its payload to `out`;
//! progress and diagnostics go to standard error.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dcf_core::backprop::{gradient_check, params_mut};
use dcf_core::bench::{bench, Strategy};
use dcf_core::cost::{full_report, network_inputs, reference_report, LogArgument};
use dcf_core::detector::{detect, model_responses, response_heatmap, DetectConfig, RegressorWeights};
use dcf_core::error::DcfError;
use dcf_core::layers::{Network, NetworkSpec};
use dcf_core::oracles::{equivalence_report_with, Fault};
use dcf_core::synth::{generate_dataset, generate_scene, Dataset, Sample, NEGATIVE, POSITIVE};
use dcf_core::tensor::{Padding, Tensor};
use dcf_core::train::{regressor_samples, train, train_regressor};

use crate::config::{self, TrainSettings};
use crate::{arch, pgm, weights};

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_CORRUPT: u8 = 3;
pub const EXIT_GEOMETRY: u8 = 4;

/// Largest tolerated difference between fragment and patch scores.
pub const EQUIVALENCE_TOLERANCE: f64 = 1e-6;
/// Largest tolerated finite-difference relative gradient error.
pub const GRADIENT_TOLERANCE: f64 = 1e-3;

/// A failure with the exit status it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<DcfError> for CliError {
    fn from(e: DcfError) -> Self {
        let code = match e {
            DcfError::Crc { .. } => EXIT_CORRUPT,
            DcfError::Geometry(_) => EXIT_GEOMETRY,
            DcfError::UnknownConfigKey(_) | DcfError::ConfigValue { .. } => EXIT_USAGE,
            _ => EXIT_FAILURE,
        };
        Self::new(code, e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::new(EXIT_FAILURE, e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "dcf", version, about = "Dense CNN object detection over complete pooling fragments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train classifier weights (and optionally a box regressor).
    Train(TrainArgs),
    /// Detect objects in a PGM image.
    Detect(DetectArgs),
    /// Print the analytical cost report as CSV.
    Flops(FlopsArgs),
    /// Time patch, image and fragment evaluation on one image.
    Bench(BenchArgs),
    /// Check fragment scores against the patch oracle and gradients against
    /// finite differences.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `synthetic:SEED` or a directory with `positive/` and `negative/` PGM windows.
    #[arg(long)]
    pub data: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of models; model `i > 0` uses seed `seed + i` and is written
    /// next to `--out` with a `-i` suffix.
    #[arg(long, default_value_t = 1)]
    pub ensemble: usize,
    /// Also train a box regressor on synthetic scenes and write it here.
    #[arg(long)]
    pub regressor_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub model: Vec<PathBuf>,
    #[arg(long)]
    pub image: PathBuf,
    /// Comma-separated fragment resize factors.
    #[arg(long, value_delimiter = ',')]
    pub scales: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0.5)]
    pub tau: f64,
    #[arg(long, default_value_t = 0.3)]
    pub iou: f64,
    #[arg(long)]
    pub regressor: Option<PathBuf>,
    #[arg(long)]
    pub heatmap: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    /// Built-in architecture; only `table1` is known.
    #[arg(long, conflicts_with = "arch_file", required_unless_present = "arch_file")]
    pub arch: Option<String>,
    #[arg(long)]
    pub arch_file: Option<PathBuf>,
    /// `WIDTHxHEIGHT`
    #[arg(long, value_parser = parse_size)]
    pub image_size: (usize, usize),
    /// Number of scales scanned.
    #[arg(long, default_value_t = 1)]
    pub scales: usize,
    #[arg(long, default_value_t = 0.5)]
    pub sparsity: f64,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    /// `all` or a comma-separated subset of `patch,image,dcf`.
    #[arg(long, default_value = "all")]
    pub strategies: String,
    #[arg(long, default_value_t = 5)]
    pub runs: usize,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated `WIDTHxHEIGHT` image sizes.
    #[arg(long, value_delimiter = ',', value_parser = parse_size, default_value = "40x40,44x44,47x47,48x48")]
    pub sizes: Vec<(usize, usize)>,
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

pub fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WIDTHxHEIGHT, got `{s}`"))?;
    let n = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("bad dimension `{v}` in `{s}`"));
    Ok((n(w)?, n(h)?))
}

/// Loads a weight file; any malformed content counts as corruption.
fn load_model(path: &Path) -> CliResult<Network<f32>> {
    let bytes = std::fs::read(path).map_err(|e| CliError::new(EXIT_FAILURE, format!("{}: {e}", path.display())))?;
    weights::decode_network(&bytes).map_err(|e| corrupt(path, e))
}

fn corrupt(path: &Path, e: DcfError) -> CliError {
    let code = if matches!(e, DcfError::Geometry(_)) { EXIT_GEOMETRY } else { EXIT_CORRUPT };
    CliError::new(code, format!("{}: {e}", path.display()))
}

pub fn run(cli: Cli, out: &mut dyn Write) -> CliResult<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a, out),
        Command::Detect(a) => cmd_detect(&a, out),
        Command::Flops(a) => cmd_flops(&a, out),
        Command::Bench(a) => cmd_bench(&a, out),
        Command::Verify(a) => cmd_verify(&a, out),
    }
}

/// Path of ensemble member `i`: `dir/stem-i.ext` for `i > 0`.
pub fn member_path(out: &Path, i: usize) -> PathBuf {
    if i == 0 {
        return out.to_path_buf();
    }
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match out.extension() {
        Some(ext) => format!("{stem}-{i}.{}", ext.to_string_lossy()),
        None => format!("{stem}-{i}"),
    };
    out.with_file_name(name)
}

fn read_window_dir(dir: &Path, label: usize) -> CliResult<Vec<Sample>> {
    let sub = dir.join(if label == POSITIVE { "positive" } else { "negative" });
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&sub)
        .map_err(|e| CliError::new(EXIT_FAILURE, format!("{}: {e}", sub.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("pgm")))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let image = pgm::read(p).map_err(|e| CliError::new(EXIT_FAILURE, format!("{}: {e}", p.display())))?;
            Ok(Sample { image, label })
        })
        .collect()
}

/// Training and validation sets. Directory data puts every sixth window
/// into validation.
fn load_data(data: &str, settings: &TrainSettings) -> CliResult<(Dataset, Dataset)> {
    if let Some(seed) = data.strip_prefix("synthetic:") {
        let seed: u64 = seed
            .parse()
            .map_err(|_| CliError::new(EXIT_USAGE, format!("bad synthetic seed `{seed}`")))?;
        let all = generate_dataset(seed, settings.train_count + settings.validation_count)?;
        return Ok(all.split(settings.train_count));
    }
    let dir = Path::new(data);
    let mut samples = read_window_dir(dir, NEGATIVE)?;
    samples.extend(read_window_dir(dir, POSITIVE)?);
    if samples.is_empty() {
        return Err(CliError::new(EXIT_FAILURE, format!("{}: no PGM windows found", dir.display())));
    }
    let (mut tr, mut va) = (Vec::new(), Vec::new());
    for (i, s) in samples.into_iter().enumerate() {
        if i % 6 == 5 { va.push(s) } else { tr.push(s) }
    }
    Ok((Dataset { samples: tr }, Dataset { samples: va }))
}

/// Scales used when fitting the regressor on synthetic scenes.
pub const REGRESSOR_SCALES: [f64; 2] = [1.0, 0.5];

/// Fits a regressor on proposals of `net` over synthetic scenes of `seed`.
pub fn fit_regressor(net: &Network<f32>, settings: &TrainSettings, seed: u64) -> CliResult<RegressorWeights<f32>> {
    let scenes: Vec<_> = (0..settings.regressor_scenes as u64).map(|i| generate_scene(seed, i, 128)).collect();
    let cfg = DetectConfig { scales: REGRESSOR_SCALES.to_vec(), tau: 0.5, ..DetectConfig::default() };
    let samples = regressor_samples(net, &scenes, &cfg, 0.3, 30)?;
    eprintln!("regressor: {} samples", samples.len());
    let outcome = train_regressor(&samples, net.window_side(), &settings.regressor)?;
    if let (Some(first), Some(last)) = (outcome.mse.first(), outcome.mse.last()) {
        eprintln!("regressor: mse {first:.5} -> {last:.5}");
    }
    Ok(outcome.weights)
}

fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> CliResult<()> {
    let mut settings = TrainSettings::default();
    if let Some(path) = &a.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::new(EXIT_USAGE, format!("{}: {e}", path.display())))?;
        let pairs = config::parse(&text).map_err(|e| CliError::new(EXIT_USAGE, e.to_string()))?;
        settings
            .apply(&pairs)
            .map_err(|e| CliError::new(EXIT_USAGE, format!("{}: {e}", path.display())))?;
    }
    if a.ensemble == 0 {
        return Err(CliError::new(EXIT_USAGE, "--ensemble must be at least 1"));
    }
    let (train_set, validation) = load_data(&a.data, &settings)?;
    eprintln!("data: {} training, {} validation windows", train_set.len(), validation.len());
    let spec = NetworkSpec::table1(settings.padding);
    let mut lead = None;
    for i in 0..a.ensemble {
        let cfg = dcf_core::train::TrainConfig { seed: settings.train.seed + i as u64, ..settings.train.clone() };
        let outcome = train::<f32>(&cfg, &train_set, &validation, &spec, |s| {
            eprintln!(
                "model {i} epoch {}: loss {:.4}, validation accuracy {:.4}, precision {:.4}",
                s.epoch, s.train_loss, s.validation.accuracy, s.validation.precision
            )
        })?;
        let path = member_path(&a.out, i);
        weights::save_network(&path, &outcome.net)?;
        eprintln!("wrote {}", path.display());
        writeln!(out, "{:.6}", outcome.validation().precision)?;
        if i == 0 {
            lead = Some(outcome.net);
        }
    }
    if let (Some(path), Some(net)) = (&a.regressor_out, &lead) {
        let reg = fit_regressor(net, &settings, settings.train.seed)?;
        weights::save_regressor(path, &reg)?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

/// One detection record line.
pub fn format_detection(d: &dcf_core::detector::Detection) -> String {
    format!(
        "{} {} {} {} {:.6} {:.4}",
        d.x.round() as i64,
        d.y.round() as i64,
        d.w.round() as i64,
        d.h.round() as i64,
        d.score,
        d.scale
    )
}

fn cmd_detect(a: &DetectArgs, out: &mut dyn Write) -> CliResult<()> {
    let models = a.model.iter().map(|p| load_model(p)).collect::<CliResult<Vec<_>>>()?;
    let regressor = match &a.regressor {
        Some(p) => {
            let bytes = std::fs::read(p).map_err(|e| CliError::new(EXIT_FAILURE, format!("{}: {e}", p.display())))?;
            Some(weights::decode_regressor::<f32>(&bytes, models[0].window_side()).map_err(|e| corrupt(p, e))?)
        }
        None => None,
    };
    let image = pgm::read(&a.image).map_err(|e| CliError::new(EXIT_FAILURE, format!("{}: {e}", a.image.display())))?;
    let image = image.cast::<f32>();
    let cfg = DetectConfig {
        scales: a.scales.clone().unwrap_or_else(DetectConfig::default_scales),
        tau: a.tau,
        iou_threshold: a.iou,
        ..DetectConfig::default()
    };
    let mut dets = detect(&image, &models, regressor.as_ref(), &cfg)?;
    dets.sort_by(|x, y| y.score.total_cmp(&x.score).then(x.y.total_cmp(&y.y)).then(x.x.total_cmp(&y.x)));
    for d in &dets {
        writeln!(out, "{}", format_detection(d))?;
    }
    if let Some(path) = &a.heatmap {
        let mr = model_responses(&image, &models[0], &cfg)?;
        let heat = response_heatmap(&mr.responses, (image.height(), image.width()));
        pgm::write(path, &heat)?;
    }
    eprintln!("{} detections", dets.len());
    Ok(())
}

fn cmd_flops(a: &FlopsArgs, out: &mut dyn Write) -> CliResult<()> {
    if !(0.0..=1.0).contains(&a.sparsity) {
        return Err(CliError::new(EXIT_USAGE, format!("sparsity must lie in [0, 1], got {}", a.sparsity)));
    }
    if a.scales == 0 {
        return Err(CliError::new(EXIT_USAGE, "--scales must be at least 1"));
    }
    let (w, h) = a.image_size;
    let report = match (&a.arch, &a.arch_file) {
        (Some(name), _) if name == "table1" => reference_report(w, h, a.scales, a.sparsity),
        (Some(name), _) => return Err(CliError::new(EXIT_USAGE, format!("unknown architecture `{name}`"))),
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::new(EXIT_FAILURE, format!("{}: {e}", path.display())))?;
            let spec = arch::parse(&text).map_err(|e| CliError::new(EXIT_USAGE, format!("{}: {e}", path.display())))?;
            full_report(&network_inputs(&spec, w, h, a.sparsity), a.scales as f64, LogArgument::NonzeroPixels)
        }
        (None, None) => return Err(CliError::new(EXIT_USAGE, "one of --arch or --arch-file is required")),
    };
    out.write_all(report.to_csv().as_bytes())?;
    Ok(())
}

fn cmd_bench(a: &BenchArgs, out: &mut dyn Write) -> CliResult<()> {
    let strategies: Vec<Strategy> = if a.strategies == "all" {
        Strategy::ALL.to_vec()
    } else {
        a.strategies
            .split(',')
            .map(|s| Strategy::parse(s.trim()).ok_or_else(|| CliError::new(EXIT_USAGE, format!("unknown strategy `{s}`"))))
            .collect::<CliResult<_>>()?
    };
    let net = load_model(&a.model)?;
    let image = pgm::read(&a.image).map_err(|e| CliError::new(EXIT_FAILURE, format!("{}: {e}", a.image.display())))?;
    let report = bench(&image.cast::<f32>(), &net, &strategies, a.runs)?;
    out.write_all(report.to_csv().as_bytes())?;
    eprintln!("fragment sparsity {:.4}", report.sparsity);
    Ok(())
}

fn cmd_verify(a: &VerifyArgs, out: &mut dyn Write) -> CliResult<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let fault = a.inject_fault.then_some(Fault::ShiftFirstFragment);
    let mut ok = true;
    writeln!(out, "check,case,value,pass")?;
    for &(w, h) in &a.sizes {
        let net = Network::<f64>::random(&NetworkSpec::table1(Padding::Valid), &mut rng)?;
        let image = Tensor::from_fn(h, w, 1, |_, _, _| rng.random_range(0.0..1.0));
        let r = equivalence_report_with(&image, &net, fault)?;
        let pass = r.max_abs_diff <= EQUIVALENCE_TOLERANCE && r.is_bijective();
        ok &= pass;
        writeln!(out, "equivalence,{w}x{h},{:e},{pass}", r.max_abs_diff)?;
    }
    for padding in [Padding::Same, Padding::Valid] {
        let spec = NetworkSpec::table1(padding);
        let mut net = Network::<f64>::random(&spec, &mut rng)?;
        for (_, _, b) in params_mut(&mut net) {
            for v in b.iter_mut() {
                *v = rng.random_range(-0.1..0.1);
            }
        }
        let xs: Vec<Tensor<f64>> = (0..3)
            .map(|_| Tensor::from_fn(spec.window_side, spec.window_side, 1, |_, _, _| rng.random_range(0.0..1.0)))
            .collect();
        let batch: Vec<_> = xs.iter().enumerate().map(|(i, x)| (x, i % 2)).collect();
        let r = gradient_check(&net, &batch, 70, 1e-4, &mut rng)?;
        let pass = r.max_rel_error <= GRADIENT_TOLERANCE;
        ok &= pass;
        let name = if padding == Padding::Same { "same" } else { "valid" };
        writeln!(out, "gradient,{name}:{},{:e},{pass}", r.checked, r.max_rel_error)?;
    }
    if ok {
        Ok(())
    } else {
        Err(CliError::new(EXIT_FAILURE, "verification failed"))
    }
}
