//! Batch front-end for surrogate discovery.
//!
//! Exit codes: 0 success or NotInvalid, 2 configuration or input error,
//! 3 numerical failure, 4 no valid model, 5 incompatible artifact.

mod config;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use opal_surrogate::data::{parse_query_csv, Dataset};
use opal_surrogate::laplace::PredictMode;
use opal_surrogate::opal::{run_opal, run_probe, validate_slices, AuditTrail, OpalOutcome, Surrogate, Verdict};
use opal_surrogate::{OpalError, Result};
use serde::Serialize;

use config::RunConfig;
use output::{sha256_hex, OutDir};

/// Two-sided 95% normal quantile.
const Z95: f64 = 1.959_963_984_540_054;

#[derive(Parser)]
#[command(name = "opal", version, about = "Bayesian surrogate discovery by evidence and leave-out validation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Run configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured top-level seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Threads for parallel fits.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory; overrides the configured one.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit single-layer models over the probe widths and report the width cap.
    Probe,
    /// Run the full discovery loop.
    Discover,
    /// Validate a stored model against the configured data.
    Validate {
        #[arg(long)]
        model: PathBuf,
        /// Audit trail whose recorded validation seed is reused.
        #[arg(long)]
        trail: Option<PathBuf>,
        /// Category whose trail entry to replay; defaults to the accepted one.
        #[arg(long)]
        category: Option<usize>,
    },
    /// Predict at the inputs of a query CSV.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        query: PathBuf,
    },
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    error: &'a str,
    message: String,
    exit_code: u8,
}

fn error_kind(e: &OpalError) -> (&'static str, u8) {
    match e {
        OpalError::Shape(_) => ("shape", 2),
        OpalError::Argument(_) => ("argument", 2),
        OpalError::Config(_) => ("config", 2),
        OpalError::Coverage(_) => ("coverage", 2),
        OpalError::Parse { .. } => ("parse", 2),
        OpalError::Io(_) => ("io", 2),
        OpalError::Serde(_) => ("serde", 2),
        OpalError::TooLarge { .. } => ("too_large", 2),
        OpalError::Version { .. } => ("version", 5),
        OpalError::Divergence { .. } => ("divergence", 3),
        OpalError::Numerical(_) => ("numerical", 3),
        OpalError::Eigen { .. } => ("eigen", 3),
        OpalError::DegenerateEvidence(_) => ("degenerate_evidence", 3),
        OpalError::DegenerateSet(_) => ("degenerate_set", 3),
        OpalError::State(_) => ("state", 3),
        OpalError::CategoryFailed { .. } => ("category_failed", 3),
        OpalError::MetricUndefined(_) => ("metric_undefined", 3),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            let (kind, code) = error_kind(&e);
            let report = ErrorReport {
                error: kind,
                message: e.to_string(),
                exit_code: code,
            };
            eprintln!("{}", serde_json::to_string(&report).unwrap_or_else(|_| e.to_string()));
            ExitCode::from(code)
        }
    }
}

fn run(cli: &Cli) -> Result<u8> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(OpalError::Config("--workers must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| OpalError::Config(e.to_string()))?;
    }
    match &cli.command {
        Command::Probe => cmd_probe(cli),
        Command::Discover => cmd_discover(cli),
        Command::Validate { model, trail, category } => cmd_validate(cli, model, trail.as_deref(), *category),
        Command::Predict { model, query } => cmd_predict(cli, model, query),
    }
}

/// A loaded config with its effective form and hash.
struct Loaded {
    cfg: RunConfig,
    hash: String,
    out: OutDir,
}

fn load(cli: &Cli) -> Result<Loaded> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| OpalError::Config("--config is required".into()))?;
    let cfg = RunConfig::load(path)?.with_seed(cli.seed);
    let root = cli
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| OpalError::Config("no output directory: pass --out or set \"out\"".into()))?;
    let mut out = OutDir::create(&root)?;
    // the effective config, so the run can be repeated from this file alone
    let mut effective = cfg.clone();
    effective.out = None;
    let mut text = serde_json::to_string_pretty(&effective)?;
    text.push('\n');
    let hash = sha256_hex(text.as_bytes());
    out.write("config.json", text)?;
    Ok(Loaded { cfg, hash, out })
}

fn out_dir_only(cli: &Cli) -> Result<OutDir> {
    let root = cli
        .out
        .clone()
        .ok_or_else(|| OpalError::Config("--out is required".into()))?;
    OutDir::create(&root)
}

fn cmd_probe(cli: &Cli) -> Result<u8> {
    let Loaded { cfg, hash, mut out } = load(cli)?;
    let data = cfg.training_data()?;
    let pretrain = cfg.pretraining_data()?;
    let probe = run_probe(&data, pretrain.as_ref(), &cfg.opal)?;
    out.write("probe.csv", probe.to_csv())?;
    out.write_json("probe.json", &probe)?;
    out.finish("probe", Some(cfg.seed), Some(&hash))?;
    println!("peak_width {}", probe.peak_width);
    println!("width_cap {}", probe.width_cap);
    Ok(0)
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Predictive mean and 95% interval along each input, other inputs at their data mean.
fn predictive_curves(model: &Surrogate, data: &Dataset<f64>, points: usize) -> Result<Vec<(String, String)>> {
    let d_in = data.input_dim();
    let n = data.len() as f64;
    let column = |c: usize| (0..data.len()).map(move |i| data.input(i)[c]);
    let means: Vec<f64> = (0..d_in).map(|c| column(c).sum::<f64>() / n).collect();
    let mut files = Vec::with_capacity(d_in);
    for c in 0..d_in {
        let lo = column(c).fold(f64::INFINITY, f64::min);
        let hi = column(c).fold(f64::NEG_INFINITY, f64::max);
        let mut text = data.input_names[c].clone();
        for o in &data.output_names {
            text.push_str(&format!(",{o}_mean,{o}_ci_low,{o}_ci_high"));
        }
        text.push('\n');
        for k in 0..points {
            let v = lo + (hi - lo) * k as f64 / (points - 1) as f64;
            let mut x = means.clone();
            x[c] = v;
            let p = model.predict(&x, PredictMode::Linearized)?;
            text.push_str(&v.to_string());
            for (m, var) in p.mean.iter().zip(&p.variance) {
                let h = Z95 * var.sqrt();
                text.push_str(&format!(",{m},{},{}", m - h, m + h));
            }
            text.push('\n');
        }
        files.push((format!("predictive_{}.csv", file_stem(&data.input_names[c])), text));
    }
    Ok(files)
}

fn cmd_discover(cli: &Cli) -> Result<u8> {
    let Loaded { cfg, hash, mut out } = load(cli)?;
    let data = cfg.training_data()?;
    let pretrain = cfg.pretraining_data()?;
    let run = run_opal(&data, pretrain.as_ref(), &cfg.opal)?;
    out.write_json("trail.json", &run.trail)?;
    for cat in &run.trail.categories {
        if let Some(trace) = &cat.sparsify {
            out.write(&format!("sparsify_category_{}.csv", cat.category.index), trace.to_csv())?;
        }
    }
    if let Some(model) = &run.best {
        out.write("model.json", model.to_json()?)?;
        for (name, text) in predictive_curves(model, &data, cfg.plot.grid_points)? {
            out.write(&name, text)?;
        }
    }
    out.finish("discover", Some(cfg.seed), Some(&hash))?;
    for cat in &run.trail.categories {
        let label = cat.plausible.as_ref().map_or("-", |p| p.label.as_str());
        let verdict = cat.verdict.map_or("failed".to_string(), |v| format!("{v:?}"));
        let accepted = if run.trail.best_category == Some(cat.category.index) { " (best)" } else { "" };
        println!("category {}: {label} {verdict}{accepted}", cat.category.index);
    }
    match run.trail.outcome {
        OpalOutcome::NotInvalid => Ok(0),
        OpalOutcome::AllInvalid => {
            println!("{}", run.trail.directive.as_deref().unwrap_or_default());
            Ok(4)
        }
    }
}

fn cmd_validate(cli: &Cli, model_path: &Path, trail: Option<&Path>, category: Option<usize>) -> Result<u8> {
    let Loaded { cfg, hash, mut out } = load(cli)?;
    let model_text = std::fs::read_to_string(model_path)?;
    let model = Surrogate::from_json(&model_text)?;
    out.record_input("model", model_text.as_bytes());
    let data = cfg.training_data()?;
    let mut vcfg = cfg.opal.validation.clone();
    vcfg.seed = match trail {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            out.record_input("trail", text.as_bytes());
            let trail: AuditTrail = serde_json::from_str(&text)?;
            let l = category
                .or(trail.best_category)
                .ok_or_else(|| OpalError::Config("trail has no accepted category; pass --category".into()))?;
            trail
                .categories
                .iter()
                .find(|c| c.category.index == l)
                .and_then(|c| c.validation.as_ref())
                .map(|v| v.seed)
                .ok_or_else(|| OpalError::Config(format!("trail has no validation record for category {l}")))?
        }
        None => opal_surrogate::opal::validation_seed(&cfg.opal, category.unwrap_or(0)),
    };
    let report = validate_slices(&model, &data, &vcfg, &cfg.opal.discover.fit, model.prior_mean.as_deref())?;
    out.write_json("validation.json", &report)?;
    out.finish("validate", Some(cfg.seed), Some(&hash))?;
    for s in &report.slices {
        println!(
            "slice {}: d_dkl {} d_cdf {} pass {}",
            s.index, s.d_dkl, s.d_cdf, s.pass
        );
    }
    println!("verdict {:?}", report.verdict);
    Ok(match report.verdict {
        Verdict::NotInvalid => 0,
        Verdict::Invalid => 4,
    })
}

fn cmd_predict(cli: &Cli, model_path: &Path, query: &Path) -> Result<u8> {
    let mut out = out_dir_only(cli)?;
    let model_text = std::fs::read_to_string(model_path)?;
    let model = Surrogate::from_json(&model_text)?;
    if model.input_names.is_empty() {
        return Err(OpalError::Config("model artifact carries no input column names".into()));
    }
    let query_text = std::fs::read_to_string(query)?;
    let rows = parse_query_csv(&query_text, &model.input_names)?;
    out.record_input("model", model_text.as_bytes());
    out.record_input("query", query_text.as_bytes());

    let single = model.output_names.len() == 1;
    let mut text = model.input_names.join(",");
    for o in &model.output_names {
        for field in ["mean", "variance", "ci_low", "ci_high"] {
            text.push(',');
            if !single {
                text.push_str(&format!("{o}_"));
            }
            text.push_str(field);
        }
    }
    text.push('\n');
    for x in &rows {
        let p = model.predict(x, PredictMode::Linearized)?;
        let cells: Vec<String> = x.iter().map(f64::to_string).collect();
        text.push_str(&cells.join(","));
        for (m, var) in p.mean.iter().zip(&p.variance) {
            let h = Z95 * var.sqrt();
            text.push_str(&format!(",{m},{var},{},{}", m - h, m + h));
        }
        text.push('\n');
    }
    out.write("predictions.csv", text)?;
    out.finish("predict", None, None)?;
    println!("{} predictions", rows.len());
    Ok(0)
}
