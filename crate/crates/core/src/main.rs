use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use odin::experiments::data::{generate_canonical, NoiseSpec};
use odin::experiments::metrics::RmseConvention;
use odin::experiments::study::{
    config_hash, run_model_selection, run_parameter_inference, run_scaling, run_state_inference, scaling_options,
    write_records, LinearFit, RunManifest, ScalingRow, Study, StudyOptions,
};
use odin::{fit, lookup, OdeSystem, OdinConfig, OdinError, Result, TimeSeriesDataset};

#[derive(Parser)]
#[command(name = "odin", version, about = "ODE-informed regression for parametric ODE systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate noisy observations of a benchmark system.
    Simulate {
        #[arg(long)]
        system: String,
        #[command(flatten)]
        noise: NoiseArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a system to a dataset CSV and write the estimate as JSON.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        system: String,
        /// JSON fit configuration; missing fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the seed in the configuration.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Repeated parameter inference scored by trajectory RMSE.
    InferParams {
        #[arg(long)]
        system: String,
        #[command(flatten)]
        noise: NoiseArgs,
        #[command(flatten)]
        study: StudyArgs,
    },
    /// Fit the four Lotka-Volterra candidates and summarize their γ.
    ModelSelect {
        #[arg(long, default_value_t = 0.1)]
        noise_std: f64,
        #[command(flatten)]
        study: StudyArgs,
    },
    /// Lorenz '96 runtime against state dimension.
    Scaling {
        #[arg(long, value_delimiter = ',', default_value = "25,50,100,200")]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 0.5)]
        noise_std: f64,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Repeated state inference, ODIN against GP regression.
    StateInfer {
        #[arg(long)]
        system: String,
        #[command(flatten)]
        noise: NoiseArgs,
        #[command(flatten)]
        study: StudyArgs,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct NoiseArgs {
    /// Absolute noise standard deviation for every state.
    #[arg(long)]
    noise_std: Option<f64>,
    /// Signal-to-noise ratio per state.
    #[arg(long)]
    snr: Option<f64>,
}

impl NoiseArgs {
    fn spec(&self) -> NoiseSpec {
        match (self.noise_std, self.snr) {
            (Some(s), _) => NoiseSpec::Absolute(s),
            (None, Some(v)) => NoiseSpec::Snr(v),
            (None, None) => unreachable!("clap requires one noise argument"),
        }
    }
}

#[derive(Args)]
struct StudyArgs {
    #[arg(long, default_value_t = 20)]
    reps: usize,
    /// Master seed; realization i uses seed + i.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Divide the trajectory error norm by sqrt(N) instead of N.
    #[arg(long)]
    conventional_rmse: bool,
    /// Write zero run times so repeated runs give identical files.
    #[arg(long)]
    no_timing: bool,
    #[arg(long)]
    out: PathBuf,
}

impl StudyArgs {
    fn options(&self) -> Result<StudyOptions> {
        Ok(StudyOptions {
            reps: self.reps,
            master_seed: self.seed,
            config: load_config(self.config.as_deref())?,
            rmse: if self.conventional_rmse {
                RmseConvention::Conventional
            } else {
                RmseConvention::Literal
            },
            timing: !self.no_timing,
        })
    }
}

fn load_config(path: Option<&Path>) -> Result<OdinConfig> {
    match path {
        None => Ok(OdinConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            serde_json::from_str(&text).map_err(|e| OdinError::Input(format!("{}: {e}", p.display())))
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| OdinError::Format(e.to_string()))?;
    std::io::Write::write_all(&mut w, b"\n")?;
    Ok(())
}

/// Sibling path `<out>.summary.json`.
fn summary_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".summary.json");
    PathBuf::from(s)
}

#[derive(Serialize)]
struct Hyperparams {
    amplitude: f64,
    lengthscale: f64,
    sigma: f64,
}

#[derive(Serialize)]
struct FitManifest {
    command: &'static str,
    system: String,
    data: String,
    config: OdinConfig,
    config_hash: String,
    version: &'static str,
}

#[derive(Serialize)]
struct FitOutput {
    theta: Vec<f64>,
    gamma: Vec<f64>,
    states: Vec<Vec<f64>>,
    hyperparams: Vec<Hyperparams>,
    risk: f64,
    seed: u64,
    runtime_seconds: f64,
    manifest: FitManifest,
}

#[derive(Serialize)]
struct StudyOutput<S: Serialize> {
    manifest: RunManifest,
    summary: S,
}

fn repeated_study(
    command: &str,
    system: &str,
    spec: NoiseSpec,
    args: &StudyArgs,
    runner: fn(Arc<dyn OdeSystem>, NoiseSpec, &StudyOptions) -> Result<Study>,
) -> Result<()> {
    let sys = lookup(system)?;
    let opts = args.options()?;
    let s = runner(sys.clone(), spec, &opts)?;
    write_records(&s.records, create(&args.out)?)?;
    let manifest = RunManifest::new(command, &sys.name(), Some(spec), &opts)?;
    write_json(&summary_path(&args.out), &StudyOutput { manifest, summary: &s.summary })?;
    let t = &s.summary.trmse_total;
    println!(
        "{} reps ({} failed): tRMSE median {:.4e} [{:.4e}, {:.4e}]",
        s.summary.reps, s.summary.failures, t.median, t.q25, t.q75
    );
    println!(
        "state RMSE median: ODIN {:.4e}, GPR {:.4e}",
        s.summary.state_rmse_odin.median, s.summary.state_rmse_gpr.median
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { system, noise, seed, out } => {
            let sys = lookup(&system)?;
            let data = generate_canonical(sys.as_ref(), &noise.spec(), seed)?;
            data.save_csv(&out)?;
            println!("wrote {} observations of {} states to {}", data.n_times(), data.n_states(), out.display());
        }
        Command::Fit { data, system, config, seed, out } => {
            let sys = lookup(&system)?;
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let dataset = TimeSeriesDataset::load_csv(&data)?;
            let r = fit(&dataset, sys.clone(), &cfg)?;
            let output = FitOutput {
                theta: r.theta.clone(),
                gamma: r.gamma.clone(),
                states: r.states.row_iter().map(|row| row.iter().copied().collect()).collect(),
                hyperparams: r
                    .hyperparams
                    .iter()
                    .map(|h| Hyperparams {
                        amplitude: h.amplitude,
                        lengthscale: h.lengthscale,
                        sigma: h.noise_sigma,
                    })
                    .collect(),
                risk: r.risk,
                seed: r.seed,
                runtime_seconds: r.runtime_seconds,
                manifest: FitManifest {
                    command: "fit",
                    system: sys.name(),
                    data: data.display().to_string(),
                    config_hash: config_hash(&cfg)?,
                    config: cfg,
                    version: env!("CARGO_PKG_VERSION"),
                },
            };
            write_json(&out, &output)?;
            println!("theta = {:?}", r.theta);
            println!("gamma = {:?}", r.gamma);
        }
        Command::InferParams { system, noise, study } => {
            repeated_study("infer-params", &system, noise.spec(), &study, run_parameter_inference)?;
        }
        Command::StateInfer { system, noise, study } => {
            repeated_study("state-infer", &system, noise.spec(), &study, run_state_inference)?;
        }
        Command::ModelSelect { noise_std, study } => {
            let opts = study.options()?;
            let spec = NoiseSpec::Absolute(noise_std);
            let ms = run_model_selection(spec, &opts)?;
            write_records(&ms.records, create(&study.out)?)?;
            let manifest = RunManifest::new("model-select", "lv", Some(spec), &opts)?;
            write_json(&summary_path(&study.out), &StudyOutput { manifest, summary: &ms.summary })?;
            for g in &ms.summary {
                let cells: Vec<String> = g.gamma.iter().map(|s| format!("{:.3e} ± {:.2e}", s.median, s.std)).collect();
                println!("{}: {}", g.model, cells.join("   "));
            }
        }
        Command::Scaling { dims, noise_std, reps, seed, config, out } => {
            let mut opts = scaling_options(reps, seed);
            if config.is_some() {
                opts.config = load_config(config.as_deref())?;
            }
            let spec = NoiseSpec::Absolute(noise_std);
            let s = run_scaling(&dims, spec, &opts)?;
            let mut w = csv::WriterBuilder::new()
                .terminator(csv::Terminator::Any(b'\n'))
                .from_writer(create(&out)?);
            let io = |e: csv::Error| OdinError::Format(e.to_string());
            w.write_record(["dim", "rep", "seed", "runtime_seconds"]).map_err(io)?;
            for row in &s.rows {
                for (rep, t) in row.runtimes.iter().enumerate() {
                    w.write_record([row.dim.to_string(), rep.to_string(), opts.seed(rep).to_string(), t.to_string()])
                        .map_err(io)?;
                }
            }
            w.flush()?;
            let manifest = RunManifest::new("scaling", "lorenz96", Some(spec), &opts)?;
            #[derive(Serialize)]
            struct ScalingSummary<'a> {
                rows: &'a [ScalingRow],
                fit: &'a LinearFit,
            }
            write_json(
                &summary_path(&out),
                &StudyOutput { manifest, summary: ScalingSummary { rows: &s.rows, fit: &s.fit } },
            )?;
            for row in &s.rows {
                println!("K = {:4}: {:.3} ± {:.3} s", row.dim, row.mean, row.std);
            }
            println!(
                "runtime ≈ {:.4} K + {:.4} s, R² = {:.4}",
                s.fit.slope, s.fit.intercept, s.fit.r_squared
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
