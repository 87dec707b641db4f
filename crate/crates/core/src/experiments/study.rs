//! The four repeated-realization studies and their CSV/JSON output.

use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{OdinError, Result};
use crate::experiments::data::{generate_canonical, NoiseSpec};
use crate::experiments::metrics::{state_rmse, trajectory_rmse, RmseConvention, Summary, TrajectoryRmse};
use crate::ode_models::{lookup, OdeSystem};
use crate::odin::{fit, gp_baseline, OdinConfig};

/// Settings shared by every study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyOptions {
    pub reps: usize,
    /// Realization `i` uses seed `master_seed + i` for both the noise and the fit.
    pub master_seed: u64,
    pub config: OdinConfig,
    pub rmse: RmseConvention,
    /// Write measured wall-clock times; when false the column is zero so
    /// that repeated runs produce identical files.
    pub timing: bool,
}

impl Default for StudyOptions {
    fn default() -> Self {
        Self {
            reps: 20,
            master_seed: 0,
            config: OdinConfig::default(),
            rmse: RmseConvention::Literal,
            timing: true,
        }
    }
}

impl StudyOptions {
    pub fn seed(&self, rep: usize) -> u64 {
        self.master_seed.wrapping_add(rep as u64)
    }

    fn config_for(&self, rep: usize) -> OdinConfig {
        OdinConfig {
            seed: self.seed(rep),
            ..self.config.clone()
        }
    }
}

/// One fitted noise realization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub system: String,
    pub noise: NoiseSpec,
    pub seed: u64,
    pub trmse: TrajectoryRmse,
    pub state_rmse_odin: f64,
    pub state_rmse_gpr: f64,
    pub gamma: Vec<f64>,
    pub theta: Vec<f64>,
    pub runtime_seconds: f64,
    /// Why the fit produced no estimate, if it failed.
    pub error: Option<String>,
}

impl ExperimentRecord {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

/// Simulate, fit and score one realization. Failures become sentinel records.
pub fn run_realization(system: &Arc<dyn OdeSystem>, noise: &NoiseSpec, rep: usize, opts: &StudyOptions) -> Result<ExperimentRecord> {
    run_realization_with(system, system, noise, rep, opts)
}

/// As [`run_realization`] with data from `truth_system` and the fit done with `model`.
fn run_realization_with(
    truth_system: &Arc<dyn OdeSystem>,
    model: &Arc<dyn OdeSystem>,
    noise: &NoiseSpec,
    rep: usize,
    opts: &StudyOptions,
) -> Result<ExperimentRecord> {
    let seed = opts.seed(rep);
    let data = generate_canonical(truth_system.as_ref(), noise, seed)?;
    let truth = data.truth.clone().expect("simulated data carry their truth");
    let config = opts.config_for(rep);
    let started = Instant::now();
    let outcome = fit(&data, model.clone(), &config);
    let elapsed = started.elapsed().as_secs_f64();
    let runtime_seconds = if opts.timing { elapsed } else { 0.0 };
    let k = model.dim();
    let p = model.n_params();
    Ok(match outcome {
        Ok(r) => {
            let trmse = trajectory_rmse(&r.theta, model.as_ref(), &truth.states, &truth.x0, &data.t, opts.rmse);
            ExperimentRecord {
                system: model.name(),
                noise: *noise,
                seed,
                trmse,
                state_rmse_odin: state_rmse(&r.states, &truth.states),
                state_rmse_gpr: state_rmse(&r.gp_mean, &truth.states),
                gamma: r.gamma,
                theta: r.theta,
                runtime_seconds,
                error: None,
            }
        }
        Err(e) => {
            let gpr = gp_baseline(&data, &config)
                .map(|m| state_rmse(&m, &truth.states))
                .unwrap_or(f64::INFINITY);
            ExperimentRecord {
                system: model.name(),
                noise: *noise,
                seed,
                trmse: TrajectoryRmse {
                    total: f64::INFINITY,
                    per_state: vec![f64::INFINITY; k],
                    failed: true,
                },
                state_rmse_odin: f64::INFINITY,
                state_rmse_gpr: gpr,
                gamma: vec![f64::NAN; k],
                theta: vec![f64::NAN; p],
                runtime_seconds,
                error: Some(e.to_string()),
            }
        }
    })
}

fn run_all(
    truth_system: &Arc<dyn OdeSystem>,
    model: &Arc<dyn OdeSystem>,
    noise: &NoiseSpec,
    opts: &StudyOptions,
) -> Result<Vec<ExperimentRecord>> {
    if opts.reps == 0 {
        return Err(OdinError::Input("at least one repetition is required".into()));
    }
    (0..opts.reps)
        .into_par_iter()
        .map(|rep| run_realization_with(truth_system, model, noise, rep, opts))
        .collect()
}

/// Summary of a parameter-inference or state-inference study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub system: String,
    pub noise: NoiseSpec,
    pub reps: usize,
    pub failures: usize,
    pub trmse_total: Summary,
    pub trmse_per_state: Vec<Summary>,
    pub state_rmse_odin: Summary,
    pub state_rmse_gpr: Summary,
    pub runtime_seconds: Summary,
}

impl StudySummary {
    pub fn of(records: &[ExperimentRecord]) -> Result<Self> {
        let first = records
            .first()
            .ok_or_else(|| OdinError::Input("no records to summarize".into()))?;
        let k = first.trmse.per_state.len();
        let col = |f: &dyn Fn(&ExperimentRecord) -> f64| Summary::of(&records.iter().map(f).collect::<Vec<_>>());
        Ok(Self {
            system: first.system.clone(),
            noise: first.noise,
            reps: records.len(),
            failures: records.iter().filter(|r| r.failed()).count(),
            trmse_total: col(&|r| r.trmse.total),
            trmse_per_state: (0..k).map(|j| col(&|r| r.trmse.per_state[j])).collect(),
            state_rmse_odin: col(&|r| r.state_rmse_odin),
            state_rmse_gpr: col(&|r| r.state_rmse_gpr),
            runtime_seconds: col(&|r| r.runtime_seconds),
        })
    }
}

pub struct Study {
    pub records: Vec<ExperimentRecord>,
    pub summary: StudySummary,
}

/// Parameter inference: fixed truth, fresh noise per realization, scored by tRMSE.
pub fn run_parameter_inference(system: Arc<dyn OdeSystem>, noise: NoiseSpec, opts: &StudyOptions) -> Result<Study> {
    let records = run_all(&system, &system, &noise, opts)?;
    let summary = StudySummary::of(&records)?;
    Ok(Study { records, summary })
}

/// State inference: ODIN states against plain GP regression.
pub fn run_state_inference(system: Arc<dyn OdeSystem>, noise: NoiseSpec, opts: &StudyOptions) -> Result<Study> {
    run_parameter_inference(system, noise, opts)
}

/// Candidate models in the order they are reported.
pub const MODEL_SELECTION_CANDIDATES: [&str; 4] = ["lv-m11", "lv-m01", "lv-m10", "lv-m00"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaSummary {
    pub model: String,
    /// One entry per state.
    pub gamma: Vec<Summary>,
}

pub struct ModelSelection {
    pub records: Vec<ExperimentRecord>,
    pub summary: Vec<GammaSummary>,
}

/// Fit every Lotka-Volterra candidate to the same realizations of the true system.
pub fn run_model_selection(noise: NoiseSpec, opts: &StudyOptions) -> Result<ModelSelection> {
    let truth = lookup("lv")?;
    let mut records = Vec::new();
    let mut summary = Vec::new();
    for name in MODEL_SELECTION_CANDIDATES {
        let model = lookup(name)?;
        let recs = run_all(&truth, &model, &noise, opts)?;
        summary.push(GammaSummary {
            model: name.to_string(),
            gamma: (0..model.dim())
                .map(|j| Summary::of(&recs.iter().map(|r| r.gamma[j]).collect::<Vec<_>>()))
                .collect(),
        });
        records.extend(recs);
    }
    Ok(ModelSelection { records, summary })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub dim: usize,
    pub runtimes: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Ordinary least squares `y ≈ slope x + intercept`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> LinearFit {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - slope * a - intercept).powi(2)).sum();
    LinearFit {
        slope,
        intercept,
        r_squared: if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub rows: Vec<ScalingRow>,
    pub fit: LinearFit,
    pub records: Vec<ExperimentRecord>,
}

/// Iteration budget used by [`scaling_options`].
pub const SCALING_MAX_ITERATIONS: usize = 2000;

/// Study options for the scaling benchmark: a fixed optimizer iteration budget.
pub fn scaling_options(reps: usize, master_seed: u64) -> StudyOptions {
    let mut config = OdinConfig::default();
    config.optimizer.max_iterations = SCALING_MAX_ITERATIONS;
    StudyOptions {
        reps,
        master_seed,
        config,
        ..StudyOptions::default()
    }
}

/// Lorenz '96 runtime against state dimension. Realizations run one at a
/// time so that the timings do not interfere.
pub fn run_scaling(dims: &[usize], noise: NoiseSpec, opts: &StudyOptions) -> Result<Scaling> {
    if dims.len() < 2 {
        return Err(OdinError::Input("scaling needs at least two dimensions".into()));
    }
    if opts.reps == 0 {
        return Err(OdinError::Input("at least one repetition is required".into()));
    }
    let timed = StudyOptions {
        timing: true,
        ..opts.clone()
    };
    let mut rows = Vec::new();
    let mut records = Vec::new();
    for &dim in dims {
        let system = lookup(&format!("lorenz96-{dim}"))?;
        let recs = (0..opts.reps)
            .map(|rep| run_realization(&system, &noise, rep, &timed))
            .collect::<Result<Vec<_>>>()?;
        let runtimes: Vec<f64> = recs.iter().map(|r| r.runtime_seconds).collect();
        let s = Summary::of(&runtimes);
        rows.push(ScalingRow {
            dim,
            runtimes,
            mean: s.mean,
            std: s.std,
        });
        records.extend(recs);
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.dim as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.mean).collect();
    let fit = linear_fit(&xs, &ys);
    Ok(Scaling { rows, fit, records })
}

fn fmt(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{v}")
    }
}

/// Write records with one header sized to the widest record.
pub fn write_records<W: Write>(records: &[ExperimentRecord], w: W) -> Result<()> {
    let k = records.iter().map(|r| r.gamma.len()).max().unwrap_or(0);
    let p = records.iter().map(|r| r.theta.len()).max().unwrap_or(0);
    let mut out = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
    let mut header: Vec<String> = ["system", "noise_mode", "noise_value", "seed", "trmse_total"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((1..=k).map(|j| format!("trmse_s{j}")));
    header.push("state_rmse_odin".into());
    header.push("state_rmse_gpr".into());
    header.extend((1..=k).map(|j| format!("gamma_{j}")));
    header.extend((1..=p).map(|j| format!("theta_{j}")));
    header.push("runtime_seconds".into());
    out.write_record(&header).map_err(csv_err)?;
    for r in records {
        let pad = |v: &[f64], len: usize| (0..len).map(|i| v.get(i).map(|x| fmt(*x)).unwrap_or_default()).collect::<Vec<_>>();
        let mut row = vec![
            r.system.clone(),
            r.noise.mode().to_string(),
            fmt(r.noise.value()),
            r.seed.to_string(),
            fmt(r.trmse.total),
        ];
        row.extend(pad(&r.trmse.per_state, k));
        row.push(fmt(r.state_rmse_odin));
        row.push(fmt(r.state_rmse_gpr));
        row.extend(pad(&r.gamma, k));
        row.extend(pad(&r.theta, p));
        row.push(fmt(r.runtime_seconds));
        out.write_record(&row).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> OdinError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => OdinError::Io(io),
        other => OdinError::Format(format!("{other:?}")),
    }
}

/// Everything needed to reproduce a study's result files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub system: String,
    pub noise: Option<NoiseSpec>,
    pub reps: usize,
    pub master_seed: u64,
    pub config: OdinConfig,
    /// SHA-256 of the JSON serialization of `config`.
    pub config_hash: String,
    pub rmse: RmseConvention,
    pub snr_convention: String,
    pub seeding: String,
    pub timing: bool,
    pub version: String,
}

pub const SNR_CONVENTION: &str = "sigma_k = population std over the grid of true state k / sqrt(SNR)";

impl RunManifest {
    pub fn new(command: &str, system: &str, noise: Option<NoiseSpec>, opts: &StudyOptions) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            system: system.to_string(),
            noise,
            reps: opts.reps,
            master_seed: opts.master_seed,
            config: opts.config.clone(),
            config_hash: config_hash(&opts.config)?,
            rmse: opts.rmse,
            snr_convention: SNR_CONVENTION.to_string(),
            seeding: "realization i uses seed master_seed + i".to_string(),
            timing: opts.timing,
            version: env!("CARGO_PKG_VERSION").to_string(),
        })
    }
}

pub fn config_hash(config: &OdinConfig) -> Result<String> {
    let bytes = serde_json::to_vec(config).map_err(|e| OdinError::Format(e.to_string()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(reps: usize) -> StudyOptions {
        StudyOptions {
            reps,
            master_seed: 40,
            timing: false,
            ..StudyOptions::default()
        }
    }

    #[test]
    fn two_reps_two_seeds() {
        let s = run_parameter_inference(lookup("lv").unwrap(), NoiseSpec::Absolute(0.1), &quick(2)).unwrap();
        assert_eq!(s.records.len(), 2);
        assert_eq!(s.records[0].seed, 40);
        assert_eq!(s.records[1].seed, 41);
        assert_eq!(s.summary.trmse_total.count, 2);
    }

    #[test]
    fn csv_schema() {
        let s = run_parameter_inference(lookup("lv").unwrap(), NoiseSpec::Absolute(0.1), &quick(2)).unwrap();
        let mut buf = Vec::new();
        write_records(&s.records, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "system,noise_mode,noise_value,seed,trmse_total,trmse_s1,trmse_s2,state_rmse_odin,state_rmse_gpr,\
             gamma_1,gamma_2,theta_1,theta_2,theta_3,theta_4,runtime_seconds"
        );
        let rows: Vec<_> = lines.collect();
        assert_eq!(rows.len(), 2);
        assert!(rows[0].starts_with("lv,absolute-sigma,0.1,40,"));
        assert!(rows[0].ends_with(",0"));
        assert!(!text.contains('\r'));
    }

    #[test]
    fn identical_runs_identical_bytes() {
        let bytes = || {
            let s = run_parameter_inference(lookup("lv").unwrap(), NoiseSpec::Absolute(0.1), &quick(2)).unwrap();
            let mut buf = Vec::new();
            write_records(&s.records, &mut buf).unwrap();
            buf
        };
        assert_eq!(bytes(), bytes());
    }

    #[test]
    fn zero_noise_states_are_accurate() {
        let s = run_state_inference(lookup("lv").unwrap(), NoiseSpec::Absolute(0.0), &quick(1)).unwrap();
        assert!(s.records[0].state_rmse_gpr < 1e-3, "{}", s.records[0].state_rmse_gpr);
        assert!(s.records[0].state_rmse_odin < 1e-3, "{}", s.records[0].state_rmse_odin);
    }

    #[test]
    fn linear_fit_exact_line() {
        let f = linear_fit(&[1.0, 2.0, 4.0], &[3.0, 5.0, 9.0]);
        assert!((f.slope - 2.0).abs() < 1e-12);
        assert!((f.intercept - 1.0).abs() < 1e-12);
        assert!((f.r_squared - 1.0).abs() < 1e-12);
    }

    #[test]
    fn config_hash_tracks_config() {
        let a = config_hash(&OdinConfig::default()).unwrap();
        let b = config_hash(&OdinConfig { seed: 1, ..Default::default() }).unwrap();
        assert_eq!(a.len(), 64);
        assert_ne!(a, b);
    }

    #[test]
    fn zero_reps_rejected() {
        assert!(run_parameter_inference(lookup("lv").unwrap(), NoiseSpec::Absolute(0.1), &quick(0)).is_err());
    }
}
