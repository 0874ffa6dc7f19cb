//! The two-iteration reconstruction pipeline.
//!
//! Stage order: load (or simulate) the measured table, resample it onto
//! the common rate, cut the landing window, run a first smoother pass
//! with the constant diagonal noise model, estimate the time-varying
//! noise schedule from its residuals, rerun the smoother once per
//! correlation limit, score every run with the SQM, select the run
//! whose SQM is closest to 1, and emit diagnostics for the selected
//! run. A failed second-iteration run is recorded with its reason and
//! the pipeline continues; a failed first iteration aborts, since there
//! is nothing to estimate the schedule from.
//!
//! Every run directory contains the smoothed trajectory, the applied
//! noise schedule, and the per-step innovations with their theoretical
//! variances, which is enough to re-derive the run's SQM offline.
//! Outputs are a pure function of the inputs, the configuration, and
//! the seed; file contents are byte-identical across reruns.

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{
    default_pairs, dependence_summary, kde_1d, standardize, StandardizedResiduals,
};
use crate::error::{Error, Result};
use crate::flight::{
    self, default_noise, state, FlightModel, NoiseConfig, RunwayGeometry, OUTPUT_NAMES,
    OUTPUT_UNITS,
};
use crate::noise::{
    apply_correlation_limit, estimate_covariance, schedule_from_csv, schedule_to_csv,
    EstimatedSchedule, KernelConfig, ResidualSeries,
};
use crate::simulate::{simulate_flight, write_simulated_flight, Scenario};
use crate::smoother::{backward_pass, forward_pass, FilterPass, SignalMap, SmootherResult};
use crate::sqm::{compute_sqm, innovation_variances, select_best, sqm_from_ratios, SqmReport};
use crate::statespace::{Augmented, CovarianceSchedule, NoiseModel};
use crate::timeseries::{
    extract_landing_window, load_table, resample, save_table, FlightWindow, SignalKind, SignalSpec,
    TimeSeriesTable, WindowConfig,
};

/// How the landing window is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowMode {
    /// Extract the landing window; fall back to the full table when no
    /// crossing is found.
    Auto,
    /// Use the full table.
    Full,
    /// Extract the landing window; fail when no crossing is found.
    Require,
}

/// Pipeline configuration. File paths default to the shipped
/// configuration tables when absent.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    /// Measured table (.csv) or scenario (.toml).
    pub input: PathBuf,
    pub out_dir: PathBuf,
    pub runway: Option<PathBuf>,
    pub noise_config: Option<PathBuf>,
    /// Optional mapping from model component names to table column
    /// names, for tables recorded with a different naming convention.
    pub signal_map: Option<PathBuf>,
    /// Common smoother rate, Hz.
    pub rate_hz: f64,
    /// Kernel bandwidth of the noise estimator.
    pub bandwidth: f64,
    /// Correlation limits of the second iterations, ascending.
    pub limits: Vec<f64>,
    /// Overrides the scenario seed when the input is a scenario file.
    pub seed: Option<u64>,
    pub window: WindowMode,
}

impl PipelineConfig {
    pub fn new(input: &Path, out_dir: &Path) -> Self {
        Self {
            input: input.to_path_buf(),
            out_dir: out_dir.to_path_buf(),
            runway: None,
            noise_config: None,
            signal_map: None,
            rate_hz: 8.0,
            bandwidth: 50.0,
            limits: vec![0.1, 0.4, 0.6, 0.8],
            seed: None,
            window: WindowMode::Auto,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rate_hz > 0.0) {
            return Err(Error::Config("rate must be positive".into()));
        }
        if !(self.bandwidth > 0.0) {
            return Err(Error::Config("bandwidth must be positive".into()));
        }
        if self.limits.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(Error::Config(
                "correlation limits must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Signal specs of a measured flight table, using the column names of
/// the given mapping.
pub fn measured_table_specs(map: &SignalMap, rate_hz: f64) -> Vec<SignalSpec> {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut specs = Vec::new();
    for column in &map.inputs {
        specs.push(SignalSpec::simulated(column, "m/s^2", rate_hz));
    }
    for (i, name) in OUTPUT_NAMES.iter().enumerate() {
        let mut spec = SignalSpec::simulated(&map.outputs[i], OUTPUT_UNITS[i], rate_hz);
        if matches!(*name, "chi_k" | "phi" | "theta" | "psi" | "alpha_a") {
            spec.kind = SignalKind::Angular { period: two_pi };
        }
        specs.push(spec);
    }
    specs
}

/// Initial state read off the first valid measurements: position,
/// speed, and attitude from the corresponding outputs, derivative
/// states zero, parameters at their neutral values.
pub fn initial_state(table: &TimeSeriesTable, runway: &RunwayGeometry) -> DVector<f64> {
    initial_state_mapped(table, runway, &FlightModel::default_signal_map())
}

/// [`initial_state`] over a table with renamed columns.
pub fn initial_state_mapped(
    table: &TimeSeriesTable,
    runway: &RunwayGeometry,
    map: &SignalMap,
) -> DVector<f64> {
    let first = |name: &str| -> f64 {
        let column = OUTPUT_NAMES
            .iter()
            .position(|n| *n == name)
            .map(|i| map.outputs[i].as_str())
            .unwrap_or(name);
        table
            .column(column)
            .and_then(|c| c.values.iter().find_map(|v| *v))
            .unwrap_or(0.0)
    };
    let n_aug = state::N_X + flight::N_THETA;
    let mut x0 = DVector::zeros(n_aug);
    x0[state::U_K] = first("v_gnd");
    x0[state::W_K] = -first("h_dot");
    x0[state::PHI] = first("phi");
    x0[state::THETA] = first("theta");
    x0[state::PSI] = first("psi");
    x0[state::X_N] = first("x_n");
    x0[state::Y_N] = first("y_n");
    x0[state::Z_N] = first("h_ralt") - runway.ralt_offset;
    x0[state::P] = first("p");
    x0[state::Q] = first("q");
    x0[state::R] = first("r");
    x0[state::U_W] = first("u_w");
    x0[state::V_W] = first("v_w");
    x0[state::N_X + 7] = 1.0; // s_h_baro
    x0
}

/// One completed smoother run.
pub struct SmootherRun {
    pub label: String,
    pub limit: Option<f64>,
    pub result: SmootherResult,
    pub noise: NoiseModel,
    pub report: SqmReport,
}

/// Everything `run_pipeline` produced.
pub struct PipelineOutcome {
    pub reports: Vec<SqmReport>,
    pub selected_label: String,
    pub selection_used_incomplete: bool,
    pub window: FlightWindow,
    pub n_steps: usize,
}

/// Metadata written next to each run.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub limit: Option<f64>,
    pub sqm: SqmReport,
    pub rate_hz: f64,
    pub bandwidth: f64,
    pub n_steps: usize,
    pub window_start: usize,
    pub window_end: usize,
    /// Smoothed bias/scale estimates at the final step.
    pub theta_estimate: Vec<f64>,
}

fn label_for(limit: f64) -> String {
    format!("iter2-{limit}")
}

struct PipelineContext {
    model: Augmented<FlightModel>,
    map: SignalMap,
    noise_cfg: NoiseConfig,
    runway: RunwayGeometry,
    cfg: PipelineConfig,
}

impl PipelineContext {
    fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let runway = match &cfg.runway {
            Some(path) => RunwayGeometry::from_toml_file(path)?,
            None => RunwayGeometry::default(),
        };
        let noise_cfg = match &cfg.noise_config {
            Some(path) => NoiseConfig::from_toml_file(path)?,
            None => NoiseConfig::default(),
        };
        let map = match &cfg.signal_map {
            Some(path) => SignalMap::from_toml_file(path, &FlightModel::default_signal_map())?,
            None => FlightModel::default_signal_map(),
        };
        Ok(Self {
            model: Augmented::new(FlightModel::new(runway)?),
            map,
            noise_cfg,
            runway,
            cfg,
        })
    }

    /// Load the measured table, simulating first when the input is a
    /// scenario file.
    fn obtain_table(&self) -> Result<TimeSeriesTable> {
        let is_scenario = self
            .cfg
            .input
            .extension()
            .map(|e| e == "toml")
            .unwrap_or(false);
        if is_scenario {
            let mut scenario = Scenario::from_toml_file(&self.cfg.input)?;
            if let Some(seed) = self.cfg.seed {
                scenario.seed = seed;
            }
            let sim = simulate_flight(&scenario, &self.model.inner)?;
            write_simulated_flight(&sim, &scenario, &self.cfg.out_dir.join("sim"))?;
            Ok(sim.measured)
        } else {
            load_table(
                &self.cfg.input,
                &measured_table_specs(&self.map, self.cfg.rate_hz),
            )
        }
    }

    fn window(&self, table: &TimeSeriesTable) -> Result<FlightWindow> {
        let full = FlightWindow {
            start: 0,
            end: table.n_rows() - 1,
        };
        let window_cfg = WindowConfig {
            ralt_column: self.map.outputs[flight::output::H_RALT].clone(),
            gnd_speed_column: self.map.outputs[flight::output::V_GND].clone(),
            ..WindowConfig::default()
        };
        match self.cfg.window {
            WindowMode::Full => Ok(full),
            WindowMode::Require => extract_landing_window(table, &window_cfg),
            WindowMode::Auto => match extract_landing_window(table, &window_cfg) {
                Ok(w) => Ok(w),
                Err(Error::Window(_)) | Err(Error::Schema(_)) => Ok(full),
                Err(e) => Err(e),
            },
        }
    }

    fn run_smoother(
        &self,
        table: &TimeSeriesTable,
        noise: &NoiseModel,
    ) -> Result<(FilterPass, SmootherResult)> {
        let x0 = initial_state_mapped(table, &self.runway, &self.map);
        let p0 = self.noise_cfg.prior_covariance()?;
        let fp = forward_pass(
            &self.model,
            table,
            &self.map,
            noise,
            &x0,
            &p0,
            &DVector::zeros(0),
        )?;
        let sm = backward_pass(&fp, &self.model)?;
        Ok((fp, sm))
    }
}

fn write_run(
    dir: &Path,
    t0: f64,
    run: &SmootherRun,
    fp: &FilterPass,
    cfg: &PipelineConfig,
    window: &FlightWindow,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    run.result.write_csv(t0, &dir.join("smoothed.csv"))?;

    // Innovations with their theoretical variances; enough to re-derive
    // the SQM offline.
    let s = innovation_variances(fp, &run.noise);
    let mut w = csv::Writer::from_path(dir.join("innovations.csv"))?;
    let mut header = vec!["t".to_string()];
    header.extend(OUTPUT_NAMES.iter().map(|n| format!("eps_{n}")));
    header.extend(OUTPUT_NAMES.iter().map(|n| format!("s_{n}")));
    w.write_record(&header)?;
    for k in 0..fp.len() {
        let mut row = vec![format!("{}", t0 + k as f64 * fp.dt)];
        for i in 0..OUTPUT_NAMES.len() {
            row.push(match fp.steps[k].innovation[i] {
                Some(v) => format!("{v}"),
                None => String::new(),
            });
        }
        for i in 0..OUTPUT_NAMES.len() {
            row.push(format!("{}", s[k][i]));
        }
        w.write_record(&row)?;
    }
    w.flush()?;

    // Applied noise schedule, expanded per step.
    let applied = EstimatedSchedule {
        r: (0..fp.len())
            .map(|k| run.noise.r_schedule.at(k).clone())
            .collect(),
        mean: vec![DVector::zeros(OUTPUT_NAMES.len()); fp.len()],
        names: OUTPUT_NAMES.iter().map(|s| s.to_string()).collect(),
        conditioned: true,
    };
    schedule_to_csv(&applied, &dir.join("applied_schedule.csv"))?;

    let theta_estimate: Vec<f64> = {
        let last = run.result.x_smooth.last().expect("nonempty run");
        (state::N_X..state::N_X + flight::N_THETA)
            .map(|i| last[i])
            .collect()
    };
    let summary = RunSummary {
        label: run.label.clone(),
        limit: run.limit,
        sqm: run.report.clone(),
        rate_hz: cfg.rate_hz,
        bandwidth: cfg.bandwidth,
        n_steps: fp.len(),
        window_start: window.start,
        window_end: window.end,
        theta_estimate,
    };
    std::fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n",
    )?;
    Ok(())
}

fn write_fleet_summary(
    path: &Path,
    flight_id: &str,
    labels: &[String],
    reports: &[SqmReport],
    selected: &str,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["flight".to_string()];
    header.extend(labels.iter().cloned());
    header.push("selected".into());
    w.write_record(&header)?;
    let mut row = vec![flight_id.to_string()];
    for rep in reports {
        row.push(if rep.is_failed() {
            "-".to_string()
        } else {
            format!("{:.4}", rep.sqm)
        });
    }
    row.push(selected.to_string());
    w.write_record(&row)?;
    w.flush()?;
    Ok(())
}

/// Diagnostics bundle for one run directory: standardized-residual KDEs
/// per component plus normalized contours and dependence statistics for
/// the default pairs.
pub fn diagnose_run(run_dir: &Path, out_dir: &Path) -> Result<()> {
    let residuals = read_run_residuals(run_dir)?;
    let schedule = schedule_from_csv(&run_dir.join("applied_schedule.csv"))?;
    let standardized = standardize(&residuals, &CovarianceSchedule::Varying(schedule.r))?;
    std::fs::create_dir_all(out_dir)?;

    let mut kde_meta = Vec::new();
    for (i, name) in standardized.names().to_vec().iter().enumerate() {
        let values = standardized.component_values(i);
        if values.len() < 50 {
            continue;
        }
        match kde_1d(&values) {
            Ok(kde) => {
                kde.write_csv(&out_dir.join(format!("kde_{name}.csv")))?;
                kde_meta.push(serde_json::json!({
                    "component": name,
                    "bandwidth": kde.bandwidth,
                    "n": kde.n,
                    "ks_to_std_normal":
                        crate::diagnostics::ks_distance_to_std_normal(&values),
                }));
            }
            Err(Error::Diagnostics(_)) => continue,
            Err(e) => return Err(e),
        }
    }

    let pairs = default_pairs();
    let mut contour_meta = Vec::new();
    for (a, b) in &pairs {
        let (xs, ys) = paired_values(&standardized, a, b)?;
        if xs.len() < 200 {
            continue;
        }
        let grid = crate::diagnostics::normalized_contours(&xs, &ys)?;
        grid.write_csv(&out_dir.join(format!("contour_{a}__{b}.csv")))?;
        contour_meta.push(serde_json::json!({
            "pair": [a, b],
            "rho_normal_scores": grid.rho,
            "bandwidth": [grid.bandwidth.0, grid.bandwidth.1],
            "n": grid.n,
            "tie_warning": grid.tie_warning,
        }));
    }
    let report = dependence_summary(&pairs, &standardized)?;
    let meta = serde_json::json!({
        "kde": kde_meta,
        "contours": contour_meta,
        "dependence": report,
    });
    std::fs::write(
        out_dir.join("dependence.json"),
        serde_json::to_string_pretty(&meta).expect("diagnostics serialize") + "\n",
    )?;
    Ok(())
}

fn paired_values(
    std_res: &StandardizedResiduals,
    a: &str,
    b: &str,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let names = std_res.names();
    let ia = names
        .iter()
        .position(|n| n == a)
        .ok_or_else(|| Error::Argument(format!("unknown component '{a}'")))?;
    let ib = names
        .iter()
        .position(|n| n == b)
        .ok_or_else(|| Error::Argument(format!("unknown component '{b}'")))?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for k in 0..std_res.series.n_steps() {
        if let (Some(x), Some(y)) = (std_res.series.get(k, ia), std_res.series.get(k, ib)) {
            xs.push(x);
            ys.push(y);
        }
    }
    Ok((xs, ys))
}

/// Read the residual columns back from a run's `smoothed.csv`.
pub fn read_run_residuals(run_dir: &Path) -> Result<ResidualSeries> {
    let path = run_dir.join("smoothed.csv");
    let mut reader = csv::Reader::from_path(&path)?;
    let headers = reader.headers()?.clone();
    let mut idx = Vec::new();
    for name in OUTPUT_NAMES {
        let col = headers
            .iter()
            .position(|h| h == format!("v_{name}"))
            .ok_or_else(|| Error::Schema(format!("residual column v_{name} missing")))?;
        idx.push(col);
    }
    let mut data = Vec::new();
    for record in reader.records() {
        let record = record?;
        let mut row = Vec::with_capacity(idx.len());
        for &c in &idx {
            let cell = record.get(c).unwrap_or("").trim();
            if cell.is_empty() {
                row.push(None);
            } else {
                row.push(Some(cell.parse::<f64>().map_err(|_| {
                    Error::Format(format!("bad residual cell '{cell}'"))
                })?));
            }
        }
        data.push(row);
    }
    ResidualSeries::new(OUTPUT_NAMES.iter().map(|s| s.to_string()).collect(), data)
}

/// Re-derive an SQM report from a run's `innovations.csv`.
pub fn sqm_from_innovations(run_dir: &Path, label: &str) -> Result<SqmReport> {
    let path = run_dir.join("innovations.csv");
    let mut reader = csv::Reader::from_path(&path)?;
    let headers = reader.headers()?.clone();
    let n_y = OUTPUT_NAMES.len();
    let mut eps_idx = Vec::new();
    let mut s_idx = Vec::new();
    for name in OUTPUT_NAMES {
        eps_idx.push(
            headers
                .iter()
                .position(|h| h == format!("eps_{name}"))
                .ok_or_else(|| Error::Schema(format!("column eps_{name} missing")))?,
        );
        s_idx.push(
            headers
                .iter()
                .position(|h| h == format!("s_{name}"))
                .ok_or_else(|| Error::Schema(format!("column s_{name} missing")))?,
        );
    }
    let mut eps: Vec<Vec<Option<f64>>> = vec![Vec::new(); n_y];
    let mut s: Vec<Vec<f64>> = vec![Vec::new(); n_y];
    for record in reader.records() {
        let record = record?;
        for i in 0..n_y {
            let cell = record.get(eps_idx[i]).unwrap_or("").trim();
            eps[i].push(if cell.is_empty() {
                None
            } else {
                Some(
                    cell.parse()
                        .map_err(|_| Error::Format(format!("bad innovation cell '{cell}'")))?,
                )
            });
            let sc = record.get(s_idx[i]).unwrap_or("").trim();
            s[i].push(
                sc.parse()
                    .map_err(|_| Error::Format(format!("bad variance cell '{sc}'")))?,
            );
        }
    }
    let ratios: Vec<Option<f64>> = (0..n_y)
        .map(|i| {
            let pairs: Vec<(f64, f64)> = eps[i]
                .iter()
                .zip(&s[i])
                .filter_map(|(e, &sv)| e.map(|e| (e, sv)))
                .collect();
            if pairs.len() < 2 {
                return None;
            }
            let n = pairs.len() as f64;
            let mean = pairs.iter().map(|(e, _)| e).sum::<f64>() / n;
            Some(
                pairs
                    .iter()
                    .map(|(e, sv)| (e - mean).powi(2) / sv)
                    .sum::<f64>()
                    / n,
            )
        })
        .collect();
    sqm_from_ratios(label, ratios)
}

/// Run the full two-iteration pipeline.
pub fn run_pipeline(cfg: PipelineConfig) -> Result<PipelineOutcome> {
    let ctx = PipelineContext::new(cfg)?;
    std::fs::create_dir_all(&ctx.cfg.out_dir)?;

    let raw = ctx.obtain_table()?;
    let resampled = resample(&raw, ctx.cfg.rate_hz)?;
    let window = ctx.window(&resampled)?;
    let table = resampled.slice(&window)?;
    save_table(&table, &ctx.cfg.out_dir.join("window.csv"))?;

    // Iteration 1: constant diagonal R from the configuration table.
    let noise1 = default_noise(&ctx.noise_cfg)?;
    let (fp1, sm1) = ctx.run_smoother(&table, &noise1)?;
    let report1 = compute_sqm(&fp1, &noise1, "iter1")?;
    let run1 = SmootherRun {
        label: "iter1".into(),
        limit: None,
        result: sm1,
        noise: noise1,
        report: report1.clone(),
    };
    write_run(
        &ctx.cfg.out_dir.join("runs").join("iter1"),
        table.t0,
        &run1,
        &fp1,
        &ctx.cfg,
        &window,
    )?;

    // Noise schedule from the first iteration's residuals.
    let kernel = KernelConfig::new(ctx.cfg.bandwidth)?;
    let schedule = estimate_covariance(&run1.result.residuals, &kernel)?;
    schedule_to_csv(&schedule, &ctx.cfg.out_dir.join("schedule.csv"))?;

    // Second iterations, one per correlation limit.
    let q = run1.noise.q.clone();
    let second: Vec<(String, f64, Result<(FilterPass, SmootherRun)>)> = ctx
        .cfg
        .limits
        .par_iter()
        .map(|&limit| {
            let label = label_for(limit);
            let outcome = (|| {
                let conditioned = apply_correlation_limit(&schedule, limit);
                let r_schedule = conditioned.into_covariance_schedule()?;
                let noise = NoiseModel::new(q.clone(), r_schedule)?;
                let (fp, sm) = ctx.run_smoother(&table, &noise)?;
                let report = compute_sqm(&fp, &noise, &label)?;
                Ok((
                    fp,
                    SmootherRun {
                        label: label.clone(),
                        limit: Some(limit),
                        result: sm,
                        noise,
                        report,
                    },
                ))
            })();
            (label, limit, outcome)
        })
        .collect();

    let mut labels = vec!["iter1".to_string()];
    let mut reports = vec![report1];
    let mut runs: Vec<(String, Option<(FilterPass, SmootherRun)>)> = Vec::new();
    for (label, _limit, outcome) in second {
        labels.push(label.clone());
        match outcome {
            Ok((fp, run)) => {
                reports.push(run.report.clone());
                runs.push((label, Some((fp, run))));
            }
            Err(e) => {
                reports.push(SqmReport::failed(&label, &e.to_string()));
                runs.push((label, None));
            }
        }
    }
    for (label, entry) in &runs {
        if let Some((fp, run)) = entry {
            write_run(
                &ctx.cfg.out_dir.join("runs").join(label),
                table.t0,
                run,
                fp,
                &ctx.cfg,
                &window,
            )?;
        }
    }

    let selection = select_best(&reports)?;
    let selected_label = reports[selection.index].run_label.clone();
    let flight_id = ctx
        .cfg
        .input
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "flight".into());
    write_fleet_summary(
        &ctx.cfg.out_dir.join("sqm_summary.csv"),
        &flight_id,
        &labels,
        &reports,
        &selected_label,
    )?;
    let marker = serde_json::json!({
        "selected": selected_label,
        "sqm": reports[selection.index].sqm,
        "used_incomplete": selection.used_incomplete,
        "labels": labels,
    });
    std::fs::write(
        ctx.cfg.out_dir.join("selection.json"),
        serde_json::to_string_pretty(&marker).expect("selection serializes") + "\n",
    )?;

    diagnose_run(
        &ctx.cfg.out_dir.join("runs").join(&selected_label),
        &ctx.cfg.out_dir.join("diagnostics"),
    )?;

    Ok(PipelineOutcome {
        reports,
        selected_label,
        selection_used_incomplete: selection.used_incomplete,
        window,
        n_steps: table.n_rows(),
    })
}

/// Run only the first smoother iteration (the `smooth` subcommand).
pub fn run_first_iteration(cfg: PipelineConfig) -> Result<SqmReport> {
    let ctx = PipelineContext::new(cfg)?;
    std::fs::create_dir_all(&ctx.cfg.out_dir)?;
    let raw = ctx.obtain_table()?;
    let resampled = resample(&raw, ctx.cfg.rate_hz)?;
    let window = ctx.window(&resampled)?;
    let table = resampled.slice(&window)?;
    let noise = default_noise(&ctx.noise_cfg)?;
    let (fp, sm) = ctx.run_smoother(&table, &noise)?;
    let report = compute_sqm(&fp, &noise, "iter1")?;
    let run = SmootherRun {
        label: "iter1".into(),
        limit: None,
        result: sm,
        noise,
        report: report.clone(),
    };
    write_run(
        &ctx.cfg.out_dir.join("runs").join("iter1"),
        table.t0,
        &run,
        &fp,
        &ctx.cfg,
        &window,
    )?;
    Ok(report)
}

/// Estimate the noise schedule from an existing run directory (the
/// `estimate-noise` subcommand).
pub fn estimate_noise_from_run(run_dir: &Path, bandwidth: f64, out: &Path) -> Result<()> {
    let residuals = read_run_residuals(run_dir)?;
    let kernel = KernelConfig::new(bandwidth)?;
    let schedule = estimate_covariance(&residuals, &kernel)?;
    schedule_to_csv(&schedule, out)?;
    Ok(())
}

/// Rerun the smoother with an estimated schedule under one correlation
/// limit (the `resmooth` subcommand).
pub fn run_second_iteration(
    cfg: PipelineConfig,
    schedule_path: &Path,
    limit: f64,
) -> Result<SqmReport> {
    let ctx = PipelineContext::new(cfg)?;
    std::fs::create_dir_all(&ctx.cfg.out_dir)?;
    let raw = ctx.obtain_table()?;
    let resampled = resample(&raw, ctx.cfg.rate_hz)?;
    let window = ctx.window(&resampled)?;
    let table = resampled.slice(&window)?;

    let schedule = schedule_from_csv(schedule_path)?;
    if schedule.len() != table.n_rows() {
        return Err(Error::Argument(format!(
            "schedule has {} steps, window has {}",
            schedule.len(),
            table.n_rows()
        )));
    }
    let conditioned = apply_correlation_limit(&schedule, limit);
    let noise_cfg_noise = default_noise(&ctx.noise_cfg)?;
    let noise = NoiseModel::new(noise_cfg_noise.q, conditioned.into_covariance_schedule()?)?;
    let label = label_for(limit);
    let (fp, sm) = ctx.run_smoother(&table, &noise)?;
    let report = compute_sqm(&fp, &noise, &label)?;
    let run = SmootherRun {
        label: label.clone(),
        limit: Some(limit),
        result: sm,
        noise,
        report: report.clone(),
    };
    write_run(
        &ctx.cfg.out_dir.join("runs").join(&label),
        table.t0,
        &run,
        &fp,
        &ctx.cfg,
        &window,
    )?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::NoiseSpec;

    fn write_scenario(dir: &Path, scenario: &Scenario) -> PathBuf {
        let path = dir.join("scenario.toml");
        std::fs::write(&path, scenario.to_toml_string()).unwrap();
        path
    }

    fn time_varying_scenario(seed: u64) -> Scenario {
        Scenario {
            seed,
            noise: NoiseSpec::Smooth {
                sigma: crate::simulate::default_sigmas(),
                amplitude: 1.0,
                period_s: 40.0,
            },
            ..Scenario::default()
        }
    }

    #[test]
    fn pipeline_produces_summary_and_selection() {
        let dir = tempfile::tempdir().unwrap();
        let scenario = write_scenario(dir.path(), &time_varying_scenario(3));
        let out = dir.path().join("out");
        let mut cfg = PipelineConfig::new(&scenario, &out);
        cfg.limits = vec![0.1, 0.4];
        let outcome = run_pipeline(cfg).unwrap();
        assert_eq!(outcome.reports.len(), 3);
        assert!(outcome.reports.iter().all(|r| !r.is_failed()));
        assert!(out.join("sqm_summary.csv").exists());
        assert!(out.join("selection.json").exists());
        assert!(out.join("schedule.csv").exists());
        assert!(out.join("runs/iter1/smoothed.csv").exists());
        assert!(out.join("runs/iter2-0.1/innovations.csv").exists());
        assert!(out.join("diagnostics/dependence.json").exists());
        // The summary row has one value per run plus flight id and pick.
        let summary = std::fs::read_to_string(out.join("sqm_summary.csv")).unwrap();
        let lines: Vec<&str> = summary.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].split(',').count(), 5);
        assert!(lines[1].ends_with(&outcome.selected_label), "{}", lines[1]);
    }

    #[test]
    fn sqm_rederivable_from_innovations() {
        let dir = tempfile::tempdir().unwrap();
        let scenario = write_scenario(dir.path(), &Scenario::default());
        let out = dir.path().join("out");
        let mut cfg = PipelineConfig::new(&scenario, &out);
        cfg.limits = vec![0.4];
        let outcome = run_pipeline(cfg).unwrap();
        let rederived = sqm_from_innovations(&out.join("runs/iter1"), "iter1").unwrap();
        let original = &outcome.reports[0];
        // CSV round-trips f64 exactly (shortest round-trip formatting).
        assert_eq!(rederived.sqm, original.sqm);
        for (a, b) in rederived.ratios.iter().zip(&original.ratios) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn signal_map_renames_columns() {
        // Simulate, rename two columns in the CSV, then smooth through a
        // mapping file.
        let dir = tempfile::tempdir().unwrap();
        let model = crate::flight::FlightModel::new(RunwayGeometry::default()).unwrap();
        let sim = crate::simulate::simulate_flight(&Scenario::default(), &model).unwrap();
        let csv_path = dir.path().join("renamed.csv");
        save_table(&sim.measured, &csv_path).unwrap();
        let text = std::fs::read_to_string(&csv_path).unwrap();
        let text = text.replacen("v_gnd [m/s]", "GS [m/s]", 1).replacen(
            "a_x [m/s^2]",
            "ACC_LONG [m/s^2]",
            1,
        );
        std::fs::write(&csv_path, text).unwrap();

        let map_path = dir.path().join("map.toml");
        let map_toml = concat!(
            "[inputs]\n",
            "a_x = \"ACC_LONG\"\n",
            "\n",
            "[outputs]\n",
            "v_gnd = \"GS\"\n",
        );
        std::fs::write(&map_path, map_toml).unwrap();

        let out = dir.path().join("out");
        let mut cfg = PipelineConfig::new(&csv_path, &out);
        cfg.signal_map = Some(map_path);
        let report = run_first_iteration(cfg).unwrap();
        assert!(report.complete);
        assert!(report.sqm > 0.0);
    }

    #[test]
    fn failed_runs_are_recorded_in_summary() {
        // Exercise the summary/selection path with an injected failure.
        let reports = vec![
            SqmReport {
                run_label: "iter1".into(),
                ratios: vec![Some(0.5)],
                sqm: 0.5,
                abnormal: false,
                complete: true,
                degenerate: false,
                failure: None,
            },
            SqmReport::failed("iter2-0.1", "conditioning error at step 7"),
            SqmReport {
                run_label: "iter2-0.4".into(),
                ratios: vec![Some(0.9)],
                sqm: 0.9,
                abnormal: false,
                complete: true,
                degenerate: false,
                failure: None,
            },
        ];
        let sel = select_best(&reports).unwrap();
        assert_eq!(reports[sel.index].run_label, "iter2-0.4");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sqm_summary.csv");
        let labels: Vec<String> = reports.iter().map(|r| r.run_label.clone()).collect();
        write_fleet_summary(&path, "f1", &labels, &reports, "iter2-0.4").unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let row = text.lines().nth(1).unwrap();
        assert_eq!(row, "f1,0.5000,-,0.9000,iter2-0.4");
    }

    #[test]
    fn resmooth_against_saved_schedule_matches_pipeline() {
        let dir = tempfile::tempdir().unwrap();
        let scenario = write_scenario(dir.path(), &Scenario::default());
        let out = dir.path().join("out");
        let mut cfg = PipelineConfig::new(&scenario, &out);
        cfg.limits = vec![0.1];
        let outcome = run_pipeline(cfg.clone()).unwrap();

        let out2 = dir.path().join("stagewise");
        let cfg2 = PipelineConfig {
            out_dir: out2.clone(),
            ..cfg
        };
        let report = run_second_iteration(cfg2, &out.join("schedule.csv"), 0.1).unwrap();
        assert_eq!(report.sqm, outcome.reports[1].sqm);
    }
}
