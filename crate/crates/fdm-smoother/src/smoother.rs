//! Extended Kalman filter forward pass and Rauch-Tung-Striebel backward
//! pass with per-step measurement-noise matrices.
//!
//! The forward pass alternates prediction (RK4 state propagation, the
//! matching 4th-order transition polynomial for the covariance) and
//! correction (Kalman gain with the Joseph-form covariance update).
//! Missing measurement components are excluded by row deletion from the
//! output Jacobian, the noise matrix, and the measurement vector at that
//! step; a fully missing step is pure prediction. The backward pass runs
//! the classic RTS recursion and evaluates smoothed outputs and
//! residuals.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::noise::ResidualSeries;
use crate::statespace::{
    jacobian_input, jacobian_state, propagate, rk4_transition, JacobianOf, NoiseModel,
    StateSpaceModel,
};
use crate::timeseries::TimeSeriesTable;

/// Mapping from model input/output component order to table column names.
#[derive(Debug, Clone)]
pub struct SignalMap {
    /// Column names for the leading input components; unmapped trailing
    /// input slots are held at zero (artificial inputs).
    pub inputs: Vec<String>,
    /// Column names for all output components, in model order.
    pub outputs: Vec<String>,
}

impl SignalMap {
    /// Load a mapping from a TOML file with `[inputs]` and `[outputs]`
    /// tables of `component = "column name"` pairs. `base` supplies the
    /// component order and the default column names; only the listed
    /// components are renamed.
    pub fn from_toml_file(path: &std::path::Path, base: &SignalMap) -> Result<SignalMap> {
        #[derive(serde::Deserialize)]
        struct MapFile {
            #[serde(default)]
            inputs: indexmap::IndexMap<String, String>,
            #[serde(default)]
            outputs: indexmap::IndexMap<String, String>,
        }
        let text = std::fs::read_to_string(path)?;
        let file: MapFile =
            toml::from_str(&text).map_err(|e| Error::Schema(format!("signal map: {e}")))?;
        let mut map = base.clone();
        for (component, column) in &file.inputs {
            let slot = base
                .inputs
                .iter()
                .position(|n| n == component)
                .ok_or_else(|| Error::Schema(format!("unknown input component '{component}'")))?;
            map.inputs[slot] = column.clone();
        }
        for (component, column) in &file.outputs {
            let slot = base
                .outputs
                .iter()
                .position(|n| n == component)
                .ok_or_else(|| Error::Schema(format!("unknown output component '{component}'")))?;
            map.outputs[slot] = column.clone();
        }
        Ok(map)
    }
}

/// Per-step record of the forward pass.
#[derive(Debug, Clone)]
pub struct FilterStep {
    pub x_pred: DVector<f64>,
    pub p_pred: DMatrix<f64>,
    pub x_corr: DVector<f64>,
    pub p_corr: DMatrix<f64>,
    /// Predicted output `g(x_pred, u_k, theta)`, all components.
    pub y_pred: DVector<f64>,
    /// Prediction error `y_m - y_pred`; `None` where the measurement is
    /// missing (never reported as zero).
    pub innovation: Vec<Option<f64>>,
    /// Kalman gain, `n_x x n_y`, with zero columns for missing components.
    pub gain: DMatrix<f64>,
    /// Output Jacobian at the predicted state, all rows.
    pub c_jac: DMatrix<f64>,
    /// Discrete transition Jacobian from this step to the next
    /// (identity at the final step, where it is unused).
    pub phi: DMatrix<f64>,
    pub measured: Vec<bool>,
}

/// Complete forward pass: per-step filter quantities plus the input and
/// measurement sequences they were computed from.
#[derive(Debug, Clone)]
pub struct FilterPass {
    pub steps: Vec<FilterStep>,
    pub dt: f64,
    pub inputs: Vec<DVector<f64>>,
    pub measurements: Vec<Vec<Option<f64>>>,
    pub theta: DVector<f64>,
}

impl FilterPass {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Result of the backward pass: smoothed states, covariances, outputs,
/// and estimated residuals, plus the forward pass they came from.
#[derive(Debug, Clone)]
pub struct SmootherResult {
    pub x_smooth: Vec<DVector<f64>>,
    pub p_smooth: Vec<DMatrix<f64>>,
    pub y_smooth: Vec<DVector<f64>>,
    pub residuals: ResidualSeries,
    pub pass: FilterPass,
    pub state_names: Vec<String>,
    pub output_names: Vec<String>,
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Symmetrize and floor the diagonal at `1e-10 * trace` before inversion.
fn condition_innovation(s: &DMatrix<f64>) -> DMatrix<f64> {
    let mut s = symmetrize(s);
    let eps = 1e-10 * s.trace().abs();
    for i in 0..s.nrows() {
        if s[(i, i)] < eps {
            s[(i, i)] = eps;
        }
    }
    s
}

fn check_state_finite(x: &DVector<f64>, step: usize) -> Result<()> {
    for (i, v) in x.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::Divergence {
                state_index: i,
                step: Some(step),
            });
        }
    }
    Ok(())
}

/// Extract input and measurement sequences from a table.
///
/// Inputs must be present; missing input cells are filled by holding the
/// previous valid value (or the first valid value, at the start).
/// Unmapped trailing input slots stay zero.
pub fn sequences_from_table(
    table: &TimeSeriesTable,
    map: &SignalMap,
    n_u: usize,
    n_y: usize,
) -> Result<(Vec<DVector<f64>>, Vec<Vec<Option<f64>>>)> {
    if map.inputs.len() > n_u {
        return Err(Error::Schema(format!(
            "signal map has {} inputs, model accepts {}",
            map.inputs.len(),
            n_u
        )));
    }
    if map.outputs.len() != n_y {
        return Err(Error::Schema(format!(
            "signal map has {} outputs, model has {}",
            map.outputs.len(),
            n_y
        )));
    }
    let n = table.n_rows();
    let mut inputs = vec![DVector::zeros(n_u); n];
    for (j, name) in map.inputs.iter().enumerate() {
        let col = table.require_column(name)?;
        // Forward-fill, then backfill the leading gap.
        let first_valid = col
            .values
            .iter()
            .find_map(|v| *v)
            .ok_or_else(|| Error::Schema(format!("input column {name} is entirely missing")))?;
        let mut last = first_valid;
        for (k, v) in col.values.iter().enumerate() {
            if let Some(v) = v {
                last = *v;
            }
            inputs[k][j] = last;
        }
    }
    let mut measurements = vec![vec![None; n_y]; n];
    for (i, name) in map.outputs.iter().enumerate() {
        let col = table.require_column(name)?;
        for (k, v) in col.values.iter().enumerate() {
            measurements[k][i] = *v;
        }
    }
    Ok((inputs, measurements))
}

/// Forward EKF pass over a table.
pub fn forward_pass(
    model: &dyn StateSpaceModel,
    table: &TimeSeriesTable,
    map: &SignalMap,
    noise: &NoiseModel,
    x0: &DVector<f64>,
    p0: &DMatrix<f64>,
    theta: &DVector<f64>,
) -> Result<FilterPass> {
    let (inputs, measurements) = sequences_from_table(table, map, model.n_u(), model.n_y())?;
    forward_pass_seq(
        model,
        &inputs,
        &measurements,
        noise,
        x0,
        p0,
        theta,
        table.dt,
    )
}

/// Forward EKF pass over explicit input and measurement sequences.
///
/// Step 0 treats the prior as the prediction and corrects it with the
/// first measurement; afterwards every step predicts from the previous
/// corrected state and corrects with the measurement at that step.
#[allow(clippy::too_many_arguments)]
pub fn forward_pass_seq(
    model: &dyn StateSpaceModel,
    inputs: &[DVector<f64>],
    measurements: &[Vec<Option<f64>>],
    noise: &NoiseModel,
    x0: &DVector<f64>,
    p0: &DMatrix<f64>,
    theta: &DVector<f64>,
    dt: f64,
) -> Result<FilterPass> {
    let n = measurements.len();
    if n == 0 || inputs.len() != n {
        return Err(Error::Argument(format!(
            "inconsistent sequence lengths: {} inputs, {} measurements",
            inputs.len(),
            n
        )));
    }
    if let Some(len) = noise.r_schedule.len() {
        if len != n {
            return Err(Error::Argument(format!(
                "covariance schedule has {len} steps, data has {n}"
            )));
        }
    }
    let n_x = model.n_x();
    let n_y = model.n_y();
    if noise.r_schedule.dim() != n_y {
        return Err(Error::Argument(format!(
            "R has dimension {}, model has {} outputs",
            noise.r_schedule.dim(),
            n_y
        )));
    }
    if noise.q.nrows() != model.n_u() {
        return Err(Error::Argument(format!(
            "Q has dimension {}, model has {} inputs",
            noise.q.nrows(),
            model.n_u()
        )));
    }

    let mut steps: Vec<FilterStep> = Vec::with_capacity(n);
    let mut x_prev = x0.clone();
    let mut p_prev = symmetrize(p0);

    for k in 0..n {
        let u_k = &inputs[k];
        let (x_pred, p_pred) = if k == 0 {
            (x_prev.clone(), p_prev.clone())
        } else {
            let u_prev = &inputs[k - 1];
            let a = jacobian_state(model, &x_prev, u_prev, theta, JacobianOf::StateFn)
                .map_err(|e| at_step(e, k))?;
            let phi = rk4_transition(&a, dt);
            let gamma =
                jacobian_input(model, &x_prev, u_prev, theta).map_err(|e| at_step(e, k))? * dt;
            let x_pred = propagate(model, &x_prev, u_prev, theta, dt).map_err(|e| at_step(e, k))?;
            let p_pred = symmetrize(
                &(&phi * &p_prev * phi.transpose() + &gamma * &noise.q * gamma.transpose()),
            );
            steps[k - 1].phi = phi;
            (x_pred, p_pred)
        };
        check_state_finite(&x_pred, k)?;

        let y_pred = model.g(&x_pred, u_k, theta).map_err(|e| at_step(e, k))?;
        let c_full = jacobian_state(model, &x_pred, u_k, theta, JacobianOf::OutputFn)
            .map_err(|e| at_step(e, k))?;
        let r_full = noise.r_schedule.at(k);

        let measured: Vec<bool> = measurements[k].iter().map(|v| v.is_some()).collect();
        let idx: Vec<usize> = (0..n_y).filter(|&i| measured[i]).collect();
        let m = idx.len();

        let mut innovation = vec![None; n_y];
        for &i in &idx {
            let raw = measurements[k][i].unwrap() - y_pred[i];
            innovation[i] = Some(model.wrap_residual(i, raw));
        }

        let (x_corr, p_corr, gain) = if m == 0 {
            (x_pred.clone(), p_pred.clone(), DMatrix::zeros(n_x, n_y))
        } else {
            let c_m = c_full.select_rows(idx.iter());
            let r_m = r_full.select_rows(idx.iter()).select_columns(idx.iter());
            let inn_m = DVector::from_iterator(m, idx.iter().map(|&i| innovation[i].unwrap()));
            let s = condition_innovation(&(&c_m * &p_pred * c_m.transpose() + &r_m));
            let chol = s.clone().cholesky().ok_or_else(|| Error::Conditioning {
                step: k,
                reason: "innovation covariance is not invertible".into(),
            })?;
            // K = P C^T S^-1  via  S Z = C P  =>  K = Z^T.
            let z = chol.solve(&(&c_m * &p_pred));
            let k_m = z.transpose();
            let x_corr = &x_pred + &k_m * &inn_m;
            let ikc = DMatrix::identity(n_x, n_x) - &k_m * &c_m;
            let p_corr =
                symmetrize(&(&ikc * &p_pred * ikc.transpose() + &k_m * &r_m * k_m.transpose()));
            let mut gain = DMatrix::zeros(n_x, n_y);
            for (col, &i) in idx.iter().enumerate() {
                gain.column_mut(i).copy_from(&k_m.column(col));
            }
            (x_corr, p_corr, gain)
        };
        check_state_finite(&x_corr, k)?;

        x_prev = x_corr.clone();
        p_prev = p_corr.clone();
        steps.push(FilterStep {
            x_pred,
            p_pred,
            x_corr,
            p_corr,
            y_pred,
            innovation,
            gain,
            c_jac: c_full,
            phi: DMatrix::identity(n_x, n_x),
            measured,
        });
    }

    Ok(FilterPass {
        steps,
        dt,
        inputs: inputs.to_vec(),
        measurements: measurements.to_vec(),
        theta: theta.clone(),
    })
}

fn at_step(e: Error, step: usize) -> Error {
    match e {
        Error::Divergence { state_index, .. } => Error::Divergence {
            state_index,
            step: Some(step),
        },
        other => other,
    }
}

/// RTS backward pass over a completed forward pass.
///
/// Runs the combined correction recursion
/// `G_k = P^_k Phi_k^T (P~_{k+1})^-1`,
/// `x_s,k = x^_k + G_k (x_s,k+1 - x~_{k+1})`,
/// `P_s,k = P^_k + G_k (P_s,k+1 - P~_{k+1}) G_k^T`,
/// then evaluates smoothed outputs and the estimated residuals
/// `v^_k = y_m,k - g(x_s,k, u_m,k, theta)`.
pub fn backward_pass(fp: &FilterPass, model: &dyn StateSpaceModel) -> Result<SmootherResult> {
    let n = fp.len();
    if n == 0 {
        return Err(Error::Argument("empty forward pass".into()));
    }
    let theta = &fp.theta;
    let mut x_smooth = vec![DVector::zeros(model.n_x()); n];
    let mut p_smooth = vec![DMatrix::zeros(model.n_x(), model.n_x()); n];
    x_smooth[n - 1] = fp.steps[n - 1].x_corr.clone();
    p_smooth[n - 1] = fp.steps[n - 1].p_corr.clone();

    for k in (0..n - 1).rev() {
        let next = &fp.steps[k + 1];
        let p_pred_next = condition_innovation(&next.p_pred);
        let chol = p_pred_next
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Conditioning {
                step: k + 1,
                reason: "predicted covariance is singular in the backward pass".into(),
            })?;
        let cur = &fp.steps[k];
        // G = P^ Phi^T P~^-1 computed as (P~^-1 Phi P^)^T.
        let z = chol.solve(&(&cur.phi * &cur.p_corr));
        let g = z.transpose();
        x_smooth[k] = &cur.x_corr + &g * (&x_smooth[k + 1] - &next.x_pred);
        p_smooth[k] =
            symmetrize(&(&cur.p_corr + &g * (&p_smooth[k + 1] - &next.p_pred) * g.transpose()));
        check_state_finite(&x_smooth[k], k)?;
    }

    let n_y = model.n_y();
    let mut y_smooth = Vec::with_capacity(n);
    let mut residuals = vec![vec![None; n_y]; n];
    for k in 0..n {
        let y = model
            .g(&x_smooth[k], &fp.inputs[k], theta)
            .map_err(|e| at_step(e, k))?;
        for i in 0..n_y {
            if let Some(ym) = fp.measurements[k][i] {
                residuals[k][i] = Some(model.wrap_residual(i, ym - y[i]));
            }
        }
        y_smooth.push(y);
    }

    Ok(SmootherResult {
        x_smooth,
        p_smooth,
        y_smooth,
        residuals: ResidualSeries::new(model.output_names(), residuals)?,
        pass: fp.clone(),
        state_names: model.state_names(),
        output_names: model.output_names(),
    })
}

impl SmootherResult {
    pub fn len(&self) -> usize {
        self.x_smooth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x_smooth.is_empty()
    }

    /// One row per step: time, smoothed states, smoothed outputs,
    /// estimated residuals (empty cells where the measurement was
    /// missing).
    pub fn write_csv(&self, t0: f64, path: &std::path::Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["t".to_string()];
        header.extend(self.state_names.iter().map(|s| format!("x_{s}")));
        header.extend(self.output_names.iter().map(|s| format!("y_{s}")));
        header.extend(self.output_names.iter().map(|s| format!("v_{s}")));
        w.write_record(&header)?;
        for k in 0..self.len() {
            let mut row = vec![format!("{}", t0 + k as f64 * self.pass.dt)];
            row.extend(self.x_smooth[k].iter().map(|v| format!("{v}")));
            row.extend(self.y_smooth[k].iter().map(|v| format!("{v}")));
            row.extend(self.residuals.step(k).iter().map(|v| match v {
                Some(v) => format!("{v}"),
                None => String::new(),
            }));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::statespace::{CovarianceSchedule, LinearModel};

    fn scalar_model(a: f64) -> LinearModel {
        LinearModel::new(
            DMatrix::from_element(1, 1, a),
            DMatrix::identity(1, 1),
            DMatrix::identity(1, 1),
        )
        .unwrap()
    }

    fn empty_theta() -> DVector<f64> {
        DVector::zeros(0)
    }

    /// Continuous-time rate whose RK4 transition equals the given
    /// discrete factor, found by bisection.
    fn continuous_rate_for(phi: f64, dt: f64) -> f64 {
        let poly = |a: f64| {
            let x = a * dt;
            1.0 + x + x * x / 2.0 + x * x * x / 6.0 + x * x * x * x / 24.0
        };
        let (mut lo, mut hi) = (-5.0, 5.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if poly(mid) < phi {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn huge_r_means_zero_gain() {
        let model = scalar_model(-0.1);
        let noise = NoiseModel::new(
            DMatrix::from_element(1, 1, 0.01),
            CovarianceSchedule::constant(DMatrix::from_element(1, 1, 1e12)).unwrap(),
        )
        .unwrap();
        let n = 50;
        let inputs = vec![DVector::zeros(1); n];
        let measurements: Vec<Vec<Option<f64>>> =
            (0..n).map(|k| vec![Some((k as f64 * 0.1).sin())]).collect();
        let fp = forward_pass_seq(
            &model,
            &inputs,
            &measurements,
            &noise,
            &DVector::from_element(1, 1.0),
            &DMatrix::from_element(1, 1, 1.0),
            &empty_theta(),
            0.1,
        )
        .unwrap();
        for step in &fp.steps {
            let rel = (step.x_corr[0] - step.x_pred[0]).abs() / step.x_pred[0].abs().max(1e-12);
            assert!(rel < 1e-6, "corrected deviates from predicted: {rel}");
        }
    }

    #[test]
    fn scalar_riccati_steady_state() {
        // Discrete a = 0.9, q_d = 0.1, r = 1.0.
        let dt = 1.0;
        let a_d = 0.9;
        let q_d = 0.1;
        let r = 1.0;
        let a_c = continuous_rate_for(a_d, dt);
        let model = scalar_model(a_c);
        // Gamma = dt * B = 1, so q maps through unchanged.
        let noise = NoiseModel::new(
            DMatrix::from_element(1, 1, q_d),
            CovarianceSchedule::constant(DMatrix::from_element(1, 1, r)).unwrap(),
        )
        .unwrap();
        let n = 200;
        let inputs = vec![DVector::zeros(1); n];
        let measurements: Vec<Vec<Option<f64>>> = (0..n).map(|_| vec![Some(0.0)]).collect();
        let fp = forward_pass_seq(
            &model,
            &inputs,
            &measurements,
            &noise,
            &DVector::zeros(1),
            &DMatrix::from_element(1, 1, 2.0),
            &empty_theta(),
            dt,
        )
        .unwrap();

        // Oracle: iterate the scalar Riccati recursion to its fixed point.
        let mut p_corr = 2.0;
        let mut p_pred = 0.0;
        for _ in 0..10_000 {
            p_pred = a_d * a_d * p_corr + q_d;
            let k = p_pred / (p_pred + r);
            p_corr = (1.0 - k) * p_pred;
        }
        let last = fp.steps.last().unwrap();
        assert!(
            (last.p_pred[(0, 0)] - p_pred).abs() < 1e-9,
            "predicted variance {} vs Riccati {}",
            last.p_pred[(0, 0)],
            p_pred
        );
        assert!((last.p_corr[(0, 0)] - p_corr).abs() < 1e-9);
    }

    #[test]
    fn all_missing_is_pure_prediction() {
        let model = scalar_model(-0.2);
        let noise = NoiseModel::new(
            DMatrix::from_element(1, 1, 0.05),
            CovarianceSchedule::constant(DMatrix::from_element(1, 1, 0.5)).unwrap(),
        )
        .unwrap();
        let n = 30;
        let inputs = vec![DVector::zeros(1); n];
        let measurements = vec![vec![None]; n];
        let fp = forward_pass_seq(
            &model,
            &inputs,
            &measurements,
            &noise,
            &DVector::from_element(1, 1.0),
            &DMatrix::from_element(1, 1, 1.0),
            &empty_theta(),
            0.125,
        )
        .unwrap();
        for step in &fp.steps {
            assert_eq!(step.x_corr, step.x_pred);
            assert_eq!(step.p_corr, step.p_pred);
            assert!(step.innovation[0].is_none());
            assert_eq!(step.gain.abs().max(), 0.0);
        }
    }

    #[test]
    fn single_step_smoother_equals_filter() {
        let model = scalar_model(-0.1);
        let noise = NoiseModel::new(
            DMatrix::from_element(1, 1, 0.01),
            CovarianceSchedule::constant(DMatrix::from_element(1, 1, 0.3)).unwrap(),
        )
        .unwrap();
        let fp = forward_pass_seq(
            &model,
            &[DVector::zeros(1)],
            &[vec![Some(0.7)]],
            &noise,
            &DVector::zeros(1),
            &DMatrix::from_element(1, 1, 1.0),
            &empty_theta(),
            0.1,
        )
        .unwrap();
        let sm = backward_pass(&fp, &model).unwrap();
        assert_eq!(sm.x_smooth[0], fp.steps[0].x_corr);
        assert_eq!(sm.p_smooth[0], fp.steps[0].p_corr);
    }

    fn run_scalar_case(n: usize) -> (FilterPass, SmootherResult, LinearModel) {
        let model = scalar_model(-0.15);
        let noise = NoiseModel::new(
            DMatrix::from_element(1, 1, 0.02),
            CovarianceSchedule::constant(DMatrix::from_element(1, 1, 0.4)).unwrap(),
        )
        .unwrap();
        let inputs = vec![DVector::zeros(1); n];
        let measurements: Vec<Vec<Option<f64>>> = (0..n)
            .map(|k| vec![Some((k as f64 * 0.3).sin() + 0.2)])
            .collect();
        let fp = forward_pass_seq(
            &model,
            &inputs,
            &measurements,
            &noise,
            &DVector::zeros(1),
            &DMatrix::from_element(1, 1, 2.0),
            &empty_theta(),
            0.25,
        )
        .unwrap();
        let sm = backward_pass(&fp, &model).unwrap();
        (fp, sm, model)
    }

    #[test]
    fn smoothed_variance_not_above_filtered() {
        let (fp, sm, _) = run_scalar_case(60);
        for k in 0..fp.len() {
            assert!(
                sm.p_smooth[k][(0, 0)] <= fp.steps[k].p_corr[(0, 0)] + 1e-9,
                "step {k}"
            );
            assert!(fp.steps[k].p_corr[(0, 0)] <= fp.steps[k].p_pred[(0, 0)] + 1e-9);
        }
        // Final smoothed covariance equals the final filtered covariance.
        let last = fp.len() - 1;
        assert_eq!(sm.p_smooth[last], fp.steps[last].p_corr);
    }

    #[test]
    fn masked_components_stay_missing() {
        let model = LinearModel::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -0.5, -0.1]),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let noise = NoiseModel::new(
            DMatrix::identity(2, 2) * 0.01,
            CovarianceSchedule::constant(DMatrix::identity(2, 2) * 0.2).unwrap(),
        )
        .unwrap();
        let n = 40;
        let inputs = vec![DVector::zeros(2); n];
        let measurements: Vec<Vec<Option<f64>>> = (0..n)
            .map(|k| {
                // Component 1 only measured every fourth step.
                let y0 = Some((k as f64 * 0.1).cos());
                let y1 = if k % 4 == 0 { Some(0.1) } else { None };
                vec![y0, y1]
            })
            .collect();
        let fp = forward_pass_seq(
            &model,
            &inputs,
            &measurements,
            &noise,
            &DVector::zeros(2),
            &DMatrix::identity(2, 2),
            &empty_theta(),
            0.1,
        )
        .unwrap();
        let sm = backward_pass(&fp, &model).unwrap();
        for k in 0..n {
            if k % 4 != 0 {
                assert!(fp.steps[k].innovation[1].is_none());
                assert_eq!(fp.steps[k].gain.column(1).abs().max(), 0.0);
                assert!(sm.residuals.get(k, 1).is_none());
            } else {
                assert!(sm.residuals.get(k, 1).is_some());
            }
        }
    }

    #[test]
    fn output_permutation_leaves_states_unchanged() {
        let a = DMatrix::from_row_slice(2, 2, &[-0.1, 0.8, -0.4, -0.3]);
        let c1 = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.3, 1.0]);
        let c2 = DMatrix::from_row_slice(2, 2, &[0.3, 1.0, 1.0, 0.0]); // rows swapped
        let model1 = LinearModel::new(a.clone(), DMatrix::identity(2, 2), c1).unwrap();
        let model2 = LinearModel::new(a, DMatrix::identity(2, 2), c2).unwrap();
        let r1 = DMatrix::from_row_slice(2, 2, &[0.3, 0.05, 0.05, 0.6]);
        let r2 = DMatrix::from_row_slice(2, 2, &[0.6, 0.05, 0.05, 0.3]);
        let q = DMatrix::identity(2, 2) * 0.02;
        let noise1 = NoiseModel::new(q.clone(), CovarianceSchedule::constant(r1).unwrap()).unwrap();
        let noise2 = NoiseModel::new(q, CovarianceSchedule::constant(r2).unwrap()).unwrap();
        let n = 50;
        let inputs = vec![DVector::zeros(2); n];
        let meas1: Vec<Vec<Option<f64>>> = (0..n)
            .map(|k| {
                let t = k as f64 * 0.1;
                vec![Some(t.sin()), Some(t.cos() * 0.5)]
            })
            .collect();
        let meas2: Vec<Vec<Option<f64>>> = meas1.iter().map(|m| vec![m[1], m[0]]).collect();
        let x0 = DVector::zeros(2);
        let p0 = DMatrix::identity(2, 2);
        let fp1 = forward_pass_seq(
            &model1,
            &inputs,
            &meas1,
            &noise1,
            &x0,
            &p0,
            &empty_theta(),
            0.1,
        )
        .unwrap();
        let fp2 = forward_pass_seq(
            &model2,
            &inputs,
            &meas2,
            &noise2,
            &x0,
            &p0,
            &empty_theta(),
            0.1,
        )
        .unwrap();
        let sm1 = backward_pass(&fp1, &model1).unwrap();
        let sm2 = backward_pass(&fp2, &model2).unwrap();
        for k in 0..n {
            let diff = (&sm1.x_smooth[k] - &sm2.x_smooth[k]).abs().max();
            assert!(diff < 1e-10, "step {k}: {diff}");
        }
    }

    #[test]
    fn degenerate_innovation_covariance_is_conditioning_error() {
        // C = 0 with an all-zero R makes S exactly singular.
        let model = LinearModel::new(
            DMatrix::from_element(1, 1, 0.0),
            DMatrix::identity(1, 1),
            DMatrix::zeros(1, 1),
        )
        .unwrap();
        let noise = NoiseModel::new(
            DMatrix::zeros(1, 1),
            CovarianceSchedule::Varying(vec![DMatrix::zeros(1, 1); 3]),
        )
        .unwrap();
        let err = forward_pass_seq(
            &model,
            &vec![DVector::zeros(1); 3],
            &vec![vec![Some(1.0)]; 3],
            &noise,
            &DVector::zeros(1),
            &DMatrix::from_element(1, 1, 1.0),
            &empty_theta(),
            0.1,
        )
        .unwrap_err();
        assert!(
            matches!(err, Error::Conditioning { step: 0, .. }),
            "{err:?}"
        );
    }

    #[test]
    fn joseph_form_keeps_symmetry() {
        let (fp, sm, _) = run_scalar_case(80);
        for step in &fp.steps {
            let asym = (&step.p_corr - step.p_corr.transpose()).abs().max();
            assert!(asym <= 1e-12);
        }
        for p in &sm.p_smooth {
            let asym = (p - p.transpose()).abs().max();
            assert!(asym <= 1e-12);
        }
    }
}
