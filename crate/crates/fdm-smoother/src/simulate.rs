//! Synthetic landings with exactly known noise.
//!
//! A [`Scenario`] describes a smooth approach/flare/rollout profile in
//! closed form (logistic and softplus blends, so every quantity is
//! infinitely differentiable), a smooth wind field, true bias
//! parameters, and a measurement-noise schedule. The simulator runs
//! inverse dynamics on the profile to obtain the accelerations and
//! chain-driving terms, then integrates the landing model itself with
//! those inputs held constant over each step. The truth trajectory is
//! therefore exactly the model's discrete dynamics, and the truth
//! outputs are produced by the same output map the smoother uses.
//!
//! The measured table adds zero-mean Gaussian noise: correlated output
//! noise drawn per `R_true(k)` through its Cholesky factor, and
//! accelerometer noise on the inputs. Everything is deterministic given
//! the scenario seed; output noise and input noise use separate,
//! documented ChaCha streams (0 and 1).
//!
//! Because the integrator chains of the model are driven by the
//! profile's deterministic derivatives rather than white noise, the
//! simulator also reports an *equivalent* process-noise matrix: the
//! accelerometer noise variances plus the mean square of the realized
//! chain drivers. A smoother configured with this matrix and the true
//! `R` schedule is correctly specified for the generated flight.

use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flight::{
    self, body_rates_from_euler_rates, rotation_body_to_ned, FlightModel, ThetaParams, GRAVITY,
    INPUT_NAMES, OUTPUT_NAMES, OUTPUT_UNITS, STATE_NAMES,
};
use crate::statespace::{propagate, CovarianceSchedule, StateSpaceModel};
use crate::timeseries::{SignalSpec, TimeSeriesTable, FT_TO_M};

/// Shape of the approach, flare, and rollout, all in closed form.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ApproachProfile {
    /// Ground speed on final approach, m/s.
    pub approach_speed: f64,
    /// Ground speed after rollout, m/s.
    pub taxi_speed: f64,
    pub glide_path_deg: f64,
    /// Height above the runway at t = 0, m. Must exceed the 1000 ft
    /// window threshold.
    pub initial_height: f64,
    /// Softness of the flare (softplus time constant), s.
    pub flare_time_const: f64,
    /// Seconds after touchdown until the deceleration midpoint.
    pub decel_delay: f64,
    /// Deceleration softness (logistic time constant), s.
    pub decel_time_const: f64,
    /// Runway-frame x of the touchdown aim point, m past the threshold.
    pub touchdown_x: f64,
    /// Lateral meander amplitude, m, and period, s.
    pub lateral_amplitude: f64,
    pub lateral_period: f64,
    pub pitch_approach_deg: f64,
    pub pitch_flare_deg: f64,
    pub roll_amplitude_deg: f64,
    pub roll_period: f64,
    /// Steady crab angle on approach, deg.
    pub crab_deg: f64,
}

impl Default for ApproachProfile {
    fn default() -> Self {
        Self {
            approach_speed: 70.0,
            taxi_speed: 8.0,
            glide_path_deg: 3.0,
            initial_height: 350.0,
            flare_time_const: 4.0,
            decel_delay: 6.0,
            decel_time_const: 5.0,
            touchdown_x: 400.0,
            lateral_amplitude: 3.0,
            lateral_period: 28.0,
            pitch_approach_deg: 1.0,
            pitch_flare_deg: 3.0,
            roll_amplitude_deg: 1.5,
            roll_period: 17.0,
            crab_deg: 2.0,
        }
    }
}

/// Smooth wind field in the NED frame: mean plus one sinusoidal gust
/// component per axis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WindProfile {
    pub mean_north: f64,
    pub mean_east: f64,
    pub mean_down: f64,
    pub gust_amplitude: f64,
    pub gust_period: f64,
}

impl Default for WindProfile {
    fn default() -> Self {
        Self {
            mean_north: 4.0,
            mean_east: -2.5,
            mean_down: 0.4,
            gust_amplitude: 1.2,
            gust_period: 31.0,
        }
    }
}

/// Measurement-noise schedule of the simulated sensors. `sigma` lists
/// per-output standard deviations in model output order.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseSpec {
    Constant {
        sigma: Vec<f64>,
    },
    /// Variance multiplied by `factor` from `at_fraction` of the flight
    /// onward.
    Step {
        sigma: Vec<f64>,
        factor: f64,
        at_fraction: f64,
    },
    /// Log-sinusoidal variance modulation,
    /// `R_ii(t) = sigma_i^2 * exp(amplitude * sin(2 pi t / period))`.
    Smooth {
        sigma: Vec<f64>,
        amplitude: f64,
        period_s: f64,
    },
}

/// Optional noise correlation between two named outputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrelationSpec {
    pub a: String,
    pub b: String,
    pub rho: f64,
}

/// Complete description of one synthetic landing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scenario {
    pub duration_s: f64,
    pub rate_hz: f64,
    pub seed: u64,
    pub approach: ApproachProfile,
    pub wind: WindProfile,
    pub theta_true: ThetaParams,
    pub noise: NoiseSpec,
    /// Accelerometer noise standard deviation, m/s^2, applied to the
    /// three measured inputs.
    pub accel_noise_sigma: f64,
    #[serde(default)]
    pub correlations: Vec<CorrelationSpec>,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            duration_s: 135.0,
            rate_hz: 8.0,
            seed: 1,
            approach: ApproachProfile::default(),
            wind: WindProfile::default(),
            theta_true: ThetaParams::default(),
            noise: NoiseSpec::Constant {
                sigma: default_sigmas(),
            },
            accel_noise_sigma: 0.05,
            correlations: Vec::new(),
        }
    }
}

/// Baseline per-output noise standard deviations in output order.
pub fn default_sigmas() -> Vec<f64> {
    vec![
        0.4,    // v_gnd
        0.25,   // h_dot
        0.008,  // chi_k
        0.0025, // phi
        0.0025, // theta
        0.004,  // psi
        4.0,    // x_n
        4.0,    // y_n
        6.0,    // h_baro
        0.5,    // h_ralt
        0.0025, // d_llz_ddm
        0.006,  // d_gs_ddm
        0.004,  // p
        0.004,  // q
        0.004,  // r
        0.8,    // v_a
        0.008,  // alpha_a
        1.2,    // u_w
        1.2,    // v_w
    ]
}

impl Scenario {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Scenario(format!("scenario file: {e}")))
    }

    pub fn from_toml_file(path: &std::path::Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path).map_err(|e| {
            Error::Scenario(format!("cannot read scenario {}: {e}", path.display()))
        })?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn n_steps(&self) -> usize {
        (self.duration_s * self.rate_hz).round() as usize
    }

    fn validate(&self) -> Result<()> {
        if self.n_steps() < 100 {
            return Err(Error::Scenario(format!(
                "duration * rate = {} steps, need at least 100",
                self.n_steps()
            )));
        }
        if self.approach.initial_height <= 1000.0 * FT_TO_M + 20.0 {
            return Err(Error::Scenario(format!(
                "initial height {} m must exceed the 1000 ft window threshold",
                self.approach.initial_height
            )));
        }
        let sigma = self.sigma();
        if sigma.len() != OUTPUT_NAMES.len() {
            return Err(Error::Scenario(format!(
                "noise sigma list has {} entries, need {}",
                sigma.len(),
                OUTPUT_NAMES.len()
            )));
        }
        if sigma.iter().any(|s| *s < 0.0) {
            return Err(Error::Scenario("negative noise sigma".into()));
        }
        Ok(())
    }

    fn sigma(&self) -> &[f64] {
        match &self.noise {
            NoiseSpec::Constant { sigma } => sigma,
            NoiseSpec::Step { sigma, .. } => sigma,
            NoiseSpec::Smooth { sigma, .. } => sigma,
        }
    }

    /// Variance modulation factor at step `k`.
    fn variance_factor(&self, k: usize, n: usize) -> f64 {
        match &self.noise {
            NoiseSpec::Constant { .. } => 1.0,
            NoiseSpec::Step {
                factor,
                at_fraction,
                ..
            } => {
                if (k as f64) < at_fraction * n as f64 {
                    1.0
                } else {
                    *factor
                }
            }
            NoiseSpec::Smooth {
                amplitude,
                period_s,
                ..
            } => {
                let t = k as f64 / self.rate_hz;
                (amplitude * (2.0 * std::f64::consts::PI * t / period_s).sin()).exp()
            }
        }
    }

    /// The true measurement-noise schedule.
    pub fn r_true(&self, n: usize) -> Result<CovarianceSchedule> {
        let n_y = OUTPUT_NAMES.len();
        let sigma = self.sigma();
        let mut corr = DMatrix::<f64>::identity(n_y, n_y);
        for c in &self.correlations {
            let i = OUTPUT_NAMES
                .iter()
                .position(|n| *n == c.a)
                .ok_or_else(|| Error::Scenario(format!("unknown output '{}'", c.a)))?;
            let j = OUTPUT_NAMES
                .iter()
                .position(|n| *n == c.b)
                .ok_or_else(|| Error::Scenario(format!("unknown output '{}'", c.b)))?;
            if c.rho.abs() >= 1.0 {
                return Err(Error::Scenario(format!(
                    "correlation {} between {} and {} is not in (-1, 1)",
                    c.rho, c.a, c.b
                )));
            }
            corr[(i, j)] = c.rho;
            corr[(j, i)] = c.rho;
        }
        let mats: Vec<DMatrix<f64>> = (0..n)
            .map(|k| {
                let m = self.variance_factor(k, n);
                let mut r = corr.clone();
                for i in 0..n_y {
                    for j in 0..n_y {
                        r[(i, j)] *= sigma[i] * sigma[j] * m;
                    }
                }
                r
            })
            .collect();
        // Built directly: oracle scenarios may use semidefinite noise
        // (zero sigma on some outputs), which the validating constructor
        // rejects. Schedules fed back into the smoother are always
        // positive definite.
        Ok(CovarianceSchedule::Varying(mats))
    }
}

/// Ground-truth phase boundaries of a simulated landing, from the
/// profile itself.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseInfo {
    /// Final descent through 1000 ft radio altitude, s.
    pub window_start_s: f64,
    /// Touchdown (profile height below 5 ft), s.
    pub touchdown_s: f64,
    /// Ground speed first below 15 m/s, s.
    pub taxi_s: f64,
}

/// Output of [`simulate_flight`].
#[derive(Debug, Clone)]
pub struct SimulatedFlight {
    pub truth: TimeSeriesTable,
    pub measured: TimeSeriesTable,
    pub phases: PhaseInfo,
    pub r_true: CovarianceSchedule,
    /// Equivalent diagonal process-noise matrix (see module docs).
    pub equivalent_q: DMatrix<f64>,
    pub theta_true: ThetaParams,
}

fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else if z < -30.0 {
        z.exp()
    } else {
        z.exp().ln_1p()
    }
}

fn logistic(z: f64) -> f64 {
    if z > 30.0 {
        1.0
    } else if z < -30.0 {
        0.0
    } else {
        1.0 / (1.0 + (-z).exp())
    }
}

/// Closed-form trajectory profile with numerically evaluated
/// derivatives. All members are smooth, so low-order central
/// differences at a moderate step are accurate far beyond the injected
/// noise levels.
struct Profile<'a> {
    sc: &'a Scenario,
    /// Time where the softplus height profile reaches the ground.
    t_ground: f64,
    /// Deceleration midpoint.
    t_decel: f64,
    /// Height sink rate on the glide path, m/s.
    sink_rate: f64,
    x_offset: f64,
    heading: f64,
}

const D_STEP: f64 = 0.05;

fn d1<F: Fn(f64) -> f64>(f: &F, t: f64) -> f64 {
    (f(t + D_STEP) - f(t - D_STEP)) / (2.0 * D_STEP)
}

fn d2<F: Fn(f64) -> f64>(f: &F, t: f64) -> f64 {
    (f(t + D_STEP) - 2.0 * f(t) + f(t - D_STEP)) / (D_STEP * D_STEP)
}

impl<'a> Profile<'a> {
    fn new(sc: &'a Scenario, heading: f64) -> Result<Self> {
        let ap = &sc.approach;
        let sink_rate = ap.approach_speed * ap.glide_path_deg.to_radians().tan();
        if sink_rate <= 0.0 {
            return Err(Error::Scenario("glide path angle must be positive".into()));
        }
        // Height profile z(t) = sink * tau * sp((t_g - t)/tau); choose
        // t_g so that z(0) equals the initial height.
        let tau = ap.flare_time_const;
        let target = ap.initial_height / (sink_rate * tau);
        let mut lo = 0.0;
        let mut hi = 1e6;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if softplus(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let t_ground = tau * 0.5 * (lo + hi);
        let t_decel = t_ground + ap.decel_delay;
        let mut profile = Self {
            sc,
            t_ground,
            t_decel,
            sink_rate,
            x_offset: 0.0,
            heading,
        };
        // Anchor the along-track position at the 5 ft height crossing,
        // which is where the window logic places touchdown.
        let t_touchdown = profile.height_crossing(5.0 * FT_TO_M);
        profile.x_offset = ap.touchdown_x - profile.x_raw(t_touchdown);
        if profile.taxi_time() + 2.0 > sc.duration_s {
            return Err(Error::Scenario(format!(
                "duration {} s ends before the rollout reaches taxi speed (needs ~{:.0} s)",
                sc.duration_s,
                profile.taxi_time() + 2.0
            )));
        }
        Ok(profile)
    }

    /// Height above the runway, m.
    fn z(&self, t: f64) -> f64 {
        let tau = self.sc.approach.flare_time_const;
        self.sink_rate * tau * softplus((self.t_ground - t) / tau)
    }

    /// Along-track ground speed, m/s.
    fn speed(&self, t: f64) -> f64 {
        let ap = &self.sc.approach;
        ap.taxi_speed
            + (ap.approach_speed - ap.taxi_speed)
                * logistic((self.t_decel - t) / ap.decel_time_const)
    }

    fn x_raw(&self, t: f64) -> f64 {
        let ap = &self.sc.approach;
        let tau = ap.decel_time_const;
        ap.taxi_speed * t
            + (ap.approach_speed - ap.taxi_speed)
                * tau
                * (softplus(self.t_decel / tau) - softplus((self.t_decel - t) / tau))
    }

    fn x(&self, t: f64) -> f64 {
        self.x_offset + self.x_raw(t)
    }

    fn y(&self, t: f64) -> f64 {
        let ap = &self.sc.approach;
        ap.lateral_amplitude
            * (2.0 * std::f64::consts::PI * t / ap.lateral_period).sin()
            * logistic((self.t_ground - t) / 3.0)
    }

    fn pitch(&self, t: f64) -> f64 {
        let ap = &self.sc.approach;
        let flare = ap.pitch_flare_deg.to_radians()
            * (-((t - self.t_ground) / (1.8 * ap.flare_time_const)).powi(2)).exp();
        let approach =
            ap.pitch_approach_deg.to_radians() * logistic((self.t_ground + 6.0 - t) / 2.5);
        approach + flare
    }

    fn roll(&self, t: f64) -> f64 {
        let ap = &self.sc.approach;
        ap.roll_amplitude_deg.to_radians()
            * (2.0 * std::f64::consts::PI * t / ap.roll_period).sin()
            * logistic((self.t_ground - t) / 2.0)
    }

    fn yaw(&self, t: f64) -> f64 {
        let ap = &self.sc.approach;
        self.heading + ap.crab_deg.to_radians() * logistic((self.t_ground - t) / 2.0)
    }

    fn wind(&self, t: f64) -> Vector3<f64> {
        let w = &self.sc.wind;
        let omega = 2.0 * std::f64::consts::PI / w.gust_period;
        Vector3::new(
            w.mean_north + w.gust_amplitude * (omega * t).sin(),
            w.mean_east + w.gust_amplitude * (omega * t + 2.1).sin(),
            w.mean_down + 0.3 * w.gust_amplitude * (omega * t + 4.2).sin(),
        )
    }

    /// Time where the profile height crosses the given value, by
    /// bisection over the descending branch.
    fn height_crossing(&self, height: f64) -> f64 {
        let mut lo = 0.0;
        let mut hi = self.t_ground + 40.0 * self.sc.approach.flare_time_const;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.z(mid) > height {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    fn taxi_time(&self) -> f64 {
        let mut lo = self.t_ground;
        let mut hi = self.t_decel + 40.0 * self.sc.approach.decel_time_const;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.speed(mid) > 15.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    fn phases(&self) -> PhaseInfo {
        PhaseInfo {
            window_start_s: self.height_crossing(1000.0 * FT_TO_M),
            touchdown_s: self.height_crossing(5.0 * FT_TO_M),
            taxi_s: self.taxi_time(),
        }
    }

    fn body_rates(&self, t: f64) -> Vector3<f64> {
        let phi = self.roll(t);
        let theta = self.pitch(t);
        let rates = (
            d1(&|s| self.roll(s), t),
            d1(&|s| self.pitch(s), t),
            d1(&|s| self.yaw(s), t),
        );
        let (p, q, r) = body_rates_from_euler_rates(phi, theta, rates);
        Vector3::new(p, q, r)
    }

    /// Full 27-component state of the profile at time `t`.
    fn state(&self, t: f64) -> DVector<f64> {
        use flight::state::*;
        let mut x = DVector::zeros(N_X);
        let phi = self.roll(t);
        let theta = self.pitch(t);
        let psi = self.yaw(t);
        let (srw, crw) = self.heading.sin_cos();
        let xd = d1(&|s| self.x(s), t);
        let yd = d1(&|s| self.y(s), t);
        let zd = d1(&|s| self.z(s), t);
        let v_n = crw * xd - srw * yd;
        let v_e = srw * xd + crw * yd;
        let v_d = -zd;
        let r_ob = rotation_body_to_ned(phi, theta, psi);
        let v_b = r_ob.transpose() * Vector3::new(v_n, v_e, v_d);
        x[U_K] = v_b.x;
        x[V_K] = v_b.y;
        x[W_K] = v_b.z;
        x[PHI] = phi;
        x[THETA] = theta;
        x[PSI] = psi;
        x[X_N] = self.x(t);
        x[Y_N] = self.y(t);
        x[Z_N] = self.z(t);
        let omega = self.body_rates(t);
        for (block, comp) in [(P, 0usize), (Q, 1), (R, 2)] {
            let f = |s: f64| self.body_rates(s)[comp];
            x[block] = omega[comp];
            x[block + 1] = d1(&f, t);
            x[block + 2] = d2(&f, t);
        }
        for (block, comp) in [(U_W, 0usize), (V_W, 1), (W_W, 2)] {
            let f = |s: f64| self.wind(s)[comp];
            x[block] = self.wind(t)[comp];
            x[block + 1] = d1(&f, t);
            x[block + 2] = d2(&f, t);
        }
        x
    }

    /// Specific force the accelerometers read along the profile:
    /// `a = R_BO (v_dot_O - g_O)`.
    fn true_accel(&self, t: f64) -> Vector3<f64> {
        let (srw, crw) = self.heading.sin_cos();
        let xdd = d2(&|s| self.x(s), t);
        let ydd = d2(&|s| self.y(s), t);
        let zdd = d2(&|s| self.z(s), t);
        let a_n = crw * xdd - srw * ydd;
        let a_e = srw * xdd + crw * ydd;
        let a_d = -zdd;
        let r_ob = rotation_body_to_ned(self.roll(t), self.pitch(t), self.yaw(t));
        r_ob.transpose() * Vector3::new(a_n, a_e, a_d - GRAVITY)
    }

    /// Chain-top value (second derivative) of one chained signal.
    fn chain_top(&self, which: usize, t: f64) -> f64 {
        if which < 3 {
            d2(&|s| self.body_rates(s)[which], t)
        } else {
            d2(&|s| self.wind(s)[which - 3], t)
        }
    }
}

/// Matrix square root of a PSD matrix: Cholesky when possible, else an
/// eigenvalue square root with negative eigenvalues clamped to zero.
fn psd_cholesky(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.iter().all(|v| *v == 0.0) {
        return Ok(DMatrix::zeros(m.nrows(), m.ncols()));
    }
    if let Some(c) = m.clone().cholesky() {
        return Ok(c.l());
    }
    let eig = m.clone().symmetric_eigen();
    let tol = -1e-9 * m.trace().abs().max(1e-300);
    if eig.eigenvalues.iter().any(|&e| e < tol) {
        return Err(Error::Scenario(
            "noise covariance has negative eigenvalues".into(),
        ));
    }
    let mut l = eig.eigenvectors.clone();
    for j in 0..l.ncols() {
        let s = eig.eigenvalues[j].max(0.0).sqrt();
        for i in 0..l.nrows() {
            l[(i, j)] *= s;
        }
    }
    Ok(l)
}

/// Generate one synthetic landing for the given model.
pub fn simulate_flight(sc: &Scenario, model: &FlightModel) -> Result<SimulatedFlight> {
    sc.validate()?;
    let profile = Profile::new(sc, model.runway.heading)?;
    let n = sc.n_steps();
    let dt = 1.0 / sc.rate_hz;
    let theta = sc.theta_true.to_vector();
    let n_y = OUTPUT_NAMES.len();

    let r_true = sc.r_true(n)?;
    let chol: Vec<DMatrix<f64>> = (0..n)
        .map(|k| psd_cholesky(r_true.at(k)))
        .collect::<Result<_>>()?;

    // Inverse dynamics: inputs held constant over each step. The chain
    // drivers reproduce the profile's top derivatives across the step.
    // Their mean square is taken over the pre-taxi span, the part of
    // the flight the smoother consumes.
    let taxi_step = ((profile.taxi_time() / dt) as usize).min(n);
    let mut inputs_truth: Vec<DVector<f64>> = Vec::with_capacity(n);
    let mut driver_ms = [0.0f64; 6];
    for k in 0..n {
        let t = k as f64 * dt;
        let a = profile.true_accel(t);
        let mut u = DVector::zeros(flight::N_U);
        u[0] = a.x + sc.theta_true.b_ax;
        u[1] = a.y + sc.theta_true.b_ay;
        u[2] = a.z + sc.theta_true.b_az;
        for chain in 0..6 {
            let top_now = profile.chain_top(chain, t);
            let top_next = profile.chain_top(chain, t + dt);
            let driver = (top_next - top_now) / dt;
            u[3 + 3 * chain + 2] = driver;
            if k < taxi_step {
                driver_ms[chain] += driver * driver / taxi_step as f64;
            }
        }
        inputs_truth.push(u);
    }

    // Truth states by integrating the model itself.
    let mut states: Vec<DVector<f64>> = Vec::with_capacity(n);
    states.push(profile.state(0.0));
    for k in 1..n {
        let next = propagate(model, &states[k - 1], &inputs_truth[k - 1], &theta, dt)
            .map_err(|e| Error::Scenario(format!("truth integration failed at step {k}: {e}")))?;
        states.push(next);
    }

    let mut outputs: Vec<DVector<f64>> = Vec::with_capacity(n);
    for (k, x) in states.iter().enumerate() {
        let y = model
            .g(x, &inputs_truth[k], &theta)
            .map_err(|e| Error::Scenario(format!("truth output failed at step {k}: {e}")))?;
        outputs.push(y);
    }

    // Noise streams: 0 for outputs, 1 for inputs.
    let mut rng_out = ChaCha8Rng::seed_from_u64(sc.seed);
    rng_out.set_stream(0);
    let mut rng_in = ChaCha8Rng::seed_from_u64(sc.seed);
    rng_in.set_stream(1);

    let mut measured_outputs: Vec<DVector<f64>> = Vec::with_capacity(n);
    let mut measured_inputs: Vec<DVector<f64>> = Vec::with_capacity(n);
    for k in 0..n {
        let z = DVector::from_fn(n_y, |_, _| rng_out.sample::<f64, _>(StandardNormal));
        measured_outputs.push(&outputs[k] + &chol[k] * z);
        let mut u = DVector::zeros(3);
        for i in 0..3 {
            let w: f64 = rng_in.sample(StandardNormal);
            u[i] = inputs_truth[k][i] + sc.accel_noise_sigma * w;
        }
        measured_inputs.push(u);
    }

    let mut truth = TimeSeriesTable::new(0.0, dt, n)?;
    // State columns carry an x_ prefix so they cannot collide with the
    // output columns of the same name (attitude, position, rates, wind).
    for (i, name) in STATE_NAMES.iter().enumerate() {
        truth.insert_column(
            SignalSpec::simulated(&format!("x_{name}"), "state", sc.rate_hz),
            states.iter().map(|x| Some(x[i])).collect(),
        )?;
    }
    for (i, name) in OUTPUT_NAMES.iter().enumerate() {
        truth.insert_column(
            SignalSpec::simulated(name, OUTPUT_UNITS[i], sc.rate_hz),
            outputs.iter().map(|y| Some(y[i])).collect(),
        )?;
    }
    for (i, name) in INPUT_NAMES.iter().enumerate() {
        truth.insert_column(
            SignalSpec::simulated(name, "m/s^2", sc.rate_hz),
            inputs_truth.iter().map(|u| Some(u[i])).collect(),
        )?;
    }

    let mut measured = TimeSeriesTable::new(0.0, dt, n)?;
    for (i, name) in INPUT_NAMES.iter().enumerate() {
        measured.insert_column(
            SignalSpec::simulated(name, "m/s^2", sc.rate_hz),
            measured_inputs.iter().map(|u| Some(u[i])).collect(),
        )?;
    }
    for (i, name) in OUTPUT_NAMES.iter().enumerate() {
        measured.insert_column(
            SignalSpec::simulated(name, OUTPUT_UNITS[i], sc.rate_hz),
            measured_outputs.iter().map(|y| Some(y[i])).collect(),
        )?;
    }

    // Equivalent process noise: accelerometer variance plus the mean
    // square of the realized chain drivers, widened because the drivers
    // are smooth rather than white. A smooth driver concentrates its
    // power at low frequencies where the triple-integrator response
    // exceeds the white-noise average, so matched power alone leaves
    // the chain innovations under-covered.
    const CHAIN_WIDENING: f64 = 3.0;
    let mut q = DMatrix::zeros(flight::N_U, flight::N_U);
    for i in 0..3 {
        q[(i, i)] = sc.accel_noise_sigma * sc.accel_noise_sigma;
    }
    for (chain, ms) in driver_ms.iter().enumerate() {
        let idx = 3 + 3 * chain + 2;
        q[(idx, idx)] = ms * CHAIN_WIDENING;
    }

    Ok(SimulatedFlight {
        truth,
        measured,
        phases: profile.phases(),
        r_true,
        equivalent_q: q,
        theta_true: sc.theta_true,
    })
}

/// Discrete linear Gaussian rollout `x_{k+1} = A x_k + w_k`,
/// `y_k = C x_k + v_k`, deterministic given the seed.
pub fn simulate_lti(
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    x0: &DVector<f64>,
    n: usize,
    seed: u64,
) -> Result<(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
    let n_x = a.nrows();
    let n_y = c.nrows();
    if a.ncols() != n_x || c.ncols() != n_x || q.nrows() != n_x || r.nrows() != n_y {
        return Err(Error::Argument("inconsistent LTI dimensions".into()));
    }
    let lq = psd_cholesky(q).map_err(|_| Error::Argument("Q is not PSD".into()))?;
    let lr = psd_cholesky(r).map_err(|_| Error::Argument("R is not PSD".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut states = Vec::with_capacity(n);
    let mut outputs = Vec::with_capacity(n);
    let mut x = x0.clone();
    for _ in 0..n {
        let v = DVector::from_fn(n_y, |_, _| rng.sample::<f64, _>(StandardNormal));
        outputs.push(c * &x + &lr * v);
        states.push(x.clone());
        let w = DVector::from_fn(n_x, |_, _| rng.sample::<f64, _>(StandardNormal));
        x = a * &x + &lq * w;
    }
    Ok((states, outputs))
}

/// Write truth and measured tables plus a JSON metadata sidecar.
pub fn write_simulated_flight(
    sim: &SimulatedFlight,
    scenario: &Scenario,
    dir: &std::path::Path,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    crate::timeseries::save_table(&sim.truth, &dir.join("truth.csv"))?;
    crate::timeseries::save_table(&sim.measured, &dir.join("measured.csv"))?;
    let eq_q: Vec<f64> = (0..sim.equivalent_q.nrows())
        .map(|i| sim.equivalent_q[(i, i)])
        .collect();
    let meta = serde_json::json!({
        "phases": sim.phases,
        "seed": scenario.seed,
        "rate_hz": scenario.rate_hz,
        "duration_s": scenario.duration_s,
        "theta_true": sim.theta_true,
        "equivalent_q_diagonal": eq_q,
        "noise": scenario.noise,
    });
    std::fs::write(
        dir.join("metadata.json"),
        serde_json::to_string_pretty(&meta).expect("metadata serializes") + "\n",
    )?;
    Ok(())
}
