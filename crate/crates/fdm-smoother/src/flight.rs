//! The 27-state aircraft landing model.
//!
//! States: body-frame kinematic velocity, Euler attitude, position in a
//! runway-fixed navigation frame (origin at the threshold/centerline
//! intersection, x along the centerline, y to the right, z up),
//! integrator chains for the rotational rates, and integrator chains for
//! the NED wind components. The chains follow the
//! Estimation-Before-Modeling idea: each unmodeled signal is the head of
//! a triple `(s, s', s'')` whose top derivative is driven purely by
//! process noise through artificial inputs that are constantly zero.
//!
//! The 19-component output map reads back the usual flight-data signals,
//! including both ILS deviations. The localizer deviation follows the
//! threshold-referenced geometry with the standard 0.00145 DDM/m
//! displacement sensitivity; the glideslope deviation uses the analogous
//! geometry around the nominal glide path angle with a configurable
//! DDM-per-degree slope. No receiver clamping is modeled: the deviations
//! are smooth functions of position everywhere ahead of the antennas.
//!
//! Biases and the barometric scale factor are collected in
//! [`ThetaParams`]; wrap the model in [`crate::statespace::Augmented`] to
//! estimate them as constant states, or pass pre-calibrated values
//! directly as the theta argument to run with fixed parameters.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::smoother::SignalMap;
use crate::statespace::{CovarianceSchedule, NoiseModel, StateSpaceModel};

pub const GRAVITY: f64 = 9.80665;
/// Localizer displacement sensitivity at the runway threshold, DDM per
/// meter of lateral displacement.
pub const LLZ_DDM_PER_M: f64 = 0.00145;

/// State vector indices.
pub mod state {
    pub const U_K: usize = 0;
    pub const V_K: usize = 1;
    pub const W_K: usize = 2;
    pub const PHI: usize = 3;
    pub const THETA: usize = 4;
    pub const PSI: usize = 5;
    pub const X_N: usize = 6;
    pub const Y_N: usize = 7;
    pub const Z_N: usize = 8;
    pub const P: usize = 9;
    pub const Q: usize = 12;
    pub const R: usize = 15;
    pub const U_W: usize = 18;
    pub const V_W: usize = 21;
    pub const W_W: usize = 24;
    pub const N_X: usize = 27;
}

/// Output vector indices.
pub mod output {
    pub const V_GND: usize = 0;
    pub const H_DOT: usize = 1;
    pub const CHI_K: usize = 2;
    pub const PHI: usize = 3;
    pub const THETA: usize = 4;
    pub const PSI: usize = 5;
    pub const X_N: usize = 6;
    pub const Y_N: usize = 7;
    pub const H_BARO: usize = 8;
    pub const H_RALT: usize = 9;
    pub const D_LLZ: usize = 10;
    pub const D_GS: usize = 11;
    pub const P: usize = 12;
    pub const Q: usize = 13;
    pub const R: usize = 14;
    pub const V_A: usize = 15;
    pub const ALPHA_A: usize = 16;
    pub const U_W: usize = 17;
    pub const V_W: usize = 18;
    pub const N_Y: usize = 19;
}

pub const N_U: usize = 21;
pub const N_THETA: usize = 9;

pub const STATE_NAMES: [&str; state::N_X] = [
    "u_k", "v_k", "w_k", "phi", "theta", "psi", "x_n", "y_n", "z_n", "p", "p_d1", "p_d2", "q",
    "q_d1", "q_d2", "r", "r_d1", "r_d2", "u_w", "u_w_d1", "u_w_d2", "v_w", "v_w_d1", "v_w_d2",
    "w_w", "w_w_d1", "w_w_d2",
];

pub const OUTPUT_NAMES: [&str; output::N_Y] = [
    "v_gnd",
    "h_dot",
    "chi_k",
    "phi",
    "theta",
    "psi",
    "x_n",
    "y_n",
    "h_baro",
    "h_ralt",
    "d_llz_ddm",
    "d_gs_ddm",
    "p",
    "q",
    "r",
    "v_a",
    "alpha_a",
    "u_w",
    "v_w",
];

pub const OUTPUT_UNITS: [&str; output::N_Y] = [
    "m/s", "m/s", "rad", "rad", "rad", "rad", "m", "m", "m", "m", "DDM", "DDM", "rad/s", "rad/s",
    "rad/s", "m/s", "rad", "m/s", "m/s",
];

pub const INPUT_NAMES: [&str; 3] = ["a_x", "a_y", "a_z"];

/// Full input-slot names including the artificial zero inputs.
pub const INPUT_SLOT_NAMES: [&str; N_U] = [
    "a_x", "a_y", "a_z", "u_p1", "u_p2", "u_p3", "u_q1", "u_q2", "u_q3", "u_r1", "u_r2", "u_r3",
    "u_u1", "u_u2", "u_u3", "u_v1", "u_v2", "u_v3", "u_w1", "u_w2", "u_w3",
];

/// Angular outputs whose residuals wrap to (-pi, pi].
const ANGULAR_OUTPUTS: [usize; 5] = [
    output::CHI_K,
    output::PHI,
    output::THETA,
    output::PSI,
    output::ALPHA_A,
];

/// Bias and scale-factor parameters.
///
/// Acceleration and rate biases are subtracted from the measured values;
/// the barometric altitude carries both a scale factor and a bias; the
/// kinematic track angle carries a bias.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaParams {
    pub b_ax: f64,
    pub b_ay: f64,
    pub b_az: f64,
    pub b_p: f64,
    pub b_q: f64,
    pub b_r: f64,
    pub b_h_baro: f64,
    pub s_h_baro: f64,
    pub b_chi: f64,
}

impl Default for ThetaParams {
    fn default() -> Self {
        Self {
            b_ax: 0.0,
            b_ay: 0.0,
            b_az: 0.0,
            b_p: 0.0,
            b_q: 0.0,
            b_r: 0.0,
            b_h_baro: 0.0,
            s_h_baro: 1.0,
            b_chi: 0.0,
        }
    }
}

impl ThetaParams {
    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_vec(vec![
            self.b_ax,
            self.b_ay,
            self.b_az,
            self.b_p,
            self.b_q,
            self.b_r,
            self.b_h_baro,
            self.s_h_baro,
            self.b_chi,
        ])
    }

    pub fn from_vector(v: &DVector<f64>) -> Result<Self> {
        if v.len() != N_THETA {
            return Err(Error::Argument(format!(
                "theta vector has length {}, expected {N_THETA}",
                v.len()
            )));
        }
        Ok(Self {
            b_ax: v[0],
            b_ay: v[1],
            b_az: v[2],
            b_p: v[3],
            b_q: v[4],
            b_r: v[5],
            b_h_baro: v[6],
            s_h_baro: v[7],
            b_chi: v[8],
        })
    }

    pub fn names() -> [&'static str; N_THETA] {
        [
            "b_ax", "b_ay", "b_az", "b_p", "b_q", "b_r", "b_h_baro", "s_h_baro", "b_chi",
        ]
    }
}

/// Runway and ILS geometry in the runway-fixed navigation frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunwayGeometry {
    /// Longitudinal distance from the threshold to the localizer
    /// antenna, m; must be positive.
    pub x_llz: f64,
    /// Glideslope antenna position, m.
    pub x_gs: f64,
    pub y_gs: f64,
    /// Nominal glide path angle, rad.
    pub gs_angle: f64,
    /// Threshold elevation above mean sea level, m.
    pub threshold_elevation: f64,
    /// Runway heading, rad (direction of the +x axis in NED).
    pub heading: f64,
    /// Radio-altimeter antenna offset, m: `h_ralt = z_n + offset`.
    pub ralt_offset: f64,
    /// Glideslope deviation slope, DDM per degree of path-angle error.
    pub gs_ddm_per_deg: f64,
}

impl Default for RunwayGeometry {
    fn default() -> Self {
        Self {
            x_llz: 3800.0,
            x_gs: 300.0,
            y_gs: -120.0,
            gs_angle: 3.0f64.to_radians(),
            threshold_elevation: 450.0,
            heading: 80.0f64.to_radians(),
            ralt_offset: 0.0,
            gs_ddm_per_deg: 0.25,
        }
    }
}

#[derive(Debug, Deserialize)]
struct RunwayGeometryFile {
    x_llz_m: f64,
    x_gs_m: f64,
    y_gs_m: f64,
    gs_angle_deg: f64,
    threshold_elevation_m: f64,
    heading_deg: f64,
    #[serde(default)]
    ralt_offset_m: f64,
    #[serde(default = "default_gs_slope")]
    gs_ddm_per_deg: f64,
}

fn default_gs_slope() -> f64 {
    0.25
}

impl RunwayGeometry {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: RunwayGeometryFile =
            toml::from_str(text).map_err(|e| Error::Config(format!("runway geometry: {e}")))?;
        let rw = Self {
            x_llz: raw.x_llz_m,
            x_gs: raw.x_gs_m,
            y_gs: raw.y_gs_m,
            gs_angle: raw.gs_angle_deg.to_radians(),
            threshold_elevation: raw.threshold_elevation_m,
            heading: raw.heading_deg.to_radians(),
            ralt_offset: raw.ralt_offset_m,
            gs_ddm_per_deg: raw.gs_ddm_per_deg,
        };
        rw.validate()?;
        Ok(rw)
    }

    pub fn from_toml_file(path: &std::path::Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x_llz > 0.0) {
            return Err(Error::Config(format!(
                "localizer distance x_llz must be positive, got {}",
                self.x_llz
            )));
        }
        Ok(())
    }
}

/// Rotation matrix body -> NED for ZYX Euler angles.
pub fn rotation_body_to_ned(phi: f64, theta: f64, psi: f64) -> Matrix3<f64> {
    let (sph, cph) = phi.sin_cos();
    let (sth, cth) = theta.sin_cos();
    let (sps, cps) = psi.sin_cos();
    Matrix3::new(
        cps * cth,
        cps * sth * sph - sps * cph,
        cps * sth * cph + sps * sph,
        sps * cth,
        sps * sth * sph + cps * cph,
        sps * sth * cph - cps * sph,
        -sth,
        cth * sph,
        cth * cph,
    )
}

/// Partial derivatives of [`rotation_body_to_ned`] with respect to the
/// three Euler angles.
fn rotation_derivatives(phi: f64, theta: f64, psi: f64) -> [Matrix3<f64>; 3] {
    let (sph, cph) = phi.sin_cos();
    let (sth, cth) = theta.sin_cos();
    let (sps, cps) = psi.sin_cos();
    let d_phi = Matrix3::new(
        0.0,
        cps * sth * cph + sps * sph,
        -cps * sth * sph + sps * cph,
        0.0,
        sps * sth * cph - cps * sph,
        -sps * sth * sph - cps * cph,
        0.0,
        cth * cph,
        -cth * sph,
    );
    let d_theta = Matrix3::new(
        -cps * sth,
        cps * cth * sph,
        cps * cth * cph,
        -sps * sth,
        sps * cth * sph,
        sps * cth * cph,
        -cth,
        -sth * sph,
        -sth * cph,
    );
    let d_psi = Matrix3::new(
        -sps * cth,
        -sps * sth * sph - cps * cph,
        -sps * sth * cph + cps * sph,
        cps * cth,
        cps * sth * sph - sps * cph,
        cps * sth * cph + sps * sph,
        0.0,
        0.0,
        0.0,
    );
    [d_phi, d_theta, d_psi]
}

/// Body rates from Euler angle rates (inverse Euler kinematics).
pub fn body_rates_from_euler_rates(
    phi: f64,
    theta: f64,
    rates: (f64, f64, f64),
) -> (f64, f64, f64) {
    let (phid, thetad, psid) = rates;
    let p = phid - psid * theta.sin();
    let q = thetad * phi.cos() + psid * theta.cos() * phi.sin();
    let r = -thetad * phi.sin() + psid * theta.cos() * phi.cos();
    (p, q, r)
}

fn wrap_angle(raw: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut v = raw % two_pi;
    if v > std::f64::consts::PI {
        v -= two_pi;
    } else if v <= -std::f64::consts::PI {
        v += two_pi;
    }
    v
}

/// The aircraft landing model over a fixed runway geometry.
#[derive(Debug, Clone)]
pub struct FlightModel {
    pub runway: RunwayGeometry,
}

impl FlightModel {
    pub fn new(runway: RunwayGeometry) -> Result<Self> {
        runway.validate()?;
        Ok(Self { runway })
    }

    /// Default column mapping for tables produced by the simulator.
    pub fn default_signal_map() -> SignalMap {
        SignalMap {
            inputs: INPUT_NAMES.iter().map(|s| s.to_string()).collect(),
            outputs: OUTPUT_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// Localizer deviation in DDM from the runway-frame position.
    pub fn localizer_ddm(&self, x_n: f64, y_n: f64) -> Result<f64> {
        if x_n >= self.runway.x_llz {
            return Err(Error::Geometry(format!(
                "aircraft at x_n = {x_n} m is not threshold-side of the localizer antenna at {} m",
                self.runway.x_llz
            )));
        }
        Ok(-LLZ_DDM_PER_M * (self.runway.x_llz / (self.runway.x_llz - x_n)) * y_n)
    }

    /// Analytic partials of the localizer deviation with respect to
    /// `(x_n, y_n)`.
    pub fn localizer_ddm_jacobian(&self, x_n: f64, y_n: f64) -> Result<(f64, f64)> {
        if x_n >= self.runway.x_llz {
            return Err(Error::Geometry(
                "position behind the localizer antenna".into(),
            ));
        }
        let denom = self.runway.x_llz - x_n;
        let d_dx = -LLZ_DDM_PER_M * self.runway.x_llz * y_n / (denom * denom);
        let d_dy = -LLZ_DDM_PER_M * self.runway.x_llz / denom;
        Ok((d_dx, d_dy))
    }

    /// Glideslope deviation in DDM.
    fn glideslope_ddm(&self, x_n: f64, y_n: f64, z_n: f64) -> f64 {
        let dx = x_n - self.runway.x_gs;
        let dy = y_n - self.runway.y_gs;
        let d = (dx * dx + dy * dy).sqrt();
        let elevation = z_n.atan2(d);
        self.runway.gs_ddm_per_deg * (self.runway.gs_angle - elevation).to_degrees()
    }

    fn guard_pitch(theta: f64) -> Result<()> {
        let limit = 89.0f64.to_radians();
        if theta.abs() >= limit {
            return Err(Error::GimbalLock {
                theta_deg: theta.to_degrees(),
            });
        }
        Ok(())
    }
}

impl StateSpaceModel for FlightModel {
    fn n_x(&self) -> usize {
        state::N_X
    }
    fn n_u(&self) -> usize {
        N_U
    }
    fn n_y(&self) -> usize {
        output::N_Y
    }
    fn n_theta(&self) -> usize {
        N_THETA
    }

    fn f(&self, x: &DVector<f64>, u: &DVector<f64>, theta: &DVector<f64>) -> Result<DVector<f64>> {
        let th = ThetaParams::from_vector(theta)?;
        let phi = x[state::PHI];
        let pitch = x[state::THETA];
        let psi = x[state::PSI];
        Self::guard_pitch(pitch)?;

        let v_b = Vector3::new(x[state::U_K], x[state::V_K], x[state::W_K]);
        let omega = Vector3::new(x[state::P], x[state::Q], x[state::R]);
        let accel = Vector3::new(u[0] - th.b_ax, u[1] - th.b_ay, u[2] - th.b_az);

        let r_ob = rotation_body_to_ned(phi, pitch, psi);
        // Gravity in the body frame: R_BO * (0, 0, g).
        let g_body = r_ob.transpose() * Vector3::new(0.0, 0.0, GRAVITY);
        let v_dot = accel - omega.cross(&v_b) + g_body;

        let (sph, cph) = phi.sin_cos();
        let tth = pitch.tan();
        let cth = pitch.cos();
        let phi_dot = omega.x + tth * (omega.y * sph + omega.z * cph);
        let theta_dot = omega.y * cph - omega.z * sph;
        let psi_dot = (omega.y * sph + omega.z * cph) / cth;

        // NED velocity, rotated into the runway frame (z up).
        let v_o = r_ob * v_b;
        let (srw, crw) = self.runway.heading.sin_cos();
        let x_n_dot = crw * v_o.x + srw * v_o.y;
        let y_n_dot = -srw * v_o.x + crw * v_o.y;
        let z_n_dot = -v_o.z;

        let mut dx = DVector::zeros(state::N_X);
        dx[state::U_K] = v_dot.x;
        dx[state::V_K] = v_dot.y;
        dx[state::W_K] = v_dot.z;
        dx[state::PHI] = phi_dot;
        dx[state::THETA] = theta_dot;
        dx[state::PSI] = psi_dot;
        dx[state::X_N] = x_n_dot;
        dx[state::Y_N] = y_n_dot;
        dx[state::Z_N] = z_n_dot;
        // Integrator chains: d/dt (s, s', s'') = (s' + u1, s'' + u2, u3).
        for (block, base) in [
            state::P,
            state::Q,
            state::R,
            state::U_W,
            state::V_W,
            state::W_W,
        ]
        .iter()
        .zip([3usize, 6, 9, 12, 15, 18])
        {
            let s = *block;
            dx[s] = x[s + 1] + u[base];
            dx[s + 1] = x[s + 2] + u[base + 1];
            dx[s + 2] = u[base + 2];
        }
        Ok(dx)
    }

    fn g(&self, x: &DVector<f64>, _u: &DVector<f64>, theta: &DVector<f64>) -> Result<DVector<f64>> {
        let th = ThetaParams::from_vector(theta)?;
        let rw = &self.runway;
        let phi = x[state::PHI];
        let pitch = x[state::THETA];
        let psi = x[state::PSI];
        let v_b = Vector3::new(x[state::U_K], x[state::V_K], x[state::W_K]);
        let r_ob = rotation_body_to_ned(phi, pitch, psi);
        let v_o = r_ob * v_b;

        let wind = Vector3::new(x[state::U_W], x[state::V_W], x[state::W_W]);
        let v_air = v_b - r_ob.transpose() * wind;

        let mut y = DVector::zeros(output::N_Y);
        y[output::V_GND] = (v_o.x * v_o.x + v_o.y * v_o.y).sqrt();
        y[output::H_DOT] = -v_o.z;
        y[output::CHI_K] = v_o.y.atan2(v_o.x) + th.b_chi;
        y[output::PHI] = phi;
        y[output::THETA] = pitch;
        y[output::PSI] = psi;
        y[output::X_N] = x[state::X_N];
        y[output::Y_N] = x[state::Y_N];
        y[output::H_BARO] = th.s_h_baro * (x[state::Z_N] + rw.threshold_elevation) + th.b_h_baro;
        y[output::H_RALT] = x[state::Z_N] + rw.ralt_offset;
        y[output::D_LLZ] = self.localizer_ddm(x[state::X_N], x[state::Y_N])?;
        y[output::D_GS] = self.glideslope_ddm(x[state::X_N], x[state::Y_N], x[state::Z_N]);
        y[output::P] = x[state::P] + th.b_p;
        y[output::Q] = x[state::Q] + th.b_q;
        y[output::R] = x[state::R] + th.b_r;
        y[output::V_A] = v_air.norm();
        y[output::ALPHA_A] = v_air.z.atan2(v_air.x);
        y[output::U_W] = x[state::U_W];
        y[output::V_W] = x[state::V_W];
        Ok(y)
    }

    fn jac_g_state(
        &self,
        x: &DVector<f64>,
        _u: &DVector<f64>,
        theta: &DVector<f64>,
    ) -> Option<DMatrix<f64>> {
        let th = ThetaParams::from_vector(theta).ok()?;
        let rw = &self.runway;
        let phi = x[state::PHI];
        let pitch = x[state::THETA];
        let psi = x[state::PSI];
        let v_b = Vector3::new(x[state::U_K], x[state::V_K], x[state::W_K]);
        let r_ob = rotation_body_to_ned(phi, pitch, psi);
        let dr = rotation_derivatives(phi, pitch, psi);
        let v_o = r_ob * v_b;

        let mut jac = DMatrix::zeros(output::N_Y, state::N_X);

        // d v_o / d state: columns for (u_k, v_k, w_k) are R_OB, columns
        // for (phi, theta, psi) are dR * v_b.
        let mut dv_o = [[0.0f64; 6]; 3];
        for row in 0..3 {
            for col in 0..3 {
                dv_o[row][col] = r_ob[(row, col)];
                dv_o[row][3 + col] = (dr[col] * v_b)[row];
            }
        }
        let cols = [
            state::U_K,
            state::V_K,
            state::W_K,
            state::PHI,
            state::THETA,
            state::PSI,
        ];

        let v_h2 = v_o.x * v_o.x + v_o.y * v_o.y;
        let v_h = v_h2.sqrt();
        for (j, &col) in cols.iter().enumerate() {
            if v_h > 1e-9 {
                jac[(output::V_GND, col)] = (v_o.x * dv_o[0][j] + v_o.y * dv_o[1][j]) / v_h;
            }
            jac[(output::H_DOT, col)] = -dv_o[2][j];
            if v_h2 > 1e-18 {
                jac[(output::CHI_K, col)] = (v_o.x * dv_o[1][j] - v_o.y * dv_o[0][j]) / v_h2;
            }
        }

        jac[(output::PHI, state::PHI)] = 1.0;
        jac[(output::THETA, state::THETA)] = 1.0;
        jac[(output::PSI, state::PSI)] = 1.0;
        jac[(output::X_N, state::X_N)] = 1.0;
        jac[(output::Y_N, state::Y_N)] = 1.0;

        jac[(output::H_BARO, state::Z_N)] = th.s_h_baro;
        jac[(output::H_RALT, state::Z_N)] = 1.0;

        if let Ok((d_dx, d_dy)) = self.localizer_ddm_jacobian(x[state::X_N], x[state::Y_N]) {
            jac[(output::D_LLZ, state::X_N)] = d_dx;
            jac[(output::D_LLZ, state::Y_N)] = d_dy;
        }

        let dx = x[state::X_N] - rw.x_gs;
        let dy = x[state::Y_N] - rw.y_gs;
        let z = x[state::Z_N];
        let d2 = dx * dx + dy * dy;
        let d = d2.sqrt();
        let denom = d2 + z * z;
        if d > 1e-9 && denom > 1e-18 {
            let scale = rw.gs_ddm_per_deg * 180.0 / std::f64::consts::PI;
            jac[(output::D_GS, state::X_N)] = scale * z * dx / (d * denom);
            jac[(output::D_GS, state::Y_N)] = scale * z * dy / (d * denom);
            jac[(output::D_GS, state::Z_N)] = -scale * d / denom;
        }

        jac[(output::P, state::P)] = 1.0;
        jac[(output::Q, state::Q)] = 1.0;
        jac[(output::R, state::R)] = 1.0;

        // Airspeed rows: v_air = v_b - R_BO * wind.
        let wind = Vector3::new(x[state::U_W], x[state::V_W], x[state::W_W]);
        let r_bo = r_ob.transpose();
        let v_air = v_b - r_bo * wind;
        let va_norm = v_air.norm();
        let wind_cols = [state::U_W, state::V_W, state::W_W];
        let dva = |j: usize, comp: usize| -> f64 {
            if j < 3 {
                if j == comp {
                    1.0
                } else {
                    0.0
                }
            } else if j < 6 {
                -(dr[j - 3].transpose() * wind)[comp]
            } else {
                -r_bo[(comp, j - 6)]
            }
        };
        let all_cols: Vec<usize> = cols
            .iter()
            .copied()
            .chain(wind_cols.iter().copied())
            .collect();
        for (j, &col) in all_cols.iter().enumerate() {
            let dvax = dva(j, 0);
            let dvay = dva(j, 1);
            let dvaz = dva(j, 2);
            if va_norm > 1e-9 {
                jac[(output::V_A, col)] =
                    (v_air.x * dvax + v_air.y * dvay + v_air.z * dvaz) / va_norm;
            }
            let uz2 = v_air.x * v_air.x + v_air.z * v_air.z;
            if uz2 > 1e-18 {
                jac[(output::ALPHA_A, col)] = (v_air.x * dvaz - v_air.z * dvax) / uz2;
            }
        }

        jac[(output::U_W, state::U_W)] = 1.0;
        jac[(output::V_W, state::V_W)] = 1.0;
        Some(jac)
    }

    fn jac_f_theta(
        &self,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
        _theta: &DVector<f64>,
    ) -> Option<DMatrix<f64>> {
        // Only the acceleration biases enter f: v_dot = (a_m - b_a) + ...
        let mut jac = DMatrix::zeros(state::N_X, N_THETA);
        jac[(state::U_K, 0)] = -1.0;
        jac[(state::V_K, 1)] = -1.0;
        jac[(state::W_K, 2)] = -1.0;
        Some(jac)
    }

    fn jac_g_theta(
        &self,
        x: &DVector<f64>,
        _u: &DVector<f64>,
        _theta: &DVector<f64>,
    ) -> Option<DMatrix<f64>> {
        let mut jac = DMatrix::zeros(output::N_Y, N_THETA);
        jac[(output::CHI_K, 8)] = 1.0; // b_chi
        jac[(output::H_BARO, 6)] = 1.0; // b_h_baro
        jac[(output::H_BARO, 7)] = x[state::Z_N] + self.runway.threshold_elevation; // s_h_baro
        jac[(output::P, 3)] = 1.0;
        jac[(output::Q, 4)] = 1.0;
        jac[(output::R, 5)] = 1.0;
        Some(jac)
    }

    fn output_names(&self) -> Vec<String> {
        OUTPUT_NAMES.iter().map(|s| s.to_string()).collect()
    }

    fn state_names(&self) -> Vec<String> {
        STATE_NAMES.iter().map(|s| s.to_string()).collect()
    }

    fn wrap_residual(&self, component: usize, raw: f64) -> f64 {
        if ANGULAR_OUTPUTS.contains(&component) {
            wrap_angle(raw)
        } else {
            raw
        }
    }
}

/// Per-signal standard deviations for the constant first-iteration
/// noise model and the diagonal priors, loaded from TOML. The shipped
/// defaults come from sensor-class reasoning and can be overridden per
/// entry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Measurement-noise standard deviation per output name.
    pub r_sigma: indexmap::IndexMap<String, f64>,
    /// Input/process-noise standard deviation per input slot name.
    pub q_sigma: indexmap::IndexMap<String, f64>,
    /// Prior standard deviation per state name (including theta names).
    pub prior_sigma: indexmap::IndexMap<String, f64>,
}

pub const DEFAULT_NOISE_TOML: &str = include_str!("../config/default_noise.toml");

impl Default for NoiseConfig {
    fn default() -> Self {
        toml::from_str(DEFAULT_NOISE_TOML).expect("embedded default noise config parses")
    }
}

impl NoiseConfig {
    /// Defaults with per-entry overrides from a TOML file.
    pub fn from_toml_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::default();
        let overrides: NoiseConfigOverrides =
            toml::from_str(&text).map_err(|e| Error::Config(format!("noise config: {e}")))?;
        for (k, v) in overrides.r_sigma.unwrap_or_default() {
            cfg.r_sigma.insert(k, v);
        }
        for (k, v) in overrides.q_sigma.unwrap_or_default() {
            cfg.q_sigma.insert(k, v);
        }
        for (k, v) in overrides.prior_sigma.unwrap_or_default() {
            cfg.prior_sigma.insert(k, v);
        }
        Ok(cfg)
    }

    fn sigma(&self, map: &indexmap::IndexMap<String, f64>, name: &str) -> Result<f64> {
        map.get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("noise config is missing an entry for '{name}'")))
    }

    pub fn r_diagonal(&self) -> Result<DMatrix<f64>> {
        let mut r = DMatrix::zeros(output::N_Y, output::N_Y);
        for (i, name) in OUTPUT_NAMES.iter().enumerate() {
            let s = self.sigma(&self.r_sigma, name)?;
            r[(i, i)] = s * s;
        }
        Ok(r)
    }

    pub fn q_diagonal(&self) -> Result<DMatrix<f64>> {
        let mut q = DMatrix::zeros(N_U, N_U);
        for (i, name) in INPUT_SLOT_NAMES.iter().enumerate() {
            let s = self.sigma(&self.q_sigma, name)?;
            q[(i, i)] = s * s;
        }
        Ok(q)
    }

    /// Diagonal prior covariance over the augmented state
    /// (27 base states followed by the 9 parameters).
    pub fn prior_covariance(&self) -> Result<DMatrix<f64>> {
        let n = state::N_X + N_THETA;
        let mut p = DMatrix::zeros(n, n);
        for (i, name) in STATE_NAMES.iter().enumerate() {
            let s = self.sigma(&self.prior_sigma, name)?;
            p[(i, i)] = s * s;
        }
        for (j, name) in ThetaParams::names().iter().enumerate() {
            let s = self.sigma(&self.prior_sigma, name)?;
            let i = state::N_X + j;
            p[(i, i)] = s * s;
        }
        Ok(p)
    }
}

#[derive(Debug, Deserialize)]
struct NoiseConfigOverrides {
    r_sigma: Option<indexmap::IndexMap<String, f64>>,
    q_sigma: Option<indexmap::IndexMap<String, f64>>,
    prior_sigma: Option<indexmap::IndexMap<String, f64>>,
}

/// Constant diagonal noise model from a configuration table.
pub fn default_noise(cfg: &NoiseConfig) -> Result<NoiseModel> {
    let r = cfg.r_diagonal()?;
    let q = cfg.q_diagonal()?;
    NoiseModel::new(q, CovarianceSchedule::constant(r)?)
}
