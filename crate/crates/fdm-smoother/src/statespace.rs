//! Continuous-time state-space models with additive input/output noise,
//! their fixed-step discretization, and their linearization.
//!
//! A model is `x' = f(x, u, theta)`, `y = g(x, u, theta)` with constant
//! parameters `theta`. Propagation between measurement instants uses one
//! fixed-step 4th-order Runge-Kutta step with the input held constant;
//! the matching discrete state-transition Jacobian is the 4th-order
//! polynomial `I + dtA + (dtA)^2/2 + (dtA)^3/6 + (dtA)^4/24`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Continuous-time model interface. Implementations must be pure: all
/// methods are reentrant and safe to call from multiple threads.
pub trait StateSpaceModel: Sync {
    fn n_x(&self) -> usize;
    fn n_u(&self) -> usize;
    fn n_y(&self) -> usize;
    fn n_theta(&self) -> usize;

    /// State derivative.
    fn f(&self, x: &DVector<f64>, u: &DVector<f64>, theta: &DVector<f64>) -> Result<DVector<f64>>;

    /// Output map.
    fn g(&self, x: &DVector<f64>, u: &DVector<f64>, theta: &DVector<f64>) -> Result<DVector<f64>>;

    /// Analytic state Jacobian of `f`, if available.
    fn jac_f_state(
        &self,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
        _theta: &DVector<f64>,
    ) -> Option<DMatrix<f64>> {
        None
    }

    /// Analytic state Jacobian of `g`, if available.
    fn jac_g_state(
        &self,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
        _theta: &DVector<f64>,
    ) -> Option<DMatrix<f64>> {
        None
    }

    /// Analytic parameter Jacobian of `f`, if available.
    fn jac_f_theta(
        &self,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
        _theta: &DVector<f64>,
    ) -> Option<DMatrix<f64>> {
        None
    }

    /// Analytic parameter Jacobian of `g`, if available.
    fn jac_g_theta(
        &self,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
        _theta: &DVector<f64>,
    ) -> Option<DMatrix<f64>> {
        None
    }

    /// Output component names, used in reports and serialized files.
    fn output_names(&self) -> Vec<String> {
        (0..self.n_y()).map(|i| format!("y{i}")).collect()
    }

    /// State component names.
    fn state_names(&self) -> Vec<String> {
        (0..self.n_x()).map(|i| format!("x{i}")).collect()
    }

    /// Map a raw output residual onto its canonical range. Angular
    /// outputs wrap to (-pi, pi]; everything else passes through.
    fn wrap_residual(&self, _component: usize, raw: f64) -> f64 {
        raw
    }
}

/// Which model function a Jacobian refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JacobianOf {
    StateFn,
    OutputFn,
}

/// One fixed-step RK4 step of `x' = f(x, u, theta)` over `dt`, with the
/// input held constant.
pub fn propagate(
    model: &dyn StateSpaceModel,
    x: &DVector<f64>,
    u: &DVector<f64>,
    theta: &DVector<f64>,
    dt: f64,
) -> Result<DVector<f64>> {
    if !(dt > 0.0) {
        return Err(Error::Argument(format!("dt must be positive, got {dt}")));
    }
    let k1 = model.f(x, u, theta)?;
    let k2 = model.f(&(x + &k1 * (dt / 2.0)), u, theta)?;
    let k3 = model.f(&(x + &k2 * (dt / 2.0)), u, theta)?;
    let k4 = model.f(&(x + &k3 * dt), u, theta)?;
    let out = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    for (i, v) in out.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::Divergence {
                state_index: i,
                step: None,
            });
        }
    }
    Ok(out)
}

/// Finite-difference step per component: `max(1e-6, 1e-6 |x_i|)`.
fn fd_step(xi: f64) -> f64 {
    (1e-6f64).max(1e-6 * xi.abs())
}

fn central_differences<F>(x: &DVector<f64>, n_out: usize, eval: F) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let n = x.len();
    let mut jac = DMatrix::zeros(n_out, n);
    let mut xp = x.clone();
    let mut xm = x.clone();
    for i in 0..n {
        let h = fd_step(x[i]);
        xp[i] = x[i] + h;
        xm[i] = x[i] - h;
        let fp = eval(&xp)?;
        let fm = eval(&xm)?;
        xp[i] = x[i];
        xm[i] = x[i];
        for r in 0..n_out {
            jac[(r, i)] = (fp[r] - fm[r]) / (2.0 * h);
        }
    }
    Ok(jac)
}

fn check_finite(jac: DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if jac.iter().any(|v| !v.is_finite()) {
        return Err(Error::Linearization(format!(
            "{what} Jacobian contains non-finite entries"
        )));
    }
    Ok(jac)
}

/// State Jacobian of `f` or `g`: analytic when the model provides one,
/// otherwise central finite differences.
pub fn jacobian_state(
    model: &dyn StateSpaceModel,
    x: &DVector<f64>,
    u: &DVector<f64>,
    theta: &DVector<f64>,
    which: JacobianOf,
) -> Result<DMatrix<f64>> {
    let jac = match which {
        JacobianOf::StateFn => match model.jac_f_state(x, u, theta) {
            Some(j) => j,
            None => central_differences(x, model.n_x(), |xv| model.f(xv, u, theta))?,
        },
        JacobianOf::OutputFn => match model.jac_g_state(x, u, theta) {
            Some(j) => j,
            None => central_differences(x, model.n_y(), |xv| model.g(xv, u, theta))?,
        },
    };
    check_finite(
        jac,
        match which {
            JacobianOf::StateFn => "state-function",
            JacobianOf::OutputFn => "output-function",
        },
    )
}

/// Input Jacobian of `f` by central finite differences.
pub fn jacobian_input(
    model: &dyn StateSpaceModel,
    x: &DVector<f64>,
    u: &DVector<f64>,
    theta: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let jac = central_differences(u, model.n_x(), |uv| model.f(x, uv, theta))?;
    check_finite(jac, "input")
}

/// Discrete state-transition matrix consistent with the RK4 step:
/// the 4th-order Taylor polynomial of `exp(A dt)`.
pub fn rk4_transition(a: &DMatrix<f64>, dt: f64) -> DMatrix<f64> {
    let n = a.nrows();
    let adt = a * dt;
    let a2 = &adt * &adt;
    let a3 = &a2 * &adt;
    let a4 = &a3 * &adt;
    DMatrix::identity(n, n) + adt + a2 / 2.0 + a3 / 6.0 + a4 / 24.0
}

/// Per-step or constant measurement-noise covariance matrices.
#[derive(Debug, Clone)]
pub enum CovarianceSchedule {
    Constant(DMatrix<f64>),
    Varying(Vec<DMatrix<f64>>),
}

impl CovarianceSchedule {
    /// Constant schedule; the matrix must be symmetric positive definite.
    pub fn constant(r: DMatrix<f64>) -> Result<Self> {
        validate_spd(&r, "R")?;
        Ok(CovarianceSchedule::Constant(r))
    }

    /// Time-varying schedule; every matrix must be symmetric positive
    /// definite.
    pub fn varying(rs: Vec<DMatrix<f64>>) -> Result<Self> {
        if rs.is_empty() {
            return Err(Error::Argument("empty covariance schedule".into()));
        }
        for (k, r) in rs.iter().enumerate() {
            validate_spd(r, &format!("R_{k}"))?;
        }
        Ok(CovarianceSchedule::Varying(rs))
    }

    pub fn at(&self, k: usize) -> &DMatrix<f64> {
        match self {
            CovarianceSchedule::Constant(r) => r,
            CovarianceSchedule::Varying(rs) => &rs[k],
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            CovarianceSchedule::Constant(r) => r.nrows(),
            CovarianceSchedule::Varying(rs) => rs[0].nrows(),
        }
    }

    pub fn len(&self) -> Option<usize> {
        match self {
            CovarianceSchedule::Constant(_) => None,
            CovarianceSchedule::Varying(rs) => Some(rs.len()),
        }
    }

    pub fn is_empty(&self) -> bool {
        matches!(self, CovarianceSchedule::Varying(rs) if rs.is_empty())
    }

    /// Scale every matrix by a positive factor.
    pub fn scaled(&self, factor: f64) -> Self {
        match self {
            CovarianceSchedule::Constant(r) => CovarianceSchedule::Constant(r * factor),
            CovarianceSchedule::Varying(rs) => {
                CovarianceSchedule::Varying(rs.iter().map(|r| r * factor).collect())
            }
        }
    }
}

fn validate_spd(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::Argument(format!("{what} is not square")));
    }
    let asym = (m - m.transpose()).abs().max();
    let scale = m.abs().max().max(1e-300);
    if asym > 1e-9 * scale {
        return Err(Error::Argument(format!(
            "{what} is not symmetric (max asymmetry {asym:.3e})"
        )));
    }
    let eps = 1e-10 * m.trace().abs();
    let shifted = m - DMatrix::identity(m.nrows(), m.ncols()) * eps;
    if shifted.cholesky().is_none() {
        return Err(Error::Argument(format!(
            "{what} is not positive definite above the SPD floor"
        )));
    }
    Ok(())
}

/// Process and measurement noise description for one smoother run.
#[derive(Debug, Clone)]
pub struct NoiseModel {
    /// Input-noise covariance, `n_u x n_u`, symmetric PSD.
    pub q: DMatrix<f64>,
    /// Measurement-noise covariance per step.
    pub r_schedule: CovarianceSchedule,
}

impl NoiseModel {
    pub fn new(q: DMatrix<f64>, r_schedule: CovarianceSchedule) -> Result<Self> {
        if q.nrows() != q.ncols() {
            return Err(Error::Argument("Q is not square".into()));
        }
        let asym = (&q - q.transpose()).abs().max();
        if asym > 1e-9 * q.abs().max().max(1e-300) {
            return Err(Error::Argument("Q is not symmetric".into()));
        }
        Ok(Self { q, r_schedule })
    }
}

/// Linear time-invariant model `x' = A x + B u`, `y = C x`.
///
/// Used by the oracle tests and as a reference model in the guide; the
/// analytic Jacobians are the constant matrices themselves.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
}

impl LinearModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() || b.nrows() != a.nrows() || c.ncols() != a.nrows() {
            return Err(Error::Argument("inconsistent LTI dimensions".into()));
        }
        Ok(Self { a, b, c })
    }
}

impl StateSpaceModel for LinearModel {
    fn n_x(&self) -> usize {
        self.a.nrows()
    }
    fn n_u(&self) -> usize {
        self.b.ncols()
    }
    fn n_y(&self) -> usize {
        self.c.nrows()
    }
    fn n_theta(&self) -> usize {
        0
    }
    fn f(&self, x: &DVector<f64>, u: &DVector<f64>, _theta: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(&self.a * x + &self.b * u)
    }
    fn g(
        &self,
        x: &DVector<f64>,
        _u: &DVector<f64>,
        _theta: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        Ok(&self.c * x)
    }
    fn jac_f_state(
        &self,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
        _theta: &DVector<f64>,
    ) -> Option<DMatrix<f64>> {
        Some(self.a.clone())
    }
    fn jac_g_state(
        &self,
        _x: &DVector<f64>,
        _u: &DVector<f64>,
        _theta: &DVector<f64>,
    ) -> Option<DMatrix<f64>> {
        Some(self.c.clone())
    }
}

/// Model wrapper that appends the parameter vector to the state as
/// constant states (`theta' = 0`), so the smoother estimates biases and
/// scale factors alongside the dynamic states.
pub struct Augmented<M> {
    pub inner: M,
}

impl<M: StateSpaceModel> Augmented<M> {
    pub fn new(inner: M) -> Self {
        Self { inner }
    }

    fn split<'a>(&self, x: &'a DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let n = self.inner.n_x();
        (
            DVector::from_column_slice(&x.as_slice()[..n]),
            DVector::from_column_slice(&x.as_slice()[n..]),
        )
    }

    /// Stack a base state and parameter vector into an augmented state.
    pub fn join(&self, x: &DVector<f64>, theta: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_x());
        out.rows_mut(0, self.inner.n_x()).copy_from(x);
        out.rows_mut(self.inner.n_x(), self.inner.n_theta())
            .copy_from(theta);
        out
    }
}

impl<M: StateSpaceModel> StateSpaceModel for Augmented<M> {
    fn n_x(&self) -> usize {
        self.inner.n_x() + self.inner.n_theta()
    }
    fn n_u(&self) -> usize {
        self.inner.n_u()
    }
    fn n_y(&self) -> usize {
        self.inner.n_y()
    }
    fn n_theta(&self) -> usize {
        0
    }

    fn f(&self, x: &DVector<f64>, u: &DVector<f64>, _theta: &DVector<f64>) -> Result<DVector<f64>> {
        let (xb, th) = self.split(x);
        let fx = self.inner.f(&xb, u, &th)?;
        let mut out = DVector::zeros(self.n_x());
        out.rows_mut(0, self.inner.n_x()).copy_from(&fx);
        Ok(out)
    }

    fn g(&self, x: &DVector<f64>, u: &DVector<f64>, _theta: &DVector<f64>) -> Result<DVector<f64>> {
        let (xb, th) = self.split(x);
        self.inner.g(&xb, u, &th)
    }

    fn jac_f_state(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        _theta: &DVector<f64>,
    ) -> Option<DMatrix<f64>> {
        let (xb, th) = self.split(x);
        let a = self.inner.jac_f_state(&xb, u, &th)?;
        let a_th = self.inner.jac_f_theta(&xb, u, &th)?;
        let n = self.n_x();
        let nb = self.inner.n_x();
        let mut out = DMatrix::zeros(n, n);
        out.view_mut((0, 0), (nb, nb)).copy_from(&a);
        out.view_mut((0, nb), (nb, self.inner.n_theta()))
            .copy_from(&a_th);
        Some(out)
    }

    fn jac_g_state(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        _theta: &DVector<f64>,
    ) -> Option<DMatrix<f64>> {
        let (xb, th) = self.split(x);
        let c = self.inner.jac_g_state(&xb, u, &th)?;
        let c_th = self.inner.jac_g_theta(&xb, u, &th)?;
        let nb = self.inner.n_x();
        let mut out = DMatrix::zeros(self.n_y(), self.n_x());
        out.view_mut((0, 0), (self.n_y(), nb)).copy_from(&c);
        out.view_mut((0, nb), (self.n_y(), self.inner.n_theta()))
            .copy_from(&c_th);
        Some(out)
    }

    fn output_names(&self) -> Vec<String> {
        self.inner.output_names()
    }

    fn state_names(&self) -> Vec<String> {
        let mut names = self.inner.state_names();
        names.extend((0..self.inner.n_theta()).map(|i| format!("theta{i}")));
        names
    }

    fn wrap_residual(&self, component: usize, raw: f64) -> f64 {
        self.inner.wrap_residual(component, raw)
    }
}
