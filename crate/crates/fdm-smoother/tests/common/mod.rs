//! Shared fixtures for the integration suites: an independent batch
//! maximum-a-posteriori solver used as the smoother oracle, and seeded
//! random linear systems.

use fdm_smoother::simulate::simulate_lti;
use fdm_smoother::statespace::LinearModel;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::ops::{AddAssign, SubAssign};

/// 4th-order Taylor polynomial of `exp(A dt)`, written out here so the
/// oracle does not depend on the implementation under test.
pub fn transition_poly(a: &DMatrix<f64>, dt: f64) -> DMatrix<f64> {
    let n = a.nrows();
    let x = a * dt;
    let x2 = &x * &x;
    let x3 = &x2 * &x;
    let x4 = &x3 * &x;
    DMatrix::identity(n, n) + x + x2 / 2.0 + x3 / 6.0 + x4 / 24.0
}

/// Solve the stacked linear-Gaussian trajectory problem directly: prior
/// on x_0, Gaussian process noise between consecutive states, Gaussian
/// measurement noise at every step where a component is present. The
/// minimizer of the quadratic cost is the exact smoothed trajectory.
#[allow(clippy::too_many_arguments)]
pub fn batch_map_estimate(
    phi: &DMatrix<f64>,
    q_d: &DMatrix<f64>,
    c: &DMatrix<f64>,
    r: &DMatrix<f64>,
    x0: &DVector<f64>,
    p0: &DMatrix<f64>,
    measurements: &[Vec<Option<f64>>],
) -> (Vec<DVector<f64>>, Vec<DMatrix<f64>>) {
    let n = measurements.len();
    let n_x = phi.nrows();
    let dim = n * n_x;

    let p0_inv = p0.clone().try_inverse().expect("P0 invertible");
    let q_inv = q_d.clone().try_inverse().expect("Q_d invertible");

    let mut h = DMatrix::<f64>::zeros(dim, dim);
    let mut b = DVector::<f64>::zeros(dim);

    // Prior.
    h.view_mut((0, 0), (n_x, n_x)).add_assign(&p0_inv);
    b.rows_mut(0, n_x).add_assign(&p0_inv * x0);

    // Dynamics terms between consecutive states.
    let a01 = phi.transpose() * &q_inv; // Phi^T Q^-1
    let a00 = &a01 * phi; // Phi^T Q^-1 Phi
    let a10 = a01.transpose(); // Q^-1 Phi
    for k in 0..n - 1 {
        let i = k * n_x;
        let j = (k + 1) * n_x;
        h.view_mut((i, i), (n_x, n_x)).add_assign(&a00);
        h.view_mut((i, j), (n_x, n_x)).sub_assign(&a01);
        h.view_mut((j, i), (n_x, n_x)).sub_assign(&a10);
        h.view_mut((j, j), (n_x, n_x)).add_assign(&q_inv);
    }

    // Measurement terms with row deletion for missing components.
    for (k, y) in measurements.iter().enumerate() {
        let idx: Vec<usize> = (0..y.len()).filter(|&i| y[i].is_some()).collect();
        if idx.is_empty() {
            continue;
        }
        let c_m = c.select_rows(idx.iter());
        // Row deletion happens before inversion: invert the retained
        // submatrix of R.
        let r_sub = r.select_rows(idx.iter()).select_columns(idx.iter());
        let r_m = r_sub.try_inverse().expect("R submatrix invertible");
        let y_m = DVector::from_iterator(idx.len(), idx.iter().map(|&i| y[i].unwrap()));
        let i = k * n_x;
        h.view_mut((i, i), (n_x, n_x))
            .add_assign(c_m.transpose() * &r_m * &c_m);
        b.rows_mut(i, n_x).add_assign(c_m.transpose() * &r_m * y_m);
    }

    let chol = h.clone().cholesky().expect("batch normal equations SPD");
    let mut x = chol.solve(&b);
    // Two rounds of iterative refinement recover the digits the dense
    // normal-equations solve loses on long, stiff chains.
    for _ in 0..2 {
        let residual = &b - &h * &x;
        x += chol.solve(&residual);
    }
    let h_inv = chol.inverse();

    let mut states = Vec::with_capacity(n);
    let mut covs = Vec::with_capacity(n);
    for k in 0..n {
        states.push(DVector::from_column_slice(
            &x.as_slice()[k * n_x..(k + 1) * n_x],
        ));
        covs.push(h_inv.view((k * n_x, k * n_x), (n_x, n_x)).into());
    }
    (states, covs)
}

/// One random test system with its simulated data.
pub struct LtiCase {
    pub model: LinearModel,
    pub dt: f64,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub x0: DVector<f64>,
    pub p0: DMatrix<f64>,
    pub measurements: Vec<Vec<Option<f64>>>,
    pub inputs: Vec<DVector<f64>>,
    pub phi: DMatrix<f64>,
    pub q_d: DMatrix<f64>,
}

/// Seeded random LTI case. Every third case carries a missing-data
/// pattern: one component masked on a stride plus one fully missing step.
pub fn random_lti_case(seed: u64) -> LtiCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_x = rng.gen_range(1..=4usize);
    let n_y = rng.gen_range(1..=n_x);
    let n = rng.gen_range(30..=100usize);
    let dt = rng.gen_range(0.05..=0.2);

    let mut a = DMatrix::from_fn(n_x, n_x, |_, _| rng.gen_range(-1.0..1.0));
    let scale = 0.4 / f64::max(a.abs().max() * dt * n_x as f64, 1e-6);
    if scale < 1.0 {
        a *= scale;
    }
    // Shift onto the stable half-plane (Gershgorin), so trajectories
    // stay bounded and the batch normal equations stay well conditioned.
    let max_row_sum = (0..n_x)
        .map(|i| {
            a[(i, i)]
                + (0..n_x)
                    .filter(|&j| j != i)
                    .map(|j| a[(i, j)].abs())
                    .sum::<f64>()
        })
        .fold(f64::MIN, f64::max);
    if max_row_sum > -0.01 / dt {
        for i in 0..n_x {
            a[(i, i)] -= max_row_sum + 0.05 / dt;
        }
    }
    let c = DMatrix::from_fn(n_y, n_x, |_, _| rng.gen_range(-1.0..1.0));
    let q = DMatrix::from_fn(n_x, n_x, |i, j| {
        if i == j {
            rng.gen_range(0.02..0.2)
        } else {
            0.0
        }
    });
    let r = DMatrix::from_fn(n_y, n_y, |i, j| {
        if i == j {
            rng.gen_range(0.05..0.5)
        } else {
            0.0
        }
    });
    let p0 = DMatrix::from_fn(
        n_x,
        n_x,
        |i, j| {
            if i == j {
                rng.gen_range(0.5..2.0)
            } else {
                0.0
            }
        },
    );
    let x0 = DVector::from_fn(n_x, |_, _| rng.gen_range(-1.0..1.0));

    let phi = transition_poly(&a, dt);
    let q_d = &q * dt * dt; // Gamma Q Gamma^T with Gamma = dt * I
    let (_, outputs) = simulate_lti(&phi, &c, &q_d, &r, &x0, n, seed ^ 0x5eed).unwrap();

    let masked = seed % 3 == 0;
    let measurements: Vec<Vec<Option<f64>>> = outputs
        .iter()
        .enumerate()
        .map(|(k, y)| {
            (0..n_y)
                .map(|i| {
                    if masked && ((k + i) % 5 == 0 || k == 7) {
                        None
                    } else {
                        Some(y[i])
                    }
                })
                .collect()
        })
        .collect();

    let model = LinearModel::new(a, DMatrix::identity(n_x, n_x), c).unwrap();
    let inputs = vec![DVector::zeros(n_x); n];
    LtiCase {
        model,
        dt,
        q,
        r,
        x0,
        p0,
        measurements,
        inputs,
        phi,
        q_d,
    }
}
