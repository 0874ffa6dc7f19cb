//! Residual diagnostics: do the smoother's noise assumptions hold?
//!
//! Residuals standardized by the estimated per-step variance should be
//! standard normal. Marginal shape is checked with Gaussian-kernel
//! density estimates; pairwise dependence with bivariate normalized
//! contours: both margins are transformed to standard normal through
//! their ranks, a 2-D product-kernel density is estimated on a fixed
//! grid over [-3, 3]^2, and the contours are compared against a
//! bivariate Gaussian reference with the same correlation. Elliptical
//! contours mean Gaussian dependence; mass outside the reference's low
//! contour (the tail-excess statistic here) flags heavier-than-Gaussian
//! dependence of the kind scale mixtures produce.
//!
//! Outputs are plot-ready gridded data, not rendered images.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::noise::ResidualSeries;
use crate::statespace::CovarianceSchedule;

/// Residuals divided by the applied per-step noise standard deviation.
#[derive(Debug, Clone)]
pub struct StandardizedResiduals {
    pub series: ResidualSeries,
}

impl StandardizedResiduals {
    pub fn component_values(&self, i: usize) -> Vec<f64> {
        self.series.component_values(i)
    }

    pub fn names(&self) -> &[String] {
        self.series.names()
    }

    /// Concatenate several flights' standardized residuals (same
    /// component layout) for fleet-level diagnostics.
    pub fn concat(parts: &[StandardizedResiduals]) -> Result<StandardizedResiduals> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Argument("no residual series to concatenate".into()))?;
        let names = first.series.names().to_vec();
        let mut data = Vec::new();
        for part in parts {
            if part.series.names() != names.as_slice() {
                return Err(Error::Argument(
                    "component layouts differ between flights".into(),
                ));
            }
            for k in 0..part.series.n_steps() {
                data.push(part.series.step(k).to_vec());
            }
        }
        Ok(StandardizedResiduals {
            series: ResidualSeries::new(names, data)?,
        })
    }
}

/// Divide each residual by the square root of the applied noise
/// variance at its step: `s_k,i = v_k,i / sqrt(R_k,ii)`. Missing
/// residuals stay missing.
pub fn standardize(
    res: &ResidualSeries,
    schedule: &CovarianceSchedule,
) -> Result<StandardizedResiduals> {
    let n = res.n_steps();
    if let Some(len) = schedule.len() {
        if len != n {
            return Err(Error::Argument(format!(
                "schedule has {len} steps, residuals have {n}"
            )));
        }
    }
    if schedule.dim() != res.n_components() {
        return Err(Error::Argument(format!(
            "schedule dimension {} does not match {} components",
            schedule.dim(),
            res.n_components()
        )));
    }
    let mut data = Vec::with_capacity(n);
    for k in 0..n {
        let r = schedule.at(k);
        let mut row = Vec::with_capacity(res.n_components());
        for i in 0..res.n_components() {
            let rii = r[(i, i)];
            match res.get(k, i) {
                Some(v) => {
                    if rii <= 0.0 {
                        return Err(Error::Conditioning {
                            step: k,
                            reason: format!(
                                "R_{},{} = {rii} is not positive for component {}",
                                i,
                                i,
                                res.component_name(i)
                            ),
                        });
                    }
                    row.push(Some(v / rii.sqrt()));
                }
                None => row.push(None),
            }
        }
        data.push(row);
    }
    Ok(StandardizedResiduals {
        series: ResidualSeries::new(res.names().to_vec(), data)?,
    })
}

/// One-dimensional Gaussian-kernel density estimate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Kde1d {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
    pub n: usize,
}

const KDE_GRID_POINTS: usize = 512;

fn sample_std(sample: &[f64]) -> (f64, f64) {
    let n = sample.len() as f64;
    let mean = sample.iter().sum::<f64>() / n;
    let var = sample.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn interquartile_range(sample: &[f64]) -> f64 {
    let mut sorted = sample.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| {
        let idx = p * (sorted.len() - 1) as f64;
        let lo = idx.floor() as usize;
        let hi = idx.ceil() as usize;
        let alpha = idx - lo as f64;
        sorted[lo] + alpha * (sorted[hi] - sorted[lo])
    };
    q(0.75) - q(0.25)
}

/// Silverman's rule bandwidth: `0.9 min(sigma, IQR/1.34) n^(-1/5)`.
pub fn silverman_bandwidth(sample: &[f64]) -> Result<f64> {
    let (_, sd) = sample_std(sample);
    if sd == 0.0 {
        return Err(Error::Diagnostics(
            "degenerate sample: zero variance".into(),
        ));
    }
    let iqr = interquartile_range(sample);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    Ok(0.9 * spread * (sample.len() as f64).powf(-0.2))
}

/// Gaussian-kernel KDE with Silverman's bandwidth on a 512-point grid
/// over `[min - 3h, max + 3h]`.
pub fn kde_1d(sample: &[f64]) -> Result<Kde1d> {
    if sample.len() < 2 {
        return Err(Error::Diagnostics(format!(
            "KDE needs at least 2 points, got {}",
            sample.len()
        )));
    }
    let h = silverman_bandwidth(sample)?;
    let lo = sample.iter().cloned().fold(f64::MAX, f64::min) - 3.0 * h;
    let hi = sample.iter().cloned().fold(f64::MIN, f64::max) + 3.0 * h;
    let grid: Vec<f64> = (0..KDE_GRID_POINTS)
        .map(|i| lo + (hi - lo) * i as f64 / (KDE_GRID_POINTS - 1) as f64)
        .collect();
    let density = kde_1d_on(sample, h, &grid);
    Ok(Kde1d {
        grid,
        density,
        bandwidth: h,
        n: sample.len(),
    })
}

/// KDE evaluated on a caller-supplied grid.
pub fn kde_1d_on(sample: &[f64], bandwidth: f64, grid: &[f64]) -> Vec<f64> {
    let norm = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * bandwidth * sample.len() as f64);
    grid.iter()
        .map(|&x| {
            sample
                .iter()
                .map(|&xi| {
                    let z = (x - xi) / bandwidth;
                    (-0.5 * z * z).exp()
                })
                .sum::<f64>()
                * norm
        })
        .collect()
}

/// Trapezoid-rule mass of a gridded density.
pub fn trapezoid_mass(grid: &[f64], density: &[f64]) -> f64 {
    let mut mass = 0.0;
    for i in 1..grid.len() {
        mass += 0.5 * (density[i] + density[i - 1]) * (grid[i] - grid[i - 1]);
    }
    mass
}

/// Kolmogorov-Smirnov distance of a sample to the standard normal.
pub fn ks_distance_to_std_normal(sample: &[f64]) -> f64 {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut sorted = sample.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in sorted.iter().enumerate() {
        let cdf = normal.cdf(x);
        let lo = i as f64 / n;
        let hi = (i + 1) as f64 / n;
        d = d.max((cdf - lo).abs()).max((hi - cdf).abs());
    }
    d
}

/// Average ranks (ties shared), 1-based.
fn average_ranks(sample: &[f64]) -> Vec<f64> {
    let n = sample.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| sample[a].partial_cmp(&sample[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && sample[idx[j + 1]] == sample[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Rank-based transform to standard-normal margins:
/// `z_i = Phi^-1(rank_i / (n + 1))`.
pub fn normal_scores(sample: &[f64]) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let n = sample.len() as f64;
    average_ranks(sample)
        .into_iter()
        .map(|r| normal.inverse_cdf(r / (n + 1.0)))
        .collect()
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
        sxy += (a - mx) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Kendall's rank correlation (tau-a), invariant under strictly
/// increasing marginal transforms.
pub fn kendall_tau(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    let mut concordant = 0i64;
    let mut discordant = 0i64;
    for i in 0..n {
        for j in (i + 1)..n {
            let s = (x[i] - x[j]) * (y[i] - y[j]);
            if s > 0.0 {
                concordant += 1;
            } else if s < 0.0 {
                discordant += 1;
            }
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    (concordant - discordant) as f64 / pairs
}

/// Bivariate normalized contour data: KDE of the normal-scores pairs on
/// a fixed grid plus the Gaussian reference density with the same
/// correlation.
#[derive(Debug, Clone)]
pub struct ContourGrid {
    pub grid: Vec<f64>,
    /// Row index follows x, column index follows y.
    pub density: DMatrix<f64>,
    pub reference: DMatrix<f64>,
    /// Pearson correlation of the normal-scores pairs.
    pub rho: f64,
    pub bandwidth: (f64, f64),
    pub n: usize,
    /// Set when more than 20 percent of either margin is tied.
    pub tie_warning: bool,
}

pub const CONTOUR_GRID_POINTS: usize = 101;
pub const CONTOUR_RANGE: f64 = 3.0;

fn tie_fraction(sample: &[f64]) -> f64 {
    let mut sorted = sample.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let distinct = sorted.windows(2).filter(|w| w[0] != w[1]).count() + 1;
    1.0 - distinct as f64 / sample.len() as f64
}

fn binormal_pdf(x: f64, y: f64, sx: f64, sy: f64, rho: f64) -> f64 {
    let det = 1.0 - rho * rho;
    let (u, v) = (x / sx, y / sy);
    let quad = (u * u - 2.0 * rho * u * v + v * v) / det;
    (-0.5 * quad).exp() / (2.0 * std::f64::consts::PI * sx * sy * det.sqrt())
}

/// Transform both margins to standard normal through their ranks and
/// estimate the joint density against a Gaussian reference.
pub fn normalized_contours(sample_x: &[f64], sample_y: &[f64]) -> Result<ContourGrid> {
    if sample_x.len() != sample_y.len() {
        return Err(Error::Argument("paired samples differ in length".into()));
    }
    let n = sample_x.len();
    if n < 200 {
        return Err(Error::Diagnostics(format!(
            "normalized contours need at least 200 pairs, got {n}"
        )));
    }
    let tie_warning = tie_fraction(sample_x) > 0.2 || tie_fraction(sample_y) > 0.2;
    let zx = normal_scores(sample_x);
    let zy = normal_scores(sample_y);
    let rho = pearson(&zx, &zy);

    // Product-kernel bandwidths, Silverman's 2-D rule h = sigma n^(-1/6).
    let (_, sx) = sample_std(&zx);
    let (_, sy) = sample_std(&zy);
    let hx = sx * (n as f64).powf(-1.0 / 6.0);
    let hy = sy * (n as f64).powf(-1.0 / 6.0);

    let m = CONTOUR_GRID_POINTS;
    let grid: Vec<f64> = (0..m)
        .map(|i| -CONTOUR_RANGE + 2.0 * CONTOUR_RANGE * i as f64 / (m - 1) as f64)
        .collect();

    // density = (1/n) Kx Ky^T with the kernel normalizations folded in.
    let kx = DMatrix::from_fn(m, n, |a, i| {
        let z = (grid[a] - zx[i]) / hx;
        (-0.5 * z * z).exp() / ((2.0 * std::f64::consts::PI).sqrt() * hx)
    });
    let ky = DMatrix::from_fn(m, n, |b, i| {
        let z = (grid[b] - zy[i]) / hy;
        (-0.5 * z * z).exp() / ((2.0 * std::f64::consts::PI).sqrt() * hy)
    });
    let density = (&kx * ky.transpose()) / n as f64;
    // The reference is the kernel-smoothed Gaussian: convolving a
    // Gaussian sample's density with the kernel widens each margin by
    // the bandwidth, so comparing the KDE against the raw Gaussian
    // would show spurious tail mass even for perfectly Gaussian data.
    let rx = (sx * sx + hx * hx).sqrt();
    let ry = (sy * sy + hy * hy).sqrt();
    let rho_ref = rho * (sx * sy) / (rx * ry);
    let reference = DMatrix::from_fn(m, m, |a, b| binormal_pdf(grid[a], grid[b], rx, ry, rho_ref));

    Ok(ContourGrid {
        grid,
        density,
        reference,
        rho,
        bandwidth: (hx, hy),
        n,
        tie_warning,
    })
}

impl ContourGrid {
    /// Trapezoid mass of the KDE over the grid.
    pub fn mass(&self) -> f64 {
        self.mass_of(&self.density)
    }

    fn mass_of(&self, d: &DMatrix<f64>) -> f64 {
        let m = self.grid.len();
        let step = self.grid[1] - self.grid[0];
        let mut mass = 0.0;
        for a in 0..m {
            for b in 0..m {
                let wa = if a == 0 || a == m - 1 { 0.5 } else { 1.0 };
                let wb = if b == 0 || b == m - 1 { 0.5 } else { 1.0 };
                mass += wa * wb * d[(a, b)];
            }
        }
        mass * step * step
    }

    /// KDE mass beyond the Gaussian reference's `level` contour, minus
    /// the reference mass of the same region. Near zero for Gaussian
    /// dependence, positive for heavier-than-Gaussian tails.
    pub fn tail_excess(&self, level: f64) -> f64 {
        let m = self.grid.len();
        let step = self.grid[1] - self.grid[0];
        let mut excess = 0.0;
        for a in 0..m {
            for b in 0..m {
                if self.reference[(a, b)] < level {
                    excess += self.density[(a, b)] - self.reference[(a, b)];
                }
            }
        }
        excess * step * step
    }

    /// Outermost radius along a unit direction where the given field
    /// still reaches `level` (bilinear interpolation on the grid).
    pub fn level_radius(&self, direction: (f64, f64), level: f64, reference: bool) -> f64 {
        let field = if reference {
            &self.reference
        } else {
            &self.density
        };
        let norm = (direction.0 * direction.0 + direction.1 * direction.1).sqrt();
        let (dx, dy) = (direction.0 / norm, direction.1 / norm);
        let mut radius = 0.0f64;
        let mut t = 0.0;
        while t <= CONTOUR_RANGE * std::f64::consts::SQRT_2 {
            let x = t * dx;
            let y = t * dy;
            if x.abs() <= CONTOUR_RANGE && y.abs() <= CONTOUR_RANGE {
                if self.interp(field, x, y) >= level {
                    radius = t;
                }
            }
            t += 0.01;
        }
        radius
    }

    fn interp(&self, field: &DMatrix<f64>, x: f64, y: f64) -> f64 {
        let m = self.grid.len();
        let step = self.grid[1] - self.grid[0];
        let fx = (x + CONTOUR_RANGE) / step;
        let fy = (y + CONTOUR_RANGE) / step;
        let a = (fx.floor() as usize).min(m - 2);
        let b = (fy.floor() as usize).min(m - 2);
        let ax = fx - a as f64;
        let by = fy - b as f64;
        field[(a, b)] * (1.0 - ax) * (1.0 - by)
            + field[(a + 1, b)] * ax * (1.0 - by)
            + field[(a, b + 1)] * (1.0 - ax) * by
            + field[(a + 1, b + 1)] * ax * by
    }

    /// Axis ratio sqrt(lambda_max / lambda_min) of the second moments of
    /// the region where the KDE reaches `level`. Near 1 for circular
    /// level sets.
    pub fn level_set_axis_ratio(&self, level: f64) -> f64 {
        let m = self.grid.len();
        let mut sx = 0.0;
        let mut sy = 0.0;
        let mut count = 0.0;
        for a in 0..m {
            for b in 0..m {
                if self.density[(a, b)] >= level {
                    sx += self.grid[a];
                    sy += self.grid[b];
                    count += 1.0;
                }
            }
        }
        if count == 0.0 {
            return 1.0;
        }
        let (cx, cy) = (sx / count, sy / count);
        let mut mxx = 0.0;
        let mut myy = 0.0;
        let mut mxy = 0.0;
        for a in 0..m {
            for b in 0..m {
                if self.density[(a, b)] >= level {
                    let dx = self.grid[a] - cx;
                    let dy = self.grid[b] - cy;
                    mxx += dx * dx;
                    myy += dy * dy;
                    mxy += dx * dy;
                }
            }
        }
        mxx /= count;
        myy /= count;
        mxy /= count;
        let tr = mxx + myy;
        let disc = ((mxx - myy) * (mxx - myy) + 4.0 * mxy * mxy).sqrt();
        let l_max = 0.5 * (tr + disc);
        let l_min = 0.5 * (tr - disc).max(1e-12);
        (l_max / l_min).sqrt()
    }

    /// CSV rows `x, y, density, reference`.
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["x", "y", "density", "reference"])?;
        let m = self.grid.len();
        for a in 0..m {
            for b in 0..m {
                w.write_record(&[
                    format!("{}", self.grid[a]),
                    format!("{}", self.grid[b]),
                    format!("{}", self.density[(a, b)]),
                    format!("{}", self.reference[(a, b)]),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

impl Kde1d {
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["x", "density"])?;
        for (x, d) in self.grid.iter().zip(&self.density) {
            w.write_record(&[format!("{x}"), format!("{d}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-pair dependence statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairDependence {
    pub a: String,
    pub b: String,
    /// Pearson correlation of the normal scores.
    pub rho_normal_scores: f64,
    pub kendall_tau: f64,
    /// KDE mass beyond the Gaussian reference's 0.02 contour, in excess
    /// of the reference's own mass there.
    pub tail_excess: f64,
    pub n: usize,
    pub tie_warning: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DependenceReport {
    /// Sorted by |Kendall tau|, strongest dependence first.
    pub pairs: Vec<PairDependence>,
}

/// Default component pairs to screen: attitude angles against their
/// rates, ground speed against the horizontal wind components.
pub fn default_pairs() -> Vec<(String, String)> {
    [
        ("theta", "q"),
        ("phi", "p"),
        ("v_gnd", "v_w"),
        ("v_gnd", "u_w"),
    ]
    .iter()
    .map(|(a, b)| (a.to_string(), b.to_string()))
    .collect()
}

const TAIL_EXCESS_LEVEL: f64 = 0.02;

/// Screen the given component pairs of a standardized-residual set.
/// Steps where either component is missing are dropped pairwise.
pub fn dependence_summary(
    pairs: &[(String, String)],
    data: &StandardizedResiduals,
) -> Result<DependenceReport> {
    let names = data.names();
    let mut out = Vec::new();
    for (a, b) in pairs {
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
        for k in 0..data.series.n_steps() {
            if let (Some(x), Some(y)) = (data.series.get(k, ia), data.series.get(k, ib)) {
                xs.push(x);
                ys.push(y);
            }
        }
        let grid = normalized_contours(&xs, &ys)?;
        let zx = normal_scores(&xs);
        let zy = normal_scores(&ys);
        out.push(PairDependence {
            a: a.clone(),
            b: b.clone(),
            rho_normal_scores: grid.rho,
            kendall_tau: kendall_tau(&zx, &zy),
            tail_excess: grid.tail_excess(TAIL_EXCESS_LEVEL),
            n: xs.len(),
            tie_warning: grid.tie_warning,
        });
    }
    out.sort_by(|a, b| {
        b.kendall_tau
            .abs()
            .partial_cmp(&a.kendall_tau.abs())
            .unwrap()
    });
    Ok(DependenceReport { pairs: out })
}
