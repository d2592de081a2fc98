//! Posterior marginals of latent nodes and hyperparameters from a support grid.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::approx::GaussianApprox;
use super::explore::HyperGrid;
use crate::hyper::Transform;
use crate::par::Exec;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Density values on a uniform grid `lo..=hi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    pub x: Vec<f64>,
    pub density: Vec<f64>,
}

impl DensityGrid {
    pub fn integral(&self) -> f64 {
        trapezoid(&self.x, &self.density)
    }

    fn normalized(x: Vec<f64>, mut density: Vec<f64>) -> Self {
        let s = trapezoid(&x, &density);
        if s > 0.0 && s.is_finite() {
            density.iter_mut().for_each(|d| *d /= s);
        }
        Self { x, density }
    }

    pub fn mean(&self) -> f64 {
        let xd: Vec<f64> = self.x.iter().zip(&self.density).map(|(x, d)| x * d).collect();
        trapezoid(&self.x, &xd)
    }

    pub fn sd(&self) -> f64 {
        let m = self.mean();
        let v: Vec<f64> = self.x.iter().zip(&self.density).map(|(x, d)| (x - m).powi(2) * d).collect();
        trapezoid(&self.x, &v).max(0.0).sqrt()
    }

    /// Location of the maximum, refined by a parabola through the neighbouring points.
    pub fn mode(&self) -> f64 {
        let k = (0..self.x.len()).fold(0, |b, i| if self.density[i] > self.density[b] { i } else { b });
        if k == 0 || k + 1 == self.x.len() {
            return self.x[k];
        }
        let (x0, x1, x2) = (self.x[k - 1], self.x[k], self.x[k + 1]);
        let (y0, y1, y2) = (self.density[k - 1], self.density[k], self.density[k + 1]);
        let num = (x1 - x0).powi(2) * (y1 - y2) - (x1 - x2).powi(2) * (y1 - y0);
        let den = (x1 - x0) * (y1 - y2) - (x1 - x2) * (y1 - y0);
        if den.abs() < f64::MIN_POSITIVE {
            return x1;
        }
        (x1 - 0.5 * num / den).clamp(x0, x2)
    }

    /// Quantile from the piecewise-linear cumulative trapezoid sums.
    pub fn quantile(&self, p: f64) -> f64 {
        let mut cdf = vec![0.0];
        for i in 1..self.x.len() {
            let c = cdf[i - 1] + 0.5 * (self.density[i] + self.density[i - 1]) * (self.x[i] - self.x[i - 1]);
            cdf.push(c);
        }
        let total = *cdf.last().unwrap();
        let target = p * total;
        for i in 1..cdf.len() {
            if cdf[i] >= target {
                let span = cdf[i] - cdf[i - 1];
                let f = if span > 0.0 { (target - cdf[i - 1]) / span } else { 0.0 };
                return self.x[i - 1] + f * (self.x[i] - self.x[i - 1]);
            }
        }
        *self.x.last().unwrap()
    }
}

pub fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    (1..x.len()).map(|i| 0.5 * (y[i] + y[i - 1]) * (x[i] - x[i - 1])).sum()
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentMarginal {
    pub node: usize,
    pub mean: f64,
    pub sd: f64,
    pub grid: DensityGrid,
}

/// Per-node Gaussian mixture over support points.
pub fn latent_marginals(weights: &[f64], approxes: &[GaussianApprox], density_points: usize, exec: Exec) -> Vec<LatentMarginal> {
    let vars: Vec<Vec<f64>> = exec.map(approxes.len(), |k| approxes[k].marginal_variances());
    let means: Vec<&[f64]> = approxes.iter().map(|a| a.mode.as_slice()).collect();
    mixture_marginals(weights, &means, &vars, density_points)
}

/// Mixture marginals from per-component means and variances (weights must sum to one).
pub fn mixture_marginals(weights: &[f64], means: &[&[f64]], vars: &[Vec<f64>], density_points: usize) -> Vec<LatentMarginal> {
    let n = means.first().map_or(0, |m| m.len());
    (0..n)
        .map(|i| {
            let mean: f64 = weights.iter().zip(means).map(|(w, m)| w * m[i]).sum();
            let second: f64 = weights.iter().zip(means).zip(vars).map(|((w, m), v)| w * (v[i] + m[i] * m[i])).sum();
            let sd = (second - mean * mean).max(0.0).sqrt();
            let half = if sd > 0.0 { 5.0 * sd } else { 1e-12 };
            let x = linspace(mean - half, mean + half, density_points.max(3));
            let density = x
                .iter()
                .map(|&t| {
                    weights
                        .iter()
                        .zip(means)
                        .zip(vars)
                        .map(|((w, m), v)| {
                            let s = v[i].max(1e-300).sqrt();
                            let z = (t - m[i]) / s;
                            w * INV_SQRT_2PI / s * (-0.5 * z * z).exp()
                        })
                        .sum()
                })
                .collect();
            LatentMarginal { node: i, mean, sd, grid: DensityGrid::normalized(x, density) }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperMarginal {
    pub name: String,
    pub transform: Transform,
    pub internal: DensityGrid,
    pub natural: DensityGrid,
    pub internal_mean: f64,
    pub internal_sd: f64,
    pub internal_mode: f64,
    pub natural_mean: f64,
    pub natural_sd: f64,
    pub natural_mode: f64,
    pub natural_q025: f64,
    pub natural_q50: f64,
    pub natural_q975: f64,
}

/// Interpolated log-density in one dimension.
enum Interp1 {
    Spline(NaturalSpline),
    Gaussian { mean: f64, sd: f64 },
}

/// Natural cubic spline through `(x_i, y_i)` with increasing `x`.
struct NaturalSpline {
    x: Vec<f64>,
    y: Vec<f64>,
    m: Vec<f64>,
}

impl NaturalSpline {
    fn new(x: Vec<f64>, y: Vec<f64>) -> Self {
        let n = x.len();
        let mut m = vec![0.0; n];
        if n > 2 {
            // Tridiagonal system for interior second derivatives.
            let k = n - 2;
            let mut diag = vec![0.0; k];
            let mut upper = vec![0.0; k];
            let mut rhs = vec![0.0; k];
            for j in 0..k {
                let i = j + 1;
                let h0 = x[i] - x[i - 1];
                let h1 = x[i + 1] - x[i];
                diag[j] = 2.0 * (h0 + h1);
                upper[j] = h1;
                rhs[j] = 6.0 * ((y[i + 1] - y[i]) / h1 - (y[i] - y[i - 1]) / h0);
            }
            for j in 1..k {
                let lower = x[j + 1] - x[j];
                let f = lower / diag[j - 1];
                diag[j] -= f * upper[j - 1];
                rhs[j] -= f * rhs[j - 1];
            }
            for j in (0..k).rev() {
                let next = if j + 1 < k { m[j + 2] } else { 0.0 };
                m[j + 1] = (rhs[j] - upper[j] * next) / diag[j];
            }
        }
        Self { x, y, m }
    }

    fn eval(&self, t: f64) -> f64 {
        let n = self.x.len();
        if t <= self.x[0] || t >= self.x[n - 1] {
            // Linear continuation beyond the knots.
            let (i0, i1, anchor) = if t <= self.x[0] { (0, 1, 0) } else { (n - 2, n - 1, n - 1) };
            let h = self.x[i1] - self.x[i0];
            let slope = (self.y[i1] - self.y[i0]) / h
                + if anchor == 0 { -h * self.m[i1] / 6.0 } else { h * self.m[i0] / 6.0 };
            return self.y[anchor] + slope * (t - self.x[anchor]);
        }
        let i = self.x.partition_point(|&v| v <= t).clamp(1, n - 1);
        let (x0, x1) = (self.x[i - 1], self.x[i]);
        let h = x1 - x0;
        let a = (x1 - t) / h;
        let b = (t - x0) / h;
        a * self.y[i - 1] + b * self.y[i] + ((a * a * a - a) * self.m[i - 1] + (b * b * b - b) * self.m[i]) * h * h / 6.0
    }
}

/// Gaussian fitted to three or more `(z, log density)` values by a least-squares quadratic.
fn quadratic_gaussian_1d(z: &[f64], ld: &[f64]) -> Option<(f64, f64)> {
    let a = DMatrix::from_fn(z.len(), 3, |r, c| z[r].powi(c as i32));
    let b = DVector::from_column_slice(ld);
    let coef = a.svd(true, true).solve(&b, 1e-12).ok()?;
    let curv = -2.0 * coef[2];
    (curv > 0.0).then(|| (coef[1] / curv, 1.0 / curv.sqrt()))
}

/// Gaussian in standardized space from a least-squares quadratic fit of the log density.
fn quadratic_gaussian(z: &[Vec<f64>], ld: &[f64], d: usize) -> Option<(DVector<f64>, DMatrix<f64>)> {
    let n_par = 1 + d + d * (d + 1) / 2;
    if z.len() < n_par {
        return None;
    }
    let top = ld.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let a = DMatrix::from_fn(z.len(), n_par, |r, c| {
        let zr = &z[r];
        if c == 0 {
            return 1.0;
        }
        if c <= d {
            return zr[c - 1];
        }
        let mut k = d + 1;
        for i in 0..d {
            for j in i..d {
                if k == c {
                    return zr[i] * zr[j];
                }
                k += 1;
            }
        }
        unreachable!()
    });
    let b = DVector::from_iterator(z.len(), ld.iter().map(|v| v - top));
    let svd = a.svd(true, true);
    if svd.rank(1e-10 * svd.singular_values.max()) < n_par {
        return None;
    }
    let coef = svd.solve(&b, 1e-12).ok()?;
    // ld ≈ c + gᵀz − ½ zᵀMz
    let g = DVector::from_iterator(d, (0..d).map(|i| coef[1 + i]));
    let mut m = DMatrix::zeros(d, d);
    let mut k = d + 1;
    for i in 0..d {
        for j in i..d {
            if i == j {
                m[(i, i)] = -2.0 * coef[k];
            } else {
                m[(i, j)] = -coef[k];
                m[(j, i)] = -coef[k];
            }
            k += 1;
        }
    }
    let chol = m.clone().cholesky()?;
    let cov = chol.inverse();
    let mean = &cov * g;
    Some((mean, cov))
}

/// Marginal posterior densities of the free hyperparameters.
///
/// One dimension: natural cubic spline (four or more points) or least-squares
/// quadratic of the log density in standardized units. Higher dimensions: a
/// Gaussian from a least-squares quadratic fit of the log density over the
/// support points, falling back to the mode/curvature Gaussian.
pub fn hyper_marginals(grid: &HyperGrid, n_points: usize) -> (Vec<HyperMarginal>, Vec<String>) {
    let d = grid.dim();
    let mut warnings = Vec::new();
    if d == 0 {
        return (Vec::new(), warnings);
    }
    let b = grid.scaling_matrix();
    let mode = DVector::from_column_slice(&grid.mode);
    let n_points = n_points.max(11);
    let finite: Vec<usize> = (0..grid.len()).filter(|&k| grid.log_density[k].is_finite()).collect();
    let z: Vec<Vec<f64>> = finite.iter().map(|&k| grid.z[k].clone()).collect();
    let log_density: Vec<f64> = finite.iter().map(|&k| grid.log_density[k]).collect();

    if d == 1 {
        let mut pairs: Vec<(f64, f64)> = z.iter().map(|z| z[0]).zip(log_density.iter().copied()).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        pairs.dedup_by(|a, b| a.0 == b.0);
        let (zs, ld): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let interp = if zs.len() >= 4 {
            Interp1::Spline(NaturalSpline::new(zs.clone(), ld.clone()))
        } else if let Some((mean, sd)) = quadratic_gaussian_1d(&zs, &ld) {
            Interp1::Gaussian { mean, sd }
        } else {
            warnings.push(format!("degenerate grid for `{}`; using the mode/curvature Gaussian", grid.names[0]));
            Interp1::Gaussian { mean: 0.0, sd: 1.0 }
        };
        let scale = b[(0, 0)];
        let (zlo, zhi, dens): (f64, f64, Box<dyn Fn(f64) -> f64>) = match interp {
            Interp1::Spline(s) => {
                let spacing = (zs[zs.len() - 1] - zs[0]) / (zs.len() - 1) as f64;
                let top = ld.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (zs[0] - spacing, zs[zs.len() - 1] + spacing, Box::new(move |t| (s.eval(t) - top).exp()))
            }
            Interp1::Gaussian { mean, sd } => {
                (mean - 5.0 * sd, mean + 5.0 * sd, Box::new(move |t| (-0.5 * ((t - mean) / sd).powi(2)).exp()))
            }
        };
        let zgrid = linspace(zlo, zhi, n_points);
        let mut u: Vec<f64> = zgrid.iter().map(|t| grid.mode[0] + scale * t).collect();
        let mut dens_u: Vec<f64> = zgrid.iter().map(|&t| dens(t)).collect();
        if scale < 0.0 {
            u.reverse();
            dens_u.reverse();
        }
        return (vec![build_marginal(&grid.names[0], grid.transforms[0], u, dens_u)], warnings);
    }

    let (mz, cz) = match quadratic_gaussian(&z, &log_density, d) {
        Some(v) => v,
        None => {
            warnings.push("hyperparameter grid too degenerate for interpolation; using the mode/curvature Gaussian".into());
            (DVector::zeros(d), DMatrix::identity(d, d))
        }
    };
    let mean = &mode + &b * mz;
    let cov = &b * cz * b.transpose();
    let out = (0..d)
        .map(|i| {
            let (m, s) = (mean[i], cov[(i, i)].max(1e-300).sqrt());
            let u = linspace(m - 5.0 * s, m + 5.0 * s, n_points);
            let dens_u = u.iter().map(|t| (-0.5 * ((t - m) / s).powi(2)).exp()).collect();
            build_marginal(&grid.names[i], grid.transforms[i], u, dens_u)
        })
        .collect();
    (out, warnings)
}

fn build_marginal(name: &str, transform: Transform, u: Vec<f64>, dens_u: Vec<f64>) -> HyperMarginal {
    let internal = DensityGrid::normalized(u, dens_u);
    let v: Vec<f64> = internal.x.iter().map(|&t| transform.to_natural(t)).collect();
    let dens_v: Vec<f64> =
        internal.x.iter().zip(&internal.density).map(|(&t, &p)| p * (-transform.log_jacobian(t)).exp()).collect();
    let natural = DensityGrid::normalized(v, dens_v);
    HyperMarginal {
        name: name.to_string(),
        transform,
        internal_mean: internal.mean(),
        internal_sd: internal.sd(),
        internal_mode: internal.mode(),
        natural_mean: natural.mean(),
        natural_sd: natural.sd(),
        natural_mode: natural.mode(),
        natural_q025: natural.quantile(0.025),
        natural_q50: natural.quantile(0.5),
        natural_q975: natural.quantile(0.975),
        internal,
        natural,
    }
}
