//! Mode search, curvature and support-point layout in hyperparameter space.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::approx::{log_hyper_posterior, GaussianApprox, NewtonOptions};
use crate::error::{LgmError, Result};
use crate::hyper::Transform;
use crate::model::ModelAssembly;
use crate::par::Exec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Regular grid along the standardized axes, truncated by a log-density drop.
    AxisGrid,
    /// Centre, axial points and a (fractional) factorial shell.
    #[default]
    CcdLite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub strategy: Strategy,
    /// Grid spacing in standardized units.
    pub step: f64,
    pub drop_threshold: f64,
    /// Largest distance walked along each axis, in standardized units.
    pub max_axis_extent: f64,
    /// Design radius factor of the composite design (radius `ccd_f0 · √d`).
    pub ccd_f0: f64,
    pub hessian_step: f64,
    pub gradient_step: f64,
    pub mode_tol: f64,
    pub max_mode_iter: usize,
    /// Largest quasi-Newton step in internal units.
    pub max_mode_step: f64,
    pub density_points: usize,
    pub newton: NewtonOptions,
    pub exec: Exec,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::CcdLite,
            step: 1.0,
            drop_threshold: 2.5,
            max_axis_extent: 6.0,
            ccd_f0: 1.1,
            hessian_step: 1e-3,
            gradient_step: 1e-4,
            mode_tol: 1e-5,
            max_mode_iter: 200,
            max_mode_step: 2.0,
            density_points: 41,
            newton: NewtonOptions::default(),
            exec: Exec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSearch {
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub gradient: Vec<f64>,
}

/// Support points, their unnormalized log posterior densities and integration weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperGrid {
    pub names: Vec<String>,
    pub transforms: Vec<Transform>,
    /// Internal-scale coordinates of the free hyperparameters.
    pub points: Vec<Vec<f64>>,
    /// Standardized coordinates: `point = mode + scaling · z`.
    pub z: Vec<Vec<f64>>,
    pub log_density: Vec<f64>,
    pub weights: Vec<f64>,
    pub mode_index: usize,
    pub mode: Vec<f64>,
    /// Negative Hessian of the log posterior at the mode.
    pub curvature: Vec<Vec<f64>>,
    pub scaling: Vec<Vec<f64>>,
    pub strategy: Strategy,
    pub step: f64,
    pub warnings: Vec<String>,
    pub mode_search: Option<ModeSearch>,
}

fn log_sum_exp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = v.clone().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl HyperGrid {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.names.len()
    }

    /// `log Σ_k exp(log_density_k) Δ_k`
    pub fn log_marginal_likelihood(&self) -> f64 {
        log_sum_exp(self.log_density.iter().zip(&self.weights).map(|(l, w)| l + w.ln()))
    }

    /// Mixture weights `∝ exp(log_density_k) Δ_k`, summing to one.
    pub fn normalized_weights(&self) -> Vec<f64> {
        let lse = self.log_marginal_likelihood();
        let w: Vec<f64> = self
            .log_density
            .iter()
            .zip(&self.weights)
            .map(|(l, d)| (l + d.ln() - lse).exp())
            .collect();
        let s: f64 = w.iter().sum();
        w.into_iter().map(|x| x / s).collect()
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (k, &l) in self.log_density.iter().enumerate() {
            if l > self.log_density[best] {
                best = k;
            }
        }
        best
    }

    pub fn scaling_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_fn(d, d, |i, j| self.scaling[i][j])
    }

    /// `|det B|` of the standardizing map.
    pub fn volume_factor(&self) -> f64 {
        if self.dim() == 0 {
            1.0
        } else {
            self.scaling_matrix().determinant().abs()
        }
    }
}

/// Standardizing map from a negative Hessian: `B = V Λ^{-1/2}`, eigenpairs in
/// decreasing order with a sign convention for reproducibility.
fn standardize(curv: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let d = curv.nrows();
    let eig = SymmetricEigen::new(curv.clone());
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut b = DMatrix::zeros(d, d);
    for (col, &k) in order.iter().enumerate() {
        let lam = eig.eigenvalues[k];
        if !(lam > 0.0 && lam.is_finite()) {
            return None;
        }
        let mut v = eig.eigenvectors.column(k).into_owned();
        let lead = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if lead < 0.0 {
            v = -v;
        }
        b.set_column(col, &(v / lam.sqrt()));
    }
    Some(b)
}

struct Objective<'a> {
    model: &'a ModelAssembly,
    cfg: &'a EngineConfig,
}

impl Objective<'_> {
    fn eval(&self, theta: &[f64]) -> f64 {
        match log_hyper_posterior(self.model, theta, None, &self.cfg.newton) {
            Ok((v, _)) if v.is_finite() => v,
            _ => f64::NEG_INFINITY,
        }
    }

    fn eval_many(&self, pts: &[Vec<f64>]) -> Vec<f64> {
        self.cfg.exec.map(pts.len(), |i| self.eval(&pts[i]))
    }

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let h = self.cfg.gradient_step;
        let d = x.len();
        let pts: Vec<Vec<f64>> = (0..2 * d)
            .map(|k| {
                let mut p = x.to_vec();
                p[k / 2] += if k % 2 == 0 { h } else { -h };
                p
            })
            .collect();
        let f = self.eval_many(&pts);
        (0..d).map(|i| (f[2 * i] - f[2 * i + 1]) / (2.0 * h)).collect()
    }

    /// Negative Hessian by central differences.
    fn neg_hessian(&self, x: &[f64], f0: f64) -> DMatrix<f64> {
        let h = self.cfg.hessian_step;
        let d = x.len();
        let mut pts = Vec::new();
        for i in 0..d {
            for s in [h, -h] {
                let mut p = x.to_vec();
                p[i] += s;
                pts.push(p);
            }
        }
        for i in 0..d {
            for j in i + 1..d {
                for (si, sj) in [(h, h), (h, -h), (-h, h), (-h, -h)] {
                    let mut p = x.to_vec();
                    p[i] += si;
                    p[j] += sj;
                    pts.push(p);
                }
            }
        }
        let f = self.eval_many(&pts);
        let mut hess = DMatrix::zeros(d, d);
        for i in 0..d {
            hess[(i, i)] = -(f[2 * i] - 2.0 * f0 + f[2 * i + 1]) / (h * h);
        }
        let mut k = 2 * d;
        for i in 0..d {
            for j in i + 1..d {
                let v = -(f[k] - f[k + 1] - f[k + 2] + f[k + 3]) / (4.0 * h * h);
                hess[(i, j)] = v;
                hess[(j, i)] = v;
                k += 4;
            }
        }
        hess
    }
}

/// Quasi-Newton (BFGS) maximization of the log hyperparameter posterior.
pub fn find_mode(model: &ModelAssembly, cfg: &EngineConfig) -> Result<(Vec<f64>, f64, ModeSearch)> {
    let obj = Objective { model, cfg };
    let mut x = model.hyper().initial_free();
    let d = x.len();
    let mut fx = obj.eval(&x);
    let mut evaluations = 1;
    if !fx.is_finite() {
        return Err(LgmError::NonFinite("log posterior at the initial hyperparameters"));
    }
    if d == 0 {
        return Ok((x, fx, ModeSearch { iterations: 0, evaluations, converged: true, gradient: vec![] }));
    }
    let mut g = obj.gradient(&x);
    evaluations += 2 * d;
    let mut hinv = DMatrix::<f64>::identity(d, d);
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..cfg.max_mode_iter {
        iterations = it + 1;
        let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if gmax < cfg.mode_tol {
            converged = true;
            break;
        }
        let gv = DVector::from_column_slice(&g);
        let mut p = &hinv * &gv;
        if p.dot(&gv) <= 0.0 {
            hinv = DMatrix::identity(d, d);
            p = gv.clone();
        }
        let pn = p.amax();
        if pn > cfg.max_mode_step {
            p *= cfg.max_mode_step / pn;
        }
        let slope = p.dot(&gv);
        let mut t = 1.0;
        let mut next = None;
        for _ in 0..40 {
            let trial: Vec<f64> = (0..d).map(|i| x[i] + t * p[i]).collect();
            let ft = obj.eval(&trial);
            evaluations += 1;
            if ft.is_finite() && ft >= fx + 1e-4 * t * slope {
                next = Some((trial, ft));
                break;
            }
            t *= 0.5;
        }
        let Some((xn, fnew)) = next else {
            converged = gmax < 1e3 * cfg.mode_tol;
            break;
        };
        let gn = obj.gradient(&xn);
        evaluations += 2 * d;
        let s = DVector::from_iterator(d, (0..d).map(|i| xn[i] - x[i]));
        // y is the change in the gradient of the minimized function −f.
        let y = DVector::from_iterator(d, (0..d).map(|i| g[i] - gn[i]));
        let sy = s.dot(&y);
        if sy > 1e-12 {
            if it == 0 {
                hinv = DMatrix::identity(d, d) * (sy / y.dot(&y));
            }
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(d, d);
            let a = &i - &s * y.transpose() * rho;
            let b = &i - &y * s.transpose() * rho;
            hinv = &a * &hinv * &b + &s * s.transpose() * rho;
        }
        let small_step = s.amax() < 1e-9;
        let small_change = (fnew - fx).abs() < 1e-12 * fx.abs().max(1.0);
        x = xn;
        fx = fnew;
        g = gn;
        if small_step && small_change {
            converged = g.iter().fold(0.0f64, |m, v| m.max(v.abs())) < 1e3 * cfg.mode_tol;
            break;
        }
    }
    if !converged {
        log::warn!("hyperparameter mode search stopped after {iterations} iterations");
    }
    Ok((x, fx, ModeSearch { iterations, evaluations, converged, gradient: g }))
}

/// Finite-difference gradient of the log hyperparameter posterior (as used by the mode search).
pub fn log_posterior_gradient(model: &ModelAssembly, theta: &[f64], cfg: &EngineConfig) -> Vec<f64> {
    Objective { model, cfg }.gradient(theta)
}

/// Standardized design points and their weights (before the `|det B|` factor).
fn ccd_design(d: usize, f0: f64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let r = f0 * (d as f64).sqrt();
    let mut pts = vec![vec![0.0; d]];
    for j in 0..d {
        for s in [1.0, -1.0] {
            let mut z = vec![0.0; d];
            z[j] = s * r;
            pts.push(z);
        }
    }
    if d >= 2 {
        let free = if d >= 5 { d - 1 } else { d };
        for mask in 0..(1usize << free) {
            let mut z: Vec<f64> = (0..free).map(|b| if mask >> b & 1 == 1 { -f0 } else { f0 }).collect();
            if free < d {
                let sign: f64 = z.iter().map(|v| v.signum()).product();
                z.push(sign * f0);
            }
            pts.push(z);
        }
    }
    let n = pts.len() as f64;
    let c = (2.0 * std::f64::consts::PI).powf(d as f64 / 2.0);
    let w0 = c * (1.0 - 1.0 / (f0 * f0));
    let w1 = c * (d as f64 * f0 * f0 / 2.0).exp() / ((n - 1.0) * f0 * f0);
    let mut w = vec![w1; pts.len()];
    w[0] = w0;
    (pts, w)
}

/// Laplace evaluations at standardized points.
fn evaluate_points<T: Send, K: Fn(GaussianApprox) -> T + Sync>(
    model: &ModelAssembly,
    cfg: &EngineConfig,
    mode: &[f64],
    b: &DMatrix<f64>,
    zs: &[Vec<f64>],
    keep: &K,
) -> Vec<Result<(f64, T)>> {
    cfg.exec.map(zs.len(), |k| {
        let theta = to_theta(mode, b, &zs[k]);
        log_hyper_posterior(model, &theta, None, &cfg.newton).map(|(ld, a)| (ld, keep(a)))
    })
}

fn to_theta(mode: &[f64], b: &DMatrix<f64>, z: &[f64]) -> Vec<f64> {
    let d = mode.len();
    (0..d).map(|i| mode[i] + (0..d).map(|j| b[(i, j)] * z[j]).sum::<f64>()).collect()
}

/// Explores the hyperparameter posterior and evaluates the Gaussian approximation at every support point.
pub fn explore_hyperparameters(model: &ModelAssembly, cfg: &EngineConfig) -> Result<(HyperGrid, Vec<GaussianApprox>)> {
    explore_hyperparameters_with(model, cfg, |a| a)
}

/// As [`explore_hyperparameters`], passing each approximation through `keep` as soon as it is computed.
pub fn explore_hyperparameters_with<T, K>(model: &ModelAssembly, cfg: &EngineConfig, keep: K) -> Result<(HyperGrid, Vec<T>)>
where
    T: Send,
    K: Fn(GaussianApprox) -> T + Sync,
{
    let free = model.hyper().free_specs();
    let names: Vec<String> = free.iter().map(|s| s.name.clone()).collect();
    let transforms: Vec<Transform> = free.iter().map(|s| s.transform).collect();
    let d = names.len();
    if !(cfg.step > 0.0 && cfg.drop_threshold > 0.0 && cfg.ccd_f0 > 1.0) {
        return Err(LgmError::InvalidInput("step and drop threshold must be positive and the design factor above 1".into()));
    }
    let (mode, f_mode, search) = find_mode(model, cfg)?;
    let mut warnings = Vec::new();
    if !search.converged {
        warnings.push("hyperparameter mode search did not converge".to_string());
    }

    if d == 0 {
        let (ld, a) = log_hyper_posterior(model, &[], None, &cfg.newton)?;
        let grid = HyperGrid {
            names,
            transforms,
            points: vec![vec![]],
            z: vec![vec![]],
            log_density: vec![ld],
            weights: vec![1.0],
            mode_index: 0,
            mode,
            curvature: vec![],
            scaling: vec![],
            strategy: cfg.strategy,
            step: cfg.step,
            warnings,
            mode_search: Some(search),
        };
        return Ok((grid, vec![keep(a)]));
    }

    let obj = Objective { model, cfg };
    let curv = obj.neg_hessian(&mode, f_mode);
    let curv = (&curv + curv.transpose()) * 0.5;
    let b = match standardize(&curv) {
        Some(b) => b,
        None => {
            let msg = "negative Hessian at the mode is not positive definite; using identity scaling".to_string();
            log::warn!("{msg}");
            warnings.push(msg);
            DMatrix::identity(d, d)
        }
    };
    let det_b = b.determinant().abs();

    let (zs, base_w, results) = match cfg.strategy {
        Strategy::CcdLite => {
            let (zs, w) = ccd_design(d, cfg.ccd_f0);
            let res = evaluate_points(model, cfg, &mode, &b, &zs, &keep);
            (zs, w, res)
        }
        Strategy::AxisGrid => axis_grid(model, cfg, &mode, &b, d, &keep)?,
    };

    let mut points = Vec::new();
    let mut z_kept = Vec::new();
    let mut log_density = Vec::new();
    let mut weights = Vec::new();
    let mut approxes = Vec::new();
    for ((z, w), r) in zs.into_iter().zip(base_w).zip(results) {
        match r {
            Ok((ld, a)) => {
                points.push(to_theta(&mode, &b, &z));
                z_kept.push(z);
                log_density.push(ld);
                weights.push(w * det_b);
                approxes.push(a);
            }
            Err(e) => {
                let msg = format!("support point at z = {z:?} dropped: {e}");
                log::warn!("{msg}");
                warnings.push(msg);
            }
        }
    }
    if points.is_empty() {
        return Err(LgmError::NonFinite("log posterior at every support point"));
    }
    let mut grid = HyperGrid {
        names,
        transforms,
        points,
        z: z_kept,
        log_density,
        weights,
        mode_index: 0,
        mode,
        curvature: (0..d).map(|i| (0..d).map(|j| curv[(i, j)]).collect()).collect(),
        scaling: (0..d).map(|i| (0..d).map(|j| b[(i, j)]).collect()).collect(),
        strategy: cfg.strategy,
        step: cfg.step,
        warnings,
        mode_search: Some(search),
    };
    grid.mode_index = grid.argmax();
    Ok((grid, approxes))
}

type Evaluated<T> = (Vec<Vec<f64>>, Vec<f64>, Vec<Result<(f64, T)>>);

fn axis_grid<T: Send, K: Fn(GaussianApprox) -> T + Sync>(
    model: &ModelAssembly,
    cfg: &EngineConfig,
    mode: &[f64],
    b: &DMatrix<f64>,
    d: usize,
    keep: &K,
) -> Result<Evaluated<T>> {
    let centre = log_hyper_posterior(model, mode, None, &cfg.newton).map(|(ld, a)| (ld, keep(a)))?;
    let f0 = centre.0;
    let floor = f0 - cfg.drop_threshold;
    // Walk each signed axis until the density drops below the threshold.
    let walks: Vec<Vec<(i64, (f64, T))>> = cfg.exec.map(2 * d, |k| {
        let (j, s) = (k / 2, if k % 2 == 0 { 1i64 } else { -1 });
        let mut out = Vec::new();
        let max_steps = (cfg.max_axis_extent / cfg.step).floor().max(1.0) as i64;
        for step in 1..=max_steps {
            let mut z = vec![0.0; d];
            z[j] = (s * step) as f64 * cfg.step;
            match log_hyper_posterior(model, &to_theta(mode, b, &z), None, &cfg.newton) {
                Ok((ld, a)) if ld >= floor => out.push((s * step, (ld, keep(a)))),
                _ => break,
            }
        }
        out
    });
    let mut lo = vec![0i64; d];
    let mut hi = vec![0i64; d];
    for (k, w) in walks.iter().enumerate() {
        let j = k / 2;
        if let Some((last, _)) = w.last() {
            if k % 2 == 0 {
                hi[j] = *last;
            } else {
                lo[j] = *last;
            }
        }
    }
    let mut zs = vec![vec![0.0; d]];
    let mut results = vec![Ok(centre)];
    for (k, w) in walks.into_iter().enumerate() {
        for (step, r) in w {
            let mut z = vec![0.0; d];
            z[k / 2] = step as f64 * cfg.step;
            zs.push(z);
            results.push(Ok(r));
        }
    }
    // Off-axis combinations inside the box.
    let mut combos = Vec::new();
    let mut idx = lo.clone();
    loop {
        if idx.iter().filter(|&&v| v != 0).count() >= 2 {
            combos.push(idx.iter().map(|&v| v as f64 * cfg.step).collect::<Vec<f64>>());
        }
        let mut j = 0;
        loop {
            if j == d {
                break;
            }
            if idx[j] < hi[j] {
                idx[j] += 1;
                break;
            }
            idx[j] = lo[j];
            j += 1;
        }
        if j == d {
            break;
        }
    }
    let combo_res = evaluate_points(model, cfg, mode, b, &combos, keep);
    for (z, r) in combos.into_iter().zip(combo_res) {
        if let Ok((ld, a)) = r {
            if ld >= floor {
                zs.push(z);
                results.push(Ok((ld, a)));
            }
        }
    }
    let w = vec![cfg.step.powi(d as i32); zs.len()];
    Ok((zs, w, results))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ccd_weights_integrate_gaussian_moments() {
        for d in 1..=6 {
            let (pts, w) = ccd_design(d, 1.1);
            let dens = |z: &Vec<f64>| (-0.5 * z.iter().map(|v| v * v).sum::<f64>()).exp();
            let m0: f64 = pts.iter().zip(&w).map(|(z, w)| w * dens(z)).sum();
            let m2: f64 = pts.iter().zip(&w).map(|(z, w)| w * dens(z) * z[0] * z[0]).sum();
            let c = (2.0 * std::f64::consts::PI).powf(d as f64 / 2.0);
            assert!((m0 / c - 1.0).abs() < 1e-12, "d={d}");
            assert!((m2 / c - 1.0).abs() < 1e-12, "d={d}: {}", m2 / c);
            for (i, a) in pts.iter().enumerate() {
                for b in &pts[..i] {
                    assert_ne!(a, b);
                }
            }
        }
    }

    #[test]
    fn standardize_whitens() {
        let h = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let b = standardize(&h).unwrap();
        let id = b.transpose() * &h * &b;
        assert!((id - DMatrix::identity(2, 2)).norm() < 1e-12);
        assert!(standardize(&DMatrix::from_row_slice(1, 1, &[-1.0])).is_none());
    }
}
