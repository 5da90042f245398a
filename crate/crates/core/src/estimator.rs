//! Gaussian-process cost and speed estimation with CVaR risk shaping.
//!
//! Two exact GPs share one RBF kernel: the cost model regresses roughness
//! on [descriptor ; speed / max_speed], the speed model regresses speed on
//! [descriptor ; roughness]. Predictions are inflated by the Gaussian CVaR
//! tail factor; the speed-side tail level alpha_s adapts online so the
//! vehicle explores faster speeds only while measured roughness stays under
//! budget.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::bev::BevGrid;
use crate::buffer::ExperienceSample;
use crate::error::{Error, Result};
use crate::feature_space::FeatureDescriptor;

/// RBF kernel and noise settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GprHyperparams {
    pub signal_variance: f64,
    pub length_scale: f64,
    pub noise_variance: f64,
}

impl Default for GprHyperparams {
    fn default() -> Self {
        GprHyperparams { signal_variance: 0.25, length_scale: 1.0, noise_variance: 1e-3 }
    }
}

impl GprHyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.signal_variance > 0.0 && self.length_scale > 0.0 && self.noise_variance > 0.0) {
            return Err(Error::invalid("GPR hyperparameters must be positive"));
        }
        Ok(())
    }
}

/// Kernel values with exponent beyond this are exact zeros in f64 terms
/// (exp(-45) ~ 3e-20), so they are skipped.
const EXP_CUTOFF: f64 = 45.0;
/// Latent predictive variance is strictly positive with positive noise;
/// the floor absorbs last-ulp rounding at training points.
const VAR_FLOOR: f64 = 1e-12;
/// Rows per parallel batch-prediction chunk. Fixed so results do not depend
/// on thread count.
const PREDICT_CHUNK: usize = 512;

fn rbf(d2: f64, signal_variance: f64, inv_two_l2: f64) -> f64 {
    let t = d2 * inv_two_l2;
    if t > EXP_CUTOFF {
        0.0
    } else {
        signal_variance * (-t).exp()
    }
}

/// Exact GP regressor with a cached SPD factorization.
#[derive(Debug, Clone)]
pub struct GprModel {
    /// n x d training inputs, row per sample.
    x: DMatrix<f64>,
    /// d x n transpose, cached for batched kernel evaluation.
    x_t: DMatrix<f64>,
    x_sqnorm: Vec<f64>,
    hyper: GprHyperparams,
    /// Lower Cholesky factor of K + (noise + jitter) I.
    chol_l: DMatrix<f64>,
    /// Transposed inverse factor in single precision: the batched variance
    /// product is the rasterization bottleneck, and f32 keeps per-cell
    /// variance within ~1e-6 of the exact f64 path, far below any map
    /// tolerance. Single-query prediction stays entirely in f64.
    l_inv_t_f32: DMatrix<f32>,
    /// (K + noise I)^-1 y.
    weights: DVector<f64>,
    /// Extra diagonal jitter that the factorization needed (usually 0).
    jitter: f64,
}

/// Per-row squared norms, accumulated down columns so the column-major
/// storage is walked contiguously.
fn row_sqnorms(m: &DMatrix<f64>) -> Vec<f64> {
    let rows = m.nrows();
    let mut out = vec![0.0; rows];
    let data = m.as_slice();
    for c in 0..m.ncols() {
        let col = &data[c * rows..(c + 1) * rows];
        for (acc, v) in out.iter_mut().zip(col) {
            *acc += v * v;
        }
    }
    out
}

const INV_BLOCK: usize = 64;

/// Inverse of a lower-triangular matrix via blocked forward substitution:
/// `M[i,j] = L_ii^-1 (I[i,j] - L[i, j..i] M[j..i, j])`, so the cross term
/// for each block pair is a single gemm over all previously solved rows.
fn invert_lower_triangular(l: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = l.nrows();
    let starts: Vec<usize> = (0..n).step_by(INV_BLOCK).collect();

    let diag_inv: Option<Vec<DMatrix<f64>>> = starts
        .iter()
        .map(|&s| {
            let len = INV_BLOCK.min(n - s);
            l.view((s, s), (len, len))
                .into_owned()
                .solve_lower_triangular(&DMatrix::identity(len, len))
        })
        .collect();
    let diag_inv = diag_inv?;

    let mut out = DMatrix::zeros(n, n);
    for (jb, &js) in starts.iter().enumerate() {
        let jlen = INV_BLOCK.min(n - js);
        for (ib, &is) in starts.iter().enumerate().skip(jb) {
            let ilen = INV_BLOCK.min(n - is);
            let block = if ib == jb {
                diag_inv[ib].clone()
            } else {
                let width = is - js;
                let rhs = l.view((is, js), (ilen, width)) * out.view((js, js), (width, jlen));
                -(&diag_inv[ib] * rhs)
            };
            out.view_mut((is, js), (ilen, jlen)).copy_from(&block);
        }
    }
    Some(out)
}

impl GprModel {
    /// Fits the model on `inputs` (equal-length rows) and `targets`.
    /// Factorization failures retry with 10x escalating jitter before
    /// surfacing a numeric error.
    pub fn fit(inputs: &[Vec<f64>], targets: &[f64], hyper: GprHyperparams) -> Result<Self> {
        hyper.validate()?;
        let n = inputs.len();
        if n == 0 || targets.len() != n {
            return Err(Error::invalid("need equally many inputs and targets, at least one"));
        }
        let d = inputs[0].len();
        if d == 0 || inputs.iter().any(|r| r.len() != d) {
            return Err(Error::invalid("inputs must share a non-zero dimension"));
        }
        if inputs.iter().flatten().any(|v| !v.is_finite())
            || targets.iter().any(|v| !v.is_finite())
        {
            return Err(Error::invalid("inputs and targets must be finite"));
        }

        let x = DMatrix::from_fn(n, d, |i, j| inputs[i][j]);
        let x_t = x.transpose();
        let x_sqnorm = row_sqnorms(&x);
        let inv_two_l2 = 1.0 / (2.0 * hyper.length_scale * hyper.length_scale);

        // Gram trick: |x_i - x_j|^2 = |x_i|^2 + |x_j|^2 - 2 x_i . x_j with
        // the cross term as one gemm.
        let mut kernel = &x * &x_t;
        {
            let data = kernel.as_mut_slice();
            for j in 0..n {
                let col = &mut data[j * n..(j + 1) * n];
                for (i, v) in col.iter_mut().enumerate() {
                    let d2 = (x_sqnorm[i] + x_sqnorm[j] - 2.0 * *v).max(0.0);
                    *v = rbf(d2, hyper.signal_variance, inv_two_l2);
                }
                col[j] = hyper.signal_variance + hyper.noise_variance;
            }
        }

        let y = DVector::from_row_slice(targets);
        let mut jitter = 0.0;
        let mut attempt_jitter = 1e-12 * (hyper.signal_variance + hyper.noise_variance);
        let chol = loop {
            let mut k = kernel.clone();
            if jitter > 0.0 {
                for i in 0..n {
                    k[(i, i)] += jitter;
                }
            }
            match k.cholesky() {
                Some(c) => break c,
                None => {
                    if attempt_jitter > 1e6 {
                        return Err(Error::Numeric(format!(
                            "kernel factorization failed even with jitter {jitter}"
                        )));
                    }
                    jitter = attempt_jitter;
                    attempt_jitter *= 10.0;
                }
            }
        };

        let weights = chol.solve(&y);
        let chol_l: DMatrix<f64> = chol.l();
        let l_inv = invert_lower_triangular(&chol_l)
            .ok_or_else(|| Error::Numeric("singular Cholesky factor".into()))?;

        Ok(GprModel {
            x,
            x_t,
            x_sqnorm,
            hyper,
            chol_l,
            l_inv_t_f32: l_inv.transpose().map(|v| v as f32),
            weights,
            jitter,
        })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn hyper(&self) -> &GprHyperparams {
        &self.hyper
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    fn kernel_vector(&self, query: &[f64]) -> DVector<f64> {
        let inv_two_l2 = 1.0 / (2.0 * self.hyper.length_scale * self.hyper.length_scale);
        DVector::from_fn(self.len(), |i, _| {
            let d2: f64 = (0..self.dim())
                .map(|c| {
                    let diff = self.x[(i, c)] - query[c];
                    diff * diff
                })
                .sum();
            rbf(d2, self.hyper.signal_variance, inv_two_l2)
        })
    }

    /// Predictive mean and latent variance at one query point.
    pub fn predict(&self, query: &[f64]) -> (f64, f64) {
        assert_eq!(query.len(), self.dim(), "query dimension mismatch");
        let k_star = self.kernel_vector(query);
        let mean = k_star.dot(&self.weights);
        let solved = self
            .chol_l
            .solve_lower_triangular(&k_star)
            .expect("factor is non-singular");
        let var = self.hyper.signal_variance - solved.norm_squared();
        (mean, var.max(VAR_FLOOR))
    }

    /// Batched prediction over `queries` rows. Chunked and evaluated in
    /// parallel; per-cell results are identical regardless of thread count.
    pub fn predict_batch(&self, queries: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
        assert_eq!(queries.ncols(), self.dim(), "query dimension mismatch");
        let m = queries.nrows();
        let ranges: Vec<(usize, usize)> = (0..m)
            .step_by(PREDICT_CHUNK)
            .map(|s| (s, (s + PREDICT_CHUNK).min(m)))
            .collect();
        let results: Vec<(Vec<f64>, Vec<f64>)> = ranges
            .par_iter()
            .map(|&(start, end)| self.predict_chunk(queries, start, end))
            .collect();

        let mut means = Vec::with_capacity(m);
        let mut vars = Vec::with_capacity(m);
        for (mu, v) in results {
            means.extend(mu);
            vars.extend(v);
        }
        (means, vars)
    }

    fn predict_chunk(&self, queries: &DMatrix<f64>, start: usize, end: usize) -> (Vec<f64>, Vec<f64>) {
        let rows = end - start;
        let n = self.len();
        let sv = self.hyper.signal_variance;
        let inv_two_l2 = 1.0 / (2.0 * self.hyper.length_scale * self.hyper.length_scale);

        let chunk = queries.rows(start, rows).into_owned();
        let q2 = row_sqnorms(&chunk);
        // Distances via the Gram trick; the cross term is one gemm.
        let cross = &chunk * &self.x_t;
        let mut k_star = DMatrix::zeros(rows, n);
        let mut k_star_f32 = DMatrix::<f32>::zeros(rows, n);
        let mut row_has_signal = vec![false; rows];
        {
            let ks = k_star.as_mut_slice();
            let ks32 = k_star_f32.as_mut_slice();
            let cs = cross.as_slice();
            for j in 0..n {
                let base = j * rows;
                let xs = self.x_sqnorm[j];
                for i in 0..rows {
                    let d2 = (q2[i] + xs - 2.0 * cs[base + i]).max(0.0);
                    let t = d2 * inv_two_l2;
                    if t <= EXP_CUTOFF {
                        let v = sv * (-t).exp();
                        ks[base + i] = v;
                        ks32[base + i] = v as f32;
                        row_has_signal[i] = true;
                    }
                }
            }
        }

        let means = (&k_star * &self.weights).as_slice().to_vec();
        let mut vars = vec![sv; rows];
        // Rows whose kernel vector is exactly zero recover the prior, so
        // only the remainder needs the triangular-inverse product.
        let active: Vec<usize> = (0..rows).filter(|&i| row_has_signal[i]).collect();
        if active.is_empty() {
            return (means, vars);
        }
        let explained = if active.len() == rows {
            self.explained_f32(&k_star_f32)
        } else {
            let mut compact = DMatrix::<f32>::zeros(active.len(), n);
            for j in 0..n {
                for (r, &i) in active.iter().enumerate() {
                    compact[(r, j)] = k_star_f32[(i, j)];
                }
            }
            self.explained_f32(&compact)
        };
        for (r, &i) in active.iter().enumerate() {
            vars[i] = (sv - explained[r]).max(VAR_FLOOR);
        }
        (means, vars)
    }

    /// Per-row ||L^-1 k||^2 from the f32 kernel matrix. The factor is upper
    /// triangular, so each column block only multiplies against the kernel
    /// columns above its diagonal, roughly halving the gemm work.
    fn explained_f32(&self, k32: &DMatrix<f32>) -> Vec<f64> {
        const COL_BLOCK: usize = 128;
        let rows = k32.nrows();
        let n = self.len();
        let mut acc = vec![0.0f64; rows];
        let mut cs = 0;
        while cs < n {
            let cw = COL_BLOCK.min(n - cs);
            let depth = cs + cw;
            let solved =
                k32.view((0, 0), (rows, depth)) * self.l_inv_t_f32.view((0, cs), (depth, cw));
            let data = solved.as_slice();
            for c in 0..cw {
                let col = &data[c * rows..(c + 1) * rows];
                for (a, v) in acc.iter_mut().zip(col) {
                    *a += (*v as f64) * (*v as f64);
                }
            }
            cs += cw;
        }
        acc
    }
}

pub(crate) mod normal {
    /// Standard normal density.
    pub fn pdf(x: f64) -> f64 {
        (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
    }

    /// Inverse standard normal CDF, rational approximation (relative error
    /// below 1.2e-9 over (0, 1)).
    pub fn inv_cdf(p: f64) -> f64 {
        debug_assert!(p > 0.0 && p < 1.0);
        const A: [f64; 6] = [
            -3.969683028665376e+01,
            2.209460984245205e+02,
            -2.759285104469687e+02,
            1.383577518672690e+02,
            -3.066479806614716e+01,
            2.506628277459239e+00,
        ];
        const B: [f64; 5] = [
            -5.447609879822406e+01,
            1.615858368580409e+02,
            -1.556989798598866e+02,
            6.680131188771972e+01,
            -1.328068155288572e+01,
        ];
        const C: [f64; 6] = [
            -7.784894002430293e-03,
            -3.223964580411365e-01,
            -2.400758277161838e+00,
            -2.549732539343734e+00,
            4.374664141464968e+00,
            2.938163982698783e+00,
        ];
        const D: [f64; 4] = [
            7.784695709041462e-03,
            3.224671290700398e-01,
            2.445134137142996e+00,
            3.754408661907416e+00,
        ];
        const P_LOW: f64 = 0.02425;

        if p < P_LOW {
            let q = (-2.0 * p.ln()).sqrt();
            (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
                / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
        } else if p <= 1.0 - P_LOW {
            let q = p - 0.5;
            let r = q * q;
            (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
                / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
        } else {
            let q = (-2.0 * (1.0 - p).ln()).sqrt();
            -((((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
                / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0))
        }
    }
}

/// Gaussian CVaR tail multiplier phi(Phi^-1(alpha)) / (1 - alpha).
pub fn cvar_tail_factor(alpha: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} must lie in [0, 1)")));
    }
    if alpha == 0.0 {
        return Ok(0.0);
    }
    Ok(normal::pdf(normal::inv_cdf(alpha)) / (1.0 - alpha))
}

/// Risk-adjusted prediction: mu plus the CVaR tail factor applied to the
/// standard deviation. Equals the expected value of the worst (1 - alpha)
/// tail of N(mu, v); alpha = 0 degenerates to the mean.
pub fn cvar_adjust(mu: f64, v: f64, alpha: f64) -> Result<f64> {
    if !(v >= 0.0) {
        return Err(Error::invalid("variance must be >= 0"));
    }
    Ok(mu + v.sqrt() * cvar_tail_factor(alpha)?)
}

/// Adaptive speed-risk state.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskState {
    pub alpha_r: f64,
    pub r_max: f64,
    pub alpha_s: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub delta_up: f64,
    pub delta_down: f64,
    /// "Within margin of the speed limit", m/s.
    pub speed_margin: f64,
    /// "Significantly less than R_max" margin.
    pub roughness_margin: f64,
}

impl RiskState {
    pub fn from_config(risk: &crate::config::RiskConfig) -> Self {
        RiskState {
            alpha_r: risk.alpha_r,
            r_max: risk.r_max,
            alpha_s: risk.alpha_s_init,
            alpha_min: risk.alpha_s_min,
            alpha_max: risk.alpha_s_max,
            delta_up: risk.delta_up,
            delta_down: risk.delta_down,
            speed_margin: risk.speed_margin,
            roughness_margin: risk.roughness_margin,
        }
    }

    /// One adaptation step: back off when measured roughness exceeds the
    /// budget; push up when tracking the speed limit while clearly under it;
    /// otherwise hold.
    pub fn update_alpha_s(&mut self, measured_speed: f64, speed_limit: f64, measured_roughness: f64) {
        if measured_roughness > self.r_max {
            self.alpha_s = (self.alpha_s - self.delta_down).max(self.alpha_min);
        } else if (measured_speed - speed_limit).abs() <= self.speed_margin
            && measured_roughness < self.r_max - self.roughness_margin
        {
            self.alpha_s = (self.alpha_s + self.delta_up).min(self.alpha_max);
        }
    }
}

/// Cost model: roughness given [descriptor ; speed / max_speed].
#[derive(Debug, Clone)]
pub struct CostModel {
    gpr: GprModel,
    max_speed: f64,
}

pub fn fit_cost_model(
    snapshot: &[ExperienceSample],
    hyper: GprHyperparams,
    max_speed: f64,
) -> Result<CostModel> {
    if snapshot.is_empty() {
        return Err(Error::invalid("cost model needs a non-empty snapshot"));
    }
    if !(max_speed > 0.0) {
        return Err(Error::invalid("max speed must be positive"));
    }
    let inputs: Vec<Vec<f64>> = snapshot
        .iter()
        .map(|s| {
            let mut row = s.descriptor.values().to_vec();
            row.push(s.speed / max_speed);
            row
        })
        .collect();
    let targets: Vec<f64> = snapshot.iter().map(|s| s.roughness).collect();
    Ok(CostModel { gpr: GprModel::fit(&inputs, &targets, hyper)?, max_speed })
}

impl CostModel {
    /// (mu_R, v_R) at the descriptor and query speed.
    pub fn predict(&self, descriptor: &FeatureDescriptor, speed: f64) -> (f64, f64) {
        let mut q = descriptor.values().to_vec();
        q.push(speed / self.max_speed);
        self.gpr.predict(&q)
    }

    pub fn gpr(&self) -> &GprModel {
        &self.gpr
    }

    pub fn max_speed(&self) -> f64 {
        self.max_speed
    }
}

/// Speed model: speed given [descriptor ; roughness].
#[derive(Debug, Clone)]
pub struct SpeedModel {
    gpr: GprModel,
}

pub fn fit_speed_model(snapshot: &[ExperienceSample], hyper: GprHyperparams) -> Result<SpeedModel> {
    if snapshot.is_empty() {
        return Err(Error::invalid("speed model needs a non-empty snapshot"));
    }
    let inputs: Vec<Vec<f64>> = snapshot
        .iter()
        .map(|s| {
            let mut row = s.descriptor.values().to_vec();
            row.push(s.roughness);
            row
        })
        .collect();
    let targets: Vec<f64> = snapshot.iter().map(|s| s.speed).collect();
    Ok(SpeedModel { gpr: GprModel::fit(&inputs, &targets, hyper)? })
}

impl SpeedModel {
    /// (mu_S, v_S) at the descriptor and roughness budget.
    pub fn predict(&self, descriptor: &FeatureDescriptor, r_max: f64) -> (f64, f64) {
        let mut q = descriptor.values().to_vec();
        q.push(r_max);
        self.gpr.predict(&q)
    }

    /// CVaR-inflated speed limit, clamped to [0, s_hard_max].
    pub fn speed_limit(
        &self,
        descriptor: &FeatureDescriptor,
        r_max: f64,
        alpha_s: f64,
        s_hard_max: f64,
    ) -> Result<f64> {
        let (mu, v) = self.predict(descriptor, r_max);
        Ok(cvar_adjust(mu, v, alpha_s)?.clamp(0.0, s_hard_max))
    }

    pub fn gpr(&self) -> &GprModel {
        &self.gpr
    }
}

/// Writes cost and speed-limit layers for every known cell. OOD cells are
/// overridden to cost 1 and speed 0 regardless of the models. Cell results
/// do not depend on processing order.
pub fn rasterize(
    grid: &mut BevGrid,
    cost_model: &CostModel,
    speed_model: &SpeedModel,
    risk: &RiskState,
    query_speed: f64,
    s_hard_max: f64,
) -> Result<()> {
    let cells = grid.known_cells();
    if cells.is_empty() {
        return Ok(());
    }
    let k = grid.k();
    let m = cells.len();
    let cost_factor = cvar_tail_factor(risk.alpha_r)?;
    let speed_factor = cvar_tail_factor(risk.alpha_s)?;

    let scaled_speed = query_speed / cost_model.max_speed;
    let mut q_cost = DMatrix::zeros(m, k + 1);
    let mut q_speed = DMatrix::zeros(m, k + 1);
    for (row, &(ix, iy)) in cells.iter().enumerate() {
        let desc = grid.descriptor(ix, iy).expect("known cell has descriptor");
        for (c, v) in desc.iter().enumerate() {
            q_cost[(row, c)] = *v;
            q_speed[(row, c)] = *v;
        }
        q_cost[(row, k)] = scaled_speed;
        q_speed[(row, k)] = risk.r_max;
    }

    let (cost_mu, cost_var) = cost_model.gpr.predict_batch(&q_cost);
    let (speed_mu, speed_var) = speed_model.gpr.predict_batch(&q_speed);

    for (row, &(ix, iy)) in cells.iter().enumerate() {
        if grid.ood_at(ix, iy) {
            grid.set_cost(ix, iy, 1.0);
            grid.set_speed_limit(ix, iy, 0.0);
            continue;
        }
        let cost = (cost_mu[row] + cost_var[row].sqrt() * cost_factor).clamp(0.0, 1.0);
        let speed = (speed_mu[row] + speed_var[row].sqrt() * speed_factor).clamp(0.0, s_hard_max);
        grid.set_cost(ix, iy, cost);
        grid.set_speed_limit(ix, iy, speed);
    }
    Ok(())
}
