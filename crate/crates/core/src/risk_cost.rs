//! Risk-sensitive cost estimation from sample paths, the growth-rate
//! functional of the wealth problem, the measure-change consistency check
//! and the BSDE residual check.

use std::io::Write;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::hamiltonians::{portfolio_running_cost, GeneralProblem};
use crate::lq_coeffs::PortfolioParams;
use crate::sde_mc::{
    rate_at_nodes, simulate_factor_transformed, simulate_wealth_original, FeedbackPolicy, NoiseSource, SamplePaths,
};

/// Per-path running cost `∫ l ds` and terminal cost `g(X_T)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CostSamples {
    pub running: Vec<f64>,
    pub terminal: Vec<f64>,
}

impl CostSamples {
    pub fn from_totals(totals: Vec<f64>) -> Self {
        let n = totals.len();
        Self { running: totals, terminal: vec![0.0; n] }
    }

    pub fn n_paths(&self) -> usize {
        self.running.len()
    }

    pub fn totals(&self) -> impl Iterator<Item = f64> + '_ {
        self.running.iter().zip(&self.terminal).map(|(r, g)| r + g)
    }

    /// Appends another block, preserving order.
    pub fn extend(&mut self, other: CostSamples) {
        self.running.extend(other.running);
        self.terminal.extend(other.terminal);
    }

    pub fn concat(blocks: impl IntoIterator<Item = CostSamples>) -> Self {
        let mut out = Self::default();
        for b in blocks {
            out.extend(b);
        }
        out
    }

    /// Sets `terminal = g(X_T)` for each path.
    pub fn with_terminal(mut self, paths: &SamplePaths, g: impl Fn(&[f64]) -> f64) -> Result<Self> {
        if paths.n_paths != self.n_paths() {
            return Err(Error::Dimension("terminal cost for a different ensemble".into()));
        }
        self.terminal = (0..paths.n_paths).map(|i| g(paths.terminal_state(i))).collect();
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        if self.running.len() != self.terminal.len() {
            return Err(Error::Dimension("running and terminal lengths differ".into()));
        }
        if self.running.is_empty() {
            return Err(Error::EmptySample);
        }
        if let Some(i) = self.totals().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("cost of path {i}")));
        }
        Ok(())
    }
}

/// Left-endpoint Riemann sum `Σ_k l(t_k, X_k, u_k) dt` per path.
pub fn accumulate_running_cost(paths: &SamplePaths, l: impl Fn(f64, &[f64], &[f64]) -> f64) -> Result<CostSamples> {
    let n = paths.grid.n_steps();
    if paths.control_dim == 0 || paths.controls.len() != paths.n_paths * n * paths.control_dim {
        return Err(Error::Missing("sample paths carry no controls".into()));
    }
    let dt = paths.grid.dt();
    let running = (0..paths.n_paths)
        .map(|i| {
            let mut acc = 0.0;
            for k in 0..n {
                acc += l(paths.grid.node(k), paths.state(i, k), paths.control(i, k)) * dt;
            }
            acc
        })
        .collect();
    Ok(CostSamples { running, terminal: vec![0.0; paths.n_paths] })
}

/// Factor-model running cost along transformed-measure paths.
pub fn portfolio_running_costs(params: &PortfolioParams, paths: &SamplePaths) -> Result<CostSamples> {
    let rates = rate_at_nodes(params, &paths.grid)?;
    let dt = paths.grid.dt();
    let index = |t: f64| ((t - paths.grid.t0()) / dt).round() as usize;
    accumulate_running_cost(paths, |t, x, u| portfolio_running_cost(params, rates[index(t)], x[0], u[0]))
}

/// Monte-Carlo estimate with a delta-method standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskEstimate {
    pub value: f64,
    pub std_error: f64,
    pub mu: f64,
    pub n_paths: usize,
}

fn mean_and_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Shifted weights `w_i = exp(μJ_i − max_j μJ_j)` and the shift.
fn shifted_weights(totals: &[f64], mu: f64) -> (Vec<f64>, f64) {
    let shift = totals.iter().map(|j| mu * j).fold(f64::NEG_INFINITY, f64::max);
    (totals.iter().map(|j| (mu * j - shift).exp()).collect(), shift)
}

/// `μ⁻¹ log mean exp(μJ)` via log-sum-exp.
pub fn estimate_risk_sensitive(samples: &CostSamples, mu: f64) -> Result<RiskEstimate> {
    if mu == 0.0 {
        return Err(Error::ZeroMu);
    }
    if !mu.is_finite() {
        return Err(Error::InvalidParams("mu is not finite".into()));
    }
    samples.validate()?;
    let totals: Vec<f64> = samples.totals().collect();
    let (w, shift) = shifted_weights(&totals, mu);
    let (mean_w, sd_w) = mean_and_sd(&w);
    let n = totals.len();
    let value = (shift + mean_w.ln()) / mu;
    let std_error = sd_w / (mu.abs() * mean_w * (n as f64).sqrt());
    if !value.is_finite() {
        return Err(Error::NonFinite("risk-sensitive estimate".into()));
    }
    Ok(RiskEstimate { value, std_error, mu, n_paths: n })
}

/// Risk-neutral (`μ = 0`) cost: plain sample mean.
pub fn estimate_mean(samples: &CostSamples) -> Result<RiskEstimate> {
    samples.validate()?;
    let totals: Vec<f64> = samples.totals().collect();
    let (mean, sd) = mean_and_sd(&totals);
    Ok(RiskEstimate { value: mean, std_error: sd / (totals.len() as f64).sqrt(), mu: 0.0, n_paths: totals.len() })
}

/// Dispatches on `μ`: the plain mean for `μ = 0`, log-mean-exp otherwise.
pub fn estimate_cost(samples: &CostSamples, mu: f64) -> Result<RiskEstimate> {
    if mu == 0.0 {
        estimate_mean(samples)
    } else {
        estimate_risk_sensitive(samples, mu)
    }
}

/// `J(b) − J(a)` on paired samples (common random numbers) with the
/// delta-method standard error of the paired difference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairedDifference {
    pub difference: f64,
    pub std_error: f64,
    pub base: RiskEstimate,
    pub other: RiskEstimate,
}

pub fn estimate_paired_difference(base: &CostSamples, other: &CostSamples, mu: f64) -> Result<PairedDifference> {
    if base.n_paths() != other.n_paths() {
        return Err(Error::Dimension("paired samples differ in size".into()));
    }
    let a = estimate_cost(base, mu)?;
    let b = estimate_cost(other, mu)?;
    let ta: Vec<f64> = base.totals().collect();
    let tb: Vec<f64> = other.totals().collect();
    // Influence of each path on its estimator; the difference of the two
    // influence sequences has the paired variance.
    let psi: Vec<f64> = if mu == 0.0 {
        ta.iter().zip(&tb).map(|(x, y)| y - x).collect()
    } else {
        let (wa, _) = shifted_weights(&ta, mu);
        let (wb, _) = shifted_weights(&tb, mu);
        let ma = wa.iter().sum::<f64>() / wa.len() as f64;
        let mb = wb.iter().sum::<f64>() / wb.len() as f64;
        wa.iter().zip(&wb).map(|(x, y)| (y / mb - x / ma) / mu).collect()
    };
    let (_, sd) = mean_and_sd(&psi);
    Ok(PairedDifference {
        difference: b.value - a.value,
        std_error: sd / (psi.len() as f64).sqrt(),
        base: a,
        other: b,
    })
}

/// `−θ⁻¹ log E[exp(−θ log V_T)]` from `(X, log V)` paths; `θ = 0` gives
/// `E[log V_T]`.
pub fn estimate_growth_rate(wealth_paths: &SamplePaths, theta: f64) -> Result<RiskEstimate> {
    if wealth_paths.state_dim < 2 {
        return Err(Error::Missing("paths carry no log-wealth component".into()));
    }
    let log_v: Vec<f64> = (0..wealth_paths.n_paths).map(|i| wealth_paths.terminal_state(i)[1]).collect();
    growth_rate_from_log_wealth(log_v, theta)
}

fn growth_rate_from_log_wealth(log_v: Vec<f64>, theta: f64) -> Result<RiskEstimate> {
    if theta == 0.0 {
        return estimate_mean(&CostSamples::from_totals(log_v));
    }
    let neg = CostSamples::from_totals(log_v.into_iter().map(|v| -v).collect());
    let est = estimate_risk_sensitive(&neg, theta)?;
    Ok(RiskEstimate { value: -est.value, ..est })
}

/// Both sides of the measure-change identity for one policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformReport {
    /// Growth rate from wealth paths under the original measure.
    pub original: RiskEstimate,
    /// `log v − θ⁻¹ log Ê[exp(θ∫l)]` from transformed-measure factor paths.
    pub transformed: RiskEstimate,
    pub delta: f64,
    pub combined_se: f64,
    pub pass: bool,
}

/// Evaluates the growth rate of `policy` once under the original measure
/// (wealth simulation) and once under the transformed measure (auxiliary
/// cost), on independent noise, and compares at 3 combined SE.
pub fn transform_consistency(
    params: &PortfolioParams,
    policy: &FeedbackPolicy,
    x0: f64,
    original_noise: &NoiseSource,
    transformed_noise: &NoiseSource,
) -> Result<TransformReport> {
    let theta = params.theta;
    let v = params.initial_wealth;
    let log_v = CostSamples::concat(original_noise.map_blocks(|blk| {
        let paths = simulate_wealth_original(params, policy, x0, v, blk)?;
        Ok(CostSamples::from_totals((0..paths.n_paths).map(|i| paths.terminal_state(i)[1]).collect()))
    })?)
    .running;
    let original = growth_rate_from_log_wealth(log_v, theta)?;

    let costs = CostSamples::concat(transformed_noise.map_blocks(|blk| {
        let paths = simulate_factor_transformed(params, policy, x0, blk)?;
        portfolio_running_costs(params, &paths)
    })?);
    let aux = estimate_cost(&costs, theta)?;
    let transformed = RiskEstimate { value: v.ln() - aux.value, ..aux };

    let delta = (original.value - transformed.value).abs();
    let combined_se = original.std_error.hypot(transformed.std_error);
    Ok(TransformReport { original, transformed, delta, combined_se, pass: delta <= 3.0 * combined_se })
}

/// Residuals of `dY = −(l + (μ/2)|Z|²) ds + Z dW` for `Y = V(s, X_s)`,
/// `Z = V_xᵀσ`, along simulated paths.
#[derive(Debug, Clone, PartialEq)]
pub struct BsdeCheck {
    pub n_paths: usize,
    pub n_steps: usize,
    /// `[path][node]`.
    pub y: Vec<f64>,
    /// `[path][step][component]`.
    pub z: Vec<f64>,
    /// `[path][step]`.
    pub residuals: Vec<f64>,
    pub rms: f64,
    /// Mean over paths of `|Σ_k residual_k|`.
    pub mean_abs_total: f64,
    /// `max_paths |Y_T − g(X_T)|`.
    pub terminal_violation: f64,
}

pub fn bsde_residual_check(
    paths: &SamplePaths,
    v: impl Fn(f64, &DVector<f64>) -> f64,
    v_x: impl Fn(f64, &DVector<f64>) -> DVector<f64>,
    problem: &GeneralProblem,
) -> Result<BsdeCheck> {
    let grid = paths.grid;
    let (n, dt, d) = (grid.n_steps(), grid.dt(), problem.noise_dim);
    if paths.noise.dim() != d || paths.noise.n_paths() != paths.n_paths || paths.noise.grid().n_steps() != n {
        return Err(Error::Missing("paths do not carry matching noise increments".into()));
    }
    if paths.controls.len() != paths.n_paths * n * paths.control_dim {
        return Err(Error::Missing("sample paths carry no controls".into()));
    }
    let mut y = Vec::with_capacity(paths.n_paths * (n + 1));
    let mut z = Vec::with_capacity(paths.n_paths * n * d);
    let mut residuals = Vec::with_capacity(paths.n_paths * n);
    let (mut sum_sq, mut sum_abs_total, mut terminal_violation) = (0.0, 0.0, 0.0f64);
    for i in 0..paths.n_paths {
        let xs: Vec<DVector<f64>> = (0..=n).map(|k| DVector::from_column_slice(paths.state(i, k))).collect();
        let ys: Vec<f64> = (0..=n).map(|k| v(grid.node(k), &xs[k])).collect();
        let mut total = 0.0;
        for k in 0..n {
            let t = grid.node(k);
            let u = DVector::from_column_slice(paths.control(i, k));
            let zk = (problem.diffusion)(t, &xs[k], &u).transpose() * v_x(t, &xs[k]);
            let dw = paths.noise.increment(i, k);
            let l = (problem.running_cost)(t, &xs[k], &u);
            let zdw: f64 = zk.iter().zip(dw).map(|(a, b)| a * b).sum();
            let res = ys[k + 1] - ys[k] + (l + 0.5 * problem.mu * zk.norm_squared()) * dt - zdw;
            z.extend(zk.iter());
            residuals.push(res);
            sum_sq += res * res;
            total += res;
        }
        sum_abs_total += total.abs();
        terminal_violation = terminal_violation.max((ys[n] - (problem.terminal_cost)(&xs[n])).abs());
        y.extend(ys);
    }
    let count = (paths.n_paths * n).max(1) as f64;
    Ok(BsdeCheck {
        n_paths: paths.n_paths,
        n_steps: n,
        y,
        z,
        residuals,
        rms: (sum_sq / count).sqrt(),
        mean_abs_total: sum_abs_total / paths.n_paths.max(1) as f64,
        terminal_violation,
    })
}

/// One row of the estimates table.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateRow {
    pub label: String,
    pub estimate: RiskEstimate,
}

/// CSV with columns `label,mu,n_paths,value,std_error`.
pub fn write_estimates_csv(mut out: impl Write, rows: &[EstimateRow]) -> Result<()> {
    writeln!(out, "label,mu,n_paths,value,std_error")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.label,
            crate::fmt_num(r.estimate.mu),
            r.estimate.n_paths,
            crate::fmt_num(r.estimate.value),
            crate::fmt_num(r.estimate.std_error)
        )?;
    }
    Ok(())
}
