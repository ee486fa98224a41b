//! Generalized Hamiltonian `G`, Hamiltonian `H`, the `𝓗`-function, the HJB
//! residual and the pointwise minimum-condition check, for arbitrary
//! problems `dX = f dt + σ dW` with risk-sensitive cost
//! `μ⁻¹ log E exp{μ(∫l + g)}`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::lq_coeffs::PortfolioParams;

pub type DriftFn = Arc<dyn Fn(f64, &DVector<f64>, &DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type DiffusionFn = Arc<dyn Fn(f64, &DVector<f64>, &DVector<f64>) -> DMatrix<f64> + Send + Sync>;
pub type RunningCostFn = Arc<dyn Fn(f64, &DVector<f64>, &DVector<f64>) -> f64 + Send + Sync>;
pub type TerminalCostFn = Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>;

/// Controlled SDE plus risk-sensitive cost.
///
/// `control_box` stands in for the compact control set: one closed
/// interval per control component.
#[derive(Clone)]
pub struct GeneralProblem {
    pub state_dim: usize,
    pub noise_dim: usize,
    pub control_dim: usize,
    pub drift: DriftFn,
    pub diffusion: DiffusionFn,
    pub running_cost: RunningCostFn,
    pub terminal_cost: TerminalCostFn,
    pub mu: f64,
    pub control_box: Vec<(f64, f64)>,
}

impl std::fmt::Debug for GeneralProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GeneralProblem")
            .field("state_dim", &self.state_dim)
            .field("noise_dim", &self.noise_dim)
            .field("control_dim", &self.control_dim)
            .field("mu", &self.mu)
            .field("control_box", &self.control_box)
            .finish_non_exhaustive()
    }
}

impl GeneralProblem {
    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 || self.noise_dim == 0 {
            return Err(Error::Dimension("state and noise dimensions must be positive".into()));
        }
        if self.control_box.len() != self.control_dim {
            return Err(Error::Dimension(format!(
                "{} control intervals for control dimension {}",
                self.control_box.len(),
                self.control_dim
            )));
        }
        if let Some((lo, hi)) = self.control_box.iter().find(|(lo, hi)| !(lo <= hi) || !lo.is_finite() || !hi.is_finite()) {
            return Err(Error::InvalidParams(format!("empty or unbounded control interval [{lo}, {hi}]")));
        }
        if !self.mu.is_finite() {
            return Err(Error::InvalidParams("mu is not finite".into()));
        }
        Ok(())
    }

    fn check_point(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<()> {
        if x.len() != self.state_dim || u.len() != self.control_dim {
            return Err(Error::Dimension(format!(
                "state {} / control {} for problem of dims {} / {}",
                x.len(),
                u.len(),
                self.state_dim,
                self.control_dim
            )));
        }
        Ok(())
    }

    fn sigma(&self, t: f64, x: &DVector<f64>, u: &DVector<f64>) -> Result<DMatrix<f64>> {
        let s = (self.diffusion)(t, x, u);
        if s.nrows() != self.state_dim || s.ncols() != self.noise_dim {
            return Err(Error::Dimension(format!(
                "diffusion returned {}x{}, expected {}x{}",
                s.nrows(),
                s.ncols(),
                self.state_dim,
                self.noise_dim
            )));
        }
        Ok(s)
    }
}

/// The factor-model problem under the transformed measure:
/// `dX = (b + BX − θΛσᵀu)ds + Λ dŴ`, running cost
/// `l = ½(θ+1)σσᵀu² − r − u(a + AX − r)`, terminal cost `−log v`, `μ = θ`.
pub fn transformed_factor_problem(params: &PortfolioParams, control_box: (f64, f64)) -> Result<GeneralProblem> {
    params.validate()?;
    let model = FactorDynamics::new(params);
    let drift_model = model;
    let p_cost = params.clone();
    let lam = params.factor_vol;
    let neg_log_v = -params.initial_wealth.ln();
    Ok(GeneralProblem {
        state_dim: 1,
        noise_dim: 2,
        control_dim: 1,
        drift: Arc::new(move |_, x, u| DVector::from_element(1, drift_model.transformed_drift(x[0], u[0]))),
        diffusion: Arc::new(move |_, _, _| DMatrix::from_row_slice(1, 2, &lam)),
        running_cost: Arc::new(move |t, x, u| {
            let r = p_cost.rate.at(t).unwrap_or(f64::NAN);
            portfolio_running_cost(&p_cost, r, x[0], u[0])
        }),
        terminal_cost: Arc::new(move |_| neg_log_v),
        mu: params.theta,
        control_box: vec![control_box],
    })
}

/// `½(θ+1)σσᵀu² − r − u(a + Ax − r)`.
pub fn portfolio_running_cost(params: &PortfolioParams, r: f64, x: f64, u: f64) -> f64 {
    0.5 * (params.theta + 1.0) * params.stock_var() * u * u
        - r
        - u * (params.stock_base_return + params.stock_factor_loading * x - r)
}

/// Scalars of the factor dynamics, shared by every simulator so that the
/// specialised and generic paths perform identical arithmetic.
#[derive(Debug, Clone, Copy)]
pub struct FactorDynamics {
    pub b: f64,
    pub big_b: f64,
    pub theta_cross: f64,
    pub lam: [f64; 2],
}

impl FactorDynamics {
    pub fn new(params: &PortfolioParams) -> Self {
        Self {
            b: params.factor_drift,
            big_b: params.factor_slope,
            theta_cross: params.theta * params.cross_cov(),
            lam: params.factor_vol,
        }
    }

    #[inline]
    pub fn transformed_drift(&self, x: f64, u: f64) -> f64 {
        self.b + self.big_b * x - self.theta_cross * u
    }

    #[inline]
    pub fn original_drift(&self, x: f64) -> f64 {
        self.b + self.big_b * x
    }
}

/// First- and second-order adjoint values at one time point, with the
/// candidate-optimal diffusion `σ̄` that `H` depends on.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointState {
    pub p: DVector<f64>,
    /// `n × d`, column `j` is `q_j`.
    pub q: DMatrix<f64>,
    pub big_p: DMatrix<f64>,
    pub big_q: Vec<DMatrix<f64>>,
    pub sigma_bar: Option<DMatrix<f64>>,
}

impl AdjointState {
    pub fn validate(&self, problem: &GeneralProblem) -> Result<()> {
        let (n, d) = (problem.state_dim, problem.noise_dim);
        if self.p.len() != n || self.q.shape() != (n, d) || self.big_p.shape() != (n, n) || self.big_q.len() != d {
            return Err(Error::Dimension("adjoint state does not match problem dimensions".into()));
        }
        if let Some(sb) = &self.sigma_bar {
            if sb.shape() != (n, d) {
                return Err(Error::Dimension("sigma_bar must be n x d".into()));
            }
        }
        let sym = |m: &DMatrix<f64>| (m - m.transpose()).abs().max() <= 1e-12 * (1.0 + m.abs().max());
        if !sym(&self.big_p) || !self.big_q.iter().all(|m| m.shape() == (n, n) && sym(m)) {
            return Err(Error::InvalidParams("P and Q_j must be symmetric n x n".into()));
        }
        Ok(())
    }

    fn sigma_bar(&self) -> Result<&DMatrix<f64>> {
        self.sigma_bar
            .as_ref()
            .ok_or_else(|| Error::Missing("AdjointState.sigma_bar is required by H".into()))
    }

    /// `P + μppᵀ`.
    fn weight(&self, mu: f64) -> DMatrix<f64> {
        &self.big_p + (&self.p * self.p.transpose()) * mu
    }
}

/// `G = l + ⟨p, f⟩ + (μ/2)|σᵀp|² + ½ tr(σσᵀP)`.
pub fn eval_g(
    t: f64,
    x: &DVector<f64>,
    u: &DVector<f64>,
    p: &DVector<f64>,
    big_p: &DMatrix<f64>,
    problem: &GeneralProblem,
) -> Result<f64> {
    problem.check_point(x, u)?;
    let f = (problem.drift)(t, x, u);
    let s = problem.sigma(t, x, u)?;
    let stp = s.transpose() * p;
    let trace = (&s * s.transpose() * big_p).trace();
    Ok((problem.running_cost)(t, x, u) + p.dot(&f) + 0.5 * problem.mu * stp.norm_squared() + 0.5 * trace)
}

/// `H = ⟨p, f⟩ + l + Σ_j q_jᵀσ_j + μ Σ_j (σ_jᵀp)(σ̄_jᵀp)`.
pub fn eval_h(s: f64, x: &DVector<f64>, u: &DVector<f64>, adj: &AdjointState, problem: &GeneralProblem) -> Result<f64> {
    problem.check_point(x, u)?;
    let sigma_bar = adj.sigma_bar()?;
    let f = (problem.drift)(s, x, u);
    let sig = problem.sigma(s, x, u)?;
    let mut h = adj.p.dot(&f) + (problem.running_cost)(s, x, u);
    for j in 0..problem.noise_dim {
        h += adj.q.column(j).dot(&sig.column(j));
        h += problem.mu * sig.column(j).dot(&adj.p) * sigma_bar.column(j).dot(&adj.p);
    }
    Ok(h)
}

/// `½ tr[Mᵀ W M]`.
fn half_quadratic_trace(m: &DMatrix<f64>, w: &DMatrix<f64>) -> f64 {
    0.5 * (m.transpose() * w * m).trace()
}

/// `𝓗 = H − ½tr[σ̄ᵀWσ̄] + ½tr[(σ − σ̄)ᵀW(σ − σ̄)]`, `W = P + μppᵀ`.
pub fn eval_hcal(
    s: f64,
    x: &DVector<f64>,
    u: &DVector<f64>,
    adj: &AdjointState,
    problem: &GeneralProblem,
) -> Result<f64> {
    let h = eval_h(s, x, u, adj, problem)?;
    let sigma_bar = adj.sigma_bar()?;
    let w = adj.weight(problem.mu);
    let dev = problem.sigma(s, x, u)? - sigma_bar;
    Ok(h - half_quadratic_trace(sigma_bar, &w) + half_quadratic_trace(&dev, &w))
}

/// Left-hand side of the variational inequality:
/// `H(u) − H(ū) + ½tr[(σ(u) − σ̄)ᵀW(σ(u) − σ̄)]`.
pub fn variational_lhs(
    s: f64,
    x: &DVector<f64>,
    u: &DVector<f64>,
    u_bar: &DVector<f64>,
    adj: &AdjointState,
    problem: &GeneralProblem,
) -> Result<f64> {
    let sigma_bar = adj.sigma_bar()?;
    let w = adj.weight(problem.mu);
    let dev = problem.sigma(s, x, u)? - sigma_bar;
    Ok(eval_h(s, x, u, adj, problem)? - eval_h(s, x, u_bar, adj, problem)? + half_quadratic_trace(&dev, &w))
}

/// Grid-search plus refinement settings for `minimize_g`.
#[derive(Debug, Clone, Copy)]
pub struct MinimizeOptions {
    pub points_per_dim: usize,
    /// Cyclic coordinate refinement sweeps after the grid search; 0 disables.
    pub refine_sweeps: usize,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        Self { points_per_dim: 1001, refine_sweeps: 2 }
    }
}

/// Uniform samples of one control interval, endpoints included.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|i| if i == n - 1 { hi } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 })
            .collect(),
    }
}

/// Every point of the product grid over the control box, in lexicographic
/// order (first component slowest, smallest values first).
pub fn control_grid(problem: &GeneralProblem, points_per_dim: usize) -> Vec<DVector<f64>> {
    let axes: Vec<Vec<f64>> = problem
        .control_box
        .iter()
        .map(|&(lo, hi)| linspace(lo, hi, points_per_dim))
        .collect();
    let total: usize = axes.iter().map(Vec::len).product();
    let m = axes.len();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; m];
    for _ in 0..total {
        out.push(DVector::from_iterator(m, idx.iter().zip(&axes).map(|(&i, ax)| ax[i])));
        for k in (0..m).rev() {
            idx[k] += 1;
            if idx[k] < axes[k].len() {
                break;
            }
            idx[k] = 0;
        }
    }
    out
}

const GOLDEN: f64 = 0.618_033_988_749_894_8;

/// Golden-section search on `[lo, hi]`, then a three-point parabolic polish.
fn refine_1d(f: &impl Fn(f64) -> f64, lo: f64, hi: f64, start: f64, f_start: f64) -> (f64, f64) {
    let (mut a, mut b) = (lo, hi);
    let mut c = b - GOLDEN * (b - a);
    let mut d = a + GOLDEN * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    let tol = 1e-7 * (1.0 + (hi - lo).abs());
    while (b - a).abs() > tol {
        // Ties go left: smallest control wins.
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - GOLDEN * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + GOLDEN * (b - a);
            fd = f(d);
        }
    }
    let (mut best, mut f_best) = if fc <= fd { (c, fc) } else { (d, fd) };
    if f_start < f_best {
        best = start;
        f_best = f_start;
    }
    // Endpoints of the search interval are candidates in their own right.
    for e in [lo, hi] {
        let fe = f(e);
        if fe < f_best || (fe == f_best && e < best) {
            best = e;
            f_best = fe;
        }
    }
    // Parabolic polish: exact for quadratics up to rounding.
    let h = (1e-3 * (hi - lo)).max(1e-9);
    let (xm, xp) = ((best - h).max(lo), (best + h).min(hi));
    if xm < best && best < xp {
        let (fm, fp) = (f(xm), f(xp));
        let (h1, h2) = (best - xm, xp - best);
        let denom = h2 * (fm - f_best) + h1 * (fp - f_best);
        if denom > 0.0 {
            let cand = best - 0.5 * (h1 * h1 * (fp - f_best) - h2 * h2 * (fm - f_best)) / denom;
            if cand.is_finite() && cand >= lo && cand <= hi {
                let fcand = f(cand);
                let slack = 4.0 * f64::EPSILON * (1.0 + f_best.abs());
                if fcand <= f_best + slack {
                    return (cand, fcand.min(f_best));
                }
            }
        }
    }
    (best, f_best)
}

/// `inf_u G(t, x, u, p, P)` over the control box.
///
/// Grid search with ties broken toward the smallest control, then cyclic
/// coordinate refinement (golden section plus parabolic polish) inside the
/// neighbouring grid cells. Returns the minimiser and the minimum.
pub fn minimize_g(
    t: f64,
    x: &DVector<f64>,
    p: &DVector<f64>,
    big_p: &DMatrix<f64>,
    problem: &GeneralProblem,
    opts: MinimizeOptions,
) -> Result<(DVector<f64>, f64)> {
    problem.validate()?;
    if opts.points_per_dim < 2 {
        return Err(Error::InvalidParams("need at least two grid points per control dimension".into()));
    }
    let mut best: Option<(DVector<f64>, f64)> = None;
    for u in control_grid(problem, opts.points_per_dim) {
        let g = eval_g(t, x, &u, p, big_p, problem)?;
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("G at control {:?}", u.as_slice())));
        }
        if best.as_ref().is_none_or(|(_, gb)| g < *gb) {
            best = Some((u, g));
        }
    }
    let (mut u_best, mut g_best) = best.ok_or_else(|| Error::InvalidParams("empty control grid".into()))?;
    for _ in 0..opts.refine_sweeps {
        for i in 0..problem.control_dim {
            let (lo, hi) = problem.control_box[i];
            let cell = (hi - lo) / (opts.points_per_dim - 1) as f64;
            let a = (u_best[i] - cell).max(lo);
            let b = (u_best[i] + cell).min(hi);
            if b <= a {
                continue;
            }
            let line = |v: f64| {
                let mut u = u_best.clone();
                u[i] = v;
                eval_g(t, x, &u, p, big_p, problem).unwrap_or(f64::INFINITY)
            };
            let (v, gv) = refine_1d(&line, a, b, u_best[i], g_best);
            u_best[i] = v;
            g_best = gv;
        }
    }
    if !g_best.is_finite() {
        return Err(Error::NonFinite("G at refined minimiser".into()));
    }
    Ok((u_best, g_best))
}

/// `V_t + inf_u G(t, x, u, V_x, V_xx)`.
#[allow(clippy::too_many_arguments)]
pub fn hjb_residual(
    v_t: impl Fn(f64, &DVector<f64>) -> f64,
    v_x: impl Fn(f64, &DVector<f64>) -> DVector<f64>,
    v_xx: impl Fn(f64, &DVector<f64>) -> DMatrix<f64>,
    t: f64,
    x: &DVector<f64>,
    problem: &GeneralProblem,
    opts: MinimizeOptions,
) -> Result<f64> {
    let (_, g) = minimize_g(t, x, &v_x(t, x), &v_xx(t, x), problem, opts)?;
    Ok(v_t(t, x) + g)
}

/// Central finite differences of a scalar field `V(t, x)`.
///
/// First derivatives use `h = 1e-5·max(1, |·|)`; the second derivative uses
/// the square root of that step. Time derivatives fall back to one-sided
/// differences at the ends of `[t_min, t_max]`.
pub struct FiniteDifference<F> {
    v: F,
    t_min: f64,
    t_max: f64,
}

impl<F: Fn(f64, &DVector<f64>) -> f64> FiniteDifference<F> {
    const REL: f64 = 1e-5;

    pub fn new(v: F, t_min: f64, t_max: f64) -> Self {
        Self { v, t_min, t_max }
    }

    pub fn value(&self, t: f64, x: &DVector<f64>) -> f64 {
        (self.v)(t, x)
    }

    pub fn dt(&self, t: f64, x: &DVector<f64>) -> f64 {
        let h = Self::REL * t.abs().max(1.0);
        let (lo, hi) = ((t - h).max(self.t_min), (t + h).min(self.t_max));
        ((self.v)(hi, x) - (self.v)(lo, x)) / (hi - lo)
    }

    pub fn dx(&self, t: f64, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            x.len(),
            (0..x.len()).map(|i| {
                let h = Self::REL * x[i].abs().max(1.0);
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[i] += h;
                xm[i] -= h;
                ((self.v)(t, &xp) - (self.v)(t, &xm)) / (xp[i] - xm[i])
            }),
        )
    }

    pub fn dxx(&self, t: f64, x: &DVector<f64>) -> DMatrix<f64> {
        let n = x.len();
        let step = |i: usize| Self::REL.sqrt() * x[i].abs().max(1.0);
        let v0 = (self.v)(t, x);
        DMatrix::from_fn(n, n, |i, j| {
            let (hi, hj) = (step(i), step(j));
            if i == j {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[i] += hi;
                xm[i] -= hi;
                ((self.v)(t, &xp) - 2.0 * v0 + (self.v)(t, &xm)) / (hi * hi)
            } else {
                let shifted = |si: f64, sj: f64| {
                    let mut y = x.clone();
                    y[i] += si * hi;
                    y[j] += sj * hj;
                    (self.v)(t, &y)
                };
                (shifted(1.0, 1.0) - shifted(1.0, -1.0) - shifted(-1.0, 1.0) + shifted(-1.0, -1.0)) / (4.0 * hi * hj)
            }
        })
    }
}

/// Outcome of the pointwise minimum-condition check.
#[derive(Debug, Clone, PartialEq)]
pub struct MinimumConditionReport {
    pub pass: bool,
    /// `max_u [𝓗(ū) − 𝓗(u)]`; nonpositive when ū minimises.
    pub worst_violation: f64,
    pub worst_control: DVector<f64>,
    /// `min_u` of the variational-inequality left-hand side.
    pub min_variational_lhs: f64,
    pub hcal_at_candidate: f64,
}

/// Checks `𝓗(s, x̄, ū) ≤ 𝓗(s, x̄, u) + tol` and the equivalent variational
/// inequality at every sampled control.
pub fn check_minimum_condition(
    s: f64,
    x_bar: &DVector<f64>,
    u_bar: &DVector<f64>,
    adj: &AdjointState,
    problem: &GeneralProblem,
    controls: &[DVector<f64>],
    tol: f64,
) -> Result<MinimumConditionReport> {
    let h_bar = eval_hcal(s, x_bar, u_bar, adj, problem)?;
    let mut worst_violation = f64::NEG_INFINITY;
    let mut worst_control = u_bar.clone();
    let mut min_lhs = f64::INFINITY;
    for u in controls {
        let viol = h_bar - eval_hcal(s, x_bar, u, adj, problem)?;
        if viol > worst_violation {
            worst_violation = viol;
            worst_control = u.clone();
        }
        min_lhs = min_lhs.min(variational_lhs(s, x_bar, u, u_bar, adj, problem)?);
    }
    if controls.is_empty() {
        worst_violation = 0.0;
        min_lhs = 0.0;
    }
    Ok(MinimumConditionReport {
        pass: worst_violation <= tol && min_lhs >= -tol,
        worst_violation,
        worst_control,
        min_variational_lhs: min_lhs,
        hcal_at_candidate: h_bar,
    })
}
