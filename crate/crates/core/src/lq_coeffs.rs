//! Deterministic coefficient equations of the factor-model portfolio problem.
//!
//! With `s = σσᵀ`, `λ = Λσᵀ`, `L = ΛΛᵀ` and risk sensitivity `θ`:
//!
//! ```text
//! α  = θL − θ²/(θ+1) · λ²/s
//! β  = B − θ/(θ+1) · Aλ/s
//! c0 = A² / ((θ+1)s)
//!
//! Γ' = −αΓ² − 2βΓ + c0                                   Γ(T) = 0
//! φ' = −[(β + αΓ)φ + bΓ − (A + θλΓ)(a − r)/((θ+1)s)]     φ(T) = 0
//! k' = (a − r + θλφ)²/(2(θ+1)s) + r − bφ − θLφ²/2 − LΓ/2  k(T) = −log v
//! ρ' = −2Bρ − θLΓ²                                       ρ(T) = 0
//! ```
//!
//! Γ and φ serve both the adjoint route (`p = Γx + φ`) and the value-function
//! route (`V = ½Γx² + φx + k`); there is one solver and one set of objects.

use std::cell::RefCell;
use std::io::Write;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::fmt_num;
use crate::gridfn::{integrate_ode_backward, GridFunction, TimeGrid};

/// Riskless short rate `r`, either constant or sampled on a grid.
#[derive(Debug, Clone, PartialEq)]
pub enum RateCurve {
    Constant(f64),
    Sampled(GridFunction),
}

impl RateCurve {
    pub fn at(&self, t: f64) -> Result<f64> {
        match self {
            RateCurve::Constant(r) => Ok(*r),
            RateCurve::Sampled(f) => f.eval(t),
        }
    }

    /// Promotes the curve to a grid function on `grid`.
    pub fn to_grid(&self, grid: TimeGrid) -> Result<GridFunction> {
        match self {
            RateCurve::Constant(r) => Ok(GridFunction::constant(grid, *r)),
            RateCurve::Sampled(f) => {
                let values = grid.nodes().map(|t| f.eval(t)).collect::<Result<Vec<_>>>()?;
                GridFunction::new(grid, values)
            }
        }
    }

    fn is_bounded(&self) -> bool {
        match self {
            RateCurve::Constant(r) => r.is_finite(),
            RateCurve::Sampled(f) => f.values().iter().all(|v| v.is_finite()),
        }
    }
}

/// Market and investor constants of the factor model.
#[derive(Debug, Clone, PartialEq)]
pub struct PortfolioParams {
    /// Riskless rate `r`.
    pub rate: RateCurve,
    /// Stock mean-return intercept `a`.
    pub stock_base_return: f64,
    /// Stock mean-return loading on the factor `A`.
    pub stock_factor_loading: f64,
    /// Factor drift intercept `b`.
    pub factor_drift: f64,
    /// Factor drift slope `B`.
    pub factor_slope: f64,
    /// Stock volatility row vector `σ`.
    pub stock_vol: [f64; 2],
    /// Factor volatility row vector `Λ`.
    pub factor_vol: [f64; 2],
    /// Risk sensitivity `θ > 0`.
    pub theta: f64,
    /// Initial wealth `v > 0`.
    pub initial_wealth: f64,
    /// Horizon `T`.
    pub horizon: f64,
}

impl PortfolioParams {
    /// Reference parameter set used throughout the tests and as the CLI default.
    pub fn baseline() -> Self {
        Self {
            rate: RateCurve::Constant(0.02),
            stock_base_return: 0.08,
            stock_factor_loading: 0.2,
            factor_drift: 0.1,
            factor_slope: -0.5,
            stock_vol: [0.3, 0.0],
            factor_vol: [0.1, 0.2],
            theta: 1.0,
            initial_wealth: 1.0,
            horizon: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let scalars = [
            ("a", self.stock_base_return),
            ("A", self.stock_factor_loading),
            ("b", self.factor_drift),
            ("B", self.factor_slope),
            ("sigma[0]", self.stock_vol[0]),
            ("sigma[1]", self.stock_vol[1]),
            ("lambda[0]", self.factor_vol[0]),
            ("lambda[1]", self.factor_vol[1]),
            ("theta", self.theta),
            ("v", self.initial_wealth),
            ("T", self.horizon),
        ];
        if let Some((name, _)) = scalars.iter().find(|(_, x)| !x.is_finite()) {
            return Err(Error::InvalidParams(format!("{name} is not finite")));
        }
        if self.stock_var() <= 0.0 {
            return Err(Error::InvalidParams("sigma sigma^T must be positive".into()));
        }
        if self.theta <= 0.0 {
            return Err(Error::InvalidParams(format!("theta must be positive, got {}", self.theta)));
        }
        if self.initial_wealth <= 0.0 {
            return Err(Error::InvalidParams(format!(
                "initial wealth must be positive, got {}",
                self.initial_wealth
            )));
        }
        if self.horizon <= 0.0 {
            return Err(Error::InvalidParams(format!("horizon must be positive, got {}", self.horizon)));
        }
        if !self.rate.is_bounded() {
            return Err(Error::InvalidParams("rate curve is not bounded".into()));
        }
        if let RateCurve::Sampled(f) = &self.rate {
            if f.grid().t0() > 0.0 || f.grid().horizon() < self.horizon {
                return Err(Error::InvalidParams("rate curve does not cover [0, T]".into()));
            }
        }
        let alpha = self.alpha();
        // Cauchy-Schwarz makes alpha >= 0; allow rounding noise only.
        if alpha < -1e-14 * (1.0 + self.theta * self.factor_var()) {
            return Err(Error::InvalidParams(format!("alpha = {alpha} is negative")));
        }
        Ok(())
    }

    /// `σσᵀ`.
    pub fn stock_var(&self) -> f64 {
        self.stock_vol[0] * self.stock_vol[0] + self.stock_vol[1] * self.stock_vol[1]
    }

    /// `ΛΛᵀ`.
    pub fn factor_var(&self) -> f64 {
        self.factor_vol[0] * self.factor_vol[0] + self.factor_vol[1] * self.factor_vol[1]
    }

    /// `Λσᵀ`.
    pub fn cross_cov(&self) -> f64 {
        self.factor_vol[0] * self.stock_vol[0] + self.factor_vol[1] * self.stock_vol[1]
    }

    pub fn alpha(&self) -> f64 {
        let th = self.theta;
        let lam = self.cross_cov();
        th * self.factor_var() - th * th / (th + 1.0) * lam * lam / self.stock_var()
    }

    pub fn beta(&self) -> f64 {
        let th = self.theta;
        self.factor_slope - th / (th + 1.0) * self.stock_factor_loading * self.cross_cov() / self.stock_var()
    }

    pub fn c0(&self) -> f64 {
        let a = self.stock_factor_loading;
        a * a / ((self.theta + 1.0) * self.stock_var())
    }

    pub fn time_grid(&self, n_steps: usize) -> Result<TimeGrid> {
        TimeGrid::new(0.0, self.horizon, n_steps)
    }
}

/// Solved coefficient functions plus the derived constants.
#[derive(Debug, Clone)]
pub struct CoefficientSet {
    pub gamma: Arc<GridFunction>,
    pub phi: Arc<GridFunction>,
    pub k: Arc<GridFunction>,
    pub rho: Arc<GridFunction>,
    pub alpha: f64,
    pub beta: f64,
    pub c0: f64,
}

impl CoefficientSet {
    pub fn grid(&self) -> &TimeGrid {
        self.gamma.grid()
    }

    /// Writes `t,gamma,phi,k,rho`, one row per ODE-grid node.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "t,gamma,phi,k,rho")?;
        let g = self.grid();
        for i in 0..g.n_nodes() {
            writeln!(
                out,
                "{},{},{},{},{}",
                fmt_num(g.node(i)),
                fmt_num(self.gamma.at_node(i)),
                fmt_num(self.phi.at_node(i)),
                fmt_num(self.k.at_node(i)),
                fmt_num(self.rho.at_node(i)),
            )?;
        }
        Ok(())
    }
}

fn check_same_interval(f: &GridFunction, grid: &TimeGrid, what: &str) -> Result<()> {
    if !f.grid().same_interval(grid) {
        return Err(Error::GridMismatch(format!(
            "{what} lives on [{}, {}], requested [{}, {}]",
            f.grid().t0(),
            f.grid().horizon(),
            grid.t0(),
            grid.horizon()
        )));
    }
    Ok(())
}

fn check_horizon(params: &PortfolioParams, grid: &TimeGrid) -> Result<()> {
    if grid.horizon() != params.horizon {
        return Err(Error::GridMismatch(format!(
            "grid ends at {} but the horizon is {}",
            grid.horizon(),
            params.horizon
        )));
    }
    Ok(())
}

/// Riccati equation for Γ.
pub fn solve_gamma(params: &PortfolioParams, grid: TimeGrid) -> Result<GridFunction> {
    params.validate()?;
    check_horizon(params, &grid)?;
    let (alpha, beta, c0) = (params.alpha(), params.beta(), params.c0());
    integrate_ode_backward(|_, g| -alpha * g * g - 2.0 * beta * g + c0, 0.0, grid)
}

/// Closed form of the constant-coefficient Riccati equation for Γ.
///
/// With `τ = T − t` and `D = √(β² + αc0)`,
/// `Γ(t) = −c0·th / (1 − β·th)` where `th = tanh(Dτ)/D` (→ τ as D → 0).
/// The α = 0 branch reduces to `c0(1 − e^{2βτ})/(2β)`.
pub fn gamma_closed_form(params: &PortfolioParams, t: f64) -> Result<f64> {
    params.validate()?;
    let (alpha, beta, c0) = (params.alpha(), params.beta(), params.c0());
    let tau = params.horizon - t;
    let d = (beta * beta + alpha * c0).sqrt();
    let x = d * tau;
    let th = if x.abs() < 1e-8 {
        tau * (1.0 - x * x / 3.0)
    } else {
        x.tanh() / d
    };
    Ok(-c0 * th / (1.0 - beta * th))
}

/// Backward RK4 with a fallible right-hand side; the first error wins.
fn integrate_checked(
    rhs: impl Fn(f64, f64) -> Result<f64>,
    terminal: f64,
    grid: TimeGrid,
) -> Result<GridFunction> {
    let failure = RefCell::new(None);
    let out = integrate_ode_backward(
        |t, y| match rhs(t, y) {
            Ok(v) => v,
            Err(e) => {
                failure.borrow_mut().get_or_insert(e);
                f64::NAN
            }
        },
        terminal,
        grid,
    );
    match failure.into_inner() {
        Some(e) => Err(e),
        None => out,
    }
}

/// Linear equation for φ, driven by Γ.
pub fn solve_phi(params: &PortfolioParams, gamma: &GridFunction, grid: TimeGrid) -> Result<GridFunction> {
    params.validate()?;
    check_horizon(params, &grid)?;
    check_same_interval(gamma, &grid, "gamma")?;
    let (alpha, beta) = (params.alpha(), params.beta());
    let th = params.theta;
    let lam = params.cross_cov();
    let denom = (th + 1.0) * params.stock_var();
    let (a, big_a, b) = (params.stock_base_return, params.stock_factor_loading, params.factor_drift);
    integrate_checked(
        |t, phi| {
            let g = gamma.eval_hermite(t)?;
            let r = params.rate.at(t)?;
            Ok(-((beta + alpha * g) * phi + b * g - (big_a + th * lam * g) * (a - r) / denom))
        },
        0.0,
        grid,
    )
}

/// Offset `k` of the quadratic value function.
pub fn solve_k(
    params: &PortfolioParams,
    gamma: &GridFunction,
    phi: &GridFunction,
    grid: TimeGrid,
) -> Result<GridFunction> {
    params.validate()?;
    check_horizon(params, &grid)?;
    check_same_interval(gamma, &grid, "gamma")?;
    check_same_interval(phi, &grid, "phi")?;
    let th = params.theta;
    let lam = params.cross_cov();
    let fv = params.factor_var();
    let denom = 2.0 * (th + 1.0) * params.stock_var();
    let (a, b) = (params.stock_base_return, params.factor_drift);
    integrate_checked(
        |t, _k| {
            let g = gamma.eval_hermite(t)?;
            let eta = phi.eval_hermite(t)?;
            let r = params.rate.at(t)?;
            let m = a - r + th * lam * eta;
            Ok(m * m / denom + r - b * eta - 0.5 * th * fv * eta * eta - 0.5 * fv * g)
        },
        -params.initial_wealth.ln(),
        grid,
    )
}

/// Second-order adjoint coefficient ρ.
pub fn solve_rho(params: &PortfolioParams, gamma: &GridFunction, grid: TimeGrid) -> Result<GridFunction> {
    params.validate()?;
    check_horizon(params, &grid)?;
    check_same_interval(gamma, &grid, "gamma")?;
    let big_b = params.factor_slope;
    let w = params.theta * params.factor_var();
    integrate_checked(
        |t, rho| {
            let g = gamma.eval_hermite(t)?;
            Ok(-2.0 * big_b * rho - w * g * g)
        },
        0.0,
        grid,
    )
}

/// Solves Γ, φ, k and ρ on `ode_grid`.
pub fn solve_all(params: &PortfolioParams, ode_grid: TimeGrid) -> Result<CoefficientSet> {
    let gamma = solve_gamma(params, ode_grid)?;
    let phi = solve_phi(params, &gamma, ode_grid)?;
    let k = solve_k(params, &gamma, &phi, ode_grid)?;
    let rho = solve_rho(params, &gamma, ode_grid)?;
    Ok(CoefficientSet {
        gamma: Arc::new(gamma),
        phi: Arc::new(phi),
        k: Arc::new(k),
        rho: Arc::new(rho),
        alpha: params.alpha(),
        beta: params.beta(),
        c0: params.c0(),
    })
}

/// Forcing `(θλΓ + A)²/((θ+1)s)` separating the Γ and ρ equations.
pub fn comparison_forcing(params: &PortfolioParams, gamma: f64) -> f64 {
    let m = params.theta * params.cross_cov() * gamma + params.stock_factor_loading;
    m * m / ((params.theta + 1.0) * params.stock_var())
}
