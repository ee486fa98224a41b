//! Uniform time meshes, functions sampled on them, and a fixed-step
//! classical RK4 integrator.
//!
//! Every deterministic coefficient equation in the crate is a scalar ODE
//! with a terminal condition, so the integrator marches backward from the
//! horizon. Blow-up surfaces as [`Error::OdeBlowUp`] instead of being
//! stepped over.

use crate::error::{Error, Result};

/// Relative snap distance used to recognise queries that sit on a node.
const NODE_SNAP: f64 = 1e-9;

/// Uniform mesh `t0 = s_0 < s_1 < ... < s_n = t1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    t0: f64,
    t1: f64,
    n_steps: usize,
    dt: f64,
}

impl TimeGrid {
    pub fn new(t0: f64, t1: f64, n_steps: usize) -> Result<Self> {
        if !t0.is_finite() || !t1.is_finite() {
            return Err(Error::InvalidGrid(format!("non-finite endpoints ({t0}, {t1})")));
        }
        if t0 >= t1 {
            return Err(Error::InvalidGrid(format!("need t0 < T, got ({t0}, {t1})")));
        }
        if n_steps == 0 {
            return Err(Error::InvalidGrid("need at least one step".into()));
        }
        Ok(Self {
            t0,
            t1,
            n_steps,
            dt: (t1 - t0) / n_steps as f64,
        })
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    /// Horizon `T`.
    pub fn horizon(&self) -> f64 {
        self.t1
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Time of node `k`; the last node is the horizon exactly.
    pub fn node(&self, k: usize) -> f64 {
        debug_assert!(k <= self.n_steps);
        if k == self.n_steps {
            self.t1
        } else {
            self.t0 + k as f64 * self.dt
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.n_steps).map(move |k| self.node(k))
    }

    /// Same interval, `factor` times as many steps.
    pub fn refine(&self, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::InvalidGrid("refinement factor must be >= 1".into()));
        }
        Self::new(self.t0, self.t1, self.n_steps * factor)
    }

    /// Same interval, `n_steps / factor` steps. `factor` must divide `n_steps`.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.n_steps % factor != 0 {
            return Err(Error::InvalidGrid(format!(
                "coarsening factor {factor} does not divide {} steps",
                self.n_steps
            )));
        }
        Self::new(self.t0, self.t1, self.n_steps / factor)
    }

    pub fn same_interval(&self, other: &TimeGrid) -> bool {
        self.t0 == other.t0 && self.t1 == other.t1
    }

    pub fn contains(&self, t: f64) -> bool {
        let slack = 1e-12 * (1.0 + self.t1.abs().max(self.t0.abs()));
        t >= self.t0 - slack && t <= self.t1 + slack
    }

    /// Locates `t` as (left node index, weight of the right node).
    fn locate(&self, t: f64) -> Result<(usize, f64)> {
        if !t.is_finite() || !self.contains(t) {
            return Err(Error::OutOfRange { t, t0: self.t0, t1: self.t1 });
        }
        let pos = ((t - self.t0) / self.dt).clamp(0.0, self.n_steps as f64);
        let nearest = pos.round();
        if (pos - nearest).abs() <= NODE_SNAP * (1.0 + nearest) {
            let k = nearest as usize;
            return Ok(if k == self.n_steps { (k - 1, 1.0) } else { (k, 0.0) });
        }
        let k = (pos.floor() as usize).min(self.n_steps - 1);
        Ok((k, pos - k as f64))
    }
}

/// Make a uniform grid on `[t0, t1]` with `n` steps.
pub fn make_grid(t0: f64, t1: f64, n: usize) -> Result<TimeGrid> {
    TimeGrid::new(t0, t1, n)
}

/// A scalar function sampled at every node of a [`TimeGrid`].
///
/// Optional derivative samples are kept when the function came out of the
/// ODE integrator; they feed `eval_derivative` and the cubic Hermite
/// evaluator used for RK4 stage times that fall between nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    grid: TimeGrid,
    values: Vec<f64>,
    derivs: Option<Vec<f64>>,
}

impl GridFunction {
    pub fn new(grid: TimeGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_nodes() {
            return Err(Error::GridMismatch(format!(
                "{} values for {} nodes",
                values.len(),
                grid.n_nodes()
            )));
        }
        Ok(Self { grid, values, derivs: None })
    }

    pub fn with_derivatives(grid: TimeGrid, values: Vec<f64>, derivs: Vec<f64>) -> Result<Self> {
        if derivs.len() != grid.n_nodes() {
            return Err(Error::GridMismatch(format!(
                "{} derivative samples for {} nodes",
                derivs.len(),
                grid.n_nodes()
            )));
        }
        let mut f = Self::new(grid, values)?;
        f.derivs = Some(derivs);
        Ok(f)
    }

    pub fn constant(grid: TimeGrid, c: f64) -> Self {
        Self {
            grid,
            values: vec![c; grid.n_nodes()],
            derivs: Some(vec![0.0; grid.n_nodes()]),
        }
    }

    /// Samples `f` at every node.
    pub fn from_fn(grid: TimeGrid, f: impl Fn(f64) -> f64) -> Self {
        Self {
            grid,
            values: grid.nodes().map(f).collect(),
            derivs: None,
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn derivatives(&self) -> Option<&[f64]> {
        self.derivs.as_deref()
    }

    pub fn at_node(&self, k: usize) -> f64 {
        self.values[k]
    }

    /// Linear interpolation; exact at nodes.
    pub fn eval(&self, t: f64) -> Result<f64> {
        let (k, w) = self.grid.locate(t)?;
        Ok(lerp(self.values[k], self.values[k + 1], w))
    }

    /// Linear interpolation of the stored derivative samples.
    pub fn eval_derivative(&self, t: f64) -> Result<f64> {
        let d = self
            .derivs
            .as_ref()
            .ok_or_else(|| Error::Missing("grid function carries no derivative samples".into()))?;
        let (k, w) = self.grid.locate(t)?;
        Ok(lerp(d[k], d[k + 1], w))
    }

    /// Cubic Hermite interpolation from values and derivative samples.
    /// Falls back to linear interpolation when no derivatives are stored.
    pub fn eval_hermite(&self, t: f64) -> Result<f64> {
        let Some(d) = self.derivs.as_ref() else {
            return self.eval(t);
        };
        let (k, w) = self.grid.locate(t)?;
        if w == 0.0 {
            return Ok(self.values[k]);
        }
        if w == 1.0 {
            return Ok(self.values[k + 1]);
        }
        let h = self.grid.dt;
        let (w2, w3) = (w * w, w * w * w);
        let h00 = 2.0 * w3 - 3.0 * w2 + 1.0;
        let h10 = w3 - 2.0 * w2 + w;
        let h01 = -2.0 * w3 + 3.0 * w2;
        let h11 = w3 - w2;
        Ok(h00 * self.values[k] + h10 * h * d[k] + h01 * self.values[k + 1] + h11 * h * d[k + 1])
    }

    /// First and last stored values.
    pub fn initial(&self) -> f64 {
        self.values[0]
    }

    pub fn terminal(&self) -> f64 {
        self.values[self.grid.n_steps]
    }
}

#[inline]
fn lerp(a: f64, b: f64, w: f64) -> f64 {
    if w == 0.0 {
        a
    } else if w == 1.0 {
        b
    } else {
        a + w * (b - a)
    }
}

/// Evaluate `f` at `t`.
pub fn eval_grid_function(f: &GridFunction, t: f64) -> Result<f64> {
    f.eval(t)
}

fn rk4_step(rhs: &impl Fn(f64, f64) -> f64, t: f64, y: f64, h: f64) -> f64 {
    let k1 = rhs(t, y);
    let k2 = rhs(t + 0.5 * h, y + 0.5 * h * k1);
    let k3 = rhs(t + 0.5 * h, y + 0.5 * h * k2);
    let k4 = rhs(t + h, y + h * k3);
    y + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
}

/// Solve `y' = rhs(t, y)` with `y(T) = terminal`, marching RK4 steps of
/// size `-dt` from the horizon to `t0`.
///
/// The result stores `rhs(t_k, y_k)` as derivative samples.
pub fn integrate_ode_backward(
    rhs: impl Fn(f64, f64) -> f64,
    terminal: f64,
    grid: TimeGrid,
) -> Result<GridFunction> {
    let n = grid.n_steps();
    let mut values = vec![0.0; n + 1];
    let mut derivs = vec![0.0; n + 1];
    values[n] = terminal;
    derivs[n] = rhs(grid.node(n), terminal);
    if !terminal.is_finite() || !derivs[n].is_finite() {
        return Err(Error::OdeBlowUp { t: grid.node(n) });
    }
    for k in (0..n).rev() {
        let t_next = grid.node(k + 1);
        let y = rk4_step(&rhs, t_next, values[k + 1], -grid.dt());
        let t = grid.node(k);
        let dy = rhs(t, y);
        if !y.is_finite() || !dy.is_finite() {
            return Err(Error::OdeBlowUp { t });
        }
        values[k] = y;
        derivs[k] = dy;
    }
    GridFunction::with_derivatives(grid, values, derivs)
}

/// Forward counterpart of [`integrate_ode_backward`]: `y(t0) = initial`.
pub fn integrate_ode_forward(
    rhs: impl Fn(f64, f64) -> f64,
    initial: f64,
    grid: TimeGrid,
) -> Result<GridFunction> {
    let n = grid.n_steps();
    let mut values = vec![0.0; n + 1];
    let mut derivs = vec![0.0; n + 1];
    values[0] = initial;
    derivs[0] = rhs(grid.node(0), initial);
    if !initial.is_finite() || !derivs[0].is_finite() {
        return Err(Error::OdeBlowUp { t: grid.node(0) });
    }
    for k in 0..n {
        let y = rk4_step(&rhs, grid.node(k), values[k], grid.dt());
        let t = grid.node(k + 1);
        let dy = rhs(t, y);
        if !y.is_finite() || !dy.is_finite() {
            return Err(Error::OdeBlowUp { t });
        }
        values[k + 1] = y;
        derivs[k + 1] = dy;
    }
    GridFunction::with_derivatives(grid, values, derivs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn grid_nodes() {
        let g = make_grid(0.0, 1.0, 4).unwrap();
        let nodes: Vec<f64> = g.nodes().collect();
        assert_eq!(nodes, vec![0.0, 0.25, 0.5, 0.75, 1.0]);

        let g = make_grid(0.0, 1.0, 1).unwrap();
        assert_eq!(g.nodes().collect::<Vec<_>>(), vec![0.0, 1.0]);
    }

    #[test]
    fn grid_rejects_bad_input() {
        assert!(make_grid(0.5, 0.5, 1).is_err());
        assert!(make_grid(1.0, 0.0, 4).is_err());
        assert!(make_grid(0.0, f64::NAN, 4).is_err());
        assert!(make_grid(0.0, 1.0, 0).is_err());
    }

    #[test]
    fn last_node_is_horizon() {
        let g = make_grid(0.1, 0.7, 3).unwrap();
        assert_eq!(g.node(3), 0.7);
    }

    #[test]
    fn eval_at_nodes_and_midpoints() {
        let g = make_grid(0.0, 1.0, 1).unwrap();
        let f = GridFunction::new(g, vec![0.0, 1.0]).unwrap();
        assert_eq!(eval_grid_function(&f, 0.5).unwrap(), 0.5);
        assert_eq!(f.eval(1.0).unwrap(), 1.0);

        let g = make_grid(0.0, 1.0, 10).unwrap();
        let f = GridFunction::from_fn(g, |t| (3.0 * t).sin());
        for k in 0..=10 {
            assert_eq!(f.eval(g.node(k)).unwrap(), f.at_node(k));
        }
        assert!(f.eval(1.0 + g.dt()).is_err());
        assert!(f.eval(-0.01).is_err());
    }

    #[test]
    fn wrong_length_rejected() {
        let g = make_grid(0.0, 1.0, 4).unwrap();
        assert!(GridFunction::new(g, vec![0.0; 4]).is_err());
    }

    #[test]
    fn zero_rhs_is_constant() {
        let g = make_grid(0.0, 1.0, 8).unwrap();
        let f = integrate_ode_backward(|_, _| 0.0, 1.0, g).unwrap();
        assert!(f.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn exponential_backward() {
        let g = make_grid(0.0, 1.0, 100).unwrap();
        let f = integrate_ode_backward(|_, y| -y, 1.0, g).unwrap();
        assert_eq!(f.terminal(), 1.0);
        assert!((f.initial() - std::f64::consts::E).abs() <= 1e-8);
    }

    #[test]
    fn quadratic_rhs_matches_fine_reference() {
        // y' = -y^2, y(0.5) = 1 has y(t) = 1 / (1 + t - 0.5).
        let rhs = |_: f64, y: f64| -y * y;
        let coarse = integrate_ode_backward(rhs, 1.0, make_grid(0.0, 0.5, 50).unwrap()).unwrap();
        let fine = integrate_ode_backward(rhs, 1.0, make_grid(0.0, 0.5, 100_000).unwrap()).unwrap();
        assert!((fine.initial() - 2.0).abs() < 1e-13);
        assert!((coarse.initial() - fine.initial()).abs() < 1e-7);
    }

    #[test]
    fn blow_up_is_reported() {
        // y' = y^2 backward from y(1) = 1 reaches infinity at t = 0.
        let g = make_grid(-1.0, 1.0, 64).unwrap();
        match integrate_ode_backward(|_, y| -(y * y) * 50.0, 1.0, g) {
            Err(Error::OdeBlowUp { t }) => assert!(t < 1.0),
            other => panic!("expected blow-up, got {other:?}"),
        }
    }

    #[test]
    fn rk4_order_on_smooth_problem() {
        let rhs = |t: f64, y: f64| -y + (2.0 * t).cos();
        let reference = integrate_ode_backward(rhs, 0.3, make_grid(0.0, 2.0, 4000).unwrap())
            .unwrap()
            .initial();
        let errs: Vec<f64> = [10, 20, 40]
            .iter()
            .map(|&n| {
                let f = integrate_ode_backward(rhs, 0.3, make_grid(0.0, 2.0, n).unwrap()).unwrap();
                (f.initial() - reference).abs()
            })
            .collect();
        for w in errs.windows(2) {
            assert!((w[0] / w[1]).log2() >= 3.5, "errors {errs:?}");
        }
    }

    #[test]
    fn backward_then_forward_round_trip() {
        let rhs = |t: f64, y: f64| 0.5 * y - t * t + (y * 0.1).sin();
        let g = make_grid(0.0, 1.0, 200).unwrap();
        let back = integrate_ode_backward(rhs, 0.7, g).unwrap();
        let fwd = integrate_ode_forward(rhs, back.initial(), g).unwrap();
        assert!((fwd.terminal() - 0.7).abs() <= 1e-8);
    }

    #[test]
    fn hermite_beats_linear_between_nodes() {
        let g = make_grid(0.0, 1.0, 20).unwrap();
        let f = integrate_ode_backward(|_, y| -y, 1.0, g).unwrap();
        let t = 0.5 * (g.node(3) + g.node(4));
        let exact = (1.0 - t).exp();
        let lin = (f.eval(t).unwrap() - exact).abs();
        let herm = (f.eval_hermite(t).unwrap() - exact).abs();
        assert!(herm < lin * 1e-2, "hermite {herm} linear {lin}");
    }

    #[test]
    fn derivative_samples_without_data() {
        let g = make_grid(0.0, 1.0, 2).unwrap();
        let f = GridFunction::new(g, vec![0.0, 1.0, 2.0]).unwrap();
        assert!(f.eval_derivative(0.5).is_err());
    }

    proptest! {
        #[test]
        fn affine_functions_interpolate_exactly(
            a in -5.0f64..5.0, b in -5.0f64..5.0, n in 1usize..50, s in 0.0f64..1.0
        ) {
            let g = make_grid(-1.0, 2.0, n).unwrap();
            let f = GridFunction::from_fn(g, |t| a + b * t);
            let t = -1.0 + 3.0 * s;
            let got = f.eval(t).unwrap();
            prop_assert!((got - (a + b * t)).abs() <= 1e-12 * (1.0 + a.abs() + b.abs()));
        }
    }
}
