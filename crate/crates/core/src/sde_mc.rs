//! Euler–Maruyama simulation of the factor model (under both measures) and
//! of generic controlled SDEs, driven by counter-addressed Gaussian noise.
//!
//! Every Gaussian increment is a pure function of
//! `(seed, block_index, path, step, component)`: the ChaCha stream is keyed
//! by `seed`, selected by `block_index`, and each path owns a fixed window
//! of the keystream. Box–Muller consumes exactly two `u64` words per pair of
//! normals, so the window offset of any draw is known up front.

use std::io::Write;
use std::sync::Arc;

use nalgebra::DVector;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gridfn::TimeGrid;
use crate::hamiltonians::{FactorDynamics, GeneralProblem};
use crate::lq_coeffs::PortfolioParams;

/// 32-bit keystream words consumed per Box–Muller pair.
const WORDS_PER_PAIR: u128 = 4;

fn pairs_per_path(n_steps: usize, dim: usize) -> u128 {
    (n_steps * dim).div_ceil(2) as u128
}

fn unit_open(w: u64) -> f64 {
    // (0, 1]: safe for ln.
    ((w >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn unit_closed_open(w: u64) -> f64 {
    (w >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn box_muller(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let u1 = unit_open(rng.next_u64());
    let u2 = unit_closed_open(rng.next_u64());
    let r = (-2.0 * u1.ln()).sqrt();
    let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
    (r * c, r * s)
}

fn stream_rng(seed: u64, block_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(block_index);
    rng
}

/// Standard normal at counter `(seed, block_index, path, index)`, where
/// `index = step · dim + component` within a path of `per_path` draws.
fn standard_normal_at(seed: u64, block_index: u64, path: usize, index: usize, per_path: usize) -> f64 {
    let pairs = per_path.div_ceil(2) as u128;
    let mut rng = stream_rng(seed, block_index);
    rng.set_word_pos((path as u128 * pairs + (index / 2) as u128) * WORDS_PER_PAIR);
    let (z0, z1) = box_muller(&mut rng);
    if index % 2 == 0 {
        z0
    } else {
        z1
    }
}

/// `n` independent standard normals from stream `(seed, stream)`.
pub fn standard_normals(seed: u64, stream: u64, n: usize) -> Vec<f64> {
    let mut rng = stream_rng(seed, stream);
    let mut out = Vec::with_capacity(n + 1);
    while out.len() < n {
        let (z0, z1) = box_muller(&mut rng);
        out.push(z0);
        out.push(z1);
    }
    out.truncate(n);
    out
}

/// Brownian increments for a block of paths, flattened `[path][step][component]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBlock {
    grid: TimeGrid,
    n_paths: usize,
    dim: usize,
    seed: u64,
    block_index: u64,
    /// Global index of this block's first path, for diagnostics.
    path_offset: usize,
    increments: Vec<f64>,
}

/// Deterministic Gaussian increments with variance `dt`.
pub fn generate_noise(grid: TimeGrid, n_paths: usize, dim: usize, seed: u64, block_index: u64) -> Result<NoiseBlock> {
    if n_paths == 0 || dim == 0 {
        return Err(Error::InvalidParams("noise block needs at least one path and one component".into()));
    }
    let per_path = grid.n_steps() * dim;
    let sqrt_dt = grid.dt().sqrt();
    let mut increments = Vec::with_capacity(n_paths * per_path);
    let mut rng = stream_rng(seed, block_index);
    let pairs = pairs_per_path(grid.n_steps(), dim);
    for path in 0..n_paths {
        rng.set_word_pos(path as u128 * pairs * WORDS_PER_PAIR);
        let mut drawn = 0;
        while drawn < per_path {
            let (z0, z1) = box_muller(&mut rng);
            increments.push(z0 * sqrt_dt);
            drawn += 1;
            if drawn < per_path {
                increments.push(z1 * sqrt_dt);
                drawn += 1;
            }
        }
    }
    Ok(NoiseBlock { grid, n_paths, dim, seed, block_index, path_offset: 0, increments })
}

/// Single increment by counter, without generating the block.
pub fn normal_at(grid: &TimeGrid, dim: usize, seed: u64, block_index: u64, path: usize, step: usize, component: usize) -> f64 {
    standard_normal_at(seed, block_index, path, step * dim + component, grid.n_steps() * dim) * grid.dt().sqrt()
}

impl NoiseBlock {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn block_index(&self) -> u64 {
        self.block_index
    }

    pub fn path_offset(&self) -> usize {
        self.path_offset
    }

    pub fn with_path_offset(mut self, offset: usize) -> Self {
        self.path_offset = offset;
        self
    }

    /// `ΔW` for one step of one path.
    #[inline]
    pub fn increment(&self, path: usize, step: usize) -> &[f64] {
        let start = (path * self.grid.n_steps() + step) * self.dim;
        &self.increments[start..start + self.dim]
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    /// The same Brownian paths on a grid `factor` times coarser: increments
    /// summed over consecutive groups of fine steps.
    pub fn coarsen(&self, factor: usize) -> Result<NoiseBlock> {
        let grid = self.grid.coarsen(factor)?;
        let (n_fine, n_coarse, d) = (self.grid.n_steps(), grid.n_steps(), self.dim);
        let mut increments = vec![0.0; self.n_paths * n_coarse * d];
        for path in 0..self.n_paths {
            for k in 0..n_coarse {
                let out = &mut increments[(path * n_coarse + k) * d..][..d];
                for j in 0..factor {
                    let fine = &self.increments[(path * n_fine + k * factor + j) * d..][..d];
                    for (o, f) in out.iter_mut().zip(fine) {
                        *o += f;
                    }
                }
            }
        }
        Ok(NoiseBlock { grid, increments, ..self.clone() })
    }
}

/// Partition of a large ensemble into fixed-size noise blocks.
///
/// Block `b` of stream `s` uses block index `(s << 32) | b`, so distinct
/// streams (e.g. original vs transformed measure) never share draws.
#[derive(Debug, Clone, Copy)]
pub struct NoiseSource {
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub dim: usize,
    pub seed: u64,
    pub stream: u32,
    pub block_size: usize,
}

impl NoiseSource {
    pub const DEFAULT_BLOCK_SIZE: usize = 4096;

    pub fn new(grid: TimeGrid, n_paths: usize, dim: usize, seed: u64, stream: u32) -> Self {
        Self { grid, n_paths, dim, seed, stream, block_size: Self::DEFAULT_BLOCK_SIZE }
    }

    pub fn n_blocks(&self) -> usize {
        self.n_paths.div_ceil(self.block_size)
    }

    pub fn block(&self, b: usize) -> Result<NoiseBlock> {
        if b >= self.n_blocks() {
            return Err(Error::InvalidParams(format!("block {b} of {}", self.n_blocks())));
        }
        let start = b * self.block_size;
        let len = self.block_size.min(self.n_paths - start);
        let index = ((self.stream as u64) << 32) | b as u64;
        Ok(generate_noise(self.grid, len, self.dim, self.seed, index)?.with_path_offset(start))
    }

    /// Runs `f` on every block in parallel; results come back in block order
    /// regardless of scheduling.
    pub fn map_blocks<T: Send>(&self, f: impl Fn(Arc<NoiseBlock>) -> Result<T> + Sync + Send) -> Result<Vec<T>> {
        if self.n_paths == 0 || self.block_size == 0 {
            return Err(Error::InvalidParams("noise source needs paths and a positive block size".into()));
        }
        (0..self.n_blocks())
            .into_par_iter()
            .map(|b| f(Arc::new(self.block(b)?)))
            .collect()
    }
}

type PolicyFn = dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync;

/// State-feedback control law `u = π(t, x)`.
#[derive(Clone)]
pub struct FeedbackPolicy {
    pub label: String,
    pub control_dim: usize,
    map: Arc<PolicyFn>,
}

impl std::fmt::Debug for FeedbackPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FeedbackPolicy")
            .field("label", &self.label)
            .field("control_dim", &self.control_dim)
            .finish_non_exhaustive()
    }
}

impl FeedbackPolicy {
    pub fn new(label: impl Into<String>, control_dim: usize, map: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        Self { label: label.into(), control_dim, map: Arc::new(map) }
    }

    /// Scalar control depending on the first state component.
    pub fn scalar(label: impl Into<String>, f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) -> Self {
        Self::new(label, 1, move |t, x, u| u[0] = f(t, x[0]))
    }

    pub fn constant(label: impl Into<String>, u: Vec<f64>) -> Self {
        let dim = u.len();
        Self::new(label, dim, move |_, _, out| out.copy_from_slice(&u))
    }

    pub fn zero(control_dim: usize) -> Self {
        Self::constant("zero", vec![0.0; control_dim])
    }

    /// `π(t, x) + ε` componentwise.
    pub fn offset(&self, eps: f64, label: impl Into<String>) -> Self {
        let inner = Arc::clone(&self.map);
        Self::new(label, self.control_dim, move |t, x, u| {
            inner(t, x, u);
            u.iter_mut().for_each(|v| *v += eps);
        })
    }

    #[inline]
    pub fn apply(&self, t: f64, x: &[f64], u: &mut [f64]) {
        (self.map)(t, x, u)
    }

    pub fn eval_scalar(&self, t: f64, x: f64) -> f64 {
        let mut u = [0.0];
        self.apply(t, &[x], &mut u);
        u[0]
    }
}

/// Simulated ensemble; states flattened `[path][node][component]`,
/// controls `[path][step][component]`.
#[derive(Debug, Clone)]
pub struct SamplePaths {
    pub grid: TimeGrid,
    pub n_paths: usize,
    pub state_dim: usize,
    pub control_dim: usize,
    pub states: Vec<f64>,
    pub controls: Vec<f64>,
    pub noise: Arc<NoiseBlock>,
}

impl SamplePaths {
    #[inline]
    pub fn state(&self, path: usize, node: usize) -> &[f64] {
        let start = (path * self.grid.n_nodes() + node) * self.state_dim;
        &self.states[start..start + self.state_dim]
    }

    #[inline]
    pub fn control(&self, path: usize, step: usize) -> &[f64] {
        let start = (path * self.grid.n_steps() + step) * self.control_dim;
        &self.controls[start..start + self.control_dim]
    }

    pub fn terminal_state(&self, path: usize) -> &[f64] {
        self.state(path, self.grid.n_steps())
    }

    /// CSV dump with columns `path,t,x,log_v,u`; `log_v` is empty for
    /// single-component states, `u` empty at the terminal node.
    pub fn write_csv(&self, mut out: impl Write, max_paths: usize) -> Result<()> {
        writeln!(out, "path,t,x,log_v,u")?;
        for p in 0..self.n_paths.min(max_paths) {
            for k in 0..self.grid.n_nodes() {
                let s = self.state(p, k);
                let log_v = if self.state_dim > 1 { crate::fmt_num(s[1]) } else { String::new() };
                let u = if k < self.grid.n_steps() && self.control_dim > 0 {
                    crate::fmt_num(self.control(p, k)[0])
                } else {
                    String::new()
                };
                writeln!(
                    out,
                    "{},{},{},{},{}",
                    self.noise.path_offset() + p,
                    crate::fmt_num(self.grid.node(k)),
                    crate::fmt_num(s[0]),
                    log_v,
                    u
                )?;
            }
        }
        Ok(())
    }
}

fn check_noise(noise: &NoiseBlock, dim: usize) -> Result<()> {
    if noise.dim() != dim {
        return Err(Error::Dimension(format!("noise dimension {} but model needs {dim}", noise.dim())));
    }
    Ok(())
}

fn check_finite(values: &[f64], noise: &NoiseBlock, path: usize, step: usize) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteState { path: noise.path_offset() + path, step })
    }
}

/// Factor under the transformed measure:
/// `X_{k+1} = X_k + (b + B X_k − θΛσᵀu_k) dt + Λ·ΔŴ_k`.
pub fn simulate_factor_transformed(
    params: &PortfolioParams,
    policy: &FeedbackPolicy,
    x0: f64,
    noise: Arc<NoiseBlock>,
) -> Result<SamplePaths> {
    check_noise(&noise, 2)?;
    if policy.control_dim != 1 {
        return Err(Error::Dimension("factor model takes a scalar control".into()));
    }
    let model = FactorDynamics::new(params);
    let grid = *noise.grid();
    let (n, dt) = (grid.n_steps(), grid.dt());
    let mut states = Vec::with_capacity(noise.n_paths() * (n + 1));
    let mut controls = Vec::with_capacity(noise.n_paths() * n);
    let [lam0, lam1] = model.lam;
    for path in 0..noise.n_paths() {
        let mut x = x0;
        check_finite(&[x], &noise, path, 0)?;
        states.push(x);
        for k in 0..n {
            let mut u = [0.0];
            policy.apply(grid.node(k), &[x], &mut u);
            let dw = noise.increment(path, k);
            let drift = model.transformed_drift(x, u[0]);
            x = x + drift * dt + (lam0 * dw[0] + lam1 * dw[1]);
            check_finite(&[x, u[0]], &noise, path, k + 1)?;
            controls.push(u[0]);
            states.push(x);
        }
    }
    Ok(SamplePaths { grid, n_paths: noise.n_paths(), state_dim: 1, control_dim: 1, states, controls, noise })
}

/// One original-measure factor step, shared by the factor-only and the
/// joint wealth simulators so their `X` paths agree bit for bit.
#[inline]
fn original_factor_step(model: &FactorDynamics, x: f64, dt: f64, dw: &[f64]) -> f64 {
    x + model.original_drift(x) * dt + (model.lam[0] * dw[0] + model.lam[1] * dw[1])
}

/// Factor under the original measure: `dX = (b + BX) dt + Λ dW`. Controls are
/// evaluated and recorded but do not feed back into `X`.
pub fn simulate_factor_original(
    params: &PortfolioParams,
    policy: &FeedbackPolicy,
    x0: f64,
    noise: Arc<NoiseBlock>,
) -> Result<SamplePaths> {
    check_noise(&noise, 2)?;
    let model = FactorDynamics::new(params);
    let grid = *noise.grid();
    let (n, dt) = (grid.n_steps(), grid.dt());
    let mut states = Vec::with_capacity(noise.n_paths() * (n + 1));
    let mut controls = Vec::with_capacity(noise.n_paths() * n);
    for path in 0..noise.n_paths() {
        let mut x = x0;
        states.push(x);
        for k in 0..n {
            let mut u = [0.0];
            policy.apply(grid.node(k), &[x], &mut u);
            x = original_factor_step(&model, x, dt, noise.increment(path, k));
            check_finite(&[x, u[0]], &noise, path, k + 1)?;
            controls.push(u[0]);
            states.push(x);
        }
    }
    Ok(SamplePaths { grid, n_paths: noise.n_paths(), state_dim: 1, control_dim: 1, states, controls, noise })
}

/// Joint `(X, log V)` under the original measure:
/// `d log V = (r + u(a + AX − r) − ½u²σσᵀ) dt + u σ·dW`.
///
/// The policy sees only the factor `X`.
pub fn simulate_wealth_original(
    params: &PortfolioParams,
    policy: &FeedbackPolicy,
    x0: f64,
    v0: f64,
    noise: Arc<NoiseBlock>,
) -> Result<SamplePaths> {
    check_noise(&noise, 2)?;
    if !(v0 > 0.0) || !v0.is_finite() {
        return Err(Error::InvalidParams(format!("initial wealth must be positive, got {v0}")));
    }
    let model = FactorDynamics::new(params);
    let grid = *noise.grid();
    let (n, dt) = (grid.n_steps(), grid.dt());
    let rates = rate_at_nodes(params, &grid)?;
    let (a, big_a) = (params.stock_base_return, params.stock_factor_loading);
    let [s0, s1] = params.stock_vol;
    let s = params.stock_var();
    let mut states = Vec::with_capacity(noise.n_paths() * (n + 1) * 2);
    let mut controls = Vec::with_capacity(noise.n_paths() * n);
    for path in 0..noise.n_paths() {
        let (mut x, mut lv) = (x0, v0.ln());
        states.extend([x, lv]);
        for k in 0..n {
            let mut u = [0.0];
            policy.apply(grid.node(k), &[x], &mut u);
            let u = u[0];
            let dw = noise.increment(path, k);
            let r = rates[k];
            lv = lv + (r + u * (a + big_a * x - r) - 0.5 * u * u * s) * dt + u * (s0 * dw[0] + s1 * dw[1]);
            x = original_factor_step(&model, x, dt, dw);
            check_finite(&[x, lv, u], &noise, path, k + 1)?;
            controls.push(u);
            states.extend([x, lv]);
        }
    }
    Ok(SamplePaths { grid, n_paths: noise.n_paths(), state_dim: 2, control_dim: 1, states, controls, noise })
}

/// `r(t_k)` at every grid node.
pub fn rate_at_nodes(params: &PortfolioParams, grid: &TimeGrid) -> Result<Vec<f64>> {
    grid.nodes().map(|t| params.rate.at(t)).collect()
}

/// Euler–Maruyama for a generic `dX = f dt + σ dW`.
pub fn simulate_generic(
    problem: &GeneralProblem,
    policy: &FeedbackPolicy,
    x0: &[f64],
    noise: Arc<NoiseBlock>,
) -> Result<SamplePaths> {
    let (n_x, n_w, n_u) = (problem.state_dim, problem.noise_dim, problem.control_dim);
    check_noise(&noise, n_w)?;
    if x0.len() != n_x || policy.control_dim != n_u {
        return Err(Error::Dimension(format!(
            "initial state {} / policy control {} vs problem {} / {}",
            x0.len(),
            policy.control_dim,
            n_x,
            n_u
        )));
    }
    let grid = *noise.grid();
    let (n, dt) = (grid.n_steps(), grid.dt());
    let mut states = Vec::with_capacity(noise.n_paths() * (n + 1) * n_x);
    let mut controls = Vec::with_capacity(noise.n_paths() * n * n_u);
    let mut u = vec![0.0; n_u];
    for path in 0..noise.n_paths() {
        let mut x = DVector::from_column_slice(x0);
        check_finite(x.as_slice(), &noise, path, 0)?;
        states.extend_from_slice(x.as_slice());
        for k in 0..n {
            let t = grid.node(k);
            policy.apply(t, x.as_slice(), &mut u);
            let uv = DVector::from_column_slice(&u);
            let f = (problem.drift)(t, &x, &uv);
            let sig = (problem.diffusion)(t, &x, &uv);
            if f.len() != n_x || sig.shape() != (n_x, n_w) {
                return Err(Error::Dimension("drift or diffusion returned the wrong shape".into()));
            }
            let dw = noise.increment(path, k);
            for i in 0..n_x {
                let mut diff = sig[(i, 0)] * dw[0];
                for j in 1..n_w {
                    diff += sig[(i, j)] * dw[j];
                }
                x[i] = x[i] + f[i] * dt + diff;
            }
            check_finite(x.as_slice(), &noise, path, k + 1)?;
            check_finite(&u, &noise, path, k)?;
            controls.extend_from_slice(&u);
            states.extend_from_slice(x.as_slice());
        }
    }
    Ok(SamplePaths { grid, n_paths: noise.n_paths(), state_dim: n_x, control_dim: n_u, states, controls, noise })
}
