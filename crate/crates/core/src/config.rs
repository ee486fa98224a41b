//! Flat `key = value` experiment configuration.
//!
//! One assignment per line, `#` starts a comment, keys are case-sensitive
//! (`a`/`A` and `b`/`B` are different parameters). Lists are
//! comma-separated. Unknown or repeated keys are errors; absent keys keep
//! their baseline defaults.
//!
//! ```text
//! theta = 1.0
//! sigma = 0.3, 0.0
//! lambda = 0.1, 0.2
//! r = 0.02            # or a list: values on a uniform grid over [0, T]
//! n_paths = 100000
//! ```

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::gridfn::{GridFunction, TimeGrid};
use crate::lq_coeffs::RateCurve;
use crate::portfolio::ExperimentConfig;

/// Accepted keys; the first name of each group is canonical.
const KEYS: &[&[&str]] = &[
    &["T", "horizon"],
    &["theta"],
    &["r", "rate"],
    &["a", "stock_base_return"],
    &["A", "stock_factor_loading"],
    &["b", "factor_drift"],
    &["B", "factor_slope"],
    &["sigma", "stock_vol"],
    &["lambda", "factor_vol"],
    &["v", "initial_wealth"],
    &["x0"],
    &["n_steps"],
    &["ode_refinement"],
    &["n_paths"],
    &["seed"],
    &["perturbations"],
    &["state_box"],
    &["relation_paths"],
    &["relation_points"],
    &["bsde_paths"],
    &["theta_sweep"],
    &["constant_control"],
    &["dump_paths"],
    &["tol_hjb"],
    &["tol_adjoint"],
    &["tol_comparison"],
    &["tol_minimum"],
    &["tol_control"],
    &["tol_strict_gap"],
];

fn canonical(key: &str) -> Option<&'static str> {
    KEYS.iter().find(|names| names.contains(&key)).map(|names| names[0])
}

struct Entry {
    line: usize,
    raw: String,
}

impl Entry {
    fn err(&self, key: &str, msg: impl std::fmt::Display) -> Error {
        Error::Config(format!("line {}: `{key}`: {msg}", self.line))
    }

    fn scalar<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.raw.trim().parse().map_err(|e| self.err(key, e))
    }

    fn list(&self, key: &str) -> Result<Vec<f64>> {
        self.raw
            .split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|e| self.err(key, e)))
            .collect()
    }

    fn fixed<const N: usize>(&self, key: &str) -> Result<[f64; N]> {
        let v = self.list(key)?;
        v.try_into().map_err(|v: Vec<f64>| self.err(key, format!("expected {N} values, got {}", v.len())))
    }
}

/// Parses config text on top of the baseline experiment.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut entries: BTreeMap<&'static str, Entry> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        let key = key.trim();
        let canon = canonical(key).ok_or_else(|| Error::Config(format!("line {}: unknown key `{key}`", i + 1)))?;
        if value.trim().is_empty() {
            return Err(Error::Config(format!("line {}: `{key}` has no value", i + 1)));
        }
        if entries.insert(canon, Entry { line: i + 1, raw: value.to_string() }).is_some() {
            return Err(Error::Config(format!("line {}: `{key}` set twice", i + 1)));
        }
    }

    let mut cfg = ExperimentConfig::default();
    let mut rate_values = None;
    for (&key, e) in &entries {
        let p = &mut cfg.params;
        let tol = &mut cfg.tolerances;
        match key {
            "T" => p.horizon = e.scalar(key)?,
            "theta" => p.theta = e.scalar(key)?,
            "r" => rate_values = Some(e.list(key)?),
            "a" => p.stock_base_return = e.scalar(key)?,
            "A" => p.stock_factor_loading = e.scalar(key)?,
            "b" => p.factor_drift = e.scalar(key)?,
            "B" => p.factor_slope = e.scalar(key)?,
            "sigma" => p.stock_vol = e.fixed(key)?,
            "lambda" => p.factor_vol = e.fixed(key)?,
            "v" => p.initial_wealth = e.scalar(key)?,
            "x0" => cfg.x0 = e.scalar(key)?,
            "n_steps" => cfg.n_steps = e.scalar(key)?,
            "ode_refinement" => cfg.ode_refinement = e.scalar(key)?,
            "n_paths" => cfg.n_paths = e.scalar(key)?,
            "seed" => cfg.seed = e.scalar(key)?,
            "perturbations" => cfg.perturbations = e.list(key)?,
            "state_box" => {
                let [lo, hi] = e.fixed(key)?;
                cfg.state_box = (lo, hi);
            }
            "relation_paths" => cfg.relation_paths = e.scalar(key)?,
            "relation_points" => cfg.relation_points = e.scalar(key)?,
            "bsde_paths" => cfg.bsde_paths = e.scalar(key)?,
            "theta_sweep" => cfg.theta_sweep = e.list(key)?,
            "constant_control" => cfg.constant_control = e.scalar(key)?,
            "dump_paths" => cfg.dump_paths = e.scalar(key)?,
            "tol_hjb" => tol.hjb = e.scalar(key)?,
            "tol_adjoint" => tol.adjoint = e.scalar(key)?,
            "tol_comparison" => tol.comparison = e.scalar(key)?,
            "tol_minimum" => tol.minimum = e.scalar(key)?,
            "tol_control" => tol.control = e.scalar(key)?,
            "tol_strict_gap" => tol.strict_gap = e.scalar(key)?,
            _ => unreachable!("key table and match out of sync: {key}"),
        }
    }
    if let Some(values) = rate_values {
        cfg.params.rate = match values.as_slice() {
            [r] => RateCurve::Constant(*r),
            _ => {
                let grid = TimeGrid::new(0.0, cfg.params.horizon, values.len() - 1)
                    .map_err(|e| Error::Config(format!("`r`: {e}")))?;
                RateCurve::Sampled(GridFunction::new(grid, values)?)
            }
        };
    }
    cfg.validate().map_err(|e| match e {
        Error::Config(m) => Error::Config(m),
        other => Error::Config(other.to_string()),
    })?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_baseline() {
        assert_eq!(parse_config("# nothing\n\n").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn case_sensitive_keys() {
        let cfg = parse_config("a = 0.1\nA = 0.3\nb = 0.05\nB = -1.0\n").unwrap();
        assert_eq!(cfg.params.stock_base_return, 0.1);
        assert_eq!(cfg.params.stock_factor_loading, 0.3);
        assert_eq!(cfg.params.factor_drift, 0.05);
        assert_eq!(cfg.params.factor_slope, -1.0);
    }

    #[test]
    fn lists_and_aliases() {
        let cfg = parse_config(
            "sigma = 0.25, 0.05  # stock\nfactor_vol = 0.1,0.1\nperturbations = -0.1, 0.1\nstate_box = -2, 2\nseed = 7\n",
        )
        .unwrap();
        assert_eq!(cfg.params.stock_vol, [0.25, 0.05]);
        assert_eq!(cfg.params.factor_vol, [0.1, 0.1]);
        assert_eq!(cfg.perturbations, vec![-0.1, 0.1]);
        assert_eq!(cfg.state_box, (-2.0, 2.0));
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn rate_scalar_or_curve() {
        let cfg = parse_config("r = 0.03").unwrap();
        assert_eq!(cfg.params.rate, RateCurve::Constant(0.03));
        let cfg = parse_config("T = 2\nr = 0.01, 0.02, 0.03").unwrap();
        assert!((cfg.params.rate.at(1.0).unwrap() - 0.02).abs() < 1e-15);
        assert!((cfg.params.rate.at(1.5).unwrap() - 0.025).abs() < 1e-15);
    }

    #[test]
    fn errors() {
        for bad in [
            "thetaa = 1",
            "theta 1",
            "theta = ",
            "theta = one",
            "theta = 1\ntheta = 2",
            "theta = 1\n# fine\nhorizon = 1\nT = 1",
            "sigma = 0.3",
            "n_paths = -5",
            "perturbations = 0.1, 0",
            "v = -1",
        ] {
            assert!(matches!(parse_config(bad), Err(Error::Config(_))), "{bad}");
        }
        let msg = parse_config("theta = 1\nthetaa = 1").unwrap_err().to_string();
        assert!(msg.contains("line 2") && msg.contains("thetaa"), "{msg}");
    }

    #[test]
    fn key_table_is_complete() {
        // Every canonical key must be handled by the match above.
        for names in KEYS {
            let value = match names[0] {
                "sigma" | "lambda" | "state_box" => "0.1, 0.2",
                "n_steps" | "ode_refinement" | "seed" | "relation_paths" | "relation_points" | "dump_paths" => "3",
                "n_paths" | "bsde_paths" => "5000",
                _ => "0.5",
            };
            let r = parse_config(&format!("{} = {value}", names[0]));
            assert!(!matches!(&r, Err(Error::Config(m)) if m.contains("unknown")), "{}", names[0]);
        }
    }
}
