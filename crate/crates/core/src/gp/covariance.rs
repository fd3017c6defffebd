//! Covariance models and the entrywise generators built from them.
//!
//! A model is registered as a family of generators named `<kernel>:<role>`
//! with the roles `mean`, `pred-mean`, `cov`, `cross-cov`, `pred-cov` and
//! `pred-var`. Generators read their locations from the problem inputs:
//!
//! * array `x` (n x p): observation locations
//! * array `x_pred` (m x p): prediction locations
//! * scalar `mean`: constant mean, default 0
//! * scalar `nu`: Matérn smoothness, default 0.5
//! * arrays `noise` and `group` (n x 1, optional): per-observation noise
//!   variances and group labels, used by `matern-product-nugget`
//!
//! Built-in kernels and their parameter vectors:
//!
//! | kernel                  | θ                       |
//! |-------------------------|-------------------------|
//! | `sqexp`                 | `[σ², ℓ]`               |
//! | `matern`                | `[σ², ρ]`               |
//! | `matern-nugget`         | `[σ², ρ, τ²]`           |
//! | `matern-product-nugget` | `[σ², ρ₁, ρ₂, τ²]`      |
//! | `white`                 | `[σ²]`                  |
//!
//! Prediction covariances describe the latent process: they never include
//! the nugget or noise terms.

use std::sync::Arc;

use crate::dense::Matrix;
use crate::registry::Registry;
use crate::transport::protocol::Inputs;

use super::GpError;

/// Half-integer Matérn smoothness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Smoothness {
    Half,
    ThreeHalves,
    FiveHalves,
}

impl Smoothness {
    pub fn from_nu(nu: f64) -> Result<Self, GpError> {
        if nu == 0.5 {
            Ok(Smoothness::Half)
        } else if nu == 1.5 {
            Ok(Smoothness::ThreeHalves)
        } else if nu == 2.5 {
            Ok(Smoothness::FiveHalves)
        } else {
            Err(GpError::UnsupportedSmoothness(nu))
        }
    }

    pub fn nu(&self) -> f64 {
        match self {
            Smoothness::Half => 0.5,
            Smoothness::ThreeHalves => 1.5,
            Smoothness::FiveHalves => 2.5,
        }
    }
}

/// Matérn correlation at distance `d` with range `rho`, scaled by
/// `sqrt(2 nu) d / rho`.
pub fn matern_correlation(d: f64, rho: f64, nu: f64) -> Result<f64, GpError> {
    let s = Smoothness::from_nu(nu)?;
    Ok(matern(d, rho, s))
}

pub(crate) fn matern(d: f64, rho: f64, s: Smoothness) -> f64 {
    let t = (2.0 * s.nu()).sqrt() * d / rho;
    match s {
        Smoothness::Half => (-t).exp(),
        Smoothness::ThreeHalves => (1.0 + t) * (-t).exp(),
        Smoothness::FiveHalves => (1.0 + t + t * t / 3.0) * (-t).exp(),
    }
}

/// The generator names of one covariance model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CovarianceSpec {
    pub mean: String,
    pub pred_mean: String,
    pub cov: String,
    pub cross_cov: String,
    pub pred_cov: String,
    /// Diagonal of the prediction covariance. Without it standard errors
    /// are read off the full prediction covariance.
    pub pred_var: Option<String>,
    /// Number of parameters in θ.
    pub n_params: usize,
}

pub const BUILTIN_KERNELS: [&str; 5] = ["sqexp", "matern", "matern-nugget", "matern-product-nugget", "white"];

impl CovarianceSpec {
    /// Generators registered under `<prefix>:<role>`, all six roles present.
    pub fn from_prefix(prefix: &str, n_params: usize) -> Self {
        let g = |role: &str| format!("{prefix}:{role}");
        CovarianceSpec {
            mean: g("mean"),
            pred_mean: g("pred-mean"),
            cov: g("cov"),
            cross_cov: g("cross-cov"),
            pred_cov: g("pred-cov"),
            pred_var: Some(g("pred-var")),
            n_params,
        }
    }

    pub fn builtin(kernel: &str) -> Result<Self, GpError> {
        let n_params = match kernel {
            "sqexp" | "matern" => 2,
            "matern-nugget" => 3,
            "matern-product-nugget" => 4,
            "white" => 1,
            other => return Err(GpError::UnknownKernel(other.to_owned())),
        };
        Ok(Self::from_prefix(kernel, n_params))
    }

    /// Every generator name this model uses.
    pub fn generators(&self) -> Vec<&str> {
        let mut v = vec![&*self.mean, &*self.pred_mean, &*self.cov, &*self.cross_cov, &*self.pred_cov];
        if let Some(p) = &self.pred_var {
            v.push(p);
        }
        v
    }
}

/// Which pair of location sets an entry compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pair {
    ObsObs,
    ObsPred,
    PredPred,
    PredDiag,
}

type KernelFn = fn(&[f64], &Inputs, Pair, usize, usize) -> Result<f64, String>;

fn array<'a>(inputs: &'a Inputs, name: &str) -> Result<&'a Matrix, String> {
    inputs.array(name).ok_or_else(|| format!("input array `{name}` is missing"))
}

fn point(m: &Matrix, i: usize) -> Result<Vec<f64>, String> {
    if i >= m.rows() {
        return Err(format!("location {} out of range ({} rows)", i + 1, m.rows()));
    }
    Ok((0..m.cols()).map(|c| m[(i, c)]).collect())
}

/// 0-based locations of both arguments of a pair.
fn locations(inputs: &Inputs, pair: Pair, i: usize, j: usize) -> Result<(Vec<f64>, Vec<f64>), String> {
    let (a, b, j) = match pair {
        Pair::ObsObs => ("x", "x", j),
        Pair::ObsPred => ("x", "x_pred", j),
        Pair::PredPred => ("x_pred", "x_pred", j),
        Pair::PredDiag => ("x_pred", "x_pred", i),
    };
    Ok((point(array(inputs, a)?, i)?, point(array(inputs, b)?, j)?))
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn smoothness(inputs: &Inputs) -> Result<Smoothness, String> {
    Smoothness::from_nu(inputs.scalar("nu").unwrap_or(0.5)).map_err(|e| e.to_string())
}

fn same_observation(pair: Pair, i: usize, j: usize) -> bool {
    pair == Pair::ObsObs && i == j
}

fn sqexp(theta: &[f64], inputs: &Inputs, pair: Pair, i: usize, j: usize) -> Result<f64, String> {
    let (a, b) = locations(inputs, pair, i, j)?;
    let d = distance(&a, &b);
    Ok(theta[0] * (-0.5 * (d / theta[1]).powi(2)).exp())
}

fn matern_kernel(theta: &[f64], inputs: &Inputs, pair: Pair, i: usize, j: usize) -> Result<f64, String> {
    let (a, b) = locations(inputs, pair, i, j)?;
    Ok(theta[0] * matern(distance(&a, &b), theta[1], smoothness(inputs)?))
}

fn matern_nugget(theta: &[f64], inputs: &Inputs, pair: Pair, i: usize, j: usize) -> Result<f64, String> {
    let base = matern_kernel(theta, inputs, pair, i, j)?;
    Ok(if same_observation(pair, i, j) { base + theta[2] } else { base })
}

/// Product of two one-dimensional Matérn correlations over the two input
/// columns, plus a group effect (or nugget) and per-observation noise.
fn matern_product_nugget(theta: &[f64], inputs: &Inputs, pair: Pair, i: usize, j: usize) -> Result<f64, String> {
    let (a, b) = locations(inputs, pair, i, j)?;
    if a.len() != 2 {
        return Err(format!("matern-product-nugget needs 2 input columns, got {}", a.len()));
    }
    let s = smoothness(inputs)?;
    let mut v = theta[0] * matern((a[0] - b[0]).abs(), theta[1], s) * matern((a[1] - b[1]).abs(), theta[2], s);
    if pair == Pair::ObsObs {
        match inputs.array("group") {
            Some(g) => {
                if g[(i, 0)] == g[(j, 0)] {
                    v += theta[3];
                }
            }
            None => {
                if i == j {
                    v += theta[3];
                }
            }
        }
        if i == j {
            if let Some(noise) = inputs.array("noise") {
                v += noise[(i, 0)];
            }
        }
    }
    Ok(v)
}

fn white(theta: &[f64], _: &Inputs, pair: Pair, i: usize, j: usize) -> Result<f64, String> {
    Ok(match pair {
        Pair::ObsPred => 0.0,
        Pair::PredDiag => theta[0],
        _ if i == j => theta[0],
        _ => 0.0,
    })
}

fn register_model(r: &mut Registry, kernel: &'static str, n_params: usize, f: KernelFn) {
    let mean = |_: &[f64], inputs: Option<&Inputs>, _: usize, _: usize| -> Result<f64, String> {
        Ok(inputs.and_then(|i| i.scalar("mean")).unwrap_or(0.0))
    };
    r.register_generator(&format!("{kernel}:mean"), mean);
    r.register_generator(&format!("{kernel}:pred-mean"), mean);
    for (role, pair) in
        [("cov", Pair::ObsObs), ("cross-cov", Pair::ObsPred), ("pred-cov", Pair::PredPred), ("pred-var", Pair::PredDiag)]
    {
        let g = move |theta: &[f64], inputs: Option<&Inputs>, i: usize, j: usize| -> Result<f64, String> {
            if theta.len() != n_params {
                return Err(format!("{kernel} takes {n_params} parameters, got {}", theta.len()));
            }
            let inputs = inputs.ok_or_else(|| format!("{kernel} needs problem inputs"))?;
            f(theta, inputs, pair, i - 1, j - 1)
        };
        r.register_generator_arc(&format!("{kernel}:{role}"), Arc::new(g));
    }
}

/// Adds the generators of every built-in kernel to `r`.
pub fn register_builtin_models(r: &mut Registry) {
    register_model(r, "sqexp", 2, sqexp);
    register_model(r, "matern", 2, matern_kernel);
    register_model(r, "matern-nugget", 3, matern_nugget);
    register_model(r, "matern-product-nugget", 4, matern_product_nugget);
    register_model(r, "white", 1, white);
}
