use std::collections::HashMap;

use log::warn;
use serde::{Deserialize, Serialize};

use super::covariance::CovarianceSpec;
use super::optimize::{nelder_mead, NelderMeadConfig, Termination};
use super::GpError;
use crate::dense::Matrix;
use crate::distla::{self, DistHandle};
use crate::error::Fault;
use crate::grid::{BlockLayout, ObjectLayout};
use crate::transport::protocol::{Inputs, Side, StoreValue};
use crate::transport::{Cluster, Targets};

/// Everything needed to set up a [`KrigeProblem`].
#[derive(Debug, Clone)]
pub struct ProblemConfig {
    /// Prefix of every distributed object the problem creates.
    pub name: String,
    pub spec: CovarianceSpec,
    pub y: Vec<f64>,
    pub inputs: Inputs,
    /// Number of prediction locations (0 if no predictions are wanted).
    pub n_pred: usize,
    /// Replication factor of the observation dimension; default heuristic
    /// when `None`.
    pub h: Option<usize>,
    /// Replication factor of the prediction dimension.
    pub h_pred: Option<usize>,
}

impl ProblemConfig {
    pub fn new(name: &str, spec: CovarianceSpec, y: Vec<f64>, inputs: Inputs) -> Self {
        ProblemConfig { name: name.to_owned(), spec, y, inputs, n_pred: 0, h: None, h_pred: None }
    }

    pub fn predictions(mut self, m: usize) -> Self {
        self.n_pred = m;
        self
    }

    pub fn replication(mut self, h: Option<usize>, h_pred: Option<usize>) -> Self {
        self.h = h;
        self.h_pred = h_pred;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub mean: Vec<f64>,
    pub se: Option<Vec<f64>>,
}

/// One objective evaluation of a fit. `loglik` is `None` where the
/// covariance was not positive definite or the value was not finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub theta: Vec<f64>,
    pub loglik: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub theta: Vec<f64>,
    pub loglik: f64,
    pub status: Termination,
    pub evaluations: usize,
    pub trace: Vec<TraceEntry>,
}

type Fingerprint = Vec<u64>;

/// A kriging problem whose large objects live on a cluster.
///
/// Derived objects (the covariance factor, the whitened residual, the
/// solved cross-covariance, ...) are rebuilt only when θ has changed since
/// they were last computed.
#[derive(Debug)]
pub struct KrigeProblem {
    name: String,
    spec: CovarianceSpec,
    n: usize,
    m: usize,
    obs: BlockLayout,
    pred: Option<BlockLayout>,
    theta: Option<Vec<f64>>,
    fresh: HashMap<&'static str, Fingerprint>,
    loglik: f64,
    mu: Vec<f64>,
    mu_star: Vec<f64>,
    y_hat: Vec<f64>,
}

impl KrigeProblem {
    /// Sends the inputs and the data to every worker.
    pub fn new(cluster: &mut Cluster, config: ProblemConfig) -> Result<Self, GpError> {
        let n = config.y.len();
        if n == 0 {
            return Err(GpError::DimensionMismatch("no observations".into()));
        }
        if config.y.iter().any(|v| !v.is_finite()) {
            return Err(GpError::InvalidParameters("observations must be finite".into()));
        }
        let obs = distla::block_layout(cluster, n, config.h)?;
        let pred = if config.n_pred > 0 { Some(distla::block_layout(cluster, config.n_pred, config.h_pred)?) } else { None };
        let p = KrigeProblem {
            name: config.name,
            spec: config.spec,
            n,
            m: config.n_pred,
            obs,
            pred,
            theta: None,
            fresh: HashMap::new(),
            loglik: f64::NAN,
            mu: Vec::new(),
            mu_star: Vec::new(),
            y_hat: Vec::new(),
        };
        cluster.push(&p.obj("inputs"), StoreValue::Inputs(config.inputs), &Targets::All)?;
        distla::distribute_vector(cluster, &p.obj("y"), &config.y, obs)?;
        Ok(p)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n_obs(&self) -> usize {
        self.n
    }

    pub fn n_pred(&self) -> usize {
        self.m
    }

    pub fn theta(&self) -> Option<&[f64]> {
        self.theta.as_deref()
    }

    pub fn spec(&self) -> &CovarianceSpec {
        &self.spec
    }

    fn obj(&self, key: &str) -> String {
        format!("{}.{key}", self.name)
    }

    fn inputs(&self) -> String {
        self.obj("inputs")
    }

    fn current(&self) -> Result<&[f64], GpError> {
        self.theta.as_deref().ok_or_else(|| GpError::InvalidParameters("theta has not been set".into()))
    }

    fn fingerprint(&self) -> Fingerprint {
        self.theta.iter().flatten().map(|v| v.to_bits()).collect()
    }

    fn is_fresh(&self, key: &'static str) -> bool {
        self.theta.is_some() && self.fresh.get(key) == Some(&self.fingerprint())
    }

    fn mark(&mut self, key: &'static str) {
        let fp = self.fingerprint();
        self.fresh.insert(key, fp);
    }

    /// Sets θ. Derived objects are invalidated lazily by fingerprint.
    pub fn set_theta(&mut self, theta: &[f64]) -> Result<(), GpError> {
        if theta.len() != self.spec.n_params {
            return Err(GpError::InvalidParameters(format!(
                "expected {} parameters, got {}",
                self.spec.n_params,
                theta.len()
            )));
        }
        if theta.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(GpError::InvalidParameters(format!("parameters must be positive and finite: {theta:?}")));
        }
        self.theta = Some(theta.to_vec());
        Ok(())
    }

    fn pred_layout(&self) -> Result<BlockLayout, GpError> {
        self.pred.ok_or_else(|| GpError::DimensionMismatch("the problem has no prediction locations".into()))
    }

    fn construct(&self, cluster: &mut Cluster, key: &str, layout: ObjectLayout, generator: &str) -> Result<DistHandle, GpError> {
        let theta = self.current()?.to_vec();
        distla::construct_distributed(cluster, &self.obj(key), layout, generator, &theta, Some(&self.inputs()))
            .map_err(|e| GpError::at(&theta, e))
    }

    fn ensure_factor(&mut self, cluster: &mut Cluster) -> Result<(), GpError> {
        if self.is_fresh("L") {
            return Ok(());
        }
        let theta = self.current()?.to_vec();
        self.fresh.remove("L");
        let l = self.obj("L");
        self.construct(cluster, "L", ObjectLayout::triangular(self.obs), &self.spec.cov.clone())?;
        distla::distributed_cholesky(cluster, &l, &l).map_err(|e| GpError::at(&theta, e))?;
        self.mark("L");
        Ok(())
    }

    fn ensure_mean(&mut self, cluster: &mut Cluster) -> Result<(), GpError> {
        if self.is_fresh("mu") {
            return Ok(());
        }
        self.construct(cluster, "mu", ObjectLayout::vector(self.obs), &self.spec.mean.clone())?;
        self.mu = distla::collect_vector(cluster, &self.obj("mu"))?;
        self.mark("mu");
        Ok(())
    }

    /// `u = L^{-1} (y - mu)`.
    fn ensure_whitened(&mut self, cluster: &mut Cluster) -> Result<(), GpError> {
        if self.is_fresh("u") {
            return Ok(());
        }
        self.ensure_factor(cluster)?;
        self.ensure_mean(cluster)?;
        let (y, mu, r, u, l) = (self.obj("y"), self.obj("mu"), self.obj("r"), self.obj("u"), self.obj("L"));
        cluster.remote_apply("subtract", &[&y, &mu], &r)?;
        distla::triangular_solve(cluster, &l, &r, &u, Side::Forward)?;
        cluster.remote_rm(&r, &Targets::All)?;
        self.mark("u");
        Ok(())
    }

    /// Log-likelihood at `theta`:
    /// `-(n/2) log 2π - Σ log L_ii - ||u||² / 2`.
    pub fn log_density(&mut self, cluster: &mut Cluster, theta: &[f64]) -> Result<f64, GpError> {
        self.set_theta(theta)?;
        if self.is_fresh("loglik") {
            return Ok(self.loglik);
        }
        self.ensure_whitened(cluster)?;
        let log_det = distla::log_det_from_chol(cluster, &self.obj("L"))?;
        let ss = distla::sum_of_squares(cluster, &self.obj("u"))?;
        self.loglik = -0.5 * self.n as f64 * (2.0 * std::f64::consts::PI).ln() - 0.5 * log_det - 0.5 * ss;
        self.mark("loglik");
        Ok(self.loglik)
    }

    /// Maximizes the log-likelihood from `theta0` by Nelder-Mead on log θ.
    /// Points where the covariance is not positive definite are treated as
    /// infeasible during the search; at `theta0` they are an error.
    pub fn optimize_log_dens(
        &mut self,
        cluster: &mut Cluster,
        theta0: &[f64],
        config: &NelderMeadConfig,
    ) -> Result<FitResult, GpError> {
        let l0 = self.log_density(cluster, theta0)?;
        if !l0.is_finite() {
            return Err(GpError::NonFiniteObjective { theta: theta0.to_vec() });
        }
        let mut trace = vec![TraceEntry { theta: theta0.to_vec(), loglik: Some(l0) }];
        let x0: Vec<f64> = theta0.iter().map(|v| v.ln()).collect();
        let mut first = true;
        let objective = |x: &[f64]| -> Result<f64, GpError> {
            let theta: Vec<f64> = x.iter().map(|v| v.exp()).collect();
            if first {
                // Already evaluated above.
                first = false;
                return Ok(-l0);
            }
            let value = match self.log_density(cluster, &theta) {
                Ok(l) if l.is_finite() => Some(l),
                Ok(_) => None,
                Err(e) if infeasible(&e) => None,
                Err(e) => return Err(e),
            };
            trace.push(TraceEntry { theta, loglik: value });
            Ok(value.map_or(f64::INFINITY, |l| -l))
        };
        let best = nelder_mead(objective, &x0, config)?;
        let theta: Vec<f64> = best.x.iter().map(|v| v.exp()).collect();
        let loglik = self.log_density(cluster, &theta)?;
        Ok(FitResult { theta, loglik, status: best.termination, evaluations: best.evaluations, trace })
    }

    /// `V = L^{-1} C_*`.
    fn ensure_solved_cross(&mut self, cluster: &mut Cluster) -> Result<(), GpError> {
        if self.is_fresh("V") {
            return Ok(());
        }
        let pred = self.pred_layout()?;
        self.ensure_factor(cluster)?;
        let (cs, v, l) = (self.obj("Cs"), self.obj("V"), self.obj("L"));
        self.construct(cluster, "Cs", ObjectLayout::rectangular(self.obs, pred), &self.spec.cross_cov.clone())?;
        distla::triangular_solve(cluster, &l, &cs, &v, Side::Forward)?;
        cluster.remote_rm(&cs, &Targets::All)?;
        self.mark("V");
        Ok(())
    }

    fn ensure_prediction_mean(&mut self, cluster: &mut Cluster) -> Result<(), GpError> {
        if self.is_fresh("yhat") {
            return Ok(());
        }
        let pred = self.pred_layout()?;
        self.ensure_whitened(cluster)?;
        self.ensure_solved_cross(cluster)?;
        self.construct(cluster, "mus", ObjectLayout::vector(pred), &self.spec.pred_mean.clone())?;
        self.mu_star = distla::collect_vector(cluster, &self.obj("mus"))?;
        let (v, u, vu) = (self.obj("V"), self.obj("u"), self.obj("Vu"));
        distla::crossprod_mat_vec(cluster, &v, &u, &vu)?;
        let vu_local = distla::collect_vector(cluster, &vu)?;
        self.y_hat = self.mu_star.iter().zip(&vu_local).map(|(a, b)| a + b).collect();
        self.mark("yhat");
        Ok(())
    }

    /// Kriging predictor `mu_* + V^T u` and, if asked, its standard errors
    /// `sqrt(diag(C_**) - diag(V^T V))`.
    pub fn predict(&mut self, cluster: &mut Cluster, se_fit: bool) -> Result<Prediction, GpError> {
        self.ensure_prediction_mean(cluster)?;
        let se = if se_fit { Some(self.standard_errors(cluster)?) } else { None };
        Ok(Prediction { mean: self.y_hat.clone(), se })
    }

    fn standard_errors(&mut self, cluster: &mut Cluster) -> Result<Vec<f64>, GpError> {
        let pred = self.pred_layout()?;
        let prior = match self.spec.pred_var.clone() {
            Some(g) => {
                self.construct(cluster, "pvar", ObjectLayout::vector(pred), &g)?;
                distla::collect_vector(cluster, &self.obj("pvar"))?
            }
            None => {
                self.construct(cluster, "Cpp", ObjectLayout::triangular(pred), &self.spec.pred_cov.clone())?;
                distla::collect_diagonal(cluster, &self.obj("Cpp"))?
            }
        };
        let (v, vvd) = (self.obj("V"), self.obj("VVd"));
        distla::crossprod_self_diag(cluster, &v, &vvd)?;
        let explained = distla::collect_vector(cluster, &vvd)?;
        let mut clamped = 0;
        let se = prior
            .iter()
            .zip(&explained)
            .map(|(p, e)| {
                let var = p - e;
                if var < 0.0 {
                    clamped += 1;
                    0.0
                } else {
                    var.sqrt()
                }
            })
            .collect();
        if clamped > 0 {
            warn!("{clamped} prediction variance(s) negative from round-off; set to zero");
        }
        Ok(se)
    }

    /// `Σ_* = C_** - V^T V`, kept distributed.
    fn ensure_posterior_cov(&mut self, cluster: &mut Cluster) -> Result<(), GpError> {
        if self.is_fresh("Sigma") {
            return Ok(());
        }
        let pred = self.pred_layout()?;
        self.ensure_solved_cross(cluster)?;
        self.construct(cluster, "Cpp", ObjectLayout::triangular(pred), &self.spec.pred_cov.clone())?;
        let (cpp, v, vv, sigma) = (self.obj("Cpp"), self.obj("V"), self.obj("VV"), self.obj("Sigma"));
        distla::crossprod_self(cluster, &v, &vv)?;
        cluster.remote_apply("subtract", &[&cpp, &vv], &sigma)?;
        cluster.remote_rm(&vv, &Targets::All)?;
        self.mark("Sigma");
        Ok(())
    }

    /// The posterior covariance of the prediction locations, lower part
    /// (the strict upper triangle is zero).
    pub fn prediction_variance(&mut self, cluster: &mut Cluster) -> Result<Matrix, GpError> {
        self.ensure_posterior_cov(cluster)?;
        Ok(distla::collect_triangular(cluster, &self.obj("Sigma"))?)
    }

    /// `r` draws from the prior (`post = false`, one column per draw over
    /// the observation locations) or from the posterior at the prediction
    /// locations (`post = true`).
    pub fn simulate_realizations(&mut self, cluster: &mut Cluster, r: usize, post: bool) -> Result<Matrix, GpError> {
        self.simulate(cluster, r, post, false)
    }

    /// As [`simulate_realizations`](Self::simulate_realizations) with every
    /// normal deviate replaced by zero, so the result is the mean repeated.
    #[doc(hidden)]
    pub fn simulate_without_noise(&mut self, cluster: &mut Cluster, r: usize, post: bool) -> Result<Matrix, GpError> {
        self.simulate(cluster, r, post, true)
    }

    fn simulate(&mut self, cluster: &mut Cluster, r: usize, post: bool, zero: bool) -> Result<Matrix, GpError> {
        if r == 0 {
            return Err(GpError::DimensionMismatch("at least one realization is needed".into()));
        }
        let theta = self.current()?.to_vec();
        let (rows, factor, mean) = if post {
            self.ensure_prediction_mean(cluster)?;
            self.ensure_posterior_cov(cluster)?;
            if !self.is_fresh("SigmaL") {
                let (s, sl) = (self.obj("Sigma"), self.obj("SigmaL"));
                distla::distributed_cholesky(cluster, &s, &sl).map_err(|e| GpError::at(&theta, e))?;
                self.mark("SigmaL");
            }
            (self.pred_layout()?, self.obj("SigmaL"), self.y_hat.clone())
        } else {
            self.ensure_factor(cluster)?;
            self.ensure_mean(cluster)?;
            (self.obs, self.obj("L"), self.mu.clone())
        };
        let cols = distla::block_layout(cluster, r, None)?;
        let layout = ObjectLayout::rectangular(rows, cols);
        let (z, lz) = (self.obj("Z"), self.obj("LZ"));
        if zero {
            distla::construct_zeros_distributed(cluster, &z, layout)?;
        } else {
            distla::construct_rnorm_distributed(cluster, &z, layout)?;
        }
        distla::mult_chol(cluster, &factor, &z, &lz)?;
        let mut out = distla::collect_matrix(cluster, &lz)?;
        cluster.remote_rm(&z, &Targets::All)?;
        cluster.remote_rm(&lz, &Targets::All)?;
        for c in 0..r {
            for (i, m) in mean.iter().enumerate() {
                out[(i, c)] += m;
            }
        }
        Ok(out)
    }

    /// Removes every object of this problem from the workers.
    pub fn release(self, cluster: &mut Cluster) -> Result<(), GpError> {
        let prefix = format!("{}.", self.name);
        let names = cluster.remote_ls(1)?;
        for n in names.into_iter().filter(|n| n.starts_with(&prefix)) {
            cluster.remote_rm(&n, &Targets::All)?;
        }
        Ok(())
    }
}

/// Errors that mark a point as outside the feasible region during a fit.
fn infeasible(e: &GpError) -> bool {
    match e {
        GpError::NotPositiveDefinite { .. } => true,
        GpError::Cluster(c) => matches!(c.fault(), Some(Fault::Generator(_) | Fault::SingularDiagonal { .. })),
        _ => false,
    }
}
