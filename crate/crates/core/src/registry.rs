//! Functions and generators that workers can run by name.
//!
//! Every worker of a cluster holds the same registry. The socket backend
//! always uses [`Registry::builtin`] (worker processes cannot receive code);
//! the in-process backend accepts an extended registry, which is how custom
//! mean and covariance generators are plugged in.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use crate::transport::protocol::Inputs;

/// Entrywise generator of a distributed object. `row` and `col` are 1-based
/// global indices; vectors are evaluated with `col = 1`.
pub trait EntryGenerator: Send + Sync {
    fn entry(&self, params: &[f64], inputs: Option<&Inputs>, row: usize, col: usize) -> Result<f64, String>;
}

impl<F> EntryGenerator for F
where
    F: Fn(&[f64], Option<&Inputs>, usize, usize) -> Result<f64, String> + Send + Sync,
{
    fn entry(&self, params: &[f64], inputs: Option<&Inputs>, row: usize, col: usize) -> Result<f64, String> {
        self(params, inputs, row, col)
    }
}

/// Elementwise function applied by `remote_apply`.
#[derive(Clone)]
pub enum ApplyFn {
    Unary(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
    Binary(Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>),
}

impl ApplyFn {
    pub fn arity(&self) -> usize {
        match self {
            ApplyFn::Unary(_) => 1,
            ApplyFn::Binary(_) => 2,
        }
    }
}

impl fmt::Debug for ApplyFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ApplyFn/{}", self.arity())
    }
}

#[derive(Clone, Default)]
pub struct Registry {
    functions: HashMap<String, ApplyFn>,
    generators: HashMap<String, Arc<dyn EntryGenerator>>,
}

impl fmt::Debug for Registry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut g: Vec<_> = self.generators.keys().collect();
        g.sort();
        f.debug_struct("Registry").field("functions", &self.functions.len()).field("generators", &g).finish()
    }
}

impl Registry {
    /// An empty registry.
    pub fn new() -> Self {
        Self::default()
    }

    /// Arithmetic functions, the `delta` and `zero` generators and the
    /// built-in covariance models.
    pub fn builtin() -> Self {
        let mut r = Registry::new();
        r.register_unary("negate", |x| -x);
        r.register_unary("square", |x| x * x);
        r.register_unary("sqrt", f64::sqrt);
        r.register_binary("add", |a, b| a + b);
        r.register_binary("subtract", |a, b| a - b);
        r.register_binary("multiply", |a, b| a * b);
        r.register_generator("delta", |_: &[f64], _: Option<&Inputs>, i: usize, j: usize| {
            Ok(if i == j { 1.0 } else { 0.0 })
        });
        r.register_generator("zero", |_: &[f64], _: Option<&Inputs>, _: usize, _: usize| Ok(0.0));
        crate::gp::covariance::register_builtin_models(&mut r);
        r
    }

    pub fn register_unary(&mut self, name: &str, f: impl Fn(f64) -> f64 + Send + Sync + 'static) {
        self.functions.insert(name.to_owned(), ApplyFn::Unary(Arc::new(f)));
    }

    pub fn register_binary(&mut self, name: &str, f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static) {
        self.functions.insert(name.to_owned(), ApplyFn::Binary(Arc::new(f)));
    }

    pub fn register_generator(&mut self, name: &str, g: impl EntryGenerator + 'static) {
        self.generators.insert(name.to_owned(), Arc::new(g));
    }

    pub fn register_generator_arc(&mut self, name: &str, g: Arc<dyn EntryGenerator>) {
        self.generators.insert(name.to_owned(), g);
    }

    pub fn function(&self, name: &str) -> Option<&ApplyFn> {
        self.functions.get(name)
    }

    pub fn generator(&self, name: &str) -> Option<&Arc<dyn EntryGenerator>> {
        self.generators.get(name)
    }

    pub fn has_generator(&self, name: &str) -> bool {
        self.generators.contains_key(name)
    }
}
