//! Central finite-difference check of analytic gradients.

use std::fmt;

use super::graph::{Fault, Graph, Var};
use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub rtol: f64,
    pub atol: f64,
    /// Corrupts the analytic pass; negative controls only.
    pub fault: Option<Fault>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        // Small steps make straddling a ReLU kink unlikely; in f64 the
        // round-off of a 1e-6 central difference stays near 1e-10.
        Self {
            eps: 1e-6,
            rtol: 1e-3,
            atol: 1e-6,
            fault: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamDeviation {
    pub name: String,
    pub scalars: usize,
    pub max_abs: f64,
    pub max_rel: f64,
    pub failures: usize,
}

impl ParamDeviation {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub params: Vec<ParamDeviation>,
    /// Trainable scalars in the store.
    pub total_scalars: usize,
    pub options: GradCheckOptions,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(ParamDeviation::passed)
    }

    pub fn checked_scalars(&self) -> usize {
        self.params.iter().map(|p| p.scalars).sum()
    }

    /// Fraction of trainable scalars that were checked.
    pub fn coverage(&self) -> f64 {
        if self.total_scalars == 0 {
            return 1.0;
        }
        self.checked_scalars() as f64 / self.total_scalars as f64
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamDeviation> {
        self.params.iter().filter(|p| !p.passed())
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.params {
            writeln!(
                f,
                "{:<48} n={:<6} max_abs={:.3e} max_rel={:.3e} {}",
                p.name,
                p.scalars,
                p.max_abs,
                p.max_rel,
                if p.passed() { "ok" } else { "FAIL" }
            )?;
        }
        write!(
            f,
            "checked {}/{} scalars ({:.1}%), {}",
            self.checked_scalars(),
            self.total_scalars,
            100.0 * self.coverage(),
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// Compares the analytic gradient of `objective` with central differences
/// `(f(θ+ε) − f(θ−ε)) / 2ε`, one trainable scalar at a time.
///
/// The objective must be deterministic at fixed parameters; it is evaluated
/// twice up front and any bitwise difference is reported as
/// [`Error::OracleInvalid`].
pub fn grad_check<F>(store: &mut ParamStore, objective: F, opts: GradCheckOptions) -> Result<GradReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let loss = objective(&mut g, store)?;
        g.value(loss).item()
    };

    let mut g = match opts.fault {
        Some(f) => Graph::with_fault(f),
        None => Graph::new(),
    };
    let loss = objective(&mut g, store)?;
    let base = g.value(loss).item()?;
    let grads = g.backward(loss, store)?;
    drop(g);

    let again = eval(store)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::OracleInvalid(format!("{base:e} then {again:e}")));
    }

    let ids: Vec<_> = store.trainable_ids().collect();
    let mut params = Vec::with_capacity(ids.len());
    for id in ids {
        let analytic = grads.get(id).clone();
        let mut dev = ParamDeviation {
            name: store.name(id).to_string(),
            scalars: analytic.len(),
            max_abs: 0.0,
            max_rel: 0.0,
            failures: 0,
        };
        for i in 0..analytic.len() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + opts.eps;
            let plus = eval(store);
            store.get_mut(id).data_mut()[i] = orig - opts.eps;
            let minus = eval(store);
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * opts.eps);
            let a = analytic.data()[i];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(f64::MIN_POSITIVE);
            dev.max_abs = dev.max_abs.max(abs);
            if abs > opts.atol {
                dev.max_rel = dev.max_rel.max(rel);
            }
            if !(rel <= opts.rtol || abs <= opts.atol) {
                dev.failures += 1;
            }
        }
        params.push(dev);
    }
    Ok(GradReport {
        params,
        total_scalars: store.trainable_count(),
        options: opts,
    })
}
