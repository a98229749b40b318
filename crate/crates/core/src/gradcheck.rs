//! Finite-difference verification of tape gradients in 64-bit precision.
//!
//! A check builds the same scalar function twice per sampled coordinate
//! (once nudged up, once down) and compares the central difference with the
//! analytic gradient. Coordinates where the function is visibly
//! non-differentiable, detected by disagreeing one-sided differences, are
//! skipped rather than counted as failures.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub step: f64,
    pub rel_tol: f64,
    /// Fraction of checked coordinates that must agree.
    pub min_pass_fraction: f64,
    /// Coordinates sampled per tensor; smaller tensors are checked fully.
    pub max_coords_per_tensor: usize,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            rel_tol: 1e-2,
            min_pass_fraction: 0.95,
            max_coords_per_tensor: 24,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct CheckReport {
    pub checked: usize,
    pub passed: usize,
    pub skipped_kinks: usize,
    pub worst_rel_err: f64,
    /// Up to a handful of failing coordinates, for diagnostics.
    pub failures: Vec<String>,
}

impl CheckReport {
    pub fn pass_fraction(&self) -> f64 {
        if self.checked == 0 {
            1.0
        } else {
            self.passed as f64 / self.checked as f64
        }
    }

    pub fn ok(&self, opts: &CheckOptions) -> bool {
        self.checked > 0 && self.pass_fraction() >= opts.min_pass_fraction
    }
}

/// Relative error with the `1e-6` floor on the reference magnitude.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (numeric.abs() + 1e-6)
}

/// Checks the gradient of `f` with respect to every input tensor and every
/// parameter of `store`.
pub fn check<F>(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    opts: &CheckOptions,
    f: F,
) -> Result<CheckReport>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new(store);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut g = Graph::new(store);
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.input_with_grad(t.clone()))
        .collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let f0 = g.value(loss).data()[0];

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = CheckReport::default();
    let record = |report: &mut CheckReport, what: String, analytic: f64, up: f64, down: f64| {
        let h = opts.step;
        let central = (up - down) / (2.0 * h);
        let forward = (up - f0) / h;
        let backward = (f0 - down) / h;
        let scale = central.abs().max(analytic.abs()) + 1e-6;
        if (forward - backward).abs() > 0.1 * scale + 1e-4 {
            report.skipped_kinks += 1;
            return;
        }
        let e = rel_err(analytic, central);
        report.checked += 1;
        report.worst_rel_err = report.worst_rel_err.max(e);
        if e <= opts.rel_tol {
            report.passed += 1;
        } else if report.failures.len() < 8 {
            report.failures.push(format!(
                "{what}: analytic {analytic:.6e}, numeric {central:.6e}"
            ));
        }
    };

    for (t, (input, &var)) in inputs.iter().zip(&vars).enumerate() {
        let zeros = Tensor::zeros(input.shape());
        let analytic = grads.wrt(var).unwrap_or(&zeros);
        for i in coords(input.len(), opts.max_coords_per_tensor, &mut rng) {
            let mut nudged = inputs.to_vec();
            nudged[t].data_mut()[i] += opts.step;
            let up = eval(store, &nudged)?;
            nudged[t].data_mut()[i] -= 2.0 * opts.step;
            let down = eval(store, &nudged)?;
            record(
                &mut report,
                format!("input {t}[{i}]"),
                analytic.data()[i],
                up,
                down,
            );
        }
    }

    let mut accumulated = store.clone();
    accumulated.zero_grad();
    accumulated.accumulate(&grads);
    let mut nudged = store.clone();
    for (id, p) in accumulated.iter() {
        for i in coords(p.value.len(), opts.max_coords_per_tensor, &mut rng) {
            let orig = nudged.get(id).value.data()[i];
            nudged.get_mut(id).value.data_mut()[i] = orig + opts.step;
            let up = eval(&nudged, inputs)?;
            nudged.get_mut(id).value.data_mut()[i] = orig - opts.step;
            let down = eval(&nudged, inputs)?;
            nudged.get_mut(id).value.data_mut()[i] = orig;
            record(
                &mut report,
                format!("{}[{i}]", p.name),
                p.grad.data()[i],
                up,
                down,
            );
        }
    }
    Ok(report)
}

fn coords(n: usize, max: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= max {
        (0..n).collect()
    } else {
        let mut v = sample(rng, n, max).into_vec();
        v.sort_unstable();
        v
    }
}
