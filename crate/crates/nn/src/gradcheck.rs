//! Central finite differences against reverse-mode gradients.

use std::fmt;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Step relative to `max(|x|, 1)`.
    pub rel_step: f64,
    pub tolerance: f64,
    /// Check at most this many coordinates per input (chosen at random).
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            rel_step: 1e-3,
            tolerance: 1e-3,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InputReport {
    pub index: usize,
    pub label: String,
    pub checked: usize,
    /// Coordinates whose one-sided differences disagree by more than the
    /// tolerance: the step crossed a non-differentiable point.
    pub skipped: usize,
    pub max_abs_error: f64,
    pub grad_scale: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub tolerance: f64,
    pub inputs: Vec<InputReport>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|r| r.rel_error).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.inputs.iter().map(|r| r.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.inputs.iter().map(|r| r.skipped).sum()
    }

    /// All errors within tolerance and at most a quarter of coordinates skipped.
    pub fn passed(&self) -> bool {
        let total = self.checked() + self.skipped();
        self.max_rel_error() <= self.tolerance && total > 0 && self.skipped() * 4 <= total
    }

    pub fn with_labels(mut self, labels: &[String]) -> Self {
        for (r, l) in self.inputs.iter_mut().zip(labels) {
            r.label = l.clone();
        }
        self
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "grad check `{}` (tolerance {:.1e}): {}",
            self.name,
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )?;
        writeln!(
            f,
            "  {:<32} {:>8} {:>8} {:>12} {:>12} {:>12}",
            "input", "checked", "skipped", "max_abs_err", "grad_scale", "rel_err"
        )?;
        for r in &self.inputs {
            let label = if r.label.is_empty() {
                format!("#{}", r.index)
            } else {
                r.label.clone()
            };
            writeln!(
                f,
                "  {:<32} {:>8} {:>8} {:>12.3e} {:>12.3e} {:>12.3e}",
                label, r.checked, r.skipped, r.max_abs_error, r.grad_scale, r.rel_error
            )?;
        }
        Ok(())
    }
}

fn evaluate<F>(f: &F, inputs: &[Tensor], weights: &[f64]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out)
        .data()
        .iter()
        .zip(weights)
        .map(|(a, b)| a * b)
        .sum())
}

/// Compares reverse-mode gradients of `f` with central differences. The output
/// of `f` is reduced to a scalar with fixed random weights. `f` must be
/// deterministic (any randomness must be re-seeded per call).
pub fn grad_check<F>(name: &str, inputs: &[Tensor], opts: &GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    let dist = Uniform::new_inclusive(-1.0, 1.0);
    let weights: Vec<f64> = (0..g.value(out).len()).map(|_| dist.sample(&mut rng)).collect();
    let loss = g.weighted_sum(out, weights.clone())?;
    let base = g.value(loss).data()[0];
    let grads = g.backward(loss)?;

    let mut reports = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; input.len()]);
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < input.len() => {
                let mut idx = rand::seq::index::sample(&mut rng, input.len(), m).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..input.len()).collect(),
        };
        let mut numeric = Vec::with_capacity(coords.len());
        for &j in &coords {
            let x0 = input.data()[j];
            let h = opts.rel_step * x0.abs().max(1.0);
            work[i].data_mut()[j] = x0 + h;
            let plus = evaluate(&f, &work, &weights)?;
            work[i].data_mut()[j] = x0 - h;
            let minus = evaluate(&f, &work, &weights)?;
            work[i].data_mut()[j] = x0;
            numeric.push(((plus - minus) / (2.0 * h), (plus - base) / h, (base - minus) / h));
        }
        let scale = coords
            .iter()
            .zip(&numeric)
            .map(|(&j, n)| analytic[j].abs().max(n.0.abs()))
            .fold(0.0, f64::max)
            .max(1e-6 * base.abs().max(1.0));
        let mut r = InputReport {
            index: i,
            label: String::new(),
            checked: 0,
            skipped: 0,
            max_abs_error: 0.0,
            grad_scale: scale,
            rel_error: 0.0,
        };
        for (&j, &(central, fwd, bwd)) in coords.iter().zip(&numeric) {
            if (fwd - bwd).abs() > opts.tolerance * scale {
                r.skipped += 1;
                continue;
            }
            r.checked += 1;
            r.max_abs_error = r.max_abs_error.max((central - analytic[j]).abs());
        }
        r.rel_error = r.max_abs_error / scale;
        reports.push(r);
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        tolerance: opts.tolerance,
        inputs: reports,
    })
}
