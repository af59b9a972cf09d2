use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{mix64, Graph, Precision, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor for the elementwise relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Elements compared.
    pub checked: usize,
    /// Elements skipped because a perturbation flipped a relu input sign,
    /// where the central difference straddles a kink.
    pub skipped_kinks: usize,
    /// `(input, element, analytic, numeric)` at the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_error <= tolerance
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        if self.worst.is_none() || other.max_rel_error > self.max_rel_error {
            self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
            self.worst = other.worst.or(self.worst);
        }
        self.checked += other.checked;
        self.skipped_kinks += other.skipped_kinks;
    }
}

/// Compares the autograd gradient of a scalar function against central
/// differences, in double precision.
pub fn finite_diff_check<F>(f: F, x: &Tensor, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    finite_diff_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(x), step)
}

/// Multi-input variant of [`finite_diff_check`]: every element of every
/// input is perturbed in turn.
pub fn finite_diff_check_many<F>(f: F, inputs: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check_elements(
        f,
        inputs,
        CheckOptions {
            step,
            sample: None,
            dropout_seed: None,
        },
    )
}

/// Extra knobs for [`finite_diff_check_with`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckOptions {
    pub step: f64,
    /// Perturb at most this many elements per input, drawn without
    /// replacement from a stream seeded by the second field.
    pub sample: Option<(usize, u64)>,
    /// Run every evaluation on a training tape with this dropout seed. Each
    /// tape draws the same masks, so the function stays deterministic.
    pub dropout_seed: Option<u64>,
}

pub fn finite_diff_check_with<F>(
    f: F,
    inputs: &[Tensor],
    opts: CheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check_elements(f, inputs, opts)
}

fn check_elements<F>(f: F, inputs: &[Tensor], opts: CheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let step = opts.step;
    if step <= 0.0 {
        return Err(Error::Contract(format!(
            "finite difference step {step} must be > 0"
        )));
    }
    let tape = || match opts.dropout_seed {
        Some(seed) => Graph::training(Precision::F64, seed, 0),
        None => Graph::new(Precision::F64),
    };
    let mut g = tape();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(Error::Contract(
            "gradient check needs a scalar function".into(),
        ));
    }
    g.backward(out)?;
    let base_pattern = g.relu_pattern();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec)
        })
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<(f64, Vec<bool>)> {
        let mut g = tape();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let out = f(&mut g, &vars)?;
        Ok((g.scalar(out), g.relu_pattern()))
    };

    let mut report = GradCheckReport::default();
    let mut work = inputs.to_vec();
    for (i, grads) in analytic.iter().enumerate() {
        let mut elements: Vec<usize> = (0..grads.len()).collect();
        if let Some((k, seed)) = opts.sample {
            if k < elements.len() {
                let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ mix64(i as u64)));
                elements = rand::seq::index::sample(&mut rng, grads.len(), k).into_vec();
                elements.sort_unstable();
            }
        }
        for j in elements {
            let a = grads[j];
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let (plus, p_plus) = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let (minus, p_minus) = eval(&work)?;
            work[i].data_mut()[j] = orig;
            if p_plus != base_pattern || p_minus != base_pattern {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * step);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((i, j, a, numeric));
            }
        }
    }
    Ok(report)
}
