use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::losses::{total_loss_weighted, weighted_value, BatchInputs, Component, ComponentWeights, LossConfig};
use crate::representation::{init_head, HeadDims, HeadParameters};
use crate::seed;

const N: usize = 8;
const DIMS: HeadDims = HeadDims {
    n_concepts: 12,
    d_proj: 6,
    d_contrast: 4,
    n_classes: 3,
};
const STEP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GradCheckOptions {
    pub seed: u64,
    /// Scales every analytic gradient by 1.1 before comparing, to show the
    /// check notices a wrong gradient.
    pub corrupt: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermCheck {
    /// A loss component name, or `total`.
    pub term: String,
    pub max_rel_error: f64,
    /// `(tensor, relative error)` for every parameter tensor.
    pub tensors: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub terms: Vec<TermCheck>,
}

fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-scale..scale))
}

/// Compares analytic and central-difference gradients on a random 8-sample
/// problem, for every loss term on its own and for the configured total.
pub fn check_gradients(cfg: &LossConfig, opts: GradCheckOptions) -> Result<GradCheckReport> {
    cfg.validate()?;
    let mut rng = seed::rng(opts.seed, "gradcheck", 0);
    let mut params = init_head::<f64>(DIMS, seed::derive(opts.seed, "gradcheck-init", 0));
    // default init is tiny; widen it so every term has visible curvature
    for (_, mut t) in params.tensors_mut() {
        t.mapv_inplace(|x| x * 10.0 + rng.random_range(-0.1..0.1));
    }
    params.renormalize_prototypes();
    let z_a = random_matrix(&mut rng, N, DIMS.n_concepts, 3.0);
    let z_b = random_matrix(&mut rng, N, DIMS.n_concepts, 3.0);
    let z_t = random_matrix(&mut rng, N, DIMS.n_concepts, 3.0);
    let labels = [Some(0), Some(1), Some(0), None, Some(2), None, Some(1), None];
    let batch = BatchInputs {
        z_a: z_a.view(),
        z_b: z_b.view(),
        z_teacher: z_t.view(),
        labels: &labels,
    };

    let mut runs: Vec<(String, ComponentWeights)> = Component::ALL
        .iter()
        .map(|&c| (c.name().to_string(), ComponentWeights::only(c)))
        .collect();
    runs.push(("total".into(), ComponentWeights::from_config(cfg)));

    let mut terms = Vec::with_capacity(runs.len());
    for (term, weights) in runs {
        let tensors = compare(&params, &batch, cfg, &weights, opts.corrupt)?;
        let max_rel_error = tensors.iter().map(|(_, e)| *e).fold(0.0, f64::max);
        terms.push(TermCheck {
            term,
            max_rel_error,
            tensors,
        });
    }
    let max_rel_error = terms.iter().map(|t| t.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { max_rel_error, terms })
}

fn compare(
    params: &HeadParameters<f64>,
    batch: &BatchInputs<'_, f64>,
    cfg: &LossConfig,
    weights: &ComponentWeights,
    corrupt: bool,
) -> Result<Vec<(String, f64)>> {
    let (_, grads) = total_loss_weighted(params, batch, cfg, weights)?;
    let mut out = Vec::new();
    for (ti, (name, analytic)) in grads.tensors().into_iter().enumerate() {
        let mut diff = 0.0;
        let mut norm_a = 0.0;
        let mut norm_n = 0.0;
        for (idx, &a) in analytic.iter().enumerate() {
            let a = if corrupt { a * 1.1 } else { a };
            let probe = |delta: f64| -> Result<f64> {
                let mut q = params.clone();
                let mut tensors = q.tensors_mut();
                *tensors[ti].1.iter_mut().nth(idx).expect("index in range") += delta;
                drop(tensors);
                weighted_value(&q, params, batch, cfg, weights)
            };
            let numeric = (probe(STEP)? - probe(-STEP)?) / (2.0 * STEP);
            diff += (a - numeric).powi(2);
            norm_a += a * a;
            norm_n += numeric * numeric;
        }
        // floor keeps all-zero tensors (terms that never reach them) at zero error
        let scale = norm_a.sqrt().max(norm_n.sqrt()).max(1e-8);
        out.push((name.to_string(), diff.sqrt() / scale));
    }
    Ok(out)
}
