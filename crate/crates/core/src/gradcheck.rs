//! Central finite-difference check of the analytic joint-loss gradient.

use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::corpus::{QaExample, Vocabulary};
use crate::encoder::Mode;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::objectives::{encode_qa, joint_loss, Batch, LossWeights};
use crate::rng::SeedPath;
use crate::taskgen::{AntonymLexicon, GenConfig, TaskContext};

/// Denominator floor for the relative error. Some gradients are exactly zero
/// (key biases shift every logit of a softmax row equally), and central
/// differences of an O(1) loss at h = 1e-5 carry ~1e-11 of rounding noise, so
/// below this magnitude the check is effectively absolute at 1e-10.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, Serialize)]
pub struct Probe {
    pub tensor: String,
    pub offset: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub samples: usize,
    pub step: f64,
    pub max_rel_error: f64,
    pub worst: Option<Probe>,
    /// Max relative error per tensor.
    pub per_tensor: BTreeMap<String, f64>,
}

impl GradCheckReport {
    pub fn passes(&self, threshold: f64) -> bool {
        self.max_rel_error < threshold
    }
}

/// Copy of `model` with N(0, std^2) noise added to every parameter. At the
/// 0.02-std initialization the attention projections carry gradients near
/// 1e-7, where central differences are dominated by rounding; a generic
/// point keeps every probe well above that floor.
pub fn generic_point(model: &Model, std: f64, seed: u64) -> Model {
    let mut rng = SeedPath::new(seed).with_str("gradcheck-point").rng();
    let normal = Normal::new(0.0, std).expect("std is finite and non-negative");
    let mut out = model.clone();
    for (_, t) in out.named_mut() {
        t.mapv_inplace(|v| v + normal.sample(&mut rng));
    }
    out
}

/// Picks `samples` flat parameter indices: one from every tensor first, the
/// rest uniformly over all parameters.
pub fn sample_indices(model: &Model, samples: usize, seed: u64) -> Vec<usize> {
    let mut rng = SeedPath::new(seed).with_str("gradcheck").rng();
    let sizes: Vec<usize> = model.named().iter().map(|(_, t)| t.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut out = Vec::with_capacity(samples.max(sizes.len()));
    let mut base = 0;
    for &n in &sizes {
        out.push(base + rng.gen_range(0..n));
        base += n;
    }
    while out.len() < samples {
        out.push(rng.gen_range(0..total));
    }
    out
}

/// Compares the analytic gradient of `joint_loss` with central differences
/// at step `h`. `seed` fixes the dropout masks so every evaluation sees the
/// same function.
pub fn check_joint(
    model: &Model,
    batch: &Batch,
    weights: &LossWeights,
    mode: Mode,
    seed: u64,
    samples: usize,
    h: f64,
) -> Result<GradCheckReport> {
    let mut grads = Model::zeros(model.config());
    joint_loss(model, batch, weights, mode, seed, Some(&mut grads))?;

    let mut probe_model = model.clone();
    let mut per_tensor: BTreeMap<String, f64> = BTreeMap::new();
    let mut worst: Option<Probe> = None;
    let indices = sample_indices(model, samples, seed);
    for &idx in &indices {
        let orig = probe_model.get_flat(idx);
        probe_model.set_flat(idx, orig + h);
        let plus = joint_loss(&probe_model, batch, weights, mode, seed, None)?.total;
        probe_model.set_flat(idx, orig - h);
        let minus = joint_loss(&probe_model, batch, weights, mode, seed, None)?.total;
        probe_model.set_flat(idx, orig);

        let numeric = (plus - minus) / (2.0 * h);
        let analytic = grads.get_flat(idx);
        let rel = relative_error(analytic, numeric);
        let (tensor, offset) = model.locate_flat(idx);
        let entry = per_tensor.entry(tensor.clone()).or_insert(0.0);
        *entry = entry.max(rel);
        if worst.as_ref().is_none_or(|w| rel > w.rel_error) {
            worst = Some(Probe {
                tensor,
                offset,
                analytic,
                numeric,
                rel_error: rel,
            });
        }
    }
    Ok(GradCheckReport {
        samples: indices.len(),
        step: h,
        max_rel_error: worst.as_ref().map_or(0.0, |w| w.rel_error),
        worst,
        per_tensor,
    })
}

/// A batch over `examples` carrying every enabled auxiliary task; fails if
/// some enabled task produced no instance, so the check covers every head.
pub fn probe_batch(
    examples: &[QaExample],
    vocab: &Vocabulary,
    lexicon: &AntonymLexicon,
    gen: &GenConfig,
    seed: u64,
) -> Result<Batch> {
    let (streams, _) = TaskContext::new(vocab, lexicon, gen.clone()).generate(examples, seed)?;
    let mut batch = Batch::default();
    for ex in examples {
        batch.qa.push(encode_qa(ex, vocab, gen.max_len)?);
        if let Some(t) = streams.get(&ex.id) {
            batch.push_tasks(t);
        }
    }
    for task in &gen.tasks {
        if batch.count(*task) == 0 {
            return Err(Error::Config(format!("probe batch has no {task} instance")));
        }
    }
    Ok(batch)
}
