//! Training objectives with exact gradients.
//!
//! Both objectives reduce to a weighted cross-entropy over `(position,
//! target, weight)` triples: AR predicts `x[j+1]` from position `j` with
//! weight `1 / (L - 1)`, diffusion predicts the clean token at each masked
//! position with weight `1 / (r L)`. Batch losses are means over sequences.

use serde::{Deserialize, Serialize};

use super::corrupt::CorruptedBatch;
use super::model::{softmax_in_place, AttnMode, ToyModel};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Ar,
    Diffusion,
}

impl Objective {
    pub fn attn_mode(self) -> AttnMode {
        match self {
            Objective::Ar => AttnMode::Causal,
            Objective::Diffusion => AttnMode::Bidirectional,
        }
    }
}

/// Weighted cross-entropy of one sequence; adds the gradient times
/// `grad_scale` into `grad` when given.
fn weighted_xent<T: Scalar>(
    model: &ToyModel<T>,
    input: &[u32],
    targets: &[(usize, u32, T)],
    grad: Option<(&mut [T], T)>,
) -> Result<T> {
    let v = model.cfg.vocab;
    let cache = model.forward(input);
    let mut loss = T::zero();
    let mut dlogits = grad.as_ref().map(|_| vec![T::zero(); input.len() * v]);
    for &(pos, target, w) in targets {
        if target as usize >= v {
            return Err(Error::Contract(format!("target token {target} outside vocabulary of {v}")));
        }
        let mut probs = cache.logits[pos * v..][..v].to_vec();
        softmax_in_place(&mut probs);
        let row = &cache.logits[pos * v..][..v];
        // log-sum-exp keeps -log p finite when p underflows
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<T>().ln();
        loss = loss + w * (lse - row[target as usize]);
        if let Some(d) = dlogits.as_mut() {
            let dr = &mut d[pos * v..][..v];
            for (k, &pk) in probs.iter().enumerate() {
                dr[k] = dr[k] + w * pk;
            }
            dr[target as usize] = dr[target as usize] - w;
        }
    }
    if let (Some((g, scale)), Some(mut d)) = (grad, dlogits) {
        d.iter_mut().for_each(|x| *x = *x * scale);
        model.backward(&cache, &d, g);
    }
    Ok(loss)
}

fn check_batch<T: Scalar>(model: &ToyModel<T>, seqs: &[Vec<u32>]) -> Result<()> {
    if seqs.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    for s in seqs {
        model.check_sequence(s)?;
    }
    Ok(())
}

fn ar_targets<T: Scalar>(seq: &[u32]) -> Vec<(usize, u32, T)> {
    let w = T::one() / T::of_usize(seq.len() - 1);
    (0..seq.len() - 1).map(|j| (j, seq[j + 1], w)).collect()
}

/// Mean AR loss in nats per predicted token; accumulates its gradient into
/// `grad` when given.
pub fn ar_loss<T: Scalar>(model: &ToyModel<T>, batch: &[Vec<u32>], mut grad: Option<&mut [T]>) -> Result<T> {
    if model.cfg.attn_mode != AttnMode::Causal {
        return Err(Error::Contract("the AR objective requires causal attention".into()));
    }
    check_batch(model, batch)?;
    let inv_b = T::one() / T::of_usize(batch.len());
    let mut total = T::zero();
    for seq in batch {
        let g = grad.as_deref_mut().map(|g| (g, inv_b));
        total = total + weighted_xent(model, seq, &ar_targets(seq), g)?;
    }
    Ok(total * inv_b)
}

/// Mean diffusion loss `(1 / r) sum_{i in M} -log p(x_i | x~) / L`.
pub fn diffusion_loss<T: Scalar>(model: &ToyModel<T>, batch: &CorruptedBatch, mut grad: Option<&mut [T]>) -> Result<T> {
    if model.cfg.attn_mode != AttnMode::Bidirectional {
        return Err(Error::Contract("the diffusion objective requires bidirectional attention".into()));
    }
    check_batch(model, &batch.corrupted)?;
    let inv_b = T::one() / T::of_usize(batch.clean.len());
    let mut total = T::zero();
    for (s, seq) in batch.corrupted.iter().enumerate() {
        let m = &batch.mask_sets[s];
        if m.is_empty() {
            return Err(Error::Contract(format!("sequence {s} has no masked positions")));
        }
        let w = T::one() / (T::of(batch.ratios[s]) * T::of_usize(seq.len()));
        let targets: Vec<(usize, u32, T)> = m.iter().map(|&i| (i, batch.clean[s][i], w)).collect();
        let g = grad.as_deref_mut().map(|g| (g, inv_b));
        total = total + weighted_xent(model, seq, &targets, g)?;
    }
    Ok(total * inv_b)
}

/// Batch for either objective.
#[derive(Debug, Clone, PartialEq)]
pub enum Batch {
    Clean(Vec<Vec<u32>>),
    Corrupted(CorruptedBatch),
}

pub fn batch_loss<T: Scalar>(model: &ToyModel<T>, batch: &Batch, grad: Option<&mut [T]>) -> Result<T> {
    match batch {
        Batch::Clean(b) => ar_loss(model, b, grad),
        Batch::Corrupted(b) => diffusion_loss(model, b, grad),
    }
}

/// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)` over
/// every parameter, with central differences of step `eps`.
pub fn grad_check<T: Scalar>(model: &ToyModel<T>, batch: &Batch, eps: T) -> Result<T> {
    let mut analytic = vec![T::zero(); model.n_params()];
    batch_loss(model, batch, Some(&mut analytic))?;
    let mut probe = model.clone();
    let floor = T::of(1e-8);
    let mut worst = T::zero();
    for i in 0..probe.params.len() {
        let orig = probe.params[i];
        probe.params[i] = orig + eps;
        let up = batch_loss(&probe, batch, None)?;
        probe.params[i] = orig - eps;
        let down = batch_loss(&probe, batch, None)?;
        probe.params[i] = orig;
        let numeric = (up - down) / (eps + eps);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(floor);
        worst = worst.max(err);
    }
    Ok(worst)
}
