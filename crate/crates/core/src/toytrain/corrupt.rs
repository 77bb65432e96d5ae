//! Masking corruption for the diffusion objective.

use rand::Rng;

use crate::error::{Error, Result};

/// Redraws allowed per sequence before giving up on a non-empty mask.
pub const MAX_MASK_RETRIES: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct CorruptedBatch {
    pub clean: Vec<Vec<u32>>,
    pub corrupted: Vec<Vec<u32>>,
    /// Masked positions per sequence, ascending and never empty.
    pub mask_sets: Vec<Vec<usize>>,
    pub ratios: Vec<f64>,
}

/// Draws `r ~ U(0, 1)` per sequence and masks each position independently
/// with probability `r`, redrawing `(r, M)` whenever `M` comes out empty.
pub fn corrupt<R: Rng>(batch: &[Vec<u32>], mask_id: u32, rng: &mut R) -> Result<CorruptedBatch> {
    corrupt_with(batch, mask_id, rng, |rng| rng.random::<f64>())
}

/// [`corrupt`] with the masking ratio taken from `ratio` on every draw.
pub fn corrupt_with<R: Rng, F: FnMut(&mut R) -> f64>(
    batch: &[Vec<u32>],
    mask_id: u32,
    rng: &mut R,
    mut ratio: F,
) -> Result<CorruptedBatch> {
    let mut out = CorruptedBatch {
        clean: batch.to_vec(),
        corrupted: Vec::with_capacity(batch.len()),
        mask_sets: Vec::with_capacity(batch.len()),
        ratios: Vec::with_capacity(batch.len()),
    };
    for (s, seq) in batch.iter().enumerate() {
        if seq.contains(&mask_id) {
            return Err(Error::Contract(format!("sequence {s} already contains the mask token")));
        }
        let mut drawn = None;
        for _ in 0..MAX_MASK_RETRIES {
            let r = ratio(rng);
            if !(r > 0.0 && r <= 1.0) {
                continue;
            }
            let m: Vec<usize> = (0..seq.len()).filter(|_| rng.random::<f64>() < r).collect();
            if !m.is_empty() {
                drawn = Some((r, m));
                break;
            }
        }
        let (r, m) = drawn.ok_or(Error::Corruption(s))?;
        let mut x = seq.clone();
        for &i in &m {
            x[i] = mask_id;
        }
        out.corrupted.push(x);
        out.mask_sets.push(m);
        out.ratios.push(r);
    }
    Ok(out)
}
