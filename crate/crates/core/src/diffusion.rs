//! Forward masking process and the 1/t-weighted masked cross-entropy
//! objective.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Logits, ModelParams, PackedBatch, Scalar};
use crate::tokenization::{TokenId, MASK};

/// Masking probability `t` in (0, 1].
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct NoiseLevel(f64);

impl NoiseLevel {
    pub fn new(t: f64) -> Result<Self> {
        if t > 0.0 && t <= 1.0 {
            Ok(NoiseLevel(t))
        } else {
            Err(Error::InvalidNoiseLevel(t))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// One corrupted sequence. Positions before `prompt_len` are never masked.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedRow {
    pub inputs: Vec<TokenId>,
    pub targets: Vec<TokenId>,
    pub mask: Vec<bool>,
    pub t: NoiseLevel,
    pub prompt_len: usize,
}

impl MaskedRow {
    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Replaces each response position independently with MASK with probability
/// `t`; the prompt prefix is left untouched.
pub fn mask_forward<R: Rng + ?Sized>(
    seq: &[TokenId],
    prompt_len: usize,
    t: NoiseLevel,
    rng: &mut R,
) -> Result<MaskedRow> {
    if prompt_len >= seq.len() {
        return Err(Error::InvalidMasking(format!(
            "prompt length {prompt_len} leaves no response in a sequence of {}",
            seq.len()
        )));
    }
    let mut inputs = seq.to_vec();
    let mut mask = vec![false; seq.len()];
    for i in prompt_len..seq.len() {
        // t = 1 masks unconditionally: random::<f64>() is in [0, 1).
        if rng.random::<f64>() < t.value() {
            inputs[i] = MASK;
            mask[i] = true;
        }
    }
    Ok(MaskedRow {
        inputs,
        targets: seq.to_vec(),
        mask,
        t,
        prompt_len,
    })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MaskedBatch {
    pub rows: Vec<MaskedRow>,
}

impl MaskedBatch {
    pub fn new(rows: Vec<MaskedRow>) -> Self {
        MaskedBatch { rows }
    }

    pub fn packed_inputs(&self) -> PackedBatch {
        PackedBatch::from_seqs(&self.rows.iter().map(|r| &r.inputs).collect::<Vec<_>>())
    }

    /// (packed row, sequence index, target) for every masked position.
    fn masked_positions(&self) -> Vec<(usize, usize, TokenId)> {
        let mut out = Vec::new();
        let mut offset = 0;
        for (s, row) in self.rows.iter().enumerate() {
            for (i, &m) in row.mask.iter().enumerate() {
                if m {
                    out.push((offset + i, s, row.targets[i]));
                }
            }
            offset += row.inputs.len();
        }
        out
    }
}

fn cross_entropy<T: Scalar>(z: &[T], target: TokenId) -> f64 {
    let max = z.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|x| (x.as_f64() - max).exp()).sum::<f64>().ln();
    lse - z[target as usize].as_f64()
}

/// Mean over sequences of `(1/t) · Σ_masked CE(target | logits)`, given full
/// per-sequence logits.
pub fn mdm_loss<T: Scalar>(logits: &[Logits<T>], batch: &MaskedBatch) -> f64 {
    assert_eq!(logits.len(), batch.rows.len(), "one logits block per sequence");
    if batch.rows.is_empty() {
        return 0.0;
    }
    let total: f64 = batch
        .rows
        .iter()
        .zip(logits)
        .map(|(row, lg)| {
            let ce: f64 = row
                .mask
                .iter()
                .enumerate()
                .filter(|(_, &m)| m)
                .map(|(i, _)| cross_entropy(lg.row(i), row.targets[i]))
                .sum();
            ce / row.t.value()
        })
        .sum();
    total / batch.rows.len() as f64
}

/// Loss and parameter gradient. Logits are only computed at masked positions.
pub fn loss_and_grad<T: Scalar>(
    params: &ModelParams<T>,
    batch: &MaskedBatch,
) -> Result<(f64, ModelParams<T>)> {
    let packed = batch.packed_inputs();
    let positions = batch.masked_positions();
    let rows: Vec<usize> = positions.iter().map(|p| p.0).collect();
    let (logits, cache) = params.forward(&packed, &rows)?;
    let b = batch.rows.len().max(1) as f64;
    let v = logits.vocab;
    let mut dlogits = vec![T::zero(); logits.data.len()];
    let mut loss = 0.0;
    for (i, &(_, s, target)) in positions.iter().enumerate() {
        let z = logits.row(i);
        let weight = 1.0 / (batch.rows[s].t.value() * b);
        loss += cross_entropy(z, target) * weight;
        let max = z.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = z.iter().map(|x| (x.as_f64() - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let dz = &mut dlogits[i * v..(i + 1) * v];
        for (j, e) in exps.iter().enumerate() {
            let onehot = if j == target as usize { 1.0 } else { 0.0 };
            dz[j] = T::from_f64((e / sum - onehot) * weight);
        }
    }
    let grads = params.backward(&cache, &dlogits);
    Ok((loss, grads))
}

/// Mean cross-entropy per masked token (no 1/t weighting).
pub fn mean_token_cross_entropy<T: Scalar>(
    params: &ModelParams<T>,
    batch: &MaskedBatch,
) -> Result<f64> {
    let packed = batch.packed_inputs();
    let positions = batch.masked_positions();
    if positions.is_empty() {
        return Ok(0.0);
    }
    let rows: Vec<usize> = positions.iter().map(|p| p.0).collect();
    let (logits, _) = params.forward(&packed, &rows)?;
    let total: f64 = positions
        .iter()
        .enumerate()
        .map(|(i, &(_, _, target))| cross_entropy(logits.row(i), target))
        .sum();
    Ok(total / positions.len() as f64)
}
