#![allow(dead_code)]

use mdm_scaffold::diffusion::{loss_and_grad, mask_forward, mdm_loss, MaskedBatch, NoiseLevel};
use mdm_scaffold::nn::{ModelConfig, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct GradCheck {
    pub coordinates: usize,
    pub max_relative_error: f64,
}

/// Compares analytic gradients of the diffusion loss with central finite
/// differences on `coordinates` random parameters of a small f64 model.
pub fn gradient_check(coordinates: usize, seed: u64) -> GradCheck {
    let config = ModelConfig {
        vocab_size: 13,
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        d_ff: 16,
        max_len: 11,
    };
    let mut params = ModelParams::<f64>::init(config, seed).unwrap();
    // larger weights than the default init so every path carries signal
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    for t in params.tensors_mut() {
        for x in t.iter_mut() {
            *x += rng.random_range(-0.3..0.3);
        }
    }
    let seqs: [(Vec<u32>, usize, f64); 3] = [
        (vec![2, 5, 6, 4, 7, 8, 9, 3], 4, 0.6),
        (vec![2, 10, 4, 11, 12], 3, 0.9),
        (vec![2, 5, 7, 9, 11, 4, 6, 8, 10, 12, 3], 6, 0.35),
    ];
    let rows = seqs
        .iter()
        .map(|(s, p, t)| {
            let mut row = mask_forward(s, *p, NoiseLevel::new(*t).unwrap(), &mut rng).unwrap();
            // at least one masked target per sequence
            if row.masked_count() == 0 {
                row.mask[*p] = true;
                row.inputs[*p] = 0;
            }
            row
        })
        .collect();
    let batch = MaskedBatch::new(rows);
    let (_, grads) = loss_and_grad(&params, &batch).unwrap();
    let analytic: Vec<Vec<f64>> = grads.tensors().into_iter().cloned().collect();
    let sizes: Vec<usize> = analytic.iter().map(Vec::len).collect();
    let total: usize = sizes.iter().sum();

    let loss_at = |p: &ModelParams<f64>| {
        let inputs: Vec<&Vec<u32>> = batch.rows.iter().map(|r| &r.inputs).collect();
        mdm_loss(&p.logits(&inputs).unwrap(), &batch)
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..coordinates {
        let mut flat = rng.random_range(0..total);
        let mut tensor = 0;
        while flat >= sizes[tensor] {
            flat -= sizes[tensor];
            tensor += 1;
        }
        let orig = params.tensors()[tensor][flat];
        params.tensors_mut()[tensor][flat] = orig + h;
        let up = loss_at(&params);
        params.tensors_mut()[tensor][flat] = orig - h;
        let down = loss_at(&params);
        params.tensors_mut()[tensor][flat] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[tensor][flat];
        // Finite differences carry ~1e-10 of round-off, so gradients that are
        // exactly zero (e.g. key biases) are compared against a 1e-6 floor.
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    GradCheck {
        coordinates,
        max_relative_error: worst,
    }
}
