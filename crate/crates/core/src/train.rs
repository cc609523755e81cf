//! Minibatch training of the masked diffusion objective with Adam.

use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{loss_and_grad, mask_forward, MaskedBatch, NoiseLevel};
use crate::error::{Error, Result};
use crate::nn::ModelParams;
use crate::tokenization::{TokenId, EOS, SEP};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub steps: usize,
    /// Lower bound on the sampled noise level, bounding the 1/t weight.
    pub t_floor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Each response gets between 0 and this many trailing EOS tokens.
    pub max_eos_tail: usize,
    pub ema_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            warmup_steps: 100,
            batch_size: 64,
            steps: 5000,
            t_floor: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            max_eos_tail: 32,
            ema_decay: 0.98,
            seed: 0,
        }
    }
}

/// An instruction example: `prompt ⊕ SEP` is the fixed prefix, `response`
/// the target. Training appends a random-length EOS tail to the response.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingSequence {
    pub prompt: Vec<TokenId>,
    pub response: Vec<TokenId>,
}

impl TrainingSequence {
    pub fn prefix_len(&self) -> usize {
        self.prompt.len() + 1
    }

    pub fn padded(&self, response_len: usize) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(self.prefix_len() + response_len);
        out.extend_from_slice(&self.prompt);
        out.push(SEP);
        out.extend_from_slice(&self.response);
        out.resize(self.prefix_len() + response_len.max(self.response.len()), EOS);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: usize,
    pub m: ModelParams<f32>,
    pub v: ModelParams<f32>,
}

impl AdamState {
    pub fn new(params: &ModelParams<f32>) -> Self {
        AdamState {
            step: 0,
            m: ModelParams::zeros(params.config),
            v: ModelParams::zeros(params.config),
        }
    }

    pub fn update(
        &mut self,
        params: &mut ModelParams<f32>,
        grads: &ModelParams<f32>,
        lr: f64,
        cfg: &TrainConfig,
    ) {
        self.step += 1;
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        let step_size = (lr * bc2.sqrt() / bc1) as f32;
        let eps = (cfg.adam_eps * bc2.sqrt()) as f32;
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= step_size * m[i] / (v[i].sqrt() + eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub moving_average: f64,
}

fn learning_rate(cfg: &TrainConfig, step: usize) -> f64 {
    if cfg.warmup_steps == 0 {
        cfg.learning_rate
    } else {
        cfg.learning_rate * ((step + 1) as f64 / cfg.warmup_steps as f64).min(1.0)
    }
}

fn clip_grads(grads: &mut ModelParams<f32>, max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads
        .tensors()
        .iter()
        .flat_map(|t| t.iter())
        .map(|&g| (g as f64) * (g as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = (max_norm / norm) as f32;
        for t in grads.tensors_mut() {
            t.iter_mut().for_each(|g| *g *= scale);
        }
    }
}

/// Draws a minibatch: uniform examples, one `t ~ U(0, 1]` per sequence
/// floored at `t_floor`, and a uniform `0..=max_eos_tail` EOS tail per row.
///
/// Rows keep their own lengths. Padding every row to the batch maximum makes
/// nearly all sequences end at the same offset, and the model then locates
/// fields by counting back from the end, which fails on scaffolds.
pub fn sample_batch<R: Rng>(
    corpus: &[TrainingSequence],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<MaskedBatch> {
    let rows = (0..cfg.batch_size)
        .map(|_| {
            let s = &corpus[rng.random_range(0..corpus.len())];
            let tail = rng.random_range(0..=cfg.max_eos_tail);
            let t = (1.0 - rng.random::<f64>()).max(cfg.t_floor);
            mask_forward(&s.padded(s.response.len() + tail), s.prefix_len(), NoiseLevel::new(t)?, rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MaskedBatch::new(rows))
}

pub struct Trainer {
    pub params: ModelParams<f32>,
    pub optimizer: AdamState,
    pub config: TrainConfig,
    pub trace: Vec<LossRecord>,
    rng: ChaCha8Rng,
    ema: Option<f64>,
}

impl Trainer {
    pub fn new(params: ModelParams<f32>, config: TrainConfig) -> Self {
        let optimizer = AdamState::new(&params);
        Self::resume(params, optimizer, config)
    }

    /// Continues from a saved optimizer state; the step count carries on
    /// from `optimizer.step`.
    pub fn resume(params: ModelParams<f32>, optimizer: AdamState, config: TrainConfig) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ (optimizer.step as u64).rotate_left(32));
        Trainer {
            params,
            optimizer,
            config,
            trace: Vec::new(),
            rng,
            ema: None,
        }
    }

    pub fn step_count(&self) -> usize {
        self.optimizer.step
    }

    pub fn step(&mut self, corpus: &[TrainingSequence]) -> Result<LossRecord> {
        let step = self.optimizer.step;
        let batch = sample_batch(corpus, &self.config, &mut self.rng)?;
        let (loss, mut grads) = loss_and_grad(&self.params, &batch)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        clip_grads(&mut grads, self.config.grad_clip);
        let lr = learning_rate(&self.config, step);
        self.optimizer
            .update(&mut self.params, &grads, lr, &self.config);
        let a = self.config.ema_decay;
        let ema = match self.ema {
            None => loss,
            Some(prev) => a * prev + (1.0 - a) * loss,
        };
        self.ema = Some(ema);
        let record = LossRecord {
            step: step + 1,
            loss,
            moving_average: ema,
        };
        self.trace.push(record);
        Ok(record)
    }

    /// Runs until the optimizer has taken `config.steps` steps in total.
    pub fn run(
        &mut self,
        corpus: &[TrainingSequence],
        mut on_step: impl FnMut(&LossRecord),
    ) -> Result<()> {
        if corpus.is_empty() {
            return Err(Error::Config("training corpus is empty".into()));
        }
        while self.optimizer.step < self.config.steps {
            let record = self.step(corpus)?;
            on_step(&record);
        }
        Ok(())
    }
}

/// Trains fresh parameters and returns them with the loss trace.
pub fn train(
    params: ModelParams<f32>,
    corpus: &[TrainingSequence],
    config: &TrainConfig,
) -> Result<(ModelParams<f32>, Vec<LossRecord>)> {
    let mut trainer = Trainer::new(params, config.clone());
    trainer.run(corpus, |_| {})?;
    Ok((trainer.params, trainer.trace))
}

pub fn write_loss_csv(path: &Path, trace: &[LossRecord], append: bool) -> Result<()> {
    let file = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let fresh = !append || file.metadata().map(|m| m.len() == 0).unwrap_or(true);
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    if fresh {
        writeln!(w, "step,loss,moving_average").map_err(io)?;
    }
    for r in trace {
        writeln!(w, "{},{},{}", r.step, r.loss, r.moving_average).map_err(io)?;
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ModelConfig;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 16,
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            d_ff: 32,
            max_len: 48,
        }
    }

    fn corpus() -> Vec<TrainingSequence> {
        vec![
            TrainingSequence {
                prompt: vec![5, 6, 7],
                response: vec![8, 9, 10, 11],
            },
            TrainingSequence {
                prompt: vec![6, 5],
                response: vec![12, 13],
            },
        ]
    }

    #[test]
    fn padding_uses_eos() {
        let s = &corpus()[1];
        assert_eq!(s.padded(4), vec![6, 5, SEP, 12, 13, EOS, EOS]);
        assert_eq!(s.prefix_len(), 3);
    }

    #[test]
    fn batches_respect_floor_and_prefix() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tc = TrainConfig {
            batch_size: 50,
            t_floor: 0.3,
            ..TrainConfig::default()
        };
        let batch = sample_batch(&corpus(), &tc, &mut rng).unwrap();
        for row in &batch.rows {
            assert!(row.t.value() >= 0.3);
            assert!(row.mask[..row.prompt_len].iter().all(|&m| !m));
            let resp = row.inputs.len() - row.prompt_len;
            assert!(resp >= 2 && resp <= 4 + tc.max_eos_tail);
        }
    }

    #[test]
    fn fixed_seed_gives_identical_trace() {
        let tc = TrainConfig {
            steps: 5,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let p = ModelParams::init(cfg(), 1).unwrap();
        let (pa, ta) = train(p.clone(), &corpus(), &tc).unwrap();
        let (pb, tb) = train(p, &corpus(), &tc).unwrap();
        assert_eq!(ta, tb);
        assert_eq!(pa, pb);
    }

    #[test]
    fn nan_parameters_abort_with_step() {
        let mut p = ModelParams::init(cfg(), 1).unwrap();
        p.out_bias[3] = f32::NAN;
        let tc = TrainConfig {
            steps: 3,
            batch_size: 2,
            ..TrainConfig::default()
        };
        match train(p, &corpus(), &tc) {
            Err(Error::Diverged { step, .. }) => assert_eq!(step, 0),
            other => panic!("expected divergence, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn resume_continues_step_count() {
        let tc = TrainConfig {
            steps: 3,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(ModelParams::init(cfg(), 1).unwrap(), tc.clone());
        t.run(&corpus(), |_| {}).unwrap();
        let mut resumed = Trainer::resume(
            t.params.clone(),
            t.optimizer.clone(),
            TrainConfig { steps: 5, ..tc },
        );
        resumed.run(&corpus(), |_| {}).unwrap();
        let steps: Vec<usize> = resumed.trace.iter().map(|r| r.step).collect();
        assert_eq!(steps, [4, 5]);
    }
}
