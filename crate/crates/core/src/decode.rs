//! Multi-step confidence-ordered denoising in three modes: free-form
//! baseline, vanilla scaffold, and self-adaptive scaffold.

use std::cell::Cell as Counter;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Logits, ModelParams, PackedBatch};
use crate::scaffold::{compile_scaffold, layout, scaffold_to_initial_state, LayoutCell, PromptContext};
use crate::schema::{FieldKind, Schema};
use crate::synthcorpus::{render_gold_json, Record};
use crate::tokenization::{is_json_punctuation, TokenId, Vocabulary, EOS, MASK, NULL_WORD, SEP};

/// Which tokens a masked position may take.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotClass {
    /// Any non-reserved token, plus EOS (free-form responses).
    Free,
    /// A word inside a JSON string: no reserved or structural tokens.
    Text,
    /// A bare JSON value: a number token or `null`.
    Bare,
}

/// Partially unmasked `prompt ⊕ SEP ⊕ response`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenoiseState {
    pub seq: Vec<TokenId>,
    pub masked: Vec<bool>,
    pub frozen: Vec<bool>,
    pub class: Vec<SlotClass>,
    pub response_start: usize,
    pub step_index: usize,
    pub total_steps: usize,
}

impl DenoiseState {
    pub fn masked_count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn masked_positions(&self) -> Vec<usize> {
        (0..self.seq.len()).filter(|&i| self.masked[i]).collect()
    }

    pub fn response(&self) -> &[TokenId] {
        &self.seq[self.response_start..]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Baseline,
    Scaffold,
    Adaptive,
}

impl DecodeMode {
    pub const ALL: [DecodeMode; 3] = [DecodeMode::Baseline, DecodeMode::Scaffold, DecodeMode::Adaptive];

    pub fn as_str(self) -> &'static str {
        match self {
            DecodeMode::Baseline => "baseline",
            DecodeMode::Scaffold => "scaffold",
            DecodeMode::Adaptive => "adaptive",
        }
    }
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(DecodeMode::Baseline),
            "scaffold" => Ok(DecodeMode::Scaffold),
            "adaptive" => Ok(DecodeMode::Adaptive),
            other => Err(Error::DecodeConfig(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub steps: usize,
    pub baseline_response_len: usize,
    /// Unused at temperature zero; kept so runs are fully specified.
    pub seed: u64,
}

/// Anything that maps a token sequence to logits at chosen positions.
pub trait Predictor {
    fn vocab_size(&self) -> usize;

    fn max_len(&self) -> usize;

    fn predict(&self, seq: &[TokenId], positions: &[usize]) -> Result<Logits<f32>>;
}

impl Predictor for ModelParams<f32> {
    fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn max_len(&self) -> usize {
        self.config.max_len
    }

    fn predict(&self, seq: &[TokenId], positions: &[usize]) -> Result<Logits<f32>> {
        let batch = PackedBatch::from_seqs(&[seq]);
        Ok(self.forward(&batch, positions)?.0)
    }
}

/// Counts forward passes of the wrapped predictor.
pub struct CountingPredictor<'a, P: ?Sized> {
    inner: &'a P,
    calls: Counter<usize>,
}

impl<'a, P: Predictor + ?Sized> CountingPredictor<'a, P> {
    pub fn new(inner: &'a P) -> Self {
        CountingPredictor {
            inner,
            calls: Counter::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }
}

impl<P: Predictor + ?Sized> Predictor for CountingPredictor<'_, P> {
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    fn max_len(&self) -> usize {
        self.inner.max_len()
    }

    fn predict(&self, seq: &[TokenId], positions: &[usize]) -> Result<Logits<f32>> {
        self.calls.set(self.calls.get() + 1);
        self.inner.predict(seq, positions)
    }
}

/// Allowed-token masks for each [`SlotClass`].
#[derive(Debug, Clone)]
pub struct CandidateSets {
    free: Vec<bool>,
    text: Vec<bool>,
    bare: Vec<bool>,
}

fn is_number(word: &str) -> bool {
    let digits = word.strip_prefix('-').unwrap_or(word);
    !digits.is_empty() && digits.chars().all(|c| c.is_ascii_digit())
}

impl CandidateSets {
    pub fn new(vocab: &Vocabulary) -> Self {
        let mut sets = CandidateSets {
            free: vec![false; vocab.len()],
            text: vec![false; vocab.len()],
            bare: vec![false; vocab.len()],
        };
        for (id, word) in vocab.tokens().iter().enumerate() {
            let reserved = Vocabulary::is_reserved(id as TokenId);
            sets.free[id] = !reserved || id as TokenId == EOS;
            if reserved {
                continue;
            }
            let safe = !is_json_punctuation(word) && !word.contains(['\\', '"']) && !word.chars().any(char::is_control);
            sets.text[id] = safe;
            sets.bare[id] = is_number(word) || word == NULL_WORD;
        }
        sets
    }

    pub fn allowed(&self, class: SlotClass) -> &[bool] {
        match class {
            SlotClass::Free => &self.free,
            SlotClass::Text => &self.text,
            SlotClass::Bare => &self.bare,
        }
    }
}

/// Per-step commit counts: `k_s = ceil(remaining / steps_remaining)`.
pub fn unmask_schedule(num_masked: usize, steps: usize) -> Vec<usize> {
    let mut remaining = num_masked;
    (0..steps)
        .map(|s| {
            let k = remaining.div_ceil(steps - s);
            remaining -= k;
            k
        })
        .collect()
}

/// (position, token, confidence) of a committed prediction.
pub type Commit = (usize, TokenId, f32);

/// One forward pass; commits the `k` most confident masked positions to their
/// argmax over the allowed tokens. Ties go to the lower index.
pub fn denoise_step<P: Predictor + ?Sized>(
    predictor: &P,
    state: &mut DenoiseState,
    k: usize,
    candidates: &CandidateSets,
) -> Result<Vec<Commit>> {
    let positions = state.masked_positions();
    if k > positions.len() {
        return Err(Error::DecodeConfig(format!(
            "cannot commit {k} of {} masked positions",
            positions.len()
        )));
    }
    let logits = predictor.predict(&state.seq, &positions)?;
    let mut proposals: Vec<Commit> = positions
        .iter()
        .enumerate()
        .map(|(row, &pos)| {
            let z = logits.row(row);
            let allowed = candidates.allowed(state.class[pos]);
            let max_all = z.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let norm: f32 = z.iter().map(|&v| (v - max_all).exp()).sum();
            let mut best = (MASK, f32::NEG_INFINITY);
            for (id, &v) in z.iter().enumerate() {
                if allowed[id] && v > best.1 {
                    best = (id as TokenId, v);
                }
            }
            let confidence = (best.1 - max_all).exp() / norm;
            (pos, best.0, confidence)
        })
        .collect();
    // positions are ascending, so a stable sort keeps ties in index order
    proposals.sort_by(|a, b| b.2.total_cmp(&a.2));
    proposals.truncate(k);
    for &(pos, tok, _) in &proposals {
        state.seq[pos] = tok;
        state.masked[pos] = false;
    }
    state.step_index += 1;
    Ok(proposals)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub mode: DecodeMode,
    /// Response region after the final step.
    pub response: Vec<TokenId>,
    /// Commit confidence per response position; `None` for frozen cells.
    pub confidences: Vec<Option<f32>>,
    pub forward_passes: usize,
}

impl Generation {
    /// Response with baseline output cut at the first EOS.
    pub fn trimmed(&self) -> &[TokenId] {
        match self.mode {
            DecodeMode::Baseline => {
                let end = self.response.iter().position(|&t| t == EOS).unwrap_or(self.response.len());
                &self.response[..end]
            }
            _ => &self.response,
        }
    }
}

/// Initial state for free-form decoding: `q ⊕ SEP ⊕ MASK × response_len`.
pub fn baseline_initial_state(q: &PromptContext, response_len: usize, max_len: usize) -> Result<DenoiseState> {
    let len = q.len() + 1 + response_len;
    if len > max_len {
        return Err(Error::SequenceTooLong { len, max_len });
    }
    let start = q.len() + 1;
    let mut seq = q.tokens.clone();
    seq.push(SEP);
    seq.resize(len, MASK);
    let masked: Vec<bool> = (0..len).map(|i| i >= start).collect();
    let frozen: Vec<bool> = masked.iter().map(|m| !m).collect();
    Ok(DenoiseState {
        seq,
        masked,
        frozen,
        class: vec![SlotClass::Free; len],
        response_start: start,
        step_index: 0,
        total_steps: 0,
    })
}

/// Runs `steps` denoising passes from `state` under [`unmask_schedule`].
pub fn run_schedule<P: Predictor + ?Sized>(
    predictor: &P,
    mut state: DenoiseState,
    steps: usize,
    candidates: &CandidateSets,
) -> Result<(DenoiseState, Vec<Option<f32>>)> {
    if steps == 0 {
        return Err(Error::DecodeConfig("steps must be at least 1".into()));
    }
    state.total_steps = steps;
    let mut confidence = vec![None; state.seq.len()];
    for k in unmask_schedule(state.masked_count(), steps) {
        for (pos, _, c) in denoise_step(predictor, &mut state, k, candidates)? {
            confidence[pos] = Some(c);
        }
    }
    let conf = confidence.split_off(state.response_start);
    Ok((state, conf))
}

/// Temperature-zero generation for one prompt.
pub fn generate<P: Predictor + ?Sized>(
    predictor: &P,
    vocab: &Vocabulary,
    prompt: &PromptContext,
    config: &DecodeConfig,
    schema: Option<&Schema>,
) -> Result<Generation> {
    if vocab.len() != predictor.vocab_size() {
        return Err(Error::DecodeConfig(format!(
            "vocabulary has {} tokens but the model expects {}",
            vocab.len(),
            predictor.vocab_size()
        )));
    }
    let wants_adaptive = config.mode == DecodeMode::Adaptive;
    if prompt.adaptive != wants_adaptive {
        return Err(Error::DecodeConfig(format!(
            "{} mode needs {} prompt",
            config.mode,
            if wants_adaptive { "an augmented" } else { "a plain" }
        )));
    }
    let state = match config.mode {
        DecodeMode::Baseline => {
            if config.baseline_response_len == 0 {
                return Err(Error::DecodeConfig("baseline_response_len must be positive".into()));
            }
            baseline_initial_state(prompt, config.baseline_response_len, predictor.max_len())?
        }
        DecodeMode::Scaffold | DecodeMode::Adaptive => {
            let schema = schema.ok_or_else(|| Error::DecodeConfig(format!("{} mode needs a schema", config.mode)))?;
            let scaffold = compile_scaffold(schema, vocab)?;
            scaffold_to_initial_state(prompt, &scaffold, predictor.max_len())?
        }
    };
    let counter = CountingPredictor::new(predictor);
    let candidates = CandidateSets::new(vocab);
    let (state, confidences) = run_schedule(&counter, state, config.steps, &candidates)?;
    Ok(Generation {
        mode: config.mode,
        response: state.response().to_vec(),
        confidences,
        forward_passes: counter.calls(),
    })
}

/// Converts a filled scaffold into canonical JSON: trailing `null` words are
/// stripped from each value and an all-`null` value becomes JSON null. Text
/// that does not follow the scaffold layout is returned unchanged (joined).
pub fn postprocess_nulls<S: AsRef<str>>(words: &[S], schema: &Schema) -> String {
    let words: Vec<&str> = words.iter().map(AsRef::as_ref).collect();
    let cells = layout(schema);
    let passthrough = || words.join(" ");
    if cells.len() != words.len() {
        return passthrough();
    }
    let mut values: Vec<Vec<&str>> = vec![Vec::new(); schema.fields.len()];
    for (cell, &w) in cells.iter().zip(&words) {
        match cell {
            LayoutCell::Literal(lit) if *lit != w => return passthrough(),
            LayoutCell::Key(f) if schema.fields[*f].name != w => return passthrough(),
            LayoutCell::Slot(f) => values[*f].push(w),
            _ => {}
        }
    }
    let mut record = Record { values: Vec::with_capacity(schema.fields.len()) };
    for (f, mut v) in schema.fields.iter().zip(values) {
        while v.last() == Some(&NULL_WORD) {
            v.pop();
        }
        let value = (!v.is_empty()).then(|| v.join(" "));
        // Bare slots only ever hold numbers; anything else would not be JSON.
        if let (FieldKind::Year, Some(val)) = (&f.kind, &value) {
            if !is_number(val) {
                return passthrough();
            }
        }
        record.values.push((f.name.clone(), value));
    }
    render_gold_json(&record, schema)
}

/// One line of the predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub example_id: usize,
    pub mode: DecodeMode,
    pub steps: usize,
    pub output_text: String,
    pub output_json: String,
    pub confidences: Vec<Option<f32>>,
}

impl PredictionRecord {
    pub fn from_generation(
        example_id: usize,
        steps: usize,
        generation: &Generation,
        vocab: &Vocabulary,
        schema: &Schema,
    ) -> Result<Self> {
        let words = vocab.decode_words(generation.trimmed())?;
        let output_text = words.join(" ");
        let output_json = match generation.mode {
            DecodeMode::Baseline => output_text.clone(),
            _ => postprocess_nulls(&words, schema),
        };
        Ok(PredictionRecord {
            example_id,
            mode: generation.mode,
            steps,
            output_text,
            output_json,
            confidences: generation.confidences.clone(),
        })
    }
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
