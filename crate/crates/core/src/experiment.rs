//! Config-driven pipeline: corpus generation, training, the method × steps
//! sweep and report tables.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::decode::{generate, write_predictions, DecodeConfig, DecodeMode, PredictionRecord};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, parse_output, read_report, write_report, EvalCase, EvalReport, ExampleDetail};
use crate::nn::{ModelConfig, ModelParams};
use crate::scaffold::{augment_prompt, PromptContext, DIRECTIVE};
use crate::schema::{load_schemas, person_schema, schemas_to_json, Schema};
use crate::synthcorpus::{make_split, read_jsonl, render_padded_json, write_jsonl, Example, Record};
use crate::tokenization::Vocabulary;
use crate::train::{write_loss_csv, TrainConfig, Trainer, TrainingSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    /// Schema document; the built-in person schema when absent.
    pub schemas: Option<PathBuf>,
    pub n_train: usize,
    pub n_eval: usize,
    pub null_pad_fraction: f64,
    pub seed: u64,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            schemas: None,
            n_train: 20_000,
            n_eval: 200,
            null_pad_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff: usize,
    pub max_len: usize,
    pub lr: f64,
    pub warmup: usize,
    pub batch: usize,
    pub steps: usize,
    pub grad_clip: f64,
    /// Upper bound on the random EOS tail appended to each training response.
    pub max_eos_tail: usize,
    pub seed: u64,
    /// Save a resumable checkpoint this often (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        ModelSection {
            d: 128,
            layers: 4,
            heads: 4,
            ff: 512,
            max_len: 256,
            lr: t.learning_rate,
            warmup: t.warmup_steps,
            batch: t.batch_size,
            steps: t.steps,
            grad_clip: t.grad_clip,
            max_eos_tail: t.max_eos_tail,
            seed: 0,
            checkpoint_every: 500,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d,
            n_heads: self.heads,
            n_layers: self.layers,
            d_ff: self.ff,
            max_len: self.max_len,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            warmup_steps: self.warmup,
            batch_size: self.batch,
            steps: self.steps,
            grad_clip: self.grad_clip,
            max_eos_tail: self.max_eos_tail,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub methods: Vec<DecodeMode>,
    pub steps: Vec<usize>,
    pub baseline_response_len: usize,
    pub fuzzy_threshold: f64,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            methods: DecodeMode::ALL.to_vec(),
            steps: vec![2, 4, 8, 16, 32],
            baseline_response_len: 64,
            fuzzy_threshold: crate::evalkit::DEFAULT_FUZZY_THRESHOLD,
        }
    }
}

/// Artifact locations, relative to the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub corpus: PathBuf,
    pub checkpoint: PathBuf,
    pub predictions: PathBuf,
    pub report: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            corpus: "corpus".into(),
            checkpoint: "model.ckpt".into(),
            predictions: "predictions.jsonl".into(),
            report: "report.csv".into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusSection,
    pub model: ModelSection,
    pub sweep: SweepSection,
    pub paths: PathsSection,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.corpus.n_train == 0 || self.corpus.n_eval == 0 {
            return bad("corpus.n_train and corpus.n_eval must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.corpus.null_pad_fraction) {
            return bad("corpus.null_pad_fraction must lie in [0, 1]".into());
        }
        let s = &self.sweep.steps;
        if s.is_empty() || s[0] == 0 || s.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("sweep.steps must be positive and strictly increasing, got {s:?}"));
        }
        let unique: HashSet<_> = self.sweep.methods.iter().collect();
        if self.sweep.methods.is_empty() || unique.len() != self.sweep.methods.len() {
            return bad("sweep.methods must be a nonempty list without repeats".into());
        }
        if !(0.0..=1.0).contains(&self.sweep.fuzzy_threshold) {
            return bad("sweep.fuzzy_threshold must lie in [0, 1]".into());
        }
        if self.model.steps == 0 || self.model.batch == 0 {
            return bad("model.steps and model.batch must be positive".into());
        }
        self.model.model_config(crate::tokenization::NUM_RESERVED + 1).validate()
    }

    /// Sets every seed in the pipeline.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.corpus.seed = seed;
        self.model.seed = seed;
        self
    }

    pub fn schemas(&self) -> Result<Vec<Schema>> {
        match &self.corpus.schemas {
            Some(path) => load_schemas(path),
            None => Ok(vec![person_schema()]),
        }
    }
}

/// Resolved artifact paths for one run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub corpus: PathBuf,
    pub checkpoint: PathBuf,
    pub predictions: PathBuf,
    pub report: PathBuf,
    pub out: PathBuf,
}

impl RunPaths {
    pub fn new(cfg: &ExperimentConfig, out: &Path) -> Self {
        RunPaths {
            corpus: out.join(&cfg.paths.corpus),
            checkpoint: out.join(&cfg.paths.checkpoint),
            predictions: out.join(&cfg.paths.predictions),
            report: out.join(&cfg.paths.report),
            out: out.to_path_buf(),
        }
    }

    pub fn train(&self) -> PathBuf {
        self.corpus.join("train.jsonl")
    }

    pub fn heldout(&self) -> PathBuf {
        self.corpus.join("heldout.jsonl")
    }

    pub fn vocab(&self) -> PathBuf {
        self.corpus.join("vocab.txt")
    }

    pub fn schemas(&self) -> PathBuf {
        self.corpus.join("schemas.json")
    }

    pub fn loss(&self) -> PathBuf {
        self.out.join("loss.csv")
    }

    pub fn timing(&self) -> PathBuf {
        self.out.join("timing.csv")
    }

    pub fn details(&self) -> PathBuf {
        self.out.join("eval_details.json")
    }

    pub fn tables(&self) -> PathBuf {
        self.out.join("tables")
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} not found at {}; run the earlier stages first", path.display())))
    }
}

/// Every text whose words must be in the vocabulary.
fn vocabulary_texts(examples: &[&Example], schemas: &[Schema]) -> Result<Vec<String>> {
    let by_id: BTreeMap<&str, &Schema> = schemas.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut texts = Vec::with_capacity(examples.len() * 2 + schemas.len() + 1);
    for ex in examples {
        let schema = by_id
            .get(ex.schema_id.as_str())
            .ok_or_else(|| Error::InvalidSchema(format!("unknown schema id {:?}", ex.schema_id)))?;
        texts.push(ex.prompt.clone());
        texts.push(ex.target_json(schema)?);
        if ex.padded {
            texts.push(ex.gold_json.clone());
        }
    }
    for s in schemas {
        let empty = Record {
            values: s.fields.iter().map(|f| (f.name.clone(), None)).collect(),
        };
        texts.push(render_padded_json(&empty, s));
    }
    texts.push(DIRECTIVE.to_string());
    Ok(texts)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenDataSummary {
    pub n_train: usize,
    pub n_eval: usize,
    pub padded: usize,
    pub vocab_size: usize,
    /// Combination keys shared by the two splits; zero by construction.
    pub overlap: usize,
}

pub fn cmd_gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<GenDataSummary> {
    cfg.validate()?;
    let paths = RunPaths::new(cfg, out);
    let schemas = cfg.schemas()?;
    let c = &cfg.corpus;
    let split = make_split(&schemas, c.n_train, c.n_eval, c.null_pad_fraction, c.seed)?;
    let all: Vec<&Example> = split.train.iter().chain(&split.heldout).collect();
    let vocab = Vocabulary::build(&vocabulary_texts(&all, &schemas)?)?;

    let schema_of = |ex: &Example| schemas.iter().find(|s| s.id == ex.schema_id).expect("checked above");
    let keys = |set: &[Example]| -> Result<HashSet<(String, String)>> {
        set.iter()
            .map(|ex| Ok(ex.record(schema_of(ex))?.combination_key(schema_of(ex))))
            .collect()
    };
    let overlap = keys(&split.train)?.intersection(&keys(&split.heldout)?).count();

    create_dir(&paths.corpus)?;
    write_jsonl(&paths.train(), &split.train)?;
    write_jsonl(&paths.heldout(), &split.heldout)?;
    vocab.save(&paths.vocab())?;
    write_file(&paths.schemas(), &schemas_to_json(&schemas))?;
    Ok(GenDataSummary {
        n_train: split.train.len(),
        n_eval: split.heldout.len(),
        padded: split.train.iter().filter(|e| e.padded).count(),
        vocab_size: vocab.len(),
        overlap,
    })
}

/// Loaded corpus directory.
pub struct Corpus {
    pub schemas: Vec<Schema>,
    pub vocab: Vocabulary,
    pub train: Vec<Example>,
    pub heldout: Vec<Example>,
}

impl Corpus {
    pub fn load(paths: &RunPaths) -> Result<Self> {
        for p in [paths.train(), paths.heldout(), paths.vocab(), paths.schemas()] {
            require(&p, "corpus file")?;
        }
        Ok(Corpus {
            schemas: load_schemas(&paths.schemas())?,
            vocab: Vocabulary::load(&paths.vocab())?,
            train: read_jsonl(&paths.train())?,
            heldout: read_jsonl(&paths.heldout())?,
        })
    }

    pub fn schema(&self, id: &str) -> Result<&Schema> {
        self.schemas
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::InvalidSchema(format!("unknown schema id {id:?}")))
    }

    pub fn training_sequences(&self) -> Result<Vec<TrainingSequence>> {
        self.train
            .iter()
            .map(|ex| {
                let schema = self.schema(&ex.schema_id)?;
                Ok(TrainingSequence {
                    prompt: PromptContext::from_text(&self.vocab, &ex.prompt)?.tokens,
                    response: self.vocab.encode(&ex.target_json(schema)?)?.into_inner(),
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub start_step: usize,
    pub end_step: usize,
    pub first_moving_average: Option<f64>,
    pub final_moving_average: Option<f64>,
    pub num_parameters: usize,
}

pub fn cmd_train(cfg: &ExperimentConfig, out: &Path, resume: bool, mut progress: impl FnMut(&str)) -> Result<TrainSummary> {
    cfg.validate()?;
    let paths = RunPaths::new(cfg, out);
    let corpus = Corpus::load(&paths)?;
    let sequences = corpus.training_sequences()?;
    let model_cfg = cfg.model.model_config(corpus.vocab.len());
    // the longest example with the longest EOS tail
    let longest = sequences
        .iter()
        .map(|s| s.prefix_len() + s.response.len())
        .max()
        .unwrap_or(0)
        + cfg.model.max_eos_tail;
    if longest > model_cfg.max_len {
        return Err(Error::SequenceTooLong { len: longest, max_len: model_cfg.max_len });
    }
    let train_cfg = cfg.model.train_config();
    let mut trainer = if resume {
        require(&paths.checkpoint, "checkpoint")?;
        let ck = load_checkpoint(&paths.checkpoint, Some(&model_cfg))?;
        let optimizer = ck
            .optimizer
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state to resume from".into()))?;
        Trainer::resume(ck.params, optimizer, train_cfg)
    } else {
        Trainer::new(ModelParams::init(model_cfg, cfg.model.seed)?, train_cfg)
    };
    let start_step = trainer.step_count();
    if !resume {
        write_loss_csv(&paths.loss(), &[], false)?;
    }
    progress(&format!(
        "training {} parameters on {} sequences from step {start_step} to {}",
        trainer.params.num_parameters(),
        sequences.len(),
        cfg.model.steps
    ));
    let every = cfg.model.checkpoint_every;
    let mut flushed = 0;
    let started = Instant::now();
    while trainer.step_count() < cfg.model.steps {
        let rec = trainer.step(&sequences)?;
        if rec.step % 100 == 0 {
            progress(&format!(
                "step {} loss {:.4} avg {:.4} ({:.1}s)",
                rec.step,
                rec.loss,
                rec.moving_average,
                started.elapsed().as_secs_f64()
            ));
        }
        let at_end = trainer.step_count() == cfg.model.steps;
        if at_end || (every > 0 && rec.step % every == 0) {
            write_loss_csv(&paths.loss(), &trainer.trace[flushed..], true)?;
            flushed = trainer.trace.len();
            save_checkpoint(&paths.checkpoint, &trainer.params, trainer.step_count(), Some(&trainer.optimizer))?;
        }
    }
    if trainer.trace.is_empty() {
        // nothing to do, but still leave a checkpoint behind
        save_checkpoint(&paths.checkpoint, &trainer.params, trainer.step_count(), Some(&trainer.optimizer))?;
    }
    Ok(TrainSummary {
        start_step,
        end_step: trainer.step_count(),
        first_moving_average: trainer.trace.first().map(|r| r.moving_average),
        final_moving_average: trainer.trace.last().map(|r| r.moving_average),
        num_parameters: trainer.params.num_parameters(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellTiming {
    pub method: DecodeMode,
    pub steps: usize,
    pub seconds: f64,
    pub seconds_per_example: f64,
}

#[derive(Debug, Clone, Serialize)]
struct CellDetails<'a> {
    method: DecodeMode,
    steps: usize,
    examples: &'a [ExampleDetail],
}

pub struct SweepOutput {
    pub reports: Vec<EvalReport>,
    pub timings: Vec<CellTiming>,
}

/// Sweep cells in report order: methods in their canonical order, then
/// ascending step counts.
pub fn sweep_cells(cfg: &SweepSection) -> Vec<(DecodeMode, usize)> {
    let mut methods = cfg.methods.clone();
    methods.sort();
    methods
        .into_iter()
        .flat_map(|m| cfg.steps.iter().map(move |&s| (m, s)))
        .collect()
}

pub fn cmd_sweep(cfg: &ExperimentConfig, out: &Path, mut progress: impl FnMut(&str)) -> Result<SweepOutput> {
    cfg.validate()?;
    let paths = RunPaths::new(cfg, out);
    let corpus = Corpus::load(&paths)?;
    require(&paths.checkpoint, "checkpoint")?;
    let params = load_checkpoint(&paths.checkpoint, None)?.params;
    if params.config.vocab_size != corpus.vocab.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint vocabulary size {} does not match the corpus ({})",
            params.config.vocab_size,
            corpus.vocab.len()
        )));
    }
    let sw = &cfg.sweep;
    let mut predictions = Vec::new();
    let mut reports = Vec::new();
    let mut timings = Vec::new();
    let mut details = Vec::new();
    for (mode, steps) in sweep_cells(sw) {
        let started = Instant::now();
        let decode_cfg = DecodeConfig {
            mode,
            steps,
            baseline_response_len: sw.baseline_response_len,
            seed: cfg.model.seed,
        };
        let mut cases = Vec::with_capacity(corpus.heldout.len());
        for (id, ex) in corpus.heldout.iter().enumerate() {
            let schema = corpus.schema(&ex.schema_id)?;
            let mut prompt = PromptContext::from_text(&corpus.vocab, &ex.prompt)?;
            if mode == DecodeMode::Adaptive && !prompt.adaptive {
                prompt = augment_prompt(&prompt, &corpus.vocab)?;
            }
            let generation = generate(&params, &corpus.vocab, &prompt, &decode_cfg, Some(schema))?;
            let record = PredictionRecord::from_generation(id, steps, &generation, &corpus.vocab, schema)?;
            cases.push(EvalCase {
                example_id: id,
                schema,
                output: parse_output(&record.output_json, schema),
                gold: ex.record(schema)?,
                source: &ex.source_text,
                forward_passes: generation.forward_passes,
            });
            predictions.push(record);
        }
        let seconds = started.elapsed().as_secs_f64();
        let (report, cell_details) = evaluate(mode.as_str(), steps, &cases, sw.fuzzy_threshold)?;
        progress(&format!(
            "{mode:>8} steps {steps:>3}: sv {:.3} f1 {:.3} hr {:.3} ({seconds:.1}s)",
            report.sv, report.f1_fuzzy, report.hr
        ));
        reports.push(report);
        details.push((mode, steps, cell_details));
        timings.push(CellTiming {
            method: mode,
            steps,
            seconds,
            seconds_per_example: seconds / corpus.heldout.len() as f64,
        });
    }
    write_predictions(&paths.predictions, &predictions)?;
    write_report(&paths.report, &reports)?;
    let detail_view: Vec<CellDetails> = details
        .iter()
        .map(|(m, s, d)| CellDetails { method: *m, steps: *s, examples: d })
        .collect();
    write_file(&paths.details(), &serde_json::to_string_pretty(&detail_view)?)?;
    let mut w = csv::Writer::from_path(paths.timing())?;
    for t in &timings {
        w.serialize(t)?;
    }
    w.flush().map_err(|e| Error::io(&paths.timing(), e))?;
    Ok(SweepOutput { reports, timings })
}

/// One metric laid out with step counts as rows and methods as columns.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricTable {
    pub metric: String,
    pub methods: Vec<String>,
    pub steps: Vec<usize>,
    /// `cells[row][col]`; `None` when the report lacks that cell.
    pub cells: Vec<Vec<Option<f64>>>,
}

impl MetricTable {
    pub fn to_csv(&self) -> String {
        let mut s = format!("steps,{}\n", self.methods.join(","));
        for (steps, row) in self.steps.iter().zip(&self.cells) {
            let _ = write!(s, "{steps}");
            for v in row {
                match v {
                    Some(v) => {
                        let _ = write!(s, ",{v}");
                    }
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(metric: &str, text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers()?.clone();
        if header.get(0) != Some("steps") {
            return Err(Error::Eval(format!("table for {metric} lacks a steps column")));
        }
        let methods: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut steps = Vec::new();
        let mut cells = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let parse_err = |f: &str| Error::Eval(format!("bad value {f:?} in table for {metric}"));
            steps.push(rec[0].parse().map_err(|_| parse_err(&rec[0]))?);
            let row = rec
                .iter()
                .skip(1)
                .map(|f| if f.is_empty() { Ok(None) } else { f.parse().map(Some).map_err(|_| parse_err(f)) })
                .collect::<Result<Vec<_>>>()?;
            cells.push(row);
        }
        Ok(MetricTable { metric: metric.to_string(), methods, steps, cells })
    }

    /// (method, steps, value) for every filled cell.
    pub fn to_rows(&self) -> Vec<(String, usize, f64)> {
        let mut rows = Vec::new();
        for (steps, row) in self.steps.iter().zip(&self.cells) {
            for (m, v) in self.methods.iter().zip(row) {
                if let Some(v) = v {
                    rows.push((m.clone(), *steps, *v));
                }
            }
        }
        rows
    }
}

pub fn metric_tables(reports: &[EvalReport]) -> Result<Vec<MetricTable>> {
    if reports.is_empty() {
        return Err(Error::Eval("report has no rows".into()));
    }
    let mut methods: Vec<String> = Vec::new();
    for r in reports {
        if !methods.contains(&r.method) {
            methods.push(r.method.clone());
        }
    }
    let mut steps: Vec<usize> = reports.iter().map(|r| r.steps).collect();
    steps.sort_unstable();
    steps.dedup();
    EvalReport::METRICS
        .iter()
        .chain(["forward_passes"].iter())
        .map(|&metric| {
            let cells = steps
                .iter()
                .map(|&s| {
                    methods
                        .iter()
                        .map(|m| {
                            reports
                                .iter()
                                .find(|r| &r.method == m && r.steps == s)
                                .and_then(|r| r.metric(metric))
                        })
                        .collect()
                })
                .collect();
            Ok(MetricTable { metric: metric.to_string(), methods: methods.clone(), steps: steps.clone(), cells })
        })
        .collect()
}

/// Line chart of one metric against step count, one line per method.
pub fn render_svg(table: &MetricTable) -> String {
    const W: f64 = 480.0;
    const H: f64 = 320.0;
    const M: f64 = 48.0;
    const COLORS: [&str; 6] = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    let values: Vec<f64> = table.cells.iter().flatten().flatten().copied().collect();
    let y_max = values.iter().copied().fold(1.0f64, f64::max);
    let n = table.steps.len().max(2) - 1;
    let x = |i: usize| M + (W - 2.0 * M) * i as f64 / n as f64;
    let y = |v: f64| H - M - (H - 2.0 * M) * v / y_max;
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    let _ = writeln!(s, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(s, "<text x=\"{}\" y=\"20\" text-anchor=\"middle\">{}</text>", W / 2.0, table.metric);
    let _ = writeln!(
        s,
        "<line x1=\"{M}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/><line x1=\"{M}\" y1=\"{M}\" x2=\"{M}\" y2=\"{b}\" stroke=\"black\"/>",
        b = H - M,
        r = W - M
    );
    for (i, st) in table.steps.iter().enumerate() {
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{st}</text>", x(i), H - M + 16.0);
    }
    for tick in [0.0, 0.5, 1.0] {
        let v = tick * y_max;
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{v:.2}</text>", M - 6.0, y(v) + 4.0);
    }
    for (c, method) in table.methods.iter().enumerate() {
        let color = COLORS[c % COLORS.len()];
        let points: Vec<String> = table
            .cells
            .iter()
            .enumerate()
            .filter_map(|(i, row)| row[c].map(|v| format!("{:.1},{:.1}", x(i), y(v))))
            .collect();
        let _ = writeln!(s, "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>", points.join(" "));
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{method}</text>",
            W - M + 4.0,
            M + 16.0 * c as f64
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes one CSV table (and optionally an SVG chart) per metric and checks
/// that each table parses back to the report's cells.
pub fn cmd_report(report_csv: &Path, out_dir: &Path, charts: bool) -> Result<Vec<MetricTable>> {
    let reports = read_report(report_csv)?;
    let tables = metric_tables(&reports)?;
    create_dir(out_dir)?;
    for t in &tables {
        let text = t.to_csv();
        let back = MetricTable::from_csv(&t.metric, &text)?;
        if back != *t {
            return Err(Error::Eval(format!("table for {} does not round-trip", t.metric)));
        }
        write_file(&out_dir.join(format!("{}.csv", t.metric)), &text)?;
        if charts {
            write_file(&out_dir.join(format!("{}.svg", t.metric)), &render_svg(t))?;
        }
    }
    Ok(tables)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: &str, steps: usize, sv: f64) -> EvalReport {
        EvalReport {
            method: method.into(),
            steps,
            sv,
            fc: 0.5,
            sc: 0.25,
            precision: 0.1,
            recall: 0.2,
            f1_exact: 1.0 / 3.0,
            f1_fuzzy: 0.4,
            hr: 0.05,
            hr_absent: 0.0,
            forward_passes: steps as f64,
            n_examples: 5,
        }
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let parsed: ExperimentConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(parsed, cfg);
        let partial: ExperimentConfig = serde_json::from_str(r#"{"sweep": {"steps": [1, 3]}}"#).unwrap();
        assert_eq!(partial.sweep.steps, [1, 3]);
        assert_eq!(partial.sweep.methods.len(), 3);
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"sweep": {"methods": ["greedy"]}}"#).is_err());
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"bogus": 1}"#).is_err());

        let mut bad = cfg.clone();
        bad.sweep.steps = vec![4, 2];
        assert!(bad.validate().is_err());
        let mut bad = cfg.clone();
        bad.sweep.methods = vec![DecodeMode::Scaffold, DecodeMode::Scaffold];
        assert!(bad.validate().is_err());
        let mut bad = cfg;
        bad.corpus.n_eval = 0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn cells_are_complete_and_ordered() {
        let sw = SweepSection {
            methods: vec![DecodeMode::Adaptive, DecodeMode::Baseline],
            steps: vec![2, 8],
            ..SweepSection::default()
        };
        assert_eq!(
            sweep_cells(&sw),
            [
                (DecodeMode::Baseline, 2),
                (DecodeMode::Baseline, 8),
                (DecodeMode::Adaptive, 2),
                (DecodeMode::Adaptive, 8)
            ]
        );
    }

    #[test]
    fn tables_round_trip() {
        let reports = vec![row("baseline", 2, 0.1), row("baseline", 8, 0.3), row("scaffold", 2, 1.0)];
        let tables = metric_tables(&reports).unwrap();
        let sv = tables.iter().find(|t| t.metric == "sv").unwrap();
        assert_eq!(sv.cells.len() * sv.methods.len(), 4);
        assert_eq!(sv.cells[1][1], None);
        let back = MetricTable::from_csv("sv", &sv.to_csv()).unwrap();
        assert_eq!(&back, sv);
        let mut rows = back.to_rows();
        rows.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
        let expected: Vec<(String, usize, f64)> = reports.iter().map(|r| (r.method.clone(), r.steps, r.sv)).collect();
        assert_eq!(rows, expected);
        let f1e = tables.iter().find(|t| t.metric == "f1_exact").unwrap();
        assert_eq!(MetricTable::from_csv("f1_exact", &f1e.to_csv()).unwrap(), *f1e);
        assert!(metric_tables(&[]).is_err());
        assert!(render_svg(sv).contains("<polyline"));
    }
}
