//! Acceptance suite: one PASS/FAIL line per criterion. Runs without the
//! libtest harness so the lines always reach the terminal.
//!
//! Criteria 5-8 and 10 need a model trained with the default configuration.
//! That run is cached under the cargo target directory, keyed by a hash of
//! the configuration, so only the first invocation pays for training.

mod common;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use mdm_scaffold::decode::{generate, CountingPredictor, DecodeConfig, DecodeMode};
use mdm_scaffold::diffusion::{mask_forward, mdm_loss, MaskedBatch, NoiseLevel};
use mdm_scaffold::evalkit::{
    content_metrics, evaluate, hallucination_rate, parse_output, similarity, structural_metrics, EvalCase,
    EvalReport,
};
use mdm_scaffold::experiment::{cmd_gen_data, cmd_sweep, cmd_train, Corpus, ExperimentConfig, RunPaths};
use mdm_scaffold::nn::ModelParams;
use mdm_scaffold::checkpoint::load_checkpoint;
use mdm_scaffold::scaffold::{augment_prompt, PromptContext};
use mdm_scaffold::schema::{person_schema, FieldKind, FieldSpec, Schema};
use mdm_scaffold::synthcorpus::Record;
use mdm_scaffold::train::{TrainConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

/// Edit distance by exhaustive recursion over (i, j) with memoization; kept
/// separate from the library's rolling-row implementation.
fn oracle_edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut table = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in (0..=a.len()).rev() {
        for j in (0..=b.len()).rev() {
            table[i][j] = if i == a.len() {
                b.len() - j
            } else if j == b.len() {
                a.len() - i
            } else if a[i] == b[j] {
                table[i + 1][j + 1]
            } else {
                1 + table[i + 1][j].min(table[i][j + 1]).min(table[i + 1][j + 1])
            };
        }
    }
    table[0][0]
}

fn oracle_similarity(a: &str, b: &str) -> f64 {
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        1.0
    } else {
        1.0 - oracle_edit_distance(a, b) as f64 / longest as f64
    }
}

/// Grounded iff some source token window of length |v|-1..=|v|+1 equals the
/// value or is similar enough; scanned exhaustively.
fn oracle_grounded(value: &str, source: &str) -> bool {
    let v: Vec<&str> = value.split_whitespace().collect();
    let s: Vec<&str> = source.split_whitespace().collect();
    let joined = v.join(" ");
    for len in v.len().saturating_sub(1).max(1)..=v.len() + 1 {
        for start in 0..s.len() {
            if start + len > s.len() {
                break;
            }
            let window = s[start..start + len].join(" ");
            if window == joined || oracle_similarity(&window, &joined) >= 0.8 {
                return true;
            }
        }
    }
    false
}

fn two_field_schema() -> Schema {
    Schema::new(
        "pair",
        vec![
            FieldSpec::new("name", FieldKind::String, true, 3),
            FieldSpec::new("occupation", FieldKind::Enum(vec!["mathematician".into(), "poet".into()]), true, 1),
        ],
    )
    .unwrap()
}

fn record(pairs: &[(&str, Option<&str>)]) -> Record {
    Record {
        values: pairs.iter().map(|(k, v)| (k.to_string(), v.map(str::to_string))).collect(),
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9
}

fn criterion_1() -> Outcome {
    let started = Instant::now();
    let mut failures = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            failures.push(name.to_string());
        }
    };
    let person = person_schema();
    let pair = two_field_schema();

    let p = parse_output(r#"{ "name" : "ada" }"#, &person);
    check("parse ok", p.ok && p.value("name") == Some("ada"));
    let p = parse_output(r#"{ "name" : "ad"#, &person);
    check("parse truncated", !p.ok && p.fields.is_empty());
    let p = parse_output(r#"{ "name" : "ada" , "age" : "x" }"#, &person);
    check("parse extras", p.extras == ["age"]);

    let gold_pair = r#"{ "name" : "ada" , "occupation" : "poet" }"#;
    let parsed_gold = parse_output(gold_pair, &pair);
    check("structure all gold", structural_metrics(&[parsed_gold.clone(), parsed_gold.clone()], &pair).ok() == Some((1.0, 1.0, 1.0)));
    check("structure unparseable", structural_metrics(&[parse_output("{", &pair)], &pair).ok() == Some((0.0, 0.0, 0.0)));
    // one gold output, one parseable output missing 1 of 2 required fields:
    // SV = 2/2, FC = (1 + 1/2)/2, SC = 1/2
    let missing = parse_output(r#"{ "name" : "ada" , "occupation" : null }"#, &pair);
    let (sv, fc, sc) = structural_metrics(&[parsed_gold, missing], &pair).unwrap();
    check("structure mixed", close(sv, 1.0) && close(fc, 0.75) && close(sc, 0.5));

    for (a, b) in [("abc", "abc"), ("john smith", "jon smith"), ("a", "b"), ("ada lovelac", "ada lovelace"), ("", "")] {
        check(&format!("similarity {a:?} {b:?}"), close(similarity(a, b), oracle_similarity(a, b)));
    }
    check("similarity 0.9", close(similarity("john smith", "jon smith"), 0.9));
    check("similarity 0", close(similarity("a", "b"), 0.0));
    check("similarity 1", close(similarity("abc", "abc"), 1.0));

    let gold = record(&[("name", Some("ada lovelace")), ("occupation", Some("mathematician"))]);
    let pred = parse_output(r#"{ "name" : "ada lovelace" , "occupation" : "poet" }"#, &pair);
    // 1 correct of 2 predicted and 2 gold, under both criteria
    let (p, r, fe, ff) = content_metrics(&[pred], &[gold.clone()], &pair, 0.8).unwrap();
    check("content half", [p, r, fe, ff].iter().all(|&v| close(v, 0.5)));
    let nulls = parse_output(r#"{ "name" : null , "occupation" : null }"#, &pair);
    check("content nulls", content_metrics(&[nulls], &[gold.clone()], &pair, 0.8).ok() == Some((0.0, 0.0, 0.0, 0.0)));
    let near = parse_output(r#"{ "name" : "ada lovelac" }"#, &pair);
    let (_, _, fe, ff) = content_metrics(&[near], &[gold], &pair, 0.8).unwrap();
    // exact: 0 correct; fuzzy: 1 correct of 1 predicted, 2 gold -> F1 = 2/3
    check("content fuzzy", close(fe, 0.0) && close(ff, 2.0 / 3.0));
    check("similarity 11/12", close(oracle_similarity("ada lovelac", "ada lovelace"), 11.0 / 12.0));

    let engineer = parse_output(r#"{ "occupation" : "engineer" }"#, &person);
    let hr = hallucination_rate(&[engineer], &["they worked as an engineer ."], &person, 0.8).unwrap();
    check("grounded engineer", close(hr, 0.0) && oracle_grounded("engineer", "they worked as an engineer ."));
    let source = "harriet byron was a poet born 1812 in london .";
    let astronaut = parse_output(r#"{ "occupation" : "astronaut" }"#, &person);
    let hr = hallucination_rate(&[astronaut], &[source], &person, 0.8).unwrap();
    check("ungrounded astronaut", close(hr, 1.0) && !oracle_grounded("astronaut", source));
    let all_null = parse_output(r#"{ "name" : null , "occupation" : null }"#, &person);
    check("hr all null", hallucination_rate(&[all_null], &[source], &person, 0.8).ok() == Some(0.0));

    let elapsed = started.elapsed();
    let ok = failures.is_empty() && elapsed < Duration::from_secs(1);
    outcome(ok, format!("{} failures {:?}, {:.3}s (< 1s)", failures.len(), failures, elapsed.as_secs_f64()))
}

fn criterion_2() -> Outcome {
    let started = Instant::now();
    let r = common::gradient_check(128, 7);
    let elapsed = started.elapsed();
    outcome(
        r.max_relative_error < 1e-3 && r.coordinates >= 100 && elapsed < Duration::from_secs(60),
        format!(
            "max relative error {:.2e} over {} coordinates (< 1e-3), {:.2}s",
            r.max_relative_error,
            r.coordinates,
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_3() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let prompt_len = 7;
    let seq: Vec<u32> = (0..prompt_len + 10_000).map(|i| 5 + (i % 50) as u32).collect();
    let mut parts = Vec::new();
    let mut ok = true;
    for t in [0.1, 0.5, 0.9] {
        let row = mask_forward(&seq, prompt_len, NoiseLevel::new(t).unwrap(), &mut rng).unwrap();
        let prompt_untouched = row.mask[..prompt_len].iter().all(|m| !m);
        let fraction = row.masked_count() as f64 / 10_000.0;
        ok &= prompt_untouched && (fraction - t).abs() <= 0.02;
        parts.push(format!("t={t}: {fraction:.4}"));
    }
    outcome(ok, format!("{} (±0.02), {:.2}s", parts.join(", "), started.elapsed().as_secs_f64()))
}

fn criterion_4() -> Outcome {
    let started = Instant::now();
    // a small real corpus supplies the vocabulary and the example
    let mut cfg = ExperimentConfig::default();
    cfg.corpus.n_train = 200;
    cfg.corpus.n_eval = 1;
    cfg.corpus.null_pad_fraction = 0.0;
    let dir = tempfile::tempdir().unwrap();
    cmd_gen_data(&cfg, dir.path()).unwrap();
    let corpus = Corpus::load(&RunPaths::new(&cfg, dir.path())).unwrap();
    let example = corpus.training_sequences().unwrap().swap_remove(0);
    let single = vec![example.clone()];
    let v = corpus.vocab.len();
    let params = ModelParams::init(cfg.model.model_config(v), 4).unwrap();
    let train_cfg = TrainConfig {
        learning_rate: 1e-3,
        warmup_steps: 10,
        batch_size: 4,
        steps: 200,
        seed: 4,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(params, train_cfg);
    trainer.run(&single, |_| {}).unwrap();

    // objective at t = 1: every response token masked
    let seq = example.padded(example.response.len());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let row = mask_forward(&seq, example.prefix_len(), NoiseLevel::new(1.0).unwrap(), &mut rng).unwrap();
    let logits = trainer.params.logits(&[&row.inputs]).unwrap();
    let loss = mdm_loss(&logits, &MaskedBatch::new(vec![row]));
    let bound = 0.1 * (v as f64).ln();
    let elapsed = started.elapsed();
    outcome(
        loss < bound && elapsed < Duration::from_secs(60),
        format!(
            "loss {loss:.4} after {} steps on one example (< 0.1·ln {v} = {bound:.4}), {:.1}s (< 60s)",
            trainer.step_count(),
            elapsed.as_secs_f64()
        ),
    )
}

/// Default-configuration run, cached by configuration hash.
fn default_run() -> (ExperimentConfig, PathBuf) {
    let cfg = ExperimentConfig::default();
    let digest = Sha256::digest(serde_json::to_vec(&cfg).unwrap());
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR"))
        .join("acceptance")
        .join(format!("default-{}", &hex::encode(digest)[..16]));
    let paths = RunPaths::new(&cfg, &dir);
    let trained = load_checkpoint(&paths.checkpoint, None).is_ok_and(|c| c.step == cfg.model.steps);
    if !trained {
        eprintln!("training the default configuration into {} (cached for later runs)", dir.display());
        cmd_gen_data(&cfg, &dir).unwrap();
        let resume = paths.checkpoint.exists();
        cmd_train(&cfg, &dir, resume, |msg| {
            if msg.starts_with("training") || msg.starts_with("step ") && msg.split(' ').nth(1).is_some_and(|s| s.ends_with("500") || s.ends_with("000")) {
                eprintln!("  {msg}");
            }
        })
        .unwrap();
    }
    (cfg, dir)
}

fn row<'a>(reports: &'a [EvalReport], method: DecodeMode, steps: usize) -> &'a EvalReport {
    reports
        .iter()
        .find(|r| r.method == method.as_str() && r.steps == steps)
        .expect("sweep covers every configured cell")
}

fn criterion_5(cfg: &ExperimentConfig, reports: &[EvalReport]) -> Outcome {
    let mut ok = true;
    let mut worst: f64 = 1.0;
    for mode in [DecodeMode::Scaffold, DecodeMode::Adaptive] {
        for &s in &cfg.sweep.steps {
            let sv = row(reports, mode, s).sv;
            worst = worst.min(sv);
            ok &= sv == 1.0;
        }
    }
    let baseline = row(reports, DecodeMode::Baseline, 16);
    ok &= baseline.sv < 1.0;
    outcome(
        ok,
        format!(
            "scaffold/adaptive min SV {worst:.3} (= 1.0); baseline@16 SV {:.3} FC {:.3} SC {:.3} (SV < 1.0)",
            baseline.sv, baseline.fc, baseline.sc
        ),
    )
}

fn criterion_6(reports: &[EvalReport]) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for s in [8, 16] {
        let a = row(reports, DecodeMode::Adaptive, s).f1_fuzzy;
        let sc = row(reports, DecodeMode::Scaffold, s).f1_fuzzy;
        let b = row(reports, DecodeMode::Baseline, s).f1_fuzzy;
        ok &= a >= sc && sc >= b;
        parts.push(format!("@{s}: adaptive {a:.3} ≥ scaffold {sc:.3} ≥ baseline {b:.3}"));
    }
    outcome(ok, parts.join("; "))
}

fn criterion_7(cfg: &ExperimentConfig, reports: &[EvalReport]) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for &s in &cfg.sweep.steps {
        let a = row(reports, DecodeMode::Adaptive, s).hr_absent;
        let sc = row(reports, DecodeMode::Scaffold, s).hr_absent;
        ok &= a <= sc;
        parts.push(format!("@{s}: {a:.3} ≤ {sc:.3}"));
    }
    outcome(ok, format!("HR on examples with absent optional fields, adaptive ≤ scaffold {}", parts.join(", ")))
}

fn criterion_8(cfg: &ExperimentConfig, dir: &Path, reports: &[EvalReport], timings: &[mdm_scaffold::experiment::CellTiming]) -> Outcome {
    let mut ok = reports.iter().all(|r| r.forward_passes == r.steps as f64);
    // direct count through an instrumented predictor on one example per mode
    let corpus = Corpus::load(&RunPaths::new(cfg, dir)).unwrap();
    let params = load_checkpoint(&RunPaths::new(cfg, dir).checkpoint, None).unwrap().params;
    let ex = &corpus.heldout[0];
    let schema = corpus.schema(&ex.schema_id).unwrap();
    for mode in DecodeMode::ALL {
        for &steps in &cfg.sweep.steps {
            let mut prompt = PromptContext::from_text(&corpus.vocab, &ex.prompt).unwrap();
            if mode == DecodeMode::Adaptive {
                prompt = augment_prompt(&prompt, &corpus.vocab).unwrap();
            }
            let counter = CountingPredictor::new(&params);
            let dc = DecodeConfig { mode, steps, baseline_response_len: cfg.sweep.baseline_response_len, seed: 0 };
            generate(&counter, &corpus.vocab, &prompt, &dc, Some(schema)).unwrap();
            ok &= counter.calls() == steps;
        }
    }
    let mut parts = Vec::new();
    for mode in DecodeMode::ALL {
        let secs: Vec<f64> = cfg
            .sweep
            .steps
            .iter()
            .map(|&s| timings.iter().find(|t| t.method == mode && t.steps == s).unwrap().seconds)
            .collect();
        ok &= secs.windows(2).all(|w| w[1] > w[0]);
        parts.push(format!("{mode} [{}]s", secs.iter().map(|s| format!("{s:.1}")).collect::<Vec<_>>().join(", ")));
    }
    outcome(ok, format!("forward passes = steps in every cell; wall-clock by steps {}", parts.join("; ")))
}

fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.corpus.n_train = 300;
    cfg.corpus.n_eval = 12;
    cfg.model.d = 16;
    cfg.model.heads = 2;
    cfg.model.layers = 1;
    cfg.model.ff = 32;
    cfg.model.batch = 8;
    cfg.model.steps = 30;
    cfg.model.checkpoint_every = 10;
    cfg.sweep.steps = vec![2, 4];
    cfg
}

fn criterion_9() -> (Outcome, Vec<EvalReport>) {
    let started = Instant::now();
    let cfg = tiny_config();
    let mut bytes = Vec::new();
    let mut reports = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        cmd_gen_data(&cfg, dir.path()).unwrap();
        cmd_train(&cfg, dir.path(), false, |_| {}).unwrap();
        reports.extend(cmd_sweep(&cfg, dir.path(), |_| {}).unwrap().reports);
        bytes.push(std::fs::read(RunPaths::new(&cfg, dir.path()).report).unwrap());
    }
    let same = bytes[0] == bytes[1] && !bytes[0].is_empty();
    (
        outcome(
            same,
            format!(
                "two gen-data → train → sweep runs: report CSVs {} ({} bytes), {:.1}s",
                if same { "byte-identical" } else { "differ" },
                bytes[0].len(),
                started.elapsed().as_secs_f64()
            ),
        ),
        reports,
    )
}

fn criterion_10(reports: &[EvalReport]) -> Outcome {
    let rows_ok = reports.iter().all(|r| r.sc <= r.sv && r.f1_fuzzy >= r.f1_exact);
    let schema = person_schema();
    let split = mdm_scaffold::synthcorpus::make_split(&[schema.clone()], 1, 200, 0.1, 10).unwrap();
    let cases: Vec<EvalCase> = split
        .heldout
        .iter()
        .enumerate()
        .map(|(i, ex)| EvalCase {
            example_id: i,
            schema: &schema,
            output: parse_output(&ex.gold_json, &schema),
            gold: ex.record(&schema).unwrap(),
            source: &ex.source_text,
            forward_passes: 0,
        })
        .collect();
    let (gold, _) = evaluate("gold", 0, &cases, 0.8).unwrap();
    let ones = [gold.sv, gold.fc, gold.sc, gold.precision, gold.recall, gold.f1_exact, gold.f1_fuzzy];
    let gold_ok = ones.iter().all(|&v| v == 1.0) && gold.hr == 0.0;
    outcome(
        rows_ok && gold_ok,
        format!(
            "SC ≤ SV and F1 fuzzy ≥ exact on {} report rows: {}; gold vs gold all ones with HR 0: {}",
            reports.len(),
            rows_ok,
            gold_ok
        ),
    )
}

fn main() -> ExitCode {
    // `cargo test -- <filter>` style arguments are accepted and ignored
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |n: usize, name: &'static str, o: Outcome| {
        println!("criterion {n:>2} {}: {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };
    report(1, "metric oracle suite", criterion_1());
    report(2, "gradient check", criterion_2());
    report(3, "masking statistics", criterion_3());
    report(4, "overfit smoke test", criterion_4());

    let (cfg, dir) = default_run();
    let sweep = cmd_sweep(&cfg, &dir, |_| {}).unwrap();
    report(5, "scaffold validity by construction", criterion_5(&cfg, &sweep.reports));
    report(6, "fidelity trend", criterion_6(&sweep.reports));
    report(7, "faithfulness trend", criterion_7(&cfg, &sweep.reports));
    report(8, "cost linearity", criterion_8(&cfg, &dir, &sweep.reports, &sweep.timings));
    let (determinism, tiny_reports) = criterion_9();
    report(9, "determinism", determinism);
    let all_rows: Vec<EvalReport> = sweep.reports.iter().chain(&tiny_reports).cloned().collect();
    report(10, "invariant suite", criterion_10(&all_rows));

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    if failed.is_empty() {
        println!("all {} criteria passed", results.len());
        ExitCode::SUCCESS
    } else {
        println!("failed criteria: {failed:?}");
        ExitCode::FAILURE
    }
}
