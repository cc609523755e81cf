//! Structural, content and faithfulness metrics for extracted JSON.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::schema::Schema;
use crate::synthcorpus::Record;
use crate::tokenization::normalize_words;

pub const DEFAULT_FUZZY_THRESHOLD: f64 = 0.8;

/// Lowercases, trims and collapses internal whitespace.
pub fn normalize_value(s: &str) -> String {
    s.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedOutput {
    pub ok: bool,
    /// Schema fields found in the output; `None` is an explicit JSON null.
    pub fields: BTreeMap<String, Option<String>>,
    pub extras: Vec<String>,
}

impl ParsedOutput {
    pub fn failed() -> Self {
        ParsedOutput::default()
    }

    pub fn value(&self, field: &str) -> Option<&str> {
        self.fields.get(field).and_then(|v| v.as_deref())
    }

    pub fn from_record(record: &Record) -> Self {
        ParsedOutput {
            ok: true,
            fields: record
                .values
                .iter()
                .map(|(k, v)| (k.clone(), v.as_deref().map(normalize_value)))
                .collect(),
            extras: Vec::new(),
        }
    }
}

/// Byte range of the first balanced `{...}` span, skipping braces inside
/// JSON strings.
fn first_object_span(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, c) in text[start..].char_indices() {
        if in_string {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_string = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..start + i + 1]);
                }
            }
            _ => {}
        }
    }
    None
}

pub fn parse_output(text: &str, schema: &Schema) -> ParsedOutput {
    let Some(span) = first_object_span(text) else {
        return ParsedOutput::failed();
    };
    let Ok(Value::Object(map)) = serde_json::from_str::<Value>(span) else {
        return ParsedOutput::failed();
    };
    let mut out = ParsedOutput {
        ok: true,
        ..ParsedOutput::default()
    };
    for (key, value) in map {
        let key = normalize_value(&key);
        let value = match value {
            Value::Null => None,
            Value::String(s) => Some(normalize_value(&s)),
            other => Some(normalize_value(&other.to_string())),
        };
        if schema.field(&key).is_some() {
            out.fields.insert(key, value);
        } else if !out.extras.contains(&key) {
            out.extras.push(key);
        }
    }
    out
}

pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `1 - levenshtein / max(len)` over characters; two empty strings score 1.
pub fn similarity(a: &str, b: &str) -> f64 {
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        return 1.0;
    }
    1.0 - levenshtein(a, b) as f64 / longest as f64
}

/// Structure scores of one output: (valid, populated fraction, compliant).
pub fn example_structure(output: &ParsedOutput, schema: &Schema) -> (bool, f64, bool) {
    if !output.ok {
        return (false, 0.0, false);
    }
    let required = schema.fields.iter().filter(|f| f.required);
    let populated = required.clone().filter(|f| output.value(&f.name).is_some()).count();
    let fc = populated as f64 / schema.required_count() as f64;
    let compliant = output.extras.is_empty()
        && populated == schema.required_count()
        && schema.fields.iter().all(|f| match output.fields.get(&f.name) {
            Some(Some(v)) => f.accepts(v),
            Some(None) => !f.required,
            None => false,
        });
    (true, fc, compliant)
}

/// Mean (SV, FC, SC) over a nonempty set of outputs.
pub fn structural_metrics(outputs: &[ParsedOutput], schema: &Schema) -> Result<(f64, f64, f64)> {
    if outputs.is_empty() {
        return Err(Error::Eval("no outputs to evaluate".into()));
    }
    let (mut sv, mut fc, mut sc) = (0.0, 0.0, 0.0);
    for o in outputs {
        let (valid, frac, compliant) = example_structure(o, schema);
        sv += f64::from(u8::from(valid));
        fc += frac;
        sc += f64::from(u8::from(compliant));
    }
    let n = outputs.len() as f64;
    Ok((sv / n, fc / n, sc / n))
}

/// Field-level match counts for one example.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContentCounts {
    pub predicted: usize,
    pub gold: usize,
    pub correct_exact: usize,
    pub correct_fuzzy: usize,
}

impl std::ops::AddAssign for ContentCounts {
    fn add_assign(&mut self, o: Self) {
        self.predicted += o.predicted;
        self.gold += o.gold;
        self.correct_exact += o.correct_exact;
        self.correct_fuzzy += o.correct_fuzzy;
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

impl ContentCounts {
    pub fn precision(&self) -> f64 {
        ratio(self.correct_fuzzy, self.predicted)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.correct_fuzzy, self.gold)
    }

    pub fn f1_fuzzy(&self) -> f64 {
        harmonic(self.precision(), self.recall())
    }

    pub fn f1_exact(&self) -> f64 {
        harmonic(
            ratio(self.correct_exact, self.predicted),
            ratio(self.correct_exact, self.gold),
        )
    }
}

pub fn example_content(output: &ParsedOutput, gold: &Record, schema: &Schema, threshold: f64) -> ContentCounts {
    let mut c = ContentCounts::default();
    for f in &schema.fields {
        let g = gold.get(&f.name).map(normalize_value);
        let p = output.value(&f.name);
        c.gold += usize::from(g.is_some());
        let Some(p) = p else { continue };
        c.predicted += 1;
        let Some(g) = g else { continue };
        if p == g {
            c.correct_exact += 1;
            c.correct_fuzzy += 1;
        } else if f.kind == crate::schema::FieldKind::String && similarity(p, &g) >= threshold {
            c.correct_fuzzy += 1;
        }
    }
    c
}

/// (precision, recall, f1_exact, f1_fuzzy); precision and recall use the
/// fuzzy criterion.
pub fn content_metrics(
    outputs: &[ParsedOutput],
    golds: &[Record],
    schema: &Schema,
    threshold: f64,
) -> Result<(f64, f64, f64, f64)> {
    if outputs.len() != golds.len() {
        return Err(Error::Eval(format!(
            "{} outputs but {} gold records",
            outputs.len(),
            golds.len()
        )));
    }
    let mut total = ContentCounts::default();
    for (o, g) in outputs.iter().zip(golds) {
        total += example_content(o, g, schema, threshold);
    }
    Ok((total.precision(), total.recall(), total.f1_exact(), total.f1_fuzzy()))
}

/// Whether `value` is supported by `source`: a contiguous run of its tokens,
/// or a token window of nearby length that is similar enough.
pub fn is_grounded(value: &str, source: &str, threshold: f64) -> bool {
    let v = normalize_words(value);
    let s = normalize_words(source);
    if v.is_empty() {
        return true;
    }
    if s.windows(v.len()).any(|w| w == v.as_slice()) {
        return true;
    }
    let joined = v.join(" ");
    (v.len().saturating_sub(1).max(1)..=v.len() + 1).any(|n| {
        s.windows(n)
            .any(|w| similarity(&w.join(" "), &joined) >= threshold)
    })
}

/// (ungrounded, total) non-null predictions of one example.
pub fn example_hallucinations(output: &ParsedOutput, source: &str, schema: &Schema, threshold: f64) -> (usize, usize) {
    let values: Vec<&str> = schema.fields.iter().filter_map(|f| output.value(&f.name)).collect();
    let ungrounded = values.iter().filter(|v| !is_grounded(v, source, threshold)).count();
    (ungrounded, values.len())
}

pub fn hallucination_rate<S: AsRef<str>>(
    outputs: &[ParsedOutput],
    sources: &[S],
    schema: &Schema,
    threshold: f64,
) -> Result<f64> {
    if outputs.len() != sources.len() {
        return Err(Error::Eval(format!(
            "{} outputs but {} sources",
            outputs.len(),
            sources.len()
        )));
    }
    let (mut bad, mut total) = (0, 0);
    for (o, s) in outputs.iter().zip(sources) {
        let (b, t) = example_hallucinations(o, s.as_ref(), schema, threshold);
        bad += b;
        total += t;
    }
    Ok(ratio(bad, total))
}

/// One row of the sweep report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub steps: usize,
    pub sv: f64,
    pub fc: f64,
    pub sc: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1_exact: f64,
    pub f1_fuzzy: f64,
    pub hr: f64,
    /// HR restricted to examples with at least one absent optional field.
    pub hr_absent: f64,
    pub forward_passes: f64,
    #[serde(rename = "n")]
    pub n_examples: usize,
}

impl EvalReport {
    pub fn metric(&self, name: &str) -> Option<f64> {
        Some(match name {
            "sv" => self.sv,
            "fc" => self.fc,
            "sc" => self.sc,
            "precision" => self.precision,
            "recall" => self.recall,
            "f1_exact" => self.f1_exact,
            "f1_fuzzy" => self.f1_fuzzy,
            "hr" => self.hr,
            "hr_absent" => self.hr_absent,
            "forward_passes" => self.forward_passes,
            _ => return None,
        })
    }

    pub const METRICS: [&'static str; 9] = [
        "sv", "fc", "sc", "precision", "recall", "f1_exact", "f1_fuzzy", "hr", "hr_absent",
    ];
}

/// What one example contributes to a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleDetail {
    pub example_id: usize,
    pub valid: bool,
    pub completeness: f64,
    pub compliant: bool,
    pub extras: Vec<String>,
    pub counts: ContentCounts,
    pub ungrounded: usize,
    pub absent_optional: usize,
}

/// An output paired with what it is scored against.
pub struct EvalCase<'a> {
    pub example_id: usize,
    pub schema: &'a Schema,
    pub output: ParsedOutput,
    pub gold: Record,
    pub source: &'a str,
    pub forward_passes: usize,
}

pub fn evaluate(method: &str, steps: usize, cases: &[EvalCase<'_>], threshold: f64) -> Result<(EvalReport, Vec<ExampleDetail>)> {
    if cases.is_empty() {
        return Err(Error::Eval("no outputs to evaluate".into()));
    }
    let mut details = Vec::with_capacity(cases.len());
    let mut content = ContentCounts::default();
    let (mut sv, mut fc, mut sc) = (0.0, 0.0, 0.0);
    let (mut bad, mut total, mut bad_absent, mut total_absent) = (0, 0, 0, 0);
    let mut passes = 0usize;
    for c in cases {
        let (valid, frac, compliant) = example_structure(&c.output, c.schema);
        sv += f64::from(u8::from(valid));
        fc += frac;
        sc += f64::from(u8::from(compliant));
        let counts = example_content(&c.output, &c.gold, c.schema, threshold);
        content += counts;
        let (b, t) = example_hallucinations(&c.output, c.source, c.schema, threshold);
        let absent_optional = c.gold.absent_optional_count(c.schema);
        bad += b;
        total += t;
        if absent_optional > 0 {
            bad_absent += b;
            total_absent += t;
        }
        passes += c.forward_passes;
        details.push(ExampleDetail {
            example_id: c.example_id,
            valid,
            completeness: frac,
            compliant,
            extras: c.output.extras.clone(),
            counts,
            ungrounded: b,
            absent_optional,
        });
    }
    let n = cases.len() as f64;
    let report = EvalReport {
        method: method.to_string(),
        steps,
        sv: sv / n,
        fc: fc / n,
        sc: sc / n,
        precision: content.precision(),
        recall: content.recall(),
        f1_exact: content.f1_exact(),
        f1_fuzzy: content.f1_fuzzy(),
        hr: ratio(bad, total),
        hr_absent: ratio(bad_absent, total_absent),
        forward_passes: passes as f64 / n,
        n_examples: cases.len(),
    };
    Ok((report, details))
}

pub fn write_report(path: &Path, rows: &[EvalReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<Vec<EvalReport>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<EvalReport>, _>>()?;
    if rows.is_empty() {
        return Err(Error::Eval(format!("{} has no report rows", path.display())));
    }
    Ok(rows)
}
