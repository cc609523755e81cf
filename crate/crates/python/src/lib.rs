//! Python bindings for the mdm-scaffold core crate.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use mdm_scaffold::decode::{self, DecodeConfig, DecodeMode, PredictionRecord};
use mdm_scaffold::evalkit;
use mdm_scaffold::nn::{ModelConfig, ModelParams};
use mdm_scaffold::scaffold::{self as sc, PromptContext};
use mdm_scaffold::{checkpoint, schema, synthcorpus, tokenization, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parse_mode(mode: &str) -> PyResult<DecodeMode> {
    mode.parse().map_err(py_err)
}

#[pyclass(name = "Vocabulary", frozen)]
struct PyVocabulary {
    inner: tokenization::Vocabulary,
}

#[pymethods]
impl PyVocabulary {
    #[staticmethod]
    fn build(texts: Vec<String>) -> PyResult<Self> {
        Ok(PyVocabulary {
            inner: tokenization::Vocabulary::build(&texts).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyVocabulary {
            inner: tokenization::Vocabulary::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn encode(&self, text: &str) -> PyResult<Vec<u32>> {
        Ok(self.inner.encode(text).map_err(py_err)?.into_inner())
    }

    fn decode(&self, ids: Vec<u32>) -> PyResult<String> {
        self.inner.decode(&ids).map_err(py_err)
    }

    fn id(&self, word: &str) -> Option<u32> {
        self.inner.id(word)
    }

    fn token(&self, id: u32) -> Option<String> {
        self.inner.token(id).map(str::to_string)
    }
}

#[pyclass(name = "Schema", frozen)]
struct PySchema {
    inner: schema::Schema,
}

#[pymethods]
impl PySchema {
    /// The built-in person schema.
    #[staticmethod]
    fn person() -> Self {
        PySchema {
            inner: schema::person_schema(),
        }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Vec<Self>> {
        let schemas = schema::parse_schemas(text).map_err(py_err)?;
        Ok(schemas.into_iter().map(|inner| PySchema { inner }).collect())
    }

    fn to_json(&self) -> String {
        schema::schemas_to_json(std::slice::from_ref(&self.inner))
    }

    #[getter]
    fn id(&self) -> String {
        self.inner.id.clone()
    }

    #[getter]
    fn field_names(&self) -> Vec<String> {
        self.inner.field_names().map(str::to_string).collect()
    }

    fn required_count(&self) -> usize {
        self.inner.required_count()
    }

    /// Number of frozen structural tokens in this schema's scaffold.
    fn structural_overhead(&self) -> usize {
        sc::structural_overhead(&self.inner)
    }

    /// Scaffold cells: token ids for literals and `None` for value slots.
    fn scaffold(&self, vocab: &PyVocabulary) -> PyResult<Vec<Option<u32>>> {
        let scaffold = sc::compile_scaffold(&self.inner, &vocab.inner).map_err(py_err)?;
        Ok(scaffold
            .cells
            .iter()
            .map(|c| match c {
                sc::Cell::Literal(id) => Some(*id),
                sc::Cell::Slot { .. } => None,
            })
            .collect())
    }

    fn __repr__(&self) -> String {
        format!("Schema(id={:?}, fields={:?})", self.inner.id, self.field_names())
    }
}

#[pyclass(name = "ParsedOutput", frozen, get_all)]
struct PyParsedOutput {
    ok: bool,
    fields: BTreeMap<String, Option<String>>,
    extras: Vec<String>,
}

impl From<evalkit::ParsedOutput> for PyParsedOutput {
    fn from(p: evalkit::ParsedOutput) -> Self {
        PyParsedOutput {
            ok: p.ok,
            fields: p.fields,
            extras: p.extras,
        }
    }
}

#[pymethods]
impl PyParsedOutput {
    fn __repr__(&self) -> String {
        format!("ParsedOutput(ok={}, fields={:?}, extras={:?})", self.ok, self.fields, self.extras)
    }
}

#[pyclass(name = "Generation", frozen, get_all)]
struct PyGeneration {
    output_text: String,
    output_json: String,
    confidences: Vec<Option<f32>>,
    forward_passes: usize,
}

#[pyclass(name = "Model", frozen)]
struct PyModel {
    params: ModelParams<f32>,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    #[pyo3(signature = (vocab_size, d_model=128, n_heads=4, n_layers=4, d_ff=512, max_len=256, seed=0))]
    fn init(
        vocab_size: usize,
        d_model: usize,
        n_heads: usize,
        n_layers: usize,
        d_ff: usize,
        max_len: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let config = ModelConfig {
            vocab_size,
            d_model,
            n_heads,
            n_layers,
            d_ff,
            max_len,
        };
        Ok(PyModel {
            params: ModelParams::init(config, seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            params: checkpoint::load_checkpoint(&path, None).map_err(py_err)?.params,
        })
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.params.num_parameters()
    }

    /// Decodes an extraction for `source_text`. The adaptive mode appends the
    /// null directive to the prompt itself.
    #[pyo3(signature = (vocab, schema, source_text, mode="scaffold", steps=8, baseline_response_len=64))]
    fn generate(
        &self,
        py: Python<'_>,
        vocab: &PyVocabulary,
        schema: &PySchema,
        source_text: &str,
        mode: &str,
        steps: usize,
        baseline_response_len: usize,
    ) -> PyResult<PyGeneration> {
        let mode = parse_mode(mode)?;
        let (v, s) = (&vocab.inner, &schema.inner);
        let (record, forward_passes) = py
            .detach(|| -> Result<(PredictionRecord, usize), Error> {
                let mut prompt = PromptContext::new(v, s, source_text)?;
                if mode == DecodeMode::Adaptive {
                    prompt = sc::augment_prompt(&prompt, v)?;
                }
                let cfg = DecodeConfig {
                    mode,
                    steps,
                    baseline_response_len,
                    seed: 0,
                };
                let generation = decode::generate(&self.params, v, &prompt, &cfg, Some(s))?;
                let rec = PredictionRecord::from_generation(0, steps, &generation, v, s)?;
                Ok((rec, generation.forward_passes))
            })
            .map_err(py_err)?;
        Ok(PyGeneration {
            output_text: record.output_text,
            output_json: record.output_json,
            confidences: record.confidences,
            forward_passes,
        })
    }
}

#[pyfunction]
fn parse_output(text: &str, schema: &PySchema) -> PyParsedOutput {
    evalkit::parse_output(text, &schema.inner).into()
}

#[pyfunction]
fn levenshtein(a: &str, b: &str) -> usize {
    evalkit::levenshtein(a, b)
}

#[pyfunction]
fn similarity(a: &str, b: &str) -> f64 {
    evalkit::similarity(a, b)
}

fn parse_all(texts: &[String], schema: &schema::Schema) -> Vec<evalkit::ParsedOutput> {
    texts.iter().map(|t| evalkit::parse_output(t, schema)).collect()
}

/// (sv, fc, sc) over raw output texts.
#[pyfunction]
fn structural_metrics(outputs: Vec<String>, schema: &PySchema) -> PyResult<(f64, f64, f64)> {
    evalkit::structural_metrics(&parse_all(&outputs, &schema.inner), &schema.inner).map_err(py_err)
}

/// (precision, recall, f1_exact, f1_fuzzy); golds are canonical gold JSON.
#[pyfunction]
#[pyo3(signature = (outputs, golds, schema, fuzzy_threshold=evalkit::DEFAULT_FUZZY_THRESHOLD))]
fn content_metrics(
    outputs: Vec<String>,
    golds: Vec<String>,
    schema: &PySchema,
    fuzzy_threshold: f64,
) -> PyResult<(f64, f64, f64, f64)> {
    let s = &schema.inner;
    let golds = golds
        .iter()
        .map(|g| synthcorpus::parse_gold_json(g, s))
        .collect::<Result<Vec<_>, _>>()
        .map_err(py_err)?;
    evalkit::content_metrics(&parse_all(&outputs, s), &golds, s, fuzzy_threshold).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (outputs, sources, schema, fuzzy_threshold=evalkit::DEFAULT_FUZZY_THRESHOLD))]
fn hallucination_rate(
    outputs: Vec<String>,
    sources: Vec<String>,
    schema: &PySchema,
    fuzzy_threshold: f64,
) -> PyResult<f64> {
    let s = &schema.inner;
    evalkit::hallucination_rate(&parse_all(&outputs, s), &sources, s, fuzzy_threshold).map_err(py_err)
}

#[pyfunction]
fn unmask_schedule(num_masked: usize, steps: usize) -> PyResult<Vec<usize>> {
    if steps == 0 {
        return Err(PyValueError::new_err("steps must be at least 1"));
    }
    Ok(decode::unmask_schedule(num_masked, steps))
}

/// Canonical JSON from a filled scaffold (whitespace-separated tokens).
#[pyfunction]
fn postprocess_nulls(text: &str, schema: &PySchema) -> String {
    let words: Vec<&str> = text.split_whitespace().collect();
    decode::postprocess_nulls(&words, &schema.inner)
}

/// Generates a person-schema corpus split; examples are JSON strings.
#[pyfunction]
#[pyo3(signature = (n_train, n_eval, null_pad_fraction=0.1, seed=0))]
fn make_split(n_train: usize, n_eval: usize, null_pad_fraction: f64, seed: u64) -> PyResult<(Vec<String>, Vec<String>)> {
    let split = synthcorpus::make_split(&[schema::person_schema()], n_train, n_eval, null_pad_fraction, seed)
        .map_err(py_err)?;
    let to_json = |xs: &[synthcorpus::Example]| -> PyResult<Vec<String>> {
        xs.iter()
            .map(|e| serde_json::to_string(e).map_err(|e| PyValueError::new_err(e.to_string())))
            .collect()
    };
    Ok((to_json(&split.train)?, to_json(&split.heldout)?))
}

#[pymodule]
fn mdm_scaffold_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVocabulary>()?;
    m.add_class::<PySchema>()?;
    m.add_class::<PyParsedOutput>()?;
    m.add_class::<PyGeneration>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(parse_output, m)?)?;
    m.add_function(wrap_pyfunction!(levenshtein, m)?)?;
    m.add_function(wrap_pyfunction!(similarity, m)?)?;
    m.add_function(wrap_pyfunction!(structural_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(content_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(hallucination_rate, m)?)?;
    m.add_function(wrap_pyfunction!(unmask_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(postprocess_nulls, m)?)?;
    m.add_function(wrap_pyfunction!(make_split, m)?)?;
    m.add("DIRECTIVE", sc::DIRECTIVE)?;
    Ok(())
}
