//! Synthetic biography corpus: records, source text that grounds every value,
//! canonical gold JSON, and the instruction-style training examples built
//! from them.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::scaffold::{augmented_instruction_text, instruction_text};
use crate::schema::{FieldKind, FieldSpec, Schema, YEAR_MAX, YEAR_MIN};
use crate::tokenization::{normalize, NULL_WORD};

const FIRST_NAMES: [&str; 40] = [
    "ada", "charles", "marie", "isaac", "emily", "james", "clara", "henry", "sofia", "peter",
    "lucia", "thomas", "agnes", "victor", "helena", "oscar", "rosa", "felix", "irene", "hugo",
    "alma", "edgar", "greta", "louis", "mila", "arthur", "nora", "jonas", "ida", "leon", "vera",
    "anton", "elsa", "robert", "lena", "simon", "hilda", "paul", "olga", "martin",
];

const LAST_NAMES: [&str; 40] = [
    "lovelace", "babbage", "curie", "newton", "bronte", "maxwell", "schumann", "cavendish",
    "kovalevskaya", "rubens", "galvani", "hobbes", "varda", "hugo", "blavatsky", "wilde",
    "luxemburg", "mendel", "joliot", "grotius", "mahler", "degas", "garbo", "pasteur", "kunis",
    "conan", "ephron", "salk", "pfeiffer", "euler", "nabokov", "dvorak", "lasker", "boyle",
    "meitner", "laplace", "ruskin", "klee", "tesla", "lorentz",
];

const WORK_ADJECTIVES: [&str; 20] = [
    "silent", "golden", "broken", "distant", "hidden", "northern", "quiet", "crimson", "winter",
    "final", "lost", "endless", "secret", "pale", "burning", "gentle", "ancient", "second",
    "little", "open",
];

const WORK_NOUNS: [&str; 20] = [
    "river", "garden", "engine", "harbor", "symphony", "atlas", "theorem", "tower", "mirror",
    "lantern", "voyage", "meadow", "cathedral", "compass", "orchard", "requiem", "fountain",
    "chronicle", "bridge", "sonnet",
];

const NAME_TEMPLATES: [&str; 5] = [
    "{} was a notable figure .",
    "this is the story of {} .",
    "{} lived a remarkable life .",
    "the life of {} is well documented .",
    "{} is the subject of this biography .",
];

const BIRTH_TEMPLATES: [&str; 5] = [
    "they were born in {} .",
    "their birth took place in {} .",
    "born in {} , they grew up quickly .",
    "the year {} saw their birth .",
    "they came into the world in {} .",
];

const DEATH_TEMPLATES: [&str; 5] = [
    "they died in {} .",
    "their death came in {} .",
    "they passed away in {} .",
    "in {} they died .",
    "their life ended in {} .",
];

const OCCUPATION_TEMPLATES: [&str; 5] = [
    "they worked as a {} .",
    "by profession they were a {} .",
    "they were known as a {} .",
    "they earned a living as a {} .",
    "{} was their chosen profession .",
];

const NATIONALITY_TEMPLATES: [&str; 5] = [
    "they were {} by birth .",
    "they held {} citizenship .",
    "their nationality was {} .",
    "they were a {} citizen .",
    "they came from a {} family .",
];

const WORK_TEMPLATES: [&str; 5] = [
    "they are best known for {} .",
    "their most famous work is {} .",
    "they produced {} .",
    "critics praised {} .",
    "their notable work was {} .",
];

/// Fallback templates for string fields without a dedicated phrasing; the
/// first placeholder is the field label, the second the value.
const GENERIC_TEMPLATES: [&str; 5] = [
    "their {} was {} .",
    "records list their {} as {} .",
    "the {} on file is {} .",
    "as for {} , it was {} .",
    "their recorded {} is {} .",
];

fn templates_for(field: &str) -> Option<&'static [&'static str; 5]> {
    match field {
        "name" => Some(&NAME_TEMPLATES),
        "birth_year" => Some(&BIRTH_TEMPLATES),
        "death_year" => Some(&DEATH_TEMPLATES),
        "occupation" => Some(&OCCUPATION_TEMPLATES),
        "nationality" => Some(&NATIONALITY_TEMPLATES),
        "notable_work" => Some(&WORK_TEMPLATES),
        _ => None,
    }
}

/// Field values in schema order; `None` marks an absent optional field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub values: Vec<(String, Option<String>)>,
}

impl Record {
    pub fn get(&self, field: &str) -> Option<&str> {
        self.values
            .iter()
            .find(|(name, _)| name == field)
            .and_then(|(_, v)| v.as_deref())
    }

    pub fn present(&self) -> impl Iterator<Item = (&str, &str)> {
        self.values
            .iter()
            .filter_map(|(n, v)| v.as_deref().map(|v| (n.as_str(), v)))
    }

    pub fn absent_optional_count(&self, schema: &Schema) -> usize {
        schema
            .fields
            .iter()
            .filter(|f| !f.required && self.get(&f.name).is_none())
            .count()
    }

    /// Values of the first field and the first enum field; held-out examples
    /// never share this pair with training examples.
    pub fn combination_key(&self, schema: &Schema) -> (String, String) {
        let first = self.values.first().and_then(|(_, v)| v.clone());
        let enum_value = schema
            .fields
            .iter()
            .find(|f| matches!(f.kind, FieldKind::Enum(_)))
            .and_then(|f| self.get(&f.name).map(str::to_string));
        (first.unwrap_or_default(), enum_value.unwrap_or_default())
    }
}

fn person_name(rng: &mut ChaCha8Rng, width: usize) -> String {
    let first = *FIRST_NAMES.choose(rng).unwrap();
    let last = *LAST_NAMES.choose(rng).unwrap();
    match width {
        1 => last.to_string(),
        2 => format!("{first} {last}"),
        _ if rng.random_bool(0.3) => {
            let middle = *FIRST_NAMES.choose(rng).unwrap();
            format!("{first} {middle} {last}")
        }
        _ => format!("{first} {last}"),
    }
}

fn work_title(rng: &mut ChaCha8Rng, width: usize) -> String {
    let adj = *WORK_ADJECTIVES.choose(rng).unwrap();
    let noun = *WORK_NOUNS.choose(rng).unwrap();
    match rng.random_range(1..=width.min(4)) {
        1 => noun.to_string(),
        2 => format!("{adj} {noun}"),
        3 => format!("the {adj} {noun}"),
        _ => {
            let other = *WORK_NOUNS.choose(rng).unwrap();
            format!("the {noun} of {other}")
        }
    }
}

fn sample_value(field: &FieldSpec, rng: &mut ChaCha8Rng) -> String {
    match &field.kind {
        FieldKind::Year => rng.random_range(YEAR_MIN..=YEAR_MAX).to_string(),
        FieldKind::Enum(values) => values.choose(rng).unwrap().clone(),
        FieldKind::String if field.name.contains("name") => person_name(rng, field.slot_width),
        FieldKind::String => work_title(rng, field.slot_width),
    }
}

/// Required fields are always populated; each optional field is present with
/// probability one half.
pub fn sample_record(schema: &Schema, rng_seed: u64) -> Record {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let values = schema
        .fields
        .iter()
        .map(|f| {
            let present = f.required || rng.random_bool(0.5);
            let value = sample_value(f, &mut rng);
            (f.name.clone(), present.then_some(value))
        })
        .collect();
    Record { values }
}

fn fill(template: &str, args: &[&str]) -> String {
    let mut out = String::with_capacity(template.len() + 32);
    let mut parts = template.split("{}");
    out.push_str(parts.next().unwrap_or_default());
    for (part, arg) in parts.zip(args) {
        out.push_str(arg);
        out.push_str(part);
    }
    out
}

fn sentence(field: &str, value: &str, rng: &mut ChaCha8Rng) -> String {
    match templates_for(field) {
        Some(t) => fill(t.choose(rng).unwrap(), &[value]),
        None => {
            let label = field.replace('_', " ");
            fill(GENERIC_TEMPLATES.choose(rng).unwrap(), &[&label, value])
        }
    }
}

/// One sentence per present field. The first field leads; the remaining
/// sentences appear in a seed-dependent order.
pub fn render_text(record: &Record, rng_seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut present: Vec<(&str, &str)> = record.present().collect();
    if present.len() > 1 {
        present[1..].shuffle(&mut rng);
    }
    present
        .iter()
        .map(|(f, v)| sentence(f, v, &mut rng))
        .collect::<Vec<_>>()
        .join(" ")
}

fn json_value(field: &FieldSpec, value: Option<&str>) -> String {
    match value {
        None => NULL_WORD.to_string(),
        Some(v) if field.kind.is_quoted() => format!("\"{v}\""),
        Some(v) => v.to_string(),
    }
}

fn render_object(entries: impl Iterator<Item = (String, String)>) -> String {
    let body: Vec<String> = entries.map(|(k, v)| format!("\"{k}\" : {v}")).collect();
    if body.is_empty() {
        "{ }".to_string()
    } else {
        format!("{{ {} }}", body.join(" , "))
    }
}

/// Canonical gold JSON: schema order, absent fields as `null`, single spaces
/// between JSON tokens.
pub fn render_gold_json(record: &Record, schema: &Schema) -> String {
    render_object(
        schema
            .fields
            .iter()
            .map(|f| (f.name.clone(), json_value(f, record.get(&f.name)))),
    )
}

/// Target in scaffold layout: every value padded with `null` words to its slot
/// width, absent fields as `slot_width` nulls.
pub fn render_padded_json(record: &Record, schema: &Schema) -> String {
    render_object(schema.fields.iter().map(|f| {
        let mut words: Vec<&str> = record
            .get(&f.name)
            .map(|v| v.split(' ').collect())
            .unwrap_or_default();
        while words.len() < f.slot_width {
            words.push(NULL_WORD);
        }
        let joined = words.join(" ");
        let rendered = if f.kind.is_quoted() {
            format!("\"{joined}\"")
        } else {
            joined
        };
        (f.name.clone(), rendered)
    }))
}

/// Parses canonical gold JSON back into a record of `schema`.
pub fn parse_gold_json(json: &str, schema: &Schema) -> Result<Record> {
    let value: Value = serde_json::from_str(json)?;
    let obj = value
        .as_object()
        .ok_or_else(|| Error::Eval("gold JSON is not an object".into()))?;
    let values = schema
        .fields
        .iter()
        .map(|f| {
            let v = match obj.get(&f.name) {
                None | Some(Value::Null) => None,
                Some(Value::String(s)) => Some(s.clone()),
                Some(other) => Some(other.to_string()),
            };
            (f.name.clone(), v)
        })
        .collect();
    Ok(Record { values })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub source_text: String,
    pub prompt: String,
    pub gold_json: String,
    pub schema_id: String,
    pub padded: bool,
}

impl Example {
    pub fn record(&self, schema: &Schema) -> Result<Record> {
        parse_gold_json(&self.gold_json, schema)
    }

    /// Response text the model is trained to produce for this example.
    pub fn target_json(&self, schema: &Schema) -> Result<String> {
        if self.padded {
            Ok(render_padded_json(&self.record(schema)?, schema))
        } else {
            Ok(self.gold_json.clone())
        }
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn make_example(schema: &Schema, record: &Record, text_seed: u64, padded: bool) -> Example {
    let source_text = render_text(record, text_seed);
    let prompt = if padded {
        augmented_instruction_text(schema, &source_text)
    } else {
        instruction_text(schema, &source_text)
    };
    Example {
        gold_json: render_gold_json(record, schema),
        source_text,
        prompt,
        schema_id: schema.id.clone(),
        padded,
    }
}

/// Draws candidate `index` of a stream rooted at `seed`; the record seed is
/// `seed + index`.
fn candidate(
    schemas: &[Schema],
    seed: u64,
    index: u64,
    null_pad_fraction: f64,
) -> (usize, Record, u64, bool) {
    let example_seed = seed.wrapping_add(index);
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix(example_seed));
    let schema_idx = rng.random_range(0..schemas.len());
    let padded = rng.random_bool(null_pad_fraction.clamp(0.0, 1.0));
    let text_seed = rng.random();
    let record = sample_record(&schemas[schema_idx], example_seed);
    (schema_idx, record, text_seed, padded)
}

fn generate(
    schemas: &[Schema],
    n: usize,
    null_pad_fraction: f64,
    seed: u64,
    mut keep: impl FnMut(&Schema, &Record) -> bool,
) -> Vec<Example> {
    let mut out = Vec::with_capacity(n);
    let mut index = 0u64;
    while out.len() < n {
        let (si, record, text_seed, padded) = candidate(schemas, seed, index, null_pad_fraction);
        index += 1;
        if keep(&schemas[si], &record) {
            out.push(make_example(&schemas[si], &record, text_seed, padded));
        }
    }
    out
}

fn check_args(schemas: &[Schema], null_pad_fraction: f64) -> Result<()> {
    if schemas.is_empty() {
        return Err(Error::InvalidSchema("no schemas given".into()));
    }
    if !(0.0..=1.0).contains(&null_pad_fraction) {
        return Err(Error::Config(format!(
            "null_pad_fraction {null_pad_fraction} outside [0, 1]"
        )));
    }
    Ok(())
}

/// `n` instruction examples; a `null_pad_fraction` share use the augmented
/// prompt and a null-padded scaffold-layout target.
pub fn make_training_set(
    schemas: &[Schema],
    n: usize,
    null_pad_fraction: f64,
    rng_seed: u64,
) -> Result<Vec<Example>> {
    check_args(schemas, null_pad_fraction)?;
    Ok(generate(schemas, n, null_pad_fraction, rng_seed, |_, _| true))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusSplit {
    pub train: Vec<Example>,
    pub heldout: Vec<Example>,
}

const HELDOUT_SALT: u64 = 0x5EED_0F_4E1D_0u64;

/// Training and held-out sets whose (name, occupation) combinations are
/// disjoint. Held-out examples always use the plain prompt.
pub fn make_split(
    schemas: &[Schema],
    n_train: usize,
    n_eval: usize,
    null_pad_fraction: f64,
    rng_seed: u64,
) -> Result<CorpusSplit> {
    check_args(schemas, null_pad_fraction)?;
    if n_train == 0 || n_eval == 0 {
        return Err(Error::Config("n_train and n_eval must be positive".into()));
    }
    let mut held_keys = HashSet::new();
    let heldout = generate(schemas, n_eval, 0.0, rng_seed ^ HELDOUT_SALT, |s, r| {
        held_keys.insert(r.combination_key(s));
        true
    });
    let train = generate(schemas, n_train, null_pad_fraction, rng_seed, |s, r| {
        !held_keys.contains(&r.combination_key(s))
    });
    Ok(CorpusSplit { train, heldout })
}

pub fn write_jsonl(path: &Path, examples: &[Example]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Example>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex = serde_json::from_str(&line).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(ex);
    }
    Ok(out)
}

/// True when every word of `value` appears as a contiguous run in `source`
/// after normalization.
pub fn is_grounded_verbatim(value: &str, source: &str) -> bool {
    let v = normalize(value);
    let s = normalize(source);
    let v: Vec<&str> = v.split(' ').collect();
    let s: Vec<&str> = s.split(' ').collect();
    !v.is_empty() && s.windows(v.len()).any(|w| w == v.as_slice())
}
