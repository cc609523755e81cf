//! Flat record schemas shared by the corpus generator, the scaffold compiler
//! and the evaluator.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenization::normalize_words;

pub const YEAR_MIN: i32 = 1700;
pub const YEAR_MAX: i32 = 2000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    String,
    Year,
    Enum(Vec<String>),
}

impl FieldKind {
    /// String and enum values sit inside JSON quotes; years are bare numbers.
    pub fn is_quoted(&self) -> bool {
        !matches!(self, FieldKind::Year)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub kind: FieldKind,
    pub required: bool,
    pub slot_width: usize,
}

impl FieldSpec {
    pub fn new(name: &str, kind: FieldKind, required: bool, slot_width: usize) -> Self {
        FieldSpec {
            name: name.to_string(),
            kind,
            required,
            slot_width,
        }
    }

    /// Whether `value` type-checks against this field's kind.
    pub fn accepts(&self, value: &str) -> bool {
        match &self.kind {
            FieldKind::String => !value.trim().is_empty(),
            FieldKind::Year => value
                .parse::<i32>()
                .is_ok_and(|y| (YEAR_MIN..=YEAR_MAX).contains(&y)),
            FieldKind::Enum(values) => values.iter().any(|v| v == value),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSchema")]
pub struct Schema {
    pub id: String,
    pub fields: Vec<FieldSpec>,
}

#[derive(Deserialize)]
struct RawSchema {
    id: String,
    fields: Vec<FieldSpec>,
}

impl TryFrom<RawSchema> for Schema {
    type Error = Error;

    fn try_from(raw: RawSchema) -> Result<Self> {
        Schema::new(&raw.id, raw.fields)
    }
}

fn single_word(s: &str) -> bool {
    normalize_words(s) == [s]
}

impl Schema {
    pub fn new(id: &str, fields: Vec<FieldSpec>) -> Result<Self> {
        let schema = Schema {
            id: id.to_string(),
            fields,
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidSchema(format!("{}: {msg}", self.id)));
        if !self.fields.iter().any(|f| f.required) {
            return bad("at least one field must be required".into());
        }
        let mut seen = HashSet::new();
        for f in &self.fields {
            if !single_word(&f.name) {
                return bad(format!("field name {:?} must be one lowercase word", f.name));
            }
            if !seen.insert(f.name.as_str()) {
                return bad(format!("duplicate field {:?}", f.name));
            }
            if f.slot_width == 0 {
                return bad(format!("field {:?} has zero slot width", f.name));
            }
            match &f.kind {
                // A bare JSON value slot holds exactly one number-or-null token.
                FieldKind::Year if f.slot_width != 1 => {
                    return bad(format!("year field {:?} must have slot width 1", f.name));
                }
                FieldKind::Enum(values) => {
                    if values.len() < 2 {
                        return bad(format!("enum field {:?} needs at least 2 values", f.name));
                    }
                    if let Some(v) = values
                        .iter()
                        .find(|v| normalize_words(v).len() > f.slot_width || !single_word_seq(v))
                    {
                        return bad(format!("enum value {v:?} does not fit field {:?}", f.name));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn field(&self, name: &str) -> Option<&FieldSpec> {
        self.fields.iter().find(|f| f.name == name)
    }

    pub fn field_names(&self) -> impl Iterator<Item = &str> {
        self.fields.iter().map(|f| f.name.as_str())
    }

    pub fn required_count(&self) -> usize {
        self.fields.iter().filter(|f| f.required).count()
    }
}

fn single_word_seq(v: &str) -> bool {
    normalize_words(v).join(" ") == v && !v.contains(['{', '}', '[', ']', ':', ',', '"'])
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum SchemaDocument {
    Many { schemas: Vec<Schema> },
    One(Schema),
}

pub fn parse_schemas(json: &str) -> Result<Vec<Schema>> {
    let doc: SchemaDocument = serde_json::from_str(json)?;
    let schemas = match doc {
        SchemaDocument::Many { schemas } => schemas,
        SchemaDocument::One(s) => vec![s],
    };
    if schemas.is_empty() {
        return Err(Error::InvalidSchema("schema document lists no schemas".into()));
    }
    Ok(schemas)
}

pub fn load_schemas(path: &Path) -> Result<Vec<Schema>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_schemas(&text)
}

pub fn schemas_to_json(schemas: &[Schema]) -> String {
    serde_json::to_string_pretty(&serde_json::json!({ "schemas": schemas }))
        .expect("schemas serialize")
}

pub const OCCUPATIONS: [&str; 12] = [
    "mathematician",
    "poet",
    "painter",
    "chemist",
    "engineer",
    "composer",
    "physician",
    "architect",
    "novelist",
    "astronomer",
    "sculptor",
    "philosopher",
];

pub const NATIONALITIES: [&str; 10] = [
    "english", "french", "german", "italian", "spanish", "dutch", "swedish", "polish", "irish",
    "scottish",
];

/// The default person schema used throughout the experiments.
pub fn person_schema() -> Schema {
    let strings = |vals: &[&str]| vals.iter().map(|s| s.to_string()).collect();
    Schema::new(
        "person",
        vec![
            FieldSpec::new("name", FieldKind::String, true, 3),
            FieldSpec::new("birth_year", FieldKind::Year, true, 1),
            FieldSpec::new("occupation", FieldKind::Enum(strings(&OCCUPATIONS)), true, 1),
            FieldSpec::new("nationality", FieldKind::Enum(strings(&NATIONALITIES)), false, 1),
            FieldSpec::new("death_year", FieldKind::Year, false, 1),
            FieldSpec::new("notable_work", FieldKind::String, false, 4),
        ],
    )
    .expect("person schema is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn person_schema_round_trips_through_json() {
        let json = schemas_to_json(&[person_schema()]);
        assert_eq!(parse_schemas(&json).unwrap(), vec![person_schema()]);
        let one = serde_json::to_string(&person_schema()).unwrap();
        assert_eq!(parse_schemas(&one).unwrap(), vec![person_schema()]);
    }

    #[test]
    fn kind_json_shape() {
        let f: FieldSpec = serde_json::from_str(
            r#"{"name":"c","kind":{"enum":["x","y"]},"required":true,"slot_width":1}"#,
        )
        .unwrap();
        assert_eq!(f.kind, FieldKind::Enum(vec!["x".into(), "y".into()]));
        let f: FieldSpec =
            serde_json::from_str(r#"{"name":"y","kind":"year","required":false,"slot_width":1}"#)
                .unwrap();
        assert_eq!(f.kind, FieldKind::Year);
    }

    #[test]
    fn validation_errors() {
        let s = |fields| Schema::new("t", fields);
        assert!(s(vec![FieldSpec::new("a", FieldKind::String, false, 1)]).is_err());
        assert!(s(vec![FieldSpec::new("a", FieldKind::String, true, 0)]).is_err());
        assert!(s(vec![
            FieldSpec::new("a", FieldKind::String, true, 1),
            FieldSpec::new("a", FieldKind::Year, true, 1)
        ])
        .is_err());
        assert!(s(vec![FieldSpec::new("a", FieldKind::Enum(vec!["x".into()]), true, 1)]).is_err());
        assert!(s(vec![FieldSpec::new("a", FieldKind::Year, true, 2)]).is_err());
        assert!(s(vec![FieldSpec::new("Bad Name", FieldKind::String, true, 1)]).is_err());
        assert!(parse_schemas(r#"{"schemas": []}"#).is_err());
        assert!(parse_schemas(r#"{"id":"x","fields":[]}"#).is_err());
    }

    #[test]
    fn accepts_by_kind() {
        let s = person_schema();
        assert!(s.field("birth_year").unwrap().accepts("1815"));
        assert!(!s.field("birth_year").unwrap().accepts("1699"));
        assert!(!s.field("birth_year").unwrap().accepts("poet"));
        assert!(s.field("occupation").unwrap().accepts("poet"));
        assert!(!s.field("occupation").unwrap().accepts("astronaut"));
        assert!(s.field("name").unwrap().accepts("ada"));
        assert!(!s.field("name").unwrap().accepts(" "));
    }
}
