//! Schema scaffolds: the response template whose JSON structure is fixed and
//! whose value positions are mask slots, plus the instruction prompts.

use std::ops::Range;

use crate::decode::{DenoiseState, SlotClass};
use crate::error::{Error, Result};
use crate::schema::Schema;
use crate::tokenization::{normalize_words, TokenId, Vocabulary, MASK, SEP};

/// Appended to the instruction for self-adaptive decoding. Null-padded
/// training examples use the same words.
pub const DIRECTIVE: &str = "fill unused value positions with null";

pub fn instruction_text(schema: &Schema, source_text: &str) -> String {
    let names: Vec<&str> = schema.field_names().collect();
    format!("extract fields {} from : {}", names.join(" "), source_text)
}

pub fn augmented_instruction_text(schema: &Schema, source_text: &str) -> String {
    format!("{} {DIRECTIVE}", instruction_text(schema, source_text))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cell {
    Literal(TokenId),
    /// Position `offset` within the slot of schema field `field`.
    Slot { field: usize, offset: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotSpan {
    pub field: String,
    pub range: Range<usize>,
    /// Slot sits inside JSON quotes (string and enum fields).
    pub quoted: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scaffold {
    pub cells: Vec<Cell>,
    pub spans: Vec<SlotSpan>,
}

impl Scaffold {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn slot_count(&self) -> usize {
        self.spans.iter().map(|s| s.range.len()).sum()
    }

    pub fn span(&self, field: &str) -> Option<&SlotSpan> {
        self.spans.iter().find(|s| s.field == field)
    }

    /// Token ids with every slot filled by `fill(position)`.
    pub fn render(&self, mut fill: impl FnMut(usize) -> TokenId) -> Vec<TokenId> {
        self.cells
            .iter()
            .enumerate()
            .map(|(i, c)| match c {
                Cell::Literal(id) => *id,
                Cell::Slot { .. } => fill(i),
            })
            .collect()
    }
}

/// Word-level layout shared by the compiler and null post-processing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum LayoutCell {
    Literal(&'static str),
    Key(usize),
    Slot(usize),
}

pub(crate) fn layout(schema: &Schema) -> Vec<LayoutCell> {
    use LayoutCell::*;
    let mut cells = vec![Literal("{")];
    for (i, f) in schema.fields.iter().enumerate() {
        if i > 0 {
            cells.push(Literal(","));
        }
        cells.extend([Literal("\""), Key(i), Literal("\""), Literal(":")]);
        let quoted = f.kind.is_quoted();
        if quoted {
            cells.push(Literal("\""));
        }
        cells.extend(std::iter::repeat_n(Slot(i), f.slot_width));
        if quoted {
            cells.push(Literal("\""));
        }
    }
    cells.push(Literal("}"));
    cells
}

/// Number of literal (non-slot) cells in the scaffold of `schema`.
pub fn structural_overhead(schema: &Schema) -> usize {
    let n = schema.fields.len();
    let per_field: usize = schema
        .fields
        .iter()
        .map(|f| if f.kind.is_quoted() { 6 } else { 4 })
        .sum();
    2 + per_field + n.saturating_sub(1)
}

/// Compiles `schema` into its scaffold: `{ "f1" : "⟨slots⟩" , "f2" : ⟨slots⟩ … }`
/// with quoted slots for string/enum fields and bare slots for years.
pub fn compile_scaffold(schema: &Schema, vocab: &Vocabulary) -> Result<Scaffold> {
    schema.validate()?;
    let lookup = |w: &str| vocab.id(w).ok_or_else(|| Error::OutOfVocabulary(w.to_string()));
    let mut cells = Vec::new();
    let mut spans: Vec<SlotSpan> = Vec::new();
    for cell in layout(schema) {
        let pos = cells.len();
        match cell {
            LayoutCell::Literal(w) => cells.push(Cell::Literal(lookup(w)?)),
            LayoutCell::Key(f) => cells.push(Cell::Literal(lookup(&schema.fields[f].name)?)),
            LayoutCell::Slot(f) => {
                let field = &schema.fields[f];
                match spans.last_mut() {
                    Some(span) if span.field == field.name => span.range.end = pos + 1,
                    _ => spans.push(SlotSpan {
                        field: field.name.clone(),
                        range: pos..pos + 1,
                        quoted: field.kind.is_quoted(),
                    }),
                }
                let offset = pos - spans.last().unwrap().range.start;
                cells.push(Cell::Slot { field: f, offset });
            }
        }
    }
    Ok(Scaffold { cells, spans })
}

/// Instruction tokens (plain prompt Q, or augmented Q⁺ when `adaptive`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptContext {
    pub tokens: Vec<TokenId>,
    pub adaptive: bool,
}

impl PromptContext {
    pub fn new(vocab: &Vocabulary, schema: &Schema, source_text: &str) -> Result<Self> {
        Self::from_text(vocab, &instruction_text(schema, source_text))
    }

    /// Encodes an instruction; it counts as adaptive when it already ends with
    /// the directive.
    pub fn from_text(vocab: &Vocabulary, text: &str) -> Result<Self> {
        let words = normalize_words(text);
        let directive = normalize_words(DIRECTIVE);
        let adaptive = words.ends_with(&directive);
        Ok(PromptContext {
            tokens: vocab.encode_words(&words)?.into_inner(),
            adaptive,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Appends the null directive, producing Q⁺.
pub fn augment_prompt(q: &PromptContext, vocab: &Vocabulary) -> Result<PromptContext> {
    if q.adaptive {
        return Err(Error::AlreadyAugmented);
    }
    let mut tokens = q.tokens.clone();
    tokens.extend(vocab.encode(DIRECTIVE)?.iter());
    Ok(PromptContext {
        tokens,
        adaptive: true,
    })
}

pub fn directive_len() -> usize {
    normalize_words(DIRECTIVE).len()
}

/// `q ⊕ SEP ⊕ scaffold` with every slot rendered as MASK. Prompt, SEP and
/// literal cells are frozen; exactly the slots are masked.
pub fn scaffold_to_initial_state(
    q: &PromptContext,
    scaffold: &Scaffold,
    max_len: usize,
) -> Result<DenoiseState> {
    let len = q.len() + 1 + scaffold.len();
    if len > max_len {
        return Err(Error::SequenceTooLong { len, max_len });
    }
    let start = q.len() + 1;
    let mut seq = q.tokens.clone();
    seq.push(SEP);
    seq.extend(scaffold.render(|_| MASK));
    let mut masked = vec![false; len];
    let mut frozen = vec![true; len];
    let mut class = vec![SlotClass::Free; len];
    for span in &scaffold.spans {
        for i in span.range.clone() {
            masked[start + i] = true;
            frozen[start + i] = false;
            class[start + i] = if span.quoted {
                SlotClass::Text
            } else {
                SlotClass::Bare
            };
        }
    }
    Ok(DenoiseState {
        seq,
        masked,
        frozen,
        class,
        response_start: start,
        step_index: 0,
        total_steps: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{person_schema, FieldKind, FieldSpec};
    use crate::synthcorpus::{render_gold_json, sample_record};

    fn vocab_for(schema: &Schema) -> Vocabulary {
        let mut texts: Vec<String> = (0..300)
            .map(|s| render_gold_json(&sample_record(schema, s), schema))
            .collect();
        texts.push(instruction_text(schema, "a"));
        texts.push(DIRECTIVE.to_string());
        Vocabulary::build(&texts).unwrap()
    }

    #[test]
    fn single_string_field_layout() {
        let schema = Schema::new("t", vec![FieldSpec::new("name", FieldKind::String, true, 2)]).unwrap();
        let v = Vocabulary::build(&[r#"{ "name" : "x" }"#]).unwrap();
        let s = compile_scaffold(&schema, &v).unwrap();
        let shown: Vec<String> = s
            .cells
            .iter()
            .map(|c| match c {
                Cell::Literal(id) => v.token(*id).unwrap().to_string(),
                Cell::Slot { .. } => "S".to_string(),
            })
            .collect();
        assert_eq!(shown.join(" "), r#"{ " name " : " S S " }"#);
        assert_eq!(s.span("name").unwrap().range, 6..8);
    }

    #[test]
    fn length_is_widths_plus_overhead() {
        let schema = person_schema();
        let s = compile_scaffold(&schema, &vocab_for(&schema)).unwrap();
        let widths: usize = schema.fields.iter().map(|f| f.slot_width).sum();
        // 2 braces, 5 commas, 4 string/enum fields × 6, 2 year fields × 4
        assert_eq!(structural_overhead(&schema), 2 + 5 + 24 + 8);
        assert_eq!(s.len(), widths + structural_overhead(&schema));
        assert_eq!(s.slot_count(), widths);
    }

    #[test]
    fn null_fill_parses() {
        let schema = person_schema();
        let v = vocab_for(&schema);
        let s = compile_scaffold(&schema, &v).unwrap();
        let text = v.decode(&s.render(|_| v.null_id())).unwrap();
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(value.as_object().unwrap().len(), schema.fields.len());
        assert!(s.cells.iter().all(|c| *c != Cell::Literal(MASK)));
    }

    #[test]
    fn oov_field_name_rejected() {
        let schema = person_schema();
        let v = Vocabulary::build(&[r#"{ "name" : "x" }"#]).unwrap();
        assert!(matches!(compile_scaffold(&schema, &v), Err(Error::OutOfVocabulary(_))));
    }

    #[test]
    fn augmentation_contract() {
        let schema = person_schema();
        let v = vocab_for(&schema);
        let q = PromptContext::new(&v, &schema, "a").unwrap();
        assert!(!q.adaptive);
        for name in schema.field_names() {
            assert!(q.tokens.contains(&v.id(name).unwrap()));
        }
        let q2 = augment_prompt(&q, &v).unwrap();
        assert!(q2.adaptive);
        assert_eq!(q2.len(), q.len() + directive_len());
        assert!(q2.tokens.contains(&v.null_id()));
        assert!(matches!(augment_prompt(&q2, &v), Err(Error::AlreadyAugmented)));
        let reparsed = PromptContext::from_text(&v, &augmented_instruction_text(&schema, "a")).unwrap();
        assert_eq!(reparsed, q2);
    }

    #[test]
    fn initial_state_masks_exactly_the_slots() {
        let schema = person_schema();
        let v = vocab_for(&schema);
        let s = compile_scaffold(&schema, &v).unwrap();
        let q = PromptContext::new(&v, &schema, "a").unwrap();
        let st = scaffold_to_initial_state(&q, &s, 256).unwrap();
        assert_eq!(st.masked_count(), s.slot_count());
        let literal_positions: Vec<usize> = s
            .cells
            .iter()
            .enumerate()
            .filter(|(_, c)| matches!(c, Cell::Literal(_)))
            .map(|(i, _)| i + st.response_start)
            .collect();
        for p in literal_positions {
            assert!(st.frozen[p] && !st.masked[p]);
        }
        assert!(st.frozen[..st.response_start].iter().all(|&f| f));
        assert!(scaffold_to_initial_state(&q, &s, 10).is_err());
    }
}
