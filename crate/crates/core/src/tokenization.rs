//! Word-level tokenizer with the reserved symbols needed for masked diffusion.
//!
//! Text is normalized by lowercasing and splitting JSON punctuation
//! (`{ } [ ] : , "`) into standalone words, so every structural character of a
//! JSON document maps to exactly one token.

use std::collections::HashMap;
use std::fs;
use std::ops::Deref;
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const MASK: TokenId = 0;
pub const PAD: TokenId = 1;
pub const BOS: TokenId = 2;
pub const EOS: TokenId = 3;
pub const SEP: TokenId = 4;
pub const NUM_RESERVED: usize = 5;

/// Reserved token strings. They contain brackets, which normalization always
/// splits, so no normalized word can collide with them.
pub const RESERVED: [&str; NUM_RESERVED] = ["[MASK]", "[PAD]", "[BOS]", "[EOS]", "[SEP]"];

pub const MASK_DISPLAY: &str = "⟨M⟩";
pub const NULL_WORD: &str = "null";
pub const JSON_PUNCTUATION: [char; 7] = ['{', '}', '[', ']', ':', ',', '"'];

pub fn is_json_punctuation(word: &str) -> bool {
    let mut chars = word.chars();
    matches!((chars.next(), chars.next()), (Some(c), None) if JSON_PUNCTUATION.contains(&c))
}

/// Lowercases ASCII and splits on whitespace and JSON punctuation.
pub fn normalize_words(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    for raw in text.split_whitespace() {
        let mut current = String::new();
        for c in raw.chars() {
            if JSON_PUNCTUATION.contains(&c) {
                if !current.is_empty() {
                    words.push(std::mem::take(&mut current));
                }
                words.push(c.to_string());
            } else {
                current.push(c.to_ascii_lowercase());
            }
        }
        if !current.is_empty() {
            words.push(current);
        }
    }
    words
}

pub fn normalize(text: &str) -> String {
    normalize_words(text).join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence(pub Vec<TokenId>);

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>) -> Self {
        TokenSequence(ids)
    }

    pub fn into_inner(self) -> Vec<TokenId> {
        self.0
    }
}

impl Deref for TokenSequence {
    type Target = [TokenId];

    fn deref(&self) -> &[TokenId] {
        &self.0
    }
}

impl From<Vec<TokenId>> for TokenSequence {
    fn from(ids: Vec<TokenId>) -> Self {
        TokenSequence(ids)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    word_to_id: HashMap<String, TokenId>,
}

impl Vocabulary {
    fn from_words<I: IntoIterator<Item = String>>(words: I) -> Self {
        let mut vocab = Vocabulary {
            tokens: Vec::new(),
            word_to_id: HashMap::new(),
        };
        for r in RESERVED {
            vocab.push(r.to_string());
        }
        for w in words {
            vocab.push(w);
        }
        vocab.push(NULL_WORD.to_string());
        vocab
    }

    fn push(&mut self, word: String) {
        if !self.word_to_id.contains_key(&word) {
            self.word_to_id.insert(word.clone(), self.tokens.len() as TokenId);
            self.tokens.push(word);
        }
    }

    /// Builds a vocabulary of the reserved symbols followed by every
    /// normalized word in first-occurrence order, with `null` appended if the
    /// corpus never used it.
    pub fn build<S: AsRef<str>>(corpus: &[S]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(Self::from_words(
            corpus.iter().flat_map(|t| normalize_words(t.as_ref())),
        ))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Id of a normal (non-reserved) word.
    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.word_to_id
            .get(word)
            .copied()
            .filter(|&id| id as usize >= NUM_RESERVED)
    }

    pub fn null_id(&self) -> TokenId {
        self.word_to_id[NULL_WORD]
    }

    pub fn is_reserved(id: TokenId) -> bool {
        (id as usize) < NUM_RESERVED
    }

    pub fn encode(&self, text: &str) -> Result<TokenSequence> {
        self.encode_words(&normalize_words(text))
    }

    pub fn encode_words<S: AsRef<str>>(&self, words: &[S]) -> Result<TokenSequence> {
        words
            .iter()
            .map(|w| {
                self.id(w.as_ref())
                    .ok_or_else(|| Error::OutOfVocabulary(w.as_ref().to_string()))
            })
            .collect::<Result<Vec<_>>>()
            .map(TokenSequence)
    }

    /// Renders ids as space-joined words. MASK shows as `⟨M⟩`; the other
    /// reserved symbols render as nothing.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        Ok(self.decode_words(ids)?.join(" "))
    }

    pub fn decode_words(&self, ids: &[TokenId]) -> Result<Vec<&str>> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            let word = self.token(id).ok_or(Error::InvalidTokenId {
                id,
                size: self.len(),
            })?;
            match id {
                MASK => out.push(MASK_DISPLAY),
                _ if Self::is_reserved(id) => {}
                _ => out.push(word),
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let lines: Vec<&str> = text.lines().collect();
        let malformed = |line: usize, message: String| Error::Malformed {
            path: path.to_path_buf(),
            line,
            message,
        };
        for (i, r) in RESERVED.iter().enumerate() {
            if lines.get(i) != Some(r) {
                return Err(malformed(i + 1, format!("expected reserved token {r}")));
            }
        }
        let mut vocab = Vocabulary {
            tokens: Vec::with_capacity(lines.len()),
            word_to_id: HashMap::with_capacity(lines.len()),
        };
        for (i, line) in lines.iter().enumerate() {
            if vocab.word_to_id.contains_key(*line) {
                return Err(malformed(i + 1, format!("duplicate token {line:?}")));
            }
            vocab.push(line.to_string());
        }
        if !vocab.word_to_id.contains_key(NULL_WORD) {
            return Err(malformed(lines.len(), "vocabulary lacks \"null\"".into()));
        }
        Ok(vocab)
    }
}
