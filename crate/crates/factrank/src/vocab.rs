//! Token vocabularies with a reserved out-of-vocabulary index.
//!
//! Index 0 is always the OOV slot; unseen tokens map to it. On disk a
//! vocabulary is one token per line, the line number being the id, with line
//! 0 holding the reserved OOV marker.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const OOV_TOKEN: &str = "<oov>";
pub const OOV_ID: usize = 0;

#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    lookup: HashMap<String, usize>,
}

impl Vocab {
    /// Build from a token stream, keeping first-seen order. The OOV slot is
    /// prepended automatically.
    pub fn build<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut vocab = Vocab {
            tokens: vec![OOV_TOKEN.to_string()],
            lookup: HashMap::new(),
        };
        for tok in tokens {
            let tok = tok.as_ref();
            if tok.is_empty() || vocab.lookup.contains_key(tok) {
                continue;
            }
            vocab.lookup.insert(tok.to_string(), vocab.tokens.len());
            vocab.tokens.push(tok.to_string());
        }
        vocab
    }

    /// Number of ids, the OOV slot included.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 1
    }

    /// Id of a token; unknown tokens map to [`OOV_ID`].
    pub fn id(&self, token: &str) -> usize {
        self.lookup.get(token).copied().unwrap_or(OOV_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// Map every character of a string (spaces included) through the
    /// vocabulary.
    pub fn char_ids(&self, text: &str) -> Vec<usize> {
        let mut buf = [0u8; 4];
        text.chars().map(|c| self.id(c.encode_utf8(&mut buf))).collect()
    }

    /// Map a token sequence through the vocabulary.
    pub fn word_ids<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for tok in &self.tokens {
            out.push_str(tok);
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Read a vocabulary file. Line 0 is the OOV slot regardless of its
    /// text; lines keep trailing content verbatim (a single-space line is
    /// the space character).
    pub fn read(path: &Path) -> Result<Self> {
        let data = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut tokens: Vec<String> = data.split('\n').map(|s| s.to_string()).collect();
        if tokens.last().is_some_and(|t| t.is_empty()) {
            tokens.pop(); // trailing newline
        }
        if tokens.is_empty() {
            return Err(Error::Vocab(format!("empty vocabulary file {path:?}")));
        }
        let mut lookup = HashMap::new();
        for (id, tok) in tokens.iter().enumerate() {
            if id == OOV_ID {
                continue;
            }
            if lookup.insert(tok.clone(), id).is_some() {
                return Err(Error::Vocab(format!("duplicate token {tok:?} in {path:?}")));
            }
        }
        Ok(Vocab { tokens, lookup })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn build_dedups_and_reserves_oov() {
        let v = Vocab::build(["route", "2", "route"]);
        assert_eq!(v.len(), 3);
        assert_eq!(v.id("route"), 1);
        assert_eq!(v.id("2"), 2);
        assert_eq!(v.id("never-seen"), OOV_ID);
        assert_eq!(v.token(0), OOV_TOKEN);
    }

    #[test]
    fn char_ids_include_spaces() {
        let v = Vocab::build(["a", " ", "b"]);
        assert_eq!(v.char_ids("ab a"), vec![1, 3, 2, 1]);
        assert_eq!(v.char_ids("xy"), vec![OOV_ID, OOV_ID]);
    }

    #[test]
    fn file_roundtrip_preserves_space_token() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = Vocab::build(["a", " ", "route"]);
        v.write(&path).unwrap();
        let back = Vocab::read(&path).unwrap();
        assert_eq!(back.len(), v.len());
        assert_eq!(back.id(" "), v.id(" "));
        assert_eq!(back.id("route"), v.id("route"));
    }
}
