//! Character table shared by the codebook, the classifier and every dataset.
//!
//! The charset file is the single source of index ordering: row `i` of the
//! codebook, classifier label `i` and dataset label `i` all refer to the
//! `i`-th character of this table. The table is persisted with datasets and
//! checkpoints as a content hash so mismatches fail loudly instead of
//! silently permuting classes.

use crate::error::{Error, Result};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct CharsetTable {
    chars: Vec<char>,
    index: HashMap<char, u32>,
    hash: String,
}

impl CharsetTable {
    pub fn new(chars: Vec<char>) -> Result<Self> {
        if chars.len() < 2 {
            return Err(Error::Charset(format!(
                "need at least 2 characters, got {}",
                chars.len()
            )));
        }
        let mut index = HashMap::with_capacity(chars.len());
        for (i, &ch) in chars.iter().enumerate() {
            if ch.is_whitespace() {
                return Err(Error::Charset(format!("whitespace character {ch:?} not allowed")));
            }
            if index.insert(ch, i as u32).is_some() {
                return Err(Error::Charset(format!("duplicate character {ch:?}")));
            }
        }
        let hash = hash_chars(&chars);
        Ok(Self { chars, index, hash })
    }

    /// One character per line; blank lines are skipped.
    pub fn from_text(text: &str) -> Result<Self> {
        let chars: Vec<char> = text
            .lines()
            .filter_map(|line| line.chars().next())
            .collect();
        Self::new(chars)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(self.chars.len() * 2);
        for &ch in &self.chars {
            s.push(ch);
            s.push('\n');
        }
        s
    }

    /// Digits 0-9: the ten-character table used by the desk-scale runs.
    pub fn digits() -> Self {
        Self::new(('0'..='9').collect()).expect("static charset")
    }

    /// Printable ASCII (no space): the default 94-character table.
    pub fn ascii() -> Self {
        Self::new(('!'..='~').collect()).expect("static charset")
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn char_at(&self, idx: u32) -> Option<char> {
        self.chars.get(idx as usize).copied()
    }

    pub fn index_of(&self, ch: char) -> Option<u32> {
        self.index.get(&ch).copied()
    }

    pub fn contains(&self, ch: char) -> bool {
        self.index.contains_key(&ch)
    }

    /// Hex SHA-256 over the characters joined by `\n`.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn check_hash(&self, expected: &str, context: &str) -> Result<()> {
        if self.hash != expected {
            return Err(Error::CharsetMismatch {
                expected: expected.to_string(),
                found: self.hash.clone(),
                context: context.to_string(),
            });
        }
        Ok(())
    }

    pub fn labels_for(&self, text: &str) -> Result<Vec<u32>> {
        text.chars()
            .map(|ch| {
                self.index_of(ch)
                    .ok_or_else(|| Error::Charset(format!("character {ch:?} not in charset")))
            })
            .collect()
    }
}

fn hash_chars(chars: &[char]) -> String {
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 4];
    for (i, ch) in chars.iter().enumerate() {
        if i > 0 {
            hasher.update(b"\n");
        }
        hasher.update(ch.encode_utf8(&mut buf).as_bytes());
    }
    format!("{:x}", hasher.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indices_are_contiguous_and_stable() {
        let cs = CharsetTable::digits();
        assert_eq!(cs.len(), 10);
        for (i, ch) in ('0'..='9').enumerate() {
            assert_eq!(cs.index_of(ch), Some(i as u32));
            assert_eq!(cs.char_at(i as u32), Some(ch));
        }
    }

    #[test]
    fn rejects_duplicates_and_tiny_tables() {
        assert!(CharsetTable::new(vec!['a', 'a']).is_err());
        assert!(CharsetTable::new(vec!['a']).is_err());
        assert!(CharsetTable::new(vec!['a', ' ']).is_err());
    }

    #[test]
    fn text_round_trip_preserves_hash() {
        let cs = CharsetTable::ascii();
        let rt = CharsetTable::from_text(&cs.to_text()).unwrap();
        assert_eq!(cs.hash(), rt.hash());
        assert_eq!(cs.chars(), rt.chars());
    }

    #[test]
    fn hash_mismatch_is_an_error() {
        let a = CharsetTable::digits();
        let b = CharsetTable::ascii();
        assert!(a.check_hash(b.hash(), "test").is_err());
        assert!(a.check_hash(a.hash(), "test").is_ok());
    }
}
