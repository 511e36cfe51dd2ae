//! Character vocabulary with blank at id 0.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::bail;
use crate::Result;

pub const BLANK: usize = 0;

/// Lowercase letters, space and apostrophe after the blank.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<char>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        let mut symbols: Vec<char> = ('a'..='z').collect();
        symbols.push(' ');
        symbols.push('\'');
        Self { symbols }
    }
}

impl Vocabulary {
    /// A vocabulary over `symbols` (blank excluded), which must be unique.
    pub fn new(symbols: &str) -> Result<Self> {
        let symbols: Vec<char> = symbols.chars().collect();
        for (i, c) in symbols.iter().enumerate() {
            if symbols[..i].contains(c) {
                bail!(Config, "duplicate vocabulary symbol {c:?}");
            }
        }
        if symbols.is_empty() {
            bail!(Config, "empty vocabulary");
        }
        Ok(Self { symbols })
    }

    /// Size including blank.
    pub fn size(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn symbols(&self) -> String {
        self.symbols.iter().collect()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| match self.symbols.iter().position(|&s| s == c) {
                Some(i) => Ok(i + 1),
                None => bail!(Input, "character {c:?} is not in the vocabulary"),
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        ids.iter()
            .map(|&id| match id.checked_sub(1).and_then(|i| self.symbols.get(i)) {
                Some(&c) => Ok(c),
                None => bail!(Input, "token id {id} is blank or out of range"),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let v = Vocabulary::default();
        assert_eq!(v.size(), 29);
        let ids = v.encode("don't go").unwrap();
        assert!(!ids.contains(&BLANK));
        assert_eq!(v.decode(&ids).unwrap(), "don't go");
        assert!(v.encode("A").is_err());
        assert!(v.decode(&[0]).is_err());
    }
}
