use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const EOS: &str = "<eos>";
pub const PAD_ID: u32 = 0;
pub const EOS_ID: u32 = 1;

/// Symbol inventory. Ids 0 and 1 are always padding and end-of-sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    symbols: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn new<I, S>(symbols: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all = vec![PAD.to_string(), EOS.to_string()];
        for s in symbols {
            let s = s.into();
            if s.is_empty() || s.contains(char::is_whitespace) {
                return Err(Error::InvalidArgument(format!("invalid symbol `{s}`")));
            }
            if all.contains(&s) {
                return Err(Error::InvalidArgument(format!("symbol `{s}` listed twice")));
            }
            all.push(s);
        }
        Ok(Self::from_symbols(all))
    }

    fn from_symbols(symbols: Vec<String>) -> Self {
        let index = symbols.iter().enumerate().map(|(i, s)| (s.clone(), i as u32)).collect();
        Self { symbols, index }
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn reindexed(self) -> Self {
        Self::from_symbols(self.symbols)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn id(&self, symbol: &str) -> Result<u32> {
        self.index.get(symbol).copied().ok_or_else(|| Error::UnknownSymbol(symbol.to_string()))
    }

    /// Encodes whitespace-separated symbols and appends the end symbol.
    pub fn encode(&self, text: &str) -> Result<PhonemeSequence> {
        let mut ids = text.split_whitespace().map(|s| self.id(s)).collect::<Result<Vec<_>>>()?;
        if ids.is_empty() {
            return Err(Error::EmptyInput("phoneme sequence"));
        }
        ids.push(EOS_ID);
        PhonemeSequence::new(ids, self.len())
    }

    pub fn decode(&self, seq: &PhonemeSequence) -> String {
        seq.ids
            .iter()
            .filter(|&&id| id != EOS_ID && id != PAD_ID)
            .map(|&id| self.symbols[id as usize].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Symbol ids for one utterance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhonemeSequence {
    pub ids: Vec<u32>,
}

impl PhonemeSequence {
    pub fn new(ids: Vec<u32>, vocab_size: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::EmptyInput("phoneme sequence"));
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= vocab_size) {
            return Err(Error::OutOfVocabulary { id, size: vocab_size });
        }
        Ok(Self { ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}
