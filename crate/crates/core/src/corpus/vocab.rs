use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

/// Token string ↔ id map. Ids 0..5 are the special tokens in the order
/// `[PAD] [UNK] [CLS] [SEP] [MASK]`; ordinary tokens follow in sorted order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub const PAD_ID: usize = 0;
    pub const UNK_ID: usize = 1;
    pub const CLS_ID: usize = 2;
    pub const SEP_ID: usize = 3;
    pub const MASK_ID: usize = 4;
    const SPECIALS: [&'static str; 5] = [PAD, UNK, CLS, SEP, MASK];

    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let words: BTreeSet<String> = tokens
            .into_iter()
            .map(|t| t.as_ref().to_lowercase())
            .filter(|t| !Self::SPECIALS.contains(&t.as_str()))
            .collect();
        let tokens: Vec<String> = Self::SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words)
            .collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Lower-cases before lookup; unknown words map to `[UNK]`.
    pub fn id(&self, token: &str) -> usize {
        self.index
            .get(token)
            .or_else(|| self.index.get(&token.to_lowercase()))
            .copied()
            .unwrap_or(Self::UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line, line number = id.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self> {
        let tokens: Vec<String> = r.lines().collect::<std::io::Result<_>>()?;
        if tokens.len() < Self::SPECIALS.len()
            || tokens[..Self::SPECIALS.len()] != Self::SPECIALS.map(String::from)
        {
            return Err(Error::Input("vocabulary file lacks the special-token prefix".into()));
        }
        let index: HashMap<String, usize> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if index.len() != tokens.len() {
            return Err(Error::Input("vocabulary file has duplicate tokens".into()));
        }
        Ok(Self { tokens, index })
    }
}
