use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};

const BUILTIN_VOCAB: &str = include_str!("../../assets/vocab.txt");

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

/// Word-level tokenizer; the vocabulary id of a word is its line number.
#[derive(Debug)]
pub struct Tokenizer {
    words: Vec<String>,
    ids: HashMap<String, u32>,
    pad: u32,
    bos: u32,
    eos: u32,
    unk: u32,
    truncated: AtomicUsize,
}

impl Tokenizer {
    pub fn builtin() -> Self {
        Self::from_lines(BUILTIN_VOCAB).expect("built-in vocabulary is well formed")
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_lines(&text)
    }

    pub fn from_lines(text: &str) -> Result<Self> {
        let words: Vec<String> = text.lines().map(|l| l.trim().to_string()).collect();
        let mut ids = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() {
                return Err(Error::validation("vocabulary", format!("line {} is empty", i + 1)));
            }
            if ids.insert(w.clone(), i as u32).is_some() {
                return Err(Error::validation("vocabulary", format!("duplicate token `{w}`")));
            }
        }
        let special = |t: &str| {
            ids.get(t)
                .copied()
                .ok_or_else(|| Error::validation("vocabulary", format!("missing `{t}`")))
        };
        Ok(Self {
            pad: special(PAD)?,
            bos: special(BOS)?,
            eos: special(EOS)?,
            unk: special(UNK)?,
            words,
            ids,
            truncated: AtomicUsize::new(0),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.ids.get(word).copied().unwrap_or(self.unk)
    }

    pub fn pad(&self) -> u32 {
        self.pad
    }

    pub fn bos(&self) -> u32 {
        self.bos
    }

    pub fn eos(&self) -> u32 {
        self.eos
    }

    pub fn unk(&self) -> u32 {
        self.unk
    }

    /// `[BOS, words..., EOS]` with lowercase, punctuation-trimmed words.
    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        let words: Vec<String> = text
            .split_whitespace()
            .map(|w| w.trim_matches(|c: char| c.is_ascii_punctuation()).to_lowercase())
            .filter(|w| !w.is_empty())
            .collect();
        if words.is_empty() {
            return Err(Error::validation("text", "prompt text is empty"));
        }
        let mut out = Vec::with_capacity(words.len() + 2);
        out.push(self.bos);
        out.extend(words.iter().map(|w| self.id(w)));
        out.push(self.eos);
        Ok(out)
    }

    /// Tokenizes and cuts to `max_len`, keeping the final EOS.
    pub fn encode(&self, text: &str, max_len: usize) -> Result<Vec<u32>> {
        let mut ids = self.tokenize(text)?;
        if ids.len() > max_len {
            self.truncated.fetch_add(1, Ordering::Relaxed);
            ids.truncate(max_len.saturating_sub(1));
            ids.push(self.eos);
        }
        Ok(ids)
    }

    /// Number of prompts cut down to the maximum length so far.
    pub fn truncated_prompts(&self) -> usize {
        self.truncated.load(Ordering::Relaxed)
    }
}
