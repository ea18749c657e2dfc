//! Closed-vocabulary whitespace tokenizer.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const EOS: u32 = 1;
pub const IMG: u32 = 2;
pub const UNK: u32 = 3;

pub const RESERVED: [&str; 4] = ["<pad>", "<eos>", "<img>", "<unk>"];

/// Literal marker at the head of a prompt that stands for the image rows.
pub const IMAGE_MARKER: &str = "<IMG>";

const PUNCTUATION: &[char] = &[
    ':', ',', '.', ';', '!', '?', '"', '\'', '(', ')', '\u{201c}', '\u{201d}',
];

/// Lowercases, strips punctuation and splits on whitespace.
pub fn normalize_words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .replace(PUNCTUATION, " ")
        .split_whitespace()
        .map(ToString::to_string)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, u32>,
}

impl Vocab {
    /// Reserved ids first, then the sorted unique words of both lists.
    pub fn build(grammar_words: &[&str], template_words: &[&str]) -> Self {
        let mut words: Vec<String> = grammar_words
            .iter()
            .chain(template_words)
            .flat_map(|w| normalize_words(w))
            .filter(|w| !RESERVED.contains(&w.as_str()))
            .collect();
        words.sort();
        words.dedup();
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(words)
            .collect();
        Self::from_tokens(tokens).expect("built vocab is consistent")
    }

    /// Restores a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens.iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(Error::Config("vocab must start with the reserved tokens".into()));
        }
        let mut index = BTreeMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate vocab entry {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub has_image_prefix: bool,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Tokenizes `text`; unknown words map to UNK, IMG is prepended when
/// `image_prefixed`, EOS is always appended.
pub fn encode(text: &str, vocab: &Vocab, image_prefixed: bool) -> TokenSeq {
    let mut ids = Vec::new();
    if image_prefixed {
        ids.push(IMG);
    }
    ids.extend(normalize_words(text).iter().map(|w| vocab.id(w).unwrap_or(UNK)));
    ids.push(EOS);
    TokenSeq {
        ids,
        has_image_prefix: image_prefixed,
    }
}

/// Like [`encode`], with the image flag taken from a leading
/// [`IMAGE_MARKER`].
pub fn encode_prompt(prompt: &str, vocab: &Vocab) -> TokenSeq {
    let (image, text) = split_image_marker(prompt);
    encode(text, vocab, image)
}

pub fn split_image_marker(prompt: &str) -> (bool, &str) {
    match prompt.trim_start().strip_prefix(IMAGE_MARKER) {
        Some(rest) => (true, rest),
        None => (false, prompt),
    }
}

/// Space-joined words of `seq` without the special tokens.
pub fn decode(seq: &TokenSeq, vocab: &Vocab) -> String {
    let words: Vec<&str> = seq
        .ids
        .iter()
        .filter(|&&id| id != EOS && id != IMG && id != PAD)
        .map(|&id| vocab.token(id).unwrap_or("<unk>"))
        .collect();
    words.join(" ")
}
