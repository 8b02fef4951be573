//! Whitespace tokenizer with punctuation splitting and byte fallback.
//!
//! Ids: four specials, then 256 byte tokens, then the word list. `<LOC>` is
//! not part of the base vocabulary; it takes the first id past it.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const SEP: u32 = 3;
pub const LOC_TEXT: &str = "<LOC>";
const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<sep>"];
const BYTE_BASE: u32 = 4;
const WORD_BASE: u32 = BYTE_BASE + 256;
const PUNCT: &[char] = &['.', ',', '?', '!', ':', ';', '(', ')', '"'];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tokenizer {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Tokenizer {
    /// Builds the word list from a corpus, in first-seen order.
    pub fn from_corpus<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for text in texts {
            for piece in split(text) {
                if piece == LOC_TEXT || SPECIALS.contains(&piece.as_str()) {
                    continue;
                }
                if seen.insert(piece.clone()) {
                    words.push(piece);
                }
            }
        }
        Self::from_words(words)
    }

    pub fn from_words(words: Vec<String>) -> Self {
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), WORD_BASE + i as u32))
            .collect();
        Tokenizer { words, index }
    }

    /// Size of the base vocabulary, i.e. everything except `<LOC>`.
    pub fn base_size(&self) -> usize {
        WORD_BASE as usize + self.words.len()
    }

    pub fn loc_id(&self) -> u32 {
        self.base_size() as u32
    }

    pub fn vocab_size(&self) -> usize {
        self.base_size() + 1
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for piece in split(text) {
            if piece == LOC_TEXT {
                out.push(self.loc_id());
            } else if let Some(i) = SPECIALS.iter().position(|s| *s == piece) {
                out.push(i as u32);
            } else if let Some(&id) = self.index.get(&piece) {
                out.push(id);
            } else {
                out.extend(piece.bytes().map(|b| BYTE_BASE + b as u32));
            }
        }
        out
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        let mut parts: Vec<String> = Vec::new();
        let mut bytes: Vec<u8> = Vec::new();
        let flush = |bytes: &mut Vec<u8>, parts: &mut Vec<String>| {
            if !bytes.is_empty() {
                parts.push(String::from_utf8_lossy(bytes).into_owned());
                bytes.clear();
            }
        };
        for &id in ids {
            if (BYTE_BASE..WORD_BASE).contains(&id) {
                bytes.push((id - BYTE_BASE) as u8);
                continue;
            }
            flush(&mut bytes, &mut parts);
            let word = if id == self.loc_id() {
                LOC_TEXT.to_string()
            } else if id < BYTE_BASE {
                SPECIALS[id as usize].to_string()
            } else {
                self.words
                    .get((id - WORD_BASE) as usize)
                    .cloned()
                    .unwrap_or_else(|| format!("<unk{id}>"))
            };
            parts.push(word);
        }
        flush(&mut bytes, &mut parts);
        parts.join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let t: Tokenizer = serde_json::from_str(&s)?;
        Ok(Self::from_words(t.words))
    }
}

fn split(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let mut cur = String::new();
        let mut chars = raw.chars().peekable();
        while let Some(ch) = chars.next() {
            if ch == '<' {
                // keep <tag> pieces intact
                let rest: String = std::iter::once(ch).chain(chars.clone()).collect();
                if let Some(end) = rest.find('>') {
                    let tag = &rest[..=end];
                    if tag == LOC_TEXT || SPECIALS.contains(&tag) {
                        if !cur.is_empty() {
                            out.push(std::mem::take(&mut cur));
                        }
                        out.push(tag.to_string());
                        for _ in 0..tag.chars().count() - 1 {
                            chars.next();
                        }
                        continue;
                    }
                }
            }
            if PUNCT.contains(&ch) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.push(ch);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}
