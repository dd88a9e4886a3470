//! Word-and-punctuation tokenizer with a closed vocabulary.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const BOS: &str = "[BOS]";
pub const EOS: &str = "[EOS]";
pub const SEP: &str = "[SEP]";
pub const SEEKER: &str = "[SEEKER]";
pub const RECOMMENDER: &str = "[RECOMMENDER]";
/// Placeholder substituted for item names inside target responses.
pub const ITEM: &str = "[ITEM]";

pub const SPECIALS: [&str; 8] = [PAD, UNK, BOS, EOS, SEP, SEEKER, RECOMMENDER, ITEM];

/// Splits text into lowercase word runs and single punctuation marks.
/// Special tokens written literally (e.g. `[SEP]`) stay intact.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    let mut rest = text;
    'outer: while let Some(ch) = rest.chars().next() {
        if ch == '[' {
            for sp in SPECIALS {
                if rest.starts_with(sp) {
                    if !word.is_empty() {
                        out.push(std::mem::take(&mut word));
                    }
                    out.push(sp.to_string());
                    rest = &rest[sp.len()..];
                    continue 'outer;
                }
            }
        }
        if ch.is_alphanumeric() || ch == '_' {
            word.extend(ch.to_lowercase());
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
        rest = &rest[ch.len_utf8()..];
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Specials first, then every distinct token of `texts` in sorted order.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(texts: I) -> Self {
        let mut words = BTreeSet::new();
        for t in texts {
            for tok in tokenize(t) {
                if !SPECIALS.contains(&tok.as_str()) {
                    words.insert(tok);
                }
            }
        }
        let tokens: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words)
            .collect();
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(1)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.tokens.join("\n") + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Checkpoint("vocabulary file lacks the special tokens".into()));
        }
        Ok(Self::from_tokens(tokens))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_words_and_punctuation() {
        assert_eq!(tokenize("Hi, I'm fine!"), vec!["hi", ",", "i", "'", "m", "fine", "!"]);
        assert_eq!(tokenize("##DiCaprio $$starring"), vec!["#", "#", "dicaprio", "$", "$", "starring"]);
        assert_eq!(tokenize("watch [ITEM] now[SEP]"), vec!["watch", "[ITEM]", "now", "[SEP]"]);
        assert!(tokenize("   ").is_empty());
    }

    #[test]
    fn vocab_maps_unknown_to_unk() {
        let v = Vocab::build(["b a", "c"]);
        assert_eq!(v.len(), SPECIALS.len() + 3);
        assert_eq!(v.token(v.id("a")), "a");
        assert_eq!(v.id("zzz"), v.id(UNK));
        assert_eq!(v.decode(&v.encode("a b")), "a b");
    }
}
