use std::collections::HashMap;

use indexmap::IndexMap;

use crate::error::{Result, ZptError};
use crate::tagcore::word_tokens;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;

const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Word-level vocabulary with fixed reserved ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds from `texts`, keeping at most `max_size` ordinary tokens
    /// ranked by frequency, ties alphabetical.
    pub fn build<S: AsRef<str>>(texts: &[S], max_size: usize) -> Self {
        let mut freq: HashMap<String, usize> = HashMap::new();
        for t in texts {
            for w in word_tokens(t.as_ref()) {
                *freq.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = freq
            .into_iter()
            .filter(|(w, _)| !RESERVED.contains(&w.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().take(max_size).map(|(w, _)| w))
            .collect();
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, or [`UNK`].
    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Lowercased word ids without BOS/EOS.
    pub fn word_ids(&self, text: &str) -> Vec<usize> {
        word_tokens(text).map(|w| self.id(&w)).collect()
    }

    /// `{token: id}` JSON object in id order.
    pub fn to_json(&self) -> String {
        let map: IndexMap<&str, usize> = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_str(), i))
            .collect();
        serde_json::to_string(&map).expect("vocabulary serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let map: IndexMap<String, usize> = serde_json::from_str(text)
            .map_err(|e| ZptError::load("vocabulary", e.to_string()))?;
        let mut tokens = vec![None; map.len()];
        for (tok, id) in map {
            let slot = tokens.get_mut(id).ok_or_else(|| {
                ZptError::load("vocabulary", format!("id {id} is not contiguous"))
            })?;
            if slot.replace(tok).is_some() {
                return Err(ZptError::load("vocabulary", format!("id {id} used twice")));
            }
        }
        let tokens: Vec<String> = tokens
            .into_iter()
            .collect::<Option<_>>()
            .ok_or_else(|| ZptError::load("vocabulary", "ids are not contiguous"))?;
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(ZptError::load("vocabulary", format!("reserved id {i} must be {r}")));
            }
        }
        Ok(Self::from_tokens(tokens))
    }
}

/// `[BOS] + ids + [EOS]`, truncated to `max_len` (keeping EOS last) and
/// right-padded with PAD.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> Vec<usize> {
    assert!(max_len >= 3, "max_len must leave room for BOS, EOS and a token");
    let mut ids = vocab.word_ids(text);
    ids.truncate(max_len - 2);
    let mut seq = Vec::with_capacity(max_len);
    seq.push(BOS);
    seq.extend(ids);
    seq.push(EOS);
    seq.resize(max_len, PAD);
    seq
}
