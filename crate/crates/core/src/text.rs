//! Report tokenization, vocabulary construction, and token-sequence
//! conventions (PAD=0, BOS=1, EOS=2, UNK=3).

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

/// Display markers for the four reserved ids, fixed as the first four
/// vocabulary-file lines.
pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Lowercase, strip everything outside `[a-z0-9 .]`, split `.` off as its
/// own token, then split on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut cleaned = String::with_capacity(text.len() + 8);
    for c in text.to_lowercase().chars() {
        match c {
            'a'..='z' | '0'..='9' | ' ' => cleaned.push(c),
            '.' => {
                cleaned.push(' ');
                cleaned.push('.');
                cleaned.push(' ');
            }
            _ => cleaned.push(' '),
        }
    }
    cleaned.split_whitespace().map(str::to_owned).collect()
}

/// Token ids with the BOS/EOS/PAD conventions.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Self {
        TokenSequence { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Canonical form: starts with BOS, ends with EOS, no interior PAD.
    pub fn is_canonical(&self) -> bool {
        self.ids.first() == Some(&BOS)
            && self.ids.last() == Some(&EOS)
            && !self.ids[1..self.ids.len() - 1].contains(&PAD)
    }

    /// Content ids with BOS/EOS/PAD stripped.
    pub fn content(&self) -> Vec<u32> {
        self.ids.iter().copied().filter(|&id| id != PAD && id != BOS && id != EOS).collect()
    }
}

/// Frequency-ordered vocabulary over tokenized training reports.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    pub min_freq: usize,
}

impl Vocabulary {
    /// Tokens with corpus frequency >= `min_freq` get ids in descending
    /// frequency order, ties broken alphabetically.
    pub fn build<'a, I>(reports: I, min_freq: usize) -> Result<Vocabulary>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut any = false;
        for report in reports {
            for token in tokenize(report) {
                *counts.entry(token).or_insert(0) += 1;
            }
            any = true;
        }
        if !any {
            return Err(Error::Contract("build_vocab: empty training text".into()));
        }
        let mut kept: Vec<(String, usize)> =
            counts.into_iter().filter(|(_, n)| *n >= min_freq).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut id_to_token: Vec<String> =
            SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(kept.into_iter().map(|(t, _)| t));
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Vocabulary { token_to_id, id_to_token, min_freq })
    }

    pub fn from_tokens(tokens: Vec<String>, min_freq: usize) -> Result<Vocabulary> {
        if tokens.len() < 4 || tokens[..4] != SPECIAL_TOKENS.map(str::to_string) {
            return Err(Error::Vocab(
                "vocabulary file must begin with the four reserved markers".into(),
            ));
        }
        let token_to_id = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Vocabulary { token_to_id, id_to_token: tokens, min_freq })
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// `BOS + ids (UNK for out-of-vocabulary) truncated to max_len-2 + EOS`.
    pub fn encode_report(&self, text: &str, max_len: usize) -> TokenSequence {
        let mut ids = vec![BOS];
        for token in tokenize(text).into_iter().take(max_len.saturating_sub(2)) {
            ids.push(self.id(&token).unwrap_or(UNK));
        }
        ids.push(EOS);
        TokenSequence::new(ids)
    }

    /// Content tokens of a sequence as strings, UNK rendered by its marker.
    pub fn decode_tokens(&self, seq: &TokenSequence) -> Vec<String> {
        seq.content()
            .iter()
            .map(|&id| self.token(id).unwrap_or(SPECIAL_TOKENS[UNK as usize]).to_string())
            .collect()
    }

    /// Report text: content tokens joined by single spaces.
    pub fn decode_report(&self, seq: &TokenSequence) -> String {
        self.decode_tokens(seq).join(" ")
    }
}
