//! Word-level tokenizer with a fixed registry of special tokens.
//!
//! Text is lowercased and split on whitespace; `.,;:!?` become tokens of their
//! own. Special tokens are matched verbatim before any normalization.

use std::collections::{BTreeSet, HashMap};
use std::sync::OnceLock;

use crate::error::{Error, Result};

pub const MAX_VOCAB: usize = 2048;
const PUNCTUATION: &[char] = &['.', ',', ';', ':', '!', '?'];
const ROLE_WORDS: &[&str] = &["system", "user", "assistant"];

static REGISTRY_SOURCE: &str = include_str!("../../assets/special_tokens.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialTokens {
    pub pad: usize,
    pub unk: usize,
    pub begin_of_text: usize,
    pub start_header: usize,
    pub end_header: usize,
    pub end_of_message: usize,
    pub bev: usize,
}

pub const PAD: &str = "<|pad|>";
pub const UNK: &str = "<|unk|>";
pub const BEGIN_OF_TEXT: &str = "<|begin_of_text|>";
pub const START_HEADER: &str = "<|start_header_id|>";
pub const END_HEADER: &str = "<|end_header_id|>";
pub const END_OF_MESSAGE: &str = "<|eot_id|>";
pub const BEV: &str = "<bev>";

/// `(id, token)` pairs of the shipped registry, in id order.
pub fn special_token_registry() -> &'static [(usize, String)] {
    static REGISTRY: OnceLock<Vec<(usize, String)>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        let mut entries: Vec<(usize, String)> = REGISTRY_SOURCE
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| {
                let (id, tok) = l.split_once(' ').expect("`id token` registry line");
                (id.parse().expect("numeric id"), tok.trim().to_string())
            })
            .collect();
        entries.sort();
        for (expected, (id, _)) in entries.iter().enumerate() {
            assert_eq!(expected, *id, "special token ids must be dense from 0");
        }
        entries
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    special: SpecialTokens,
}

impl Tokenizer {
    /// Specials, role names, then the sorted distinct words of `texts`.
    pub fn from_corpus<S: AsRef<str>>(texts: &[S]) -> Result<Self> {
        let mut words = BTreeSet::new();
        for w in ROLE_WORDS {
            words.insert(w.to_string());
        }
        for t in texts {
            for piece in split_pieces(t.as_ref()) {
                if let Piece::Word(w) = piece {
                    words.insert(w);
                }
            }
        }
        let mut tokens: Vec<String> = special_token_registry()
            .iter()
            .map(|(_, t)| t.clone())
            .collect();
        tokens.extend(words);
        Self::from_tokens(tokens)
    }

    /// Rebuilds a tokenizer from its token list (as stored in checkpoints).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() > MAX_VOCAB {
            return Err(Error::Config(format!(
                "vocabulary of {} exceeds {MAX_VOCAB} entries",
                tokens.len()
            )));
        }
        for (id, tok) in special_token_registry() {
            if tokens.get(*id) != Some(tok) {
                return Err(Error::Format(format!(
                    "token list does not start with the special registry (id {id} should be {tok})"
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Format(format!("duplicate token `{t}`")));
            }
        }
        let id = |t: &str| index[t];
        let special = SpecialTokens {
            pad: id(PAD),
            unk: id(UNK),
            begin_of_text: id(BEGIN_OF_TEXT),
            start_header: id(START_HEADER),
            end_header: id(END_HEADER),
            end_of_message: id(END_OF_MESSAGE),
            bev: id(BEV),
        };
        Ok(Self {
            tokens,
            index,
            special,
        })
    }

    pub fn special(&self) -> SpecialTokens {
        self.special
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn is_special(&self, id: usize) -> bool {
        id < special_token_registry().len()
    }

    /// Token strings of `text` after normalization.
    pub fn tokenize(&self, text: &str) -> Vec<String> {
        split_pieces(text)
            .into_iter()
            .map(|p| match p {
                Piece::Special(s) | Piece::Word(s) => s,
            })
            .collect()
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        self.tokenize(text)
            .iter()
            .map(|t| self.id(t).unwrap_or(self.special.unk))
            .collect()
    }

    /// Words joined by spaces with punctuation attached to the preceding word.
    /// Special tokens are dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            if self.is_special(id) && id != self.special.unk {
                continue;
            }
            let Some(tok) = self.token(id) else { continue };
            let is_punct = tok.chars().count() == 1 && tok.starts_with(PUNCTUATION);
            if !out.is_empty() && !is_punct {
                out.push(' ');
            }
            out.push_str(tok);
        }
        out
    }
}

enum Piece {
    Special(String),
    Word(String),
}

fn split_pieces(text: &str) -> Vec<Piece> {
    let specials: Vec<&str> = special_token_registry()
        .iter()
        .map(|(_, t)| t.as_str())
        .collect();
    let mut pieces = Vec::new();
    let mut rest = text;
    while !rest.is_empty() {
        let next = specials
            .iter()
            .filter_map(|s| rest.find(s).map(|pos| (pos, *s)))
            .min_by_key(|&(pos, s)| (pos, std::cmp::Reverse(s.len())));
        let (plain, special) = match next {
            Some((pos, s)) => (&rest[..pos], Some(s)),
            None => (rest, None),
        };
        for word in plain.split_whitespace() {
            let lower = word.to_lowercase();
            let mut current = String::new();
            for ch in lower.chars() {
                if PUNCTUATION.contains(&ch) {
                    if !current.is_empty() {
                        pieces.push(Piece::Word(std::mem::take(&mut current)));
                    }
                    pieces.push(Piece::Word(ch.to_string()));
                } else {
                    current.push(ch);
                }
            }
            if !current.is_empty() {
                pieces.push(Piece::Word(current));
            }
        }
        match special {
            Some(s) => {
                pieces.push(Piece::Special(s.to_string()));
                rest = &rest[plain.len() + s.len()..];
            }
            None => rest = "",
        }
    }
    pieces
}
