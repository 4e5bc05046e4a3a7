//! Character-class tokenizer and vocabulary.
//!
//! Text is split into identifiers, numbers, whitespace runs, a small set of
//! two-character operators and single punctuation characters. Whitespace runs
//! collapse to `" "`, or to `"\n"` when they contain a line break, so
//! indentation depth is not encoded. Identifiers and numbers that are missing
//! from the vocabulary hash into a fixed number of buckets; any other unknown
//! piece becomes `<UNK>`.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::source_model::TYPE_PLACEHOLDER;

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;
pub const TYPE: usize = 3;

const SPECIALS: [&str; 4] = ["<BOS>", "<EOS>", "<UNK>", TYPE_PLACEHOLDER];
const TWO_CHAR_OPS: &[&str] =
    &["->", "**", "//", "==", "!=", "<=", ">=", ":=", "+=", "-=", "*=", "/=", "<<", ">>", "%=", "&=", "|=", "^="];
/// Rendered for a hashed bucket; never parses as a type.
pub const OOV_TEXT: &str = "<OOV>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum PieceKind {
    Word,
    Other,
}

fn is_word_start(c: char) -> bool {
    c == '_' || c.is_alphabetic()
}

fn is_word_char(c: char) -> bool {
    c == '_' || c.is_alphanumeric()
}

/// Splits `text` into pieces. Deterministic and lossless up to whitespace.
pub fn pre_tokenize(text: &str) -> Vec<&str> {
    pieces(text).into_iter().map(|(s, _)| s).collect()
}

fn pieces(text: &str) -> Vec<(&str, PieceKind)> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(c) = rest.chars().next() {
        let (len, piece, kind): (usize, &str, PieceKind) = if rest.starts_with(TYPE_PLACEHOLDER) {
            (TYPE_PLACEHOLDER.len(), TYPE_PLACEHOLDER, PieceKind::Other)
        } else if c.is_whitespace() {
            let len = rest.find(|ch: char| !ch.is_whitespace()).unwrap_or(rest.len());
            let piece = if rest[..len].contains('\n') { "\n" } else { " " };
            (len, piece, PieceKind::Other)
        } else if is_word_start(c) {
            let len = rest.find(|ch: char| !is_word_char(ch)).unwrap_or(rest.len());
            (len, &rest[..len], PieceKind::Word)
        } else if c.is_ascii_digit() {
            let len = rest.find(|ch: char| !(is_word_char(ch) || ch == '.')).unwrap_or(rest.len());
            (len, &rest[..len], PieceKind::Word)
        } else if let Some(op) = TWO_CHAR_OPS.iter().find(|op| rest.starts_with(**op)) {
            (op.len(), *op, PieceKind::Other)
        } else {
            let len = c.len_utf8();
            (len, &rest[..len], PieceKind::Other)
        };
        out.push((piece, kind));
        rest = &rest[len..];
    }
    out
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    /// Id-ordered token texts; the first four are the special tokens.
    pub tokens: Vec<String>,
    pub n_buckets: usize,
    #[serde(skip)]
    lookup: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>, n_buckets: usize) -> Self {
        let lookup = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, n_buckets, lookup }
    }

    /// Builds a vocabulary from `texts`. Identifiers and numbers must occur in
    /// at least `min_df` distinct texts; other pieces need one occurrence.
    /// Ordered by document frequency descending, then text.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_df: usize, n_buckets: usize) -> Self {
        let mut df: BTreeMap<(&str, PieceKind), usize> = BTreeMap::new();
        for text in texts {
            let distinct: BTreeSet<_> = pieces(text).into_iter().collect();
            for p in distinct {
                *df.entry(p).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = df
            .into_iter()
            .filter(|((s, kind), n)| !SPECIALS.contains(s) && (*kind == PieceKind::Other || *n >= min_df.max(1)))
            .map(|((s, _), n)| (s, n))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        kept.dedup_by(|a, b| a.0 == b.0);
        let tokens =
            SPECIALS.iter().map(|s| s.to_string()).chain(kept.into_iter().map(|(s, _)| s.to_string())).collect();
        Vocab::from_tokens(tokens, n_buckets)
    }

    /// Restores the lookup table after deserialization.
    pub fn reindex(&mut self) {
        self.lookup = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
    }

    /// Total number of ids: regular tokens plus buckets.
    pub fn size(&self) -> usize {
        self.tokens.len() + self.n_buckets
    }

    pub fn is_bucket(&self, id: usize) -> bool {
        id >= self.tokens.len() && id < self.size()
    }

    /// Ids beam search may produce: EOS and every regular token.
    pub fn emittable(&self) -> Vec<usize> {
        std::iter::once(EOS).chain(SPECIALS.len()..self.tokens.len()).collect()
    }

    pub fn id_of(&self, piece: &str) -> Option<usize> {
        self.lookup.get(piece).copied()
    }

    fn piece_id(&self, piece: &str, kind: PieceKind) -> usize {
        if let Some(id) = self.id_of(piece) {
            return id;
        }
        if kind == PieceKind::Word && self.n_buckets > 0 {
            self.tokens.len() + (fnv1a(piece) % self.n_buckets as u64) as usize
        } else {
            UNK
        }
    }

    /// Ids of `text` without sentinels.
    pub fn encode_pieces(&self, text: &str) -> Vec<usize> {
        pieces(text).into_iter().map(|(p, k)| self.piece_id(p, k)).collect()
    }

    /// `[BOS, ..., EOS]` of length at most `max_len`. When truncation is
    /// needed, the kept window is centered on the first `<TYPE>` if present.
    pub fn tokenize(&self, text: &str, max_len: usize) -> Vec<usize> {
        assert!(max_len >= 2, "max_len must leave room for BOS and EOS");
        let body = self.encode_pieces(text);
        let room = max_len - 2;
        let window = if body.len() <= room {
            &body[..]
        } else {
            let start = match body.iter().position(|&id| id == TYPE) {
                Some(t) => t.saturating_sub(room / 2).min(body.len() - room),
                None => 0,
            };
            &body[start..start + room]
        };
        let mut out = Vec::with_capacity(window.len() + 2);
        out.push(BOS);
        out.extend_from_slice(window);
        out.push(EOS);
        out
    }

    pub fn token_text(&self, id: usize) -> &str {
        if id < self.tokens.len() {
            &self.tokens[id]
        } else {
            OOV_TEXT
        }
    }

    /// Concatenates token texts, skipping BOS and stopping at EOS.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        let mut out = String::new();
        for &id in ids {
            match id {
                BOS => continue,
                EOS => break,
                _ => out.push_str(self.token_text(id)),
            }
        }
        out
    }
}
