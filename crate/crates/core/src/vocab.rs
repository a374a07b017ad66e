//! Extended vocabulary and text tokenization.
//!
//! Index layout for a vocabulary with `n_max` candidate slots:
//!
//! ```text
//! 0                      PAD
//! 1                      BOS
//! 2                      ENDLIST
//! 3 ..= 2+n_max          R_1 .. R_{n_max}
//! 3+n_max ..= 2+2*n_max  CAND_1 .. CAND_{n_max}
//! 3+2*n_max              UNK
//! 4+2*n_max ..           text words, sorted lexicographically
//! ```

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::record::QueryRecord;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const ENDLIST: usize = 2;
pub const UNK_WORD: &str = "<unk>";
pub const DEFAULT_N_MAX: usize = 10;

/// Lowercased, whitespace-separated words of `text`.
pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace().map(|w| w.to_lowercase()).collect()
}

/// Index arithmetic for the extended vocabulary. Cheap to copy; every
/// component that needs to address logit columns carries one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub n_max: usize,
    /// Number of text tokens, UNK included.
    pub n_text: usize,
}

impl Layout {
    pub fn new(n_max: usize, n_text: usize) -> Self {
        Layout { n_max, n_text }
    }

    pub fn size(&self) -> usize {
        3 + 2 * self.n_max + self.n_text
    }

    pub fn rank(&self, k: usize) -> usize {
        debug_assert!(k >= 1 && k <= self.n_max);
        2 + k
    }

    pub fn cand(&self, m: usize) -> usize {
        debug_assert!(m >= 1 && m <= self.n_max);
        2 + self.n_max + m
    }

    pub fn text_offset(&self) -> usize {
        3 + 2 * self.n_max
    }

    pub fn unk(&self) -> usize {
        self.text_offset()
    }

    pub fn text(&self, i: usize) -> usize {
        self.text_offset() + i
    }

    pub fn index_of(&self, token: Token) -> usize {
        match token {
            Token::Pad => PAD,
            Token::Bos => BOS,
            Token::EndList => ENDLIST,
            Token::RankMarker(k) => self.rank(k),
            Token::CandPointer(m) => self.cand(m),
            Token::Text(i) => self.text(i),
        }
    }

    pub fn token_at(&self, index: usize) -> Result<Token> {
        let n = self.n_max;
        Ok(match index {
            PAD => Token::Pad,
            BOS => Token::Bos,
            ENDLIST => Token::EndList,
            i if i < 3 + n => Token::RankMarker(i - 2),
            i if i < 3 + 2 * n => Token::CandPointer(i - 2 - n),
            i if i < self.size() => Token::Text(i - self.text_offset()),
            i => {
                return Err(Error::IndexOutOfRange {
                    index: i,
                    size: self.size(),
                })
            }
        })
    }
}

/// A token of the extended vocabulary. `Text(i)` holds the position within
/// the text block (0 is UNK).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Token {
    Pad,
    Bos,
    EndList,
    RankMarker(usize),
    CandPointer(usize),
    Text(usize),
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Pad => write!(f, "<PAD>"),
            Token::Bos => write!(f, "<BOS>"),
            Token::EndList => write!(f, "<ENDLIST>"),
            Token::RankMarker(k) => write!(f, "<R{k}>"),
            Token::CandPointer(m) => write!(f, "<CAND_{m}>"),
            Token::Text(i) => write!(f, "<TEXT_{i}>"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    /// Text block in index order: UNK first, then sorted words.
    text_tokens: Vec<String>,
    lookup: HashMap<String, usize>,
    layout: Layout,
}

impl Vocabulary {
    /// Builds the vocabulary from every question, reference and candidate
    /// text in `corpus`.
    pub fn build(corpus: &[QueryRecord], n_max: usize) -> Result<Self> {
        let mut set = BTreeSet::new();
        for record in corpus {
            if record.n() > n_max {
                return Err(Error::CandidateOverflow {
                    query_id: record.query_id.clone(),
                    count: record.n(),
                    n_max,
                });
            }
            set.extend(words(&record.question));
            if let Some(r) = &record.reference {
                set.extend(words(r));
            }
            for c in &record.candidates {
                set.extend(words(&c.text));
            }
        }
        Ok(Self::from_words(set, n_max))
    }

    /// Builds from an explicit word set. Order and duplicates are ignored.
    pub fn from_words<I, S>(words: I, n_max: usize) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let set: BTreeSet<String> = words
            .into_iter()
            .map(Into::into)
            .filter(|w| w != UNK_WORD)
            .collect();
        let mut text_tokens = Vec::with_capacity(set.len() + 1);
        text_tokens.push(UNK_WORD.to_string());
        text_tokens.extend(set);
        let lookup = text_tokens
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        let layout = Layout::new(n_max, text_tokens.len());
        Vocabulary {
            text_tokens,
            lookup,
            layout,
        }
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn n_max(&self) -> usize {
        self.layout.n_max
    }

    pub fn size(&self) -> usize {
        self.layout.size()
    }

    pub fn text_tokens(&self) -> &[String] {
        &self.text_tokens
    }

    /// Position of `word` in the text block, falling back to UNK.
    pub fn text_position(&self, word: &str) -> usize {
        self.lookup.get(word).copied().unwrap_or(0)
    }

    /// Global vocabulary indices of the words of `text`; unknown words map to UNK.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        words(text)
            .iter()
            .map(|w| self.layout.text(self.text_position(w)))
            .collect()
    }

    /// Text positions (not global indices) of the words of `text`.
    pub fn text_positions(&self, text: &str) -> Vec<usize> {
        words(text).iter().map(|w| self.text_position(w)).collect()
    }

    /// Inverse of [`Vocabulary::tokenize`] up to UNK replacement.
    pub fn detokenize(&self, indices: &[usize]) -> String {
        indices
            .iter()
            .map(|&i| match self.layout.token_at(i) {
                Ok(Token::Text(p)) => self.text_tokens[p].clone(),
                Ok(t) => t.to_string(),
                Err(_) => UNK_WORD.to_string(),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn index_of(&self, token: Token) -> usize {
        self.layout.index_of(token)
    }

    pub fn token_at(&self, index: usize) -> Result<Token> {
        self.layout.token_at(index)
    }

    /// Stable 64-bit digest of the layout and word list.
    pub fn hash(&self) -> u64 {
        let mut h = Sha256::new();
        h.update((self.layout.n_max as u64).to_le_bytes());
        for w in &self.text_tokens {
            h.update((w.len() as u64).to_le_bytes());
            h.update(w.as_bytes());
        }
        let digest = h.finalize();
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(bytes)
    }

    /// Serializes as `n_max` on the first line followed by one word per line
    /// (UNK excluded).
    pub fn to_text(&self) -> String {
        let mut out = format!("{}\n", self.layout.n_max);
        for w in &self.text_tokens[1..] {
            out.push_str(w);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let n_max = lines
            .next()
            .and_then(|l| l.trim().parse::<usize>().ok())
            .ok_or_else(|| Error::Parse("vocabulary file must start with n_max".into()))?;
        Ok(Self::from_words(lines.filter(|l| !l.is_empty()), n_max))
    }
}
