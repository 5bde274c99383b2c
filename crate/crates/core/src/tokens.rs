//! Word-level tokenizer and source/target token alignment.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, MdeError, Result};

pub type TokenId = usize;

pub const BOS: TokenId = 0;
pub const EOS: TokenId = 1;

/// Ordered token table; the id of a token is its line number.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    lookup: HashMap<String, TokenId>,
}

/// Words known to the toy backend, after the two reserved entries.
pub const TOY_WORDS: &[&str] = &["a", "and", "red", "green", "blue", "yellow", "circle", "square", "triangle"];

impl Vocabulary {
    pub fn new(words: &[&str]) -> Self {
        let mut tokens = vec!["<bos>".to_string(), "<eos>".to_string()];
        tokens.extend(words.iter().map(|w| w.to_string()));
        Self::from_tokens(tokens)
    }

    pub fn toy() -> Self {
        Self::new(TOY_WORDS)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let lookup = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, lookup }
    }

    /// Parses the one-token-per-line format. Lines 0 and 1 are the reserved
    /// begin/end markers.
    pub fn parse(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(|l| l.trim().to_string()).collect();
        if tokens.len() < 2 {
            return Err(MdeError::InvalidValue("vocabulary needs the two reserved tokens".into()));
        }
        if let Some(dup) = tokens.iter().enumerate().find(|(i, t)| tokens[..*i].contains(t)) {
            return Err(MdeError::InvalidValue(format!("duplicate token `{}`", dup.1)));
        }
        Ok(Self::from_tokens(tokens))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn to_file_string(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.lookup.get(word).copied()
    }

    pub fn word(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn is_special(id: TokenId) -> bool {
        id == BOS || id == EOS
    }

    /// `[BOS, words..., EOS]`; words are lower-cased and split on whitespace.
    pub fn tokenize(&self, prompt: &str) -> Result<Vec<TokenId>> {
        let mut ids = vec![BOS];
        for word in prompt.split_whitespace() {
            let w = word.to_lowercase();
            ids.push(self.id(&w).ok_or(MdeError::UnknownWord(w))?);
        }
        ids.push(EOS);
        Ok(ids)
    }

    /// Tokenizes and right-pads with `EOS` to `len` positions.
    pub fn tokenize_padded(&self, prompt: &str, len: usize) -> Result<Vec<TokenId>> {
        let mut ids = self.tokenize(prompt)?;
        if ids.len() > len {
            return Err(MdeError::InvalidValue(format!(
                "prompt `{prompt}` needs {} tokens, context holds {len}",
                ids.len()
            )));
        }
        ids.resize(len, EOS);
        Ok(ids)
    }

    /// Stable digest of the token table, stored in checkpoints.
    pub fn hash(&self) -> String {
        crate::digest(self.to_file_string().as_bytes())
    }
}

/// Pairing of target-prompt positions with source-prompt positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenAlignment {
    /// `(source index, target index)`, sorted by target index.
    pub shared: Vec<(usize, usize)>,
    /// Target indices with no source counterpart.
    pub new_tokens: Vec<usize>,
    pub src_ids: Vec<TokenId>,
    pub tgt_ids: Vec<TokenId>,
}

impl TokenAlignment {
    /// Source index feeding a target position, if shared.
    pub fn source_of(&self, tgt: usize) -> Option<usize> {
        self.shared.iter().find(|&&(_, t)| t == tgt).map(|&(s, _)| s)
    }

    pub fn is_new(&self, tgt: usize) -> bool {
        self.new_tokens.contains(&tgt)
    }

    /// Shared pairs whose tokens carry content (special markers excluded).
    pub fn shared_content(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.shared.iter().copied().filter(|&(_, t)| !Vocabulary::is_special(self.tgt_ids[t]))
    }

    /// Extends the alignment to EOS padding up to `len` positions on both
    /// sides. Padding positions are special and therefore shared: a target
    /// pad takes the source column at the same position when that is also
    /// padding, otherwise the source's final EOS.
    pub fn padded(&self, len: usize) -> Result<Self> {
        let (ns, nt) = (self.src_ids.len(), self.tgt_ids.len());
        if ns > len || nt > len {
            return Err(MdeError::AlignmentOutOfRange(format!("prompt longer than context {len}")));
        }
        let mut out = self.clone();
        out.src_ids.resize(len, EOS);
        out.tgt_ids.resize(len, EOS);
        for t in nt..len {
            let s = if t >= ns { t } else { ns - 1 };
            out.shared.push((s, t));
        }
        out.shared.sort_by_key(|&(_, t)| t);
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![0u8; self.tgt_ids.len()];
        for &(s, t) in &self.shared {
            if s >= self.src_ids.len() || t >= self.tgt_ids.len() {
                return Err(MdeError::AlignmentOutOfRange(format!("pair ({s}, {t})")));
            }
            seen[t] += 1;
        }
        for &t in &self.new_tokens {
            if t >= self.tgt_ids.len() {
                return Err(MdeError::AlignmentOutOfRange(format!("new token {t}")));
            }
            seen[t] += 1;
        }
        if seen.iter().any(|&c| c != 1) {
            return Err(MdeError::AlignmentOutOfRange("target index not covered exactly once".into()));
        }
        Ok(())
    }
}

/// Longest common subsequence of two id sequences as index pairs, preferring
/// the earliest positions when several subsequences are equally long.
pub fn lcs_pairs(a: &[TokenId], b: &[TokenId]) -> Vec<(usize, usize)> {
    let (n, m) = (a.len(), b.len());
    // suffix table: len[i][j] = LCS of a[i..], b[j..]
    let mut len = vec![vec![0usize; m + 1]; n + 1];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            len[i][j] = if a[i] == b[j] { len[i + 1][j + 1] + 1 } else { len[i + 1][j].max(len[i][j + 1]) };
        }
    }
    let mut pairs = Vec::with_capacity(len[0][0]);
    let (mut i, mut j) = (0, 0);
    while i < n && j < m {
        if a[i] == b[j] && len[i][j] == len[i + 1][j + 1] + 1 {
            pairs.push((i, j));
            i += 1;
            j += 1;
        } else if len[i + 1][j] >= len[i][j + 1] {
            i += 1;
        } else {
            j += 1;
        }
    }
    pairs
}

/// Classifies every target token as shared (via word-level LCS) or new.
/// Special tokens are always shared; one left unmatched by the LCS is
/// paired with the nearest source token carrying the same id.
pub fn align_tokens(src_ids: &[TokenId], tgt_ids: &[TokenId]) -> Result<TokenAlignment> {
    if src_ids.is_empty() || tgt_ids.is_empty() {
        return Err(MdeError::InvalidValue("cannot align an empty token sequence".into()));
    }
    let mut shared = lcs_pairs(src_ids, tgt_ids);
    let mut matched = vec![false; tgt_ids.len()];
    for &(_, t) in &shared {
        matched[t] = true;
    }
    let mut new_tokens = Vec::new();
    for (t, &id) in tgt_ids.iter().enumerate() {
        if matched[t] {
            continue;
        }
        if Vocabulary::is_special(id) {
            let fallback = src_ids
                .iter()
                .enumerate()
                .filter(|&(_, &s)| s == id)
                .min_by_key(|&(s, _)| (s as isize - t as isize).unsigned_abs())
                .map(|(s, _)| s)
                .unwrap_or(if id == BOS { 0 } else { src_ids.len() - 1 });
            shared.push((fallback, t));
        } else {
            new_tokens.push(t);
        }
    }
    shared.sort_by_key(|&(_, t)| t);
    Ok(TokenAlignment { shared, new_tokens, src_ids: src_ids.to_vec(), tgt_ids: tgt_ids.to_vec() })
}
