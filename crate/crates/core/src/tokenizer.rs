//! WordPiece tokenization of questions.
//!
//! Text is lowercased, split on whitespace and punctuation (punctuation
//! characters become standalone tokens), and every word is segmented by
//! greedy longest-match against the vocabulary, continuation pieces carrying
//! the `##` prefix. A word that cannot be fully segmented becomes `[UNK]`.
//! The sequence is framed as `[CLS] … [SEP]` and truncated to
//! [`MAX_LEN`] tokens with `[SEP]` kept last.

use std::collections::HashMap;
use std::path::Path;

use crate::{Error, Result};

pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const UNK: &str = "[UNK]";
pub const CONTINUATION_PREFIX: &str = "##";

/// Maximum sequence length, framing tokens included.
pub const MAX_LEN: usize = 32;

/// Words longer than this are mapped straight to `[UNK]`.
const MAX_WORD_CHARS: usize = 100;

#[derive(Debug, Clone)]
pub struct Vocab {
    entries: Vec<String>,
    index: HashMap<String, u32>,
    unk_id: u32,
    cls_id: u32,
    sep_id: u32,
}

impl Vocab {
    /// Builds a vocabulary from tokens in id order.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let entries: Vec<String> = tokens.into_iter().map(Into::into).collect();
        if entries.is_empty() {
            return Err(Error::config("vocabulary is empty"));
        }
        let mut index = HashMap::with_capacity(entries.len());
        for (i, tok) in entries.iter().enumerate() {
            if tok.is_empty() {
                return Err(Error::config(format!("empty vocabulary entry at line {}", i + 1)));
            }
            if index.insert(tok.clone(), i as u32).is_some() {
                return Err(Error::config(format!(
                    "duplicate vocabulary token `{tok}` at line {}",
                    i + 1
                )));
            }
        }
        let special = |name: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| Error::config(format!("vocabulary is missing special token {name}")))
        };
        Ok(Self {
            unk_id: special(UNK)?,
            cls_id: special(CLS)?,
            sep_id: special(SEP)?,
            entries,
            index,
        })
    }

    /// Parses one token per line; the line number is the id.
    pub fn parse(text: &str) -> Result<Self> {
        Self::from_tokens(text.lines().map(|l| l.trim_end_matches('\r')))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.entries.get(id as usize).map(String::as_str)
    }

    pub fn unk_id(&self) -> u32 {
        self.unk_id
    }

    pub fn cls_id(&self) -> u32 {
        self.cls_id
    }

    pub fn sep_id(&self) -> u32 {
        self.sep_id
    }
}

/// A framed, id-mapped question.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    tokens: Vec<String>,
    ids: Vec<u32>,
}

impl TokenSequence {
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    /// Always false; a sequence carries at least `[CLS]` and `[SEP]`.
    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Builds a sequence directly from ids, validating framing and range.
    pub fn from_ids(ids: Vec<u32>, vocab: &Vocab) -> Result<Self> {
        if ids.len() < 2 || ids.len() > MAX_LEN {
            return Err(Error::invalid(format!(
                "sequence length {} outside 2..={MAX_LEN}",
                ids.len()
            )));
        }
        if ids[0] != vocab.cls_id || ids[ids.len() - 1] != vocab.sep_id {
            return Err(Error::invalid("sequence must start with [CLS] and end with [SEP]"));
        }
        let tokens = ids
            .iter()
            .map(|&id| {
                vocab
                    .token(id)
                    .map(str::to_owned)
                    .ok_or_else(|| Error::invalid(format!("token id {id} outside vocabulary")))
            })
            .collect::<Result<_>>()?;
        Ok(Self { tokens, ids })
    }
}

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation() || (!c.is_alphanumeric() && !c.is_whitespace() && !c.is_control())
}

/// Lowercases and splits into words and standalone punctuation.
pub fn basic_split(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut current = String::new();
    for c in text.chars().flat_map(char::to_lowercase) {
        if c.is_whitespace() || c.is_control() {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
        } else if is_punctuation(c) {
            if !current.is_empty() {
                words.push(std::mem::take(&mut current));
            }
            words.push(c.to_string());
        } else {
            current.push(c);
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    words
}

/// Greedy longest-match segmentation of one word. `None` when some suffix
/// cannot be matched.
fn wordpiece(word: &str, vocab: &Vocab) -> Option<Vec<(String, u32)>> {
    let chars: Vec<char> = word.chars().collect();
    if chars.len() > MAX_WORD_CHARS {
        return None;
    }
    let mut pieces = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let mut end = chars.len();
        let mut found = None;
        while end > start {
            let mut piece: String = chars[start..end].iter().collect();
            if start > 0 {
                piece.insert_str(0, CONTINUATION_PREFIX);
            }
            if let Some(id) = vocab.id(&piece) {
                found = Some((piece, id));
                break;
            }
            end -= 1;
        }
        pieces.push(found?);
        start = end;
    }
    Some(pieces)
}

pub fn tokenize(text: &str, vocab: &Vocab) -> TokenSequence {
    let mut tokens = vec![CLS.to_owned()];
    let mut ids = vec![vocab.cls_id];
    'words: for word in basic_split(text) {
        match wordpiece(&word, vocab) {
            Some(pieces) => {
                for (tok, id) in pieces {
                    if ids.len() == MAX_LEN - 1 {
                        break 'words;
                    }
                    tokens.push(tok);
                    ids.push(id);
                }
            }
            None => {
                if ids.len() == MAX_LEN - 1 {
                    break;
                }
                tokens.push(UNK.to_owned());
                ids.push(vocab.unk_id);
            }
        }
    }
    tokens.push(SEP.to_owned());
    ids.push(vocab.sep_id);
    TokenSequence { tokens, ids }
}

/// Joins word pieces back into words by dropping `##` continuation markers.
/// Framing tokens are skipped.
pub fn detokenize(seq: &TokenSequence) -> Vec<String> {
    let mut words: Vec<String> = Vec::new();
    for tok in seq.tokens() {
        if tok == CLS || tok == SEP {
            continue;
        }
        match tok.strip_prefix(CONTINUATION_PREFIX) {
            Some(rest) if !words.is_empty() => words.last_mut().unwrap().push_str(rest),
            _ => words.push(tok.clone()),
        }
    }
    words
}
