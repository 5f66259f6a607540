use std::collections::HashMap;
use std::path::Path;

use crate::{Error, Result};

/// Answer strings in classifier output order (one per line on disk).
#[derive(Debug, Clone)]
pub struct AnswerVocab {
    answers: Vec<String>,
    index: HashMap<String, usize>,
}

impl AnswerVocab {
    pub fn from_answers<I, S>(answers: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let answers: Vec<String> = answers.into_iter().map(Into::into).collect();
        if answers.is_empty() {
            return Err(Error::config("answer vocabulary is empty"));
        }
        let mut index = HashMap::with_capacity(answers.len());
        for (i, a) in answers.iter().enumerate() {
            if a.is_empty() {
                return Err(Error::config(format!("empty answer at line {}", i + 1)));
            }
            if index.insert(a.clone(), i).is_some() {
                return Err(Error::config(format!("duplicate answer `{a}` at line {}", i + 1)));
            }
        }
        Ok(Self { answers, index })
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_answers(text.lines().map(|l| l.trim_end_matches('\r')))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn answer(&self, index: usize) -> Option<&str> {
        self.answers.get(index).map(String::as_str)
    }

    pub fn index_of(&self, answer: &str) -> Option<usize> {
        self.index.get(answer).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.answers.iter().map(String::as_str)
    }
}
