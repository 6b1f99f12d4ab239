use std::collections::HashMap;
use std::io::{BufRead, Write};

use super::StoreError;

/// Token vocabulary ordered by descending frequency, ties broken
/// lexicographically.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Vocabulary {
    ids: HashMap<String, u32>,
    tokens: Vec<String>,
    counts: Vec<u64>,
}

impl Vocabulary {
    /// Counts whitespace-separated tokens over `sentences` and keeps the
    /// `max_size` most frequent with frequency at least `min_count`.
    pub fn build<I, S>(sentences: I, max_size: usize, min_count: u64) -> Result<Self, StoreError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut freq: HashMap<String, u64> = HashMap::new();
        let mut seen_any = false;
        for sentence in sentences {
            for tok in sentence.as_ref().split_whitespace() {
                seen_any = true;
                *freq.entry(tok.to_string()).or_default() += 1;
            }
        }
        if !seen_any {
            return Err(StoreError::EmptyCorpus);
        }
        let mut entries: Vec<(String, u64)> =
            freq.into_iter().filter(|(_, c)| *c >= min_count).collect();
        entries.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        entries.truncate(max_size);
        Ok(Self::from_ranked(entries))
    }

    fn from_ranked(entries: Vec<(String, u64)>) -> Self {
        let mut v = Self::default();
        for (tok, count) in entries {
            v.ids.insert(tok.clone(), v.tokens.len() as u32);
            v.tokens.push(tok);
            v.counts.push(count);
        }
        v
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn count(&self, id: u32) -> u64 {
        self.counts[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Writes `token<TAB>count` lines in rank order.
    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for (tok, count) in self.tokens.iter().zip(&self.counts) {
            writeln!(out, "{tok}\t{count}")?;
        }
        out.flush()
    }

    pub fn read<R: BufRead>(input: R) -> Result<Self, StoreError> {
        let mut entries = Vec::new();
        for (lineno, line) in input.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (tok, count) = line.split_once('\t').ok_or_else(|| {
                StoreError::Format(format!("vocabulary line {} lacks a tab", lineno + 1))
            })?;
            let count = count.trim().parse().map_err(|_| {
                StoreError::Format(format!("vocabulary line {}: bad count", lineno + 1))
            })?;
            entries.push((tok.to_string(), count));
        }
        Ok(Self::from_ranked(entries))
    }
}
