//! Text export of trained vectors and cosine nearest-neighbour queries.

use std::io::{BufRead, Write};
use std::str::FromStr;

use ndarray::Array2;
use thiserror::Error;

use crate::model::EmbeddingParams;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("checkpoint has {params} rows but the vocabulary has {vocab} tokens")]
    SizeMismatch { params: usize, vocab: usize },
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("malformed embedding file: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Which vectors constitute the exported embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExportMode {
    /// `(w_i + wt_i) / 2`.
    #[default]
    Avg,
    W,
    Wt,
}

impl std::fmt::Display for ExportMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Avg => "avg",
            Self::W => "w",
            Self::Wt => "wt",
        })
    }
}

impl FromStr for ExportMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "avg" => Ok(Self::Avg),
            "w" => Ok(Self::W),
            "wt" => Ok(Self::Wt),
            _ => Err(format!("unknown export mode {s:?} (expected avg, w or wt)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub tokens: Vec<String>,
    pub vectors: Array2<f64>,
}

impl Embeddings {
    pub fn from_params(
        params: &EmbeddingParams,
        tokens: &[String],
        mode: ExportMode,
    ) -> Result<Self, EmbeddingError> {
        if params.n() != tokens.len() {
            return Err(EmbeddingError::SizeMismatch {
                params: params.n(),
                vocab: tokens.len(),
            });
        }
        let vectors = match mode {
            ExportMode::Avg => (&params.w + &params.wt) / 2.0,
            ExportMode::W => params.w.clone(),
            ExportMode::Wt => params.wt.clone(),
        };
        Ok(Self {
            tokens: tokens.to_vec(),
            vectors,
        })
    }

    /// One line per token: `token v1 ... vd`, shortest round-trip decimals.
    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for (tok, row) in self.tokens.iter().zip(self.vectors.rows()) {
            write!(out, "{tok}")?;
            for v in row {
                write!(out, " {v}")?;
            }
            writeln!(out)?;
        }
        out.flush()
    }

    pub fn read<R: BufRead>(input: R) -> Result<Self, EmbeddingError> {
        let mut tokens = Vec::new();
        let mut flat = Vec::new();
        let mut dim = None;
        for (k, line) in input.lines().enumerate() {
            let line = line?;
            let mut fields = line.split_whitespace();
            let Some(tok) = fields.next() else { continue };
            let values: Vec<f64> = fields
                .map(str::parse)
                .collect::<Result<_, _>>()
                .map_err(|e| EmbeddingError::Format(format!("line {}: {e}", k + 1)))?;
            if *dim.get_or_insert(values.len()) != values.len() {
                return Err(EmbeddingError::Format(format!(
                    "line {} has a different dimension",
                    k + 1
                )));
            }
            tokens.push(tok.to_string());
            flat.extend(values);
        }
        let d = dim.unwrap_or(0);
        let vectors = Array2::from_shape_vec((tokens.len(), d), flat)
            .map_err(|e| EmbeddingError::Format(e.to_string()))?;
        Ok(Self { tokens, vectors })
    }

    /// Top `k` tokens by cosine similarity to `query`, excluding the query
    /// itself. Ties keep the lower token id first.
    pub fn neighbors(&self, query: &str, k: usize) -> Result<Vec<(String, f64)>, EmbeddingError> {
        let q = self
            .tokens
            .iter()
            .position(|t| t == query)
            .ok_or_else(|| EmbeddingError::UnknownToken(query.to_string()))?;
        let norms: Vec<f64> = self
            .vectors
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt())
            .collect();
        let qv = self.vectors.row(q);
        let mut scored: Vec<(usize, f64)> = (0..self.tokens.len())
            .filter(|&j| j != q)
            .map(|j| {
                let denom = norms[q] * norms[j];
                let sim = if denom > 0.0 {
                    qv.dot(&self.vectors.row(j)) / denom
                } else {
                    0.0
                };
                (j, sim)
            })
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        Ok(scored
            .into_iter()
            .take(k)
            .map(|(j, s)| (self.tokens[j].clone(), s))
            .collect())
    }
}
