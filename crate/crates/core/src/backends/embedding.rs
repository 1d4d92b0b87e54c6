use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbeddingError {
    #[error("embedding is empty")]
    Empty,
    #[error("embedding has zero or non-finite norm")]
    Degenerate,
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
}

/// A unit-length vector. Construction normalizes, so every value of this
/// type has L2 norm 1 up to rounding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Embedding {
    values: Vec<f64>,
}

impl Embedding {
    pub fn normalized(mut values: Vec<f64>) -> Result<Self, EmbeddingError> {
        if values.is_empty() {
            return Err(EmbeddingError::Empty);
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(EmbeddingError::Degenerate);
        }
        values.iter_mut().for_each(|v| *v /= norm);
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Cosine similarity; both operands are unit vectors so this is the dot product.
    pub fn cosine(&self, other: &Embedding) -> Result<f64, EmbeddingError> {
        if self.dim() != other.dim() {
            return Err(EmbeddingError::DimMismatch(self.dim(), other.dim()));
        }
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum())
    }

    /// Normalized arithmetic mean of the given embeddings.
    pub fn mean<'a>(items: impl IntoIterator<Item = &'a Embedding>) -> Result<Self, EmbeddingError> {
        let mut iter = items.into_iter();
        let first = iter.next().ok_or(EmbeddingError::Empty)?;
        let mut acc = first.values.clone();
        for e in iter {
            if e.dim() != acc.len() {
                return Err(EmbeddingError::DimMismatch(acc.len(), e.dim()));
            }
            acc.iter_mut().zip(&e.values).for_each(|(a, b)| *a += b);
        }
        Embedding::normalized(acc)
    }
}

/// Stored vectors that are already unit length are taken bit-for-bit, so
/// persisted embeddings reload unchanged.
impl TryFrom<Vec<f64>> for Embedding {
    type Error = EmbeddingError;

    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !values.is_empty() && (norm - 1.0).abs() <= 1e-9 {
            Ok(Self { values })
        } else {
            Embedding::normalized(values)
        }
    }
}

impl From<Embedding> for Vec<f64> {
    fn from(e: Embedding) -> Self {
        e.values
    }
}
