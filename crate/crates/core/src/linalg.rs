//! Small dense-vector helpers shared by the retrieval and sampling code.

use crate::error::{Error, Result};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Unit-length copy of `a`.
pub fn normalized(a: &[f64]) -> Result<Vec<f64>> {
    let n = norm(a);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::ZeroVector);
    }
    Ok(a.iter().map(|x| x / n).collect())
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let denom = norm(a) * norm(b);
    if denom == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(dot(a, b) / denom)
}

pub(crate) fn check_dims<'a>(vectors: impl IntoIterator<Item = &'a [f64]>, dim: usize) -> Result<()> {
    for v in vectors {
        if v.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: v.len(),
            });
        }
    }
    Ok(())
}

/// Cosine similarity of every row of `rows` against every row of `cols`.
pub fn cosine_matrix(rows: &[Vec<f64>], cols: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let dim = rows.first().or(cols.first()).map_or(0, Vec::len);
    check_dims(rows.iter().chain(cols).map(Vec::as_slice), dim)?;
    let rows_n = rows.iter().map(|r| normalized(r)).collect::<Result<Vec<_>>>()?;
    let cols_n = cols.iter().map(|c| normalized(c)).collect::<Result<Vec<_>>>()?;
    Ok(rows_n
        .iter()
        .map(|r| cols_n.iter().map(|c| dot(r, c).clamp(-1.0, 1.0)).collect())
        .collect())
}
