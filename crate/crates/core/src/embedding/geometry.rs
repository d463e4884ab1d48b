use super::Embedding;
use crate::error::{Error, Result};

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

pub fn squared_euclidean(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// `1 - cos(u, v)`, clamped to `[0, 2]` against rounding.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Geometry(format!(
            "dimension mismatch: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Geometry("cosine distance of a zero vector".into()));
    }
    Ok((1.0 - dot(u, v) / (nu * nv)).clamp(0.0, 2.0))
}

/// Candidate with the smallest cosine distance to `query`; ties go to the
/// lexicographically smallest id.
pub fn nearest<'a>(query: &[f64], candidates: &'a [Embedding]) -> Result<&'a Embedding> {
    let mut best: Option<(f64, &Embedding)> = None;
    for c in candidates {
        let d = cosine_distance(query, &c.vector)?;
        best = match best {
            Some((bd, b)) if bd < d || (bd == d && b.id <= c.id) => Some((bd, b)),
            _ => Some((d, c)),
        };
    }
    best.map(|(_, e)| e)
        .ok_or_else(|| Error::Precondition("nearest: empty candidate list".into()))
}
