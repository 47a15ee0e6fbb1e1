//! Plain forward definitions of the primitives. The tape records these and
//! adds the matching backward rules.

use crate::error::{Error, Result};

pub(crate) fn check_len(op: &str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Contract(format!(
            "{op}: length mismatch {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

pub fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len("dot", a, b)?;
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum())
}

pub fn hadamard(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    check_len("hadamard", a, b)?;
    Ok(a.iter().zip(b).map(|(x, y)| x * y).collect())
}

pub fn add(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    check_len("add", a, b)?;
    Ok(a.iter().zip(b).map(|(x, y)| x + y).collect())
}

pub fn scale(a: &[f64], c: f64) -> Vec<f64> {
    a.iter().map(|x| x * c).collect()
}

/// Row-major `rows x cols` matrix times a vector of length `cols`.
pub fn matvec(matrix: &[f64], rows: usize, cols: usize, v: &[f64]) -> Result<Vec<f64>> {
    if matrix.len() != rows * cols || v.len() != cols {
        return Err(Error::Contract(format!(
            "matvec: {rows}x{cols} matrix ({} values) with vector of length {}",
            matrix.len(),
            v.len()
        )));
    }
    Ok(matrix
        .chunks_exact(cols)
        .map(|row| row.iter().zip(v).map(|(w, x)| w * x).sum())
        .collect())
}

pub fn concat(parts: &[&[f64]]) -> Vec<f64> {
    parts.iter().flat_map(|p| p.iter().copied()).collect()
}

pub fn mean(parts: &[&[f64]]) -> Result<Vec<f64>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Contract("mean of an empty list".into()))?;
    let mut out = vec![0.0; first.len()];
    for p in parts {
        check_len("mean", first, p)?;
        for (o, x) in out.iter_mut().zip(p.iter()) {
            *o += x;
        }
    }
    let n = parts.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

/// Max-shifted softmax.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Contract("softmax of an empty vector".into()));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x.max(0.0)).collect()
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len("cosine", a, b)?;
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric("cosine similarity of a zero vector".into()));
    }
    Ok(dot(a, b)? / (na * nb))
}
