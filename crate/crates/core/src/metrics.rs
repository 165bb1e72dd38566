//! Distances between POI-category distributions and their weighted
//! averages over guidance levels.

use crate::config_flow::ConfigTensor;
use crate::error::{Error, Result};

pub const DEFAULT_SMOOTHING: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct CategoryDistribution {
    pub probs: Vec<f64>,
    pub smoothing: f64,
}

impl CategoryDistribution {
    /// Wraps a probability vector, checking it sums to one.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let total: f64 = probs.iter().sum();
        if probs.is_empty() || probs.iter().any(|&p| p < 0.0 || !p.is_finite()) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("not a probability vector: {probs:?}")));
        }
        Ok(Self { probs, smoothing: 0.0 })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Pooled per-category histogram over all samples and cells, plus `ε_s` per
/// category, normalized.
pub fn to_distribution(samples: &[ConfigTensor], smoothing: f64) -> Result<CategoryDistribution> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Data("no samples to pool".into()))?;
    let p = first.p();
    let mut h = vec![smoothing; p];
    for s in samples {
        if s.p() != p {
            return Err(Error::Data(format!("category counts differ: {} vs {p}", s.p())));
        }
        for (acc, c) in h.iter_mut().zip(s.histogram()) {
            *acc += c as f64;
        }
    }
    let total: f64 = h.iter().sum();
    if total <= 0.0 {
        return Err(Error::Domain("all-zero samples with no smoothing".into()));
    }
    h.iter_mut().for_each(|v| *v /= total);
    Ok(CategoryDistribution { probs: h, smoothing })
}

fn check_pair(p: &CategoryDistribution, q: &CategoryDistribution) -> Result<()> {
    if p.len() != q.len() {
        return Err(Error::Dimension {
            op: "metric",
            detail: format!("{} vs {} categories", p.len(), q.len()),
        });
    }
    Ok(())
}

/// `Σ pᵢ ln(pᵢ/qᵢ)` with `0·ln 0 = 0`.
pub fn kl_div(p: &CategoryDistribution, q: &CategoryDistribution) -> Result<f64> {
    check_pair(p, q)?;
    let mut total = 0.0;
    for (i, (&a, &b)) in p.probs.iter().zip(&q.probs).enumerate() {
        if a == 0.0 {
            continue;
        }
        if b <= 0.0 {
            return Err(Error::Domain(format!("q[{i}] = 0 where p[{i}] = {a}")));
        }
        total += a * (a / b).ln();
    }
    Ok(total)
}

/// `‖√p − √q‖₂ / √2`.
pub fn hellinger(p: &CategoryDistribution, q: &CategoryDistribution) -> Result<f64> {
    check_pair(p, q)?;
    let sq: f64 = p
        .probs
        .iter()
        .zip(&q.probs)
        .map(|(a, b)| (a.sqrt() - b.sqrt()).powi(2))
        .sum();
    Ok((sq / 2.0).sqrt())
}

/// Earth mover's distance with ground metric `|i − j|`: `Σ |CDF_p − CDF_q|`.
pub fn wasserstein_1d(p: &CategoryDistribution, q: &CategoryDistribution) -> Result<f64> {
    check_pair(p, q)?;
    let (mut cp, mut cq, mut total) = (0.0, 0.0, 0.0);
    for (a, b) in p.probs.iter().zip(&q.probs) {
        cp += a;
        cq += b;
        total += (cp - cq).abs();
    }
    Ok(total)
}

/// `Σ wⱼ·m(Xⱼ, X̂ⱼ) / Σ wⱼ`.
pub fn avg_weighted<F>(metric: F, pairs: &[(CategoryDistribution, CategoryDistribution, f64)]) -> Result<f64>
where
    F: Fn(&CategoryDistribution, &CategoryDistribution) -> Result<f64>,
{
    if pairs.iter().any(|(_, _, w)| *w < 0.0 || !w.is_finite()) {
        return Err(Error::Data("negative or non-finite weight".into()));
    }
    let total: f64 = pairs.iter().map(|(_, _, w)| w).sum();
    if total <= 0.0 {
        return Err(Error::Data("weights sum to zero".into()));
    }
    let mut acc = 0.0;
    for (p, q, w) in pairs {
        if *w > 0.0 {
            acc += w * metric(p, q)?;
        }
    }
    Ok(acc / total)
}
