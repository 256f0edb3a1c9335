//! Kernel dependence between two models' target predictions (biased HSIC).
//!
//! `HSIC = trace(K H L H) / (n - 1)^2` with `H = I - 11^T / n`, where `K` and
//! `L` are Gram matrices over the probability rows of the two models. Working
//! on probability rows keeps models with different feature widths comparable.

use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::ProbMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Bandwidth {
    /// Median pairwise Euclidean distance; 1.0 when that median is 0.
    Median,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelKind {
    Rbf,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub kind: KernelKind,
    pub bandwidth: Bandwidth,
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            kind: KernelKind::Rbf,
            bandwidth: Bandwidth::Median,
        }
    }
}

impl KernelConfig {
    pub fn linear() -> Self {
        KernelConfig {
            kind: KernelKind::Linear,
            bandwidth: Bandwidth::Median,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.bandwidth {
            Bandwidth::Fixed(b) if !(b > 0.0 && b.is_finite()) => {
                Err(Error::InvalidInput(format!("kernel bandwidth must be > 0, got {b}")))
            }
            _ => Ok(()),
        }
    }
}

fn squared_distances(x: &Array2<f64>) -> Array2<f64> {
    let sq: Array1<f64> = x.outer_iter().map(|r| r.dot(&r)).collect();
    let g = x.dot(&x.t());
    let n = x.nrows();
    Array2::from_shape_fn((n, n), |(i, j)| {
        if i == j {
            0.0
        } else {
            (sq[i] + sq[j] - 2.0 * g[[i, j]]).max(0.0)
        }
    })
}

fn median_distance(d2: &Array2<f64>) -> f64 {
    let n = d2.nrows();
    let mut d: Vec<f64> = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            d.push(d2[[i, j]].sqrt());
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    let mid = d.len() / 2;
    let (_, &mut upper, _) = d.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    if d.len() % 2 == 1 {
        upper
    } else {
        let lower = d[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

pub fn gram(p: &ProbMatrix, kc: &KernelConfig) -> Array2<f64> {
    let x = p.values();
    match kc.kind {
        KernelKind::Linear => x.dot(&x.t()),
        KernelKind::Rbf => {
            let d2 = squared_distances(x);
            let sigma = match kc.bandwidth {
                Bandwidth::Fixed(b) => b,
                Bandwidth::Median => {
                    let m = median_distance(&d2);
                    if m > 0.0 {
                        m
                    } else {
                        1.0
                    }
                }
            };
            let denom = 2.0 * sigma * sigma;
            d2.mapv(|v| (-v / denom).exp())
        }
    }
}

/// `H K H`.
pub fn center(k: &Array2<f64>) -> Array2<f64> {
    let n = k.nrows() as f64;
    let row_means: Array1<f64> = k.outer_iter().map(|r| r.sum() / n).collect();
    let col_means: Array1<f64> = k.columns().into_iter().map(|c| c.sum() / n).collect();
    let grand = row_means.sum() / n;
    Array2::from_shape_fn(k.dim(), |(i, j)| k[[i, j]] - row_means[i] - col_means[j] + grand)
}

/// Centered Gram matrix of one model, reusable across HSIC evaluations.
#[derive(Debug, Clone)]
pub struct CenteredGram(Array2<f64>);

impl CenteredGram {
    pub fn new(p: &ProbMatrix, kc: &KernelConfig) -> Result<Self> {
        kc.validate()?;
        if p.n() < 2 {
            return Err(Error::InvalidInput("HSIC needs n >= 2".into()));
        }
        Ok(CenteredGram(center(&gram(p, kc))))
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    /// `trace(Kc Lc) / (n-1)^2`, which equals `trace(K H L H) / (n-1)^2`
    /// because `H` is idempotent. Symmetric in its arguments by construction.
    pub fn hsic(&self, other: &CenteredGram) -> Result<f64> {
        if self.n() != other.n() {
            return Err(Error::Shape(format!("HSIC sample counts differ: {} vs {}", self.n(), other.n())));
        }
        let s: f64 = self.0.iter().zip(other.0.iter()).map(|(a, b)| a * b).sum();
        let nm1 = (self.n() - 1) as f64;
        Ok(s / (nm1 * nm1))
    }
}

pub fn hsic(pa: &ProbMatrix, pb: &ProbMatrix, kc: &KernelConfig) -> Result<f64> {
    if pa.n() != pb.n() {
        return Err(Error::Shape(format!("HSIC sample counts differ: {} vs {}", pa.n(), pb.n())));
    }
    CenteredGram::new(pa, kc)?.hsic(&CenteredGram::new(pb, kc)?)
}

/// `Div(h) = mean over anchors h' of HSIC(h, h')` for each candidate.
pub fn div_scores_cached(candidates: &[&CenteredGram], anchors: &[&CenteredGram]) -> Result<Vec<f64>> {
    if anchors.is_empty() {
        return Err(Error::InvalidInput("diversity needs at least one anchor".into()));
    }
    candidates
        .par_iter()
        .map(|c| {
            let total = anchors.iter().map(|a| c.hsic(a)).sum::<Result<f64>>()?;
            Ok(total / anchors.len() as f64)
        })
        .collect()
}

pub fn div_scores(candidates: &[&ProbMatrix], anchors: &[&ProbMatrix], kc: &KernelConfig) -> Result<Vec<f64>> {
    if anchors.is_empty() {
        return Err(Error::InvalidInput("diversity needs at least one anchor".into()));
    }
    let cg: Vec<CenteredGram> = candidates.iter().map(|p| CenteredGram::new(p, kc)).collect::<Result<_>>()?;
    let ag: Vec<CenteredGram> = anchors.iter().map(|p| CenteredGram::new(p, kc)).collect::<Result<_>>()?;
    div_scores_cached(&cg.iter().collect::<Vec<_>>(), &ag.iter().collect::<Vec<_>>())
}
