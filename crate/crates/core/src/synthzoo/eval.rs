//! Label-consuming evaluation: accuracy and rank correlation.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::inference::{predictive_semantics, ProbMatrix};

pub fn accuracy(p: &ProbMatrix, labels: &[usize]) -> Result<f64> {
    if labels.len() != p.n() {
        return Err(Error::Shape(format!("{} labels for {} samples", labels.len(), p.n())));
    }
    if p.n() == 0 {
        return Err(Error::InvalidInput("accuracy of an empty set".into()));
    }
    let hits = predictive_semantics(p).iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// 1-based ranks, ties sharing their average rank. `-inf` ranks lowest.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        None
    } else {
        Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spearman {
    pub rho: f64,
    pub p_value: f64,
    pub n: usize,
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("spearman inputs differ in length: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::InvalidInput(format!("spearman needs n >= 3, got {}", x.len())));
    }
    if x.iter().chain(y).any(|v| v.is_nan()) {
        return Err(Error::NonFinite("spearman input".into()));
    }
    Ok(())
}

fn rho_of_ranks(rx: &[f64], ry: &[f64]) -> Result<f64> {
    pearson(rx, ry).ok_or_else(|| Error::Degenerate("zero rank variance, rho undefined".into()))
}

/// Two-sided p-value from `t = rho sqrt((n-2)/(1-rho^2))` on n-2 dof.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Spearman> {
    check_pair(x, y)?;
    let rho = rho_of_ranks(&average_ranks(x), &average_ranks(y))?;
    let n = x.len();
    let p_value = if rho.abs() >= 1.0 {
        0.0
    } else {
        let dof = (n - 2) as f64;
        let t = rho * (dof / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, dof).expect("positive dof");
        (2.0 * (1.0 - dist.cdf(t.abs()))).min(1.0)
    };
    Ok(Spearman { rho, p_value, n })
}

/// Permutation p-value: share of label shuffles with `|rho| >= |rho_obs|`,
/// counting the observed arrangement.
pub fn spearman_permutation(x: &[f64], y: &[f64], resamples: usize, seed: u64) -> Result<Spearman> {
    check_pair(x, y)?;
    let rx = average_ranks(x);
    let mut ry = average_ranks(y);
    let rho = rho_of_ranks(&rx, &ry)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut extreme = 0usize;
    for _ in 0..resamples {
        ry.shuffle(&mut rng);
        let r = pearson(&rx, &ry).expect("variance unchanged by shuffling");
        if r.abs() >= rho.abs() - 1e-12 {
            extreme += 1;
        }
    }
    Ok(Spearman { rho, p_value: (extreme + 1) as f64 / (resamples + 1) as f64, n: x.len() })
}

pub fn write_labels(labels: &[usize], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::with_capacity(labels.len() * 3);
    for l in labels {
        s.push_str(&l.to_string());
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: impl AsRef<Path>, classes: usize) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let v: usize = l
                .trim()
                .parse()
                .map_err(|_| Error::InvalidInput(format!("{}:{}: not a label: {l:?}", path.display(), i + 1)))?;
            if v >= classes {
                return Err(Error::InvalidInput(format!("{}:{}: label {v} outside [0,{classes})", path.display(), i + 1)));
            }
            Ok(v)
        })
        .collect()
}
