//! Per-model inference on the target set: class probabilities, predictive
//! and structural semantics, and the entropy helpers everything else uses.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::tensorio::{Head, ModelRecord};

const ROW_SUM_TOL: f64 = 1e-6;

/// n x C matrix whose rows are probability vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMatrix(Array2<f64>);

impl ProbMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.ncols() < 2 {
            return Err(Error::Shape("probability matrix needs at least 2 classes".into()));
        }
        for (i, row) in values.outer_iter().enumerate() {
            if row.iter().any(|&p| !p.is_finite() || p < 0.0) {
                return Err(Error::InvalidInput(format!("row {i} has a negative or non-finite entry")));
            }
            let s: f64 = row.sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InvalidInput(format!("row {i} sums to {s}")));
            }
        }
        Ok(Self::from_unchecked(values))
    }

    /// Stored row-major so reductions sum in the same order for every producer.
    pub(crate) fn from_unchecked(values: Array2<f64>) -> Self {
        if values.is_standard_layout() {
            ProbMatrix(values)
        } else {
            ProbMatrix(values.as_standard_layout().into_owned())
        }
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn classes(&self) -> usize {
        self.0.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.0.row(i)
    }

    /// Column mean, i.e. the predicted class marginal over the target set.
    pub fn mean_row(&self) -> Array1<f64> {
        self.0.mean_axis(Axis(0)).expect("non-empty probability matrix")
    }
}

/// Raw logits `features . weights^T + bias`.
pub fn logits(features: ArrayView2<f64>, head: &Head) -> Array2<f64> {
    let mut z = features.dot(&head.weights.t());
    z += &head.bias;
    z
}

/// Row-wise log-softmax of `z / temperature` with max subtraction.
pub fn log_softmax_rows(z: &Array2<f64>, temperature: f64) -> Array2<f64> {
    let mut out = z / temperature;
    for mut row in out.outer_iter_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

pub fn softmax_rows(z: &Array2<f64>, temperature: f64) -> Array2<f64> {
    log_softmax_rows(z, temperature).mapv_into(f64::exp)
}

pub fn forward_head(features: ArrayView2<f64>, head: &Head, temperature: f64) -> Result<ProbMatrix> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidInput(format!("temperature must be positive, got {temperature}")));
    }
    let z = logits(features, head);
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    Ok(ProbMatrix::from_unchecked(softmax_rows(&z, temperature)))
}

pub fn forward(m: &ModelRecord, temperature: f64) -> Result<ProbMatrix> {
    forward_head(m.features.view(), &m.head, temperature)
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (c, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = c;
        }
    }
    best
}

/// Most probable class per sample.
pub fn predictive_semantics(p: &ProbMatrix) -> Vec<usize> {
    p.0.outer_iter().map(argmax).collect()
}

fn normalize_rows(features: ArrayView2<f64>) -> Result<Array2<f64>> {
    let mut out = features.to_owned();
    for (i, mut row) in out.outer_iter_mut().enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::ZeroFeatureRow { row: i });
        }
        row /= norm;
    }
    Ok(out)
}

fn nearest_by_cosine(unit_features: &Array2<f64>, centroids: &Array2<f64>) -> Vec<usize> {
    // A zero centroid has cosine similarity 0 with everything.
    let unit_centroids = {
        let mut c = centroids.clone();
        for mut row in c.outer_iter_mut() {
            let norm = row.dot(&row).sqrt();
            if norm > 0.0 {
                row /= norm;
            }
        }
        c
    };
    let sims = unit_features.dot(&unit_centroids.t());
    // Minimum cosine distance == maximum cosine similarity.
    sims.outer_iter().map(argmax).collect()
}

/// Cluster-derived pseudo-labels.
///
/// Rows are L2-normalized, initial centroids are the probability-weighted
/// means of the normalized features, and each sample is assigned to the
/// centroid with the smallest cosine distance. Further rounds rebuild the
/// centroids from the hard assignment (a class that receives no samples keeps
/// its previous centroid) and reassign. `rounds` counts assignments, so
/// `rounds = 2` is one weighted assignment followed by one hard refinement.
pub fn structural_semantics(features: ArrayView2<f64>, p: &ProbMatrix, rounds: usize) -> Result<Vec<usize>> {
    let (n, _) = features.dim();
    let c = p.classes();
    if n != p.n() {
        return Err(Error::Shape(format!("features have {n} rows, probabilities {}", p.n())));
    }
    if n < c {
        return Err(Error::InvalidInput(format!("structural semantics needs n >= C, got n={n} C={c}")));
    }
    if rounds == 0 {
        return Err(Error::InvalidInput("rounds must be at least 1".into()));
    }
    let unit = normalize_rows(features)?;

    let mut centroids = p.0.t().dot(&unit);
    let mass = p.0.sum_axis(Axis(0));
    for (mut row, &m) in centroids.outer_iter_mut().zip(mass.iter()) {
        if m > 0.0 {
            row /= m;
        }
    }
    let mut labels = nearest_by_cosine(&unit, &centroids);

    for _ in 1..rounds {
        let mut sums = Array2::<f64>::zeros(centroids.dim());
        let mut counts = vec![0usize; c];
        for (i, &l) in labels.iter().enumerate() {
            let mut s = sums.row_mut(l);
            s += &unit.row(i);
            counts[l] += 1;
        }
        for (k, &cnt) in counts.iter().enumerate() {
            if cnt > 0 {
                let mean = sums.row(k).mapv(|v| v / cnt as f64);
                centroids.row_mut(k).assign(&mean);
            }
        }
        labels = nearest_by_cosine(&unit, &centroids);
    }
    Ok(labels)
}

/// Shannon entropy in nats, with `0 log 0 = 0`.
pub fn entropy(p: ArrayView1<f64>) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

pub fn mean_entropy(p: &ProbMatrix) -> f64 {
    let total: f64 = p.0.outer_iter().map(entropy).sum();
    total / p.n() as f64
}

/// Empirical `H(structural | predictive)` in nats.
pub fn conditional_entropy(structural: &[usize], predictive: &[usize], classes: usize) -> Result<f64> {
    if structural.len() != predictive.len() {
        return Err(Error::Shape(format!(
            "label lengths differ: {} vs {}",
            structural.len(),
            predictive.len()
        )));
    }
    let n = structural.len();
    if n == 0 {
        return Ok(0.0);
    }
    let mut joint = Array2::<f64>::zeros((classes, classes));
    for (&s, &y) in structural.iter().zip(predictive) {
        if s >= classes || y >= classes {
            return Err(Error::InvalidInput(format!("label out of range for C={classes}")));
        }
        joint[[y, s]] += 1.0;
    }
    let mut h = 0.0;
    for row in joint.outer_iter() {
        let count = row.sum();
        if count == 0.0 {
            continue;
        }
        let cond = row.mapv(|v| v / count);
        h += count / n as f64 * entropy(cond.view());
    }
    Ok(h)
}
