//! SUTE-weighted ensembling, outlier-model recycling and classifier-head
//! adaptation on the unlabeled target set.
//!
//! The adaptation objective is
//!
//! ```text
//! L_all = L_sim + gamma1 * L_pse + gamma2 * L_omr
//! ```
//!
//! where `L_sim` is the SUTE-weighted sum of each member's information
//! maximization loss, `L_pse` is cross-entropy of the ensemble against its own
//! argmax labels and `L_omr` is cross-entropy against labels recycled from
//! confident outlier models. Only the linear heads move; features are frozen.
//! The information maximization loss is used in its minimized form
//! `mean H(p_i) - H(mean p_i)`.

use std::io::Write;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{argmax, entropy, log_softmax_rows, mean_entropy, ProbMatrix};
use crate::tensorio::{Head, ModelRecord};

/// `softmax(sutes / temperature)`.
pub fn ensemble_weights(sutes: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if sutes.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    if sutes.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("ensemble SUTE".into()));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidInput(format!("temperature must be positive, got {temperature}")));
    }
    Ok(softmax(&sutes.iter().map(|s| s / temperature).collect::<Vec<_>>()))
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

#[derive(Debug, Clone)]
pub struct Member<'a> {
    pub record: &'a ModelRecord,
    /// Current (possibly adapted) head; starts as a copy of the record's.
    pub head: Head,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct EnsembleModel<'a> {
    pub members: Vec<Member<'a>>,
}

impl<'a> EnsembleModel<'a> {
    pub fn new(records: &[&'a ModelRecord], weights: &[f64]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyEnsemble);
        }
        if records.len() != weights.len() {
            return Err(Error::Shape(format!("{} members but {} weights", records.len(), weights.len())));
        }
        let s: f64 = weights.iter().sum();
        if weights.iter().any(|&w| !(w > 0.0)) || (s - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("ensemble weights must be > 0 and sum to 1, got {weights:?}")));
        }
        let n = records[0].n();
        let c = records[0].classes();
        if records.iter().any(|r| r.n() != n || r.classes() != c) {
            return Err(Error::Shape("ensemble members disagree on n or C".into()));
        }
        Ok(EnsembleModel {
            members: records
                .iter()
                .zip(weights)
                .map(|(r, &w)| Member { record: r, head: r.head.clone(), weight: w })
                .collect(),
        })
    }

    /// Weights from the softmax of member SUTEs.
    pub fn from_sutes(records: &[&'a ModelRecord], sutes: &[f64], temperature: f64) -> Result<Self> {
        let w = ensemble_weights(sutes, temperature)?;
        Self::new(records, &w)
    }

    pub fn weights(&self) -> Vec<f64> {
        self.members.iter().map(|m| m.weight).collect()
    }

    pub fn heads(&self) -> Vec<Head> {
        self.members.iter().map(|m| m.head.clone()).collect()
    }

    pub fn n(&self) -> usize {
        self.members[0].record.n()
    }

    pub fn classes(&self) -> usize {
        self.members[0].record.classes()
    }

    pub fn member_probs(&self) -> Result<Vec<ProbMatrix>> {
        self.members
            .iter()
            .map(|m| crate::inference::forward_head(m.record.features.view(), &m.head, 1.0))
            .collect()
    }
}

/// Row-wise convex combination of member outputs.
pub fn ensemble_forward(e: &EnsembleModel) -> Result<ProbMatrix> {
    let probs = e.member_probs()?;
    let mut acc = Array2::<f64>::zeros((e.n(), e.classes()));
    for (p, m) in probs.iter().zip(&e.members) {
        acc.scaled_add(m.weight, p.values());
    }
    Ok(ProbMatrix::from_unchecked(acc))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecyclePair {
    pub sample: usize,
    pub label: usize,
    pub model_id: String,
    pub confidence: f64,
}

/// For every sample, take the single most confident outlier (lowest id on
/// ties) and keep its argmax label when its confidence exceeds `tau`.
pub fn mine_recycle_pairs_from_probs(outliers: &[(&str, &ProbMatrix)], tau: f64) -> Vec<RecyclePair> {
    let Some(first) = outliers.first() else {
        return Vec::new();
    };
    let mut order: Vec<usize> = (0..outliers.len()).collect();
    order.sort_by(|&a, &b| outliers[a].0.cmp(outliers[b].0));
    let n = first.1.n();
    let mut pairs = Vec::new();
    for i in 0..n {
        let mut best: Option<(usize, f64)> = None;
        for &k in &order {
            let row = outliers[k].1.row(i);
            let conf = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            if best.is_none_or(|(_, c)| conf > c) {
                best = Some((k, conf));
            }
        }
        let (k, conf) = best.unwrap();
        if conf > tau {
            pairs.push(RecyclePair {
                sample: i,
                label: argmax(outliers[k].1.row(i)),
                model_id: outliers[k].0.to_string(),
                confidence: conf,
            });
        }
    }
    pairs
}

pub fn mine_recycle_pairs(outliers: &[&ModelRecord], tau: f64) -> Result<Vec<RecyclePair>> {
    let probs: Vec<ProbMatrix> = outliers
        .iter()
        .map(|m| crate::inference::forward(m, 1.0))
        .collect::<Result<_>>()?;
    let named: Vec<(&str, &ProbMatrix)> = outliers.iter().map(|m| m.id.as_str()).zip(&probs).collect();
    Ok(mine_recycle_pairs_from_probs(&named, tau))
}

pub fn pseudo_labels(q: &ProbMatrix) -> Vec<usize> {
    crate::inference::predictive_semantics(q)
}

fn mean_ce(q: &ProbMatrix, targets: impl Iterator<Item = (usize, usize)>) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, y) in targets {
        total -= q.values()[[i, y]].ln();
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Mean cross-entropy of the ensemble output against fixed pseudo-labels.
pub fn loss_pse(q: &ProbMatrix, labels: &[usize]) -> f64 {
    mean_ce(q, labels.iter().copied().enumerate())
}

/// Mean cross-entropy over recycled pairs; 0 when there are none.
pub fn loss_omr(q: &ProbMatrix, pairs: &[RecyclePair]) -> f64 {
    mean_ce(q, pairs.iter().map(|p| (p.sample, p.label)))
}

pub fn loss_im(p: &ProbMatrix) -> f64 {
    mean_entropy(p) - entropy(p.mean_row().view())
}

pub fn loss_sim(member_probs: &[ProbMatrix], weights: &[f64]) -> f64 {
    member_probs.iter().zip(weights).map(|(p, w)| w * loss_im(p)).sum()
}

pub fn loss_cim(q: &ProbMatrix) -> f64 {
    loss_im(q)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImVariant {
    /// Per-member IM weighted by ensemble weights.
    Separate,
    /// IM of the ensemble output.
    Collaborative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub gamma1: f64,
    pub gamma2: f64,
    pub tau_recycle: f64,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_temperature: f64,
    /// Recorded for reproducibility; full-batch descent draws no randomness.
    pub seed: u64,
    pub im_variant: ImVariant,
    /// Learn the ensemble weights (softmax-reparameterized) instead of
    /// freezing the SUTE weights. Ablation only.
    pub learnable_weights: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            gamma1: 0.3,
            gamma2: 0.3,
            tau_recycle: 0.95,
            epochs: 50,
            lr: 0.01,
            momentum: 0.9,
            weight_temperature: 1.0,
            seed: 0,
            im_variant: ImVariant::Separate,
            learnable_weights: false,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.gamma1 >= 0.0
            && self.gamma2 >= 0.0
            && (0.0..=1.0).contains(&self.tau_recycle)
            && self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_temperature > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid adaptation config {self:?}")))
        }
    }

    pub fn term_weights(&self) -> TermWeights {
        let (sim, cim) = match self.im_variant {
            ImVariant::Separate => (1.0, 0.0),
            ImVariant::Collaborative => (0.0, 1.0),
        };
        TermWeights { sim, pse: self.gamma1, omr: self.gamma2, cim }
    }
}

/// Coefficients of each loss term in the total objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermWeights {
    pub sim: f64,
    pub pse: f64,
    pub omr: f64,
    pub cim: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub sim: f64,
    pub pse: f64,
    pub omr: f64,
    pub cim: f64,
    pub all: f64,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub heads: Vec<Head>,
    /// Gradient with respect to the weight logits `alpha`, `theta = softmax(alpha)`.
    pub weight_logits: Vec<f64>,
}

fn logsumexp(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `mean H(p_i) - H(mean p)` and its gradient with respect to `p`, given log-probs.
fn im_and_grad(lp: &Array2<f64>, p: &Array2<f64>) -> (f64, Array2<f64>) {
    let n = p.nrows() as f64;
    let mean = p.mean_axis(Axis(0)).unwrap();
    let log_mean = mean.mapv(f64::ln);
    let cond: f64 = -p.iter().zip(lp.iter()).map(|(&a, &b)| if a > 0.0 { a * b } else { 0.0 }).sum::<f64>() / n;
    let marg = entropy(mean.view());
    let mut g = -lp.clone();
    g += &log_mean;
    g /= n;
    (cond - marg, g)
}

/// Backprop a gradient with respect to softmax outputs into logits.
fn softmax_backward(p: &Array2<f64>, g: &Array2<f64>) -> Array2<f64> {
    let inner = (p * g).sum_axis(Axis(1)).insert_axis(Axis(1));
    p * &(g - &inner)
}

/// Member log-probabilities and the log of the mixture, without finiteness
/// checks so that divergence surfaces as a non-finite loss.
fn mixture_log_probs(features: &[ArrayView2<f64>], heads: &[Head], weights: &[f64]) -> (Vec<Array2<f64>>, Array2<f64>) {
    let lps: Vec<Array2<f64>> = features
        .iter()
        .zip(heads)
        .map(|(f, h)| log_softmax_rows(&(f.dot(&h.weights.t()) + &h.bias), 1.0))
        .collect();
    let (n, c) = lps[0].dim();
    let log_w: Vec<f64> = weights.iter().map(|w| w.ln()).collect();
    let log_q = Array2::from_shape_fn((n, c), |(i, k)| logsumexp(lps.iter().zip(&log_w).map(|(l, w)| w + l[[i, k]])));
    (lps, log_q)
}

/// Evaluate the weighted objective and its gradient at the given heads and
/// ensemble weights. `pseudo` and `pairs` are held fixed.
pub fn objective(
    features: &[ArrayView2<f64>],
    heads: &[Head],
    weights: &[f64],
    pseudo: &[usize],
    pairs: &[RecyclePair],
    terms: &TermWeights,
) -> Result<(LossTerms, Gradients)> {
    let m = heads.len();
    if m == 0 {
        return Err(Error::EmptyEnsemble);
    }
    let n = features[0].nrows();
    let c = heads[0].classes();
    let (lps, log_q) = mixture_log_probs(features, heads, weights);
    let ps: Vec<Array2<f64>> = lps.iter().map(|l| l.mapv(f64::exp)).collect();
    let q = log_q.mapv(f64::exp);

    let mut dp: Vec<Array2<f64>> = (0..m).map(|_| Array2::zeros((n, c))).collect();
    let mut dz: Vec<Array2<f64>> = (0..m).map(|_| Array2::zeros((n, c))).collect();
    let mut dtheta = vec![0.0; m];

    // Separate IM.
    let mut sim = 0.0;
    for j in 0..m {
        let (l, g) = im_and_grad(&lps[j], &ps[j]);
        sim += weights[j] * l;
        dp[j].scaled_add(terms.sim * weights[j], &g);
        dtheta[j] += terms.sim * l;
    }

    // Collaborative IM on the mixture.
    let (cim, gq) = im_and_grad(&log_q, &q);
    if terms.cim != 0.0 {
        for j in 0..m {
            dp[j].scaled_add(terms.cim * weights[j], &gq);
            dtheta[j] += terms.cim * (&ps[j] * &gq).sum();
        }
    }

    // Cross-entropy terms through the mixture. With responsibilities
    // r_ij = theta_j p_j(y|i) / q(y|i), d/dz_j = (r_ij / N) (p_j - e_y).
    let mut ce_term = |targets: &mut dyn Iterator<Item = (usize, usize)>, coef: f64| -> f64 {
        let targets: Vec<(usize, usize)> = targets.collect();
        if targets.is_empty() {
            return 0.0;
        }
        let count = targets.len() as f64;
        let mut loss = 0.0;
        for &(i, y) in &targets {
            loss -= log_q[[i, y]];
            if coef == 0.0 {
                continue;
            }
            for j in 0..m {
                let ratio = (lps[j][[i, y]] - log_q[[i, y]]).exp();
                let r = weights[j] * ratio;
                let scale = coef * r / count;
                for k in 0..c {
                    dz[j][[i, k]] += scale * ps[j][[i, k]];
                }
                dz[j][[i, y]] -= scale;
                dtheta[j] -= coef * ratio / count;
            }
        }
        loss / count
    };
    let pse = ce_term(&mut pseudo.iter().copied().enumerate(), terms.pse);
    let omr = ce_term(&mut pairs.iter().map(|p| (p.sample, p.label)), terms.omr);

    let all = terms.sim * sim + terms.pse * pse + terms.omr * omr + terms.cim * cim;
    let losses = LossTerms { sim, pse, omr, cim, all };

    let mut grads = Vec::with_capacity(m);
    for j in 0..m {
        let mut dzj = softmax_backward(&ps[j], &dp[j]);
        dzj += &dz[j];
        grads.push(Head {
            weights: dzj.t().dot(&features[j]),
            bias: dzj.sum_axis(Axis(0)),
        });
    }
    let inner: f64 = weights.iter().zip(&dtheta).map(|(w, d)| w * d).sum();
    let weight_logits = weights.iter().zip(&dtheta).map(|(w, d)| w * (d - inner)).collect();
    Ok((losses, Gradients { heads: grads, weight_logits }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub losses: LossTerms,
}

pub const HISTORY_HEADER: [&str; 5] = ["epoch", "L_sim", "L_pse", "L_omr", "L_all"];

pub fn write_history_csv<W: Write>(history: &[EpochRecord], w: W) -> Result<()> {
    let mut out = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
    out.write_record(HISTORY_HEADER)?;
    for r in history {
        out.write_record([
            r.epoch.to_string(),
            r.losses.sim.to_string(),
            r.losses.pse.to_string(),
            r.losses.omr.to_string(),
            r.losses.all.to_string(),
        ])?;
    }
    out.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

fn check_finite(l: &LossTerms, epoch: usize) -> Result<()> {
    for (term, v) in [("L_sim", l.sim), ("L_pse", l.pse), ("L_omr", l.omr), ("L_cim", l.cim), ("L_all", l.all)] {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss { term, epoch });
        }
    }
    Ok(())
}

/// Full-batch momentum descent on the members' heads.
///
/// Each epoch refreshes the pseudo-labels from the current ensemble output,
/// evaluates the objective (recorded in the history before the update) and
/// applies `v = momentum * v + grad; param -= lr * v`. Recycle pairs come from
/// the outlier models, which never change, so they are mined once.
pub fn adapt<'a>(
    e: &EnsembleModel<'a>,
    outliers: &[&ModelRecord],
    cfg: &AdaptConfig,
) -> Result<(EnsembleModel<'a>, Vec<EpochRecord>)> {
    cfg.validate()?;
    let pairs = mine_recycle_pairs(outliers, cfg.tau_recycle)?;
    adapt_with_pairs(e, &pairs, cfg)
}

pub fn adapt_with_pairs<'a>(
    e: &EnsembleModel<'a>,
    pairs: &[RecyclePair],
    cfg: &AdaptConfig,
) -> Result<(EnsembleModel<'a>, Vec<EpochRecord>)> {
    cfg.validate()?;
    let terms = cfg.term_weights();
    let features: Vec<ArrayView2<f64>> = e.members.iter().map(|m| m.record.features.view()).collect();
    let mut out = e.clone();
    let mut alpha: Vec<f64> = out.weights().iter().map(|w| w.ln()).collect();
    let mut vel_heads: Vec<Head> = out
        .members
        .iter()
        .map(|m| Head {
            weights: Array2::zeros(m.head.weights.dim()),
            bias: Array1::zeros(m.head.bias.len()),
        })
        .collect();
    let mut vel_alpha = vec![0.0; alpha.len()];
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let heads = out.heads();
        let weights = out.weights();
        let (_, log_q) = mixture_log_probs(&features, &heads, &weights);
        let pseudo: Vec<usize> = log_q.rows().into_iter().map(argmax).collect();
        let (losses, grads) = objective(&features, &heads, &weights, &pseudo, pairs, &terms)?;
        check_finite(&losses, epoch)?;
        history.push(EpochRecord { epoch, losses });

        for ((member, g), v) in out.members.iter_mut().zip(&grads.heads).zip(vel_heads.iter_mut()) {
            v.weights *= cfg.momentum;
            v.weights += &g.weights;
            v.bias *= cfg.momentum;
            v.bias += &g.bias;
            member.head.weights.scaled_add(-cfg.lr, &v.weights);
            member.head.bias.scaled_add(-cfg.lr, &v.bias);
        }
        if cfg.learnable_weights {
            for ((a, v), g) in alpha.iter_mut().zip(vel_alpha.iter_mut()).zip(&grads.weight_logits) {
                *v = cfg.momentum * *v + g;
                *a -= cfg.lr * *v;
            }
            for (m, w) in out.members.iter_mut().zip(softmax(&alpha)) {
                m.weight = w;
            }
        }
    }
    Ok((out, history))
}

/// `KL(p || q)` in nats; `inf` when `q` misses support of `p`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| if b > 0.0 { a * (a / b).ln() } else { f64::INFINITY })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::softmax_rows;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const LN4: f64 = 1.3862943611198906;

    fn pm(a: Array2<f64>) -> ProbMatrix {
        ProbMatrix::new(a).unwrap()
    }

    fn record(id: &str, features: Array2<f64>, weights: Array2<f64>, bias: Array1<f64>) -> ModelRecord {
        ModelRecord::new(id, "d", "a", features, Head { weights, bias }).unwrap()
    }

    fn random_record(rng: &mut ChaCha8Rng, id: &str, n: usize, d: usize, c: usize) -> ModelRecord {
        record(
            id,
            Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0)),
            Array2::from_shape_fn((c, d), |_| rng.random_range(-2.0..2.0)),
            Array1::from_shape_fn(c, |_| rng.random_range(-0.5..0.5)),
        )
    }

    #[test]
    fn weights_examples() {
        assert_eq!(ensemble_weights(&[0.7, 0.7, 0.7], 1.0).unwrap(), vec![1.0 / 3.0; 3]);
        let w = ensemble_weights(&[0.0, 3f64.ln()], 1.0).unwrap();
        assert!((w[0] - 0.25).abs() < 1e-15 && (w[1] - 0.75).abs() < 1e-15);

        let s = [-0.3, 0.4, 1.1];
        let w = ensemble_weights(&s, 0.5).unwrap();
        // Oracle: unshifted softmax straight from the definition.
        let e: Vec<f64> = s.iter().map(|v| (v / 0.5f64).exp()).collect();
        let z: f64 = e.iter().sum();
        for (a, b) in w.iter().zip(&e) {
            assert!((a - b / z).abs() < 1e-12);
        }
        let shifted = ensemble_weights(&[9.7, 10.4, 11.1], 0.5).unwrap();
        for (a, b) in w.iter().zip(&shifted) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(ensemble_weights(&[], 1.0).is_err());
        assert!(ensemble_weights(&[f64::NEG_INFINITY], 1.0).is_err());
    }

    #[test]
    fn forward_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_record(&mut rng, "a", 5, 3, 3);
        let b = random_record(&mut rng, "b", 5, 2, 3);
        let single = EnsembleModel::new(&[&a], &[1.0]).unwrap();
        assert_eq!(ensemble_forward(&single).unwrap(), crate::inference::forward(&a, 1.0).unwrap());

        let same = EnsembleModel::new(&[&a, &a], &[0.3, 0.7]).unwrap();
        let pa = crate::inference::forward(&a, 1.0).unwrap();
        for (x, y) in ensemble_forward(&same).unwrap().values().iter().zip(pa.values().iter()) {
            assert!((x - y).abs() < 1e-15);
        }

        let two = EnsembleModel::new(&[&a, &b], &[0.3, 0.7]).unwrap();
        let pb = crate::inference::forward(&b, 1.0).unwrap();
        let got = ensemble_forward(&two).unwrap();
        for i in 0..5 {
            for k in 0..3 {
                let want = 0.3 * pa.values()[[i, k]] + 0.7 * pb.values()[[i, k]];
                assert!((got.values()[[i, k]] - want).abs() < 1e-15);
            }
            assert!((got.row(i).sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn recycle_examples() {
        let low = pm(array![[0.9, 0.05, 0.05], [0.5, 0.25, 0.25]]);
        assert!(mine_recycle_pairs_from_probs(&[("o", &low)], 0.95).is_empty());

        let one = pm(array![[0.005, 0.005, 0.99], [0.4, 0.3, 0.3]]);
        let pairs = mine_recycle_pairs_from_probs(&[("o", &one)], 0.95);
        assert_eq!(pairs.len(), 1);
        assert_eq!((pairs[0].sample, pairs[0].label), (0, 2));
        assert!(mine_recycle_pairs_from_probs(&[], 0.95).is_empty());
    }

    #[test]
    fn recycle_matches_brute_force() {
        let o1 = pm(array![[0.97, 0.02, 0.01], [0.2, 0.78, 0.02], [0.01, 0.01, 0.98]]);
        let o2 = pm(array![[0.01, 0.98, 0.01], [0.01, 0.96, 0.03], [0.02, 0.0, 0.98]]);
        let tau = 0.95;
        let got = mine_recycle_pairs_from_probs(&[("o2", &o2), ("o1", &o1)], tau);

        let models = [("o1", &o1), ("o2", &o2)];
        let mut want = vec![];
        for i in 0..3 {
            let all_max = models
                .iter()
                .flat_map(|(_, p)| p.row(i).to_vec())
                .fold(f64::NEG_INFINITY, f64::max);
            // First model (by id) attaining the global max.
            for (id, p) in models {
                let row = p.row(i).to_vec();
                let conf = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if conf == all_max {
                    if conf > tau {
                        let y = row.iter().position(|&v| v == conf).unwrap();
                        want.push((i, y, id.to_string()));
                    }
                    break;
                }
            }
        }
        let got: Vec<(usize, usize, String)> = got.into_iter().map(|p| (p.sample, p.label, p.model_id)).collect();
        assert_eq!(got, want);
        assert_eq!(got, vec![(0, 1, "o2".into()), (1, 1, "o2".into()), (2, 2, "o1".into())]);
    }

    #[test]
    fn pse_examples() {
        let hot = pm(array![[1.0, 0.0], [0.0, 1.0]]);
        assert_eq!(loss_pse(&hot, &pseudo_labels(&hot)), 0.0);
        let uni = pm(Array2::from_elem((3, 4), 0.25));
        assert!((loss_pse(&uni, &pseudo_labels(&uni)) - LN4).abs() < 1e-12);
        let p = pm(array![[0.6, 0.3, 0.1], [0.2, 0.5, 0.3], [0.1, 0.1, 0.8]]);
        let want = -(0.6f64.ln() + 0.5f64.ln() + 0.8f64.ln()) / 3.0;
        assert!((loss_pse(&p, &pseudo_labels(&p)) - want).abs() < 1e-12);
    }

    #[test]
    fn omr_examples() {
        let p = pm(array![[0.6, 0.4], [0.0, 1.0], [0.3, 0.7]]);
        assert_eq!(loss_omr(&p, &[]), 0.0);
        let pair = |sample, label| RecyclePair { sample, label, model_id: "o".into(), confidence: 0.99 };
        assert_eq!(loss_omr(&p, &[pair(1, 1)]), 0.0);
        let want = -(0.4f64.ln() + 0.3f64.ln()) / 2.0;
        assert!((loss_omr(&p, &[pair(0, 1), pair(2, 0)]) - want).abs() < 1e-12);
    }

    #[test]
    fn im_examples() {
        assert!(loss_im(&pm(Array2::from_elem((4, 4), 0.25))).abs() < 1e-12);
        let balanced = pm(array![[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]]);
        assert!((loss_im(&balanced) + LN4).abs() < 1e-12);
        let collapsed = pm(array![[0.0, 1.0, 0.0], [0.0, 1.0, 0.0]]);
        assert_eq!(loss_im(&collapsed), 0.0);
    }

    #[test]
    fn lr_zero_leaves_parameters_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_record(&mut rng, "a", 10, 3, 3);
        let b = random_record(&mut rng, "b", 10, 4, 3);
        let e = EnsembleModel::new(&[&a, &b], &[0.4, 0.6]).unwrap();
        let cfg = AdaptConfig { lr: 0.0, epochs: 3, ..AdaptConfig::default() };
        let (out, hist) = adapt(&e, &[], &cfg).unwrap();
        assert_eq!(hist.len(), 3);
        assert_eq!(out.heads(), e.heads());
    }

    #[test]
    fn stationary_point_is_fixed() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = Array2::from_shape_fn((12, 3), |_| rng.random_range(-1.0..1.0));
        let a = record("a", f.clone(), Array2::zeros((3, 3)), Array1::zeros(3));
        let b = record("b", f, Array2::zeros((3, 3)), Array1::zeros(3));
        let e = EnsembleModel::new(&[&a, &b], &[0.5, 0.5]).unwrap();
        let cfg = AdaptConfig { gamma1: 0.0, gamma2: 0.0, epochs: 1, lr: 0.5, ..AdaptConfig::default() };
        let (out, _) = adapt(&e, &[], &cfg).unwrap();
        for (h0, h1) in e.heads().iter().zip(out.heads()) {
            for (x, y) in h0.weights.iter().zip(h1.weights.iter()) {
                assert!((x - y).abs() < 1e-8);
            }
            for (x, y) in h0.bias.iter().zip(h1.bias.iter()) {
                assert!((x - y).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn objective_losses_agree_with_public_loss_functions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_record(&mut rng, "a", 9, 3, 4);
        let b = random_record(&mut rng, "b", 9, 2, 4);
        let e = EnsembleModel::new(&[&a, &b], &[0.35, 0.65]).unwrap();
        let q = ensemble_forward(&e).unwrap();
        let pseudo = pseudo_labels(&q);
        let pairs = vec![RecyclePair { sample: 2, label: 1, model_id: "o".into(), confidence: 0.99 }];
        let feats = [a.features.view(), b.features.view()];
        let terms = TermWeights { sim: 1.0, pse: 0.3, omr: 0.3, cim: 0.0 };
        let (l, _) = objective(&feats, &e.heads(), &e.weights(), &pseudo, &pairs, &terms).unwrap();
        let probs = e.member_probs().unwrap();
        assert!((l.sim - loss_sim(&probs, &e.weights())).abs() < 1e-12);
        assert!((l.pse - loss_pse(&q, &pseudo)).abs() < 1e-12);
        assert!((l.omr - loss_omr(&q, &pairs)).abs() < 1e-12);
        assert!((l.cim - loss_cim(&q)).abs() < 1e-12);
        assert!((l.all - (l.sim + 0.3 * l.pse + 0.3 * l.omr)).abs() < 1e-12);
    }

    #[test]
    fn weight_logit_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random_record(&mut rng, "a", 8, 3, 3);
        let b = random_record(&mut rng, "b", 8, 2, 3);
        let feats = [a.features.view(), b.features.view()];
        let heads = vec![a.head.clone(), b.head.clone()];
        let alpha = [0.2, -0.4];
        let pairs = vec![RecyclePair { sample: 0, label: 2, model_id: "o".into(), confidence: 0.99 }];
        let terms = TermWeights { sim: 1.0, pse: 0.5, omr: 0.7, cim: 0.4 };
        let w = softmax(&alpha);
        let q = ensemble_forward(&EnsembleModel::new(&[&a, &b], &w).unwrap()).unwrap();
        let pseudo = pseudo_labels(&q);
        let (_, g) = objective(&feats, &heads, &w, &pseudo, &pairs, &terms).unwrap();
        for k in 0..2 {
            let h = 1e-5;
            let mut ap = alpha;
            ap[k] += h;
            let mut am = alpha;
            am[k] -= h;
            let lp = objective(&feats, &heads, &softmax(&ap), &pseudo, &pairs, &terms).unwrap().0.all;
            let lm = objective(&feats, &heads, &softmax(&am), &pseudo, &pairs, &terms).unwrap().0.all;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - g.weight_logits[k]).abs() < 1e-7, "{fd} vs {}", g.weight_logits[k]);
        }
    }

    #[test]
    fn learnable_weights_stay_on_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_record(&mut rng, "a", 20, 3, 3);
        let b = random_record(&mut rng, "b", 20, 3, 3);
        let e = EnsembleModel::new(&[&a, &b], &[0.5, 0.5]).unwrap();
        let cfg = AdaptConfig { learnable_weights: true, epochs: 10, lr: 0.1, ..AdaptConfig::default() };
        let (out, _) = adapt(&e, &[], &cfg).unwrap();
        let w = out.weights();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w.iter().all(|&x| x > 0.0));
        assert_ne!(w, e.weights());
    }

    #[test]
    fn collaborative_variant_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_record(&mut rng, "a", 20, 3, 3);
        let b = random_record(&mut rng, "b", 20, 3, 3);
        let e = EnsembleModel::new(&[&a, &b], &[0.5, 0.5]).unwrap();
        let cfg = AdaptConfig { im_variant: ImVariant::Collaborative, epochs: 5, ..AdaptConfig::default() };
        let (_, hist) = adapt(&e, &[], &cfg).unwrap();
        let l = hist[0].losses;
        assert!((l.all - (l.cim + 0.3 * l.pse)).abs() < 1e-12);
    }

    #[test]
    fn non_finite_loss_names_the_term() {
        let f = array![[1.0], [-1.0]];
        let a = record("a", f, array![[1.0], [-1.0]], array![0.0, 0.0]);
        let e = EnsembleModel::new(&[&a], &[1.0]).unwrap();
        let pairs = vec![RecyclePair { sample: 0, label: 1, model_id: "o".into(), confidence: 1.0 }];
        // A huge step sends the head to infinity after the first update.
        let cfg = AdaptConfig { epochs: 3, lr: 1e308, ..AdaptConfig::default() };
        let err = adapt_with_pairs(&e, &pairs, &cfg).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { epoch: 1.., .. }), "{err}");
        assert!(err.to_string().contains("L_"), "{err}");
    }

    #[test]
    fn history_csv_header() {
        let rec = EpochRecord { epoch: 0, losses: LossTerms { sim: -0.5, pse: 0.25, omr: 0.0, cim: 0.0, all: -0.425 } };
        let mut buf = Vec::new();
        write_history_csv(&[rec], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "epoch,L_sim,L_pse,L_omr,L_all\n0,-0.5,0.25,0,-0.425\n");
    }

    #[test]
    fn kl_attains_zero_on_matching_component() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(kl_divergence(&p, &p), 0.0);
        assert!(kl_divergence(&[0.5, 0.5, 0.0], &p) > 0.0);
        assert_eq!(kl_divergence(&[0.5, 0.5], &[1.0, 0.0]), f64::INFINITY);
    }

    #[test]
    fn softmax_rows_helper_consistent() {
        let z = array![[0.0, 3f64.ln()]];
        let p = softmax_rows(&z, 1.0);
        assert!((p[[0, 1]] - 0.75).abs() < 1e-15);
    }
}
