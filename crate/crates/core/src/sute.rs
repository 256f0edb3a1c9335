//! Source-free transferability scoring.
//!
//! Three label-free indicators are computed from a model's target-set
//! outputs:
//!
//! * individual certainty `IC = -E_x H(h(x))`
//! * semantics consistency `SC = -H(structural | predictive)`
//! * global dispersity `GD = H(E_x h(x))`
//!
//! and combined as `lambda1 * IC + lambda2 * SC + phi(GD)`, where `phi` caps
//! GD at `tau_h` and rejects the model outright when GD falls below `tau_l`.

use std::cmp::Ordering;
use std::fmt;
use std::io::Write;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::inference::{
    self, conditional_entropy, entropy, mean_entropy, predictive_semantics, structural_semantics, ProbMatrix,
};
use crate::tensorio::ModelRecord;

/// Number of assignment rounds used for structural semantics.
pub const STRUCTURAL_ROUNDS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuteConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau_h: f64,
    pub tau_l: f64,
}

impl SuteConfig {
    /// `lambda1 = lambda2 = 1`, clips at 10% and 90% of `ln C`.
    pub fn for_classes(classes: usize) -> Self {
        let ln_c = (classes as f64).ln();
        SuteConfig {
            lambda1: 1.0,
            lambda2: 1.0,
            tau_h: 0.9 * ln_c,
            tau_l: 0.1 * ln_c,
        }
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        let ln_c = (classes as f64).ln();
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::InvalidInput("lambda1 and lambda2 must be >= 0".into()));
        }
        if !(self.tau_l < self.tau_h && self.tau_h <= ln_c + 1e-12) {
            return Err(Error::InvalidInput(format!(
                "need tau_l < tau_h <= ln C = {ln_c}, got tau_l={} tau_h={}",
                self.tau_l, self.tau_h
            )));
        }
        Ok(())
    }
}

/// A SUTE (or clipped-GD) value; `Rejected` stands for the `-inf` branch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SuteValue {
    Finite(f64),
    Rejected,
}

impl SuteValue {
    pub fn finite(self) -> Option<f64> {
        match self {
            SuteValue::Finite(v) => Some(v),
            SuteValue::Rejected => None,
        }
    }

    pub fn is_finite(self) -> bool {
        matches!(self, SuteValue::Finite(_))
    }

    /// `-inf` for `Rejected`; only for ranking statistics.
    pub fn as_f64(self) -> f64 {
        self.finite().unwrap_or(f64::NEG_INFINITY)
    }
}

impl PartialOrd for SuteValue {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match (self, other) {
            (SuteValue::Finite(a), SuteValue::Finite(b)) => a.partial_cmp(b),
            (SuteValue::Finite(_), SuteValue::Rejected) => Some(Ordering::Greater),
            (SuteValue::Rejected, SuteValue::Finite(_)) => Some(Ordering::Less),
            (SuteValue::Rejected, SuteValue::Rejected) => Some(Ordering::Equal),
        }
    }
}

impl fmt::Display for SuteValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SuteValue::Finite(v) => write!(f, "{v}"),
            SuteValue::Rejected => f.write_str("-inf"),
        }
    }
}

impl Serialize for SuteValue {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            SuteValue::Finite(v) => s.serialize_f64(*v),
            SuteValue::Rejected => s.serialize_str("-inf"),
        }
    }
}

impl<'de> Deserialize<'de> for SuteValue {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(SuteValue::Finite(v)),
            Raw::Str(s) if s == "-inf" => Ok(SuteValue::Rejected),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("expected number or \"-inf\", got {s:?}"))),
        }
    }
}

pub fn indicator_ic(p: &ProbMatrix) -> f64 {
    -mean_entropy(p)
}

pub fn indicator_sc(structural: &[usize], predictive: &[usize], classes: usize) -> Result<f64> {
    Ok(-conditional_entropy(structural, predictive, classes)?)
}

pub fn indicator_gd(p: &ProbMatrix) -> f64 {
    entropy(p.mean_row().view())
}

pub fn phi(gd: f64, cfg: &SuteConfig) -> SuteValue {
    if gd > cfg.tau_h {
        SuteValue::Finite(cfg.tau_h)
    } else if gd >= cfg.tau_l {
        SuteValue::Finite(gd)
    } else {
        SuteValue::Rejected
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuteComponents {
    pub ic: f64,
    pub sc: f64,
    pub gd: f64,
    pub phi_gd: SuteValue,
    pub sute: SuteValue,
}

/// Combine indicator values; a rejected `phi` dominates.
pub fn compose(ic: f64, sc: f64, gd: f64, cfg: &SuteConfig) -> SuteComponents {
    let phi_gd = phi(gd, cfg);
    let sute = match phi_gd {
        SuteValue::Finite(v) => SuteValue::Finite(cfg.lambda1 * ic + cfg.lambda2 * sc + v),
        SuteValue::Rejected => SuteValue::Rejected,
    };
    SuteComponents { ic, sc, gd, phi_gd, sute }
}

/// Cached per-model target outputs: probabilities plus both label views.
#[derive(Debug, Clone)]
pub struct MemberOutputs {
    pub probs: ProbMatrix,
    pub predictive: Vec<usize>,
    pub structural: Vec<usize>,
}

impl MemberOutputs {
    pub fn compute(m: &ModelRecord) -> Result<Self> {
        let probs = inference::forward(m, 1.0)?;
        let predictive = predictive_semantics(&probs);
        let structural = structural_semantics(m.features.view(), &probs, STRUCTURAL_ROUNDS)?;
        Ok(MemberOutputs { probs, predictive, structural })
    }

    pub fn classes(&self) -> usize {
        self.probs.classes()
    }
}

pub fn score_outputs(out: &MemberOutputs, cfg: &SuteConfig) -> Result<SuteComponents> {
    let ic = indicator_ic(&out.probs);
    let sc = indicator_sc(&out.structural, &out.predictive, out.classes())?;
    let gd = indicator_gd(&out.probs);
    Ok(compose(ic, sc, gd, cfg))
}

pub fn sute_score(m: &ModelRecord, cfg: &SuteConfig) -> Result<SuteComponents> {
    score_outputs(&MemberOutputs::compute(m)?, cfg)
}

fn check_weights(weights: &[f64], members: usize) -> Result<()> {
    if members == 0 {
        return Err(Error::EmptyEnsemble);
    }
    if weights.len() != members {
        return Err(Error::Shape(format!("{members} members but {} weights", weights.len())));
    }
    if weights.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
        return Err(Error::InvalidInput("ensemble weights must be finite and >= 0".into()));
    }
    let s: f64 = weights.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!("ensemble weights sum to {s}")));
    }
    Ok(())
}

/// Weighted mixture `sum_j w_j P_j`.
pub fn mixture(members: &[&ProbMatrix], weights: &[f64]) -> Result<ProbMatrix> {
    check_weights(weights, members.len())?;
    let (n, c) = members[0].values().dim();
    let mut acc = Array2::<f64>::zeros((n, c));
    for (p, &w) in members.iter().zip(weights) {
        if p.values().dim() != (n, c) {
            return Err(Error::Shape("ensemble members disagree on n x C".into()));
        }
        acc.scaled_add(w, p.values());
    }
    Ok(ProbMatrix::from_unchecked(acc))
}

/// Per-sample weighted majority vote over member labels; lowest class wins ties.
pub fn weighted_vote(labels: &[&[usize]], weights: &[f64], classes: usize) -> Vec<usize> {
    let n = labels[0].len();
    let mut votes = vec![0.0f64; classes];
    (0..n)
        .map(|i| {
            votes.iter_mut().for_each(|v| *v = 0.0);
            for (l, &w) in labels.iter().zip(weights) {
                votes[l[i]] += w;
            }
            let mut best = 0;
            for c in 1..classes {
                if votes[c] > votes[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Score an ensemble as if it were a single model. IC and GD come from the
/// mixture probabilities; SC pairs the mixture's predictive labels with a
/// weighted vote of the members' structural labels.
pub fn ensemble_sute_from_outputs(
    members: &[&MemberOutputs],
    weights: &[f64],
    cfg: &SuteConfig,
) -> Result<SuteComponents> {
    let probs: Vec<&ProbMatrix> = members.iter().map(|m| &m.probs).collect();
    let mix = mixture(&probs, weights)?;
    let classes = mix.classes();
    let predictive = predictive_semantics(&mix);
    let structural_sets: Vec<&[usize]> = members.iter().map(|m| m.structural.as_slice()).collect();
    let structural = weighted_vote(&structural_sets, weights, classes);
    let ic = indicator_ic(&mix);
    let sc = indicator_sc(&structural, &predictive, classes)?;
    let gd = indicator_gd(&mix);
    Ok(compose(ic, sc, gd, cfg))
}

pub fn sute_of_ensemble(members: &[&ModelRecord], weights: &[f64], cfg: &SuteConfig) -> Result<SuteComponents> {
    check_weights(weights, members.len())?;
    let outputs = members
        .iter()
        .map(|m| MemberOutputs::compute(m))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&MemberOutputs> = outputs.iter().collect();
    ensemble_sute_from_outputs(&refs, weights, cfg)
}

/// Average negative entropy baseline.
pub fn baseline_ane(p: &ProbMatrix) -> f64 {
    indicator_ic(p)
}

/// Empirical mutual information between input and prediction, `GD + IC`.
pub fn baseline_nmi(p: &ProbMatrix) -> f64 {
    indicator_gd(p) + indicator_ic(p)
}

#[derive(Debug, Clone)]
pub struct ScoredModel {
    pub outputs: MemberOutputs,
    pub components: SuteComponents,
    pub ane: f64,
    pub nmi: f64,
}

/// Compute outputs and scores for every model, in zoo order.
pub fn score_zoo(models: &[ModelRecord], cfg: &SuteConfig) -> Result<Vec<ScoredModel>> {
    models
        .par_iter()
        .map(|m| {
            let outputs = MemberOutputs::compute(m)?;
            let components = score_outputs(&outputs, cfg)?;
            let ane = baseline_ane(&outputs.probs);
            let nmi = baseline_nmi(&outputs.probs);
            Ok(ScoredModel { outputs, components, ane, nmi })
        })
        .collect()
}

/// Indices sorted by SUTE descending; ties and rejected models fall back to
/// lexicographic model id.
pub fn rank_order(ids: &[&str], sutes: &[SuteValue]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..ids.len()).collect();
    idx.sort_by(|&a, &b| {
        sutes[b]
            .partial_cmp(&sutes[a])
            .unwrap_or(Ordering::Equal)
            .then_with(|| ids[a].cmp(ids[b]))
    });
    idx
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub model_id: String,
    pub domain: String,
    pub arch: String,
    pub ic: f64,
    pub sc: f64,
    pub gd: f64,
    pub phi_gd: SuteValue,
    pub sute: SuteValue,
    pub ane: f64,
    pub nmi: f64,
    /// 1 = most transferable.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferabilityReport {
    /// Zoo order.
    pub rows: Vec<ReportRow>,
}

pub const REPORT_HEADER: [&str; 11] = [
    "model_id", "domain", "arch", "ic", "sc", "gd", "phi_gd", "sute", "ane", "nmi", "rank",
];

impl TransferabilityReport {
    pub fn new(models: &[ModelRecord], scored: &[ScoredModel]) -> Self {
        let ids: Vec<&str> = models.iter().map(|m| m.id.as_str()).collect();
        let sutes: Vec<SuteValue> = scored.iter().map(|s| s.components.sute).collect();
        let mut ranks = vec![0; models.len()];
        for (r, i) in rank_order(&ids, &sutes).into_iter().enumerate() {
            ranks[i] = r + 1;
        }
        let rows = models
            .iter()
            .zip(scored)
            .zip(ranks)
            .map(|((m, s), rank)| ReportRow {
                model_id: m.id.clone(),
                domain: m.domain.clone(),
                arch: m.arch.clone(),
                ic: s.components.ic,
                sc: s.components.sc,
                gd: s.components.gd,
                phi_gd: s.components.phi_gd,
                sute: s.components.sute,
                ane: s.ane,
                nmi: s.nmi,
                rank,
            })
            .collect();
        TransferabilityReport { rows }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
        out.write_record(REPORT_HEADER)?;
        for r in &self.rows {
            out.write_record([
                r.model_id.clone(),
                r.domain.clone(),
                r.arch.clone(),
                r.ic.to_string(),
                r.sc.to_string(),
                r.gd.to_string(),
                r.phi_gd.to_string(),
                r.sute.to_string(),
                r.ane.to_string(),
                r.nmi.to_string(),
                r.rank.to_string(),
            ])?;
        }
        out.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}
