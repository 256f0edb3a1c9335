//! Source-model selection: a greedy transferable set, a diversity set drawn
//! from the remainder, and the resulting inlier/outlier split.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diversity::{div_scores_cached, CenteredGram, KernelConfig};
use crate::ensemble_adapt::ensemble_weights;
use crate::error::{Error, Result};
use crate::sute::{ensemble_sute_from_outputs, rank_order, score_zoo, MemberOutputs, ScoredModel, SuteConfig, SuteValue};
use crate::tensorio::ModelRecord;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    pub sute: SuteConfig,
    /// Size of the diversity set.
    pub q: usize,
    pub kernel: KernelConfig,
    /// Pick the highest-Div candidates instead of the lowest.
    pub flip_diversity: bool,
    /// Temperature of the SUTE softmax used for ensemble weights.
    pub weight_temperature: f64,
}

impl SelectionConfig {
    pub fn new(sute: SuteConfig) -> Self {
        SelectionConfig {
            sute,
            q: 2,
            kernel: KernelConfig::default(),
            flip_diversity: false,
            weight_temperature: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditStep {
    pub model_id: String,
    pub individual_sute: f64,
    /// SUTE of the current transferable set before considering this model.
    pub ensemble_before: f64,
    /// SUTE of the set with this model added.
    pub ensemble_after: SuteValue,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GreedyAudit {
    pub initial: String,
    pub initial_sute: f64,
    pub steps: Vec<AuditStep>,
    /// Models whose own SUTE was rejected; never considered.
    pub skipped: Vec<String>,
    /// Individual scores plus one ensemble score per step: `2r - 1`.
    pub sute_evaluations: usize,
    pub final_sute: f64,
}

impl GreedyAudit {
    /// Rebuild the transferable set from the recorded decisions.
    pub fn replay(&self) -> Vec<String> {
        let mut set = vec![self.initial.clone()];
        set.extend(self.steps.iter().filter(|s| s.accepted).map(|s| s.model_id.clone()));
        set
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityScore {
    pub model_id: String,
    pub div: f64,
    pub selected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScore {
    pub model_id: String,
    pub sute: SuteValue,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionAudit {
    pub greedy: GreedyAudit,
    pub diversity: Vec<DiversityScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub config: SelectionConfig,
    pub transferable_set: Vec<String>,
    pub diversity_set: Vec<String>,
    /// Transferable set followed by diversity set.
    pub inliers: Vec<String>,
    /// Everything else, in zoo order.
    pub outliers: Vec<String>,
    /// Individual SUTE of every zoo member, in zoo order.
    pub scores: Vec<ModelScore>,
    pub audit: SelectionAudit,
}

impl SelectionResult {
    pub fn sute_of(&self, id: &str) -> Option<SuteValue> {
        self.scores.iter().find(|s| s.model_id == id).map(|s| s.sute)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("selection serializes");
        s.push('\n');
        s
    }

    pub fn read(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json { path: path.to_path_buf(), source })
    }

    fn lookup<'a>(ids: &[String], models: &'a [ModelRecord]) -> Result<Vec<&'a ModelRecord>> {
        ids.iter()
            .map(|id| {
                models
                    .iter()
                    .find(|m| &m.id == id)
                    .ok_or_else(|| Error::InvalidInput(format!("selection names model `{id}` absent from the zoo")))
            })
            .collect()
    }

    pub fn inlier_records<'a>(&self, models: &'a [ModelRecord]) -> Result<Vec<&'a ModelRecord>> {
        Self::lookup(&self.inliers, models)
    }

    pub fn outlier_records<'a>(&self, models: &'a [ModelRecord]) -> Result<Vec<&'a ModelRecord>> {
        Self::lookup(&self.outliers, models)
    }

    /// Individual SUTEs of the inliers, in inlier order.
    pub fn inlier_sutes(&self) -> Result<Vec<f64>> {
        self.inliers
            .iter()
            .map(|id| {
                self.sute_of(id)
                    .and_then(SuteValue::finite)
                    .ok_or_else(|| Error::InvalidInput(format!("inlier `{id}` has no finite SUTE")))
            })
            .collect()
    }
}

/// Greedy pass over indices into `ids`/`outputs`/`sutes`. Returns the
/// accepted indices in acceptance order.
pub fn greedy_indices(
    ids: &[&str],
    outputs: &[&MemberOutputs],
    sutes: &[SuteValue],
    cfg: &SelectionConfig,
) -> Result<(Vec<usize>, GreedyAudit)> {
    let order = rank_order(ids, sutes);
    let (finite, skipped): (Vec<usize>, Vec<usize>) = order.into_iter().partition(|&i| sutes[i].is_finite());
    let Some((&top, rest)) = finite.split_first() else {
        return Err(Error::NoTransferableModel);
    };
    let top_sute = sutes[top].finite().unwrap();
    let mut set = vec![top];
    let mut current = top_sute;
    let mut steps = Vec::with_capacity(rest.len());
    for &h in rest {
        let mut candidate = set.clone();
        candidate.push(h);
        let member_sutes: Vec<f64> = candidate.iter().map(|&i| sutes[i].finite().unwrap()).collect();
        let weights = ensemble_weights(&member_sutes, cfg.weight_temperature)?;
        let members: Vec<&MemberOutputs> = candidate.iter().map(|&i| outputs[i]).collect();
        let after = ensemble_sute_from_outputs(&members, &weights, &cfg.sute)?.sute;
        let accepted = matches!(after, SuteValue::Finite(v) if v > current);
        steps.push(AuditStep {
            model_id: ids[h].to_string(),
            individual_sute: sutes[h].finite().unwrap(),
            ensemble_before: current,
            ensemble_after: after,
            accepted,
        });
        if accepted {
            set = candidate;
            current = after.finite().unwrap();
        }
    }
    let audit = GreedyAudit {
        initial: ids[top].to_string(),
        initial_sute: top_sute,
        sute_evaluations: finite.len() + steps.len(),
        steps,
        skipped: skipped.iter().map(|&i| ids[i].to_string()).collect(),
        final_sute: current,
    };
    Ok((set, audit))
}

pub fn greedy_transferable_set(models: &[ModelRecord], cfg: &SelectionConfig) -> Result<(Vec<String>, GreedyAudit)> {
    let scored = score_zoo(models, &cfg.sute)?;
    let ids: Vec<&str> = models.iter().map(|m| m.id.as_str()).collect();
    let outputs: Vec<&MemberOutputs> = scored.iter().map(|s| &s.outputs).collect();
    let sutes: Vec<SuteValue> = scored.iter().map(|s| s.components.sute).collect();
    let (set, audit) = greedy_indices(&ids, &outputs, &sutes, cfg)?;
    Ok((set.into_iter().map(|i| ids[i].to_string()).collect(), audit))
}

/// Order candidates by Div (ascending unless `flip`), ties by id, and keep `q`.
pub fn pick_diverse(ids: &[&str], divs: &[f64], q: usize, flip: bool) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..ids.len()).collect();
    idx.sort_by(|&a, &b| {
        let o = divs[a].partial_cmp(&divs[b]).unwrap_or(Ordering::Equal);
        let o = if flip { o.reverse() } else { o };
        o.then_with(|| ids[a].cmp(ids[b]))
    });
    idx.truncate(q);
    idx
}

pub fn diversity_set(
    candidates: &[(&str, &CenteredGram)],
    anchors: &[&CenteredGram],
    q: usize,
    flip: bool,
) -> Result<(Vec<String>, Vec<DiversityScore>)> {
    if candidates.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let grams: Vec<&CenteredGram> = candidates.iter().map(|c| c.1).collect();
    let divs = div_scores_cached(&grams, anchors)?;
    let ids: Vec<&str> = candidates.iter().map(|c| c.0).collect();
    let picked = pick_diverse(&ids, &divs, q, flip);
    let chosen: Vec<String> = picked.iter().map(|&i| ids[i].to_string()).collect();
    let scores = ids
        .iter()
        .zip(&divs)
        .enumerate()
        .map(|(i, (id, &div))| DiversityScore {
            model_id: id.to_string(),
            div,
            selected: picked.contains(&i),
        })
        .collect();
    Ok((chosen, scores))
}

/// Full selection on already-scored models (zoo order).
pub fn select_scored(models: &[ModelRecord], scored: &[ScoredModel], cfg: &SelectionConfig) -> Result<SelectionResult> {
    cfg.kernel.validate()?;
    let ids: Vec<&str> = models.iter().map(|m| m.id.as_str()).collect();
    let outputs: Vec<&MemberOutputs> = scored.iter().map(|s| &s.outputs).collect();
    let sutes: Vec<SuteValue> = scored.iter().map(|s| s.components.sute).collect();
    let (tr, greedy) = greedy_indices(&ids, &outputs, &sutes, cfg)?;

    let candidates: Vec<usize> = (0..models.len())
        .filter(|i| !tr.contains(i) && sutes[*i].is_finite())
        .collect();
    let needs_gram: Vec<usize> = if cfg.q == 0 {
        Vec::new()
    } else {
        tr.iter().chain(&candidates).copied().collect()
    };
    let grams: Vec<(usize, CenteredGram)> = needs_gram
        .par_iter()
        .map(|&i| Ok((i, CenteredGram::new(&outputs[i].probs, &cfg.kernel)?)))
        .collect::<Result<_>>()?;
    let gram_of = |i: usize| grams.iter().find(|(j, _)| *j == i).map(|(_, g)| g);

    let (div_ids, div_scores) = if cfg.q == 0 {
        (Vec::new(), Vec::new())
    } else {
        let anchors: Vec<&CenteredGram> = tr.iter().map(|&i| gram_of(i).unwrap()).collect();
        let cands: Vec<(&str, &CenteredGram)> = candidates.iter().map(|&i| (ids[i], gram_of(i).unwrap())).collect();
        diversity_set(&cands, &anchors, cfg.q, cfg.flip_diversity)?
    };

    let transferable_set: Vec<String> = tr.iter().map(|&i| ids[i].to_string()).collect();
    let inliers: Vec<String> = transferable_set.iter().chain(&div_ids).cloned().collect();
    let outliers: Vec<String> = ids
        .iter()
        .filter(|id| !inliers.iter().any(|x| x == *id))
        .map(|s| s.to_string())
        .collect();
    let scores = ids
        .iter()
        .zip(&sutes)
        .map(|(id, &sute)| ModelScore { model_id: id.to_string(), sute })
        .collect();
    Ok(SelectionResult {
        config: *cfg,
        transferable_set,
        diversity_set: div_ids,
        inliers,
        outliers,
        scores,
        audit: SelectionAudit { greedy, diversity: div_scores },
    })
}

pub fn select(models: &[ModelRecord], cfg: &SelectionConfig) -> Result<SelectionResult> {
    if models.is_empty() {
        return Err(Error::InvalidInput("selection needs at least one model".into()));
    }
    let scored = score_zoo(models, &cfg.sute)?;
    select_scored(models, &scored, cfg)
}
