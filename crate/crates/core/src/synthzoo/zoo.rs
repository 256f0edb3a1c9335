//! Source-model training and zoo assembly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::arch::{ArchSpec, FeatureMap};
use super::eval::write_labels;
use super::scenario::Scenario;
use crate::error::{Error, Result};
use crate::inference::{argmax, log_softmax_rows};
use crate::tensorio::{write_model, Head, ModelRecord, TargetEntry, ZooManifest};

/// One training configuration of the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub name: String,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub l2: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0 && (0.0..1.0).contains(&self.momentum) && self.epochs > 0 && self.l2 >= 0.0;
        if ok && !self.name.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid train config {self:?}")))
        }
    }
}

pub fn reference_grid() -> Vec<TrainConfig> {
    vec![
        TrainConfig { name: "a".into(), lr: 0.5, momentum: 0.9, epochs: 200, l2: 1e-3 },
        TrainConfig { name: "b".into(), lr: 0.05, momentum: 0.9, epochs: 60, l2: 1e-2 },
    ]
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub head: Head,
    pub loss: f64,
    pub train_accuracy: f64,
}

/// Multinomial logistic regression by full-batch momentum descent from a
/// zero start. Returns `None` if the loss ever becomes non-finite.
pub fn fit_logreg(x: &Array2<f64>, y: &[usize], classes: usize, cfg: &TrainConfig) -> Option<FitResult> {
    let (n, d) = x.dim();
    let mut w = Array2::<f64>::zeros((classes, d));
    let mut b = Array1::<f64>::zeros(classes);
    let mut vw = w.clone();
    let mut vb = b.clone();
    let mut onehot = Array2::<f64>::zeros((n, classes));
    for (i, &c) in y.iter().enumerate() {
        onehot[[i, c]] = 1.0;
    }
    let mut loss = f64::NAN;
    for _ in 0..=cfg.epochs {
        let lp = log_softmax_rows(&(x.dot(&w.t()) + &b), 1.0);
        loss = -(&lp * &onehot).sum() / n as f64 + 0.5 * cfg.l2 * w.iter().map(|v| v * v).sum::<f64>();
        if !loss.is_finite() {
            return None;
        }
        let dz = (lp.mapv(f64::exp) - &onehot) / n as f64;
        let gw = dz.t().dot(x) + &(&w * cfg.l2);
        let gb = dz.sum_axis(Axis(0));
        vw = vw * cfg.momentum + gw;
        vb = vb * cfg.momentum + gb;
        w.scaled_add(-cfg.lr, &vw);
        b.scaled_add(-cfg.lr, &vb);
    }
    let z = x.dot(&w.t()) + &b;
    let correct = z.rows().into_iter().zip(y).filter(|(r, &c)| argmax(r.view()) == c).count();
    if w.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return None;
    }
    Some(FitResult { head: Head { weights: w, bias: b }, loss, train_accuracy: correct as f64 / n as f64 })
}

#[derive(Debug, Clone)]
pub struct Zoo {
    pub models: Vec<ModelRecord>,
    /// Ids of fits dropped for a non-finite loss.
    pub excluded: Vec<String>,
}

fn to_f32_precision(a: &Array2<f64>) -> Array2<f64> {
    a.mapv(|v| v as f32 as f64)
}

/// Train one head per (domain, arch, config) and express it on the target.
/// Values are rounded to f32 so the in-memory zoo equals its on-disk form.
pub fn build_models(scenario: &Scenario, archs: &[ArchSpec], grid: &[TrainConfig]) -> Result<Zoo> {
    for a in archs {
        a.validate()?;
    }
    for g in grid {
        g.validate()?;
    }
    let classes = scenario.spec.classes;
    let mut jobs = Vec::new();
    for (k, (domain, _)) in scenario.sources.iter().enumerate() {
        for (ai, arch) in archs.iter().enumerate() {
            for gi in 0..grid.len() {
                jobs.push((k, ai, gi, format!("{domain}-{}-{}", arch.name, grid[gi].name)));
            }
        }
    }
    let mut ids: Vec<&str> = jobs.iter().map(|j| j.3.as_str()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::DuplicateModelId(w[0].to_string()));
    }

    let fitted: Vec<Result<Option<ModelRecord>>> = jobs
        .par_iter()
        .map(|(k, ai, gi, id)| {
            let (domain, data) = &scenario.sources[*k];
            let arch = &archs[*ai];
            let cfg = &grid[*gi];
            let fm = FeatureMap::fit(arch, &data.x)?;
            let Some(fit) = fit_logreg(&fm.apply(&data.x), &data.y, classes, cfg) else {
                return Ok(None);
            };
            let head = Head {
                weights: to_f32_precision(&fit.head.weights),
                bias: fit.head.bias.mapv(|v| v as f32 as f64),
            };
            let features = to_f32_precision(&fm.apply(&scenario.target.x));
            let mut rec = ModelRecord::new(id.clone(), domain.clone(), arch.tag(), features, head)?;
            rec.meta = BTreeMap::from([
                ("optimizer".to_string(), "sgd-momentum".to_string()),
                ("config".to_string(), cfg.name.clone()),
                ("lr".to_string(), cfg.lr.to_string()),
                ("momentum".to_string(), cfg.momentum.to_string()),
                ("epochs".to_string(), cfg.epochs.to_string()),
                ("l2".to_string(), cfg.l2.to_string()),
                ("batch".to_string(), "full".to_string()),
                ("seed".to_string(), arch.seed.to_string()),
                ("train_accuracy".to_string(), fit.train_accuracy.to_string()),
            ]);
            Ok(Some(rec))
        })
        .collect();

    let mut models = Vec::new();
    let mut excluded = Vec::new();
    for (job, r) in jobs.iter().zip(fitted) {
        match r? {
            Some(m) => models.push(m),
            None => {
                eprintln!("warning: excluding {}: training loss became non-finite", job.3);
                excluded.push(job.3.clone());
            }
        }
    }
    Ok(Zoo { models, excluded })
}

pub const LABELS_FILE: &str = "target_labels.txt";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Write `manifest.json`, `models/*.ztf` and the evaluation label file into
/// `out_dir`. Returns the manifest.
pub fn write_zoo(models: &[ModelRecord], labels: &[usize], classes: usize, out_dir: &Path) -> Result<ZooManifest> {
    let first = models.first().ok_or(Error::EmptyEnsemble)?;
    let model_dir = out_dir.join("models");
    fs::create_dir_all(&model_dir).map_err(|e| Error::io(&model_dir, e))?;
    let mut entries = Vec::with_capacity(models.len());
    for m in models {
        let mut e = write_model(m, &model_dir)?;
        for p in [&mut e.features, &mut e.weights, &mut e.bias] {
            *p = format!("models/{p}");
        }
        entries.push(e);
    }
    write_labels(labels, out_dir.join(LABELS_FILE))?;
    let manifest = ZooManifest {
        version: 1,
        target: TargetEntry { n: first.n(), classes, labels: Some(LABELS_FILE.into()) },
        models: entries,
    };
    manifest.write(out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

pub fn build_zoo(scenario: &Scenario, archs: &[ArchSpec], grid: &[TrainConfig], out_dir: &Path) -> Result<(ZooManifest, Zoo)> {
    let zoo = build_models(scenario, archs, grid)?;
    let manifest = write_zoo(&zoo.models, scenario.target_labels(), scenario.spec.classes, out_dir)?;
    Ok((manifest, zoo))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthzoo::arch::ArchKind;
    use crate::synthzoo::scenario::{generate_scenario, ScenarioSpec};
    use crate::tensorio::load_zoo;

    fn tiny() -> ScenarioSpec {
        let mut s = ScenarioSpec::reference(3);
        s.sources.truncate(1);
        s.target.samples = 60;
        s
    }

    #[test]
    fn one_by_one_by_one() {
        let sc = generate_scenario(&tiny()).unwrap();
        let zoo = build_models(&sc, &[ArchSpec::new("id", ArchKind::Identity, 0)], &reference_grid()[..1]).unwrap();
        assert_eq!(zoo.models.len(), 1);
        assert!(zoo.excluded.is_empty());
    }

    #[test]
    fn separable_source_is_fit() {
        let mut x = Array2::zeros((40, 2));
        let mut y = vec![];
        for i in 0..40 {
            let c = i % 2;
            let s = if c == 0 { -1.0 } else { 1.0 };
            x[[i, 0]] = s * (1.0 + (i as f64) * 0.05);
            x[[i, 1]] = (i as f64 * 0.37).sin();
            y.push(c);
        }
        let cfg = TrainConfig { name: "t".into(), lr: 0.5, momentum: 0.9, epochs: 300, l2: 0.0 };
        let fit = fit_logreg(&x, &y, 2, &cfg).unwrap();
        assert!(fit.train_accuracy >= 0.99);
    }

    #[test]
    fn divergent_fit_is_excluded() {
        let sc = generate_scenario(&tiny()).unwrap();
        let wild = TrainConfig { name: "wild".into(), lr: 1e200, momentum: 0.9, epochs: 5, l2: 0.0 };
        let zoo = build_models(&sc, &[ArchSpec::new("id", ArchKind::Identity, 0)], &[reference_grid()[0].clone(), wild]).unwrap();
        assert_eq!(zoo.models.len(), 1);
        assert_eq!(zoo.excluded, vec!["near-id-wild".to_string()]);
    }

    #[test]
    fn written_zoo_matches_memory_and_is_deterministic() {
        let sc = generate_scenario(&tiny()).unwrap();
        let archs = &super::super::arch::reference_archs()[..2];
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let (_, zoo) = build_zoo(&sc, archs, &reference_grid(), a.path()).unwrap();
        build_zoo(&sc, archs, &reference_grid(), b.path()).unwrap();
        let ma = fs::read(a.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(ma, fs::read(b.path().join(MANIFEST_FILE)).unwrap());
        for m in &zoo.models {
            let f = format!("models/{}.features.ztf", m.id);
            assert_eq!(fs::read(a.path().join(&f)).unwrap(), fs::read(b.path().join(&f)).unwrap());
        }
        let (loaded, target) = load_zoo(a.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(target.n, 60);
        for (l, m) in loaded.iter().zip(&zoo.models) {
            assert_eq!(l.features, m.features);
            assert_eq!(l.head, m.head);
            assert_eq!(l.meta, m.meta);
        }
    }
}
