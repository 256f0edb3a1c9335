//! Frozen feature maps standing in for network backbones.

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ArchKind {
    Identity,
    RandomProjection { dim: usize },
    RandomFourier { dim: usize, bandwidth: f64 },
    Poly2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: ArchKind,
    pub seed: u64,
}

impl ArchSpec {
    pub fn new(name: &str, kind: ArchKind, seed: u64) -> Self {
        ArchSpec { name: name.into(), kind, seed }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.kind {
            ArchKind::Identity | ArchKind::Poly2 => true,
            ArchKind::RandomProjection { dim } => dim >= 1,
            ArchKind::RandomFourier { dim, bandwidth } => dim >= 1 && bandwidth > 0.0 && bandwidth.is_finite(),
        };
        if ok && !self.name.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid arch {self:?}")))
        }
    }

    pub fn output_dim(&self, d0: usize) -> usize {
        match self.kind {
            ArchKind::Identity => d0,
            ArchKind::RandomProjection { dim } | ArchKind::RandomFourier { dim, .. } => dim,
            ArchKind::Poly2 => d0 + d0 * (d0 + 1) / 2,
        }
    }

    pub fn tag(&self) -> String {
        match self.kind {
            ArchKind::Identity => "identity".into(),
            ArchKind::RandomProjection { dim } => format!("random-projection({dim})"),
            ArchKind::RandomFourier { dim, bandwidth } => format!("random-fourier({dim},{bandwidth})"),
            ArchKind::Poly2 => "polynomial-degree-2".into(),
        }
    }
}

/// Six maps of varying capacity: two lossy projections, two Fourier
/// widths, the raw input and its quadratic expansion.
pub fn reference_archs() -> Vec<ArchSpec> {
    vec![
        ArchSpec::new("id", ArchKind::Identity, 0),
        ArchSpec::new("rp2", ArchKind::RandomProjection { dim: 2 }, 11),
        ArchSpec::new("rp4", ArchKind::RandomProjection { dim: 4 }, 12),
        ArchSpec::new("rff16", ArchKind::RandomFourier { dim: 16, bandwidth: 4.0 }, 13),
        ArchSpec::new("rff64", ArchKind::RandomFourier { dim: 64, bandwidth: 2.0 }, 14),
        ArchSpec::new("poly2", ArchKind::Poly2, 0),
    ]
}

#[derive(Debug, Clone)]
enum Map {
    Identity,
    Linear(Array2<f64>),
    Fourier { w: Array2<f64>, b: Array1<f64>, scale: f64 },
    Poly2,
}

/// A feature map plus the standardization fitted on its source domain.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    map: Map,
    mean: Array1<f64>,
    std: Array1<f64>,
}

impl FeatureMap {
    pub fn fit(arch: &ArchSpec, source: &Array2<f64>) -> Result<Self> {
        arch.validate()?;
        let d0 = source.ncols();
        let mut rng = ChaCha8Rng::seed_from_u64(arch.seed);
        let mut gauss = |r: usize, c: usize| Array2::from_shape_simple_fn((r, c), || rng.sample::<f64, _>(StandardNormal));
        let map = match arch.kind {
            ArchKind::Identity => Map::Identity,
            ArchKind::Poly2 => Map::Poly2,
            ArchKind::RandomProjection { dim } => Map::Linear(gauss(d0, dim) / (d0 as f64).sqrt()),
            ArchKind::RandomFourier { dim, bandwidth } => {
                let w = gauss(d0, dim) / bandwidth;
                let b = Array1::from_shape_simple_fn(dim, || rng.random_range(0.0..std::f64::consts::TAU));
                Map::Fourier { w, b, scale: (2.0 / dim as f64).sqrt() }
            }
        };
        let mut fm = FeatureMap { map, mean: Array1::zeros(0), std: Array1::zeros(0) };
        let raw = fm.raw(source);
        fm.mean = raw.mean_axis(Axis(0)).expect("non-empty source");
        fm.std = raw.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
        Ok(fm)
    }

    fn raw(&self, x: &Array2<f64>) -> Array2<f64> {
        match &self.map {
            Map::Identity => x.clone(),
            Map::Linear(w) => x.dot(w),
            Map::Fourier { w, b, scale } => (x.dot(w) + b).mapv(|v| scale * v.cos()),
            Map::Poly2 => {
                let (n, d) = x.dim();
                let mut out = Array2::zeros((n, d + d * (d + 1) / 2));
                for (i, row) in x.rows().into_iter().enumerate() {
                    let mut k = 0;
                    for a in 0..d {
                        out[[i, k]] = row[a];
                        k += 1;
                    }
                    for a in 0..d {
                        for b in a..d {
                            out[[i, k]] = row[a] * row[b];
                            k += 1;
                        }
                    }
                }
                out
            }
        }
    }

    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        (self.raw(x) - &self.mean) / &self.std
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_dims() {
        let x = Array2::from_shape_fn((20, 3), |(i, j)| (i * 3 + j) as f64 * 0.1);
        for arch in reference_archs() {
            let f = FeatureMap::fit(&arch, &x).unwrap().apply(&x);
            assert_eq!(f.dim(), (20, arch.output_dim(3)), "{}", arch.name);
            assert!(f.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn standardized_on_source() {
        let x = Array2::from_shape_fn((50, 4), |(i, j)| ((i * 7 + j * 3) % 11) as f64 - 2.0 * j as f64);
        let arch = ArchSpec::new("rp", ArchKind::RandomProjection { dim: 3 }, 5);
        let f = FeatureMap::fit(&arch, &x).unwrap().apply(&x);
        for m in f.mean_axis(Axis(0)).unwrap() {
            assert!(m.abs() < 1e-12);
        }
        for s in f.std_axis(Axis(0), 0.0) {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn poly2_terms() {
        let x = ndarray::array![[2.0, 3.0], [0.0, 1.0], [1.0, -1.0]];
        let fm = FeatureMap::fit(&ArchSpec::new("p", ArchKind::Poly2, 0), &x).unwrap();
        let raw = fm.raw(&x);
        assert_eq!(raw.row(0).to_vec(), vec![2.0, 3.0, 4.0, 6.0, 9.0]);
    }

    #[test]
    fn rejects_zero_dim() {
        assert!(ArchSpec::new("r", ArchKind::RandomProjection { dim: 0 }, 0).validate().is_err());
        assert!(ArchSpec::new("f", ArchKind::RandomFourier { dim: 4, bandwidth: 0.0 }, 0).validate().is_err());
    }
}
