//! Synthetic multi-domain benchmark: scenario generation, zoo building and
//! label-consuming evaluation.

pub mod arch;
pub mod eval;
pub mod scenario;
pub mod zoo;

pub use arch::{reference_archs, ArchKind, ArchSpec, FeatureMap};
pub use eval::{accuracy, average_ranks, read_labels, spearman, spearman_permutation, write_labels, Spearman};
pub use scenario::{generate_scenario, Dataset, DomainSpec, DomainTransform, Scenario, ScenarioSpec};
pub use zoo::{build_models, build_zoo, fit_logreg, reference_grid, write_zoo, TrainConfig, Zoo, LABELS_FILE, MANIFEST_FILE};
