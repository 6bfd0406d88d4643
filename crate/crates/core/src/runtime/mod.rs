//! Evaluation, the backbone training recipe, and the assembled module.

pub mod ablation;
pub mod eval;
pub mod recipe;
pub mod ufem;

pub use ablation::{ablation_report, ablation_report_manifest, AblationReport, AblationRow};
pub use eval::{evaluate_classification, evaluate_images, Classifier, Condition, EvalReport};
pub use recipe::{train_backbone, BackboneRecipe};
pub use ufem::{compose_ufem, mean_correlation_distance, Provenance, UfemCheckpoint};
