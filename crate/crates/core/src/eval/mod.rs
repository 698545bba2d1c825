//! Image realism, label alignment and cost metrics.

mod classifier;
mod cost;
mod frechet;
mod roc;

pub use classifier::{alignment_eval, train_classifier, AlignmentReport, ClassifierEpoch, ClassifierTrainConfig, ToyClassifier};
pub use cost::{count_flops, count_params, measure_latency, CostReport, LatencyReport};
pub use frechet::{fid, fit_frechet, frechet_distance, FeatureExtractor, FrechetStats};
pub use roc::auroc;
