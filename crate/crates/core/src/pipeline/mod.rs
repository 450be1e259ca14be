//! Two-stage protocol: split, extractor training, Grad-CAM VOI extraction,
//! cross-validated classifier training and evaluation.

pub mod localization;
pub mod metrics;
pub mod optim;
pub mod run;
pub mod split;
pub mod stats;
pub mod train;

pub use localization::{box_iou, localization_eval, mask_bbox, LocalizationReport, LocalizationSample};
pub use metrics::{confusion_metrics, roc_auc, threshold_predictions, Confusion, ConfusionMetrics, Roc, RocPoint};
pub use optim::{adadelta_step, AdadeltaState};
pub use split::{make_split, SplitPlan};
pub use stats::{mean_sd, paired_t_test, t_critical, TTest};
pub use train::{accuracy_at, predict_all, train, TrainConfig};
