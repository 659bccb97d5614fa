//! File formats and the mAP evaluator.

mod features;
mod jsonl;
mod map;
mod staged;

pub use features::{load_features, read_features, save_features, write_features, ElementType};
pub use jsonl::{
    load_detections, load_predictions, read_detections, read_predictions, save_detections, save_predictions,
    write_detections, write_predictions, PredictionRecord, PredictionSet,
};
pub use map::{average_precision, evaluate_map, ClassAp, EvalResult};
pub use staged::StagedWrite;
