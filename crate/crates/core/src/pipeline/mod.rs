//! End-to-end individualization, evaluation and hyperparameter search.

mod cv;
mod evaluate;
mod experiment;
mod individualize;
mod minphase;
mod models;

pub use cv::{
    cross_validate, default_search_values, kfold, search_grid, CvResult, CvRow, Hyperparameters,
};
pub use evaluate::{
    evaluate, DatasetSummary, EvaluationReport, MagnitudePredictor, MeanMagnitudePredictor,
    PrototypeOracle, SubjectScore,
};
pub use experiment::{
    evaluate_estimator, run_baseline_training, run_cross_validation, run_estimator_training,
    run_pretraining, run_protocol, CvSettings, DatasetSource, EstimatorKind, ExperimentConfig,
    LoadedData, ProtocolOutcome, SynthSource, TrainedEstimator, ARCHIVE_FILE, AUTOENCODER_FILE,
    BASELINE_FILE, CV_FILE,
};
pub use individualize::{hrirs, Individualizer, TargetGrid};
pub use minphase::{magnitude_db, min_phase_reconstruct, resample_db};
pub use models::{load_autoencoder, save_autoencoder, Estimator, Normalizers, TrainedHrtfDnn};
