//! Learning curves, constrained power-law fits, the Additive Factors Model
//! and rank-based AUC.

mod afm;
mod auc;
mod curves;
mod power_law;

pub use afm::{
    afm_error_curve, afm_predict, evaluate_afm, fit_afm, split_students, AfmData, AfmEvaluation, AfmFit,
    AfmObservation, AfmParams, DEFAULT_LAMBDA, DEFAULT_MAX_ITER, DEFAULT_TEST_FRACTION, GRADIENT_TOLERANCE,
};
pub use auc::auc;
pub use curves::{
    aggregate_curves, empirical_curve, empirical_curves, AggregatePoint, CurvePoint, LearningCurve,
    DEFAULT_MIN_SUPPORT,
};
pub use power_law::{fit_points, fit_power_law, sse, PowerLawFit, B_LOWER, GOLDEN_TOLERANCE};
