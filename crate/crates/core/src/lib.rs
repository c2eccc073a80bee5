pub mod calibration;
pub mod cli;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod estimators;
pub mod isotonic;
pub mod baseline;
pub mod nuisance;
pub mod simulation;
