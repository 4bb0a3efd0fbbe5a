//! RF-fingerprint identification testbed: synthetic I/Q signal generation,
//! STFT featurization, teacher/student classifiers, knowledge distillation,
//! and a PPO controller that adjusts the distillation temperature online.

pub mod distill;
pub mod featurizer;
pub mod harness;
pub mod models;
pub mod numcore;
pub mod ppoctrl;
pub mod sigmodel;
