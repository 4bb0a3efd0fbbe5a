//! Teacher ("RFF-LLM-mini": stacked BiLSTM embedding, attention encoder,
//! pooled classifier) and lightweight convolutional student.

mod checkpoint;
mod student;
mod teacher;

pub use checkpoint::{config_hash, load_checkpoint, save_checkpoint, CheckpointSummary};
pub use student::{Student, StudentConfig};
pub use teacher::{Teacher, TeacherConfig};

use thiserror::Error;

use crate::featurizer::Spectrogram;
use crate::numcore::{BoundParams, NodeId, NumError, ParamId, Tape, Tensor};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Logits (1 x L) plus the pooled penultimate feature used for PCA export.
pub struct ModelOutput {
    pub logits: NodeId,
    pub feature: NodeId,
}

/// Spectrogram (F x T) as a T x F sequence tensor.
pub fn spectrogram_to_sequence(spec: &Spectrogram) -> Tensor {
    let (f_bins, t_steps) = (spec.freq_bins, spec.time_steps);
    let mut data = vec![0.0; f_bins * t_steps];
    for t in 0..t_steps {
        for f in 0..f_bins {
            data[t * f_bins + f] = spec.at(f, t);
        }
    }
    Tensor::new(vec![t_steps, f_bins], data).expect("sequence shape")
}

/// Spectrogram (F x T) as a single-channel [1, F, T] image tensor.
pub fn spectrogram_to_image(spec: &Spectrogram) -> Tensor {
    Tensor::new(vec![1, spec.freq_bins, spec.time_steps], spec.mags.clone()).expect("image shape")
}

/// lambda * sum of squared Frobenius norms of the given weight matrices
/// (classifier-head regularization).
pub fn frobenius_reg(
    tape: &mut Tape,
    bound: &BoundParams,
    head_weights: &[ParamId],
    lambda: f64,
) -> Result<NodeId, NumError> {
    let mut total: Option<NodeId> = None;
    for &w in head_weights {
        let node = bound.node(w);
        let sq = tape.mul(node, node)?;
        let s = tape.sum_all(sq);
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    let total = total.expect("at least one head weight");
    Ok(tape.scale(total, lambda))
}

/// Plain (non-tape) value of the Frobenius regularization term.
pub fn frobenius_reg_value(weights: &[&Tensor], lambda: f64) -> f64 {
    lambda * weights.iter().map(|w| w.frobenius_sq()).sum::<f64>()
}
