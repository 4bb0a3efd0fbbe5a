//! Losses and training loops: supervised CE training, fixed-temperature
//! knowledge distillation, and the hook points the temperature controller
//! drives.

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::featurizer::Spectrogram;
use crate::models::{frobenius_reg, ModelOutput, Student, Teacher};
use crate::numcore::{
    log_softmax_plain, Adam, AdamConfig, BoundParams, NodeId, NumError, ParamSet, Tape, Tensor,
};

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("empty {0} split")]
    EmptySplit(&'static str),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("trace: {0}")]
    Trace(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdMode {
    None,
    Fixed,
    Dynamic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// KL(teacher || student): gradients push the student's softened
    /// distribution toward the teacher's.
    TeacherStudent,
    /// KL(student || teacher).
    StudentTeacher,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DistillConfig {
    pub beta: f64,
    pub tau: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub kd_mode: KdMode,
    /// Scale L_KL by tau^2 so the CE/KL gradient balance is
    /// temperature-invariant; switchable for ablation.
    pub tau_squared: bool,
    pub kl_direction: KlDirection,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            beta: 0.5,
            tau: 4.0,
            epochs: 30,
            batch_size: 16,
            adam: AdamConfig::default(),
            kd_mode: KdMode::Fixed,
            tau_squared: true,
            kl_direction: KlDirection::TeacherStudent,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<(), DistillError> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(DistillError::BadConfig(format!("beta {} not in [0,1]", self.beta)));
        }
        if self.tau <= 0.0 {
            return Err(DistillError::BadConfig(format!("tau {} must be > 0", self.tau)));
        }
        if self.batch_size == 0 {
            return Err(DistillError::BadConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-epoch audit record; `reward` stays 0 outside dynamic mode.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub tau: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub ce: f64,
    pub kl: f64,
    pub reward: f64,
    /// In-memory telemetry only; not persisted (see `write_csv`).
    #[serde(default, skip_serializing)]
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct DistillTrace {
    pub records: Vec<EpochRecord>,
    pub aborted: bool,
}

impl DistillTrace {
    pub fn push(&mut self, rec: EpochRecord) {
        debug_assert!(self.records.last().map_or(true, |r| r.epoch < rec.epoch));
        self.records.push(rec);
    }

    pub fn final_val_acc(&self) -> f64 {
        self.records.last().map_or(0.0, |r| r.val_acc)
    }

    pub fn best_val_acc(&self) -> f64 {
        self.records.iter().map(|r| r.val_acc).fold(0.0, f64::max)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), DistillError> {
        let mut w = csv::Writer::from_path(path)?;
        // Wall time stays in memory only: persisted artifacts must be
        // bit-identical across repeated runs of one config and seed.
        w.write_record(["epoch", "tau", "train_acc", "val_acc", "ce", "kl", "reward"])
            .map_err(|e| DistillError::Trace(e.to_string()))?;
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                r.tau.to_string(),
                r.train_acc.to_string(),
                r.val_acc.to_string(),
                r.ce.to_string(),
                r.kl.to_string(),
                r.reward.to_string(),
            ])
            .map_err(|e| DistillError::Trace(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self, DistillError> {
        let mut r = csv::Reader::from_path(path)?;
        let mut records = Vec::new();
        for row in r.deserialize::<EpochRecord>() {
            records.push(row.map_err(|e| DistillError::Trace(e.to_string()))?);
        }
        Ok(DistillTrace { records, aborted: false })
    }
}

/// Common surface the training loops need from teacher and student.
pub trait Classifier {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    fn num_classes(&self) -> usize;
    fn forward_on(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        spec: &Spectrogram,
        train_mode: bool,
        dropout_rng: &mut ChaCha8Rng,
    ) -> Result<ModelOutput, NumError>;
    /// Extra regularization term added to the training loss, if any.
    fn regularizer(&self, tape: &mut Tape, bound: &BoundParams) -> Result<Option<NodeId>, NumError>;
}

impl Classifier for Teacher {
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
    fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }
    fn forward_on(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        spec: &Spectrogram,
        train_mode: bool,
        dropout_rng: &mut ChaCha8Rng,
    ) -> Result<ModelOutput, NumError> {
        self.forward(tape, bound, spec, train_mode, dropout_rng)
    }
    fn regularizer(&self, tape: &mut Tape, bound: &BoundParams) -> Result<Option<NodeId>, NumError> {
        if self.cfg.reg_lambda == 0.0 {
            return Ok(None);
        }
        frobenius_reg(tape, bound, &self.head_weights(), self.cfg.reg_lambda).map(Some)
    }
}

impl Classifier for Student {
    fn params(&self) -> &ParamSet {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
    fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }
    fn forward_on(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        spec: &Spectrogram,
        _train_mode: bool,
        _dropout_rng: &mut ChaCha8Rng,
    ) -> Result<ModelOutput, NumError> {
        self.forward(tape, bound, spec)
    }
    fn regularizer(&self, _tape: &mut Tape, _bound: &BoundParams) -> Result<Option<NodeId>, NumError> {
        Ok(None)
    }
}

/// softmax(logits / tau), row-wise, on plain tensors.
pub fn softened_probs(logits: &Tensor, tau: f64) -> Result<Tensor, DistillError> {
    if tau <= 0.0 {
        return Err(DistillError::BadConfig(format!("tau {tau} must be > 0")));
    }
    let (rows, cols) = (logits.rows(), logits.cols());
    let mut out = logits.clone();
    for r in 0..rows {
        let row = &logits.data()[r * cols..(r + 1) * cols];
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b / tau));
        let mut denom = 0.0;
        let mut exps = vec![0.0; cols];
        for (c, &v) in row.iter().enumerate() {
            exps[c] = (v / tau - max).exp();
            denom += exps[c];
        }
        for c in 0..cols {
            out.set2(r, c, exps[c] / denom);
        }
    }
    Ok(out)
}

/// tau^2-scaled mean KL between softened teacher and student rows, on the
/// tape; the teacher side enters as a constant so gradients reach only the
/// student logits.
pub fn kl_loss(
    tape: &mut Tape,
    teacher_logits: &Tensor,
    student_logits: NodeId,
    tau: f64,
    tau_squared: bool,
    direction: KlDirection,
) -> Result<NodeId, DistillError> {
    let s_shape = tape.value(student_logits).shape().to_vec();
    if teacher_logits.shape() != s_shape.as_slice() {
        return Err(DistillError::BadConfig(format!(
            "teacher logits {:?} vs student logits {:?}",
            teacher_logits.shape(),
            s_shape
        )));
    }
    let rows = teacher_logits.rows() as f64;
    let mut t_scaled = teacher_logits.clone();
    for v in t_scaled.data_mut() {
        *v /= tau;
    }
    let log_p_t = log_softmax_plain(&t_scaled);
    let s_scaled = tape.scale(student_logits, 1.0 / tau);

    let kl_sum = match direction {
        KlDirection::TeacherStudent => tape.kl_div_rows(&log_p_t, s_scaled)?,
        KlDirection::StudentTeacher => {
            // sum p_S (log p_S - log p_T)
            let log_p_s = tape.log_softmax_rows(s_scaled);
            let p_s = tape.softmax_rows(s_scaled);
            let log_p_t_node = tape.constant(log_p_t);
            let diff = tape.sub(log_p_s, log_p_t_node)?;
            let term = tape.mul(p_s, diff)?;
            tape.sum_all(term)
        }
    };
    let scale = if tau_squared { tau * tau / rows } else { 1.0 / rows };
    Ok(tape.scale(kl_sum, scale))
}

/// L_TOTAL = (1 - beta) * CE + beta * KL.
pub fn total_loss(ce: f64, kl: f64, beta: f64) -> f64 {
    (1.0 - beta) * ce + beta * kl
}

/// Mean cross-entropy of a B x L logits block against integer labels.
fn ce_loss(tape: &mut Tape, logits: NodeId, labels: &[u32]) -> Result<NodeId, NumError> {
    let cols = tape.value(logits).cols();
    let rows = labels.len();
    let mut onehot = vec![0.0; rows * cols];
    for (r, &l) in labels.iter().enumerate() {
        onehot[r * cols + l as usize] = -1.0 / rows as f64;
    }
    let sel = tape.constant(Tensor::new(vec![rows, cols], onehot).expect("onehot shape"));
    let logp = tape.log_softmax_rows(logits);
    let picked = tape.mul(sel, logp)?;
    Ok(tape.sum_all(picked))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Teacher logits for every training sample, computed once in eval mode.
pub fn cache_teacher_logits(
    teacher: &Teacher,
    train: &[Spectrogram],
) -> Result<Vec<Tensor>, DistillError> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut out = Vec::with_capacity(train.len());
    for spec in train {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(&teacher.params, &mut tape);
        let fwd = teacher.forward(&mut tape, &bound, spec, false, &mut rng)?;
        out.push(tape.value(fwd.logits).clone());
    }
    Ok(out)
}

/// Metrics from one pass over the training batches.
#[derive(Clone, Copy, Debug)]
pub struct EpochMetrics {
    pub train_acc: f64,
    pub ce: f64,
    pub kl: f64,
    pub loss_finite: bool,
}

/// One epoch of total-loss minimization. Supervised training is this with
/// `teacher_logits` absent and `beta` 0; the code path is shared, so the
/// reduction is exact.
#[allow(clippy::too_many_arguments)]
pub fn distill_epoch<M: Classifier>(
    model: &mut M,
    teacher_logits: Option<&[Tensor]>,
    train: &[Spectrogram],
    tau: f64,
    beta: f64,
    cfg: &DistillConfig,
    adam: &mut Adam,
    order_rng: &mut ChaCha8Rng,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<EpochMetrics, DistillError> {
    use rand::Rng;
    let n = train.len();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = order_rng.gen_range(0..=i);
        order.swap(i, j);
    }

    let mut correct = 0usize;
    let mut ce_sum = 0.0;
    let mut kl_sum = 0.0;
    let mut batches = 0usize;
    for chunk in order.chunks(cfg.batch_size) {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(model.params(), &mut tape);
        let mut logit_rows = Vec::with_capacity(chunk.len());
        let mut labels = Vec::with_capacity(chunk.len());
        for &idx in chunk {
            let out = model.forward_on(&mut tape, &bound, &train[idx], true, dropout_rng)?;
            logit_rows.push(out.logits);
            labels.push(train[idx].label);
        }
        let logits = tape.stack_rows(&logit_rows)?;

        for (r, &label) in labels.iter().enumerate() {
            let row = tape.value(logits).row_slice(r);
            if argmax(row) == label as usize {
                correct += 1;
            }
        }

        let ce = ce_loss(&mut tape, logits, &labels)?;
        let ce_val = tape.value(ce).data()[0];
        let mut loss = ce;
        let mut kl_val = 0.0;
        if let Some(cache) = teacher_logits {
            let t_rows: Vec<Vec<f64>> = chunk
                .iter()
                .map(|&idx| cache[idx].data().to_vec())
                .collect();
            let t_logits = Tensor::from_rows(&t_rows);
            let kl = kl_loss(&mut tape, &t_logits, logits, tau, cfg.tau_squared, cfg.kl_direction)?;
            kl_val = tape.value(kl).data()[0];
            if beta > 0.0 {
                let ce_part = tape.scale(ce, 1.0 - beta);
                let kl_part = tape.scale(kl, beta);
                loss = tape.add(ce_part, kl_part)?;
            }
        }
        if let Some(reg) = model.regularizer(&mut tape, &bound)? {
            loss = tape.add(loss, reg)?;
        }

        let loss_val = tape.value(loss).data()[0];
        if !loss_val.is_finite() {
            return Ok(EpochMetrics {
                train_acc: correct as f64 / n as f64,
                ce: ce_val,
                kl: kl_val,
                loss_finite: false,
            });
        }
        let mut grads = tape.backward(loss)?;
        let mut grad_tensors = bound.grads(&mut grads, &tape);
        adam.step(model.params_mut(), &mut grad_tensors);
        ce_sum += ce_val;
        kl_sum += kl_val;
        batches += 1;
    }
    Ok(EpochMetrics {
        train_acc: correct as f64 / n as f64,
        ce: ce_sum / batches as f64,
        kl: kl_sum / batches as f64,
        loss_finite: true,
    })
}

/// Accuracy and L x L row-normalized confusion matrix on a split.
pub fn evaluate<M: Classifier>(model: &M, split: &[Spectrogram]) -> (f64, Vec<Vec<f64>>) {
    let l = model.num_classes();
    let mut counts = vec![vec![0usize; l]; l];
    let mut correct = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for spec in split {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(model.params(), &mut tape);
        let out = model
            .forward_on(&mut tape, &bound, spec, false, &mut rng)
            .expect("eval forward");
        let pred = argmax(tape.value(out.logits).row_slice(0));
        counts[spec.label as usize][pred] += 1;
        if pred == spec.label as usize {
            correct += 1;
        }
    }
    let confusion = counts
        .iter()
        .map(|row| {
            let total: usize = row.iter().sum();
            if total == 0 {
                vec![0.0; l]
            } else {
                row.iter().map(|&c| c as f64 / total as f64).collect()
            }
        })
        .collect();
    let acc = if split.is_empty() { 0.0 } else { correct as f64 / split.len() as f64 };
    (acc, confusion)
}

/// Supervised CE training (beta 0, no teacher). Aborts to the last finite
/// epoch's weights if the loss goes non-finite.
pub fn train_supervised<M: Classifier>(
    model: &mut M,
    train: &[Spectrogram],
    val: &[Spectrogram],
    cfg: &DistillConfig,
) -> Result<DistillTrace, DistillError> {
    run_training(model, None, train, val, cfg, 0.0)
}

/// Fixed-temperature distillation of `student` against a frozen teacher.
pub fn distill_fixed(
    student: &mut Student,
    teacher: &Teacher,
    train: &[Spectrogram],
    val: &[Spectrogram],
    cfg: &DistillConfig,
) -> Result<DistillTrace, DistillError> {
    let cache = cache_teacher_logits(teacher, train)?;
    run_training(student, Some(&cache), train, val, cfg, cfg.beta)
}

fn run_training<M: Classifier>(
    model: &mut M,
    teacher_logits: Option<&[Tensor]>,
    train: &[Spectrogram],
    val: &[Spectrogram],
    cfg: &DistillConfig,
    beta: f64,
) -> Result<DistillTrace, DistillError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(DistillError::EmptySplit("train"));
    }
    if val.is_empty() {
        return Err(DistillError::EmptySplit("val"));
    }
    let mut adam = Adam::new(cfg.adam.clone(), model.params());
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xDA7A_0BDE);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xD20_D20);
    let mut trace = DistillTrace::default();
    for epoch in 0..cfg.epochs {
        let snapshot = model.params().to_map();
        let start = Instant::now();
        let metrics = distill_epoch(
            model,
            teacher_logits,
            train,
            cfg.tau,
            beta,
            cfg,
            &mut adam,
            &mut order_rng,
            &mut dropout_rng,
        )?;
        if !metrics.loss_finite {
            model
                .params_mut()
                .load_map(&snapshot)
                .map_err(DistillError::BadConfig)?;
            trace.aborted = true;
            break;
        }
        let (val_acc, _) = evaluate(model, val);
        trace.push(EpochRecord {
            epoch,
            tau: cfg.tau,
            train_acc: metrics.train_acc,
            val_acc,
            ce: metrics.ce,
            kl: metrics.kl,
            reward: 0.0,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(trace)
}
