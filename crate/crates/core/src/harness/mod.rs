//! Experiment orchestration: run configs, mode comparisons, PCA feature
//! export, silhouette scoring, latency accounting, and run reports.

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distill::{
    distill_fixed, evaluate, train_supervised, Classifier, DistillConfig, DistillError,
    DistillTrace, KdMode,
};
use crate::featurizer::{AugmentPolicy, FeatError, StftParams, Spectrogram};
use crate::models::{Student, StudentConfig, Teacher, TeacherConfig};
use crate::numcore::{BoundParams, Tape, Tensor};
use crate::ppoctrl::{dynamic_distill, ControllerConfig, ControllerTrace, CtrlError};
use crate::sigmodel::{ChannelConfig, FleetRanges, SigError, WaveformConfig};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("pca: {0}")]
    Pca(String),
    #[error(transparent)]
    Sig(#[from] SigError),
    #[error(transparent)]
    Feat(#[from] FeatError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Ctrl(#[from] CtrlError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Everything a run needs; a run is reproducible from this plus the code
/// version. Fields omitted from a config file take their defaults.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub num_devices: usize,
    pub per_device: usize,
    pub fleet_ranges: FleetRanges,
    pub channel: ChannelConfig,
    pub waveform: WaveformConfig,
    pub stft: StftParams,
    pub augment: AugmentPolicy,
    pub teacher: TeacherConfig,
    pub student: StudentConfig,
    pub distill: DistillConfig,
    pub controller: ControllerConfig,
    /// Fixed temperatures swept by `compare`.
    pub fixed_taus: Vec<f64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            num_devices: 20,
            per_device: 200,
            fleet_ranges: FleetRanges::default(),
            channel: ChannelConfig {
                ricean_k: 10.0,
                noise_var: 0.1,
                sample_interval: 1e-4,
                n_samples: 256,
            },
            waveform: WaveformConfig::default(),
            stft: StftParams::default(),
            augment: AugmentPolicy::default(),
            teacher: TeacherConfig::default(),
            student: StudentConfig::default(),
            distill: DistillConfig::default(),
            controller: ControllerConfig::default(),
            fixed_taus: vec![2.0, 4.0, 6.0, 8.0],
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.num_devices < 2 {
            return Err(HarnessError::BadConfig(format!(
                "num_devices: classification needs >= 2 devices, got {}",
                self.num_devices
            )));
        }
        if self.per_device == 0 {
            return Err(HarnessError::BadConfig("per_device: must be >= 1".into()));
        }
        self.channel
            .validate()
            .map_err(|e| HarnessError::BadConfig(format!("channel: {e}")))?;
        self.teacher
            .validate()
            .map_err(|e| HarnessError::BadConfig(format!("teacher: {e}")))?;
        self.student
            .validate()
            .map_err(|e| HarnessError::BadConfig(format!("student: {e}")))?;
        self.distill
            .validate()
            .map_err(|e| HarnessError::BadConfig(format!("distill: {e}")))?;
        self.controller
            .validate()
            .map_err(|e| HarnessError::BadConfig(format!("controller: {e}")))?;
        if self.teacher.num_classes != self.num_devices || self.student.num_classes != self.num_devices
        {
            return Err(HarnessError::BadConfig(format!(
                "num_classes: teacher {} / student {} must equal num_devices {}",
                self.teacher.num_classes, self.student.num_classes, self.num_devices
            )));
        }
        if self.teacher.input_bins != self.stft.window_len {
            return Err(HarnessError::BadConfig(format!(
                "teacher.input_bins {} must equal stft.window_len {}",
                self.teacher.input_bins, self.stft.window_len
            )));
        }
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| HarnessError::BadConfig(e.to_string()))
    }

    pub fn write_json(&self, path: &Path) -> Result<(), HarnessError> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| HarnessError::BadConfig(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModeReport {
    pub mode: String,
    pub tau: Option<f64>,
    pub val_acc: f64,
    pub test_acc: f64,
    pub param_count: usize,
    pub trace_file: Option<String>,
}

/// Per-run summary mirroring the modes-by-indicators comparison table.
/// Deliberately excludes wall-clock timing so the file is bit-identical
/// across repeated runs; latency goes in a separate timing artifact.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: u64,
    pub teacher_test_acc: f64,
    pub teacher_param_count: usize,
    pub modes: Vec<ModeReport>,
}

/// Symmetric-matrix eigendecomposition by cyclic Jacobi rotations; returns
/// (eigenvalues, eigenvectors as columns), unordered.
fn jacobi_eigh(a: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut v = vec![vec![0.0; n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += m[i][j] * m[i][j];
            }
        }
        if off.sqrt() < 1e-14 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k][p];
                    let mkq = m[k][q];
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p][k];
                    let mqk = m[q][k];
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                for row in v.iter_mut() {
                    let vp = row[p];
                    let vq = row[q];
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let evals = (0..n).map(|i| m[i][i]).collect();
    (evals, v)
}

/// Center, eigendecompose the covariance, and project onto the top
/// components (largest-magnitude loading made positive for a deterministic
/// sign). Returns the B x dims coordinates and per-component explained
/// variance fractions.
pub fn pca_project(features: &Tensor, dims: usize) -> Result<(Tensor, Vec<f64>), HarnessError> {
    let (b, d) = (features.rows(), features.cols());
    if b <= dims {
        return Err(HarnessError::Pca(format!(
            "need more samples than components ({b} <= {dims})"
        )));
    }
    let mut means = vec![0.0; d];
    for r in 0..b {
        for c in 0..d {
            means[c] += features.at2(r, c);
        }
    }
    for mv in means.iter_mut() {
        *mv /= b as f64;
    }
    let mut cov = vec![vec![0.0; d]; d];
    for r in 0..b {
        for i in 0..d {
            let xi = features.at2(r, i) - means[i];
            for j in i..d {
                cov[i][j] += xi * (features.at2(r, j) - means[j]);
            }
        }
    }
    let denom = (b - 1) as f64;
    for i in 0..d {
        for j in i..d {
            cov[i][j] /= denom;
            cov[j][i] = cov[i][j];
        }
    }
    let total_var: f64 = (0..d).map(|i| cov[i][i]).sum();
    if total_var <= 1e-24 {
        return Err(HarnessError::Pca("zero-variance features".into()));
    }

    let (evals, evecs) = jacobi_eigh(&cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&x, &y| evals[y].partial_cmp(&evals[x]).unwrap());

    let mut components = Vec::with_capacity(dims);
    let mut explained = Vec::with_capacity(dims);
    for &idx in order.iter().take(dims) {
        let mut comp: Vec<f64> = (0..d).map(|k| evecs[k][idx]).collect();
        let lead = comp
            .iter()
            .cloned()
            .fold(0.0_f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if lead < 0.0 {
            for x in comp.iter_mut() {
                *x = -*x;
            }
        }
        components.push(comp);
        explained.push(evals[idx].max(0.0) / total_var);
    }

    let mut coords = Tensor::zeros(&[b, dims]);
    for r in 0..b {
        for (ci, comp) in components.iter().enumerate() {
            let mut dot = 0.0;
            for c in 0..d {
                dot += (features.at2(r, c) - means[c]) * comp[c];
            }
            coords.set2(r, ci, dot);
        }
    }
    Ok((coords, explained))
}

/// Mean silhouette coefficient over all points (Euclidean); singleton
/// clusters contribute 0.
pub fn silhouette_score(points: &Tensor, labels: &[u32]) -> Result<f64, HarnessError> {
    let b = points.rows();
    if b != labels.len() {
        return Err(HarnessError::BadConfig(format!(
            "points {} vs labels {}",
            b,
            labels.len()
        )));
    }
    use std::collections::BTreeMap;
    let mut clusters: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        clusters.entry(l).or_default().push(i);
    }
    if clusters.len() < 2 {
        return Err(HarnessError::BadConfig(
            "silhouette needs at least 2 clusters".into(),
        ));
    }
    let dist = |x: usize, y: usize| {
        let mut s = 0.0;
        for c in 0..points.cols() {
            let d = points.at2(x, c) - points.at2(y, c);
            s += d * d;
        }
        s.sqrt()
    };
    let mut total = 0.0;
    for (&li, members) in &clusters {
        for &i in members {
            if members.len() < 2 {
                continue;
            }
            let a = members
                .iter()
                .filter(|&&j| j != i)
                .map(|&j| dist(i, j))
                .sum::<f64>()
                / (members.len() - 1) as f64;
            let mut b_val = f64::INFINITY;
            for (&lj, other) in &clusters {
                if lj == li || other.is_empty() {
                    continue;
                }
                let m = other.iter().map(|&j| dist(i, j)).sum::<f64>() / other.len() as f64;
                b_val = b_val.min(m);
            }
            total += (b_val - a) / a.max(b_val);
        }
    }
    Ok(total / b as f64)
}

/// Pooled penultimate activations for every sample in a split, row per
/// sample, plus the labels.
pub fn collect_features<M: Classifier>(model: &M, split: &[Spectrogram]) -> (Tensor, Vec<u32>) {
    let mut rows = Vec::with_capacity(split.len());
    let mut labels = Vec::with_capacity(split.len());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for spec in split {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(model.params(), &mut tape);
        let out = model
            .forward_on(&mut tape, &bound, spec, false, &mut rng)
            .expect("feature forward");
        rows.push(tape.value(out.feature).data().to_vec());
        labels.push(spec.label);
    }
    (Tensor::from_rows(&rows), labels)
}

/// Median single-sample forward latency (ms) over `runs` warm passes.
pub fn median_forward_latency<M: Classifier>(model: &M, spec: &Spectrogram, runs: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut one = || {
        let mut tape = Tape::new();
        let bound = BoundParams::bind(model.params(), &mut tape);
        let start = Instant::now();
        let out = model
            .forward_on(&mut tape, &bound, spec, false, &mut rng)
            .expect("latency forward");
        let dt = start.elapsed().as_secs_f64() * 1e3;
        std::hint::black_box(tape.value(out.logits).data()[0]);
        dt
    };
    for _ in 0..runs.min(10) {
        one();
    }
    let mut times: Vec<f64> = (0..runs.max(1)).map(|_| one()).collect();
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    times[times.len() / 2]
}

pub struct ModeOutcome {
    pub mode: KdMode,
    pub tau: Option<f64>,
    pub student: Student,
    pub trace: DistillTrace,
    pub controller: Option<ControllerTrace>,
}

/// Train one student per mode (no-KD, each fixed tau, dynamic) from the same
/// initialization seed against one frozen teacher.
pub fn compare_modes(
    teacher: &Teacher,
    student_cfg: &StudentConfig,
    train: &[Spectrogram],
    val: &[Spectrogram],
    dcfg: &DistillConfig,
    ccfg: &ControllerConfig,
    fixed_taus: &[f64],
    init_seed: u64,
) -> Result<Vec<ModeOutcome>, HarnessError> {
    let new_student = || {
        Student::new(student_cfg.clone(), &mut ChaCha8Rng::seed_from_u64(init_seed))
            .map_err(|e| HarnessError::BadConfig(e.to_string()))
    };
    let mut outcomes = Vec::new();

    let mut nkd = new_student()?;
    let nkd_cfg = DistillConfig { kd_mode: KdMode::None, ..dcfg.clone() };
    let trace = train_supervised(&mut nkd, train, val, &nkd_cfg)?;
    outcomes.push(ModeOutcome {
        mode: KdMode::None,
        tau: None,
        student: nkd,
        trace,
        controller: None,
    });

    for &tau in fixed_taus {
        let mut student = new_student()?;
        let cfg = DistillConfig { kd_mode: KdMode::Fixed, tau, ..dcfg.clone() };
        let trace = distill_fixed(&mut student, teacher, train, val, &cfg)?;
        outcomes.push(ModeOutcome {
            mode: KdMode::Fixed,
            tau: Some(tau),
            student,
            trace,
            controller: None,
        });
    }

    let mut student = new_student()?;
    let cfg = DistillConfig { kd_mode: KdMode::Dynamic, ..dcfg.clone() };
    let out = dynamic_distill(&mut student, teacher, train, val, &cfg, ccfg)?;
    outcomes.push(ModeOutcome {
        mode: KdMode::Dynamic,
        tau: None,
        student,
        trace: out.trace,
        controller: Some(out.controller),
    });
    Ok(outcomes)
}

pub fn mode_name(mode: KdMode, tau: Option<f64>) -> String {
    match (mode, tau) {
        (KdMode::None, _) => "nkd".to_string(),
        (KdMode::Fixed, Some(t)) => format!("fixed_tau{t}"),
        (KdMode::Fixed, None) => "fixed".to_string(),
        (KdMode::Dynamic, _) => "dynamic".to_string(),
    }
}

/// Test-split evaluation for a finished mode.
pub fn mode_report<M: Classifier>(
    model: &M,
    mode: KdMode,
    tau: Option<f64>,
    val: &[Spectrogram],
    test: &[Spectrogram],
    trace_file: Option<String>,
) -> ModeReport {
    let (val_acc, _) = evaluate(model, val);
    let (test_acc, _) = evaluate(model, test);
    ModeReport {
        mode: mode_name(mode, tau),
        tau,
        val_acc,
        test_acc,
        param_count: model.params().param_count(),
        trace_file,
    }
}

/// Write (label, pc1, pc2, ...) rows.
pub fn write_features_csv(
    path: &Path,
    labels: &[u32],
    coords: &Tensor,
) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| HarnessError::BadConfig(e.to_string()))?;
    let dims = coords.cols();
    let mut header = vec!["label".to_string()];
    header.extend((1..=dims).map(|i| format!("pc{i}")));
    w.write_record(&header)
        .map_err(|e| HarnessError::BadConfig(e.to_string()))?;
    for (r, &label) in labels.iter().enumerate() {
        let mut row = vec![label.to_string()];
        row.extend((0..dims).map(|c| coords.at2(r, c).to_string()));
        w.write_record(&row)
            .map_err(|e| HarnessError::BadConfig(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Write an L x L row-normalized confusion matrix.
pub fn write_confusion_csv(path: &Path, confusion: &[Vec<f64>]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| HarnessError::BadConfig(e.to_string()))?;
    for row in confusion {
        w.write_record(row.iter().map(|v| v.to_string()))
            .map_err(|e| HarnessError::BadConfig(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests;
