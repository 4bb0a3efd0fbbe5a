//! I/Q frames to STFT spectrograms, augmentation, dataset assembly with
//! stratified 6:2:2 splits, and external capture ingestion.

mod ingest;

pub use ingest::{ingest_iq, IngestLayout, LabelRule, SampleEncoding};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sigmodel::{
    synthesize_frame, ChannelConfig, DeviceFingerprint, IqFrame, SigError, WaveformConfig,
};

#[derive(Debug, Error)]
pub enum FeatError {
    #[error("window length {window} exceeds frame length {frame}")]
    WindowTooLong { window: usize, frame: usize },
    #[error("invalid stft params: {0}")]
    BadParams(String),
    #[error("dataset too small: device {device} would get {n} samples in the {split} split (need >= 5)")]
    SplitTooSmall {
        device: u32,
        split: &'static str,
        n: usize,
    },
    #[error(transparent)]
    Sig(#[from] SigError),
    #[error("ingest {path}: {reason} at byte offset {offset}")]
    Ingest {
        path: String,
        reason: String,
        offset: u64,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowFn {
    Rectangular,
    Hann,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StftParams {
    pub window_len: usize,
    pub hop: usize,
    pub window_fn: WindowFn,
}

impl Default for StftParams {
    fn default() -> Self {
        StftParams {
            window_len: 64,
            hop: 32,
            window_fn: WindowFn::Hann,
        }
    }
}

/// F x T nonnegative time-frequency magnitude grid; the model input.
/// F equals the window length (full two-sided complex STFT bins).
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    /// Row-major F x T magnitudes.
    pub mags: Vec<f64>,
    pub freq_bins: usize,
    pub time_steps: usize,
    pub label: u32,
    pub params: StftParams,
}

impl Spectrogram {
    pub fn at(&self, f: usize, t: usize) -> f64 {
        self.mags[f * self.time_steps + t]
    }
}

fn window_coeffs(params: &StftParams) -> Vec<f64> {
    let w = params.window_len;
    match params.window_fn {
        WindowFn::Rectangular => vec![1.0; w],
        WindowFn::Hann => (0..w)
            .map(|n| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / (w - 1) as f64).cos()))
            .collect(),
    }
}

/// Raw STFT magnitudes (no compression or standardization); the column at
/// step t is |DFT(window .* s[t*hop .. t*hop + window_len - 1])|.
pub fn stft_raw(frame: &IqFrame, params: &StftParams) -> Result<Spectrogram, FeatError> {
    if params.hop == 0 || params.window_len == 0 {
        return Err(FeatError::BadParams("window_len and hop must be >= 1".into()));
    }
    if params.window_len > frame.len() {
        return Err(FeatError::WindowTooLong {
            window: params.window_len,
            frame: frame.len(),
        });
    }
    let w = params.window_len;
    let t_steps = (frame.len() - w) / params.hop + 1;
    let coeffs = window_coeffs(params);

    let mut planner = rustfft::FftPlanner::new();
    let fft = planner.plan_fft_forward(w);
    let mut mags = vec![0.0; w * t_steps];
    let mut buf = vec![rustfft::num_complex::Complex::new(0.0, 0.0); w];
    for t in 0..t_steps {
        let start = t * params.hop;
        for n in 0..w {
            buf[n] = rustfft::num_complex::Complex::new(
                frame.i[start + n] * coeffs[n],
                frame.q[start + n] * coeffs[n],
            );
        }
        fft.process(&mut buf);
        for f in 0..w {
            mags[f * t_steps + t] = buf[f].norm();
        }
    }
    Ok(Spectrogram {
        mags,
        freq_bins: w,
        time_steps: t_steps,
        label: frame.label,
        params: params.clone(),
    })
}

/// STFT followed by log(1+m) compression and per-spectrogram
/// standardization to zero mean, unit variance (all-zero when constant).
pub fn stft(frame: &IqFrame, params: &StftParams) -> Result<Spectrogram, FeatError> {
    let mut spec = stft_raw(frame, params)?;
    for v in &mut spec.mags {
        *v = v.ln_1p();
    }
    standardize(&mut spec.mags);
    Ok(spec)
}

fn standardize(values: &mut [f64]) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var <= 1e-24 {
        values.iter_mut().for_each(|v| *v = 0.0);
    } else {
        let inv = 1.0 / var.sqrt();
        values.iter_mut().for_each(|v| *v = (*v - mean) * inv);
    }
}

/// Which transformations `augment` may apply; each is independently
/// switchable for ablations.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct AugmentPolicy {
    /// Additive complex noise at a uniformly drawn SNR (dB) in this range,
    /// relative to the frame's measured power.
    pub snr_db_range: Option<(f64, f64)>,
    /// Uniform circular time shift.
    pub circular_shift: bool,
    /// Global gain scale drawn uniformly from this range.
    pub gain_range: Option<(f64, f64)>,
}

/// Label- and length-preserving augmentation; applied transformations and
/// their parameters are appended to the frame's meta log.
pub fn augment<R: Rng>(frame: &IqFrame, rng: &mut R, policy: &AugmentPolicy) -> IqFrame {
    let mut out = frame.clone();
    if let Some((lo, hi)) = policy.snr_db_range {
        let snr_db = if lo >= hi { lo } else { rng.gen_range(lo..hi) };
        let sig_power = out.power();
        let noise_var = sig_power / 10f64.powf(snr_db / 10.0);
        let sigma = (noise_var / 2.0).sqrt();
        for n in 0..out.len() {
            out.i[n] += <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng) * sigma;
            out.q[n] += <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng) * sigma;
        }
        out.meta.augment_log.push(format!("noise snr_db={snr_db:.3}"));
    }
    if policy.circular_shift {
        let shift = rng.gen_range(0..out.len());
        out.i.rotate_right(shift);
        out.q.rotate_right(shift);
        out.meta.augment_log.push(format!("shift n={shift}"));
    }
    if let Some((lo, hi)) = policy.gain_range {
        let g = if lo >= hi { lo } else { rng.gen_range(lo..hi) };
        for v in out.i.iter_mut().chain(out.q.iter_mut()) {
            *v *= g;
        }
        out.meta.augment_log.push(format!("gain g={g:.6}"));
    }
    out
}

/// Disjoint, exhaustive, stratified 6:2:2 partition of spectrograms.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub train: Vec<Spectrogram>,
    pub val: Vec<Spectrogram>,
    pub test: Vec<Spectrogram>,
    pub split_seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub split: String,
    pub file: String,
    pub offset: usize,
    pub label: u32,
}

/// Synthesize `per_device` frames per fingerprint, featurize, and split
/// 6:2:2 per device. Augmentation is applied to the training set only.
#[allow(clippy::too_many_arguments)]
pub fn build_dataset(
    fleet: &[DeviceFingerprint],
    ch: &ChannelConfig,
    waveform: &WaveformConfig,
    stft_params: &StftParams,
    augment_policy: &AugmentPolicy,
    per_device: usize,
    seed: u64,
) -> Result<DatasetSplit, FeatError> {
    let mut frames = Vec::with_capacity(fleet.len() * per_device);
    for fp in fleet {
        for k in 0..per_device {
            let frame_seed = seed
                .wrapping_mul(1_000_003)
                .wrapping_add((fp.device_id as u64) << 20)
                .wrapping_add(k as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(frame_seed);
            frames.push(synthesize_frame(fp, ch, waveform, &mut rng, frame_seed)?);
        }
    }
    split_frames(&frames, stft_params, augment_policy, seed)
}

use rand::SeedableRng;

/// Stratified 6:2:2 split of pre-synthesized frames (deterministic in
/// frame content and `split_seed`).
pub fn split_frames(
    frames: &[IqFrame],
    stft_params: &StftParams,
    augment_policy: &AugmentPolicy,
    split_seed: u64,
) -> Result<DatasetSplit, FeatError> {
    use std::collections::BTreeMap;
    let mut by_label: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, f) in frames.iter().enumerate() {
        by_label.entry(f.label).or_default().push(i);
    }

    let mut split = DatasetSplit {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        split_seed,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed ^ 0x5117);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(split_seed ^ 0xA706);
    for (&label, idxs) in &by_label {
        let mut idxs = idxs.clone();
        shuffle(&mut idxs, &mut rng);
        let n = idxs.len();
        let n_train = (n * 6) / 10;
        let n_val = (n * 2) / 10;
        let n_test = n - n_train - n_val;
        for (name, count) in [("train", n_train), ("val", n_val), ("test", n_test)] {
            if count < 5 {
                return Err(FeatError::SplitTooSmall {
                    device: label,
                    split: name,
                    n: count,
                });
            }
        }
        for (pos, &fi) in idxs.iter().enumerate() {
            if pos < n_train {
                let aug = augment(&frames[fi], &mut aug_rng, augment_policy);
                split.train.push(stft(&aug, stft_params)?);
            } else if pos < n_train + n_val {
                split.val.push(stft(&frames[fi], stft_params)?);
            } else {
                split.test.push(stft(&frames[fi], stft_params)?);
            }
        }
    }
    Ok(split)
}

fn shuffle<R: Rng>(v: &mut [usize], rng: &mut R) {
    for i in (1..v.len()).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
}

/// Manifest describing where each split sample came from in an archive.
pub fn dataset_manifest(
    frames: &[IqFrame],
    archive_file: &str,
    split_seed: u64,
) -> Vec<ManifestEntry> {
    use std::collections::BTreeMap;
    let mut by_label: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, f) in frames.iter().enumerate() {
        by_label.entry(f.label).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed ^ 0x5117);
    let mut entries = Vec::with_capacity(frames.len());
    for (&label, idxs) in &by_label {
        let mut idxs = idxs.clone();
        shuffle(&mut idxs, &mut rng);
        let n = idxs.len();
        let n_train = (n * 6) / 10;
        let n_val = (n * 2) / 10;
        for (pos, &fi) in idxs.iter().enumerate() {
            let split = if pos < n_train {
                "train"
            } else if pos < n_train + n_val {
                "val"
            } else {
                "test"
            };
            entries.push(ManifestEntry {
                split: split.to_string(),
                file: archive_file.to_string(),
                offset: fi,
                label,
            });
        }
    }
    entries
}
