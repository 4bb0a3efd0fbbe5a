//! Synthetic labeled complex-baseband frames: transmitter impairments,
//! Rician block fading, and additive noise.

mod archive;

pub use archive::{read_frame_archive, write_frame_archive, ARCHIVE_MAGIC, ARCHIVE_VERSION};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SigError {
    #[error("fingerprint out of range: alpha={alpha}, phi={phi} (need 0 < alpha <= 1, 0 < phi <= 2pi)")]
    BadFingerprint { alpha: f64, phi: f64 },
    #[error("invalid channel config: {0}")]
    BadChannel(String),
    #[error("fleet sampling failed: could not place fingerprint {index} with required separation after {attempts} rejection draws")]
    SeparationUnattainable { index: usize, attempts: usize },
    #[error("fleet needs at least 2 devices, got {0}")]
    FleetTooSmall(usize),
    #[error("archive: {0}")]
    Archive(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Per-transmitter impairment parameters that make a device identifiable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceFingerprint {
    pub device_id: u32,
    /// Gain imbalance, in (0, 1].
    pub alpha: f64,
    /// Phase imbalance in radians, in (0, 2pi].
    pub phi: f64,
    /// Residual carrier offset in Hz.
    pub f0: f64,
}

impl DeviceFingerprint {
    pub fn validate(&self) -> Result<(), SigError> {
        if self.alpha <= 0.0 || self.alpha > 1.0 || self.phi <= 0.0 || self.phi > 2.0 * PI {
            return Err(SigError::BadFingerprint {
                alpha: self.alpha,
                phi: self.phi,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChannelConfig {
    /// Rician K-factor (linear). 0 is Rayleigh, large K is pure line of sight.
    pub ricean_k: f64,
    /// Complex noise variance sigma^2.
    pub noise_var: f64,
    /// Sampling interval in seconds.
    pub sample_interval: f64,
    /// Frame length in samples.
    pub n_samples: usize,
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<(), SigError> {
        if self.ricean_k < 0.0 || self.noise_var < 0.0 {
            return Err(SigError::BadChannel(format!(
                "ricean_k={} noise_var={} must be nonnegative",
                self.ricean_k, self.noise_var
            )));
        }
        if self.sample_interval <= 0.0 || self.n_samples == 0 {
            return Err(SigError::BadChannel(format!(
                "sample_interval={} n_samples={} must be positive",
                self.sample_interval, self.n_samples
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameMeta {
    pub seed: u64,
    pub noise_var: f64,
    /// Block-fading channel draw for this frame.
    pub h_re: f64,
    pub h_im: f64,
    /// Augmentation log (operation and parameters), newest last.
    pub augment_log: Vec<String>,
}

/// A fixed-length complex baseband frame with its device label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IqFrame {
    pub i: Vec<f64>,
    pub q: Vec<f64>,
    pub label: u32,
    pub meta: FrameMeta,
}

impl IqFrame {
    pub fn len(&self) -> usize {
        self.i.len()
    }

    pub fn is_empty(&self) -> bool {
        self.i.is_empty()
    }

    pub fn power(&self) -> f64 {
        let n = self.i.len().max(1);
        self.i
            .iter()
            .zip(&self.q)
            .map(|(&a, &b)| a * a + b * b)
            .sum::<f64>()
            / n as f64
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WaveformConfig {
    pub n_samples: usize,
    /// Samples per QPSK symbol (rectangular pulse).
    pub oversampling: usize,
}

impl Default for WaveformConfig {
    fn default() -> Self {
        WaveformConfig {
            n_samples: 256,
            oversampling: 8,
        }
    }
}

/// Pseudo-random QPSK baseband rails with unit average power.
/// Each rail holds +-1/sqrt(2) for `oversampling` samples.
pub fn baseband_ideal<R: Rng>(rng: &mut R, cfg: &WaveformConfig) -> (Vec<f64>, Vec<f64>) {
    let amp = std::f64::consts::FRAC_1_SQRT_2;
    let mut bi = Vec::with_capacity(cfg.n_samples);
    let mut bq = Vec::with_capacity(cfg.n_samples);
    while bi.len() < cfg.n_samples {
        let si = if rng.gen::<bool>() { amp } else { -amp };
        let sq = if rng.gen::<bool>() { amp } else { -amp };
        for _ in 0..cfg.oversampling {
            if bi.len() >= cfg.n_samples {
                break;
            }
            bi.push(si);
            bq.push(sq);
        }
    }
    (bi, bq)
}

/// Transmitter impairment map, evaluated at t = n * sample_interval:
/// b[n] = alpha*cos(2 pi f0 t + phi)*b_I[n] - j*sin(2 pi f0 t)*b_Q[n].
pub fn apply_impairments(
    b_i: &[f64],
    b_q: &[f64],
    fp: &DeviceFingerprint,
    sample_interval: f64,
) -> Result<(Vec<f64>, Vec<f64>), SigError> {
    fp.validate()?;
    let mut out_i = Vec::with_capacity(b_i.len());
    let mut out_q = Vec::with_capacity(b_q.len());
    for n in 0..b_i.len() {
        let t = n as f64 * sample_interval;
        let w = 2.0 * PI * fp.f0 * t;
        out_i.push(fp.alpha * (w + fp.phi).cos() * b_i[n]);
        out_q.push(-(w.sin()) * b_q[n]);
    }
    Ok((out_i, out_q))
}

/// One Rician block-fading draw:
/// H = sqrt(K/(K+1)) * h + sqrt(1/(K+1)) * h_scatter,
/// with h a unit-modulus line-of-sight component at `los_phase` and
/// h_scatter circular complex normal(0, 1).
pub fn rician_gain<R: Rng>(rng: &mut R, k: f64, los_phase: f64) -> (f64, f64) {
    let scatter_re: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
        * std::f64::consts::FRAC_1_SQRT_2;
    let scatter_im: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
        * std::f64::consts::FRAC_1_SQRT_2;
    let los = (k / (k + 1.0)).sqrt();
    let nlos = (1.0 / (k + 1.0)).sqrt();
    (
        los * los_phase.cos() + nlos * scatter_re,
        los * los_phase.sin() + nlos * scatter_im,
    )
}

/// Deterministic composition of rician_gain from an explicit scatter draw;
/// exposed so tests can pin the channel realization.
pub fn rician_combine(k: f64, h_los: (f64, f64), h_scatter: (f64, f64)) -> (f64, f64) {
    let los = (k / (k + 1.0)).sqrt();
    let nlos = (1.0 / (k + 1.0)).sqrt();
    (
        los * h_los.0 + nlos * h_scatter.0,
        los * h_los.1 + nlos * h_scatter.1,
    )
}

/// Full frame synthesis: ideal QPSK rails, impairment map, one channel draw
/// per frame (block fading), additive circular complex noise.
pub fn synthesize_frame<R: Rng>(
    fp: &DeviceFingerprint,
    ch: &ChannelConfig,
    waveform: &WaveformConfig,
    rng: &mut R,
    seed: u64,
) -> Result<IqFrame, SigError> {
    fp.validate()?;
    ch.validate()?;
    let cfg = WaveformConfig {
        n_samples: ch.n_samples,
        oversampling: waveform.oversampling,
    };
    let (bi, bq) = baseband_ideal(rng, &cfg);
    let (xi, xq) = apply_impairments(&bi, &bq, fp, ch.sample_interval)?;

    let los_phase = rng.gen_range(0.0..2.0 * PI);
    let (h_re, h_im) = rician_gain(rng, ch.ricean_k, los_phase);

    let noise_sigma = (ch.noise_var / 2.0).sqrt();
    let mut i = Vec::with_capacity(ch.n_samples);
    let mut q = Vec::with_capacity(ch.n_samples);
    for n in 0..ch.n_samples {
        // s = H * b + noise, with b = xi + j*xq
        let s_re = h_re * xi[n] - h_im * xq[n];
        let s_im = h_re * xq[n] + h_im * xi[n];
        let n_re: f64 =
            <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng) * noise_sigma;
        let n_im: f64 =
            <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng) * noise_sigma;
        i.push(s_re + n_re);
        q.push(s_im + n_im);
    }
    Ok(IqFrame {
        i,
        q,
        label: fp.device_id,
        meta: FrameMeta {
            seed,
            noise_var: ch.noise_var,
            h_re,
            h_im,
            augment_log: Vec::new(),
        },
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FleetRanges {
    pub alpha: (f64, f64),
    pub phi: (f64, f64),
    pub f0: (f64, f64),
    /// Minimum pairwise separation floors; a pair is distinct when any one
    /// of the three gaps meets its floor.
    pub min_alpha_gap: f64,
    pub min_phi_gap: f64,
    pub min_f0_gap: f64,
}

impl Default for FleetRanges {
    fn default() -> Self {
        FleetRanges {
            alpha: (0.7, 1.0),
            phi: (1e-3, 2.0 * PI),
            f0: (1.0, 500.0),
            min_alpha_gap: 0.01,
            min_phi_gap: 0.02,
            min_f0_gap: 20.0,
        }
    }
}

fn separated(a: &DeviceFingerprint, b: &DeviceFingerprint, r: &FleetRanges) -> bool {
    (a.alpha - b.alpha).abs() >= r.min_alpha_gap
        || (a.phi - b.phi).abs() >= r.min_phi_gap
        || (a.f0 - b.f0).abs() >= r.min_f0_gap
}

/// Draw `l` pairwise-distinct fingerprints by rejection sampling.
pub fn sample_fleet<R: Rng>(
    rng: &mut R,
    l: usize,
    ranges: &FleetRanges,
) -> Result<Vec<DeviceFingerprint>, SigError> {
    const MAX_ATTEMPTS: usize = 1000;
    if l < 2 {
        return Err(SigError::FleetTooSmall(l));
    }
    let mut fleet: Vec<DeviceFingerprint> = Vec::with_capacity(l);
    for idx in 0..l {
        let mut placed = false;
        for _ in 0..MAX_ATTEMPTS {
            let cand = DeviceFingerprint {
                device_id: idx as u32,
                alpha: sample_range(rng, ranges.alpha),
                phi: sample_range(rng, ranges.phi),
                f0: sample_range(rng, ranges.f0),
            };
            cand.validate()?;
            if fleet.iter().all(|f| separated(f, &cand, ranges)) {
                fleet.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(SigError::SeparationUnattainable {
                index: idx,
                attempts: MAX_ATTEMPTS,
            });
        }
    }
    Ok(fleet)
}

fn sample_range<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo >= hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

pub fn write_fleet_json(path: &std::path::Path, fleet: &[DeviceFingerprint]) -> Result<(), SigError> {
    let json = serde_json::to_string_pretty(fleet).expect("fleet serializes");
    std::fs::write(path, json)?;
    Ok(())
}

pub fn read_fleet_json(path: &std::path::Path) -> Result<Vec<DeviceFingerprint>, SigError> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| SigError::Archive(format!("fleet json: {e}")))
}
