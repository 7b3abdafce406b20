//! MFCC frontend: pre-emphasis, Hann-windowed framing, power spectrum, mel
//! filterbank, log compression, and an orthonormal DCT-II.

use std::f64::consts::PI;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::AudioClip;
use crate::fft::real_power_spectrum;
use crate::linalg::Mat;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("clip shorter than one analysis window ({samples} < {window} samples)")]
    TooShort { samples: usize, window: usize },
    #[error("degenerate mel configuration: {0}")]
    DegenerateConfig(String),
    #[error("invalid feature configuration: {0}")]
    InvalidConfig(String),
    #[error("feature dump i/o: {0}")]
    Io(#[from] io::Error),
    #[error("bad feature dump: {0}")]
    BadDump(String),
}

/// MFCC extraction settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MfccConfig {
    pub window_ms: f64,
    pub step_ms: f64,
    pub n_fft: usize,
    pub n_mels: usize,
    pub n_coeffs: usize,
    pub preemphasis: f64,
    pub log_floor: f64,
    /// Stack +-context neighboring frames into each input row (0 = off).
    pub context: usize,
}

impl Default for MfccConfig {
    fn default() -> Self {
        MfccConfig {
            window_ms: 32.0,
            step_ms: 20.0,
            n_fft: 512,
            n_mels: 40,
            n_coeffs: 26,
            preemphasis: 0.97,
            log_floor: 1e-10,
            context: 0,
        }
    }
}

impl MfccConfig {
    pub fn window_samples(&self, sample_rate_hz: u32) -> usize {
        (sample_rate_hz as f64 * self.window_ms / 1000.0).round() as usize
    }

    pub fn step_samples(&self, sample_rate_hz: u32) -> usize {
        (sample_rate_hz as f64 * self.step_ms / 1000.0).round() as usize
    }

    /// Width of one model input row after context stacking.
    pub fn input_width(&self) -> usize {
        self.n_coeffs * (2 * self.context + 1)
    }

    pub fn validate(&self, sample_rate_hz: u32) -> Result<(), FeatureError> {
        let window = self.window_samples(sample_rate_hz);
        let step = self.step_samples(sample_rate_hz);
        if step == 0 || step > window {
            return Err(FeatureError::InvalidConfig(format!(
                "step ({step} samples) must be in 1..=window ({window} samples)"
            )));
        }
        if self.n_coeffs == 0 || self.n_coeffs > self.n_mels {
            return Err(FeatureError::InvalidConfig(format!(
                "n_coeffs ({}) must be in 1..=n_mels ({})",
                self.n_coeffs, self.n_mels
            )));
        }
        if !self.n_fft.is_power_of_two() {
            return Err(FeatureError::InvalidConfig(format!(
                "n_fft ({}) must be a power of two",
                self.n_fft
            )));
        }
        if self.n_fft < window {
            return Err(FeatureError::InvalidConfig(format!(
                "n_fft ({}) must cover the window ({window} samples)",
                self.n_fft
            )));
        }
        if !(self.log_floor > 0.0) {
            return Err(FeatureError::InvalidConfig("log_floor must be > 0".into()));
        }
        Ok(())
    }
}

/// T x n_coeffs feature matrix with its frame step.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    pub frames: Mat,
    pub frame_step_ms: f64,
}

impl FeatureMatrix {
    pub fn n_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn n_coeffs(&self) -> usize {
        self.frames.cols()
    }
}

/// mel = 2595 * log10(1 + f/700)
pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

/// Exact inverse of [`hz_to_mel`].
pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank: `n_mels` rows over `n_fft/2 + 1` FFT bins.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    pub weights: Mat,
    /// Peak frequency of each filter in Hz.
    pub centers_hz: Vec<f64>,
}

/// Builds triangular filters with centers equally spaced on the mel axis
/// between 0 Hz and the Nyquist frequency.
pub fn build_mel_filterbank(
    cfg: &MfccConfig,
    sample_rate_hz: u32,
) -> Result<MelFilterbank, FeatureError> {
    let n_bins = cfg.n_fft / 2 + 1;
    let nyquist = sample_rate_hz as f64 / 2.0;
    let mel_hi = hz_to_mel(nyquist);
    let n_points = cfg.n_mels + 2;

    let points_hz: Vec<f64> = (0..n_points)
        .map(|i| mel_to_hz(mel_hi * i as f64 / (n_points - 1) as f64))
        .collect();

    // every boundary point must land in its own FFT bin
    let bin_width = sample_rate_hz as f64 / cfg.n_fft as f64;
    for pair in points_hz.windows(2) {
        if (pair[0] / bin_width).floor() >= (pair[1] / bin_width).floor() {
            return Err(FeatureError::DegenerateConfig(format!(
                "{} mel points cannot occupy distinct {}-point FFT bins at {} Hz",
                n_points, cfg.n_fft, sample_rate_hz
            )));
        }
    }

    let mut weights = Mat::zeros(cfg.n_mels, n_bins);
    for k in 0..cfg.n_mels {
        let (lo, center, hi) = (points_hz[k], points_hz[k + 1], points_hz[k + 2]);
        for b in 0..n_bins {
            let f = b as f64 * bin_width;
            let w = if f >= lo && f <= center {
                (f - lo) / (center - lo)
            } else if f > center && f <= hi {
                (hi - f) / (hi - center)
            } else {
                0.0
            };
            *weights.at_mut(k, b) = w;
        }
    }

    Ok(MelFilterbank {
        weights,
        centers_hz: points_hz[1..=cfg.n_mels].to_vec(),
    })
}

/// Orthonormal DCT-II matrix, `n_out` rows by `n_in` columns.
pub fn dct2_orthonormal(n_out: usize, n_in: usize) -> Mat {
    let mut d = Mat::zeros(n_out, n_in);
    for k in 0..n_out {
        let scale = if k == 0 {
            (1.0 / n_in as f64).sqrt()
        } else {
            (2.0 / n_in as f64).sqrt()
        };
        for n in 0..n_in {
            *d.at_mut(k, n) = scale * (PI * (2.0 * n as f64 + 1.0) * k as f64
                / (2.0 * n_in as f64))
                .cos();
        }
    }
    d
}

/// Precomputed, immutable MFCC pipeline for one (config, rate) pair.
#[derive(Debug, Clone)]
pub struct MfccPlan {
    cfg: MfccConfig,
    sample_rate_hz: u32,
    window: Vec<f64>,
    filterbank: MelFilterbank,
    dct: Mat,
}

impl MfccPlan {
    pub fn new(cfg: &MfccConfig, sample_rate_hz: u32) -> Result<Self, FeatureError> {
        cfg.validate(sample_rate_hz)?;
        let n = cfg.window_samples(sample_rate_hz);
        let window: Vec<f64> = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / (n - 1) as f64).cos())
            .collect();
        let filterbank = build_mel_filterbank(cfg, sample_rate_hz)?;
        let dct = dct2_orthonormal(cfg.n_coeffs, cfg.n_mels);
        Ok(MfccPlan {
            cfg: cfg.clone(),
            sample_rate_hz,
            window,
            filterbank,
            dct,
        })
    }

    pub fn config(&self) -> &MfccConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    /// Frame count for a clip of `n_samples`: 1 + floor((n - window) / step).
    pub fn frame_count(&self, n_samples: usize) -> Result<usize, FeatureError> {
        let window = self.window.len();
        if n_samples < window {
            return Err(FeatureError::TooShort {
                samples: n_samples,
                window,
            });
        }
        Ok(1 + (n_samples - window) / self.cfg.step_samples(self.sample_rate_hz))
    }

    /// Log-mel energies per frame (before the DCT); exposed for tests and
    /// filterbank diagnostics.
    pub fn log_mel_energies(&self, clip: &AudioClip) -> Result<Mat, FeatureError> {
        let t = self.frame_count(clip.len())?;
        let window = self.window.len();
        let step = self.cfg.step_samples(self.sample_rate_hz);

        // pre-emphasis: y[i] = x[i] - a*x[i-1], y[0] = x[0]
        let x = clip.samples();
        let a = self.cfg.preemphasis;
        let mut emphasized = Vec::with_capacity(x.len());
        if !x.is_empty() {
            emphasized.push(x[0]);
            for i in 1..x.len() {
                emphasized.push(x[i] - a * x[i - 1]);
            }
        }

        let n_bins = self.cfg.n_fft / 2 + 1;
        let mut frame = vec![0.0; window];
        let mut out = Mat::zeros(t, self.cfg.n_mels);
        let mut energies = vec![0.0; self.cfg.n_mels];
        for ti in 0..t {
            let start = ti * step;
            for (i, f) in frame.iter_mut().enumerate() {
                *f = emphasized[start + i] * self.window[i];
            }
            let power = real_power_spectrum(&frame, self.cfg.n_fft);
            debug_assert_eq!(power.len(), n_bins);
            self.filterbank.weights.matvec(&power, &mut energies);
            for (o, &e) in out.row_mut(ti).iter_mut().zip(energies.iter()) {
                *o = e.max(self.cfg.log_floor).ln();
            }
        }
        Ok(out)
    }

    /// Full MFCC pipeline; rows are DCT-II coefficients of the log-mel frame.
    pub fn compute(&self, clip: &AudioClip) -> Result<FeatureMatrix, FeatureError> {
        let log_mel = self.log_mel_energies(clip)?;
        let t = log_mel.rows();
        let mut frames = Mat::zeros(t, self.cfg.n_coeffs);
        for ti in 0..t {
            let row = log_mel.row(ti);
            let out = frames.row_mut(ti);
            self.dct.matvec(row, out);
        }
        Ok(FeatureMatrix {
            frames,
            frame_step_ms: self.cfg.step_ms,
        })
    }
}

/// One-shot MFCC extraction; builds a plan internally.
pub fn compute_mfcc(clip: &AudioClip, cfg: &MfccConfig) -> Result<FeatureMatrix, FeatureError> {
    MfccPlan::new(cfg, clip.sample_rate_hz())?.compute(clip)
}

/// Stacks +-`context` neighboring rows (zero-padded at the edges) so each
/// output row has width `cols * (2*context + 1)`.
pub fn stack_context(frames: &Mat, context: usize) -> Mat {
    if context == 0 {
        return frames.clone();
    }
    let t = frames.rows();
    let c = frames.cols();
    let span = 2 * context + 1;
    let mut out = Mat::zeros(t, c * span);
    for ti in 0..t {
        for (slot, offset) in (-(context as isize)..=context as isize).enumerate() {
            let src = ti as isize + offset;
            if src < 0 || src >= t as isize {
                continue;
            }
            let dst = out.row_mut(ti);
            dst[slot * c..(slot + 1) * c].copy_from_slice(frames.row(src as usize));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Debug feature dump: `MFC1` magic, T and n_coeffs as u32 LE, then f32 LE rows
// ---------------------------------------------------------------------------

pub fn write_feature_dump(feats: &FeatureMatrix, path: &Path) -> Result<(), FeatureError> {
    let t = feats.n_frames() as u32;
    let c = feats.n_coeffs() as u32;
    let mut out = Vec::with_capacity(12 + feats.frames.len() * 4);
    out.extend_from_slice(b"MFC1");
    out.extend_from_slice(&t.to_le_bytes());
    out.extend_from_slice(&c.to_le_bytes());
    for &v in feats.frames.as_slice() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_feature_dump(path: &Path) -> Result<FeatureMatrix, FeatureError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 || &bytes[0..4] != b"MFC1" {
        return Err(FeatureError::BadDump("missing MFC1 magic".into()));
    }
    let t = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let c = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let need = 12 + t * c * 4;
    if bytes.len() != need {
        return Err(FeatureError::BadDump(format!(
            "expected {need} bytes for {t}x{c}, found {}",
            bytes.len()
        )));
    }
    let mut data = Vec::with_capacity(t * c);
    for chunk in bytes[12..].chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    Ok(FeatureMatrix {
        frames: Mat::from_vec(t, c, data),
        frame_step_ms: 0.0,
    })
}
