//! Probability-gated waveform augmentations for training data.
//!
//! A pipeline is an ordered list of specs parsed from strings like
//! `gain[p=0.5,db=-6:0]`. Each spec fires independently per sample with
//! probability `p`, drawing its parameter uniformly from the given range.
//! All draws come from a counter-based generator keyed by
//! (seed, sample index, spec position), so the same sample receives the
//! same treatment regardless of epoch or resume point.

use crate::audio::{resample, AudioClip};
use crate::seeding::mix_key;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("malformed augmentation spec `{spec}`: {reason}")]
    SyntaxError { spec: String, reason: String },
    #[error("unknown augmentation kind `{0}`")]
    UnknownKind(String),
    #[error("augmentation range has low > high: {low}:{high}")]
    RangeOrderError { low: f64, high: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentKind {
    /// Scales the waveform by a decibel factor, then re-clamps.
    Gain,
    /// Adds white noise at a target signal-to-noise ratio in dB.
    Noise,
    /// Resamples by a rate factor and relabels back to the canonical rate,
    /// changing duration by 1/rate.
    Tempo,
}

impl AugmentKind {
    fn parse(name: &str) -> Result<Self, AugmentError> {
        match name {
            "gain" => Ok(Self::Gain),
            "noise" => Ok(Self::Noise),
            "tempo" => Ok(Self::Tempo),
            other => Err(AugmentError::UnknownKind(other.to_string())),
        }
    }

    /// Name of the single range parameter this kind accepts.
    fn param_name(self) -> &'static str {
        match self {
            Self::Gain => "db",
            Self::Noise => "snr",
            Self::Tempo => "rate",
        }
    }

    /// Default range used when the spec omits the parameter.
    fn default_range(self) -> (f64, f64) {
        match self {
            Self::Gain => (-6.0, 6.0),
            Self::Noise => (15.0, 30.0),
            Self::Tempo => (0.9, 1.1),
        }
    }
}

/// One parsed augmentation with its gate probability and parameter range.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentSpec {
    pub kind: AugmentKind,
    pub probability: f64,
    pub low: f64,
    pub high: f64,
}

fn syntax(spec: &str, reason: impl Into<String>) -> AugmentError {
    AugmentError::SyntaxError {
        spec: spec.to_string(),
        reason: reason.into(),
    }
}

/// Parses one spec string of the form `kind` or `kind[key=value,...]`.
///
/// Recognized keys are `p` (probability, default 1.0) and the kind's own
/// range parameter written `low:high` (both real, low <= high).
pub fn parse_augment_spec(spec: &str) -> Result<AugmentSpec, AugmentError> {
    let spec = spec.trim();
    let (name, args) = match spec.find('[') {
        None => (spec, None),
        Some(open) => {
            if !spec.ends_with(']') {
                return Err(syntax(spec, "missing closing `]`"));
            }
            (&spec[..open], Some(&spec[open + 1..spec.len() - 1]))
        }
    };
    if name.is_empty() {
        return Err(syntax(spec, "empty kind name"));
    }
    let kind = AugmentKind::parse(name)?;
    let mut probability = 1.0;
    let (mut low, mut high) = kind.default_range();
    if let Some(args) = args {
        for field in args.split(',') {
            let field = field.trim();
            if field.is_empty() {
                return Err(syntax(spec, "empty argument"));
            }
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| syntax(spec, format!("argument `{field}` has no `=`")))?;
            match key.trim() {
                "p" => {
                    probability = value
                        .trim()
                        .parse::<f64>()
                        .map_err(|_| syntax(spec, format!("bad probability `{value}`")))?;
                    if !(0.0..=1.0).contains(&probability) {
                        return Err(syntax(spec, format!("probability {probability} outside [0, 1]")));
                    }
                }
                key if key == kind.param_name() => {
                    let (lo, hi) = value
                        .split_once(':')
                        .ok_or_else(|| syntax(spec, format!("range `{value}` is not low:high")))?;
                    low = lo
                        .trim()
                        .parse::<f64>()
                        .map_err(|_| syntax(spec, format!("bad number `{lo}`")))?;
                    high = hi
                        .trim()
                        .parse::<f64>()
                        .map_err(|_| syntax(spec, format!("bad number `{hi}`")))?;
                    if !low.is_finite() || !high.is_finite() {
                        return Err(syntax(spec, "range bounds must be finite"));
                    }
                    if low > high {
                        return Err(AugmentError::RangeOrderError { low, high });
                    }
                }
                other => {
                    return Err(syntax(
                        spec,
                        format!("key `{other}` not valid for kind `{name}`"),
                    ));
                }
            }
        }
    }
    Ok(AugmentSpec {
        kind,
        probability,
        low,
        high,
    })
}

/// Parses a whole pipeline, preserving order.
pub fn parse_augment_pipeline<S: AsRef<str>>(specs: &[S]) -> Result<Vec<AugmentSpec>, AugmentError> {
    specs.iter().map(|s| parse_augment_spec(s.as_ref())).collect()
}

fn apply_gain(clip: &AudioClip, db: f64) -> AudioClip {
    let factor = 10f64.powf(db / 20.0);
    let samples: Vec<f64> = clip.samples().iter().map(|&s| s * factor).collect();
    AudioClip::new(samples, clip.sample_rate_hz())
}

fn apply_noise(clip: &AudioClip, snr_db: f64, rng: &mut ChaCha8Rng) -> AudioClip {
    let n = clip.len();
    if n == 0 {
        return clip.clone();
    }
    let signal_power: f64 = clip.samples().iter().map(|&s| s * s).sum::<f64>() / n as f64;
    let signal_rms = signal_power.sqrt();
    if signal_rms == 0.0 {
        return clip.clone();
    }
    let noise_rms = signal_rms / 10f64.powf(snr_db / 20.0);
    // uniform white noise on [-a, a] has RMS a / sqrt(3)
    let amplitude = noise_rms * 3f64.sqrt();
    let samples: Vec<f64> = clip
        .samples()
        .iter()
        .map(|&s| s + rng.gen_range(-amplitude..=amplitude))
        .collect();
    AudioClip::new(samples, clip.sample_rate_hz())
}

/// Tempo scaling quantizes the intermediate rate to a 25 Hz grid so the
/// polyphase filter bank stays small for any drawn factor.
const TEMPO_RATE_QUANTUM_HZ: u32 = 25;

fn apply_tempo(clip: &AudioClip, rate_factor: f64) -> AudioClip {
    let source = clip.sample_rate_hz();
    let raw_target = f64::from(source) / rate_factor;
    let quantum = f64::from(TEMPO_RATE_QUANTUM_HZ);
    let target = ((raw_target / quantum).round() * quantum).max(quantum) as u32;
    if target == source {
        return clip.clone();
    }
    let stretched = resample(clip, target);
    AudioClip::new(stretched.samples().to_vec(), source)
}

/// Runs the pipeline over one clip. Draw k for spec i on sample j depends
/// only on (rng_seed, j, i), never on other samples or epochs.
///
/// Each spec first draws the gate (uniform in [0, 1), fires when below p),
/// then draws its parameter; a closed gate consumes no parameter draw but
/// the next spec's stream is independent anyway.
pub fn apply_augmentations(
    clip: &AudioClip,
    specs: &[AugmentSpec],
    rng_seed: u64,
    sample_index: u64,
) -> AudioClip {
    let mut out = clip.clone();
    for (position, spec) in specs.iter().enumerate() {
        let key = mix_key(&[rng_seed, sample_index, position as u64]);
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let gate: f64 = rng.gen_range(0.0..1.0);
        if gate >= spec.probability {
            continue;
        }
        let value = if spec.low == spec.high {
            spec.low
        } else {
            rng.gen_range(spec.low..=spec.high)
        };
        out = match spec.kind {
            AugmentKind::Gain => apply_gain(&out, value),
            AugmentKind::Noise => apply_noise(&out, value, &mut rng),
            AugmentKind::Tempo => apply_tempo(&out, value),
        };
    }
    out
}
