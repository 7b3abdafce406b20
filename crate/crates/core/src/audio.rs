//! WAV decode/encode, mono mixdown, and sample-rate conversion.
//!
//! The pipeline's canonical audio format is PCM s16le, mono, 16000 Hz;
//! [`decode_wav`] accepts any integer/float PCM layout and [`resample`]
//! brings clips to the canonical rate.

use std::f64::consts::PI;

use thiserror::Error;

/// Canonical training sample rate.
pub const CANONICAL_RATE_HZ: u32 = 16_000;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("truncated data: declared {declared} bytes, found {actual}")]
    TruncatedData { declared: usize, actual: usize },
}

/// Mono sample sequence with its sample rate. Samples always sit in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate_hz: u32,
}

impl AudioClip {
    /// Clamps every sample into [-1, 1] so the invariant holds unconditionally.
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Self {
        assert!(sample_rate_hz > 0, "sample rate must be positive");
        let samples = samples.into_iter().map(|s| s.clamp(-1.0, 1.0)).collect();
        AudioClip {
            samples,
            sample_rate_hz,
        }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }
}

// ---------------------------------------------------------------------------
// WAV parsing
// ---------------------------------------------------------------------------

const FORMAT_PCM: u16 = 1;
const FORMAT_IEEE_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

fn rd_u16(bytes: &[u8], at: usize) -> Result<u16, AudioError> {
    bytes
        .get(at..at + 2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .ok_or_else(|| AudioError::MalformedHeader("unexpected end of header".into()))
}

fn rd_u32(bytes: &[u8], at: usize) -> Result<u32, AudioError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| AudioError::MalformedHeader("unexpected end of header".into()))
}

struct WavFormat {
    format_tag: u16,
    channels: u16,
    sample_rate: u32,
    bits_per_sample: u16,
}

/// Decodes a RIFF/WAVE byte stream into a mono [`AudioClip`].
///
/// Integer PCM (8/16/24/32-bit) and 32-bit float layouts are accepted at any
/// channel count and rate; multi-channel input is mixed down by the per-frame
/// arithmetic mean. 16-bit sample `v` maps to `v / 32768`.
pub fn decode_wav(bytes: &[u8]) -> Result<AudioClip, AudioError> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(AudioError::MalformedHeader("not a RIFF/WAVE file".into()));
    }

    let mut fmt: Option<WavFormat> = None;
    let mut pos = 12;
    while pos + 8 <= bytes.len() {
        let chunk_id = &bytes[pos..pos + 4];
        let chunk_len = rd_u32(bytes, pos + 4)? as usize;
        let body = pos + 8;
        match chunk_id {
            b"fmt " => {
                if chunk_len < 16 {
                    return Err(AudioError::MalformedHeader("fmt chunk too short".into()));
                }
                let mut format_tag = rd_u16(bytes, body)?;
                let channels = rd_u16(bytes, body + 2)?;
                let sample_rate = rd_u32(bytes, body + 4)?;
                let bits_per_sample = rd_u16(bytes, body + 14)?;
                if format_tag == FORMAT_EXTENSIBLE {
                    // the first two bytes of the SubFormat GUID carry the
                    // underlying format tag
                    if chunk_len < 40 {
                        return Err(AudioError::MalformedHeader(
                            "extensible fmt chunk too short".into(),
                        ));
                    }
                    format_tag = rd_u16(bytes, body + 24)?;
                }
                if channels == 0 {
                    return Err(AudioError::MalformedHeader("zero channels".into()));
                }
                if sample_rate == 0 {
                    return Err(AudioError::MalformedHeader("zero sample rate".into()));
                }
                fmt = Some(WavFormat {
                    format_tag,
                    channels,
                    sample_rate,
                    bits_per_sample,
                });
            }
            b"data" => {
                let fmt = fmt.as_ref().ok_or_else(|| {
                    AudioError::MalformedHeader("data chunk before fmt chunk".into())
                })?;
                let available = bytes.len().saturating_sub(body);
                if chunk_len > available {
                    return Err(AudioError::TruncatedData {
                        declared: chunk_len,
                        actual: available,
                    });
                }
                return decode_data(&bytes[body..body + chunk_len], fmt);
            }
            _ => {}
        }
        // chunks are word-aligned
        pos = body + chunk_len + (chunk_len & 1);
    }
    Err(AudioError::MalformedHeader("no data chunk".into()))
}

fn decode_data(data: &[u8], fmt: &WavFormat) -> Result<AudioClip, AudioError> {
    let sample_bytes = match (fmt.format_tag, fmt.bits_per_sample) {
        (FORMAT_PCM, 8) => 1,
        (FORMAT_PCM, 16) => 2,
        (FORMAT_PCM, 24) => 3,
        (FORMAT_PCM, 32) => 4,
        (FORMAT_IEEE_FLOAT, 32) => 4,
        (FORMAT_PCM, bits) => {
            return Err(AudioError::UnsupportedEncoding(format!(
                "{bits}-bit integer PCM"
            )))
        }
        (FORMAT_IEEE_FLOAT, bits) => {
            return Err(AudioError::UnsupportedEncoding(format!("{bits}-bit float")))
        }
        (tag, _) => {
            return Err(AudioError::UnsupportedEncoding(format!(
                "format tag 0x{tag:04x} (compressed codecs are not handled)"
            )))
        }
    };

    let channels = fmt.channels as usize;
    let frame_bytes = sample_bytes * channels;
    let n_frames = data.len() / frame_bytes;
    let mut samples = Vec::with_capacity(n_frames);
    let inv_channels = 1.0 / channels as f64;

    for f in 0..n_frames {
        let mut acc = 0.0;
        for c in 0..channels {
            let at = f * frame_bytes + c * sample_bytes;
            let v = match (fmt.format_tag, sample_bytes) {
                (FORMAT_PCM, 1) => (data[at] as f64 - 128.0) / 128.0,
                (FORMAT_PCM, 2) => {
                    i16::from_le_bytes([data[at], data[at + 1]]) as f64 / 32768.0
                }
                (FORMAT_PCM, 3) => {
                    let raw = (data[at] as i32)
                        | ((data[at + 1] as i32) << 8)
                        | ((data[at + 2] as i8 as i32) << 16);
                    raw as f64 / 8_388_608.0
                }
                (FORMAT_PCM, 4) => {
                    i32::from_le_bytes([data[at], data[at + 1], data[at + 2], data[at + 3]])
                        as f64
                        / 2_147_483_648.0
                }
                (FORMAT_IEEE_FLOAT, 4) => f32::from_le_bytes([
                    data[at],
                    data[at + 1],
                    data[at + 2],
                    data[at + 3],
                ]) as f64,
                _ => unreachable!(),
            };
            acc += v;
        }
        samples.push(acc * inv_channels);
    }

    // float input may exceed full scale; AudioClip::new clamps
    Ok(AudioClip::new(samples, fmt.sample_rate))
}

/// Encodes a clip as 16-bit little-endian PCM mono WAV at the clip's rate.
pub fn encode_wav(clip: &AudioClip) -> Vec<u8> {
    let n = clip.samples.len();
    let data_len = (n * 2) as u32;
    let mut out = Vec::with_capacity(44 + n * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&FORMAT_PCM.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&clip.sample_rate_hz.to_le_bytes());
    out.extend_from_slice(&(clip.sample_rate_hz * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits per sample
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in &clip.samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

/// Zeroth-order modified Bessel function of the first kind (series form).
fn bessel_i0(x: f64) -> f64 {
    let half = x / 2.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..=40 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-18 {
            break;
        }
    }
    sum
}

const TAPS_PER_PHASE: usize = 64;
const KAISER_BETA: f64 = 8.6;

/// Windowed-sinc lowpass prototype for an L-phase polyphase filter.
///
/// Length 64·L + 1 (odd, symmetric) so the group delay is an integer number
/// of input samples. `cutoff` is given as a fraction of the input rate.
fn design_prototype(upsample: usize, cutoff: f64) -> Vec<f64> {
    let n = TAPS_PER_PHASE * upsample + 1;
    let center = ((n - 1) / 2) as f64;
    let inv_i0_beta = 1.0 / bessel_i0(KAISER_BETA);
    let mut taps = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 - center; // tap offset in upsampled samples
        let y = 2.0 * cutoff * t / upsample as f64;
        let sinc = if y == 0.0 { 1.0 } else { (PI * y).sin() / (PI * y) };
        let r = t / center;
        let w = bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) * inv_i0_beta;
        taps.push(sinc * w);
    }
    // Zero-stuffed upsampling needs passband gain L; scaling the prototype so
    // its sum is L gives each of the L phases a DC gain of ~1.
    let dc: f64 = taps.iter().sum();
    let gain = upsample as f64 / dc;
    for t in &mut taps {
        *t *= gain;
    }
    taps
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Converts `clip` to `target_rate_hz` with a polyphase windowed-sinc FIR
/// (Kaiser window, anti-alias cutoff at 0.45 of the lower Nyquist).
///
/// Equal rates return the clip unchanged. The output length is
/// `round(n_in * target / source)`.
pub fn resample(clip: &AudioClip, target_rate_hz: u32) -> AudioClip {
    assert!(target_rate_hz > 0, "target rate must be positive");
    if target_rate_hz == clip.sample_rate_hz {
        return clip.clone();
    }

    let src = clip.sample_rate_hz as u64;
    let dst = target_rate_hz as u64;
    let g = gcd(src, dst);
    let up = (dst / g) as usize; // L
    let down = (src / g) as usize; // M

    let n_in = clip.samples.len();
    // round(n_in * L / M) in integer arithmetic, rounding half away from zero
    let n_out = ((n_in as u64 * up as u64 + down as u64 / 2) / down as u64) as usize;
    if n_in == 0 {
        return AudioClip {
            samples: Vec::new(),
            sample_rate_hz: target_rate_hz,
        };
    }

    // cutoff at 0.45 of the lower Nyquist, as a fraction of the input rate
    let lower_nyquist = 0.5 * (src.min(dst) as f64) / src as f64;
    let cutoff = 0.45 * lower_nyquist;
    let taps = design_prototype(up, cutoff);
    let half_input_span = TAPS_PER_PHASE / 2; // prototype delay in input samples

    let x = &clip.samples;
    let mut out = Vec::with_capacity(n_out);
    for j in 0..n_out {
        let stuffed_pos = j * down; // position in the zero-stuffed domain
        let phase = stuffed_pos % up;
        let base = stuffed_pos / up + half_input_span;
        let mut acc = 0.0;
        let mut m = phase;
        let mut k = 0usize;
        while m < taps.len() {
            let idx = base as isize - k as isize;
            if idx >= 0 {
                if let Some(&s) = x.get(idx as usize) {
                    acc += taps[m] * s;
                }
            }
            m += up;
            k += 1;
        }
        out.push(acc.clamp(-1.0, 1.0));
    }

    AudioClip {
        samples: out,
        sample_rate_hz: target_rate_hz,
    }
}
