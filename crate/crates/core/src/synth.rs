//! Synthetic tone-coded speech for fixtures and end-to-end tests.
//!
//! Each letter becomes a fixed-frequency tone burst and each space becomes
//! silence, so a small model can learn the mapping quickly and tests get a
//! corpus with known transcripts without shipping real recordings.

use crate::audio::{encode_wav, AudioClip};
use std::f64::consts::PI;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

/// Seconds of tone per character.
pub const TONE_SECS: f64 = 0.14;
/// Seconds of silence after every character.
pub const GAP_SECS: f64 = 0.06;
const AMPLITUDE: f64 = 0.4;
const FADE_SECS: f64 = 0.005;

/// Tone frequency for a character; letters spread 300..2800 Hz so every
/// fixture stays below the Nyquist limit of an 8 kHz source corpus.
fn char_freq_hz(c: char) -> Option<f64> {
    match c {
        'a'..='z' => Some(300.0 + 100.0 * (c as u32 - 'a' as u32) as f64),
        '\'' => Some(3000.0),
        _ => None,
    }
}

fn push_tone(samples: &mut Vec<f64>, freq_hz: f64, rate: u32, secs: f64) {
    let n = (secs * f64::from(rate)).round() as usize;
    let fade = ((FADE_SECS * f64::from(rate)).round() as usize).min(n / 2);
    for i in 0..n {
        let mut s = AMPLITUDE * (2.0 * PI * freq_hz * i as f64 / f64::from(rate)).sin();
        if i < fade {
            s *= 0.5 - 0.5 * (PI * i as f64 / fade as f64).cos();
        } else if i >= n - fade {
            let j = n - 1 - i;
            s *= 0.5 - 0.5 * (PI * j as f64 / fade as f64).cos();
        }
        samples.push(s);
    }
}

fn push_silence(samples: &mut Vec<f64>, rate: u32, secs: f64) {
    let n = (secs * f64::from(rate)).round() as usize;
    samples.extend(std::iter::repeat(0.0).take(n));
}

/// Renders normalized text as tone-coded audio at the given rate.
/// Characters outside [a-z' ] are skipped.
pub fn synth_utterance(text: &str, rate: u32) -> AudioClip {
    let mut samples = Vec::new();
    for c in text.chars() {
        if c == ' ' {
            push_silence(&mut samples, rate, TONE_SECS);
        } else if let Some(freq) = char_freq_hz(c) {
            push_tone(&mut samples, freq, rate, TONE_SECS);
        } else {
            continue;
        }
        push_silence(&mut samples, rate, GAP_SECS);
    }
    AudioClip::new(samples, rate)
}

/// Writes `<id>.wav` per utterance plus an `index.tsv` into `dir`.
/// Returns the index path, ready for corpus scanning.
pub fn write_fixture_corpus(
    dir: &Path,
    rate: u32,
    utterances: &[(&str, &str)],
) -> Result<PathBuf, io::Error> {
    fs::create_dir_all(dir)?;
    let mut index = String::new();
    for (id, text) in utterances {
        let clip = synth_utterance(text, rate);
        fs::write(dir.join(format!("{id}.wav")), encode_wav(&clip))?;
        index.push_str(&format!("{id}\t{text}\n"));
    }
    let index_path = dir.join("index.tsv");
    fs::write(&index_path, index)?;
    Ok(index_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{decode_wav, CANONICAL_RATE_HZ};

    #[test]
    fn utterance_length_follows_the_segment_grid() {
        let clip = synth_utterance("ab c", CANONICAL_RATE_HZ);
        let per_char = ((TONE_SECS + GAP_SECS) * 16_000.0).round() as usize;
        assert_eq!(clip.len(), 4 * per_char);
        assert_eq!(clip.sample_rate_hz(), CANONICAL_RATE_HZ);
    }

    #[test]
    fn spaces_are_silent() {
        let clip = synth_utterance("a a", CANONICAL_RATE_HZ);
        let per_char = ((TONE_SECS + GAP_SECS) * 16_000.0).round() as usize;
        let middle = &clip.samples()[per_char..2 * per_char];
        assert!(middle.iter().all(|&s| s == 0.0));
        let first_tone = &clip.samples()[..(TONE_SECS * 16_000.0) as usize];
        let rms =
            (first_tone.iter().map(|s| s * s).sum::<f64>() / first_tone.len() as f64).sqrt();
        assert!(rms > 0.1);
    }

    #[test]
    fn rendering_is_deterministic_and_bounded() {
        let a = synth_utterance("hello world", CANONICAL_RATE_HZ);
        let b = synth_utterance("hello world", CANONICAL_RATE_HZ);
        assert_eq!(a.samples(), b.samples());
        assert!(a.samples().iter().all(|&s| s.abs() <= 1.0));
        let c = synth_utterance("hello worlds", CANONICAL_RATE_HZ);
        assert_ne!(a.len(), c.len());
    }

    #[test]
    fn fixture_corpus_round_trips_through_wav() {
        let dir = tempfile::tempdir().unwrap();
        let index = write_fixture_corpus(dir.path(), 8_000, &[("u1", "ab"), ("u2", "ba")]).unwrap();
        let listing = std::fs::read_to_string(&index).unwrap();
        assert_eq!(listing, "u1\tab\nu2\tba\n");
        for id in ["u1", "u2"] {
            let bytes = std::fs::read(dir.path().join(format!("{id}.wav"))).unwrap();
            let clip = decode_wav(&bytes).unwrap();
            assert_eq!(clip.sample_rate_hz(), 8_000);
            assert!(clip.len() > 0);
        }
    }
}
