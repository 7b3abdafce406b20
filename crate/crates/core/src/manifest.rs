//! Corpus scanning, manifest CSV files, and deterministic splits.
//!
//! A manifest row references a converted canonical WAV by a path relative
//! to the manifest's own directory, so a prepared tree can be moved or
//! renamed without invalidating its CSVs. Split assignment hashes only
//! (seed, wav_filename), which keeps every existing assignment fixed when
//! new utterances are added to the corpus.

use crate::audio::{decode_wav, encode_wav, resample, CANONICAL_RATE_HZ};
use crate::text::normalize_transcript;
use std::collections::BTreeSet;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("transcript index not found: {0}")]
    MissingIndex(PathBuf),
    #[error("no usable utterances in corpus")]
    NoUsableUtterances,
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("bad manifest {path}: line {line}: {reason}")]
    BadManifest {
        path: PathBuf,
        line: u64,
        reason: String,
    },
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

/// One utterance: converted audio path (relative to the manifest file),
/// its on-disk byte size, and the normalized transcript.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub wav_filename: String,
    pub wav_filesize: u64,
    pub transcript: String,
}

/// Fractions must be in [0, 1] and sum to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub dev_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), ManifestError> {
        let parts = [
            ("train", self.train_fraction),
            ("dev", self.dev_fraction),
            ("test", self.test_fraction),
        ];
        for (name, f) in parts {
            if !(0.0..=1.0).contains(&f) || !f.is_finite() {
                return Err(ManifestError::InvalidSplit(format!(
                    "{name} fraction {f} outside [0, 1]"
                )));
            }
        }
        let sum = self.train_fraction + self.dev_fraction + self.test_fraction;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(ManifestError::InvalidSplit(format!(
                "fractions sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }
}

const FNV_OFFSET: u64 = 14_695_981_039_346_656_037;
const FNV_PRIME: u64 = 1_099_511_628_211;

/// 64-bit FNV-1a over a byte string.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Maps a row to [0, 1) from the hash of (seed || wav_filename).
fn split_position(seed: u64, wav_filename: &str) -> f64 {
    let mut bytes = Vec::with_capacity(8 + wav_filename.len());
    bytes.extend_from_slice(&seed.to_le_bytes());
    bytes.extend_from_slice(wav_filename.as_bytes());
    let h = fnv1a64(&bytes);
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Subdirectory of the output tree that receives converted audio.
pub const AUDIO_SUBDIR: &str = "audio";

/// Reads the transcript index, converts every usable utterance's WAV into
/// `out_dir/audio/` at the canonical rate, and returns rows sorted by
/// filename. Unusable utterances are reported through `warn` as
/// `SKIP <id> <reason>` and dropped.
pub fn scan_corpus(
    corpus_root: &Path,
    index_path: &Path,
    out_dir: &Path,
    warn: &mut dyn FnMut(&str),
) -> Result<Vec<ManifestRow>, ManifestError> {
    let index_text = fs::read_to_string(index_path)
        .map_err(|_| ManifestError::MissingIndex(index_path.to_path_buf()))?;
    let audio_dir = out_dir.join(AUDIO_SUBDIR);
    fs::create_dir_all(&audio_dir)?;

    let mut seen = BTreeSet::new();
    let mut rows = Vec::new();
    for (line_no, line) in index_text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let Some((id, raw)) = line.split_once('\t') else {
            warn(&format!("SKIP line-{} malformed-index-line", line_no + 1));
            continue;
        };
        let id = id.trim();
        if id.is_empty() {
            warn(&format!("SKIP line-{} malformed-index-line", line_no + 1));
            continue;
        }
        if !seen.insert(id.to_string()) {
            warn(&format!("SKIP {id} duplicate-id"));
            continue;
        }
        let transcript = normalize_transcript(raw);
        if transcript.is_empty() {
            warn(&format!("SKIP {id} empty-transcript"));
            continue;
        }
        let wav_path = corpus_root.join(format!("{id}.wav"));
        let bytes = match fs::read(&wav_path) {
            Ok(b) => b,
            Err(_) => {
                warn(&format!("SKIP {id} missing-audio"));
                continue;
            }
        };
        let clip = match decode_wav(&bytes) {
            Ok(c) => c,
            Err(e) => {
                warn(&format!("SKIP {id} bad-audio ({e})"));
                continue;
            }
        };
        let canonical = if clip.sample_rate_hz() == CANONICAL_RATE_HZ {
            clip
        } else {
            resample(&clip, CANONICAL_RATE_HZ)
        };
        let encoded = encode_wav(&canonical);
        let out_name = format!("{AUDIO_SUBDIR}/{id}.wav");
        fs::write(audio_dir.join(format!("{id}.wav")), &encoded)?;
        rows.push(ManifestRow {
            wav_filename: out_name,
            wav_filesize: encoded.len() as u64,
            transcript,
        });
    }
    if rows.is_empty() {
        return Err(ManifestError::NoUsableUtterances);
    }
    rows.sort_by(|a, b| a.wav_filename.cmp(&b.wav_filename));
    Ok(rows)
}

/// Partitions rows into (train, dev, test). Assignment depends only on
/// (spec.seed, row.wav_filename); input order is preserved within each part.
pub fn split_corpus(
    rows: &[ManifestRow],
    spec: &SplitSpec,
) -> Result<(Vec<ManifestRow>, Vec<ManifestRow>, Vec<ManifestRow>), ManifestError> {
    spec.validate()?;
    let mut train = Vec::new();
    let mut dev = Vec::new();
    let mut test = Vec::new();
    let dev_edge = spec.train_fraction + spec.dev_fraction;
    for row in rows {
        let u = split_position(spec.seed, &row.wav_filename);
        if u < spec.train_fraction {
            train.push(row.clone());
        } else if u < dev_edge {
            dev.push(row.clone());
        } else {
            test.push(row.clone());
        }
    }
    Ok((train, dev, test))
}

const HEADER: [&str; 3] = ["wav_filename", "wav_filesize", "transcript"];

/// Writes rows in input order as RFC 4180 CSV with LF line endings.
pub fn write_manifest(rows: &[ManifestRow], path: &Path) -> Result<(), ManifestError> {
    let mut writer = csv::Writer::from_path(path).map_err(csv_io)?;
    writer.write_record(HEADER).map_err(csv_io)?;
    for row in rows {
        writer
            .write_record([
                row.wav_filename.as_str(),
                &row.wav_filesize.to_string(),
                row.transcript.as_str(),
            ])
            .map_err(csv_io)?;
    }
    writer.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> ManifestError {
    ManifestError::Io(io::Error::new(io::ErrorKind::InvalidData, e))
}

/// Reads a manifest written by [`write_manifest`], preserving row order.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>, ManifestError> {
    let bad = |line: u64, reason: String| ManifestError::BadManifest {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| bad(0, e.to_string()))?;
    {
        let headers = reader.headers().map_err(|e| bad(1, e.to_string()))?;
        if *headers != csv::StringRecord::from(HEADER.to_vec()) {
            return Err(bad(1, format!("unexpected header {headers:?}")));
        }
    }
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i as u64 + 2;
        let record = record.map_err(|e| bad(line, e.to_string()))?;
        if record.len() != 3 {
            return Err(bad(line, format!("expected 3 fields, got {}", record.len())));
        }
        let size = record[1]
            .parse::<u64>()
            .map_err(|_| bad(line, format!("bad wav_filesize `{}`", &record[1])))?;
        rows.push(ManifestRow {
            wav_filename: record[0].to_string(),
            wav_filesize: size,
            transcript: record[2].to_string(),
        });
    }
    Ok(rows)
}

/// Resolves a row's audio path against the directory containing `manifest`.
pub fn resolve_audio_path(manifest: &Path, row: &ManifestRow) -> PathBuf {
    manifest
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&row.wav_filename)
}

/// Re-checks every row of a manifest on disk. Returns one human-readable
/// violation per problem; an empty list means the manifest validates.
pub fn validate_manifest(path: &Path) -> Result<Vec<String>, ManifestError> {
    let rows = read_manifest(path)?;
    let mut violations = Vec::new();
    for row in &rows {
        let mut fail = |reason: String| violations.push(format!("{}: {reason}", row.wav_filename));
        if row.transcript.is_empty() {
            fail("empty transcript".to_string());
        } else if normalize_transcript(&row.transcript) != row.transcript {
            fail("transcript not normalized".to_string());
        }
        if row.wav_filesize == 0 {
            fail("zero wav_filesize".to_string());
        }
        let wav_path = resolve_audio_path(path, row);
        let bytes = match fs::read(&wav_path) {
            Ok(b) => b,
            Err(_) => {
                fail("audio file missing".to_string());
                continue;
            }
        };
        if bytes.len() as u64 != row.wav_filesize {
            fail(format!(
                "size mismatch: manifest {} vs disk {}",
                row.wav_filesize,
                bytes.len()
            ));
        }
        match decode_wav(&bytes) {
            Ok(clip) => {
                if clip.sample_rate_hz() != CANONICAL_RATE_HZ {
                    fail(format!(
                        "sample rate {} is not canonical {}",
                        clip.sample_rate_hz(),
                        CANONICAL_RATE_HZ
                    ));
                }
            }
            Err(e) => fail(format!("audio does not decode: {e}")),
        }
    }
    Ok(violations)
}
