//! Edit-distance metrics, per-utterance scoring, and evaluation reports.
//!
//! WER divides word-level edit distance by the reference word count and CER
//! divides character-level distance by the reference character count, so
//! either may exceed 1.0 when the hypothesis is longer than the reference.

use crate::audio::{decode_wav, resample, AudioClip, AudioError, CANONICAL_RATE_HZ};
use crate::ctc::{beam_decode, ctc_loss_grad, greedy_decode, BeamConfig, CtcError};
use crate::features::{stack_context, FeatureError, MfccConfig, MfccPlan};
use crate::manifest::{read_manifest, resolve_audio_path, ManifestError};
use crate::model::{forward, ModelError, ModelParams};
use crate::text::{encode_labels, normalize_transcript, Alphabet, TextError};
use serde::Serialize;
use std::fs;
use std::io;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("reference is empty")]
    EmptyReference,
    #[error("no utterances were scored")]
    NoRecords,
    #[error("incompatible configuration: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("audio error: {0}")]
    Audio(#[from] AudioError),
    #[error("feature error: {0}")]
    Feature(#[from] FeatureError),
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("ctc error: {0}")]
    Ctc(#[from] CtcError),
    #[error("text error: {0}")]
    Text(#[from] TextError),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

/// Minimum insertions, deletions, and substitutions turning `a` into `b`.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let mut prev: Vec<usize> = (0..=short.len()).collect();
    let mut curr = vec![0usize; short.len() + 1];
    for (i, lv) in long.iter().enumerate() {
        curr[0] = i + 1;
        for (j, sv) in short.iter().enumerate() {
            let sub = prev[j] + usize::from(lv != sv);
            curr[j + 1] = sub.min(prev[j + 1] + 1).min(curr[j] + 1);
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[short.len()]
}

/// Word-level edit distance over the reference word count.
pub fn word_error_rate(reference: &str, hypothesis: &str) -> Result<f64, EvalError> {
    let ref_tokens: Vec<&str> = reference.split_whitespace().collect();
    if ref_tokens.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    let hyp_tokens: Vec<&str> = hypothesis.split_whitespace().collect();
    Ok(edit_distance(&ref_tokens, &hyp_tokens) as f64 / ref_tokens.len() as f64)
}

/// Character-level edit distance (spaces count) over the reference length.
pub fn char_error_rate(reference: &str, hypothesis: &str) -> Result<f64, EvalError> {
    let ref_chars: Vec<char> = reference.chars().collect();
    if ref_chars.is_empty() {
        return Err(EvalError::EmptyReference);
    }
    let hyp_chars: Vec<char> = hypothesis.chars().collect();
    Ok(edit_distance(&ref_chars, &hyp_chars) as f64 / ref_chars.len() as f64)
}

/// Scores for one utterance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRecord {
    pub wav_filename: String,
    pub reference: String,
    pub hypothesis: String,
    pub wer: f64,
    pub cer: f64,
    pub loss: f64,
}

/// Corpus-level summary. `best`, `median`, and `worst` rank records by
/// (WER, CER, filename); `median` is element floor((n-1)/2) of that order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub mean_wer: f64,
    pub mean_cer: f64,
    pub mean_loss: f64,
    pub best: EvalRecord,
    pub median: EvalRecord,
    pub worst: EvalRecord,
    pub count: usize,
    pub decoder: String,
}

/// Which decoder produces hypotheses during evaluation.
pub enum EvalDecoder<'a> {
    Greedy,
    Beam(BeamConfig<'a>),
}

impl EvalDecoder<'_> {
    pub fn label(&self) -> &'static str {
        match self {
            EvalDecoder::Greedy => "greedy",
            EvalDecoder::Beam(_) => "beam",
        }
    }
}

/// Summarizes records into a report. Records are not reordered; ranking is
/// internal.
pub fn aggregate(records: &[EvalRecord], decoder: &str) -> Result<EvalReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::NoRecords);
    }
    let n = records.len() as f64;
    let mean_wer = records.iter().map(|r| r.wer).sum::<f64>() / n;
    let mean_cer = records.iter().map(|r| r.cer).sum::<f64>() / n;
    let mean_loss = records.iter().map(|r| r.loss).sum::<f64>() / n;
    let mut ranked: Vec<&EvalRecord> = records.iter().collect();
    ranked.sort_by(|a, b| {
        a.wer
            .partial_cmp(&b.wer)
            .expect("finite wer")
            .then(a.cer.partial_cmp(&b.cer).expect("finite cer"))
            .then_with(|| a.wav_filename.cmp(&b.wav_filename))
    });
    let median_index = (ranked.len() - 1) / 2;
    Ok(EvalReport {
        mean_wer,
        mean_cer,
        mean_loss,
        best: ranked[0].clone(),
        median: ranked[median_index].clone(),
        worst: ranked[ranked.len() - 1].clone(),
        count: records.len(),
        decoder: decoder.to_string(),
    })
}

fn record_line(role: &str, r: &EvalRecord) -> String {
    format!(
        "{role} {} WER {:.6} CER {:.6}\n",
        r.wav_filename, r.wer, r.cer
    )
}

/// Plain-text report.
pub fn render_text(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("utterances {}\n", report.count));
    out.push_str(&format!("decoder {}\n", report.decoder));
    out.push_str(&format!("mean WER {:.6}\n", report.mean_wer));
    out.push_str(&format!("mean CER {:.6}\n", report.mean_cer));
    out.push_str(&format!("mean loss {:.6}\n", report.mean_loss));
    out.push_str(&record_line("best", &report.best));
    out.push_str(&record_line("median", &report.median));
    out.push_str(&record_line("worst", &report.worst));
    out
}

/// JSON report (stable key order).
pub fn render_json(report: &EvalReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

/// Per-utterance CSV with header
/// `wav_filename,wer,cer,loss,reference,hypothesis`.
pub fn write_records_csv(records: &[EvalRecord], path: &Path) -> Result<(), EvalError> {
    let mut writer = csv::Writer::from_path(path).map_err(csv_io)?;
    writer
        .write_record(["wav_filename", "wer", "cer", "loss", "reference", "hypothesis"])
        .map_err(csv_io)?;
    for r in records {
        writer
            .write_record([
                r.wav_filename.as_str(),
                &format!("{:.6}", r.wer),
                &format!("{:.6}", r.cer),
                &format!("{:.6}", r.loss),
                r.reference.as_str(),
                r.hypothesis.as_str(),
            ])
            .map_err(csv_io)?;
    }
    writer.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> EvalError {
    EvalError::Io(io::Error::new(io::ErrorKind::InvalidData, e))
}

fn load_canonical(path: &Path) -> Result<AudioClip, EvalError> {
    let bytes = fs::read(path)?;
    let clip = decode_wav(&bytes)?;
    if clip.sample_rate_hz() == CANONICAL_RATE_HZ {
        Ok(clip)
    } else {
        Ok(resample(&clip, CANONICAL_RATE_HZ))
    }
}

/// Scores every usable row of a manifest with a loaded model. Rows whose
/// transcript the alphabet cannot encode, or whose audio is too short for
/// a feasible CTC alignment, are reported through `warn` and skipped.
pub fn evaluate_manifest(
    manifest_path: &Path,
    params: &ModelParams,
    alphabet: &Alphabet,
    mfcc: &MfccConfig,
    decoder: &EvalDecoder,
    warn: &mut dyn FnMut(&str),
) -> Result<(Vec<EvalRecord>, EvalReport), EvalError> {
    if params.cfg.n_input != mfcc.input_width() {
        return Err(EvalError::Incompatible(format!(
            "model expects {} inputs but features provide {}",
            params.cfg.n_input,
            mfcc.input_width()
        )));
    }
    if params.cfg.n_output != alphabet.n_outputs() {
        return Err(EvalError::Incompatible(format!(
            "model emits {} classes but alphabet needs {}",
            params.cfg.n_output,
            alphabet.n_outputs()
        )));
    }
    let plan = MfccPlan::new(mfcc, CANONICAL_RATE_HZ)?;
    let rows = read_manifest(manifest_path)?;
    let mut records = Vec::new();
    for row in &rows {
        let reference = normalize_transcript(&row.transcript);
        let labels = match encode_labels(&reference, alphabet) {
            Ok(l) => l,
            Err(_) => {
                warn(&format!("SKIP {} transcript-outside-alphabet", row.wav_filename));
                continue;
            }
        };
        let clip = load_canonical(&resolve_audio_path(manifest_path, row))?;
        let features = plan.compute(&clip)?;
        let input = stack_context(&features.frames, mfcc.context);
        let (_, cache) = forward(params, &input)?;
        let logprobs = cache.log_probs();
        let (loss, _) = match ctc_loss_grad(&logprobs, labels.ids(), alphabet.blank_index()) {
            Ok(r) => r,
            Err(CtcError::Infeasible { .. }) => {
                warn(&format!("SKIP {} infeasible-alignment", row.wav_filename));
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let raw_hyp = match decoder {
            EvalDecoder::Greedy => greedy_decode(&logprobs, alphabet),
            EvalDecoder::Beam(cfg) => beam_decode(&logprobs, cfg, alphabet),
        };
        let hypothesis = normalize_transcript(&raw_hyp);
        let wer = word_error_rate(&reference, &hypothesis)?;
        let cer = char_error_rate(&reference, &hypothesis)?;
        records.push(EvalRecord {
            wav_filename: row.wav_filename.clone(),
            reference,
            hypothesis,
            wer,
            cer,
            loss,
        });
    }
    let report = aggregate(&records, decoder.label())?;
    Ok((records, report))
}
