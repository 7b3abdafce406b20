//! Desk-scale end-to-end speech recognition toolkit.
//!
//! The pipeline runs from raw corpus files to evaluation reports:
//!
//! 1. [`audio`] decodes WAV files, mixes to mono, and resamples to 16 kHz.
//! 2. [`text`] normalizes transcripts and maintains the character alphabet.
//! 3. [`manifest`] pairs audio with transcripts and emits train/dev/test CSVs.
//! 4. [`features`] converts audio into MFCC matrices.
//! 5. [`model`] is a six-layer character network (dense stack, LSTM, softmax).
//! 6. [`ctc`] provides the CTC loss/gradient and greedy/beam decoders.
//! 7. [`lm`] is a character n-gram model for beam-search rescoring.
//! 8. [`augment`] applies probability-gated waveform augmentations.
//! 9. [`train`] runs the epoch loop with checkpointing and resume.
//! 10. [`eval`] computes WER/CER and renders corpus reports.

pub mod audio;
pub mod augment;
pub mod ctc;
pub mod eval;
pub mod features;
pub mod fft;
pub mod linalg;
pub mod lm;
pub mod manifest;
pub mod model;
pub mod seeding;
pub mod synth;
pub mod text;
pub mod train;
