//! CTC loss via the forward-backward recursion over the blank-augmented
//! label sequence, plus greedy and prefix-beam decoders.
//!
//! Everything runs in natural-log space; probability-domain code appears
//! only in tests, where brute-force enumeration is affordable.

use std::cmp::Ordering;
use std::collections::HashMap;

use thiserror::Error;

use crate::linalg::{logsumexp2, Mat};
use crate::lm::NgramModel;
use crate::text::Alphabet;

#[derive(Debug, Error)]
pub enum CtcError {
    #[error("label sequence needs at least {required} frames, matrix has {actual}")]
    Infeasible { required: usize, actual: usize },
    #[error("label id {0} is out of range or equals the blank id")]
    InvalidLabel(usize),
}

/// Beam decoder settings. `lm_weight` scales the character language model's
/// log probability and `insertion_bonus` rewards each emitted character,
/// countering the LM's bias toward short prefixes.
#[derive(Debug, Clone)]
pub struct BeamConfig<'a> {
    pub beam_width: usize,
    pub lm_weight: f64,
    pub insertion_bonus: f64,
    pub lm: Option<&'a NgramModel>,
}

impl Default for BeamConfig<'_> {
    fn default() -> Self {
        BeamConfig {
            beam_width: 32,
            lm_weight: 0.75,
            insertion_bonus: 1.0,
            lm: None,
        }
    }
}

fn extended_sequence(labels: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * labels.len() + 1);
    ext.push(blank);
    for &l in labels {
        ext.push(l);
        ext.push(blank);
    }
    ext
}

/// Minimum frame count that admits any alignment: one frame per label plus
/// one separating blank per adjacent repeat.
fn min_frames(labels: &[usize]) -> usize {
    let repeats = labels.windows(2).filter(|w| w[0] == w[1]).count();
    labels.len() + repeats
}

/// CTC loss and its exact gradient with respect to pre-softmax logits.
///
/// `logprobs` rows are per-frame log probability distributions over the
/// alphabet plus blank. The gradient is softmax minus the label posterior,
/// so rows of the returned matrix sum to 0.
pub fn ctc_loss_grad(
    logprobs: &Mat,
    labels: &[usize],
    blank: usize,
) -> Result<(f64, Mat), CtcError> {
    let t_len = logprobs.rows();
    let n_out = logprobs.cols();
    if blank >= n_out {
        return Err(CtcError::InvalidLabel(blank));
    }
    for &l in labels {
        if l >= n_out || l == blank {
            return Err(CtcError::InvalidLabel(l));
        }
    }
    let required = min_frames(labels);
    if t_len < required {
        return Err(CtcError::Infeasible {
            required,
            actual: t_len,
        });
    }
    if t_len == 0 {
        return Ok((0.0, Mat::zeros(0, n_out)));
    }
    #[cfg(debug_assertions)]
    for t in 0..t_len {
        let lse = crate::linalg::logsumexp(logprobs.row(t));
        debug_assert!(lse.abs() < 1e-6, "row {t} is not a log distribution");
    }

    let ext = extended_sequence(labels, blank);
    let s_len = ext.len();
    let neg = f64::NEG_INFINITY;

    // forward: alpha[t][s] includes the emission at t
    let mut alpha = Mat::zeros(t_len, s_len);
    alpha.fill(neg);
    *alpha.at_mut(0, 0) = logprobs.at(0, ext[0]);
    if s_len > 1 {
        *alpha.at_mut(0, 1) = logprobs.at(0, ext[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut m = alpha.at(t - 1, s);
            if s >= 1 {
                m = logsumexp2(m, alpha.at(t - 1, s - 1));
            }
            if s >= 2 && ext[s] != blank && ext[s] != ext[s - 2] {
                m = logsumexp2(m, alpha.at(t - 1, s - 2));
            }
            if m != neg {
                *alpha.at_mut(t, s) = m + logprobs.at(t, ext[s]);
            }
        }
    }
    let mut log_p = alpha.at(t_len - 1, s_len - 1);
    if s_len > 1 {
        log_p = logsumexp2(log_p, alpha.at(t_len - 1, s_len - 2));
    }
    let loss = (-log_p).max(0.0);

    // backward: beta[t][s] also includes the emission at t, so the posterior
    // divides one emission factor back out
    let mut beta = Mat::zeros(t_len, s_len);
    beta.fill(neg);
    *beta.at_mut(t_len - 1, s_len - 1) = logprobs.at(t_len - 1, ext[s_len - 1]);
    if s_len > 1 {
        *beta.at_mut(t_len - 1, s_len - 2) = logprobs.at(t_len - 1, ext[s_len - 2]);
    }
    for t in (0..t_len.saturating_sub(1)).rev() {
        for s in 0..s_len {
            let mut m = beta.at(t + 1, s);
            if s + 1 < s_len {
                m = logsumexp2(m, beta.at(t + 1, s + 1));
            }
            if s + 2 < s_len && ext[s + 2] != blank && ext[s + 2] != ext[s] {
                m = logsumexp2(m, beta.at(t + 1, s + 2));
            }
            if m != neg {
                *beta.at_mut(t, s) = m + logprobs.at(t, ext[s]);
            }
        }
    }

    let mut grad = Mat::zeros(t_len, n_out);
    for t in 0..t_len {
        let row = grad.row_mut(t);
        for (k, g) in row.iter_mut().enumerate() {
            *g = logprobs.at(t, k).exp();
        }
        if log_p == neg {
            continue;
        }
        for s in 0..s_len {
            let a = alpha.at(t, s);
            let b = beta.at(t, s);
            if a == neg || b == neg {
                continue;
            }
            let emit = logprobs.at(t, ext[s]);
            row[ext[s]] -= (a + b - emit - log_p).exp();
        }
    }
    Ok((loss, grad))
}

/// Per-frame argmax ids with ties broken toward the lowest index.
fn argmax_path(logprobs: &Mat) -> Vec<usize> {
    (0..logprobs.rows())
        .map(|t| {
            let row = logprobs.row(t);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Collapses consecutive repeats, then removes blanks.
fn collapse_path(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &id in path {
        if Some(id) != prev && id != blank {
            out.push(id);
        }
        prev = Some(id);
    }
    out
}

/// Best-path decoding: frame argmax, collapse repeats, strip blanks.
pub fn greedy_decode(logprobs: &Mat, alphabet: &Alphabet) -> String {
    let ids = collapse_path(&argmax_path(logprobs), alphabet.blank_index());
    ids.iter()
        .filter_map(|&id| alphabet.char_of(id))
        .collect()
}

#[derive(Clone, Copy)]
enum Move {
    Blank,
    Repeat,
    Extend(usize),
}

struct Entry {
    pb: f64,
    pnb: f64,
    lm: f64,
}

impl Entry {
    fn total(&self) -> f64 {
        logsumexp2(self.pb, self.pnb)
    }
}

/// One (prefix, move) expansion candidate considered for pruning.
struct Cand {
    score: f64,
    /// Emitted symbol for tie-breaking; blank maps past every symbol id.
    sym_key: usize,
    entry: usize,
    mv: Move,
    mass: f64,
    lm: f64,
}

/// Lexicographic order of the prefixes two candidates would produce,
/// without materializing them.
fn target_cmp(beam: &[(Vec<usize>, Entry)], a: &Cand, b: &Cand) -> Ordering {
    target_iter(beam, a).cmp(target_iter(beam, b))
}

fn target_iter<'a>(beam: &'a [(Vec<usize>, Entry)], c: &Cand) -> impl Iterator<Item = usize> + 'a {
    let prefix = beam[c.entry].0.iter().copied();
    let ext = match c.mv {
        Move::Extend(sym) => Some(sym),
        _ => None,
    };
    prefix.chain(ext)
}

/// CTC prefix beam search with optional character-LM fusion.
///
/// Each frame expands every live prefix into (prefix, move) candidates,
/// prunes the candidates to the top `beam_width` by combined score, and only
/// then merges surviving masses. Pruning at move granularity keeps width 1
/// exactly equal to greedy decoding, while a width that retains every move
/// computes exact prefix marginals.
///
/// Combined score: log P_ctc + lm_weight * log P_lm + insertion_bonus * len.
pub fn beam_decode(logprobs: &Mat, cfg: &BeamConfig, alphabet: &Alphabet) -> String {
    let blank = alphabet.blank_index();
    let n_sym = alphabet.len();
    let width = cfg.beam_width.max(1);

    let mut beam: Vec<(Vec<usize>, Entry)> = vec![(
        Vec::new(),
        Entry {
            pb: 0.0,
            pnb: f64::NEG_INFINITY,
            lm: 0.0,
        },
    )];

    for t in 0..logprobs.rows() {
        let row = logprobs.row(t);
        let mut cands: Vec<Cand> = Vec::with_capacity(beam.len() * (n_sym + 2));
        for (idx, (prefix, entry)) in beam.iter().enumerate() {
            let last = prefix.last().copied();
            let push = |cands: &mut Vec<Cand>, mv: Move, mass: f64, lm: f64, sym_key: usize, len: usize| {
                if mass == f64::NEG_INFINITY {
                    return;
                }
                let mut score = mass;
                if cfg.lm.is_some() {
                    score += cfg.lm_weight * lm;
                }
                score += cfg.insertion_bonus * len as f64;
                cands.push(Cand {
                    score,
                    sym_key,
                    entry: idx,
                    mv,
                    mass,
                    lm,
                });
            };
            push(
                &mut cands,
                Move::Blank,
                entry.total() + row[blank],
                entry.lm,
                n_sym,
                prefix.len(),
            );
            if let Some(c) = last {
                push(
                    &mut cands,
                    Move::Repeat,
                    entry.pnb + row[c],
                    entry.lm,
                    c,
                    prefix.len(),
                );
            }
            for c in 0..n_sym {
                let mass = if last == Some(c) {
                    entry.pb + row[c]
                } else {
                    entry.total() + row[c]
                };
                if mass == f64::NEG_INFINITY {
                    continue;
                }
                let lm = entry.lm
                    + cfg
                        .lm
                        .map(|m| m.log_prob_next(prefix, c))
                        .unwrap_or(0.0);
                push(&mut cands, Move::Extend(c), mass, lm, c, prefix.len() + 1);
            }
        }

        cands.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then(a.sym_key.cmp(&b.sym_key))
                .then_with(|| target_cmp(&beam, a, b))
        });
        cands.truncate(width);

        let mut next: HashMap<Vec<usize>, Entry> = HashMap::new();
        for c in &cands {
            let (prefix, _) = &beam[c.entry];
            let target = match c.mv {
                Move::Blank | Move::Repeat => prefix.clone(),
                Move::Extend(sym) => {
                    let mut p = prefix.clone();
                    p.push(sym);
                    p
                }
            };
            let slot = next.entry(target).or_insert(Entry {
                pb: f64::NEG_INFINITY,
                pnb: f64::NEG_INFINITY,
                lm: c.lm,
            });
            match c.mv {
                Move::Blank => slot.pb = logsumexp2(slot.pb, c.mass),
                Move::Repeat | Move::Extend(_) => slot.pnb = logsumexp2(slot.pnb, c.mass),
            }
        }
        if next.is_empty() {
            break;
        }
        beam = next.into_iter().collect();
        beam.sort_by(|a, b| a.0.cmp(&b.0));
    }

    let mut best: Option<(&Vec<usize>, f64)> = None;
    for (prefix, entry) in &beam {
        let mut score = entry.total();
        if cfg.lm.is_some() {
            score += cfg.lm_weight * entry.lm;
        }
        score += cfg.insertion_bonus * prefix.len() as f64;
        let better = match best {
            None => true,
            Some((bp, bs)) => {
                score > bs || (score == bs && prefix.as_slice() < bp.as_slice())
            }
        };
        if better {
            best = Some((prefix, score));
        }
    }
    best.map(|(prefix, _)| {
        prefix
            .iter()
            .filter_map(|&id| alphabet.char_of(id))
            .collect()
    })
    .unwrap_or_default()
}
