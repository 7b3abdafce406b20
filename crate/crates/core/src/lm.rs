//! Character n-gram language model with add-k smoothing, used by the beam
//! decoder to rescore prefix extensions.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::text::Alphabet;

#[derive(Debug, Error)]
pub enum LmError {
    #[error("cannot train a language model on an empty corpus")]
    EmptyCorpus,
    #[error("symbol {0:?} is not in the model vocabulary")]
    UnknownSymbol(char),
    #[error("invalid n-gram parameters: {0}")]
    InvalidConfig(String),
    #[error("language model i/o: {0}")]
    Io(#[from] io::Error),
    #[error("bad language model file at line {line}: {reason}")]
    BadFile { line: usize, reason: String },
}

/// Add-k smoothed character n-gram model.
///
/// The vocabulary is the alphabet's symbols plus one sentence-boundary
/// marker (id = number of symbols). Contexts are exactly `order - 1` ids,
/// boundary-padded at the start of each sequence.
#[derive(Debug, Clone)]
pub struct NgramModel {
    order: usize,
    k: f64,
    symbols: Vec<char>,
    index: HashMap<char, u16>,
    counts: HashMap<Vec<u16>, HashMap<u16, u64>>,
    context_totals: HashMap<Vec<u16>, u64>,
}

impl NgramModel {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    /// Id of the sentence-boundary marker (one past the last symbol).
    pub fn boundary_id(&self) -> usize {
        self.symbols.len()
    }

    fn vocab_size(&self) -> usize {
        self.symbols.len() + 1
    }

    /// ln P(next | last order-1 ids of `prefix`, boundary-padded).
    ///
    /// `prefix` and `next` use alphabet symbol ids; `next` may also be the
    /// boundary id. The whole decoded prefix may be passed; only the tail
    /// matters.
    pub fn log_prob_next(&self, prefix: &[usize], next: usize) -> f64 {
        debug_assert!(next <= self.boundary_id());
        let ctx_len = self.order - 1;
        let mut ctx = Vec::with_capacity(ctx_len);
        let pad = ctx_len.saturating_sub(prefix.len());
        for _ in 0..pad {
            ctx.push(self.boundary_id() as u16);
        }
        for &id in &prefix[prefix.len() - (ctx_len - pad)..] {
            ctx.push(id as u16);
        }
        let count = self
            .counts
            .get(&ctx)
            .and_then(|m| m.get(&(next as u16)))
            .copied()
            .unwrap_or(0);
        let total = self.context_totals.get(&ctx).copied().unwrap_or(0);
        let num = count as f64 + self.k;
        let den = total as f64 + self.k * self.vocab_size() as f64;
        if num == 0.0 || den == 0.0 {
            return f64::NEG_INFINITY;
        }
        (num / den).ln()
    }

    /// Σ_t ln P(c_t | preceding characters), boundary-padded at the start.
    pub fn score(&self, text: &str) -> Result<f64, LmError> {
        let mut ids = Vec::with_capacity(text.chars().count());
        let mut total = 0.0;
        for c in text.chars() {
            let id = *self.index.get(&c).ok_or(LmError::UnknownSymbol(c))? as usize;
            total += self.log_prob_next(&ids, id);
            ids.push(id);
        }
        Ok(total)
    }

    /// Writes the model as sorted `context<TAB>symbol<TAB>count` lines after a
    /// one-line header carrying order, k, and the vocabulary.
    pub fn save(&self, path: &Path) -> Result<(), LmError> {
        let mut lines: Vec<String> = Vec::new();
        for (ctx, nexts) in &self.counts {
            let ctx_str: String = ctx.iter().map(|&id| self.escape_id(id)).collect();
            for (&next, &count) in nexts {
                lines.push(format!("{ctx_str}\t{}\t{count}", self.escape_id(next)));
            }
        }
        lines.sort();

        let vocab: String = self.symbols.iter().map(|&c| escape_symbol(c)).collect();
        let mut out = format!("ngram-v1\torder={}\tk={}\tvocab={}\n", self.order, self.k, vocab);
        for line in lines {
            out.push_str(&line);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, LmError> {
        let content = fs::read_to_string(path)?;
        let mut lines = content.lines().enumerate();
        let (_, header) = lines.next().ok_or(LmError::BadFile {
            line: 1,
            reason: "empty file".into(),
        })?;
        let bad = |line: usize, reason: &str| LmError::BadFile {
            line,
            reason: reason.into(),
        };
        let mut fields = header.split('\t');
        if fields.next() != Some("ngram-v1") {
            return Err(bad(1, "missing ngram-v1 magic"));
        }
        let mut order = None;
        let mut k = None;
        let mut vocab = None;
        for field in fields {
            if let Some(v) = field.strip_prefix("order=") {
                order = v.parse::<usize>().ok();
            } else if let Some(v) = field.strip_prefix("k=") {
                k = v.parse::<f64>().ok();
            } else if let Some(v) = field.strip_prefix("vocab=") {
                vocab = Some(unescape_symbols(v).map_err(|r| bad(1, &r))?);
            }
        }
        let order = order.ok_or_else(|| bad(1, "missing or bad order="))?;
        let k = k.ok_or_else(|| bad(1, "missing or bad k="))?;
        let symbols = vocab.ok_or_else(|| bad(1, "missing vocab="))?;
        if order < 1 {
            return Err(bad(1, "order must be >= 1"));
        }

        let mut model = NgramModel {
            order,
            k,
            index: symbols
                .iter()
                .enumerate()
                .map(|(i, &c)| (c, i as u16))
                .collect(),
            symbols,
            counts: HashMap::new(),
            context_totals: HashMap::new(),
        };

        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let lineno = i + 1;
            let mut parts = line.split('\t');
            let (ctx_str, sym_str, count_str) =
                match (parts.next(), parts.next(), parts.next(), parts.next()) {
                    (Some(a), Some(b), Some(c), None) => (a, b, c),
                    _ => return Err(bad(lineno, "expected context<TAB>symbol<TAB>count")),
                };
            let ctx = model
                .parse_ids(ctx_str)
                .map_err(|r| bad(lineno, &r))?;
            if ctx.len() != order - 1 {
                return Err(bad(lineno, "context length does not match order"));
            }
            let sym = model.parse_ids(sym_str).map_err(|r| bad(lineno, &r))?;
            if sym.len() != 1 {
                return Err(bad(lineno, "symbol field must hold exactly one symbol"));
            }
            let count: u64 = count_str
                .parse()
                .map_err(|_| bad(lineno, "bad count"))?;
            *model
                .counts
                .entry(ctx.clone())
                .or_default()
                .entry(sym[0])
                .or_insert(0) += count;
            *model.context_totals.entry(ctx).or_insert(0) += count;
        }
        Ok(model)
    }

    fn escape_id(&self, id: u16) -> String {
        if id as usize == self.boundary_id() {
            "\\b".to_string()
        } else {
            escape_symbol(self.symbols[id as usize])
        }
    }

    fn parse_ids(&self, field: &str) -> Result<Vec<u16>, String> {
        let chars = unescape_symbols(field)?;
        chars
            .into_iter()
            .map(|c| {
                if c == BOUNDARY_CHAR {
                    Ok(self.boundary_id() as u16)
                } else {
                    self.index
                        .get(&c)
                        .copied()
                        .ok_or_else(|| format!("symbol {c:?} not in vocab"))
                }
            })
            .collect()
    }
}

/// Private sentinel used only while parsing escaped fields.
const BOUNDARY_CHAR: char = '\u{0}';

fn escape_symbol(c: char) -> String {
    match c {
        ' ' => "\\s".to_string(),
        '\\' => "\\\\".to_string(),
        '\t' => "\\t".to_string(),
        '\n' => "\\n".to_string(),
        _ => c.to_string(),
    }
}

fn unescape_symbols(field: &str) -> Result<Vec<char>, String> {
    let mut out = Vec::new();
    let mut chars = field.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('s') => out.push(' '),
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('b') => out.push(BOUNDARY_CHAR),
            other => return Err(format!("bad escape \\{other:?}")),
        }
    }
    Ok(out)
}

/// Counts all order-grams over the transcripts, each padded at the start
/// with order-1 boundary markers. Probabilities use add-k smoothing:
/// P(c | ctx) = (count + k) / (context_total + k * vocab_size).
pub fn train_ngram(
    transcripts: &[String],
    alphabet: &Alphabet,
    order: usize,
    k: f64,
) -> Result<NgramModel, LmError> {
    if order < 1 {
        return Err(LmError::InvalidConfig("order must be >= 1".into()));
    }
    if !(k >= 0.0) {
        return Err(LmError::InvalidConfig("k must be >= 0".into()));
    }
    let symbols: Vec<char> = alphabet.symbols().to_vec();
    if symbols.len() + 1 > u16::MAX as usize {
        return Err(LmError::InvalidConfig("vocabulary too large".into()));
    }
    let mut model = NgramModel {
        order,
        k,
        index: symbols
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i as u16))
            .collect(),
        symbols,
        counts: HashMap::new(),
        context_totals: HashMap::new(),
    };

    let boundary = model.boundary_id() as u16;
    let mut total_chars = 0usize;
    for text in transcripts {
        let mut ids = vec![boundary; order - 1];
        for c in text.chars() {
            let id = *model.index.get(&c).ok_or(LmError::UnknownSymbol(c))?;
            ids.push(id);
        }
        total_chars += ids.len() - (order - 1);
        for w in ids.windows(order.max(1)) {
            let (ctx, next) = w.split_at(order - 1);
            *model
                .counts
                .entry(ctx.to_vec())
                .or_default()
                .entry(next[0])
                .or_insert(0) += 1;
            *model.context_totals.entry(ctx.to_vec()).or_insert(0) += 1;
        }
    }
    if total_chars == 0 {
        return Err(LmError::EmptyCorpus);
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::build_alphabet;

    fn alphabet_of(corpus: &[&str]) -> Alphabet {
        build_alphabet(corpus.iter().map(|s| s.to_string()).collect::<Vec<_>>().as_slice()).unwrap()
    }

    fn strings(corpus: &[&str]) -> Vec<String> {
        corpus.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn single_observation_is_certain_without_smoothing() {
        let corpus = ["ab"];
        let alphabet = alphabet_of(&corpus);
        let model = train_ngram(&strings(&corpus), &alphabet, 2, 0.0).unwrap();
        let a = alphabet.id_of('a').unwrap();
        let b = alphabet.id_of('b').unwrap();
        assert!((model.log_prob_next(&[a], b) - 0.0).abs() < 1e-12);
    }

    #[test]
    fn symmetric_counts_split_evenly_without_smoothing() {
        let corpus = ["ab", "ac"];
        let alphabet = alphabet_of(&corpus);
        let model = train_ngram(&strings(&corpus), &alphabet, 2, 0.0).unwrap();
        let a = alphabet.id_of('a').unwrap();
        for next in ['b', 'c'] {
            let id = alphabet.id_of(next).unwrap();
            assert!((model.log_prob_next(&[a], id) - 0.5f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn add_k_formula_hand_computed() {
        // vocab {a, b} + boundary, k = 0.5:
        // P(b|a) = (1 + 0.5) / (1 + 0.5*3) = 0.6, and likewise P(a|boundary)
        let corpus = ["ab"];
        let alphabet = alphabet_of(&corpus);
        let model = train_ngram(&strings(&corpus), &alphabet, 2, 0.5).unwrap();
        let a = alphabet.id_of('a').unwrap();
        let b = alphabet.id_of('b').unwrap();
        assert!((model.log_prob_next(&[a], b) - 0.6f64.ln()).abs() < 1e-12);
        assert!((model.log_prob_next(&[], a) - 0.6f64.ln()).abs() < 1e-12);
        let expect = 0.6f64.ln() * 2.0;
        assert!((model.score("ab").unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn empty_string_scores_zero() {
        let corpus = ["abc"];
        let model = train_ngram(&strings(&corpus), &alphabet_of(&corpus), 3, 0.5).unwrap();
        assert_eq!(model.score("").unwrap(), 0.0);
    }

    #[test]
    fn conditionals_normalize_over_vocab() {
        let corpus = ["the cat", "the hat", "a cat sat"];
        let alphabet = alphabet_of(&corpus);
        let model = train_ngram(&strings(&corpus), &alphabet, 3, 0.5).unwrap();
        let n_sym = alphabet.len();
        // observed contexts, an unseen context, and a short (padded) one
        let t = alphabet.id_of('t').unwrap();
        let h = alphabet.id_of('h').unwrap();
        let contexts: Vec<Vec<usize>> = vec![vec![t, h], vec![h, t], vec![], vec![t]];
        for ctx in contexts {
            let mut total = 0.0;
            for next in 0..=n_sym {
                total += model.log_prob_next(&ctx, next).exp();
            }
            assert!((total - 1.0).abs() < 1e-9, "context {ctx:?} sums to {total}");
        }
    }

    #[test]
    fn smoothing_leaves_no_zero_probability() {
        let corpus = ["aaa"];
        let alphabet = alphabet_of(&["abc"]);
        let model = train_ngram(&strings(&corpus), &alphabet, 2, 0.5).unwrap();
        let a = alphabet.id_of('a').unwrap();
        let c = alphabet.id_of('c').unwrap();
        assert!(model.log_prob_next(&[a], c).is_finite());
        assert!(model.log_prob_next(&[c], a).is_finite());
    }

    #[test]
    fn score_is_invariant_to_corpus_order() {
        let forward = ["one two", "three", "four five six"];
        let shuffled = ["four five six", "one two", "three"];
        let alphabet = alphabet_of(&forward);
        let m1 = train_ngram(&strings(&forward), &alphabet, 4, 0.5).unwrap();
        let m2 = train_ngram(&strings(&shuffled), &alphabet, 4, 0.5).unwrap();
        for text in ["one", "two three", "six five"] {
            assert_eq!(m1.score(text).unwrap(), m2.score(text).unwrap());
        }
    }

    #[test]
    fn unknown_symbol_is_an_error() {
        let corpus = ["ab"];
        let model = train_ngram(&strings(&corpus), &alphabet_of(&corpus), 2, 0.5).unwrap();
        assert!(matches!(model.score("ax"), Err(LmError::UnknownSymbol('x'))));
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let alphabet = alphabet_of(&["ab"]);
        assert!(matches!(
            train_ngram(&[], &alphabet, 2, 0.5),
            Err(LmError::EmptyCorpus)
        ));
        assert!(matches!(
            train_ngram(&[String::new()], &alphabet, 2, 0.5),
            Err(LmError::EmptyCorpus)
        ));
    }

    #[test]
    fn order_one_uses_a_single_empty_context() {
        let corpus = ["aab"];
        let alphabet = alphabet_of(&corpus);
        let model = train_ngram(&strings(&corpus), &alphabet, 1, 0.0).unwrap();
        let a = alphabet.id_of('a').unwrap();
        let b = alphabet.id_of('b').unwrap();
        assert!((model.log_prob_next(&[], a) - (2f64 / 3.0).ln()).abs() < 1e-12);
        assert!((model.log_prob_next(&[b], a) - (2f64 / 3.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn file_roundtrip_preserves_scores_and_sorts_lines() {
        let corpus = ["the quick brown fox", "it's a trap", "hello world"];
        let alphabet = alphabet_of(&corpus);
        let model = train_ngram(&strings(&corpus), &alphabet, 3, 0.5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("char.lm");
        model.save(&path).unwrap();

        let content = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = content.lines().collect();
        assert!(lines[0].starts_with("ngram-v1\torder=3\tk=0.5\tvocab="));
        let mut sorted = lines[1..].to_vec();
        sorted.sort();
        assert_eq!(&lines[1..], sorted.as_slice(), "body lines not sorted");

        let back = NgramModel::load(&path).unwrap();
        assert_eq!(back.order(), 3);
        assert_eq!(back.k(), 0.5);
        assert_eq!(back.symbols(), model.symbols());
        for text in ["the fox", "hello trap", "it's quick"] {
            let a = model.score(text).unwrap();
            let b = back.score(text).unwrap();
            assert!((a - b).abs() < 1e-12, "{text}: {a} vs {b}");
        }
    }

    #[test]
    fn boundary_context_is_escaped_in_files() {
        let corpus = ["a b"];
        let alphabet = alphabet_of(&corpus);
        let model = train_ngram(&strings(&corpus), &alphabet, 2, 0.5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.lm");
        model.save(&path).unwrap();
        let content = std::fs::read_to_string(&path).unwrap();
        assert!(content.contains("\\b\ta\t1"), "boundary context line missing:\n{content}");
        assert!(content.contains("a\t\\s\t1"), "space symbol line missing:\n{content}");
    }
}
