//! Transcript normalization and the character alphabet shared by the model
//! output layer, the CTC loss, and the decoders.

use std::collections::BTreeSet;
use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TextError {
    #[error("empty corpus: no transcripts to build an alphabet from")]
    EmptyCorpus,
    #[error("unknown symbol {0:?} not present in the alphabet")]
    UnknownSymbol(char),
    #[error("label id {id} out of range for alphabet of {len} symbols")]
    IndexOutOfRange { id: usize, len: usize },
    #[error("invalid alphabet file line {line}: {reason}")]
    InvalidAlphabetFile { line: usize, reason: String },
    #[error("alphabet i/o: {0}")]
    Io(#[from] io::Error),
}

/// Ordered character set of the model output. The CTC blank is implicit:
/// its index is `symbols.len()` and it is never a member of `symbols`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alphabet {
    symbols: Vec<char>,
    index: HashMap<char, usize>,
}

impl Alphabet {
    /// Builds an alphabet from an explicit symbol list. Panics on duplicates;
    /// use [`build_alphabet`] for corpus-driven construction.
    pub fn new(symbols: Vec<char>) -> Self {
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, &c) in symbols.iter().enumerate() {
            let prev = index.insert(c, i);
            assert!(prev.is_none(), "duplicate alphabet symbol {c:?}");
        }
        Alphabet { symbols, index }
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// Index of the CTC blank: one past the last real symbol.
    pub fn blank_index(&self) -> usize {
        self.symbols.len()
    }

    /// Model output dimension: all symbols plus the blank.
    pub fn n_outputs(&self) -> usize {
        self.symbols.len() + 1
    }

    pub fn id_of(&self, c: char) -> Option<usize> {
        self.index.get(&c).copied()
    }

    pub fn char_of(&self, id: usize) -> Option<char> {
        self.symbols.get(id).copied()
    }

    /// True when every character of `text` is encodable.
    pub fn covers(&self, text: &str) -> bool {
        text.chars().all(|c| self.index.contains_key(&c))
    }

    /// Writes the alphabet file: one symbol per line, UTF-8, LF endings.
    /// The blank is implicit and never listed.
    pub fn save(&self, path: &Path) -> Result<(), TextError> {
        let mut out = String::new();
        out.push_str("# one symbol per line; the CTC blank is implicit\n");
        for &c in &self.symbols {
            out.push(c);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    /// Reads an alphabet file written by [`Alphabet::save`]. Lines starting
    /// with `#` are comments; every other line must hold exactly one symbol.
    pub fn load(path: &Path) -> Result<Self, TextError> {
        let raw = fs::read_to_string(path)?;
        let mut symbols = Vec::new();
        for (lineno, line) in raw.split('\n').enumerate() {
            if line.starts_with('#') {
                continue;
            }
            // the final newline leaves one trailing empty chunk
            if line.is_empty() {
                continue;
            }
            let mut chars = line.chars();
            let c = chars.next().unwrap();
            if chars.next().is_some() {
                return Err(TextError::InvalidAlphabetFile {
                    line: lineno + 1,
                    reason: format!("expected one symbol, got {line:?}"),
                });
            }
            symbols.push(c);
        }
        let mut seen = BTreeSet::new();
        for &c in &symbols {
            if !seen.insert(c) {
                return Err(TextError::InvalidAlphabetFile {
                    line: 0,
                    reason: format!("duplicate symbol {c:?}"),
                });
            }
        }
        Ok(Alphabet::new(symbols))
    }
}

impl fmt::Display for Alphabet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &c in &self.symbols {
            f.write_str(&c.to_string())?;
        }
        Ok(())
    }
}

/// Integer-encoded transcript. Never contains the blank index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSequence(pub Vec<usize>);

impl LabelSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ids(&self) -> &[usize] {
        &self.0
    }
}

fn in_default_alphabet(c: char) -> bool {
    c.is_ascii_lowercase() || c == '\''
}

/// Normalizes a raw transcript onto the default alphabet {a-z, space, '}:
/// uppercase folds to lowercase, every out-of-alphabet character becomes a
/// space (a word boundary, so "mid-day" reads "mid day"), whitespace runs
/// collapse to one space, and leading/trailing spaces are removed.
///
/// The operation is idempotent.
pub fn normalize_transcript(raw: &str) -> String {
    let mut out = String::with_capacity(raw.len());
    let mut pending_space = false;
    for c in raw.chars() {
        for folded in c.to_lowercase() {
            if in_default_alphabet(folded) {
                if pending_space && !out.is_empty() {
                    out.push(' ');
                }
                pending_space = false;
                out.push(folded);
            } else {
                pending_space = true;
            }
        }
    }
    out
}

/// Builds the alphabet observed in already-normalized transcripts: the sorted
/// character set, with space ordered first when present.
pub fn build_alphabet<S: AsRef<str>>(transcripts: &[S]) -> Result<Alphabet, TextError> {
    if transcripts.is_empty() {
        return Err(TextError::EmptyCorpus);
    }
    let mut set = BTreeSet::new();
    for t in transcripts {
        set.extend(t.as_ref().chars());
    }
    let mut symbols: Vec<char> = set.into_iter().collect();
    // BTreeSet already yields sorted order and ' ' (0x20) sorts lowest, but
    // the space-first rule is part of the contract, so enforce it explicitly.
    if let Some(pos) = symbols.iter().position(|&c| c == ' ') {
        let sp = symbols.remove(pos);
        symbols.insert(0, sp);
    }
    Ok(Alphabet::new(symbols))
}

/// Encodes a normalized string as label ids, one per character.
pub fn encode_labels(text: &str, alphabet: &Alphabet) -> Result<LabelSequence, TextError> {
    let mut ids = Vec::with_capacity(text.len());
    for c in text.chars() {
        match alphabet.id_of(c) {
            Some(id) => ids.push(id),
            None => return Err(TextError::UnknownSymbol(c)),
        }
    }
    Ok(LabelSequence(ids))
}

/// Decodes label ids back into a string; inverse of [`encode_labels`].
pub fn decode_labels(ids: &LabelSequence, alphabet: &Alphabet) -> Result<String, TextError> {
    let mut out = String::with_capacity(ids.len());
    for &id in ids.ids() {
        match alphabet.char_of(id) {
            Some(c) => out.push(c),
            None => {
                return Err(TextError::IndexOutOfRange {
                    id,
                    len: alphabet.len(),
                })
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn normalize_folds_case_and_strips_punctuation() {
        assert_eq!(normalize_transcript("Hello, World!"), "hello world");
    }

    #[test]
    fn normalize_collapses_whitespace() {
        assert_eq!(normalize_transcript("  a   b "), "a b");
    }

    #[test]
    fn normalize_drops_digits_to_word_boundaries() {
        assert_eq!(
            normalize_transcript("India's 22 languages."),
            "india's languages"
        );
    }

    #[test]
    fn normalize_keeps_apostrophes_and_splits_hyphens() {
        assert_eq!(normalize_transcript("mid-day"), "mid day");
        assert_eq!(normalize_transcript("it's"), "it's");
    }

    #[test]
    fn normalize_is_idempotent_on_random_unicode() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..500 {
            let len = rng.gen_range(0..40);
            let s: String = (0..len)
                .map(|_| {
                    // mix of ascii, punctuation, and arbitrary code points
                    match rng.gen_range(0..4) {
                        0 => rng.gen_range(b' '..=b'~') as char,
                        1 => char::from_u32(rng.gen_range(0xc0..0x2000)).unwrap_or('x'),
                        2 => ['İ', 'ß', 'Æ', '　', '\t', '\n', '€'][rng.gen_range(0..7)],
                        _ => rng.gen_range('a'..='z'),
                    }
                })
                .collect();
            let once = normalize_transcript(&s);
            let twice = normalize_transcript(&once);
            assert_eq!(once, twice, "not idempotent on {s:?}");
            assert!(
                once.chars().all(|c| in_default_alphabet(c) || c == ' '),
                "out-of-alphabet char in {once:?}"
            );
            assert!(!once.starts_with(' ') && !once.ends_with(' '));
            assert!(!once.contains("  "));
        }
    }

    #[test]
    fn alphabet_from_two_symbols() {
        let a = build_alphabet(&["ab", "ba"]).unwrap();
        assert_eq!(a.symbols(), &['a', 'b']);
        assert_eq!(a.blank_index(), 2);
    }

    #[test]
    fn alphabet_orders_space_first() {
        let a = build_alphabet(&["a b"]).unwrap();
        assert_eq!(a.symbols(), &[' ', 'a', 'b']);
        assert_eq!(a.blank_index(), 3);
    }

    #[test]
    fn alphabet_of_empty_corpus_is_an_error() {
        assert!(matches!(
            build_alphabet::<&str>(&[]),
            Err(TextError::EmptyCorpus)
        ));
    }

    #[test]
    fn encode_decode_roundtrip_and_errors() {
        let a = Alphabet::new(vec!['a', 'b']);
        assert_eq!(encode_labels("ab", &a).unwrap().ids(), &[0, 1]);
        assert_eq!(encode_labels("", &a).unwrap().ids(), &[] as &[usize]);
        assert!(matches!(
            encode_labels("ax", &a),
            Err(TextError::UnknownSymbol('x'))
        ));
        assert_eq!(decode_labels(&LabelSequence(vec![0, 1]), &a).unwrap(), "ab");
        assert_eq!(decode_labels(&LabelSequence(vec![]), &a).unwrap(), "");
        assert!(matches!(
            decode_labels(&LabelSequence(vec![5]), &a),
            Err(TextError::IndexOutOfRange { id: 5, .. })
        ));
    }

    #[test]
    fn encode_decode_inverse_on_random_normalized_strings() {
        let a = build_alphabet(&["the quick brown fox's jump"]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let len = rng.gen_range(0..30);
            let s: String = (0..len)
                .map(|_| a.symbols()[rng.gen_range(0..a.len())])
                .collect();
            let ids = encode_labels(&s, &a).unwrap();
            assert_eq!(decode_labels(&ids, &a).unwrap(), s);
        }
    }

    #[test]
    fn alphabet_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("alphabet.txt");
        let a = build_alphabet(&["hello there's a space"]).unwrap();
        a.save(&path).unwrap();
        let raw = std::fs::read(&path).unwrap();
        assert!(!raw.contains(&b'\r'), "file must use LF endings");
        let b = Alphabet::load(&path).unwrap();
        assert_eq!(a, b);
    }
}
