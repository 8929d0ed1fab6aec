//! Character alphabets, tokenization, Levenshtein distance and radius-1
//! Levenshtein balls.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::Path;

use thiserror::Error;

/// Header line of a persisted alphabet file.
pub const ALPHABET_HEADER: &str = "certilev-alphabet v1";

#[derive(Debug, Error)]
pub enum TextError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("empty text")]
    EmptyText,
    #[error("unknown character {ch:?} at position {position}")]
    UnknownChar { ch: char, position: usize },
    #[error("token id {id} out of range for alphabet of size {size}")]
    TokenOutOfRange { id: u32, size: usize },
    #[error("alphabet file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Lowercase fold of a single character. Characters whose lowercase form is
/// not a single code point, or that have none, pass through unchanged.
pub fn fold_char(c: char) -> char {
    let mut lower = c.to_lowercase();
    match (lower.next(), lower.next()) {
        (Some(l), None) => l,
        _ => c,
    }
}

/// Ordered set of distinct characters with contiguous token ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alphabet {
    chars: Vec<char>,
    index: BTreeMap<char, u32>,
}

impl Alphabet {
    /// Builds an alphabet from an explicit character list. Characters are
    /// folded, deduplicated and sorted by code point.
    pub fn from_chars<I: IntoIterator<Item = char>>(chars: I) -> Result<Self, TextError> {
        let set: BTreeSet<char> = chars.into_iter().map(fold_char).collect();
        if set.is_empty() {
            return Err(TextError::EmptyCorpus);
        }
        let chars: Vec<char> = set.into_iter().collect();
        let index = chars
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i as u32))
            .collect();
        Ok(Self { chars, index })
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn id(&self, c: char) -> Option<u32> {
        self.index.get(&c).copied()
    }

    pub fn char_of(&self, id: u32) -> Option<char> {
        self.chars.get(id as usize).copied()
    }

    /// Serializes to the alphabet file format: header line, then one
    /// character per line where the line number is the token id. Newline,
    /// carriage return and backslash are written as `\n`, `\r` and `\\`.
    pub fn to_file_string(&self) -> String {
        let mut out = String::from(ALPHABET_HEADER);
        out.push('\n');
        for &c in &self.chars {
            match c {
                '\n' => out.push_str("\\n"),
                '\r' => out.push_str("\\r"),
                '\\' => out.push_str("\\\\"),
                _ => out.push(c),
            }
            out.push('\n');
        }
        out
    }

    pub fn parse_file_string(text: &str) -> Result<Self, TextError> {
        let mut lines = text.split('\n');
        match lines.next() {
            Some(h) if h.trim_end_matches('\r') == ALPHABET_HEADER => {}
            Some(h) => return Err(TextError::Format(format!("bad header {h:?}"))),
            None => return Err(TextError::Format("missing header".into())),
        }
        let mut chars = Vec::new();
        let body: Vec<&str> = lines.collect();
        // the serializer always ends with a newline, leaving one empty tail
        let body = match body.split_last() {
            Some((&"", rest)) => rest,
            _ => &body[..],
        };
        for (n, line) in body.iter().enumerate() {
            let c = match *line {
                "\\n" => '\n',
                "\\r" => '\r',
                "\\\\" => '\\',
                other => {
                    let mut it = other.chars();
                    match (it.next(), it.next()) {
                        (Some(c), None) => c,
                        _ => {
                            return Err(TextError::Format(format!(
                                "line {} is not a single character: {other:?}",
                                n + 2
                            )))
                        }
                    }
                }
            };
            chars.push(c);
        }
        let alphabet = Self::from_chars(chars.iter().copied())?;
        if alphabet.chars != chars {
            return Err(TextError::Format(
                "characters must be distinct, lowercase and sorted by code point".into(),
            ));
        }
        Ok(alphabet)
    }

    pub fn save(&self, path: &Path) -> Result<(), TextError> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TextError> {
        Self::parse_file_string(&std::fs::read_to_string(path)?)
    }
}

/// Collects every lowercase-folded character seen in the corpus.
pub fn build_alphabet<I, S>(corpus: I) -> Result<Alphabet, TextError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut set = BTreeSet::new();
    for text in corpus {
        set.extend(text.as_ref().chars().map(fold_char));
    }
    Alphabet::from_chars(set)
}

/// A non-empty sequence of token ids.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Sentence(Vec<u32>);

impl Sentence {
    /// Wraps raw token ids, checking them against the alphabet size.
    pub fn new(tokens: Vec<u32>, alphabet_size: usize) -> Result<Self, TextError> {
        if tokens.is_empty() {
            return Err(TextError::EmptyText);
        }
        if let Some(&id) = tokens.iter().find(|&&t| t as usize >= alphabet_size) {
            return Err(TextError::TokenOutOfRange {
                id,
                size: alphabet_size,
            });
        }
        Ok(Self(tokens))
    }

    pub(crate) fn from_vec_unchecked(tokens: Vec<u32>) -> Self {
        debug_assert!(!tokens.is_empty());
        Self(tokens)
    }

    pub fn tokens(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    /// Always false; kept for API symmetry with `len`.
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_tokens(self) -> Vec<u32> {
        self.0
    }
}

impl AsRef<[u32]> for Sentence {
    fn as_ref(&self) -> &[u32] {
        &self.0
    }
}

pub fn tokenize(text: &str, alphabet: &Alphabet) -> Result<Sentence, TextError> {
    let mut tokens = Vec::with_capacity(text.len());
    for (position, c) in text.chars().enumerate() {
        let c = fold_char(c);
        let id = alphabet
            .id(c)
            .ok_or(TextError::UnknownChar { ch: c, position })?;
        tokens.push(id);
    }
    if tokens.is_empty() {
        return Err(TextError::EmptyText);
    }
    Ok(Sentence(tokens))
}

pub fn detokenize(s: &Sentence, alphabet: &Alphabet) -> String {
    s.tokens()
        .iter()
        .map(|&t| alphabet.char_of(t).unwrap_or('\u{fffd}'))
        .collect()
}

impl fmt::Display for Sentence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

/// Edit distance with unit-cost substitutions, insertions and deletions.
/// Two-row Wagner-Fischer, O(mn) time and O(min(m, n)) space.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if short.is_empty() {
        return long.len();
    }
    let mut prev: Vec<usize> = (0..=short.len()).collect();
    let mut cur = vec![0usize; short.len() + 1];
    for (i, x) in long.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in short.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[short.len()]
}

/// Upper bound on the number of sentences yielded (with duplicates) by the
/// radius-1 ball around a length-`m` sentence over `v` symbols.
pub fn ball_size_bound(m: usize, v: usize) -> usize {
    m * v.saturating_sub(1) + m + (m + 1) * v + 1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    Original,
    Substitute { pos: usize, sym: u32 },
    Delete { pos: usize },
    Insert { pos: usize, sym: u32 },
    Done,
}

/// Iterator over every sentence within Levenshtein distance 1 of a center.
///
/// Order: the center, substitutions, deletions, insertions. Deleting the only
/// token of a length-1 sentence would produce the empty sequence; that case
/// is skipped and counted in [`BallIter::skipped_empty`].
pub struct BallIter<'a> {
    center: &'a [u32],
    alphabet_size: u32,
    phase: Phase,
    seen: Option<HashSet<Vec<u32>>>,
    skipped_empty: usize,
}

impl<'a> BallIter<'a> {
    /// Number of empty-sentence deletions skipped so far.
    pub fn skipped_empty(&self) -> usize {
        self.skipped_empty
    }

    fn next_candidate(&mut self) -> Option<Vec<u32>> {
        let m = self.center.len();
        let v = self.alphabet_size;
        loop {
            match self.phase {
                Phase::Done => return None,
                Phase::Original => {
                    self.phase = if m > 0 && v > 0 {
                        Phase::Substitute { pos: 0, sym: 0 }
                    } else {
                        Phase::Delete { pos: 0 }
                    };
                    return Some(self.center.to_vec());
                }
                Phase::Substitute { pos, sym } => {
                    self.phase = if sym + 1 < v {
                        Phase::Substitute { pos, sym: sym + 1 }
                    } else if pos + 1 < m {
                        Phase::Substitute {
                            pos: pos + 1,
                            sym: 0,
                        }
                    } else {
                        Phase::Delete { pos: 0 }
                    };
                    if self.center[pos] == sym {
                        continue;
                    }
                    let mut t = self.center.to_vec();
                    t[pos] = sym;
                    return Some(t);
                }
                Phase::Delete { pos } => {
                    if pos >= m {
                        self.phase = if v > 0 {
                            Phase::Insert { pos: 0, sym: 0 }
                        } else {
                            Phase::Done
                        };
                        continue;
                    }
                    self.phase = Phase::Delete { pos: pos + 1 };
                    if m == 1 {
                        self.skipped_empty += 1;
                        continue;
                    }
                    let mut t = Vec::with_capacity(m - 1);
                    t.extend_from_slice(&self.center[..pos]);
                    t.extend_from_slice(&self.center[pos + 1..]);
                    return Some(t);
                }
                Phase::Insert { pos, sym } => {
                    self.phase = if sym + 1 < v {
                        Phase::Insert { pos, sym: sym + 1 }
                    } else if pos < m {
                        Phase::Insert {
                            pos: pos + 1,
                            sym: 0,
                        }
                    } else {
                        Phase::Done
                    };
                    let mut t = Vec::with_capacity(m + 1);
                    t.extend_from_slice(&self.center[..pos]);
                    t.push(sym);
                    t.extend_from_slice(&self.center[pos..]);
                    return Some(t);
                }
            }
        }
    }
}

impl Iterator for BallIter<'_> {
    type Item = Sentence;

    fn next(&mut self) -> Option<Sentence> {
        loop {
            let t = self.next_candidate()?;
            if let Some(seen) = self.seen.as_mut() {
                if !seen.insert(t.clone()) {
                    continue;
                }
            }
            return Some(Sentence(t));
        }
    }
}

/// Enumerates the radius-1 Levenshtein ball around `s` over an alphabet of
/// `alphabet_size` symbols. Without `dedup`, a sentence reachable by several
/// edits is yielded once per edit. Larger radii are obtained by composing
/// this enumerator, at a cost exponential in the radius.
pub fn enumerate_ball(s: &Sentence, alphabet_size: usize, dedup: bool) -> BallIter<'_> {
    BallIter {
        center: s.tokens(),
        alphabet_size: alphabet_size as u32,
        phase: Phase::Original,
        seen: dedup.then(HashSet::new),
        skipped_empty: 0,
    }
}

/// Every distinct non-empty sentence within distance `k` of `s`, found by
/// repeatedly expanding radius-1 balls. Returns the members and the number of
/// skipped empty-sentence deletions.
pub fn enumerate_ball_k(s: &Sentence, alphabet_size: usize, k: usize) -> (Vec<Sentence>, usize) {
    let mut seen: HashSet<Sentence> = HashSet::new();
    seen.insert(s.clone());
    let mut members = vec![s.clone()];
    let mut frontier = vec![s.clone()];
    let mut skipped = 0;
    for _ in 0..k {
        let mut next = Vec::new();
        for c in &frontier {
            let mut it = enumerate_ball(c, alphabet_size, false);
            for t in it.by_ref() {
                if seen.insert(t.clone()) {
                    members.push(t.clone());
                    next.push(t);
                }
            }
            skipped += it.skipped_empty();
        }
        frontier = next;
    }
    (members, skipped)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lev_recursive(a: &[u32], b: &[u32]) -> usize {
        if b.is_empty() {
            return a.len();
        }
        if a.is_empty() {
            return b.len();
        }
        if a[0] == b[0] {
            return lev_recursive(&a[1..], &b[1..]);
        }
        1 + lev_recursive(&a[1..], &b[1..])
            .min(lev_recursive(&a[1..], b))
            .min(lev_recursive(a, &b[1..]))
    }

    #[test]
    fn alphabet_folds_and_sorts() {
        let a = build_alphabet(["Ab", "ba"]).unwrap();
        assert_eq!(a.chars(), &['a', 'b']);
        assert_eq!(a.id('a'), Some(0));
        assert_eq!(a.id('b'), Some(1));

        let a = build_alphabet(["abc!", "a b"]).unwrap();
        assert_eq!(a.chars(), &[' ', '!', 'a', 'b', 'c']);
    }

    #[test]
    fn alphabet_is_order_independent() {
        let a = build_alphabet(["zyx", "Hello"]).unwrap();
        let b = build_alphabet(["hello", "XYZ"]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(
            build_alphabet(["", "", ""]),
            Err(TextError::EmptyCorpus)
        ));
        assert!(matches!(
            build_alphabet(Vec::<String>::new()),
            Err(TextError::EmptyCorpus)
        ));
    }

    #[test]
    fn uncased_characters_pass_through() {
        assert_eq!(fold_char('!'), '!');
        assert_eq!(fold_char('Ä'), 'ä');
        assert_eq!(fold_char('中'), '中');
        // 'İ' lowercases to two code points and is left as is
        assert_eq!(fold_char('İ'), 'İ');
    }

    #[test]
    fn tokenize_examples() {
        let a = build_alphabet(["ab"]).unwrap();
        assert_eq!(tokenize("ab", &a).unwrap().tokens(), &[0, 1]);
        assert_eq!(tokenize("AB", &a).unwrap().tokens(), &[0, 1]);
        match tokenize("ax", &a) {
            Err(TextError::UnknownChar {
                ch: 'x',
                position: 1,
            }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(tokenize("", &a), Err(TextError::EmptyText)));
    }

    #[test]
    fn sentence_validates_ids() {
        assert!(Sentence::new(vec![0, 2], 2).is_err());
        assert!(Sentence::new(vec![], 2).is_err());
        assert!(Sentence::new(vec![1, 0], 2).is_ok());
    }

    #[test]
    fn alphabet_file_round_trip() {
        let a = build_alphabet(["a\\b\n c\r"]).unwrap();
        let text = a.to_file_string();
        assert!(text.starts_with("certilev-alphabet v1\n"));
        assert_eq!(Alphabet::parse_file_string(&text).unwrap(), a);
        assert!(Alphabet::parse_file_string("nope\na\n").is_err());
        assert!(Alphabet::parse_file_string("certilev-alphabet v1\nb\na\n").is_err());
        assert!(Alphabet::parse_file_string("certilev-alphabet v1\nab\n").is_err());
    }

    #[test]
    fn levenshtein_examples() {
        assert_eq!(levenshtein::<u32>(&[], &[0, 1]), 2);
        assert_eq!(levenshtein(&[0u32, 1, 2], &[0, 1, 2]), 0);
        let a = build_alphabet(["kitten", "sitting"]).unwrap();
        let k = tokenize("kitten", &a).unwrap();
        let s = tokenize("sitting", &a).unwrap();
        assert_eq!(lev_recursive(k.tokens(), s.tokens()), 3);
        assert_eq!(levenshtein(k.tokens(), s.tokens()), 3);
    }

    #[test]
    fn levenshtein_matches_recursion_on_small_inputs() {
        let mut rng = crate::rng::stream(11, "text-test");
        use rand::Rng;
        for _ in 0..300 {
            let a: Vec<u32> = (0..rng.gen_range(0..6))
                .map(|_| rng.gen_range(0..3))
                .collect();
            let b: Vec<u32> = (0..rng.gen_range(0..6))
                .map(|_| rng.gen_range(0..3))
                .collect();
            assert_eq!(levenshtein(&a, &b), lev_recursive(&a, &b), "{a:?} {b:?}");
        }
    }

    #[test]
    fn ball_of_single_token() {
        let s = Sentence::new(vec![0], 2).unwrap();
        let mut it = enumerate_ball(&s, 2, true);
        let mut got: Vec<Vec<u32>> = it.by_ref().map(Sentence::into_tokens).collect();
        assert_eq!(it.skipped_empty(), 1);
        got.sort();
        assert_eq!(
            got,
            vec![vec![0], vec![0, 0], vec![0, 1], vec![1], vec![1, 0]]
        );
    }

    #[test]
    fn ball_size_within_bound() {
        let s = Sentence::new(vec![0, 1, 1, 2], 3).unwrap();
        let n = enumerate_ball(&s, 3, false).count();
        assert!(n <= ball_size_bound(4, 3));
        // without dedup and with m > 1 every edit is yielded exactly once
        assert_eq!(n, ball_size_bound(4, 3));
        for q in enumerate_ball(&s, 3, false) {
            assert!(levenshtein(s.tokens(), q.tokens()) <= 1);
        }
    }

    #[test]
    fn ball_k_radius_two() {
        let s = Sentence::new(vec![0, 1], 2).unwrap();
        let (members, _) = enumerate_ball_k(&s, 2, 2);
        // exhaustive filter over lengths 1..=4
        let mut expected = 0;
        for len in 1..=4u32 {
            for code in 0..(1u32 << len) {
                let t: Vec<u32> = (0..len).map(|i| (code >> i) & 1).collect();
                if levenshtein(s.tokens(), &t) <= 2 {
                    expected += 1;
                }
            }
        }
        assert_eq!(members.len(), expected);
    }
}
