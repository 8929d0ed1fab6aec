//! Dataset ingestion: CSV/TSV label-text files, label maps, seeded splits and
//! a synthetic task for desk-scale runs.

use std::collections::BTreeMap;
use std::io::Read;
use std::ops::RangeInclusive;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::text::{build_alphabet, tokenize, Alphabet, Sentence, TextError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Unreadable {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("line {line}: {msg}")]
    Row { line: u64, msg: String },
    #[error("label map: {0}")]
    LabelMap(String),
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
    #[error("validation size {val} must be smaller than dataset size {total}")]
    SplitTooLarge { val: usize, total: usize },
    #[error("cannot hold out {val} samples while keeping every class in the training split")]
    SplitClassPresence { val: usize },
    #[error("dataset is empty")]
    Empty,
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Column layout of a label-text file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CsvSchema {
    pub label_col: usize,
    pub text_col: usize,
    pub has_header: bool,
    pub delimiter: u8,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            label_col: 0,
            text_col: 1,
            has_header: false,
            delimiter: b',',
        }
    }
}

impl CsvSchema {
    /// Comma for `.csv`, tab for `.tsv`/`.tab`.
    pub fn for_path(path: &Path) -> Self {
        let tsv = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("tsv") || e.eq_ignore_ascii_case("tab"));
        Self {
            delimiter: if tsv { b'\t' } else { b',' },
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawRecord {
    /// 1-based line in the source file.
    pub line: u64,
    pub label: String,
    pub text: String,
}

/// A rejected row, kept so callers can report it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RowError {
    pub line: u64,
    pub msg: String,
}

#[derive(Clone, Debug, Default)]
pub struct CsvLoad {
    pub records: Vec<RawRecord>,
    pub errors: Vec<RowError>,
}

impl CsvLoad {
    /// Number of data rows seen (accepted plus rejected).
    pub fn data_rows(&self) -> usize {
        self.records.len() + self.errors.len()
    }

    /// Fails on the first rejected row.
    pub fn strict(self) -> Result<Vec<RawRecord>, DataError> {
        match self.errors.into_iter().next() {
            Some(e) => Err(DataError::Row {
                line: e.line,
                msg: e.msg,
            }),
            None => Ok(self.records),
        }
    }
}

/// Streams label-text rows from any reader. Rows with too few columns are
/// collected as [`RowError`]s, never dropped silently.
pub fn read_csv<R: Read>(reader: R, schema: CsvSchema) -> Result<CsvLoad, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(schema.has_header)
        .delimiter(schema.delimiter)
        .flexible(true)
        .from_reader(reader);
    let needed = schema.label_col.max(schema.text_col) + 1;
    let mut load = CsvLoad::default();
    let mut record = csv::StringRecord::new();
    loop {
        match rdr.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {
                let line = record.position().map_or(0, |p| p.line());
                if record.len() < needed {
                    load.errors.push(RowError {
                        line,
                        msg: format!(
                            "expected at least {needed} columns (label {}, text {}), found {}",
                            schema.label_col,
                            schema.text_col,
                            record.len()
                        ),
                    });
                    continue;
                }
                load.records.push(RawRecord {
                    line,
                    label: record[schema.label_col].trim().to_string(),
                    text: record[schema.text_col].to_string(),
                });
            }
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                if matches!(e.kind(), csv::ErrorKind::Io(_)) {
                    return Err(e.into());
                }
                load.errors.push(RowError {
                    line,
                    msg: e.to_string(),
                });
            }
        }
    }
    Ok(load)
}

pub fn load_csv(path: &Path, schema: CsvSchema) -> Result<CsvLoad, DataError> {
    let file = std::fs::File::open(path).map_err(|source| DataError::Unreadable {
        path: path.display().to_string(),
        source,
    })?;
    read_csv(std::io::BufReader::new(file), schema)
}

/// Mapping from raw label strings to contiguous class ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    ids: BTreeMap<String, usize>,
}

impl LabelMap {
    /// Sorted mapping over the distinct labels: numerically when every label
    /// is an integer, lexicographically otherwise.
    pub fn from_labels<'a, I: IntoIterator<Item = &'a str>>(labels: I) -> Self {
        let mut distinct: Vec<String> = labels.into_iter().map(str::to_string).collect();
        distinct.sort();
        distinct.dedup();
        let numeric: Option<Vec<i64>> = distinct.iter().map(|l| l.parse().ok()).collect();
        if let Some(nums) = numeric {
            let mut pairs: Vec<(i64, String)> = nums.into_iter().zip(distinct).collect();
            pairs.sort();
            distinct = pairs.into_iter().map(|(_, l)| l).collect();
        }
        Self {
            ids: distinct
                .into_iter()
                .enumerate()
                .map(|(i, l)| (l, i))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.ids.get(label).copied()
    }

    /// Labels ordered by id.
    pub fn labels(&self) -> Vec<&str> {
        let mut v: Vec<(&str, usize)> = self.ids.iter().map(|(l, &i)| (l.as_str(), i)).collect();
        v.sort_by_key(|&(_, i)| i);
        v.into_iter().map(|(l, _)| l).collect()
    }

    /// `label<TAB>id` per line, ordered by id.
    pub fn to_file_string(&self) -> String {
        self.labels()
            .into_iter()
            .enumerate()
            .map(|(i, l)| format!("{l}\t{i}\n"))
            .collect()
    }

    pub fn parse_file_string(text: &str) -> Result<Self, DataError> {
        let mut ids = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (label, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| DataError::LabelMap(format!("line {}: missing tab", n + 1)))?;
            let id: usize = id
                .trim()
                .parse()
                .map_err(|_| DataError::LabelMap(format!("line {}: bad id {id:?}", n + 1)))?;
            if ids.insert(label.to_string(), id).is_some() {
                return Err(DataError::LabelMap(format!("duplicate label {label:?}")));
            }
        }
        let mut seen: Vec<usize> = ids.values().copied().collect();
        seen.sort_unstable();
        if seen.iter().enumerate().any(|(i, &id)| i != id) {
            return Err(DataError::LabelMap("ids must be contiguous from 0".into()));
        }
        Ok(Self { ids })
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        std::fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        Self::parse_file_string(&std::fs::read_to_string(path)?)
    }
}

/// Labeled sentences over a shared alphabet.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub samples: Vec<(Sentence, usize)>,
    pub num_classes: usize,
    pub alphabet: Alphabet,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for (_, y) in &self.samples {
            counts[*y] += 1;
        }
        counts
    }

    pub fn present_classes(&self) -> usize {
        self.class_counts().iter().filter(|&&c| c > 0).count()
    }

    fn with_samples(&self, samples: Vec<(Sentence, usize)>) -> Self {
        Self {
            samples,
            num_classes: self.num_classes,
            alphabet: self.alphabet.clone(),
        }
    }

    /// First `n` samples.
    pub fn truncated(&self, n: usize) -> Self {
        self.with_samples(self.samples.iter().take(n).cloned().collect())
    }
}

/// Rows skipped while building a dataset from raw records.
#[derive(Clone, Debug, Default)]
pub struct BuildReport {
    pub rejected: Vec<RowError>,
    /// Sentences dropped by the length cap.
    pub over_length: usize,
}

/// Tokenizes and labels raw records. Records with unknown characters, empty
/// text or unknown labels are rejected with their line numbers; sentences
/// longer than `max_len` are counted and dropped.
pub fn build_dataset(
    records: &[RawRecord],
    alphabet: &Alphabet,
    labels: &LabelMap,
    max_len: Option<usize>,
) -> (LabeledDataset, BuildReport) {
    let mut report = BuildReport::default();
    let mut samples = Vec::with_capacity(records.len());
    for r in records {
        let Some(y) = labels.id(&r.label) else {
            report.rejected.push(RowError {
                line: r.line,
                msg: format!("unknown label {:?}", r.label),
            });
            continue;
        };
        match tokenize(&r.text, alphabet) {
            Ok(s) => {
                if max_len.is_some_and(|cap| s.len() > cap) {
                    report.over_length += 1;
                } else {
                    samples.push((s, y));
                }
            }
            Err(e) => report.rejected.push(RowError {
                line: r.line,
                msg: e.to_string(),
            }),
        }
    }
    (
        LabeledDataset {
            samples,
            num_classes: labels.len(),
            alphabet: alphabet.clone(),
        },
        report,
    )
}

/// Alphabet over the text column of the given records.
pub fn alphabet_from_records(records: &[RawRecord]) -> Result<Alphabet, TextError> {
    build_alphabet(records.iter().map(|r| r.text.as_str()))
}

/// Deterministic seeded split into `(train, val)` with `val_size` samples
/// held out. A sample is never moved to validation if it is the last
/// training example of its class.
pub fn split(
    dataset: &LabeledDataset,
    val_size: usize,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset), DataError> {
    let n = dataset.len();
    if val_size >= n && val_size > 0 {
        return Err(DataError::SplitTooLarge {
            val: val_size,
            total: n,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut crate::rng::stream(seed, "split"));
    let mut remaining = dataset.class_counts();
    let mut in_val = vec![false; n];
    let mut taken = 0;
    for &i in order.iter().rev() {
        if taken == val_size {
            break;
        }
        let y = dataset.samples[i].1;
        if remaining[y] > 1 {
            remaining[y] -= 1;
            in_val[i] = true;
            taken += 1;
        }
    }
    if taken < val_size {
        return Err(DataError::SplitClassPresence { val: val_size });
    }
    let mut train = Vec::with_capacity(n - val_size);
    let mut val = Vec::with_capacity(val_size);
    for &i in &order {
        let s = dataset.samples[i].clone();
        if in_val[i] {
            val.push(s);
        } else {
            train.push(s);
        }
    }
    Ok((dataset.with_samples(train), dataset.with_samples(val)))
}

/// Characters of the synthetic task. The first `num_classes` are markers.
pub const SYNTHETIC_CHARS: &str = "abcdefghijkl";

/// Class of a synthetic sentence: the marker with the most occurrences
/// (lowest id on ties).
pub fn synthetic_rule(s: &Sentence, num_classes: usize) -> usize {
    let mut counts = vec![0usize; num_classes];
    for &t in s.tokens() {
        if (t as usize) < num_classes {
            counts[t as usize] += 1;
        }
    }
    let mut best = 0;
    for (c, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = c;
        }
    }
    best
}

/// Synthetic separable task: each sentence holds marker and filler
/// characters, and its label is the majority marker, which makes up at least
/// 60% of all marker occurrences.
///
/// # Panics
/// If `n < 20`, `num_classes < 2`, `num_classes` leaves no filler
/// characters, or the length range starts below 2.
pub fn synthetic_task(
    seed: u64,
    n: usize,
    length_range: RangeInclusive<usize>,
    num_classes: usize,
) -> LabeledDataset {
    assert!(n >= 20, "synthetic task needs at least 20 samples");
    assert!(num_classes >= 2 && num_classes < SYNTHETIC_CHARS.len());
    assert!(*length_range.start() >= 2 && length_range.start() <= length_range.end());
    let alphabet = build_alphabet([SYNTHETIC_CHARS]).expect("non-empty");
    let v = alphabet.len() as u32;
    let mut rng = crate::rng::stream(seed, "synthetic");
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let label = rng.gen_range(0..num_classes);
        let len = rng.gen_range(length_range.clone());
        let markers = rng.gen_range((len / 4).max(1)..=(len / 2).max(1));
        let min_major = (markers * 3).div_ceil(5);
        let major = rng.gen_range(min_major..=markers);
        let mut tokens: Vec<u32> = Vec::with_capacity(len);
        tokens.extend(std::iter::repeat_n(label as u32, major));
        for _ in major..markers {
            let mut other = rng.gen_range(0..num_classes - 1);
            if other >= label {
                other += 1;
            }
            tokens.push(other as u32);
        }
        while tokens.len() < len {
            tokens.push(rng.gen_range(num_classes as u32..v));
        }
        tokens.shuffle(&mut rng);
        let s = Sentence::from_vec_unchecked(tokens);
        debug_assert_eq!(synthetic_rule(&s, num_classes), label);
        samples.push((s, label));
    }
    LabeledDataset {
        samples,
        num_classes,
        alphabet,
    }
}
