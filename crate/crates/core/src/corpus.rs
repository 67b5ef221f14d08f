//! Dataset ingestion: the multi-annotator ULI CSV, the external MACD and
//! MULTILATE corpora, label aggregation, and seeded splitting.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    En,
    Hi,
    Ta,
}

impl Language {
    pub const ALL: [Language; 3] = [Language::En, Language::Hi, Language::Ta];

    pub fn code(self) -> &'static str {
        match self {
            Language::En => "en",
            Language::Hi => "hi",
            Language::Ta => "ta",
        }
    }

    /// Annotator columns for this language, in order.
    pub fn annotator_columns(self) -> Vec<String> {
        let n = match self {
            Language::Hi => 5,
            Language::En | Language::Ta => 6,
        };
        (1..=n).map(|i| format!("{}_a{i}", self.code())).collect()
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Language {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "en" | "english" => Ok(Language::En),
            "hi" | "hindi" => Ok(Language::Hi),
            "ta" | "tamil" => Ok(Language::Ta),
            other => Err(Error::Config(format!("unknown language `{other}`"))),
        }
    }
}

/// Which annotation question a row or label refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LabelKey {
    #[serde(rename = "1")]
    Q1,
    #[serde(rename = "2")]
    Q2,
    #[serde(rename = "3")]
    Q3,
}

impl LabelKey {
    pub fn number(self) -> u8 {
        match self {
            LabelKey::Q1 => 1,
            LabelKey::Q2 => 2,
            LabelKey::Q3 => 3,
        }
    }
}

impl FromStr for LabelKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let tail = s
            .strip_prefix("question_")
            .or_else(|| s.strip_prefix("question "))
            .or_else(|| s.strip_prefix("label_"))
            .unwrap_or(&s);
        match tail {
            "1" => Ok(LabelKey::Q1),
            "2" => Ok(LabelKey::Q2),
            "3" => Ok(LabelKey::Q3),
            _ => Err(Error::Config(format!("unknown label key `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Vote {
    Agree,
    Disagree,
    /// Assigned to the annotator but left unannotated ("NL").
    NotAnnotated,
    /// Never assigned (empty cell or "NaN").
    NotAssigned,
}

impl Vote {
    pub fn decode(cell: &str) -> Option<Vote> {
        match cell.trim() {
            "1" | "1.0" => Some(Vote::Agree),
            "0" | "0.0" => Some(Vote::Disagree),
            "NL" => Some(Vote::NotAnnotated),
            "" | "NaN" | "nan" => Some(Vote::NotAssigned),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawAnnotationRow {
    pub id: String,
    pub text: String,
    pub language: Language,
    pub key: LabelKey,
    /// `(annotator column, vote)` for every assigned annotator.
    pub votes: Vec<(String, Vote)>,
}

impl RawAnnotationRow {
    pub fn vote_values(&self) -> Vec<Vote> {
        self.votes.iter().map(|(_, v)| *v).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Uli,
    Macd,
    Multilate,
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "uli" => Ok(Source::Uli),
            "macd" => Ok(Source::Macd),
            "multilate" => Ok(Source::Multilate),
            other => Err(Error::Config(format!("unknown data source `{other}`"))),
        }
    }
}

/// One post with its aggregated binary labels. This is also the record
/// type of the canonical JSON-lines dataset file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub text: String,
    pub language: Language,
    pub labels: BTreeMap<LabelKey, u8>,
    pub source: Source,
}

impl LabeledExample {
    pub fn label(&self, key: LabelKey) -> Option<u8> {
        self.labels.get(&key).copied()
    }
}

fn open_csv(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(file))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let location = match e.position() {
        Some(pos) => format!("{}:{}", path.display(), pos.line()),
        None => path.display().to_string(),
    };
    Error::parse(location, e.to_string())
}

fn column(headers: &csv::StringRecord, path: &Path, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::Schema {
            path: path.display().to_string(),
            column: name.to_string(),
        })
}

/// Reads the ULI annotation CSV. Every record becomes one row; text is kept
/// as-is.
pub fn parse_uli_csv(path: &Path) -> Result<Vec<RawAnnotationRow>> {
    let mut reader = open_csv(path)?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let id_col = column(&headers, path, "id")?;
    let text_col = column(&headers, path, "text")?;
    let lang_col = column(&headers, path, "language")?;
    let key_col = column(&headers, path, "key")?;
    let groups: HashMap<Language, Vec<(String, Option<usize>)>> = Language::ALL
        .iter()
        .map(|&lang| {
            let cols = lang
                .annotator_columns()
                .into_iter()
                .map(|name| {
                    let idx = headers.iter().position(|h| h.trim() == name);
                    (name, idx)
                })
                .collect();
            (lang, cols)
        })
        .collect();
    if groups.values().flatten().all(|(_, idx)| idx.is_none()) {
        return Err(Error::Schema {
            path: path.display().to_string(),
            column: "en_a1".into(),
        });
    }

    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let id = record[id_col].trim().to_string();
        let here = || format!("{}:{line} (id {id})", path.display());
        let language: Language = record[lang_col]
            .parse()
            .map_err(|e: Error| Error::parse(here(), e.to_string()))?;
        let key: LabelKey = record[key_col]
            .parse()
            .map_err(|e: Error| Error::parse(here(), e.to_string()))?;
        let cols = &groups[&language];
        if cols.iter().all(|(_, idx)| idx.is_none()) {
            return Err(Error::Schema {
                path: path.display().to_string(),
                column: cols[0].0.clone(),
            });
        }
        let mut votes = Vec::new();
        for (name, idx) in cols {
            let Some(idx) = idx else { continue };
            let cell = &record[*idx];
            let vote = Vote::decode(cell)
                .ok_or_else(|| Error::parse(here(), format!("undecodable vote `{cell}` in column {name}")))?;
            if vote != Vote::NotAssigned {
                votes.push((name.clone(), vote));
            }
        }
        rows.push(RawAnnotationRow {
            id,
            text: record[text_col].to_string(),
            language,
            key,
            votes,
        });
    }
    Ok(rows)
}

/// Majority over Agree/Disagree votes; a tie goes to 1. `None` when there
/// is no countable vote.
pub fn aggregate_label(votes: &[Vote]) -> Option<u8> {
    let agree = votes.iter().filter(|v| **v == Vote::Agree).count();
    let disagree = votes.iter().filter(|v| **v == Vote::Disagree).count();
    match (agree, disagree) {
        (0, 0) => None,
        (a, d) if a >= d => Some(1),
        _ => Some(0),
    }
}

/// Joins the per-question rows of each post into one example carrying a
/// label for every requested key. Posts lacking any requested label are
/// left out.
pub fn assemble_examples(rows: &[RawAnnotationRow], keys: &BTreeSet<LabelKey>) -> Result<Vec<LabeledExample>> {
    let mut order: Vec<&str> = Vec::new();
    let mut grouped: HashMap<&str, Vec<&RawAnnotationRow>> = HashMap::new();
    for row in rows {
        let group = grouped.entry(row.id.as_str()).or_insert_with(|| {
            order.push(row.id.as_str());
            Vec::new()
        });
        if group.iter().any(|r| r.key == row.key) {
            return Err(Error::DataIntegrity(format!(
                "duplicate rows for id {} key question_{}",
                row.id,
                row.key.number()
            )));
        }
        group.push(row);
    }

    let mut out = Vec::new();
    'posts: for id in order {
        let group = &grouped[id];
        let mut labels = BTreeMap::new();
        for &key in keys {
            let Some(row) = group.iter().find(|r| r.key == key) else {
                continue 'posts;
            };
            match aggregate_label(&row.vote_values()) {
                Some(label) => {
                    labels.insert(key, label);
                }
                None => continue 'posts,
            }
        }
        out.push(LabeledExample {
            id: Some(id.to_string()),
            text: group[0].text.clone(),
            language: group[0].language,
            labels,
            source: Source::Uli,
        });
    }
    Ok(out)
}

/// MACD marks abusive rows with 0; flip onto the 1 = abusive convention.
pub fn remap_macd(raw: u8) -> u8 {
    1 - raw
}

/// Loads an external corpus (`text`, `label` columns) as label-1 examples
/// for `language`.
pub fn load_external(path: &Path, source: Source, language: Language) -> Result<Vec<LabeledExample>> {
    match (source, language) {
        (Source::Uli, _) => {
            return Err(Error::Config("ULI data is loaded with parse_uli_csv".into()));
        }
        (Source::Multilate, Language::Hi | Language::Ta) => {
            return Err(Error::Config(format!("MULTILATE is English-only, not {language}")));
        }
        (Source::Macd, Language::En) => {
            return Err(Error::Config("MACD has no English subset".into()));
        }
        _ => {}
    }
    let mut reader = open_csv(path)?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let text_col = column(&headers, path, "text")?;
    let label_col = column(&headers, path, "label")?;
    let prefix = match source {
        Source::Macd => "macd",
        _ => "multilate",
    };

    let mut out = Vec::new();
    for (index, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let raw = record[label_col].trim();
        let label = match (source, raw) {
            (Source::Macd, "0" | "0.0") => remap_macd(0),
            (Source::Macd, "1" | "1.0") => remap_macd(1),
            (Source::Multilate, r) if r.eq_ignore_ascii_case("hate") => 1,
            (Source::Multilate, r) if r.eq_ignore_ascii_case("not-hate") => 0,
            _ => {
                return Err(Error::parse(
                    format!("{} row {index}", path.display()),
                    format!("unknown {prefix} label `{raw}`"),
                ))
            }
        };
        out.push(LabeledExample {
            id: Some(format!("{prefix}-{index}")),
            text: record[text_col].to_string(),
            language,
            labels: BTreeMap::from([(LabelKey::Q1, label)]),
            source,
        });
    }
    Ok(out)
}

/// Plain concatenation, base first. No deduplication.
pub fn merge_external(base: Vec<LabeledExample>, extra: Vec<LabeledExample>) -> Result<Vec<LabeledExample>> {
    let languages: BTreeSet<Language> = base.iter().map(|e| e.language).collect();
    if !languages.is_empty() {
        if let Some(bad) = extra.iter().find(|e| !languages.contains(&e.language)) {
            return Err(Error::Config(format!(
                "external example in {} cannot be merged into {:?} data",
                bad.language, languages
            )));
        }
    }
    let mut out = base;
    out.extend(extra);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
    /// Positions of the train/test examples in the input list.
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
    pub seed: u64,
    pub ratio: f64,
}

fn test_count(n: usize, ratio: f64) -> usize {
    let raw = (n as f64 * (1.0 - ratio) + 1e-9).floor() as usize;
    raw.clamp(1, n - 1)
}

/// Seeded shuffle, then the first `ratio` share goes to training. With
/// `stratify_by`, each label value of that key is split separately.
pub fn split_train_test(
    examples: &[LabeledExample],
    ratio: f64,
    seed: u64,
    stratify_by: Option<LabelKey>,
) -> Result<DatasetSplit> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio {ratio} outside (0, 1)")));
    }
    if examples.len() < 2 {
        return Err(Error::Config(format!(
            "need at least 2 examples to split, got {}",
            examples.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let strata: Vec<Vec<usize>> = match stratify_by {
        None => vec![(0..examples.len()).collect()],
        Some(key) => {
            let mut by_label: BTreeMap<Option<u8>, Vec<usize>> = BTreeMap::new();
            for (i, e) in examples.iter().enumerate() {
                by_label.entry(e.label(key)).or_default().push(i);
            }
            by_label.into_values().collect()
        }
    };
    let mut train_indices = Vec::new();
    let mut test_indices = Vec::new();
    for mut stratum in strata {
        stratum.shuffle(&mut rng);
        let n_test = if stratum.len() < 2 {
            0
        } else {
            test_count(stratum.len(), ratio)
        };
        let cut = stratum.len() - n_test;
        train_indices.extend_from_slice(&stratum[..cut]);
        test_indices.extend_from_slice(&stratum[cut..]);
    }
    Ok(DatasetSplit {
        train: train_indices.iter().map(|&i| examples[i].clone()).collect(),
        test: test_indices.iter().map(|&i| examples[i].clone()).collect(),
        train_indices,
        test_indices,
        seed,
        ratio,
    })
}

/// Per-example fold membership.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub membership: Vec<usize>,
}

impl FoldAssignment {
    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.membership {
            sizes[f] += 1;
        }
        sizes
    }

    pub fn validation(&self, fold: usize) -> Vec<usize> {
        (0..self.membership.len())
            .filter(|&i| self.membership[i] == fold)
            .collect()
    }

    pub fn training(&self, fold: usize) -> Vec<usize> {
        (0..self.membership.len())
            .filter(|&i| self.membership[i] != fold)
            .collect()
    }
}

/// Balanced seeded fold assignment: after shuffling, position `p` goes to
/// fold `p % k`, so the first `n % k` folds hold one extra example.
pub fn kfold_indices(n: usize, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k == 0 || n < k {
        return Err(Error::Config(format!("cannot make {k} folds from {n} examples")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut membership = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        membership[i] = pos % k;
    }
    Ok(FoldAssignment { k, membership })
}

pub fn write_dataset(path: &Path, examples: &[LabeledExample]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for e in examples {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<LabeledExample>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let example = serde_json::from_str(&line)
            .map_err(|e| Error::parse(format!("{}:{}", path.display(), n + 1), e.to_string()))?;
        out.push(example);
    }
    Ok(out)
}
