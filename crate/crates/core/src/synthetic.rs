//! Seeded marker-token corpora for smoke runs and sanity checks.
//!
//! A post is positive for a question exactly when that question's marker
//! token occurs in it, so any model that can detect a token anywhere in the
//! sequence can separate the classes perfectly.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{LabelKey, LabeledExample, Language, Source};
use crate::embeddings::WordVectorFile;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub examples: usize,
    pub language: Language,
    /// Distinct filler words.
    pub filler_words: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Marker for question 1.
    pub abuse_marker: String,
    /// Marker for question 3, drawn independently of the first.
    pub explicit_marker: String,
    pub dimension: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            examples: 200,
            language: Language::En,
            filler_words: 60,
            min_tokens: 6,
            max_tokens: 16,
            abuse_marker: "zzabuse".into(),
            explicit_marker: "zzexplicit".into(),
            dimension: 300,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    fn filler(&self, i: usize) -> String {
        format!("filler{i}")
    }

    fn validate(&self) -> Result<()> {
        if self.examples < 2 || self.filler_words == 0 || self.min_tokens == 0 || self.max_tokens < self.min_tokens {
            return Err(Error::Config(format!("unusable synthetic corpus settings: {self:?}")));
        }
        Ok(())
    }
}

/// Exactly half the posts (rounded down) carry the abuse marker; the
/// explicit marker is assigned by an independent balanced draw.
pub fn generate_examples(spec: &SyntheticSpec) -> Result<Vec<LabeledExample>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let balanced = |rng: &mut ChaCha8Rng| {
        let mut v: Vec<u8> = (0..spec.examples).map(|i| u8::from(i < spec.examples / 2)).collect();
        v.shuffle(rng);
        v
    };
    let abuse = balanced(&mut rng);
    let explicit = balanced(&mut rng);
    let mut out = Vec::with_capacity(spec.examples);
    for i in 0..spec.examples {
        let len = rng.random_range(spec.min_tokens..=spec.max_tokens);
        let mut words: Vec<String> = (0..len)
            .map(|_| spec.filler(rng.random_range(0..spec.filler_words)))
            .collect();
        for (flag, marker) in [(abuse[i], &spec.abuse_marker), (explicit[i], &spec.explicit_marker)] {
            if flag == 1 {
                let at = rng.random_range(0..=words.len());
                words.insert(at, marker.clone());
            }
        }
        out.push(LabeledExample {
            id: Some(format!("syn{i:05}")),
            text: words.join(" "),
            language: spec.language,
            labels: BTreeMap::from([(LabelKey::Q1, abuse[i]), (LabelKey::Q3, explicit[i])]),
            source: Source::Uli,
        });
    }
    Ok(out)
}

/// Writes the examples in the multi-annotator layout (one row per post
/// and question). Each row gets a clear majority for its label plus one
/// dissenting vote and an unassigned cell.
pub fn write_annotation_csv(path: &Path, examples: &[LabeledExample], seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut header = vec!["id".to_string(), "text".into(), "language".into(), "key".into()];
    for lang in Language::ALL {
        header.extend(lang.annotator_columns());
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let csv_err = |e: csv::Error| Error::Config(format!("{}: {e}", path.display()));
    w.write_record(&header).map_err(csv_err)?;
    for (i, e) in examples.iter().enumerate() {
        let id = e.id.clone().unwrap_or_else(|| format!("row{i}"));
        for (key, &label) in &e.labels {
            let mut record = vec![
                id.clone(),
                e.text.clone(),
                e.language.code().into(),
                key.number().to_string(),
            ];
            for lang in Language::ALL {
                let cols = lang.annotator_columns().len();
                if lang != e.language {
                    record.extend(std::iter::repeat_n(String::new(), cols));
                    continue;
                }
                let mut votes = vec![label.to_string(); cols];
                votes[cols - 1] = String::new();
                votes[cols - 2] = (1 - label).to_string();
                votes.shuffle(&mut rng);
                record.extend(votes);
            }
            w.write_record(&record).map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Random vectors for every filler word, both markers and a few words that
/// never occur in the corpus.
pub fn generate_vectors(spec: &SyntheticSpec) -> Result<WordVectorFile> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x005e_ed0f_7ec7);
    let normal = Normal::new(0.0f32, 0.5).expect("valid normal");
    let mut file = WordVectorFile::new(spec.dimension);
    let mut words: Vec<String> = (0..spec.filler_words).map(|i| spec.filler(i)).collect();
    words.push(spec.abuse_marker.clone());
    words.push(spec.explicit_marker.clone());
    words.extend((0..5).map(|i| format!("unused{i}")));
    for word in words {
        let v: Vec<f32> = (0..spec.dimension).map(|_| normal.sample(&mut rng)).collect();
        file.insert(&word, &v)?;
    }
    Ok(file)
}

/// Writes `id,text` rows for unlabeled prediction input.
pub fn write_text_csv(path: &Path, examples: &[LabeledExample]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let csv_err = |e: csv::Error| Error::Config(format!("{}: {e}", path.display()));
    w.write_record(["id", "text"]).map_err(csv_err)?;
    for (i, e) in examples.iter().enumerate() {
        let id = e.id.clone().unwrap_or_else(|| format!("row{i}"));
        w.write_record([id.as_str(), e.text.as_str()]).map_err(csv_err)?;
    }
    let mut inner = w
        .into_inner()
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    inner.flush().map_err(|e| Error::io(path, e))
}
