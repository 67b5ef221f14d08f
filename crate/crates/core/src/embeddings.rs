//! Text-format word vector files (GloVe, FastText), a binary cache of
//! parsed files, and the frozen vocabulary-aligned embedding matrix.
//!
//! Text format: an optional `count dim` header line, then one word and
//! `dim` floats per line, whitespace separated. A first line with exactly
//! two integer fields is taken as the header.
//!
//! Cache format: `EMB1`, dimension (u32 LE), entry count (u64 LE), then per
//! entry the word length (u16 LE), the UTF-8 word bytes, and `dim` f32 LE
//! values.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::Vocabulary;

pub const CACHE_MAGIC: &[u8; 4] = b"EMB1";

#[derive(Clone, Debug, PartialEq)]
pub struct WordVectorFile {
    dimension: usize,
    words: Vec<String>,
    vectors: Vec<f32>,
    index: HashMap<String, usize>,
    had_header: bool,
}

impl WordVectorFile {
    pub fn new(dimension: usize) -> Self {
        WordVectorFile {
            dimension,
            words: Vec::new(),
            vectors: Vec::new(),
            index: HashMap::new(),
            had_header: false,
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn had_header(&self) -> bool {
        self.had_header
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn get(&self, word: &str) -> Option<&[f32]> {
        let row = *self.index.get(word)?;
        Some(&self.vectors[row * self.dimension..(row + 1) * self.dimension])
    }

    /// Adds or replaces `word`. Returns true when it replaced an entry.
    pub fn insert(&mut self, word: &str, vector: &[f32]) -> Result<bool> {
        if vector.len() != self.dimension {
            return Err(Error::Shape(format!(
                "vector for `{word}` has {} values, expected {}",
                vector.len(),
                self.dimension
            )));
        }
        if let Some(&row) = self.index.get(word) {
            self.vectors[row * self.dimension..(row + 1) * self.dimension].copy_from_slice(vector);
            return Ok(true);
        }
        self.index.insert(word.to_string(), self.words.len());
        self.words.push(word.to_string());
        self.vectors.extend_from_slice(vector);
        Ok(false)
    }

    /// Writes the text format (with a header line when `header` is set).
    pub fn write_text(&self, path: &Path, header: bool) -> Result<()> {
        let io = |e| Error::io(path, e);
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        if header {
            writeln!(w, "{} {}", self.len(), self.dimension).map_err(io)?;
        }
        for (i, word) in self.words.iter().enumerate() {
            w.write_all(word.as_bytes()).map_err(io)?;
            for v in &self.vectors[i * self.dimension..(i + 1) * self.dimension] {
                write!(w, " {v}").map_err(io)?;
            }
            w.write_all(b"\n").map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn write_cache(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        w.write_all(CACHE_MAGIC).map_err(io)?;
        w.write_all(&(self.dimension as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&(self.len() as u64).to_le_bytes()).map_err(io)?;
        for (i, word) in self.words.iter().enumerate() {
            let len = u16::try_from(word.len())
                .map_err(|_| Error::Config(format!("word longer than 65535 bytes: {word:.20}…")))?;
            w.write_all(&len.to_le_bytes()).map_err(io)?;
            w.write_all(word.as_bytes()).map_err(io)?;
            for v in &self.vectors[i * self.dimension..(i + 1) * self.dimension] {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn read_cache(path: &Path) -> Result<Self> {
        let corrupt = |what: &str| Error::Corrupt(format!("{}: {what}", path.display()));
        let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| corrupt("truncated header"))?;
        if &magic != CACHE_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4).map_err(|_| corrupt("truncated header"))?;
        r.read_exact(&mut b8).map_err(|_| corrupt("truncated header"))?;
        let dimension = u32::from_le_bytes(b4) as usize;
        let count = u64::from_le_bytes(b8) as usize;
        let mut out = WordVectorFile::new(dimension);
        let mut vector = vec![0f32; dimension];
        let mut raw = vec![0u8; dimension * 4];
        for n in 0..count {
            let mut b2 = [0u8; 2];
            r.read_exact(&mut b2)
                .map_err(|_| corrupt(&format!("truncated at entry {n}")))?;
            let mut word = vec![0u8; u16::from_le_bytes(b2) as usize];
            r.read_exact(&mut word)
                .map_err(|_| corrupt(&format!("truncated at entry {n}")))?;
            let word = String::from_utf8(word).map_err(|_| corrupt(&format!("entry {n} is not UTF-8")))?;
            r.read_exact(&mut raw)
                .map_err(|_| corrupt(&format!("truncated at entry {n}")))?;
            for (v, chunk) in vector.iter_mut().zip(raw.chunks_exact(4)) {
                *v = f32::from_le_bytes(chunk.try_into().unwrap());
            }
            out.insert(&word, &vector)?;
        }
        Ok(out)
    }
}

fn is_header(fields: &[&str]) -> bool {
    fields.len() == 2 && fields.iter().all(|f| f.parse::<u64>().is_ok())
}

/// Streams a text vector file. When `keep` is given, only those words are
/// stored (the file is still fully validated).
pub fn parse_vector_file_filtered(path: &Path, keep: Option<&HashSet<String>>) -> Result<WordVectorFile> {
    let reader = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut out: Option<WordVectorFile> = None;
    let mut had_header = false;
    let mut vector = Vec::new();
    let mut seen_any_line = false;
    for (n, line) in reader.lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if !seen_any_line {
            seen_any_line = true;
            if is_header(&fields) {
                had_header = true;
                continue;
            }
        }
        let at = || format!("{}:{line_no}", path.display());
        let (word, values) = (fields[0], &fields[1..]);
        let dimension = out.as_ref().map(|f| f.dimension).unwrap_or(values.len());
        if values.len() != dimension || dimension == 0 {
            return Err(Error::parse(
                at(),
                format!("expected {dimension} vector values, found {}", values.len()),
            ));
        }
        vector.clear();
        for v in values {
            vector.push(
                v.parse::<f32>()
                    .map_err(|_| Error::parse(at(), format!("non-numeric vector value `{v}`")))?,
            );
        }
        let file = out.get_or_insert_with(|| WordVectorFile::new(dimension));
        if keep.is_some_and(|k| !k.contains(word)) {
            continue;
        }
        if file.insert(word, &vector)? {
            log::warn!("{}: duplicate word `{word}`; keeping the later vector", at());
        }
    }
    let mut file = out.ok_or_else(|| Error::parse(path.display().to_string(), "no vectors in file"))?;
    file.had_header = had_header;
    Ok(file)
}

pub fn parse_vector_file(path: &Path) -> Result<WordVectorFile> {
    parse_vector_file_filtered(path, None)
}

/// Reads `path` as an `EMB1` cache when it starts with the magic bytes,
/// and as text otherwise.
pub fn load_vectors(path: &Path, keep: Option<&HashSet<String>>) -> Result<WordVectorFile> {
    let mut magic = [0u8; 4];
    let is_cache = File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_exact(&mut magic)
        .is_ok()
        && &magic == CACHE_MAGIC;
    if is_cache {
        WordVectorFile::read_cache(path)
    } else {
        parse_vector_file_filtered(path, keep)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MissingRowInit {
    /// Zero rows for tokens absent from the file.
    #[default]
    Zero,
    /// Seeded uniform(-0.05, 0.05) rows for tokens absent from the file.
    Uniform { seed: u64 },
}

/// Frozen `|V| x dim` matrix aligned to a vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    rows: usize,
    dim: usize,
    matrix: Vec<f32>,
    coverage: f64,
}

impl EmbeddingTable {
    pub fn from_matrix(rows: usize, dim: usize, matrix: Vec<f32>) -> Result<Self> {
        if matrix.len() != rows * dim {
            return Err(Error::Shape(format!(
                "embedding matrix has {} values, expected {rows}x{dim}",
                matrix.len()
            )));
        }
        Ok(EmbeddingTable {
            rows,
            dim,
            matrix,
            coverage: 1.0,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, index: usize) -> &[f32] {
        &self.matrix[index * self.dim..(index + 1) * self.dim]
    }

    pub fn matrix(&self) -> &[f32] {
        &self.matrix
    }

    /// Share of non-reserved vocabulary tokens found in the vector file.
    pub fn coverage(&self) -> f64 {
        self.coverage
    }

    pub fn trainable(&self) -> bool {
        false
    }

    /// Saves the table as an `EMB1` cache keyed by the vocabulary tokens.
    pub fn save(&self, vocab: &Vocabulary, path: &Path) -> Result<()> {
        let mut file = WordVectorFile::new(self.dim);
        file.insert(Vocabulary::PAD_TOKEN, self.row(0))?;
        file.insert(Vocabulary::OOV_TOKEN, self.row(1))?;
        for (i, w) in vocab.words().iter().enumerate() {
            file.insert(w, self.row(i + 2))?;
        }
        file.write_cache(path)
    }

    /// Loads a table saved with [`EmbeddingTable::save`] for `vocab`.
    pub fn load(vocab: &Vocabulary, path: &Path) -> Result<Self> {
        let file = WordVectorFile::read_cache(path)?;
        if file.len() != vocab.len() {
            return Err(Error::Corrupt(format!(
                "{} holds {} rows but the vocabulary has {}",
                path.display(),
                file.len(),
                vocab.len()
            )));
        }
        let mut table = EmbeddingTable::from_matrix(file.len(), file.dimension(), file.vectors)?;
        table.coverage = f64::NAN;
        Ok(table)
    }
}

/// Copies each vocabulary token's vector from `vectors`. Reserved rows are
/// zero; missing tokens follow `missing`.
pub fn build_matrix(
    vocab: &Vocabulary,
    vectors: &WordVectorFile,
    expected_dim: usize,
    missing: MissingRowInit,
) -> Result<EmbeddingTable> {
    if vectors.dimension() != expected_dim {
        return Err(Error::Config(format!(
            "vector file has dimension {}, model expects {expected_dim}",
            vectors.dimension()
        )));
    }
    let dim = expected_dim;
    let mut matrix = vec![0f32; vocab.len() * dim];
    let mut rng = match missing {
        MissingRowInit::Uniform { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        MissingRowInit::Zero => None,
    };
    let mut found = 0usize;
    for (i, word) in vocab.words().iter().enumerate() {
        let row = &mut matrix[(i + 2) * dim..(i + 3) * dim];
        match vectors.get(word) {
            Some(v) => {
                row.copy_from_slice(v);
                found += 1;
            }
            None => {
                if let Some(rng) = rng.as_mut() {
                    row.iter_mut().for_each(|x| *x = rng.random_range(-0.05..0.05));
                }
            }
        }
    }
    let words = vocab.words().len();
    Ok(EmbeddingTable {
        rows: vocab.len(),
        dim,
        matrix,
        coverage: if words == 0 { 0.0 } else { found as f64 / words as f64 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, contents: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, contents).unwrap();
        p
    }

    #[test]
    fn glove_style_no_header() {
        let dir = tempfile::tempdir().unwrap();
        let line = |w: &str| format!("{w} {}\n", vec!["0.5"; 300].join(" "));
        let p = write(dir.path(), "g.txt", &(line("a") + &line("b")));
        let f = parse_vector_file(&p).unwrap();
        assert_eq!((f.dimension(), f.len(), f.had_header()), (300, 2, false));
    }

    #[test]
    fn fasttext_header_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "f.vec", "2000000 3\nx 1 2 3\ny 4 5 6\n");
        let f = parse_vector_file(&p).unwrap();
        assert!(f.had_header());
        assert_eq!(f.dimension(), 3);
        assert_eq!(f.get("y").unwrap(), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn dimension_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "bad.txt", "x 1 2 3\ny 4 5\n");
        let err = parse_vector_file(&p).unwrap_err().to_string();
        assert!(err.contains(":2"), "{err}");
        let p = write(dir.path(), "nan.txt", "x 1 two 3\n");
        assert!(parse_vector_file(&p).unwrap_err().to_string().contains("non-numeric"));
        let p = write(dir.path(), "empty.txt", "");
        assert!(parse_vector_file(&p).is_err());
    }

    #[test]
    fn duplicates_keep_last() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "d.txt", "x 1 1\nx 2 2\n");
        let f = parse_vector_file(&p).unwrap();
        assert_eq!(f.len(), 1);
        assert_eq!(f.get("x").unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn matrix_rows_and_coverage() {
        let mut f = WordVectorFile::new(300);
        f.insert("abuse", &vec![0.25; 300]).unwrap();
        let vocab = Vocabulary::from_tokens(["abuse".to_string()]);
        let t = build_matrix(&vocab, &f, 300, MissingRowInit::Zero).unwrap();
        assert_eq!((t.rows(), t.dim()), (3, 300));
        assert_eq!(t.coverage(), 1.0);
        assert!(t.row(0).iter().chain(t.row(1)).all(|&x| x == 0.0));
        assert_eq!(t.row(2), f.get("abuse").unwrap());
        assert!(!t.trainable());

        let vocab = Vocabulary::from_tokens(["abuse".to_string(), "absent".to_string()]);
        let t = build_matrix(&vocab, &f, 300, MissingRowInit::Zero).unwrap();
        assert_eq!(t.coverage(), 0.5);
        assert!(t.row(3).iter().all(|&x| x == 0.0));
        let t = build_matrix(&vocab, &f, 300, MissingRowInit::Uniform { seed: 1 }).unwrap();
        assert!(t.row(3).iter().all(|&x| x.abs() <= 0.05) && t.row(3).iter().any(|&x| x != 0.0));
        assert!(t.row(1).iter().all(|&x| x == 0.0));

        assert!(matches!(
            build_matrix(&vocab, &f, 100, MissingRowInit::Zero),
            Err(Error::Config(_))
        ));
        let disjoint = Vocabulary::from_tokens(["zzz".to_string()]);
        assert_eq!(
            build_matrix(&disjoint, &f, 300, MissingRowInit::Zero)
                .unwrap()
                .coverage(),
            0.0
        );
    }

    #[test]
    fn cache_rejects_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let mut f = WordVectorFile::new(2);
        f.insert("ab", &[1.0, 2.0]).unwrap();
        let p = dir.path().join("c.bin");
        f.write_cache(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"EMB1");
        assert_eq!(bytes.len(), 4 + 4 + 8 + 2 + 2 + 8);
        std::fs::write(&p, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(WordVectorFile::read_cache(&p), Err(Error::Corrupt(_))));
    }
}
