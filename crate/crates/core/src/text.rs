//! Cleaning, tokenization, stopword filtering and fixed-length encoding.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::Language;
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const OOV: u32 = 1;
pub const DEFAULT_MAX_LEN: usize = 100;

const BUNDLED_EMOJI_RANGES: &str = include_str!("../data/emoji_ranges.txt");
const BUNDLED_STOPWORDS_EN: &str = include_str!("../data/stopwords/en.txt");
const BUNDLED_STOPWORDS_HI: &str = include_str!("../data/stopwords/hi.txt");
const BUNDLED_STOPWORDS_TA: &str = include_str!("../data/stopwords/ta.txt");

static URL: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\b(?:https?://|www\.)\S+").unwrap());
static MENTION: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"@\w+").unwrap());
static HTML_TAG: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"<[^>]*>").unwrap());
static HTML_ENTITY: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"&(?:#\d+|#x[0-9a-fA-F]+|[a-zA-Z]+);").unwrap());
static HASHTAG: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"#\w+").unwrap());

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HashtagMode {
    /// Drop the `#` and keep the word.
    KeepWord,
    /// Remove the whole hashtag.
    Drop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Per-language stopword files; languages without an entry use the
    /// bundled list.
    pub stopword_files: BTreeMap<Language, PathBuf>,
    pub remove_stopwords: bool,
    pub strip_urls: bool,
    pub strip_mentions: bool,
    pub strip_html: bool,
    pub hashtags: HashtagMode,
    pub lowercase_latin: bool,
    /// Range table file; the bundled table is used when absent.
    pub emoji_range_file: Option<PathBuf>,
    pub max_len: usize,
    pub min_frequency: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            stopword_files: BTreeMap::new(),
            remove_stopwords: true,
            strip_urls: true,
            strip_mentions: true,
            strip_html: true,
            hashtags: HashtagMode::KeepWord,
            lowercase_latin: true,
            emoji_range_file: None,
            max_len: DEFAULT_MAX_LEN,
            min_frequency: 1,
        }
    }
}

fn read_data_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Parses a stopword list: one token per line, `#` comments.
pub fn parse_stopwords(contents: &str) -> HashSet<String> {
    contents
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

/// Parses an emoji table: inclusive hex ranges `START-END` or single
/// codepoints, one per line, `#` comments.
pub fn parse_emoji_ranges(contents: &str) -> Result<Vec<(u32, u32)>> {
    let mut out = Vec::new();
    for (n, line) in contents.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || Error::parse(format!("emoji table line {}", n + 1), format!("bad range `{line}`"));
        let (lo, hi) = line.split_once('-').unwrap_or((line, line));
        let lo = u32::from_str_radix(lo.trim(), 16).map_err(|_| bad())?;
        let hi = u32::from_str_radix(hi.trim(), 16).map_err(|_| bad())?;
        if lo > hi {
            return Err(bad());
        }
        out.push((lo, hi));
    }
    Ok(out)
}

/// Letters, digits and combining marks. Indic blocks (Devanagari through
/// Sinhala) count as word characters except for the danda marks.
pub fn is_word_char(c: char) -> bool {
    let cp = c as u32;
    c.is_alphanumeric()
        || (0x0300..=0x036F).contains(&cp)
        || ((0x0900..=0x0DFF).contains(&cp) && cp != 0x0964 && cp != 0x0965)
}

fn is_latin(c: char) -> bool {
    let cp = c as u32;
    c.is_ascii_alphabetic()
        || ((0x00C0..=0x024F).contains(&cp) && cp != 0x00D7 && cp != 0x00F7)
        || (0x1E00..=0x1EFF).contains(&cp)
}

fn trim_symbols(token: &str) -> &str {
    token.trim_matches(|c: char| !is_word_char(c))
}

/// Loaded preprocessing state: config plus the stopword and emoji tables
/// it refers to.
#[derive(Clone, Debug)]
pub struct Preprocessor {
    config: PreprocessConfig,
    stopwords: HashMap<Language, HashSet<String>>,
    emoji: Vec<(u32, u32)>,
}

impl Preprocessor {
    pub fn new(config: PreprocessConfig) -> Result<Self> {
        let emoji = match &config.emoji_range_file {
            Some(path) => parse_emoji_ranges(&read_data_file(path)?)?,
            None => parse_emoji_ranges(BUNDLED_EMOJI_RANGES)?,
        };
        let mut stopwords = HashMap::new();
        for lang in Language::ALL {
            let list = match config.stopword_files.get(&lang) {
                Some(path) => {
                    let list = parse_stopwords(&read_data_file(path)?);
                    if list.is_empty() {
                        return Err(Error::Config(format!("stopword file {} is empty", path.display())));
                    }
                    list
                }
                None => parse_stopwords(match lang {
                    Language::En => BUNDLED_STOPWORDS_EN,
                    Language::Hi => BUNDLED_STOPWORDS_HI,
                    Language::Ta => BUNDLED_STOPWORDS_TA,
                }),
            };
            stopwords.insert(lang, list);
        }
        Ok(Preprocessor {
            config,
            stopwords,
            emoji,
        })
    }

    /// Preprocessor with the given stopword table only; languages missing
    /// from it have no list.
    pub fn with_stopwords(config: PreprocessConfig, stopwords: HashMap<Language, HashSet<String>>) -> Result<Self> {
        let mut p = Self::new(config)?;
        p.stopwords = stopwords;
        Ok(p)
    }

    pub fn config(&self) -> &PreprocessConfig {
        &self.config
    }

    fn is_emoji(&self, c: char) -> bool {
        let cp = c as u32;
        self.emoji.iter().any(|&(lo, hi)| (lo..=hi).contains(&cp))
    }

    fn clean_once(&self, text: &str) -> String {
        let cfg = &self.config;
        let mut s = text.to_string();
        if cfg.strip_html {
            s = HTML_TAG.replace_all(&s, " ").into_owned();
            s = HTML_ENTITY.replace_all(&s, " ").into_owned();
        }
        if cfg.strip_urls {
            s = URL.replace_all(&s, " ").into_owned();
        }
        if cfg.strip_mentions {
            s = MENTION.replace_all(&s, " ").into_owned();
        }
        s = match cfg.hashtags {
            HashtagMode::KeepWord => s.replace('#', " "),
            HashtagMode::Drop => HASHTAG.replace_all(&s, " ").into_owned(),
        };
        s.retain(|c| !self.is_emoji(c));

        let mut out = String::with_capacity(s.len());
        for token in s.split_whitespace() {
            let token = trim_symbols(token);
            if token.is_empty() {
                continue;
            }
            if !out.is_empty() {
                out.push(' ');
            }
            if cfg.lowercase_latin {
                for c in token.chars() {
                    if is_latin(c) {
                        out.extend(c.to_lowercase());
                    } else {
                        out.push(c);
                    }
                }
            } else {
                out.push_str(token);
            }
        }
        out
    }

    /// Removes URLs, mentions, markup, emoji and non-internal symbols,
    /// lowercases Latin letters, and collapses whitespace. Runs to a fixed
    /// point so that `clean(clean(x)) == clean(x)`.
    pub fn clean(&self, text: &str) -> String {
        let mut current = self.clean_once(text);
        loop {
            let next = self.clean_once(&current);
            if next == current {
                return current;
            }
            current = next;
        }
    }

    /// Order-preserving stopword filter.
    pub fn remove_stopwords(&self, tokens: Vec<String>, language: Language) -> Result<Vec<String>> {
        let list = self
            .stopwords
            .get(&language)
            .ok_or_else(|| Error::Config(format!("no stopword list for {language}")))?;
        Ok(tokens.into_iter().filter(|t| !list.contains(t)).collect())
    }

    /// `clean`, `tokenize`, then stopword removal when enabled.
    pub fn process(&self, text: &str, language: Language) -> Result<Vec<String>> {
        let tokens = tokenize(&self.clean(text));
        if self.config.remove_stopwords {
            self.remove_stopwords(tokens, language)
        } else {
            Ok(tokens)
        }
    }
}

/// Whitespace split; punctuation at token edges is split off and dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(trim_symbols)
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Token/index map. Index 0 is padding and 1 is the out-of-vocabulary
/// slot.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    min_frequency: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    min_frequency: usize,
    tokens: Vec<String>,
}

impl From<VocabFile> for Vocabulary {
    fn from(f: VocabFile) -> Self {
        let index = f
            .tokens
            .iter()
            .enumerate()
            .skip(2)
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary {
            tokens: f.tokens,
            index,
            min_frequency: f.min_frequency,
        }
    }
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        VocabFile {
            min_frequency: v.min_frequency,
            tokens: v.tokens,
        }
    }
}

impl Vocabulary {
    pub const PAD_TOKEN: &'static str = "<pad>";
    pub const OOV_TOKEN: &'static str = "<unk>";

    /// Builds from an explicit token list (reserved slots are prepended).
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Self {
        let mut all = vec![Self::PAD_TOKEN.to_string(), Self::OOV_TOKEN.to_string()];
        all.extend(tokens);
        VocabFile {
            min_frequency: 1,
            tokens: all,
        }
        .into()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 2
    }

    pub fn min_frequency(&self) -> usize {
        self.min_frequency
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn lookup(&self, token: &str) -> u32 {
        self.get(token).unwrap_or(OOV)
    }

    pub fn token(&self, index: u32) -> Option<&str> {
        self.tokens.get(index as usize).map(String::as_str)
    }

    /// Non-reserved tokens in index order.
    pub fn words(&self) -> &[String] {
        &self.tokens[2..]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// Assigns indices from 2 upward to tokens seen at least `min_frequency`
/// times, by descending frequency then lexicographically.
pub fn build_vocab(corpus: &[Vec<String>], min_frequency: usize) -> Result<Vocabulary> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for doc in corpus {
        for t in doc {
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::Config("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut kept: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, n)| n >= min_frequency.max(1)).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let mut vocab = Vocabulary::from_tokens(kept.into_iter().map(|(t, _)| t.to_string()));
    vocab.min_frequency = min_frequency;
    Ok(vocab)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedSequence {
    pub indices: Vec<u32>,
    pub true_length: usize,
}

/// Maps tokens to indices, keeping the first `max_len` and post-padding
/// with [`PAD`].
pub fn encode(tokens: &[String], vocab: &Vocabulary, max_len: usize) -> EncodedSequence {
    let mut indices: Vec<u32> = tokens.iter().take(max_len).map(|t| vocab.lookup(t)).collect();
    let true_length = indices.len();
    indices.resize(max_len, PAD);
    EncodedSequence { indices, true_length }
}
