//! k-fold cross-validation driver, per-epoch curves and fold ensembling.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, Tensor};
use crate::corpus::{kfold_indices, LabelKey, LabeledExample, Language};
use crate::embeddings::{build_matrix, EmbeddingTable, MissingRowInit, WordVectorFile};
use crate::error::{Error, Result};
use crate::metrics::ClassificationReport;
use crate::model::{labels_from_probabilities, ModelConfig, Network};
use crate::text::{build_vocab, encode, Preprocessor, Vocabulary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Task {
    /// Gendered abuse.
    One,
    /// Gendered abuse, with external corpora merged into the training data.
    Two,
    /// Gendered abuse and explicit content jointly.
    Three,
}

impl TryFrom<u8> for Task {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Task::One),
            2 => Ok(Task::Two),
            3 => Ok(Task::Three),
            other => Err(format!("task must be 1, 2 or 3, got {other}")),
        }
    }
}

impl From<Task> for u8 {
    fn from(t: Task) -> u8 {
        match t {
            Task::One => 1,
            Task::Two => 2,
            Task::Three => 3,
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.trim()
            .parse::<u8>()
            .map_err(|_| Error::Config(format!("task must be 1, 2 or 3, got `{s}`")))?
            .try_into()
            .map_err(Error::Config)
    }
}

impl Task {
    /// Label keys predicted by the task's output heads, in head order.
    pub fn default_heads(self) -> Vec<LabelKey> {
        match self {
            Task::One | Task::Two => vec![LabelKey::Q1],
            Task::Three => vec![LabelKey::Q1, LabelKey::Q3],
        }
    }

    pub fn default_batch_size(self) -> usize {
        match self {
            Task::Two => 64,
            _ => 32,
        }
    }

    pub fn default_epochs(self) -> usize {
        match self {
            Task::Two => 7,
            _ => 5,
        }
    }
}

/// How the fold models are combined at test time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestCombination {
    #[default]
    Ensemble,
    BestFold,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub task: Task,
    pub language: Language,
    pub folds: usize,
    /// Defaults by task when absent.
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    /// Overrides the task's head labels, e.g. `["3"]` to train the second
    /// Task 3 label as a single-task model.
    pub heads: Option<Vec<LabelKey>>,
    pub optimizer: AdamConfig,
    pub seed: u64,
    pub combination: TestCombination,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: Task::One,
            language: Language::En,
            folds: 5,
            batch_size: None,
            epochs: None,
            heads: None,
            optimizer: AdamConfig::default(),
            seed: 42,
            combination: TestCombination::Ensemble,
        }
    }
}

impl TrainConfig {
    pub fn for_task(task: Task, language: Language) -> Self {
        Self {
            task,
            language,
            ..Self::default()
        }
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size.unwrap_or(self.task.default_batch_size())
    }

    pub fn epochs(&self) -> usize {
        self.epochs.unwrap_or(self.task.default_epochs())
    }

    pub fn heads(&self) -> Vec<LabelKey> {
        self.heads.clone().unwrap_or_else(|| self.task.default_heads())
    }

    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::Config(format!("folds must be at least 2, got {}", self.folds)));
        }
        if self.batch_size() == 0 || self.epochs() == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        let heads = self.heads();
        if heads.is_empty() || heads.len() > 2 {
            return Err(Error::Config(format!("expected 1 or 2 heads, got {}", heads.len())));
        }
        if heads.len() == 2 && self.task != Task::Three {
            return Err(Error::Config("two heads are only defined for task 3".into()));
        }
        let unique: HashSet<_> = heads.iter().collect();
        if unique.len() != heads.len() {
            return Err(Error::Config("head labels must be distinct".into()));
        }
        Ok(())
    }
}

/// Index-encoded examples ready for batching.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub seq_len: usize,
    /// `n * seq_len` vocabulary indices.
    pub sequences: Vec<u32>,
    /// `labels[h][i]` is head `h`'s label for example `i`; empty when unlabeled.
    pub labels: Vec<Vec<u8>>,
}

impl Features {
    pub fn len(&self) -> usize {
        self.sequences.len() / self.seq_len
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn sequence(&self, i: usize) -> &[u32] {
        &self.sequences[i * self.seq_len..(i + 1) * self.seq_len]
    }

    /// Gathers rows into a flat batch and per-head label vectors.
    pub fn gather(&self, rows: &[usize]) -> (Vec<u32>, Vec<Vec<u8>>) {
        let mut seq = Vec::with_capacity(rows.len() * self.seq_len);
        for &r in rows {
            seq.extend_from_slice(self.sequence(r));
        }
        let labels = self
            .labels
            .iter()
            .map(|l| rows.iter().map(|&r| l[r]).collect())
            .collect();
        (seq, labels)
    }
}

pub fn tokenize_examples(examples: &[LabeledExample], pre: &Preprocessor) -> Result<Vec<Vec<String>>> {
    examples.iter().map(|e| pre.process(&e.text, e.language)).collect()
}

/// Per-head label columns; every example must carry every head's label.
pub fn collect_labels(examples: &[LabeledExample], heads: &[LabelKey]) -> Result<Vec<Vec<u8>>> {
    heads
        .iter()
        .map(|&key| {
            examples
                .iter()
                .enumerate()
                .map(|(i, e)| {
                    e.label(key).ok_or_else(|| {
                        Error::DataIntegrity(format!(
                            "example {} ({}) has no label {}",
                            i,
                            e.id.as_deref().unwrap_or("no id"),
                            key.number()
                        ))
                    })
                })
                .collect()
        })
        .collect()
}

pub fn encode_tokens(tokens: &[Vec<String>], vocab: &Vocabulary, seq_len: usize) -> Vec<u32> {
    let mut out = Vec::with_capacity(tokens.len() * seq_len);
    for t in tokens {
        out.extend(encode(t, vocab, seq_len).indices);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadReport {
    pub label: LabelKey,
    pub report: ClassificationReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    /// 0-based.
    pub fold: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub epochs: Vec<EpochRecord>,
    pub heads: Vec<HeadReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadAverage {
    pub label: LabelKey,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    /// Mean of per-class F1 values, reported for comparison only.
    pub mean_per_class_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub folds: Vec<FoldReport>,
    pub averages: Vec<HeadAverage>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub examples: usize,
    pub vocab_size: usize,
    pub embedding_coverage: f64,
}

impl RunReport {
    /// Fold whose validation macro-F1, averaged over heads, is highest.
    pub fn best_fold(&self) -> usize {
        let score = |f: &FoldReport| f.heads.iter().map(|h| h.report.macro_f1).sum::<f64>();
        let mut best = 0;
        for (i, f) in self.folds.iter().enumerate() {
            if score(f) > score(&self.folds[best]) {
                best = i;
            }
        }
        best
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub accuracy: f64,
    pub steps: usize,
}

/// One shuffled pass over `rows`; the final partial batch is trained too.
pub fn train_epoch(
    net: &mut Network<f32>,
    data: &Features,
    rows: &[usize],
    batch_size: usize,
    adam: &AdamConfig,
    rng: &mut ChaCha8Rng,
) -> Result<EpochStats> {
    let mut order = rows.to_vec();
    order.shuffle(rng);
    let (mut loss, mut correct, mut seen, mut steps) = (0.0, 0usize, 0usize, 0);
    for batch in order.chunks(batch_size) {
        let (seq, labels) = data.gather(batch);
        let out = net.train_step(&seq, &labels, adam, rng)?;
        loss += f64::from(out.loss) * batch.len() as f64;
        for (probs, gold) in out.probabilities.iter().zip(&labels) {
            let pred = labels_from_probabilities(probs);
            correct += pred.iter().zip(gold).filter(|(p, g)| p == g).count();
            seen += gold.len();
        }
        steps += 1;
    }
    Ok(EpochStats {
        loss: loss / rows.len() as f64,
        accuracy: correct as f64 / seen as f64,
        steps,
    })
}

/// Eval-mode mean loss, accuracy and per-head predictions on `rows`.
pub fn evaluate(net: &Network<f32>, data: &Features, rows: &[usize]) -> Result<(f64, f64, Vec<Vec<u8>>)> {
    let (seq, labels) = data.gather(rows);
    let probs = net.predict_proba(&seq)?;
    let mut loss = 0.0;
    let (mut correct, mut seen) = (0usize, 0usize);
    let mut preds = Vec::with_capacity(probs.len());
    let classes = net.config().classes_per_head;
    for (p, gold) in probs.iter().zip(&labels) {
        for (row, &g) in p.data().chunks_exact(classes).zip(gold) {
            loss -= f64::from(row[g as usize]).max(f64::from(f32::MIN_POSITIVE)).ln();
        }
        let pred = labels_from_probabilities(p);
        correct += pred.iter().zip(gold).filter(|(a, b)| a == b).count();
        seen += gold.len();
        preds.push(pred);
    }
    Ok((loss / seen as f64, correct as f64 / seen as f64, preds))
}

fn fold_rng(seed: u64, fold: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fold as u64 + 1);
    rng
}

fn train_fold(
    fold: usize,
    train_rows: &[usize],
    val_rows: &[usize],
    data: &Features,
    table: &Arc<EmbeddingTable>,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(FoldReport, Network<f32>)> {
    let val: HashSet<usize> = val_rows.iter().copied().collect();
    if train_rows.iter().any(|r| val.contains(r)) {
        return Err(Error::DataIntegrity(format!(
            "fold {fold} trains on its own validation rows"
        )));
    }
    let mut rng = fold_rng(cfg.seed, fold);
    let mut net = Network::build(model_cfg.clone(), table.clone(), &mut rng)?;
    let mut epochs = Vec::with_capacity(cfg.epochs());
    for epoch in 1..=cfg.epochs() {
        let stats = train_epoch(&mut net, data, train_rows, cfg.batch_size(), &cfg.optimizer, &mut rng)?;
        let (val_loss, val_accuracy, _) = evaluate(&net, data, val_rows)?;
        log::info!(
            "fold {fold} epoch {epoch}: loss {:.4} acc {:.4} val_loss {val_loss:.4} val_acc {val_accuracy:.4}",
            stats.loss,
            stats.accuracy
        );
        epochs.push(EpochRecord {
            epoch,
            train_loss: stats.loss,
            train_accuracy: stats.accuracy,
            val_loss,
            val_accuracy,
        });
    }
    let (_, _, preds) = evaluate(&net, data, val_rows)?;
    let heads = cfg
        .heads()
        .into_iter()
        .zip(preds)
        .enumerate()
        .map(|(h, (label, pred))| {
            let gold: Vec<usize> = val_rows.iter().map(|&r| data.labels[h][r] as usize).collect();
            let pred: Vec<usize> = pred.into_iter().map(usize::from).collect();
            let report = ClassificationReport::from_labels(&gold, &pred, model_cfg.classes_per_head)?;
            Ok(HeadReport { label, report })
        })
        .collect::<Result<_>>()?;
    let report = FoldReport {
        fold,
        train_size: train_rows.len(),
        val_size: val_rows.len(),
        epochs,
        heads,
    };
    Ok((report, net))
}

fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

/// Trains one fresh model per fold and evaluates it on its held-out fold.
/// Folds run in parallel on `threads` workers (0 picks the core count).
pub fn run_cv(
    data: &Features,
    table: Arc<EmbeddingTable>,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    threads: usize,
) -> Result<(RunReport, Vec<Network<f32>>)> {
    cfg.validate()?;
    let heads = cfg.heads();
    if model_cfg.num_heads != heads.len() {
        return Err(Error::Config(format!(
            "model has {} head(s), training config names {}",
            model_cfg.num_heads,
            heads.len()
        )));
    }
    if data.labels.len() != heads.len() || data.labels.iter().any(|l| l.len() != data.len()) {
        return Err(Error::DataIntegrity(
            "every example needs a label for every head".into(),
        ));
    }
    if data.seq_len != model_cfg.seq_len {
        return Err(Error::Config(format!(
            "features use seq_len {}, model expects {}",
            data.seq_len, model_cfg.seq_len
        )));
    }
    let assignment = kfold_indices(data.len(), cfg.folds, cfg.seed)?;
    let results: Vec<(FoldReport, Network<f32>)> = thread_pool(threads)?.install(|| {
        (0..cfg.folds)
            .into_par_iter()
            .map(|f| {
                let train = assignment.training(f);
                let val = assignment.validation(f);
                train_fold(f, &train, &val, data, &table, model_cfg, cfg)
            })
            .collect::<Result<_>>()
    })?;
    let (folds, models): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let averages = heads
        .iter()
        .enumerate()
        .map(|(h, &label)| {
            let mean = |f: fn(&ClassificationReport) -> f64| {
                folds.iter().map(|r: &FoldReport| f(&r.heads[h].report)).sum::<f64>() / folds.len() as f64
            };
            HeadAverage {
                label,
                macro_precision: mean(|r| r.macro_precision),
                macro_recall: mean(|r| r.macro_recall),
                macro_f1: mean(|r| r.macro_f1),
                mean_per_class_f1: mean(|r| r.mean_per_class_f1),
            }
        })
        .collect();
    let report = RunReport {
        folds,
        averages,
        model: model_cfg.clone(),
        train: cfg.clone(),
        examples: data.len(),
        vocab_size: table.rows(),
        embedding_coverage: table.coverage(),
    };
    Ok((report, models))
}

/// Vocabulary, frozen embedding table and encoded features for a training
/// partition.
pub struct PreparedData {
    pub vocab: Vocabulary,
    pub table: Arc<EmbeddingTable>,
    pub features: Features,
}

pub fn prepare_training_data(
    examples: &[LabeledExample],
    pre: &Preprocessor,
    vectors: &WordVectorFile,
    model_cfg: &ModelConfig,
    heads: &[LabelKey],
    missing: MissingRowInit,
) -> Result<PreparedData> {
    let tokens = tokenize_examples(examples, pre)?;
    let vocab = build_vocab(&tokens, pre.config().min_frequency)?;
    let table = Arc::new(build_matrix(&vocab, vectors, model_cfg.embed_dim, missing)?);
    let features = Features {
        seq_len: model_cfg.seq_len,
        sequences: encode_tokens(&tokens, &vocab, model_cfg.seq_len),
        labels: collect_labels(examples, heads)?,
    };
    Ok(PreparedData { vocab, table, features })
}

/// Element-wise mean of per-model, per-head probability tensors.
pub fn average_probabilities(per_model: &[Vec<Tensor<f32>>]) -> Result<Vec<Tensor<f32>>> {
    let first = per_model
        .first()
        .ok_or_else(|| Error::Config("no models to combine".into()))?;
    let n = per_model.len() as f32;
    let mut out = first.clone();
    for other in &per_model[1..] {
        if other.len() != out.len() {
            return Err(Error::Config("models disagree on head count".into()));
        }
        for (acc, t) in out.iter_mut().zip(other) {
            if acc.shape() != t.shape() {
                return Err(Error::Shape(format!(
                    "probability shapes {:?} and {:?}",
                    acc.shape(),
                    t.shape()
                )));
            }
            acc.add_assign(t);
        }
    }
    Ok(out.into_iter().map(|t| t.map(|v| v / n)).collect())
}

/// Averages eval-mode probabilities over the fold models, then takes the
/// per-head argmax (ties to class 1).
pub fn ensemble_predict(models: &[Network<f32>], sequences: &[u32]) -> Result<Vec<Vec<u8>>> {
    Ok(ensemble_proba(models, sequences)?
        .iter()
        .map(labels_from_probabilities)
        .collect())
}

pub fn ensemble_proba(models: &[Network<f32>], sequences: &[u32]) -> Result<Vec<Tensor<f32>>> {
    let first = models
        .first()
        .ok_or_else(|| Error::Config("no models to combine".into()))?;
    for m in &models[1..] {
        let (a, b) = (first.config(), m.config());
        let strip = |c: &ModelConfig| ModelConfig { seed: 0, ..c.clone() };
        if strip(a) != strip(b) {
            return Err(Error::Config(
                "fold models were trained under different configurations".into(),
            ));
        }
    }
    let per_model = models
        .iter()
        .map(|m| m.predict_proba(sequences))
        .collect::<Result<Vec<_>>>()?;
    average_probabilities(&per_model)
}

pub const CURVES_HEADER: [&str; 6] = ["fold", "epoch", "train_loss", "train_acc", "val_loss", "val_acc"];

/// Paths written by [`emit_curves`].
#[derive(Clone, Debug)]
pub struct CurveFiles {
    pub per_fold_csv: PathBuf,
    pub mean_csv: PathBuf,
    pub svg: PathBuf,
}

/// Epoch-wise mean over folds.
pub fn mean_curve(report: &RunReport) -> Vec<EpochRecord> {
    let epochs = report.folds.iter().map(|f| f.epochs.len()).min().unwrap_or(0);
    let k = report.folds.len() as f64;
    (0..epochs)
        .map(|e| {
            let mean = |f: fn(&EpochRecord) -> f64| report.folds.iter().map(|fold| f(&fold.epochs[e])).sum::<f64>() / k;
            EpochRecord {
                epoch: e + 1,
                train_loss: mean(|r| r.train_loss),
                train_accuracy: mean(|r| r.train_accuracy),
                val_loss: mean(|r| r.val_loss),
                val_accuracy: mean(|r| r.val_accuracy),
            }
        })
        .collect()
}

fn write_curve_csv<'a>(path: &Path, rows: impl Iterator<Item = (String, &'a EpochRecord)>) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Config(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(CURVES_HEADER).map_err(csv_err)?;
    for (fold, r) in rows {
        w.write_record([
            fold,
            r.epoch.to_string(),
            r.train_loss.to_string(),
            r.train_accuracy.to_string(),
            r.val_loss.to_string(),
            r.val_accuracy.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `curves.csv` (one row per fold and epoch), `curves_mean.csv`
/// (fold column `mean`) and `curves.svg` into `dir`.
pub fn emit_curves(report: &RunReport, dir: &Path) -> Result<CurveFiles> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = CurveFiles {
        per_fold_csv: dir.join("curves.csv"),
        mean_csv: dir.join("curves_mean.csv"),
        svg: dir.join("curves.svg"),
    };
    write_curve_csv(
        &files.per_fold_csv,
        report
            .folds
            .iter()
            .flat_map(|f| f.epochs.iter().map(move |r| (f.fold.to_string(), r))),
    )?;
    let mean = mean_curve(report);
    write_curve_csv(&files.mean_csv, mean.iter().map(|r| ("mean".to_string(), r)))?;
    let svg = render_svg(report, &mean);
    fs::write(&files.svg, svg).map_err(|e| Error::io(&files.svg, e))?;
    Ok(files)
}

/// Parses a per-fold curves CSV back into `(fold, record)` pairs.
pub fn read_curves(path: &Path) -> Result<Vec<(usize, EpochRecord)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let loc = || format!("{}:{}", path.display(), line + 2);
        let rec = rec.map_err(|e| Error::parse(loc(), e.to_string()))?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::parse(loc(), format!("bad value in column {}", CURVES_HEADER[i])))
        };
        let int = |i: usize| -> Result<usize> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::parse(loc(), format!("bad value in column {}", CURVES_HEADER[i])))
        };
        out.push((
            int(0)?,
            EpochRecord {
                epoch: int(1)?,
                train_loss: num(2)?,
                train_accuracy: num(3)?,
                val_loss: num(4)?,
                val_accuracy: num(5)?,
            },
        ));
    }
    Ok(out)
}

const PALETTE: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];

/// Two panels (accuracy, loss); per-fold validation curves plus the mean
/// train (dashed) and validation (thick) series.
fn render_svg(report: &RunReport, mean: &[EpochRecord]) -> String {
    let (w, h, pad) = (420.0, 300.0, 40.0);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{h}" font-family="sans-serif" font-size="11">"#,
        2.0 * w
    );
    type Series = fn(&EpochRecord) -> f64;
    let panels: [(&str, Series, Series); 2] = [
        ("accuracy", |r| r.train_accuracy, |r| r.val_accuracy),
        ("loss", |r| r.train_loss, |r| r.val_loss),
    ];
    let epochs = mean.len().max(1);
    for (p, (title, train, val)) in panels.iter().enumerate() {
        let x0 = p as f64 * w;
        let all = report
            .folds
            .iter()
            .flat_map(|f| &f.epochs)
            .flat_map(|r| [train(r), val(r)]);
        let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        let (lo, hi) = if lo.is_finite() && hi > lo {
            (lo, hi)
        } else {
            (0.0, 1.0)
        };
        let px = |e: usize| {
            x0 + pad
                + (w - 2.0 * pad)
                    * if epochs > 1 {
                        (e - 1) as f64 / (epochs - 1) as f64
                    } else {
                        0.5
                    }
        };
        let py = |v: f64| h - pad - (h - 2.0 * pad) * (v - lo) / (hi - lo);
        let _ = writeln!(
            s,
            r##"<g><text x="{}" y="20" text-anchor="middle">{title}</text><rect x="{}" y="{pad}" width="{}" height="{}" fill="none" stroke="#999"/><text x="{}" y="{}" text-anchor="end">{lo:.3}</text><text x="{}" y="{}" text-anchor="end">{hi:.3}</text><text x="{}" y="{}" text-anchor="middle">epoch</text></g>"##,
            x0 + w / 2.0,
            x0 + pad,
            w - 2.0 * pad,
            h - 2.0 * pad,
            x0 + pad - 4.0,
            h - pad,
            x0 + pad - 4.0,
            pad + 8.0,
            x0 + w / 2.0,
            h - 10.0
        );
        let line = |s: &mut String, pts: Vec<(f64, f64)>, colour: &str, width: f64, dash: &str| {
            let pts: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
            let _ = writeln!(
                s,
                r#"<polyline points="{}" fill="none" stroke="{colour}" stroke-width="{width}"{dash}/>"#,
                pts.join(" ")
            );
        };
        for fold in &report.folds {
            let pts = fold.epochs.iter().map(|r| (px(r.epoch), py(val(r)))).collect();
            line(&mut s, pts, PALETTE[fold.fold % PALETTE.len()], 1.0, "");
        }
        line(
            &mut s,
            mean.iter().map(|r| (px(r.epoch), py(train(r)))).collect(),
            "#000",
            2.0,
            r#" stroke-dasharray="5,3""#,
        );
        line(
            &mut s,
            mean.iter().map(|r| (px(r.epoch), py(val(r)))).collect(),
            "#000",
            2.5,
            "",
        );
    }
    s.push_str("</svg>\n");
    s
}
