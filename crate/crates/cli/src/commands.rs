use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use abuse_detect_core::corpus::{
    assemble_examples, load_external, merge_external, parse_uli_csv, read_dataset, split_train_test, write_dataset,
    LabelKey, LabeledExample, Language, Source,
};
use abuse_detect_core::embeddings::{build_matrix, load_vectors, EmbeddingTable, MissingRowInit};
use abuse_detect_core::model::{labels_from_probabilities, Network};
use abuse_detect_core::synthetic::{generate_examples, generate_vectors, write_annotation_csv, SyntheticSpec};
use abuse_detect_core::text::{Preprocessor, Vocabulary};
use abuse_detect_core::training::{
    emit_curves, encode_tokens, ensemble_proba, prepare_training_data, run_cv, tokenize_examples, RunReport, Task,
    TestCombination,
};
use abuse_detect_core::{metrics::ClassificationReport, Error, Result};
use serde::Serialize;

use crate::config::RunConfigFile;
use crate::submission;

const RUN_CONFIG: &str = "run_config.json";
const VOCAB: &str = "vocab.json";
const EMBEDDINGS: &str = "embeddings.emb";
const REPORT: &str = "report.json";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn fold_dir(run_dir: &Path, fold: usize) -> PathBuf {
    run_dir.join(format!("fold{fold}"))
}

#[derive(Serialize)]
struct PrepareStats {
    task: u8,
    language: Language,
    rows: usize,
    posts: usize,
    examples: usize,
    dropped: usize,
    external: usize,
    label_counts: BTreeMap<String, [usize; 2]>,
    train: usize,
    test: usize,
}

#[derive(Serialize)]
struct SplitManifest<'a> {
    seed: u64,
    ratio: f64,
    stratify_by: Option<LabelKey>,
    train_indices: &'a [usize],
    test_indices: &'a [usize],
    stats: &'a PrepareStats,
}

pub struct PrepareArgs {
    pub input: PathBuf,
    pub language: Language,
    pub task: Task,
    pub external: Vec<(Source, PathBuf)>,
    pub out: PathBuf,
    pub seed: u64,
    pub ratio: f64,
    pub stratify: bool,
}

pub fn prepare(args: PrepareArgs) -> Result<()> {
    if !args.external.is_empty() && args.task != Task::Two {
        return Err(Error::Config("external corpora are only merged for task 2".into()));
    }
    let rows: Vec<_> = parse_uli_csv(&args.input)?
        .into_iter()
        .filter(|r| r.language == args.language)
        .collect();
    let posts: HashSet<&str> = rows.iter().map(|r| r.id.as_str()).collect();
    let posts = posts.len();
    let heads = args.task.default_heads();
    let keys: BTreeSet<LabelKey> = heads.iter().copied().collect();
    let mut examples = assemble_examples(&rows, &keys)?;
    let assembled = examples.len();
    let mut external = 0;
    for (source, path) in &args.external {
        let extra = load_external(path, *source, args.language)?;
        external += extra.len();
        examples = merge_external(examples, extra)?;
    }
    let stratify_by = args.stratify.then_some(heads[0]);
    let split = split_train_test(&examples, args.ratio, args.seed, stratify_by)?;

    let mut label_counts = BTreeMap::new();
    for key in &heads {
        let mut counts = [0usize; 2];
        for e in &examples {
            if let Some(l) = e.label(*key) {
                counts[usize::from(l.min(1))] += 1;
            }
        }
        label_counts.insert(format!("label_{}", key.number()), counts);
    }
    let stats = PrepareStats {
        task: args.task.into(),
        language: args.language,
        rows: rows.len(),
        posts,
        examples: examples.len(),
        dropped: posts - assembled,
        external,
        label_counts,
        train: split.train.len(),
        test: split.test.len(),
    };

    fs::create_dir_all(&args.out).map_err(io_err(&args.out))?;
    write_dataset(&args.out.join("dataset.jsonl"), &examples)?;
    write_dataset(&args.out.join("train.jsonl"), &split.train)?;
    write_dataset(&args.out.join("test.jsonl"), &split.test)?;
    let manifest = SplitManifest {
        seed: args.seed,
        ratio: args.ratio,
        stratify_by,
        train_indices: &split.train_indices,
        test_indices: &split.test_indices,
        stats: &stats,
    };
    let path = args.out.join("split.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(io_err(&path))?;

    println!("language {} task {}", stats.language, stats.task);
    println!(
        "rows {}  posts {}  examples {}  dropped {}  external {}",
        stats.rows, stats.posts, stats.examples, stats.dropped, stats.external
    );
    for (name, [neg, pos]) in &stats.label_counts {
        println!("{name}: 0 -> {neg}, 1 -> {pos}");
    }
    println!("train {}  test {}", stats.train, stats.test);
    Ok(())
}

pub fn train(config: &Path, out_dir: Option<PathBuf>, seed: Option<u64>, threads: usize) -> Result<()> {
    let mut cfg = RunConfigFile::load(config)?;
    if let Some(dir) = out_dir {
        cfg.output_dir = dir;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
        cfg.model.seed = s;
    }
    cfg.train.validate()?;
    let heads = cfg.train.heads();
    cfg.model.num_heads = heads.len();
    let language = cfg.train.language;

    let all = read_dataset(&cfg.data.train)?;
    let total = all.len();
    let examples: Vec<LabeledExample> = all.into_iter().filter(|e| e.language == language).collect();
    if examples.len() != total {
        log::warn!("ignored {} example(s) not in {language}", total - examples.len());
    }
    let pre = Preprocessor::new(cfg.preprocess.clone())?;
    let words: HashSet<String> = tokenize_examples(&examples, &pre)?.into_iter().flatten().collect();
    let vectors = load_vectors(cfg.embeddings_for(language)?, Some(&words))?;
    let prepared = prepare_training_data(&examples, &pre, &vectors, &cfg.model, &heads, cfg.data.missing_rows)?;
    log::info!(
        "{} examples, vocabulary {}, embedding coverage {:.3}",
        examples.len(),
        prepared.vocab.len(),
        prepared.table.coverage()
    );
    let (report, mut models) = run_cv(
        &prepared.features,
        prepared.table.clone(),
        &cfg.model,
        &cfg.train,
        threads,
    )?;

    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let path = out.join(RUN_CONFIG);
    fs::write(&path, serde_json::to_vec_pretty(&cfg)?).map_err(io_err(&path))?;
    prepared.vocab.save(&out.join(VOCAB))?;
    prepared.table.save(&prepared.vocab, &out.join(EMBEDDINGS))?;
    for (f, m) in models.iter_mut().enumerate() {
        m.save_checkpoint(&fold_dir(out, f))?;
    }
    report.write_json(&out.join(REPORT))?;
    emit_curves(&report, out)?;
    print_summary(&report);
    Ok(())
}

fn print_summary(report: &RunReport) {
    println!(
        "{:<6} {:<6} {:>9} {:>9} {:>9}",
        "fold", "label", "precision", "recall", "macro-F1"
    );
    for f in &report.folds {
        for h in &f.heads {
            let r = &h.report;
            println!(
                "{:<6} {:<6} {:>9.4} {:>9.4} {:>9.4}",
                f.fold,
                h.label.number(),
                r.macro_precision,
                r.macro_recall,
                r.macro_f1
            );
        }
    }
    for a in &report.averages {
        println!(
            "{:<6} {:<6} {:>9.4} {:>9.4} {:>9.4}",
            "mean",
            a.label.number(),
            a.macro_precision,
            a.macro_recall,
            a.macro_f1
        );
    }
}

/// Prediction input: canonical JSON lines, or a CSV with `id` and `text`.
fn read_prediction_input(path: &Path, language: Language) -> Result<Vec<LabeledExample>> {
    if path.extension().is_some_and(|e| e == "jsonl" || e == "json") {
        return read_dataset(path);
    }
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Parse {
        location: path.display().to_string(),
        message: e.to_string(),
    })?;
    let headers = reader.headers().map_err(|e| Error::Parse {
        location: path.display().to_string(),
        message: e.to_string(),
    })?;
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Schema {
                path: path.display().to_string(),
                column: name.into(),
            })
    };
    let (id_col, text_col) = (col("id")?, col("text")?);
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            location: path.display().to_string(),
            message: e.to_string(),
        })?;
        out.push(LabeledExample {
            id: Some(record[id_col].to_string()),
            text: record[text_col].to_string(),
            language,
            labels: BTreeMap::new(),
            source: Source::Uli,
        });
    }
    Ok(out)
}

pub fn predict(run_dir: &Path, input: &Path, out: &Path, combination: Option<TestCombination>) -> Result<()> {
    let cfg: RunConfigFile = {
        let path = run_dir.join(RUN_CONFIG);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
    };
    let vocab = Vocabulary::load(&run_dir.join(VOCAB))?;
    let table = Arc::new(EmbeddingTable::load(&vocab, &run_dir.join(EMBEDDINGS))?);
    let folds: Vec<usize> = match combination.unwrap_or(cfg.train.combination) {
        TestCombination::Ensemble => (0..cfg.train.folds).collect(),
        TestCombination::BestFold => vec![RunReport::read_json(&run_dir.join(REPORT))?.best_fold()],
    };
    let models = folds
        .iter()
        .map(|&f| Network::<f32>::load_checkpoint(&fold_dir(run_dir, f), table.clone(), Some(cfg.model.seq_len)))
        .collect::<Result<Vec<_>>>()?;

    let examples = read_prediction_input(input, cfg.train.language)?;
    if examples.is_empty() {
        return Err(Error::DataIntegrity(format!("{} has no rows", input.display())));
    }
    let ids: Vec<String> = examples
        .iter()
        .enumerate()
        .map(|(i, e)| e.id.clone().unwrap_or_else(|| i.to_string()))
        .collect();
    let pre = Preprocessor::new(cfg.preprocess.clone())?;
    let tokens = tokenize_examples(&examples, &pre)?;
    let sequences = encode_tokens(&tokens, &vocab, cfg.model.seq_len);
    let probs = ensemble_proba(&models, &sequences)?;
    let labels: Vec<Vec<u8>> = probs.iter().map(labels_from_probabilities).collect();
    submission::write(out, &ids, &cfg.train.heads(), &labels)?;
    println!("wrote {} prediction(s) to {}", ids.len(), out.display());
    Ok(())
}

/// Gold labels from a canonical dataset (by label key) or a submission-style CSV.
fn read_gold(path: &Path, columns: &[String]) -> Result<submission::LabelTable> {
    if !path.extension().is_some_and(|e| e == "jsonl" || e == "json") {
        return submission::read(path);
    }
    let examples = read_dataset(path)?;
    let mut ids = Vec::with_capacity(examples.len());
    let mut table: BTreeMap<String, Vec<u8>> = columns.iter().map(|c| (c.clone(), Vec::new())).collect();
    for (i, e) in examples.iter().enumerate() {
        let id =
            e.id.clone()
                .ok_or_else(|| Error::DataIntegrity(format!("{}: record {} has no id", path.display(), i + 1)))?;
        for c in columns {
            let key = submission::column_key(c)?;
            let label = e.label(key).ok_or_else(|| {
                Error::DataIntegrity(format!("{}: id {id} has no label {}", path.display(), key.number()))
            })?;
            table.get_mut(c).expect("column").push(label);
        }
        ids.push(id);
    }
    Ok(submission::LabelTable { ids, columns: table })
}

pub fn evaluate(gold: &Path, pred: &Path) -> Result<()> {
    let pred = submission::read(pred)?;
    let names: Vec<String> = pred.columns.keys().cloned().collect();
    let gold = read_gold(gold, &names)?;
    let gold_ids: HashSet<&str> = gold.ids.iter().map(String::as_str).collect();
    let pred_ids: HashSet<&str> = pred.ids.iter().map(String::as_str).collect();
    let offenders: Vec<&str> = gold
        .ids
        .iter()
        .map(String::as_str)
        .filter(|id| !pred_ids.contains(id))
        .chain(pred.ids.iter().map(String::as_str).filter(|id| !gold_ids.contains(id)))
        .collect();
    if !offenders.is_empty() {
        let shown: Vec<&str> = offenders.iter().take(10).copied().collect();
        return Err(Error::DataIntegrity(format!(
            "{} id(s) are not shared by gold and predictions, first {}: {}",
            offenders.len(),
            shown.len(),
            shown.join(", ")
        )));
    }
    if gold.ids.len() != gold_ids.len() {
        return Err(Error::DataIntegrity("gold file repeats ids".into()));
    }
    let position: HashMap<&str, usize> = pred.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let mut reports = BTreeMap::new();
    for name in &names {
        let Some(g) = gold.columns.get(name) else {
            return Err(Error::Schema {
                path: "gold".into(),
                column: name.clone(),
            });
        };
        let p = &pred.columns[name];
        let golds: Vec<usize> = g.iter().map(|&v| usize::from(v)).collect();
        let preds: Vec<usize> = gold
            .ids
            .iter()
            .map(|id| usize::from(p[position[id.as_str()]]))
            .collect();
        reports.insert(name.clone(), ClassificationReport::from_labels(&golds, &preds, 2)?);
    }
    println!("{}", serde_json::to_string_pretty(&reports)?);
    Ok(())
}

pub fn inspect_embeddings(file: &Path, vocab: Option<&Path>) -> Result<()> {
    let vectors = load_vectors(file, None)?;
    println!("dimension: {}", vectors.dimension());
    println!("entries: {}", vectors.len());
    println!("header: {}", if vectors.had_header() { "yes" } else { "no" });
    if let Some(path) = vocab {
        let vocab = if path.extension().is_some_and(|e| e == "json") {
            Vocabulary::load(path)?
        } else {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            Vocabulary::from_tokens(text.split_whitespace().map(str::to_string))
        };
        let table = build_matrix(&vocab, &vectors, vectors.dimension(), MissingRowInit::Zero)?;
        println!("coverage: {:.4}", table.coverage());
    }
    Ok(())
}

pub fn synth(spec: SyntheticSpec, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let examples = generate_examples(&spec)?;
    let csv_path = out.join("annotations.csv");
    write_annotation_csv(&csv_path, &examples, spec.seed)?;
    let vec_path = out.join("vectors.vec");
    generate_vectors(&spec)?.write_text(&vec_path, true)?;
    println!("wrote {} and {}", csv_path.display(), vec_path.display());
    Ok(())
}
