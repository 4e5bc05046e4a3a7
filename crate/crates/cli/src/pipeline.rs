//! The pipeline commands and the work-directory layout they share.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;
use typerank_core::evaluation::{
    ablate, evaluate, is_unseen, predict, summarize_dataset, AblationMode, DatasetSummary, EvalInstance, MetricsReport,
    TestCase,
};
use typerank_core::gtr_inference::{Candidate, PredictionRecord, RankedPrediction};
use typerank_core::import_analysis::{CorpusIndex, TypeVisibility, VisibleTypeSet};
use typerank_core::seq_model::{checkpoint_bytes, read_checkpoint, ModelError, SeqModelParams, Vocab};
use typerank_core::source_model::{
    extract_functions, load_corpus_dir, load_corpus_jsonl, mask_annotations, Diagnostic, SourceFile, TrainingPair,
};
use typerank_core::synthetic::{self, HELDOUT_MANIFEST};
use typerank_core::training::{
    build_contrastive_dataset, train_contrastive, train_generative, DatasetRecord, TrainingError,
};
use typerank_core::type_lang::parse_type;

use crate::config::{ConfigError, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("missing prerequisite: {0}")]
    MissingPrerequisite(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{path}: line {line}: {message}")]
    Format { path: String, line: usize, message: String },
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.display().to_string(), source }
}

/// Every file the commands read or write, relative to the run config.
#[derive(Debug, Clone)]
pub struct Layout {
    pub corpus: PathBuf,
    pub workdir: PathBuf,
    pub checkpoints: PathBuf,
}

impl Layout {
    pub fn new(cfg: &RunConfig) -> Self {
        Layout {
            corpus: cfg.paths.corpus_root.clone(),
            workdir: cfg.paths.workdir.clone(),
            checkpoints: cfg.paths.checkpoints.clone(),
        }
    }
    fn dataset(&self, name: &str) -> PathBuf {
        self.workdir.join("dataset").join(name)
    }
    pub fn train_jsonl(&self) -> PathBuf {
        self.dataset("train.jsonl")
    }
    pub fn test_jsonl(&self) -> PathBuf {
        self.dataset("test.jsonl")
    }
    pub fn contrastive_jsonl(&self) -> PathBuf {
        self.dataset("contrastive.jsonl")
    }
    pub fn vocab_json(&self) -> PathBuf {
        self.dataset("vocab.json")
    }
    pub fn summary_txt(&self) -> PathBuf {
        self.dataset("summary.txt")
    }
    pub fn diagnostics_jsonl(&self) -> PathBuf {
        self.dataset("diagnostics.jsonl")
    }
    pub fn gen_ckpt(&self) -> PathBuf {
        self.checkpoints.join("gen.ckpt")
    }
    pub fn sim_ckpt(&self) -> PathBuf {
        self.checkpoints.join("sim.ckpt")
    }
    pub fn predictions(&self) -> PathBuf {
        self.workdir.join("predictions.jsonl")
    }
    pub fn report_txt(&self) -> PathBuf {
        self.workdir.join("report.txt")
    }
    pub fn report_json(&self) -> PathBuf {
        self.workdir.join("report.json")
    }
    pub fn ablation(&self, mode: AblationMode, ext: &str) -> PathBuf {
        self.workdir.join("ablation").join(format!("{}.{ext}", mode.name()))
    }
    pub fn ablation_table(&self) -> PathBuf {
        self.workdir.join("ablation").join("summary.txt")
    }
}

/// Writes to a sibling temp file, then renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(io_err(parent))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = parent.join(format!(".{name}.tmp"));
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn to_jsonl<T: Serialize>(items: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).expect("record serializes");
        out.push(b'\n');
    }
    out
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingPrerequisite(format!("{what} not found at {}", path.display())))
    }
}

fn read_jsonl<T: DeserializeOwned>(path: &Path, what: &str) -> Result<Vec<T>> {
    require(path, what)?;
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CliError::Format {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn read_model(path: &Path, what: &str) -> Result<SeqModelParams> {
    require(path, what)?;
    let mut f = fs::File::open(path).map_err(io_err(path))?;
    Ok(read_checkpoint(&mut f)?)
}

fn write_model(path: &Path, params: &SeqModelParams) -> Result<()> {
    atomic_write(path, &checkpoint_bytes(params))
}

/// Reads a corpus directory or a `.jsonl` corpus file.
pub fn load_corpus(root: &Path) -> Result<(Vec<SourceFile>, Vec<Diagnostic>)> {
    if root.is_file() {
        let text = fs::read_to_string(root).map_err(io_err(root))?;
        return Ok(load_corpus_jsonl(&text));
    }
    if !root.is_dir() {
        return Err(CliError::MissingPrerequisite(format!("corpus not found at {}", root.display())));
    }
    load_corpus_dir(root).map_err(io_err(root))
}

/// FNV-1a, used for the fallback split when no manifest is present.
fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3))
}

/// Qualified paths of held-out files: the corpus manifest when present,
/// otherwise every file whose path hashes into one tenth of the space.
pub fn heldout_files(root: &Path, files: &[SourceFile]) -> Result<BTreeSet<String>> {
    let manifest = root.join(HELDOUT_MANIFEST);
    if root.is_dir() && manifest.is_file() {
        let text = fs::read_to_string(&manifest).map_err(io_err(&manifest))?;
        return Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect());
    }
    log::info!("no {HELDOUT_MANIFEST}; splitting by path hash");
    Ok(files.iter().map(SourceFile::qualified_path).filter(|p| fnv1a(p).is_multiple_of(10)).collect())
}

fn record_id(pair: &TrainingPair) -> String {
    let f = &pair.input.function;
    let s = &pair.input.slot;
    format!("{}:{}:{}:{}:{}", f.file_path, f.line_span.0, s.var_kind.short_name(), s.var_name, s.occurrence_index)
}

fn summary_of(records: &[DatasetRecord]) -> DatasetSummary {
    summarize_dataset(records.iter().map(|r| (r.category, r.slot.kind, r.unseen)))
}

/// Extracts, masks and splits the corpus; builds the vocabulary from the
/// training split.
pub fn build_dataset(cfg: &RunConfig) -> Result<(DatasetSummary, DatasetSummary)> {
    let layout = Layout::new(cfg);
    let (files, mut diagnostics) = load_corpus(&layout.corpus)?;
    if files.is_empty() {
        return Err(CliError::MissingPrerequisite(format!("no Python files under {}", layout.corpus.display())));
    }
    let heldout = heldout_files(&layout.corpus, &files)?;
    let index = CorpusIndex::from_sources(&files);

    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut train_texts = Vec::new();
    for file in &files {
        let path = file.qualified_path();
        let extraction = extract_functions(&file.source, &path);
        diagnostics.extend(extraction.diagnostics);
        let visible = index.visible_for(&path).unwrap_or_default();
        let is_test = heldout.contains(&path);
        for func in &extraction.functions {
            let pairs = match mask_annotations(func) {
                Ok(p) => p,
                Err(e) => {
                    diagnostics.push(Diagnostic { file_path: path.clone(), error: format!("{}: {e}", func.name) });
                    continue;
                }
            };
            if !is_test {
                train_texts.push(func.source_text.clone());
            }
            for pair in &pairs {
                let rec = DatasetRecord::new(record_id(pair), pair, &visible, &[]);
                if is_test {
                    test.push(rec);
                } else {
                    train.push(rec);
                }
            }
        }
    }
    let train_keys: BTreeSet<String> =
        train.iter().filter_map(|r| parse_type(&r.expected_type).ok()).map(|t| t.key()).collect();
    for r in &mut test {
        r.unseen = parse_type(&r.expected_type).is_ok_and(|t| is_unseen(&t, r.category, &train_keys));
    }
    let vocab = Vocab::build(train_texts.iter().map(String::as_str), cfg.model.min_df, cfg.model.n_buckets);
    log::info!(
        "{} files, {} train / {} test instances, vocabulary {} tokens + {} buckets, {} diagnostics",
        files.len(),
        train.len(),
        test.len(),
        vocab.tokens.len(),
        vocab.n_buckets,
        diagnostics.len()
    );

    let (train_summary, test_summary) = (summary_of(&train), summary_of(&test));
    let summary = format!("train\n{}\ntest\n{}", train_summary.to_table(), test_summary.to_table());
    atomic_write(&layout.train_jsonl(), &to_jsonl(&train))?;
    atomic_write(&layout.test_jsonl(), &to_jsonl(&test))?;
    atomic_write(&layout.vocab_json(), &serde_json::to_vec(&vocab).expect("vocab serializes"))?;
    atomic_write(&layout.summary_txt(), summary.as_bytes())?;
    atomic_write(&layout.diagnostics_jsonl(), &to_jsonl(&diagnostics))?;
    Ok((train_summary, test_summary))
}

fn read_vocab(path: &Path) -> Result<Vocab> {
    require(path, "vocabulary (run build-dataset)")?;
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut vocab: Vocab = serde_json::from_slice(&bytes).map_err(|e| CliError::Format {
        path: path.display().to_string(),
        line: 1,
        message: e.to_string(),
    })?;
    vocab.reindex();
    Ok(vocab)
}

/// Trains the generation model from a fresh initialization.
pub fn train_gen(cfg: &RunConfig) -> Result<Vec<f64>> {
    let layout = Layout::new(cfg);
    let records: Vec<DatasetRecord> = read_jsonl(&layout.train_jsonl(), "training set (run build-dataset)")?;
    let vocab = read_vocab(&layout.vocab_json())?;
    let pairs: Vec<TrainingPair> = records.iter().map(DatasetRecord::training_pair).collect();
    let init = SeqModelParams::init(vocab, cfg.model.dims, cfg.hyper.seed);
    log::info!("generation model: {} parameters, {} pairs", init.n_params(), pairs.len());
    let trained = train_generative(&init, &pairs, &cfg.hyper)?;
    write_model(&layout.gen_ckpt(), &trained.params)?;
    Ok(trained.epoch_losses)
}

/// Every `stride`-th instance so that at most `cap` remain; `cap == 0` keeps
/// all.
fn subsample<T: Clone>(items: &[T], cap: usize) -> Vec<T> {
    if cap == 0 || items.len() <= cap {
        return items.to_vec();
    }
    (0..cap).map(|i| items[i * items.len() / cap].clone()).collect()
}

/// Samples contrastive negatives with the generation model, then fine-tunes
/// a copy of it as the similarity model.
pub fn train_sim(cfg: &RunConfig) -> Result<Vec<f64>> {
    let layout = Layout::new(cfg);
    let gen = read_model(&layout.gen_ckpt(), "generation checkpoint (run train-gen)")?;
    let records: Vec<DatasetRecord> = read_jsonl(&layout.train_jsonl(), "training set (run build-dataset)")?;
    let records = subsample(&records, cfg.sim.max_instances);
    let visibility: BTreeMap<String, VisibleTypeSet> =
        records.iter().map(|r| (r.file_path.clone(), r.visible())).collect();
    let pairs: Vec<TrainingPair> = records.iter().map(DatasetRecord::training_pair).collect();
    let instances = build_contrastive_dataset(&pairs, &gen, &visibility, cfg.hyper.beam_k, cfg.hyper.seed)?;
    let out: Vec<DatasetRecord> = records
        .iter()
        .zip(&instances)
        .map(|(r, c)| DatasetRecord { negatives: c.negatives.clone(), ..r.clone() })
        .collect();
    atomic_write(&layout.contrastive_jsonl(), &to_jsonl(&out))?;
    log::info!("similarity model: {} contrastive instances", instances.len());
    let trained = train_contrastive(&gen, &instances, &cfg.sim_hyper())?;
    write_model(&layout.sim_ckpt(), &trained.params)?;
    Ok(trained.epoch_losses)
}

fn test_cases(records: &[DatasetRecord]) -> Result<Vec<TestCase>> {
    records
        .iter()
        .map(|r| {
            let gold = parse_type(&r.expected_type)
                .map_err(|e| CliError::Data(format!("{}: gold {:?}: {e}", r.id, r.expected_type)))?;
            Ok(TestCase {
                id: r.id.clone(),
                func: r.type_missed(),
                gold,
                category: r.category,
                unseen: r.unseen,
                visible: r.visible(),
            })
        })
        .collect()
}

struct Models {
    gen: SeqModelParams,
    sim: SeqModelParams,
    cases: Vec<TestCase>,
}

fn load_models(layout: &Layout) -> Result<Models> {
    let gen = read_model(&layout.gen_ckpt(), "generation checkpoint (run train-gen)")?;
    let sim = read_model(&layout.sim_ckpt(), "similarity checkpoint (run train-sim)")?;
    let records: Vec<DatasetRecord> = read_jsonl(&layout.test_jsonl(), "test set (run build-dataset)")?;
    Ok(Models { gen, sim, cases: test_cases(&records)? })
}

fn mode_of(cfg: &RunConfig) -> AblationMode {
    cfg.mode.map(|m| m.mode()).unwrap_or(AblationMode::Full)
}

/// Ranks candidates for every test instance.
pub fn infer(cfg: &RunConfig) -> Result<usize> {
    let layout = Layout::new(cfg);
    let m = load_models(&layout)?;
    let mode = mode_of(cfg);
    let mut out = Vec::with_capacity(m.cases.len());
    for case in &m.cases {
        let prediction = predict(mode, &m.gen, &m.sim, case, cfg.hyper.beam_k)?;
        out.push(PredictionRecord::new(case.id.clone(), case.func.function.file_path.clone(), &prediction));
    }
    atomic_write(&layout.predictions(), &to_jsonl(&out))?;
    log::info!("{} predictions ({})", out.len(), mode.name());
    Ok(out.len())
}

fn prediction_of(rec: &PredictionRecord) -> Result<RankedPrediction> {
    let candidates = rec
        .ranked
        .iter()
        .map(|e| {
            let t = parse_type(&e.type_text)
                .map_err(|err| CliError::Data(format!("{}: candidate {:?}: {err}", rec.id, e.type_text)))?;
            Ok(Candidate { type_expr: t, origin: e.origin, lik: e.lik, sim: e.sim, score: e.score })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RankedPrediction { slot: rec.slot.clone(), candidates })
}

fn write_report(txt: &Path, json: &Path, report: &MetricsReport) -> Result<()> {
    atomic_write(txt, report.to_table().as_bytes())?;
    let mut bytes = serde_json::to_vec_pretty(&report.to_json()).expect("report serializes");
    bytes.push(b'\n');
    atomic_write(json, &bytes)
}

/// Scores `predictions.jsonl` against the gold types of the test set.
pub fn eval(cfg: &RunConfig) -> Result<MetricsReport> {
    let layout = Layout::new(cfg);
    let records: Vec<DatasetRecord> = read_jsonl(&layout.test_jsonl(), "test set (run build-dataset)")?;
    let predictions: Vec<PredictionRecord> = read_jsonl(&layout.predictions(), "predictions (run infer)")?;
    let by_id: HashMap<&str, &PredictionRecord> = predictions.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut instances = Vec::with_capacity(records.len());
    for case in test_cases(&records)? {
        let prediction = match by_id.get(case.id.as_str()) {
            Some(p) => prediction_of(p)?,
            None => {
                log::warn!("{}: no prediction, counted as a miss", case.id);
                RankedPrediction { slot: case.func.slot.clone(), candidates: Vec::new() }
            }
        };
        instances.push(EvalInstance {
            id: case.id,
            gold: case.gold,
            prediction,
            type_category: case.category,
            var_kind: case.func.slot.var_kind,
            unseen: case.unseen,
        });
    }
    let report = evaluate(&instances, &cfg.ks);
    write_report(&layout.report_txt(), &layout.report_json(), &report)?;
    Ok(report)
}

/// Runs the configured mode, or all three, over the test set.
pub fn run_ablation(cfg: &RunConfig) -> Result<Vec<(AblationMode, MetricsReport)>> {
    let layout = Layout::new(cfg);
    let m = load_models(&layout)?;
    let modes = match cfg.mode {
        Some(mode) => vec![mode.mode()],
        None => vec![AblationMode::Full, AblationMode::GeneratingOnly, AblationMode::RankingOnly],
    };
    let mut reports = Vec::new();
    for mode in modes {
        let (report, _) = ablate(mode, &m.gen, &m.sim, &m.cases, cfg.hyper.beam_k, &cfg.ks)?;
        write_report(&layout.ablation(mode, "txt"), &layout.ablation(mode, "json"), &report)?;
        reports.push((mode, report));
    }
    let table = ablation_table(&reports);
    atomic_write(&layout.ablation_table(), table.as_bytes())?;
    Ok(reports)
}

/// Top-k EM per mode for the overall and user-defined buckets.
pub fn ablation_table(reports: &[(AblationMode, MetricsReport)]) -> String {
    use typerank_core::evaluation::Bucket;
    let mut out = String::new();
    let Some((_, first)) = reports.first() else { return out };
    let _ = write!(out, "{:<18}", "mode");
    for k in &first.ks {
        let _ = write!(out, "{:>10}{:>10}", format!("All@{k}"), format!("Usr@{k}"));
    }
    out.push('\n');
    for (mode, r) in reports {
        let _ = write!(out, "{:<18}", mode.name());
        for &k in &r.ks {
            let _ = write!(out, "{:>10.1}{:>10.1}", r.em_at(Bucket::All, k), r.em_at(Bucket::Usr, k));
        }
        out.push('\n');
    }
    out
}

/// Outputs of a `demo` run.
pub struct DemoOutcome {
    pub report: MetricsReport,
    pub ablation: Vec<(AblationMode, MetricsReport)>,
}

/// Generates the synthetic corpus under `workdir/corpus` and runs every
/// stage on it.
pub fn demo(cfg: &RunConfig) -> Result<DemoOutcome> {
    let mut cfg = cfg.clone();
    cfg.paths.corpus_root = cfg.paths.workdir.join("corpus");
    let corpus_root = &cfg.paths.corpus_root;
    if corpus_root.exists() {
        fs::remove_dir_all(corpus_root).map_err(io_err(corpus_root))?;
    }
    let corpus = synthetic::generate(&cfg.synthetic_config());
    synthetic::write_corpus(&corpus, corpus_root).map_err(io_err(corpus_root))?;
    log::info!("synthetic corpus: {} files, {} user types", corpus.files.len(), corpus.user_types.len());

    let (_, test_summary) = build_dataset(&cfg)?;
    log::info!("test split:\n{}", test_summary.to_table());
    train_gen(&cfg)?;
    train_sim(&cfg)?;
    infer(&cfg)?;
    let report = eval(&cfg)?;
    let ablation_cfg = RunConfig { mode: None, ..cfg.clone() };
    let ablation = run_ablation(&ablation_cfg)?;
    Ok(DemoOutcome { report, ablation })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subsample_is_even_and_bounded() {
        let v: Vec<usize> = (0..10).collect();
        assert_eq!(subsample(&v, 0), v);
        assert_eq!(subsample(&v, 20), v);
        assert_eq!(subsample(&v, 4), vec![0, 2, 5, 7]);
    }

    #[test]
    fn atomic_write_replaces_and_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.txt");
        atomic_write(&p, b"one").unwrap();
        atomic_write(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        let names: Vec<_> = fs::read_dir(p.parent().unwrap()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names.len(), 1);
    }

    #[test]
    fn missing_prerequisites_exit_one() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.paths.workdir = dir.path().to_path_buf();
        cfg.paths.checkpoints = dir.path().join("checkpoints");
        cfg.paths.corpus_root = dir.path().join("nope");
        for r in [build_dataset(&cfg).map(|_| ()), train_gen(&cfg).map(|_| ()), train_sim(&cfg).map(|_| ())] {
            let e = r.unwrap_err();
            assert!(matches!(e, CliError::MissingPrerequisite(_)), "{e}");
            assert_eq!(e.exit_code(), 1);
        }
    }
}
