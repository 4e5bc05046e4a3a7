//! Top-k Exact Match / Base Match with category breakdowns, the ablation
//! modes and dataset summaries.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::gtr_inference::{build_pool, Origin, RankedPrediction, ScoreTerms, Scorer};
use crate::import_analysis::VisibleTypeSet;
use crate::seq_model::{ModelError, SeqModelParams};
use crate::source_model::{TypeMissedFunction, VarKind};
use crate::type_lang::{match_types, parse_type, TypeCategory, TypeExpr};

pub const DEFAULT_KS: [usize; 3] = [1, 3, 5];

/// Reference split sizes of the public benchmark the method was evaluated
/// on. Documentation only; nothing here reproduces them.
pub const REFERENCE_TRAIN_INSTANCES: usize = 242_954;
pub const REFERENCE_TEST_INSTANCES: usize = 10_000;
pub const REFERENCE_UNSEEN_INSTANCES: usize = 579;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalInstance {
    pub id: String,
    pub gold: TypeExpr,
    pub prediction: RankedPrediction,
    pub type_category: TypeCategory,
    pub var_kind: VarKind,
    /// Gold is user-defined and absent from the training annotations.
    pub unseen: bool,
}

/// `true` iff `gold` is user-defined and its normalized text is not among
/// `train_keys`.
pub fn is_unseen(gold: &TypeExpr, category: TypeCategory, train_keys: &BTreeSet<String>) -> bool {
    category == TypeCategory::UserDefined && !train_keys.contains(&gold.key())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Bucket {
    All,
    Ele,
    Gen,
    Usr,
    Unseen,
    Var,
    Arg,
    Ret,
}

impl Bucket {
    pub const ALL: [Bucket; 8] =
        [Bucket::All, Bucket::Ele, Bucket::Gen, Bucket::Usr, Bucket::Unseen, Bucket::Var, Bucket::Arg, Bucket::Ret];

    pub fn name(self) -> &'static str {
        match self {
            Bucket::All => "All",
            Bucket::Ele => "Ele",
            Bucket::Gen => "Gen",
            Bucket::Usr => "Usr",
            Bucket::Unseen => "Unseen",
            Bucket::Var => "Var",
            Bucket::Arg => "Arg",
            Bucket::Ret => "Ret",
        }
    }

    fn contains(self, category: TypeCategory, var_kind: VarKind, unseen: bool) -> bool {
        match self {
            Bucket::All => true,
            Bucket::Ele => category == TypeCategory::Elementary,
            Bucket::Gen => category == TypeCategory::Generic,
            Bucket::Usr => category == TypeCategory::UserDefined,
            Bucket::Unseen => unseen,
            Bucket::Var => var_kind == VarKind::Local,
            Bucket::Arg => var_kind == VarKind::Arg,
            Bucket::Ret => var_kind == VarKind::Ret,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketMetrics {
    pub bucket: Bucket,
    pub count: usize,
    /// Hits per k, aligned with [`MetricsReport::ks`].
    pub em_hits: Vec<usize>,
    pub bm_hits: Vec<usize>,
}

fn pct(hits: usize, count: usize) -> f64 {
    if count == 0 {
        0.0
    } else {
        100.0 * hits as f64 / count as f64
    }
}

impl BucketMetrics {
    pub fn em(&self, i: usize) -> f64 {
        pct(self.em_hits[i], self.count)
    }

    pub fn bm(&self, i: usize) -> f64 {
        pct(self.bm_hits[i], self.count)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ks: Vec<usize>,
    pub buckets: Vec<BucketMetrics>,
}

impl MetricsReport {
    pub fn bucket(&self, b: Bucket) -> &BucketMetrics {
        self.buckets.iter().find(|m| m.bucket == b).expect("every bucket is present")
    }

    fn k_index(&self, k: usize) -> usize {
        self.ks.iter().position(|&x| x == k).unwrap_or_else(|| panic!("k={k} not in report"))
    }

    /// Exact-match percentage at `k` in bucket `b`.
    pub fn em_at(&self, b: Bucket, k: usize) -> f64 {
        self.bucket(b).em(self.k_index(k))
    }

    pub fn bm_at(&self, b: Bucket, k: usize) -> f64 {
        self.bucket(b).bm(self.k_index(k))
    }

    /// Aligned plain-text table, percentages to one decimal place.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<8}{:>7}", "bucket", "n");
        for k in &self.ks {
            let _ = write!(out, "{:>9}{:>9}", format!("EM@{k}"), format!("BM@{k}"));
        }
        out.push('\n');
        for m in &self.buckets {
            let _ = write!(out, "{:<8}{:>7}", m.bucket.name(), m.count);
            for i in 0..self.ks.len() {
                let _ = write!(out, "{:>9.1}{:>9.1}", m.em(i), m.bm(i));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_json(&self) -> serde_json::Value {
        let buckets: Vec<_> = self
            .buckets
            .iter()
            .map(|m| {
                let em: serde_json::Map<_, _> = self
                    .ks
                    .iter()
                    .enumerate()
                    .map(|(i, k)| (format!("top{k}"), serde_json::json!(round1(m.em(i)))))
                    .collect();
                let bm: serde_json::Map<_, _> = self
                    .ks
                    .iter()
                    .enumerate()
                    .map(|(i, k)| (format!("top{k}"), serde_json::json!(round1(m.bm(i)))))
                    .collect();
                serde_json::json!({ "bucket": m.bucket.name(), "count": m.count, "em": em, "bm": bm })
            })
            .collect();
        serde_json::json!({ "ks": self.ks, "buckets": buckets })
    }
}

fn round1(v: f64) -> f64 {
    (v * 10.0).round() / 10.0
}

/// Top-k EM and BM for every bucket.
pub fn evaluate(instances: &[EvalInstance], ks: &[usize]) -> MetricsReport {
    assert!(!ks.is_empty(), "at least one k is required");
    let mut buckets: Vec<BucketMetrics> = Bucket::ALL
        .iter()
        .map(|&bucket| BucketMetrics { bucket, count: 0, em_hits: vec![0; ks.len()], bm_hits: vec![0; ks.len()] })
        .collect();
    for inst in instances {
        // rank of the first exact / base match, if any
        let matches: Vec<_> =
            inst.prediction.candidates.iter().map(|c| match_types(&c.type_expr, &inst.gold)).collect();
        let first_em = matches.iter().position(|m| m.exact);
        let first_bm = matches.iter().position(|m| m.base);
        for b in &mut buckets {
            if !b.bucket.contains(inst.type_category, inst.var_kind, inst.unseen) {
                continue;
            }
            b.count += 1;
            for (i, &k) in ks.iter().enumerate() {
                if first_em.is_some_and(|r| r < k) {
                    b.em_hits[i] += 1;
                }
                if first_bm.is_some_and(|r| r < k) {
                    b.bm_hits[i] += 1;
                }
            }
        }
    }
    MetricsReport { ks: ks.to_vec(), buckets }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AblationMode {
    /// Generated and visible candidates ranked by likelihood plus similarity.
    Full,
    /// Parseable beam outputs ranked by likelihood; no visible types.
    GeneratingOnly,
    /// Visible types ranked by similarity.
    RankingOnly,
}

impl AblationMode {
    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::GeneratingOnly => "generating-only",
            AblationMode::RankingOnly => "ranking-only",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "full" | "gtr" => Some(AblationMode::Full),
            "generating-only" | "generating" | "gen" => Some(AblationMode::GeneratingOnly),
            "ranking-only" | "ranking" | "rank" => Some(AblationMode::RankingOnly),
            _ => None,
        }
    }
}

/// A held-out instance before inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestCase {
    pub id: String,
    pub func: TypeMissedFunction,
    pub gold: TypeExpr,
    pub category: TypeCategory,
    pub unseen: bool,
    pub visible: VisibleTypeSet,
}

/// Runs one inference mode on a test case. An empty pool yields an empty
/// prediction, which counts as a miss.
pub fn predict(
    mode: AblationMode,
    gen: &SeqModelParams,
    simm: &SeqModelParams,
    case: &TestCase,
    beam_k: usize,
) -> Result<RankedPrediction, ModelError> {
    let terms = match mode {
        AblationMode::Full => ScoreTerms::Both,
        AblationMode::GeneratingOnly => ScoreTerms::LikelihoodOnly,
        AblationMode::RankingOnly => ScoreTerms::SimilarityOnly,
    };
    let scorer = Scorer::new(gen, simm, &case.func, terms)?;
    let pool: Vec<(TypeExpr, Origin)> = match mode {
        AblationMode::Full => build_pool(&scorer.generate(beam_k).texts, &case.visible).unwrap_or_default(),
        AblationMode::GeneratingOnly => scorer
            .generate(beam_k)
            .texts
            .iter()
            .filter_map(|t| parse_type(t).ok())
            .map(|t| (t, Origin::Generated))
            .collect(),
        AblationMode::RankingOnly => build_pool(&[], &case.visible).unwrap_or_default(),
    };
    scorer.rank(&case.func.slot, &pool)
}

/// Predictions and metrics of one ablation mode over `cases`.
pub fn ablate(
    mode: AblationMode,
    gen: &SeqModelParams,
    simm: &SeqModelParams,
    cases: &[TestCase],
    beam_k: usize,
    ks: &[usize],
) -> Result<(MetricsReport, Vec<EvalInstance>), ModelError> {
    let mut instances = Vec::with_capacity(cases.len());
    for case in cases {
        let prediction = predict(mode, gen, simm, case, beam_k)?;
        instances.push(EvalInstance {
            id: case.id.clone(),
            gold: case.gold.clone(),
            prediction,
            type_category: case.category,
            var_kind: case.func.slot.var_kind,
            unseen: case.unseen,
        });
    }
    Ok((evaluate(&instances, ks), instances))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub count: usize,
    pub percent: f64,
}

/// Distribution of instances over type categories and variable kinds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub total: usize,
    pub categories: Vec<SummaryRow>,
    pub var_kinds: Vec<SummaryRow>,
    pub unseen: usize,
}

impl DatasetSummary {
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<8}{:>8}{:>8}\n", "", "n", "%");
        for r in self.categories.iter().chain(&self.var_kinds) {
            let _ = writeln!(out, "{:<8}{:>8}{:>8.1}", r.label, r.count, r.percent);
        }
        let _ = writeln!(out, "{:<8}{:>8}{:>8.1}", "Unseen", self.unseen, pct(self.unseen, self.total));
        let _ = writeln!(out, "{:<8}{:>8}", "All", self.total);
        out
    }
}

/// Counts per category and variable kind from `(category, var_kind, unseen)`
/// triples.
pub fn summarize_dataset(items: impl IntoIterator<Item = (TypeCategory, VarKind, bool)>) -> DatasetSummary {
    let cats = [TypeCategory::Elementary, TypeCategory::Generic, TypeCategory::UserDefined];
    let kinds = [VarKind::Local, VarKind::Arg, VarKind::Ret];
    let (mut cat_n, mut kind_n, mut unseen, mut total) = ([0usize; 3], [0usize; 3], 0, 0);
    for (c, k, u) in items {
        total += 1;
        cat_n[cats.iter().position(|x| *x == c).expect("known category")] += 1;
        kind_n[kinds.iter().position(|x| *x == k).expect("known kind")] += 1;
        unseen += usize::from(u);
    }
    let row = |label: &str, count: usize| SummaryRow { label: label.to_string(), count, percent: pct(count, total) };
    DatasetSummary {
        total,
        categories: cats.iter().zip(cat_n).map(|(c, n)| row(c.short_name(), n)).collect(),
        var_kinds: kinds.iter().zip(kind_n).map(|(k, n)| row(k.short_name(), n)).collect(),
        unseen,
    }
}
