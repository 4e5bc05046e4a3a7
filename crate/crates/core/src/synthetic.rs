//! Synthetic multi-project Python corpus for end-to-end runs.
//!
//! Each repository has a `pkg/models.py` with user-defined classes and a set
//! of modules whose functions are annotated. Every annotation is a
//! deterministic function of a cue in the function text: a constructor or
//! conversion call (`Widget(x)`, `int(x)`), a helper name for generic types
//! (`load_ids(x)` for `List[int]`), or, for arguments, the parameter name.
//!
//! Class roles per repository:
//! * common classes are used throughout;
//! * rare classes appear in exactly one training function, so their names
//!   fall outside the vocabulary;
//! * unseen classes appear only in held-out files.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::source_model::SourceFile;

/// File at the corpus root listing held-out `repo/path` files, one per line.
pub const HELDOUT_MANIFEST: &str = "heldout.txt";

const REPO_NAMES: &[&str] = &["alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel"];
const CLASS_WORDS: &[&str] = &[
    "Widget", "Ledger", "Invoice", "Sensor", "Router", "Parser", "Account", "Bundle", "Device", "Engine", "Folder",
    "Gateway", "Journal", "Kernel", "Matrix", "Packet", "Schema", "Ticket", "Vector", "Window", "Archive", "Beacon",
    "Channel", "Dataset", "Emitter", "Fixture", "Glyph", "Harbor", "Inbox", "Lantern", "Mailbox", "Notebook",
];
const RARE_SUFFIXES: &[&str] = &[
    "Entry", "Spec", "State", "Info", "Ref", "Meta", "Item", "Stats", "Event", "Batch", "Proxy", "Draft", "View",
    "Slot", "Link", "Token", "Frame", "Trace", "Shard", "Patch",
];
const UNSEEN_SUFFIXES: &[&str] = &["Delta", "Replica", "Snapshot", "Ticket"];
const VERBS: &[&str] = &[
    "fetch", "build", "load", "make", "parse", "resolve", "compute", "render", "collect", "update", "create",
    "prepare", "convert", "scan", "merge", "check",
];
const NOUNS: &[&str] =
    &["item", "record", "entry", "value", "result", "config", "report", "state", "batch", "node", "chunk", "frame"];
const LOCAL_NAMES: &[&str] = &["item", "value", "result", "out", "obj", "tmp", "current", "found", "acc", "res"];

#[derive(Debug, Clone, Copy)]
enum Builtin {
    Int,
    Str,
    Float,
    Bool,
    Bytes,
    ListInt,
    ListStr,
    DictStrInt,
    OptionalStr,
    TupleIntStr,
    SetStr,
    DictStrListInt,
}

const ELEMENTARY: &[Builtin] = &[Builtin::Int, Builtin::Str, Builtin::Float, Builtin::Bool, Builtin::Bytes];
const GENERIC: &[Builtin] = &[
    Builtin::ListInt,
    Builtin::ListStr,
    Builtin::DictStrInt,
    Builtin::OptionalStr,
    Builtin::TupleIntStr,
    Builtin::SetStr,
    Builtin::DictStrListInt,
];

impl Builtin {
    fn annotation(self) -> &'static str {
        match self {
            Builtin::Int => "int",
            Builtin::Str => "str",
            Builtin::Float => "float",
            Builtin::Bool => "bool",
            Builtin::Bytes => "bytes",
            Builtin::ListInt => "List[int]",
            Builtin::ListStr => "List[str]",
            Builtin::DictStrInt => "Dict[str, int]",
            Builtin::OptionalStr => "Optional[str]",
            Builtin::TupleIntStr => "Tuple[int, str]",
            Builtin::SetStr => "Set[str]",
            Builtin::DictStrListInt => "Dict[str, List[int]]",
        }
    }

    fn cue(self) -> &'static str {
        match self {
            Builtin::Int => "int",
            Builtin::Str => "str",
            Builtin::Float => "float",
            Builtin::Bool => "bool",
            Builtin::Bytes => "bytes",
            Builtin::ListInt => "load_ids",
            Builtin::ListStr => "load_names",
            Builtin::DictStrInt => "build_index",
            Builtin::OptionalStr => "maybe_name",
            Builtin::TupleIntStr => "pair_of",
            Builtin::SetStr => "tag_set",
            Builtin::DictStrListInt => "group_ids",
        }
    }

    fn arg_names(self) -> &'static [&'static str] {
        match self {
            Builtin::Int => &["count", "size", "index", "limit"],
            Builtin::Str => &["name", "label", "title", "key"],
            Builtin::Float => &["ratio", "score", "weight", "rate"],
            Builtin::Bool => &["flag", "enabled", "verbose", "strict"],
            Builtin::Bytes => &["payload", "blob", "raw"],
            Builtin::ListInt => &["ids", "indices"],
            Builtin::ListStr => &["names", "labels"],
            Builtin::DictStrInt => &["index_map", "counts"],
            Builtin::OptionalStr => &["alias", "maybe_label"],
            Builtin::TupleIntStr => &["pair", "entry"],
            Builtin::SetStr => &["tags", "seen"],
            Builtin::DictStrListInt => &["groups", "buckets"],
        }
    }

    fn typing_names(self) -> &'static [&'static str] {
        match self {
            Builtin::ListInt | Builtin::ListStr => &["List"],
            Builtin::DictStrInt => &["Dict"],
            Builtin::OptionalStr => &["Optional"],
            Builtin::TupleIntStr => &["Tuple"],
            Builtin::SetStr => &["Set"],
            Builtin::DictStrListInt => &["Dict", "List"],
            _ => &[],
        }
    }
}

#[derive(Debug, Clone)]
enum Ty {
    Builtin(Builtin),
    User(String),
}

impl Ty {
    fn annotation(&self) -> &str {
        match self {
            Ty::Builtin(b) => b.annotation(),
            Ty::User(n) => n,
        }
    }

    fn cue(&self) -> &str {
        match self {
            Ty::Builtin(b) => b.cue(),
            Ty::User(n) => n,
        }
    }
}

fn snake(name: &str) -> String {
    let mut out = String::new();
    for (i, c) in name.chars().enumerate() {
        if c.is_ascii_uppercase() {
            if i > 0 {
                out.push('_');
            }
            out.push(c.to_ascii_lowercase());
        } else {
            out.push(c);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticConfig {
    pub repos: usize,
    /// Modules per repository, not counting `models.py`.
    pub files_per_repo: usize,
    pub functions_per_file: usize,
    /// Modules per repository that go to the held-out split.
    pub heldout_files_per_repo: usize,
    pub common_classes_per_repo: usize,
    pub rare_classes_per_repo: usize,
    pub unseen_classes_per_repo: usize,
    /// Probability that a given slot carries an annotation.
    pub annotate_prob: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            repos: 6,
            files_per_repo: 14,
            functions_per_file: 25,
            heldout_files_per_repo: 2,
            common_classes_per_repo: 5,
            rare_classes_per_repo: 12,
            unseen_classes_per_repo: 1,
            annotate_prob: 0.85,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    /// A reduced corpus for quick runs.
    pub fn small() -> Self {
        SyntheticConfig {
            repos: 4,
            files_per_repo: 4,
            functions_per_file: 8,
            heldout_files_per_repo: 1,
            ..Default::default()
        }
    }

    pub fn total_functions(&self) -> usize {
        self.repos * self.files_per_repo * self.functions_per_file
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SyntheticCorpus {
    pub files: Vec<SourceFile>,
    /// Qualified `repo/path` of every held-out file.
    pub heldout: BTreeSet<String>,
    /// Every class defined in the corpus.
    pub user_types: BTreeSet<String>,
    pub unseen_types: BTreeSet<String>,
}

struct RepoPlan {
    common: Vec<String>,
    rare: Vec<String>,
    unseen: Vec<String>,
}

fn plan_repos(cfg: &SyntheticConfig) -> Vec<RepoPlan> {
    assert!(cfg.repos <= REPO_NAMES.len(), "at most {} repositories", REPO_NAMES.len());
    assert!(cfg.repos * cfg.common_classes_per_repo <= CLASS_WORDS.len(), "not enough class names");
    let mut words = CLASS_WORDS.to_vec();
    words.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed));
    (0..cfg.repos)
        .map(|r| {
            let common: Vec<String> = words[r * cfg.common_classes_per_repo..(r + 1) * cfg.common_classes_per_repo]
                .iter()
                .map(|s| s.to_string())
                .collect();
            let rare = (0..cfg.rare_classes_per_repo)
                .map(|i| {
                    let base = &common[i % common.len()];
                    let suffix = RARE_SUFFIXES[(i / common.len() + r) % RARE_SUFFIXES.len()];
                    format!(
                        "{base}{suffix}{}",
                        if i >= common.len() * RARE_SUFFIXES.len() { i.to_string() } else { String::new() }
                    )
                })
                .collect();
            let unseen = (0..cfg.unseen_classes_per_repo)
                .map(|i| format!("{}{}", common[i % common.len()], UNSEEN_SUFFIXES[i % UNSEEN_SUFFIXES.len()]))
                .collect();
            RepoPlan { common, rare, unseen }
        })
        .collect()
}

struct FileBuilder<'a> {
    rng: &'a mut ChaCha8Rng,
    imports: BTreeSet<String>,
    typing: BTreeSet<&'static str>,
    body: String,
    used_names: BTreeSet<String>,
}

impl FileBuilder<'_> {
    fn builtin(&mut self, generic_share: f64) -> Builtin {
        if self.rng.gen_bool(generic_share) {
            *GENERIC.choose(self.rng).unwrap()
        } else {
            *ELEMENTARY.choose(self.rng).unwrap()
        }
    }

    fn note_type(&mut self, t: &Ty) {
        match t {
            Ty::Builtin(b) => self.typing.extend(b.typing_names()),
            Ty::User(n) => {
                self.imports.insert(n.clone());
            }
        }
    }

    fn fresh_name(&mut self, stem: &str) -> String {
        let mut name = stem.to_string();
        let mut i = 2;
        while self.used_names.contains(&name) {
            name = format!("{stem}_{i}");
            i += 1;
        }
        self.used_names.insert(name.clone());
        name
    }

    fn maybe_annot(&mut self, t: &Ty, force: bool, prob: f64) -> Option<String> {
        if force || self.rng.gen_bool(prob) {
            self.note_type(t);
            Some(t.annotation().to_string())
        } else {
            None
        }
    }

    fn value_ty(&mut self, user: Option<&str>) -> Ty {
        match user {
            Some(u) if self.rng.gen_bool(0.6) => Ty::User(u.to_string()),
            _ => Ty::Builtin(self.builtin(0.35)),
        }
    }

    /// One function. `user` is the class it revolves around, if any;
    /// `arg_user` allows that class to be the argument type. With
    /// `must_use`, the class is guaranteed to be an annotated local.
    fn function(&mut self, indent: &str, method: bool, user: Option<&str>, arg_user: bool, must_use: bool, prob: f64) {
        let arg_ty = match user {
            Some(u) if arg_user && self.rng.gen_bool(0.4) => Ty::User(u.to_string()),
            _ => Ty::Builtin(self.builtin(0.35)),
        };
        let local_ty = match user {
            Some(u) if must_use => Ty::User(u.to_string()),
            _ => self.value_ty(user),
        };
        let ret_ty = self.value_ty(user);

        let arg_name = match &arg_ty {
            Ty::Builtin(b) => b.arg_names().choose(self.rng).unwrap().to_string(),
            Ty::User(n) => snake(n),
        };
        let verb = *VERBS.choose(self.rng).unwrap();
        let noun = match &ret_ty {
            Ty::User(n) if self.rng.gen_bool(0.5) => snake(n),
            _ => NOUNS.choose(self.rng).unwrap().to_string(),
        };
        let fname = self.fresh_name(&format!("{verb}_{noun}"));
        let local = LOCAL_NAMES.choose(self.rng).unwrap().to_string();

        // at least one slot is annotated
        let force = if must_use { 1 } else { self.rng.gen_range(0..3) };
        let a_arg = self.maybe_annot(&arg_ty, force == 0, prob);
        let a_local = self.maybe_annot(&local_ty, force == 1, prob);
        let a_ret = self.maybe_annot(&ret_ty, force == 2, prob);

        let body_indent = format!("{indent}    ");
        let self_param = if method { "self, " } else { "" };
        let _ = write!(self.body, "\n{indent}def {fname}({self_param}{arg_name}");
        if let Some(a) = &a_arg {
            let _ = write!(self.body, ": {a}");
        }
        self.body.push(')');
        if let Some(a) = &a_ret {
            let _ = write!(self.body, " -> {a}");
        }
        self.body.push_str(":\n");
        match self.rng.gen_range(0..4) {
            0 => {
                let _ = writeln!(
                    self.body,
                    "{body_indent}if {arg_name} is None:\n{body_indent}    raise ValueError(\"missing {arg_name}\")"
                );
            }
            1 => {
                let _ = writeln!(self.body, "{body_indent}log_event(\"{fname}\")");
            }
            _ => {}
        }
        let _ = write!(self.body, "{body_indent}{local}");
        if let Some(a) = &a_local {
            let _ = write!(self.body, ": {a}");
        }
        let _ = writeln!(self.body, " = {}({arg_name})", local_ty.cue());
        let _ = writeln!(self.body, "{body_indent}return {}({local})", ret_ty.cue());
    }

    fn finish(self, distractors: &[String]) -> String {
        let mut imports = self.imports;
        imports.extend(distractors.iter().cloned());
        let mut out = String::new();
        if !self.typing.is_empty() {
            let names: Vec<&str> = self.typing.into_iter().collect();
            let _ = writeln!(out, "from typing import {}", names.join(", "));
        }
        if !imports.is_empty() {
            let names: Vec<String> = imports.into_iter().collect();
            let _ = writeln!(out, "from .models import {}", names.join(", "));
        }
        let _ = writeln!(out, "from .util import log_event");
        out.push_str(&self.body);
        out
    }
}

/// Builds the corpus. Deterministic in `cfg`.
pub fn generate(cfg: &SyntheticConfig) -> SyntheticCorpus {
    assert!(cfg.heldout_files_per_repo < cfg.files_per_repo, "every repository needs training files");
    let plans = plan_repos(cfg);
    let mut corpus = SyntheticCorpus::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for (r, plan) in plans.iter().enumerate() {
        let repo = REPO_NAMES[r].to_string();
        let all_classes: Vec<&String> = plan.common.iter().chain(&plan.rare).chain(&plan.unseen).collect();
        let mut models = String::from("\"\"\"Domain classes.\"\"\"\n");
        for c in &all_classes {
            let _ = write!(models, "\n\nclass {c}:\n    def __init__(self, *args):\n        self.args = args\n");
            corpus.user_types.insert(c.to_string());
        }
        corpus.unseen_types.extend(plan.unseen.iter().cloned());
        let push = |corpus: &mut SyntheticCorpus, path: &str, source: String| {
            corpus.files.push(SourceFile { repo: repo.clone(), file_path: path.to_string(), source });
        };
        push(&mut corpus, "pkg/__init__.py", String::new());
        push(&mut corpus, "pkg/models.py", models);
        push(&mut corpus, "pkg/util.py", "def log_event(name):\n    print(name)\n".to_string());

        let n_train_files = cfg.files_per_repo - cfg.heldout_files_per_repo;
        // rare classes get one training function each, spread over files
        let mut rare_slots: Vec<(usize, usize)> = Vec::new();
        for (i, _) in plan.rare.iter().enumerate() {
            rare_slots.push((i % n_train_files, (i / n_train_files) % cfg.functions_per_file));
        }
        for f in 0..cfg.files_per_repo {
            let heldout = f >= n_train_files;
            let path = format!("pkg/mod_{f:02}.py");
            let mut fb = FileBuilder {
                rng: &mut rng,
                imports: BTreeSet::new(),
                typing: BTreeSet::new(),
                body: String::new(),
                used_names: BTreeSet::new(),
            };
            let in_class = fb.rng.gen_bool(0.3);
            let mut indent = "";
            if in_class {
                let _ = writeln!(fb.body, "\n\nclass {}Service:", snake(&repo).replace('_', ""));
                indent = "    ";
            }
            for j in 0..cfg.functions_per_file {
                let rare = if heldout {
                    None
                } else {
                    rare_slots.iter().position(|&(file, slot)| file == f && slot == j).map(|i| plan.rare[i].as_str())
                };
                let unseen = if f == n_train_files && j < plan.unseen.len() * 6 && j % 6 == 3 {
                    Some(plan.unseen[(j / 6 + f) % plan.unseen.len()].as_str())
                } else {
                    None
                };
                let user = match (rare, unseen) {
                    (Some(c), _) | (_, Some(c)) => Some(c.to_string()),
                    _ if fb.rng.gen_bool(0.5) => Some(plan.common.choose(fb.rng).unwrap().clone()),
                    _ => None,
                };
                let common_user = user.as_ref().is_some_and(|u| plan.common.contains(u));
                let special = rare.is_some() || unseen.is_some();
                fb.function(indent, in_class, user.as_deref(), common_user, special, cfg.annotate_prob);
            }
            let n_distract = fb.rng.gen_range(2..=4);
            let pool: Vec<&String> = plan.common.iter().filter(|c| !fb.imports.contains(*c)).collect();
            let distractors: Vec<String> = pool.choose_multiple(fb.rng, n_distract).map(|s| s.to_string()).collect();
            let source = fb.finish(&distractors);
            if heldout {
                corpus.heldout.insert(format!("{repo}/{path}"));
            }
            push(&mut corpus, &path, source);
        }
    }
    corpus
}

/// Writes every file under `root/<repo>/<path>` plus the held-out manifest.
pub fn write_corpus(corpus: &SyntheticCorpus, root: &Path) -> io::Result<()> {
    for f in &corpus.files {
        let path = root.join(&f.repo).join(&f.file_path);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, &f.source)?;
    }
    let mut manifest = String::new();
    for h in &corpus.heldout {
        manifest.push_str(h);
        manifest.push('\n');
    }
    std::fs::write(root.join(HELDOUT_MANIFEST), manifest)
}
