//! Project indexing and visible user-defined types.
//!
//! A file sees the types it defines itself plus the types defined by the
//! files it imports directly (one hop). Imports of modules that have no
//! source in the project contribute their imported names as opaque type
//! names.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::source_model::{
    find_top_level, is_name, is_op, scan, split_top_level, tok_text, Diagnostic, SourceFile, TokKind, Token,
};
use crate::type_lang::{self, final_segment};

#[derive(Debug, Error)]
pub enum ImportError {
    #[error("file not indexed: {0}")]
    FileNotIndexed(String),
    #[error("project root {0} does not exist")]
    MissingRoot(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Provenance {
    SameFile,
    Imported,
}

/// User-defined type names reachable from one file.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisibleTypeSet {
    provenance: BTreeMap<String, Provenance>,
}

impl VisibleTypeSet {
    /// Adds `name`; a same-file definition wins over an import.
    pub fn insert(&mut self, name: &str, provenance: Provenance) {
        let entry = self.provenance.entry(name.to_string()).or_insert(provenance);
        if provenance == Provenance::SameFile {
            *entry = Provenance::SameFile;
        }
    }

    /// Membership by exact name or by final dotted segment.
    pub fn contains(&self, name: &str) -> bool {
        self.provenance.contains_key(name) || self.provenance.contains_key(final_segment(name))
    }

    pub fn provenance(&self, name: &str) -> Option<Provenance> {
        self.provenance.get(name).or_else(|| self.provenance.get(final_segment(name))).copied()
    }

    /// Names in lexicographic order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.provenance.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Provenance)> {
        self.provenance.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }
}

impl<'a> FromIterator<(&'a str, Provenance)> for VisibleTypeSet {
    fn from_iter<T: IntoIterator<Item = (&'a str, Provenance)>>(iter: T) -> Self {
        let mut set = VisibleTypeSet::default();
        for (n, p) in iter {
            set.insert(n, p);
        }
        set
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImportedName {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alias: Option<String>,
}

impl ImportedName {
    pub fn local_name(&self) -> &str {
        self.alias.as_deref().unwrap_or(&self.name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportNames {
    /// `import a.b` or `from pkg import submodule`.
    Module,
    Named(Vec<ImportedName>),
    Star,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImportRecord {
    /// Module path as written, without the leading dots.
    pub module: String,
    /// Number of leading dots of a relative import.
    #[serde(default)]
    pub level: usize,
    pub names: ImportNames,
    /// In-project file the module resolves to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolved: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub defined_types: BTreeSet<String>,
    pub imports: Vec<ImportRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectIndex {
    pub files: BTreeMap<String, FileEntry>,
}

/// Anything that can answer "which user types does this file see".
pub trait TypeVisibility {
    fn visible_for(&self, file_path: &str) -> Result<VisibleTypeSet, ImportError>;
}

/// Indexes every `.py` file under `root`. Unreadable files are reported and
/// skipped.
pub fn index_project(root: &Path) -> Result<(ProjectIndex, Vec<Diagnostic>), ImportError> {
    if !root.is_dir() {
        return Err(ImportError::MissingRoot(root.display().to_string()));
    }
    let mut sources = Vec::new();
    let mut diagnostics = Vec::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = match entry {
            Ok(e) => e,
            Err(e) => {
                diagnostics.push(Diagnostic { file_path: root.display().to_string(), error: e.to_string() });
                continue;
            }
        };
        if !entry.file_type().is_file() || entry.path().extension().and_then(|e| e.to_str()) != Some("py") {
            continue;
        }
        let rel = entry.path().strip_prefix(root).unwrap_or(entry.path());
        let rel = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
        match std::fs::read_to_string(entry.path()) {
            Ok(text) => sources.push((rel, text)),
            Err(e) => diagnostics.push(Diagnostic { file_path: rel, error: e.to_string() }),
        }
    }
    Ok((index_sources(sources.iter().map(|(p, s)| (p.as_str(), s.as_str()))), diagnostics))
}

/// Indexes in-memory `(relative path, source)` pairs.
pub fn index_sources<'a>(files: impl IntoIterator<Item = (&'a str, &'a str)>) -> ProjectIndex {
    let parsed: Vec<(String, BTreeSet<String>, Vec<RawImport>)> = files
        .into_iter()
        .map(|(path, src)| {
            let (types, imports) = scan_module(src);
            (path.to_string(), types, imports)
        })
        .collect();
    let known: BTreeSet<&str> = parsed.iter().map(|(p, _, _)| p.as_str()).collect();
    let mut index = ProjectIndex::default();
    for (path, defined_types, raw_imports) in &parsed {
        let mut imports = Vec::new();
        for raw in raw_imports {
            resolve_import(path, raw, &known, &mut imports);
        }
        index.files.insert(path.clone(), FileEntry { defined_types: defined_types.clone(), imports });
    }
    index
}

fn is_typing_module(module: &str) -> bool {
    matches!(module, "typing" | "typing_extensions" | "collections.abc" | "__future__")
}

/// Names imported from modules outside the project are opaque types, except
/// builtin names re-exported by such modules.
fn is_opaque_type_name(name: &str) -> bool {
    !type_lang::is_builtin_name(name)
}

pub fn visible_types(index: &ProjectIndex, file: &str) -> Result<VisibleTypeSet, ImportError> {
    let entry = index.files.get(file).ok_or_else(|| ImportError::FileNotIndexed(file.to_string()))?;
    let mut set = VisibleTypeSet::default();
    for t in &entry.defined_types {
        set.insert(t, Provenance::SameFile);
    }
    for imp in &entry.imports {
        match (&imp.resolved, &imp.names) {
            (Some(target), names) => {
                let Some(target_entry) = index.files.get(target) else { continue };
                match names {
                    ImportNames::Module | ImportNames::Star => {
                        for t in &target_entry.defined_types {
                            set.insert(t, Provenance::Imported);
                        }
                    }
                    ImportNames::Named(list) => {
                        for n in list {
                            if target_entry.defined_types.contains(&n.name) {
                                set.insert(n.local_name(), Provenance::Imported);
                            }
                        }
                    }
                }
            }
            (None, ImportNames::Named(list)) if imp.level == 0 && !is_typing_module(&imp.module) => {
                for n in list.iter().filter(|n| is_opaque_type_name(&n.name)) {
                    set.insert(n.local_name(), Provenance::Imported);
                }
            }
            (None, _) => {}
        }
    }
    Ok(set)
}

impl TypeVisibility for ProjectIndex {
    fn visible_for(&self, file_path: &str) -> Result<VisibleTypeSet, ImportError> {
        visible_types(self, file_path)
    }
}

/// Per-repository indices of a multi-repository corpus, addressed by
/// qualified `repo/path` file names.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusIndex {
    pub repos: BTreeMap<String, ProjectIndex>,
}

impl CorpusIndex {
    pub fn from_sources(files: &[SourceFile]) -> Self {
        let mut by_repo: BTreeMap<&str, Vec<(&str, &str)>> = BTreeMap::new();
        for f in files {
            by_repo.entry(f.repo.as_str()).or_default().push((f.file_path.as_str(), f.source.as_str()));
        }
        CorpusIndex { repos: by_repo.into_iter().map(|(r, fs)| (r.to_string(), index_sources(fs))).collect() }
    }
}

impl TypeVisibility for CorpusIndex {
    fn visible_for(&self, file_path: &str) -> Result<VisibleTypeSet, ImportError> {
        if let Some((repo, rest)) = file_path.split_once('/') {
            if let Some(index) = self.repos.get(repo) {
                return visible_types(index, rest);
            }
        }
        match self.repos.get(".") {
            Some(index) => visible_types(index, file_path),
            None => Err(ImportError::FileNotIndexed(file_path.to_string())),
        }
    }
}

impl TypeVisibility for BTreeMap<String, VisibleTypeSet> {
    fn visible_for(&self, file_path: &str) -> Result<VisibleTypeSet, ImportError> {
        self.get(file_path).cloned().ok_or_else(|| ImportError::FileNotIndexed(file_path.to_string()))
    }
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct RawImport {
    module: String,
    level: usize,
    names: ImportNames,
}

fn dotted(src: &str, toks: &[Token]) -> Option<String> {
    let mut out = String::new();
    for (i, t) in toks.iter().enumerate() {
        let ok = if i % 2 == 0 { t.kind == TokKind::Name } else { is_op(src, t, ".") };
        if !ok {
            return None;
        }
        out.push_str(tok_text(src, t));
    }
    (!out.is_empty() && !out.ends_with('.')).then_some(out)
}

fn alias_split<'t>(src: &str, toks: &'t [Token]) -> (&'t [Token], Option<String>) {
    match toks {
        [head @ .., as_tok, alias] if is_name(src, as_tok, "as") && alias.kind == TokKind::Name => {
            (head, Some(tok_text(src, alias).to_string()))
        }
        _ => (toks, None),
    }
}

fn is_type_alias_name(name: &str) -> bool {
    name.chars().next().is_some_and(char::is_uppercase) && name.chars().any(char::is_lowercase)
}

/// Module-level type definitions and imports of one file.
fn scan_module(src: &str) -> (BTreeSet<String>, Vec<RawImport>) {
    let scan = scan(src);
    let mut types = BTreeSet::new();
    let mut imports = Vec::new();
    for line in scan.lines.iter().filter(|l| l.indent == 0) {
        let toks = scan.line_tokens(line);
        for stmt in split_top_level(src, toks, ";") {
            scan_statement(src, stmt, &mut types, &mut imports);
        }
    }
    (types, imports)
}

fn scan_statement(src: &str, toks: &[Token], types: &mut BTreeSet<String>, imports: &mut Vec<RawImport>) {
    let Some(first) = toks.first() else { return };
    let head = tok_text(src, first);
    match head {
        "class" => {
            if let Some(name) = toks.get(1).filter(|t| t.kind == TokKind::Name) {
                types.insert(tok_text(src, name).to_string());
            }
        }
        "type" if toks.len() > 2 && toks[1].kind == TokKind::Name => {
            if find_top_level(src, toks, "=").is_some() {
                types.insert(tok_text(src, &toks[1]).to_string());
            }
        }
        "import" => {
            for part in split_top_level(src, &toks[1..], ",") {
                let (mod_toks, _) = alias_split(src, part);
                if let Some(module) = dotted(src, mod_toks) {
                    imports.push(RawImport { module, level: 0, names: ImportNames::Module });
                }
            }
        }
        "from" => {
            let Some(imp_at) = toks.iter().position(|t| is_name(src, t, "import")) else { return };
            let mut level = 0;
            let mut i = 1;
            while i < imp_at && toks[i].kind == TokKind::Op {
                match tok_text(src, &toks[i]) {
                    "." => level += 1,
                    "..." => level += 3,
                    _ => return,
                }
                i += 1;
            }
            let module = if i < imp_at {
                match dotted(src, &toks[i..imp_at]) {
                    Some(m) => m,
                    None => return,
                }
            } else {
                String::new()
            };
            if module.is_empty() && level == 0 {
                return;
            }
            let mut rest = &toks[imp_at + 1..];
            if rest.len() == 1 && is_op(src, &rest[0], "*") {
                imports.push(RawImport { module, level, names: ImportNames::Star });
                return;
            }
            if rest.first().is_some_and(|t| is_op(src, t, "(")) && rest.last().is_some_and(|t| is_op(src, t, ")")) {
                rest = &rest[1..rest.len() - 1];
            }
            let mut names = Vec::new();
            for part in split_top_level(src, rest, ",") {
                let (name_toks, alias) = alias_split(src, part);
                if let [n] = name_toks {
                    if n.kind == TokKind::Name {
                        names.push(ImportedName { name: tok_text(src, n).to_string(), alias });
                    }
                }
            }
            if !names.is_empty() {
                imports.push(RawImport { module, level, names: ImportNames::Named(names) });
            }
        }
        _ => scan_alias(src, toks, types),
    }
}

/// `Name = <type expr>`, `Name: TypeAlias = ...`, `Name = NewType(...)`.
fn scan_alias(src: &str, toks: &[Token], types: &mut BTreeSet<String>) {
    let [target, op, rest @ ..] = toks else { return };
    if target.kind != TokKind::Name {
        return;
    }
    let name = tok_text(src, target);
    if is_op(src, op, ":") {
        let eq = find_top_level(src, rest, "=").unwrap_or(rest.len());
        let ann: String = rest[..eq].iter().map(|t| tok_text(src, t)).collect();
        if final_segment(&ann) == "TypeAlias" {
            types.insert(name.to_string());
        }
        return;
    }
    if !is_op(src, op, "=") || rest.is_empty() || !is_type_alias_name(name) {
        return;
    }
    if rest.len() >= 2
        && matches!(final_segment(tok_text(src, &rest[0])), "NewType" | "TypeVar")
        && is_op(src, &rest[1], "(")
    {
        types.insert(name.to_string());
        return;
    }
    if rest.iter().any(|t| t.kind == TokKind::Op && matches!(tok_text(src, t), "(" | "=" | "{")) {
        return;
    }
    let rhs = &src[rest[0].start..rest[rest.len() - 1].end];
    if let Ok(t) = type_lang::parse_type(rhs) {
        if !matches!(t.base.as_str(), "True" | "False" | "None") && !t.base.starts_with(['\'', '"']) {
            types.insert(name.to_string());
        }
    }
}

const SOURCE_ROOTS: &[&str] = &["", "src/"];

fn module_file(dir_parts: &[&str], known: &BTreeSet<&str>) -> Option<String> {
    let base = dir_parts.join("/");
    for root in SOURCE_ROOTS {
        for cand in [format!("{root}{base}.py"), format!("{root}{base}/__init__.py")] {
            if known.contains(cand.as_str()) {
                return Some(cand);
            }
        }
    }
    None
}

fn package_parts(importer: &str, level: usize) -> Option<Vec<&str>> {
    let mut parts: Vec<&str> = importer.split('/').collect();
    parts.pop();
    for _ in 1..level {
        parts.pop()?;
    }
    Some(parts)
}

fn resolve_import(importer: &str, raw: &RawImport, known: &BTreeSet<&str>, out: &mut Vec<ImportRecord>) {
    let mut parts: Vec<&str> = if raw.level > 0 {
        match package_parts(importer, raw.level) {
            Some(p) => p,
            None => {
                out.push(ImportRecord {
                    module: raw.module.clone(),
                    level: raw.level,
                    names: raw.names.clone(),
                    resolved: None,
                });
                return;
            }
        }
    } else {
        Vec::new()
    };
    if !raw.module.is_empty() {
        parts.extend(raw.module.split('.'));
    }
    let resolved = if parts.is_empty() {
        None
    } else if raw.level > 0 && raw.module.is_empty() {
        let init = format!("{}/__init__.py", parts.join("/"));
        known.contains(init.as_str()).then_some(init)
    } else {
        module_file(&parts, known)
    };

    // `from pkg import submodule` imports a module, not a name
    if let ImportNames::Named(names) = &raw.names {
        let mut plain = Vec::new();
        for n in names {
            let mut sub = parts.clone();
            sub.push(&n.name);
            match module_file(&sub, known) {
                Some(file) if resolved.as_deref() != Some(file.as_str()) => out.push(ImportRecord {
                    module: if raw.module.is_empty() { n.name.clone() } else { format!("{}.{}", raw.module, n.name) },
                    level: raw.level,
                    names: ImportNames::Module,
                    resolved: Some(file),
                }),
                _ => plain.push(n.clone()),
            }
        }
        if !plain.is_empty() {
            out.push(ImportRecord {
                module: raw.module.clone(),
                level: raw.level,
                names: ImportNames::Named(plain),
                resolved,
            });
        }
        return;
    }
    out.push(ImportRecord { module: raw.module.clone(), level: raw.level, names: raw.names.clone(), resolved });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx(files: &[(&str, &str)]) -> ProjectIndex {
        index_sources(files.iter().copied())
    }

    fn names(set: &VisibleTypeSet) -> Vec<&str> {
        set.names().collect()
    }

    #[test]
    fn empty_index() {
        let dir = tempfile::tempdir().unwrap();
        let (index, diags) = index_project(dir.path()).unwrap();
        assert!(index.files.is_empty() && diags.is_empty());
        assert!(index_project(&dir.path().join("missing")).is_err());
    }

    #[test]
    fn named_import_resolves_to_defining_file() {
        let index = idx(&[
            ("a.py", "class IDMap:\n    pass\n\nclass IDMapKey(str):\n    pass\n"),
            ("b.py", "from a import IDMap\n\nclass Local:\n    pass\n"),
        ]);
        assert_eq!(index.files["b.py"].imports[0].resolved.as_deref(), Some("a.py"));
        let vis = visible_types(&index, "b.py").unwrap();
        assert_eq!(names(&vis), ["IDMap", "Local"]);
        assert_eq!(vis.provenance("IDMap"), Some(Provenance::Imported));
        assert_eq!(vis.provenance("Local"), Some(Provenance::SameFile));
        assert!(matches!(visible_types(&index, "c.py"), Err(ImportError::FileNotIndexed(_))));
    }

    #[test]
    fn relative_imports() {
        let index = idx(&[
            ("pkg/__init__.py", "class Root: pass\n"),
            ("pkg/x.py", "class X1: pass\nclass X2: pass\n"),
            ("pkg/sub/m.py", "from .. import x\nfrom ..x import X1 as Alias\nfrom . import nothing\n"),
            ("pkg/y.py", "from . import Root\n"),
        ]);
        let m = &index.files["pkg/sub/m.py"];
        assert_eq!(m.imports[0].resolved.as_deref(), Some("pkg/x.py"));
        assert_eq!(m.imports[0].names, ImportNames::Module);
        let vis = visible_types(&index, "pkg/sub/m.py").unwrap();
        assert_eq!(names(&vis), ["Alias", "X1", "X2"]);
        let vis = visible_types(&index, "pkg/y.py").unwrap();
        assert_eq!(names(&vis), ["Root"]);
    }

    #[test]
    fn star_import_brings_everything() {
        let index = idx(&[
            ("models.py", "class A: pass\nclass B: pass\nclass C: pass\ndef helper(): pass\n"),
            ("use.py", "from models import *\n"),
        ]);
        assert_eq!(visible_types(&index, "use.py").unwrap().len(), 3);
    }

    #[test]
    fn one_hop_only_and_external_names() {
        let index = idx(&[
            ("a.py", "class Deep: pass\n"),
            ("b.py", "from a import Deep\nclass Mid: pass\n"),
            (
                "c.py",
                "from b import *\nfrom numpy import ndarray as Arr\nimport os\nfrom typing import List, Protocol\n",
            ),
        ]);
        let vis = visible_types(&index, "c.py").unwrap();
        assert_eq!(names(&vis), ["Arr", "Mid"]);
    }

    #[test]
    fn same_file_wins_and_aliases() {
        let index = idx(&[
            ("a.py", "class Thing: pass\n"),
            (
                "b.py",
                "from a import Thing\nclass Thing: pass\nUserId = int\nPair = Tuple[int, int]\nMAX = 10\nDEBUG = True\nName = NewType('Name', str)\nHandler: TypeAlias = 'Callable[[], None]'\n",
            ),
        ]);
        let vis = visible_types(&index, "b.py").unwrap();
        assert_eq!(vis.provenance("Thing"), Some(Provenance::SameFile));
        assert_eq!(names(&vis), ["Handler", "Name", "Pair", "Thing", "UserId"]);
    }

    #[test]
    fn nested_and_function_level_classes_are_ignored() {
        let index = idx(&[("a.py", "def f():\n    class Inner: pass\nclass Outer:\n    class Nested: pass\n")]);
        assert_eq!(index.files["a.py"].defined_types.iter().collect::<Vec<_>>(), ["Outer"]);
    }

    #[test]
    fn dotted_membership_and_json_shape() {
        let mut set = VisibleTypeSet::default();
        set.insert("Foo", Provenance::Imported);
        assert!(set.contains("a.b.Foo"));
        let index = idx(&[("a.py", "import x.y as z\n")]);
        let json = serde_json::to_value(&index).unwrap();
        assert!(json["files"]["a.py"]["defined_types"].is_array());
        assert_eq!(json["files"]["a.py"]["imports"][0]["module"], "x.y");
    }

    #[test]
    fn deterministic_reindex() {
        let files = [("p/a.py", "class A: pass\n"), ("p/b.py", "from p.a import A\n")];
        assert_eq!(idx(&files), idx(&files));
        let vis = visible_types(&idx(&files), "p/b.py").unwrap();
        assert_eq!(names(&vis), ["A"]);
    }
}
