//! Python functions as units of type inference.
//!
//! [`extract_functions`] cuts a source file into top-level and method-level
//! function definitions. Each function exposes its annotatable slots
//! (arguments, first bindings of locals, return value); a slot can be turned
//! into a placeholder (`<TYPE>`) and every existing annotation can be masked
//! into a [`TrainingPair`].
//!
//! The parser covers a grammar subset: definitions, assignments, annotated
//! assignments, imports and classes. Everything else inside a body is opaque
//! text.

mod lexer;
mod syntax;

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::type_lang::{self, TypeCategory};

pub(crate) use lexer::{find_top_level, is_name, is_op, split_top_level};
pub(crate) use lexer::{scan, tok_text, Scan, TokKind, Token};
use syntax::FunctionSyntax;

pub use lexer::PLACEHOLDER as TYPE_PLACEHOLDER;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SourceError {
    #[error("slot {0} not found in function")]
    SlotNotFound(TypeSlot),
    #[error("function already contains a type placeholder")]
    PlaceholderPresent,
    #[error("syntax error at line {line}: {message}")]
    Syntax { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PythonFunction {
    pub file_path: String,
    pub name: String,
    pub source_text: String,
    /// 1-based inclusive line range within the file.
    pub line_span: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VarKind {
    Local,
    Arg,
    Ret,
}

impl VarKind {
    pub fn short_name(self) -> &'static str {
        match self {
            VarKind::Local => "Var",
            VarKind::Arg => "Arg",
            VarKind::Ret => "Ret",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TypeSlot {
    pub var_kind: VarKind,
    /// Empty for return slots.
    pub var_name: String,
    pub occurrence_index: usize,
}

impl TypeSlot {
    pub fn arg(name: impl Into<String>) -> Self {
        TypeSlot { var_kind: VarKind::Arg, var_name: name.into(), occurrence_index: 0 }
    }

    pub fn local(name: impl Into<String>, occurrence_index: usize) -> Self {
        TypeSlot { var_kind: VarKind::Local, var_name: name.into(), occurrence_index }
    }

    pub fn ret() -> Self {
        TypeSlot { var_kind: VarKind::Ret, var_name: String::new(), occurrence_index: 0 }
    }
}

impl fmt::Display for TypeSlot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.var_kind {
            VarKind::Ret => f.write_str("Ret"),
            VarKind::Arg => write!(f, "Arg({})", self.var_name),
            VarKind::Local => write!(f, "Local({}, {})", self.var_name, self.occurrence_index),
        }
    }
}

/// A function whose text holds exactly one `<TYPE>` placeholder.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TypeMissedFunction {
    pub function: PythonFunction,
    pub slot: TypeSlot,
}

impl TypeMissedFunction {
    pub fn text(&self) -> &str {
        &self.function.source_text
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub input: TypeMissedFunction,
    pub expected_type: String,
    pub category: TypeCategory,
}

/// A file that could not be (fully) processed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub file_path: String,
    pub error: String,
}

#[derive(Debug, Clone, Default)]
pub struct Extraction {
    pub functions: Vec<PythonFunction>,
    pub diagnostics: Vec<Diagnostic>,
}

/// Returns every top-level and method-level function in `source_text`.
/// Nested functions stay inside their parent. Malformed definitions are
/// reported and skipped; the rest of the file is still returned.
pub fn extract_functions(source_text: &str, file_path: &str) -> Extraction {
    let scan = scan(source_text);
    let mut out = Extraction::default();
    let mut candidates = Vec::new();
    collect_defs(source_text, &scan, 0, scan.lines.len(), &mut candidates);

    let mut claimed_errors = vec![false; scan.errors.len()];
    for (first, last) in candidates {
        let header = &scan.lines[first];
        let tail = &scan.lines[last - 1];
        let first_line = header.first_line;
        let last_line = tail.last_line;
        let broken: Vec<usize> = scan
            .errors
            .iter()
            .enumerate()
            .filter(|(_, e)| e.line >= first_line && e.line <= last_line)
            .map(|(i, _)| i)
            .collect();
        if let Some(&idx) = broken.first() {
            for &i in &broken {
                claimed_errors[i] = true;
            }
            let e = &scan.errors[idx];
            out.diagnostics.push(Diagnostic {
                file_path: file_path.to_string(),
                error: format!("line {}: {}", e.line, e.message),
            });
            continue;
        }
        let start = header.line_start;
        let last_tok = scan.tokens[tail.tokens.end - 1];
        let mut end = last_tok.end;
        // keep a trailing comment on the final line
        let line_end = source_text[end..].find('\n').map_or(source_text.len(), |o| end + o);
        let trailing = source_text[end..line_end].trim_end();
        end += trailing.len();
        let text = &source_text[start..end];
        match FunctionSyntax::parse(text) {
            Ok(syn) => out.functions.push(PythonFunction {
                file_path: file_path.to_string(),
                name: syn.name.clone(),
                source_text: text.to_string(),
                line_span: (first_line, last_line),
            }),
            Err(SourceError::Syntax { line, message }) => out.diagnostics.push(Diagnostic {
                file_path: file_path.to_string(),
                error: format!("line {}: {}", first_line + line - 1, message),
            }),
            Err(other) => {
                out.diagnostics.push(Diagnostic { file_path: file_path.to_string(), error: other.to_string() })
            }
        }
    }
    for (e, claimed) in scan.errors.iter().zip(claimed_errors) {
        if !claimed {
            out.diagnostics.push(Diagnostic {
                file_path: file_path.to_string(),
                error: format!("line {}: {}", e.line, e.message),
            });
        }
    }
    out
}

fn block_end(scan: &Scan, idx: usize, end: usize) -> usize {
    let indent = scan.lines[idx].indent;
    let mut j = idx + 1;
    while j < end && scan.lines[j].indent > indent {
        j += 1;
    }
    j
}

pub(crate) fn is_def_header(src: &str, toks: &[Token]) -> bool {
    match toks {
        [first, ..] if is_name(src, first, "def") => true,
        [first, second, ..] => is_name(src, first, "async") && is_name(src, second, "def"),
        _ => false,
    }
}

/// Collects (first_line_idx, end_line_idx) for every def not nested in a def.
fn collect_defs(src: &str, scan: &Scan, start: usize, end: usize, out: &mut Vec<(usize, usize)>) {
    let mut i = start;
    while i < end {
        let j = block_end(scan, i, end);
        let toks = scan.line_tokens(&scan.lines[i]);
        if is_def_header(src, toks) {
            out.push((i, j));
        } else if j > i + 1 {
            collect_defs(src, scan, i + 1, j, out);
        }
        i = j;
    }
}

/// Annotatable slots in order: arguments (declaration order), locals (first
/// binding, line order), return.
pub fn enumerate_slots(function: &PythonFunction) -> Result<Vec<TypeSlot>, SourceError> {
    let syn = FunctionSyntax::parse(&function.source_text)?;
    let mut slots: Vec<TypeSlot> = syn.slot_params().map(|p| TypeSlot::arg(p.name.clone())).collect();
    let mut seen = std::collections::HashSet::new();
    for b in syn.local_bindings() {
        if seen.insert(b.name.as_str()) {
            slots.push(TypeSlot::local(b.name.clone(), 0));
        }
    }
    slots.push(TypeSlot::ret());
    Ok(slots)
}

/// Inserts (or substitutes for an existing annotation) the `<TYPE>`
/// placeholder at `slot`. All other text is left untouched.
pub fn insert_placeholder(function: &PythonFunction, slot: &TypeSlot) -> Result<TypeMissedFunction, SourceError> {
    if function.source_text.contains(TYPE_PLACEHOLDER) {
        return Err(SourceError::PlaceholderPresent);
    }
    let syn = FunctionSyntax::parse(&function.source_text)?;
    let edit = syn.slot_edit(slot).ok_or_else(|| SourceError::SlotNotFound(slot.clone()))?;
    let text = &function.source_text;
    let mut new_text = String::with_capacity(text.len() + 12);
    new_text.push_str(&text[..edit.range.start]);
    new_text.push_str(&edit.replacement);
    new_text.push_str(&text[edit.range.end..]);
    Ok(TypeMissedFunction {
        function: PythonFunction { source_text: new_text, ..function.clone() },
        slot: slot.clone(),
    })
}

/// One training pair per existing annotation; only that annotation is
/// masked. Annotations that are not valid type expressions are skipped.
pub fn mask_annotations(function: &PythonFunction) -> Result<Vec<TrainingPair>, SourceError> {
    if function.source_text.contains(TYPE_PLACEHOLDER) {
        return Err(SourceError::PlaceholderPresent);
    }
    let syn = FunctionSyntax::parse(&function.source_text)?;
    let mut pairs = Vec::new();
    for (slot, span) in syn.annotations() {
        let raw = &function.source_text[span];
        let expected = type_lang::normalize_whitespace(raw);
        let Ok(parsed) = type_lang::parse_type(&expected) else {
            continue;
        };
        let input = insert_placeholder(function, &slot)?;
        pairs.push(TrainingPair { input, expected_type: expected, category: type_lang::classify(&parsed) });
    }
    Ok(pairs)
}

/// One source file of a corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceFile {
    pub repo: String,
    /// Path relative to the repository root, `/`-separated.
    pub file_path: String,
    pub source: String,
}

impl SourceFile {
    /// `repo/file_path`, the corpus-wide identifier of the file.
    pub fn qualified_path(&self) -> String {
        qualify(&self.repo, &self.file_path)
    }
}

pub fn qualify(repo: &str, file_path: &str) -> String {
    if repo.is_empty() || repo == "." {
        file_path.to_string()
    } else {
        format!("{repo}/{file_path}")
    }
}

/// Reads a corpus directory. Every immediate subdirectory is a repository;
/// `.py` files directly under `root` belong to the repository `.`.
/// Files come back sorted by (repo, path).
pub fn load_corpus_dir(root: &Path) -> std::io::Result<(Vec<SourceFile>, Vec<Diagnostic>)> {
    let mut files = Vec::new();
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
        let parts: Vec<String> = rel.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect();
        let (repo, file_path) = if parts.len() == 1 {
            (".".to_string(), parts[0].clone())
        } else {
            (parts[0].clone(), parts[1..].join("/"))
        };
        match std::fs::read(entry.path()) {
            Ok(bytes) => match String::from_utf8(bytes) {
                Ok(source) => files.push(SourceFile { repo, file_path, source }),
                Err(_) => diagnostics.push(Diagnostic {
                    file_path: qualify(&repo, &file_path),
                    error: "file is not valid UTF-8".into(),
                }),
            },
            Err(e) => diagnostics.push(Diagnostic { file_path: qualify(&repo, &file_path), error: e.to_string() }),
        }
    }
    files.sort_by(|a, b| (&a.repo, &a.file_path).cmp(&(&b.repo, &b.file_path)));
    Ok((files, diagnostics))
}

/// Reads JSONL records `{repo, file_path, source}`.
pub fn load_corpus_jsonl(text: &str) -> (Vec<SourceFile>, Vec<Diagnostic>) {
    let mut files = Vec::new();
    let mut diagnostics = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<SourceFile>(line) {
            Ok(f) => files.push(f),
            Err(e) => diagnostics.push(Diagnostic { file_path: format!("<record {}>", i + 1), error: e.to_string() }),
        }
    }
    files.sort_by(|a, b| (&a.repo, &a.file_path).cmp(&(&b.repo, &b.file_path)));
    (files, diagnostics)
}
