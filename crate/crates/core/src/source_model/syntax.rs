//! Structure of a single function definition: header, parameters, return
//! annotation and local bindings, all as byte spans into the function text.

use std::ops::Range;

use super::lexer::{find_top_level, is_name, is_op, matching_close, scan, split_top_level, tok_text, TokKind, Token};
use super::{is_def_header, SourceError, TypeSlot, VarKind};

const KEYWORDS: &[&str] = &[
    "False", "None", "True", "and", "as", "assert", "async", "await", "break", "class", "continue", "def", "del",
    "elif", "else", "except", "finally", "for", "from", "global", "if", "import", "in", "is", "lambda", "nonlocal",
    "not", "or", "pass", "raise", "return", "try", "while", "with", "yield",
];

#[derive(Debug, Clone)]
pub(crate) struct Param {
    pub name: String,
    pub name_span: Range<usize>,
    pub annotation: Option<Range<usize>>,
}

#[derive(Debug, Clone)]
pub(crate) struct Binding {
    pub name: String,
    pub name_span: Range<usize>,
    pub annotation: Option<Range<usize>>,
}

#[derive(Debug, Clone)]
pub(crate) struct FunctionSyntax {
    pub name: String,
    pub params: Vec<Param>,
    pub close_paren_end: usize,
    pub ret_annotation: Option<Range<usize>>,
    pub bindings: Vec<Binding>,
}

/// A single splice into the function text.
pub(crate) struct Edit {
    pub range: Range<usize>,
    pub replacement: String,
}

fn syntax_err(line: usize, message: impl Into<String>) -> SourceError {
    SourceError::Syntax { line, message: message.into() }
}

fn span(tokens: &[Token]) -> Option<Range<usize>> {
    Some(tokens.first()?.start..tokens.last()?.end)
}

fn is_ident(src: &str, tok: &Token) -> bool {
    tok.kind == TokKind::Name && !KEYWORDS.contains(&tok_text(src, tok))
}

impl FunctionSyntax {
    pub fn parse(src: &str) -> Result<FunctionSyntax, SourceError> {
        let scan = scan(src);
        if let Some(e) = scan.errors.first() {
            return Err(syntax_err(e.line, e.message.clone()));
        }
        let Some(header) = scan.lines.first() else {
            return Err(syntax_err(1, "empty function text"));
        };
        let toks = scan.line_tokens(header);
        if !is_def_header(src, toks) {
            return Err(syntax_err(1, "expected `def`"));
        }
        let mut i = if is_name(src, &toks[0], "async") { 2 } else { 1 };
        let name_tok =
            toks.get(i).filter(|t| is_ident(src, t)).ok_or_else(|| syntax_err(1, "expected function name"))?;
        let name = tok_text(src, name_tok).to_string();
        i += 1;
        if !toks.get(i).is_some_and(|t| is_op(src, t, "(")) {
            return Err(syntax_err(1, "expected `(` after function name"));
        }
        let close = matching_close(src, toks, i).ok_or_else(|| syntax_err(1, "unclosed parameter list"))?;
        let params = parse_params(src, &toks[i + 1..close])?;
        let close_paren_end = toks[close].end;

        let rest = &toks[close + 1..];
        let colon = find_top_level(src, rest, ":").ok_or_else(|| syntax_err(1, "expected `:` after signature"))?;
        let ret_annotation = if rest.first().is_some_and(|t| is_op(src, t, "->")) {
            let ann = &rest[1..colon];
            Some(span(ann).ok_or_else(|| syntax_err(1, "empty return annotation"))?)
        } else if colon != 0 {
            return Err(syntax_err(1, "unexpected tokens before `:`"));
        } else {
            None
        };

        let mut bindings = Vec::new();
        // inline body after the header colon
        let inline = &rest[colon + 1..];
        if !inline.is_empty() {
            collect_bindings(src, inline, &mut bindings);
        }
        let mut nested_indent: Option<usize> = None;
        for line in &scan.lines[1..] {
            if let Some(indent) = nested_indent {
                if line.indent > indent {
                    continue;
                }
                nested_indent = None;
            }
            let toks = scan.line_tokens(line);
            if is_def_header(src, toks) || toks.first().is_some_and(|t| is_name(src, t, "class")) {
                nested_indent = Some(line.indent);
                continue;
            }
            collect_bindings(src, toks, &mut bindings);
        }
        let param_names: Vec<&str> = params.iter().map(|p| p.name.as_str()).collect();
        bindings.retain(|b| !param_names.contains(&b.name.as_str()));
        Ok(FunctionSyntax { name, params, close_paren_end, ret_annotation, bindings })
    }

    /// Parameters that are slots: everything except `self` and `cls`.
    pub fn slot_params(&self) -> impl Iterator<Item = &Param> {
        self.params.iter().filter(|p| p.name != "self" && p.name != "cls")
    }

    pub fn local_bindings(&self) -> impl Iterator<Item = &Binding> {
        self.bindings.iter()
    }

    fn binding(&self, name: &str, occurrence: usize) -> Option<&Binding> {
        self.bindings.iter().filter(|b| b.name == name).nth(occurrence)
    }

    pub fn slot_edit(&self, slot: &TypeSlot) -> Option<Edit> {
        let placeholder = super::TYPE_PLACEHOLDER.to_string();
        let (name_end, annotation) = match slot.var_kind {
            VarKind::Arg => {
                let p = self.slot_params().find(|p| p.name == slot.var_name)?;
                (p.name_span.end, p.annotation.clone())
            }
            VarKind::Local => {
                let b = self.binding(&slot.var_name, slot.occurrence_index)?;
                (b.name_span.end, b.annotation.clone())
            }
            VarKind::Ret => {
                return Some(match &self.ret_annotation {
                    Some(r) => Edit { range: r.clone(), replacement: placeholder },
                    None => Edit {
                        range: self.close_paren_end..self.close_paren_end,
                        replacement: format!(" -> {placeholder}"),
                    },
                });
            }
        };
        Some(match annotation {
            Some(r) => Edit { range: r, replacement: placeholder },
            None => Edit { range: name_end..name_end, replacement: format!(": {placeholder}") },
        })
    }

    /// Existing annotations as (slot, annotation span), in slot order.
    pub fn annotations(&self) -> Vec<(TypeSlot, Range<usize>)> {
        let mut out = Vec::new();
        for p in self.slot_params() {
            if let Some(a) = &p.annotation {
                out.push((TypeSlot::arg(p.name.clone()), a.clone()));
            }
        }
        let mut counts = std::collections::HashMap::new();
        for b in &self.bindings {
            let occ = counts.entry(b.name.as_str()).or_insert(0usize);
            if let Some(a) = &b.annotation {
                out.push((TypeSlot::local(b.name.clone(), *occ), a.clone()));
            }
            *occ += 1;
        }
        if let Some(r) = &self.ret_annotation {
            out.push((TypeSlot::ret(), r.clone()));
        }
        out
    }
}

fn parse_params(src: &str, toks: &[Token]) -> Result<Vec<Param>, SourceError> {
    let mut params = Vec::new();
    if toks.is_empty() {
        return Ok(params);
    }
    let chunks = split_top_level(src, toks, ",");
    let n = chunks.len();
    for (idx, chunk) in chunks.into_iter().enumerate() {
        if chunk.is_empty() {
            // a single trailing comma is legal
            if idx == n - 1 && idx > 0 {
                continue;
            }
            return Err(syntax_err(1, "empty parameter"));
        }
        let mut j = 0;
        if chunk[0].kind == TokKind::Op && matches!(tok_text(src, &chunk[0]), "*" | "**" | "/") {
            if chunk.len() == 1 {
                continue;
            }
            if tok_text(src, &chunk[0]) == "/" {
                return Err(syntax_err(1, "malformed parameter"));
            }
            j = 1;
        }
        let name_tok = &chunk[j];
        if !is_ident(src, name_tok) {
            return Err(syntax_err(1, format!("malformed parameter `{}`", tok_text(src, name_tok))));
        }
        let after = &chunk[j + 1..];
        let annotation = if after.first().is_some_and(|t| is_op(src, t, ":")) {
            let ann_toks = &after[1..];
            let end = find_top_level(src, ann_toks, "=").unwrap_or(ann_toks.len());
            Some(span(&ann_toks[..end]).ok_or_else(|| syntax_err(1, "empty parameter annotation"))?)
        } else if after.is_empty() || is_op(src, &after[0], "=") {
            None
        } else {
            return Err(syntax_err(1, format!("malformed parameter `{}`", tok_text(src, name_tok))));
        };
        params.push(Param {
            name: tok_text(src, name_tok).to_string(),
            name_span: name_tok.start..name_tok.end,
            annotation,
        });
    }
    Ok(params)
}

fn collect_bindings(src: &str, toks: &[Token], out: &mut Vec<Binding>) {
    for stmt in split_top_level(src, toks, ";") {
        let [target, op, rest @ ..] = stmt else { continue };
        if !is_ident(src, target) || tok_text(src, target) == super::TYPE_PLACEHOLDER {
            continue;
        }
        let name = tok_text(src, target).to_string();
        let name_span = target.start..target.end;
        if is_op(src, op, "=") {
            out.push(Binding { name, name_span, annotation: None });
        } else if is_op(src, op, ":") {
            let end = find_top_level(src, rest, "=").unwrap_or(rest.len());
            if let Some(annotation) = span(&rest[..end]) {
                out.push(Binding { name, name_span, annotation: Some(annotation) });
            }
        }
    }
}
