//! A small Python tokenizer that understands just enough of the lexical
//! grammar (strings, comments, brackets, continuation lines, indentation)
//! to split a file into logical lines of tokens with byte spans.

use std::ops::Range;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum TokKind {
    Name,
    Number,
    Str,
    Op,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Token {
    pub kind: TokKind,
    pub start: usize,
    pub end: usize,
    pub end_line: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct LogicalLine {
    pub tokens: Range<usize>,
    /// Column of the first token of the line.
    pub indent: usize,
    /// Byte offset of the physical line holding the first token.
    pub line_start: usize,
    pub first_line: usize,
    pub last_line: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct ScanError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Default)]
pub(crate) struct Scan {
    pub tokens: Vec<Token>,
    pub lines: Vec<LogicalLine>,
    pub errors: Vec<ScanError>,
}

const THREE_CHAR_OPS: &[&str] = &["**=", "//=", ">>=", "<<=", "..."];
const TWO_CHAR_OPS: &[&str] =
    &["->", "**", "//", ":=", "==", "!=", "<=", ">=", "+=", "-=", "*=", "/=", "%=", "&=", "|=", "^=", "@=", "<<", ">>"];

pub const PLACEHOLDER: &str = "<TYPE>";

impl Scan {
    pub fn line_tokens(&self, line: &LogicalLine) -> &[Token] {
        &self.tokens[line.tokens.clone()]
    }
}

pub(crate) fn tok_text<'a>(src: &'a str, tok: &Token) -> &'a str {
    &src[tok.start..tok.end]
}

pub(crate) fn is_op(src: &str, tok: &Token, op: &str) -> bool {
    tok.kind == TokKind::Op && tok_text(src, tok) == op
}

pub(crate) fn is_name(src: &str, tok: &Token, name: &str) -> bool {
    tok.kind == TokKind::Name && tok_text(src, tok) == name
}

fn is_ident_start(c: char) -> bool {
    c == '_' || c.is_alphabetic()
}

fn is_ident_continue(c: char) -> bool {
    c == '_' || c.is_alphanumeric()
}

fn column_of(src: &str, line_start: usize, pos: usize) -> usize {
    src[line_start..pos].chars().fold(0, |col, c| if c == '\t' { (col / 8 + 1) * 8 } else { col + 1 })
}

/// Length of a string prefix + opening quote at `pos`, if a string starts
/// there. Returns (prefix_len, quote_char, triple).
fn string_opening(src: &str, pos: usize) -> Option<(usize, u8, bool)> {
    let bytes = src.as_bytes();
    let mut i = pos;
    while i < bytes.len() && i - pos < 2 && matches!(bytes[i].to_ascii_lowercase(), b'r' | b'b' | b'u' | b'f') {
        i += 1;
    }
    if i >= bytes.len() || !(bytes[i] == b'"' || bytes[i] == b'\'') {
        return None;
    }
    if i > pos {
        // a prefix must not be the tail of a longer identifier
        let prefix = &src[pos..i].to_ascii_lowercase();
        if !matches!(prefix.as_str(), "r" | "b" | "u" | "f" | "rb" | "br" | "fr" | "rf") {
            return None;
        }
    }
    let q = bytes[i];
    let triple = bytes.len() >= i + 3 && bytes[i + 1] == q && bytes[i + 2] == q;
    Some((i - pos, q, triple))
}

/// Position after a backslash escape starting at `pos`.
fn skip_escape(src: &str, pos: usize) -> usize {
    let next = src[pos + 1..].chars().next().map_or(0, char::len_utf8);
    pos + 1 + next
}

pub(crate) fn scan(src: &str) -> Scan {
    let bytes = src.as_bytes();
    let mut out = Scan::default();
    let mut i = 0;
    let mut line = 1;
    let mut phys_line_start = 0;
    let mut depth: i64 = 0;
    // current logical line bookkeeping
    let mut cur_first_tok: Option<usize> = None;
    let mut cur_indent = 0;
    let mut cur_line_start = 0;
    let mut cur_first_line = 1;
    let mut at_line_begin = true;

    macro_rules! close_line {
        () => {
            if let Some(first) = cur_first_tok.take() {
                let last_line = out.tokens.last().map(|t| t.end_line).unwrap_or(line);
                out.lines.push(LogicalLine {
                    tokens: first..out.tokens.len(),
                    indent: cur_indent,
                    line_start: cur_line_start,
                    first_line: cur_first_line,
                    last_line,
                });
            }
        };
    }

    while i < bytes.len() {
        let c = bytes[i];
        if c == b'\n' {
            if depth <= 0 {
                close_line!();
                depth = 0;
            }
            i += 1;
            line += 1;
            phys_line_start = i;
            at_line_begin = true;
            continue;
        }
        if c == b' ' || c == b'\t' || c == b'\r' || c == b'\x0c' {
            i += 1;
            continue;
        }
        if c == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        if c == b'\\' && i + 1 < bytes.len() && (bytes[i + 1] == b'\n' || bytes[i + 1] == b'\r') {
            i += 1;
            if bytes[i] == b'\r' {
                i += 1;
            }
            if i < bytes.len() && bytes[i] == b'\n' {
                i += 1;
            }
            line += 1;
            phys_line_start = i;
            at_line_begin = false;
            continue;
        }

        // a new physical line inside an open bracket that looks like a fresh
        // definition means the bracket was never closed
        if at_line_begin && depth > 0 && cur_first_tok.is_some() {
            let col = column_of(src, phys_line_start, i);
            let rest = &src[i..];
            if col <= cur_indent
                && (rest.starts_with("def ") || rest.starts_with("class ") || rest.starts_with("async def "))
            {
                out.errors.push(ScanError { line: cur_first_line, message: "unclosed bracket".to_string() });
                close_line!();
                depth = 0;
            }
        }

        if cur_first_tok.is_none() {
            cur_first_tok = Some(out.tokens.len());
            cur_indent = column_of(src, phys_line_start, i);
            cur_line_start = phys_line_start;
            cur_first_line = line;
        }
        at_line_begin = false;
        let start = i;
        let start_line = line;

        if let Some((prefix, q, triple)) = string_opening(src, i) {
            i += prefix;
            if triple {
                i += 3;
                let mut closed = false;
                while i < bytes.len() {
                    if bytes[i] == b'\\' && bytes.get(i + 1) != Some(&b'\n') {
                        i = skip_escape(src, i);
                        continue;
                    }
                    if bytes[i] == b'\n' {
                        line += 1;
                        phys_line_start = i + 1;
                    }
                    if bytes[i] == q && bytes.get(i + 1) == Some(&q) && bytes.get(i + 2) == Some(&q) {
                        i += 3;
                        closed = true;
                        break;
                    }
                    i += 1;
                }
                if !closed {
                    out.errors
                        .push(ScanError { line: start_line, message: "unterminated triple-quoted string".to_string() });
                    i = bytes.len();
                }
            } else {
                i += 1;
                let mut closed = false;
                while i < bytes.len() && bytes[i] != b'\n' {
                    if bytes[i] == b'\\' {
                        i = skip_escape(src, i);
                        continue;
                    }
                    if bytes[i] == q {
                        i += 1;
                        closed = true;
                        break;
                    }
                    i += 1;
                }
                if !closed {
                    out.errors.push(ScanError { line: start_line, message: "unterminated string literal".to_string() });
                }
            }
            let end = i.min(bytes.len());
            i = end;
            out.tokens.push(Token { kind: TokKind::Str, start, end, end_line: line });
            continue;
        }

        if src[i..].starts_with(PLACEHOLDER) {
            i += PLACEHOLDER.len();
            out.tokens.push(Token { kind: TokKind::Name, start, end: i, end_line: line });
            continue;
        }

        let ch = src[i..].chars().next().unwrap_or('\u{fffd}');
        if is_ident_start(ch) {
            i += ch.len_utf8();
            while let Some(c) = src[i..].chars().next() {
                if is_ident_continue(c) {
                    i += c.len_utf8();
                } else {
                    break;
                }
            }
            out.tokens.push(Token { kind: TokKind::Name, start, end: i, end_line: line });
            continue;
        }
        if ch.is_ascii_digit() || (ch == '.' && bytes.get(i + 1).is_some_and(u8::is_ascii_digit)) {
            i += 1;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_' || bytes[i] == b'.') {
                i += 1;
            }
            out.tokens.push(Token { kind: TokKind::Number, start, end: i, end_line: line });
            continue;
        }

        let rest = &src[i..];
        let len = THREE_CHAR_OPS
            .iter()
            .chain(TWO_CHAR_OPS)
            .find(|op| rest.starts_with(**op))
            .map(|op| op.len())
            .unwrap_or(ch.len_utf8());
        match c {
            b'(' | b'[' | b'{' => depth += 1,
            b')' | b']' | b'}' => {
                depth -= 1;
                if depth < 0 {
                    out.errors.push(ScanError { line, message: "unmatched closing bracket".to_string() });
                    depth = 0;
                }
            }
            _ => {}
        }
        i += len;
        out.tokens.push(Token { kind: TokKind::Op, start, end: i, end_line: line });
    }
    if depth > 0 {
        out.errors.push(ScanError { line: cur_first_line, message: "unclosed bracket at end of input".to_string() });
    }
    close_line!();
    out
}

/// Splits `tokens` at top-level occurrences of `sep`, tracking nested brackets.
pub(crate) fn split_top_level<'t>(src: &str, tokens: &'t [Token], sep: &str) -> Vec<&'t [Token]> {
    let mut parts = Vec::new();
    let mut depth = 0i64;
    let mut start = 0;
    for (idx, tok) in tokens.iter().enumerate() {
        if tok.kind == TokKind::Op {
            match tok_text(src, tok) {
                "(" | "[" | "{" => depth += 1,
                ")" | "]" | "}" => depth -= 1,
                s if s == sep && depth == 0 => {
                    parts.push(&tokens[start..idx]);
                    start = idx + 1;
                }
                _ => {}
            }
        }
    }
    parts.push(&tokens[start..]);
    parts
}

/// Index of the first top-level token equal to `op`.
pub(crate) fn find_top_level(src: &str, tokens: &[Token], op: &str) -> Option<usize> {
    let mut depth = 0i64;
    for (idx, tok) in tokens.iter().enumerate() {
        if tok.kind != TokKind::Op {
            continue;
        }
        match tok_text(src, tok) {
            "(" | "[" | "{" => depth += 1,
            ")" | "]" | "}" => depth -= 1,
            s if s == op && depth == 0 => return Some(idx),
            _ => {}
        }
    }
    None
}

/// Index of the bracket matching the opener at `open`.
pub(crate) fn matching_close(src: &str, tokens: &[Token], open: usize) -> Option<usize> {
    let mut depth = 0i64;
    for (idx, tok) in tokens.iter().enumerate().skip(open) {
        if tok.kind != TokKind::Op {
            continue;
        }
        match tok_text(src, tok) {
            "(" | "[" | "{" => depth += 1,
            ")" | "]" | "}" => {
                depth -= 1;
                if depth == 0 {
                    return Some(idx);
                }
            }
            _ => {}
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texts(src: &str) -> Vec<Vec<String>> {
        let s = scan(src);
        s.lines.iter().map(|l| s.line_tokens(l).iter().map(|t| tok_text(src, t).to_string()).collect()).collect()
    }

    #[test]
    fn logical_lines_join_brackets_and_skip_comments() {
        let src = "def f(a,\n      b):  # c\n    x = '#' + \"\"\"q\n\"\"\"\n\n    return x\n";
        let lines = texts(src);
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], vec!["def", "f", "(", "a", ",", "b", ")", ":"]);
        assert_eq!(lines[1], vec!["x", "=", "'#'", "+", "\"\"\"q\n\"\"\""]);
        let s = scan(src);
        assert_eq!(s.lines[1].indent, 4);
        assert_eq!((s.lines[1].first_line, s.lines[1].last_line), (3, 4));
        assert!(s.errors.is_empty());
    }

    #[test]
    fn operators_and_placeholder() {
        let lines = texts("def f(k: <TYPE>) -> int:\n    x += 1; y == 2\n");
        assert_eq!(lines[0], vec!["def", "f", "(", "k", ":", "<TYPE>", ")", "->", "int", ":"]);
        assert!(lines[1].contains(&"+=".to_string()) && lines[1].contains(&"==".to_string()));
    }

    #[test]
    fn unclosed_bracket_recovers_at_next_def() {
        let src = "def a(x:\n    pass\ndef b():\n    pass\n";
        let s = scan(src);
        assert_eq!(s.errors.len(), 1);
        let lines = texts(src);
        assert_eq!(lines.last().unwrap(), &vec!["pass".to_string()]);
        assert!(lines.iter().any(|l| l.first().map(String::as_str) == Some("def") && l[1] == "b"));
    }

    #[test]
    fn never_panics_on_odd_bytes() {
        for src in ["\"", "'''", "\\", "(((", ")))", "é = 1", "\t\tx", "r'", "0x1f.e"] {
            let _ = scan(src);
        }
    }
}
