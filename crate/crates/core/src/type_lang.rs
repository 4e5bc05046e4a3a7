//! Type expressions: parsing, canonical rendering, normalization,
//! classification, match metrics and candidate admissibility.
//!
//! A [`TypeExpr`] keeps the surface spelling of an annotation. Comparisons
//! go through [`TypeExpr::normalized`], which strips `typing.` style module
//! prefixes and folds the capitalized `typing` aliases onto their builtin
//! spelling (`List` -> `list`). `Optional[T]` is deliberately *not* rewritten
//! to `Union[T, None]`.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::import_analysis::VisibleTypeSet;

/// Base used for a bare bracketed list, as in the first argument of
/// `Callable[[int, str], bool]`.
pub const LIST_BASE: &str = "[]";

const MODULE_PREFIXES: &[&str] = &["typing.", "typing_extensions.", "collections.abc."];

const ALIASES: &[(&str, &str)] = &[
    ("List", "list"),
    ("Dict", "dict"),
    ("Set", "set"),
    ("FrozenSet", "frozenset"),
    ("Tuple", "tuple"),
    ("Type", "type"),
];

/// Builtin and standard typing names, already in normalized spelling.
const BUILTIN_NAMES: &[&str] = &[
    "int",
    "str",
    "float",
    "bool",
    "bytes",
    "bytearray",
    "complex",
    "None",
    "object",
    "list",
    "dict",
    "set",
    "tuple",
    "frozenset",
    "type",
    "range",
    "slice",
    "Optional",
    "Union",
    "Any",
    "Callable",
    "Iterable",
    "Iterator",
    "Sequence",
    "Mapping",
    "MutableMapping",
    "MutableSequence",
    "MutableSet",
    "AbstractSet",
    "Collection",
    "Container",
    "Generator",
    "AsyncGenerator",
    "AsyncIterator",
    "AsyncIterable",
    "Awaitable",
    "Coroutine",
    "Literal",
    "NoReturn",
    "Never",
    "Hashable",
    "Sized",
    "Reversible",
    "ClassVar",
    "Final",
    "Annotated",
    "TypeVar",
    "Pattern",
    "Match",
    "IO",
    "TextIO",
    "BinaryIO",
    "AnyStr",
    "Text",
    "ByteString",
    "DefaultDict",
    "OrderedDict",
    "Counter",
    "Deque",
    "ChainMap",
    "SupportsInt",
    "SupportsFloat",
    "Self",
    "...",
    LIST_BASE,
];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TypeParseError {
    #[error("empty type expression")]
    Empty,
    #[error("unbalanced brackets in `{0}`")]
    Unbalanced(String),
    #[error("empty parameter in `{0}`")]
    EmptyParam(String),
    #[error("unexpected `{found}` at byte {pos} in `{text}`")]
    Unexpected { text: String, found: String, pos: usize },
}

/// Outermost-first type tree. Atomic types have no params.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TypeExpr {
    pub base: String,
    pub params: Vec<TypeExpr>,
}

/// Table 1 style category of a type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TypeCategory {
    Elementary,
    Generic,
    UserDefined,
}

impl TypeCategory {
    pub fn short_name(self) -> &'static str {
        match self {
            TypeCategory::Elementary => "Ele",
            TypeCategory::Generic => "Gen",
            TypeCategory::UserDefined => "Usr",
        }
    }
}

/// Exact / base match outcome for one prediction against one gold type.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchResult {
    pub exact: bool,
    pub base: bool,
}

impl TypeExpr {
    pub fn atom(name: impl Into<String>) -> Self {
        TypeExpr { base: name.into(), params: Vec::new() }
    }

    pub fn generic(name: impl Into<String>, params: Vec<TypeExpr>) -> Self {
        TypeExpr { base: name.into(), params }
    }

    pub fn is_atomic(&self) -> bool {
        self.params.is_empty()
    }

    /// Canonical surface text: `base[p1, p2]`.
    pub fn render(&self) -> String {
        self.to_string()
    }

    /// Alias-folded copy used for every comparison.
    pub fn normalized(&self) -> TypeExpr {
        TypeExpr { base: normalize_name(&self.base), params: self.params.iter().map(TypeExpr::normalized).collect() }
    }

    /// Canonical text of the normalized tree; the dedup key for candidate pools.
    pub fn key(&self) -> String {
        self.normalized().render()
    }

    pub fn depth(&self) -> usize {
        1 + self.params.iter().map(TypeExpr::depth).max().unwrap_or(0)
    }
}

impl fmt::Display for TypeExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.base == LIST_BASE {
            f.write_str("[")?;
            write_params(f, &self.params)?;
            return f.write_str("]");
        }
        f.write_str(&self.base)?;
        if !self.params.is_empty() {
            f.write_str("[")?;
            write_params(f, &self.params)?;
            f.write_str("]")?;
        }
        Ok(())
    }
}

fn write_params(f: &mut fmt::Formatter<'_>, params: &[TypeExpr]) -> fmt::Result {
    for (i, p) in params.iter().enumerate() {
        if i > 0 {
            f.write_str(", ")?;
        }
        write!(f, "{p}")?;
    }
    Ok(())
}

/// Strips known module prefixes and folds capitalized aliases.
pub fn normalize_name(name: &str) -> String {
    let mut name = name;
    for prefix in MODULE_PREFIXES {
        if let Some(rest) = name.strip_prefix(prefix) {
            name = rest;
            break;
        }
    }
    ALIASES
        .iter()
        .find(|(alias, _)| *alias == name)
        .map(|(_, canonical)| (*canonical).to_string())
        .unwrap_or_else(|| name.to_string())
}

/// Last dotted segment: `a.b.Foo` -> `Foo`.
pub fn final_segment(name: &str) -> &str {
    if name == "..." {
        return name;
    }
    name.rsplit('.').next().unwrap_or(name)
}

pub fn is_builtin_name(name: &str) -> bool {
    let normalized = normalize_name(name);
    BUILTIN_NAMES.contains(&normalized.as_str())
}

pub fn builtin_names() -> impl Iterator<Item = &'static str> {
    BUILTIN_NAMES.iter().copied()
}

pub fn parse_type(text: &str) -> Result<TypeExpr, TypeParseError> {
    let tokens = lex(text)?;
    if tokens.is_empty() {
        return Err(TypeParseError::Empty);
    }
    let mut parser = Parser { text, tokens, pos: 0 };
    let expr = parser.union(false)?;
    if let Some(tok) = parser.peek() {
        return Err(parser.unexpected(tok.clone()));
    }
    Ok(expr)
}

/// Normalized outermost name.
pub fn base_of(t: &TypeExpr) -> String {
    normalize_name(&t.base)
}

pub fn classify(t: &TypeExpr) -> TypeCategory {
    if !t.params.is_empty() {
        TypeCategory::Generic
    } else if is_builtin_name(&t.base) {
        TypeCategory::Elementary
    } else {
        TypeCategory::UserDefined
    }
}

/// Pool filter: builtins and builtin-based generics pass, other names only
/// when visible. Parameters are not inspected.
pub fn is_admissible(t: &TypeExpr, visible: &VisibleTypeSet) -> bool {
    is_builtin_name(&t.base) || visible.contains(&t.base)
}

pub fn match_types(pred: &TypeExpr, gold: &TypeExpr) -> MatchResult {
    let p = pred.normalized();
    let g = gold.normalized();
    MatchResult { exact: trees_equal(&p, &g), base: same_name(&p.base, &g.base) }
}

fn same_name(a: &str, b: &str) -> bool {
    a == b || final_segment(a) == final_segment(b)
}

fn trees_equal(a: &TypeExpr, b: &TypeExpr) -> bool {
    same_name(&a.base, &b.base)
        && a.params.len() == b.params.len()
        && a.params.iter().zip(&b.params).all(|(x, y)| trees_equal(x, y))
}

/// Collapses whitespace runs to a single space and trims; used on raw
/// annotation text before it is stored as an expected type.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

// ---------------------------------------------------------------------------
// lexer / parser

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Name(String),
    Str(String),
    Num(String),
    Ellipsis,
    Open,
    Close,
    Comma,
    Pipe,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Name(n) | Tok::Num(n) => n.clone(),
            Tok::Str(s) => format!("{s:?}"),
            Tok::Ellipsis => "...".into(),
            Tok::Open => "[".into(),
            Tok::Close => "]".into(),
            Tok::Comma => ",".into(),
            Tok::Pipe => "|".into(),
        }
    }
}

fn lex(text: &str) -> Result<Vec<(Tok, usize)>, TypeParseError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut depth: i64 = 0;
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        match c {
            b' ' | b'\t' | b'\n' | b'\r' => i += 1,
            b'[' => {
                depth += 1;
                out.push((Tok::Open, i));
                i += 1;
            }
            b']' => {
                depth -= 1;
                if depth < 0 {
                    return Err(TypeParseError::Unbalanced(text.to_string()));
                }
                out.push((Tok::Close, i));
                i += 1;
            }
            b',' => {
                out.push((Tok::Comma, i));
                i += 1;
            }
            b'|' => {
                out.push((Tok::Pipe, i));
                i += 1;
            }
            b'.' if text[i..].starts_with("...") => {
                out.push((Tok::Ellipsis, i));
                i += 3;
            }
            b'"' | b'\'' => {
                let start = i;
                i += 1;
                while i < bytes.len() && bytes[i] != c {
                    i += 1;
                }
                if i >= bytes.len() {
                    return Err(TypeParseError::Unexpected {
                        text: text.to_string(),
                        found: "unterminated string".into(),
                        pos: start,
                    });
                }
                out.push((Tok::Str(text[start..=i].to_string()), start));
                i += 1;
            }
            b'0'..=b'9' | b'-' => {
                let start = i;
                i += 1;
                while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                    i += 1;
                }
                out.push((Tok::Num(text[start..i].to_string()), start));
            }
            c if c == b'_' || c.is_ascii_alphabetic() || c >= 0x80 => {
                let start = i;
                while i < bytes.len() {
                    let b = bytes[i];
                    let word = b == b'_' || b.is_ascii_alphanumeric() || b >= 0x80;
                    let dotted = b == b'.'
                        && i + 1 < bytes.len()
                        && (bytes[i + 1] == b'_' || bytes[i + 1].is_ascii_alphabetic());
                    if word || dotted {
                        i += 1;
                    } else {
                        break;
                    }
                }
                out.push((Tok::Name(text[start..i].to_string()), start));
            }
            _ => {
                let ch = text[i..].chars().next().unwrap_or('?');
                return Err(TypeParseError::Unexpected { text: text.to_string(), found: ch.to_string(), pos: i });
            }
        }
    }
    if depth != 0 {
        return Err(TypeParseError::Unbalanced(text.to_string()));
    }
    Ok(out)
}

struct Parser<'a> {
    text: &'a str,
    tokens: Vec<(Tok, usize)>,
    pos: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos).map(|(t, _)| t)
    }

    fn next(&mut self) -> Option<Tok> {
        let tok = self.tokens.get(self.pos).map(|(t, _)| t.clone());
        self.pos += 1;
        tok
    }

    fn unexpected(&self, tok: Tok) -> TypeParseError {
        let pos = self.tokens.get(self.pos).map(|(_, p)| *p).unwrap_or(self.text.len());
        TypeParseError::Unexpected { text: self.text.to_string(), found: tok.describe(), pos }
    }

    fn union(&mut self, literal: bool) -> Result<TypeExpr, TypeParseError> {
        let first = self.primary(literal)?;
        if self.peek() != Some(&Tok::Pipe) {
            return Ok(first);
        }
        let mut members = vec![first];
        while self.peek() == Some(&Tok::Pipe) {
            self.pos += 1;
            members.push(self.primary(literal)?);
        }
        Ok(TypeExpr::generic("Union", members))
    }

    fn primary(&mut self, literal: bool) -> Result<TypeExpr, TypeParseError> {
        match self.next() {
            Some(Tok::Name(name)) => {
                if self.peek() == Some(&Tok::Open) {
                    self.pos += 1;
                    let inner_literal = final_segment(&name) == "Literal";
                    let params = self.params(inner_literal, false)?;
                    Ok(TypeExpr::generic(name, params))
                } else {
                    Ok(TypeExpr::atom(name))
                }
            }
            Some(Tok::Open) => {
                let params = self.params(literal, true)?;
                Ok(TypeExpr::generic(LIST_BASE, params))
            }
            Some(Tok::Str(s)) if literal => Ok(TypeExpr::atom(s)),
            Some(Tok::Str(s)) => {
                let inner = &s[1..s.len() - 1];
                parse_type(inner)
            }
            Some(Tok::Num(n)) => Ok(TypeExpr::atom(n)),
            Some(Tok::Ellipsis) => Ok(TypeExpr::atom("...")),
            Some(Tok::Close) | Some(Tok::Comma) => Err(TypeParseError::EmptyParam(self.text.to_string())),
            Some(tok) => {
                self.pos -= 1;
                Err(self.unexpected(tok))
            }
            None => Err(TypeParseError::Unbalanced(self.text.to_string())),
        }
    }

    /// Parses `p1, p2, ...]` after an opening bracket has been consumed.
    fn params(&mut self, literal: bool, allow_empty: bool) -> Result<Vec<TypeExpr>, TypeParseError> {
        if self.peek() == Some(&Tok::Close) {
            self.pos += 1;
            return if allow_empty { Ok(Vec::new()) } else { Err(TypeParseError::EmptyParam(self.text.to_string())) };
        }
        let mut params = Vec::new();
        loop {
            params.push(self.union(literal)?);
            match self.next() {
                Some(Tok::Comma) => continue,
                Some(Tok::Close) => return Ok(params),
                Some(tok) => {
                    self.pos -= 1;
                    return Err(self.unexpected(tok));
                }
                None => return Err(TypeParseError::Unbalanced(self.text.to_string())),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::import_analysis::{Provenance, VisibleTypeSet};
    use proptest::prelude::*;

    fn t(s: &str) -> TypeExpr {
        parse_type(s).unwrap()
    }

    #[test]
    fn parses_union_pair() {
        let u = t("Union[str,int]");
        assert_eq!(u.base, "Union");
        assert_eq!(u.params, vec![TypeExpr::atom("str"), TypeExpr::atom("int")]);
        assert_eq!(u.render(), "Union[str, int]");
    }

    #[test]
    fn atomic_and_nested() {
        assert_eq!(t("int"), TypeExpr::atom("int"));
        let d = t("Dict[str, List[int]]");
        assert_eq!(d.depth(), 3);
        assert_eq!(d.params[1], TypeExpr::generic("List", vec![TypeExpr::atom("int")]));
        assert_eq!(d.params[1].params.len(), 1);
    }

    #[test]
    fn forward_refs_are_unquoted_except_in_literal() {
        assert_eq!(t("Optional['Node']"), t("Optional[Node]"));
        assert_eq!(t("Literal['a', 'b']").params[0].base, "'a'");
    }

    #[test]
    fn callable_and_ellipsis() {
        let c = t("Callable[[int, str], bool]");
        assert_eq!(c.params[0].base, LIST_BASE);
        assert_eq!(c.render(), "Callable[[int, str], bool]");
        assert_eq!(t("Callable[[], None]").params[0].params.len(), 0);
        assert_eq!(t("Tuple[int, ...]").params[1].base, "...");
    }

    #[test]
    fn pipe_unions_fold_into_union() {
        assert_eq!(t("int | None"), TypeExpr::generic("Union", vec![t("int"), t("None")]));
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(parse_type(""), Err(TypeParseError::Empty)));
        assert!(matches!(parse_type("List[int"), Err(TypeParseError::Unbalanced(_))));
        assert!(matches!(parse_type("List[int]]"), Err(TypeParseError::Unbalanced(_))));
        assert!(matches!(parse_type("List[]"), Err(TypeParseError::EmptyParam(_))));
        assert!(matches!(parse_type("Dict[str, ]"), Err(TypeParseError::EmptyParam(_))));
        assert!(parse_type("int str").is_err());
        assert!(parse_type("<TYPE>").is_err());
    }

    #[test]
    fn base_of_normalizes() {
        assert_eq!(base_of(&t("Union[str,list]")), "Union");
        assert_eq!(base_of(&t("int")), "int");
        assert_eq!(base_of(&t("list[Foo]")), "list");
        assert_eq!(base_of(&t("List[Foo]")), "list");
        assert_eq!(base_of(&t("typing.Dict[str, int]")), "dict");
    }

    #[test]
    fn classification() {
        assert_eq!(classify(&t("int")), TypeCategory::Elementary);
        assert_eq!(classify(&t("None")), TypeCategory::Elementary);
        assert_eq!(classify(&t("List[int]")), TypeCategory::Generic);
        assert_eq!(classify(&t("IDMapKey")), TypeCategory::UserDefined);
        assert_eq!(classify(&t("Foo[int]")), TypeCategory::Generic);
    }

    #[test]
    fn admissibility_rule() {
        let empty = VisibleTypeSet::default();
        assert!(!is_admissible(&t("Foo"), &empty));
        assert!(is_admissible(&t("list[Foo]"), &empty));
        assert!(is_admissible(&t("Optional[Foo]"), &empty));
        assert!(!is_admissible(&t("Foo[int]"), &empty));
        let mut visible = VisibleTypeSet::default();
        visible.insert("IDMap", Provenance::SameFile);
        assert!(is_admissible(&t("IDMap"), &visible));
        assert!(is_admissible(&t("pkg.IDMap"), &visible));
    }

    #[test]
    fn match_pairs() {
        let m = match_types(&t("Union[str,list]"), &t("Union[str,int]"));
        assert_eq!(m, MatchResult { exact: false, base: true });
        assert_eq!(match_types(&t("int"), &t("int")), MatchResult { exact: true, base: true });
        assert_eq!(match_types(&t("List[int]"), &t("list[int]")), MatchResult { exact: true, base: true });
        assert_eq!(match_types(&t("a.b.Foo"), &t("Foo")), MatchResult { exact: true, base: true });
        // kept distinct on purpose
        assert!(!match_types(&t("Optional[int]"), &t("Union[int, None]")).base);
    }

    fn arb_type() -> impl Strategy<Value = TypeExpr> {
        let leaf =
            prop::sample::select(vec!["int", "str", "None", "Foo", "List", "Dict", "a.Bar"]).prop_map(TypeExpr::atom);
        leaf.prop_recursive(3, 16, 3, |inner| {
            (
                prop::sample::select(vec!["List", "Dict", "Union", "Optional", "Foo", "typing.Set"]),
                prop::collection::vec(inner, 1..4),
            )
                .prop_map(|(b, ps)| TypeExpr::generic(b, ps))
        })
    }

    proptest! {
        #[test]
        fn render_parse_roundtrip(ty in arb_type()) {
            prop_assert_eq!(parse_type(&ty.render()).unwrap(), ty);
        }

        #[test]
        fn exact_implies_base(a in arb_type(), b in arb_type()) {
            let m = match_types(&a, &b);
            prop_assert!(!m.exact || m.base);
            prop_assert!(match_types(&a, &a).exact);
        }

        #[test]
        fn bracketed_is_generic(ty in arb_type()) {
            if !ty.params.is_empty() {
                prop_assert_eq!(classify(&ty), TypeCategory::Generic);
            }
        }

        #[test]
        fn admissibility_monotone(ty in arb_type(), extra in prop::collection::vec("[A-Z][a-z]{0,4}", 0..5)) {
            let small = VisibleTypeSet::default();
            let mut big = VisibleTypeSet::default();
            for n in &extra {
                big.insert(n, Provenance::Imported);
            }
            if is_admissible(&ty, &small) {
                prop_assert!(is_admissible(&ty, &big));
            }
        }
    }
}
