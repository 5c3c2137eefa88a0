//! A small YAML subset: block maps and lists with 2-space indentation,
//! flow lists of scalars, plain or quoted scalars and `#` comments.
//! Anchors, aliases, tags, block scalars and multi-document streams are
//! rejected.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

const UNSUPPORTED_HINT: &str = "see the configuration section of the README for the supported YAML subset";

#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Null,
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
    List(Vec<Value>),
    Map(Vec<(String, Value)>),
}

impl Value {
    pub fn type_name(&self) -> &'static str {
        match self {
            Value::Null => "null",
            Value::Bool(_) => "bool",
            Value::Int(_) => "integer",
            Value::Float(_) => "number",
            Value::Str(_) => "string",
            Value::List(_) => "list",
            Value::Map(_) => "map",
        }
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        match self {
            Value::Map(m) => m.iter().find(|(k, _)| k == key).map(|(_, v)| v),
            _ => None,
        }
    }

    /// Dotted-path lookup, e.g. `training.ctc_weight`.
    pub fn lookup(&self, path: &str) -> Option<&Value> {
        path.split('.').try_fold(self, |v, k| v.get(k))
    }

    /// Sets a dotted path, creating intermediate maps.
    pub fn set_path(&mut self, path: &str, value: Value) -> Result<()> {
        let mut cur = self;
        let parts: Vec<&str> = path.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let Value::Map(m) = cur else {
                return Err(Error::config(path, "parent is not a map"));
            };
            let pos = match m.iter().position(|(k, _)| k == part) {
                Some(p) => p,
                None => {
                    m.push((part.to_string(), Value::Map(Vec::new())));
                    m.len() - 1
                }
            };
            if i + 1 == parts.len() {
                m[pos].1 = value;
                return Ok(());
            }
            cur = &mut m[pos].1;
        }
        Ok(())
    }
}

struct Line<'a> {
    no: usize,
    indent: usize,
    text: &'a str,
}

struct Parser<'a> {
    lines: Vec<Line<'a>>,
    pos: usize,
    path: &'a Path,
}

fn strip_comment(line: &str) -> &str {
    let mut quote = None;
    let mut prev_space = true;
    for (i, c) in line.char_indices() {
        match quote {
            Some(q) if c == q => quote = None,
            Some(_) => {}
            None if c == '"' || c == '\'' => quote = Some(c),
            None if c == '#' && prev_space => return &line[..i],
            None => {}
        }
        prev_space = c == ' ';
    }
    line
}

/// Splits `key: rest` outside quotes. Returns `None` for lines without a mapping colon.
fn split_key(text: &str) -> Option<(&str, &str)> {
    let mut quote = None;
    for (i, c) in text.char_indices() {
        match quote {
            Some(q) if c == q => quote = None,
            Some(_) => {}
            None if c == '"' || c == '\'' => quote = Some(c),
            None if c == ':' => {
                let rest = &text[i + 1..];
                if rest.is_empty() || rest.starts_with(' ') {
                    return Some((text[..i].trim(), rest.trim()));
                }
            }
            None => {}
        }
    }
    None
}

impl<'a> Parser<'a> {
    fn err(&self, no: usize, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            line: no,
            msg: msg.into(),
        }
    }

    fn parse_block(&mut self, indent: usize) -> Result<Value> {
        let first = &self.lines[self.pos];
        if first.text.starts_with("- ") || first.text == "-" {
            self.parse_list(indent)
        } else {
            self.parse_map(indent)
        }
    }

    fn parse_map(&mut self, indent: usize) -> Result<Value> {
        let mut entries: Vec<(String, Value)> = Vec::new();
        while self.pos < self.lines.len() {
            let line = &self.lines[self.pos];
            if line.indent < indent {
                break;
            }
            if line.indent > indent {
                return Err(self.err(line.no, "unexpected indentation"));
            }
            let no = line.no;
            let Some((key, rest)) = split_key(line.text) else {
                return Err(self.err(no, format!("expected `key: value`, found `{}`", line.text)));
            };
            let key = unquote(key).to_string();
            if key.is_empty() {
                return Err(self.err(no, "empty key"));
            }
            if entries.iter().any(|(k, _)| *k == key) {
                return Err(self.err(no, format!("duplicate key `{key}`")));
            }
            self.pos += 1;
            let value = if rest.is_empty() {
                self.nested(indent, no)?
            } else {
                self.scalar_or_flow(rest, no)?
            };
            entries.push((key, value));
        }
        Ok(Value::Map(entries))
    }

    fn nested(&mut self, indent: usize, no: usize) -> Result<Value> {
        match self.lines.get(self.pos) {
            Some(next) if next.indent > indent => {
                if next.indent != indent + 2 {
                    return Err(self.err(next.no, "nested blocks must be indented by 2 spaces"));
                }
                self.parse_block(indent + 2)
            }
            // A list may sit at the same indentation as its parent key.
            Some(next) if next.indent == indent && next.text.starts_with('-') => self.parse_list(indent),
            _ => {
                let _ = no;
                Ok(Value::Null)
            }
        }
    }

    fn parse_list(&mut self, indent: usize) -> Result<Value> {
        let mut items = Vec::new();
        while self.pos < self.lines.len() {
            let line = &self.lines[self.pos];
            if line.indent != indent || !(line.text.starts_with("- ") || line.text == "-") {
                if line.indent > indent {
                    return Err(self.err(line.no, "unexpected indentation"));
                }
                break;
            }
            let no = line.no;
            let rest = line.text[1..].trim();
            self.pos += 1;
            if rest.is_empty() {
                items.push(self.nested(indent, no)?);
            } else if split_key(rest).is_some() {
                return Err(self.err(no, format!("maps inside lists are not supported; {UNSUPPORTED_HINT}")));
            } else {
                items.push(self.scalar_or_flow(rest, no)?);
            }
        }
        Ok(Value::List(items))
    }

    fn scalar_or_flow(&self, text: &str, no: usize) -> Result<Value> {
        if let Some(inner) = text.strip_prefix('[') {
            let inner = inner
                .strip_suffix(']')
                .ok_or_else(|| self.err(no, "unterminated flow list"))?;
            if inner.trim().is_empty() {
                return Ok(Value::List(Vec::new()));
            }
            return split_flow(inner)
                .into_iter()
                .map(|item| self.scalar(item.trim(), no))
                .collect::<Result<Vec<_>>>()
                .map(Value::List);
        }
        if text.starts_with('{') {
            return Err(self.err(no, format!("flow maps are not supported; {UNSUPPORTED_HINT}")));
        }
        self.scalar(text, no)
    }

    fn scalar(&self, text: &str, no: usize) -> Result<Value> {
        if text.is_empty() {
            return Ok(Value::Null);
        }
        let first = text.chars().next().unwrap();
        if matches!(first, '&' | '*' | '!' | '|' | '>' | '%' | '@' | '`') {
            return Err(self.err(no, format!("unsupported YAML construct `{text}`; {UNSUPPORTED_HINT}")));
        }
        if first == '"' || first == '\'' {
            if text.len() < 2 || !text.ends_with(first) {
                return Err(self.err(no, "unterminated quoted string"));
            }
            let body = &text[1..text.len() - 1];
            return Ok(Value::Str(if first == '"' {
                unescape(body).map_err(|m| self.err(no, m))?
            } else {
                body.replace("''", "'")
            }));
        }
        Ok(plain_scalar(text))
    }
}

fn split_flow(inner: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut quote = None;
    let mut start = 0;
    for (i, c) in inner.char_indices() {
        match quote {
            Some(q) if c == q => quote = None,
            Some(_) => {}
            None if c == '"' || c == '\'' => quote = Some(c),
            None if c == ',' => {
                out.push(&inner[start..i]);
                start = i + 1;
            }
            None => {}
        }
    }
    out.push(&inner[start..]);
    out
}

fn unquote(s: &str) -> &str {
    let b = s.as_bytes();
    if b.len() >= 2 && (b[0] == b'"' || b[0] == b'\'') && b[b.len() - 1] == b[0] {
        &s[1..s.len() - 1]
    } else {
        s
    }
}

fn unescape(s: &str) -> std::result::Result<String, String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some('\\') => out.push('\\'),
            Some('"') => out.push('"'),
            other => return Err(format!("unsupported escape `\\{}`", other.map(String::from).unwrap_or_default())),
        }
    }
    Ok(out)
}

fn plain_scalar(text: &str) -> Value {
    match text {
        "null" | "~" | "Null" | "NULL" => return Value::Null,
        "true" | "True" | "TRUE" => return Value::Bool(true),
        "false" | "False" | "FALSE" => return Value::Bool(false),
        ".inf" | "+.inf" => return Value::Float(f64::INFINITY),
        "-.inf" => return Value::Float(f64::NEG_INFINITY),
        _ => {}
    }
    if let Ok(i) = text.parse::<i64>() {
        return Value::Int(i);
    }
    let numeric_start = text.starts_with(|c: char| c.is_ascii_digit() || c == '-' || c == '+' || c == '.');
    if numeric_start {
        if let Ok(f) = text.parse::<f64>() {
            if f.is_finite() {
                return Value::Float(f);
            }
        }
    }
    Value::Str(text.to_string())
}

/// Parses a document. An empty document is an empty map.
pub fn parse(text: &str, path: &Path) -> Result<Value> {
    let mut lines = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let no = i + 1;
        if raw.contains('\t') && raw.trim_start().len() != raw.trim_start_matches('\t').len() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: no,
                msg: "tabs are not allowed for indentation".into(),
            });
        }
        let stripped = strip_comment(raw).trim_end();
        if stripped.trim().is_empty() {
            continue;
        }
        if stripped == "---" || stripped == "..." {
            if lines.is_empty() && stripped == "---" {
                continue;
            }
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: no,
                msg: format!("multiple documents are not supported; {UNSUPPORTED_HINT}"),
            });
        }
        let indent = stripped.len() - stripped.trim_start_matches(' ').len();
        if indent % 2 != 0 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: no,
                msg: "indentation must be a multiple of 2 spaces".into(),
            });
        }
        lines.push(Line {
            no,
            indent,
            text: stripped.trim_start(),
        });
    }
    if lines.is_empty() {
        return Ok(Value::Map(Vec::new()));
    }
    let mut p = Parser { lines, pos: 0, path };
    if p.lines[0].indent != 0 {
        return Err(p.err(p.lines[0].no, "document must start at column 0"));
    }
    let v = p.parse_block(0)?;
    if p.pos < p.lines.len() {
        let l = &p.lines[p.pos];
        return Err(p.err(l.no, "unexpected content"));
    }
    Ok(v)
}

fn needs_quotes(s: &str) -> bool {
    s.is_empty()
        || !matches!(plain_scalar(s), Value::Str(_))
        || s.starts_with(|c: char| "&*!|>%@`\"'[]{}#-?,:".contains(c) || c == ' ')
        || s.ends_with(' ')
        || s.contains(": ")
        || s.contains(" #")
        || s.contains('\n')
        || s.contains('\t')
}

fn scalar_text(v: &Value) -> String {
    match v {
        Value::Null => "null".into(),
        Value::Bool(b) => b.to_string(),
        Value::Int(i) => i.to_string(),
        Value::Float(f) if f.is_infinite() => if *f > 0.0 { ".inf" } else { "-.inf" }.into(),
        Value::Float(f) => {
            let s = format!("{f:?}");
            if s.contains('.') || s.contains('e') {
                s
            } else {
                format!("{s}.0")
            }
        }
        Value::Str(s) if needs_quotes(s) => {
            let esc = s.replace('\\', "\\\\").replace('"', "\\\"").replace('\n', "\\n").replace('\t', "\\t");
            format!("\"{esc}\"")
        }
        Value::Str(s) => s.clone(),
        Value::List(items) => {
            let parts: Vec<String> = items.iter().map(scalar_text).collect();
            format!("[{}]", parts.join(", "))
        }
        Value::Map(_) => unreachable!("maps are emitted as blocks"),
    }
}

fn emit(v: &Value, indent: usize, out: &mut String) {
    let pad = " ".repeat(indent);
    match v {
        Value::Map(entries) => {
            for (k, val) in entries {
                let key = if needs_quotes(k) { scalar_text(&Value::Str(k.clone())) } else { k.clone() };
                match val {
                    Value::Map(m) if !m.is_empty() => {
                        let _ = writeln!(out, "{pad}{key}:");
                        emit(val, indent + 2, out);
                    }
                    Value::Map(_) => {
                        let _ = writeln!(out, "{pad}{key}:");
                    }
                    Value::List(items) if items.iter().any(|i| matches!(i, Value::Map(_) | Value::List(_))) => {
                        let _ = writeln!(out, "{pad}{key}:");
                        for item in items {
                            let _ = writeln!(out, "{pad}  -");
                            emit(item, indent + 4, out);
                        }
                    }
                    _ => {
                        let _ = writeln!(out, "{pad}{key}: {}", scalar_text(val));
                    }
                }
            }
        }
        other => {
            let _ = writeln!(out, "{pad}{}", scalar_text(other));
        }
    }
}

/// Serializes a value; the output parses back to an equal value.
pub fn dump(v: &Value) -> String {
    let mut out = String::new();
    emit(v, 0, &mut out);
    out
}
