//! Target-side text processing: normalization of non-verbal annotations,
//! character / word / BPE tokenization and vocabularies.

mod bpe;
mod vocab;

use std::path::Path;
use std::str::FromStr;

use regex::Regex;

use crate::error::{Error, Result};

pub use bpe::{BpeModel, BPE_HEADER, END_OF_WORD};
pub use vocab::{Vocabulary, BLANK_ID, BOS_ID, EOS_ID, PAD_ID, RESERVED, UNK_ID};

/// Visible stand-in for a space in character-level tokenization.
pub const SPACE_SYMBOL: &str = "␣";

/// Canonical non-verbal tokens covered by the bundled normalization table.
pub const DEFAULT_PROTECTED: [&str; 3] = ["(applause)", "(laughter)", "(music)"];

const DEFAULT_NORMALIZATION: &str = include_str!("normalization.tsv");

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    Char,
    Word,
    Bpe,
}

impl FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "char" => Ok(Scheme::Char),
            "word" => Ok(Scheme::Word),
            "bpe" => Ok(Scheme::Bpe),
            other => Err(format!("unknown tokenizer `{other}` (expected char, word or bpe)")),
        }
    }
}

impl Scheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Char => "char",
            Scheme::Word => "word",
            Scheme::Bpe => "bpe",
        }
    }
}

#[derive(Debug, PartialEq, Eq)]
pub(crate) enum Segment<'a> {
    Text(&'a str),
    Protected(&'a str),
}

/// Splits `text` into protected-token and plain-text runs. At each position
/// the longest matching protected token wins.
pub(crate) fn split_protected<'a>(text: &'a str, protected: &[String]) -> Vec<Segment<'a>> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < text.len() {
        let hit = protected
            .iter()
            .filter(|p| !p.is_empty() && text[i..].starts_with(p.as_str()))
            .map(|p| p.len())
            .max();
        if let Some(len) = hit {
            if start < i {
                out.push(Segment::Text(&text[start..i]));
            }
            out.push(Segment::Protected(&text[i..i + len]));
            i += len;
            start = i;
        } else {
            i += text[i..].chars().next().map_or(1, char::len_utf8);
        }
    }
    if start < text.len() {
        out.push(Segment::Text(&text[start..]));
    }
    out
}

/// Ordered regex rewrite table mapping annotation variants to canonical tokens.
#[derive(Clone, Debug)]
pub struct Normalizer {
    rules: Vec<(Regex, String)>,
}

impl Normalizer {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut rules = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (pat, rep) = line.split_once('\t').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: "expected `<regex>\\t<replacement>`".into(),
            })?;
            let re = Regex::new(pat).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })?;
            rules.push((re, rep.to_string()));
        }
        Ok(Normalizer { rules })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text, path)
    }

    pub fn apply(&self, text: &str) -> String {
        let mut s = text.to_string();
        for (re, rep) in &self.rules {
            s = re.replace_all(&s, rep.as_str()).into_owned();
        }
        s
    }
}

impl Default for Normalizer {
    fn default() -> Self {
        Self::parse(DEFAULT_NORMALIZATION, Path::new("<builtin>")).expect("builtin normalization table")
    }
}

/// Text ↔ token conversion for one scheme.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    scheme: Scheme,
    bpe: Option<BpeModel>,
    protected: Vec<String>,
    normalizer: Option<Normalizer>,
}

impl Tokenizer {
    pub fn new(scheme: Scheme, bpe: Option<BpeModel>, protected: Vec<String>) -> Result<Self> {
        if scheme == Scheme::Bpe && bpe.is_none() {
            return Err(Error::config("data.bpe_model", "the bpe scheme requires a BPE model"));
        }
        Ok(Tokenizer {
            scheme,
            bpe,
            protected,
            normalizer: None,
        })
    }

    pub fn char() -> Self {
        Self::new(Scheme::Char, None, Vec::new()).unwrap()
    }

    pub fn with_normalizer(mut self, n: Normalizer) -> Self {
        self.normalizer = Some(n);
        self
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn protected(&self) -> &[String] {
        &self.protected
    }

    pub fn tokenize(&self, text: &str) -> Vec<String> {
        let normalized;
        let text = match &self.normalizer {
            Some(n) => {
                normalized = n.apply(text);
                normalized.as_str()
            }
            None => text,
        };
        let mut out = Vec::new();
        for seg in split_protected(text, &self.protected) {
            match seg {
                Segment::Protected(p) => out.push(p.to_string()),
                Segment::Text(t) => match self.scheme {
                    Scheme::Char => out.extend(t.chars().map(|c| {
                        if c.is_whitespace() {
                            SPACE_SYMBOL.to_string()
                        } else {
                            c.to_string()
                        }
                    })),
                    Scheme::Word => out.extend(t.split_whitespace().map(str::to_string)),
                    Scheme::Bpe => {
                        let model = self.bpe.as_ref().expect("checked in constructor");
                        for w in t.split_whitespace() {
                            out.extend(model.apply_word(w));
                        }
                    }
                },
            }
        }
        out
    }

    pub fn detokenize<S: AsRef<str>>(&self, tokens: &[S]) -> String {
        match self.scheme {
            Scheme::Char => tokens
                .iter()
                .map(|t| if t.as_ref() == SPACE_SYMBOL { " " } else { t.as_ref() })
                .collect(),
            Scheme::Word => tokens.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(" "),
            Scheme::Bpe => {
                let mut words: Vec<String> = Vec::new();
                let mut cur = String::new();
                for t in tokens {
                    let t = t.as_ref();
                    if self.protected.iter().any(|p| p == t) {
                        if !cur.is_empty() {
                            words.push(std::mem::take(&mut cur));
                        }
                        words.push(t.to_string());
                    } else if let Some(stem) = t.strip_suffix(END_OF_WORD) {
                        cur.push_str(stem);
                        words.push(std::mem::take(&mut cur));
                    } else {
                        cur.push_str(t);
                    }
                }
                if !cur.is_empty() {
                    words.push(cur);
                }
                words.join(" ")
            }
        }
    }
}
