use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const BLANK_ID: usize = 0;
pub const PAD_ID: usize = 1;
pub const UNK_ID: usize = 2;
pub const BOS_ID: usize = 3;
pub const EOS_ID: usize = 4;
pub const RESERVED: [&str; 5] = ["<blank>", "<pad>", "<unk>", "<s>", "</s>"];

/// Token ↔ id mapping. Ids 0..5 are reserved (blank, pad, unk, bos, eos);
/// learned tokens follow in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    protected: Vec<String>,
}

impl Vocabulary {
    /// Builds a vocabulary from learned tokens (excluding the reserved block).
    pub fn from_tokens<I, S>(learned: I, protected: &[String]) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, usize> = tokens.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        let mut push = |t: String, tokens: &mut Vec<String>| -> Result<()> {
            if t.is_empty() || t.contains('\n') {
                return Err(Error::Data(format!("invalid vocabulary token {t:?}")));
            }
            if index.contains_key(&t) {
                if RESERVED.contains(&t.as_str()) {
                    return Err(Error::Data(format!("token {t} collides with a reserved symbol")));
                }
                return Ok(());
            }
            index.insert(t.clone(), tokens.len());
            tokens.push(t);
            Ok(())
        };
        for t in learned {
            push(t.into(), &mut tokens)?;
        }
        for p in protected {
            push(p.clone(), &mut tokens)?;
        }
        let index = tokens.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        Ok(Vocabulary {
            tokens,
            index,
            protected: protected.to_vec(),
        })
    }

    /// Counts tokens over a corpus and keeps those seen at least `min_freq`
    /// times, most frequent first (ties alphabetical), up to `max_size`.
    pub fn build<'a, I>(token_lists: I, min_freq: usize, max_size: Option<usize>, protected: &[String]) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for list in token_lists {
            for t in list {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_freq && !protected.iter().any(|p| p == t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        if let Some(max) = max_size {
            ranked.truncate(max);
        }
        Self::from_tokens(ranked.into_iter().map(|(t, _)| t.to_string()), protected)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn protected(&self) -> &[String] {
        &self.protected
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn is_reserved(id: usize) -> bool {
        id < RESERVED.len()
    }

    pub fn encode_ids<S: AsRef<str>>(&self, tokens: &[S], add_bos_eos: bool) -> Vec<usize> {
        let mut ids = Vec::with_capacity(tokens.len() + 2);
        if add_bos_eos {
            ids.push(BOS_ID);
        }
        ids.extend(tokens.iter().map(|t| self.id(t.as_ref())));
        if add_bos_eos {
            ids.push(EOS_ID);
        }
        ids
    }

    /// Inverse of [`Vocabulary::encode_ids`]; reserved ids are dropped except `unk`.
    pub fn decode_ids(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| i == UNK_ID || !Self::is_reserved(i))
            .filter_map(|&i| self.token(i).map(str::to_string))
            .collect()
    }

    /// Learned tokens only, one per line.
    pub fn to_text(&self) -> String {
        self.tokens[RESERVED.len()..].iter().map(|t| format!("{t}\n")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    /// Loads a vocab file. `protected` tokens that appear in the file are marked as such.
    pub fn load(path: &Path, protected: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let learned: Vec<&str> = text.lines().filter(|l| !l.is_empty()).collect();
        let mut v = Self::from_tokens(learned, &[])?;
        for p in protected {
            if !v.index.contains_key(p) {
                return Err(Error::Data(format!("protected token {p} missing from {}", path.display())));
            }
        }
        v.protected = protected.to_vec();
        Ok(v)
    }
}
