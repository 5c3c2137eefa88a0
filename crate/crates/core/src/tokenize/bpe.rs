//! Byte-pair encoding in the subword-nmt style: words are split into
//! characters, the last one carrying an end-of-word marker, and merges are
//! learned greedily by pair frequency.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use super::{split_protected, Segment};
use crate::error::{Error, Result};

pub const END_OF_WORD: &str = "</w>";
pub const BPE_HEADER: &str = "#version: minis2t-bpe 1";

/// Pairs that occur fewer times than this are never merged.
const MIN_PAIR_FREQUENCY: usize = 2;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
}

fn word_symbols(word: &str) -> Vec<String> {
    let mut syms: Vec<String> = word.chars().map(String::from).collect();
    if let Some(last) = syms.last_mut() {
        last.push_str(END_OF_WORD);
    }
    syms
}

fn merge_pair(syms: &[String], left: &str, right: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == left && syms[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(syms[i].clone());
            i += 1;
        }
    }
    out
}

impl BpeModel {
    pub fn from_merges(merges: Vec<(String, String)>) -> Result<Self> {
        let mut ranks = HashMap::new();
        for (i, m) in merges.iter().enumerate() {
            if ranks.insert(m.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate BPE merge {} {}", m.0, m.1)));
            }
        }
        Ok(BpeModel { merges, ranks })
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn is_empty(&self) -> bool {
        self.merges.is_empty()
    }

    /// Learns up to `num_merges` merges. Ties in pair frequency go to the
    /// lexicographically smallest pair. Protected tokens are removed from the
    /// text before counting.
    pub fn learn<S: AsRef<str>>(lines: &[S], num_merges: usize, protected: &[String]) -> Result<Self> {
        if lines.iter().all(|l| l.as_ref().trim().is_empty()) {
            return Err(Error::Data("cannot learn BPE from an empty corpus".into()));
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for line in lines {
            for seg in split_protected(line.as_ref(), protected) {
                if let Segment::Text(t) = seg {
                    for w in t.split_whitespace() {
                        *counts.entry(w.to_string()).or_default() += 1;
                    }
                }
            }
        }
        let mut words: Vec<(Vec<String>, usize)> = counts.into_iter().map(|(w, c)| (word_symbols(&w), c)).collect();
        let mut merges = Vec::new();
        while merges.len() < num_merges {
            let mut pairs: HashMap<(&str, &str), usize> = HashMap::new();
            for (syms, c) in &words {
                for w in syms.windows(2) {
                    *pairs.entry((&w[0], &w[1])).or_default() += c;
                }
            }
            let best = pairs
                .into_iter()
                .filter(|&(_, c)| c >= MIN_PAIR_FREQUENCY)
                .min_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            let Some(((l, r), _)) = best else { break };
            let (l, r) = (l.to_string(), r.to_string());
            for (syms, _) in words.iter_mut() {
                *syms = merge_pair(syms, &l, &r);
            }
            merges.push((l, r));
        }
        Self::from_merges(merges)
    }

    /// Segments one whitespace-free word into subword units.
    pub fn apply_word(&self, word: &str) -> Vec<String> {
        let mut syms = word_symbols(word);
        loop {
            let best = syms
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())).map(|&r| (r, w[0].clone(), w[1].clone())))
                .min_by_key(|x| x.0);
            let Some((_, l, r)) = best else { break };
            syms = merge_pair(&syms, &l, &r);
        }
        syms
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from(BPE_HEADER);
        s.push('\n');
        for (l, r) in &self.merges {
            s.push_str(&format!("{l} {r}\n"));
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim_end() == BPE_HEADER => {}
            _ => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: 1,
                    msg: format!("expected header `{BPE_HEADER}`"),
                })
            }
        }
        let mut merges = Vec::new();
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => merges.push((l.to_string(), r.to_string())),
                _ => {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: i + 1,
                        msg: "expected `left right`".into(),
                    })
                }
            }
        }
        Self::from_merges(merges)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::parse(&text, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_merge_is_most_frequent_pair() {
        let m = BpeModel::learn(&["aaab aaab"], 1, &[]).unwrap();
        assert_eq!(m.merges(), &[("a".to_string(), "a".to_string())]);
    }

    #[test]
    fn zero_merges_is_character_split() {
        let m = BpeModel::learn(&["hello"], 0, &[]).unwrap();
        assert!(m.is_empty());
        assert_eq!(m.apply_word("abc"), vec!["a", "b", "c</w>"]);
    }

    #[test]
    fn greedy_left_to_right_application() {
        let m = BpeModel::from_merges(vec![("a".into(), "a".into())]).unwrap();
        assert_eq!(m.apply_word("aaa"), vec!["aa", "a</w>"]);
    }

    #[test]
    fn protected_tokens_do_not_feed_statistics() {
        let prot = vec!["(applause)".to_string()];
        let m = BpeModel::learn(&["(applause) (applause) (applause) ab ab"], 50, &prot).unwrap();
        for (l, r) in m.merges() {
            for c in ['(', ')', 'p', 'l', 'u', 's', 'e'] {
                assert!(!l.contains(c) && !r.contains(c), "{l} {r}");
            }
        }
    }

    #[test]
    fn empty_corpus_is_error() {
        assert!(BpeModel::learn::<&str>(&[], 3, &[]).is_err());
        assert!(BpeModel::learn(&["   "], 3, &[]).is_err());
    }

    #[test]
    fn file_round_trip() {
        let m = BpeModel::learn(&["low lower lowest newer wider"], 10, &[]).unwrap();
        let back = BpeModel::parse(&m.to_text(), Path::new("x")).unwrap();
        assert_eq!(back, m);
        assert!(m.to_text().starts_with("#version: minis2t-bpe 1\n"));
    }

    #[test]
    fn duplicate_merges_rejected() {
        let text = format!("{BPE_HEADER}\na b\na b\n");
        assert!(BpeModel::parse(&text, Path::new("x")).is_err());
    }
}
