//! Corpus-level WER, BLEU and chrF with explicit normalization settings.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;

use crate::error::{Error, Result};

/// Bumped whenever any normalization step changes behavior.
pub const NORMALIZATION_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Wer,
    Bleu,
    Chrf,
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "wer" => Ok(Metric::Wer),
            "bleu" => Ok(Metric::Bleu),
            "chrf" => Ok(Metric::Chrf),
            _ => Err(format!("unknown metric `{s}` (expected wer, bleu or chrf)")),
        }
    }
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Wer => "WER",
            Metric::Bleu => "BLEU",
            Metric::Chrf => "chrF2",
        }
    }

    pub fn lower_is_better(self) -> bool {
        self == Metric::Wer
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Case {
    Lower,
    Keep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Punctuation {
    Strip,
    Keep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenizerKind {
    Tok13a,
    None,
}

impl FromStr for Case {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "lower" | "lc" => Ok(Case::Lower),
            "keep" | "mixed" => Ok(Case::Keep),
            _ => Err(format!("unknown case rule `{s}` (expected lower or keep)")),
        }
    }
}

impl FromStr for Punctuation {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "strip" => Ok(Punctuation::Strip),
            "keep" => Ok(Punctuation::Keep),
            _ => Err(format!("unknown punctuation rule `{s}` (expected strip or keep)")),
        }
    }
}

impl FromStr for TokenizerKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "13a" => Ok(TokenizerKind::Tok13a),
            "none" => Ok(TokenizerKind::None),
            _ => Err(format!("unknown evaluation tokenizer `{s}` (expected 13a or none)")),
        }
    }
}

/// Normalization pipeline applied to hypotheses and references before scoring.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalConfig {
    pub metric: Metric,
    pub case: Case,
    pub punctuation: Punctuation,
    pub tokenizer: TokenizerKind,
}

impl EvalConfig {
    /// Lowercased, 13a-tokenized, punctuation stripped.
    pub fn wer() -> Self {
        EvalConfig {
            metric: Metric::Wer,
            case: Case::Lower,
            punctuation: Punctuation::Strip,
            tokenizer: TokenizerKind::Tok13a,
        }
    }

    /// Truecased, 13a-tokenized, punctuation kept.
    pub fn bleu() -> Self {
        EvalConfig {
            metric: Metric::Bleu,
            case: Case::Keep,
            punctuation: Punctuation::Keep,
            tokenizer: TokenizerKind::Tok13a,
        }
    }

    pub fn chrf() -> Self {
        EvalConfig {
            metric: Metric::Chrf,
            case: Case::Keep,
            punctuation: Punctuation::Keep,
            tokenizer: TokenizerKind::None,
        }
    }

    pub fn for_metric(metric: Metric) -> Self {
        match metric {
            Metric::Wer => Self::wer(),
            Metric::Bleu => Self::bleu(),
            Metric::Chrf => Self::chrf(),
        }
    }

    pub fn signature(&self) -> String {
        let case = match self.case {
            Case::Lower => "lc",
            Case::Keep => "mixed",
        };
        let punct = match self.punctuation {
            Punctuation::Strip => "strip",
            Punctuation::Keep => "keep",
        };
        let tok = match self.tokenizer {
            TokenizerKind::Tok13a => "13a",
            TokenizerKind::None => "none",
        };
        let extra = match self.metric {
            Metric::Wer => String::new(),
            Metric::Bleu => "|smooth:exp|ngram:4".into(),
            Metric::Chrf => "|nc:6|nw:0|beta:2|space:no".into(),
        };
        format!(
            "metric:{}|nrefs:1|case:{case}|punct:{punct}|tok:{tok}{extra}|version:{NORMALIZATION_VERSION}",
            self.metric.name().to_ascii_lowercase()
        )
    }

    /// Applies tokenization, casing and punctuation rules in that order.
    pub fn normalize(&self, line: &str) -> String {
        let mut s = match self.tokenizer {
            TokenizerKind::Tok13a => tokenize_13a(line),
            TokenizerKind::None => line.split_whitespace().collect::<Vec<_>>().join(" "),
        };
        if self.case == Case::Lower {
            s = s.to_lowercase();
        }
        if self.punctuation == Punctuation::Strip {
            s = s
                .split_whitespace()
                .map(|w| w.chars().filter(|c| !is_punctuation(*c)).collect::<String>())
                .filter(|w| !w.is_empty())
                .collect::<Vec<_>>()
                .join(" ");
        }
        s
    }
}

fn is_punctuation(c: char) -> bool {
    static RE: OnceLock<Regex> = OnceLock::new();
    let re = RE.get_or_init(|| Regex::new(r"^\p{P}$").unwrap());
    let mut buf = [0u8; 4];
    re.is_match(c.encode_utf8(&mut buf))
}

/// The 13a tokenizer: unescapes a few XML entities, then applies four regex
/// rewrites and collapses whitespace.
///
/// 1. surround every symbol in `{-~`, `[-\``, ` -&`, `(-+`, `:-@` and `/` with spaces;
/// 2. split `.` and `,` from a preceding non-digit;
/// 3. split `.` and `,` from a following non-digit;
/// 4. split `-` from a preceding digit.
pub fn tokenize_13a(line: &str) -> String {
    static RULES: OnceLock<Vec<(Regex, &'static str)>> = OnceLock::new();
    let rules = RULES.get_or_init(|| {
        vec![
            (Regex::new(r"([\{-~\[-` -&\(-\+:-@/])").unwrap(), " $1 "),
            (Regex::new(r"([^0-9])([\.,])").unwrap(), "$1 $2 "),
            (Regex::new(r"([\.,])([^0-9])").unwrap(), " $1 $2"),
            (Regex::new(r"([0-9])(-)").unwrap(), "$1 $2 "),
        ]
    });
    let mut s = line.replace("<skipped>", "").replace("-\n", "").replace('\n', " ");
    if s.contains('&') {
        s = s
            .replace("&quot;", "\"")
            .replace("&amp;", "&")
            .replace("&lt;", "<")
            .replace("&gt;", ">");
    }
    let mut s = format!(" {s} ");
    for (re, rep) in rules {
        s = re.replace_all(&s, *rep).into_owned();
    }
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Unit-cost edit distance between two sequences.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn check_lengths<S: AsRef<str>>(hyps: &[S], refs: &[S]) -> Result<()> {
    if hyps.len() != refs.len() {
        return Err(Error::Data(format!(
            "{} hypotheses but {} references",
            hyps.len(),
            refs.len()
        )));
    }
    Ok(())
}

fn empty_refs() -> Error {
    Error::Data("reference corpus is empty after normalization".into())
}

/// Word error rate in percent.
pub fn wer<S: AsRef<str>>(hyps: &[S], refs: &[S], cfg: &EvalConfig) -> Result<f64> {
    check_lengths(hyps, refs)?;
    let mut edits = 0;
    let mut words = 0;
    for (h, r) in hyps.iter().zip(refs) {
        let h = cfg.normalize(h.as_ref());
        let r = cfg.normalize(r.as_ref());
        let hw: Vec<&str> = h.split_whitespace().collect();
        let rw: Vec<&str> = r.split_whitespace().collect();
        edits += levenshtein(&hw, &rw);
        words += rw.len();
    }
    if words == 0 {
        return Err(empty_refs());
    }
    Ok(100.0 * edits as f64 / words as f64)
}

fn ngram_counts<'a>(words: &'a [&'a str], n: usize) -> HashMap<&'a [&'a str], usize> {
    let mut m: HashMap<&[&str], usize> = HashMap::new();
    for w in words.windows(n) {
        *m.entry(w).or_default() += 1;
    }
    m
}

/// Sufficient statistics of corpus BLEU.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BleuStats {
    pub hyp_len: usize,
    pub ref_len: usize,
    pub correct: [usize; 4],
    pub total: [usize; 4],
}

impl BleuStats {
    pub fn add_sentence(&mut self, hyp: &str, reference: &str) {
        let h: Vec<&str> = hyp.split_whitespace().collect();
        let r: Vec<&str> = reference.split_whitespace().collect();
        self.hyp_len += h.len();
        self.ref_len += r.len();
        for n in 1..=4 {
            if h.len() < n {
                continue;
            }
            let hc = ngram_counts(&h, n);
            let rc = ngram_counts(&r, n);
            self.total[n - 1] += h.len() + 1 - n;
            self.correct[n - 1] += hc.iter().map(|(g, c)| (*c).min(rc.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }

    /// Precisions (percent, after smoothing) and the final score.
    pub fn score(&self) -> (f64, [f64; 4], f64) {
        let bp = if self.hyp_len < self.ref_len {
            if self.hyp_len > 0 {
                (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
            } else {
                0.0
            }
        } else {
            1.0
        };
        let mut precisions = [0.0; 4];
        let mut smooth = 1.0;
        for n in 0..4 {
            if self.total[n] == 0 {
                break;
            }
            if self.correct[n] == 0 {
                smooth *= 2.0;
                precisions[n] = 100.0 / (smooth * self.total[n] as f64);
            } else {
                precisions[n] = 100.0 * self.correct[n] as f64 / self.total[n] as f64;
            }
        }
        let log = |x: f64| if x == 0.0 { -9_999_999_999.0 } else { x.ln() };
        let mean = precisions.iter().map(|&p| log(p)).sum::<f64>() / 4.0;
        (bp * mean.exp(), precisions, bp)
    }
}

/// Corpus BLEU (0–100) with exponential smoothing of zero n-gram counts.
pub fn bleu<S: AsRef<str>>(hyps: &[S], refs: &[S], cfg: &EvalConfig) -> Result<f64> {
    Ok(bleu_stats(hyps, refs, cfg)?.score().0)
}

pub fn bleu_stats<S: AsRef<str>>(hyps: &[S], refs: &[S], cfg: &EvalConfig) -> Result<BleuStats> {
    check_lengths(hyps, refs)?;
    let mut stats = BleuStats::default();
    for (h, r) in hyps.iter().zip(refs) {
        stats.add_sentence(&cfg.normalize(h.as_ref()), &cfg.normalize(r.as_ref()));
    }
    if stats.ref_len == 0 {
        return Err(empty_refs());
    }
    Ok(stats)
}

const CHRF_ORDER: usize = 6;
const CHRF_BETA: f64 = 2.0;

fn char_ngrams(chars: &[char], n: usize) -> HashMap<&[char], usize> {
    let mut m = HashMap::new();
    for w in chars.windows(n) {
        *m.entry(w).or_default() += 1;
    }
    m
}

/// Character n-gram F-score (orders 1–6, β = 2, whitespace ignored),
/// averaging precision and recall over the orders present in both sides.
pub fn chrf<S: AsRef<str>>(hyps: &[S], refs: &[S], cfg: &EvalConfig) -> Result<f64> {
    check_lengths(hyps, refs)?;
    // per order: hyp n-grams, ref n-grams, matches
    let mut stats = [[0usize; 3]; CHRF_ORDER];
    let mut ref_chars = 0;
    for (h, r) in hyps.iter().zip(refs) {
        let h: Vec<char> = cfg.normalize(h.as_ref()).chars().filter(|c| !c.is_whitespace()).collect();
        let r: Vec<char> = cfg.normalize(r.as_ref()).chars().filter(|c| !c.is_whitespace()).collect();
        ref_chars += r.len();
        for n in 1..=CHRF_ORDER {
            let hc = char_ngrams(&h, n);
            let rc = char_ngrams(&r, n);
            let st = &mut stats[n - 1];
            st[0] += hc.values().sum::<usize>();
            st[1] += rc.values().sum::<usize>();
            st[2] += hc.iter().map(|(g, c)| (*c).min(rc.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }
    if ref_chars == 0 {
        return Err(empty_refs());
    }
    let factor = CHRF_BETA * CHRF_BETA;
    let (mut avg_p, mut avg_r, mut eff) = (0.0, 0.0, 0usize);
    for [n_hyp, n_ref, n_match] in stats {
        if n_hyp > 0 && n_ref > 0 {
            avg_p += n_match as f64 / n_hyp as f64;
            avg_r += n_match as f64 / n_ref as f64;
            eff += 1;
        }
    }
    if eff == 0 {
        return Ok(0.0);
    }
    avg_p /= eff as f64;
    avg_r /= eff as f64;
    if avg_p + avg_r == 0.0 {
        return Ok(0.0);
    }
    Ok(100.0 * (1.0 + factor) * avg_p * avg_r / (factor * avg_p + avg_r))
}

/// Scores a corpus with the metric named in `cfg`.
pub fn score<S: AsRef<str>>(hyps: &[S], refs: &[S], cfg: &EvalConfig) -> Result<f64> {
    match cfg.metric {
        Metric::Wer => wer(hyps, refs, cfg),
        Metric::Bleu => bleu(hyps, refs, cfg),
        Metric::Chrf => chrf(hyps, refs, cfg),
    }
}

/// A printed score: two decimals, ties to even on the exact binary value.
pub struct ScoreLine<'a> {
    pub value: f64,
    pub cfg: &'a EvalConfig,
}

impl fmt::Display for ScoreLine<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} = {:.2} ({})", self.cfg.metric.name(), self.value, self.cfg.signature())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tok13a_rules() {
        assert_eq!(tokenize_13a("Hello, world!"), "Hello , world !");
        assert_eq!(tokenize_13a("It costs 3.50 dollars."), "It costs 3.50 dollars .");
        assert_eq!(tokenize_13a("1,000 people"), "1,000 people");
        assert_eq!(tokenize_13a("pages 3-5"), "pages 3 - 5");
        assert_eq!(tokenize_13a("a&amp;b"), "a & b");
        assert_eq!(tokenize_13a("don't stop-go"), "don't stop-go");
    }

    #[test]
    fn wer_normalization() {
        let cfg = EvalConfig::wer();
        assert_eq!(cfg.normalize("Hello, World!"), "hello world");
    }

    #[test]
    fn levenshtein_basic() {
        let a: Vec<char> = "kitten".chars().collect();
        let b: Vec<char> = "sitting".chars().collect();
        assert_eq!(levenshtein(&a, &b), 3);
    }
}
