//! Inference: greedy and beam search over next-token distributions, output
//! penalties, CTC collapse and cross-attention dumps.

use std::cmp::Ordering;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Encoded, Mode, S2TModel, Source};
use crate::tensor::{Graph, Real, Tensor};
use crate::tokenize::{BLANK_ID, BOS_ID, EOS_ID, PAD_ID};

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeOptions {
    pub beam_size: usize,
    pub max_output_length: usize,
    /// Exponent of the length penalty `((5 + |Y|) / 6)^alpha`.
    pub length_penalty: f64,
    pub repetition_penalty: f64,
    pub no_repeat_ngram_size: usize,
    pub dump_attention: bool,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions {
            beam_size: 5,
            max_output_length: 100,
            length_penalty: 1.0,
            repetition_penalty: 1.0,
            no_repeat_ngram_size: 0,
            dump_attention: false,
        }
    }
}

impl DecodeOptions {
    pub fn greedy() -> Self {
        DecodeOptions {
            beam_size: 1,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::config("testing.beam_size", "must be at least 1"));
        }
        if !(self.length_penalty >= 0.0) {
            return Err(Error::config("testing.length_penalty", "must be non-negative"));
        }
        if !(self.repetition_penalty >= 1.0) {
            return Err(Error::config("testing.repetition_penalty", "must be at least 1"));
        }
        Ok(())
    }
}

/// A decoded sequence `bos … eos` with its accumulated log-probability.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    /// Sum of the model's log-probabilities for the chosen tokens (before penalties).
    pub score: f64,
    /// `score / length_penalty(|Y|)`, with `|Y|` counting tokens after bos.
    pub normalized_score: f64,
}

impl Hypothesis {
    /// Output ids without bos/eos.
    pub fn output(&self) -> &[usize] {
        let t = &self.tokens[1..];
        t.strip_suffix(&[EOS_ID]).unwrap_or(t)
    }
}

pub fn length_penalty(len: usize, alpha: f64) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(alpha)
}

/// Source of next-token log-probabilities for a set of same-length prefixes.
pub trait StepScorer {
    fn next_log_probs(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>>;
}

/// Applies the repetition penalty and n-gram blocker to `log_probs` given the
/// tokens produced so far (bos excluded). Blank, pad and bos are never
/// produced. When every token ends up blocked, eos is released with its
/// original log-probability.
pub fn apply_penalties(log_probs: &[f64], history: &[usize], opts: &DecodeOptions) -> Vec<f64> {
    let mut out = log_probs.to_vec();
    if out.len() > EOS_ID {
        for id in [BLANK_ID, PAD_ID, BOS_ID] {
            out[id] = f64::NEG_INFINITY;
        }
    }
    if opts.repetition_penalty != 1.0 {
        for &t in history {
            if t < out.len() && out[t] < 0.0 {
                out[t] = log_probs[t] * opts.repetition_penalty;
            }
        }
    }
    let n = opts.no_repeat_ngram_size;
    if n > 0 && history.len() + 1 >= n {
        let ctx = &history[history.len() + 1 - n..];
        for w in history.windows(n) {
            if w[..n - 1] == *ctx {
                out[w[n - 1]] = f64::NEG_INFINITY;
            }
        }
    }
    if out.iter().all(|&x| x == f64::NEG_INFINITY) {
        out[EOS_ID] = log_probs[EOS_ID];
    }
    out
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn finish(tokens: Vec<usize>, score: f64, alpha: f64) -> Hypothesis {
    let len = tokens.len() - 1;
    Hypothesis {
        tokens,
        score,
        normalized_score: score / length_penalty(len, alpha),
    }
}

/// Picks the best adjusted token at every step until eos or the length limit.
pub fn greedy_search(scorer: &mut dyn StepScorer, opts: &DecodeOptions) -> Result<Hypothesis> {
    Ok(greedy_with_search_score(scorer, opts)?.0)
}

fn greedy_with_search_score(scorer: &mut dyn StepScorer, opts: &DecodeOptions) -> Result<(Hypothesis, f64)> {
    let mut tokens = vec![BOS_ID];
    let mut score = 0.0;
    let mut search = 0.0;
    while tokens.len() - 1 < opts.max_output_length {
        let lp = scorer.next_log_probs(std::slice::from_ref(&tokens))?.remove(0);
        let adjusted = apply_penalties(&lp, &tokens[1..], opts);
        let next = argmax(&adjusted);
        score += lp[next];
        search += adjusted[next];
        tokens.push(next);
        if next == EOS_ID {
            break;
        }
    }
    if tokens.last() != Some(&EOS_ID) {
        tokens.push(EOS_ID);
    }
    let len = tokens.len() - 1;
    Ok((finish(tokens, score, opts.length_penalty), search / length_penalty(len, opts.length_penalty)))
}

#[derive(Clone)]
struct Partial {
    tokens: Vec<usize>,
    score: f64,
    search: f64,
}

/// Length-normalized beam search. Returns the finished hypotheses, best first.
///
/// The greedy hypothesis is always among the candidates, so the returned best
/// never scores below greedy decoding under the same options.
pub fn beam_search(scorer: &mut dyn StepScorer, opts: &DecodeOptions) -> Result<Vec<Hypothesis>> {
    opts.validate()?;
    let alpha = opts.length_penalty;
    let k = opts.beam_size;
    // (hypothesis, normalized search score)
    let mut finished: Vec<(Hypothesis, f64)> = Vec::new();
    let mut alive = vec![Partial {
        tokens: vec![BOS_ID],
        score: 0.0,
        search: 0.0,
    }];
    let mut step = 0;
    while !alive.is_empty() && finished.len() < k {
        if step == opts.max_output_length {
            for p in alive.drain(..) {
                let mut tokens = p.tokens;
                tokens.push(EOS_ID);
                let len = tokens.len() - 1;
                finished.push((finish(tokens, p.score, alpha), p.search / length_penalty(len, alpha)));
            }
            break;
        }
        let prefixes: Vec<Vec<usize>> = alive.iter().map(|p| p.tokens.clone()).collect();
        let dists = scorer.next_log_probs(&prefixes)?;
        let mut cands: Vec<(f64, usize, usize, f64)> = Vec::new();
        for (h, (p, lp)) in alive.iter().zip(&dists).enumerate() {
            let adjusted = apply_penalties(lp, &p.tokens[1..], opts);
            for (t, &a) in adjusted.iter().enumerate() {
                if a > f64::NEG_INFINITY {
                    cands.push((p.search + a, h, t, p.score + lp[t]));
                }
            }
        }
        cands.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(k);
        for (search, h, t, score) in cands.into_iter().take(k) {
            let mut tokens = alive[h].tokens.clone();
            tokens.push(t);
            if t == EOS_ID {
                let len = tokens.len() - 1;
                finished.push((finish(tokens, score, alpha), search / length_penalty(len, alpha)));
            } else {
                next.push(Partial { tokens, score, search });
            }
        }
        alive = next;
        step += 1;
    }
    if k > 1 {
        let greedy = greedy_with_search_score(scorer, opts)?;
        if !finished.iter().any(|(h, _)| h.tokens == greedy.0.tokens) {
            finished.push(greedy);
        }
    }
    finished.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.0.tokens.cmp(&b.0.tokens))
    });
    finished.truncate(k);
    Ok(finished.into_iter().map(|(h, _)| h).collect())
}

/// Dispatches on `beam_size`: 1 is greedy, larger values run beam search.
pub fn search(scorer: &mut dyn StepScorer, opts: &DecodeOptions) -> Result<Vec<Hypothesis>> {
    opts.validate()?;
    if opts.beam_size == 1 {
        Ok(vec![greedy_search(scorer, opts)?])
    } else {
        beam_search(scorer, opts)
    }
}

/// Greedy CTC decoding of frame-level argmax ids: merge repeats, drop blanks.
pub fn ctc_collapse(ids: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &i in ids {
        if Some(i) != prev && i != BLANK_ID {
            out.push(i);
        }
        prev = Some(i);
    }
    out
}

fn last_position_log_softmax<R: Real>(logits: &Tensor<R>) -> Vec<Vec<f64>> {
    let s = logits.shape();
    let (b, u, v) = (s[0], s[1], s[2]);
    (0..b)
        .map(|i| {
            let row = &logits.data()[(i * u + u - 1) * v..(i * u + u) * v];
            let row: Vec<f64> = row.iter().map(|x| x.as_f64()).collect();
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            row.iter().map(|x| x - lse).collect()
        })
        .collect()
}

/// Scores prefixes with a model's decoder against one utterance's encoder
/// states. Each call reruns the decoder over the full prefixes.
pub struct ModelScorer<'m, R: Real> {
    model: &'m S2TModel<R>,
    states: Tensor<R>,
    length: usize,
}

impl<'m, R: Real> ModelScorer<'m, R> {
    /// Encodes a single-utterance source.
    pub fn new(model: &'m S2TModel<R>, src: &Source<R>, length: usize) -> Result<Self> {
        if src.batch_size() != 1 {
            return Err(Error::Contract("ModelScorer takes one utterance at a time".into()));
        }
        let mut g = Graph::inference();
        let enc = model.encode(&mut g, src, &[length], &mut Mode::eval())?;
        Ok(ModelScorer {
            model,
            states: g.value(enc.states).clone(),
            length: enc.lengths[0],
        })
    }

    pub fn encoder_states(&self) -> &Tensor<R> {
        &self.states
    }

    fn tiled(&self, g: &mut Graph<R>, k: usize) -> Encoded {
        let s = self.states.shape();
        let mut data = Vec::with_capacity(k * self.states.numel());
        for _ in 0..k {
            data.extend_from_slice(self.states.data());
        }
        let t = Tensor::new(&[k, s[1], s[2]], data).expect("tiled shape");
        Encoded {
            states: g.constant(t),
            lengths: vec![self.length; k],
        }
    }

    /// Teacher-forced cross-attention of `tokens` (bos … eos), one `[H, U, T']`
    /// tensor per decoder layer, `U = tokens.len() − 1`.
    pub fn cross_attention(&self, tokens: &[usize]) -> Result<Vec<Tensor<R>>> {
        let input = &tokens[..tokens.len() - 1];
        let mut g = Graph::inference();
        let enc = self.tiled(&mut g, 1);
        let dec = self.model.decode(&mut g, input, input.len(), &enc, &mut Mode::eval())?;
        Ok(dec.cross_attention.iter().map(|&v| g.value(v).clone()).collect())
    }
}

impl<R: Real> StepScorer for ModelScorer<'_, R> {
    fn next_log_probs(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let u = prefixes[0].len();
        if prefixes.iter().any(|p| p.len() != u) {
            return Err(Error::Contract("prefixes must share one length".into()));
        }
        let mut g = Graph::inference();
        let enc = self.tiled(&mut g, prefixes.len());
        let ids: Vec<usize> = prefixes.concat();
        let dec = self.model.decode(&mut g, &ids, u, &enc, &mut Mode::eval())?;
        Ok(last_position_log_softmax(g.value(dec.logits)))
    }
}

/// Per-frame argmax of the CTC head followed by collapse.
pub fn ctc_greedy<R: Real>(model: &S2TModel<R>, src: &Source<R>, length: usize) -> Result<Vec<usize>> {
    let mut g = Graph::inference();
    let enc = model.encode(&mut g, src, &[length], &mut Mode::eval())?;
    let lp = model.ctc_logits(&mut g, &enc)?;
    let v = g.shape(lp)[2];
    let data: Vec<f64> = g.value(lp).data().iter().map(|x| x.as_f64()).collect();
    let frames: Vec<usize> = data.chunks(v).take(enc.lengths[0]).map(argmax).collect();
    Ok(ctc_collapse(&frames))
}

/// Writes one TSV matrix per (layer, head): `{dir}/{utt}.L{l}.H{h}.tsv`,
/// `U` rows by `T'` columns.
pub fn dump_attention<R: Real>(attention: &[Tensor<R>], utt: &str, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut paths = Vec::new();
    for (l, t) in attention.iter().enumerate() {
        let s = t.shape();
        let (heads, rows, cols) = (s[0], s[1], s[2]);
        for h in 0..heads {
            let path = dir.join(format!("{utt}.L{l}.H{h}.tsv"));
            let mut out = String::new();
            for r in 0..rows {
                let row = &t.data()[(h * rows + r) * cols..(h * rows + r + 1) * cols];
                let cells: Vec<String> = row.iter().map(|x| format!("{:.8}", x.as_f64())).collect();
                out.push_str(&cells.join("\t"));
                out.push('\n');
            }
            std::fs::File::create(&path)
                .and_then(|mut f| f.write_all(out.as_bytes()))
                .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
            paths.push(path);
        }
    }
    Ok(paths)
}
