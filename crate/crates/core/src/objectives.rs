//! Training losses: label-smoothed cross-entropy, CTC and their interpolation.
//!
//! All losses are negative log-likelihoods to be minimized.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Var};
use crate::tokenize::{BLANK_ID, PAD_ID};

/// Scalar summary of one joint-loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub xent: f64,
    pub ctc: f64,
    pub lambda: f64,
    pub token_count: usize,
    pub frame_count: usize,
}

/// Label-smoothed cross-entropy averaged over non-pad target tokens.
///
/// `logits` is `[B, U, V]`, `targets` holds `B·U` gold ids with [`PAD_ID`] at
/// padded positions. The smoothed distribution puts `1 − epsilon` on the gold
/// class and spreads `epsilon` over the remaining classes except pad.
pub fn xent_loss<R: Real>(g: &mut Graph<R>, logits: Var, targets: &[usize], epsilon: f64) -> Result<Var> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::config("training.label_smoothing", format!("{epsilon} is outside [0, 1)")));
    }
    let shape = g.shape(logits).to_vec();
    if shape.len() != 3 {
        return Err(Error::shape("xent_loss", format!("logits must be [B, U, V], got {shape:?}")));
    }
    let v = shape[2];
    if targets.len() != shape[0] * shape[1] {
        return Err(Error::shape("xent_loss", format!("{} targets for logits {shape:?}", targets.len())));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
        return Err(Error::Contract(format!("target id {bad} outside vocabulary of {v}")));
    }
    let n = targets.iter().filter(|&&t| t != PAD_ID).count();
    if n == 0 {
        return Err(Error::Contract("cross-entropy over a batch with no target tokens".into()));
    }
    let others = v.saturating_sub(2);
    let (on, off) = if others == 0 { (1.0, 0.0) } else { (1.0 - epsilon, epsilon / others as f64) };
    let entropy_term = |q: f64| if q > 0.0 { q * q.ln() } else { 0.0 };
    let per_token_const = entropy_term(on) + others as f64 * entropy_term(off);

    let logp = g.log_softmax(logits)?;
    let mut w = vec![R::zero(); targets.len() * v];
    for (i, &t) in targets.iter().enumerate() {
        if t == PAD_ID {
            continue;
        }
        let row = &mut w[i * v..(i + 1) * v];
        for (k, x) in row.iter_mut().enumerate() {
            let q = if k == t {
                on
            } else if k == PAD_ID {
                0.0
            } else {
                off
            };
            *x = R::of(-q / n as f64);
        }
    }
    let cross = g.weighted_sum(logp, w)?;
    g.shift(cross, R::of(per_token_const))
}

/// Forward lattice of one CTC instance.
#[derive(Clone, Debug)]
pub struct CtcLattice {
    /// Target with blanks interleaved, length `2L + 1`.
    pub extended: Vec<usize>,
    /// `T × (2L + 1)` forward log-probabilities, row-major.
    pub alphas: Vec<f64>,
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Fewest frames that can emit `target`: one per label plus a blank between repeats.
pub fn ctc_min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn extend(target: &[usize]) -> Vec<usize> {
    let mut z = Vec::with_capacity(2 * target.len() + 1);
    z.push(BLANK_ID);
    for &t in target {
        z.push(t);
        z.push(BLANK_ID);
    }
    z
}

fn can_skip(z: &[usize], s: usize) -> bool {
    s >= 2 && z[s] != BLANK_ID && z[s] != z[s - 2]
}

/// Runs the forward recursion over a `T × V` log-probability table.
pub fn ctc_forward(log_probs: &[f64], num_classes: usize, target: &[usize]) -> Result<CtcLattice> {
    let t_len = log_probs.len() / num_classes;
    if target.contains(&BLANK_ID) {
        return Err(Error::Contract("CTC target contains the blank id".into()));
    }
    if let Some(&bad) = target.iter().find(|&&t| t >= num_classes) {
        return Err(Error::Contract(format!("CTC target id {bad} outside vocabulary of {num_classes}")));
    }
    let need = ctc_min_frames(target);
    if t_len < need || t_len == 0 {
        return Err(Error::TooShort(format!("CTC needs at least {} frames, got {t_len}", need.max(1))));
    }
    let z = extend(target);
    let s_len = z.len();
    let lp = |t: usize, k: usize| log_probs[t * num_classes + k];
    let mut a = vec![f64::NEG_INFINITY; t_len * s_len];
    a[0] = lp(0, z[0]);
    if s_len > 1 {
        a[1] = lp(0, z[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let prev = &a[(t - 1) * s_len..t * s_len];
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if can_skip(&z, s) {
                acc = log_add(acc, prev[s - 2]);
            }
            a[t * s_len + s] = if acc == f64::NEG_INFINITY { acc } else { acc + lp(t, z[s]) };
        }
    }
    Ok(CtcLattice { extended: z, alphas: a })
}

impl CtcLattice {
    pub fn num_frames(&self) -> usize {
        self.alphas.len() / self.extended.len()
    }

    /// `log p(target | input)`, summing the two admissible end states.
    pub fn log_likelihood(&self) -> f64 {
        let s_len = self.extended.len();
        let last = &self.alphas[(self.num_frames() - 1) * s_len..];
        if s_len == 1 {
            last[0]
        } else {
            log_add(last[s_len - 1], last[s_len - 2])
        }
    }
}

/// Negative log-likelihood of `target` and its gradient with respect to every
/// entry of the log-probability table.
pub fn ctc_nll_and_grad(log_probs: &[f64], num_classes: usize, target: &[usize]) -> Result<(f64, Vec<f64>)> {
    let lattice = ctc_forward(log_probs, num_classes, target)?;
    let z = &lattice.extended;
    let s_len = z.len();
    let t_len = lattice.num_frames();
    let ll = lattice.log_likelihood();
    if !ll.is_finite() {
        return Err(Error::Numeric { op: "ctc_loss" });
    }
    let lp = |t: usize, k: usize| log_probs[t * num_classes + k];
    let mut b = vec![f64::NEG_INFINITY; t_len * s_len];
    let last = (t_len - 1) * s_len;
    b[last + s_len - 1] = lp(t_len - 1, z[s_len - 1]);
    if s_len > 1 {
        b[last + s_len - 2] = lp(t_len - 1, z[s_len - 2]);
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = &b[(t + 1) * s_len..(t + 2) * s_len];
            let mut acc = next[s];
            if s + 1 < s_len {
                acc = log_add(acc, next[s + 1]);
            }
            if s + 2 < s_len && can_skip(z, s + 2) {
                acc = log_add(acc, next[s + 2]);
            }
            b[t * s_len + s] = if acc == f64::NEG_INFINITY { acc } else { acc + lp(t, z[s]) };
        }
    }
    // alpha and beta both include the emission at t, so it is removed once.
    let mut grad = vec![0.0; log_probs.len()];
    for t in 0..t_len {
        for s in 0..s_len {
            let ab = lattice.alphas[t * s_len + s] + b[t * s_len + s];
            if ab == f64::NEG_INFINITY {
                continue;
            }
            grad[t * num_classes + z[s]] -= (ab - lp(t, z[s]) - ll).exp();
        }
    }
    Ok((-ll, grad))
}

/// Batch CTC result: the mean loss over usable items and the skipped ones.
pub struct CtcOutput {
    pub loss: Option<Var>,
    pub skipped: Vec<usize>,
}

/// Mean CTC negative log-likelihood over a batch of `[B, T, V]` log-probabilities.
///
/// Items whose input is too short for their target are skipped when
/// `skip_too_short` is set and reported in [`CtcOutput::skipped`]; otherwise
/// they fail the whole call.
pub fn ctc_loss<R: Real>(
    g: &mut Graph<R>,
    log_probs: Var,
    targets: &[Vec<usize>],
    input_lengths: &[usize],
    skip_too_short: bool,
) -> Result<CtcOutput> {
    let shape = g.shape(log_probs).to_vec();
    if shape.len() != 3 || shape[0] != targets.len() || input_lengths.len() != targets.len() {
        return Err(Error::shape(
            "ctc_loss",
            format!("log-probs {shape:?} with {} targets and {} lengths", targets.len(), input_lengths.len()),
        ));
    }
    let (bsz, t_max, v) = (shape[0], shape[1], shape[2]);
    let values: Vec<f64> = g.value(log_probs).data().iter().map(|x| x.as_f64()).collect();
    let mut grad = vec![0.0f64; values.len()];
    let mut total = 0.0;
    let mut used = 0usize;
    let mut skipped = Vec::new();
    let mut per_item = Vec::with_capacity(bsz);
    for b in 0..bsz {
        let len = input_lengths[b];
        if len > t_max {
            return Err(Error::shape("ctc_loss", format!("input length {len} exceeds {t_max} frames")));
        }
        let table = &values[b * t_max * v..(b * t_max + len) * v];
        match ctc_nll_and_grad(table, v, &targets[b]) {
            Ok(r) => per_item.push(Some(r)),
            Err(Error::TooShort(msg)) if skip_too_short => {
                log::debug!("skipping batch item {b}: {msg}");
                skipped.push(b);
                per_item.push(None);
            }
            Err(Error::TooShort(msg)) => return Err(Error::TooShort(format!("batch item {b}: {msg}"))),
            Err(e) => return Err(e),
        }
    }
    for r in per_item.iter().flatten() {
        total += r.0;
        used += 1;
    }
    if used == 0 {
        return Ok(CtcOutput { loss: None, skipped });
    }
    for (b, r) in per_item.into_iter().enumerate() {
        if let Some((_, gi)) = r {
            let off = b * t_max * v;
            for (dst, x) in grad[off..off + gi.len()].iter_mut().zip(gi) {
                *dst = x / used as f64;
            }
        }
    }
    let grad = grad.into_iter().map(R::of).collect();
    let loss = g.scalar_fn("ctc_loss", log_probs, R::of(total / used as f64), grad)?;
    Ok(CtcOutput { loss: Some(loss), skipped })
}

/// `(1 − λ)·xent + λ·ctc`. A missing CTC term contributes nothing.
pub fn joint_loss<R: Real>(g: &mut Graph<R>, xent: Var, ctc: Option<Var>, lambda: f64) -> Result<Var> {
    check_lambda(lambda)?;
    let a = g.scale(xent, R::of(1.0 - lambda))?;
    match ctc {
        Some(c) => {
            let b = g.scale(c, R::of(lambda))?;
            g.add(a, b)
        }
        None => Ok(a),
    }
}

pub fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::config("training.ctc_weight", format!("{lambda} is outside [0, 1]")))
    }
}

impl LossReport {
    pub fn new(xent: f64, ctc: f64, lambda: f64, token_count: usize, frame_count: usize) -> Result<Self> {
        check_lambda(lambda)?;
        Ok(LossReport {
            total: (1.0 - lambda) * xent + lambda * ctc,
            xent,
            ctc,
            lambda,
            token_count,
            frame_count,
        })
    }
}
