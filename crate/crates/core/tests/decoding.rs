use minis2t::decoding::{apply_penalties, beam_search, ctc_collapse, greedy_search, length_penalty, search, DecodeOptions, StepScorer};
use minis2t::tokenize::{BLANK_ID, BOS_ID, EOS_ID};
use minis2t::Result;
use proptest::prelude::*;

const A: usize = 5;
const B: usize = 6;
const V: usize = 7;

/// Two-token toy: A is likelier first, but B is almost always followed by eos.
struct Toy {
    calls: usize,
}

fn dist(pairs: &[(usize, f64)]) -> Vec<f64> {
    let mut out = vec![f64::NEG_INFINITY; V];
    for &(t, p) in pairs {
        out[t] = p.ln();
    }
    out
}

impl StepScorer for Toy {
    fn next_log_probs(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        self.calls += 1;
        Ok(prefixes
            .iter()
            .map(|p| match &p[1..] {
                [] => dist(&[(A, 0.6), (B, 0.4)]),
                [A] => dist(&[(EOS_ID, 0.4), (A, 0.3), (B, 0.3)]),
                [B] => dist(&[(EOS_ID, 0.9), (A, 0.05), (B, 0.05)]),
                _ => dist(&[(EOS_ID, 0.5), (A, 0.25), (B, 0.25)]),
            })
            .collect())
    }
}

fn opts(beam: usize) -> DecodeOptions {
    DecodeOptions {
        beam_size: beam,
        max_output_length: 6,
        length_penalty: 0.0,
        ..DecodeOptions::greedy()
    }
}

#[test]
fn beam_beats_greedy_on_toy() {
    let g = greedy_search(&mut Toy { calls: 0 }, &opts(1)).unwrap();
    assert_eq!(g.tokens, vec![BOS_ID, A, EOS_ID]);
    assert!((g.score - (0.6f64 * 0.4).ln()).abs() < 1e-12);

    let b = beam_search(&mut Toy { calls: 0 }, &opts(2)).unwrap();
    assert_eq!(b[0].tokens, vec![BOS_ID, B, EOS_ID]);
    assert!((b[0].score - (0.4f64 * 0.9).ln()).abs() < 1e-12);
    assert!(b[0].score > g.score);
    assert_eq!(b[0].output(), &[B]);
}

#[test]
fn beam_results_are_sorted_and_distinct() {
    let hyps = beam_search(&mut Toy { calls: 0 }, &opts(3)).unwrap();
    assert!(hyps.len() <= 3 && !hyps.is_empty());
    for w in hyps.windows(2) {
        assert!(w[0].normalized_score >= w[1].normalized_score);
        assert_ne!(w[0].tokens, w[1].tokens);
    }
}

#[test]
fn search_with_beam_one_is_greedy() {
    let s = search(&mut Toy { calls: 0 }, &opts(1)).unwrap();
    assert_eq!(s.len(), 1);
    assert_eq!(s[0], greedy_search(&mut Toy { calls: 0 }, &opts(1)).unwrap());
}

#[test]
fn length_limit_forces_eos() {
    struct Never;
    impl StepScorer for Never {
        fn next_log_probs(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
            Ok(prefixes.iter().map(|_| dist(&[(A, 0.99), (EOS_ID, 0.01)])).collect())
        }
    }
    let o = DecodeOptions {
        max_output_length: 3,
        ..opts(1)
    };
    let g = greedy_search(&mut Never, &o).unwrap();
    assert_eq!(g.tokens, vec![BOS_ID, A, A, A, EOS_ID]);
    // the forced eos adds nothing
    assert!((g.score - 3.0 * 0.99f64.ln()).abs() < 1e-12);
    let b = beam_search(&mut Never, &DecodeOptions { beam_size: 2, ..o }).unwrap();
    assert!(b.iter().all(|h| h.tokens.len() <= 5));
}

#[test]
fn length_normalization() {
    assert!((length_penalty(1, 0.6) - 1.0).abs() < 1e-12);
    let g = greedy_search(
        &mut Toy { calls: 0 },
        &DecodeOptions {
            length_penalty: 1.0,
            ..opts(1)
        },
    )
    .unwrap();
    // |Y| = 2 (A, eos): ((5 + 2) / 6)^1
    assert!((g.normalized_score - g.score / (7.0 / 6.0)).abs() < 1e-12);
}

#[test]
fn invalid_options_are_rejected() {
    let bad = DecodeOptions {
        beam_size: 0,
        ..opts(1)
    };
    assert!(bad.validate().is_err());
    assert!(beam_search(&mut Toy { calls: 0 }, &bad).is_err());
}

proptest! {
    #[test]
    fn collapse_inverts_ctc_paths(
        labels in proptest::collection::vec(5usize..9, 0..8),
        reps in proptest::collection::vec(1usize..4, 8),
        blanks in proptest::collection::vec(0usize..3, 9),
    ) {
        // blanks are optional between distinct labels, required between repeats
        let mut path = vec![BLANK_ID; blanks[0]];
        for (i, &l) in labels.iter().enumerate() {
            path.extend(std::iter::repeat(l).take(reps[i]));
            let need = usize::from(labels.get(i + 1) == Some(&l));
            path.extend(std::iter::repeat(BLANK_ID).take(blanks[i + 1].max(need)));
        }
        prop_assert_eq!(ctc_collapse(&path), labels);
    }

    #[test]
    fn blocked_tokens_never_complete_a_seen_ngram(
        history in proptest::collection::vec(5usize..9, 0..12),
        n in 1usize..4,
        lp in proptest::collection::vec(-5.0f64..0.0, 9),
    ) {
        let o = DecodeOptions { no_repeat_ngram_size: n, ..DecodeOptions::greedy() };
        let out = apply_penalties(&lp, &history, &o);
        for t in 5..9 {
            if out[t] == f64::NEG_INFINITY {
                continue;
            }
            let mut h = history.clone();
            h.push(t);
            if h.len() >= n {
                let last = &h[h.len() - n..];
                prop_assert!(!h[..h.len() - 1].windows(n).any(|w| w == last));
            }
        }
        prop_assert!(out.iter().any(|&x| x > f64::NEG_INFINITY));
        prop_assert_eq!(out[BOS_ID], f64::NEG_INFINITY);
    }
}
