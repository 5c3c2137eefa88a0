mod common;

use common::{random_tensor, rel_err, rng};
use minis2t::model::{Mode, ModelConfig, S2TModel, Source, Task};
use minis2t::tensor::{Checkpoint, Graph, Tensor};
use minis2t::Error;
use rand::Rng;

const D: usize = 8;
const V: usize = 12;

fn tiny(l: usize) -> ModelConfig {
    let mut c = ModelConfig::tiny(Task::S2T, D, V);
    c.num_conv_layers = l;
    c
}

fn features(seed: u64, b: usize, t: usize) -> Tensor<f64> {
    random_tensor(&mut rng(seed), &[b, t, D])
}

#[test]
fn subsampled_lengths() {
    let m = S2TModel::<f64>::new(tiny(2)).unwrap();
    let mut g = Graph::inference();
    let (x, lens) = m.subsample(&mut g, &Source::Features(features(1, 2, 100)), &[100, 60]).unwrap();
    // 100 -> 49 -> 24 and 60 -> 29 -> 14
    assert_eq!(g.shape(x), &[2, 24, 16]);
    assert_eq!(lens, vec![24, 14]);
    let v = g.value(x).data();
    assert!(v[(24 + 14) * 16..].iter().all(|&z| z == 0.0), "padding must be zero");

    let m0 = S2TModel::<f64>::new(tiny(0)).unwrap();
    let mut g = Graph::inference();
    let (x0, l0) = m0.subsample(&mut g, &Source::Features(features(1, 1, 37)), &[37]).unwrap();
    assert_eq!(g.shape(x0)[1], 37);
    assert_eq!(l0, vec![37]);
}

#[test]
fn too_short_names_the_utterance() {
    let m = S2TModel::<f64>::new(tiny(2)).unwrap();
    let mut g = Graph::inference();
    let err = m.subsample(&mut g, &Source::Features(features(1, 2, 20)), &[20, 5]).unwrap_err();
    match err {
        Error::TooShort(msg) => assert!(msg.contains("#1"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

fn encode(m: &S2TModel<f64>, f: Tensor<f64>, lens: &[usize]) -> (Vec<f64>, Vec<usize>, Vec<usize>) {
    let mut g = Graph::inference();
    let e = m.encode(&mut g, &Source::Features(f), lens, &mut Mode::eval()).unwrap();
    (g.value(e.states).data().to_vec(), g.shape(e.states).to_vec(), e.lengths)
}

#[test]
fn identical_rows_and_padding_invariance() {
    let m = S2TModel::<f64>::new(tiny(1)).unwrap();
    let one = features(3, 1, 30);
    let mut two = one.data().to_vec();
    two.extend_from_slice(one.data());
    let (s, shape, _) = encode(&m, Tensor::new(&[2, 30, D], two).unwrap(), &[30, 30]);
    let n = shape[1] * shape[2];
    for i in 0..n {
        assert!((s[i] - s[n + i]).abs() < 1e-5);
    }

    let (base, bshape, blens) = encode(&m, one.clone(), &[30]);
    let mut padded = one.data().to_vec();
    padded.extend(std::iter::repeat(0.0).take(11 * D));
    let (ext, eshape, elens) = encode(&m, Tensor::new(&[1, 41, D], padded).unwrap(), &[30]);
    assert_eq!(blens, elens);
    assert!(eshape[1] > bshape[1]);
    let d = bshape[2];
    for t in 0..blens[0] {
        for j in 0..d {
            assert!((base[t * d + j] - ext[t * d + j]).abs() < 1e-5);
        }
    }
}

#[test]
fn decoder_is_causal_and_attention_normalized() {
    let m = S2TModel::<f64>::new(tiny(1)).unwrap();
    let run = |ys: &[usize]| {
        let mut g = Graph::inference();
        let e = m.encode(&mut g, &Source::Features(features(5, 1, 25)), &[25], &mut Mode::eval()).unwrap();
        let d = m.decode(&mut g, ys, ys.len(), &e, &mut Mode::eval()).unwrap();
        let att: Vec<Tensor<f64>> = d.cross_attention.iter().map(|&a| g.value(a).clone()).collect();
        (g.value(d.logits).clone(), att)
    };
    let (a, att) = run(&[3, 5, 6, 7, 8]);
    let (b, _) = run(&[3, 5, 6, 9, 8]);
    // decoder input 3 changed: earlier outputs must not move
    for u in 0..3 {
        for k in 0..V {
            assert_eq!(a.data()[u * V + k], b.data()[u * V + k]);
        }
    }
    assert!((0..V).any(|k| a.data()[4 * V + k] != b.data()[4 * V + k]));
    for t in &att {
        let cols = t.shape()[2];
        for row in t.data().chunks(cols) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
    let (bos_only, _) = run(&[3]);
    assert_eq!(bos_only.shape(), &[1, 1, V]);
}

#[test]
fn ctc_rows_are_distributions() {
    let m = S2TModel::<f64>::new(tiny(2)).unwrap();
    let mut g = Graph::inference();
    let e = m.encode(&mut g, &Source::Features(features(6, 2, 40)), &[40, 33], &mut Mode::eval()).unwrap();
    let lp = m.ctc_logits(&mut g, &e).unwrap();
    assert_eq!(g.shape(lp), &[2, 9, V]);
    for row in g.value(lp).data().chunks(V) {
        assert!((row.iter().map(|x| x.exp()).sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn batch_losses_match_individual_losses() {
    let m = S2TModel::<f64>::new(tiny(1)).unwrap();
    let f = features(7, 2, 30);
    let targets = vec![vec![5, 6, 7], vec![8, 9]];
    let single = |i: usize, len: usize| {
        let data = f.data()[i * 30 * D..(i * 30 + len) * D].to_vec();
        let src = Source::Features(Tensor::new(&[1, len, D], data).unwrap());
        let mut g = Graph::new();
        let out = m.loss(&mut g, &src, &[len], &targets[i..=i], 0.0, 0.0, &mut Mode::eval()).unwrap();
        (out.xent * out.token_count as f64, out.token_count)
    };
    let (x0, n0) = single(0, 30);
    let (x1, n1) = single(1, 21);
    let mut g = Graph::new();
    let out = m
        .loss(&mut g, &Source::Features(f.clone()), &[30, 21], &targets, 0.0, 0.0, &mut Mode::eval())
        .unwrap();
    let batch_sum = out.xent * out.token_count as f64;
    assert!((batch_sum - (x0 + x1)).abs() < 1e-5, "{batch_sum} vs {}", x0 + x1);
    assert_eq!(out.token_count, n0 + n1);
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let m = S2TModel::<f32>::new(tiny(2)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    m.to_checkpoint().save(&path).unwrap();
    let back = S2TModel::<f32>::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    assert_eq!(back.config(), m.config());
    let f: Tensor<f32> = features(8, 1, 50).cast();
    let run = |m: &S2TModel<f32>| {
        let mut g = Graph::inference();
        let e = m.encode(&mut g, &Source::Features(f.clone()), &[50], &mut Mode::eval()).unwrap();
        let d = m.decode(&mut g, &[3, 6, 7], 3, &e, &mut Mode::eval()).unwrap();
        g.value(d.logits).data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(&m), run(&back));
}

#[test]
fn mt_model_embeds_source_tokens() {
    let c = ModelConfig::tiny(Task::MT, 20, V);
    let m = S2TModel::<f64>::new(c).unwrap();
    let mut g = Graph::new();
    let src = Source::Tokens {
        ids: vec![5, 6, 7, 4, 8, 4, 1, 1],
        batch: 2,
        len: 4,
    };
    let out = m.loss(&mut g, &src, &[4, 2], &[vec![5], vec![6, 7]], 0.3, 0.1, &mut Mode::eval()).unwrap();
    assert!(out.ctc.is_none());
    assert!(g.value(out.loss).item().is_finite());
}

/// Joint loss gradient against central differences on a sampled 1% of the
/// parameters (at least 40), double precision.
#[test]
fn end_to_end_gradient_check() {
    let m = S2TModel::<f64>::new(tiny(2)).unwrap();
    let f = features(9, 2, 24);
    let lens = [24, 19];
    let targets = vec![vec![5, 6], vec![7]];
    let loss_of = |m: &S2TModel<f64>| {
        let mut g = Graph::new();
        let out = m
            .loss(&mut g, &Source::Features(f.clone()), &lens, &targets, 0.3, 0.1, &mut Mode::eval())
            .unwrap();
        (g, out.loss)
    };
    let (g, loss) = loss_of(&m);
    let grads = g.backward(loss).unwrap();
    let mut r = rng(10);
    let ids: Vec<_> = m.params().ids().collect();
    let total = m.params().num_scalars();
    let samples = (total / 100).max(40);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let id = ids[r.gen_range(0..ids.len())];
        let n = m.params().value(id).numel();
        let j = r.gen_range(0..n);
        let analytic = grads.param(id).unwrap().data()[j];
        let eps = 1e-5;
        let mut plus = m.clone();
        plus.params_mut().get_mut(id).value.data_mut()[j] += eps;
        let mut minus = m.clone();
        minus.params_mut().get_mut(id).value.data_mut()[j] -= eps;
        let (gp, lp) = loss_of(&plus);
        let (gm, lm) = loss_of(&minus);
        let numeric = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * eps);
        worst = worst.max(rel_err(analytic, numeric));
    }
    assert!(worst < 1e-3, "worst relative error {worst}");
}
