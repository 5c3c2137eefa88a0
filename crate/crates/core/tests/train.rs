mod common;

use std::path::Path;

use common::synth::{random_text, write_corpus, RunSpec};
use common::{random_tensor, rng};
use minis2t::config::RunConfig;
use minis2t::model::{Mode, ModelConfig, S2TModel, Source, Task};
use minis2t::tensor::{Checkpoint, Graph};
use minis2t::train::{
    average_checkpoints, init_from_checkpoints, train, Provenance, BEST_CHECKPOINT, LAST_CHECKPOINT, RESOLVED_CONFIG,
    VALIDATION_LOG,
};
use minis2t::Error;

fn corpus(dir: &Path, n: usize, seed: u64) -> std::path::PathBuf {
    let mut r = rng(seed);
    let texts: Vec<String> = (0..n).map(|_| random_text(&mut r, (1, 2), (2, 3))).collect();
    write_corpus(dir, "train", &texts, false)
}

fn small(dir: &Path, m: &Path, model_dir: &str) -> RunSpec {
    RunSpec {
        dim: 16,
        layers: 1,
        max_steps: 20,
        validation_freq: 10,
        frame_budget: 300,
        ..RunSpec::asr(dir, m.to_path_buf(), m.to_path_buf(), model_dir)
    }
}

fn load_with(spec: &RunSpec, name: &str, extra_training: &str) -> RunConfig {
    let p = spec.work.join(format!("{name}.yaml"));
    let yaml = spec.yaml().replace("training:\n", &format!("training:\n{extra_training}"));
    std::fs::write(&p, yaml).unwrap();
    RunConfig::load(&p).unwrap()
}

#[test]
fn zero_steps_saves_the_initial_model() {
    let dir = tempfile::tempdir().unwrap();
    let m = corpus(dir.path(), 6, 1);
    let spec = RunSpec {
        max_steps: 0,
        ..small(dir.path(), &m, "model")
    };
    let cfg = spec.config("zero");
    let out = train(&cfg).unwrap();
    assert_eq!(out.state.step, 0);
    let md = dir.path().join("model");
    assert!(md.join(RESOLVED_CONFIG).exists());
    let ckpt = Checkpoint::load(&md.join(LAST_CHECKPOINT)).unwrap();
    let model = S2TModel::<f32>::from_checkpoint(&ckpt).unwrap();
    let fresh = S2TModel::<f32>::new(model.config().clone()).unwrap();
    assert_eq!(model.to_checkpoint().params, fresh.to_checkpoint().params);
}

#[test]
fn non_empty_model_dir_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let m = corpus(dir.path(), 6, 2);
    let spec = RunSpec {
        max_steps: 0,
        ..small(dir.path(), &m, "model")
    };
    train(&spec.config("a")).unwrap();
    assert!(matches!(train(&spec.config("a")), Err(Error::Config { .. })));
    train(&load_with(&spec, "b", "  overwrite: true\n")).unwrap();
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let m = corpus(dir.path(), 10, 3);
    let full = small(dir.path(), &m, "full");
    train(&full.config("full")).unwrap();

    let half = RunSpec {
        max_steps: 10,
        ..small(dir.path(), &m, "split")
    };
    train(&half.config("half")).unwrap();
    let rest = small(dir.path(), &m, "split");
    let out = train(&load_with(&rest, "rest", "  resume: true\n")).unwrap();
    assert_eq!(out.state.step, 20);

    let read = |d: &str, f: &str| std::fs::read(dir.path().join(d).join(f)).unwrap();
    assert_eq!(read("full", VALIDATION_LOG), read("split", VALIDATION_LOG));
    assert_eq!(read("full", LAST_CHECKPOINT), read("split", LAST_CHECKPOINT));
    assert!(dir.path().join("full").join(BEST_CHECKPOINT).exists());
}

fn tiny_pair() -> (ModelConfig, ModelConfig, ModelConfig) {
    let st = ModelConfig::tiny(Task::S2T, 8, 12);
    let asr = ModelConfig {
        vocab_size: 9,
        init_seed: 2,
        ..st.clone()
    };
    let mt = ModelConfig {
        init_seed: 3,
        ..ModelConfig::tiny(Task::MT, 15, 12)
    };
    (st, asr, mt)
}

#[test]
fn transfer_copies_encoder_and_decoder() {
    let (st, asr_cfg, mt_cfg) = tiny_pair();
    let asr = S2TModel::<f32>::new(asr_cfg).unwrap();
    let mt = S2TModel::<f32>::new(mt_cfg).unwrap();
    let (model, report) = init_from_checkpoints(st, &asr.to_checkpoint(), &mt.to_checkpoint()).unwrap();

    for (name, prov) in &report {
        let mine = model.params().by_name(name).unwrap().value.data();
        match prov {
            Provenance::Asr => assert_eq!(mine, asr.params().by_name(name).unwrap().value.data(), "{name}"),
            Provenance::Mt => assert_eq!(mine, mt.params().by_name(name).unwrap().value.data(), "{name}"),
            Provenance::Fresh => assert!(name.starts_with("ctc."), "{name} was not transferred"),
        }
    }
    assert!(report.iter().any(|(_, p)| *p == Provenance::Fresh));

    // same encoder output as the ASR model
    let feats = random_tensor(&mut rng(5), &[1, 20, 8]).cast::<f32>();
    let enc = |m: &S2TModel<f32>| {
        let mut g = Graph::inference();
        let e = m.encode(&mut g, &Source::Features(feats.clone()), &[20], &mut Mode::eval()).unwrap();
        g.value(e.states).clone()
    };
    assert_eq!(enc(&model).data(), enc(&asr).data());
}

#[test]
fn transfer_shape_mismatch_names_both_shapes() {
    let (st, asr_cfg, _) = tiny_pair();
    let asr = S2TModel::<f32>::new(asr_cfg).unwrap();
    let wrong_mt = S2TModel::<f32>::new(ModelConfig::tiny(Task::MT, 15, 20)).unwrap();
    match init_from_checkpoints(st, &asr.to_checkpoint(), &wrong_mt.to_checkpoint()) {
        Err(Error::Data(msg)) => assert!(msg.contains("[12, 16]") && msg.contains("[20, 16]"), "{msg}"),
        Err(e) => panic!("{e}"),
        Ok(_) => panic!("vocabulary mismatch accepted"),
    }
}

#[test]
fn checkpoint_averaging() {
    let cfg = ModelConfig::tiny(Task::S2T, 8, 10);
    let a = S2TModel::<f32>::new(cfg.clone()).unwrap().to_checkpoint();
    let b = S2TModel::<f32>::new(ModelConfig { init_seed: 9, ..cfg }).unwrap().to_checkpoint();
    // one input is the identity
    assert_eq!(average_checkpoints(std::slice::from_ref(&a)).unwrap().params, a.params);
    // averaging a checkpoint with itself changes nothing
    assert_eq!(average_checkpoints(&[a.clone(), a.clone()]).unwrap().params, a.params);
    let avg = average_checkpoints(&[a.clone(), b.clone()]).unwrap();
    for ((ra, rb), r) in a.params.iter().zip(&b.params).zip(&avg.params) {
        for ((x, y), z) in ra.values.iter().zip(&rb.values).zip(&r.values) {
            assert_eq!(*z, ((*x as f64 + *y as f64) / 2.0) as f32);
        }
    }
    assert!(avg.optimizer.is_empty());
    assert!(average_checkpoints(&[]).is_err());
    let other = S2TModel::<f32>::new(ModelConfig::tiny(Task::S2T, 8, 11)).unwrap().to_checkpoint();
    assert!(average_checkpoints(&[a, other]).is_err());
}
