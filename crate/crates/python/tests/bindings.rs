use pyo3::prelude::*;
use pyo3::types::PyModule;

fn with_module<F: FnOnce(&Bound<'_, PyModule>)>(f: F) {
    Python::initialize();
    Python::attach(|py| {
        let m = PyModule::new(py, "minis2t_py").unwrap();
        minis2t_py::minis2t_py(&m).unwrap();
        f(&m);
    });
}

#[test]
fn log_mel_shape() {
    with_module(|m| {
        let samples = vec![0.0f32; 16000];
        let feats: Vec<Vec<f32>> = m.getattr("log_mel").unwrap().call1((samples,)).unwrap().extract().unwrap();
        assert_eq!(feats.len(), 98);
        assert_eq!(feats[0].len(), 80);
    });
}

#[test]
fn ctc_loss_two_frames() {
    with_module(|m| {
        let lp = vec![vec![0.5f64.ln(); 2]; 2];
        let (nll, grad): (f64, Vec<Vec<f64>>) = m.getattr("ctc_loss").unwrap().call1((lp, vec![1usize])).unwrap().extract().unwrap();
        assert!((nll + 0.75f64.ln()).abs() < 1e-12);
        assert_eq!(grad.len(), 2);
        let err = m.getattr("ctc_loss").unwrap().call1((vec![vec![0.0f64]; 1], vec![1usize, 1])).unwrap_err();
        Python::attach(|py| assert!(err.is_instance_of::<pyo3::exceptions::PyRuntimeError>(py)));
    });
}

#[test]
fn score_and_tokenizer() {
    with_module(|m| {
        let wer: f64 = m
            .getattr("score")
            .unwrap()
            .call1(("wer", vec!["a x c"], vec!["a b c"]))
            .unwrap()
            .extract()
            .unwrap();
        assert_eq!(format!("{wer:.2}"), "33.33");
        assert!(m.getattr("score").unwrap().call1(("meteor", vec!["a"], vec!["a"])).is_err());

        let tok = m.getattr("Tokenizer").unwrap().call1(("char",)).unwrap();
        let toks: Vec<String> = tok.call_method1("tokenize", ("ab c",)).unwrap().extract().unwrap();
        assert_eq!(toks.len(), 4);
        let back: String = tok.call_method1("detokenize", (toks,)).unwrap().extract().unwrap();
        assert_eq!(back, "ab c");
    });
}

#[test]
fn model_round_trip() {
    use minis2t::model::{ModelConfig, S2TModel, Task};
    let dir = std::env::temp_dir().join(format!("minis2t_py_{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("tiny.ms2t");
    S2TModel::<f32>::new(ModelConfig::tiny(Task::S2T, 8, 10)).unwrap().to_checkpoint().save(&path).unwrap();
    with_module(|m| {
        let model = m.getattr("Model").unwrap().call_method1("load", (path.clone(),)).unwrap();
        let task: String = model.getattr("task").unwrap().extract().unwrap();
        assert_eq!(task, "S2T");
        let feats = vec![vec![0.1f32; 8]; 20];
        let (ids, score): (Vec<usize>, f64) = model.call_method1("decode", (feats, 2, 5)).unwrap().extract().unwrap();
        assert!(ids.len() <= 5);
        assert!(score <= 0.0);
    });
    std::fs::remove_dir_all(&dir).unwrap();
}
