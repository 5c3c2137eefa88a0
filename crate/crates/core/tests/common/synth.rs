//! Tone-sequence audio corpora: every letter of a small alphabet is a short
//! sine burst at its own pitch, words are separated by silence.

use std::path::{Path, PathBuf};

use minis2t::audio::{write_wav, Waveform};
use minis2t::data::{write_manifest, ManifestEntry};
use rand::Rng;

pub const LETTERS: [char; 8] = ['a', 'b', 'c', 'd', 'e', 'f', 'g', 'h'];
pub const RATE: u32 = 16000;
const LETTER_SEC: f64 = 0.1;
const GAP_SEC: f64 = 0.06;
const EDGE_SEC: f64 = 0.04;

fn pitch(c: char) -> f64 {
    let k = LETTERS.iter().position(|&l| l == c).expect("letter outside the alphabet");
    400.0 * 1.3f64.powi(k as i32)
}

pub fn tone_wave(text: &str) -> Waveform {
    let n = |sec: f64| (sec * RATE as f64).round() as usize;
    let mut samples = vec![0.0f32; n(EDGE_SEC)];
    for (i, word) in text.split(' ').enumerate() {
        if i > 0 {
            samples.extend(std::iter::repeat(0.0).take(n(GAP_SEC)));
        }
        for c in word.chars() {
            let f = pitch(c);
            let len = n(LETTER_SEC);
            samples.extend((0..len).map(|t| {
                let ramp = (t.min(len - t) as f64 / 80.0).min(1.0);
                (0.4 * ramp * (2.0 * std::f64::consts::PI * f * t as f64 / RATE as f64).sin()) as f32
            }));
        }
    }
    samples.extend(std::iter::repeat(0.0).take(n(EDGE_SEC)));
    Waveform {
        samples,
        sample_rate: RATE,
    }
}

pub fn random_text(rng: &mut impl Rng, words: (usize, usize), letters: (usize, usize)) -> String {
    let nw = rng.gen_range(words.0..=words.1);
    (0..nw)
        .map(|_| {
            let nl = rng.gen_range(letters.0..=letters.1);
            (0..nl).map(|_| LETTERS[rng.gen_range(0..LETTERS.len())]).collect::<String>()
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Fixed cipher for the synthetic translation task: letters shift by three and
/// word order is reversed.
pub fn translate(text: &str) -> String {
    text.split(' ')
        .rev()
        .map(|w| {
            w.chars()
                .map(|c| LETTERS[(LETTERS.iter().position(|&l| l == c).unwrap() + 3) % LETTERS.len()])
                .collect::<String>()
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Writes `{dir}/{name}/*.wav` and `{dir}/{name}.tsv`; returns the manifest path.
pub fn write_corpus(dir: &Path, name: &str, texts: &[String], with_translation: bool) -> PathBuf {
    let wav_dir = dir.join(name);
    std::fs::create_dir_all(&wav_dir).unwrap();
    let frames = |samples: usize| 1 + (samples - 400) / 160;
    let entries: Vec<ManifestEntry> = texts
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let id = format!("{name}{i:03}");
            let path = wav_dir.join(format!("{id}.wav"));
            let w = tone_wave(t);
            write_wav(&path, &w).unwrap();
            ManifestEntry {
                id,
                path,
                n_frames: frames(w.samples.len()),
                transcript: t.clone(),
                translation: with_translation.then(|| translate(t)),
            }
        })
        .collect();
    let manifest = dir.join(format!("{name}.tsv"));
    write_manifest(&manifest, &entries).unwrap();
    manifest
}

/// Knobs of a generated run config.
#[derive(Clone, Debug)]
pub struct RunSpec {
    pub task: &'static str,
    pub target: &'static str,
    pub train: PathBuf,
    pub dev: PathBuf,
    pub work: PathBuf,
    pub model_dir: PathBuf,
    pub dim: usize,
    pub layers: usize,
    pub max_steps: u64,
    pub validation_freq: u64,
    pub patience: u32,
    pub learning_rate: f64,
    pub warmup: u64,
    pub ctc_weight: f64,
    pub seed: u64,
    pub transfer: Option<(PathBuf, PathBuf)>,
    pub frame_budget: usize,
    pub metric: &'static str,
    pub dropout: f64,
    pub spec_augment: bool,
}

impl RunSpec {
    pub fn asr(work: &Path, train: PathBuf, dev: PathBuf, model_dir: &str) -> Self {
        RunSpec {
            task: "S2T",
            target: "transcript",
            train,
            dev,
            work: work.to_path_buf(),
            model_dir: work.join(model_dir),
            dim: 64,
            layers: 2,
            max_steps: 400,
            validation_freq: 100,
            patience: 0,
            learning_rate: 2e-3,
            warmup: 100,
            ctc_weight: 0.3,
            seed: 42,
            transfer: None,
            frame_budget: 4000,
            metric: "wer",
            dropout: 0.0,
            spec_augment: false,
        }
    }

    pub fn yaml(&self) -> String {
        let w = self.work.display();
        let mut s = format!(
            "name: synthetic\ntask: {}\ndata:\n  train: {}\n  dev: {}\n  target: {}\n  frame_budget: {}\n  text:\n    tokenizer: char\n    vocab: {w}/vocab.txt\n",
            self.task,
            self.train.display(),
            self.dev.display(),
            self.target,
            self.frame_budget
        );
        if self.task == "MT" {
            s += &format!("  source_text:\n    tokenizer: char\n    vocab: {w}/src_vocab.txt\n");
        }
        s += &format!(
            "  audio:\n    n_mels: 40\n    spec_augment:\n      enabled: {}\n      freq_width: 5\n      time_width: 5\n",
            self.spec_augment
        );
        let stack = format!(
            "    layers: {}\n    heads: 4\n    dim: {}\n    ffn_dim: {}\n",
            self.layers,
            self.dim,
            2 * self.dim
        );
        s += &format!(
            "model:\n  conv_layers: 2\n  conv_kernel: 3\n  conv_channels: {d}\n  dropout: {p}\n  init_seed: {seed}\n  encoder:\n{stack}  decoder:\n{stack}",
            d = self.dim,
            p = self.dropout,
            seed = self.seed
        );
        s += &format!(
            "training:\n  early_stopping_metric: {}\n  ctc_weight: {}\n  seed: {}\n  max_steps: {}\n  validation_freq: {}\n  patience: {}\n  optimizer:\n    learning_rate: {}\n  schedule:\n    type: warmup\n    warmup_steps: {}\n  model_dir: {}\n",
            self.metric,
            self.ctc_weight,
            self.seed,
            self.max_steps,
            self.validation_freq,
            self.patience,
            self.learning_rate,
            self.warmup,
            self.model_dir.display()
        );
        if let Some((a, m)) = &self.transfer {
            s += &format!("  transfer:\n    asr_checkpoint: {}\n    mt_checkpoint: {}\n", a.display(), m.display());
        }
        s += "logging:\n  throughput: false\n";
        s
    }

    /// Writes the config next to the model directory and parses it.
    pub fn config(&self, name: &str) -> minis2t::config::RunConfig {
        let p = self.work.join(format!("{name}.yaml"));
        std::fs::write(&p, self.yaml()).unwrap();
        minis2t::config::RunConfig::load(&p).unwrap()
    }
}
