//! Batch recognition / translation to hypothesis files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::data::{read_manifest, ManifestEntry, MANIFEST_HEADER};
use crate::decoding::{dump_attention, DecodeOptions, ModelScorer};
use crate::error::{Error, Result};
use crate::model::{S2TModel, Task};
use crate::pipeline::build_loader;
use crate::tensor::Checkpoint;
use crate::train::decode_entries;

/// Reads a manifest, or a plain list with one WAV path (S2T) or one source
/// sentence (MT) per line. List items get ids `utt{N}` or the WAV file stem.
pub fn read_inputs(path: &Path, task: Task) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    if text.starts_with(MANIFEST_HEADER) {
        return read_manifest(path);
    }
    let base = path.parent().unwrap_or(Path::new(""));
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| match task {
            Task::S2T => {
                let p = PathBuf::from(line.trim());
                let p = if p.is_absolute() { p } else { base.join(p) };
                ManifestEntry {
                    id: p.file_stem().map_or(format!("utt{i}"), |s| s.to_string_lossy().into_owned()),
                    path: p,
                    n_frames: 0,
                    transcript: String::new(),
                    translation: None,
                }
            }
            Task::MT => ManifestEntry {
                id: format!("utt{i}"),
                path: PathBuf::new(),
                n_frames: 0,
                transcript: line.to_string(),
                translation: Some(String::new()),
            },
        })
        .collect())
}

/// What [`run_inference`] wrote.
#[derive(Clone, Debug)]
pub struct InferenceOutput {
    pub hypotheses: Vec<String>,
    pub scores_path: Option<PathBuf>,
}

/// Decodes `input` with the checkpoint and writes one hypothesis per line to
/// `output`. `beam_size` overrides the configured value.
pub fn run_inference(
    cfg: &RunConfig,
    checkpoint: &Path,
    input: &Path,
    output: &Path,
    beam_size: Option<usize>,
) -> Result<InferenceOutput> {
    let model = S2TModel::<f32>::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    if model.config().task != cfg.task {
        return Err(Error::config(
            "task",
            format!("checkpoint is a {} model, config says {}", model.config().task.as_str(), cfg.task.as_str()),
        ));
    }
    let loader = build_loader(cfg, None)?;
    if loader.target.vocab.len() != model.config().vocab_size {
        return Err(Error::Data(format!(
            "vocabulary mismatch: {} has {} entries, checkpoint expects {}",
            cfg.data.target.vocab.display(),
            loader.target.vocab.len(),
            model.config().vocab_size
        )));
    }
    if let crate::data::SourceSpec::Text(p) = &loader.source {
        if p.vocab.len() != model.config().src_vocab_size {
            return Err(Error::Data(format!(
                "source vocabulary mismatch: {} entries, checkpoint expects {}",
                p.vocab.len(),
                model.config().src_vocab_size
            )));
        }
    }
    let mut opts: DecodeOptions = cfg.testing.decode.clone();
    if let Some(k) = beam_size {
        opts.beam_size = k;
    }
    opts.validate()?;

    let entries = read_inputs(input, cfg.task)?;
    let hyps = decode_entries(&model, &loader, &entries, &opts)?;
    let texts: Vec<String> = hyps.iter().map(|h| loader.target.decode(h.output())).collect();

    let mut out = String::new();
    for t in &texts {
        out.push_str(t);
        out.push('\n');
    }
    if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    std::fs::write(output, out).map_err(|e| Error::io(format!("writing {}", output.display()), e))?;

    let scores_path = if cfg.testing.write_scores {
        let p = output.with_extension("scores.tsv");
        let mut s = String::from("id\tscore\tnormalized_score\thypothesis\n");
        for ((e, h), t) in entries.iter().zip(&hyps).zip(&texts) {
            let _ = writeln!(s, "{}\t{:.6}\t{:.6}\t{t}", e.id, h.score, h.normalized_score);
        }
        std::fs::write(&p, s).map_err(|e| Error::io(format!("writing {}", p.display()), e))?;
        Some(p)
    } else {
        None
    };

    if opts.dump_attention {
        let dir = output.with_extension("attention");
        let mut rng = crate::data::batch_rng(0, 0);
        for (i, (e, h)) in entries.iter().zip(&hyps).enumerate() {
            let b = loader.load(&entries, &[i], false, &mut rng)?;
            let Ok(scorer) = ModelScorer::new(&model, &b.source, b.source_lengths[0]) else {
                continue;
            };
            dump_attention(&scorer.cross_attention(&h.tokens)?, &e.id, &dir)?;
        }
    }
    Ok(InferenceOutput {
        hypotheses: texts,
        scores_path,
    })
}
