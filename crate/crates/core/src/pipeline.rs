//! Builds tokenizers, vocabularies and batch loaders from a run configuration.

use crate::audio::{CmvnMode, CmvnStats, MelFrontend};
use crate::config::{CmvnSetting, RunConfig, TextConfig};
use crate::data::{load_features, BatchLoader, ManifestEntry, SourceSpec, TextPipeline};
use crate::error::{Error, Result};
use crate::model::Task;
use crate::tokenize::{BpeModel, Normalizer, Tokenizer, Vocabulary};

fn tokenizer(cfg: &RunConfig, text: &TextConfig) -> Result<Tokenizer> {
    let bpe = match &text.bpe_model {
        Some(p) => Some(BpeModel::load(p)?),
        None => None,
    };
    let tok = Tokenizer::new(text.tokenizer, bpe, cfg.data.protected.clone())?;
    if !cfg.data.normalize {
        return Ok(tok);
    }
    let norm = match &cfg.data.normalization {
        Some(p) => Normalizer::load(p)?,
        None => Normalizer::default(),
    };
    Ok(tok.with_normalizer(norm))
}

/// Loads the vocabulary, or builds and saves it from `corpus` when the file
/// does not exist yet.
pub fn text_pipeline<'a>(
    cfg: &RunConfig,
    text: &TextConfig,
    corpus: Option<&mut dyn Iterator<Item = &'a str>>,
) -> Result<TextPipeline> {
    let tokenizer = tokenizer(cfg, text)?;
    let vocab = if text.vocab.exists() {
        Vocabulary::load(&text.vocab, &cfg.data.protected)?
    } else {
        let corpus = corpus.ok_or_else(|| {
            Error::Data(format!("vocabulary {} does not exist", text.vocab.display()))
        })?;
        let lists: Vec<Vec<String>> = corpus.map(|l| tokenizer.tokenize(l)).collect();
        let v = Vocabulary::build(lists.iter().map(Vec::as_slice), text.vocab_min_freq, text.vocab_max_size, &cfg.data.protected)?;
        if let Some(dir) = text.vocab.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        }
        v.save(&text.vocab)?;
        log::info!("built vocabulary of {} entries at {}", v.len(), text.vocab.display());
        v
    };
    Ok(TextPipeline { tokenizer, vocab })
}

fn cmvn_mode(cfg: &RunConfig, frontend: &MelFrontend, train: Option<&[ManifestEntry]>) -> Result<CmvnMode> {
    match &cfg.data.audio.cmvn {
        CmvnSetting::Utterance => Ok(CmvnMode::Utterance),
        CmvnSetting::Global(path) if path.exists() => Ok(CmvnMode::Global(CmvnStats::load(path)?)),
        CmvnSetting::Global(path) => {
            let entries = train.ok_or_else(|| Error::Data(format!("CMVN statistics {} do not exist", path.display())))?;
            let feats = entries
                .iter()
                .map(|e| load_features(e, frontend))
                .collect::<Result<Vec<_>>>()?;
            let stats = CmvnStats::estimate(&feats)?;
            stats.save(path)?;
            log::info!("estimated global CMVN statistics into {}", path.display());
            Ok(CmvnMode::Global(stats))
        }
    }
}

/// Batch loader for the configured task. With `train` given, missing
/// vocabularies and CMVN statistics are derived from those entries.
pub fn build_loader(cfg: &RunConfig, train: Option<&[ManifestEntry]>) -> Result<BatchLoader> {
    let field = cfg.data.target_field;
    let target = {
        let mut texts = train.map(|t| t.iter().filter_map(move |e| e.target(field).ok()));
        text_pipeline(cfg, &cfg.data.target, texts.as_mut().map(|i| i as &mut dyn Iterator<Item = &str>))?
    };
    let source = match cfg.task {
        Task::MT => {
            let text = cfg
                .data
                .source
                .as_ref()
                .ok_or_else(|| Error::config("data.source_text", "required for the MT task"))?;
            let mut texts = train.map(|t| t.iter().map(|e| e.transcript.as_str()));
            SourceSpec::Text(text_pipeline(cfg, text, texts.as_mut().map(|i| i as &mut dyn Iterator<Item = &str>))?)
        }
        Task::S2T => {
            let frontend = MelFrontend::new(cfg.data.audio.frontend.clone())?;
            let cmvn = cmvn_mode(cfg, &frontend, train)?;
            SourceSpec::Audio {
                frontend,
                cmvn,
                spec_augment: cfg.data.audio.spec_augment.clone(),
            }
        }
    };
    Ok(BatchLoader { source, target, field })
}

/// Vocabulary sizes and feature dimension implied by a loader.
pub fn resolved_dims(loader: &BatchLoader) -> crate::model::ResolvedDims {
    crate::model::ResolvedDims {
        vocab_size: Some(loader.target.vocab.len()),
        src_vocab_size: match &loader.source {
            SourceSpec::Text(p) => Some(p.vocab.len()),
            SourceSpec::Audio { .. } => None,
        },
        feature_dim: match &loader.source {
            SourceSpec::Audio { frontend, .. } => Some(frontend.config().n_mels),
            SourceSpec::Text(_) => None,
        },
    }
}

fn read_id_text(path: &std::path::Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.split_once('\t')
                .map(|(id, t)| (id.to_string(), t.to_string()))
                .ok_or_else(|| Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: "expected `id<TAB>text`".into(),
                })
        })
        .collect()
}

/// Inputs of [`prepare`].
#[derive(Clone, Debug)]
pub struct PrepareSpec {
    /// Directory holding `{id}.wav`.
    pub wav_dir: std::path::PathBuf,
    /// `id<TAB>transcript` lines; manifest order follows this file.
    pub transcripts: std::path::PathBuf,
    /// Optional `id<TAB>translation` lines.
    pub translations: Option<std::path::PathBuf>,
    /// When set, features are computed once and cached here as `.ms2f`.
    pub features_dir: Option<std::path::PathBuf>,
    pub frontend: crate::audio::FrontendConfig,
}

/// Writes a manifest (and optionally feature caches) for a directory of WAVs.
pub fn prepare(spec: &PrepareSpec, manifest: &std::path::Path) -> Result<Vec<ManifestEntry>> {
    use crate::data::{write_manifest, FEATURE_CACHE_EXT};
    let frontend = MelFrontend::new(spec.frontend.clone())?;
    let translations: Option<std::collections::HashMap<String, String>> = match &spec.translations {
        Some(p) => Some(read_id_text(p)?.into_iter().collect()),
        None => None,
    };
    if let Some(d) = &spec.features_dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(format!("creating {}", d.display()), e))?;
    }
    let mut entries = Vec::new();
    for (id, transcript) in read_id_text(&spec.transcripts)? {
        let wav = spec.wav_dir.join(format!("{id}.wav"));
        let wave = crate::audio::load_wav(&wav, Some(spec.frontend.sample_rate))
            .map_err(|e| Error::Data(format!("entry {id}: {e}")))?;
        let (path, n_frames) = match &spec.features_dir {
            Some(d) => {
                let feats = frontend.log_mel(&wave)?;
                let p = d.join(format!("{id}.{FEATURE_CACHE_EXT}"));
                feats.write_cache(&p)?;
                (p, feats.num_frames())
            }
            None => (wav, frontend.num_frames(wave.samples.len())),
        };
        if n_frames == 0 {
            log::warn!("entry {id} is shorter than one frame; skipped");
            continue;
        }
        let translation = match &translations {
            Some(t) => Some(
                t.get(&id)
                    .cloned()
                    .ok_or_else(|| Error::Data(format!("no translation for entry {id}")))?,
            ),
            None => None,
        };
        let path = std::fs::canonicalize(&path).unwrap_or(path);
        entries.push(ManifestEntry {
            id,
            path,
            n_frames,
            transcript,
            translation,
        });
    }
    write_manifest(manifest, &entries)?;
    Ok(entries)
}
