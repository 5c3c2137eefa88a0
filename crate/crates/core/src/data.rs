//! Manifest-driven datasets: lazy entries, length filtering, frame-budget
//! batching and on-the-fly feature loading.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{cmvn, load_wav, spec_augment, CmvnMode, FeatureSequence, MelFrontend, SpecAugmentPolicy};
use crate::error::{Error, Result};
use crate::model::Source;
use crate::tensor::Tensor;
use crate::tokenize::{Tokenizer, Vocabulary, EOS_ID, PAD_ID};

pub const MANIFEST_HEADER: &str = "id\tpath\tn_frames\ttranscript";
pub const FEATURE_CACHE_EXT: &str = "ms2f";

/// Entries per shuffled chunk when bucketing by length.
const BUCKET_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    /// WAV file or feature cache; checked only when the entry is loaded.
    pub path: PathBuf,
    pub n_frames: usize,
    pub transcript: String,
    pub translation: Option<String>,
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Reads a TSV manifest. Relative paths are resolved against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    let has_translation = match header.trim_end_matches('\r') {
        h if h == MANIFEST_HEADER => false,
        h if h == format!("{MANIFEST_HEADER}\ttranslation") => true,
        _ => return Err(parse_err(path, 1, format!("expected header `{MANIFEST_HEADER}[\\ttranslation]`"))),
    };
    let ncols = if has_translation { 5 } else { 4 };
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let no = i + 2;
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != ncols {
            return Err(parse_err(path, no, format!("expected {ncols} columns, found {}", cols.len())));
        }
        let n_frames: usize = cols[2]
            .parse()
            .map_err(|_| parse_err(path, no, format!("n_frames `{}` is not a non-negative integer", cols[2])))?;
        if n_frames == 0 {
            return Err(parse_err(path, no, "n_frames must be positive"));
        }
        if cols[0].is_empty() {
            return Err(parse_err(path, no, "empty id"));
        }
        if !seen.insert(cols[0].to_string()) {
            return Err(parse_err(path, no, format!("duplicate id `{}`", cols[0])));
        }
        let p = Path::new(cols[1]);
        out.push(ManifestEntry {
            id: cols[0].to_string(),
            path: if p.is_absolute() { p.to_path_buf() } else { base.join(p) },
            n_frames,
            transcript: cols[3].to_string(),
            translation: has_translation.then(|| cols[4].to_string()),
        });
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let with_translation = entries.iter().any(|e| e.translation.is_some());
    let mut s = String::from(MANIFEST_HEADER);
    if with_translation {
        s.push_str("\ttranslation");
    }
    s.push('\n');
    for e in entries {
        for field in [&e.id, &e.transcript] {
            if field.contains('\t') || field.contains('\n') {
                return Err(Error::Data(format!("entry {} contains a tab or newline", e.id)));
            }
        }
        s.push_str(&format!("{}\t{}\t{}\t{}", e.id, e.path.display(), e.n_frames, e.transcript));
        if with_translation {
            s.push('\t');
            s.push_str(e.translation.as_deref().unwrap_or(""));
        }
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Which manifest column holds the target text.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetField {
    Transcript,
    Translation,
}

impl ManifestEntry {
    pub fn target(&self, field: TargetField) -> Result<&str> {
        match field {
            TargetField::Transcript => Ok(&self.transcript),
            TargetField::Translation => self
                .translation
                .as_deref()
                .ok_or_else(|| Error::Data(format!("entry {} has no translation", self.id))),
        }
    }
}

/// Tokenizer plus vocabulary: text to id sequences.
#[derive(Clone, Debug)]
pub struct TextPipeline {
    pub tokenizer: Tokenizer,
    pub vocab: Vocabulary,
}

impl TextPipeline {
    pub fn encode(&self, text: &str) -> Vec<usize> {
        self.vocab.encode_ids(&self.tokenizer.tokenize(text), false)
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        self.tokenizer.detokenize(&self.vocab.decode_ids(ids))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LengthLimits {
    pub min_frames: usize,
    pub max_frames: Option<usize>,
    pub max_tokens: Option<usize>,
}

/// Drops entries outside the frame bounds or whose tokenized target exceeds
/// `max_tokens`. Returns the survivors and the number dropped.
pub fn length_filter(
    entries: Vec<ManifestEntry>,
    tokenizer: &Tokenizer,
    field: TargetField,
    limits: &LengthLimits,
) -> Result<(Vec<ManifestEntry>, usize)> {
    let before = entries.len();
    let mut kept = Vec::with_capacity(before);
    for e in entries {
        let frames_ok = e.n_frames >= limits.min_frames && limits.max_frames.map_or(true, |m| e.n_frames <= m);
        let tokens_ok = match limits.max_tokens {
            Some(m) => tokenizer.tokenize(e.target(field)?).len() <= m,
            None => true,
        };
        if frames_ok && tokens_ok {
            kept.push(e);
        }
    }
    let dropped = before - kept.len();
    if dropped > 0 {
        log::info!("length filter dropped {dropped} of {before} entries");
    }
    Ok((kept, dropped))
}

/// Greedy frame-budget batching over item lengths. With a seed the order is
/// shuffled; with bucketing, items are sorted by length inside shuffled chunks
/// and the resulting batches are shuffled again. Returns index lists.
pub fn make_batches(lengths: &[usize], frame_budget: usize, seed: Option<u64>, bucketing: bool) -> Result<Vec<Vec<usize>>> {
    if frame_budget == 0 {
        return Err(Error::config("data.frame_budget", "must be positive"));
    }
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    let mut rng = seed.map(ChaCha8Rng::seed_from_u64);
    if let Some(rng) = rng.as_mut() {
        order.shuffle(rng);
    }
    if bucketing {
        for chunk in order.chunks_mut(BUCKET_CHUNK) {
            chunk.sort_by_key(|&i| (lengths[i], i));
        }
    }
    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut cur = Vec::new();
    let mut frames = 0;
    for i in order {
        let n = lengths[i];
        if !cur.is_empty() && frames + n > frame_budget {
            batches.push(std::mem::take(&mut cur));
            frames = 0;
        }
        if n > frame_budget {
            log::warn!("item {i} with {n} frames exceeds the frame budget {frame_budget}; batched alone");
        }
        cur.push(i);
        frames += n;
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    if bucketing {
        if let Some(rng) = rng.as_mut() {
            batches.shuffle(rng);
        }
    }
    Ok(batches)
}

/// A padded minibatch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<String>,
    pub source: Source<f32>,
    pub source_lengths: Vec<usize>,
    /// Unpadded target ids (no bos/eos).
    pub targets: Vec<Vec<usize>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Row-major `[B, U_max]` target ids padded with [`PAD_ID`].
    pub fn padded_targets(&self) -> (Vec<usize>, usize) {
        let u = self.targets.iter().map(Vec::len).max().unwrap_or(0);
        let mut out = vec![PAD_ID; self.targets.len() * u];
        for (i, t) in self.targets.iter().enumerate() {
            out[i * u..i * u + t.len()].copy_from_slice(t);
        }
        (out, u)
    }

    pub fn target_lengths(&self) -> Vec<usize> {
        self.targets.iter().map(Vec::len).collect()
    }
}

/// Reads or computes the filterbank features of one entry.
pub fn load_features(entry: &ManifestEntry, frontend: &MelFrontend) -> Result<FeatureSequence> {
    let wrap = |e: Error| Error::Data(format!("entry {}: {e}", entry.id));
    let is_cache = entry.path.extension().and_then(|e| e.to_str()) == Some(FEATURE_CACHE_EXT);
    let feats = if is_cache {
        FeatureSequence::read_cache(&entry.path).map_err(wrap)?
    } else {
        let wave = load_wav(&entry.path, Some(frontend.config().sample_rate)).map_err(wrap)?;
        frontend.log_mel(&wave).map_err(wrap)?
    };
    if feats.feature_dim() != frontend.config().n_mels {
        return Err(Error::Data(format!(
            "entry {}: feature dimension {} does not match the configured {}",
            entry.id,
            feats.feature_dim(),
            frontend.config().n_mels
        )));
    }
    Ok(feats)
}

/// How the model input of an entry is produced.
#[derive(Clone, Debug)]
pub enum SourceSpec {
    Audio {
        frontend: MelFrontend,
        cmvn: CmvnMode,
        spec_augment: Option<SpecAugmentPolicy>,
    },
    /// Source text from the transcript column (MT), followed by eos.
    Text(TextPipeline),
}

#[derive(Clone, Debug)]
pub struct BatchLoader {
    pub source: SourceSpec,
    pub target: TextPipeline,
    pub field: TargetField,
}

impl BatchLoader {
    /// Model-input length of an entry, used for batching.
    pub fn source_len(&self, e: &ManifestEntry) -> usize {
        match &self.source {
            SourceSpec::Audio { .. } => e.n_frames,
            SourceSpec::Text(p) => p.tokenizer.tokenize(&e.transcript).len() + 1,
        }
    }

    /// Materializes one batch. SpecAugment runs only when `training`.
    pub fn load(&self, entries: &[ManifestEntry], item: &[usize], training: bool, rng: &mut impl Rng) -> Result<Batch> {
        let picked: Vec<&ManifestEntry> = item.iter().map(|&i| &entries[i]).collect();
        let targets = picked
            .iter()
            .map(|e| Ok(self.target.encode(e.target(self.field)?)))
            .collect::<Result<Vec<_>>>()?;
        let ids: Vec<String> = picked.iter().map(|e| e.id.clone()).collect();
        let (source, source_lengths) = match &self.source {
            SourceSpec::Audio {
                frontend,
                cmvn: mode,
                spec_augment: policy,
            } => {
                let mut feats = picked
                    .iter()
                    .map(|e| load_features(e, frontend))
                    .collect::<Result<Vec<_>>>()?;
                cmvn(&mut feats, mode)?;
                if training {
                    if let Some(p) = policy {
                        feats = feats.iter().map(|f| spec_augment(f, p, rng)).collect();
                    }
                }
                let lengths: Vec<usize> = feats.iter().map(FeatureSequence::num_frames).collect();
                (pad_features(&feats)?, lengths)
            }
            SourceSpec::Text(p) => {
                let seqs: Vec<Vec<usize>> = picked
                    .iter()
                    .map(|e| {
                        let mut s = p.encode(&e.transcript);
                        s.push(EOS_ID);
                        s
                    })
                    .collect();
                let len = seqs.iter().map(Vec::len).max().unwrap_or(1);
                let mut ids = vec![PAD_ID; seqs.len() * len];
                for (i, s) in seqs.iter().enumerate() {
                    ids[i * len..i * len + s.len()].copy_from_slice(s);
                }
                let lengths = seqs.iter().map(Vec::len).collect();
                (
                    Source::Tokens {
                        ids,
                        batch: seqs.len(),
                        len,
                    },
                    lengths,
                )
            }
        };
        Ok(Batch {
            ids,
            source,
            source_lengths,
            targets,
        })
    }
}

/// Stacks features into `[B, T_max, d]`, zero padded.
pub fn pad_features(feats: &[FeatureSequence]) -> Result<Source<f32>> {
    let first = feats.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let d = first.feature_dim();
    let t = feats.iter().map(FeatureSequence::num_frames).max().unwrap_or(0);
    let mut data = vec![0.0f32; feats.len() * t * d];
    for (i, f) in feats.iter().enumerate() {
        if f.feature_dim() != d {
            return Err(Error::Data("mixed feature dimensions in one batch".into()));
        }
        data[i * t * d..i * t * d + f.data().len()].copy_from_slice(f.data());
    }
    Ok(Source::Features(Tensor::new(&[feats.len(), t, d], data)?))
}

/// Per-batch augmentation RNG derived from a run seed and a batch counter.
pub fn batch_rng(seed: u64, counter: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(counter);
    rng
}

/// Loads batches on a background thread, at most `depth` ahead, delivered in
/// plan order. Batch `i` uses [`batch_rng`]`(seed, first_counter + i)`.
pub fn prefetch(
    loader: Arc<BatchLoader>,
    entries: Arc<Vec<ManifestEntry>>,
    plan: Vec<Vec<usize>>,
    training: bool,
    seed: u64,
    first_counter: u64,
    depth: usize,
) -> impl Iterator<Item = Result<Batch>> {
    let (tx, rx) = mpsc::sync_channel(depth.max(1));
    thread::spawn(move || {
        for (i, item) in plan.iter().enumerate() {
            let mut rng = batch_rng(seed, first_counter + i as u64);
            if tx.send(loader.load(&entries, item, training, &mut rng)).is_err() {
                break;
            }
        }
    });
    rx.into_iter()
}
