use std::path::{Path, PathBuf};

use super::reader::{MapBuilder, Section};
use super::yaml::{self, Value};
use crate::audio::{FrontendConfig, MaskValue, SpecAugmentPolicy};
use crate::data::{LengthLimits, TargetField};
use crate::decoding::DecodeOptions;
use crate::error::{Error, Result};
use crate::evaluation::{EvalConfig, Metric};
use crate::model::{ModelConfig, ResolvedDims, Task};
use crate::tensor::{AdamConfig, LrSchedule};
use crate::tokenize::{Scheme, DEFAULT_PROTECTED};

/// Environment variable overriding `training.seed`.
pub const SEED_ENV: &str = "MS2T_SEED";

#[derive(Clone, Debug, PartialEq)]
pub enum CmvnSetting {
    Utterance,
    Global(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AudioConfig {
    pub frontend: FrontendConfig,
    pub cmvn: CmvnSetting,
    pub spec_augment: Option<SpecAugmentPolicy>,
}

/// One side's text processing (target, or MT source).
#[derive(Clone, Debug, PartialEq)]
pub struct TextConfig {
    pub tokenizer: Scheme,
    pub bpe_model: Option<PathBuf>,
    pub vocab: PathBuf,
    pub vocab_min_freq: usize,
    pub vocab_max_size: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: Option<PathBuf>,
    pub target_field: TargetField,
    pub target: TextConfig,
    /// MT only.
    pub source: Option<TextConfig>,
    pub protected: Vec<String>,
    /// Regex table applied before tokenization; `None` means the built-in table.
    pub normalization: Option<PathBuf>,
    pub normalize: bool,
    pub limits: LengthLimits,
    pub frame_budget: usize,
    pub bucketing: bool,
    pub prefetch: usize,
    pub audio: AudioConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferConfig {
    pub asr_checkpoint: PathBuf,
    pub mt_checkpoint: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub ctc_weight: f64,
    pub label_smoothing: f64,
    pub seed: u64,
    pub max_steps: u64,
    pub validation_freq: u64,
    pub patience: u32,
    pub keep_best: usize,
    pub early_stopping_metric: Metric,
    pub clip_grad_norm: Option<f64>,
    pub optimizer: AdamConfig,
    pub schedule: LrSchedule,
    pub model_dir: PathBuf,
    pub overwrite: bool,
    pub resume: bool,
    pub transfer: Option<TransferConfig>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TestingConfig {
    pub decode: DecodeOptions,
    pub eval: EvalConfig,
    /// Also write `(id, score, normalized_score, hypothesis)` TSV rows.
    pub write_scores: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoggingConfig {
    /// Report tokens/sec in the validation log; `false` writes `NA` so logs are
    /// comparable across runs.
    pub throughput: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub name: String,
    pub task: Task,
    pub data: DataConfig,
    /// The `model` section as written; sizes known only after loading
    /// vocabularies are resolved by [`RunConfig::model_config`].
    pub model: Value,
    pub training: TrainingConfig,
    pub testing: TestingConfig,
    pub logging: LoggingConfig,
    /// Directory relative paths are resolved against.
    pub base_dir: PathBuf,
}

fn resolve(base: &Path, p: String) -> PathBuf {
    let p = PathBuf::from(p);
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

fn read_text(mut s: Section<'_>, base: &Path, default_vocab: &str) -> Result<TextConfig> {
    let tokenizer: Scheme = s.parsed("tokenizer", "char")?;
    let bpe_model = s.opt_str("bpe_model")?.map(|p| resolve(base, p));
    if tokenizer == Scheme::Bpe && bpe_model.is_none() {
        return Err(Error::config(s.key_path("bpe_model"), "required when tokenizer is bpe"));
    }
    let c = TextConfig {
        tokenizer,
        bpe_model,
        vocab: resolve(base, s.str("vocab", default_vocab)?),
        vocab_min_freq: s.positive("vocab_min_freq", 1)?,
        vocab_max_size: s.opt_usize("vocab_max_size")?,
    };
    s.finish()?;
    Ok(c)
}

fn text_value(t: &TextConfig) -> Value {
    MapBuilder::new()
        .put("tokenizer", t.tokenizer.as_str())
        .put_opt("bpe_model", t.bpe_model.as_ref().map(|p| p.display().to_string()))
        .put("vocab", t.vocab.display().to_string())
        .put("vocab_min_freq", t.vocab_min_freq)
        .put_opt("vocab_max_size", t.vocab_max_size)
        .build()
}

fn read_audio(mut s: Section<'_>, base: &Path) -> Result<AudioConfig> {
    let d = FrontendConfig::default();
    let frontend = FrontendConfig {
        sample_rate: s.positive("sample_rate", d.sample_rate as usize)? as u32,
        n_mels: s.positive("n_mels", d.n_mels)?,
        frame_len_ms: s.f64_in("frame_len_ms", d.frame_len_ms, 1.0, 1000.0)?,
        frame_shift_ms: s.f64_in("frame_shift_ms", d.frame_shift_ms, 1.0, 1000.0)?,
        low_freq: s.f64_in("low_freq", d.low_freq, 0.0, f64::MAX)?,
        preemphasis: s.f64_in("preemphasis", d.preemphasis, 0.0, 1.0)?,
    };
    let cmvn_key = s.key_path("cmvn");
    let cmvn = match s.str("cmvn", "utterance")?.as_str() {
        "utterance" => CmvnSetting::Utterance,
        "global" => CmvnSetting::Global(resolve(
            base,
            s.opt_str("cmvn_stats")?
                .ok_or_else(|| Error::config(s.key_path("cmvn_stats"), "required for global CMVN"))?,
        )),
        other => return Err(Error::config(cmvn_key, format!("unknown mode `{other}` (expected utterance or global)"))),
    };
    if matches!(cmvn, CmvnSetting::Utterance) {
        s.opt_str("cmvn_stats")?;
    }
    let mut sa = s.section("spec_augment")?;
    let dp = SpecAugmentPolicy::default();
    let enabled = sa.bool("enabled", true)?;
    let policy = SpecAugmentPolicy {
        num_freq_masks: sa.usize("freq_masks", dp.num_freq_masks)?,
        max_freq_width: sa.usize("freq_width", dp.max_freq_width)?,
        num_time_masks: sa.usize("time_masks", dp.num_time_masks)?,
        max_time_width: sa.usize("time_width", dp.max_time_width)?,
        mask_value: match sa.str("mask_value", "zero")?.as_str() {
            "zero" => MaskValue::Zero,
            "mean" => MaskValue::Mean,
            other => return Err(Error::config(sa.key_path("mask_value"), format!("unknown `{other}` (zero or mean)"))),
        },
    };
    sa.finish()?;
    if enabled {
        policy.validate(frontend.n_mels)?;
    }
    s.finish()?;
    Ok(AudioConfig {
        frontend,
        cmvn,
        spec_augment: enabled.then_some(policy),
    })
}

fn audio_value(a: &AudioConfig) -> Value {
    let f = &a.frontend;
    let p = a.spec_augment.clone().unwrap_or_default();
    let mut b = MapBuilder::new()
        .put("sample_rate", f.sample_rate as usize)
        .put("n_mels", f.n_mels)
        .put("frame_len_ms", f.frame_len_ms)
        .put("frame_shift_ms", f.frame_shift_ms)
        .put("low_freq", f.low_freq)
        .put("preemphasis", f.preemphasis);
    b = match &a.cmvn {
        CmvnSetting::Utterance => b.put("cmvn", "utterance"),
        CmvnSetting::Global(p) => b.put("cmvn", "global").put("cmvn_stats", p.display().to_string()),
    };
    b.put(
        "spec_augment",
        MapBuilder::new()
            .put("enabled", a.spec_augment.is_some())
            .put("freq_masks", p.num_freq_masks)
            .put("freq_width", p.max_freq_width)
            .put("time_masks", p.num_time_masks)
            .put("time_width", p.max_time_width)
            .put(
                "mask_value",
                match p.mask_value {
                    MaskValue::Zero => "zero",
                    MaskValue::Mean => "mean",
                },
            )
            .build(),
    )
    .build()
}

fn read_schedule(mut s: Section<'_>) -> Result<LrSchedule> {
    let kind_key = s.key_path("type");
    let sched = match s.str("type", "fixed")?.as_str() {
        "fixed" => LrSchedule::Fixed,
        "warmup" => LrSchedule::WarmupDecay {
            warmup_steps: s.positive("warmup_steps", 4000)? as u64,
        },
        "plateau" => LrSchedule::Plateau {
            factor: s.f64_in("factor", 0.5, 1e-6, 1.0)?,
            patience: s.usize("patience", 2)? as u32,
            min_lr: s.f64_in("min_lr", 1e-6, 0.0, f64::MAX)?,
        },
        other => return Err(Error::config(kind_key, format!("unknown schedule `{other}` (fixed, warmup or plateau)"))),
    };
    s.finish()?;
    Ok(sched)
}

fn schedule_value(s: &LrSchedule) -> Value {
    match s {
        LrSchedule::Fixed => MapBuilder::new().put("type", "fixed").build(),
        LrSchedule::WarmupDecay { warmup_steps } => MapBuilder::new()
            .put("type", "warmup")
            .put("warmup_steps", *warmup_steps)
            .build(),
        LrSchedule::Plateau { factor, patience, min_lr } => MapBuilder::new()
            .put("type", "plateau")
            .put("factor", *factor)
            .put("patience", *patience as usize)
            .put("min_lr", *min_lr)
            .build(),
    }
}

fn read_decode(s: &mut Section<'_>) -> Result<DecodeOptions> {
    let d = DecodeOptions::default();
    let o = DecodeOptions {
        beam_size: s.positive("beam_size", d.beam_size)?,
        max_output_length: s.usize("max_output_length", d.max_output_length)?,
        length_penalty: s.f64_in("length_penalty", d.length_penalty, 0.0, f64::MAX)?,
        repetition_penalty: s.f64_in("repetition_penalty", d.repetition_penalty, 1.0, f64::MAX)?,
        no_repeat_ngram_size: s.usize("no_repeat_ngram_size", d.no_repeat_ngram_size)?,
        dump_attention: s.bool("dump_attention", d.dump_attention)?,
    };
    Ok(o)
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let doc = yaml::parse(&text, path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut c = Self::from_value(&doc, &base)?;
        c.apply_seed_env()?;
        Ok(c)
    }

    /// Applies [`SEED_ENV`] if set.
    pub fn apply_seed_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.training.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::config("training.seed", format!("{SEED_ENV}={v} is not an unsigned integer")))?;
        }
        Ok(())
    }

    /// Validates and default-fills a parsed document.
    pub fn from_value(doc: &Value, base: &Path) -> Result<Self> {
        let mut top = Section::new("", Some(doc))?;
        let name = top.str("name", "minis2t")?;
        let task: Task = top.parsed("task", "S2T")?;

        let mut d = top.section("data")?;
        let target_key = d.key_path("target");
        let target_field = match d.opt_str("target")?.as_deref() {
            None if task == Task::MT => TargetField::Translation,
            None | Some("transcript") => TargetField::Transcript,
            Some("translation") => TargetField::Translation,
            Some(other) => return Err(Error::config(target_key, format!("unknown `{other}` (transcript or translation)"))),
        };
        let target = read_text(d.section("text")?, base, "vocab.txt")?;
        let src_section = d.section("source_text")?;
        let source = match task {
            Task::MT => Some(read_text(src_section, base, "src_vocab.txt")?),
            Task::S2T => {
                src_section.finish().map_err(|_| {
                    Error::config("data.source_text", "only used by the MT task")
                })?;
                None
            }
        };
        let data = DataConfig {
            train: resolve(base, d.required_str("train")?),
            dev: resolve(base, d.required_str("dev")?),
            test: d.opt_str("test")?.map(|p| resolve(base, p)),
            target_field,
            target,
            source,
            protected: d
                .opt_str_list("protected")?
                .unwrap_or_else(|| DEFAULT_PROTECTED.iter().map(|s| s.to_string()).collect()),
            normalization: d.opt_str("normalization")?.map(|p| resolve(base, p)),
            normalize: d.bool("normalize", true)?,
            limits: LengthLimits {
                min_frames: d.usize("min_frames", 1)?,
                max_frames: d.opt_usize("max_frames")?,
                max_tokens: d.opt_usize("max_tokens")?,
            },
            frame_budget: d.positive("frame_budget", 8000)?,
            bucketing: d.bool("bucketing", true)?,
            prefetch: d.usize("prefetch", 2)?,
            audio: read_audio(d.section("audio")?, base)?,
        };
        d.finish()?;

        let model = top.section_value("model");

        let mut t = top.section("training")?;
        let early_key = t.key_path("early_stopping_metric");
        let default_metric = if data.target_field == TargetField::Translation { "bleu" } else { "wer" };
        let early_stopping_metric: Metric = t
            .str("early_stopping_metric", default_metric)?
            .parse()
            .map_err(|e: String| Error::config(early_key, e))?;
        let mut opt = t.section("optimizer")?;
        let od = AdamConfig::default();
        let optimizer = AdamConfig {
            learning_rate: opt.f64("learning_rate", od.learning_rate)?,
            beta1: opt.f64_in("beta1", od.beta1, 0.0, 0.999_999)?,
            beta2: opt.f64_in("beta2", od.beta2, 0.0, 0.999_999_999)?,
            eps: opt.f64_in("eps", od.eps, 0.0, 1.0)?,
        };
        if !(optimizer.learning_rate > 0.0) {
            return Err(Error::config("training.optimizer.learning_rate", "must be > 0"));
        }
        opt.finish()?;
        let schedule = read_schedule(t.section("schedule")?)?;
        let mut tr = t.section("transfer")?;
        let transfer = match (tr.opt_str("asr_checkpoint")?, tr.opt_str("mt_checkpoint")?) {
            (Some(a), Some(m)) => Some(TransferConfig {
                asr_checkpoint: resolve(base, a),
                mt_checkpoint: resolve(base, m),
            }),
            (None, None) => None,
            _ => {
                return Err(Error::config(
                    "training.transfer",
                    "needs both asr_checkpoint and mt_checkpoint",
                ))
            }
        };
        tr.finish()?;
        let training = TrainingConfig {
            ctc_weight: t.f64_in("ctc_weight", 0.3, 0.0, 1.0)?,
            label_smoothing: t.f64_in("label_smoothing", 0.1, 0.0, 0.999)?,
            seed: t.u64("seed", 42)?,
            max_steps: t.u64("max_steps", 10_000)?,
            validation_freq: t.positive("validation_freq", 500)? as u64,
            patience: t.usize("patience", 5)? as u32,
            keep_best: t.positive("keep_best", 3)?,
            early_stopping_metric,
            clip_grad_norm: t.opt_f64("clip_grad_norm")?,
            optimizer,
            schedule,
            model_dir: resolve(base, t.str("model_dir", "model")?),
            overwrite: t.bool("overwrite", false)?,
            resume: t.bool("resume", false)?,
            transfer,
        };
        t.finish()?;

        let mut s = top.section("testing")?;
        let decode = read_decode(&mut s)?;
        let metric_key = s.key_path("metric");
        let metric: Metric = s
            .str("metric", early_stopping_metric_name(training.early_stopping_metric))?
            .parse()
            .map_err(|e: String| Error::config(metric_key, e))?;
        let mut eval = EvalConfig::for_metric(metric);
        if let Some(c) = s.opt_str("case")? {
            eval.case = c.parse().map_err(|e: String| Error::config("testing.case", e))?;
        }
        if let Some(p) = s.opt_str("punctuation")? {
            eval.punctuation = p.parse().map_err(|e: String| Error::config("testing.punctuation", e))?;
        }
        if let Some(k) = s.opt_str("eval_tokenizer")? {
            eval.tokenizer = k.parse().map_err(|e: String| Error::config("testing.eval_tokenizer", e))?;
        }
        let testing = TestingConfig {
            decode,
            eval,
            write_scores: s.bool("write_scores", false)?,
        };
        s.finish()?;

        let mut l = top.section("logging")?;
        let logging = LoggingConfig {
            throughput: l.bool("throughput", true)?,
        };
        l.finish()?;
        top.finish()?;

        let c = RunConfig {
            name,
            task,
            data,
            model,
            training,
            testing,
            logging,
            base_dir: base.to_path_buf(),
        };
        // Fail early on model-section problems that do not depend on vocabularies.
        c.model_config(ResolvedDims {
            vocab_size: Some(64),
            src_vocab_size: Some(64),
            feature_dim: None,
        })?;
        Ok(c)
    }

    /// Resolves the model section; the feature dimension falls back to `data.audio.n_mels`.
    pub fn model_config(&self, mut dims: ResolvedDims) -> Result<ModelConfig> {
        if dims.feature_dim.is_none() {
            dims.feature_dim = Some(self.data.audio.frontend.n_mels);
        }
        ModelConfig::read(self.task, Section::new("model", Some(&self.model))?, dims)
    }

    /// Canonical, fully default-filled form. `model` is echoed as resolved
    /// with `dims` when given.
    pub fn to_value(&self, model: Option<&ModelConfig>) -> Value {
        let d = &self.data;
        let mut data = MapBuilder::new()
            .put("train", d.train.display().to_string())
            .put("dev", d.dev.display().to_string())
            .put_opt("test", d.test.as_ref().map(|p| p.display().to_string()))
            .put(
                "target",
                match d.target_field {
                    TargetField::Transcript => "transcript",
                    TargetField::Translation => "translation",
                },
            )
            .put("text", text_value(&d.target));
        if let Some(s) = &d.source {
            data = data.put("source_text", text_value(s));
        }
        let data = data
            .put("protected", d.protected.clone())
            .put_opt("normalization", d.normalization.as_ref().map(|p| p.display().to_string()))
            .put("normalize", d.normalize)
            .put("min_frames", d.limits.min_frames)
            .put_opt("max_frames", d.limits.max_frames)
            .put_opt("max_tokens", d.limits.max_tokens)
            .put("frame_budget", d.frame_budget)
            .put("bucketing", d.bucketing)
            .put("prefetch", d.prefetch)
            .put("audio", audio_value(&d.audio))
            .build();
        let t = &self.training;
        let mut training = MapBuilder::new()
            .put("ctc_weight", t.ctc_weight)
            .put("label_smoothing", t.label_smoothing)
            .put("seed", t.seed)
            .put("max_steps", t.max_steps)
            .put("validation_freq", t.validation_freq)
            .put("patience", t.patience as usize)
            .put("keep_best", t.keep_best)
            .put("early_stopping_metric", early_stopping_metric_name(t.early_stopping_metric))
            .put_opt("clip_grad_norm", t.clip_grad_norm)
            .put(
                "optimizer",
                MapBuilder::new()
                    .put("learning_rate", t.optimizer.learning_rate)
                    .put("beta1", t.optimizer.beta1)
                    .put("beta2", t.optimizer.beta2)
                    .put("eps", t.optimizer.eps)
                    .build(),
            )
            .put("schedule", schedule_value(&t.schedule))
            .put("model_dir", t.model_dir.display().to_string())
            .put("overwrite", t.overwrite)
            .put("resume", t.resume);
        if let Some(tr) = &t.transfer {
            training = training.put(
                "transfer",
                MapBuilder::new()
                    .put("asr_checkpoint", tr.asr_checkpoint.display().to_string())
                    .put("mt_checkpoint", tr.mt_checkpoint.display().to_string())
                    .build(),
            );
        }
        let o = &self.testing.decode;
        let e = &self.testing.eval;
        let testing = MapBuilder::new()
            .put("beam_size", o.beam_size)
            .put("max_output_length", o.max_output_length)
            .put("length_penalty", o.length_penalty)
            .put("repetition_penalty", o.repetition_penalty)
            .put("no_repeat_ngram_size", o.no_repeat_ngram_size)
            .put("dump_attention", o.dump_attention)
            .put("metric", early_stopping_metric_name(e.metric))
            .put(
                "case",
                match e.case {
                    crate::evaluation::Case::Lower => "lower",
                    crate::evaluation::Case::Keep => "keep",
                },
            )
            .put(
                "punctuation",
                match e.punctuation {
                    crate::evaluation::Punctuation::Strip => "strip",
                    crate::evaluation::Punctuation::Keep => "keep",
                },
            )
            .put(
                "eval_tokenizer",
                match e.tokenizer {
                    crate::evaluation::TokenizerKind::Tok13a => "13a",
                    crate::evaluation::TokenizerKind::None => "none",
                },
            )
            .put("write_scores", self.testing.write_scores)
            .build();
        let model_value = match model {
            Some(m) => match m.to_value() {
                Value::Map(mut entries) => {
                    entries.retain(|(k, _)| k != "task");
                    Value::Map(entries)
                }
                other => other,
            },
            None => self.model.clone(),
        };
        MapBuilder::new()
            .put("name", self.name.as_str())
            .put("task", self.task.as_str())
            .put("data", data)
            .put("model", model_value)
            .put("training", training.build())
            .put("testing", testing)
            .put("logging", MapBuilder::new().put("throughput", self.logging.throughput).build())
            .build()
    }

    pub fn dump(&self, model: Option<&ModelConfig>) -> String {
        yaml::dump(&self.to_value(model))
    }
}

fn early_stopping_metric_name(m: Metric) -> &'static str {
    match m {
        Metric::Wer => "wer",
        Metric::Bleu => "bleu",
        Metric::Chrf => "chrf",
    }
}
