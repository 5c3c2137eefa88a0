//! Training loop, transfer initialization and checkpoint averaging.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use crate::config::RunConfig;
use crate::data::{batch_rng, make_batches, prefetch, read_manifest, BatchLoader, ManifestEntry};
use crate::decoding::{greedy_search, DecodeOptions, ModelScorer};
use crate::error::{Error, Result};
use crate::evaluation::{self, EvalConfig, Metric};
use crate::model::{Mode, ModelConfig, S2TModel, Task};
use crate::pipeline::{build_loader, resolved_dims};
use crate::tensor::{Adam, Checkpoint, Graph, Record};

pub const LAST_CHECKPOINT: &str = "last.ms2t";
pub const BEST_CHECKPOINT: &str = "best.ms2t";
pub const VALIDATION_LOG: &str = "validation.tsv";
pub const RESOLVED_CONFIG: &str = "config.yaml";
pub const TRAIN_STATE: &str = "train_state.tsv";

/// Dropout draws use a stream family disjoint from the augmentation one.
const DROPOUT_SEED_XOR: u64 = 0x9e37_79b9_7f4a_7c15;

/// Aggregate teacher-forced loss over a dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetLoss {
    pub total: f64,
    pub xent: f64,
    pub ctc: Option<f64>,
    pub tokens: usize,
}

/// One row of the validation log.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidationRow {
    pub step: u64,
    pub loss: DatasetLoss,
    pub lr: f64,
    pub tokens_per_sec: Option<f64>,
    pub metric: f64,
}

impl ValidationRow {
    pub fn header(metric: Metric) -> String {
        format!("step\ttotal\txent\tctc\tlr\ttokens_per_sec\t{}", metric.name().to_lowercase())
    }

    pub fn to_tsv(&self) -> String {
        let ctc = self.loss.ctc.map_or("NA".to_string(), |c| format!("{c:.6}"));
        let tps = self.tokens_per_sec.map_or("NA".to_string(), |t| format!("{t:.1}"));
        format!(
            "{}\t{:.6}\t{:.6}\t{}\t{:e}\t{}\t{:.4}",
            self.step, self.loss.total, self.loss.xent, ctc, self.lr, tps, self.metric
        )
    }
}

/// Bookkeeping restored on resume.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub best_metric: Option<f64>,
    pub bad_validations: u32,
    /// `(metric, path)` of retained checkpoints, best first.
    pub kept: Vec<(f64, PathBuf)>,
}

impl TrainState {
    fn to_tsv(&self) -> String {
        let mut s = format!("step\t{}\n", self.step);
        if let Some(b) = self.best_metric {
            let _ = writeln!(s, "best\t{b:e}");
        }
        let _ = writeln!(s, "bad\t{}", self.bad_validations);
        for (m, p) in &self.kept {
            let _ = writeln!(s, "kept\t{m:e}\t{}", p.display());
        }
        s
    }

    fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut st = TrainState::default();
        for (i, line) in text.lines().enumerate() {
            let bad = || Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("malformed train state line `{line}`"),
            };
            let f: Vec<&str> = line.split('\t').collect();
            match f.as_slice() {
                ["step", v] => st.step = v.parse().map_err(|_| bad())?,
                ["best", v] => st.best_metric = Some(v.parse().map_err(|_| bad())?),
                ["bad", v] => st.bad_validations = v.parse().map_err(|_| bad())?,
                ["kept", m, p] => st.kept.push((m.parse().map_err(|_| bad())?, PathBuf::from(p))),
                _ => return Err(bad()),
            }
        }
        Ok(st)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub rows: Vec<ValidationRow>,
    pub stopped_early: bool,
    pub model_dir: PathBuf,
}

fn io_err(what: &str, p: &Path) -> impl FnOnce(std::io::Error) -> Error {
    let ctx = format!("{what} {}", p.display());
    move |e| Error::io(ctx, e)
}

/// Teacher-forced loss over `entries` in evaluation mode.
pub fn dataset_loss(
    model: &S2TModel<f32>,
    loader: &BatchLoader,
    entries: &[ManifestEntry],
    frame_budget: usize,
    ctc_weight: f64,
    label_smoothing: f64,
) -> Result<DatasetLoss> {
    let lengths: Vec<usize> = entries.iter().map(|e| loader.source_len(e)).collect();
    let plan = make_batches(&lengths, frame_budget, None, false)?;
    let (mut xent_sum, mut tokens) = (0.0, 0usize);
    let (mut ctc_sum, mut ctc_items) = (0.0, 0usize);
    let mut rng = batch_rng(0, 0);
    for item in &plan {
        let b = loader.load(entries, item, false, &mut rng)?;
        let mut g = Graph::inference();
        let out = model.loss(&mut g, &b.source, &b.source_lengths, &b.targets, ctc_weight, label_smoothing, &mut Mode::eval())?;
        xent_sum += out.xent * out.token_count as f64;
        tokens += out.token_count;
        if let Some(c) = out.ctc {
            let used = b.len() - out.ctc_skipped.len();
            ctc_sum += c * used as f64;
            ctc_items += used;
        }
    }
    let xent = if tokens > 0 { xent_sum / tokens as f64 } else { 0.0 };
    let ctc = (ctc_items > 0).then(|| ctc_sum / ctc_items as f64);
    let lambda = if model.config().has_ctc() { ctc_weight } else { 0.0 };
    let total = match ctc {
        Some(c) => (1.0 - lambda) * xent + lambda * c,
        None => xent,
    };
    Ok(DatasetLoss { total, xent, ctc, tokens })
}

/// Decodes every entry one at a time; utterances too short to encode give an
/// empty hypothesis.
pub fn decode_entries(
    model: &S2TModel<f32>,
    loader: &BatchLoader,
    entries: &[ManifestEntry],
    opts: &DecodeOptions,
) -> Result<Vec<crate::decoding::Hypothesis>> {
    let mut rng = batch_rng(0, 0);
    let mut out = Vec::with_capacity(entries.len());
    for i in 0..entries.len() {
        let b = loader.load(entries, &[i], false, &mut rng)?;
        let mut scorer = match ModelScorer::new(model, &b.source, b.source_lengths[0]) {
            Ok(s) => s,
            Err(Error::TooShort(msg)) => {
                log::warn!("{}: {msg}; emitting an empty hypothesis", entries[i].id);
                out.push(crate::decoding::Hypothesis {
                    tokens: vec![crate::tokenize::BOS_ID, crate::tokenize::EOS_ID],
                    score: f64::NEG_INFINITY,
                    normalized_score: f64::NEG_INFINITY,
                });
                continue;
            }
            Err(e) => return Err(e),
        };
        let hyp = if opts.beam_size == 1 {
            greedy_search(&mut scorer, opts)?
        } else {
            crate::decoding::search(&mut scorer, opts)?.swap_remove(0)
        };
        out.push(hyp);
    }
    Ok(out)
}

/// Greedy dev decoding scored with `eval`.
pub fn validation_metric(
    model: &S2TModel<f32>,
    loader: &BatchLoader,
    entries: &[ManifestEntry],
    max_output_length: usize,
    eval: &EvalConfig,
) -> Result<f64> {
    let opts = DecodeOptions {
        max_output_length,
        ..DecodeOptions::greedy()
    };
    let hyps: Vec<String> = decode_entries(model, loader, entries, &opts)?
        .iter()
        .map(|h| loader.target.decode(h.output()))
        .collect();
    let refs = entries
        .iter()
        .map(|e| e.target(loader.field).map(str::to_string))
        .collect::<Result<Vec<_>>>()?;
    evaluation::score(&hyps, &refs, eval)
}

fn better(a: f64, b: f64, lower_is_better: bool) -> bool {
    if lower_is_better {
        a < b
    } else {
        a > b
    }
}

fn save_last(dir: &Path, model: &S2TModel<f32>, adam: &Adam<f32>, state: &TrainState) -> Result<()> {
    model
        .to_checkpoint()
        .with_optimizer(model.params(), &adam.state)
        .save(&dir.join(LAST_CHECKPOINT))?;
    let p = dir.join(TRAIN_STATE);
    std::fs::write(&p, state.to_tsv()).map_err(io_err("writing", &p))
}

/// Builds the model to train: resumed, transferred, or fresh.
fn initial_model(cfg: &RunConfig, model_cfg: ModelConfig) -> Result<S2TModel<f32>> {
    match &cfg.training.transfer {
        None => S2TModel::new(model_cfg),
        Some(t) => {
            let asr = Checkpoint::load(&t.asr_checkpoint)?;
            let mt = Checkpoint::load(&t.mt_checkpoint)?;
            let (model, report) = init_from_checkpoints(model_cfg, &asr, &mt)?;
            let counts = report.iter().fold([0usize; 3], |mut c, (_, p)| {
                c[*p as usize] += 1;
                c
            });
            log::info!("transfer init: {} from asr, {} from mt, {} fresh", counts[0], counts[1], counts[2]);
            Ok(model)
        }
    }
}

/// Runs training as configured. Writes the resolved config, validation log,
/// best-k checkpoints, `best.ms2t` and `last.ms2t` (with optimizer state) into
/// `training.model_dir`.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let t = &cfg.training;
    let dir = t.model_dir.clone();
    let resuming = t.resume && dir.join(LAST_CHECKPOINT).exists();
    if dir.exists() && !resuming && !t.overwrite && std::fs::read_dir(&dir).map_err(io_err("reading", &dir))?.next().is_some() {
        return Err(Error::config(
            "training.model_dir",
            format!("{} is not empty (set overwrite or resume)", dir.display()),
        ));
    }
    std::fs::create_dir_all(&dir).map_err(io_err("creating", &dir))?;

    let train_entries = read_manifest(&cfg.data.train)?;
    let loader = build_loader(cfg, Some(&train_entries))?;
    let (train_entries, _) = crate::data::length_filter(train_entries, &loader.target.tokenizer, loader.field, &cfg.data.limits)?;
    if train_entries.is_empty() {
        return Err(Error::Data("no training entries left after filtering".into()));
    }
    let model_cfg = cfg.model_config(resolved_dims(&loader))?;
    let dev_entries: Vec<ManifestEntry> = read_manifest(&cfg.data.dev)?
        .into_iter()
        .filter(|e| model_cfg.subsampled_len(loader.source_len(e)) > 0)
        .collect();

    let (mut model, mut adam, mut state) = if resuming {
        let ckpt = Checkpoint::load(&dir.join(LAST_CHECKPOINT))?;
        let model = S2TModel::<f32>::from_checkpoint(&ckpt)?;
        if model.config() != &model_cfg {
            return Err(Error::config("model", "resumed checkpoint was trained with a different model config"));
        }
        let mut adam = Adam::new(t.optimizer.clone(), t.schedule.clone(), model.params())?;
        adam.state = ckpt
            .optimizer_state(model.params())?
            .ok_or_else(|| Error::Data("last checkpoint has no optimizer state".into()))?;
        let p = dir.join(TRAIN_STATE);
        let text = std::fs::read_to_string(&p).map_err(io_err("reading", &p))?;
        let state = TrainState::parse(&text, &p)?;
        log::info!("resuming at step {}", state.step);
        (model, adam, state)
    } else {
        let model = initial_model(cfg, model_cfg.clone())?;
        let adam = Adam::new(t.optimizer.clone(), t.schedule.clone(), model.params())?;
        (model, adam, TrainState::default())
    };

    let cfg_path = dir.join(RESOLVED_CONFIG);
    std::fs::write(&cfg_path, cfg.dump(Some(model.config()))).map_err(io_err("writing", &cfg_path))?;

    let metric = t.early_stopping_metric;
    let eval = if cfg.testing.eval.metric == metric {
        cfg.testing.eval.clone()
    } else {
        EvalConfig::for_metric(metric)
    };
    let lower = metric.lower_is_better();
    let log_path = dir.join(VALIDATION_LOG);
    if !resuming {
        std::fs::write(&log_path, format!("{}\n", ValidationRow::header(metric))).map_err(io_err("writing", &log_path))?;
    }
    let mut rows = Vec::new();

    if t.max_steps == 0 {
        save_last(&dir, &model, &adam, &state)?;
        return Ok(TrainOutcome {
            state,
            rows,
            stopped_early: false,
            model_dir: dir,
        });
    }

    let entries = Arc::new(train_entries);
    let loader = Arc::new(loader);
    let lengths: Vec<usize> = entries.iter().map(|e| loader.source_len(e)).collect();
    let lambda = if model.config().has_ctc() { t.ctc_weight } else { 0.0 };

    let mut epoch = 0u64;
    let mut epoch_start = 0u64;
    let mut tokens_since = 0usize;
    let mut clock = Instant::now();
    let mut stopped_early = false;
    'epochs: while state.step < t.max_steps {
        let plan = make_batches(&lengths, cfg.data.frame_budget, Some(t.seed ^ epoch.wrapping_mul(0x2545_f491_4f6c_dd1d)), cfg.data.bucketing)?;
        let n = plan.len() as u64;
        if epoch_start + n <= state.step {
            epoch_start += n;
            epoch += 1;
            continue;
        }
        let offset = (state.step - epoch_start) as usize;
        let todo: Vec<Vec<usize>> = plan[offset..].to_vec();
        let batches = prefetch(loader.clone(), entries.clone(), todo, true, t.seed, state.step, cfg.data.prefetch);
        for batch in batches {
            let batch = batch?;
            let mut drop_rng = batch_rng(t.seed ^ DROPOUT_SEED_XOR, state.step);
            let mut g = Graph::new();
            let out = model.loss(
                &mut g,
                &batch.source,
                &batch.source_lengths,
                &batch.targets,
                lambda,
                t.label_smoothing,
                &mut Mode {
                    dropout_rng: Some(&mut drop_rng),
                },
            )?;
            let value = g.value(out.loss).item();
            if !value.is_finite() {
                save_last(&dir, &model, &adam, &state)?;
                log::error!("training loss at step {} is {value}", state.step + 1);
                return Err(Error::Numeric { op: "training loss" });
            }
            let mut grads = g.backward(out.loss)?;
            let norm = match t.clip_grad_norm {
                Some(m) => grads.clip_param_norm(m),
                None => grads.param_norm(),
            };
            if !norm.is_finite() {
                save_last(&dir, &model, &adam, &state)?;
                log::error!("gradient norm at step {} is {norm}", state.step + 1);
                return Err(Error::Numeric { op: "gradient norm" });
            }
            let lr = adam.current_lr();
            adam.step(model.params_mut(), &grads)?;
            state.step += 1;
            tokens_since += out.token_count;
            log::debug!("step {} loss {value:.4} lr {lr:e}", state.step);

            if state.step % t.validation_freq == 0 || state.step == t.max_steps {
                let elapsed = clock.elapsed().as_secs_f64();
                let loss = dataset_loss(&model, &loader, &dev_entries, cfg.data.frame_budget, lambda, t.label_smoothing)?;
                let score = validation_metric(&model, &loader, &dev_entries, cfg.testing.decode.max_output_length, &eval)?;
                let row = ValidationRow {
                    step: state.step,
                    loss,
                    lr,
                    tokens_per_sec: cfg.logging.throughput.then(|| tokens_since as f64 / elapsed.max(1e-9)),
                    metric: score,
                };
                log::info!("validation {}", row.to_tsv());
                let mut f = std::fs::read_to_string(&log_path).unwrap_or_default();
                f.push_str(&row.to_tsv());
                f.push('\n');
                std::fs::write(&log_path, f).map_err(io_err("writing", &log_path))?;
                rows.push(row);
                tokens_since = 0;
                clock = Instant::now();

                adam.report_validation(score, lower);
                let improved = state.best_metric.map_or(true, |b| better(score, b, lower));
                if improved {
                    state.best_metric = Some(score);
                    state.bad_validations = 0;
                    model.to_checkpoint().save(&dir.join(BEST_CHECKPOINT))?;
                } else {
                    state.bad_validations += 1;
                }
                keep_best(&dir, &model, &mut state, score, t.keep_best, lower)?;
                save_last(&dir, &model, &adam, &state)?;
                if state.bad_validations >= t.patience && t.patience > 0 {
                    log::info!("early stop after {} validations without improvement", state.bad_validations);
                    stopped_early = true;
                    break 'epochs;
                }
            }
            if state.step >= t.max_steps {
                break 'epochs;
            }
        }
        epoch_start += n;
        epoch += 1;
    }
    save_last(&dir, &model, &adam, &state)?;
    Ok(TrainOutcome {
        state,
        rows,
        stopped_early,
        model_dir: dir,
    })
}

fn keep_best(dir: &Path, model: &S2TModel<f32>, state: &mut TrainState, score: f64, k: usize, lower: bool) -> Result<()> {
    let pos = state
        .kept
        .iter()
        .position(|(m, _)| better(score, *m, lower))
        .unwrap_or(state.kept.len());
    if pos >= k {
        return Ok(());
    }
    let path = dir.join(format!("step_{:08}.ms2t", state.step));
    model.to_checkpoint().save(&path)?;
    state.kept.insert(pos, (score, path));
    while state.kept.len() > k {
        let (_, old) = state.kept.pop().expect("non-empty");
        if old.exists() {
            std::fs::remove_file(&old).map_err(io_err("removing", &old))?;
        }
    }
    Ok(())
}

/// Where a transferred parameter came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Asr = 0,
    Mt = 1,
    Fresh = 2,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Asr => "asr",
            Provenance::Mt => "mt",
            Provenance::Fresh => "fresh",
        }
    }
}

fn record_for<'c>(ckpt: &'c Checkpoint, name: &str, shape: &[usize], which: &str) -> Result<&'c Record> {
    let r = ckpt
        .param(name)
        .ok_or_else(|| Error::Data(format!("{which} checkpoint has no parameter {name}")))?;
    let rs: Vec<usize> = r.shape.iter().map(|&d| d as usize).collect();
    if rs != shape {
        return Err(Error::Data(format!(
            "shape mismatch for {name}: model {shape:?}, {which} checkpoint {rs:?}"
        )));
    }
    Ok(r)
}

/// ST model with its encoder side (`frontend.*`, `encoder.*`) from an ASR
/// checkpoint and its decoder side (`decoder.*`) from an MT checkpoint. Other
/// parameters keep their fresh initialization. Returns the per-parameter
/// provenance in store order.
pub fn init_from_checkpoints(
    config: ModelConfig,
    asr: &Checkpoint,
    mt: &Checkpoint,
) -> Result<(S2TModel<f32>, Vec<(String, Provenance)>)> {
    if config.task != Task::S2T {
        return Err(Error::config("task", "transfer initialization builds an S2T model"));
    }
    let mut model = S2TModel::<f32>::new(config)?;
    let mut report = Vec::new();
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let p = model.params().get(id);
        let name = p.name.clone();
        let shape = p.value.shape().to_vec();
        let (prov, src) = if name.starts_with("frontend.") || name.starts_with("encoder.") {
            (Provenance::Asr, Some(record_for(asr, &name, &shape, "asr")?))
        } else if name.starts_with("decoder.") {
            (Provenance::Mt, Some(record_for(mt, &name, &shape, "mt")?))
        } else {
            (Provenance::Fresh, None)
        };
        if let Some(r) = src {
            model.params_mut().set(id, crate::tensor::Tensor::new(&shape, r.values.clone())?)?;
        }
        report.push((name, prov));
    }
    Ok((model, report))
}

/// Element-wise mean of shape-identical checkpoints; the embedded config of
/// the first is kept and optimizer state dropped.
pub fn average_checkpoints(ckpts: &[Checkpoint]) -> Result<Checkpoint> {
    let first = ckpts
        .first()
        .ok_or_else(|| Error::Contract("average_checkpoints needs at least one checkpoint".into()))?;
    let mut sums: Vec<Vec<f64>> = first.params.iter().map(|r| vec![0.0; r.values.len()]).collect();
    for (k, c) in ckpts.iter().enumerate() {
        if c.params.len() != first.params.len() {
            return Err(Error::Data(format!(
                "checkpoint #{k} has {} parameters, #0 has {}",
                c.params.len(),
                first.params.len()
            )));
        }
        for (i, r0) in first.params.iter().enumerate() {
            let r = c
                .param(&r0.name)
                .ok_or_else(|| Error::Data(format!("checkpoint #{k} lacks parameter {}", r0.name)))?;
            if r.shape != r0.shape {
                return Err(Error::Data(format!(
                    "shape mismatch for {}: {:?} in #0, {:?} in #{k}",
                    r0.name, r0.shape, r.shape
                )));
            }
            for (s, v) in sums[i].iter_mut().zip(&r.values) {
                *s += *v as f64;
            }
        }
    }
    let n = ckpts.len() as f64;
    Ok(Checkpoint {
        config: first.config.clone(),
        params: first
            .params
            .iter()
            .zip(sums)
            .map(|(r, s)| Record {
                name: r.name.clone(),
                shape: r.shape.clone(),
                values: s.into_iter().map(|v| (v / n) as f32).collect(),
            })
            .collect(),
        optimizer: Vec::new(),
    })
}
