use std::path::Path;
use std::str::FromStr;

use crate::config::{yaml, MapBuilder, Section, Value};
use crate::error::{Error, Result};
use crate::tokenize::RESERVED;

/// Input modality of a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    /// Filterbank features in, text out.
    S2T,
    /// Source tokens in, text out.
    MT,
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_uppercase().as_str() {
            "S2T" => Ok(Task::S2T),
            "MT" => Ok(Task::MT),
            _ => Err(format!("unknown task `{s}` (expected S2T or MT)")),
        }
    }
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::S2T => "S2T",
            Task::MT => "MT",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StackConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub ffn_dim: usize,
}

impl StackConfig {
    fn read(mut s: Section<'_>) -> Result<Self> {
        let c = StackConfig {
            layers: s.usize("layers", 2)?,
            heads: s.positive("heads", 4)?,
            dim: s.positive("dim", 256)?,
            ffn_dim: s.positive("ffn_dim", 1024)?,
        };
        let key = s.key_path("dim");
        s.finish()?;
        if c.dim % c.heads != 0 {
            return Err(Error::config(key, format!("{} is not divisible by {} heads", c.dim, c.heads)));
        }
        Ok(c)
    }

    fn to_value(&self) -> Value {
        MapBuilder::new()
            .put("layers", self.layers)
            .put("heads", self.heads)
            .put("dim", self.dim)
            .put("ffn_dim", self.ffn_dim)
            .build()
    }
}

/// Architecture hyperparameters. Everything needed to rebuild the parameter
/// layout is stored here, so a checkpoint is self-describing.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub task: Task,
    /// Filterbank dimension (S2T).
    pub feature_dim: usize,
    /// Source vocabulary size (MT).
    pub src_vocab_size: usize,
    pub num_conv_layers: usize,
    pub conv_kernel: usize,
    pub conv_channels: usize,
    pub encoder: StackConfig,
    pub decoder: StackConfig,
    pub vocab_size: usize,
    pub dropout: f64,
    pub max_positions: usize,
    pub init_seed: u64,
}

/// Values that come from outside the model section (vocabularies, audio setup).
#[derive(Clone, Copy, Debug, Default)]
pub struct ResolvedDims {
    pub vocab_size: Option<usize>,
    pub src_vocab_size: Option<usize>,
    pub feature_dim: Option<usize>,
}

impl ModelConfig {
    /// Small default layout, mostly for tests.
    pub fn tiny(task: Task, input_dim: usize, vocab_size: usize) -> Self {
        let stack = StackConfig {
            layers: 1,
            heads: 2,
            dim: 16,
            ffn_dim: 32,
        };
        ModelConfig {
            task,
            feature_dim: if task == Task::S2T { input_dim } else { 0 },
            src_vocab_size: if task == Task::MT { input_dim } else { 0 },
            num_conv_layers: if task == Task::S2T { 1 } else { 0 },
            conv_kernel: 3,
            conv_channels: 16,
            encoder: stack.clone(),
            decoder: stack,
            vocab_size,
            dropout: 0.0,
            max_positions: 512,
            init_seed: 1,
        }
    }

    /// Reads a `model` section. `task` comes from the top level.
    pub fn read(task: Task, mut s: Section<'_>, dims: ResolvedDims) -> Result<Self> {
        let feature_dim = s.opt_usize("feature_dim")?.or(dims.feature_dim);
        let src_vocab_size = s.opt_usize("src_vocab_size")?.or(dims.src_vocab_size);
        let vocab_size = s.opt_usize("vocab_size")?.or(dims.vocab_size);
        let fd_key = s.key_path("feature_dim");
        let c = ModelConfig {
            task,
            feature_dim: match task {
                Task::S2T => feature_dim.ok_or_else(|| {
                    Error::config(&fd_key, "S2T needs a feature dimension (model.feature_dim or data.audio.n_mels)")
                })?,
                Task::MT => 0,
            },
            src_vocab_size: match task {
                Task::MT => src_vocab_size
                    .ok_or_else(|| Error::config(s.key_path("src_vocab_size"), "MT needs a source vocabulary"))?,
                Task::S2T => 0,
            },
            num_conv_layers: s.usize("conv_layers", 2)?,
            conv_kernel: s.positive("conv_kernel", 3)?,
            conv_channels: s.positive("conv_channels", 256)?,
            encoder: StackConfig::read(s.section("encoder")?)?,
            decoder: StackConfig::read(s.section("decoder")?)?,
            vocab_size: vocab_size.ok_or_else(|| Error::config(s.key_path("vocab_size"), "vocabulary size unknown"))?,
            dropout: s.f64_in("dropout", 0.1, 0.0, 0.99)?,
            max_positions: s.positive("max_positions", 1024)?,
            init_seed: s.u64("init_seed", 42)?,
        };
        s.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= RESERVED.len() {
            return Err(Error::config("model.vocab_size", "vocabulary has no tokens besides the reserved ones"));
        }
        if self.task == Task::S2T && self.feature_dim == 0 {
            return Err(Error::config("model.feature_dim", "must be positive"));
        }
        if self.task == Task::MT && self.src_vocab_size == 0 {
            return Err(Error::config("model.src_vocab_size", "must be positive"));
        }
        for (name, s) in [("encoder", &self.encoder), ("decoder", &self.decoder)] {
            if s.dim % s.heads != 0 {
                return Err(Error::config(format!("model.{name}.dim"), "not divisible by the head count"));
            }
        }
        Ok(())
    }

    /// Whether the model carries a CTC projection (speech input only).
    pub fn has_ctc(&self) -> bool {
        self.task == Task::S2T
    }

    pub fn to_value(&self) -> Value {
        MapBuilder::new()
            .put("task", self.task.as_str())
            .put("feature_dim", self.feature_dim)
            .put("src_vocab_size", self.src_vocab_size)
            .put("conv_layers", self.num_conv_layers)
            .put("conv_kernel", self.conv_kernel)
            .put("conv_channels", self.conv_channels)
            .put("encoder", self.encoder.to_value())
            .put("decoder", self.decoder.to_value())
            .put("vocab_size", self.vocab_size)
            .put("dropout", self.dropout)
            .put("max_positions", self.max_positions)
            .put("init_seed", self.init_seed)
            .build()
    }

    pub fn to_yaml(&self) -> String {
        yaml::dump(&Value::Map(vec![("model".into(), self.to_value())]))
    }

    /// Inverse of [`ModelConfig::to_yaml`].
    pub fn from_yaml(text: &str) -> Result<Self> {
        let doc = yaml::parse(text, Path::new("<checkpoint config>"))?;
        let mut top = Section::new("", Some(&doc))?;
        let mut m = top.section("model")?;
        let task: Task = m.parsed("task", "S2T")?;
        let c = Self::read(task, m, ResolvedDims::default())?;
        top.finish()?;
        Ok(c)
    }

    /// Output length after subsampling an input of `len` frames.
    pub fn subsampled_len(&self, len: usize) -> usize {
        match self.task {
            Task::MT => len,
            Task::S2T => {
                (0..self.num_conv_layers).fold(len, |l, _| crate::tensor::conv_out_len(l, self.conv_kernel, 2))
            }
        }
    }
}
